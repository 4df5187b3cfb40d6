"""Corpus low-rankness profiling and energy curves."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import AtpError, DegenerateInputError, InvalidInputError
from .linalg import energy_ratio, exact_svd, svd_entropy
from .matio import as_matrix, load_matrix, write_matx

DEFAULT_BINS = 50


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    length: int
    label: str | None = None


@dataclass
class CorpusManifest:
    """Sequence files plus the length buckets used to group them.

    Relative paths resolve against ``root`` (the manifest's directory when
    loaded from disk).  Buckets are closed intervals ``[lo, hi]``; an empty
    list means a single bucket spanning every length.
    """

    entries: list[ManifestEntry] = field(default_factory=list)
    buckets: list[tuple[int, int]] = field(default_factory=list)
    root: Path | None = None

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def to_dict(self) -> dict:
        return {
            "entries": [
                {k: v for k, v in asdict(e).items() if v is not None} for e in self.entries
            ],
            "bins": [list(b) for b in self.buckets],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: dict, root=None) -> "CorpusManifest":
        try:
            entries = [
                ManifestEntry(str(e["path"]), int(e["length"]), e.get("label"))
                for e in data.get("entries", [])
            ]
            buckets = [(int(lo), int(hi)) for lo, hi in data.get("bins", [])]
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed manifest: {exc}") from exc
        for lo, hi in buckets:
            if lo > hi:
                raise InvalidInputError(f"empty length bucket [{lo}, {hi}]")
        return cls(entries, buckets, Path(root) if root is not None else None)

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}: {exc}") from exc
        return cls.from_dict(data, root=path.parent)


@dataclass(frozen=True)
class SequenceRecord:
    path: str
    label: str | None
    L: int
    mu: float
    effective_rank: int
    ratio: float


@dataclass
class BucketHistogram:
    lo: int
    hi: int
    count: int
    median_ratio: float | None
    edges: list[float]
    densities: list[float]


@dataclass
class ProfileReport:
    records: list[SequenceRecord]
    buckets: list[BucketHistogram]
    errors: list[dict]

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "buckets": [asdict(b) for b in self.buckets],
            "errors": self.errors,
        }

    def csv_rows(self) -> list[str]:
        """``bucket,bin,density`` lines; ``bin`` is the bin centre."""
        rows = ["bucket,bin,density"]
        for b in self.buckets:
            for lo, hi, dens in zip(b.edges[:-1], b.edges[1:], b.densities):
                rows.append(f"{b.lo}-{b.hi},{(lo + hi) / 2:.6f},{dens:.6f}")
        return rows


def _profile_one(manifest: CorpusManifest, entry: ManifestEntry) -> SequenceRecord:
    X = load_matrix(manifest.resolve(entry))
    if X.shape[0] != entry.length:
        raise InvalidInputError(
            f"{entry.path}: manifest length {entry.length}, file has {X.shape[0]} rows"
        )
    rep = svd_entropy(exact_svd(X).singular_values, X.shape[0])
    return SequenceRecord(entry.path, entry.label, X.shape[0], rep.mu, rep.effective_rank, rep.ratio)


def _histogram(lo: int, hi: int, ratios: list[float], bins: int) -> BucketHistogram:
    if not ratios:
        return BucketHistogram(lo, hi, 0, None, [], [])
    values = np.sort(np.asarray(ratios))
    dens, edges = np.histogram(values, bins=bins, density=True)
    return BucketHistogram(lo, hi, len(values), float(np.median(values)),
                           edges.tolist(), dens.tolist())


def profile_corpus(manifest: CorpusManifest, bins: int = DEFAULT_BINS,
                   workers: int = 1) -> ProfileReport:
    """SVD-entropy ratio for every sequence, histogrammed per length bucket.

    Unreadable or inconsistent entries become error records and profiling
    carries on.  Records are sorted by path so the report does not depend on
    manifest order.
    """
    if not manifest.entries:
        raise InvalidInputError("corpus manifest has no entries")
    if bins < 1:
        raise InvalidInputError(f"bins must be positive, got {bins}")

    def run(entry):
        try:
            return _profile_one(manifest, entry), None
        except (AtpError, OSError, ValueError) as exc:
            return None, {"path": entry.path, "error": f"{type(exc).__name__}: {exc}"}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, manifest.entries))
    else:
        results = [run(e) for e in manifest.entries]

    records = sorted((r for r, _ in results if r is not None), key=lambda r: (r.path, r.L))
    errors = sorted((e for _, e in results if e is not None), key=lambda e: e["path"])

    buckets = manifest.buckets
    if not buckets and records:
        buckets = [(min(r.L for r in records), max(r.L for r in records))]
    hists = []
    for lo, hi in buckets:
        ratios = [r.ratio for r in records if lo <= r.L <= hi]
        hists.append(_histogram(lo, hi, ratios, bins))
    return ProfileReport(records, hists, errors)


def energy_curve(X, fractions) -> list[tuple[float, float]]:
    """Energy kept by exact truncations at ``r = max(1, ceil(f * min(L, d)))``."""
    X = as_matrix(X, name="X")
    fr = [float(f) for f in fractions]
    if any(not 0.0 < f <= 1.0 for f in fr):
        raise InvalidInputError("fractions must lie in (0, 1]")
    if any(b < a for a, b in zip(fr, fr[1:])):
        raise InvalidInputError("fractions must be sorted ascending")
    if not np.any(X):
        raise DegenerateInputError("energy curve of a zero matrix is undefined")
    svd = exact_svd(X)
    m = min(X.shape)
    out = []
    for f in fr:
        r = max(1, min(m, int(math.ceil(f * m - 1e-9))))
        out.append((f, energy_ratio(X, svd.truncate(r))))
    return out


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic corpus of ``A B + noise_level * N`` matrices.

    ``lengths`` may be one length or a sequence cycled over the ``count``
    matrices.  ``A`` and ``B`` are random orthonormal frames scaled so the
    noiseless part has a flat spectrum of ``intrinsic_rank`` equal values
    and unit entry RMS; ``N`` is standard normal.
    """

    count: int
    lengths: int | tuple[int, ...]
    d: int
    intrinsic_rank: int
    noise_level: float = 0.0
    seed: int = 0

    def length_list(self) -> list[int]:
        ls = self.lengths if isinstance(self.lengths, (list, tuple)) else (self.lengths,)
        return [int(x) for x in ls]


def _frame(rng, n, k):
    Q, R = np.linalg.qr(rng.standard_normal((n, k)))
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def synth_matrix(rng, L, d, k, noise_level) -> np.ndarray:
    A = _frame(rng, L, k)
    B = _frame(rng, d, k)
    X = math.sqrt(L * d / k) * (A @ B.T)
    if noise_level:
        X = X + noise_level * rng.standard_normal((L, d))
    return X


def synth_corpus(spec: SynthSpec, out_dir) -> CorpusManifest:
    """Write ``spec.count`` MATX files plus ``manifest.json`` into ``out_dir``."""
    lengths = spec.length_list()
    if spec.count < 0:
        raise InvalidInputError("count must be non-negative")
    if spec.noise_level < 0:
        raise InvalidInputError("noise_level must be non-negative")
    if not lengths or spec.d < 1:
        raise InvalidInputError("need at least one length and a positive width")
    for L in lengths:
        if not 1 <= spec.intrinsic_rank <= min(L, spec.d):
            raise InvalidInputError(
                f"intrinsic_rank {spec.intrinsic_rank} outside [1, min(L={L}, d={spec.d})]"
            )
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    rng = np.random.default_rng(spec.seed)
    entries = []
    for i in range(spec.count):
        L = lengths[i % len(lengths)]
        X = synth_matrix(rng, L, spec.d, spec.intrinsic_rank, spec.noise_level)
        name = f"seq_{i:05d}.matx"
        try:
            write_matx(out_dir / name, X)
        except OSError as exc:
            raise OSError(f"cannot write {out_dir / name}: {exc}") from exc
        entries.append(ManifestEntry(name, L))
    buckets = [(L, L) for L in sorted(set(lengths))] if spec.count else []
    manifest = CorpusManifest(entries, buckets, out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
