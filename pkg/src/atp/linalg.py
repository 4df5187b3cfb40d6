"""Exact and alternating low-rank factorizations, SVD-entropy and rank policies."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.linalg import get_blas_funcs, get_lapack_funcs

from .counters import hold, matmul, product_counts, record
from .errors import (
    DegenerateComponentError,
    DegenerateInputError,
    InvalidInputError,
    NumericError,
    RankDeficiencyError,
)
from .matio import as_matrix

EXACT_TRUNCATED = "exact-truncated"
ALTERNATING = "alternating"

MAX_REDRAWS = 3
_NORM_FLOOR = 1e-300
_COLLAPSE_TOL = 1e-12
# Cholesky-QR is only trusted while every normalized column keeps at least
# this much of its norm after projection; below it we fall back to Householder.
_CHOLQR_MIN_PIVOT = 1e-5


def _ceil(x: float) -> int:
    """Ceiling that forgives the last few ulps (2**log2(3) must give 3, not 4)."""
    return int(math.ceil(x - 1e-9 * max(1.0, abs(x))))


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T

    def truncate(self, r: int) -> "LowRankFactors":
        """Best rank-``r`` factors: U = left vectors, Xp rows = sigma_i * v_i."""
        m = len(self.singular_values)
        if not 1 <= r <= m:
            raise InvalidInputError(f"rank {r} outside [1, {m}]")
        U = self.left_vectors[:, :r].copy()
        Xp = self.singular_values[:r, None] * self.right_vectors[:, :r].T
        return LowRankFactors(U, Xp, orthonormal=True, method=EXACT_TRUNCATED)


@dataclass(frozen=True)
class LowRankFactors:
    """``X ~= U @ Xp`` with ``U`` of shape (L, r) and ``Xp`` of shape (r, d)."""

    U: np.ndarray
    Xp: np.ndarray
    orthonormal: bool = False
    method: str = ALTERNATING

    def __post_init__(self):
        if self.U.ndim != 2 or self.Xp.ndim != 2:
            raise InvalidInputError("U and Xp must be 2-D")
        if self.U.shape[1] != self.Xp.shape[0]:
            raise InvalidInputError(
                f"U has {self.U.shape[1]} columns but Xp has {self.Xp.shape[0]} rows"
            )
        if self.method not in (EXACT_TRUNCATED, ALTERNATING):
            raise InvalidInputError(f"unknown factorization method {self.method!r}")

    @property
    def r(self) -> int:
        return self.U.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape[0], self.Xp.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.U @ self.Xp

    def orthonormality_defect(self) -> float:
        """max |U^T U - I|."""
        G = self.U.T @ self.U
        return float(np.max(np.abs(G - np.eye(self.r))))


@dataclass(frozen=True)
class EntropyReport:
    mu: float
    effective_rank: int
    ratio: float
    length: int

    def to_dict(self) -> dict:
        return {
            "L": self.length,
            "mu": self.mu,
            "effective_rank": self.effective_rank,
            "ratio": self.ratio,
        }


# ---------------------------------------------------------------------------
# rank policies


class RankPolicy:
    """Rule mapping a sequence (length, width, spectrum) to a kept rank."""

    needs_spectrum = False

    def _raw(self, L: int, report: EntropyReport | None) -> int:
        raise NotImplementedError

    def resolve(self, L: int, d: int, report: EntropyReport | None = None) -> int:
        if L < 1 or d < 1:
            raise InvalidInputError(f"dimensions must be positive, got L={L}, d={d}")
        return max(1, min(self._raw(L, report), L, d))

    def to_dict(self) -> dict:
        raise NotImplementedError

    @staticmethod
    def from_dict(data: dict) -> "RankPolicy":
        kind = data.get("type")
        try:
            if kind == "fixed":
                return Fixed(int(data["r"]))
            if kind == "fraction":
                return Fraction(float(data["f"]))
            if kind == "entropy":
                return Entropy(float(data.get("scale", 1.0)))
        except KeyError as exc:
            raise InvalidInputError(f"rank policy {data!r} is missing {exc}") from None
        raise InvalidInputError(f"unknown rank policy {data!r}")


@dataclass(frozen=True)
class Fixed(RankPolicy):
    r: int

    def __post_init__(self):
        if int(self.r) != self.r or self.r < 1:
            raise InvalidInputError(f"fixed rank must be a positive integer, got {self.r}")

    def _raw(self, L, report):
        return self.r

    def to_dict(self):
        return {"type": "fixed", "r": self.r}


@dataclass(frozen=True)
class Fraction(RankPolicy):
    f: float

    def __post_init__(self):
        if not (0.0 < self.f <= 1.0):
            raise InvalidInputError(f"fraction must lie in (0, 1], got {self.f}")

    def _raw(self, L, report):
        return max(1, _ceil(self.f * L))

    def to_dict(self):
        return {"type": "fraction", "f": self.f}


@dataclass(frozen=True)
class Entropy(RankPolicy):
    scale: float = 1.0
    needs_spectrum = True

    def __post_init__(self):
        if not (self.scale > 0.0 and math.isfinite(self.scale)):
            raise InvalidInputError(f"entropy scale must be positive, got {self.scale}")

    def _raw(self, L, report):
        if report is None:
            raise InvalidInputError("entropy policy needs an EntropyReport or a spectrum")
        return min(L, _ceil(self.scale * 2.0**report.mu))

    def to_dict(self):
        return {"type": "entropy", "scale": self.scale}


# ---------------------------------------------------------------------------
# exact SVD and entropy


def _fix_signs(U: np.ndarray, V: np.ndarray) -> None:
    """Flip pairs in place so the first nonzero entry of each right vector is positive."""
    for j in range(V.shape[1]):
        col = V[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            V[:, j] = -col
            U[:, j] = -U[:, j]


def exact_svd(X) -> SvdResult:
    """Thin SVD (LAPACK) with a deterministic sign convention."""
    X = as_matrix(X, name="X")
    try:
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
    except np.linalg.LinAlgError:
        try:
            U, s, Vt = scipy.linalg.svd(X, full_matrices=False, lapack_driver="gesvd")
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"SVD did not converge: {exc}") from exc
    V = Vt.T.copy()
    U = U.copy()
    _fix_signs(U, V)
    return SvdResult(s, U, V)


def exact_truncation(X, r: int) -> LowRankFactors:
    return exact_svd(X).truncate(r)


def svd_entropy(singular_values, L: int) -> EntropyReport:
    """Base-2 SVD-entropy ``mu = -log2(sum(sbar_i**2))``, ``sbar = s / sum(s)``.

    ``2**mu`` reads as a count of principal components; the effective rank
    is its ceiling and ``ratio`` is that count over the sequence length.
    """
    s = np.asarray(singular_values, dtype=np.float64).ravel()
    if s.size == 0:
        raise InvalidInputError("empty spectrum")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise InvalidInputError("singular values must be finite and non-negative")
    if L < 1:
        raise InvalidInputError(f"L must be positive, got {L}")
    s = np.sort(s)[::-1]
    total = s.sum()
    if not total > 0:
        raise DegenerateInputError("spectrum is identically zero")
    sbar = s / total
    inv_purity = 1.0 / float(np.sum(sbar * sbar))
    m = min(s.size, L)
    inv_purity = min(max(inv_purity, 1.0), float(s.size))
    mu = max(0.0, math.log2(inv_purity))
    eff = min(max(1, _ceil(inv_purity)), m)
    return EntropyReport(mu=mu, effective_rank=eff, ratio=eff / L, length=L)


def select_rank(source, policy: RankPolicy, L: int, d: int) -> int:
    """Resolve ``policy`` to a rank in ``[1, min(L, d)]``.

    ``source`` is an :class:`EntropyReport`, a singular-value spectrum, or
    ``None`` for policies that ignore the spectrum.
    """
    report = source
    if source is not None and not isinstance(source, EntropyReport):
        report = svd_entropy(source, L)
    return policy.resolve(L, d, report)


# ---------------------------------------------------------------------------
# alternating factorization


def _degenerate(sq: float) -> bool:
    return not (sq > 0.0) or not math.isfinite(1.0 / sq) or math.sqrt(sq) < _NORM_FLOOR


# row blocks of the residual sized to stay in cache across one fused sweep
_CHUNK_BYTES = 1 << 19


def _sweep(chunks, ger, pending, v, vv, u):
    """One pass over the residual: optional deflation, ``u = R v / vv``, returns ``R^T u``.

    Each row block is deflated, multiplied by ``v`` and then by ``u`` while it
    is still in cache, so the residual is streamed once instead of three times.
    """
    L = u.shape[0]
    d = v.shape[0]
    acc = None
    for a, block in chunks:
        b = a + block.shape[0]
        if pending is not None:
            ger(-1.0, pending[1], pending[0][a:b], a=block.T, overwrite_a=True)
        uc = block @ v
        uc /= vv
        u[a:b] = uc
        t = block.T @ uc
        if acc is None:
            acc = t
        else:
            acc += t
    # same totals as the two unblocked products: the block partials add d * (nblocks - 1)
    record(*product_counts(L, d, 1))
    record(*product_counts(d, L, 1))
    return acc


def alternating_lowrank(X, r: int, inner_iters: int = 2, seed: int = 0) -> LowRankFactors:
    """Greedy rank-1 fitting with deflation.

    For each of the ``r`` components, starting from a standard-normal ``v``,
    run ``inner_iters`` rounds of ``u = X v / |v|^2``, ``v = X^T u / |u|^2``
    and then deflate ``X -= u v^T``.  Columns of ``U`` are the ``u_i``; rows
    of ``Xp`` are the ``v_i`` with the singular value folded in.

    Costs ``(2 * inner_iters + 1) * r * L * d`` multiplies.  A component whose
    iterate collapses to zero norm is re-drawn up to ``MAX_REDRAWS`` times.
    """
    X = as_matrix(X, name="X")
    L, d = X.shape
    if int(r) != r or not 1 <= r <= min(L, d):
        raise InvalidInputError(f"rank {r} outside [1, {min(L, d)}]")
    if int(inner_iters) != inner_iters or inner_iters < 1:
        raise InvalidInputError(f"inner_iters must be a positive integer, got {inner_iters}")
    rng = np.random.default_rng(seed)
    dt = X.dtype
    residual = np.array(X, dtype=dt, order="C", copy=True)
    rows = max(1, _CHUNK_BYTES // (d * dt.itemsize))
    chunks = [(a, residual[a:a + rows]) for a in range(0, L, rows)]
    ger = get_blas_funcs("ger", (residual[:1].T,))
    U = np.empty((L, r), dtype=dt)
    Xp = np.empty((r, d), dtype=dt)
    hold(L * d + L * r + r * d)

    pending = None
    for i in range(r):
        for _ in range(MAX_REDRAWS + 1):
            v = rng.standard_normal(d).astype(dt, copy=False)
            u = None
            for _ in range(inner_iters):
                vv = float(v @ v)
                if _degenerate(vv):
                    break
                u = np.empty(L, dtype=dt)
                w = _sweep(chunks, ger, pending, v, dt.type(vv), u)
                pending = None
                uu = float(u @ u)
                if _degenerate(uu):
                    break
                v = w / dt.type(uu)
            else:
                if not _degenerate(float(v @ v)):
                    break
        else:
            raise DegenerateComponentError(i, MAX_REDRAWS)
        U[:, i] = u
        Xp[i] = v
        record(L * d, L * d)
        pending = (U[:, i], Xp[i])
    # the last deflation is part of the counted work
    for a, block in chunks:
        ger(-1.0, pending[1], pending[0][a:a + block.shape[0]], a=block.T, overwrite_a=True)
    return LowRankFactors(U, Xp, orthonormal=False, method=ALTERNATING)


# ---------------------------------------------------------------------------
# re-orthogonalization


def _householder(Q: np.ndarray, P: np.ndarray):
    Qh, Rh = np.linalg.qr(Q)
    diag = np.diag(Rh)
    for j, rjj in enumerate(np.abs(diag)):
        if rjj < _COLLAPSE_TOL:
            raise RankDeficiencyError(j)
    signs = np.where(diag < 0, -1.0, 1.0).astype(Q.dtype)
    Qh = Qh * signs
    Rh = Rh * signs[:, None]
    return Qh, matmul(Rh, P)


def reorthogonalize(factors: LowRankFactors) -> LowRankFactors:
    """Replace ``U`` by an orthonormal basis of its column space, keeping ``U @ Xp``.

    Columns are first normalized, then two passes of Cholesky-QR are applied
    (Householder QR takes over if the Gram matrix is too ill-conditioned).
    """
    U = factors.U
    P = factors.Xp
    L, r = U.shape
    dt = U.dtype
    norms = np.linalg.norm(U, axis=0)
    for j, n in enumerate(norms):
        if not n > 0 or not math.isfinite(n):
            raise RankDeficiencyError(j)
    Q = U / norms
    P = P * norms[:, None].astype(dt)
    hold(L * r + r * r + r * P.shape[1])

    potrf = get_lapack_funcs("potrf", (Q,))
    for _ in range(2):
        G = matmul(Q.T, Q)
        R, info = potrf(G, lower=False, clean=True)
        if info != 0 or np.min(np.abs(np.diag(R))) < _CHOLQR_MIN_PIVOT:
            Q, P = _householder(Q, P)
            break
        Rinv = scipy.linalg.solve_triangular(R, np.eye(r, dtype=dt), lower=False)
        Q = matmul(Q, Rinv)
        P = matmul(R, P)
    return LowRankFactors(np.ascontiguousarray(Q), np.ascontiguousarray(P),
                          orthonormal=True, method=factors.method)


# ---------------------------------------------------------------------------
# energy


def relative_residual(X, factors: LowRankFactors) -> float:
    X = as_matrix(X, name="X")
    nx = np.linalg.norm(X)
    if nx == 0:
        raise DegenerateInputError("zero matrix has no relative residual")
    return float(np.linalg.norm(X - factors.reconstruct()) / nx)


def energy_ratio(X, factors: LowRankFactors) -> float:
    """Captured energy ``|Xp|_F^2 / |X|_F^2`` (``|U Xp|_F^2`` when U is not orthonormal)."""
    X = as_matrix(X, name="X")
    if factors.shape != X.shape:
        raise InvalidInputError(f"factors reconstruct {factors.shape}, X is {X.shape}")
    total = float(np.sum(X * X))
    if total == 0.0:
        raise DegenerateInputError("energy ratio of a zero matrix is undefined")
    kept = factors.Xp if factors.orthonormal else factors.reconstruct()
    return float(np.sum(kept * kept)) / total
