"""Command-line front end.

Exit codes: 0 success, 1 usage or fatal error, 2 partial failure,
3 resource refusal, 4 check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, bench, gradcheck
from .errors import AtpError, InvalidInputError, MemoryBudgetError
from .linalg import (
    Entropy,
    Fixed,
    Fraction,
    alternating_lowrank,
    energy_ratio,
    exact_svd,
    relative_residual,
    reorthogonalize,
    select_rank,
)
from .matio import load_matrix, save_matrix, write_matx
from .model import encoder_forward, load_layer

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL, EXIT_REFUSED, EXIT_CHECK = 0, 1, 2, 3, 4

_DTYPES = {"f32": np.float32, "f64": np.float64}


class UsageError(Exception):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(args, text: str) -> None:
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _load(path, args):
    return load_matrix(path).astype(_DTYPES[args.precision])


# ---------------------------------------------------------------------------
# commands


def cmd_profile(args) -> int:
    path = Path(args.manifest)
    if not path.is_file():
        print(f"error: manifest {path} not found", file=sys.stderr)
        return EXIT_FATAL
    manifest = analysis.CorpusManifest.load(path)
    if args.buckets:
        buckets = []
        for part in args.buckets.split(","):
            try:
                lo, hi = (int(x) for x in part.split("-"))
            except ValueError:
                raise UsageError(f"bucket {part!r} is not of the form LO-HI") from None
            buckets.append((lo, hi))
        manifest.buckets = buckets
    report = analysis.profile_corpus(manifest, bins=args.bins, workers=args.workers)
    if args.format == "csv":
        _emit(args, "\n".join(report.csv_rows()) + "\n")
    else:
        _emit(args, _dumps(report.to_dict()))
    for err in report.errors:
        print(f"warning: {err['path']}: {err['error']}", file=sys.stderr)
    if report.errors:
        return EXIT_PARTIAL if report.records else EXIT_FATAL
    return EXIT_OK


def _policy(args):
    given = [p for p in (args.rank, args.fraction, args.entropy) if p is not None]
    if len(given) > 1:
        raise UsageError("choose at most one of --rank, --fraction, --entropy")
    if args.rank is not None:
        return Fixed(args.rank)
    if args.entropy is not None:
        return Entropy(args.entropy)
    return Fraction(args.fraction if args.fraction is not None else 0.5)


def cmd_decompose(args) -> int:
    try:
        policy = _policy(args)
    except InvalidInputError as exc:
        raise UsageError(str(exc)) from None
    X = _load(args.input, args)
    L, d = X.shape
    svd = exact_svd(X) if (args.method == "exact" or policy.needs_spectrum) else None
    r = select_rank(svd.singular_values if svd is not None else None, policy, L, d)
    if args.method == "exact":
        factors = svd.truncate(r)
    else:
        factors = alternating_lowrank(X, r, args.inner_iters, args.seed)
        if args.reorthogonalize:
            factors = reorthogonalize(factors)
    out = Path(args.output or ".")
    out.mkdir(parents=True, exist_ok=True)
    write_matx(out / "U.matx", factors.U)
    write_matx(out / "Xp.matx", factors.Xp)
    summary = {
        "r": r,
        "method": factors.method,
        "orthonormal": factors.orthonormal,
        "residual": relative_residual(X, factors) if np.any(X) else 0.0,
        "energy_ratio": energy_ratio(X, factors) if np.any(X) else None,
        "orthonormality_defect": factors.orthonormality_defect(),
        "policy": policy.to_dict(),
    }
    (out / "factors.json").write_text(_dumps(summary))
    return EXIT_OK


def _discrepancy(a, b) -> dict:
    denom = float(np.linalg.norm(b)) or 1.0
    return {"max_abs": float(np.max(np.abs(a - b))),
            "rel_fro": float(np.linalg.norm(a - b)) / denom}


def cmd_attend(args) -> int:
    X = _load(args.x, args)
    layer, pe = load_layer(args.weights)
    if X.shape[1] != layer.attn_weights.d:
        raise InvalidInputError(
            f"shape mismatch: X has width {X.shape[1]} but wq has {layer.attn_weights.d} rows"
        )
    modes = ("standard", "lowrank", "oracle") if args.compare else (args.mode,)
    outputs = {m: encoder_forward(X, layer, pe, m, seed=args.seed) for m in modes}
    if args.output:
        if args.format == "csv" and not args.output.lower().endswith(".csv"):
            np.savetxt(args.output, outputs[args.mode], delimiter=",", fmt="%.17g")
        else:
            save_matrix(args.output, outputs[args.mode])
    if args.compare:
        report = {
            "lowrank_vs_oracle": _discrepancy(outputs["lowrank"], outputs["oracle"]),
            "lowrank_vs_standard": _discrepancy(outputs["lowrank"], outputs["standard"]),
            "oracle_vs_standard": _discrepancy(outputs["oracle"], outputs["standard"]),
        }
        sys.stdout.write(_dumps(report))
    elif not args.output:
        np.savetxt(sys.stdout, outputs[args.mode], delimiter=",", fmt="%.17g")
    return EXIT_OK


def cmd_bench(args) -> int:
    lengths = _int_list(args.lengths)
    dims = _int_list(args.dims)
    if len(dims) != 2:
        raise UsageError("--dims takes D,D_PRIME")
    if args.repeats < 1:
        raise UsageError("--repeats must be at least 1")
    seeds = _int_list(args.seeds) if args.seeds else [args.seed]
    try:
        report = bench.scaling_sweep(lengths, args.rank, dims[0], dims[1], seeds=seeds,
                                     repeats=args.repeats, inner_iters=args.inner_iters,
                                     heads=args.heads, dtype=_DTYPES[args.precision],
                                     parallel=args.parallel)
    except MemoryBudgetError as exc:
        print(f"refused: {exc} (predicted_bytes={exc.predicted_bytes}, "
              f"budget_bytes={exc.budget_bytes})", file=sys.stderr)
        return EXIT_REFUSED
    if args.format == "csv":
        _emit(args, "\n".join(report.csv_rows()) + "\n")
    else:
        _emit(args, _dumps(report.to_dict()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    sizes = gradcheck.parse_sizes(args.sizes)
    report = gradcheck.run_gradcheck(sizes, args.trials, args.seed)
    summary = report.to_dict()
    _emit(args, _dumps(summary))
    worst = report.worst
    if worst is None:
        print("no configuration outside the guard region", file=sys.stderr)
        return EXIT_CHECK
    print(f"worst relative error {worst.rel_error:.3e}", file=sys.stderr)
    if not report.passed():
        print(f"failing configuration: {summary['worst']}", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


def cmd_synth(args) -> int:
    lengths = _int_list(args.lengths)
    spec = analysis.SynthSpec(args.count, tuple(lengths), args.d, args.rank, args.noise, args.seed)
    out = Path(args.output or "corpus")
    manifest = analysis.synth_corpus(spec, out)
    print(out / "manifest.json")
    return EXIT_OK if manifest.entries or args.count == 0 else EXIT_FATAL


# ---------------------------------------------------------------------------
# parser


def _global_flags(parser, suppress: bool) -> None:
    def default(v):
        return argparse.SUPPRESS if suppress else v

    parser.add_argument("--seed", type=int, default=default(0))
    parser.add_argument("--precision", choices=sorted(_DTYPES), default=default("f64"))
    parser.add_argument("--output", "-o", default=default(None))
    parser.add_argument("--format", choices=("json", "csv"), default=default("json"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="atp", description="Low-rank attention over principal keys: profiling, "
        "decomposition, attention comparison, benchmarks and derivative checks.")
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", parents=[common], help="SVD-entropy profile of a corpus")
    p.add_argument("manifest")
    p.add_argument("--bins", type=int, default=analysis.DEFAULT_BINS)
    p.add_argument("--buckets", help="length buckets, e.g. 0-300,301-600")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("decompose", parents=[common], help="factorize a matrix as U @ Xp")
    p.add_argument("input")
    p.add_argument("--rank", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--entropy", type=float, metavar="SCALE")
    p.add_argument("--method", choices=("exact", "alternating"), default="alternating")
    p.add_argument("--inner-iters", type=int, default=2)
    p.add_argument("--reorthogonalize", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("attend", parents=[common], help="run an encoder layer")
    p.add_argument("x")
    p.add_argument("weights", help="layer bundle directory")
    p.add_argument("--mode", choices=("standard", "lowrank", "oracle"), default="lowrank")
    p.add_argument("--compare", action="store_true")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("bench", parents=[common], help="operation-count and timing sweep")
    p.add_argument("--lengths", default="512,1024,2048,4096,8192")
    p.add_argument("--rank", type=int, default=128)
    p.add_argument("--dims", default="128,64", help="D,D_PRIME")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--inner-iters", type=int, default=2)
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed)")
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[common], help="JVP vs finite differences")
    p.add_argument("--sizes", default=",".join("x".join(map(str, s)) for s in gradcheck.DEFAULT_SIZES),
                   help="LxRxD' triples")
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic low-rank corpus")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--lengths", default="64")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_FATAL
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except MemoryBudgetError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except (AtpError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
