"""Operation-count predictions and wall-clock scaling runs.

Every run executes the same kernels the library exposes, stage by stage,
inside a :func:`~atp.counters.counting` region, so the instrumented tallies
can be compared with :func:`predicted_ops` by integer equality.
"""

from __future__ import annotations

import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, AttentionWeights, attend_projected, project_full, project_qkv
from .counters import OpCounter, counting, product_counts
from .errors import InvalidInputError, MemoryBudgetError
from .linalg import alternating_lowrank, reorthogonalize

__all__ = [
    "OpCounter",
    "RunRecord",
    "ScalingReport",
    "measured_run",
    "predicted_ops",
    "scaling_sweep",
    "memory_budget",
]

STANDARD_STAGES = ("projection", "attention")
LOWRANK_STAGES = ("decomposition", "reorthogonalize", "projection", "attention")
DEFAULT_BUDGET = 2 * 1024**3
BUDGET_ENV = "ATP_MEMORY_BUDGET_BYTES"


def memory_budget() -> int:
    raw = os.environ.get(BUDGET_ENV)
    if raw is None or raw == "":
        return DEFAULT_BUDGET
    try:
        value = int(raw)
    except ValueError:
        raise InvalidInputError(f"{BUDGET_ENV} must be an integer, got {raw!r}") from None
    if value <= 0:
        raise InvalidInputError(f"{BUDGET_ENV} must be positive")
    return value


def _prod(m, k, n, times=1) -> OpCounter:
    mul, add = product_counts(m, k, n)
    return OpCounter(mul * times, add * times)


def _with_peak(c: OpCounter, peak: int) -> OpCounter:
    return OpCounter(c.multiplies, c.adds, peak)


def _check_dims(L, r, d, dp, mode, heads):
    if min(L, d, dp, heads) < 1:
        raise InvalidInputError("dimensions must be positive")
    if mode not in ("standard", "lowrank"):
        raise InvalidInputError(f"mode must be 'standard' or 'lowrank', got {mode!r}")
    if mode == "lowrank" and not 1 <= r <= min(L, d):
        raise InvalidInputError(f"rank {r} outside [1, min(L={L}, d={d})]")
    if dp % heads:
        raise InvalidInputError(f"heads={heads} must divide d'={dp}")


def predicted_ops(L: int, r: int, d: int, dp: int, mode: str, inner_iters: int = 2,
                  heads: int = 1) -> dict[str, OpCounter]:
    """Closed-form tallies per stage, plus their merge under ``"total"``.

    standard
        projection ``3 L d d'``; attention ``L^2 d'`` for scores and again
        for value mixing; ``L^2`` score entries held.
    lowrank
        decomposition ``2 * inner_iters * r L d`` plus ``r L d`` deflation;
        re-orthogonalization (two Cholesky-QR passes) ``2 (2 L r^2 + r^2 d)``;
        projection ``3 r d d'`` plus ``L r d'`` query reconstruction;
        attention ``r L d'`` twice; ``r L`` score entries held.
    """
    _check_dims(L, r, d, dp, mode, heads)
    hd = dp // heads
    if mode == "standard":
        stages = {
            "projection": _with_peak(_prod(L, d, dp, 3), 3 * L * dp),
            "attention": _with_peak(_prod(L, hd, L, heads) + _prod(L, L, hd, heads), L * L),
        }
    else:
        matvecs = _prod(L, d, 1) + _prod(d, L, 1)
        decomp = OpCounter(
            r * inner_iters * matvecs.multiplies + r * L * d,
            r * inner_iters * matvecs.adds + r * L * d,
        )
        reorth = _prod(r, L, r, 2) + _prod(L, r, r, 2) + _prod(r, r, d, 2)
        stages = {
            "decomposition": _with_peak(decomp, L * d + L * r + r * d),
            "reorthogonalize": _with_peak(reorth, L * r + r * r + r * d),
            "projection": _with_peak(_prod(r, d, dp, 3) + _prod(L, r, dp), 3 * r * dp + L * dp),
            "attention": _with_peak(_prod(L, hd, r, heads) + _prod(L, r, hd, heads), r * L),
        }
    total = OpCounter()
    for c in stages.values():
        total = total + c
    stages["total"] = total
    return stages


@dataclass
class RunRecord:
    L: int
    r: int
    d: int
    d_prime: int
    mode: str
    seed: int
    repeats: int
    multiplies: int
    adds: int
    peak_values_held: int
    stages: dict[str, dict]
    wall_ns: int
    stage_wall_ns: dict[str, int]

    def counts_dict(self) -> dict:
        return {
            "L": self.L, "r": self.r, "d": self.d, "d_prime": self.d_prime,
            "mode": self.mode, "seed": self.seed, "repeats": self.repeats,
            "multiplies": self.multiplies, "adds": self.adds,
            "peak_values_held": self.peak_values_held, "stages": self.stages,
        }

    def timing_dict(self) -> dict:
        return {"L": self.L, "mode": self.mode, "seed": self.seed,
                "wall_ns": self.wall_ns, "stage_wall_ns": self.stage_wall_ns}


def _inputs(L, d, dp, heads, seed, dtype):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((L, d)).astype(dtype)
    ws = [(rng.standard_normal((d, dp)) / np.sqrt(d)).astype(dtype) for _ in range(3)]
    return X, AttentionWeights(*ws, heads=heads)


def _pipeline(X, weights, mode, r, inner_iters, seed, config):
    counters: dict[str, OpCounter] = {}
    walls: dict[str, int] = {}

    def stage(name, fn):
        t0 = time.perf_counter_ns()
        with counting() as c:
            result = fn()
        walls[name] = time.perf_counter_ns() - t0
        counters[name] = c
        return result

    if mode == "standard":
        Q, K, V = stage("projection", lambda: project_full(X, weights))
        stage("attention", lambda: attend_projected("standard", Q, K, V, weights.heads, config))
    else:
        f = stage("decomposition", lambda: alternating_lowrank(X, r, inner_iters, seed))
        f = stage("reorthogonalize", lambda: reorthogonalize(f))
        Q, Kp, Vp = stage("projection", lambda: project_qkv(f, weights))
        stage("attention",
              lambda: attend_projected("lowrank", Q, Kp, Vp, weights.heads, config, f))
    return counters, walls


def measured_run(L: int, r: int, d: int, dp: int, mode: str, seed: int = 0, repeats: int = 5,
                 inner_iters: int = 2, heads: int = 1, dtype=np.float64,
                 budget_bytes: int | None = None) -> RunRecord:
    """Run one pipeline with counters and a monotonic timer.

    One warm-up run is discarded; ``wall_ns`` is the median of ``repeats``
    timed runs.  Refuses (``MemoryBudgetError``) when the predicted peak of
    held values times the element size exceeds the budget.
    """
    if repeats < 1:
        raise InvalidInputError("repeats must be at least 1")
    pred = predicted_ops(L, r, d, dp, mode, inner_iters, heads)
    budget = memory_budget() if budget_bytes is None else budget_bytes
    need = pred["total"].peak_values_held * np.dtype(dtype).itemsize
    if need > budget:
        raise MemoryBudgetError(need, budget)

    X, weights = _inputs(L, d, dp, heads, seed, dtype)
    config = AttentionConfig()
    _pipeline(X, weights, mode, r, inner_iters, seed, config)
    totals, stage_walls, counters = [], [], None
    for _ in range(repeats):
        counters, walls = _pipeline(X, weights, mode, r, inner_iters, seed, config)
        stage_walls.append(walls)
        totals.append(sum(walls.values()))
    total = OpCounter()
    for c in counters.values():
        total = total + c
    return RunRecord(
        L=L, r=r, d=d, d_prime=dp, mode=mode, seed=seed,
        repeats=repeats, multiplies=total.multiplies, adds=total.adds,
        peak_values_held=total.peak_values_held,
        stages={k: c.to_dict() for k, c in counters.items()},
        wall_ns=int(statistics.median(totals)),
        stage_wall_ns={k: int(statistics.median(w[k] for w in stage_walls)) for k in counters},
    )


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    return float(np.polyfit(lx, ly, 1)[0])


@dataclass
class ScalingReport:
    config: dict
    runs: list[RunRecord] = field(default_factory=list)

    def _series(self, mode, key):
        by_len: dict[int, list] = {}
        for run in self.runs:
            if run.mode == mode:
                by_len.setdefault(run.L, []).append(key(run))
        lengths = sorted(by_len)
        return lengths, [statistics.median(by_len[L]) for L in lengths]

    def median_wall(self, mode) -> dict[int, float]:
        return dict(zip(*self._series(mode, lambda run: run.wall_ns)))

    def slopes(self, key) -> dict[str, float] | None:
        out = {}
        for mode in ("standard", "lowrank"):
            lengths, ys = self._series(mode, key)
            if len(lengths) < 2:
                return None
            out[mode] = loglog_slope(lengths, ys)
        return out

    def wall_slopes(self):
        return self.slopes(lambda run: run.wall_ns)

    def count_slopes(self):
        return self.slopes(lambda run: run.stages["attention"]["multiplies"])

    def to_dict(self) -> dict:
        """Deterministic fields at top level; everything clock-derived under ``timing``."""
        out = {"config": self.config, "runs": [r.counts_dict() for r in self.runs]}
        timing = {"runs": [r.timing_dict() for r in self.runs]}
        cs, ws = self.count_slopes(), self.wall_slopes()
        if cs is not None:
            out["count_slopes"] = cs
        if ws is not None:
            timing["slopes"] = ws
        out["timing"] = timing
        return out

    def csv_rows(self) -> list[str]:
        cols = ["L", "r", "d", "d_prime", "mode", "seed", "multiplies", "adds",
                "peak_values_held", "wall_ns"]
        rows = [",".join(cols)]
        for run in self.runs:
            rows.append(",".join(str(getattr(run, c)) for c in cols))
        return rows


def scaling_sweep(lengths, r: int, d: int, dp: int, seeds=(0,), repeats: int = 5,
                  inner_iters: int = 2, heads: int = 1, dtype=np.float64,
                  modes=("standard", "lowrank"), parallel: bool = False,
                  budget_bytes: int | None = None) -> ScalingReport:
    lengths = [int(L) for L in lengths]
    if not lengths:
        raise InvalidInputError("lengths must not be empty")
    if any(b <= a for a, b in zip(lengths, lengths[1:])):
        raise InvalidInputError("lengths must be strictly ascending")
    seeds = list(seeds)
    if not seeds:
        raise InvalidInputError("need at least one seed")
    for L in lengths:
        for mode in modes:
            _check_dims(L, r, d, dp, mode, heads)

    jobs = [(L, mode, s) for L in lengths for mode in modes for s in seeds]

    def run(job):
        L, mode, s = job
        return measured_run(L, r, d, dp, mode, s, repeats, inner_iters, heads, dtype, budget_bytes)

    if parallel:
        with ThreadPoolExecutor() as pool:
            runs = list(pool.map(run, jobs))
    else:
        runs = [run(j) for j in jobs]
    config = {"lengths": lengths, "r": r, "d": d, "d_prime": dp, "seeds": seeds,
              "repeats": repeats, "inner_iters": inner_iters, "heads": heads,
              "dtype": np.dtype(dtype).name, "modes": list(modes)}
    return ScalingReport(config, runs)
