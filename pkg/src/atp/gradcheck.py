"""Analytic-vs-finite-difference checks for the low-rank attention kernel."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .attention import (
    NORMALIZERS,
    ROW_SUM,
    SOFTMAX_ON_SCORES,
    AttentionConfig,
    lowrank_attention,
    lowrank_attention_jvp,
)
from .errors import InvalidInputError

DEFAULT_SIZES = ((4, 2, 4), (8, 3, 6), (16, 4, 8), (32, 8, 8))
DEFAULT_STEP = 1e-5
TOLERANCE = 1e-4
# Instances where some row normalizer reaches zero within this distance
# along the probe direction are treated as sitting on the epsilon guard and
# kept out of the worst-error statistic; the stencil error grows like
# (step / distance)**2 near that pole.
GUARD_MARGIN = 1e-2


@dataclass
class CheckResult:
    L: int
    r: int
    d_prime: int
    normalizer: str
    scale: bool
    rel_error: float
    min_denominator: float
    pole_distance: float
    near_guard: bool


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def checked(self) -> list[CheckResult]:
        return [r for r in self.results if not r.near_guard]

    @property
    def worst(self) -> CheckResult | None:
        checked = self.checked
        return max(checked, key=lambda r: r.rel_error) if checked else None

    def passed(self, tol: float = TOLERANCE) -> bool:
        w = self.worst
        return w is not None and w.rel_error <= tol

    def to_dict(self) -> dict:
        w = self.worst
        return {
            "configurations": len(self.checked),
            "guard_discontinuities": len(self.results) - len(self.checked),
            "worst_rel_error": None if w is None else w.rel_error,
            "worst": None if w is None else asdict(w),
            "tolerance": TOLERANCE,
        }


def orthonormal(rng, L: int, r: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((L, r)))
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def row_denominators(Q, Kp, U, config: AttentionConfig) -> np.ndarray:
    """Row normalizers of the low-rank kernel before guarding (inf for softmax)."""
    if config.normalizer == SOFTMAX_ON_SCORES:
        return np.full(Q.shape[0], np.inf)
    s = config.factor(Q.shape[1])
    base = U.sum(axis=0)
    if config.normalizer == ROW_SUM:
        return base.sum() + s * (Q @ Kp.sum(axis=0))
    return Q.shape[0] + s * (Q @ (base @ Kp))


def check_instance(Q, Kp, Vp, U, config: AttentionConfig, rng, step: float = DEFAULT_STEP) -> CheckResult:
    """Compare the analytic JVP with a central difference along a random direction."""
    dQ, dKp, dVp = (rng.standard_normal(a.shape) for a in (Q, Kp, Vp))
    _, analytic = lowrank_attention_jvp(Q, Kp, Vp, U, dQ, dKp, dVp, config)

    def f(t):
        return lowrank_attention(Q + t * dQ, Kp + t * dKp, Vp + t * dVp, U, config).output

    numeric = (f(step) - f(-step)) / (2 * step)
    scale = max(float(np.max(np.abs(analytic))), np.finfo(float).tiny)
    rel = float(np.max(np.abs(numeric - analytic))) / scale
    den = row_denominators(Q, Kp, U, config)
    if config.normalizer == SOFTMAX_ON_SCORES:
        min_den, pole = float("inf"), float("inf")
    else:
        rate = (row_denominators(Q + step * dQ, Kp + step * dKp, U, config)
                - row_denominators(Q - step * dQ, Kp - step * dKp, U, config)) / (2 * step)
        with np.errstate(divide="ignore"):
            pole = float(np.min(np.abs(den) / np.abs(rate)))
        min_den = float(np.min(np.abs(den)))
    near = min_den <= config.epsilon or pole < GUARD_MARGIN
    return CheckResult(Q.shape[0], Kp.shape[0], Q.shape[1], config.normalizer, config.scale,
                       rel, min_den, pole, bool(near))


def run_gradcheck(sizes=DEFAULT_SIZES, trials: int = 5, seed: int = 0,
                  step: float = DEFAULT_STEP) -> GradcheckReport:
    """``trials`` random instances per size, for every normalizer and scale setting."""
    if trials < 1:
        raise InvalidInputError("trials must be at least 1")
    sizes = [tuple(int(x) for x in s) for s in sizes]
    if not sizes:
        raise InvalidInputError("need at least one size")
    for L, r, dp in sizes:
        if min(L, r, dp) < 1 or r > L:
            raise InvalidInputError(f"invalid size L={L}, r={r}, d'={dp}")
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for L, r, dp in sizes:
        for _ in range(trials):
            U = orthonormal(rng, L, r)
            Q = rng.standard_normal((L, dp))
            Kp = rng.standard_normal((r, dp))
            Vp = rng.standard_normal((r, dp))
            for normalizer in NORMALIZERS:
                for scale in (True, False):
                    config = AttentionConfig(scale=scale, normalizer=normalizer)
                    report.results.append(check_instance(Q, Kp, Vp, U, config, rng, step))
    return report


def parse_sizes(text: str):
    """``"8x4x8,16x4x8"`` -> [(8, 4, 8), (16, 4, 8)] as (L, r, d')."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            L, r, dp = (int(x) for x in part.lower().split("x"))
        except ValueError:
            raise InvalidInputError(f"size {part!r} is not of the form LxRxD") from None
        out.append((L, r, dp))
    if not out:
        raise InvalidInputError("no sizes given")
    return out
