"""Attention kernels.

``standard_attention``
    softmax(Q K^T * s) V, quadratic in sequence length.
``taylor_dense_attention``
    the same with exp(x) replaced by 1 + x, still evaluated over all L keys;
    the oracle for the low-rank kernel.
``lowrank_attention``
    the first-order form evaluated against r principal keys,
    (1 U + Q Kp^T * s) Vp, linear in sequence length.

All kernels are bidirectional (no causal mask).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .counters import hold, matmul
from .errors import DegenerateNormalizationError, InvalidInputError, PreconditionError
from .linalg import LowRankFactors
from .matio import as_matrix

ROW_SUM = "row-sum"
TAYLOR_DENOMINATOR = "taylor-denominator"
SOFTMAX_ON_SCORES = "softmax-on-scores"
NORMALIZERS = (ROW_SUM, TAYLOR_DENOMINATOR, SOFTMAX_ON_SCORES)

MODES = ("standard", "lowrank", "oracle")


@dataclass(frozen=True)
class AttentionConfig:
    """Kernel options.

    ``normalizer`` picks the row normalization of the first-order kernels
    (standard attention always uses softmax).  When a row normalizer has
    magnitude at most ``epsilon`` it is replaced by ``epsilon`` carrying the
    sum's sign, or :class:`DegenerateNormalizationError` is raised if
    ``guard`` is off.
    """

    scale: bool = True
    normalizer: str = TAYLOR_DENOMINATOR
    epsilon: float = 1e-6
    rope: bool = False
    rope_base: float = 10000.0
    guard: bool = True
    keep_scores: bool = False

    def __post_init__(self):
        if not self.epsilon > 0:
            raise InvalidInputError(f"epsilon must be positive, got {self.epsilon}")
        if self.normalizer not in NORMALIZERS:
            raise InvalidInputError(
                f"normalizer must be one of {NORMALIZERS}, got {self.normalizer!r}"
            )

    def factor(self, head_dim: int) -> float:
        return 1.0 / math.sqrt(head_dim) if self.scale else 1.0


@dataclass(frozen=True)
class AttentionWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: int = 1

    def __post_init__(self):
        shapes = {self.wq.shape, self.wk.shape, self.wv.shape}
        if len(shapes) != 1 or self.wq.ndim != 2:
            raise InvalidInputError(
                f"wq, wk, wv must share one 2-D shape, got {self.wq.shape}, "
                f"{self.wk.shape}, {self.wv.shape}"
            )
        if int(self.heads) != self.heads or self.heads < 1 or self.wq.shape[1] % self.heads:
            raise InvalidInputError(
                f"heads={self.heads} must be a positive divisor of d'={self.wq.shape[1]}"
            )

    @property
    def d(self) -> int:
        return self.wq.shape[0]

    @property
    def d_out(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.d_out // self.heads


@dataclass
class AttentionOutput:
    output: np.ndarray
    scores: np.ndarray | None = None


# ---------------------------------------------------------------------------
# helpers


def _check_qkv(Q, K, V):
    Q = as_matrix(Q, name="Q")
    K = as_matrix(K, name="K")
    V = as_matrix(V, name="V")
    if Q.shape[1] != K.shape[1]:
        raise InvalidInputError(f"Q has width {Q.shape[1]} but K has width {K.shape[1]}")
    if K.shape[0] != V.shape[0]:
        raise InvalidInputError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    return Q, K, V


def _guard(denom: np.ndarray, config: AttentionConfig) -> np.ndarray:
    small = np.abs(denom) <= config.epsilon
    if np.any(small):
        if not config.guard:
            i = int(np.flatnonzero(small)[0])
            raise DegenerateNormalizationError(i, float(denom[i]))
        denom = np.where(small, np.copysign(config.epsilon, denom), denom)
    return denom


def _softmax_rows(S: np.ndarray) -> np.ndarray:
    """In-place row softmax with max subtraction."""
    S -= S.max(axis=1, keepdims=True)
    np.exp(S, out=S)
    S /= S.sum(axis=1, keepdims=True)
    return S


# ---------------------------------------------------------------------------
# kernels


def standard_attention(Q, K, V, config: AttentionConfig | None = None) -> AttentionOutput:
    config = config or AttentionConfig()
    Q, K, V = _check_qkv(Q, K, V)
    S = matmul(Q, K.T)
    hold(S.size)
    S *= S.dtype.type(config.factor(Q.shape[1]))
    _softmax_rows(S)
    out = matmul(S, V)
    return AttentionOutput(out, S if config.keep_scores else None)


def taylor_dense_attention(Q, K, V, config: AttentionConfig | None = None) -> AttentionOutput:
    config = config or AttentionConfig()
    Q, K, V = _check_qkv(Q, K, V)
    s = config.factor(Q.shape[1])
    S = matmul(Q, K.T)
    hold(S.size)
    S *= S.dtype.type(s)
    S += 1
    if config.normalizer == SOFTMAX_ON_SCORES:
        W = _softmax_rows(S)
    else:
        if config.normalizer == ROW_SUM:
            denom = S.sum(axis=1)
        else:
            denom = K.shape[0] + s * (Q @ K.sum(axis=0))
        W = S / _guard(denom, config)[:, None]
    out = matmul(W, V)
    return AttentionOutput(out, W if config.keep_scores else None)


def _check_lowrank(Q, Kp, Vp, U):
    Q, Kp, Vp = _check_qkv(Q, Kp, Vp)
    U = as_matrix(U, name="U")
    if U.shape != (Q.shape[0], Kp.shape[0]):
        raise InvalidInputError(
            f"U must be {(Q.shape[0], Kp.shape[0])} for {Q.shape[0]} queries and "
            f"{Kp.shape[0]} principal keys, got {U.shape}"
        )
    return Q, Kp, Vp, U


def lowrank_attention(Q, Kp, Vp, U, config: AttentionConfig | None = None) -> AttentionOutput:
    """First-order attention of L queries against r principal keys.

    The L x r score map is ``A' = 1 U + Q Kp^T * s`` where the row ``1 U``
    (column sums of U) is computed once for all queries.  With
    ``taylor-denominator`` each row is divided by ``L + s q . sum_j k_j``,
    the row sum of the full-length first-order map, using
    ``sum_j k_j = (1 U) Kp``; the result then equals the dense oracle
    whenever ``U Kp`` and ``U Vp`` are the full keys and values.
    """
    config = config or AttentionConfig()
    Q, Kp, Vp, U = _check_lowrank(Q, Kp, Vp, U)
    L = Q.shape[0]
    s = config.factor(Q.shape[1])
    base = U.sum(axis=0)
    A = matmul(Q, Kp.T)
    hold(A.size)
    A *= A.dtype.type(s)
    A += base
    if config.normalizer == SOFTMAX_ON_SCORES:
        W = _softmax_rows(A)
    else:
        if config.normalizer == ROW_SUM:
            denom = A.sum(axis=1)
        else:
            denom = L + s * (Q @ (base @ Kp))
        W = A / _guard(denom, config)[:, None]
    out = matmul(W, Vp)
    return AttentionOutput(out, W if config.keep_scores else None)


def lowrank_scores_unnormalized(Q, Kp, Vp, U, config: AttentionConfig | None = None):
    """``A' Vp`` before any row normalization (the raw first-order sum)."""
    config = config or AttentionConfig()
    Q, Kp, Vp, U = _check_lowrank(Q, Kp, Vp, U)
    A = U.sum(axis=0) + config.factor(Q.shape[1]) * (Q @ Kp.T)
    return A @ Vp


def lowrank_attention_jvp(Q, Kp, Vp, U, dQ, dKp, dVp, config: AttentionConfig | None = None):
    """Output of :func:`lowrank_attention` and its derivative along (dQ, dKp, dVp).

    Where the epsilon guard is active the normalizer is a constant, so its
    derivative is taken as zero there.
    """
    config = config or AttentionConfig()
    Q, Kp, Vp, U = _check_lowrank(Q, Kp, Vp, U)
    dQ, dKp, dVp = (np.asarray(a, dtype=np.float64) for a in (dQ, dKp, dVp))
    if dQ.shape != Q.shape or dKp.shape != Kp.shape or dVp.shape != Vp.shape:
        raise InvalidInputError("direction shapes must match Q, Kp, Vp")
    L = Q.shape[0]
    s = config.factor(Q.shape[1])
    base = U.sum(axis=0)
    A = base + s * (Q @ Kp.T)
    dA = s * (dQ @ Kp.T + Q @ dKp.T)
    if config.normalizer == SOFTMAX_ON_SCORES:
        W = _softmax_rows(A.copy())
        dW = W * (dA - np.sum(W * dA, axis=1, keepdims=True))
    else:
        if config.normalizer == ROW_SUM:
            n = A.sum(axis=1)
            dn = dA.sum(axis=1)
        else:
            ksum = base @ Kp
            n = L + s * (Q @ ksum)
            dn = s * (dQ @ ksum + Q @ (base @ dKp))
        guarded = _guard(n, config)
        dn = np.where(guarded != n, 0.0, dn)
        n = guarded
        W = A / n[:, None]
        dW = dA / n[:, None] - A * (dn / n**2)[:, None]
    return W @ Vp, dW @ Vp + W @ dVp


# ---------------------------------------------------------------------------
# projections and positional rotation


def project_full(X, weights: AttentionWeights):
    """Dense projections ``Q, K, V = X W``."""
    X = as_matrix(X, name="X")
    if X.shape[1] != weights.d:
        raise InvalidInputError(f"X has width {X.shape[1]} but weights expect {weights.d}")
    hold(3 * X.shape[0] * weights.d_out)
    return matmul(X, weights.wq), matmul(X, weights.wk), matmul(X, weights.wv)


def project_qkv(factors: LowRankFactors, weights: AttentionWeights):
    """Principal projections: ``Kp = Xp wk``, ``Vp = Xp wv`` and full-length ``Q = U (Xp wq)``."""
    if factors.Xp.shape[1] != weights.d:
        raise InvalidInputError(
            f"Xp has width {factors.Xp.shape[1]} but weights expect {weights.d}"
        )
    Xp = factors.Xp
    L, r = factors.U.shape
    hold(3 * r * weights.d_out + L * weights.d_out)
    Qp = matmul(Xp, weights.wq)
    Kp = matmul(Xp, weights.wk)
    Vp = matmul(Xp, weights.wv)
    Q = matmul(factors.U, Qp)
    return Q, Kp, Vp


def apply_rope(M, positions=None, base: float = 10000.0) -> np.ndarray:
    """Rotate coordinate pairs (2t, 2t+1) of row i by ``positions[i] * base**(-2t/d')``."""
    M = as_matrix(M, name="M")
    L, dp = M.shape
    if dp % 2:
        raise InvalidInputError(f"rotary encoding needs an even width, got {dp}")
    pos = np.arange(L, dtype=np.float64) if positions is None else np.asarray(positions, float)
    if pos.shape != (L,):
        raise InvalidInputError(f"expected {L} positions, got shape {pos.shape}")
    inv_freq = base ** (-np.arange(0, dp, 2, dtype=np.float64) / dp)
    theta = pos[:, None] * inv_freq[None, :]
    cos, sin = np.cos(theta), np.sin(theta)
    x, y = M[:, 0::2], M[:, 1::2]
    out = np.empty_like(M)
    out[:, 0::2] = x * cos - y * sin
    out[:, 1::2] = x * sin + y * cos
    return out


def project_rotated_keys(K_full, U) -> np.ndarray:
    """``U^T K_full``: the component of (rotated) keys inside span(U).

    ``U`` may be a :class:`LowRankFactors` (its orthonormal flag is trusted)
    or a bare matrix, which is checked numerically.
    """
    if isinstance(U, LowRankFactors):
        if not U.orthonormal:
            raise PreconditionError("U is not orthonormal; call reorthogonalize() first")
        U = U.U
    else:
        U = as_matrix(U, name="U")
        defect = np.max(np.abs(U.T @ U - np.eye(U.shape[1])))
        if defect > 1e-8:
            raise PreconditionError(
                f"U is not orthonormal (defect {defect:.3g}); call reorthogonalize() first"
            )
    K_full = as_matrix(K_full, name="K_full")
    if K_full.shape[0] != U.shape[0]:
        raise InvalidInputError(f"K_full has {K_full.shape[0]} rows, U has {U.shape[0]}")
    return matmul(U.T, K_full)


# ---------------------------------------------------------------------------
# multi-head


def _heads(M: np.ndarray, h: int):
    hd = M.shape[1] // h
    return [M[:, i * hd:(i + 1) * hd] for i in range(h)]


def attend_projected(mode, Q, K, V, heads, config: AttentionConfig | None = None,
                     factors: LowRankFactors | None = None, positions=None) -> np.ndarray:
    """Split projected Q/K/V into ``heads`` column blocks, attend, concatenate.

    In ``lowrank`` mode ``K`` and ``V`` are the principal keys/values and all
    heads share ``factors.U``.
    """
    config = config or AttentionConfig()
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "lowrank" and factors is None:
        raise InvalidInputError("lowrank mode needs the factors")
    outs = []
    for q, k, v in zip(_heads(Q, heads), _heads(K, heads), _heads(V, heads)):
        if config.rope:
            q = apply_rope(q, positions, config.rope_base)
            if mode == "lowrank":
                k_full = matmul(factors.U, k)
                k = project_rotated_keys(apply_rope(k_full, positions, config.rope_base), factors)
            else:
                k = apply_rope(k, positions, config.rope_base)
        if mode == "standard":
            res = standard_attention(q, k, v, config)
        elif mode == "oracle":
            res = taylor_dense_attention(q, k, v, config)
        else:
            res = lowrank_attention(q, k, v, factors.U, config)
        outs.append(res.output)
    return np.concatenate(outs, axis=1)


def multi_head_attention(source, weights: AttentionWeights, config: AttentionConfig | None = None,
                         mode: str = "standard", positions=None) -> np.ndarray:
    """Project and attend with ``weights.heads`` heads; returns an L x d' matrix.

    ``source`` is either the input matrix X or its :class:`LowRankFactors`.
    ``standard`` and ``oracle`` modes work on full-length keys (X is rebuilt
    from factors if needed); ``lowrank`` needs factors.
    """
    if mode == "lowrank":
        if not isinstance(source, LowRankFactors):
            raise InvalidInputError("lowrank mode needs LowRankFactors as the source")
        Q, Kp, Vp = project_qkv(source, weights)
        return attend_projected(mode, Q, Kp, Vp, weights.heads, config, source, positions)
    X = source.reconstruct() if isinstance(source, LowRankFactors) else source
    Q, K, V = project_full(X, weights)
    return attend_projected(mode, Q, K, V, weights.heads, config, None, positions)
