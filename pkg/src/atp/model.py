"""Encoder layer with per-layer decomposition and low-rank attention."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import erf

from .attention import AttentionConfig, AttentionWeights, multi_head_attention, MODES
from .counters import matmul
from .errors import DegenerateComponentError, InvalidInputError
from .linalg import (
    Fraction,
    LowRankFactors,
    RankPolicy,
    alternating_lowrank,
    reorthogonalize,
    select_rank,
)
from .matio import as_matrix, read_matx, write_matx

PE_MODES = ("none", "absolute-sinusoidal", "rotary")


@dataclass(frozen=True)
class LayerNorm:
    scale: np.ndarray
    offset: np.ndarray
    eps: float = 1e-5

    def __call__(self, H: np.ndarray) -> np.ndarray:
        mu = H.mean(axis=1, keepdims=True)
        var = H.var(axis=1, keepdims=True)
        return (H - mu) / np.sqrt(var + self.eps) * self.scale + self.offset

    @classmethod
    def default(cls, d: int) -> "LayerNorm":
        return cls(np.ones(d), np.zeros(d))


@dataclass(frozen=True)
class PositionalEncoding:
    mode: str = "none"
    base: float = 10000.0

    def __post_init__(self):
        if self.mode not in PE_MODES:
            raise InvalidInputError(f"positional encoding must be one of {PE_MODES}")


@dataclass(frozen=True)
class EncoderLayer:
    """Weights and options of one post-norm encoder layer.

    ``norm1``/``norm2`` set to ``None`` disable that normalization (the
    neutral setting under which a zero-weight layer is the identity).
    """

    attn_weights: AttentionWeights
    wo: np.ndarray
    ffn_w1: np.ndarray
    ffn_w2: np.ndarray
    norm1: LayerNorm | None = None
    norm2: LayerNorm | None = None
    rank_policy: RankPolicy = field(default_factory=lambda: Fraction(0.5))
    config: AttentionConfig = field(default_factory=AttentionConfig)
    inner_iters: int = 2

    def __post_init__(self):
        d, dp = self.attn_weights.d, self.attn_weights.d_out
        if self.wo.shape != (dp, d):
            raise InvalidInputError(f"wo must be {(dp, d)}, got {self.wo.shape}")
        if self.ffn_w1.ndim != 2 or self.ffn_w1.shape[0] != d or self.ffn_w1.shape[1] < 1:
            raise InvalidInputError(f"ffn_w1 must be (d={d}, d_ff>=1), got {self.ffn_w1.shape}")
        if self.ffn_w2.shape != (self.ffn_w1.shape[1], d):
            raise InvalidInputError(
                f"ffn_w2 must be {(self.ffn_w1.shape[1], d)}, got {self.ffn_w2.shape}"
            )
        for name in ("norm1", "norm2"):
            norm = getattr(self, name)
            if norm is not None and (norm.scale.shape != (d,) or norm.offset.shape != (d,)):
                raise InvalidInputError(f"{name} parameters must have length {d}")

    @property
    def d(self) -> int:
        return self.attn_weights.d

    @classmethod
    def random(cls, d: int, d_prime: int, d_ff: int, heads: int = 1, seed: int = 0,
               **kwargs) -> "EncoderLayer":
        """Gaussian weights with variance 1/fan_in and default layer norms."""
        rng = np.random.default_rng(seed)

        def w(m, n):
            return rng.standard_normal((m, n)) / np.sqrt(m)

        kwargs.setdefault("norm1", LayerNorm.default(d))
        kwargs.setdefault("norm2", LayerNorm.default(d))
        return cls(
            AttentionWeights(w(d, d_prime), w(d, d_prime), w(d, d_prime), heads),
            w(d_prime, d), w(d, d_ff), w(d_ff, d), **kwargs,
        )

    @classmethod
    def identity(cls, d: int, d_prime: int, d_ff: int = 1, heads: int = 1,
                 **kwargs) -> "EncoderLayer":
        """Layer whose attention and feedforward contribute nothing: maps X to X."""
        eye = np.eye(d, d_prime)
        return cls(
            AttentionWeights(eye, eye, eye, heads),
            np.zeros((d_prime, d)), np.zeros((d, d_ff)), np.zeros((d_ff, d)),
            None, None, **kwargs,
        )


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def make_sinusoidal(L: int, d: int, base: float = 10000.0) -> np.ndarray:
    if L < 1 or d < 2:
        raise InvalidInputError(f"need L >= 1 and d >= 2, got L={L}, d={d}")
    pos = np.arange(L, dtype=np.float64)[:, None]
    freq = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    angle = pos * freq[None, :]
    P = np.empty((L, d))
    P[:, 0::2] = np.sin(angle)
    P[:, 1::2] = np.cos(angle[:, : d // 2])
    return P


def factorize(X: np.ndarray, policy: RankPolicy, inner_iters: int = 2, seed: int = 0) -> LowRankFactors:
    """Rank from ``policy``, alternating factorization, then re-orthogonalization.

    If the residual is exhausted before ``r`` components (X has lower rank
    than requested, up to exact zeros) the factorization stops at the
    components already found.
    """
    L, d = X.shape
    spectrum = np.linalg.svd(X, compute_uv=False) if policy.needs_spectrum else None
    r = select_rank(spectrum, policy, L, d)
    try:
        factors = alternating_lowrank(X, r, inner_iters, seed)
    except DegenerateComponentError as exc:
        if exc.component == 0:
            raise
        factors = alternating_lowrank(X, exc.component, inner_iters, seed)
    return reorthogonalize(factors)


def encoder_forward(X, layer: EncoderLayer, pe: PositionalEncoding | None = None,
                    mode: str = "lowrank", seed: int = 0, positions=None) -> np.ndarray:
    """One post-norm encoder layer; returns an L x d matrix.

    ``lowrank`` factorizes the (position-augmented) input and attends over
    principal keys; ``standard`` uses softmax attention on full keys;
    ``oracle`` is the low-rank pipeline with the dense first-order kernel
    in place of the low-rank one.
    """
    pe = pe or PositionalEncoding()
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}, got {mode!r}")
    X = as_matrix(X, name="X")
    L, d = X.shape
    if d != layer.d:
        raise InvalidInputError(f"X has width {d} but the layer expects {layer.d}")
    if pe.mode == "absolute-sinusoidal":
        X = X + make_sinusoidal(L, d, pe.base)
    config = layer.config
    if pe.mode == "rotary":
        if layer.attn_weights.head_dim % 2:
            raise InvalidInputError("rotary encoding needs an even head dimension")
        config = dataclasses.replace(config, rope=True, rope_base=pe.base)

    if mode == "standard":
        attn = multi_head_attention(X, layer.attn_weights, config, "standard", positions)
    elif not np.any(X):
        # V = 0 W = 0, so every attention variant returns zeros
        attn = np.zeros((L, layer.attn_weights.d_out), dtype=X.dtype)
    else:
        factors = factorize(X, layer.rank_policy, layer.inner_iters, seed)
        attn = multi_head_attention(factors, layer.attn_weights, config, mode, positions)

    H = X + matmul(attn, layer.wo)
    if layer.norm1 is not None:
        H = layer.norm1(H)
    F = matmul(gelu(matmul(H, layer.ffn_w1)), layer.ffn_w2)
    Y = H + F
    if layer.norm2 is not None:
        Y = layer.norm2(Y)
    return Y


def stack_forward(X, layers, pe: PositionalEncoding | None = None, mode: str = "lowrank",
                  seed: int = 0) -> np.ndarray:
    """Apply ``layers`` in order, re-decomposing each layer's input.

    Absolute encodings are added once, before the first layer; rotary
    encodings act inside every layer.  Layer ``i`` uses seed ``seed + i``.
    """
    pe = pe or PositionalEncoding()
    Y = X
    for i, layer in enumerate(layers):
        layer_pe = pe if (i == 0 or pe.mode == "rotary") else PositionalEncoding("none", pe.base)
        Y = encoder_forward(Y, layer, layer_pe, mode, seed + i)
    return Y


# ---------------------------------------------------------------------------
# weight bundles

_WEIGHT_FILES = ("wq", "wk", "wv", "wo", "ffn_w1", "ffn_w2")
_NORM_FILES = ("norm1_scale", "norm1_offset", "norm2_scale", "norm2_offset")


def save_layer(directory, layer: EncoderLayer, pe: PositionalEncoding | None = None) -> None:
    pe = pe or PositionalEncoding()
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    w = layer.attn_weights
    for name, mat in zip(_WEIGHT_FILES, (w.wq, w.wk, w.wv, layer.wo, layer.ffn_w1, layer.ffn_w2)):
        write_matx(directory / f"{name}.matx", mat)
    for idx, norm in ((1, layer.norm1), (2, layer.norm2)):
        if norm is not None:
            write_matx(directory / f"norm{idx}_scale.matx", norm.scale[None, :])
            write_matx(directory / f"norm{idx}_offset.matx", norm.offset[None, :])
    meta = {
        "heads": w.heads,
        "rank_policy": layer.rank_policy.to_dict(),
        "pe": pe.mode,
        "pe_base": pe.base,
        "normalizer": layer.config.normalizer,
        "scale": layer.config.scale,
        "epsilon": layer.config.epsilon,
        "inner_iters": layer.inner_iters,
    }
    (directory / "layer.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_layer(directory) -> tuple[EncoderLayer, PositionalEncoding]:
    """Read a layer bundle; missing norm files mean that normalization is disabled."""
    directory = Path(directory)
    meta_path = directory / "layer.json"
    if not meta_path.is_file():
        raise InvalidInputError(f"{meta_path} not found")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"{meta_path}: {exc}") from exc
    mats = {}
    for name in _WEIGHT_FILES:
        path = directory / f"{name}.matx"
        if not path.is_file():
            raise InvalidInputError(f"{path} not found")
        mats[name] = read_matx(path)
    norms = []
    for idx in (1, 2):
        sp, op = directory / f"norm{idx}_scale.matx", directory / f"norm{idx}_offset.matx"
        if sp.is_file() and op.is_file():
            norms.append(LayerNorm(read_matx(sp).ravel(), read_matx(op).ravel()))
        else:
            norms.append(None)
    config = AttentionConfig(
        scale=bool(meta.get("scale", True)),
        normalizer=meta.get("normalizer", AttentionConfig.normalizer),
        epsilon=float(meta.get("epsilon", AttentionConfig.epsilon)),
    )
    policy = RankPolicy.from_dict(meta.get("rank_policy", {"type": "fraction", "f": 0.5}))
    layer = EncoderLayer(
        AttentionWeights(mats["wq"], mats["wk"], mats["wv"], int(meta.get("heads", 1))),
        mats["wo"], mats["ffn_w1"], mats["ffn_w2"], norms[0], norms[1],
        policy, config, int(meta.get("inner_iters", 2)),
    )
    pe = PositionalEncoding(meta.get("pe", "none"), float(meta.get("pe_base", 10000.0)))
    return layer, pe
