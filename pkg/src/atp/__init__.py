"""Low-rank self-attention over principal keys.

Inputs are factorized as ``X ~= U @ Xp`` with ``r`` principal components;
attention then runs against ``r`` principal keys and values instead of
``L`` token keys, with cost linear in the sequence length.
"""

from .analysis import CorpusManifest, ProfileReport, SynthSpec, energy_curve, profile_corpus, synth_corpus
from .attention import (
    AttentionConfig,
    AttentionOutput,
    AttentionWeights,
    apply_rope,
    lowrank_attention,
    lowrank_attention_jvp,
    multi_head_attention,
    project_qkv,
    project_rotated_keys,
    standard_attention,
    taylor_dense_attention,
)
from .bench import ScalingReport, measured_run, predicted_ops, scaling_sweep
from .counters import OpCounter, counting
from .linalg import (
    EntropyReport,
    Entropy,
    Fixed,
    Fraction,
    LowRankFactors,
    RankPolicy,
    SvdResult,
    alternating_lowrank,
    energy_ratio,
    exact_svd,
    reorthogonalize,
    select_rank,
    svd_entropy,
)
from .model import (
    EncoderLayer,
    LayerNorm,
    PositionalEncoding,
    encoder_forward,
    make_sinusoidal,
    stack_forward,
)

__version__ = "0.1.0"
