"""Motion Qformer: temporal attention -> cross attention -> feed-forward, rolled over frames.

Every frame starts from the learned base query.  History enters only
through the temporal-attention keys/values, which come from the previous
frame's output query.  All blocks of one step share that previous query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigurationError, DimensionError
from .layers import FfnParams, MhaParams, ffn, init_ffn, init_mha, mha
from .rng import Rng

PREV_ONLY = "prev_only"
CONCAT_CURRENT_PREV = "concat_current_prev"
TEMPORAL_MODES = (PREV_ONLY, CONCAT_CURRENT_PREV)


@dataclass(frozen=True)
class MotionQformerConfig:
    D: int = 32
    N_Q: int = 8
    L: int = 2
    H: int = 4
    temporal_kv_mode: str = CONCAT_CURRENT_PREV
    tie_kv: bool = True
    # view encoder: F-dim patch features -> D
    F: int = 16
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.D < 1 or self.H < 1 or self.D % self.H:
            raise ConfigurationError(f"H={self.H} must divide D={self.D}")
        if self.L < 1:
            raise ConfigurationError("L must be >= 1")
        if self.N_Q < 1:
            raise ConfigurationError("N_Q must be >= 1")
        if self.F < 1:
            raise ConfigurationError("F must be >= 1")
        if self.temporal_kv_mode not in TEMPORAL_MODES:
            raise ConfigurationError(f"temporal_kv_mode must be one of {TEMPORAL_MODES}")


@dataclass
class BlockParams:
    temporal: MhaParams
    cross: MhaParams
    ffn: FfnParams
    ln1_gain: Node
    ln1_bias: Node
    ln2_gain: Node
    ln2_bias: Node
    ln3_gain: Node
    ln3_bias: Node


@dataclass
class MotionQformerParams:
    base_query: Node  # learned Q_0, [N_Q, D]
    blocks: list[BlockParams] = field(default_factory=list)


@dataclass
class QueryState:
    tokens: Node  # [..., N_Q, D]
    frame_index: int = 0


def init_qformer(config: MotionQformerConfig, rng: Rng) -> MotionQformerParams:
    d = config.D
    base = ad.param(rng.normal((config.N_Q, d), 0.02))
    blocks = []
    for _ in range(config.L):
        temporal = init_mha(d, config.H, rng, config.tie_kv)
        cross = init_mha(d, config.H, rng, config.tie_kv)
        feed = init_ffn(d, rng)
        norms = [ad.param(np.ones(d)) if i % 2 == 0 else ad.param(np.zeros(d)) for i in range(6)]
        blocks.append(BlockParams(temporal, cross, feed, *norms))
    return MotionQformerParams(base, blocks)


def init_query(params: MotionQformerParams) -> QueryState:
    return QueryState(params.base_query, 0)


def _lead(x: Node) -> tuple[int, ...]:
    return x.shape[:-2]


def temporal_attention(h: Node, prev: QueryState, p: MhaParams, mode: str = CONCAT_CURRENT_PREV) -> Node:
    """Attention from the running hidden state onto the previous frame's query.

    ``prev_only`` attends to ``prev`` alone; ``concat_current_prev`` attends to
    ``[h; prev]`` stacked along the token axis.
    """
    prev_tokens = prev.tokens
    if prev_tokens.shape[-2:] != h.shape[-2:]:
        raise DimensionError(f"temporal_attention: hidden {h.shape} vs previous query {prev_tokens.shape}")
    if _lead(prev_tokens) != _lead(h):
        prev_tokens = ad.broadcast_leading(prev_tokens, _lead(h))
    if mode == PREV_ONLY:
        kv = prev_tokens
    elif mode == CONCAT_CURRENT_PREV:
        kv = ad.concat([h, prev_tokens], axis=-2)
    else:
        raise ConfigurationError(f"unknown temporal_kv_mode {mode!r}")
    return mha(h, kv, p)


def qformer_block(h: Node, prev: QueryState, f_t: Node, bp: BlockParams, config: MotionQformerConfig) -> Node:
    if f_t.shape[-1] != config.D:
        raise DimensionError(f"qformer_block: features {f_t.shape} must end in D={config.D}")
    h1 = ad.layer_norm(h + temporal_attention(h, prev, bp.temporal, config.temporal_kv_mode), bp.ln1_gain, bp.ln1_bias)
    h2 = ad.layer_norm(h1 + mha(h1, f_t, bp.cross), bp.ln2_gain, bp.ln2_bias)
    return ad.layer_norm(h2 + ffn(h2, bp.ffn), bp.ln3_gain, bp.ln3_bias)


def step(prev: QueryState, f_t: Node, params: MotionQformerParams, config: MotionQformerConfig) -> QueryState:
    """One frame: base query through L blocks, every block reading the same ``prev``."""
    lead = f_t.shape[:-2]
    h = ad.broadcast_leading(params.base_query, lead)
    for bp in params.blocks:
        h = qformer_block(h, prev, f_t, bp, config)
    return QueryState(h, prev.frame_index + 1)


def rollout(frames, params: MotionQformerParams, config: MotionQformerConfig) -> QueryState:
    """Fold :func:`step` over ``frames`` (each ``[..., M, D]``) starting from the base query."""
    frames = list(frames)
    if not frames:
        raise ValueError("rollout needs at least one frame")
    shape = frames[0].shape
    for f in frames[1:]:
        if f.shape != shape:
            raise DimensionError(f"rollout: frame shapes differ {shape} vs {f.shape}")
    state = init_query(params)
    for f_t in frames:
        state = step(state, f_t, params, config)
    return state
