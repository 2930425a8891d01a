"""Parameterized layers shared by the temporal / cross attention blocks and the head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigurationError, DimensionError
from .rng import Rng

INIT_STD = 0.02
HEAD_HIDDEN = 256
NUM_CLASSES = 2


@dataclass
class LinearParams:
    weight: Node  # [in, out]
    bias: Node  # [out]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class MhaParams:
    q_proj: LinearParams
    k_proj: LinearParams
    v_proj: LinearParams  # the same object as k_proj when keys and values are tied
    out_proj: LinearParams
    heads: int

    @property
    def dim(self) -> int:
        return self.q_proj.in_dim

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def tied_kv(self) -> bool:
        return self.v_proj is self.k_proj


@dataclass
class FfnParams:
    lin1: LinearParams
    lin2: LinearParams


@dataclass
class MlpHeadParams:
    lin1: LinearParams
    lin2: LinearParams

    @property
    def flat_in(self) -> int:
        return self.lin1.in_dim


def init_linear(in_dim: int, out_dim: int, rng: Rng, trainable: bool = True) -> LinearParams:
    if in_dim < 1 or out_dim < 1:
        raise ConfigurationError(f"linear dims must be positive, got {in_dim}x{out_dim}")
    make = ad.param if trainable else ad.constant
    return LinearParams(make(rng.normal((in_dim, out_dim), INIT_STD)), make(np.zeros(out_dim)))


def init_mha(dim: int, heads: int, rng: Rng, tie_kv: bool = True) -> MhaParams:
    if heads < 1 or dim % heads:
        raise ConfigurationError(f"heads={heads} must divide model dim {dim}")
    q = init_linear(dim, dim, rng)
    k = init_linear(dim, dim, rng)
    v = k if tie_kv else init_linear(dim, dim, rng)
    out = init_linear(dim, dim, rng)
    return MhaParams(q, k, v, out, heads)


def init_ffn(dim: int, rng: Rng) -> FfnParams:
    return FfnParams(init_linear(dim, 4 * dim, rng), init_linear(4 * dim, dim, rng))


def init_mlp_head(flat_in: int, rng: Rng) -> MlpHeadParams:
    return MlpHeadParams(init_linear(flat_in, HEAD_HIDDEN, rng), init_linear(HEAD_HIDDEN, NUM_CLASSES, rng))


def linear(x: Node, p: LinearParams) -> Node:
    if x.shape[-1] != p.in_dim:
        raise DimensionError(f"linear: input {x.shape} vs weight {p.weight.shape}")
    if x.ndim == 1:
        return ad.reshape(linear(ad.reshape(x, (1, p.in_dim)), p), (p.out_dim,))
    return ad.add_bias(ad.matmul(x, p.weight), p.bias)


def _split_heads(x: Node, heads: int) -> Node:
    # [..., n, D] -> [..., H, n, d_k]
    *lead, n, d = x.shape
    x = ad.reshape(x, (*lead, n, heads, d // heads))
    k = len(lead)
    return ad.transpose(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Node) -> Node:
    *lead, h, n, dk = x.shape
    k = len(lead)
    x = ad.transpose(x, (*range(k), k + 1, k, k + 2))
    return ad.reshape(x, (*lead, n, h * dk))


def mha(q_in: Node, kv_in: Node, p: MhaParams, return_weights: bool = False):
    """Multi-head scaled dot-product attention of ``q_in`` rows over ``kv_in`` rows.

    Inputs are ``[..., n_q, D]`` and ``[..., n_kv, D]`` with equal leading
    dims.  With ``return_weights`` the attention weights ``[..., H, n_q, n_kv]``
    are returned as a second value.
    """
    d = p.dim
    if q_in.shape[-1] != d or kv_in.shape[-1] != d:
        raise DimensionError(f"mha: inputs {q_in.shape} / {kv_in.shape} must end in model dim {d}")
    if q_in.shape[:-2] != kv_in.shape[:-2]:
        raise DimensionError(f"mha: batch dims differ {q_in.shape} vs {kv_in.shape}")
    q = _split_heads(linear(q_in, p.q_proj), p.heads)
    k = _split_heads(linear(kv_in, p.k_proj), p.heads)
    v = k if p.tied_kv else _split_heads(linear(kv_in, p.v_proj), p.heads)
    scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(p.head_dim))
    weights = ad.softmax_lastdim(scores)
    out = linear(_merge_heads(ad.matmul(weights, v)), p.out_proj)
    return (out, weights.value) if return_weights else out


def mha_oracle(q_in, kv_in, p: MhaParams) -> np.ndarray:
    """Unvectorized reference for :func:`mha` on unbatched 2-D inputs."""
    q_in = q_in.value if isinstance(q_in, Node) else np.asarray(q_in, dtype=np.float64)
    kv_in = kv_in.value if isinstance(kv_in, Node) else np.asarray(kv_in, dtype=np.float64)
    if q_in.ndim != 2 or kv_in.ndim != 2:
        raise DimensionError("mha_oracle: expects 2-D inputs")
    d, heads = p.dim, p.heads
    if q_in.shape[1] != d or kv_in.shape[1] != d:
        raise DimensionError(f"mha_oracle: inputs {q_in.shape} / {kv_in.shape} must end in model dim {d}")
    dk = d // heads

    def project(x, lp):
        w, b = lp.weight.value, lp.bias.value
        rows = []
        for r in range(x.shape[0]):
            row = []
            for j in range(w.shape[1]):
                acc = float(b[j])
                for i in range(w.shape[0]):
                    acc += float(x[r, i]) * float(w[i, j])
                row.append(acc)
            rows.append(row)
        return rows

    q = project(q_in, p.q_proj)
    k = project(kv_in, p.k_proj)
    v = project(kv_in, p.v_proj)
    n_q, n_kv = len(q), len(k)
    merged = [[0.0] * d for _ in range(n_q)]
    for h in range(heads):
        lo = h * dk
        for a in range(n_q):
            scores = []
            for b in range(n_kv):
                s = 0.0
                for c in range(dk):
                    s += q[a][lo + c] * k[b][lo + c]
                scores.append(s / math.sqrt(dk))
            top = max(scores)
            exps = [math.exp(s - top) for s in scores]
            total = sum(exps)
            for c in range(dk):
                acc = 0.0
                for b in range(n_kv):
                    acc += exps[b] / total * v[b][lo + c]
                merged[a][lo + c] = acc
    return np.array(project(np.array(merged), p.out_proj))


def ffn(x: Node, p: FfnParams) -> Node:
    return linear(ad.gelu(linear(x, p.lin1)), p.lin2)


def mlp_head(x_flat: Node, p: MlpHeadParams) -> Node:
    """Two class logits (0 = no accident, 1 = accident) from ``[..., flat_in]``."""
    if x_flat.shape[-1] != p.flat_in:
        raise ConfigurationError(
            f"head expects {p.flat_in} input features, got {x_flat.shape[-1]}; "
            "the V2X configuration does not match these weights"
        )
    return linear(ad.relu(linear(x_flat, p.lin1)), p.lin2)
