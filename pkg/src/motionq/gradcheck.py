"""Finite-difference verification of every differentiable op, layer, and the full model.

Each check reports the max relative error over its probes.  Primitive ops
and layers must stay below 1e-5; compositions that run through time
(rollout, fleet + focal loss) below 1e-4.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .fleet import (
    ALL_ROLES,
    EncoderParams,
    V2XConfig,
    encode_view,
    fleet_forward,
    init_fleet,
    named_tensors,
    trainable_parameters,
)
from .layers import ffn, init_ffn, init_linear, init_mha, init_mlp_head, linear, mha, mlp_head
from .qformer import MotionQformerConfig, QueryState, init_qformer, qformer_block, rollout
from .rng import Rng
from .training import FocalLossConfig, focal_loss

LAYER_TOL = 1e-5
END_TO_END_TOL = 1e-4
POINTS = 5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def _weights(rng: Rng, shape) -> np.ndarray:
    # fixed random projection so the scalar output mixes every coordinate
    return rng.normal(shape)


def _away_from_zero(rng: Rng, shape) -> np.ndarray:
    x = rng.normal(shape)
    return np.where(np.abs(x) < 0.05, np.sign(x + 1e-300) * 0.05 + x, x)


def _positive(rng: Rng, shape) -> np.ndarray:
    return 0.5 + 1.5 * rng.uniform(int(np.prod(shape))).reshape(shape)


def _unary(op: Callable[[ad.Node], ad.Node], sampler=None, shape=(3, 4)):
    sampler = sampler or (lambda r, s: r.normal(s))

    def run(rng: Rng) -> float:
        worst = 0.0
        for _ in range(POINTS):
            x = sampler(rng, shape)
            w = ad.constant(_weights(rng, op(ad.constant(x)).shape))
            worst = max(worst, ad.grad_check(lambda n: ad.sum_all(ad.mul(op(n), w)), x))
        return worst

    return run


def _binary(op, shape_a=(3, 4), shape_b=(3, 4)):
    """Checks both operands: the second is varied while the first is held, and vice versa."""

    def run(rng: Rng) -> float:
        worst = 0.0
        for _ in range(POINTS):
            a = rng.normal(shape_a)
            b = rng.normal(shape_b)
            w = ad.constant(_weights(rng, op(ad.constant(a), ad.constant(b)).shape))
            worst = max(worst, ad.grad_check(lambda n: ad.sum_all(ad.mul(op(n, ad.constant(b)), w)), a))
            worst = max(worst, ad.grad_check(lambda n: ad.sum_all(ad.mul(op(ad.constant(a), n), w)), b))
        return worst

    return run


def _params_check(build: Callable[[Rng], tuple[Callable[[], ad.Node], list]], probes_per_leaf: int = 3):
    """Probe a few coordinates of every trainable leaf a layer owns."""

    def run(rng: Rng) -> float:
        worst = 0.0
        for _ in range(POINTS):
            loss_fn, leaves = build(rng)
            probes = []
            for leaf in leaves:
                for _ in range(probes_per_leaf):
                    probes.append((leaf, rng.below(leaf.value.size)))
            worst = max(worst, ad.grad_check_params(loss_fn, probes))
        return worst

    return run


def _leaves(*objs):
    out = []
    for o in objs:
        out.extend(n for n in named_tensors(o).values() if n.requires_grad)
    return out


def _randomize(leaves, rng: Rng, std: float = 0.3) -> None:
    # gains/biases start at 1/0; perturb so checks do not sit at special points
    for leaf in leaves:
        leaf.value = leaf.value + rng.normal(leaf.shape, std)


def _linear_case(rng: Rng):
    p = init_linear(6, 5, rng)
    _randomize(_leaves(p), rng)
    x = ad.param(rng.normal((4, 6)))
    w = ad.constant(rng.normal((4, 5)))
    return (lambda: ad.sum_all(ad.mul(linear(x, p), w))), [x, p.weight, p.bias]


def _mha_case(rng: Rng, tie_kv: bool = True):
    p = init_mha(8, 2, rng, tie_kv)
    _randomize(_leaves(p), rng)
    q = ad.param(rng.normal((3, 8)))
    kv = ad.param(rng.normal((5, 8)))
    w = ad.constant(rng.normal((3, 8)))
    return (lambda: ad.sum_all(ad.mul(mha(q, kv, p), w))), [q, kv, *_leaves(p)]


def _mha_untied_case(rng: Rng):
    return _mha_case(rng, tie_kv=False)


def _ffn_case(rng: Rng):
    p = init_ffn(6, rng)
    _randomize(_leaves(p), rng)
    x = ad.param(rng.normal((3, 6)))
    w = ad.constant(rng.normal((3, 6)))
    return (lambda: ad.sum_all(ad.mul(ffn(x, p), w))), [x, *_leaves(p)]


def _head_focal_case(rng: Rng):
    p = init_mlp_head(12, rng)
    # small enough that p_t stays clear of the 1e-12 floor, where the
    # straight-through gradient intentionally differs from the flat loss
    _randomize(_leaves(p), rng, 0.03)
    x = ad.param(rng.normal((4, 12)))
    labels = np.array([0, 1, 1, 0])
    return (lambda: focal_loss(mlp_head(x, p), labels)), [x, *_leaves(p)]


def _encoder_case(rng: Rng):
    enc = EncoderParams(init_linear(5, 6, rng), frozen=False)
    _randomize(_leaves(enc), rng)
    x = ad.param(rng.normal((6, 3, 5)))
    w = ad.constant(rng.normal((6, 3, 6)))
    return (lambda: ad.sum_all(ad.mul(encode_view(x, enc), w))), [x, *_leaves(enc)]


_SMALL = MotionQformerConfig(D=8, N_Q=3, L=1, H=2, F=5)


def _block_case(rng: Rng):
    params = init_qformer(_SMALL, rng)
    _randomize(_leaves(params), rng)
    prev = QueryState(ad.param(rng.normal((3, 8))), 1)
    f_t = ad.param(rng.normal((6, 8)))
    w = ad.constant(rng.normal((3, 8)))
    bp = params.blocks[0]
    return (
        lambda: ad.sum_all(ad.mul(qformer_block(params.base_query, prev, f_t, bp, _SMALL), w))
    ), [prev.tokens, f_t, params.base_query, *_leaves(bp)]


def _focal_logits(rng: Rng) -> float:
    worst = 0.0
    for _ in range(POINTS):
        logits = rng.normal((6, 2)) * 2.0
        labels = (rng.uniform(6) < 0.5).astype(int)
        worst = max(worst, ad.grad_check(lambda n: focal_loss(n, labels, FocalLossConfig()), logits))
    return worst


def _rollout_bptt(rng: Rng) -> float:
    """T=3 rollout at default dims, checked w.r.t. the base query and frame-1 features."""
    config = MotionQformerConfig()
    worst = 0.0
    for _ in range(2):
        params = init_qformer(config, rng)
        _randomize(_leaves(params), rng, 0.1)
        frames = [ad.param(rng.normal((24, config.D))) for _ in range(3)]
        w = ad.constant(rng.normal((config.N_Q, config.D)))
        loss_fn = lambda: ad.sum_all(ad.mul(rollout(frames, params, config).tokens, w))  # noqa: E731
        probes = [(params.base_query, rng.below(params.base_query.value.size)) for _ in range(5)]
        probes += [(frames[0], rng.below(frames[0].value.size)) for _ in range(5)]
        worst = max(worst, ad.grad_check_params(loss_fn, probes))
    return worst


def _fleet_focal(rng: Rng) -> float:
    """focal_loss(fleet_forward(...)) at default dims, T=3, all five agents, 10 sampled parameters."""
    config = MotionQformerConfig()
    v2x = V2XConfig(frozenset(ALL_ROLES))
    params = init_fleet(config, v2x, rng)
    named = trainable_parameters(params)
    _randomize(list(named.values()), rng, 0.1)
    x = rng.normal((2, 3, len(ALL_ROLES), 6, 4, config.F))
    labels = np.array([1, 0])
    loss_fn = lambda: focal_loss(fleet_forward(x, params, v2x, config), labels)  # noqa: E731
    names = sorted(named)
    probes = []
    for _ in range(10):
        leaf = named[names[rng.below(len(names))]]
        probes.append((leaf, rng.below(leaf.value.size)))
    return ad.grad_check_params(loss_fn, probes)


def _transpose(n):
    return ad.transpose(n, (1, 0, 2))


CHECKS: list[tuple[str, float, Callable[[Rng], float]]] = [
    ("matmul", LAYER_TOL, _binary(ad.matmul, (3, 4), (4, 2))),
    ("matmul_batched", LAYER_TOL, _binary(ad.matmul, (2, 3, 4), (2, 4, 2))),
    ("add", LAYER_TOL, _binary(ad.add)),
    ("sub", LAYER_TOL, _binary(ad.sub)),
    ("mul", LAYER_TOL, _binary(ad.mul)),
    ("add_bias", LAYER_TOL, _binary(ad.add_bias, (3, 4), (4,))),
    ("scale", LAYER_TOL, _unary(lambda n: ad.scale(n, -1.7))),
    ("add_scalar", LAYER_TOL, _unary(lambda n: ad.add_scalar(n, 0.3))),
    ("relu", LAYER_TOL, _unary(ad.relu, _away_from_zero)),
    ("gelu", LAYER_TOL, _unary(ad.gelu)),
    ("log", LAYER_TOL, _unary(ad.log, _positive)),
    ("exp", LAYER_TOL, _unary(ad.exp)),
    ("pow", LAYER_TOL, _unary(lambda n: ad.pow_scalar(n, 2.5), _positive)),
    ("clamp_min", LAYER_TOL, _unary(lambda n: ad.clamp_min(n, -10.0))),
    ("softmax", LAYER_TOL, _unary(ad.softmax_lastdim)),
    ("layer_norm", LAYER_TOL, _unary(lambda n: ad.layer_norm(n, ad.constant(np.linspace(0.5, 1.5, 8)), ad.constant(np.zeros(8))), shape=(2, 8))),
    ("concat", LAYER_TOL, _binary(lambda a, b: ad.concat([a, b], axis=0), (2, 4), (3, 4))),
    ("slice", LAYER_TOL, _unary(lambda n: ad.getitem(n, (slice(1, 3), 2)))),
    ("reshape", LAYER_TOL, _unary(lambda n: ad.reshape(n, (2, 6)))),
    ("transpose", LAYER_TOL, _unary(_transpose, shape=(2, 3, 4))),
    ("broadcast", LAYER_TOL, _unary(lambda n: ad.broadcast_leading(n, (2,)))),
    ("sum", LAYER_TOL, _unary(lambda n: ad.scale(ad.sum_all(n), 1.0))),
    ("pick", LAYER_TOL, _unary(lambda n: ad.pick(n, np.array([0, 3, 1])))),
    ("linear", LAYER_TOL, _params_check(_linear_case)),
    ("mha", LAYER_TOL, _params_check(_mha_case)),
    ("mha_untied", LAYER_TOL, _params_check(_mha_untied_case)),
    ("ffn", LAYER_TOL, _params_check(_ffn_case)),
    ("mlp_head_focal", LAYER_TOL, _params_check(_head_focal_case)),
    ("encode_view", LAYER_TOL, _params_check(_encoder_case)),
    ("qformer_block", LAYER_TOL, _params_check(_block_case)),
    ("focal_loss", LAYER_TOL, _focal_logits),
    ("rollout_bptt", END_TO_END_TOL, _rollout_bptt),
    ("fleet_focal_end_to_end", END_TO_END_TOL, _fleet_focal),
]


def run_suite(seed: int = 0, corrupt: str | None = None) -> list[CheckResult]:
    """Run every check; ``corrupt`` scales the backward of one primitive op to prove detection."""
    results = []
    for i, (name, tol, fn) in enumerate(CHECKS):
        rng = Rng(seed).spawn(i)
        start = time.perf_counter()
        if corrupt:
            with ad.corrupt_backward(corrupt):
                err = fn(rng)
        else:
            err = fn(rng)
        results.append(CheckResult(name, err, tol, time.perf_counter() - start))
    return results
