import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionq import autodiff as ad
from motionq.data import ScenarioSpec, build_dataset
from motionq.errors import ConfigurationError, DimensionError
from motionq.fleet import EGO_ONLY, EGO_OTHER, TABLE2_CONFIGS, AgentRole, fleet_forward, init_fleet, named_tensors
from motionq.qformer import MotionQformerConfig
from motionq.rng import Rng
from motionq.training import (
    TABLE_COLUMNS,
    AdamState,
    FocalLossConfig,
    TrainConfig,
    ablate,
    accuracy,
    adam_step,
    evaluate,
    focal_loss,
    lr_at,
    report_from_predictions,
    train,
    write_table_csv,
)

TINY = MotionQformerConfig(D=8, N_Q=2, L=1, H=2, F=5)
EGO_SPEC = ScenarioSpec(T=2, agents=(AgentRole.EGO,), P=2, F=5)


def C(x):
    return ad.constant(np.asarray(x, dtype=float))


def _logits_for(p_true, label):
    # two logits whose softmax gives p_true on the labelled class
    z = math.log(p_true / (1 - p_true))
    return [0.0, z] if label == 1 else [z, 0.0]


@pytest.fixture(scope="module")
def tiny_ds():
    return build_dataset(40, EGO_SPEC, seed=5)


class TestFocalLoss:
    def test_reduces_to_cross_entropy_at_half(self):
        v = focal_loss(C([0.0, 0.0]), 1, FocalLossConfig(gamma=0.0), class_weighted=False).item()
        assert abs(v - math.log(2)) < 1e-15

    def test_hand_value(self):
        v = focal_loss(C(_logits_for(0.9, 1)), 1).item()
        expected = 0.25 * 0.1**2 * -math.log(0.9)
        assert abs(v - expected) < 1e-15
        assert f"{v:.3e}" == "2.634e-04"

    def test_negative_class_uses_one_minus_alpha(self):
        v = focal_loss(C(_logits_for(0.9, 0)), 0).item()
        assert abs(v - 0.75 * 0.1**2 * -math.log(0.9)) < 1e-15

    def test_cross_entropy_grid(self):
        worst = 0.0
        for a in np.linspace(-8, 8, 10):
            for b in np.linspace(-8, 8, 10):
                for label in (0, 1):
                    logits = np.array([a, b])
                    ce = -(logits[label] - np.logaddexp(a, b))
                    v = focal_loss(C(logits), label, FocalLossConfig(gamma=0.0), class_weighted=False).item()
                    worst = max(worst, abs(v - ce))
        assert worst <= 1e-12

    def test_strictly_decreasing_in_p_t(self):
        ps = np.linspace(0.01, 0.99, 99)
        for label in (0, 1):
            vals = [focal_loss(C(_logits_for(p, label)), label).item() for p in ps]
            assert all(x > y for x, y in zip(vals, vals[1:]))
        assert focal_loss(C(_logits_for(1 - 1e-9, 1)), 1).item() < 1e-19

    def test_batch_mean(self):
        logits = np.array([_logits_for(0.9, 1), _logits_for(0.6, 0)])
        each = [focal_loss(C(l), y).item() for l, y in zip(logits, [1, 0])]
        assert abs(focal_loss(C(logits), [1, 0]).item() - np.mean(each)) < 1e-16

    def test_invalid_label(self):
        with pytest.raises(ValueError):
            focal_loss(C([0.0, 0.0]), 2)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            focal_loss(C([0.0, 0.0, 0.0]), 1)

    def test_extreme_logits_stay_finite(self):
        x = ad.param([0.0, -60.0])
        loss = focal_loss(x, 1)
        ad.backward(loss)
        assert math.isfinite(loss.item()) and np.isfinite(x.grad).all()

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            FocalLossConfig(alpha=1.0)
        with pytest.raises(ConfigurationError):
            FocalLossConfig(gamma=-1.0)

    def test_gradcheck(self):
        for label in (0, 1):
            assert ad.grad_check(lambda n: focal_loss(n, label), [0.3, -1.1]) < 1e-5

    def test_end_to_end_gradient(self):
        r = Rng(3)
        p = init_fleet(TINY, EGO_OTHER, r)
        for node in named_tensors(p).values():
            if node.requires_grad and node.value.ndim == 2:
                node.value = r.normal(node.shape, 0.3)
        x = r.normal((2, 2, 5, 6, 2, 5))
        tensors = [n for n in named_tensors(p).values() if n.requires_grad]
        pick = r.spawn(1)
        probes = []
        for _ in range(10):
            leaf = tensors[pick.below(len(tensors))]
            probes.append((leaf, pick.below(leaf.value.size)))
        err = ad.grad_check_params(lambda: focal_loss(fleet_forward(x, p, EGO_OTHER, TINY), [1, 0]), probes)
        assert err < 1e-4


class TestSchedule:
    cfg = TrainConfig()

    def test_start(self):
        assert lr_at(0, 10, self.cfg) == 0.0

    def test_end_of_warmup(self):
        assert lr_at(30, 10, self.cfg) == 1e-4

    def test_continuous_at_boundary(self):
        left = lr_at(29, 10, self.cfg) + (lr_at(29, 10, self.cfg) - lr_at(28, 10, self.cfg))
        assert abs(left - lr_at(30, 10, self.cfg)) < 1e-18

    def test_final_step(self):
        assert abs(lr_at(79, 10, self.cfg) - 1e-5) < 1e-12

    def test_monotone_decay_after_warmup(self):
        vals = [lr_at(s, 10, self.cfg) for s in range(30, 80)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            lr_at(0, 0, self.cfg)

    def test_config_invariants(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(epochs=3, warmup_epochs=3)
        with pytest.raises(ConfigurationError):
            TrainConfig(floor_lr=1e-3)


class TestAdam:
    def test_one_step(self):
        p = ad.param([0.0])
        adam_step({"p": p}, {"p": np.array([1.0])}, AdamState(), 1e-3)
        assert abs(p.value[0] - (-1e-3 / (1 + 1e-8))) < 1e-18

    def test_zero_gradient(self):
        p = ad.param([2.0, -3.0])
        st_ = AdamState()
        adam_step({"p": p}, {"p": np.zeros(2)}, st_, 1e-3)
        assert np.array_equal(p.value, [2.0, -3.0]) and st_.step == 1

    def test_frozen_skipped(self):
        c = ad.constant([1.0])
        adam_step({"c": c}, {"c": np.array([5.0])}, AdamState(), 1.0)
        assert c.value[0] == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step({"p": ad.param([0.0])}, {"p": np.zeros(2)}, AdamState(), 1e-3)

    def test_deterministic(self):
        def run():
            r = Rng(2)
            p = ad.param(r.normal(5))
            st_ = AdamState()
            for _ in range(20):
                adam_step({"p": p}, {"p": np.sin(p.value * 3)}, st_, 1e-2)
            return p.value.tobytes()

        assert run() == run()

    def test_moments_mirror_shapes(self):
        p = ad.param(np.zeros((2, 3)))
        s = AdamState()
        adam_step({"p": p}, {"p": np.ones((2, 3))}, s, 1e-3)
        assert s.m["p"].shape == (2, 3) and s.v["p"].shape == (2, 3)


class TestAccuracy:
    def test_formula(self):
        assert accuracy(30, 40, 100) == 0.70

    def test_all_correct(self):
        y = [0, 1, 1, 0, 1]
        r = report_from_predictions(y, y)
        assert r.accuracy == 1.0 and r.fp == 0 and r.fn == 0 and r.total == 5

    def test_counts(self):
        r = report_from_predictions([1, 1, 0, 0], [1, 0, 1, 0])
        assert (r.tp, r.fn, r.fp, r.tn) == (1, 1, 1, 1)

    @settings(max_examples=50)
    @given(st.floats(1e-3, 1e3))
    def test_argmax_invariant_to_positive_scale(self, s):
        logits = Rng(4).normal((50, 2))
        labels = (Rng(5).uniform(50) > 0.5).astype(int)
        a = report_from_predictions(labels, np.argmax(logits, -1)).accuracy
        b = report_from_predictions(labels, np.argmax(logits * s, -1)).accuracy
        assert a == b


class TestTrain:
    def test_zero_epochs_returns_init(self, tiny_ds):
        cfg = TrainConfig(epochs=0, seed=4)
        result = train(tiny_ds, cfg, TINY)
        assert result.metrics == []
        fresh = init_fleet(TINY, EGO_ONLY, Rng(4).spawn(11))
        a, b = named_tensors(result.checkpoint.params), named_tensors(fresh)
        assert all(a[k].value.tobytes() == b[k].value.tobytes() for k in b)

    def test_metrics_rows(self, tiny_ds):
        seen = []
        result = train(tiny_ds, TrainConfig(epochs=2, warmup_epochs=1), TINY, on_epoch=seen.append)
        assert seen == result.metrics
        assert [m["epoch"] for m in seen] == [1, 2]
        assert set(seen[0]) == {"epoch", "mean_train_loss", "val_accuracy", "lr"}

    def test_deterministic(self, tiny_ds):
        cfg = TrainConfig(epochs=2, warmup_epochs=1, seed=7)
        a = train(tiny_ds, cfg, TINY)
        b = train(tiny_ds, cfg, TINY)
        ta, tb = named_tensors(a.checkpoint.params), named_tensors(b.checkpoint.params)
        assert all(ta[k].value.tobytes() == tb[k].value.tobytes() for k in ta)
        assert evaluate(a.checkpoint, tiny_ds) == evaluate(b.checkpoint, tiny_ds)

    def test_frozen_encoder_unchanged(self, tiny_ds):
        model = dataclasses.replace(TINY, freeze_encoder=True)
        cfg = TrainConfig(epochs=2, warmup_epochs=1, peak_lr=1e-2, floor_lr=1e-3)
        before = init_fleet(model, EGO_ONLY, Rng(cfg.seed).spawn(11)).encoder.proj.weight.value
        after = train(tiny_ds, cfg, model).checkpoint.params.encoder.proj.weight.value
        assert before.tobytes() == after.tobytes()

    def test_unfrozen_encoder_moves(self, tiny_ds):
        cfg = TrainConfig(epochs=2, warmup_epochs=1, peak_lr=1e-2, floor_lr=1e-3)
        before = init_fleet(TINY, EGO_ONLY, Rng(cfg.seed).spawn(11)).encoder.proj.weight.value
        after = train(tiny_ds, cfg, TINY).checkpoint.params.encoder.proj.weight.value
        assert before.tobytes() != after.tobytes()

    def test_agent_mismatch(self, tiny_ds):
        with pytest.raises(ConfigurationError):
            train(tiny_ds, TrainConfig(epochs=2, warmup_epochs=1, v2x=EGO_OTHER), TINY)

    def test_evaluate_rejects_other_v2x(self, tiny_ds):
        ckpt = train(tiny_ds, TrainConfig(epochs=0), TINY).checkpoint
        with pytest.raises(ConfigurationError):
            evaluate(ckpt, tiny_ds, v2x=EGO_OTHER)

    def test_evaluate_report_covers_split(self, tiny_ds):
        ckpt = train(tiny_ds, TrainConfig(epochs=0), TINY).checkpoint
        r = evaluate(ckpt, tiny_ds, "val")
        assert r.total == len(tiny_ds.splits["val"])
        assert [p["id"] for p in r.predictions] == tiny_ds.split_ids("val")


class TestAblate:
    def test_rows_mirror_configs(self, tmp_path):
        spec = ScenarioSpec(T=2, P=2, F=5)
        ds = build_dataset(20, spec, seed=1)
        cfg = TrainConfig(epochs=2, warmup_epochs=1)
        rows = ablate(ds, TABLE2_CONFIGS, cfg, TINY)
        assert len(rows) == 4
        assert [r["ego"] for r in rows] == [True] * 4
        assert [r["other"] for r in rows] == [False, True, True, True]
        assert [r["infrastructure"] for r in rows] == [False, False, True, False]
        assert [r["behind"] for r in rows] == [False, False, False, True]
        out = tmp_path / "t.csv"
        write_table_csv(rows, out)
        lines = out.read_text().splitlines()
        assert lines[0] == ",".join(TABLE_COLUMNS)
        assert len(lines) == 5
