"""The constructed experiments: learnability, cooperative gain, temporal necessity.

Each returns a plain dict of accuracies and wall-clock seconds so the
acceptance tests and the scripts in ``scripts/`` report the same numbers.
"""

from __future__ import annotations

import time

from .data import ScenarioSpec, build_dataset
from .fleet import EGO_ONLY, EGO_OTHER, AgentRole
from .qformer import MotionQformerConfig
from .training import TrainConfig, ablate, evaluate, train

COUNT = 2000


def _fit(ds, cfg: TrainConfig, model: MotionQformerConfig):
    result = train(ds, cfg, model)
    return result, evaluate(result.checkpoint, ds, "test").accuracy


def learnability(seed: int = 0, count: int = COUNT) -> dict:
    """Signature visible to the ego vehicle in every view and frame."""
    start = time.perf_counter()
    ds = build_dataset(count, ScenarioSpec(agents=(AgentRole.EGO,)), seed)
    result, acc = _fit(ds, TrainConfig(seed=seed), MotionQformerConfig())
    return {
        "test_accuracy": acc,
        "first_epoch_loss": result.metrics[0]["mean_train_loss"],
        "last_epoch_loss": result.metrics[-1]["mean_train_loss"],
        "best_val_accuracy": max(m["val_accuracy"] for m in result.metrics),
        "seconds": time.perf_counter() - start,
    }


def partial_observability_spec() -> ScenarioSpec:
    return ScenarioSpec(agents=(AgentRole.EGO, AgentRole.OTHER_VEHICLE), visible_to={AgentRole.OTHER_VEHICLE})


def cooperative(seed: int = 1, count: int = COUNT) -> dict:
    """Signature seen only by the other vehicle: ego-only vs ego + other."""
    start = time.perf_counter()
    ds = build_dataset(count, partial_observability_spec(), seed)
    rows = ablate(ds, [EGO_ONLY, EGO_OTHER], TrainConfig(seed=seed), MotionQformerConfig())
    return {"ego_only": rows[0]["accuracy"], "ego_other": rows[1]["accuracy"], "seconds": time.perf_counter() - start}


def temporal(seed: int = 2, count: int = COUNT) -> dict:
    """Signature only in frame 1 of 5: full rollout vs a model that sees frame 5 alone."""
    start = time.perf_counter()
    ds = build_dataset(count, ScenarioSpec(agents=(AgentRole.EGO,), active_frames={1}), seed)
    cfg = TrainConfig(seed=seed)
    _, full = _fit(ds, cfg, MotionQformerConfig())
    _, last = _fit(ds.select_frames([ds.features.shape[1] - 1]), cfg, MotionQformerConfig())
    return {"all_frames": full, "last_frame_only": last, "seconds": time.perf_counter() - start}
