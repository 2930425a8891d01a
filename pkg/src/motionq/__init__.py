"""Temporal query-recurrence accident detection over multi-view, multi-agent features."""

from .fleet import AgentRole, V2XConfig, View, fleet_forward, init_fleet
from .qformer import MotionQformerConfig, rollout
from .training import FocalLossConfig, TrainConfig, evaluate, focal_loss, train

__all__ = [
    "AgentRole",
    "FocalLossConfig",
    "MotionQformerConfig",
    "TrainConfig",
    "V2XConfig",
    "View",
    "evaluate",
    "fleet_forward",
    "focal_loss",
    "init_fleet",
    "rollout",
    "train",
]
