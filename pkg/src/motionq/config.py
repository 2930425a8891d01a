"""Run configuration: one JSON document with ``model``, ``data``, ``train`` and ``v2x`` sections.

Every key is optional; omitted keys take the defaults below.  Unknown keys
are rejected.

``model``  D=32, N_Q=8, L=2, H=4, temporal_kv_mode="concat_current_prev",
           tie_kv=true, F=16, freeze_encoder=false
``data``   count=2000, seed=0, T=5, agents=[all five roles], P=4, F=16,
           noise_sigma=1.0, amplitude=3.0, signature_views=[all six views],
           visible_to=["ego"], active_frames=[1..T]
``train``  epochs=8, batch_size=8, warmup_epochs=3, peak_lr=1e-4,
           floor_lr=1e-5, seed=0, loss={"alpha": 0.25, "gamma": 2.0}
``v2x``    {"included": ["ego"]}
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field

from .data import ScenarioSpec
from .errors import ConfigurationError
from .fleet import ALL_ROLES, AgentRole, V2XConfig, View
from .qformer import MotionQformerConfig
from .training import FocalLossConfig, TrainConfig

_DATA_DEFAULTS = {
    "count": 2000,
    "seed": 0,
    "T": 5,
    "agents": [r.key for r in ALL_ROLES],
    "P": 4,
    "F": 16,
    "noise_sigma": 1.0,
    "amplitude": 3.0,
    "signature_views": [v.name.lower() for v in View],
    "visible_to": ["ego"],
    "active_frames": None,  # all frames
}
_SECTIONS = ("model", "data", "train", "v2x")


@dataclass(frozen=True)
class DataConfig:
    count: int
    seed: int
    spec: ScenarioSpec


@dataclass(frozen=True)
class RunConfig:
    model: MotionQformerConfig = MotionQformerConfig()
    data: DataConfig = field(default_factory=lambda: parse_data({}))
    train: TrainConfig = TrainConfig()

    @property
    def v2x(self) -> V2XConfig:
        return self.train.v2x

    def resolved(self) -> dict:
        """Fully expanded JSON form; parsing it yields an identical config."""
        spec = self.data.spec
        return {
            "model": dataclasses.asdict(self.model),
            "data": {
                "count": self.data.count,
                "seed": self.data.seed,
                "T": spec.T,
                "agents": [a.key for a in spec.agents],
                "P": spec.P,
                "F": spec.F,
                "noise_sigma": spec.noise_sigma,
                "amplitude": spec.amplitude,
                "signature_views": [v.name.lower() for v in sorted(spec.signature_views)],
                "visible_to": [a.key for a in sorted(spec.visible_to)],
                "active_frames": sorted(spec.active_frames),
            },
            "train": {k: v for k, v in self.train.to_json().items() if k != "v2x"},
            "v2x": {"included": self.v2x.to_json()},
        }


def _reject_unknown(section: str, got: dict, allowed) -> None:
    if not isinstance(got, dict):
        raise ConfigurationError(f"section {section!r} must be a JSON object")
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigurationError(f"unknown key(s) in {section!r}: {extra}")


def _build(cls, section: str, values: dict):
    names = [f.name for f in dataclasses.fields(cls)]
    _reject_unknown(section, values, names)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {section!r} section: {exc}") from exc


def _view(name: str) -> View:
    try:
        return View[name.upper()]
    except (KeyError, AttributeError):
        raise ConfigurationError(f"unknown view {name!r}") from None


def parse_data(values: dict) -> DataConfig:
    _reject_unknown("data", values, _DATA_DEFAULTS)
    d = {**_DATA_DEFAULTS, **values}
    frames = d["active_frames"] if d["active_frames"] is not None else range(1, d["T"] + 1)
    try:
        spec = ScenarioSpec(
            T=d["T"],
            agents=tuple(AgentRole.parse(a) for a in d["agents"]),
            P=d["P"],
            F=d["F"],
            noise_sigma=float(d["noise_sigma"]),
            amplitude=float(d["amplitude"]),
            signature_views=frozenset(_view(v) for v in d["signature_views"]),
            visible_to=frozenset(AgentRole.parse(a) for a in d["visible_to"]),
            active_frames=frozenset(frames),
            label=1,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"invalid 'data' section: {exc}") from exc
    if not isinstance(d["count"], int) or d["count"] < 10:
        raise ConfigurationError("data.count must be an integer >= 10")
    return DataConfig(d["count"], int(d["seed"]), spec)


def parse_v2x(values) -> V2XConfig:
    if isinstance(values, list):
        values = {"included": values}
    _reject_unknown("v2x", values, ("included",))
    return V2XConfig.from_json(values.get("included", ["ego"]))


def parse_run_config(doc: dict) -> RunConfig:
    _reject_unknown("config", doc, _SECTIONS)
    model = _build(MotionQformerConfig, "model", doc.get("model", {}))
    data = parse_data(doc.get("data", {}))
    if data.spec.F != model.F:
        raise ConfigurationError(f"data.F={data.spec.F} differs from model.F={model.F}")
    train_values = dict(doc.get("train", {}))
    _reject_unknown("train", train_values, [f.name for f in dataclasses.fields(TrainConfig) if f.name != "v2x"])
    if "loss" in train_values:
        train_values["loss"] = _build(FocalLossConfig, "train.loss", train_values["loss"])
    train_values["v2x"] = parse_v2x(doc.get("v2x", {}))
    train = _build(TrainConfig, "train", train_values)
    return RunConfig(model, data, train)


def loads_run_config(text: str, overrides: dict[str, object] | None = None) -> RunConfig:
    """Parse JSON text; malformed JSON is reported with its line and column."""
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    return parse_run_config(apply_overrides(doc, overrides or {}))


def apply_overrides(doc: dict, overrides: dict[str, object]) -> dict:
    """Apply dotted-path overrides such as ``{"train.epochs": 0}``."""
    doc = copy.deepcopy(doc)
    for path, value in overrides.items():
        keys = path.split(".")
        if keys[0] not in _SECTIONS or len(keys) < 2:
            raise ConfigurationError(f"override {path!r} must look like section.key")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override {path!r} walks into a non-object")
        node[keys[-1]] = value
    return doc
