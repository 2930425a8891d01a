"""Synthetic accident scenarios, dataset layout, and the ABT1 tensor file format.

A scenario is a ``T x N_A x 6 x P x F`` block of Gaussian patch features.
Accident scenarios carry a fixed unit direction ``s`` (one per dataset),
scaled by the signature amplitude and added to every patch of the chosen
(agent, view, frame) cells.  Which agents, views, and frames carry it is
what the experiments vary.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagicError, DimOverflowError, FormatError, TruncationError, VersionMismatchError
from .fleet import ALL_ROLES, NUM_VIEWS, AgentRole, View
from .rng import Rng

SPLIT_RATIOS = (0.7, 0.15, 0.15)
SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1

_LABEL_TAG = 1
_NOISE_TAG = 2
_SPLIT_TAG = 3
_SIGNATURE_TAG = 0x5167


@dataclass(frozen=True)
class ScenarioSpec:
    T: int = 5
    agents: tuple = ALL_ROLES
    P: int = 4
    F: int = 16
    noise_sigma: float = 1.0
    amplitude: float = 3.0
    signature_views: frozenset = frozenset(View)
    visible_to: frozenset = frozenset({AgentRole.EGO})
    active_frames: frozenset | None = None  # 1-based; None means every frame
    label: int = 1
    nominal_image_size: tuple = (224, 224)  # metadata only

    def __post_init__(self):
        object.__setattr__(self, "agents", tuple(AgentRole(a) for a in self.agents))
        object.__setattr__(self, "signature_views", frozenset(View(v) for v in self.signature_views))
        object.__setattr__(self, "visible_to", frozenset(AgentRole(a) for a in self.visible_to))
        frames = range(1, self.T + 1) if self.active_frames is None else self.active_frames
        object.__setattr__(self, "active_frames", frozenset(int(t) for t in frames))
        if not self.agents:
            raise ValueError("scenario needs at least one agent")
        if len(set(self.agents)) != len(self.agents):
            raise ValueError("duplicate agent roles")
        if self.T < 1 or self.P < 1 or self.F < 1:
            raise ValueError("T, P and F must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if any(not 1 <= t <= self.T for t in self.active_frames):
            raise ValueError(f"active frames must lie in 1..{self.T}")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        injected = bool(self.visible_to and self.signature_views and self.active_frames)
        if injected != (self.label == 1):
            raise ValueError("label must be 1 exactly when a signature is injected")

    def negative(self) -> "ScenarioSpec":
        return dataclasses.replace(self, label=0, visible_to=frozenset(), signature_views=frozenset(), active_frames=frozenset())

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.T, len(self.agents), NUM_VIEWS, self.P, self.F)


def signature_direction(seed: int, F: int) -> np.ndarray:
    """Unit vector in feature space, fixed per dataset seed."""
    s = Rng(seed).spawn(_SIGNATURE_TAG).normal(F)
    return s / np.linalg.norm(s)


def generate_scenario(spec: ScenarioSpec, rng: Rng, direction: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Noise ``N(0, sigma^2)`` plus ``amplitude * direction`` on the scenario's signature cells."""
    x = rng.normal(spec.shape, spec.noise_sigma)
    if spec.label == 1:
        if direction is None or np.shape(direction) != (spec.F,):
            raise ValueError(f"positive scenarios need an F={spec.F} signature direction")
        bump = spec.amplitude * np.asarray(direction, dtype=np.float64)
        for role in spec.visible_to:
            if role not in spec.agents:
                continue
            a = spec.agents.index(role)
            for t in spec.active_frames:
                for v in spec.signature_views:
                    x[t - 1, a, int(v)] += bump
    return x, spec.label


@dataclass
class Dataset:
    ids: list[str]
    features: np.ndarray  # [N, T, N_A, 6, P, F]
    labels: np.ndarray  # [N] int
    agents: tuple
    splits: dict[str, np.ndarray] = field(default_factory=dict)  # split -> scenario indices
    seed: int = 0

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[name]
        return self.features[idx], self.labels[idx]

    def split_ids(self, name: str) -> list[str]:
        return [self.ids[i] for i in self.splits[name]]

    def select_frames(self, frames: Sequence[int]) -> "Dataset":
        """Copy keeping only the given 0-based frame indices."""
        return dataclasses.replace(self, features=self.features[:, list(frames)])


def _split_indices(count: int, seed: int) -> dict[str, np.ndarray]:
    perm = Rng(seed).spawn(_SPLIT_TAG).permutation(count)
    n_train = int(round(SPLIT_RATIOS[0] * count))
    n_val = int(round(SPLIT_RATIOS[1] * count))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train : n_train + n_val]),
        "test": np.sort(perm[n_train + n_val :]),
    }


def scenario_id(i: int) -> str:
    return f"s{i:05d}"


def build_dataset(count: int, specs: ScenarioSpec | Sequence[ScenarioSpec], seed: int) -> Dataset:
    """Generate a balanced dataset in memory.

    Positive scenario ``k`` uses ``specs[k % len(specs)]``; negatives use the
    first spec with its signature removed.  Labels, noise, and split
    assignment each come from their own stream derived from ``seed``.
    """
    specs = [specs] if isinstance(specs, ScenarioSpec) else list(specs)
    if count < 10:
        raise ValueError("dataset needs at least 10 scenarios")
    if not specs:
        raise ValueError("no scenario specs")
    base = specs[0]
    for s in specs:
        if s.label != 1:
            raise ValueError("dataset specs describe the positive class; use label=1")
        if s.shape != base.shape or s.agents != base.agents:
            raise ValueError("all specs in a dataset must share T, agents, P and F")
    root = Rng(seed)
    n_pos = count // 2
    labels = np.array([1] * n_pos + [0] * (count - n_pos))[root.spawn(_LABEL_TAG).permutation(count)]
    direction = signature_direction(seed, base.F)
    negative = base.negative()
    noise = root.spawn(_NOISE_TAG)
    features = np.empty((count, *base.shape))
    k = 0
    for i, label in enumerate(labels):
        if label == 1:
            spec = specs[k % len(specs)]
            k += 1
        else:
            spec = negative
        features[i], _ = generate_scenario(spec, noise, direction)
    return Dataset(
        ids=[scenario_id(i) for i in range(count)],
        features=features,
        labels=labels.astype(np.int64),
        agents=base.agents,
        splits=_split_indices(count, seed),
        seed=seed,
    )


# ----------------------------------------------------------- tensor format

TENSOR_MAGIC = b"ABT1"
TENSOR_VERSION = 1
_TENSOR_HEADER = struct.Struct("<4sHBBQ")
_DTYPES = {0: "<f8", 1: "<f4"}
_DTYPE_CODES = {"f64": 0, "f32": 1}
_MAX_NUMEL = 1 << 40


def encode_tensor(t: np.ndarray, dtype: str = "f64") -> bytes:
    arr = np.asarray(t, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("only finite tensors can be written")
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"dtype must be one of {sorted(_DTYPE_CODES)}")
    if arr.ndim > 255:
        raise DimOverflowError(f"rank {arr.ndim} exceeds 255")
    if any(d >= 1 << 32 for d in arr.shape):
        raise DimOverflowError(f"dimension in {arr.shape} exceeds u32")
    code = _DTYPE_CODES[dtype]
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, code, arr.ndim, 0)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + dims + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record at ``offset``; returns ``(array, end_offset)``."""
    end = offset + _TENSOR_HEADER.size
    head = bytes(buf[offset : offset + 4])
    if head != TENSOR_MAGIC[: len(head)]:
        raise BadMagicError(f"bad tensor magic {head!r}")
    if len(buf) < end:
        raise TruncationError(f"tensor header needs {_TENSOR_HEADER.size} bytes, got {len(buf) - offset}")
    _magic, version, code, rank, _reserved = _TENSOR_HEADER.unpack_from(buf, offset)
    if version != TENSOR_VERSION:
        raise VersionMismatchError(f"tensor version {version}, expected {TENSOR_VERSION}")
    if code not in _DTYPES:
        raise FormatError(f"unknown tensor dtype code {code}")
    if len(buf) < end + 4 * rank:
        raise TruncationError(f"tensor dims need {4 * rank} bytes, got {len(buf) - end}")
    dims = struct.unpack_from(f"<{rank}I", buf, end)
    end += 4 * rank
    numel = 1
    for d in dims:
        numel *= d
    if numel > _MAX_NUMEL:
        raise DimOverflowError(f"tensor of shape {dims} is too large")
    itemsize = np.dtype(_DTYPES[code]).itemsize
    need = numel * itemsize
    if len(buf) - end < need:
        raise TruncationError(f"tensor payload needs {need} bytes, got {len(buf) - end}")
    arr = np.frombuffer(buf, dtype=_DTYPES[code], count=numel, offset=end).astype(np.float64)
    return arr.reshape(dims), end + need


def write_tensor(path, t: np.ndarray, dtype: str = "f64") -> None:
    Path(path).write_bytes(encode_tensor(t, dtype))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after tensor")
    return arr


# --------------------------------------------------------- dataset on disk


def _spec_json(spec: ScenarioSpec) -> dict:
    return {
        "T": spec.T,
        "agents": [a.key for a in spec.agents],
        "P": spec.P,
        "F": spec.F,
        "noise_sigma": spec.noise_sigma,
        "amplitude": spec.amplitude,
        "signature_views": sorted(v.name.lower() for v in spec.signature_views),
        "visible_to": sorted(a.key for a in spec.visible_to),
        "active_frames": sorted(spec.active_frames),
        "nominal_image_size": list(spec.nominal_image_size),
    }


def write_dataset(ds: Dataset, out_dir, specs: Sequence[ScenarioSpec] = ()) -> dict:
    out = Path(out_dir)
    (out / "scenarios").mkdir(parents=True, exist_ok=True)
    split_of = {}
    for name in SPLITS:
        for i in ds.splits[name]:
            split_of[int(i)] = name
    entries = []
    for i, sid in enumerate(ds.ids):
        rel = f"scenarios/{sid}.abt"
        write_tensor(out / rel, ds.features[i])
        entries.append(
            {
                "id": sid,
                "path": rel,
                "label": int(ds.labels[i]),
                "agents": [a.key for a in ds.agents],
                "T": int(ds.features.shape[1]),
                "split": split_of[i],
            }
        )
    manifest = {
        "format_version": MANIFEST_VERSION,
        "generator_seed": ds.seed,
        "scenario_count": len(ds.ids),
        "split_ratios": list(SPLIT_RATIOS),
        "agents": [a.key for a in ds.agents],
        "specs": [_spec_json(s) for s in specs],
        "splits": {name: ds.split_ids(name) for name in SPLITS},
        "scenarios": entries,
    }
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, out / "manifest.json")
    return manifest


def generate_dataset(count: int, specs: ScenarioSpec | Sequence[ScenarioSpec], seed: int, out_dir) -> dict:
    """Build a dataset and write ``manifest.json`` + ``scenarios/<id>.abt`` under ``out_dir``."""
    specs = [specs] if isinstance(specs, ScenarioSpec) else list(specs)
    return write_dataset(build_dataset(count, specs, seed), out_dir, specs)


def load_dataset(data_dir) -> Dataset:
    root = Path(data_dir)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise VersionMismatchError(f"manifest version {manifest.get('format_version')}, expected {MANIFEST_VERSION}")
    entries = manifest["scenarios"]
    ids = [e["id"] for e in entries]
    features = np.stack([read_tensor(root / e["path"]) for e in entries])
    labels = np.array([e["label"] for e in entries], dtype=np.int64)
    position = {sid: i for i, sid in enumerate(ids)}
    splits = {name: np.array(sorted(position[s] for s in manifest["splits"][name]), dtype=np.int64) for name in SPLITS}
    return Dataset(
        ids=ids,
        features=features,
        labels=labels,
        agents=tuple(AgentRole.parse(a) for a in manifest["agents"]),
        splits=splits,
        seed=manifest["generator_seed"],
    )
