"""Per-agent perception pipeline, multi-agent query gather, and the query wire format."""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import (
    BadMagicError,
    ConfigurationError,
    DimensionError,
    FormatError,
    TruncationError,
    VersionMismatchError,
)
from .layers import LinearParams, MlpHeadParams, init_linear, init_mlp_head, linear, mlp_head
from .qformer import MotionQformerConfig, MotionQformerParams, QueryState, init_qformer, rollout
from .rng import Rng


class View(IntEnum):
    FRONT = 0
    FRONT_LEFT = 1
    FRONT_RIGHT = 2
    BACK = 3
    BACK_LEFT = 4
    BACK_RIGHT = 5


NUM_VIEWS = len(View)


class AgentRole(IntEnum):
    EGO = 0
    OTHER_VEHICLE = 1
    BEHIND_EGO = 2
    BEHIND_OTHER = 3
    INFRASTRUCTURE = 4

    @property
    def key(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, name: str) -> "AgentRole":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ConfigurationError(f"unknown agent role {name!r}; expected one of {[r.key for r in cls]}") from None


ALL_ROLES: tuple[AgentRole, ...] = tuple(AgentRole)


@dataclass(frozen=True)
class V2XConfig:
    """Agents whose final queries enter the gather; Ego is mandatory."""

    included: frozenset = frozenset({AgentRole.EGO})

    def __post_init__(self):
        roles = frozenset(AgentRole(r) for r in self.included)
        if AgentRole.EGO not in roles:
            raise ConfigurationError("V2X configuration must include the ego vehicle")
        object.__setattr__(self, "included", roles)

    @classmethod
    def of(cls, *roles: AgentRole) -> "V2XConfig":
        return cls(frozenset(roles))

    @property
    def ordered(self) -> tuple[AgentRole, ...]:
        return tuple(sorted(self.included))

    def flat_dim(self, n_q: int, d: int) -> int:
        return len(self.included) * n_q * d

    def to_json(self) -> list[str]:
        return [r.key for r in self.ordered]

    @classmethod
    def from_json(cls, names: Iterable[str]) -> "V2XConfig":
        return cls(frozenset(AgentRole.parse(n) for n in names))

    def table_row(self) -> dict[str, bool]:
        """Flags in the ablation-table column order."""
        inc = self.included
        return {
            "ego": AgentRole.EGO in inc,
            "other": AgentRole.OTHER_VEHICLE in inc,
            "behind": AgentRole.BEHIND_EGO in inc and AgentRole.BEHIND_OTHER in inc,
            "infrastructure": AgentRole.INFRASTRUCTURE in inc,
        }


EGO_ONLY = V2XConfig.of(AgentRole.EGO)
EGO_OTHER = V2XConfig.of(AgentRole.EGO, AgentRole.OTHER_VEHICLE)
EGO_OTHER_INFRA = V2XConfig.of(AgentRole.EGO, AgentRole.OTHER_VEHICLE, AgentRole.INFRASTRUCTURE)
FOUR_VEHICLES = V2XConfig.of(AgentRole.EGO, AgentRole.OTHER_VEHICLE, AgentRole.BEHIND_EGO, AgentRole.BEHIND_OTHER)
TABLE2_CONFIGS = (EGO_ONLY, EGO_OTHER, EGO_OTHER_INFRA, FOUR_VEHICLES)


@dataclass
class EncoderParams:
    proj: LinearParams  # [F, D]
    frozen: bool = False


@dataclass
class FleetParams:
    encoder: EncoderParams
    qformer: MotionQformerParams
    head: MlpHeadParams


def init_fleet(config: MotionQformerConfig, v2x: V2XConfig, rng: Rng) -> FleetParams:
    """Shared encoder + Motion Qformer, and a head sized for ``v2x``."""
    enc = EncoderParams(init_linear(config.F, config.D, rng, trainable=not config.freeze_encoder), config.freeze_encoder)
    qf = init_qformer(config, rng)
    head = init_mlp_head(v2x.flat_dim(config.N_Q, config.D), rng)
    return FleetParams(enc, qf, head)


def named_tensors(obj, prefix: str = "") -> dict[str, Node]:
    """Flat ``name -> Node`` map of every tensor in a parameter tree (shared nodes listed once)."""
    out: dict[str, Node] = {}
    seen: set[int] = set()

    def visit(o, name):
        if isinstance(o, Node):
            if id(o) not in seen:
                seen.add(id(o))
                out[name] = o
        elif dataclasses.is_dataclass(o):
            for f in dataclasses.fields(o):
                visit(getattr(o, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(o, (list, tuple)):
            for i, item in enumerate(o):
                visit(item, f"{name}.{i}")

    visit(obj, prefix)
    return out


def trainable_parameters(params: FleetParams) -> dict[str, Node]:
    return {k: v for k, v in named_tensors(params).items() if v.requires_grad}


def encode_view(tokens, enc: EncoderParams) -> Node:
    """Project ``[..., P, F]`` patch features to ``[..., P, D]``."""
    x = ad.as_node(tokens)
    if x.shape[-1] != enc.proj.in_dim:
        raise DimensionError(f"encode_view: feature dim {x.shape[-1]} vs encoder input {enc.proj.in_dim}")
    return linear(x, enc.proj)


def stitch_views(views: Sequence[Node]) -> Node:
    """Concatenate six ``[..., P, D]`` view encodings in canonical order -> ``[..., 6P, D]``."""
    if len(views) != NUM_VIEWS:
        raise DimensionError(f"stitch_views: expected {NUM_VIEWS} views, got {len(views)}")
    ref = views[0].shape
    for v in views[1:]:
        if v.shape != ref:
            raise DimensionError(f"stitch_views: view shapes differ {ref} vs {v.shape}")
    return ad.concat(list(views), axis=-2)


def encode_frames(agent_frames, enc: EncoderParams) -> list[Node]:
    """``[..., T, 6, P, F]`` -> list of T stitched frames ``[..., 6P, D]``.

    All views and frames go through the encoder in one projection; merging
    the (view, patch) axes is the canonical-order stitch.
    """
    x = ad.as_node(agent_frames)
    if x.ndim < 4 or x.shape[-3] != NUM_VIEWS:
        raise DimensionError(f"expected [..., T, {NUM_VIEWS}, P, F] agent frames, got {x.shape}")
    *lead, t, v, p, _ = x.shape
    encoded = encode_view(x, enc)
    stitched = ad.reshape(encoded, (*lead, t, v * p, encoded.shape[-1]))
    k = len(lead)
    return [ad.getitem(stitched, (*(slice(None),) * k, i)) for i in range(t)]


def agent_forward(agent_frames, enc: EncoderParams, qf: MotionQformerParams, config: MotionQformerConfig) -> QueryState:
    """Encode + stitch every frame of one agent, then roll the Motion Qformer to Q_T."""
    return rollout(encode_frames(agent_frames, enc), qf, config)


def gather_queries(per_agent: Mapping[AgentRole, Node], cfg: V2XConfig) -> Node:
    """Concatenate included agents' final queries along the token axis in role order."""
    missing = [r.key for r in cfg.ordered if r not in per_agent]
    if missing:
        raise ConfigurationError(f"gather: no query for included roles {missing}")
    return ad.concat([per_agent[r] for r in cfg.ordered], axis=-2)


def _agent_slice(scenario, index: int):
    # scenario: [..., T, N_A, 6, P, F]
    idx = (Ellipsis, slice(None), index, slice(None), slice(None), slice(None))
    if isinstance(scenario, Node):
        return ad.getitem(scenario, idx)
    return scenario[idx]


def fleet_forward(
    scenario,
    params: FleetParams,
    cfg: V2XConfig,
    config: MotionQformerConfig,
    agents: Sequence[AgentRole] = ALL_ROLES,
    executor=None,
) -> Node:
    """Class logits ``[..., 2]`` for scenario features ``[..., T, N_A, 6, P, F]``.

    ``agents`` names the role stored at each position of the N_A axis.
    Excluded agents are never computed.  With an ``executor`` the per-agent
    rollouts run concurrently; the gather order is fixed either way.
    """
    expected = cfg.flat_dim(config.N_Q, config.D)
    if params.head.flat_in != expected:
        raise ConfigurationError(
            f"head expects {params.head.flat_in} features but V2X config {cfg.to_json()} yields {expected}"
        )
    agents = list(agents)
    shape = scenario.shape
    if len(shape) < 5 or shape[-4] != len(agents):
        raise DimensionError(f"scenario {shape} does not hold {len(agents)} agents on axis -4")
    missing = [r.key for r in cfg.ordered if r not in agents]
    if missing:
        raise ConfigurationError(f"scenario has no data for included roles {missing}")

    def run(role: AgentRole) -> Node:
        frames = _agent_slice(scenario, agents.index(role))
        return agent_forward(frames, params.encoder, params.qformer, config).tokens

    roles = cfg.ordered
    outputs = list(executor.map(run, roles)) if executor is not None else [run(r) for r in roles]
    gathered = gather_queries(dict(zip(roles, outputs)), cfg)
    lead = gathered.shape[:-2]
    return mlp_head(ad.reshape(gathered, (*lead, expected)), params.head)


# --------------------------------------------------------------- wire format

MESSAGE_MAGIC = b"QMSG"
MESSAGE_VERSION = 1
_MESSAGE_HEADER = struct.Struct("<4sHBBIHH")
_DTYPE_F64 = 0


@dataclass(eq=False)
class QueryMessage:
    agent: AgentRole
    frame_index: int
    tokens: np.ndarray  # [N_Q, D] float64

    def __eq__(self, other):
        if not isinstance(other, QueryMessage):
            return NotImplemented
        a = np.ascontiguousarray(self.tokens, dtype="<f8")
        b = np.ascontiguousarray(other.tokens, dtype="<f8")
        return (
            self.agent == other.agent
            and self.frame_index == other.frame_index
            and a.shape == b.shape
            and a.tobytes() == b.tobytes()
        )


def encode_message(m: QueryMessage) -> bytes:
    tokens = np.asarray(m.tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise DimensionError(f"message tokens must be 2-D, got {tokens.shape}")
    n_q, d = tokens.shape
    if not (0 < n_q < 1 << 16 and 0 < d < 1 << 16 and 0 <= m.frame_index < 1 << 32):
        raise FormatError("message dims or frame index out of range")
    if not np.isfinite(tokens).all():
        raise FormatError("message tokens must be finite")
    header = _MESSAGE_HEADER.pack(MESSAGE_MAGIC, MESSAGE_VERSION, int(m.agent), _DTYPE_F64, m.frame_index, n_q, d)
    return header + np.ascontiguousarray(tokens, dtype="<f8").tobytes()


def decode_message(data: bytes) -> QueryMessage:
    if len(data) < _MESSAGE_HEADER.size:
        if data[:4] != MESSAGE_MAGIC[: len(data[:4])]:
            raise BadMagicError(f"bad magic {bytes(data[:4])!r}")
        raise TruncationError(f"message header needs {_MESSAGE_HEADER.size} bytes, got {len(data)}")
    magic, version, role, dtype, frame, n_q, d = _MESSAGE_HEADER.unpack_from(data)
    if magic != MESSAGE_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MESSAGE_MAGIC!r}")
    if version != MESSAGE_VERSION:
        raise VersionMismatchError(f"message version {version}, expected {MESSAGE_VERSION}")
    if dtype != _DTYPE_F64:
        raise FormatError(f"unsupported payload dtype {dtype}")
    try:
        agent = AgentRole(role)
    except ValueError:
        raise FormatError(f"unknown agent role ordinal {role}") from None
    expected = _MESSAGE_HEADER.size + 8 * n_q * d
    if len(data) < expected:
        raise TruncationError(f"message needs {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise FormatError(f"message has {len(data) - expected} trailing bytes")
    tokens = np.frombuffer(data, dtype="<f8", count=n_q * d, offset=_MESSAGE_HEADER.size).astype(np.float64)
    return QueryMessage(agent, frame, tokens.reshape(n_q, d))
