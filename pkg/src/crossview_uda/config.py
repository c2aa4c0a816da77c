"""Shared domain types and the training configuration.

Everything here is an immutable value object. Other modules only depend on
these contracts, never on each other's internals.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class ViewRole(str, enum.Enum):
    ANCHOR = "anchor"
    POSITIVE = "positive"
    HELD_OUT = "held_out"


class DomainRole(str, enum.Enum):
    SOURCE = "source"
    AUXILIARY_VIEW = "auxiliary_view"
    TARGET = "target"


@dataclass(frozen=True)
class ViewId:
    index: int
    role: ViewRole

    def __post_init__(self):
        if self.index not in (1, 2, 3, 4):
            raise ValueError(f"view index must be in 1..4, got {self.index}")
        object.__setattr__(self, "role", ViewRole(self.role))

    @property
    def name(self) -> str:
        return f"V{self.index}"


@dataclass(frozen=True)
class ModalityId:
    index: int
    name: str
    domain_role: DomainRole

    def __post_init__(self):
        object.__setattr__(self, "domain_role", DomainRole(self.domain_role))


@dataclass(frozen=True, eq=False)
class Clip:
    """A dense T x H x W x C clip in [0, 1] plus its provenance."""

    data: np.ndarray
    view: ViewId
    modality: ModalityId
    class_id: Optional[int]
    clip_id: str
    time_window: tuple[int, int]

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"clip {self.clip_id}: expected T x H x W x C, got shape {self.data.shape}")
        is_target = self.modality.domain_role is DomainRole.TARGET
        if is_target and self.class_id is not None:
            raise ValueError(f"clip {self.clip_id}: target-domain clips carry no label")
        if not is_target and self.class_id is None:
            raise ValueError(f"clip {self.clip_id}: labeled domain clip without class_id")

    def check_dims(self, cfg: "TrainConfig") -> None:
        expected = (cfg.T, cfg.H, cfg.W, cfg.C)
        for axis, got, want in zip("THWC", self.data.shape, expected):
            if got != want:
                raise ValueError(f"clip {self.clip_id}: axis {axis} has size {got}, config expects {want}")


@dataclass(frozen=True)
class SampleRecord:
    """One manifest row. ``view`` is the view index, ``modality`` the modality token."""

    clip_ref: str
    view: int
    modality: str
    class_id: Optional[int]
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if self.start_frame >= self.end_frame:
            raise ValueError(
                f"record {self.clip_ref}: start_frame {self.start_frame} must be < end_frame {self.end_frame}"
            )
        if self.class_id is not None and self.class_id < 0:
            raise ValueError(f"record {self.clip_ref}: negative class_id")

    def overlap(self, other: "SampleRecord") -> int:
        """Frames shared by the two half-open intervals."""
        return max(0, min(self.end_frame, other.end_frame) - max(self.start_frame, other.start_frame))

    def without_label(self) -> "SampleRecord":
        return dataclasses.replace(self, class_id=None)


@dataclass(frozen=True)
class SyncGroup:
    anchor: SampleRecord
    positives: tuple[SampleRecord, ...]
    class_id: int
    overlap_window: tuple[int, int]
    flagged: bool = False

    @property
    def group_id(self) -> str:
        return self.anchor.clip_ref

    @property
    def is_singleton(self) -> bool:
        return not self.positives


class EmbeddingDomain(str, enum.Enum):
    SOURCE = "source"
    VIEW_POSITIVE = "view_positive"
    TARGET = "target"


@dataclass(frozen=True, eq=False)
class EmbeddingBatch:
    features: "object"  # B x d array or tensor
    labels: np.ndarray
    domain: EmbeddingDomain
    pseudo: np.ndarray = field(default=None)  # boolean mask of pseudo-labelled rows

    def __post_init__(self):
        if len(self.labels) < 1 or self.features.shape[0] != len(self.labels):
            raise ValueError("embedding batch needs B >= 1 rows with one label each")
        if self.pseudo is None:
            object.__setattr__(self, "pseudo", np.zeros(len(self.labels), dtype=bool))


_POSITIVE_INT = (
    "K", "T", "H", "W", "C", "d_model", "n_blocks", "n_heads", "patch_t", "patch_hw", "d_proj",
    "epochs_phase1", "epochs_phase2", "batch_phase1", "batch_phase2", "queue_capacity", "pairs_per_target",
)
_POSITIVE_REAL = ("tau", "lr_phase1", "lr_phase2")
_NONNEGATIVE_REAL = ("lambda1", "alpha", "lambda_offdiag", "weight_decay")


@dataclass(frozen=True)
class TrainConfig:
    K: int = 8
    T: int = 8
    H: int = 32
    W: int = 32
    C: int = 3
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    patch_t: int = 2
    patch_hw: int = 8
    d_proj: int = 32
    tau: float = 0.1
    lambda1: float = 1.0
    alpha: float = 1.0
    lambda_offdiag: float = 5e-3
    lr_phase1: float = 1e-3
    lr_phase2: float = 5e-3
    weight_decay: float = 1e-9
    epochs_phase1: int = 20
    epochs_phase2: int = 20
    batch_phase1: int = 8
    batch_phase2: int = 64
    freeze_fraction: float = 0.5
    queue_capacity: int = 256
    pairs_per_target: int = 4
    pseudo_conf_threshold: float = 0.8
    seed: int = 0

    @property
    def n_tokens(self) -> int:
        return (self.T // self.patch_t) * (self.H // self.patch_hw) * (self.W // self.patch_hw) + 1

    @property
    def n_frozen_blocks(self) -> int:
        return math.floor(self.freeze_fraction * self.n_blocks)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, value in raw.items():
            default = getattr(cls, key)
            if isinstance(default, int) and not isinstance(default, bool):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ValueError(f"config key {key} must be an integer, got {value!r}")
            elif isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ValueError(f"config key {key} must be a number, got {value!r}")
            values[key] = type(default)(value)
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a flat key-value object")
        return cls.from_dict(raw)


def validate_config(cfg: TrainConfig) -> list[str]:
    """Return every violated TrainConfig rule; an empty list means the config is usable."""
    problems = []
    for name in _POSITIVE_INT + _POSITIVE_REAL:
        value = getattr(cfg, name)
        if not (value > 0 and math.isfinite(value)):
            problems.append(f"{name} must be > 0")
    for name in _NONNEGATIVE_REAL:
        value = getattr(cfg, name)
        if not (value >= 0 and math.isfinite(value)):
            problems.append(f"{name} must be >= 0")
    if not 0.0 <= cfg.freeze_fraction <= 1.0:
        problems.append("freeze_fraction ∈ [0,1]")
    if not 0.0 <= cfg.pseudo_conf_threshold <= 1.0:
        problems.append("pseudo_conf_threshold ∈ [0,1]")
    if cfg.K < 2 and cfg.K > 0:
        problems.append("K must be >= 2")
    if problems:
        return problems
    if cfg.T % cfg.patch_t:
        problems.append("T must be divisible by patch_t")
    for axis in ("H", "W"):
        if getattr(cfg, axis) % cfg.patch_hw:
            problems.append(f"{axis} must be divisible by patch_hw")
    if cfg.d_model % cfg.n_heads:
        problems.append("d_model must be divisible by n_heads")
    return problems
