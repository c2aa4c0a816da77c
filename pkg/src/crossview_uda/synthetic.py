"""Procedural multi-view, multi-modal clip corpus.

Each class owns a smooth latent trajectory. A trajectory sample is a stack of
blobs (x, y, log-radius per blob) evolving over the clip; an *event* is one
jittered performance of its class trajectory, rendered once per
(view, modality) pair by warping the scene (view), mixing channels (modality)
and adding i.i.d. noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from crossview_uda.config import Clip, DomainRole, ModalityId, SampleRecord, ViewId, ViewRole
from crossview_uda.sync import Manifest

# fixed blob colours in scene channel space, independent of class
_BLOB_COLOURS = np.array([
    [1.00, 0.55, 0.20],
    [0.25, 0.60, 1.00],
    [0.70, 1.00, 0.45],
    [0.90, 0.30, 0.80],
])
_BACKGROUND = 0.08

# substream tags
_CLASS_STREAM, _EVENT_STREAM, _NOISE_STREAM, _SHIFT_STREAM, _BIAS_STREAM = range(5)


def make_view_bias(H: int, W: int, amplitude: float, seed: int) -> np.ndarray:
    """Smooth additive nuisance pattern: a few random low-frequency plane waves."""
    if amplitude == 0:
        return np.zeros((H, W))
    rng = np.random.default_rng([seed, _BIAS_STREAM])
    yy, xx = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")
    pattern = np.zeros((H, W))
    for _ in range(3):
        fx, fy = rng.uniform(-3, 3, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        pattern += np.cos(np.pi * (fx * xx + fy * yy) + phase)
    pattern -= pattern.min()
    return amplitude * pattern / max(pattern.max(), 1e-12)


@dataclass(frozen=True, eq=False)
class ViewTransform:
    """Camera placement: scene rotation/scale/translation plus a static additive pattern."""

    view: ViewId
    rotation_deg: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    view_bias: Optional[np.ndarray] = None
    bias_amplitude: float = 0.0
    bias_seed: int = 0

    def __post_init__(self):
        if self.scale == 0 or not math.isfinite(self.scale):
            raise ValueError(f"view {self.view.index}: spatial map must be invertible (nonzero scale)")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    def bias(self, H: int, W: int) -> np.ndarray:
        if self.view_bias is not None:
            if self.view_bias.shape != (H, W):
                raise ValueError(f"view {self.view.index}: view_bias shape {self.view_bias.shape} != {(H, W)}")
            return self.view_bias
        return make_view_bias(H, W, self.bias_amplitude, self.bias_seed)

    def to_dict(self) -> dict:
        if self.view_bias is not None:
            raise ValueError("explicit view_bias arrays are not serializable; use bias_amplitude/bias_seed")
        return {
            "view": self.view.index, "role": self.view.role.value, "rotation_deg": self.rotation_deg,
            "translation": list(self.translation), "scale": self.scale,
            "bias_amplitude": self.bias_amplitude, "bias_seed": self.bias_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewTransform":
        return cls(
            ViewId(int(d["view"]), ViewRole(d["role"])), float(d.get("rotation_deg", 0.0)),
            tuple(d.get("translation", (0.0, 0.0))), float(d.get("scale", 1.0)),
            bias_amplitude=float(d.get("bias_amplitude", 0.0)), bias_seed=int(d.get("bias_seed", 0)),
        )


@dataclass(frozen=True, eq=False)
class ModalityTransform:
    modality: ModalityId
    channel_map: np.ndarray
    gain: float = 1.0
    noise_sigma_extra: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "channel_map", np.asarray(self.channel_map, dtype=np.float64))
        if not self.gain > 0:
            raise ValueError(f"modality {self.modality.name}: gain must be > 0")
        if self.noise_sigma_extra < 0:
            raise ValueError(f"modality {self.modality.name}: noise_sigma_extra must be >= 0")
        m = self.channel_map
        if m.ndim != 2 or np.linalg.matrix_rank(m) != m.shape[0]:
            raise ValueError(f"modality {self.modality.name}: channel_map must have full row rank")

    def to_dict(self) -> dict:
        return {
            "index": self.modality.index, "name": self.modality.name,
            "domain_role": self.modality.domain_role.value, "channel_map": self.channel_map.tolist(),
            "gain": self.gain, "noise_sigma_extra": self.noise_sigma_extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityTransform":
        return cls(
            ModalityId(int(d["index"]), d["name"], DomainRole(d["domain_role"])),
            np.array(d["channel_map"], dtype=np.float64), float(d.get("gain", 1.0)),
            float(d.get("noise_sigma_extra", 0.0)),
        )


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    K: int = 8
    n_clips_per_class: int = 80
    views: tuple = ()
    modalities: tuple = ()
    noise_sigma: float = 0.03
    latent_dim: int = 6
    seed: int = 0
    T: int = 8
    H: int = 32
    W: int = 32
    C: int = 3
    event_frames: int = 32
    event_gap: int = 8

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "modalities", tuple(self.modalities))

    def violations(self) -> list[str]:
        out = []
        if self.K < 2:
            out.append("K must be >= 2")
        if self.n_clips_per_class < 1:
            out.append("n_clips_per_class must be >= 1")
        if len(self.views) < 3:
            out.append("at least 3 views are required")
        if sum(v.view.role is ViewRole.ANCHOR for v in self.views) != 1:
            out.append("exactly one view must be the anchor")
        if len({v.view.index for v in self.views}) != len(self.views):
            out.append("view indices must be distinct")
        if len(self.modalities) < 2:
            out.append("at least 2 modalities are required")
        if sum(m.modality.domain_role is DomainRole.TARGET for m in self.modalities) != 1:
            out.append("exactly one modality must be the target")
        if len({m.modality.name for m in self.modalities}) != len(self.modalities):
            out.append("modality names must be distinct")
        if self.noise_sigma < 0:
            out.append("noise_sigma must be >= 0")
        if self.latent_dim < 3 or self.latent_dim % 3 or self.latent_dim // 3 > len(_BLOB_COLOURS):
            out.append(f"latent_dim must be a multiple of 3 between 3 and {3 * len(_BLOB_COLOURS)}")
        if min(self.T, self.H, self.W, self.C) < 1:
            out.append("clip dims must be positive")
        if self.event_frames < self.T:
            out.append("event_frames must be >= T")
        if self.event_gap < 0:
            out.append("event_gap must be >= 0")
        for m in self.modalities:
            if m.channel_map.shape != (self.C, self.C):
                out.append(f"modality {m.modality.name}: channel_map must be {self.C}x{self.C}")
        return out

    def check(self) -> None:
        problems = self.violations()
        if problems:
            raise ValueError("invalid generator spec: " + "; ".join(problems))

    @property
    def anchor(self) -> ViewTransform:
        return next(v for v in self.views if v.view.role is ViewRole.ANCHOR)

    def class_names(self) -> list[str]:
        return [f"class_{k:02d}" for k in range(self.K)]

    def to_dict(self) -> dict:
        return {
            "K": self.K, "n_clips_per_class": self.n_clips_per_class,
            "views": [v.to_dict() for v in self.views],
            "modalities": [m.to_dict() for m in self.modalities],
            "noise_sigma": self.noise_sigma, "latent_dim": self.latent_dim, "seed": self.seed,
            "T": self.T, "H": self.H, "W": self.W, "C": self.C,
            "event_frames": self.event_frames, "event_gap": self.event_gap,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        known = set(cls().to_dict())
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown generator spec keys: {', '.join(unknown)}")
        kwargs = dict(d)
        kwargs["views"] = tuple(ViewTransform.from_dict(v) for v in d.get("views", []))
        kwargs["modalities"] = tuple(ModalityTransform.from_dict(m) for m in d.get("modalities", []))
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "GeneratorSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_views() -> tuple[ViewTransform, ...]:
    return (
        ViewTransform(ViewId(1, ViewRole.ANCHOR), 0.0, (0.0, 0.0), 1.0, bias_amplitude=0.05, bias_seed=11),
        ViewTransform(ViewId(2, ViewRole.POSITIVE), 70.0, (0.10, -0.05), 0.90, bias_amplitude=0.25, bias_seed=12),
        ViewTransform(ViewId(3, ViewRole.POSITIVE), -70.0, (-0.10, 0.05), 1.10, bias_amplitude=0.25, bias_seed=13),
        ViewTransform(ViewId(4, ViewRole.HELD_OUT), -55.0, (0.05, 0.10), 0.95, bias_amplitude=0.25, bias_seed=14),
    )


def default_modalities() -> tuple[ModalityTransform, ...]:
    source = ModalityTransform(ModalityId(0, "modA", DomainRole.SOURCE), np.eye(3), 1.0, 0.0)
    # the target sensor sees the scene channels cyclically permuted, dimmer and noisier
    target = ModalityTransform(
        ModalityId(1, "modB", DomainRole.TARGET),
        np.roll(np.eye(3), 1, axis=1),
        0.75,
        0.08,
    )
    return source, target


def default_spec(**overrides) -> GeneratorSpec:
    base = dict(views=default_views(), modalities=default_modalities())
    base.update(overrides)
    return GeneratorSpec(**base)


# -- latent trajectories ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassTrajectory:
    """Per-class smooth latent path: offset + two harmonics per latent coordinate."""

    offset: np.ndarray  # (L,)
    amp: np.ndarray  # (2, L)
    phase: np.ndarray  # (2, L)

    def __call__(self, s: np.ndarray) -> np.ndarray:
        """Latent positions at normalised times s (shape (n,)) -> (n, L)."""
        s = np.asarray(s, dtype=np.float64)[:, None]
        out = np.broadcast_to(self.offset, (s.shape[0], self.offset.shape[0])).copy()
        for m in range(2):
            out += self.amp[m] * np.sin(2 * np.pi * (m + 1) * s + self.phase[m])
        return out


def class_trajectories(spec: GeneratorSpec) -> list[ClassTrajectory]:
    """Regenerable from (seed, K, latent_dim) alone."""
    rng = np.random.default_rng([spec.seed, _CLASS_STREAM])
    n_blobs = spec.latent_dim // 3
    # well-separated base radii so frame energy alone already carries class information
    radii = np.linspace(0.15, 0.22, spec.K)[rng.permutation(spec.K)]
    out = []
    for k in range(spec.K):
        offset = np.zeros(spec.latent_dim)
        amp = np.zeros((2, spec.latent_dim))
        phase = rng.uniform(0, 2 * np.pi, size=(2, spec.latent_dim))
        for b in range(n_blobs):
            xy = slice(3 * b, 3 * b + 2)
            offset[xy] = rng.uniform(-0.45, 0.45, size=2)
            amp[0, xy] = rng.uniform(0.15, 0.40, size=2)
            amp[1, xy] = rng.uniform(0.0, 0.15, size=2)
            offset[3 * b + 2] = np.log(radii[k] * (1.0 if b == 0 else 0.7))
            amp[0, 3 * b + 2] = rng.uniform(0.0, 0.15)
        out.append(ClassTrajectory(offset, amp, phase))
    return out


@dataclass(frozen=True)
class EventDraw:
    index: int
    class_id: int
    time_offset: float
    amp_scale: float
    shift: tuple  # (L,) latent offset jitter


def draw_events(spec: GeneratorSpec, event_seed: int) -> list[EventDraw]:
    n = spec.K * spec.n_clips_per_class
    order = np.random.default_rng([event_seed, _EVENT_STREAM]).permutation(n)
    events = []
    for e in range(n):
        rng = np.random.default_rng([event_seed, _EVENT_STREAM, e])
        shift = rng.normal(0.0, 0.05, size=spec.latent_dim)
        shift[2::3] = rng.normal(0.0, 0.03, size=spec.latent_dim // 3)
        events.append(EventDraw(
            index=e,
            class_id=int(order[e] % spec.K),
            time_offset=float(rng.uniform(0.0, 0.15)),
            amp_scale=float(rng.uniform(0.85, 1.15)),
            shift=tuple(shift),
        ))
    return events


def event_latent_path(traj: ClassTrajectory, ev: EventDraw, T: int) -> np.ndarray:
    s = ev.time_offset + np.arange(T) / T * 0.85
    base = traj(s)
    centred = base - traj.offset
    return traj.offset + ev.amp_scale * centred + np.asarray(ev.shift)


# -- rendering --------------------------------------------------------------


def render_scene(latent: np.ndarray, view: ViewTransform, H: int, W: int, C: int) -> np.ndarray:
    """latent (T, L) -> scene radiance (T, H, W, C) seen through ``view`` (before modality)."""
    T, L = latent.shape
    theta = np.deg2rad(view.rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    ys = np.linspace(-1, 1, H)
    xs = np.linspace(-1, 1, W)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    colours = np.resize(_BLOB_COLOURS, (len(_BLOB_COLOURS), C)) if C != 3 else _BLOB_COLOURS
    frames = np.full((T, H, W, C), _BACKGROUND)
    for b in range(L // 3):
        pos = latent[:, 3 * b:3 * b + 2] @ rot.T * view.scale + np.asarray(view.translation)
        radius = np.exp(latent[:, 3 * b + 2]) * abs(view.scale)
        d2 = (xx[None] - pos[:, 0, None, None]) ** 2 + (yy[None] - pos[:, 1, None, None]) ** 2
        blob = np.exp(-0.5 * d2 / radius[:, None, None] ** 2)
        frames += 0.8 * blob[..., None] * colours[b % len(colours)][None, None, None, :C]
    frames += view.bias(H, W)[None, :, :, None]
    return frames


def apply_modality(frames: np.ndarray, modality: ModalityTransform) -> np.ndarray:
    return modality.gain * np.einsum("thwc,oc->thwo", frames, modality.channel_map)


def _noise_rng(event_seed: int, clip_id: str) -> np.random.Generator:
    digest = [int(b) for b in clip_id.encode()]
    return np.random.default_rng([event_seed, _NOISE_STREAM, *digest])


def clip_id_for(event: int, view: int, modality: str) -> str:
    return f"e{event:05d}_v{view}_{modality}"


def render_event(
    spec: GeneratorSpec,
    latent: np.ndarray,
    event: int,
    view: ViewTransform,
    modality: ModalityTransform,
    event_seed: int,
    noise_scale: float = 1.0,
) -> np.ndarray:
    clip_id = clip_id_for(event, view.view.index, modality.modality.name)
    x = apply_modality(render_scene(latent, view, spec.H, spec.W, spec.C), modality)
    sigma = math.hypot(spec.noise_sigma * noise_scale, modality.noise_sigma_extra * noise_scale)
    if sigma > 0:
        x = x + _noise_rng(event_seed, clip_id).normal(0.0, sigma, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def _render_corpus(
    spec: GeneratorSpec,
    views: Sequence[ViewTransform],
    modalities: Sequence[ModalityTransform],
    event_seed: int,
    noise_scale: float,
) -> tuple[list[Clip], Manifest]:
    trajectories = class_trajectories(spec)
    clips, records = [], []
    stride = spec.event_frames + spec.event_gap
    for ev in draw_events(spec, event_seed):
        latent = event_latent_path(trajectories[ev.class_id], ev, spec.T)
        window = (ev.index * stride, ev.index * stride + spec.event_frames)
        for view in views:
            for mod in modalities:
                data = render_event(spec, latent, ev.index, view, mod, event_seed, noise_scale)
                cid = clip_id_for(ev.index, view.view.index, mod.modality.name)
                labelled = mod.modality.domain_role is not DomainRole.TARGET
                clips.append(Clip(data, view.view, mod.modality, ev.class_id if labelled else None, cid, window))
                records.append(SampleRecord(f"clips/{cid}.f32", view.view.index, mod.modality.name,
                                            ev.class_id, *window))
    manifest = Manifest(
        records,
        spec.class_names(),
        {v.view.index: v.view.role for v in views},
        {m.modality.name: m.modality for m in modalities},
    )
    return clips, manifest


def generate_corpus(spec: GeneratorSpec) -> tuple[list[Clip], Manifest]:
    """Render every event once per (view, modality). Deterministic in ``spec``.

    Target-modality Clip objects carry no label; the manifest keeps the label for evaluation.
    """
    spec.check()
    return _render_corpus(spec, spec.views, spec.modalities, spec.seed, 1.0)


def shifted_transforms(spec: GeneratorSpec, shift_seed: int, magnitude: float):
    """Re-sample view/modality parameters around ``spec``'s values; magnitude 0 leaves them unchanged."""
    rng = np.random.default_rng([shift_seed, _SHIFT_STREAM])
    views = []
    for v in spec.views:
        dr, dtx, dty, ds = rng.normal(0.0, [20.0, 0.10, 0.10, 0.10])
        new_bias = make_view_bias(spec.H, spec.W, 0.15, int(rng.integers(2**31)))
        views.append(ViewTransform(
            v.view,
            v.rotation_deg + magnitude * dr,
            (v.translation[0] + magnitude * dtx, v.translation[1] + magnitude * dty),
            v.scale * math.exp(magnitude * ds),
            view_bias=v.bias(spec.H, spec.W) + magnitude * new_bias,
        ))
    mods = []
    for m in spec.modalities:
        dmix = rng.normal(0.0, 0.15, size=m.channel_map.shape)
        dgain = rng.normal(0.0, 0.15)
        mods.append(ModalityTransform(
            m.modality, m.channel_map + magnitude * dmix, m.gain * math.exp(magnitude * dgain),
            m.noise_sigma_extra,
        ))
    return views, mods


def generate_foreign_corpus(
    spec: GeneratorSpec, shift_seed: int, magnitude: float = 1.0
) -> tuple[list[Clip], Manifest]:
    """Same class trajectories, fresh events from ``shift_seed``, perturbed cameras/sensors and
    noise scaled by ``1 + magnitude`` (doubled at the default magnitude)."""
    spec.check()
    if magnitude < 0:
        raise ValueError("shift magnitude must be >= 0")
    views, mods = shifted_transforms(spec, shift_seed, magnitude)
    return _render_corpus(spec, views, mods, shift_seed, 1.0 + magnitude)


# -- persistence ------------------------------------------------------------


def save_clip(path, data: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(data, dtype="<f4").tofile(path)


def load_clip(path, shape: tuple[int, int, int, int]) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} values for shape {shape}, found {data.size}")
    return data.reshape(shape).astype(np.float32)


@dataclass
class Corpus:
    """Clip payloads keyed by clip_ref plus the manifest describing them."""

    manifest: Manifest
    arrays: dict = field(default_factory=dict)

    @classmethod
    def from_generated(cls, clips: Sequence[Clip], manifest: Manifest) -> "Corpus":
        by_id = {c.clip_id: c.data for c in clips}
        arrays = {r.clip_ref: by_id[Path(r.clip_ref).stem] for r in manifest.records}
        return cls(manifest, arrays)

    def stack(self, refs: Sequence[str]) -> np.ndarray:
        return np.stack([self.arrays[r] for r in refs])

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        self.manifest.save(root / "manifest.jsonl")
        for ref, data in self.arrays.items():
            save_clip(root / ref, data)

    @classmethod
    def load(cls, root, shape, strip_target_labels: bool = False) -> "Corpus":
        root = Path(root)
        manifest = Manifest.load(root / "manifest.jsonl", strip_target_labels=strip_target_labels)
        arrays = {r.clip_ref: load_clip(root / r.clip_ref, shape) for r in manifest.records}
        return cls(manifest, arrays)


def frame_energy(data: np.ndarray) -> float:
    """Mean squared pixel value averaged over frames."""
    return float(np.mean(np.asarray(data, dtype=np.float64) ** 2))
