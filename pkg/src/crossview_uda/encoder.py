"""Joint space-time transformer encoder with classifier and projection heads."""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
from torch import nn

from crossview_uda.config import TrainConfig

MLP_RATIO = 4
WEIGHT_INIT_STD = 0.02
POS_EMBED_INIT_STD = 1.0
CHECKPOINT_MAGIC = b"XVCKPT"
CHECKPOINT_VERSION = 1


class Block(nn.Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, MLP_RATIO * d_model)
        self.fc2 = nn.Linear(MLP_RATIO * d_model, d_model)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        h = self.n_heads
        q, k, v = self.qkv(x).reshape(B, N, 3, h, D // h).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(D // h), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attention(self.norm1(x))
        x = x + self.fc2(nn.functional.gelu(self.fc1(self.norm2(x))))
        return x


def patchify(x: torch.Tensor, patch_t: int, patch_hw: int) -> torch.Tensor:
    """(B, T, H, W, C) -> (B, n_tokens, patch_t*patch_hw*patch_hw*C), tokens ordered (t, h, w)."""
    B, T, H, W, C = x.shape
    for axis, size, patch in (("T", T, patch_t), ("H", H, patch_hw), ("W", W, patch_hw)):
        if size % patch:
            raise ValueError(f"axis {axis} of size {size} is not divisible by patch size {patch}")
    x = x.reshape(B, T // patch_t, patch_t, H // patch_hw, patch_hw, W // patch_hw, patch_hw, C)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(B, -1, patch_t * patch_hw * patch_hw * C)


class VideoEncoder(nn.Module):
    """Encoder f (patch embedding + transformer blocks), classifier h and projector P."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        patch_volume = cfg.patch_t * cfg.patch_hw * cfg.patch_hw * cfg.C
        self.patch_embed = nn.Linear(patch_volume, d)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.n_tokens, d))
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_blocks))
        self.classifier = nn.Linear(d, cfg.K)
        self.projector = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, cfg.d_proj))
        self.projection_fallbacks = 0

    def reset_parameters(self, generator: torch.Generator) -> None:
        """Truncated-normal weights (std 0.02, position table std 1.0), zero biases and class token,
        unit LayerNorm gains. A unit-scale position table keeps tokens distinguishable after the
        pre-norm, which is what lets a randomly initialised encoder leave the chance plateau."""
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias") or name == "cls_token":
                    p.zero_()
                elif ".norm" in name:
                    p.fill_(1.0)
                else:
                    std = POS_EMBED_INIT_STD if name == "pos_embed" else WEIGHT_INIT_STD
                    noise = torch.randn(p.shape, generator=generator, dtype=torch.float64)
                    # truncation by clamping at two standard deviations
                    p.copy_((noise.clamp(-2.0, 2.0) * std).to(p.dtype))

    def check_input(self, x: torch.Tensor) -> None:
        cfg = self.cfg
        if x.ndim != 5:
            raise ValueError(f"expected a (B, T, H, W, C) batch, got shape {tuple(x.shape)}")
        for axis, got, want in zip("THWC", x.shape[1:], (cfg.T, cfg.H, cfg.W, cfg.C)):
            if got != want:
                raise ValueError(f"axis {axis} has size {got}, encoder expects {want}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Batch of clips (B, T, H, W, C) -> class-token embeddings z (B, d_model)."""
        self.check_input(x)
        tokens = self.patch_embed(patchify(x.to(self.pos_embed.dtype), self.cfg.patch_t, self.cfg.patch_hw))
        cls = self.cls_token.expand(tokens.shape[0], 1, -1)
        h = torch.cat([cls, tokens], dim=1) + self.pos_embed
        for block in self.blocks:
            h = block(h)
        return h[:, 0]

    def classify(self, z: torch.Tensor) -> torch.Tensor:
        return self.classifier(z)

    def project(self, z: torch.Tensor) -> torch.Tensor:
        """Projector MLP followed by L2 normalisation; zero rows fall back to the first basis vector."""
        u = self.projector(z)
        norm = u.norm(dim=-1, keepdim=True)
        zero = norm == 0
        if zero.any():
            self.projection_fallbacks += int(zero.sum())
            warnings.warn("projection of a zero vector; returning the first basis vector", RuntimeWarning)
            basis = torch.zeros_like(u)
            basis[..., 0] = 1.0
            return torch.where(zero, basis, u / torch.where(zero, torch.ones_like(norm), norm))
        return u / norm

    # -- layer bookkeeping --------------------------------------------------

    def layer_index(self, name: str) -> int:
        """0 = embedding, 1..n_blocks = transformer blocks, n_blocks + 1 = heads (and class token)."""
        if name.startswith(("patch_embed", "pos_embed")):
            return 0
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        if name.startswith(("classifier", "projector")) or name == "cls_token":
            return self.cfg.n_blocks + 1
        raise KeyError(f"unknown parameter {name}")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_encoder(cfg: TrainConfig, seed: int) -> VideoEncoder:
    model = VideoEncoder(cfg)
    model.reset_parameters(torch.Generator().manual_seed(seed))
    return model


def encode(clip, model: VideoEncoder) -> torch.Tensor:
    """Single clip (T, H, W, C) -> z (d_model,)."""
    x = torch.as_tensor(np.asarray(clip.data if hasattr(clip, "data") else clip))
    return model(x.unsqueeze(0))[0]


@dataclass(frozen=True)
class FreezeMask:
    frozen_layers: frozenset

    @classmethod
    def from_fraction(cls, freeze_fraction: float, n_blocks: int) -> "FreezeMask":
        n = math.floor(freeze_fraction * n_blocks)
        return cls(frozenset(range(0, n + 1)))

    def is_frozen(self, model: VideoEncoder, name: str) -> bool:
        return model.layer_index(name) in self.frozen_layers


def apply_freeze(model: VideoEncoder, mask: FreezeMask) -> list[tuple[str, nn.Parameter]]:
    """Turn off gradients for frozen layers; return the trainable (name, parameter) pairs."""
    head = model.cfg.n_blocks + 1
    unknown = [i for i in mask.frozen_layers if not 0 <= i <= model.cfg.n_blocks]
    if unknown:
        raise ValueError(f"freeze mask references unknown layer index {sorted(unknown)}" +
                         (" (head layer cannot be frozen)" if head in unknown else ""))
    trainable = []
    for name, p in model.named_parameters():
        frozen = mask.is_frozen(model, name)
        p.requires_grad_(not frozen)
        if not frozen:
            trainable.append((name, p))
    return trainable


# -- checkpoints ------------------------------------------------------------


def _write_container(path, arrays: dict, meta: dict) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blob = data.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read_container(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", raw, pos)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(raw[pos:pos + header_len])
    base = pos + header_len
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_checkpoint(path, model: VideoEncoder, extra_arrays: dict | None = None, meta: dict | None = None) -> None:
    arrays = {name: p.detach().cpu().numpy() for name, p in model.state_dict().items()}
    for name, arr in (extra_arrays or {}).items():
        arrays[name] = arr
    full_meta = {"config": model.cfg.to_dict(), "dtype": str(model.pos_embed.dtype).replace("torch.", "")}
    full_meta.update(meta or {})
    _write_container(path, arrays, full_meta)


def load_checkpoint(path, cfg: TrainConfig | None = None) -> tuple[VideoEncoder, dict, dict]:
    """Returns (model, extra arrays, meta). ``cfg`` must agree with the stored dimensions."""
    arrays, meta = _read_container(path)
    stored = TrainConfig.from_dict(meta["config"])
    if cfg is None:
        cfg = stored
    dims = ("K", "T", "H", "W", "C", "d_model", "n_blocks", "n_heads", "patch_t", "patch_hw", "d_proj")
    mismatched = [d for d in dims if getattr(cfg, d) != getattr(stored, d)]
    if mismatched:
        raise ValueError(f"{path}: checkpoint dims differ from config in {', '.join(mismatched)}")
    model = VideoEncoder(cfg)
    dtype = getattr(torch, meta.get("dtype", "float32"))
    model.to(dtype)
    state = {}
    for name, ref in model.state_dict().items():
        if name not in arrays:
            raise ValueError(f"{path}: missing parameter {name}")
        state[name] = torch.from_numpy(arrays.pop(name)).to(dtype)
        if state[name].shape != ref.shape:
            raise ValueError(f"{path}: parameter {name} has shape {tuple(state[name].shape)}, expected {tuple(ref.shape)}")
    model.load_state_dict(state)
    return model, arrays, meta


def parameter_snapshot(model: VideoEncoder, names: Iterable[str] | None = None) -> dict:
    params = dict(model.named_parameters())
    return {n: params[n].detach().clone() for n in (names if names is not None else params)}
