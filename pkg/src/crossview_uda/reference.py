"""Slow, loop-based reference implementations used as test oracles.

Everything here is written with plain Python loops and ``math`` (or small numpy
helpers where a loop over matrix entries adds nothing) so it shares no code
with the vectorised kernels it checks.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from crossview_uda.config import SyncGroup


def ref_cross_entropy(logits, labels) -> float:
    z = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for i in range(z.shape[0]):
        row = [float(v) for v in z[i]]
        m = max(row)
        log_norm = m + math.log(sum(math.exp(v - m) for v in row))
        total += log_norm - row[int(labels[i])]
    return total / z.shape[0]


def ref_supcon(projections, labels, tau: float) -> float:
    p = np.asarray(projections, dtype=np.float64)
    n = p.shape[0]
    y = [int(v) for v in labels]

    def sim(i, k):
        return sum(float(p[i, c]) * float(p[k, c]) for c in range(p.shape[1])) / tau

    total, anchors = 0.0, 0
    for i in range(n):
        partners = [j for j in range(n) if j != i and y[j] == y[i]]
        if not partners:
            continue
        others = [sim(i, k) for k in range(n) if k != i]
        m = max(others)
        log_denom = m + math.log(sum(math.exp(v - m) for v in others))
        total += -sum(sim(i, j) - log_denom for j in partners) / len(partners)
        anchors += 1
    if anchors == 0:
        raise ValueError("no positive pairs")
    return total / anchors


def _ref_standardize(x: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    N, d = x.shape
    out = np.zeros_like(x)
    for j in range(d):
        col = [float(x[i, j]) for i in range(N)]
        mu = sum(col) / N
        sd = math.sqrt(sum((v - mu) ** 2 for v in col) / N)
        sd = max(sd, eps)
        for i in range(N):
            out[i, j] = (col[i] - mu) / sd
    return out


def ref_correlation(source, target) -> np.ndarray:
    s = _ref_standardize(np.asarray(source, dtype=np.float64))
    t = _ref_standardize(np.asarray(target, dtype=np.float64))
    N, d = s.shape
    C = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            C[a, b] = sum(s[i, a] * t[i, b] for i in range(N)) / N
    return C


def ref_ib(source, target, lambda_offdiag: float) -> float:
    C = ref_correlation(source, target)
    d = C.shape[0]
    value = 0.0
    for a in range(d):
        for b in range(d):
            value += (1.0 - C[a, a]) ** 2 if a == b else lambda_offdiag * C[a, b] ** 2
    return value


def ref_topk(logits, labels, k: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    hits = 0
    for i in range(z.shape[0]):
        order = sorted(range(z.shape[1]), key=lambda c: (-z[i, c], c))
        hits += int(labels[i]) in order[:k]
    return hits / z.shape[0]


# -- encoder forward --------------------------------------------------------


def _layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


def _gelu(x):
    return 0.5 * x * (1.0 + np.vectorize(math.erf)(x / math.sqrt(2.0)))


def ref_encoder_forward(state: dict, cfg, clip) -> np.ndarray:
    """One clip (T, H, W, C) -> class-token embedding, from a name -> array parameter dict."""
    x = np.asarray(clip, dtype=np.float64)
    T, H, W, C = x.shape
    pt, ph = cfg.patch_t, cfg.patch_hw
    tokens = []
    for t0 in range(0, T, pt):
        for h0 in range(0, H, ph):
            for w0 in range(0, W, ph):
                tokens.append(x[t0:t0 + pt, h0:h0 + ph, w0:w0 + ph, :].reshape(-1))
    P = np.stack(tokens)
    h = np.vstack([state["cls_token"][None], P @ state["patch_embed.weight"].T + state["patch_embed.bias"]])
    h = h + state["pos_embed"]
    d, nh = cfg.d_model, cfg.n_heads
    dh = d // nh
    for b in range(cfg.n_blocks):
        g = lambda name: state[f"blocks.{b}.{name}"]
        u = _layer_norm(h, g("norm1.weight"), g("norm1.bias"))
        qkv = u @ g("qkv.weight").T + g("qkv.bias")
        q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
        heads = np.zeros_like(h)
        for head in range(nh):
            sl = slice(head * dh, (head + 1) * dh)
            for i in range(h.shape[0]):
                scores = np.array([q[i, sl] @ k[j, sl] for j in range(h.shape[0])]) / math.sqrt(dh)
                w = np.exp(scores - scores.max())
                w /= w.sum()
                heads[i, sl] = w @ v[:, sl]
        h = h + heads @ g("proj.weight").T + g("proj.bias")
        u = _layer_norm(h, g("norm2.weight"), g("norm2.bias"))
        h = h + _gelu(u @ g("fc1.weight").T + g("fc1.bias")) @ g("fc2.weight").T + g("fc2.bias")
    return h[0]


# -- synchronization --------------------------------------------------------


def ref_sync_groups(manifest, anchor: int, positives: Sequence[int], min_overlap_frames: int = 1,
                    modality: Optional[str] = None) -> list[SyncGroup]:
    """Brute force: compare every anchor record against every record of every positive view."""
    records = [r for r in manifest.records if modality is None or r.modality == modality]
    anchors = [r for r in records if r.view == anchor and r.class_id is not None]
    anchors.sort(key=lambda r: (r.start_frame, r.clip_ref))
    out = []
    for a in anchors:
        chosen = []
        for view in positives:
            best, best_key = None, None
            for r in records:
                if r.view != view or r.class_id != a.class_id:
                    continue
                ov = min(a.end_frame, r.end_frame) - max(a.start_frame, r.start_frame)
                if ov < min_overlap_frames:
                    continue
                key = (-ov, r.start_frame, r.clip_ref)
                if best_key is None or key < best_key:
                    best, best_key = r, key
            chosen.append(best)
        window = (a.start_frame, a.end_frame)
        if any(c is None for c in chosen):
            out.append(SyncGroup(a, (), a.class_id, window, flagged=True))
            continue
        lo = max([a.start_frame] + [c.start_frame for c in chosen])
        hi = min([a.end_frame] + [c.end_frame for c in chosen])
        if hi <= lo:
            out.append(SyncGroup(a, (), a.class_id, window, flagged=True))
        else:
            out.append(SyncGroup(a, tuple(chosen), a.class_id, (lo, hi)))
    return out
