"""Top-k accuracy and the baseline x (view, modality, corpus) comparison matrix."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch

from crossview_uda.config import ViewRole
from crossview_uda.encoder import VideoEncoder
from crossview_uda.trainer import DataBundle, predict_logits


def topk_accuracy(logits, labels, k: int) -> float:
    """Fraction of rows whose label ranks among the k largest logits (ties -> smaller class first)."""
    z = np.asarray(torch.as_tensor(logits).detach().cpu().numpy(), dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if z.ndim != 2 or z.shape[0] != y.shape[0]:
        raise ValueError(f"logits {z.shape} do not match {y.shape[0]} labels")
    N, K = z.shape
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in [1,{K}], got {k}")
    if N == 0:
        raise ValueError("topk_accuracy needs at least one row")
    # stable sort on -logit keeps the smaller class index first among equal logits
    ranked = np.argsort(-z, axis=1, kind="stable")[:, :k]
    return float((ranked == y[:, None]).any(axis=1).mean())


@dataclass(frozen=True)
class EvalCell:
    baseline: str
    view: str
    modality: str
    corpus: str
    top1: float
    top5: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("EvalCell needs n >= 1")
        if not (0.0 <= self.top1 <= self.top5 <= 1.0):
            raise ValueError(f"EvalCell accuracies out of order: top1={self.top1}, top5={self.top5}")

    @property
    def column(self) -> str:
        return f"{self.corpus}:{self.view}/{self.modality}"


def evaluate_cell(model: VideoEncoder, clips: np.ndarray, labels: np.ndarray, **where) -> EvalCell:
    logits = predict_logits(model, clips)
    k5 = min(5, logits.shape[1])
    return EvalCell(top1=topk_accuracy(logits, labels, 1), top5=topk_accuracy(logits, labels, k5),
                    n=len(labels), **where)


def cell_plan(home: DataBundle, foreign: Optional[DataBundle]) -> list[dict]:
    """Which clips make up each column: every (view, modality) pairing the benchmark reports."""
    m = home.manifest
    anchor = m.anchor_view
    src, tgt = home.source_modality, home.target_modality
    plan = [{"corpus": "home", "view": anchor, "modality": src}]
    for role in (ViewRole.POSITIVE, ViewRole.HELD_OUT):
        plan += [{"corpus": "home", "view": v, "modality": src} for v in m.views_with_role(role)]
    plan.append({"corpus": "home", "view": anchor, "modality": tgt})
    if foreign is not None:
        # a recording rig never seen in training, observed with the source-family sensor from its anchor camera
        plan.append({"corpus": "foreign", "view": foreign.manifest.anchor_view, "modality": foreign.source_modality})
    return plan


def _cell_data(bundle: DataBundle, view, modality):
    refs = bundle.refs("test", view, modality)
    if not refs:
        raise ValueError(f"no test clips for view={view} modality={modality}")
    by_ref = {r.clip_ref: r.class_id for r in bundle.manifest.records}
    return bundle.corpus.stack(refs), np.array([by_ref[r] for r in refs], dtype=np.int64)


def evaluate_matrix(
    models: Mapping[str, VideoEncoder],
    home: DataBundle,
    foreign: Optional[DataBundle] = None,
) -> list[EvalCell]:
    """Top-1/top-5 of every model on every cell, each computed on its corpus's test split."""
    for name, bundle in (("home", home), ("foreign", foreign)):
        if bundle is not None and not bundle.split.groups_in("test"):
            raise ValueError(f"{name} corpus has no test split")
    dims = {(m.cfg.K, m.cfg.T, m.cfg.H, m.cfg.W, m.cfg.C) for m in models.values()}
    if len(dims) > 1:
        raise ValueError("all checkpoints must share K and clip dimensions")
    cells = []
    for spec in cell_plan(home, foreign):
        bundle = home if spec["corpus"] == "home" else foreign
        clips, labels = _cell_data(bundle, spec["view"], spec["modality"])
        for name, model in models.items():
            cells.append(evaluate_cell(model, clips, labels, baseline=name, view=f"V{spec['view']}",
                                       modality=spec["modality"], corpus=spec["corpus"]))
    return cells


def cell_lookup(cells, baseline: str, corpus: str = "home", view: Optional[str] = None,
                modality: Optional[str] = None) -> EvalCell:
    for c in cells:
        if (c.baseline == baseline and c.corpus == corpus and (view is None or c.view == view)
                and (modality is None or c.modality == modality)):
            return c
    raise KeyError(f"no cell for {baseline}/{corpus}/{view}/{modality}")


def render_table(cells) -> str:
    """Aligned plain-text table: one row per baseline, top-1 / top-5 (percent) per column."""
    baselines = list(dict.fromkeys(c.baseline for c in cells))
    columns = list(dict.fromkeys(c.column for c in cells))
    lookup = {(c.baseline, c.column): c for c in cells}
    header = ["baseline"] + columns
    rows = [header]
    for b in baselines:
        row = [b]
        for col in columns:
            c = lookup.get((b, col))
            row.append("-" if c is None else f"{100 * c.top1:6.2f} / {100 * c.top5:6.2f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_csv(cells) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["baseline", "view", "modality", "corpus", "top1", "top5", "n"])
    for c in cells:
        writer.writerow([c.baseline, c.view, c.modality, c.corpus, f"{c.top1:.6f}", f"{c.top5:.6f}", c.n])
    return buf.getvalue()


def write_results(out_dir, cells) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.jsonl").write_text("".join(json.dumps(asdict(c), sort_keys=True) + "\n" for c in cells))
    (out / "results_table.txt").write_text(render_table(cells))
    (out / "results.csv").write_text(render_csv(cells))
