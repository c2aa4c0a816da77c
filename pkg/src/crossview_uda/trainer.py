"""Phase-1 (cross-view contrastive) and Phase-2 (cross-modal IB adaptation) training loops."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from crossview_uda.config import DomainRole, SyncGroup, TrainConfig, ViewRole, validate_config
from crossview_uda.encoder import (
    FreezeMask,
    VideoEncoder,
    apply_freeze,
    build_encoder,
    load_checkpoint,
    save_checkpoint,
)
from crossview_uda.objectives import (
    LossValue,
    ce_loss,
    contrastive_loss,
    information_bottleneck_loss,
    phase1_total,
    phase2_total,
)
from crossview_uda.pairing import PairQueueSet, build_pairs, pseudo_label, update_queues
from crossview_uda.sync import SplitAssignment, assign_records_to_groups, build_sync_groups, stratified_split
from crossview_uda.synthetic import Corpus

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)

# named random substreams hanging off the run seed
STREAM_INIT, STREAM_BATCH, STREAM_PAIRING = 1, 2, 3


def substream(seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *extra])


def torch_seed(seed: int, stream: int) -> int:
    return int(substream(seed, stream).integers(2**62))


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass
class ScheduleState:
    base_lr: float
    total_epochs: int
    epoch: int = 0

    @property
    def lr(self) -> float:
        return cosine_lr(self.base_lr, self.epoch, self.total_epochs)


def make_optimizer(params, lr: float, weight_decay: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=weight_decay, foreach=False)


def optimizer_arrays(model: VideoEncoder, optimizer: torch.optim.Optimizer) -> dict:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    for p, state in optimizer.state.items():
        name = names[id(p)]
        out[f"optim/exp_avg/{name}"] = state["exp_avg"].detach().cpu().numpy()
        out[f"optim/exp_avg_sq/{name}"] = state["exp_avg_sq"].detach().cpu().numpy()
        out[f"optim/step/{name}"] = np.array([float(state["step"])])
    return out


# -- data plumbing ----------------------------------------------------------


@dataclass
class DataBundle:
    """A corpus plus its synchronization groups and split, resolved down to clip refs."""

    corpus: Corpus
    groups: list
    split: SplitAssignment
    record_group: dict  # clip_ref -> clip-group id

    @property
    def manifest(self):
        return self.corpus.manifest

    def refs(self, split: str, view: int, modality: str) -> list[str]:
        return [
            r.clip_ref for r in self.manifest.select(view=view, modality=modality)
            if self.split.mapping.get(self.record_group.get(r.clip_ref)) == split
        ]

    def groups_in(self, split: str) -> list[SyncGroup]:
        return [g for g in self.groups if self.split.mapping.get(g.group_id) == split]

    @property
    def source_modality(self) -> str:
        return self.manifest.modality_with_role(DomainRole.SOURCE)

    @property
    def target_modality(self) -> str:
        return self.manifest.modality_with_role(DomainRole.TARGET)


def prepare_data(corpus: Corpus, seed: int, min_overlap_frames: int = 1,
                 fractions=SPLIT_FRACTIONS) -> DataBundle:
    m = corpus.manifest
    anchor = m.anchor_view
    positives = m.views_with_role(ViewRole.POSITIVE)
    source = m.modality_with_role(DomainRole.SOURCE)
    groups = build_sync_groups(m, anchor, positives, min_overlap_frames, modality=source)
    split = stratified_split(groups, fractions, seed)
    record_group = assign_records_to_groups(m, groups, anchor)
    return DataBundle(corpus, groups, split, record_group)


def _labels_for(bundle: DataBundle, refs) -> np.ndarray:
    by_ref = {r.clip_ref: r.class_id for r in bundle.manifest.records}
    return np.array([by_ref[r] for r in refs], dtype=np.int64)


def _batch(bundle: DataBundle, refs) -> torch.Tensor:
    return torch.from_numpy(bundle.corpus.stack(refs))


@torch.no_grad()
def predict_logits(model: VideoEncoder, clips: np.ndarray, batch_size: int = 128) -> torch.Tensor:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(clips), batch_size):
        x = torch.from_numpy(np.asarray(clips[i:i + batch_size]))
        out.append(model.classify(model(x)))
    model.train(was_training)
    return torch.cat(out) if out else torch.zeros((0, model.cfg.K))


def top1(model: VideoEncoder, clips: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = predict_logits(model, clips).argmax(dim=1).numpy()
    return float((pred == labels).mean())


# -- results ----------------------------------------------------------------


@dataclass
class PhaseResult:
    model: VideoEncoder
    history: list = field(default_factory=list)
    optimizer_state: dict = field(default_factory=dict)
    best_epoch: Optional[int] = None

    def save(self, checkpoint_path, metrics_path=None, meta: Optional[dict] = None) -> None:
        m = {"best_epoch": self.best_epoch}
        m.update(meta or {})
        save_checkpoint(checkpoint_path, self.model, self.optimizer_state, m)
        if metrics_path is not None:
            write_metrics(metrics_path, self.history)


def write_metrics(path, history) -> None:
    Path(path).write_text("".join(json.dumps(rec, sort_keys=True) + "\n" for rec in history))


def _check_cfg(cfg: TrainConfig) -> None:
    problems = validate_config(cfg)
    if problems:
        raise ValueError("invalid config: " + "; ".join(problems))


# -- phase 1 ----------------------------------------------------------------


def phase1_batches(groups: list, cfg: TrainConfig, epoch: int):
    """Shuffled SyncGroup batches for one epoch plus the positive view chosen for each group."""
    rng = substream(cfg.seed, STREAM_BATCH, 1, epoch)
    order = rng.permutation(len(groups))
    choice = rng.random(len(groups))
    for start in range(0, len(groups), cfg.batch_phase1):
        idx = order[start:start + cfg.batch_phase1]
        batch = [groups[i] for i in idx]
        picks = [g.positives[int(choice[i] * len(g.positives))] if g.positives else None
                 for g, i in zip(batch, idx)]
        yield batch, picks


def train_phase1(bundle: DataBundle, cfg: TrainConfig, model: Optional[VideoEncoder] = None) -> PhaseResult:
    """CE on anchor clips plus lambda1 x supervised contrastive loss over anchor/positive projections."""
    _check_cfg(cfg)
    train_groups = bundle.groups_in("train")
    if not train_groups:
        raise ValueError("no training SyncGroups available for phase 1")
    if model is None:
        model = build_encoder(cfg, torch_seed(cfg.seed, STREAM_INIT))
    model.train()
    for p in model.parameters():
        p.requires_grad_(True)
    optimizer = make_optimizer(model.parameters(), cfg.lr_phase1, cfg.weight_decay)
    schedule = ScheduleState(cfg.lr_phase1, cfg.epochs_phase1)

    anchor, source = bundle.manifest.anchor_view, bundle.source_modality
    val_refs = bundle.refs("val", anchor, source)
    val_x, val_y = bundle.corpus.stack(val_refs) if val_refs else None, _labels_for(bundle, val_refs)

    history, step = [], 0
    best_val, best_state, best_epoch = -1.0, None, None
    for epoch in range(cfg.epochs_phase1):
        schedule.epoch = epoch
        for group in optimizer.param_groups:
            group["lr"] = schedule.lr
        for batch, picks in phase1_batches(train_groups, cfg, epoch):
            labels = torch.tensor([g.class_id for g in batch])
            z_s = model(_batch(bundle, [g.anchor.clip_ref for g in batch]))
            ce = ce_loss(model.classify(z_s), labels)
            total = ce
            cl_value = 0.0
            paired = [i for i, p in enumerate(picks) if p is not None]
            if cfg.lambda1 > 0 and paired:
                z_v = model(_batch(bundle, [picks[i].clip_ref for i in paired]))
                proj = torch.cat([model.project(z_s[paired]), model.project(z_v)])
                cl = contrastive_loss(proj, labels[paired].repeat(2), cfg.tau)
                total = ce + cfg.lambda1 * cl
                cl_value = cl.item()
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            losses = phase1_total(LossValue(ce.item()), LossValue(cl_value), cfg.lambda1)
            history.append({
                "phase": 1, "step": step, "epoch": epoch, "lr": schedule.lr,
                "ce": losses.components["ce"], "cl": losses.components["cl"],
                "total": losses.value, "batch": len(batch), "contrastive_pairs": len(paired),
            })
            step += 1
        val = top1(model, val_x, val_y) if val_refs else float("nan")
        history.append({"phase": 1, "epoch": epoch, "val_top1": val, "kind": "epoch"})
        log.info("phase1 epoch %d val_top1 %.4f", epoch, val)
        if not val_refs or val > best_val:
            best_val, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
            best_optim = optimizer_arrays(model, optimizer)
    model.load_state_dict(best_state)
    return PhaseResult(model, history, best_optim, best_epoch)


# -- phase 2 ----------------------------------------------------------------


def train_phase2(phase1_model: VideoEncoder, bundle: DataBundle, cfg: TrainConfig) -> PhaseResult:
    """Freeze the lower layers, then minimise CE(source) + alpha x IB(paired source/target embeddings).

    Target clips are read through the label-stripped manifest; their labels never reach this loop.
    """
    _check_cfg(cfg)
    mismatched = [d for d in ("K", "T", "H", "W", "C", "d_model", "n_blocks", "n_heads", "patch_t",
                              "patch_hw", "d_proj") if getattr(cfg, d) != getattr(phase1_model.cfg, d)]
    if mismatched:
        raise ValueError(f"checkpoint/config dimension mismatch in {', '.join(mismatched)}")
    model = copy.deepcopy(phase1_model)
    model.cfg = cfg
    model.train()
    mask = FreezeMask.from_fraction(cfg.freeze_fraction, cfg.n_blocks)
    trainable = apply_freeze(model, mask)
    optimizer = make_optimizer([p for _, p in trainable], cfg.lr_phase2, cfg.weight_decay)
    schedule = ScheduleState(cfg.lr_phase2, cfg.epochs_phase2)
    queues = PairQueueSet(cfg.K, cfg.queue_capacity)

    unlabeled = bundle.manifest.strip_target_labels()
    anchor = unlabeled.anchor_view
    source, target = bundle.source_modality, bundle.target_modality
    src_refs = bundle.refs("train", anchor, source)
    src_labels = _labels_for(bundle, src_refs)
    tgt_refs = bundle.refs("train", anchor, target)
    if any(r.class_id is not None for r in unlabeled.select(modality=target)):
        raise AssertionError("target labels leaked into phase 2")
    if not src_refs or not tgt_refs:
        raise ValueError("phase 2 needs labelled source and unlabelled target training clips")
    val_refs = bundle.refs("val", anchor, source)
    val_x, val_y = bundle.corpus.stack(val_refs) if val_refs else None, _labels_for(bundle, val_refs)

    history, step = [], 0
    for epoch in range(cfg.epochs_phase2):
        schedule.epoch = epoch
        for group in optimizer.param_groups:
            group["lr"] = schedule.lr
        rng = substream(cfg.seed, STREAM_BATCH, 2, epoch)
        src_order = rng.permutation(len(src_refs))
        tgt_order = rng.permutation(len(tgt_refs))
        epoch_stats = {"accepted": 0, "skipped": 0, "rejected": 0, "in_batch": 0, "from_queue": 0}
        for b, start in enumerate(range(0, len(src_order), cfg.batch_phase2)):
            s_idx = src_order[start:start + cfg.batch_phase2]
            t_idx = np.take(tgt_order, np.arange(start, start + cfg.batch_phase2), mode="wrap")
            labels = torch.from_numpy(src_labels[s_idx])
            z_s = model(_batch(bundle, [src_refs[i] for i in s_idx]))
            ce = ce_loss(model.classify(z_s), labels)

            z_t = model(_batch(bundle, [tgt_refs[i] for i in t_idx]))
            pseudo = pseudo_label(model.classify(z_t).detach(), cfg.pseudo_conf_threshold)
            pairs = build_pairs([(z_t[i], k) for i, k, _ in pseudo.accepted], z_s, labels, queues,
                                cfg.pairs_per_target)
            update_queues(queues, z_s, labels, step)

            ib_value = 0.0
            total = ce
            if pairs.usable:
                ib = information_bottleneck_loss(pairs.source, pairs.target, cfg.lambda_offdiag)
                ib_value = ib.item()
                if cfg.alpha > 0:
                    total = ce + cfg.alpha * ib
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()

            losses = phase2_total(LossValue(ce.item()), LossValue(ib_value), cfg.alpha)
            stats = {
                "accepted": len(pseudo.accepted), "rejected": pseudo.n_rejected,
                "skipped": pairs.n_skipped_targets, "in_batch": pairs.n_in_batch,
                "from_queue": pairs.n_from_queue,
            }
            for key, value in stats.items():
                epoch_stats[key] += value
            history.append({
                "phase": 2, "step": step, "epoch": epoch, "lr": schedule.lr,
                "ce": losses.components["ce"], "ib": losses.components["ib"], "total": losses.value,
                "n_pairs": len(pairs), "ib_applied": bool(pairs.usable), **stats,
            })
            step += 1
        val = top1(model, val_x, val_y) if val_refs else float("nan")
        history.append({"phase": 2, "epoch": epoch, "val_top1": val, "kind": "epoch", "pairing": epoch_stats})
        log.info("phase2 epoch %d val_top1 %.4f pairing %s", epoch, val, epoch_stats)

    for p in model.parameters():
        p.requires_grad_(True)
    return PhaseResult(model, history, optimizer_arrays(model, optimizer), cfg.epochs_phase2 - 1)


# -- baselines --------------------------------------------------------------

BASELINES = ("finetune_only", "finetune_contrastive", "uda_only", "full_method")


def run_baseline(kind: str, bundle: DataBundle, cfg: TrainConfig, cache: Optional[dict] = None) -> dict:
    """Train one Table-1 style baseline; returns {"phase1": PhaseResult, "phase2": PhaseResult | None}.

    ``cache`` shares phase-1 results between baselines that start from the same phase-1 run.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {', '.join(BASELINES)}")
    contrastive = kind in ("finetune_contrastive", "full_method")
    adapt = kind in ("uda_only", "full_method")
    p1_cfg = cfg if contrastive else cfg.replace(lambda1=0.0)
    key = ("phase1", p1_cfg)
    cache = {} if cache is None else cache
    if key not in cache:
        cache[key] = train_phase1(bundle, p1_cfg)
    phase1 = cache[key]
    phase2 = train_phase2(phase1.model, bundle, cfg) if adapt else None
    return {"phase1": phase1, "phase2": phase2}


def final_model(result: dict) -> VideoEncoder:
    return (result["phase2"] or result["phase1"]).model


def load_phase_model(path, cfg: Optional[TrainConfig] = None) -> VideoEncoder:
    model, _, _ = load_checkpoint(path, cfg)
    return model
