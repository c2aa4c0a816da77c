"""Pseudo-labelling and queue-backed source/target pair construction."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import torch


@dataclass(frozen=True)
class PseudoLabels:
    accepted: list  # (row index, class, confidence)
    n_rejected: int


def pseudo_label(target_logits, threshold: float) -> PseudoLabels:
    """Keep rows whose max softmax probability reaches ``threshold``."""
    if not 0.0 <= threshold or threshold != threshold:
        raise ValueError("threshold must be >= 0")
    z = torch.as_tensor(target_logits).detach().to(torch.float64)
    probs = torch.softmax(z, dim=1)
    conf, cls = probs.max(dim=1)
    accepted = [(i, int(cls[i]), float(conf[i])) for i in range(z.shape[0]) if conf[i] >= threshold]
    return PseudoLabels(accepted, z.shape[0] - len(accepted))


@dataclass
class PairQueueSet:
    """Per-class bounded FIFO of detached source embeddings, each stamped with the step it was pushed."""

    K: int
    capacity: int
    queues: list = field(default=None)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        if self.queues is None:
            self.queues = [deque(maxlen=self.capacity) for _ in range(self.K)]

    def __len__(self) -> int:
        return sum(len(q) for q in self.queues)

    def entries(self, k: int) -> list:
        return list(self.queues[k])


def update_queues(queues: PairQueueSet, source_embeddings, source_labels, step: int = 0) -> PairQueueSet:
    """Append detached snapshots of the source embeddings to their class queues (oldest evicted)."""
    emb = torch.as_tensor(source_embeddings).detach()
    labels = [int(y) for y in torch.as_tensor(source_labels).reshape(-1)]
    for row, k in zip(emb, labels):
        if not 0 <= k < queues.K:
            raise ValueError(f"source label {k} outside [0,{queues.K})")
        queues.queues[k].append((row.clone(), step))
    return queues


@dataclass
class PairBatch:
    source: torch.Tensor  # (n_pairs, d)
    target: torch.Tensor  # (n_pairs, d)
    pseudo_class: list
    n_skipped_targets: int = 0
    n_in_batch: int = 0
    n_from_queue: int = 0

    def __len__(self) -> int:
        return len(self.pseudo_class)

    @property
    def usable(self) -> bool:
        """Fewer than two pairs cannot be standardized, so the IB term is skipped for the step."""
        return len(self) >= 2


def build_pairs(
    accepted_targets: Sequence,
    source_embeddings: torch.Tensor,
    source_labels,
    queues: PairQueueSet,
    pairs_per_target: int,
) -> PairBatch:
    """Pair every accepted (embedding, class) target with up to ``pairs_per_target`` sources.

    In-batch sources of the same class come first, in batch order; any shortfall is topped up
    from that class's queue, newest entries first. Targets with no available partner are counted
    as skipped.
    """
    if pairs_per_target < 1:
        raise ValueError("pairs_per_target must be >= 1")
    labels = [int(y) for y in torch.as_tensor(source_labels).reshape(-1)]
    by_class: dict[int, list[int]] = {}
    for i, k in enumerate(labels):
        by_class.setdefault(k, []).append(i)

    src_rows, tgt_rows, classes = [], [], []
    skipped = in_batch = from_queue = 0
    for target_emb, k in accepted_targets:
        k = int(k)
        local = by_class.get(k, [])[:pairs_per_target]
        need = pairs_per_target - len(local)
        queued = list(reversed(queues.queues[k]))[:need] if need > 0 else []
        if not local and not queued:
            skipped += 1
            continue
        for i in local:
            src_rows.append(source_embeddings[i])
            tgt_rows.append(target_emb)
            classes.append(k)
        for emb, _ in queued:
            src_rows.append(emb)
            tgt_rows.append(target_emb)
            classes.append(k)
        in_batch += len(local)
        from_queue += len(queued)

    d = source_embeddings.shape[1]
    empty = source_embeddings.new_zeros((0, d))
    return PairBatch(
        source=torch.stack(src_rows) if src_rows else empty,
        target=torch.stack(tgt_rows) if tgt_rows else empty,
        pseudo_class=classes,
        n_skipped_targets=skipped,
        n_in_batch=in_batch,
        n_from_queue=from_queue,
    )
