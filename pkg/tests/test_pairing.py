"""Pseudo-labelling thresholds, class queues and pair construction."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from crossview_uda.pairing import PairQueueSet, build_pairs, pseudo_label, update_queues


class TestPseudoLabel:
    def test_threshold_filters_rows(self):
        logits = torch.tensor([[5.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.0, 0.0, 9.0]])
        out = pseudo_label(logits, 0.8)
        assert [(i, k) for i, k, _ in out.accepted] == [(0, 0), (2, 2)]
        assert out.n_rejected == 1
        p0 = np.exp(5.0) / (np.exp(5.0) + 2.0)
        assert abs(out.accepted[0][2] - p0) < 1e-12

    def test_threshold_zero_accepts_everything(self, rng):
        out = pseudo_label(torch.from_numpy(rng.normal(size=(7, 4))), 0.0)
        assert len(out.accepted) == 7 and out.n_rejected == 0

    def test_threshold_above_one_rejects_everything(self):
        out = pseudo_label(torch.tensor([[100.0, 0.0]]), 1.0 + 1e-9)
        assert out.accepted == [] and out.n_rejected == 1

    def test_negative_threshold_rejected(self):
        with pytest.raises(ValueError):
            pseudo_label(torch.zeros(1, 2), -0.1)

    def test_ties_pick_smallest_class(self):
        out = pseudo_label(torch.tensor([[1.0, 3.0, 3.0]]), 0.0)
        assert out.accepted[0][1] == 1


class TestQueues:
    def test_fifo_eviction_and_step_stamps(self):
        q = PairQueueSet(K=2, capacity=2)
        update_queues(q, torch.tensor([[1.0], [2.0], [3.0]]), [0, 0, 1], step=0)
        update_queues(q, torch.tensor([[4.0]]), [0], step=1)
        assert [(float(e[0]), s) for e, s in q.entries(0)] == [(2.0, 0), (4.0, 1)]
        assert len(q) == 3

    def test_entries_are_detached_snapshots(self):
        x = torch.tensor([[1.0, 2.0]], requires_grad=True)
        q = update_queues(PairQueueSet(1, 4), x * 1.0, [0])
        emb, _ = q.entries(0)[0]
        assert not emb.requires_grad
        with torch.no_grad():
            x.add_(10.0)
        np.testing.assert_array_equal(emb.numpy(), [1.0, 2.0])

    def test_bad_label_or_capacity_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            update_queues(PairQueueSet(2, 3), torch.zeros(1, 2), [2])
        with pytest.raises(ValueError, match="capacity"):
            PairQueueSet(2, 0)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(0, 2), min_size=1, max_size=40), st.integers(1, 6))
    def test_queue_never_exceeds_capacity(self, labels, capacity):
        q = PairQueueSet(3, capacity)
        for step, k in enumerate(labels):
            update_queues(q, torch.full((1, 2), float(step)), [k], step)
        for k in range(3):
            entries = q.entries(k)
            assert len(entries) == min(capacity, labels.count(k))
            assert [s for _, s in entries] == sorted(s for _, s in entries)


class TestBuildPairs:
    def test_in_batch_first_then_queue_newest_first(self):
        q = PairQueueSet(2, 8)
        update_queues(q, torch.tensor([[10.0], [11.0], [12.0]]), [1, 1, 1], step=0)
        src = torch.tensor([[1.0], [2.0], [3.0]])
        tgt = torch.tensor([7.0])
        pairs = build_pairs([(tgt, 1)], src, [0, 1, 0], q, pairs_per_target=3)
        np.testing.assert_array_equal(pairs.source[:, 0].numpy(), [2.0, 12.0, 11.0])
        assert (pairs.n_in_batch, pairs.n_from_queue, pairs.n_skipped_targets) == (1, 2, 0)
        np.testing.assert_array_equal(pairs.target[:, 0].numpy(), [7.0, 7.0, 7.0])
        assert pairs.pseudo_class == [1, 1, 1]

    def test_in_batch_capped_at_pairs_per_target(self):
        pairs = build_pairs([(torch.zeros(1), 0)], torch.arange(5.0)[:, None], [0] * 5, PairQueueSet(1, 4), 2)
        np.testing.assert_array_equal(pairs.source[:, 0].numpy(), [0.0, 1.0])

    def test_unmatched_target_skipped(self):
        pairs = build_pairs([(torch.zeros(2), 1)], torch.zeros(3, 2), [0, 0, 0], PairQueueSet(2, 4), 4)
        assert len(pairs) == 0 and pairs.n_skipped_targets == 1
        assert pairs.source.shape == (0, 2) and not pairs.usable

    def test_usable_needs_two_pairs(self):
        one = build_pairs([(torch.zeros(2), 0)], torch.zeros(1, 2), [0], PairQueueSet(1, 4), 1)
        two = build_pairs([(torch.zeros(2), 0)], torch.zeros(2, 2), [0, 0], PairQueueSet(1, 4), 2)
        assert not one.usable and two.usable

    def test_gradient_flows_to_batch_rows_not_queue(self):
        q = update_queues(PairQueueSet(1, 4), torch.ones(1, 2), [0])
        src = torch.zeros(1, 2, requires_grad=True)
        tgt = torch.zeros(2, requires_grad=True)
        pairs = build_pairs([(tgt, 0)], src, [0], q, 2)
        pairs.source.sum().backward()
        np.testing.assert_array_equal(src.grad.numpy(), [[1.0, 1.0]])

    def test_bad_pairs_per_target_rejected(self):
        with pytest.raises(ValueError):
            build_pairs([], torch.zeros(1, 2), [0], PairQueueSet(1, 1), 0)
