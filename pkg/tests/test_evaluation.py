"""Top-k accuracy, evaluation cells and result rendering."""

import numpy as np
import pytest
import torch

from crossview_uda.encoder import parameter_snapshot
from crossview_uda.evaluation import (
    EvalCell,
    cell_lookup,
    evaluate_matrix,
    render_csv,
    render_table,
    topk_accuracy,
    write_results,
)
from crossview_uda.reference import ref_topk
from crossview_uda.trainer import train_phase1


class TestTopK:
    def test_constant_logits_pick_smallest_classes(self):
        labels = np.array([0, 1, 2, 3, 0])
        assert topk_accuracy(np.zeros((5, 4)), labels, 1) == pytest.approx(2 / 5)
        assert topk_accuracy(np.zeros((5, 4)), labels, 2) == pytest.approx(3 / 5)

    def test_k_equal_to_K_is_perfect(self, rng):
        logits = rng.normal(size=(12, 6))
        assert topk_accuracy(logits, rng.integers(0, 6, size=12), 6) == 1.0

    def test_hand_computed(self):
        logits = np.array([[0.1, 0.7, 0.2], [0.5, 0.3, 0.2], [0.2, 0.2, 0.6]])
        labels = [1, 1, 1]  # the last row ties classes 0 and 1; the tie goes to class 0
        assert topk_accuracy(logits, labels, 1) == pytest.approx(1 / 3)
        assert topk_accuracy(logits, labels, 2) == pytest.approx(2 / 3)

    def test_row_permutation_invariant(self, rng):
        logits = rng.integers(-2, 3, size=(30, 5)).astype(float)
        labels = rng.integers(0, 5, size=30)
        perm = rng.permutation(30)
        for k in (1, 3):
            assert topk_accuracy(logits, labels, k) == topk_accuracy(logits[perm], labels[perm], k)

    def test_matches_loop_oracle_with_ties(self, rng):
        for _ in range(20):
            logits = rng.integers(-2, 3, size=(15, 7)).astype(float)
            labels = rng.integers(0, 7, size=15)
            for k in (1, 5):
                assert topk_accuracy(logits, labels, k) == ref_topk(logits, labels, k)

    def test_monotone_in_k(self, rng):
        logits = rng.normal(size=(40, 8))
        labels = rng.integers(0, 8, size=40)
        accs = [topk_accuracy(logits, labels, k) for k in range(1, 9)]
        assert all(a <= b for a, b in zip(accs, accs[1:]))

    @pytest.mark.parametrize("k", [0, 5])
    def test_bad_k_rejected(self, k):
        with pytest.raises(ValueError, match="k must"):
            topk_accuracy(np.zeros((2, 4)), [0, 1], k)

    def test_shape_mismatch_and_empty_rejected(self):
        with pytest.raises(ValueError, match="do not match"):
            topk_accuracy(np.zeros((2, 4)), [0], 1)
        with pytest.raises(ValueError, match="at least one row"):
            topk_accuracy(np.zeros((0, 4)), [], 1)


class TestEvalCell:
    def test_invariants(self):
        EvalCell("b", "V1", "modA", "home", 0.5, 0.9, 10)
        with pytest.raises(ValueError, match="out of order"):
            EvalCell("b", "V1", "modA", "home", 0.9, 0.5, 10)
        with pytest.raises(ValueError, match="n >= 1"):
            EvalCell("b", "V1", "modA", "home", 0.1, 0.2, 0)

    def test_rendering(self):
        cells = [EvalCell("full", "V1", "modA", "home", 0.5, 0.75, 4),
                 EvalCell("full", "V1", "modA", "foreign", 0.25, 1.0, 8),
                 EvalCell("plain", "V1", "modA", "home", 1.0, 1.0, 4)]
        table = render_table(cells).splitlines()
        assert table[0].split() == ["baseline", "home:V1/modA", "foreign:V1/modA"]
        assert "50.00 /  75.00" in table[2] and table[3].rstrip().endswith("-")
        csv = render_csv(cells).splitlines()
        assert csv[0] == "baseline,view,modality,corpus,top1,top5,n"
        assert csv[1] == "full,V1,modA,home,0.500000,0.750000,4"


@pytest.fixture(scope="module")
def trained(small_bundle):
    from conftest import SMALL_CFG
    from crossview_uda.config import TrainConfig

    return train_phase1(small_bundle, TrainConfig(**SMALL_CFG).replace(epochs_phase1=1)).model


class TestMatrix:
    def test_every_cell_present_and_model_untouched(self, trained, small_bundle, tmp_path):
        before = parameter_snapshot(trained)
        cells = evaluate_matrix({"a": trained}, small_bundle, small_bundle)
        assert [c.column for c in cells] == ["home:V1/modA", "home:V2/modA", "home:V3/modA", "home:V4/modA",
                                              "home:V1/modB", "foreign:V1/modA"]
        assert all(torch.equal(before[n], p) for n, p in parameter_snapshot(trained).items())
        assert cell_lookup(cells, "a", view="V1", modality="modB").n == 3
        assert cell_lookup(cells, "a", corpus="foreign").n == 3
        write_results(tmp_path, cells)
        assert {p.name for p in tmp_path.iterdir()} == {"results.jsonl", "results_table.txt", "results.csv"}

    def test_missing_test_split_rejected(self, trained, small_bundle):
        import dataclasses

        no_test = dataclasses.replace(small_bundle, split=dataclasses.replace(
            small_bundle.split, mapping={g: "train" for g in small_bundle.split.mapping}))
        with pytest.raises(ValueError, match="home corpus has no test split"):
            evaluate_matrix({"a": trained}, no_test)
        with pytest.raises(ValueError, match="foreign corpus has no test split"):
            evaluate_matrix({"a": trained}, small_bundle, no_test)

    def test_repeat_evaluation_identical(self, trained, small_bundle):
        assert evaluate_matrix({"a": trained}, small_bundle) == evaluate_matrix({"a": trained}, small_bundle)

    def test_unknown_cell_lookup_raises(self):
        with pytest.raises(KeyError):
            cell_lookup([], "x")
