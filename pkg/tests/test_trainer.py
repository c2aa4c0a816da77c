"""Training loops: schedule, determinism, degenerate-weight equivalences, freezing and label hygiene."""

import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from crossview_uda.encoder import FreezeMask, apply_freeze, build_encoder, parameter_snapshot
from crossview_uda.objectives import ce_loss
from crossview_uda.sync import Manifest
from crossview_uda.synthetic import Corpus
from crossview_uda.trainer import (
    STREAM_BATCH,
    STREAM_INIT,
    DataBundle,
    ScheduleState,
    cosine_lr,
    make_optimizer,
    phase1_batches,
    run_baseline,
    substream,
    torch_seed,
    train_phase1,
    train_phase2,
    write_metrics,
)


def state_equal(a, b) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def step_records(history):
    return [h for h in history if h.get("kind") != "epoch"]


class TestSchedule:
    def test_endpoints_and_monotonicity(self):
        lrs = [cosine_lr(0.01, e, 20) for e in range(21)]
        assert lrs[0] == 0.01
        assert abs(lrs[-1]) < 1e-12
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert ScheduleState(0.01, 20, epoch=10).lr == pytest.approx(0.005, abs=1e-15)

    def test_adam_zero_gradient_zero_decay_is_a_no_op(self):
        p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0]))
        opt = make_optimizer([p], lr=0.1, weight_decay=0.0)
        for _ in range(3):
            p.grad = torch.zeros_like(p)
            opt.step()
        assert torch.equal(p.detach(), torch.tensor([1.0, -2.0, 3.0]))

    def test_substreams_are_independent_and_reproducible(self):
        a = substream(7, STREAM_BATCH, 1, 0).integers(1 << 30, size=4)
        b = substream(7, STREAM_BATCH, 1, 0).integers(1 << 30, size=4)
        c = substream(7, STREAM_BATCH, 1, 1).integers(1 << 30, size=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestPhase1:
    def test_ce_only_equivalence_when_lambda_is_zero(self, small_bundle, small_cfg):
        """A hand-written CE loop over the same batches reproduces every logged CE value and the weights."""
        cfg = small_cfg.replace(lambda1=0.0, epochs_phase1=1)
        result = train_phase1(small_bundle, cfg)

        model = build_encoder(cfg, torch_seed(cfg.seed, STREAM_INIT))
        opt = make_optimizer(model.parameters(), cfg.lr_phase1, cfg.weight_decay)
        groups = small_bundle.groups_in("train")
        ces = []
        for batch, _ in phase1_batches(groups, cfg, 0):
            x = torch.from_numpy(small_bundle.corpus.stack([g.anchor.clip_ref for g in batch]))
            loss = ce_loss(model.classify(model(x)), [g.class_id for g in batch])
            opt.zero_grad()
            loss.backward()
            opt.step()
            ces.append(loss.item())
        assert [h["ce"] for h in step_records(result.history)] == ces
        assert state_equal(result.model, model)

    def test_two_runs_bit_identical(self, small_bundle, small_cfg, tmp_path):
        cfg = small_cfg.replace(epochs_phase1=1, batch_phase1=9)  # 18 training groups -> 2 steps
        for name in ("a", "b"):
            train_phase1(small_bundle, cfg).save(tmp_path / f"{name}.ckpt", tmp_path / f"{name}.jsonl")
        assert len(step_records([json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()])) == 2
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_logged_total_matches_components(self, small_bundle, small_cfg):
        cfg = small_cfg.replace(lambda1=0.7)
        for h in step_records(train_phase1(small_bundle, cfg).history):
            assert abs(h["total"] - (h["ce"] + 0.7 * h["cl"])) < 1e-9
            assert h["cl"] > 0

    def test_positive_view_is_sampled_from_both_views(self, small_bundle, small_cfg):
        picks = set()
        for epoch in range(3):
            for _, chosen in phase1_batches(small_bundle.groups_in("train"), small_cfg, epoch):
                picks.update(p.view for p in chosen if p is not None)
        assert picks == {2, 3}

    def test_keeps_best_validation_epoch(self, small_bundle, small_cfg):
        result = train_phase1(small_bundle, small_cfg.replace(epochs_phase1=3))
        vals = [h["val_top1"] for h in result.history if h.get("kind") == "epoch"]
        assert result.best_epoch == int(np.argmax(vals))

    def test_empty_group_pool_rejected(self, small_bundle, small_cfg):
        empty = dataclasses.replace(small_bundle, split=dataclasses.replace(small_bundle.split, mapping={}))
        with pytest.raises(ValueError, match="no training SyncGroups"):
            train_phase1(empty, small_cfg)

    def test_invalid_config_rejected(self, small_bundle, small_cfg):
        with pytest.raises(ValueError, match="tau must be > 0"):
            train_phase1(small_bundle, small_cfg.replace(tau=0.0))


@pytest.fixture(scope="module")
def phase1_model(small_bundle):
    from conftest import SMALL_CFG
    from crossview_uda.config import TrainConfig

    return train_phase1(small_bundle, TrainConfig(**SMALL_CFG)).model


class TestPhase2:
    def test_frozen_parameters_bit_identical(self, phase1_model, small_bundle, small_cfg):
        cfg = small_cfg.replace(epochs_phase2=1, pseudo_conf_threshold=0.0)
        before = parameter_snapshot(phase1_model)
        result = train_phase2(phase1_model, small_bundle, cfg)
        after = parameter_snapshot(result.model)
        mask = FreezeMask.from_fraction(cfg.freeze_fraction, cfg.n_blocks)
        frozen = [n for n in before if mask.is_frozen(result.model, n)]
        assert frozen
        assert all(torch.equal(before[n], after[n]) for n in frozen)
        assert any(not torch.equal(before[n], after[n]) for n in before if n not in frozen)
        # the input model is left untouched
        assert all(torch.equal(before[n], p) for n, p in parameter_snapshot(phase1_model).items())

    def test_alpha_zero_is_source_only_finetuning(self, phase1_model, small_bundle, small_cfg):
        cfg = small_cfg.replace(alpha=0.0, pseudo_conf_threshold=0.0)
        result = train_phase2(phase1_model, small_bundle, cfg)

        import copy

        model = copy.deepcopy(phase1_model)
        trainable = apply_freeze(model, FreezeMask.from_fraction(cfg.freeze_fraction, cfg.n_blocks))
        opt = make_optimizer([p for _, p in trainable], cfg.lr_phase2, cfg.weight_decay)
        refs = small_bundle.refs("train", 1, "modA")
        labels = {r.clip_ref: r.class_id for r in small_bundle.manifest.records}
        for epoch in range(cfg.epochs_phase2):
            for g in opt.param_groups:
                g["lr"] = cosine_lr(cfg.lr_phase2, epoch, cfg.epochs_phase2)
            order = substream(cfg.seed, STREAM_BATCH, 2, epoch).permutation(len(refs))
            for start in range(0, len(order), cfg.batch_phase2):
                batch = [refs[i] for i in order[start:start + cfg.batch_phase2]]
                x = torch.from_numpy(small_bundle.corpus.stack(batch))
                loss = ce_loss(model.classify(model(x)), [labels[r] for r in batch])
                opt.zero_grad()
                loss.backward()
                opt.step()
        assert state_equal(result.model, model)
        assert any(h["ib_applied"] for h in step_records(result.history))

    def test_threshold_one_degenerates_to_alpha_zero(self, phase1_model, small_bundle, small_cfg):
        strict = train_phase2(phase1_model, small_bundle, small_cfg.replace(pseudo_conf_threshold=1.0))
        assert not any(h["ib_applied"] for h in step_records(strict.history))
        no_ib = train_phase2(phase1_model, small_bundle, small_cfg.replace(pseudo_conf_threshold=1.0, alpha=0.0))
        assert state_equal(strict.model, no_ib.model)

    def test_logged_total_matches_components(self, phase1_model, small_bundle, small_cfg):
        cfg = small_cfg.replace(alpha=0.3, pseudo_conf_threshold=0.0)
        records = step_records(train_phase2(phase1_model, small_bundle, cfg).history)
        assert any(h["ib"] > 0 for h in records)
        for h in records:
            assert abs(h["total"] - (h["ce"] + 0.3 * h["ib"])) < 1e-9
            assert h["accepted"] + h["rejected"] == cfg.batch_phase2

    def test_target_labels_are_never_read(self, phase1_model, small_bundle, small_cfg):
        """Scrambling every target-modality label leaves the phase-2 run bit-identical."""
        cfg = small_cfg.replace(pseudo_conf_threshold=0.0)
        m = small_bundle.manifest
        rng = np.random.default_rng(0)
        scrambled = [dataclasses.replace(r, class_id=int(rng.integers(0, m.K))) if r.modality == "modB" else r
                     for r in m.records]
        corpus = Corpus(Manifest(scrambled, m.class_names, m.views, m.modalities), small_bundle.corpus.arrays)
        tampered = DataBundle(corpus, small_bundle.groups, small_bundle.split, small_bundle.record_group)
        a = train_phase2(phase1_model, small_bundle, cfg)
        b = train_phase2(phase1_model, tampered, cfg)
        assert state_equal(a.model, b.model)
        assert a.history == b.history

    def test_dimension_mismatch_rejected(self, phase1_model, small_bundle, small_cfg):
        with pytest.raises(ValueError, match="d_model"):
            train_phase2(phase1_model, small_bundle, small_cfg.replace(d_model=32))


class TestBaselines:
    def test_composition_and_shared_phase1(self, small_bundle, small_cfg):
        cache = {}
        full = run_baseline("full_method", small_bundle, small_cfg, cache)
        contrastive = run_baseline("finetune_contrastive", small_bundle, small_cfg, cache)
        plain = run_baseline("finetune_only", small_bundle, small_cfg, cache)
        uda = run_baseline("uda_only", small_bundle, small_cfg, {})
        assert contrastive["phase2"] is None and plain["phase2"] is None
        assert contrastive["phase1"] is full["phase1"]
        assert state_equal(plain["phase1"].model, uda["phase1"].model)
        composed = train_phase2(train_phase1(small_bundle, small_cfg).model, small_bundle, small_cfg)
        assert state_equal(composed.model, full["phase2"].model)

    def test_unknown_kind_rejected(self, small_bundle, small_cfg):
        with pytest.raises(ValueError, match="unknown baseline"):
            run_baseline("magic", small_bundle, small_cfg)

    def test_metrics_file_is_jsonl(self, small_bundle, small_cfg, tmp_path):
        result = train_phase1(small_bundle, small_cfg.replace(epochs_phase1=1))
        write_metrics(tmp_path / "m.jsonl", result.history)
        rows = [json.loads(line) for line in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert rows == result.history
        assert all(math.isfinite(r["lr"]) for r in step_records(rows))
