"""Encoder forward pass, heads, freezing and checkpoint round trips."""

import numpy as np
import pytest
import torch

from crossview_uda.config import TrainConfig
from crossview_uda.encoder import (
    POS_EMBED_INIT_STD,
    WEIGHT_INIT_STD,
    FreezeMask,
    apply_freeze,
    build_encoder,
    encode,
    load_checkpoint,
    parameter_snapshot,
    patchify,
    save_checkpoint,
)
from crossview_uda.reference import ref_encoder_forward

# std of a unit normal clamped to [-2, 2]: sqrt(E[min(x^2, 4)])
CLAMPED_STD = 0.9595


class TestPatchify:
    def test_token_order_is_time_then_rows_then_columns(self):
        x = torch.arange(4 * 4 * 4 * 1, dtype=torch.float64).reshape(1, 4, 4, 4, 1)
        tokens = patchify(x, 2, 2)
        assert tokens.shape == (1, 8, 8)
        # token 1 is (t=0, h=0, w=1): columns 2..3 of rows 0..1 of frames 0..1
        expected = x[0, 0:2, 0:2, 2:4, :].reshape(-1)
        np.testing.assert_array_equal(tokens[0, 1].numpy(), expected.numpy())
        # token 4 is (t=1, h=0, w=0)
        np.testing.assert_array_equal(tokens[0, 4].numpy(), x[0, 2:4, 0:2, 0:2, :].reshape(-1).numpy())

    def test_indivisible_axis_rejected(self):
        with pytest.raises(ValueError, match="axis H"):
            patchify(torch.zeros(1, 4, 6, 8, 1), 2, 4)


class TestForward:
    def test_shapes(self, small_cfg):
        model = build_encoder(small_cfg, 0)
        z = model(torch.rand(3, 4, 8, 8, 3))
        assert z.shape == (3, small_cfg.d_model)
        assert model.classify(z).shape == (3, small_cfg.K)
        assert model.project(z).shape == (3, small_cfg.d_proj)

    def test_matches_loop_reference(self, small_cfg, rng):
        model = build_encoder(small_cfg, 11).double()
        with torch.no_grad():
            for p in model.parameters():
                p.add_(torch.from_numpy(rng.normal(scale=0.05, size=tuple(p.shape))))
        state = {k: v.detach().numpy() for k, v in model.state_dict().items()}
        clip = rng.uniform(size=(4, 8, 8, 3))
        got = encode(clip, model).detach().numpy()
        np.testing.assert_allclose(got, ref_encoder_forward(state, small_cfg, clip), atol=1e-10)

    def test_batch_rows_are_independent(self, small_cfg):
        model = build_encoder(small_cfg, 1).double()
        x = torch.rand(4, 4, 8, 8, 3, dtype=torch.float64)
        full = model(x)
        np.testing.assert_allclose(model(x[2:3])[0].detach().numpy(), full[2].detach().numpy(), atol=1e-12)

    def test_wrong_clip_dims_rejected(self, small_cfg):
        model = build_encoder(small_cfg, 0)
        with pytest.raises(ValueError, match="axis W"):
            model(torch.zeros(1, 4, 8, 12, 3))
        with pytest.raises(ValueError, match="expected a"):
            model(torch.zeros(4, 8, 8, 3))

    def test_projection_is_unit_norm(self, small_cfg):
        model = build_encoder(small_cfg, 0)
        u = model.project(model(torch.rand(5, 4, 8, 8, 3)))
        np.testing.assert_allclose(u.norm(dim=1).detach().numpy(), 1.0, atol=1e-6)

    def test_zero_projection_falls_back_with_warning(self, small_cfg):
        model = build_encoder(small_cfg, 0)
        with torch.no_grad():
            for p in model.projector.parameters():
                p.zero_()
        with pytest.warns(RuntimeWarning, match="zero vector"):
            u = model.project(torch.rand(2, small_cfg.d_model))
        expected = np.zeros((2, small_cfg.d_proj))
        expected[:, 0] = 1.0
        np.testing.assert_array_equal(u.detach().numpy(), expected)
        assert model.projection_fallbacks == 2


class TestInitialisation:
    def test_same_seed_same_parameters(self, small_cfg):
        a, b = build_encoder(small_cfg, 42), build_encoder(small_cfg, 42)
        for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), n

    def test_init_scales(self):
        cfg = TrainConfig()
        model = build_encoder(cfg, 0)
        assert torch.count_nonzero(model.cls_token) == 0
        assert torch.count_nonzero(model.blocks[0].qkv.bias) == 0
        assert torch.all(model.blocks[0].norm1.weight == 1.0)
        w = model.blocks[0].fc1.weight.detach().numpy()
        assert abs(w.std() - WEIGHT_INIT_STD * CLAMPED_STD) < 0.001
        assert np.abs(w).max() <= 2 * WEIGHT_INIT_STD + 1e-9
        pos = model.pos_embed.detach().numpy()
        assert abs(pos.std() - POS_EMBED_INIT_STD * CLAMPED_STD) < 0.03


class TestFreezing:
    @pytest.mark.parametrize("fraction,n_blocks,expected", [
        (0.0, 4, {0}), (0.5, 4, {0, 1, 2}), (0.6, 4, {0, 1, 2}), (1.0, 4, {0, 1, 2, 3, 4}), (0.5, 3, {0, 1}),
    ])
    def test_mask_from_fraction(self, fraction, n_blocks, expected):
        assert FreezeMask.from_fraction(fraction, n_blocks).frozen_layers == frozenset(expected)

    def test_apply_freeze_splits_parameters(self, small_cfg):
        model = build_encoder(small_cfg, 0)
        trainable = dict(apply_freeze(model, FreezeMask.from_fraction(0.5, small_cfg.n_blocks)))
        assert not model.patch_embed.weight.requires_grad
        assert not model.pos_embed.requires_grad
        assert not model.blocks[0].qkv.weight.requires_grad
        assert model.blocks[1].qkv.weight.requires_grad
        assert "classifier.weight" in trainable and "projector.0.weight" in trainable
        assert "cls_token" in trainable

    def test_full_freeze_keeps_heads_trainable(self, small_cfg):
        model = build_encoder(small_cfg, 0)
        trainable = dict(apply_freeze(model, FreezeMask.from_fraction(1.0, small_cfg.n_blocks)))
        assert all(n.startswith(("classifier", "projector")) or n == "cls_token" for n in trainable)

    def test_head_or_unknown_layer_rejected(self, small_cfg):
        model = build_encoder(small_cfg, 0)
        with pytest.raises(ValueError, match="head layer"):
            apply_freeze(model, FreezeMask(frozenset({small_cfg.n_blocks + 1})))
        with pytest.raises(ValueError, match="unknown layer"):
            apply_freeze(model, FreezeMask(frozenset({-1})))

    def test_frozen_parameters_unchanged_by_a_step(self, small_cfg):
        model = build_encoder(small_cfg, 0)
        trainable = apply_freeze(model, FreezeMask.from_fraction(0.5, small_cfg.n_blocks))
        before = parameter_snapshot(model)
        opt = torch.optim.Adam([p for _, p in trainable], lr=0.1)
        model.classify(model(torch.rand(2, 4, 8, 8, 3))).sum().backward()
        opt.step()
        after = parameter_snapshot(model)
        frozen = [n for n in before if n not in dict(trainable)]
        assert frozen
        for n in frozen:
            assert torch.equal(before[n], after[n]), n
        assert not torch.equal(before["classifier.weight"], after["classifier.weight"])


class TestCheckpoints:
    def test_round_trip_is_exact(self, small_cfg, tmp_path):
        model = build_encoder(small_cfg, 3)
        save_checkpoint(tmp_path / "a.ckpt", model, {"optim/x": np.arange(3.0)}, {"note": "n"})
        loaded, extra, meta = load_checkpoint(tmp_path / "a.ckpt")
        for (n, p), (_, q) in zip(model.state_dict().items(), loaded.state_dict().items()):
            assert torch.equal(p, q), n
        np.testing.assert_array_equal(extra["optim/x"], np.arange(3.0))
        assert meta["note"] == "n"
        save_checkpoint(tmp_path / "b.ckpt", loaded, extra, {"note": "n"})
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_dimension_mismatch_rejected(self, small_cfg, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", build_encoder(small_cfg, 0))
        with pytest.raises(ValueError, match="d_model"):
            load_checkpoint(tmp_path / "a.ckpt", small_cfg.replace(d_model=32))

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "junk").write_bytes(b"hello")
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(tmp_path / "junk")
