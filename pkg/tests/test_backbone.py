"""Patch tokenization, embedding, encoder layers, attention capture."""

import numpy as np
import pytest

from structvit import autodiff as ad
from structvit.autodiff import Tensor
from structvit.backbone import (EncoderParams, LayerParams, PatchGrid, embed,
                                encoder_layer, split_patches)
from structvit.errors import DimensionError
from structvit.model import Architecture, StructViT

import oracles


class TestPatchGrid:
    def test_paper_scale_geometry(self):
        grid = PatchGrid.from_sizes(448, 448, 16, 12)
        assert (grid.n_h, grid.n_w) == (37, 37)
        assert grid.n == 1369

    def test_non_overlapping_square(self):
        grid = PatchGrid.from_sizes(64, 64, 16, 16)
        assert grid.n == 16

    def test_overlapping(self):
        grid = PatchGrid.from_sizes(64, 64, 16, 8)
        assert grid.n == 49

    def test_count_matches_closed_form_sweep(self):
        rng = np.random.default_rng(30)
        for _ in range(300):
            p = int(rng.integers(1, 24))
            h = int(rng.integers(p, 96))
            w = int(rng.integers(p, 96))
            s = int(rng.integers(1, 24))
            grid = PatchGrid.from_sizes(h, w, p, s)
            assert grid.n_h == (h - p) // s + 1
            assert grid.n_w == (w - p) // s + 1
            assert grid.n >= 1

    def test_patch_larger_than_image_rejected(self):
        with pytest.raises(DimensionError):
            PatchGrid.from_sizes(8, 8, 16, 4)


class TestSplitPatches:
    def test_row_count_for_every_valid_grid(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            p = int(rng.integers(2, 6))
            h = int(rng.integers(p, 20))
            w = int(rng.integers(p, 20))
            s = int(rng.integers(1, 5))
            grid = PatchGrid.from_sizes(h, w, p, s)
            image = rng.random((h, w, 3))
            assert split_patches(image, grid).shape == (grid.n, 3 * p * p)

    def test_overlapping_windows_match_indexing_oracle(self):
        rng = np.random.default_rng(32)
        image = rng.random((16, 16, 3))
        grid = PatchGrid.from_sizes(16, 16, 8, 4)
        got = split_patches(image, grid)
        expected = oracles.patch_rows_by_indexing(image, 8, 4)
        assert np.array_equal(got, expected)

    def test_grid_mismatch_rejected(self):
        grid = PatchGrid.from_sizes(16, 16, 8, 8)
        with pytest.raises(DimensionError):
            split_patches(np.zeros((8, 8, 3)), grid)


def tiny_encoder(rng, n_patches, d, d_ff, n_heads, n_layers=1) -> EncoderParams:
    def mat(*shape):
        return Tensor(rng.normal(size=shape) * 0.3, requires_grad=True)

    layers = [
        LayerParams(
            wq=mat(d, d), bq=mat(d), wk=mat(d, d), bk=mat(d),
            wv=mat(d, d), bv=mat(d), wo=mat(d, d), bo=mat(d),
            ln1_gamma=Tensor(np.ones(d), requires_grad=True),
            ln1_beta=Tensor(np.zeros(d), requires_grad=True),
            ffn_w1=mat(d, d_ff), ffn_b1=mat(d_ff),
            ffn_w2=mat(d_ff, d), ffn_b2=mat(d),
            ln2_gamma=Tensor(np.ones(d), requires_grad=True),
            ln2_beta=Tensor(np.zeros(d), requires_grad=True),
        )
        for _ in range(n_layers)
    ]
    return EncoderParams(
        patch_w=mat(12, d), patch_b=mat(d),
        cls_token=mat(1, d), pos_embed=mat(n_patches + 1, d),
        layers=layers, n_heads=n_heads)


class TestEmbed:
    def test_zero_inputs_give_position_table(self):
        rng = np.random.default_rng(33)
        params = tiny_encoder(rng, 4, 8, 16, 2)
        params.patch_w.data[:] = 0.0
        params.patch_b.data[:] = 0.0
        params.cls_token.data[:] = 0.0
        z0 = embed(Tensor(np.zeros((4, 12))), params)
        assert np.array_equal(z0.data, params.pos_embed.data)

    def test_identity_like_projection_hand_case(self):
        # 1 patch of 2x2x3=12 values, width 12, projection = identity
        rng = np.random.default_rng(34)
        params = tiny_encoder(rng, 1, 12, 4, 2)
        params.patch_w.data = np.eye(12)
        params.patch_b.data[:] = 0.0
        params.cls_token.data[:] = 0.0
        params.pos_embed.data[:] = 0.0
        patch = np.arange(12.0)[None, :]
        z0 = embed(Tensor(patch), params)
        assert np.array_equal(z0.data[0], np.zeros(12))  # cls row
        assert np.array_equal(z0.data[1], patch[0])

    def test_row_count_is_patches_plus_one(self):
        rng = np.random.default_rng(35)
        for n in (1, 3, 9):
            params = tiny_encoder(rng, n, 8, 16, 2)
            z0 = embed(Tensor(rng.random((n, 12))), params)
            assert z0.shape == (n + 1, 8)


class TestEncoderLayer:
    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(36)
        params = tiny_encoder(rng, 1, 8, 16, 2)
        z = Tensor(rng.normal(size=(2, 8)))
        _, record = encoder_layer(z, params.layers[0], 2, 1, capture=True)
        for att in record.heads:
            np.testing.assert_allclose(att.data.sum(axis=1), 1.0, atol=1e-6)
            assert (att.data >= 0).all()

    def test_equal_tokens_give_uniform_attention(self):
        rng = np.random.default_rng(37)
        params = tiny_encoder(rng, 4, 8, 16, 2)
        z = Tensor(np.tile(rng.normal(size=(1, 8)), (5, 1)))
        _, record = encoder_layer(z, params.layers[0], 2, 1, capture=True)
        for att in record.heads:
            np.testing.assert_allclose(att.data, 1.0 / 5.0, atol=1e-12)

    def test_msa_matches_per_head_loop_oracle(self):
        rng = np.random.default_rng(38)
        d, d_ff, heads, n = 8, 16, 2, 4
        params = tiny_encoder(rng, n, d, d_ff, heads)
        p = params.layers[0]
        z = rng.normal(size=(n + 1, d))
        from structvit.backbone import multi_head_attention
        got, _ = multi_head_attention(Tensor(z), p, heads)
        expected = oracles.msa_per_head(
            z, p.wq.data, p.bq.data, p.wk.data, p.bk.data,
            p.wv.data, p.bv.data, p.wo.data, p.bo.data, heads)
        np.testing.assert_allclose(got.data, expected, atol=1e-10)

    def test_logit_shift_leaves_attention_unchanged(self):
        # adding a constant to a row of pre-softmax scores is a no-op
        rng = np.random.default_rng(39)
        scores = rng.normal(size=(3, 5))
        base = ad.softmax_rows(Tensor(scores)).data
        shifted = ad.softmax_rows(Tensor(scores + 3.25)).data
        np.testing.assert_allclose(base, shifted, atol=1e-12)

    def test_finite_difference_through_layer(self):
        import gradcheck
        rng = np.random.default_rng(40)
        params = tiny_encoder(rng, 3, 8, 12, 2)
        p = params.layers[0]
        z = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
        w = np.random.default_rng(41).normal(size=(4, 8))

        def build():
            out, _ = encoder_layer(z, p, 2, 1)
            return ad.sum_all(ad.mul(out, Tensor(w)))

        gradcheck.check_gradients(build, [z, p.wq, p.ffn_w1])


class TestModelForward:
    def test_capture_only_requested_layers(self):
        arch = Architecture(image_size=32, patch_size=16, stride=16, depth=4,
                            width=16, heads=2, ffn_width=32, n_classes=4,
                            sil_layer_count=2)
        model = StructViT(arch, np.random.default_rng(42))
        img = np.random.default_rng(1).random((32, 32, 3))
        fp = model.forward_image_array(img)
        assert sorted(fp.records) == [3, 4]
        assert sorted(fp.structure_features) == [3, 4]

    def test_feature_width_tracks_fusion_mode(self):
        rng = np.random.default_rng(43)
        img = np.random.default_rng(2).random((32, 32, 3))
        fused = StructViT(Architecture(image_size=32, width=16, heads=2,
                                       ffn_width=32, n_classes=4), rng)
        assert fused.forward_image_array(img).feature.shape == (1, 48)
        single = StructViT(Architecture(image_size=32, width=16, heads=2,
                                        ffn_width=32, n_classes=4,
                                        mfb_enabled=False, sil_layer_count=0),
                           np.random.default_rng(43))
        assert single.forward_image_array(img).feature.shape == (1, 16)

    def test_row_stochastic_capture_full_model(self):
        arch = Architecture(image_size=32, patch_size=16, stride=8, width=16,
                            heads=2, ffn_width=32, n_classes=4)
        model = StructViT(arch, np.random.default_rng(44))
        img = np.random.default_rng(3).random((32, 32, 3))
        fp = model.forward_image_array(img)
        for record in fp.records.values():
            for att in record.heads:
                np.testing.assert_allclose(att.data.sum(axis=1), 1.0, atol=1e-6)


class TestBaselineEquivalence:
    """Disabling the structure path must not perturb the backbone."""

    def _pair(self, sil_count, zero_gcn):
        base_arch = Architecture(image_size=32, patch_size=16, stride=16,
                                 depth=4, width=16, heads=2, ffn_width=32,
                                 n_classes=4, sil_layer_count=0, mfb_enabled=False)
        full_arch = Architecture(image_size=32, patch_size=16, stride=16,
                                 depth=4, width=16, heads=2, ffn_width=32,
                                 n_classes=4, sil_layer_count=sil_count,
                                 mfb_enabled=False)
        baseline = StructViT(base_arch, np.random.default_rng(50))
        variant = StructViT(full_arch, np.random.default_rng(50))
        shared = {n: p.data.copy() for n, p in baseline.params.items()}
        state = variant.state()
        for name in shared:
            state[name] = shared[name]
        if zero_gcn:
            for name in state:
                if name.startswith("gcn."):
                    state[name] = np.zeros_like(state[name])
        variant.load_state(state)
        return baseline, variant

    def test_disabled_structure_is_bit_identical(self):
        baseline, variant = self._pair(sil_count=0, zero_gcn=False)
        img = np.random.default_rng(4).random((32, 32, 3))
        a = baseline.forward_image_array(img).feature.data
        b = variant.forward_image_array(img).feature.data
        assert np.array_equal(a, b)

    def test_zero_gcn_weights_match_baseline(self):
        baseline, variant = self._pair(sil_count=3, zero_gcn=True)
        img = np.random.default_rng(5).random((32, 32, 3))
        a = baseline.forward_image_array(img).feature.data
        b = variant.forward_image_array(img).feature.data
        assert np.array_equal(a, b)
