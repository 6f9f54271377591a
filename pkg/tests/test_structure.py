"""Attention aggregation, thresholding, polar geometry, graph convolution."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structvit import autodiff as ad
from structvit.autodiff import Tensor
from structvit.backbone import AttentionRecord, PatchGrid
from structvit.errors import ConfigError
from structvit.structure import (GcnParams, aggregate_cls_attention,
                                 build_graph, inject, polar_coordinates,
                                 structure_feature, structure_vector,
                                 threshold)

import gradcheck
import oracles


def record_from_rows(*cls_rows) -> AttentionRecord:
    """Build an attention record whose heads have the given cls rows;
    remaining rows are uniform."""
    n_tokens = len(cls_rows[0])
    heads = []
    for row in cls_rows:
        att = np.full((n_tokens, n_tokens), 1.0 / n_tokens)
        att[0] = row
        heads.append(Tensor(att))
    return AttentionRecord(1, heads)


class TestAggregate:
    def test_uniform_attention(self):
        n_tokens, n_heads = 5, 3
        rows = [np.full(n_tokens, 1.0 / n_tokens)] * n_heads
        total = aggregate_cls_attention(record_from_rows(*rows))
        np.testing.assert_allclose(total.data, n_heads / n_tokens, atol=1e-12)

    def test_one_hot_head(self):
        row = np.zeros(5)
        row[3] = 1.0  # cls attends only to patch 2
        total = aggregate_cls_attention(record_from_rows(row))
        np.testing.assert_allclose(total.data, [0.0, 0.0, 1.0, 0.0], atol=1e-15)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(60)
        heads = []
        for _ in range(4):
            raw = rng.random((6, 6))
            heads.append(Tensor(raw / raw.sum(axis=1, keepdims=True)))
        record = AttentionRecord(2, heads)
        got = aggregate_cls_attention(record).data
        expected = oracles.cls_attention_sum([h.data for h in heads])
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_degenerate_single_patch_rejected(self):
        with pytest.raises(ConfigError):
            aggregate_cls_attention(record_from_rows(np.array([0.5, 0.5])))


class TestThreshold:
    def test_worked_example(self):
        fa = threshold(Tensor([0.1, 0.2, 0.3, 0.4, 0.5]))
        assert fa.mean == pytest.approx(0.3)
        np.testing.assert_allclose(fa.filtered.data, [0, 0, 0, 0.4, 0.5], atol=1e-15)
        assert fa.reference_index == 4

    def test_constant_input_keeps_nothing(self):
        fa = threshold(Tensor([0.2, 0.2, 0.2, 0.2]))
        assert not fa.mask.any()
        np.testing.assert_allclose(fa.filtered.data, 0.0)
        assert fa.reference_index == 0  # lowest index on ties

    def test_nonzero_count_matches_recount(self):
        rng = np.random.default_rng(61)
        for _ in range(200):
            a = rng.random(int(rng.integers(2, 30)))
            fa = threshold(Tensor(a))
            assert int(fa.mask.sum()) == int((a > a.mean()).sum())
            assert (fa.filtered.data[~fa.mask] == 0).all()
            assert np.array_equal(fa.filtered.data[fa.mask], a[fa.mask])

    def test_reference_is_argmax(self):
        rng = np.random.default_rng(62)
        for _ in range(50):
            a = rng.random(12)
            fa = threshold(Tensor(a))
            assert a[fa.reference_index] >= a.max() - 1e-15

    def test_nonconstant_input_keeps_something(self):
        rng = np.random.default_rng(63)
        for _ in range(100):
            a = rng.random(8)
            if np.ptp(a) == 0:
                continue
            assert threshold(Tensor(a)).mask.any()

    @given(st.lists(st.floats(0, 10), min_size=2, max_size=20),
           st.floats(0.1, 100))
    @settings(max_examples=80, deadline=None)
    def test_positive_scaling_preserves_support(self, values, scale):
        a = np.asarray(values)
        fa = threshold(Tensor(a))
        fb = threshold(Tensor(a * scale))
        assert np.array_equal(fa.mask, fb.mask)
        assert fa.reference_index == fb.reference_index


class TestPolarCoordinates:
    def test_reference_patch(self):
        grid = PatchGrid.from_sizes(64, 64, 16, 16)
        rho, theta = polar_coordinates(grid, 5)
        assert rho[5] == 0.0
        assert theta[5] == pytest.approx(0.5)  # arctan2(0, 0) convention

    def test_one_column_right(self):
        grid = PatchGrid.from_sizes(160, 160, 16, 16)  # 10 x 10
        ref = 33  # row 3 col 3
        rho, theta = polar_coordinates(grid, ref)
        right = ref + 1
        assert rho[right] == pytest.approx(0.1)
        assert theta[right] == pytest.approx(0.5)

    def test_one_column_left_wraps_to_zero(self):
        grid = PatchGrid.from_sizes(160, 160, 16, 16)
        ref = 33
        rho, theta = polar_coordinates(grid, ref)
        left = ref - 1
        assert rho[left] == pytest.approx(0.1)
        assert theta[left] == pytest.approx(0.0)  # +pi branch wraps

    def test_ranges_over_random_grids(self):
        rng = np.random.default_rng(64)
        for _ in range(300):
            n_h = int(rng.integers(1, 12))
            n_w = int(rng.integers(1, 12))
            grid = PatchGrid.from_sizes(n_h * 4, n_w * 4, 4, 4)
            ref = int(rng.integers(0, grid.n))
            rho, theta = polar_coordinates(grid, ref)
            assert rho[ref] == 0.0
            assert (rho >= 0).all() and (rho <= np.sqrt(2.0)).all()
            assert (theta >= 0).all() and (theta < 1.0).all()


class TestBuildGraph:
    def test_outer_product_example(self):
        fa = threshold(Tensor([0.0, 2.0, 3.0]))  # mean 5/3 keeps both 2, 3
        assert list(fa.mask) == [False, True, True]
        rho, theta = np.zeros(3), np.zeros(3)
        g = build_graph(fa, rho, theta)
        np.testing.assert_allclose(
            g.adjacency.data, [[0, 0, 0], [0, 4, 6], [0, 6, 9]], atol=1e-12)

    def test_adjacency_symmetric_psd_rank_one(self):
        rng = np.random.default_rng(65)
        for _ in range(100):
            a = rng.random(7)
            fa = threshold(Tensor(a))
            g = build_graph(fa, *polar_coordinates(
                PatchGrid.from_sizes(28, 4, 4, 4), fa.reference_index))
            adj = g.adjacency.data
            assert np.array_equal(adj, adj.T)
            assert np.linalg.matrix_rank(adj, tol=1e-10) <= 1
            for _ in range(5):
                v = rng.normal(size=7)
                assert v @ adj @ v >= -1e-12

    def test_dropped_patch_row_and_column_zero(self):
        fa = threshold(Tensor([0.1, 0.9, 0.8, 0.05]))
        g = build_graph(fa, np.zeros(4), np.zeros(4))
        for i in np.nonzero(~fa.mask)[0]:
            assert (g.adjacency.data[i] == 0).all()
            assert (g.adjacency.data[:, i] == 0).all()

    def test_node_features_layout(self):
        grid = PatchGrid.from_sizes(8, 8, 4, 4)
        fa = threshold(Tensor([0.1, 0.2, 0.7, 0.4]))
        rho, theta = polar_coordinates(grid, fa.reference_index)
        g = build_graph(fa, rho, theta)
        assert g.node_features.shape == (4, 4)
        np.testing.assert_allclose(g.node_features.data[:, 0], rho)
        np.testing.assert_allclose(g.node_features.data[:, 1], np.cos(2 * np.pi * theta))
        np.testing.assert_allclose(g.node_features.data[:, 2], np.sin(2 * np.pi * theta))
        np.testing.assert_allclose(g.node_features.data[:, 3], fa.filtered.data)


class TestGcn:
    def _random_instance(self, rng, n=4, d=4):
        a = rng.random(n)
        fa = threshold(Tensor(a))
        grid = PatchGrid.from_sizes(4 * n, 4, 4, 4)
        g = build_graph(fa, *polar_coordinates(grid, fa.reference_index))
        params = GcnParams(Tensor(rng.normal(size=(4, d)), requires_grad=True),
                           Tensor(rng.normal(size=(d, d)), requires_grad=True))
        return g, params

    def test_zero_weights_give_zero_feature(self):
        rng = np.random.default_rng(66)
        g, params = self._random_instance(rng)
        params.w1.data[:] = 0.0
        params.w2.data[:] = 0.0
        np.testing.assert_allclose(structure_feature(g, params).data, 0.0)

    def test_zero_adjacency_gives_zero_feature(self):
        rng = np.random.default_rng(67)
        fa = threshold(Tensor([0.3, 0.3, 0.3]))  # constant: all filtered
        g = build_graph(fa, np.zeros(3), np.zeros(3))
        params = GcnParams(Tensor(rng.normal(size=(4, 4))),
                           Tensor(rng.normal(size=(4, 4))))
        np.testing.assert_allclose(structure_feature(g, params).data, 0.0)

    def test_matches_matrix_chain_oracle(self):
        rng = np.random.default_rng(68)
        for _ in range(20):
            g, params = self._random_instance(rng)
            got = structure_feature(g, params).data[0]
            expected = oracles.gcn_chain(g.adjacency.data, g.node_features.data,
                                         params.w1.data, params.w2.data,
                                         g.reference_index)
            np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_finite_difference_through_gcn(self):
        rng = np.random.default_rng(69)
        g, params = self._random_instance(rng)
        w = np.random.default_rng(70).normal(size=(1, 4))

        def build():
            return ad.sum_all(ad.mul(structure_feature(g, params), Tensor(w)))

        gradcheck.check_gradients(build, [params.w1, params.w2])


class TestInject:
    def test_zero_feature_is_identity(self):
        rng = np.random.default_rng(71)
        z = Tensor(rng.normal(size=(5, 4)))
        out = inject(z, Tensor(np.zeros((1, 4))))
        assert np.array_equal(out.data, z.data)

    def test_patch_rows_untouched(self):
        rng = np.random.default_rng(72)
        z = Tensor(rng.normal(size=(5, 4)))
        s = Tensor(rng.normal(size=(1, 4)))
        out = inject(z, s)
        assert np.array_equal(out.data[1:], z.data[1:])
        np.testing.assert_allclose(out.data[0], z.data[0] + s.data[0], atol=1e-15)

    def test_gradient_reaches_gcn_weights(self):
        rng = np.random.default_rng(73)
        heads = []
        for _ in range(2):
            raw = rng.random((5, 5)) + 0.05
            heads.append(Tensor(raw / raw.sum(axis=1, keepdims=True)))
        record = AttentionRecord(1, heads)
        grid = PatchGrid.from_sizes(8, 8, 4, 4)
        params = GcnParams(Tensor(rng.normal(size=(4, 4)), requires_grad=True),
                           Tensor(rng.normal(size=(4, 4)), requires_grad=True))
        z = Tensor(rng.normal(size=(5, 4)))
        w = np.random.default_rng(74).normal(size=(5, 4))

        def build():
            s = structure_vector(record, grid, params)
            return ad.sum_all(ad.mul(inject(z, s), Tensor(w)))

        worst = gradcheck.check_gradients(build, [params.w1, params.w2])
        build().backward()
        assert np.abs(params.w1.grad).max() > 0.0
        assert worst < 1e-4
