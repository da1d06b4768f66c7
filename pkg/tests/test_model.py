import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from oracles import box_filter_mean, sigmoid, straight_line_forward, windowed_max
from sargnn.errors import IntegrityError, InvalidInputError, ShapeError
from sargnn.graph import GridGraph, Image, build_grid_graph, grid_topology
from sargnn.model import (
    AttentionParams,
    SageLayerParams,
    channel_attention,
    forward,
    grid_max_pool,
    init_model,
    sage_aggregate,
    sage_update,
    softmax_probs,
    spatial_attention,
)


def graph_of(values):
    return build_grid_graph(Image(np.asarray(values, dtype=float)))


def zero_attention(d, hidden=1):
    return AttentionParams(
        np.zeros((d, hidden)), np.zeros(hidden), np.zeros((hidden, d)), np.zeros(d), np.zeros((2, 1)), np.zeros(1)
    )


def random_attention(rng, d, hidden):
    return AttentionParams(
        rng.normal(size=(d, hidden)),
        rng.normal(size=hidden),
        rng.normal(size=(hidden, d)),
        rng.normal(size=d),
        rng.normal(size=(2, 1)),
        rng.normal(size=1),
    )


class TestSageAggregate:
    def test_constant_features(self):
        g = grid_topology(5, 4)
        out = sage_aggregate(g, np.full((20, 3), 0.7))
        np.testing.assert_allclose(out.data, 0.7, rtol=0, atol=1e-15)

    def test_center_spike(self):
        h = np.zeros((9, 1))
        h[4] = 9.0
        out = sage_aggregate(grid_topology(3, 3), h)
        assert out.data[4, 0] == pytest.approx(1.0, abs=1e-15)

    def test_two_by_two(self):
        out = sage_aggregate(grid_topology(2, 2), np.array([[1.0], [2.0], [3.0], [4.0]]))
        np.testing.assert_allclose(out.data[:, 0], 2.5, atol=1e-15)

    def test_box_filter_oracle(self, rng):
        g = grid_topology(8, 8)
        for _ in range(10):
            img = rng.normal(size=(8, 8, 2))
            out = sage_aggregate(g, img.reshape(64, 2)).data.reshape(8, 8, 2)
            assert np.abs(out - box_filter_mean(img)).max() < 1e-12

    def test_row_mismatch(self):
        with pytest.raises(ShapeError):
            sage_aggregate(grid_topology(3, 3), np.zeros((8, 1)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
    def test_permutation_consistency(self, h, w, seed):
        rng = np.random.default_rng(seed)
        g = build_grid_graph(Image(rng.uniform(size=(h, w))))
        n = g.num_vertices
        perm = rng.permutation(n)  # old vertex v becomes perm[v]
        inv = np.argsort(perm)
        feats = rng.normal(size=(n, 3))
        permuted = GridGraph(
            h,
            w,
            perm[g.edges],
            feats[inv],
            g.coords[inv],
            g.origin[inv],
        )
        a = sage_aggregate(g, feats).data
        b = sage_aggregate(permuted, feats[inv]).data
        np.testing.assert_allclose(b, a[inv], rtol=0, atol=1e-14)


class TestSageUpdate:
    def test_zero_params(self, rng):
        p = SageLayerParams(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)), np.zeros(3))
        x = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(sage_update(x, x, p).data, np.zeros((4, 3)))

    def test_bias_only(self, rng):
        p = SageLayerParams(np.zeros((2, 3)), np.ones(3), np.zeros((2, 3)), np.ones(3))
        x = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(sage_update(x, x, p).data, np.ones((4, 3)))

    @pytest.mark.parametrize("rule", ["product", "sum"])
    def test_scalar_hand_evaluation(self, rng, rule):
        z, h = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        p = SageLayerParams(rng.normal(size=(2, 3)), rng.normal(size=3), rng.normal(size=(2, 3)), rng.normal(size=3))
        out = sage_update(z, h, p, rule).data
        for i in range(4):
            for c in range(3):
                nb = p.b_neighbour[c] + sum(z[i, k] * p.W_neighbour[k, c] for k in range(2))
                own = p.b_self[c] + sum(h[i, k] * p.W_self[k, c] for k in range(2))
                combined = nb * own if rule == "product" else nb + own
                assert out[i, c] == pytest.approx(max(combined, 0.0), abs=1e-14)

    def test_shape_errors(self):
        p = SageLayerParams(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)), np.zeros(3))
        with pytest.raises(ShapeError):
            sage_update(np.zeros((4, 2)), np.zeros((5, 2)), p)
        with pytest.raises(ShapeError):
            sage_update(np.zeros((4, 3)), np.zeros((4, 3)), p)
        with pytest.raises(InvalidInputError):
            sage_update(np.zeros((4, 2)), np.zeros((4, 2)), p, "concat")

    def test_param_shapes_validated(self):
        with pytest.raises(ShapeError):
            SageLayerParams(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 4)), np.zeros(4))


class TestGridMaxPool:
    def test_constant_grid_ties(self):
        pooled, argmax, coarse = grid_max_pool(np.full((16, 1), 0.3), grid_topology(4, 4), 2)
        np.testing.assert_array_equal(pooled.data, np.full((4, 1), 0.3))
        np.testing.assert_array_equal(argmax[:, 0], [0, 2, 8, 10])
        assert (coarse.height, coarse.width) == (2, 2)

    def test_unique_max(self):
        pooled, argmax, _ = grid_max_pool(np.array([[1.0], [5.0], [3.0], [2.0]]), grid_topology(2, 2), 2)
        assert pooled.data.tolist() == [[5.0]]
        assert argmax.tolist() == [[1]]

    def test_windowed_max_oracle(self, rng):
        img = rng.normal(size=(6, 6, 3))
        pooled, argmax, _ = grid_max_pool(img.reshape(36, 3), grid_topology(6, 6), 2)
        vals, where = windowed_max(img, 2)
        np.testing.assert_array_equal(pooled.data, vals.reshape(9, 3))
        np.testing.assert_array_equal(argmax, (where[..., 0] * 6 + where[..., 1]).reshape(9, 3))

    def test_partial_windows(self, rng):
        img = rng.normal(size=(5, 7, 2))
        pooled, argmax, coarse = grid_max_pool(img.reshape(35, 2), grid_topology(5, 7), 2)
        vals, where = windowed_max(img, 2)
        assert (coarse.height, coarse.width) == (3, 4)
        np.testing.assert_array_equal(pooled.data, vals.reshape(12, 2))
        np.testing.assert_array_equal(argmax, (where[..., 0] * 7 + where[..., 1]).reshape(12, 2))

    def test_scatter_reproduces_max_positions(self, rng):
        h = rng.normal(size=(36, 3))
        pooled, argmax, _ = grid_max_pool(h, grid_topology(6, 6), 2)
        scattered = np.full_like(h, -np.inf)
        for c in range(3):
            scattered[argmax[:, c], c] = pooled.data[:, c]
        np.testing.assert_array_equal(scattered[np.isfinite(scattered)], h[np.isfinite(scattered)])
        _, where = windowed_max(h.reshape(6, 6, 3), 2)
        for c in range(3):
            expected = set((where[..., c, 0] * 6 + where[..., c, 1]).ravel().tolist())
            assert set(np.flatnonzero(np.isfinite(scattered[:, c])).tolist()) == expected

    def test_zero_window(self):
        with pytest.raises(InvalidInputError):
            grid_max_pool(np.zeros((4, 1)), grid_topology(2, 2), 0)


class TestChannelAttention:
    def test_zero_mlp_halves(self, rng):
        h = rng.normal(size=(9, 4))
        out, gate = channel_attention(h, zero_attention(4))
        np.testing.assert_array_equal(gate.data, np.full(4, 0.5))
        np.testing.assert_allclose(out.data, h / 2, atol=0)

    def test_constant_channels(self, rng):
        row = rng.normal(size=4)
        p = random_attention(rng, 4, 2)
        _, gate = channel_attention(np.tile(row, (6, 1)), p)
        mlp = np.maximum(row @ p.mlp_W1 + p.mlp_b1, 0) @ p.mlp_W2 + p.mlp_b2
        np.testing.assert_allclose(gate.data, sigmoid(2 * mlp), atol=1e-14)

    def test_straight_line(self, rng):
        h = rng.normal(size=(7, 4))
        p = random_attention(rng, 4, 2)
        out, gate = channel_attention(h, p)
        avg, mx = h.mean(axis=0), h.max(axis=0)
        expected_gate = np.zeros(4)
        for c in range(4):
            total = 0.0
            for v in (avg, mx):
                hidden = [max(sum(v[k] * p.mlp_W1[k, j] for k in range(4)) + p.mlp_b1[j], 0.0) for j in range(2)]
                total += sum(hidden[j] * p.mlp_W2[j, c] for j in range(2)) + p.mlp_b2[c]
            expected_gate[c] = 1 / (1 + math.exp(-total))
        np.testing.assert_allclose(gate.data, expected_gate, atol=1e-14)
        np.testing.assert_allclose(out.data, h * expected_gate, atol=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            channel_attention(rng.normal(size=(5, 3)), zero_attention(4))

    def test_reduction_must_divide(self):
        with pytest.raises(ShapeError):
            AttentionParams(np.zeros((6, 4)), np.zeros(4), np.zeros((4, 6)), np.zeros(6), np.zeros((2, 1)), np.zeros(1))


class TestSpatialAttention:
    def test_zero_combiner(self, rng):
        _, gate = spatial_attention(rng.normal(size=(9, 4)), grid_topology(3, 3), zero_attention(4))
        np.testing.assert_array_equal(gate.data, np.full(9, 0.5))

    def test_identical_vertices(self, rng):
        row = rng.normal(size=4)
        _, gate = spatial_attention(np.tile(row, (12, 1)), grid_topology(3, 4), random_attention(rng, 4, 2))
        np.testing.assert_allclose(gate.data, gate.data[0], rtol=0, atol=1e-15)

    def test_straight_line(self, rng):
        h = rng.normal(size=(9, 4))
        p = random_attention(rng, 4, 2)
        out, gate = spatial_attention(h, grid_topology(3, 3), p)
        summary = np.stack([h.mean(axis=1), h.max(axis=1)], axis=1).reshape(3, 3, 2)
        smoothed = box_filter_mean(summary).reshape(9, 2)
        expected = sigmoid(smoothed[:, 0] * p.spatial_W[0, 0] + smoothed[:, 1] * p.spatial_W[1, 0] + p.spatial_b[0])
        np.testing.assert_allclose(gate.data, expected, atol=1e-14)
        np.testing.assert_allclose(out.data, h * expected[:, None], atol=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            spatial_attention(rng.normal(size=(8, 4)), grid_topology(3, 3), zero_attention(4))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-50, 50))
    @example(seed=964, scale=25.0)  # saturates a channel gate in float64
    def test_gates_strictly_inside_unit_interval(self, seed, scale):
        rng = np.random.default_rng(seed)
        p = random_attention(rng, 4, 2)
        h = rng.normal(size=(16, 4)) * abs(scale) / 10
        _, g1 = channel_attention(h, p)
        _, g2 = spatial_attention(h, grid_topology(4, 4), p)
        for g in (g1.data, g2.data):
            assert np.all(g > 0) and np.all(g < 1)


class TestForward:
    def test_zero_head_uniform(self, rng):
        model = init_model((8, 8), list("abcde"), channels=(4,), reduction=2, seed=3)
        model = model.map_parameters(lambda name, v: np.zeros_like(v) if name.startswith("head") else v)
        logits, _ = forward(model, graph_of(rng.uniform(size=(8, 8))))
        assert np.all(logits.data == logits.data[0])
        np.testing.assert_allclose(softmax_probs(logits), 0.2)

    def test_no_layers(self, rng):
        model = init_model((2, 2), ["a", "b", "c"], channels=(), head_hidden=(), seed=0)
        img = rng.uniform(size=(2, 2))
        logits, trace = forward(model, graph_of(img), record=True)
        W, b = model.head[0]
        np.testing.assert_allclose(logits.data, (img.reshape(1, 4) @ W + b)[0], atol=1e-15)
        assert trace.layers == []

    @pytest.mark.parametrize("rule", ["product", "sum"])
    def test_matches_straight_line_reimplementation(self, rng, rule):
        model = init_model((8, 8), ["a", "b", "c"], channels=(8,), reduction=4, seed=11, update_rule=rule)
        img = rng.uniform(size=(8, 8))
        logits, trace = forward(model, graph_of(img), record=True)
        ref = straight_line_forward(model, img[..., None])
        np.testing.assert_allclose(logits.data, ref["logits"], rtol=1e-12, atol=1e-13)
        np.testing.assert_allclose(trace.layers[0].output.data, ref["outputs"][0], rtol=1e-12, atol=1e-14)

    def test_two_layers_match_straight_line(self, rng):
        model = init_model((8, 8), ["a", "b"], channels=(4, 8), pools=(2, 2), reduction=2, seed=5)
        img = rng.uniform(size=(8, 8))
        logits, _ = forward(model, graph_of(img))
        np.testing.assert_allclose(logits.data, straight_line_forward(model, img[..., None])["logits"], rtol=1e-12, atol=1e-13)

    def test_trace_contents(self, rng):
        model = init_model((8, 8), ["a", "b"], channels=(4, 8), reduction=2, seed=5)
        _, trace = forward(model, graph_of(rng.uniform(size=(8, 8))), record=True)
        assert len(trace.layers) == 2
        assert [(g.height, g.width) for g in trace.grids] == [(8, 8), (4, 4), (2, 2)]
        for rec in trace.layers:
            assert rec.argmax.shape == (rec.pooled_grid.num_vertices, rec.pre_pool.shape[1])
            assert rec.argmax.min() >= 0 and rec.argmax.max() < rec.grid.num_vertices

    def test_dimension_mismatch(self, rng):
        model = init_model((8, 8), ["a", "b"], channels=(4,), reduction=2)
        with pytest.raises(InvalidInputError, match="8x8x1"):
            forward(model, graph_of(rng.uniform(size=(6, 8))))

    def test_default_architecture_dims(self):
        model = init_model((128, 128), [str(k) for k in range(10)])
        assert model.channels == [1, 16, 32, 64]
        assert model.grid_dims() == [(128, 128), (64, 64), (32, 32), (16, 16)]
        assert model.head[0][0].shape == (16 * 16 * 64, 128)
        assert model.head[1][0].shape == (128, 10)

    def test_glorot_bounds_and_zero_biases(self):
        model = init_model((16, 16), ["a", "b"], channels=(8, 16), update_rule="sum", seed=2)
        for name, value in model.named_parameters():
            if value.ndim == 2:
                limit = np.sqrt(6.0 / sum(value.shape))
                assert np.abs(value).max() <= limit
            else:
                assert np.all(value == 0), name

    def test_needs_two_classes(self):
        with pytest.raises(InvalidInputError):
            init_model((4, 4), ["only"], channels=(4,), reduction=2)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_probs(np.zeros(10)), 0.1, atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(softmax_probs(np.array([math.log(2), 0.0])), [2 / 3, 1 / 3], atol=1e-15)

    def test_shift_invariance(self, rng):
        z = rng.normal(size=6)
        np.testing.assert_allclose(softmax_probs(z + 100), softmax_probs(z), rtol=0, atol=1e-9)

    def test_non_finite(self):
        with pytest.raises(IntegrityError):
            softmax_probs(np.array([0.0, np.nan]))

    def test_too_few_classes(self):
        with pytest.raises(InvalidInputError):
            softmax_probs(np.array([1.0]))

    @given(st.lists(st.floats(-500, 500), min_size=2, max_size=12), st.floats(-1000, 1000))
    def test_sums_to_one_and_shift_invariant(self, logits, shift):
        z = np.array(logits)
        p = softmax_probs(z)
        assert abs(p.sum() - 1) <= 1e-6 and np.all(p >= 0)
        np.testing.assert_allclose(softmax_probs(z + shift), p, atol=1e-9)
