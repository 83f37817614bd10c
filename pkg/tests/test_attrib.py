"""Attribution tests: map post-processing oracles, per-method formula
oracles on hand-sized models, determinism and the forward-only property."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from riskcam import attrib as A
from riskcam import model as M
from riskcam import tensor as T
from riskcam.errors import GraphError, ParameterError

from oracles import bilinear_at, conv2d_loops, matmul_loops, softmax_direct


class TestNormalizeMap:
    def test_direct_arithmetic(self):
        np.testing.assert_allclose(A.normalize_map(np.array([0.0, 5.0, 10.0])), [0.0, 0.5, 1.0], atol=1e-7)

    def test_constant_map_collapses_to_zero(self):
        np.testing.assert_array_equal(A.normalize_map(np.full((3, 3), 2.5)), np.zeros((3, 3), dtype=np.float32))

    def test_already_normalized_unchanged(self):
        m = np.array([[0.0, 0.25], [0.75, 1.0]], dtype=np.float32)
        np.testing.assert_array_equal(A.normalize_map(m), m)

    @given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                      elements=st.floats(-100, 100)))
    def test_range_invariant(self, raw):
        out = A.normalize_map(raw)
        assert out.min() >= 0.0 and out.max() <= 1.0
        raw32 = np.asarray(raw, dtype=np.float32)  # maps are float32
        if raw32.max() > raw32.min():
            assert out.max() == pytest.approx(1.0)
            assert out.min() == 0.0
        else:
            assert np.all(out == 0.0)


class TestUpsampleBilinear:
    def test_constant_stays_constant(self):
        out = A.upsample_bilinear(np.full((3, 4), 0.7, dtype=np.float32), 9, 11)
        np.testing.assert_allclose(out, 0.7, atol=1e-7)

    def test_one_by_one_broadcasts(self):
        out = A.upsample_bilinear(np.array([[0.3]]), 5, 6)
        assert out.shape == (5, 6)
        np.testing.assert_allclose(out, 0.3, atol=1e-7)

    def test_checkerboard_center(self):
        out = A.upsample_bilinear(np.array([[0.0, 1.0], [1.0, 0.0]]), 3, 3)
        assert out[1, 1] == pytest.approx(0.5)

    def test_matches_pointwise_oracle(self):
        rng = np.random.default_rng(2)
        grid = rng.random((4, 5))
        out_h, out_w = 9, 13
        out = A.upsample_bilinear(grid, out_h, out_w)
        for i in range(out_h):
            for j in range(out_w):
                r = i * (4 - 1) / (out_h - 1)
                c = j * (5 - 1) / (out_w - 1)
                assert out[i, j] == pytest.approx(bilinear_at(grid, r, c), abs=1e-9)

    def test_identity_when_sizes_match(self):
        grid = np.random.default_rng(0).random((4, 4)).astype(np.float32)
        np.testing.assert_array_equal(A.upsample_bilinear(grid, 4, 4), grid)


def _single_conv_model(kernel, bias, head_weight, head_bias, input_size=8, in_channels=1):
    """conv -> dropout(p=0) -> gap -> linear with fully controlled weights."""
    cout = kernel.shape[0]
    classes = head_weight.shape[0]
    spec = M.ModelSpec(
        (
            M.LayerSpec("conv", out_channels=cout, kernel=kernel.shape[2], padding=1),
            M.LayerSpec("dropout", p=0.0),
            M.LayerSpec("gap"),
            M.LayerSpec("linear", out_features=classes),
        ),
        classes=classes,
        input_size=input_size,
        in_channels=in_channels,
    )
    tensors = {
        "0.weight": kernel.astype(np.float32),
        "0.bias": bias.astype(np.float32),
        "3.weight": head_weight.astype(np.float32),
        "3.bias": head_bias.astype(np.float32),
    }
    return M.Model(spec, M.WeightStore(spec, tensors, seed=0))


@pytest.fixture()
def two_channel_model():
    rng = np.random.default_rng(5)
    return _single_conv_model(
        kernel=rng.normal(size=(2, 1, 3, 3)),
        bias=rng.normal(size=2) * 0.1,
        head_weight=rng.normal(size=(3, 2)),
        head_bias=rng.normal(size=3) * 0.1,
    )


@pytest.fixture()
def image8():
    return np.random.default_rng(9).random((8, 8)).astype(np.float32)


class TestGradCam:
    def test_positive_weight_reproduces_activation(self):
        model = _single_conv_model(
            kernel=np.full((1, 1, 3, 3), 0.1),
            bias=np.zeros(1),
            head_weight=np.array([[2.0], [-2.0]]),
            head_bias=np.zeros(2),
        )
        img = np.random.default_rng(1).random((8, 8)).astype(np.float32)
        _, graph = M.predict(model, img)
        acts = graph.activation(graph.marks[("layer", 0)])
        sal = A.grad_cam(graph, 0, 0)
        expected = A.normalize_map(A.upsample_bilinear(np.maximum(acts[0, 0], 0), 8, 8))
        np.testing.assert_allclose(sal.values, expected, atol=1e-6)

    def test_negative_gradients_give_zero_map(self):
        model = _single_conv_model(
            kernel=np.full((1, 1, 3, 3), 0.1),
            bias=np.zeros(1),
            head_weight=np.array([[2.0], [-2.0]]),
            head_bias=np.zeros(2),
        )
        img = np.random.default_rng(1).random((8, 8)).astype(np.float32)
        _, graph = M.predict(model, img)
        sal = A.grad_cam(graph, 0, 1)  # class 1 weight is negative
        np.testing.assert_array_equal(sal.values, np.zeros((8, 8), dtype=np.float32))

    def test_matches_weighted_sum_oracle(self, two_channel_model, image8):
        _, graph = M.predict(two_channel_model, image8)
        acts = graph.activation(graph.marks[("layer", 0)])
        grads = T.backward(graph, 2, graph.marks[("layer", 0)]).data
        # direct formula, computed independently of the attribution code
        raw = np.zeros(acts.shape[2:])
        for k in range(acts.shape[1]):
            raw += grads[0, k].mean() * acts[0, k]
        raw = np.maximum(raw, 0)
        expected = A.normalize_map(A.upsample_bilinear(raw, 8, 8))
        sal = A.grad_cam(graph, 0, 2)
        np.testing.assert_allclose(sal.values, expected, atol=1e-6)

    def test_missing_layer_raises(self, two_channel_model, image8):
        _, graph = M.predict(two_channel_model, image8)
        with pytest.raises(GraphError):
            A.grad_cam(graph, 99, 0)

    def test_channel_weights_scale_with_head(self, two_channel_model, image8):
        """Scaling the final linear layer by lambda scales every channel
        weight by lambda, preserving their ranking."""
        lam = 3.7

        def channel_weights(model):
            _, graph = M.predict(model, image8)
            g = T.backward(graph, 0, graph.marks[("layer", 0)]).data
            return g.mean(axis=(2, 3))[0]

        w1 = channel_weights(two_channel_model)
        scaled = {k: v.copy() for k, v in two_channel_model.weights.tensors.items()}
        scaled["3.weight"] *= lam
        scaled["3.bias"] *= lam
        model2 = M.Model(two_channel_model.spec, M.WeightStore(two_channel_model.spec, scaled, 0))
        w2 = channel_weights(model2)
        np.testing.assert_allclose(w2, lam * w1, rtol=1e-4)
        assert list(np.argsort(w1)) == list(np.argsort(w2))


class TestGradCamPP:
    def test_zero_gradients_give_zero_map(self):
        model = _single_conv_model(
            kernel=np.full((1, 1, 3, 3), 0.1),
            bias=np.zeros(1),
            head_weight=np.array([[0.0], [1.0]]),
            head_bias=np.zeros(2),
        )
        img = np.random.default_rng(1).random((8, 8)).astype(np.float32)
        _, graph = M.predict(model, img)
        sal = A.grad_cam_pp(graph, 0, 0)  # class 0 head weight is zero
        np.testing.assert_array_equal(sal.values, np.zeros((8, 8), dtype=np.float32))

    def test_single_position_closed_form(self):
        # one nonzero activation and gradient position: alpha = 1/(2 + A*g)
        acts = np.zeros((1, 1, 2, 2))
        grads = np.zeros((1, 1, 2, 2))
        acts[0, 0, 1, 0] = 0.8
        grads[0, 0, 1, 0] = 0.5
        raw = A._grad_cam_pp_raw(acts, grads, grads**2, grads**3)
        alpha = 1.0 / (2.0 + 0.8 * 0.5)
        expected_weight = alpha * 0.5
        expected = np.maximum(expected_weight * acts[0, 0], 0)
        np.testing.assert_allclose(raw, expected, atol=1e-9)

    def test_matches_brute_force_oracle(self, two_channel_model, image8):
        _, graph = M.predict(two_channel_model, image8)
        acts = graph.activation(graph.marks[("layer", 0)])
        grads = T.backward(graph, 1, graph.marks[("layer", 0)]).data
        # independent elementwise evaluation of the alpha-weight formula
        k, h, w = acts.shape[1], acts.shape[2], acts.shape[3]
        raw = np.zeros((h, w))
        for kk in range(k):
            a, g = acts[0, kk].astype(np.float64), grads[0, kk].astype(np.float64)
            weight = 0.0
            for i in range(h):
                for j in range(w):
                    denom = 2 * g[i, j] ** 2 + a.sum() * g[i, j] ** 3
                    alpha = g[i, j] ** 2 / denom if denom > 1e-8 else 0.0
                    weight += alpha * max(g[i, j], 0.0)
            raw += weight * acts[0, kk]
        expected = A.normalize_map(A.upsample_bilinear(np.maximum(raw, 0), 8, 8))
        sal = A.grad_cam_pp(graph, 0, 1)
        np.testing.assert_allclose(sal.values, expected, atol=1e-5)


class TestSmoothGradCamPP:
    def test_reduces_to_grad_cam_pp(self, two_channel_model, image8):
        _, graph = M.predict(two_channel_model, image8, "disabled", seed=4)
        base = A.grad_cam_pp(graph, 0, 1)
        smooth = A.smooth_grad_cam_pp(two_channel_model, image8, 0, 1, samples=1, sigma_rel=0.0, seed=4)
        np.testing.assert_array_equal(smooth.values, base.values)

    def test_reduction_holds_under_mc_dropout(self, trained32):
        img = np.random.default_rng(3).random((32, 32)).astype(np.float32)
        layer = trained32.spec.last_conv_layer
        _, graph = M.predict(trained32, img, "mc-enabled", seed=11)
        base = A.grad_cam_pp(graph, layer, 0)
        smooth = A.smooth_grad_cam_pp(
            trained32, img, layer, 0, samples=1, sigma_rel=0.0, seed=11, dropout_mode="mc-enabled"
        )
        np.testing.assert_array_equal(smooth.values, base.values)

    def test_same_seed_is_deterministic(self, two_channel_model, image8):
        a = A.smooth_grad_cam_pp(two_channel_model, image8, 0, 1, samples=4, sigma_rel=0.15, seed=3)
        b = A.smooth_grad_cam_pp(two_channel_model, image8, 0, 1, samples=4, sigma_rel=0.15, seed=3)
        np.testing.assert_array_equal(a.values, b.values)

    def test_correlates_with_grad_cam_pp(self, trained32):
        img = np.zeros((32, 32), dtype=np.float32)
        img[4:20, 6:22] = 0.9
        layer = trained32.spec.last_conv_layer
        pred, graph = M.predict(trained32, img)
        base = A.grad_cam_pp(graph, layer, pred.label).values.ravel()
        smooth = A.smooth_grad_cam_pp(trained32, img, layer, pred.label, samples=5, sigma_rel=0.1, seed=0)
        s = smooth.values.ravel()
        r = np.corrcoef(base, s)[0, 1]
        assert r > 0.5

    def test_negative_sigma_raises(self, two_channel_model, image8):
        with pytest.raises(ParameterError):
            A.smooth_grad_cam_pp(two_channel_model, image8, 0, 0, samples=1, sigma_rel=-0.1)

    def test_zero_samples_raises(self, two_channel_model, image8):
        with pytest.raises(ParameterError):
            A.smooth_grad_cam_pp(two_channel_model, image8, 0, 0, samples=0)


class TestScoreCam:
    def test_single_channel_weight_is_one(self):
        model = _single_conv_model(
            kernel=np.random.default_rng(0).normal(size=(1, 1, 3, 3)),
            bias=np.zeros(1),
            head_weight=np.array([[1.0], [-1.0]]),
            head_bias=np.zeros(2),
        )
        img = np.random.default_rng(1).random((8, 8)).astype(np.float32)
        _, graph = M.predict(model, img)
        acts = graph.activation(graph.marks[("layer", 0)])
        sal = A.score_cam(model, img, 0, 0)
        expected = A.normalize_map(A.upsample_bilinear(np.maximum(acts[0, 0], 0), 8, 8))
        np.testing.assert_allclose(sal.values, expected, atol=1e-6)

    def test_identical_channels_equal_weights(self):
        kernel = np.zeros((2, 1, 3, 3))
        kernel[0] = kernel[1] = np.random.default_rng(2).normal(size=(1, 3, 3))
        model = _single_conv_model(
            kernel=kernel,
            bias=np.zeros(2),
            head_weight=np.random.default_rng(3).normal(size=(2, 2)),
            head_bias=np.zeros(2),
        )
        img = np.random.default_rng(4).random((8, 8)).astype(np.float32)
        _, graph = M.predict(model, img)
        acts = graph.activation(graph.marks[("layer", 0)])
        sal = A.score_cam(model, img, 0, 0)
        expected = A.normalize_map(A.upsample_bilinear(np.maximum(acts[0, 0], 0), 8, 8))
        np.testing.assert_allclose(sal.values, expected, atol=1e-6)

    def test_matches_explicit_masked_pass_oracle(self, two_channel_model, image8):
        model = two_channel_model
        _, graph = M.predict(model, image8)
        acts = graph.activation(graph.marks[("layer", 0)]).astype(np.float64)
        w = model.weights.tensors

        # brute-force oracle: loop over channels, re-run the model by hand
        def forward_by_hand(img2d):
            x = img2d[None, None].astype(np.float64)
            conv = conv2d_loops(x, w["0.weight"], w["0.bias"], 1, 1)
            pooled = conv.mean(axis=(2, 3))
            return matmul_loops(pooled, w["3.weight"], w["3.bias"])[0]

        scores = []
        for k in range(2):
            act = acts[0, k]
            lo, hi = act.min(), act.max()
            mask = np.zeros_like(image8, dtype=np.float64) if hi == lo else np.array(
                [[bilinear_at((act - lo) / (hi - lo), i * (act.shape[0] - 1) / 7, j * (act.shape[1] - 1) / 7)
                  for j in range(8)] for i in range(8)]
            )
            logits = forward_by_hand(image8 * mask)
            scores.append(softmax_direct(logits)[1])
        weights = softmax_direct(scores)
        raw = np.maximum(weights[0] * acts[0, 0] + weights[1] * acts[0, 1], 0)
        lo, hi = 0.0, raw.max()
        expected = A.normalize_map(A.upsample_bilinear(raw, 8, 8))

        sal = A.score_cam(model, image8, 0, 1)
        np.testing.assert_allclose(sal.values, expected, atol=1e-5)

    def test_deterministic_under_mc(self, trained32):
        img = np.random.default_rng(6).random((32, 32)).astype(np.float32)
        layer = trained32.spec.last_conv_layer
        a = A.score_cam(trained32, img, layer, 1, "mc-enabled", seed=5)
        b = A.score_cam(trained32, img, layer, 1, "mc-enabled", seed=5)
        np.testing.assert_array_equal(a.values, b.values)


class TestReciproCam:
    def test_degenerate_single_position(self):
        # conv collapses 8x8 to 1x1: one spatial mask, constant map, all zeros
        rng = np.random.default_rng(0)
        spec = M.ModelSpec(
            (
                M.LayerSpec("conv", out_channels=2, kernel=8),
                M.LayerSpec("dropout", p=0.0),
                M.LayerSpec("gap"),
                M.LayerSpec("linear", out_features=2),
            ),
            classes=2,
            input_size=8,
        )
        tensors = {
            "0.weight": rng.normal(size=(2, 1, 8, 8)).astype(np.float32),
            "0.bias": np.zeros(2, dtype=np.float32),
            "3.weight": rng.normal(size=(2, 2)).astype(np.float32),
            "3.bias": np.zeros(2, dtype=np.float32),
        }
        model = M.Model(spec, M.WeightStore(spec, tensors, 0))
        sal = A.recipro_cam(model, rng.random((8, 8)).astype(np.float32), 0, 0)
        np.testing.assert_array_equal(sal.values, np.zeros((8, 8), dtype=np.float32))

    def test_matches_closed_form_tail_oracle(self, two_channel_model, image8):
        model = two_channel_model
        _, graph = M.predict(model, image8)
        acts = graph.activation(graph.marks[("layer", 0)]).astype(np.float64)
        w = model.weights.tensors
        h, wd = acts.shape[2], acts.shape[3]
        # tail is gap -> linear: keeping one column gives gap = A[:, u, v]/(h*w)
        expected_raw = np.zeros((h, wd))
        for u in range(h):
            for v in range(wd):
                pooled = acts[0, :, u, v] / (h * wd)
                logits = matmul_loops(pooled[None], w["3.weight"], w["3.bias"])[0]
                expected_raw[u, v] = softmax_direct(logits)[1]
        expected = A.normalize_map(A.upsample_bilinear(expected_raw, 8, 8))
        sal = A.recipro_cam(model, image8, 0, 1)
        np.testing.assert_allclose(sal.values, expected, atol=1e-5)

    def test_two_seeds_identical_when_disabled(self, two_channel_model, image8):
        a = A.recipro_cam(two_channel_model, image8, 0, 0, "disabled", seed=1)
        b = A.recipro_cam(two_channel_model, image8, 0, 0, "disabled", seed=2)
        np.testing.assert_array_equal(a.values, b.values)

    def test_empty_tail_raises(self, image8):
        spec = M.ModelSpec(
            (
                M.LayerSpec("dropout", p=0.0),
                M.LayerSpec("conv", out_channels=2, kernel=3, padding=1),
            ),
            classes=2,
            input_size=8,
        )
        tensors = {
            "1.weight": np.zeros((2, 1, 3, 3), dtype=np.float32),
            "1.bias": np.zeros(2, dtype=np.float32),
        }
        model = M.Model(spec, M.WeightStore(spec, tensors, 0))
        with pytest.raises(ParameterError):
            A.recipro_cam(model, image8, 1, 0)


class TestMethodContracts:
    @pytest.mark.parametrize("method", A.METHODS)
    def test_maps_are_normalized_at_input_resolution(self, trained32, method):
        img = np.random.default_rng(13).random((32, 32)).astype(np.float32)
        cfg = A.AttributionConfig(method)
        sal = A.compute_map(trained32, img, cfg, trained32.spec.last_conv_layer, 0, "mc-enabled", seed=2)
        assert sal.values.shape == (32, 32)
        assert sal.values.min() >= 0.0 and sal.values.max() <= 1.0
        assert sal.normalized
        assert np.all(np.isfinite(sal.values))

    @pytest.mark.parametrize("method", A.METHODS)
    def test_fixed_seed_bitwise_determinism(self, trained32, method):
        img = np.random.default_rng(14).random((32, 32)).astype(np.float32)
        cfg = A.AttributionConfig(method)
        layer = trained32.spec.last_conv_layer
        a = A.compute_map(trained32, img, cfg, layer, 1, "mc-enabled", seed=9)
        b = A.compute_map(trained32, img, cfg, layer, 1, "mc-enabled", seed=9)
        np.testing.assert_array_equal(a.values, b.values)

    def test_forward_only_methods_never_call_backward(self, trained32, monkeypatch):
        img = np.random.default_rng(15).random((32, 32)).astype(np.float32)
        layer = trained32.spec.last_conv_layer

        def forbidden(*args, **kwargs):
            raise AssertionError("backward was called by a forward-only method")

        monkeypatch.setattr(T, "backward", forbidden)
        A.score_cam(trained32, img, layer, 0, "mc-enabled", seed=1)
        A.recipro_cam(trained32, img, layer, 0, "mc-enabled", seed=1)
        with pytest.raises(AssertionError):
            A.grad_cam(M.predict(trained32, img)[1], layer, 0)

    def test_unknown_method_rejected(self):
        with pytest.raises(ParameterError):
            A.AttributionConfig("occlusion")
