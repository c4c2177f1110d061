import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geotrack.errors import OutOfBoundsError, ShapeMismatchError
from geotrack.numerics import (
    Layer,
    attention_pool,
    grad_check,
    init_mlp,
    layers_from_doc,
    layers_to_doc,
    load_layers,
    loss_pose,
    loss_rot,
    loss_rot_grad,
    loss_trans,
    loss_trans_grad,
    mlp_backward,
    mlp_forward,
    sample_multires,
    save_layers,
    softmax_map,
)

LOGCOSH_1 = math.log(math.cosh(1.0))  # independent direct evaluation


class TestSoftmaxMap:
    def test_symmetric_two_entries(self):
        np.testing.assert_allclose(softmax_map(np.array([[0.0, 0.0]])),
                                   [[0.5, 0.5]])

    def test_hand_value(self):
        out = softmax_map(np.array([[0.0, math.log(3.0)]]))
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_shift_invariance(self, rng):
        a = rng.normal(size=(5, 7))
        np.testing.assert_allclose(softmax_map(a), softmax_map(a + 123.456),
                                   atol=1e-12)

    def test_huge_logit_is_stable(self):
        a = np.zeros((3, 3))
        a[1, 2] = 1e6
        out = softmax_map(a)
        assert np.isfinite(out).all()
        assert out[1, 2] == pytest.approx(1.0)

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 1000))
    @settings(max_examples=100)
    def test_sums_to_one(self, h, w, seed):
        a = np.random.default_rng(seed).normal(0, 5, (h, w))
        out = softmax_map(a)
        assert out.sum() == pytest.approx(1.0, abs=1e-12)
        assert (out > 0).all()


class TestAttentionPool:
    def test_constant_field(self, rng):
        v = np.array([2.0, -1.0, 0.5])
        fmap = np.broadcast_to(v, (4, 5, 3)).copy()
        out = attention_pool(fmap, rng.normal(size=(4, 5)))
        np.testing.assert_allclose(out, v / 20.0, atol=1e-12)

    def test_dominant_logit_selects_pixel(self, rng):
        fmap = rng.normal(size=(3, 3, 4))
        logits = np.zeros((3, 3))
        logits[1, 2] = 1e6
        out = attention_pool(fmap, logits)
        np.testing.assert_allclose(out, fmap[1, 2] / 9.0, atol=1e-6)

    def test_hand_fixture(self):
        # 2x1 map: weights softmax(1, 0) = (e/(e+1), 1/(e+1)); pooled over
        # 2 cells with the 1/(H*W) factor.
        fmap = np.array([[[1.0, 2.0]], [[3.0, 4.0]]])
        logits = np.array([[1.0], [0.0]])
        w1 = math.e / (math.e + 1.0)
        w0 = 1.0 / (math.e + 1.0)
        expected = np.array([
            (w1 * 1.0 + w0 * 3.0) / 2.0,
            (w1 * 2.0 + w0 * 4.0) / 2.0,
        ])
        np.testing.assert_allclose(attention_pool(fmap, logits), expected,
                                   atol=1e-12)

    def test_weighted_variant_drops_factor(self, rng):
        fmap = rng.normal(size=(2, 3, 2))
        logits = rng.normal(size=(2, 3))
        np.testing.assert_allclose(
            attention_pool(fmap, logits, weighted=True),
            attention_pool(fmap, logits) * 6.0,
            atol=1e-12,
        )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            attention_pool(np.zeros((2, 2, 3)), np.zeros((3, 2)))


class TestLosses:
    def test_trans_zero_at_equality(self):
        assert loss_trans((1.0, 2.0, 3.0), (1.0, 2.0, 3.0)) == 0.0

    def test_trans_3_4_5(self):
        assert loss_trans((0.0, 0.0, 0.0), (3.0, 4.0, 0.0)) == pytest.approx(5.0)

    def test_trans_grad_matches_fd(self, rng):
        t = rng.normal(size=3)
        t_hat = rng.normal(size=3)
        g = loss_trans_grad(t, t_hat)
        for i in range(3):
            step = np.zeros(3)
            step[i] = 1e-6
            fd = (loss_trans(t, t_hat + step) - loss_trans(t, t_hat - step)) / 2e-6
            assert g[i] == pytest.approx(fd, rel=1e-6)

    def test_trans_grad_zero_at_origin(self):
        np.testing.assert_array_equal(loss_trans_grad((1.0, 1.0), (1.0, 1.0)),
                                      [0.0, 0.0])

    def test_rot_zero_at_equality(self):
        assert loss_rot((0.6, 0.8), (0.6, 0.8)) == 0.0

    def test_rot_unit_difference(self):
        assert loss_rot((1.0, 0.0), (0.0, 0.0)) == pytest.approx(
            LOGCOSH_1, abs=1e-12
        )

    def test_rot_asymptote(self):
        # log cosh d -> |d| - log 2 for large d
        assert loss_rot((20.0, 0.0), (0.0, 0.0)) == pytest.approx(
            20.0 - math.log(2.0), abs=1e-8
        )

    def test_rot_symmetric_in_sign(self, rng):
        d = rng.normal(size=2)
        assert loss_rot(d, np.zeros(2)) == pytest.approx(
            loss_rot(-d, np.zeros(2))
        )

    def test_rot_grad_matches_fd(self, rng):
        r, r_hat = rng.normal(size=2), rng.normal(size=2)
        g = loss_rot_grad(r, r_hat)
        for i in range(2):
            step = np.zeros(2)
            step[i] = 1e-6
            fd = (loss_rot(r, r_hat + step) - loss_rot(r, r_hat - step)) / 2e-6
            assert g[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_pose_combination(self):
        pose = ((0.0, 0.0, 0.0), (1.0, 0.0))
        pose_hat = ((3.0, 4.0, 0.0), (0.0, 0.0))
        assert loss_pose(pose, pose_hat, beta=0.1) == pytest.approx(
            LOGCOSH_1 + 0.1 * 5.0
        )
        assert loss_pose(pose, pose_hat, beta=0.0) == pytest.approx(LOGCOSH_1)

    def test_losses_nonnegative(self, rng):
        for _ in range(100):
            a, b = rng.normal(size=3), rng.normal(size=3)
            assert loss_trans(a, b) >= 0.0
            assert loss_rot(a[:2], b[:2]) >= 0.0


class TestMlp:
    def test_identity_network(self):
        layers = [Layer(np.eye(3), np.zeros(3), "linear")]
        x = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(mlp_forward(layers, x), x)

    def test_single_layer_weight_gradient(self, rng):
        layers = [Layer(rng.normal(size=(3, 2)), rng.normal(size=2), "linear")]
        x = rng.normal(size=3)
        upstream = rng.normal(size=2)
        cache = []
        mlp_forward(layers, x, cache=cache)
        grads, dx = mlp_backward(layers, cache, upstream)
        dw, db = grads[0]
        np.testing.assert_allclose(dw, np.outer(x, upstream))
        np.testing.assert_allclose(db, upstream)
        np.testing.assert_allclose(dx, layers[0].w @ upstream)

    def test_three_layer_fd(self, rng):
        layers = init_mlp([4, 6, 5, 1], ["tanh", "relu", "linear"], rng)
        x = rng.normal(size=(3, 4))

        def f(params):
            cache = []
            out = mlp_forward(layers, x, cache=cache)
            loss = float((out ** 2).sum())
            grads, _ = mlp_backward(layers, cache, 2.0 * out)
            return loss, {
                f"{i}.{part}": g
                for i, (gw, gb) in enumerate(grads)
                for part, g in (("w", gw), ("b", gb))
            }

        params = {
            f"{i}.{part}": arr
            for i, layer in enumerate(layers)
            for part, arr in (("w", layer.w), ("b", layer.b))
        }
        report = grad_check(f, params, tolerance=1e-4)
        assert report.passed, report.errors

    def test_batch_consistency_bitwise(self, rng):
        layers = init_mlp([5, 8, 3], ["relu", "sigmoid"], rng)
        x = rng.normal(size=(10, 5))
        batched = mlp_forward(layers, x)
        for i in range(10):
            row = mlp_forward(layers, x[i])
            assert np.array_equal(batched[i], row)

    def test_shape_mismatch(self, rng):
        layers = init_mlp([4, 2], ["linear"], rng)
        with pytest.raises(ShapeMismatchError):
            mlp_forward(layers, np.zeros(3))

    def test_grad_check_negative_control(self, rng):
        w = rng.normal(size=(3, 1))

        def f(params):
            loss = float((params["w"] ** 2).sum())
            return loss, {"w": 2.0 * params["w"] + 0.05}  # corrupted gradient

        report = grad_check(f, {"w": w}, tolerance=1e-4)
        assert not report.passed

    def test_grad_check_quadratic_passes_tight(self, rng):
        w = rng.normal(size=(4,))

        def f(params):
            return float((params["w"] ** 2).sum()), {"w": 2.0 * params["w"]}

        assert grad_check(f, {"w": w}, tolerance=1e-7).passed

    def test_checkpoint_round_trip(self, tmp_path, rng):
        layers = init_mlp([3, 4, 2], ["relu", "linear"], rng)
        path = tmp_path / "mlp.json"
        save_layers(layers, path)
        back = load_layers(path)
        for a, b in zip(layers, back):
            assert np.array_equal(a.w, b.w)
            assert np.array_equal(a.b, b.b)
            assert a.act == b.act
        assert layers_to_doc(back) == layers_to_doc(layers_from_doc(
            layers_to_doc(layers)))


class TestSampleMultires:
    def test_single_cell_map(self, rng):
        m = rng.normal(size=(1, 1, 4))
        out = sample_multires([m], (123.0, 456.0), (1600, 900))
        np.testing.assert_array_equal(out, m[0, 0])

    def test_midpoint_floor_rule(self):
        m = np.arange(8.0).reshape(2, 2, 2)
        out = sample_multires([m], (800.0, 450.0), (1600, 900))
        np.testing.assert_array_equal(out, m[1, 1])

    def test_concatenates_in_order(self, rng):
        a = rng.normal(size=(2, 2, 3))
        b = rng.normal(size=(4, 4, 2))
        out = sample_multires([a, b], (10.0, 10.0), (1600, 900))
        assert out.shape == (5,)
        np.testing.assert_array_equal(out[:3], a[0, 0])
        np.testing.assert_array_equal(out[3:], b[0, 0])

    def test_edge_center_clamps(self, rng):
        m = rng.normal(size=(3, 3, 1))
        out = sample_multires([m], (1600.0, 900.0), (1600, 900))
        np.testing.assert_array_equal(out, m[2, 2])

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBoundsError):
            sample_multires([np.zeros((2, 2, 1))], (1601.0, 10.0), (1600, 900))
