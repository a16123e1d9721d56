import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pepipe.engine import (
    LayerSpec,
    Network,
    OptimizerState,
    Tensor,
    adam_step,
    conv2d,
    cross_entropy_with_l2,
    dense,
    dropout_apply,
    finite_difference_check,
    global_avg_pool,
    load_checkpoint,
    maxpool2,
    relu,
    save_checkpoint,
    sgd_momentum_step,
    softmax,
)
from pepipe.engine import layers as L
from pepipe.engine.optim import Optimizer
from pepipe.errors import ConfigError, DimensionError, InputError, LoadError, NumericError, StateError


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_1x1_kernel_scales(self):
        img = np.arange(12, dtype=float).reshape(2, 3, 2)
        k = np.zeros((1, 1, 2, 2))
        k[0, 0, 0, 0] = 3.0
        k[0, 0, 1, 1] = 3.0
        out = conv2d(t(img), t(k), t([0.5, -1.0]))
        np.testing.assert_allclose(out.data, 3.0 * img + np.array([0.5, -1.0]))

    def test_constant_image_all_ones_kernel(self):
        c = 0.7
        out = conv2d(t(np.full((5, 5, 1), c)), t(np.ones((3, 3, 1, 1))), t([0.0]))
        np.testing.assert_allclose(out.data, 9 * c)
        assert out.shape == (3, 3, 1)

    def test_shape_formula_stride2(self):
        out = conv2d(t(np.zeros((5, 5, 1))), t(np.zeros((3, 3, 1, 4))), t(np.zeros(4)), stride=2)
        assert out.shape == (2, 2, 4)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 6, 6, 2))
        k, b = rng.normal(size=(3, 3, 2, 4)), rng.normal(size=4)
        batched = conv2d(t(x), t(k), t(b), padding=1).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], conv2d(t(x[i]), t(k), t(b), padding=1).data)

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        x, k, b = rng.normal(size=(5, 6, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
        out = conv2d(t(x), t(k), t(b), stride=2, padding=1).data
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        for y in range(out.shape[0]):
            for xx in range(out.shape[1]):
                win = xp[2 * y : 2 * y + 3, 2 * xx : 2 * xx + 3, :]
                np.testing.assert_allclose(out[y, xx], np.einsum("ijc,ijcf->f", win, k) + b)

    @pytest.mark.parametrize(
        "xshape,kshape",
        [((5, 5, 2), (3, 3, 1, 1)), ((5, 5, 1), (2, 2, 1, 1)), ((2, 2, 1), (3, 3, 1, 1))],
    )
    def test_dimension_errors(self, xshape, kshape):
        with pytest.raises(DimensionError):
            conv2d(t(np.zeros(xshape)), t(np.zeros(kshape)), t(np.zeros(kshape[-1])))

    def test_non_finite_output(self):
        with pytest.raises(NumericError):
            conv2d(t(np.full((3, 3, 1), 1e308)), t(np.full((3, 3, 1, 1), 1e308)), t([0.0]))


class TestDense:
    def test_identity(self):
        x = [1.5, -2.0, 3.0]
        np.testing.assert_array_equal(dense(t(x), t(np.eye(3)), t(np.zeros(3))).data, x)

    def test_hand_arithmetic(self):
        np.testing.assert_array_equal(dense(t([1, 1]), t([[1, 2], [3, 4]]), t([0, 0])).data, [3, 7])

    def test_zero_weights_gives_bias(self):
        np.testing.assert_array_equal(dense(t([5, 6]), t(np.zeros((3, 2))), t([1, 2, 3])).data, [1, 2, 3])

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            dense(t([1, 2, 3]), t(np.zeros((2, 2))), t([0, 0]))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(relu(t([-3, -1])).data, [0, 0])
        np.testing.assert_array_equal(relu(t([1, 2])).data, [1, 2])
        np.testing.assert_array_equal(relu(t([-1, 0, 2])).data, [0, 0, 2])

    def test_relu_subgradient_at_zero(self):
        x = t([0.0, 1.0], grad=True)
        relu(x).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_maxpool(self):
        assert maxpool2(t(np.array([[1, 2], [3, 4]], float)[..., None])).data.item() == 4
        assert maxpool2(t(np.array([[-1, -2], [-3, -4]], float)[..., None])).data.item() == -1
        np.testing.assert_array_equal(maxpool2(t(np.full((4, 6, 2), 3.0))).data, np.full((2, 3, 2), 3.0))

    def test_maxpool_tie_routes_to_first(self):
        x = t(np.full((2, 2, 1), 5.0), grad=True)
        maxpool2(x).sum().backward()
        np.testing.assert_array_equal(x.grad[..., 0], [[1, 0], [0, 0]])

    def test_maxpool_odd(self):
        with pytest.raises(DimensionError):
            maxpool2(t(np.zeros((3, 4, 1))))

    def test_global_avg_pool(self):
        np.testing.assert_array_equal(global_avg_pool(t(np.full((3, 3, 2), 1.25))).data, [1.25, 1.25])
        assert global_avg_pool(t(np.array([[0, 1], [1, 0]], float)[..., None])).data.item() == 0.5
        assert global_avg_pool(t(np.array([[1, 2], [3, 4]], float)[..., None])).data.item() == 2.5

    def test_softmax_values(self):
        np.testing.assert_allclose(softmax(t([0, 0])).data, [0.5, 0.5])
        e = math.e
        np.testing.assert_allclose(softmax(t([1, 0])).data, [e / (e + 1), 1 / (e + 1)], rtol=1e-12)
        np.testing.assert_allclose(softmax(t([1, 0])).data, [0.7311, 0.2689], atol=1e-4)
        p = softmax(t([100, 0])).data
        assert np.all(np.isfinite(p)) and p[0] == pytest.approx(1.0) and p[1] < 1e-40

    def test_softmax_non_finite(self):
        with pytest.raises(NumericError):
            softmax(t([np.inf, 0]))

    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=10))
    def test_softmax_normalization(self, logits):
        p = softmax(t(logits)).data
        assert abs(p.sum() - 1.0) <= 1e-9
        assert np.all(p >= 0)


class TestCrossEntropy:
    def test_perfect(self):
        assert cross_entropy_with_l2(t([1.0, 0.0]), 0).item() == 0.0

    def test_half(self):
        assert cross_entropy_with_l2(t([0.5, 0.5]), 0).item() == pytest.approx(math.log(2), abs=1e-12)
        assert cross_entropy_with_l2(t([0.5, 0.5]), 0).item() == pytest.approx(0.6931, abs=1e-4)

    def test_zero_params_zero_penalty(self):
        params = [t(np.zeros((3, 3))), t(np.zeros(3))]
        assert cross_entropy_with_l2(t([0.5, 0.5]), 1, params, 0.7).item() == pytest.approx(math.log(2))

    def test_penalty_weights_only(self):
        params = [t(np.ones((2, 2))), t(np.ones(5))]
        loss = cross_entropy_with_l2(t([1.0, 0.0]), 0, params, 0.005)
        assert loss.item() == pytest.approx(0.005 * 4)

    def test_log_clamp(self):
        assert cross_entropy_with_l2(t([1.0, 0.0]), 1).item() == pytest.approx(-math.log(1e-12))

    @pytest.mark.parametrize("target", [2, -1, [0, 1]])
    def test_invalid_target(self, target):
        with pytest.raises(InputError):
            cross_entropy_with_l2(t([0.5, 0.5]), target)


class TestDropout:
    def test_ratio_zero_identity(self):
        x = t(np.arange(5.0))
        np.testing.assert_array_equal(dropout_apply(x, 0.0, "train", np.random.default_rng(0)).data, x.data)

    def test_eval_identity_bit_equal(self):
        x = t(np.random.default_rng(3).normal(size=100))
        assert dropout_apply(x, 0.4, "eval").data.tobytes() == x.data.tobytes()

    def test_expectation(self):
        out = dropout_apply(t(np.ones(100_000)), 0.4, "train", np.random.default_rng(0)).data
        assert abs(out.mean() - 1.0) < 0.02
        assert set(np.unique(out).round(9)) <= {0.0, round(1 / 0.6, 9)}

    def test_bad_ratio(self):
        with pytest.raises(ConfigError):
            dropout_apply(t([1.0]), 1.0, "train", np.random.default_rng(0))


class TestBackward:
    def test_identity_loss(self):
        x = t(3.0, grad=True)
        x.backward()
        assert x.grad == 1.0

    def test_square(self):
        x = t(3.0, grad=True)
        (x * x).backward()
        assert x.grad == 6.0
        y = t(3.0, grad=True)
        (y**2).backward()
        assert y.grad == 6.0

    def test_parameter_used_twice(self):
        w = t(2.0, grad=True)
        (w * 3.0 + w * 5.0).backward()
        assert w.grad == 8.0

    def test_no_graph(self):
        with pytest.raises(StateError):
            t(1.0).backward()

    def test_graph_consumed(self):
        x = t(2.0, grad=True)
        y = x * x
        y.backward()
        with pytest.raises(StateError):
            y.backward()


class TestOptimizers:
    def test_adam_first_step(self):
        w = np.array([1.0])
        state = OptimizerState("adam", 1e-4)
        adam_step([w], [np.array([0.5])], state)
        # m_hat = 0.5, v_hat = 0.25 -> step = lr * 0.5 / (0.5 + 1e-8)
        assert w[0] == pytest.approx(1.0 - 1e-4 * 0.5 / (0.5 + 1e-8), abs=1e-15)
        assert w[0] == pytest.approx(0.9999, abs=1e-9)
        assert state.step_count == 1

    def test_adam_zero_grad(self):
        w = np.array([0.3, -0.2])
        adam_step([w], [np.zeros(2)], OptimizerState("adam", 1e-4))
        np.testing.assert_array_equal(w, [0.3, -0.2])

    def test_adam_identical_params(self):
        a, b = np.array([0.7]), np.array([0.7])
        state = OptimizerState("adam", 1e-3)
        for g in (0.1, -0.3, 0.2):
            adam_step([a, b], [np.array([g]), np.array([g])], state)
        assert a[0] == b[0]

    def test_sgd_single_step(self):
        w = np.array([1.0])
        state = OptimizerState("sgd_momentum", 0.001, momentum_coefficient=0.949)
        sgd_momentum_step([w], [np.array([1.0])], state)
        assert w[0] == pytest.approx(1.0 - 0.001, abs=1e-15)

    def test_sgd_zero(self):
        w = np.array([2.0])
        sgd_momentum_step([w], [np.zeros(1)], OptimizerState("sgd_momentum", 0.001))
        assert w[0] == 2.0

    def test_sgd_two_steps(self):
        w = np.array([0.0])
        state = OptimizerState("sgd_momentum", 0.001, momentum_coefficient=0.949)
        sgd_momentum_step([w], [np.array([1.0])], state)
        first = w[0]
        sgd_momentum_step([w], [np.array([1.0])], state)
        assert first - w[0] == pytest.approx(0.001 * (1 + 0.949), abs=1e-15)
        assert state.step_count == 2

    def test_wrong_algorithm(self):
        with pytest.raises(StateError):
            adam_step([np.zeros(1)], [np.zeros(1)], OptimizerState("sgd_momentum", 0.1))

    def test_buffer_shape_mismatch(self):
        state = OptimizerState("adam", 0.1)
        adam_step([np.zeros(2)], [np.zeros(2)], state)
        with pytest.raises(StateError):
            adam_step([np.zeros(3)], [np.zeros(3)], state)

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            net = Network([L.fc(4), L.RELU, L.fc(2), L.SOFTMAX], (3,), rng)
            opt = Optimizer(net.parameters(), OptimizerState("adam", 1e-2))
            x = rng.normal(size=(8, 3)).astype(np.float32)
            y = rng.integers(0, 2, 8)
            for _ in range(10):
                opt.zero_grad()
                cross_entropy_with_l2(net(x), y, net.parameters(), 0.005).backward()
                opt.step()
            return b"".join(p.data.tobytes() for p in net.parameters())

        assert run() == run()


def _gc(loss_fn, params):
    return finite_difference_check(loss_fn, params, tolerance=1e-4)


class TestGradCheck:
    def test_dense(self):
        rng = np.random.default_rng(0)
        x, w, b = t(rng.normal(size=5)), t(rng.normal(size=(3, 5))), t(rng.normal(size=3))
        proj = rng.normal(size=3)
        report = _gc(lambda: (dense(x, w, b) * proj).sum(), {"x": x, "w": w, "b": b})
        assert report.passed, str(report)

    def test_conv(self):
        rng = np.random.default_rng(1)
        x, k, b = t(rng.normal(size=(6, 6, 2))), t(rng.normal(size=(3, 3, 2, 3))), t(rng.normal(size=3))
        proj = rng.normal(size=(6, 6, 3))
        report = _gc(lambda: (conv2d(x, k, b, padding=1) * proj).sum(), {"x": x, "k": k, "b": b})
        assert report.passed, str(report)

    def test_relu_away_from_kink(self):
        rng = np.random.default_rng(2)
        vals = rng.uniform(0.1, 1.0, 20) * rng.choice([-1, 1], 20)
        x = t(vals)
        proj = rng.normal(size=20)
        assert _gc(lambda: (relu(x) * proj).sum(), {"x": x}).passed

    def test_report_flags_wrong_gradient(self):
        x = t([1.0, 2.0])

        def bad():
            out = Tensor._from_op(np.asarray((x.data**2).sum()), (x,), lambda g: (g * x.data,), "bad")
            return out

        report = _gc(bad, {"x": x})
        assert not report.passed and "x" in report.failures


class TestNetwork:
    @pytest.mark.parametrize("size", [64, 224])
    def test_classifier_stack_shape(self, size):
        specs = []
        for width in (8, 16, 32, 64):
            specs += [L.conv(width), L.RELU, L.MAXPOOL2]
        specs += [L.GAP, L.fc(512), L.RELU, L.dropout(0.4), L.fc(2)]
        net = Network(specs, (size, size, 1), np.random.default_rng(0))
        assert net.output_shape == (2,)
        if size == 64:
            assert net(np.zeros((size, size, 1))).shape == (2,)

    def test_layerspec_validation(self):
        with pytest.raises(ConfigError):
            LayerSpec("conv2d", units=4, kernel_size=2)
        with pytest.raises(ConfigError):
            LayerSpec("dropout", ratio=1.0)
        with pytest.raises(ConfigError):
            LayerSpec("conv2d", units=4, stride=0)
        with pytest.raises(ConfigError):
            Network([L.MAXPOOL2], (5, 5, 1))

    def test_load_shape_mismatch(self):
        net = Network([L.fc(3)], (2,))
        with pytest.raises(LoadError):
            net.load_state_dict({"layer0.weight": np.zeros((2, 2)), "layer0.bias": np.zeros(3)})


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        params = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5])}
        state = OptimizerState("adam", 1e-4)
        adam_step([params["a"].copy()], [np.ones((2, 3), np.float32)], state)
        path = save_checkpoint(tmp_path / "x.ckpt", params, {"kind": "test"}, state)
        assert path.read_bytes().startswith(b"PEPIPE-CKPT-v1\n")
        ck = load_checkpoint(path)
        assert ck.meta == {"kind": "test"}
        for k in params:
            np.testing.assert_array_equal(ck.params[k], params[k])
            assert ck.params[k].dtype == params[k].dtype
        assert ck.optimizer.step_count == 1
        np.testing.assert_array_equal(ck.optimizer.first[0], state.first[0])

    def test_deterministic_bytes(self, tmp_path):
        params = {"w": np.ones((2, 2))}
        a = save_checkpoint(tmp_path / "a", params, {"x": 1, "y": 2}).read_bytes()
        b = save_checkpoint(tmp_path / "b", params, {"y": 2, "x": 1}).read_bytes()
        assert a == b

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"hello")
        with pytest.raises(LoadError):
            load_checkpoint(p)
