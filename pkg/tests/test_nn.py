"""Unit Tests für den nn-Kern (ParamVector, MLP, GRU, Optimierer, FD-Prüfer)."""

import numpy as np
import pytest

from src.core.errors import ConfigError, NonFiniteGradientError
from src.core.nn import (
    GruSpec,
    MlpSpec,
    ParamVector,
    adam_init,
    adam_step,
    central_differences,
    finite_diff_check,
    gru_sequence,
    gru_sequence_grad,
    gru_step,
    init_gru_params,
    init_mlp_params,
    mlp_eval,
    mlp_grad,
    mlp_jvp,
    sgd_step,
    sigmoid,
)


class TestParamVector:
    def test_segments_are_views(self):
        p = ParamVector.zeros((("a", (2, 3)), ("b", (4,))))
        assert p.size == 10
        p.segment("b")[...] = 1.0
        assert p.values[6:].tolist() == [1.0, 1.0, 1.0, 1.0]

    def test_layout_size_mismatch(self):
        with pytest.raises(ConfigError):
            ParamVector(np.zeros(5), (("a", (2, 3)),))

    def test_missing_segment(self):
        p = ParamVector.zeros((("a", (2,)),))
        with pytest.raises(ConfigError):
            p.segment("nope")

    def test_with_values_copies(self):
        p = ParamVector.zeros((("a", (3,)),))
        values = np.ones(3)
        q = p.with_values(values)
        values[0] = 5.0
        assert q.values[0] == 1.0
        assert q.layout == p.layout


class TestMlp:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.spec = MlpSpec(3, (5, 4), 2, ("tanh", "tanh", "identity"))
        self.params = init_mlp_params(self.spec, self.rng)

    def test_shapes(self):
        x = self.rng.standard_normal((7, 3))
        assert mlp_eval(self.spec, self.params, x).shape == (7, 2)
        assert mlp_eval(self.spec, self.params, x[0]).shape == (2,)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError):
            mlp_eval(self.spec, self.params, np.zeros((2, 4)))

    def test_zero_params_identity_output_is_zero(self):
        out = mlp_eval(self.spec, self.params.zeros_like(), self.rng.standard_normal((4, 3)))
        assert np.all(out == 0.0)

    def test_gradient_matches_finite_differences(self):
        x = self.rng.standard_normal((6, 3))
        up = self.rng.standard_normal((6, 2))
        grad, grad_x = mlp_grad(self.spec, self.params, x, up)

        def fn(values):
            return float(np.sum(up * mlp_eval(self.spec, self.params.with_values(values), x)))

        report = finite_diff_check(fn, self.params, grad, tolerance=1e-6)
        assert report.passed, str(report)

        def fn_x(flat):
            return float(np.sum(up * mlp_eval(self.spec, self.params, flat.reshape(6, 3))))

        numeric = central_differences(fn_x, x.ravel())
        assert grad_x.ravel() == pytest.approx(numeric, abs=1e-7)

    def test_jvp_matches_directional_difference(self):
        x = self.rng.standard_normal((5, 3))
        tangent = self.params.with_values(self.rng.standard_normal(self.params.size))
        out, d_out = mlp_jvp(self.spec, self.params, x, tangent)
        eps = 1e-6
        plus = mlp_eval(self.spec, self.params.with_values(self.params.values + eps * tangent.values), x)
        minus = mlp_eval(self.spec, self.params.with_values(self.params.values - eps * tangent.values), x)
        assert out == pytest.approx(mlp_eval(self.spec, self.params, x))
        assert d_out.ravel() == pytest.approx(((plus - minus) / (2 * eps)).ravel(), abs=1e-7)

    def test_torch_reference(self):
        torch = pytest.importorskip("torch")
        x = self.rng.standard_normal((4, 3))
        up = self.rng.standard_normal((4, 2))
        grad, _ = mlp_grad(self.spec, self.params, x, up)

        tensors = {
            name: torch.tensor(self.params.segment(name), dtype=torch.float64, requires_grad=True)
            for name, _ in self.spec.layout()
        }
        h = torch.tensor(x, dtype=torch.float64)
        for i, kind in enumerate(self.spec.activations):
            h = h @ tensors[f"W{i}"].T + tensors[f"b{i}"]
            if kind == "tanh":
                h = torch.tanh(h)
        (h * torch.tensor(up, dtype=torch.float64)).sum().backward()
        for name, _ in self.spec.layout():
            expected = tensors[name].grad.numpy()
            assert grad.segment(name).ravel() == pytest.approx(expected.ravel(), abs=1e-10)


class TestGru:
    def setup_method(self):
        self.rng = np.random.default_rng(1)
        self.spec = GruSpec(3, 4)
        self.params = init_gru_params(self.spec, self.rng)

    def test_zero_params_halves_hidden_state(self):
        spec = GruSpec(1, 1)
        params = ParamVector.zeros(spec.layout())
        # z = r = 0.5, Kandidat = tanh(0) = 0
        assert gru_step(spec, params, np.array([1.0]), np.array([0.0])) == pytest.approx([0.5])

    def test_sequence_matches_steps(self):
        inputs = self.rng.standard_normal((5, 2, 3))
        states = gru_sequence(self.spec, self.params, inputs)
        h = np.zeros((2, 4))
        for t in range(5):
            h = gru_step(self.spec, self.params, h, inputs[t])
            assert states[t] == pytest.approx(h)

    def test_empty_sequence(self):
        with pytest.raises(ValueError):
            gru_sequence(self.spec, self.params, np.zeros((0, 3)))

    def test_bptt_matches_finite_differences(self):
        inputs = self.rng.standard_normal((4, 3, 3))
        ups = self.rng.standard_normal((4, 3, 4))
        h0 = 0.3 * self.rng.standard_normal((3, 4))
        grad = gru_sequence_grad(self.spec, self.params, inputs, ups, h0)

        def fn(values):
            return float(np.sum(ups * gru_sequence(self.spec, self.params.with_values(values), inputs, h0)))

        report = finite_diff_check(fn, self.params, grad, tolerance=1e-6)
        assert report.passed, str(report)


class TestOptimizers:
    def test_sgd_exact(self):
        p = ParamVector(np.array([1.0, -2.0]), (("a", (2,)),))
        q = sgd_step(p, np.array([0.5, 1.0]), 0.1)
        assert q.values.tolist() == [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 1.0]

    def test_sgd_rejects_nan(self):
        p = ParamVector(np.zeros(2), (("a", (2,)),))
        with pytest.raises(NonFiniteGradientError):
            sgd_step(p, np.array([np.nan, 0.0]), 0.1)

    def test_adam_first_step_is_minus_lr(self):
        p = ParamVector(np.array([0.0, 0.0]), (("a", (2,)),))
        state = adam_init(2, lr=1e-3)
        state, q = adam_step(state, p, np.array([1.0, -3.0]))
        assert state.step_count == 1
        assert q.values == pytest.approx([-1e-3, 1e-3], rel=1e-6)


class TestFiniteDiff:
    def test_sigmoid_values(self):
        assert float(sigmoid(np.array(3.0))) == pytest.approx(0.952574, abs=1e-6)
        assert np.all(np.isfinite(sigmoid(np.array([-1000.0, 1000.0]))))

    def test_quadratic(self):
        report = finite_diff_check(lambda x: float(x @ x), np.array([1.0, 2.0]), np.array([2.0, 4.0]))
        assert report.passed

    def test_wrong_gradient_fails(self):
        report = finite_diff_check(lambda x: float(x @ x), np.array([1.0, 2.0]), np.array([2.0, 5.0]))
        assert not report.passed
        assert "FAIL" in str(report)


class TestHandChecked:
    def test_identity_relu_layer(self):
        spec = MlpSpec(2, (), 2, ("relu",))
        params = ParamVector.from_arrays({"W0": np.eye(2), "b0": np.zeros(2)})
        assert mlp_eval(spec, params, np.array([1.0, -2.0])).tolist() == [1.0, 0.0]

    def test_scalar_linear_gradient(self):
        spec = MlpSpec(1, (), 1, ("identity",))
        params = ParamVector.from_arrays({"W0": np.array([[0.7]]), "b0": np.zeros(1)})
        grad, grad_x = mlp_grad(spec, params, np.array([3.0]), np.array([1.0]))
        assert grad.segment("W0")[0, 0] == pytest.approx(3.0)
        assert grad_x[0] == pytest.approx(0.7)

    def test_zero_upstream(self):
        spec = MlpSpec(2, (3,), 1)
        params = init_mlp_params(spec, np.random.default_rng(0))
        grad, grad_x = mlp_grad(spec, params, np.ones(2), np.zeros(1))
        assert np.all(grad.values == 0.0)
        assert np.all(grad_x == 0.0)

    def test_gru_hidden_bound(self):
        rng = np.random.default_rng(4)
        spec = GruSpec(2, 5)
        params = init_gru_params(spec, rng)
        params = params.with_values(3.0 * rng.standard_normal(params.size))
        h = 2.0 * rng.standard_normal((50, 5))
        h_new = gru_step(spec, params, h, rng.standard_normal((50, 2)))
        assert np.all(np.abs(h_new) <= np.maximum(np.abs(h), 1.0) + 1e-12)

    def test_sgd_linearity(self):
        p = ParamVector(np.array([1.0]), (("a", (1,)),))
        assert sgd_step(p, np.array([2.0]), 0.1).values[0] == pytest.approx(0.8)
        twice = sgd_step(sgd_step(p, np.array([2.0]), 0.1), np.array([2.0]), 0.1)
        assert twice.values[0] == pytest.approx(sgd_step(p, np.array([2.0]), 0.2).values[0])
