import numpy as np
import pytest
import torch
from pydantic import ValidationError

from conftest import affine_field, ot_field, quadratic_field
from errors import CapabilityError, ConfigError, ContractError, NumericError
from field import (
    MLP,
    CotangentWeights,
    FieldParams,
    check_spec,
    eval_batch,
    grad_inputs,
    grad_params,
    init_params,
    param_count,
)
from models import FieldSpec


class TestFieldSpec:
    def test_param_count_is_layer_arithmetic(self):
        spec = FieldSpec(input_dim=2, hidden_widths=[64, 64])
        assert param_count(spec) == 3 * 64 + 64 + 64 * 64 + 64 + 64 + 1

    def test_sinusoidal_width(self):
        spec = FieldSpec(input_dim=3, time_embedding="sinusoidal", frequencies=3, use_indicator=True)
        assert spec.time_width == 7
        assert spec.in_width == 3 + 7 + 1

    def test_relu_rejected(self):
        with pytest.raises(ValidationError):
            FieldSpec(input_dim=2, activation="relu")

    def test_empty_hidden_rejected(self):
        with pytest.raises(ValidationError):
            FieldSpec(input_dim=2, hidden_widths=[])

    def test_unvalidated_spec_is_a_config_error(self):
        spec = FieldSpec.model_construct(input_dim=0, hidden_widths=[4], activation="tanh",
                                         use_indicator=False, time_embedding="raw", frequencies=4)
        with pytest.raises(ConfigError):
            check_spec(spec)

    def test_unknown_activation_is_a_capability_error(self):
        with pytest.raises(CapabilityError):
            MLP(3, [4], 1, "relu")


class TestInit:
    def test_deterministic_with_zero_biases(self):
        spec = FieldSpec(input_dim=2, hidden_widths=[5, 4])
        a = init_params(spec, 7)
        b = init_params(spec, 7)
        assert torch.equal(a.theta, b.theta)
        layers = MLP(spec.in_width, spec.hidden_widths, 1, spec.activation).unpack(a.theta)
        for _, bias in layers:
            assert torch.all(bias == 0)

    def test_different_seeds_differ(self):
        spec = FieldSpec(input_dim=2, hidden_widths=[5])
        assert not torch.equal(init_params(spec, 1).theta, init_params(spec, 2).theta)

    def test_wrong_length_rejected(self):
        spec = FieldSpec(input_dim=2, hidden_widths=[5])
        with pytest.raises(ContractError):
            FieldParams(theta=torch.zeros(3, dtype=torch.float64), spec=spec)

    def test_non_finite_rejected(self):
        spec = FieldSpec(input_dim=1, hidden_widths=[1])
        theta = torch.zeros(param_count(spec), dtype=torch.float64)
        theta[0] = float("nan")
        with pytest.raises(NumericError):
            FieldParams(theta=theta, spec=spec)


class TestEvalBatch:
    def test_linear_field(self):
        params = affine_field([1.5, -2.0])
        x = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, -1.0]])
        fe = eval_batch(params, [0.1, 0.5, 0.9], x)
        np.testing.assert_allclose(fe.value.numpy(), x @ [1.5, -2.0], atol=1e-14)
        np.testing.assert_allclose(fe.grad_x.numpy(), np.tile([1.5, -2.0], (3, 1)), atol=1e-14)
        np.testing.assert_allclose(fe.dt.numpy(), 0.0, atol=1e-14)

    def test_ot_field_time_derivative(self):
        fe = eval_batch(ot_field([3.0, 0.0]), [0.0, 0.4, 1.0], np.zeros((3, 2)))
        np.testing.assert_allclose(fe.dt.numpy(), -4.5, atol=1e-14)

    def test_quadratic_laplacian(self):
        params = quadratic_field(3)
        x = np.random.default_rng(0).normal(size=(5, 3))
        fe = eval_batch(params, np.full(5, 0.3), x, laplacian=True)
        np.testing.assert_allclose(fe.grad_x.numpy(), x, atol=1e-12)
        np.testing.assert_allclose(fe.laplacian.numpy(), 3.0, atol=1e-12)

    def test_laplacian_only_on_request(self):
        fe = eval_batch(quadratic_field(2), [0.5], [[1.0, 2.0]])
        assert fe.laplacian is None

    def test_rows_are_per_sample(self):
        fe = eval_batch(affine_field([1.0, 0.0]), [0.2, 0.8], [[1.0, 0.0], [2.0, 0.0]])
        rows = list(fe.rows())
        assert len(rows) == 2
        assert float(rows[1].value) == pytest.approx(2.0)

    def test_empty_batch(self):
        fe = eval_batch(affine_field([1.0, 0.0]), np.zeros(0), np.zeros((0, 2)))
        assert len(fe) == 0

    @pytest.mark.parametrize("t, x", [
        ([0.5], [[1.0, 2.0, 3.0]]),
        ([0.5, 0.5], [[1.0, 2.0]]),
        ([1.5], [[1.0, 2.0]]),
    ])
    def test_contract_violations(self, t, x):
        with pytest.raises(ContractError):
            eval_batch(affine_field([1.0, 0.0]), t, x)

    def test_non_finite_input(self):
        with pytest.raises(NumericError):
            eval_batch(affine_field([1.0, 0.0]), [0.5], [[np.inf, 0.0]])

    def test_indicator_is_an_input(self):
        spec = FieldSpec(input_dim=1, hidden_widths=[1], activation="identity", use_indicator=True)
        params = FieldParams.from_layers(spec, [([[0.0, 0.0, 1.0]], [0.0]), ([[1.0]], [0.0])])
        fe = eval_batch(params, [0.2, 0.7], [[0.0], [0.0]])
        np.testing.assert_allclose(fe.value.numpy(), [1.0, 0.0])
        # k is piecewise constant, so it does not enter dt
        np.testing.assert_allclose(fe.dt.numpy(), 0.0)


class TestGradients:
    def test_grad_params_of_value_on_linear_field(self):
        params = affine_field([1.0, 2.0])
        x = np.array([[1.0, -1.0], [0.5, 2.0]])
        g = grad_params(params, [0.25, 0.75], x, None, CotangentWeights(value=np.ones(2)))
        # theta = [w0, w1, w_t, b1, v, b2] with s = v * (w.x + w_t t + b1) + b2
        np.testing.assert_allclose(g[:3], [1.5, 1.0, 1.0], atol=1e-12)
        assert g[3] == pytest.approx(2.0)
        assert g[4] == pytest.approx(float((x @ [1.0, 2.0]).sum()))
        assert g[5] == pytest.approx(2.0)

    def test_grad_params_shape_check(self):
        with pytest.raises(ContractError):
            grad_params(affine_field([1.0, 2.0]), [0.5], [[0.0, 0.0]], None,
                        CotangentWeights(grad_x=np.ones(3)))

    def test_grad_inputs_of_kinetic_term(self):
        params = quadratic_field(2)
        x = np.array([[1.0, 2.0], [-1.0, 0.5]])
        g = grad_inputs(params, [0.5, 0.5], x, None, lambda fe, x, t: 0.5 * (fe.grad_x**2).sum(dim=1))
        # 1/2 |grad s|^2 = 1/2 |x|^2
        np.testing.assert_allclose(g, x, atol=1e-12)

    def test_grad_inputs_selector_shape(self):
        with pytest.raises(ContractError):
            grad_inputs(quadratic_field(2), [0.5], [[1.0, 1.0]], None, lambda fe, x, t: fe.grad_x)

    def test_grad_params_is_linear_in_the_weights(self, rng):
        spec = FieldSpec(input_dim=2, hidden_widths=[6, 5])
        params = init_params(spec, 3)
        n = 7
        t = rng.uniform(0, 1, size=n)
        x = rng.normal(size=(n, 2))

        def weights():
            return {"value": rng.normal(size=n), "grad_x": rng.normal(size=(n, 2)),
                    "dt": rng.normal(size=n), "laplacian": rng.normal(size=n)}

        w1, w2 = weights(), weights()
        a, b = 0.7, -2.3
        combined = CotangentWeights(**{name: a * w1[name] + b * w2[name] for name in w1})
        g1 = grad_params(params, t, x, None, CotangentWeights(**w1))
        g2 = grad_params(params, t, x, None, CotangentWeights(**w2))
        np.testing.assert_allclose(grad_params(params, t, x, None, combined), a * g1 + b * g2,
                                   rtol=1e-10, atol=1e-12)

    def test_grad_params_zero_weights(self, rng):
        params = init_params(FieldSpec(input_dim=2, hidden_widths=[6]), 0)
        x = rng.normal(size=(4, 2))
        g = grad_params(params, [0.1, 0.4, 0.6, 0.9], x, None,
                        CotangentWeights(value=np.zeros(4), grad_x=np.zeros((4, 2)), dt=np.zeros(4)))
        assert g.shape == (param_count(params.spec),)
        assert np.all(g == 0.0)
