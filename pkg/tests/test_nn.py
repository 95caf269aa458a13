import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from alphadre.nn import (
    MlpModel,
    ParamGrads,
    make_optimizer,
    mlp_backward,
    mlp_forward,
    mlp_init,
    optimizer_step,
)


def _hand_model():
    return MlpModel([1, 2, 1], [np.array([[1.0], [-1.0]]), np.array([[1.0, 1.0]])], [np.zeros(2), np.zeros(1)])


def numeric_grad(model, x, upstream, h=1e-5):
    theta = model.flat()
    out = np.empty_like(theta)
    for k in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        fp = upstream @ mlp_forward(model.with_flat(tp), x)
        fm = upstream @ mlp_forward(model.with_flat(tm), x)
        out[k] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestInit:
    def test_four_hidden_layers_of_100(self):
        m = mlp_init([5, 100, 100, 100, 100, 1], 42)
        assert [w.shape for w in m.weights] == [(100, 5), (100, 100), (100, 100), (100, 100), (1, 100)]
        assert m.n_params == 5 * 100 + 100 + 3 * (100 * 100 + 100) + 100 + 1

    def test_single_affine(self):
        m = mlp_init([1, 1], 0)
        assert m.biases[0][0] == 0.0
        assert abs(m.weights[0][0, 0]) <= np.sqrt(6.0)

    def test_deterministic(self):
        a, b = mlp_init([3, 7, 1], 5), mlp_init([3, 7, 1], 5)
        assert np.array_equal(a.flat(), b.flat())
        assert not np.array_equal(a.flat(), mlp_init([3, 7, 1], 6).flat())

    def test_he_uniform_bounds(self):
        m = mlp_init([50, 200, 1], 1)
        bound = np.sqrt(6.0 / 50)
        assert np.abs(m.weights[0]).max() <= bound
        # uniform on [-b, b] has variance b^2 / 3 = 2 / fan_in
        assert m.weights[0].var() == pytest.approx(2.0 / 50, rel=0.05)

    @pytest.mark.parametrize("sizes", [[3], [3, 0, 1], [3, 4, 2], []])
    def test_bad_sizes(self, sizes):
        with pytest.raises(ValueError):
            mlp_init(sizes, 0)


class TestForward:
    def test_zero_map(self):
        m = mlp_init([3, 4, 1], 0)
        m = m.with_flat(np.zeros(m.n_params))
        assert np.array_equal(mlp_forward(m, np.ones((5, 3))), np.zeros(5))

    def test_hand_computed(self):
        m = _hand_model()
        assert mlp_forward(m, [[3.0]])[0] == 3.0
        assert mlp_forward(m, [[-3.0]])[0] == 3.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mlp_forward(mlp_init([3, 4, 1], 0), np.ones((2, 2)))

    def test_shift_adds_constant(self):
        m = mlp_init([2, 5, 1], 0)
        x = np.random.default_rng(0).normal(size=(10, 2))
        assert np.allclose(mlp_forward(m.shifted(2.5), x), mlp_forward(m, x) + 2.5)

    def test_json_round_trip(self):
        m = mlp_init([2, 5, 3, 1], 4)
        back = MlpModel.from_json(m.to_json())
        assert np.array_equal(back.flat(), m.flat())
        assert back.to_json() == m.to_json()


class TestBackward:
    def test_zero_upstream(self):
        m = mlp_init([2, 5, 1], 0)
        g = mlp_backward(m, np.ones((4, 2)), np.zeros(4))
        assert g.norm() == 0.0

    def test_affine_hand_gradient(self):
        m = MlpModel([1, 1], [np.array([[0.7]])], [np.array([0.2])])
        g = mlp_backward(m, [[1.5]], [1.0])
        assert g.weights[0][0, 0] == 1.5
        assert g.biases[0][0] == 1.0

    def test_relu_kink_subgradient_is_zero(self):
        m = MlpModel([1, 1, 1], [np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)])
        g = mlp_backward(m, [[0.0]], [1.0])
        assert g.weights[0][0, 0] == 0.0 and g.biases[0][0] == 0.0

    @settings(max_examples=25, deadline=None)
    @given(
        st.lists(st.integers(1, 6), min_size=0, max_size=3),
        st.integers(1, 4),
        st.integers(1, 8),
        st.integers(0, 10_000),
    )
    def test_matches_finite_differences(self, hidden, d, n, seed):
        rng = np.random.default_rng(seed)
        m = mlp_init([d, *hidden, 1], seed)
        # nonzero biases so no unit sits exactly on the ReLU kink
        m = m.with_flat(m.flat() + 0.1 * rng.normal(size=m.n_params))
        x = rng.normal(size=(n, d))
        up = rng.normal(size=n)
        analytic = mlp_backward(m, x, up).flat()
        assert rel_err(analytic, numeric_grad(m, x, up)) < 1e-5

    def test_upstream_length_checked(self):
        with pytest.raises(ValueError):
            mlp_backward(mlp_init([2, 1], 0), np.ones((3, 2)), np.ones(2))


def _scalar_model(theta):
    return MlpModel([1, 1], [np.array([[theta]])], [np.array([0.0])])


def _grad(g, gb=0.0):
    return ParamGrads([np.array([[g]])], [np.array([gb])])


class TestOptimizer:
    def test_sgd_step(self):
        opt = make_optimizer("sgd", 0.1, _scalar_model(1.0))
        new, _ = optimizer_step(opt, _scalar_model(1.0), _grad(2.0))
        assert new.weights[0][0, 0] == pytest.approx(0.8, abs=1e-15)

    @pytest.mark.parametrize("kind", ["sgd", "adam"])
    def test_zero_gradient_fixed_point(self, kind):
        m = mlp_init([2, 3, 1], 0)
        opt = make_optimizer(kind, 0.1, m)
        zero = ParamGrads([np.zeros_like(w) for w in m.weights], [np.zeros_like(b) for b in m.biases])
        new, _ = optimizer_step(opt, m, zero)
        assert np.array_equal(new.flat(), m.flat())

    def test_adam_first_step(self):
        m = _scalar_model(0.0)
        opt = make_optimizer("adam", 0.001, m)
        new, st_ = optimizer_step(opt, m, _grad(10.0))
        assert new.weights[0][0, 0] == pytest.approx(-0.001 * 10 / (10 + 1e-8), rel=1e-12)
        assert st_.step_count == 1

    def test_adam_matches_reference_recursion(self):
        rng = np.random.default_rng(3)
        theta, m1, v1 = 0.5, 0.0, 0.0
        model = _scalar_model(theta)
        opt = make_optimizer("adam", 0.01, model)
        for t in range(1, 8):
            g = rng.normal()
            model, opt = optimizer_step(opt, model, _grad(g))
            m1 = 0.9 * m1 + 0.1 * g
            v1 = 0.999 * v1 + 0.001 * g * g
            theta -= 0.01 * (m1 / (1 - 0.9 ** t)) / (np.sqrt(v1 / (1 - 0.999 ** t)) + 1e-8)
        assert model.weights[0][0, 0] == pytest.approx(theta, rel=1e-12)

    def test_non_finite_gradient_names_layer(self):
        m = mlp_init([2, 3, 1], 0)
        g = ParamGrads([np.zeros_like(w) for w in m.weights], [np.zeros_like(b) for b in m.biases])
        g.weights[1][0, 0] = np.nan
        with pytest.raises(FloatingPointError, match="layer 1"):
            optimizer_step(make_optimizer("adam", 0.1, m), m, g)

    def test_shape_mismatch(self):
        m = mlp_init([2, 3, 1], 0)
        with pytest.raises(ValueError):
            optimizer_step(make_optimizer("sgd", 0.1, m), m, _grad(1.0))

    def test_unknown_optimizer(self):
        with pytest.raises(ValueError):
            make_optimizer("rmsprop", 0.1, _scalar_model(0.0))
