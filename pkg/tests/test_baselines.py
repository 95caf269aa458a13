import numpy as np
import pytest
from sklearn.base import clone

from alphadre.baselines import (
    KLIEP,
    ULSIF,
    KernelRatioModel,
    gaussian_kernel,
    kernel_predict,
    kliep_fit,
    median_bandwidth,
    ulsif_fit,
)
from alphadre.synthdata import GaussianSpec, sample_mvn


@pytest.fixture(scope="module")
def same_dist():
    spec = GaussianSpec.identity(np.zeros(2))
    return (sample_mvn(spec, 1000, 1, 0).data, sample_mvn(spec, 1000, 1, 1).data,
            sample_mvn(spec, 500, 1, 2).data)


def test_kernel_at_center_is_one():
    c = np.array([[0.3, -0.2]])
    assert gaussian_kernel(c, c, 0.7)[0, 0] == pytest.approx(1.0)


def test_kernel_matches_formula():
    rng = np.random.default_rng(0)
    x, c = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    d2 = ((x[:, None, :] - c[None, :, :]) ** 2).sum(-1)
    assert np.allclose(gaussian_kernel(x, c, 1.3), np.exp(-d2 / (2 * 1.3 ** 2)))


def test_median_bandwidth_small_sample():
    xp = np.array([[0.0], [1.0]])
    xq = np.array([[3.0]])
    # pairwise distances 1, 3, 2
    assert median_bandwidth(xp, xq) == 2.0
    with pytest.raises(ValueError):
        median_bandwidth(np.zeros((3, 1)), np.zeros((2, 1)))


class TestUlsif:
    def test_one_by_one_system(self):
        c = np.array([[0.5]])
        m = ulsif_fit(c, c, n_centers=1, sigma=1.0, lam=0.25)
        assert m.weights[0] == pytest.approx(1 / 1.25)

    def test_huge_lambda_gives_zero(self, same_dist):
        xp, xq, xt = same_dist
        m = ulsif_fit(xp, xq, sigma=1.0, lam=1e6)
        assert np.all(np.abs(kernel_predict(m, xt)) < 1e-4)

    def test_p_equals_q(self, same_dist):
        xp, xq, xt = same_dist
        m = ulsif_fit(xp, xq)
        assert np.mean(np.abs(kernel_predict(m, xt) - 1)) < 0.2
        assert m.info["lam"] in (1e-3, 1e-2, 1e-1, 1.0)
        assert len(m.info["cv_scores"]) == 4

    def test_solution_satisfies_normal_equations(self, same_dist):
        xp, xq, _ = same_dist
        m = ulsif_fit(xp, xq, sigma=1.0, lam=0.1)
        H, h = m.info["H"], m.info["h"]
        assert np.allclose((H + 0.1 * np.eye(H.shape[0])) @ m.weights, h)

    @pytest.mark.parametrize("lam", [0.0, -1.0])
    def test_nonpositive_lambda(self, same_dist, lam):
        with pytest.raises(ValueError):
            ulsif_fit(same_dist[0], same_dist[1], lam=lam)

    def test_too_many_centers(self):
        with pytest.raises(ValueError):
            ulsif_fit(np.zeros((5, 1)), np.ones((3, 1)), n_centers=10, sigma=1.0)

    def test_deterministic(self, same_dist):
        xp, xq, _ = same_dist
        a, b = ulsif_fit(xp, xq, seed=3), ulsif_fit(xp, xq, seed=3)
        assert np.array_equal(a.weights, b.weights)


class TestKliep:
    def test_p_equals_q_and_feasible(self, same_dist):
        xp, xq, xt = same_dist
        m = kliep_fit(xp, xq)
        assert np.mean(np.abs(kernel_predict(m, xt) - 1)) < 0.2
        assert np.all(m.weights >= 0)
        assert np.mean(kernel_predict(m, xp)) == pytest.approx(1.0, abs=1e-8)

    def test_objective_never_decreases(self):
        spec_p, spec_q = GaussianSpec.identity(np.zeros(2)), GaussianSpec.identity([1.0, 0.0])
        xp, xq = sample_mvn(spec_p, 300, 2, 0).data, sample_mvn(spec_q, 300, 2, 1).data
        m = kliep_fit(xp, xq, n_centers=50, max_iters=300)
        assert np.all(np.diff(m.info["objective"]) > 0)

    def test_stalls_flag_not_converged(self, same_dist):
        xp, xq, _ = same_dist
        # a step this large is rejected every time, so patience runs out
        m = kliep_fit(xp, xq, step=1e12, patience=5, max_iters=100)
        assert m.converged is False
        assert np.mean(kernel_predict(m, xp)) == pytest.approx(1.0, abs=1e-8)


class TestPredict:
    def test_zero_weights(self):
        m = KernelRatioModel(np.zeros((2, 2)), 1.0, np.zeros(2), "KLIEP")
        assert np.all(kernel_predict(m, np.ones((3, 2))) == 0)

    def test_single_center(self):
        c = np.array([[1.0, 2.0]])
        m = KernelRatioModel(c, 0.5, np.ones(1), "KLIEP")
        assert kernel_predict(m, c[0]) == pytest.approx(1.0)
        assert kernel_predict(m, c[0] + 100.0) == pytest.approx(0.0, abs=1e-300)

    def test_dimension_mismatch(self):
        m = KernelRatioModel(np.zeros((2, 2)), 1.0, np.ones(2), "uLSIF")
        with pytest.raises(ValueError):
            kernel_predict(m, np.ones((3, 3)))


@pytest.mark.parametrize("cls", [ULSIF, KLIEP])
def test_sklearn_wrappers(cls, same_dist):
    xp, xq, xt = same_dist
    est = clone(cls(n_centers=50)).fit(xp, xq)
    r = est.predict(xt)
    assert r.shape == (xt.shape[0],)
    assert est.get_params()["n_centers"] == 50
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 3)))
