"""Gaussian-kernel ratio baselines: uLSIF (closed-form ridge) and KLIEP (projected ascent)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.distance import pdist
from sklearn.base import BaseEstimator
from sklearn.metrics.pairwise import euclidean_distances
from sklearn.utils.validation import check_array, check_is_fitted

from .synthdata import SampleSet, make_rng

__all__ = [
    "KernelRatioModel",
    "gaussian_kernel",
    "median_bandwidth",
    "ulsif_fit",
    "kliep_fit",
    "kernel_predict",
    "ULSIF",
    "KLIEP",
]

LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class KernelRatioModel:
    centers: np.ndarray
    sigma: float
    weights: np.ndarray
    kind: str
    converged: bool = True
    info: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def _matrix(data) -> np.ndarray:
    x = data.data if isinstance(data, SampleSet) else np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def gaussian_kernel(x, centers, sigma: float) -> np.ndarray:
    d2 = euclidean_distances(x, centers, squared=True)
    return np.exp(-d2 / (2.0 * sigma ** 2))


def median_bandwidth(xp, xq, seed: int = 0, subsample: int = 500) -> float:
    """Median pairwise distance over at most ``subsample`` pooled points."""
    pooled = np.vstack([xp, xq])
    if pooled.shape[0] > subsample:
        idx = make_rng(seed, 7).choice(pooled.shape[0], subsample, replace=False)
        pooled = pooled[idx]
    sigma = float(np.median(pdist(pooled)))
    if not sigma > 0:
        raise ValueError("median pairwise distance is zero; pass sigma explicitly")
    return sigma


def _pick_centers(xq, n_centers, seed):
    if n_centers > xq.shape[0]:
        raise ValueError(f"n_centers={n_centers} exceeds the {xq.shape[0]} numerator samples")
    idx = make_rng(seed, 3).choice(xq.shape[0], n_centers, replace=False)
    return xq[np.sort(idx)]


def _check_pair(data_p, data_q):
    xp, xq = _matrix(data_p), _matrix(data_q)
    if xp.shape[1] != xq.shape[1]:
        raise ValueError(f"P has dimension {xp.shape[1]} but Q has {xq.shape[1]}")
    if xp.shape[0] == 0 or xq.shape[0] == 0:
        raise ValueError("P and Q samples must be non-empty")
    return xp, xq


def _ulsif_solve(kp, kq, lam):
    H = kp.T @ kp / kp.shape[0]
    h = kq.mean(axis=0)
    A = H + lam * np.eye(H.shape[0])
    return cho_solve(cho_factor(A), h), H, h


def _ulsif_cv_lambda(kp, kq, seed, n_folds=5):
    rng = make_rng(seed, 5)
    fold_p = rng.permutation(kp.shape[0]) % n_folds
    fold_q = rng.permutation(kq.shape[0]) % n_folds
    scores = []
    for lam in LAMBDA_GRID:
        total = 0.0
        for f in range(n_folds):
            w, _, _ = _ulsif_solve(kp[fold_p != f], kq[fold_q != f], lam)
            rp = kp[fold_p == f] @ w
            rq = kq[fold_q == f] @ w
            total += 0.5 * np.mean(rp ** 2) - np.mean(rq)
        scores.append(total / n_folds)
    return LAMBDA_GRID[int(np.argmin(scores))], scores


def ulsif_fit(data_p, data_q, n_centers: int = 100, sigma="auto", lam="auto", seed: int = 0) -> KernelRatioModel:
    """Least-squares ratio fit ``w = (H + lam I)^-1 h`` with Gaussian basis functions on Q points."""
    xp, xq = _check_pair(data_p, data_q)
    if lam != "auto" and not float(lam) > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if sigma == "auto":
        sigma = median_bandwidth(xp, xq, seed)
    sigma = float(sigma)
    centers = _pick_centers(xq, n_centers, seed)
    kp = gaussian_kernel(xp, centers, sigma)
    kq = gaussian_kernel(xq, centers, sigma)
    info = {}
    if lam == "auto":
        lam, info["cv_scores"] = _ulsif_cv_lambda(kp, kq, seed)
    lam = float(lam)
    w, H, h = _ulsif_solve(kp, kq, lam)
    info.update(lam=lam, H=H, h=h)
    return KernelRatioModel(centers, sigma, w, "uLSIF", True, info)


def kliep_fit(data_p, data_q, n_centers: int = 100, sigma="auto", max_iters: int = 5000, step: float = 1e-3,
              seed: int = 0, tol: float = 1e-9, patience: int = 50) -> KernelRatioModel:
    """Maximize ``mean_Q log r(x)`` subject to ``w >= 0`` and ``mean_P r(x) = 1``.

    Each iteration takes a gradient step, projects back onto the constraint set
    and is accepted only if the objective improves; rejected steps halve the step
    size.  ``patience`` consecutive rejections end the fit with ``converged=False``.
    """
    xp, xq = _check_pair(data_p, data_q)
    if sigma == "auto":
        sigma = median_bandwidth(xp, xq, seed)
    sigma = float(sigma)
    centers = _pick_centers(xq, n_centers, seed)
    kq = gaussian_kernel(xq, centers, sigma)
    b = gaussian_kernel(xp, centers, sigma).mean(axis=0)
    bb = b @ b

    def project(w):
        w = w + (1.0 - b @ w) * b / bb
        w = np.maximum(w, 0.0)
        return w / (b @ w)

    def objective(w):
        with np.errstate(divide="ignore"):
            return float(np.mean(np.log(kq @ w)))

    w = project(np.ones(n_centers))
    obj = objective(w)
    history = [obj]
    rejections = 0
    converged = False
    for _ in range(max_iters):
        grad = kq.T @ (1.0 / (kq @ w)) / kq.shape[0]
        cand = project(w + step * grad)
        cand_obj = objective(cand)
        if cand_obj > obj:
            gain = cand_obj - obj
            w, obj = cand, cand_obj
            history.append(obj)
            rejections = 0
            step *= 1.2
            if gain < tol * max(1.0, abs(obj)):
                converged = True
                break
        else:
            rejections += 1
            step *= 0.5
            if rejections >= patience:
                break
    return KernelRatioModel(centers, sigma, w, "KLIEP", converged, {"objective": history})


def kernel_predict(model: KernelRatioModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1 and model.dim > 1
    x2 = np.atleast_2d(x) if single or x.ndim == 2 else x[:, None]
    if x2.shape[1] != model.dim:
        raise ValueError(f"x has dimension {x2.shape[1]}, model expects {model.dim}")
    r = gaussian_kernel(x2, model.centers, model.sigma) @ model.weights
    if model.kind == "uLSIF":
        r = np.maximum(r, 0.0)
    return float(r[0]) if single else r


class _KernelRatioEstimator(BaseEstimator):
    def _check_X(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")
        return X

    def predict(self, X):
        """Estimated ratio ``q(x)/p(x)`` per row."""
        return kernel_predict(self.model_, self._check_X(X))


class ULSIF(_KernelRatioEstimator):
    """uLSIF ratio estimator; ``sigma`` and ``lam`` accept ``"auto"``."""

    def __init__(self, n_centers=100, sigma="auto", lam="auto", random_state=0):
        self.n_centers = n_centers
        self.sigma = sigma
        self.lam = lam
        self.random_state = random_state

    def fit(self, X_p, X_q):
        X_p, X_q = check_array(X_p, dtype=np.float64), check_array(X_q, dtype=np.float64)
        self.model_ = ulsif_fit(X_p, X_q, self.n_centers, self.sigma, self.lam, self.random_state)
        self.n_features_in_ = X_p.shape[1]
        return self


class KLIEP(_KernelRatioEstimator):
    """KLIEP ratio estimator fitted by projected gradient ascent."""

    def __init__(self, n_centers=100, sigma="auto", max_iters=5000, step=1e-3, random_state=0):
        self.n_centers = n_centers
        self.sigma = sigma
        self.max_iters = max_iters
        self.step = step
        self.random_state = random_state

    def fit(self, X_p, X_q):
        X_p, X_q = check_array(X_p, dtype=np.float64), check_array(X_q, dtype=np.float64)
        self.model_ = kliep_fit(X_p, X_q, self.n_centers, self.sigma, self.max_iters, self.step,
                                self.random_state)
        self.converged_ = self.model_.converged
        self.n_features_in_ = X_p.shape[1]
        return self
