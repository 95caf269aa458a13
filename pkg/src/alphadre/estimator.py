"""Training loop, ratio normalization, prediction and divergence estimation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .losses import (
    EXP_CLAMP,
    LossKind,
    alpha_div_loss,
    check_alpha,
    clamped_exp,
    loss_and_energy_grads,
)
from .nn import MlpModel, make_optimizer, mlp_backward, mlp_forward, mlp_init, optimizer_step
from .synthdata import SampleSet, make_rng

__all__ = [
    "TrainConfig",
    "TrainTrace",
    "RatioModel",
    "DivergenceEstimate",
    "TrainingError",
    "train",
    "normalize",
    "predict_ratio",
    "estimate_divergence",
    "validate",
    "constant_form_variance",
    "gaussian_oracle_network",
    "AlphaDivRatioEstimator",
]


class TrainingError(RuntimeError):
    """Training aborted because the loss or gradients stopped being finite.

    ``trace`` holds everything recorded up to (excluding) ``step``.
    """

    def __init__(self, message, step, trace):
        super().__init__(message)
        self.step = step
        self.trace = trace


@dataclass
class TrainConfig:
    loss: LossKind = field(default_factory=lambda: LossKind.alpha_div(0.5))
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 2500
    epochs: int = 250
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if isinstance(self.loss, str):
            self.loss = LossKind.parse(self.loss)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self) -> dict:
        return {
            "loss": str(self.loss),
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "shuffle": self.shuffle,
        }


@dataclass
class TrainTrace:
    step_losses: List[float] = field(default_factory=list)
    epoch_val_losses: List[float] = field(default_factory=list)
    clamp_events: int = 0
    epoch_seconds: List[float] = field(default_factory=list)

    def __len__(self):
        return len(self.step_losses)

    def to_csv(self) -> str:
        lines = ["step,loss"]
        lines += [f"{i},{v!r}" for i, v in enumerate(self.step_losses)]
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        # wall-clock is left out so serialized traces are reproducible
        return {
            "step_losses": list(self.step_losses),
            "epoch_val_losses": list(self.epoch_val_losses),
            "clamp_events": self.clamp_events,
        }


@dataclass(frozen=True)
class RatioModel:
    """A trained energy network plus ``mean_P exp(-T)`` over its reference sample."""

    network: MlpModel
    normalizer: float
    reference_size: int

    def __post_init__(self):
        if not (np.isfinite(self.normalizer) and self.normalizer > 0):
            raise ValueError(f"normalizer must be positive and finite, got {self.normalizer}")

    @property
    def input_dim(self) -> int:
        return self.network.input_dim

    def normalized_network(self) -> MlpModel:
        """Network whose raw ``exp(-T)`` already averages to one on the reference sample."""
        return self.network.shifted(math.log(self.normalizer))

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "normalizer": self.normalizer,
            "reference_size": self.reference_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RatioModel":
        return cls(MlpModel.from_dict(d["network"]), float(d["normalizer"]), int(d["reference_size"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "RatioModel":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class DivergenceEstimate:
    alpha: float
    d_hat: float
    sigma_sq_moment: float
    sigma_sq_paper: float
    n: int

    def to_dict(self) -> dict:
        closed = self.sigma_sq_paper if math.isfinite(self.sigma_sq_paper) else None
        return {
            "alpha": self.alpha,
            "d_hat": self.d_hat,
            "sigma_sq_moment": self.sigma_sq_moment,
            "sigma_sq_paper": closed,
            "n": self.n,
        }


def gaussian_oracle_network(mu_p, mu_q) -> MlpModel:
    """Single affine layer computing the exact energy for identity-covariance Gaussians."""
    mu_p = np.atleast_1d(np.asarray(mu_p, dtype=np.float64))
    mu_q = np.atleast_1d(np.asarray(mu_q, dtype=np.float64))
    w = -(mu_q - mu_p)[None, :]
    b = np.array([0.5 * (mu_q @ mu_q - mu_p @ mu_p)])
    return MlpModel([mu_p.shape[0], 1], [w], [b])


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, SampleSet):
        return data.data
    x = np.asarray(data, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


class _IndexStream:
    """Yields minibatch indices; refills with a fresh permutation when exhausted."""

    def __init__(self, n, rng, shuffle):
        self.n = n
        self.rng = rng
        self.shuffle = shuffle
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0

    def _refill(self):
        self.order = self.rng.permutation(self.n) if self.shuffle else np.arange(self.n)
        self.pos = 0

    def new_epoch(self):
        self._refill()

    def take(self, k):
        parts = []
        while k > 0:
            if self.pos >= self.order.size:
                self._refill()
            chunk = self.order[self.pos:self.pos + k]
            self.pos += chunk.size
            k -= chunk.size
            parts.append(chunk)
        return np.concatenate(parts)


def batch_schedule(n_p: int, n_q: int, batch_size: int, epochs: int, seed: int, shuffle: bool = True):
    """Yield ``(epoch, idx_p, idx_q)`` pairs in training order.

    An epoch is one pass over the larger set, split into ``ceil(K / batch_size)``
    steps; the smaller set keeps cycling (reshuffled on each wrap) and always
    supplies a batch of the same size as the larger one, capped at its own size.
    """
    rng = make_rng(seed, 1)
    big_is_p = n_p >= n_q
    n_big, n_small = (n_p, n_q) if big_is_p else (n_q, n_p)
    big = _IndexStream(n_big, rng, shuffle)
    small = _IndexStream(n_small, rng, shuffle)
    steps = math.ceil(n_big / batch_size)
    for epoch in range(epochs):
        big.new_epoch()
        if n_small == n_big:
            small.new_epoch()
        for _ in range(steps):
            idx_big = big.take(min(batch_size, n_big - big.pos))
            idx_small = small.take(min(idx_big.size, n_small))
            if big_is_p:
                yield epoch, idx_big, idx_small
            else:
                yield epoch, idx_small, idx_big


def _loss_grads(network, kind, xp, xq):
    t_p = mlp_forward(network, xp)
    t_q = mlp_forward(network, xq)
    lv, (gq, gp) = loss_and_energy_grads(kind, t_q, t_p)
    return lv, mlp_backward(network, xq, gq) + mlp_backward(network, xp, gp)


def train(data_p, data_q, arch: Sequence[int], config: TrainConfig,
          holdout_p=None, holdout_q=None, init: Optional[MlpModel] = None, log=None):
    """Fit an energy network ``T`` by minibatch descent and return ``(RatioModel, TrainTrace)``.

    ``holdout_p``/``holdout_q`` add a per-epoch validation loss to the trace.
    Raises :class:`TrainingError` when the loss or gradients become non-finite.
    """
    xp, xq = _as_matrix(data_p), _as_matrix(data_q)
    if xp.shape[0] == 0 or xq.shape[0] == 0:
        raise ValueError("data_p and data_q must be non-empty")
    if xp.shape[1] != xq.shape[1]:
        raise ValueError(f"P has dimension {xp.shape[1]} but Q has {xq.shape[1]}")
    if arch[0] != xp.shape[1]:
        raise ValueError(f"architecture input size {arch[0]} does not match data dimension {xp.shape[1]}")
    network = init.copy() if init is not None else mlp_init(arch, config.seed)
    opt = make_optimizer(config.optimizer, config.learning_rate, network)
    kind = config.loss
    trace = TrainTrace()
    has_val = holdout_p is not None and holdout_q is not None

    step = 0
    epoch_start = time.perf_counter()
    current_epoch = 0

    def close_epoch():
        nonlocal epoch_start
        if has_val:
            trace.epoch_val_losses.append(_eval_loss(network, kind, holdout_p, holdout_q))
        trace.epoch_seconds.append(time.perf_counter() - epoch_start)
        if log is not None:
            log(f"epoch {current_epoch + 1}/{config.epochs} loss {trace.step_losses[-1]:.6g}")
        epoch_start = time.perf_counter()

    for epoch, ip, iq in batch_schedule(xp.shape[0], xq.shape[0], config.batch_size,
                                        config.epochs, config.seed, config.shuffle):
        if epoch != current_epoch:
            close_epoch()
            current_epoch = epoch
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                lv, grads = _loss_grads(network, kind, xp[ip], xq[iq])
            except ValueError as exc:
                # inputs were checked up front, so this is a non-finite network output
                raise TrainingError(f"{exc} at step {step}", step, trace) from exc
        if not math.isfinite(lv.value):
            raise TrainingError(
                f"loss became {lv.value} at step {step} (clamp events so far {trace.clamp_events + lv.clamp_events})",
                step, trace)
        trace.step_losses.append(lv.value)
        trace.clamp_events += lv.clamp_events
        try:
            network, opt = optimizer_step(opt, network, grads)
        except FloatingPointError as exc:
            raise TrainingError(f"{exc} at step {step} (clamp events so far {trace.clamp_events})",
                                step, trace) from exc
        step += 1
    if step:
        close_epoch()
    return normalize(network, xp), trace


def _eval_loss(network, kind, xp, xq) -> float:
    t_p = mlp_forward(network, _as_matrix(xp))
    t_q = mlp_forward(network, _as_matrix(xq))
    lv, _ = loss_and_energy_grads(kind, t_q, t_p)
    return lv.value


def normalize(network: MlpModel, reference_p) -> RatioModel:
    """Attach ``mean_P exp(-T)`` computed over ``reference_p``."""
    xp = _as_matrix(reference_p)
    if xp.shape[0] == 0:
        raise ValueError("reference sample must be non-empty")
    t = mlp_forward(network, xp)
    e, n_clamped = clamped_exp(-t)
    if n_clamped == t.size:
        raise ValueError(
            f"every reference output saturates the exponent clamp (|T| > {EXP_CLAMP}); normalizer is meaningless")
    return RatioModel(network, float(np.mean(e)), int(xp.shape[0]))


def predict_ratio(model: RatioModel, x) -> np.ndarray:
    """``exp(-T(x)) / normalizer`` for a point or a batch."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1 and model.input_dim > 1
    t = mlp_forward(model.network, arr)
    e, _ = clamped_exp(-t)
    out = e / model.normalizer
    return float(out[0]) if single else out


def validate(model, holdout_p, holdout_q, alpha: float) -> float:
    """Alpha-div loss of the un-normalized network on held-out data."""
    network = model.network if isinstance(model, RatioModel) else model
    xp, xq = _as_matrix(holdout_p), _as_matrix(holdout_q)
    if xp.shape[0] == 0 or xq.shape[0] == 0:
        raise ValueError("holdout sets must be non-empty")
    return alpha_div_loss(mlp_forward(network, xq), mlp_forward(network, xp), alpha).value


def _divergence_from_energy(t_p: np.ndarray, beta: float) -> float:
    """Plug-in ``D_beta`` from P-sample energies, with the KL limits at beta in {0, 1}."""
    log_r = -t_p
    if beta == 0.0:
        r, _ = clamped_exp(log_r)
        return float(np.mean(r * log_r))
    if beta == 1.0:
        return float(-np.mean(log_r))
    e, _ = clamped_exp((1.0 - beta) * log_r)
    return float((np.mean(e) - 1.0) / (beta * (beta - 1.0)))


def constant_form_variance(alpha: float, d_2a: float, d_1m2a: float, d_a: float) -> float:
    """Asymptotic variance written as the five-constant closed form.

    ``C2`` is evaluated at ``2 alpha``, as stated.  A term whose divergence is
    exactly zero contributes nothing even if its coefficient is singular;
    otherwise a singular coefficient makes the result ``nan``.
    """
    a = alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        c1 = 2 * a * (1 - 2 * a) / a ** 2
        b = 2 * a
        c2 = np.float64(2 * b * (1 - 2 * b)) / np.float64((1 - b) ** 2)
    c3 = -1 / a ** 2 - 1 / (1 - a) ** 2
    c4 = 2 / a ** 2 + 2 / (1 - a) ** 2
    c5 = (1 / a ** 2 + 1 / (1 - a) ** 2) * (2 - 2 * a * (1 - a))
    total = c3 * d_a ** 2 + c4 * d_a + c5
    for coef, div in ((c1, d_2a), (c2, d_1m2a)):
        if div == 0.0:
            continue
        if not np.isfinite(coef):
            return float("nan")
        total += coef * div
    return float(total)


def estimate_divergence(t_q, t_p, alpha: float) -> DivergenceEstimate:
    """Plug-in ``D_alpha`` estimate ``1/(a(1-a)) - L`` with its asymptotic variance.

    ``sigma_sq_moment`` is the sum of the per-sample variances of the Q and P
    summands of the loss; ``sigma_sq_paper`` is the five-constant closed form.
    """
    alpha = check_alpha(alpha)
    lv = alpha_div_loss(t_q, t_p, alpha)
    t_q = np.asarray(t_q, dtype=np.float64).ravel()
    t_p = np.asarray(t_p, dtype=np.float64).ravel()
    d_hat = 1.0 / (alpha * (1.0 - alpha)) - lv.value
    eq, _ = clamped_exp(alpha * t_q)
    ep, _ = clamped_exp((alpha - 1.0) * t_p)
    sigma_sq = float(np.var(eq) / alpha ** 2 + np.var(ep) / (1.0 - alpha) ** 2)
    d_a = _divergence_from_energy(t_p, alpha)
    sigma_closed = constant_form_variance(
        alpha, _divergence_from_energy(t_p, 2 * alpha), _divergence_from_energy(t_p, 1 - 2 * alpha), d_a)
    return DivergenceEstimate(alpha, float(d_hat), sigma_sq, sigma_closed, int(min(t_q.size, t_p.size)))


class AlphaDivRatioEstimator(BaseEstimator):
    """Density-ratio estimator ``q/p`` trained with the alpha-divergence loss.

    Parameters
    ----------
    alpha : float, default=0.5
        Loss exponent; values in (0, 1) keep the loss bounded below.
    hidden_layers : tuple of int, default=(100, 100, 100)
        Widths of the ReLU hidden layers.
    optimizer : {"adam", "sgd"}, default="adam"
    learning_rate : float, default=1e-4
    batch_size : int, default=128
    epochs : int, default=250
    loss : str or None, default=None
        Train with another loss kind (e.g. ``"KL"``) instead of the
        alpha-divergence; the network still emits an energy ``T``.
    shuffle : bool, default=True
    random_state : int, default=0

    Attributes
    ----------
    ratio_model_ : RatioModel
    trace_ : TrainTrace
    n_features_in_ : int

    Examples
    --------
    >>> est = AlphaDivRatioEstimator(epochs=5).fit(X_p, X_q)   # doctest: +SKIP
    >>> est.predict(X_test)                                    # doctest: +SKIP
    """

    def __init__(self, alpha=0.5, hidden_layers=(100, 100, 100), optimizer="adam", learning_rate=1e-4,
                 batch_size=128, epochs=250, loss=None, shuffle=True, random_state=0):
        self.alpha = alpha
        self.hidden_layers = hidden_layers
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.loss = loss
        self.shuffle = shuffle
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        kind = LossKind.parse(self.loss) if self.loss else LossKind.alpha_div(self.alpha)
        return TrainConfig(loss=kind, optimizer=self.optimizer, learning_rate=self.learning_rate,
                           batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.random_state, shuffle=self.shuffle)

    def fit(self, X_p, X_q):
        """Fit on denominator samples ``X_p`` and numerator samples ``X_q``."""
        X_p = check_array(X_p, dtype=np.float64)
        X_q = check_array(X_q, dtype=np.float64)
        if X_p.shape[1] != X_q.shape[1]:
            raise ValueError(f"X_p has {X_p.shape[1]} features but X_q has {X_q.shape[1]}")
        arch = [X_p.shape[1], *self.hidden_layers, 1]
        self.ratio_model_, self.trace_ = train(X_p, X_q, arch, self._config())
        self.n_features_in_ = X_p.shape[1]
        return self

    def _check_X(self, X):
        check_is_fitted(self, "ratio_model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")
        return X

    def predict(self, X):
        """Estimated ratio ``q(x)/p(x)`` per row."""
        X = self._check_X(X)
        return predict_ratio(self.ratio_model_, X)

    def energy(self, X):
        """Raw network output ``T(x)`` (un-normalized)."""
        X = self._check_X(X)
        return mlp_forward(self.ratio_model_.network, X)

    def score(self, X_p, X_q):
        """Negative held-out alpha-div loss (higher is better)."""
        X_p, X_q = self._check_X(X_p), self._check_X(X_q)
        return -validate(self.ratio_model_, X_p, X_q, self._config().loss.alpha or self.alpha)
