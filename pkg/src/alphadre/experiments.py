"""Stability sweep over alpha, MSE benchmark against kernel baselines, and the L1 scaling probe.

Each trial is keyed by ``(experiment, trial_index)`` and draws every random
number from streams derived from ``(base_seed, key)``, so trials can run in any
order or in parallel and aggregates come out bit-identical.
"""

from __future__ import annotations

import copy
import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .baselines import kernel_predict, kliep_fit, ulsif_fit
from .estimator import TrainConfig, TrainingError, gaussian_oracle_network, normalize, predict_ratio, train
from .losses import LossKind, check_alpha
from .synthdata import GaussianSpec, sample_mvn, true_ratio_gaussian

__all__ = [
    "PROFILES",
    "DIVERGENCE_THRESHOLD",
    "KLIEP_EXCLUDE_MSE",
    "StabilityResult",
    "MseBenchmarkRow",
    "ScalingResult",
    "trial_seed",
    "run_stability",
    "run_mse_benchmark",
    "run_scaling",
    "stability_csv",
    "mse_csv",
    "scaling_csv",
]

DIVERGENCE_THRESHOLD = -1e3
KLIEP_EXCLUDE_MSE = 1e3

_EXPERIMENT_IDS = {"stability": 1, "mse": 2, "scaling": 3}

PROFILES = {
    "stability": {
        "desk": {
            "alphas": [-1.0, 0.2, 0.5, 0.8, 2.0],
            "n_trials": 20,
            "dim": 5,
            "rho": 0.8,
            "n_samples": 1000,
            "hidden": [100, 100, 100, 100],
            "optimizer": "adam",
            "learning_rate": 1e-3,
            "batch_size": 500,
            "epochs": 250,
        },
        "full": {
            "alphas": [-3.0, -2.0, -1.0, 0.2, 0.5, 0.8, 2.0, 3.0, 4.0],
            "n_trials": 100,
            "dim": 5,
            "rho": 0.8,
            "n_samples": 5000,
            "hidden": [100, 100, 100, 100],
            "optimizer": "adam",
            "learning_rate": 1e-3,
            "batch_size": 2500,
            "epochs": 250,
        },
    },
    "mse": {
        "desk": {
            "dims": [10, 30],
            "n_trials": 20,
            "n_train": 1000,
            "n_test": 1000,
            "alpha": 0.5,
            "hidden": [100, 100, 100],
            "optimizer": "sgd",
            "learning_rate": 1e-4,
            "batch_size": 128,
            "epochs": {"default": 250, "100": 300},
            "n_centers": 100,
            "kliep_max_iters": 5000,
        },
        "full": {
            "dims": [10, 20, 30, 50, 100],
            "n_trials": 100,
            "n_train": 1000,
            "n_test": 1000,
            "alpha": 0.5,
            "hidden": [100, 100, 100],
            "optimizer": "sgd",
            "learning_rate": 1e-4,
            "batch_size": 128,
            "epochs": {"default": 250, "100": 300},
            "n_centers": 100,
            "kliep_max_iters": 5000,
        },
    },
    "scaling": {
        "desk": {
            "dim": 2,
            "sample_sizes": [250, 1000, 4000],
            "n_trials": 20,
            "n_eval": 10000,
            "variant": "trained",
            "alpha": 0.5,
            "hidden": [100, 100, 100],
            "optimizer": "sgd",
            "learning_rate": 1e-4,
            "batch_size": 128,
            "epochs": 250,
        },
        "full": {
            "dim": 2,
            "sample_sizes": [250, 500, 1000, 2000, 4000],
            "n_trials": 100,
            "n_eval": 10000,
            "variant": "trained",
            "alpha": 0.5,
            "hidden": [100, 100, 100],
            "optimizer": "sgd",
            "learning_rate": 1e-4,
            "batch_size": 128,
            "epochs": 250,
        },
    },
}


def profile_defaults(experiment: str, profile: str = "desk") -> dict:
    return copy.deepcopy(PROFILES[experiment][profile])


def trial_seed(base_seed: int, experiment: str, *key: int) -> int:
    """A 32-bit seed determined only by ``(base_seed, experiment, key)``."""
    ss = np.random.SeedSequence([int(base_seed), _EXPERIMENT_IDS[experiment], *[int(k) for k in key]])
    return int(ss.generate_state(1)[0])


def _fsum_mean(values) -> float:
    vals = sorted(float(v) for v in values)
    return math.fsum(vals) / len(vals) if vals else float("nan")


def _fsum_std(values) -> float:
    vals = sorted(float(v) for v in values)
    if len(vals) < 2:
        return 0.0
    mu = math.fsum(vals) / len(vals)
    return math.sqrt(math.fsum(sorted((v - mu) ** 2 for v in vals)) / (len(vals) - 1))


def _run_tasks(fn: Callable, tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


# --- stability ---------------------------------------------------------------

QUANTILES = (0.05, 0.45, 0.50, 0.55, 0.95)


@dataclass
class StabilityResult:
    alpha: float
    quantiles: np.ndarray  # shape (steps, 5): q05, q45, q50, q55, q95
    diverged_fraction: float
    ever_diverged_fraction: float
    final_losses: List[float]
    loss_min: float
    n_trials: int
    n_aborted: int

    @property
    def n_steps(self) -> int:
        return self.quantiles.shape[0]


def _stability_trial(task):
    alpha, trial, base_seed, cfg = task
    spec = GaussianSpec.equicorrelated(cfg["dim"], cfg["rho"])
    data_seed = trial_seed(base_seed, "stability", trial)
    xp = sample_mvn(spec, cfg["n_samples"], data_seed, 0, "P")
    xq = sample_mvn(spec, cfg["n_samples"], data_seed, 1, "Q")
    config = TrainConfig(loss=LossKind.alpha_div(alpha), optimizer=cfg["optimizer"],
                         learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                         epochs=cfg["epochs"], seed=trial_seed(base_seed, "stability", trial, 1))
    arch = [cfg["dim"], *cfg["hidden"], 1]
    try:
        _, trace = train(xp, xq, arch, config)
        return trace.step_losses, False
    except TrainingError as exc:
        return exc.trace.step_losses, True


def run_stability(alphas: Sequence[float], n_trials: int, base_seed: int = 0, config: Optional[dict] = None,
                  jobs: int = 1) -> List[StabilityResult]:
    """Train ``n_trials`` networks per alpha on P = Q data and summarize the loss traces.

    A trial counts as diverged when its final loss is below ``DIVERGENCE_THRESHOLD``;
    ``ever_diverged_fraction`` uses the lowest loss seen at any step instead.
    Trials aborted on non-finite gradients keep their last finite loss for the
    remaining steps.
    """
    cfg = profile_defaults("stability")
    cfg.update(config or {})
    alphas = [check_alpha(a) for a in alphas]
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    tasks = [(a, t, base_seed, cfg) for a in alphas for t in range(n_trials)]
    outputs = _run_tasks(_stability_trial, tasks, jobs)
    n_steps = cfg["epochs"] * math.ceil(cfg["n_samples"] / cfg["batch_size"])
    results = []
    for i, alpha in enumerate(alphas):
        chunk = outputs[i * n_trials:(i + 1) * n_trials]
        traces = np.empty((n_trials, n_steps))
        aborted = 0
        for j, (losses, was_aborted) in enumerate(chunk):
            aborted += was_aborted
            row = np.asarray(losses, dtype=np.float64)
            if row.size < n_steps:
                fill = row[-1] if row.size else np.nan
                row = np.concatenate([row, np.full(n_steps - row.size, fill)])
            traces[j] = row
        finals = traces[:, -1] if n_steps else np.full(n_trials, np.nan)
        mins = traces.min(axis=1) if n_steps else np.full(n_trials, np.nan)
        q = np.quantile(traces, QUANTILES, axis=0).T if n_steps else np.empty((0, len(QUANTILES)))
        results.append(StabilityResult(
            alpha=alpha,
            quantiles=q,
            diverged_fraction=float(np.count_nonzero(finals < DIVERGENCE_THRESHOLD)) / n_trials,
            ever_diverged_fraction=float(np.count_nonzero(mins < DIVERGENCE_THRESHOLD)) / n_trials,
            final_losses=[float(v) for v in finals],
            loss_min=float(np.min(mins)),
            n_trials=n_trials,
            n_aborted=aborted,
        ))
    return results


# --- MSE benchmark -----------------------------------------------------------

@dataclass
class MseBenchmarkRow:
    method: str
    dim: int
    mean_mse: float
    std_mse: float
    n_trials: int
    n_excluded: int
    per_trial: List[float] = field(default_factory=list, repr=False)
    failed_trials: List[int] = field(default_factory=list)


def _epochs_for_dim(epochs, dim: int) -> int:
    if isinstance(epochs, dict):
        return int(epochs.get(str(dim), epochs["default"]))
    return int(epochs)


def _mse_pair(dim):
    mu_p = np.zeros(dim)
    mu_q = np.zeros(dim)
    mu_q[0] = 1.0
    return mu_p, mu_q


def _mse_trial(task):
    dim, trial, base_seed, cfg = task
    mu_p, mu_q = _mse_pair(dim)
    seed = trial_seed(base_seed, "mse", dim, trial)
    xp = sample_mvn(GaussianSpec.identity(mu_p), cfg["n_train"], seed, 0, "P").data
    xq = sample_mvn(GaussianSpec.identity(mu_q), cfg["n_train"], seed, 1, "Q").data
    xt = sample_mvn(GaussianSpec.identity(mu_p), cfg["n_test"], seed, 2, "P").data
    r_true = true_ratio_gaussian(mu_p, mu_q, xt)
    out = {}
    config = TrainConfig(loss=LossKind.alpha_div(cfg["alpha"]), optimizer=cfg["optimizer"],
                         learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                         epochs=_epochs_for_dim(cfg["epochs"], dim), seed=trial_seed(base_seed, "mse", dim, trial, 1))
    try:
        model, _ = train(xp, xq, [dim, *cfg["hidden"], 1], config)
        out["AlphaDiv"] = float(np.mean((predict_ratio(model, xt) - r_true) ** 2))
    except TrainingError:
        out["AlphaDiv"] = None
    u = ulsif_fit(xp, xq, n_centers=cfg["n_centers"], seed=seed)
    out["uLSIF"] = float(np.mean((kernel_predict(u, xt) - r_true) ** 2))
    k = kliep_fit(xp, xq, n_centers=cfg["n_centers"], max_iters=cfg["kliep_max_iters"], seed=seed)
    out["KLIEP"] = float(np.mean((kernel_predict(k, xt) - r_true) ** 2))
    return out


def run_mse_benchmark(dims: Sequence[int], n_trials: int, base_seed: int = 0, config: Optional[dict] = None,
                      jobs: int = 1) -> List[MseBenchmarkRow]:
    """Mean squared error of each method's ratio estimate on fresh P test points.

    KLIEP trials with MSE above ``KLIEP_EXCLUDE_MSE`` are dropped from the mean
    and counted in ``n_excluded``; trials whose training aborted are dropped for
    any method and listed in ``failed_trials``.
    """
    cfg = profile_defaults("mse")
    cfg.update(config or {})
    tasks = [(int(d), t, base_seed, cfg) for d in dims for t in range(n_trials)]
    outputs = _run_tasks(_mse_trial, tasks, jobs)
    rows = []
    for i, dim in enumerate(dims):
        chunk = outputs[i * n_trials:(i + 1) * n_trials]
        for method in ("KLIEP", "uLSIF", "AlphaDiv"):
            vals = [c[method] for c in chunk]
            failed = [t for t, v in enumerate(vals) if v is None]
            kept = [v for v in vals if v is not None]
            if method == "KLIEP":
                kept_ok = [v for v in kept if v <= KLIEP_EXCLUDE_MSE]
            else:
                kept_ok = kept
            n_excl = len(vals) - len(kept_ok)
            rows.append(MseBenchmarkRow(method, int(dim), _fsum_mean(kept_ok), _fsum_std(kept_ok), n_trials,
                                        n_excl, vals, failed))
    return rows


# --- scaling probe -----------------------------------------------------------

@dataclass
class ScalingResult:
    dim: int
    sample_sizes: List[int]
    l1_errors: List[float]
    l1_stds: List[float]
    fitted_loglog_slope: Optional[float]
    variant: str


def loglog_slope(sizes, errors) -> Optional[float]:
    if len(sizes) < 2:
        return None
    slope, _ = np.polyfit(np.log(np.asarray(sizes, dtype=float)), np.log(np.asarray(errors, dtype=float)), 1)
    return float(slope)


def _scaling_trial(task):
    k, trial, base_seed, cfg = task
    dim = cfg["dim"]
    mu_p, mu_q = _mse_pair(dim)
    seed = trial_seed(base_seed, "scaling", k, trial)
    xp = sample_mvn(GaussianSpec.identity(mu_p), k, seed, 0, "P").data
    xe = sample_mvn(GaussianSpec.identity(mu_p), cfg["n_eval"], seed, 2, "P").data
    r_true = true_ratio_gaussian(mu_p, mu_q, xe)
    if cfg["variant"] == "plugin":
        model = normalize(gaussian_oracle_network(mu_p, mu_q), xp)
    else:
        xq = sample_mvn(GaussianSpec.identity(mu_q), k, seed, 1, "Q").data
        config = TrainConfig(loss=LossKind.alpha_div(cfg["alpha"]), optimizer=cfg["optimizer"],
                             learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                             epochs=cfg["epochs"], seed=trial_seed(base_seed, "scaling", k, trial, 1))
        model, _ = train(xp, xq, [dim, *cfg["hidden"], 1], config)
    return float(np.mean(np.abs(predict_ratio(model, xe) - r_true)))


def run_scaling(dim: int, sample_sizes: Sequence[int], n_trials: int, base_seed: int = 0,
                config: Optional[dict] = None, jobs: int = 1) -> ScalingResult:
    """``E_P|r_hat - r|`` against the per-set sample size ``K``.

    ``variant="trained"`` fits alpha-div with ``N = M = K``; ``variant="plugin"``
    uses the exact energy and only estimates the normalizer from ``K`` P points.
    """
    cfg = profile_defaults("scaling")
    cfg.update(config or {})
    cfg["dim"] = int(dim)
    if cfg["variant"] not in ("trained", "plugin"):
        raise ValueError(f"variant must be 'trained' or 'plugin', got {cfg['variant']!r}")
    sizes = [int(k) for k in sample_sizes]
    tasks = [(k, t, base_seed, cfg) for k in sizes for t in range(n_trials)]
    outputs = _run_tasks(_scaling_trial, tasks, jobs)
    means, stds = [], []
    for i in range(len(sizes)):
        chunk = outputs[i * n_trials:(i + 1) * n_trials]
        means.append(_fsum_mean(chunk))
        stds.append(_fsum_std(chunk))
    return ScalingResult(int(dim), sizes, means, stds, loglog_slope(sizes, means), cfg["variant"])


# --- CSV emitters ------------------------------------------------------------

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue()


def stability_csv(results: Sequence[StabilityResult]) -> str:
    rows = []
    for res in results:
        for step, q in enumerate(res.quantiles):
            rows.append([res.alpha, step, *[float(v) for v in q]])
    return _csv(["alpha", "step", "q05", "q45", "q50", "q55", "q95"], rows)


def mse_csv(rows: Sequence[MseBenchmarkRow]) -> str:
    return _csv(["method", "dim", "mean_mse", "std_mse", "n_trials", "n_excluded"],
                [[r.method, r.dim, r.mean_mse, r.std_mse, r.n_trials, r.n_excluded] for r in rows])


def scaling_csv(result: ScalingResult) -> str:
    return _csv(["dim", "K", "l1_mean", "l1_std"],
                [[result.dim, k, m, s] for k, m, s in zip(result.sample_sizes, result.l1_errors, result.l1_stds)])
