"""Command-line entry point: ``alphadre <subcommand> [options]``.

Values resolve as command-line flag, then ``--config`` JSON file, then the
profile default.  Exit status is 0 on success, 1 on runtime or data errors and
2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .estimator import (
    RatioModel,
    TrainConfig,
    TrainingError,
    estimate_divergence,
    gaussian_oracle_network,
    normalize,
    predict_ratio,
    train,
)
from .experiments import (
    mse_csv,
    profile_defaults,
    run_mse_benchmark,
    run_scaling,
    run_stability,
    scaling_csv,
    stability_csv,
)
from .losses import LossKind, check_alpha, gradient_regime_probe
from .nn import MlpModel, mlp_forward, mlp_init
from .synthdata import GaussianSpec, SampleSet, sample_mvn

log = logging.getLogger("alphadre")

COMMON = {"seed": 0, "output_dir": "results", "profile": "desk", "jobs": 1}

TRAIN_DEFAULTS = {
    "p_csv": None,
    "q_csv": None,
    "dim": 2,
    "mu_q": 1.0,
    "n": 1000,
    "loss": "AlphaDiv",
    "alpha": 0.5,
    "hidden": [100, 100, 100],
    "optimizer": "adam",
    "learning_rate": 1e-3,
    "batch_size": 128,
    "epochs": 50,
    "oracle": False,
}

ESTIMATE_DEFAULTS = {
    "model": None,
    "points": None,
    "alpha": 0.5,
    "p_csv": None,
    "q_csv": None,
    "generate_n": 0,
    "mu_q": 1.0,
}

PROBE_DEFAULTS = {
    "alpha": 0.5,
    "t_const": -20.0,
    "dim": 2,
    "hidden": [16, 16],
    "n": 200,
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    seed: int
    output_dir: str
    profile: str
    jobs: int
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "profile": self.profile,
            "jobs": self.jobs,
            "params": self.params,
        }


def _subcommand_defaults(name: str, profile: str) -> dict:
    if name == "stability":
        return profile_defaults("stability", profile)
    if name == "mse-benchmark":
        return profile_defaults("mse", profile)
    if name == "scaling":
        return profile_defaults("scaling", profile)
    if name == "train":
        return dict(TRAIN_DEFAULTS)
    if name == "estimate":
        return dict(ESTIMATE_DEFAULTS)
    return dict(PROBE_DEFAULTS)


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alphadre", description="Density-ratio estimation with the alpha-divergence loss.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    def common(p):
        p.add_argument("--config", help="JSON file with option values")
        p.add_argument("--profile", choices=["desk", "full"])
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--jobs", type=int, help="concurrent trials")
        return p

    p = common(sub.add_parser("stability", help="training-loss stability across alpha"))
    p.add_argument("--alphas", type=_float_list)
    p.add_argument("--trials", dest="n_trials", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])

    p = common(sub.add_parser("mse-benchmark", help="ratio MSE of alpha-div against uLSIF and KLIEP"))
    p.add_argument("--dims", type=_int_list)
    p.add_argument("--trials", dest="n_trials", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--alpha", type=float)

    p = common(sub.add_parser("scaling", help="L1 error against sample size"))
    p.add_argument("--dim", type=int)
    p.add_argument("--sample-sizes", dest="sample_sizes", type=_int_list)
    p.add_argument("--trials", dest="n_trials", type=int)
    p.add_argument("--variant", choices=["trained", "plugin"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--alpha", type=float)

    p = common(sub.add_parser("train", help="train a ratio model and save it"))
    p.add_argument("--p-csv", dest="p_csv", help="denominator samples (header x1..xd)")
    p.add_argument("--q-csv", dest="q_csv", help="numerator samples (header x1..xd)")
    p.add_argument("--dim", type=int, help="generator: dimension")
    p.add_argument("--mu-q", dest="mu_q", type=float, help="generator: Q mean shift along x1 (0 gives P = Q)")
    p.add_argument("--n", type=int, help="generator: samples per set")
    p.add_argument("--loss", help="AlphaDiv, KL, ReverseKL, PearsonChi2, SquaredHellinger or GAN")
    p.add_argument("--alpha", type=float)
    p.add_argument("--hidden", type=_int_list)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--oracle", action="store_const", const=True, help="save the exact Gaussian energy instead of training")

    p = common(sub.add_parser("estimate", help="predict ratios and estimate the alpha-divergence"))
    p.add_argument("--model", help="model JSON written by 'train'")
    p.add_argument("--points", help="CSV of points to score")
    p.add_argument("--alpha", type=float)
    p.add_argument("--p-csv", dest="p_csv")
    p.add_argument("--q-csv", dest="q_csv")
    p.add_argument("--generate-n", dest="generate_n", type=int, help="draw this many P and Q samples instead of CSVs")
    p.add_argument("--mu-q", dest="mu_q", type=float)

    p = common(sub.add_parser("probe-gradients", help="gradient norm of the alpha-div loss at a shifted output"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--t-const", dest="t_const", type=float)
    p.add_argument("--dim", type=int)
    p.add_argument("--hidden", type=_int_list)
    p.add_argument("--n", type=int)
    return parser


def _coerce(key, value, default):
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise UsageError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise UsageError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(default, dict):
        if not isinstance(value, (dict, int)):
            raise UsageError(f"{key}: expected an integer or mapping, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise UsageError(f"{key}: expected a string, got {value!r}")
    return value


def parse_config(argv, parser=None) -> RunConfig:
    """Resolve flags, an optional JSON config file and profile defaults into a RunConfig."""
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if args.subcommand is None:
        raise UsageError(parser.format_usage().strip())
    flags = {k: v for k, v in vars(args).items() if k not in ("subcommand", "config") and v is not None}

    file_values = {}
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"config: cannot read {args.config}: {exc}") from None
        if not isinstance(file_values, dict):
            raise UsageError("config: top level must be a JSON object")

    profile = flags.get("profile", file_values.get("profile", COMMON["profile"]))
    if profile not in ("desk", "full"):
        raise UsageError(f"profile: must be 'desk' or 'full', got {profile!r}")
    defaults = {**COMMON, **_subcommand_defaults(args.subcommand, profile)}
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise UsageError(f"config: unknown key(s) {', '.join(unknown)} for '{args.subcommand}'")

    resolved = dict(defaults)
    for source in (file_values, flags):
        for k, v in source.items():
            resolved[k] = _coerce(k, v, defaults[k])

    for key in ("alpha", "alphas"):
        if key in resolved and resolved[key] is not None:
            values = resolved[key] if isinstance(resolved[key], list) else [resolved[key]]
            for a in values:
                try:
                    check_alpha(a)
                except (TypeError, ValueError):
                    raise UsageError(
                        f"{key}: {a!r} is not allowed; the alpha-divergence is defined only for alpha not in {{0, 1}}"
                    ) from None
    if resolved["jobs"] < 1:
        raise UsageError("jobs: must be >= 1")

    common_keys = set(COMMON)
    return RunConfig(
        subcommand=args.subcommand,
        seed=int(resolved["seed"]),
        output_dir=resolved["output_dir"],
        profile=profile,
        jobs=int(resolved["jobs"]),
        params={k: v for k, v in resolved.items() if k not in common_keys},
    )


def _atomic_write(path: str, text: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_manifest(cfg: RunConfig, outputs: list, summary: dict, started: float):
    manifest = {
        "artifact": "alphadre",
        "artifact_version": __version__,
        "numpy_version": np.__version__,
        "config": cfg.to_dict(),
        "outputs": outputs,
        "summary": summary,
    }
    _atomic_write(os.path.join(cfg.output_dir, "manifest.json"), _dump_json(manifest))
    # wall-clock lives outside the JSON outputs so those stay byte-reproducible
    _atomic_write(os.path.join(cfg.output_dir, "timing.log"),
                  f"{cfg.subcommand} wall_clock_seconds {time.perf_counter() - started:.3f}\n")


def _read_samples(path: str, label: str) -> SampleSet:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return SampleSet.from_csv(text, source_label=label)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _gaussian_pair(dim: int, mu_q: float):
    mu_p = np.zeros(dim)
    q = np.zeros(dim)
    q[0] = mu_q
    return mu_p, q


def cmd_stability(cfg: RunConfig) -> dict:
    p = cfg.params
    results = run_stability(p["alphas"], p["n_trials"], cfg.seed, p, jobs=cfg.jobs)
    _atomic_write(os.path.join(cfg.output_dir, "stability.csv"), stability_csv(results))
    summary = {}
    for r in results:
        log.info("alpha %g: diverged %.2f (any step %.2f), min loss %.4g", r.alpha, r.diverged_fraction,
                 r.ever_diverged_fraction, r.loss_min)
        summary[repr(r.alpha)] = {
            "diverged_fraction": r.diverged_fraction,
            "ever_diverged_fraction": r.ever_diverged_fraction,
            "loss_min": r.loss_min,
            "n_aborted": r.n_aborted,
        }
    return {"outputs": ["stability.csv"], "summary": summary}


def cmd_mse(cfg: RunConfig) -> dict:
    p = cfg.params
    rows = run_mse_benchmark(p["dims"], p["n_trials"], cfg.seed, p, jobs=cfg.jobs)
    _atomic_write(os.path.join(cfg.output_dir, "mse.csv"), mse_csv(rows))
    for r in rows:
        log.info("%s dim %d: mse %.4g (%.4g)", r.method, r.dim, r.mean_mse, r.std_mse)
    summary = {
        "exclusion_rule": "KLIEP trials with MSE > 1000 excluded, applied over all trials of each dimension",
        "failed_trials": {f"{r.method}/{r.dim}": r.failed_trials for r in rows if r.failed_trials},
    }
    return {"outputs": ["mse.csv"], "summary": summary}


def cmd_scaling(cfg: RunConfig) -> dict:
    p = cfg.params
    res = run_scaling(p["dim"], p["sample_sizes"], p["n_trials"], cfg.seed, p, jobs=cfg.jobs)
    _atomic_write(os.path.join(cfg.output_dir, "scaling.csv"), scaling_csv(res))
    log.info("scaling %s dim %d: slope %s", res.variant, res.dim, res.fitted_loglog_slope)
    return {"outputs": ["scaling.csv"], "summary": {"fitted_loglog_slope": res.fitted_loglog_slope,
                                                   "variant": res.variant}}


def cmd_train(cfg: RunConfig) -> dict:
    p = cfg.params
    if (p["p_csv"] is None) != (p["q_csv"] is None):
        raise UsageError("p_csv/q_csv: give both files or neither")
    if p["p_csv"] is not None:
        xp = _read_samples(p["p_csv"], "P")
        xq = _read_samples(p["q_csv"], "Q")
        if xp.dim != xq.dim:
            raise DataError(f"{p['p_csv']} has {xp.dim} columns but {p['q_csv']} has {xq.dim}")
        mu = None
    else:
        mu = _gaussian_pair(p["dim"], p["mu_q"])
        xp = sample_mvn(GaussianSpec.identity(mu[0]), p["n"], cfg.seed, 0, "P")
        xq = sample_mvn(GaussianSpec.identity(mu[1]), p["n"], cfg.seed, 1, "Q")
    trace_csv = "step,loss\n"
    if p["oracle"]:
        if mu is None:
            raise UsageError("oracle: only available with the Gaussian generator")
        model = normalize(gaussian_oracle_network(*mu), xp)
    else:
        kind = LossKind.alpha_div(p["alpha"]) if p["loss"] == "AlphaDiv" else LossKind.parse(p["loss"])
        config = TrainConfig(loss=kind, optimizer=p["optimizer"], learning_rate=p["learning_rate"],
                             batch_size=p["batch_size"], epochs=p["epochs"], seed=cfg.seed)
        model, trace = train(xp, xq, [xp.dim, *p["hidden"], 1], config, log=log.info)
        trace_csv = trace.to_csv()
    _atomic_write(os.path.join(cfg.output_dir, "model.json"), _dump_json(model.to_dict()))
    _atomic_write(os.path.join(cfg.output_dir, "trace.csv"), trace_csv)
    return {"outputs": ["model.json", "trace.csv"], "summary": {"normalizer": model.normalizer,
                                                                "reference_size": model.reference_size}}


def _load_model(path: str):
    """Return a RatioModel, or a bare MlpModel when the file holds an unnormalized network."""
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    try:
        if "network" in d:
            return RatioModel.from_dict(d)
        return MlpModel.from_dict(d)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: not a model file ({exc})") from None


def cmd_estimate(cfg: RunConfig) -> dict:
    p = cfg.params
    if not p["model"] or not p["points"]:
        raise UsageError("model/points: both --model and --points are required")
    model = _load_model(p["model"])
    points = _read_samples(p["points"], "P")
    if points.dim != model.input_dim:
        raise DataError(f"{p['points']} has {points.dim} columns, model expects {model.input_dim}")

    xp = xq = None
    if p["p_csv"] or p["q_csv"]:
        if not (p["p_csv"] and p["q_csv"]):
            raise UsageError("p_csv/q_csv: give both files or neither")
        xp, xq = _read_samples(p["p_csv"], "P"), _read_samples(p["q_csv"], "Q")
    elif p["generate_n"] > 0:
        mu_p, mu_q = _gaussian_pair(model.input_dim, p["mu_q"])
        xp = sample_mvn(GaussianSpec.identity(mu_p), p["generate_n"], cfg.seed, 10, "P")
        xq = sample_mvn(GaussianSpec.identity(mu_q), p["generate_n"], cfg.seed, 11, "Q")
    for s, name in ((xp, "P"), (xq, "Q")):
        if s is not None and s.dim != model.input_dim:
            raise DataError(f"{name} samples have {s.dim} columns, model expects {model.input_dim}")

    if isinstance(model, MlpModel):
        reference = xp if xp is not None else points
        log.info("model has no normalizer; normalizing on %d %s rows", reference.n,
                 "P" if xp is not None else "scored")
        model = normalize(model, reference)

    r_hat = predict_ratio(model, points.data)
    lines = [",".join([f"x{j + 1}" for j in range(points.dim)] + ["r_hat"])]
    for row, r in zip(points.data, r_hat):
        lines.append(",".join([repr(float(v)) for v in row] + [repr(float(r))]))
    _atomic_write(os.path.join(cfg.output_dir, "ratios.csv"), "\n".join(lines) + "\n")
    outputs = ["ratios.csv"]
    summary = {"n_points": points.n, "normalizer": model.normalizer}

    if xp is not None:
        # the estimator uses the loss minimizer itself, not the normalized energy
        est = estimate_divergence(mlp_forward(model.network, xq.data), mlp_forward(model.network, xp.data),
                                  p["alpha"])
        _atomic_write(os.path.join(cfg.output_dir, "divergence.json"), _dump_json(est.to_dict()))
        outputs.append("divergence.json")
        summary["d_hat"] = est.d_hat
    return {"outputs": outputs, "summary": summary}


def cmd_probe(cfg: RunConfig) -> dict:
    p = cfg.params
    model = mlp_init([p["dim"], *p["hidden"], 1], cfg.seed)
    spec = GaussianSpec.identity(np.zeros(p["dim"]))
    xp = sample_mvn(spec, p["n"], cfg.seed, 0, "P").data
    xq = sample_mvn(spec, p["n"], cfg.seed, 1, "Q").data
    # the probe assumes T is close to 0 before the shift, so center the output first
    model = model.shifted(-float(np.mean(mlp_forward(model, np.vstack([xp, xq])))))
    rep = gradient_regime_probe(p["alpha"], p["t_const"], model, xp, xq)
    out = {"alpha": p["alpha"], "t_const": p["t_const"], "grad_norm": rep.grad_norm,
           "classification": rep.classification, "q_grad_norm": rep.q_grad_norm, "p_grad_norm": rep.p_grad_norm}
    _atomic_write(os.path.join(cfg.output_dir, "probe.json"), _dump_json(out))
    return {"outputs": ["probe.json"], "summary": {"classification": rep.classification}}


COMMANDS = {
    "stability": cmd_stability,
    "mse-benchmark": cmd_mse,
    "scaling": cmd_scaling,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "probe-gradients": cmd_probe,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = parse_config(argv, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"alphadre: error: {exc}", file=sys.stderr)
        return 2
    started = time.perf_counter()
    try:
        result = COMMANDS[cfg.subcommand](cfg)
        _write_manifest(cfg, result["outputs"], result["summary"], started)
    except UsageError as exc:
        print(f"alphadre: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TrainingError, ValueError, OSError) as exc:
        print(f"alphadre: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
