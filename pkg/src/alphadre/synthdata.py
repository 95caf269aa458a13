"""Synthetic Gaussian samples and closed-form ratio / divergence oracles."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "GaussianSpec",
    "SampleSet",
    "make_rng",
    "standard_normal",
    "sample_mvn",
    "true_ratio_gaussian",
    "true_energy_gaussian",
    "closed_form_alpha_div",
    "gaussian_ratio_moment",
]


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, stream)``.

    Streams derived from the same seed are statistically independent, so
    trial ``t`` of an experiment can be replayed without running trials
    ``0..t-1`` first.
    """
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative integers")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


def standard_normal(rng: np.random.Generator, size: int) -> np.ndarray:
    """Box-Muller standard normals drawn from ``rng``'s uniform doubles."""
    n_pairs = (size + 1) // 2
    u = rng.random((2, n_pairs))
    # 1 - u lies in (0, 1], keeping the log finite
    radius = np.sqrt(-2.0 * np.log1p(-u[0]))
    angle = 2.0 * np.pi * u[1]
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
    return z[:size]


@dataclass(frozen=True)
class GaussianSpec:
    """Multivariate normal described by a mean and an SPD covariance."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}, got {cov.shape}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def identity(cls, mean) -> "GaussianSpec":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        return cls(mean, np.eye(mean.shape[0]))

    @classmethod
    def equicorrelated(cls, dim: int, rho: float, mean=None) -> "GaussianSpec":
        """Unit variances with every off-diagonal correlation equal to ``rho``."""
        mean = np.zeros(dim) if mean is None else mean
        cov = np.full((dim, dim), float(rho))
        np.fill_diagonal(cov, 1.0)
        return cls(mean, cov)

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise ValueError("covariance is not positive definite") from None

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianSpec":
        return cls(d["mean"], d["covariance"])


@dataclass
class SampleSet:
    """An ``n x d`` matrix of i.i.d. draws from P (denominator) or Q (numerator)."""

    data: np.ndarray
    source_label: str = "P"
    spec: Optional[GaussianSpec] = None
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"sample matrix must be n x d with n, d >= 1; got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("sample matrix contains non-finite entries")
        if self.source_label not in ("P", "Q"):
            raise ValueError(f"source_label must be 'P' or 'Q', got {self.source_label!r}")
        self.data = data

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self):
        return self.n

    def to_csv(self) -> str:
        """Render as CSV text with header ``x1,...,xd``."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{j + 1}" for j in range(self.dim)])
        for row in self.data:
            writer.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, source_label: str = "P") -> "SampleSet":
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError("empty CSV: missing header") from None
        expected = [f"x{j + 1}" for j in range(len(header))]
        if [h.strip() for h in header] != expected:
            raise ValueError(f"CSV header must be {','.join(expected)}")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"line {reader.line_num}: expected {len(header)} values, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"line {reader.line_num}: non-numeric value") from None
        if not rows:
            raise ValueError("CSV contains no sample rows")
        return cls(np.array(rows, dtype=np.float64), source_label=source_label)


def sample_mvn(spec: GaussianSpec, n: int, seed: int, stream: int = 0, source_label: str = "P") -> SampleSet:
    """Draw ``n`` rows ``mean + L z`` with ``L`` the Cholesky factor of the covariance."""
    if n < 1:
        raise ValueError("n must be >= 1")
    chol = spec.cholesky()
    z = standard_normal(make_rng(seed, stream), n * spec.dim).reshape(n, spec.dim)
    x = spec.mean + z @ chol.T
    return SampleSet(x, source_label=source_label, spec=spec, seed=seed)


def _check_means(mu_p, mu_q):
    mu_p = np.atleast_1d(np.asarray(mu_p, dtype=np.float64))
    mu_q = np.atleast_1d(np.asarray(mu_q, dtype=np.float64))
    if mu_p.shape != mu_q.shape:
        raise ValueError(f"mean dimensions differ: {mu_p.shape} vs {mu_q.shape}")
    return mu_p, mu_q


def true_energy_gaussian(mu_p, mu_q, x):
    """Energy ``-log q(x)/p(x)`` for identity-covariance Gaussians.

    Returns a scalar for a single point and a vector for a batch.
    """
    mu_p, mu_q = _check_means(mu_p, mu_q)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if x2.shape[1] != mu_p.shape[0]:
        raise ValueError(f"x has dimension {x2.shape[1]}, means have {mu_p.shape[0]}")
    log_r = x2 @ (mu_q - mu_p) - 0.5 * (mu_q @ mu_q - mu_p @ mu_p)
    out = -log_r
    return float(out[0]) if single else out


def true_ratio_gaussian(mu_p, mu_q, x):
    """Density ratio ``q(x)/p(x)`` for identity-covariance Gaussians."""
    return np.exp(-np.asarray(true_energy_gaussian(mu_p, mu_q, x)))[()]


def gaussian_ratio_moment(delta_sq: float, s: float) -> float:
    """``E_P[r^s]`` for the shared-identity Gaussian pair with squared mean gap ``delta_sq``."""
    return float(np.exp(s * (s - 1.0) * delta_sq / 2.0))


def closed_form_alpha_div(mu_p, mu_q, alpha: float) -> float:
    """Exact ``D_alpha(Q || P)`` for ``N(mu_q, I)`` against ``N(mu_p, I)``."""
    if alpha in (0.0, 1.0):
        raise ValueError("alpha must not be 0 or 1")
    mu_p, mu_q = _check_means(mu_p, mu_q)
    delta_sq = float(np.sum((mu_q - mu_p) ** 2))
    a = alpha * (alpha - 1.0)
    return float(np.expm1(a * delta_sq / 2.0) / a)
