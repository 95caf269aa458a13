"""Alpha-divergence loss, the f-divergence variational losses, and their output gradients.

Every loss here takes the network outputs on a Q (numerator) batch and a P
(denominator) batch and returns a :class:`LossValue`.  The matching
``*_output_grads`` functions return ``dL/d(output)`` per sample, which is the
``upstream`` argument expected by :func:`alphadre.nn.mlp_backward`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .nn import MlpModel, mlp_backward, mlp_forward

__all__ = [
    "EXP_CLAMP",
    "LossTag",
    "LossKind",
    "LossValue",
    "RegimeReport",
    "clamped_exp",
    "alpha_div_loss",
    "alpha_div_output_grads",
    "f_div_loss",
    "f_div_output_grads",
    "loss_and_energy_grads",
    "gradient_regime_probe",
]

EXP_CLAMP = 700.0

VANISH_THRESHOLD = 1e-6
DIVERGE_THRESHOLD = 1e3


class LossTag(str, enum.Enum):
    KL = "KL"
    REVERSE_KL = "ReverseKL"
    PEARSON_CHI2 = "PearsonChi2"
    SQUARED_HELLINGER = "SquaredHellinger"
    GAN = "GAN"
    ALPHA_DIV = "AlphaDiv"


_POSITIVE_PHI = {LossTag.KL, LossTag.REVERSE_KL, LossTag.SQUARED_HELLINGER, LossTag.GAN}


def check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not np.isfinite(alpha):
        raise ValueError(f"alpha must be finite, got {alpha}")
    if alpha in (0.0, 1.0):
        raise ValueError(f"alpha must not be 0 or 1 (the alpha-divergence is undefined there), got {alpha}")
    return alpha


@dataclass(frozen=True)
class LossKind:
    tag: LossTag
    alpha: Optional[float] = None

    def __post_init__(self):
        tag = LossTag(self.tag)
        object.__setattr__(self, "tag", tag)
        if tag is LossTag.ALPHA_DIV:
            if self.alpha is None:
                raise ValueError("AlphaDiv requires alpha")
            object.__setattr__(self, "alpha", check_alpha(self.alpha))
        elif self.alpha is not None:
            raise ValueError(f"{tag.value} does not take alpha")

    @classmethod
    def alpha_div(cls, alpha: float) -> "LossKind":
        return cls(LossTag.ALPHA_DIV, alpha)

    @classmethod
    def parse(cls, text: str) -> "LossKind":
        """Parse ``"KL"``, ``"GAN"``, ``"AlphaDiv:0.5"`` and similar."""
        name, _, arg = text.partition(":")
        if name == LossTag.ALPHA_DIV.value:
            return cls.alpha_div(float(arg))
        return cls(LossTag(name))

    def __str__(self):
        if self.tag is LossTag.ALPHA_DIV:
            return f"{self.tag.value}:{self.alpha!r}"
        return self.tag.value

    @property
    def is_alpha(self) -> bool:
        return self.tag is LossTag.ALPHA_DIV


@dataclass(frozen=True)
class LossValue:
    value: float
    q_term: float
    p_term: float
    clamp_events: int = 0
    constant: float = 0.0


@dataclass(frozen=True)
class RegimeReport:
    grad_norm: float
    classification: str
    q_grad_norm: float
    p_grad_norm: float


def clamped_exp(z: np.ndarray) -> Tuple[np.ndarray, int]:
    """``exp`` with the exponent clipped to ``[-EXP_CLAMP, EXP_CLAMP]``; returns the clip count."""
    z = np.asarray(z, dtype=np.float64)
    n_clamped = int(np.count_nonzero(np.abs(z) > EXP_CLAMP))
    return np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP)), n_clamped


def _check_outputs(t_q, t_p, name="t") -> Tuple[np.ndarray, np.ndarray]:
    t_q = np.asarray(t_q, dtype=np.float64).ravel()
    t_p = np.asarray(t_p, dtype=np.float64).ravel()
    if t_q.size == 0 or t_p.size == 0:
        raise ValueError(f"{name}_q and {name}_p must both be non-empty")
    if not (np.all(np.isfinite(t_q)) and np.all(np.isfinite(t_p))):
        raise ValueError(f"{name}_q and {name}_p must be finite")
    return t_q, t_p


def alpha_div_loss(t_q, t_p, alpha: float) -> LossValue:
    """``(1/a) mean exp(a t_q) + (1/(1-a)) mean exp((a-1) t_p)`` for energies ``t``."""
    alpha = check_alpha(alpha)
    t_q, t_p = _check_outputs(t_q, t_p)
    eq, cq = clamped_exp(alpha * t_q)
    ep, cp = clamped_exp((alpha - 1.0) * t_p)
    q_term = float(np.mean(eq)) / alpha
    p_term = float(np.mean(ep)) / (1.0 - alpha)
    return LossValue(q_term + p_term, q_term, p_term, cq + cp)


def alpha_div_output_grads(t_q, t_p, alpha: float) -> Tuple[np.ndarray, np.ndarray]:
    alpha = check_alpha(alpha)
    t_q, t_p = _check_outputs(t_q, t_p)
    eq, _ = clamped_exp(alpha * t_q)
    ep, _ = clamped_exp((alpha - 1.0) * t_p)
    return eq / t_q.size, -ep / t_p.size


def _check_phi(kind: LossKind, phi_q, phi_p):
    if kind.is_alpha:
        raise ValueError("AlphaDiv is evaluated on energies; use alpha_div_loss")
    phi_q, phi_p = _check_outputs(phi_q, phi_p, name="phi")
    if kind.tag in _POSITIVE_PHI and (np.any(phi_q <= 0) or np.any(phi_p <= 0)):
        raise ValueError(f"{kind.tag.value} loss requires strictly positive phi (it takes logs or negative powers)")
    return phi_q, phi_p


def f_div_loss(kind: LossKind, phi_q, phi_p) -> LossValue:
    """Variational f-divergence loss evaluated on ratio outputs ``phi``."""
    if kind.is_alpha:
        return alpha_div_loss(phi_q, phi_p, kind.alpha)
    phi_q, phi_p = _check_phi(kind, phi_q, phi_p)
    tag = kind.tag
    if tag is LossTag.KL:
        q, p, c = -np.mean(np.log(phi_q)), np.mean(phi_p), -1.0
    elif tag is LossTag.REVERSE_KL:
        q, p, c = np.mean(1.0 / phi_q), np.mean(np.log(phi_p)), -1.0
    elif tag is LossTag.PEARSON_CHI2:
        q, p, c = -2.0 * np.mean(phi_q), np.mean(phi_p ** 2), 1.0
    elif tag is LossTag.SQUARED_HELLINGER:
        q, p, c = np.mean(phi_q ** -0.5), np.mean(np.sqrt(phi_p)), -2.0
    else:  # GAN
        q, p, c = np.mean(np.log1p(1.0 / phi_q)), np.mean(np.log1p(phi_p)), 0.0
    q, p = float(q), float(p)
    return LossValue(q + p + c, q, p, 0, c)


def f_div_output_grads(kind: LossKind, phi_q, phi_p) -> Tuple[np.ndarray, np.ndarray]:
    """``dL/dphi`` per sample on the Q and P batches."""
    if kind.is_alpha:
        return alpha_div_output_grads(phi_q, phi_p, kind.alpha)
    phi_q, phi_p = _check_phi(kind, phi_q, phi_p)
    m, n = phi_q.size, phi_p.size
    tag = kind.tag
    if tag is LossTag.KL:
        gq, gp = -1.0 / phi_q, np.ones(n)
    elif tag is LossTag.REVERSE_KL:
        gq, gp = -phi_q ** -2.0, 1.0 / phi_p
    elif tag is LossTag.PEARSON_CHI2:
        gq, gp = np.full(m, -2.0), 2.0 * phi_p
    elif tag is LossTag.SQUARED_HELLINGER:
        gq, gp = -0.5 * phi_q ** -1.5, 0.5 * phi_p ** -0.5
    else:
        gq, gp = -1.0 / (phi_q * (1.0 + phi_q)), 1.0 / (1.0 + phi_p)
    return gq / m, gp / n


def loss_and_energy_grads(kind: LossKind, t_q, t_p):
    """Loss and ``dL/dT`` for a network emitting energies ``T``.

    The f-divergence kinds use ``phi = exp(-T)``, so every kind shares one
    scalar-output network.
    """
    if kind.is_alpha:
        return alpha_div_loss(t_q, t_p, kind.alpha), alpha_div_output_grads(t_q, t_p, kind.alpha)
    t_q, t_p = _check_outputs(t_q, t_p)
    phi_q, cq = clamped_exp(-t_q)
    phi_p, cp = clamped_exp(-t_p)
    lv = f_div_loss(kind, phi_q, phi_p)
    gq, gp = f_div_output_grads(kind, phi_q, phi_p)
    lv = LossValue(lv.value, lv.q_term, lv.p_term, cq + cp, lv.constant)
    return lv, (-gq * phi_q, -gp * phi_p)


def gradient_regime_probe(alpha: float, t_const: float, model: MlpModel, batch_p, batch_q) -> RegimeReport:
    """Parameter-gradient norm of the alpha-div loss after shifting the output by ``t_const``.

    A norm under 1e-6 is ``VanishesToZero``; above 1e3 it is ``DivergesNegative``
    when the P-side term dominates (its weight is negative) and
    ``DivergesPositive`` when the Q side does; anything else is ``Indeterminate``.
    """
    alpha = check_alpha(alpha)
    shifted = model.shifted(float(t_const))
    t_p = mlp_forward(shifted, batch_p)
    t_q = mlp_forward(shifted, batch_q)
    gq, gp = alpha_div_output_grads(t_q, t_p, alpha)
    grad_q = mlp_backward(shifted, batch_q, gq)
    grad_p = mlp_backward(shifted, batch_p, gp)
    total = (grad_q + grad_p).norm()
    q_norm, p_norm = grad_q.norm(), grad_p.norm()
    if total < VANISH_THRESHOLD:
        label = "VanishesToZero"
    elif total > DIVERGE_THRESHOLD:
        label = "DivergesNegative" if p_norm > q_norm else "DivergesPositive"
    else:
        label = "Indeterminate"
    return RegimeReport(total, label, q_norm, p_norm)
