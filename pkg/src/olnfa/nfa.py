"""A contrario statistics under the uniform-density naive model.

A window of area ``nu`` holding ``kappa`` active pixels, on a map whose
overall activation density is ``p``, is judged against the binomial
background: the number of false alarms is ``eta * P[Bin(nu, p) >= kappa]``
where ``eta`` counts the windows tested. The *significance* is ``-ln NFA``.

Two routes are provided:

* the exact binomial tail, summed in the log domain, for integer counts;
* the Hoeffding/Chernoff form ``nu * KL(kappa/nu || p) - ln eta``, defined
  for real-valued (soft) counts and used by the trainable head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._backend import kernels

P_MIN = 1e-6
P_MAX = 1.0 - 1e-6
_BELOW_ONE = np.nextafter(1.0, 0.0)

__all__ = [
    "NfaContext",
    "Significance",
    "binomial_tail",
    "log_binomial_tail",
    "nfa_exact",
    "kl_bernoulli",
    "significance_hoeffding",
    "significance_grad",
    "significance_arrays",
    "f_act",
    "clamp_p",
]


def clamp_p(p):
    """Keep a density inside ``[1e-6, 1 - 1e-6]``; works on scalars and arrays."""
    return np.clip(p, P_MIN, P_MAX) if isinstance(p, np.ndarray) else min(max(p, P_MIN), P_MAX)


@dataclass(frozen=True)
class NfaContext:
    """Test count ``eta``, window area ``nu`` and background density ``p``."""

    eta: int
    nu: float
    p: float

    def __post_init__(self):
        if self.eta < 1:
            raise ValueError(f"eta must be >= 1, got {self.eta}")
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        object.__setattr__(self, "p", clamp_p(float(self.p)))


@dataclass(frozen=True)
class Significance:
    value: float
    is_background_branch: bool


def _check_prob(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie strictly inside (0, 1), got {p}")


def log_binomial_tail(kappa: int, nu: int, p: float) -> float:
    """``ln P[Bin(nu, p) >= kappa]``, never above 0."""
    if kappa != int(kappa) or nu != int(nu):
        raise ValueError("kappa and nu must be integers for the exact tail")
    kappa, nu = int(kappa), int(nu)
    if nu < 1:
        raise ValueError(f"nu must be a positive integer, got {nu}")
    if not 0 <= kappa <= nu:
        raise ValueError(f"need 0 <= kappa <= nu, got kappa={kappa}, nu={nu}")
    _check_prob(p)
    return kernels.log_binomial_tail(kappa, nu, float(p))


def binomial_tail(kappa: int, nu: int, p: float) -> float:
    """Upper tail ``sum_{i>=kappa} C(nu,i) p^i (1-p)^(nu-i)``.

    Summed as a log-sum-exp over log-pmf terms generated by the ratio
    recurrence, so tails far below the double-precision underflow limit
    are still accurate in the log domain.

    Examples
    --------
    >>> binomial_tail(0, 9, 0.3)
    1.0
    """
    return math.exp(log_binomial_tail(kappa, nu, p))


def nfa_exact(kappa: int, nu: int, p: float, eta: int) -> float:
    if eta < 1:
        raise ValueError(f"eta must be >= 1, got {eta}")
    return eta * binomial_tail(kappa, nu, p)


def kl_bernoulli(r: float, p: float) -> float:
    """KL divergence between Bernoulli(r) and Bernoulli(p), with 0 ln 0 = 0."""
    _check_prob(p)
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must lie in [0, 1], got {r}")
    out = 0.0
    if r > 0.0:
        out += r * math.log(r / p)
    if r < 1.0:
        out += (1.0 - r) * math.log((1.0 - r) / (1.0 - p))
    return max(out, 0.0)


def significance_hoeffding(kappa: float, nu: float, p: float, eta: int) -> Significance:
    """Hoeffding significance ``nu * KL(kappa/nu, p) - ln eta`` for real counts.

    Windows no denser than the background (``kappa/nu <= p``) get the floor
    value ``-ln eta`` and are flagged as background.
    """
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")
    if not 0.0 <= kappa <= nu:
        raise ValueError(f"need 0 <= kappa <= nu, got kappa={kappa}, nu={nu}")
    if eta < 1:
        raise ValueError(f"eta must be >= 1, got {eta}")
    _check_prob(p)
    r = kappa / nu
    floor = -math.log(eta)
    if r <= p:
        return Significance(floor, True)
    return Significance(nu * kl_bernoulli(r, p) + floor, False)


def significance_grad(kappa: float, nu: float, p: float, eta: int) -> tuple[float, float]:
    """Partial derivatives ``(dS/dkappa, dS/dp)`` of the Hoeffding significance.

    Zero on the background branch. Raises at ``kappa`` in {0, nu}, where the
    kappa-derivative diverges.
    """
    if kappa <= 0.0 or kappa >= nu:
        raise ValueError(f"kappa must lie strictly inside (0, nu), got {kappa}")
    _check_prob(p)
    if kappa / nu <= p:
        return 0.0, 0.0
    d_kappa = math.log(kappa * (1.0 - p) / (p * (nu - kappa)))
    d_p = -kappa / p + (nu - kappa) / (1.0 - p)
    return d_kappa, d_p


def significance_arrays(kappa: np.ndarray, nu, p, eta: int, eps: float = 1e-12):
    """Vectorised significance and its partials, for the differentiable op.

    Returns ``(S, dS/dkappa, dS/dnu, dS/dp)`` broadcast to a common shape.
    Counts are pulled into ``[eps*nu, (1-eps)*nu]`` before the logarithms so
    a saturated sigmoid cannot produce an infinite slope.
    """
    kappa = np.asarray(kappa, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), P_MIN, P_MAX)
    kappa, nu, p = np.broadcast_arrays(kappa, nu, p)
    r = np.clip(kappa / nu, eps, 1.0 - eps)
    fg = kappa / nu > p
    kl = r * np.log(r / p) + (1.0 - r) * np.log((1.0 - r) / (1.0 - p))
    floor = -math.log(eta)
    s = np.where(fg, nu * np.maximum(kl, 0.0) + floor, floor)
    d_kappa = np.where(fg, np.log(r * (1.0 - p) / (p * (1.0 - r))), 0.0)
    d_nu = np.where(fg, np.log((1.0 - r) / (1.0 - p)), 0.0)
    d_p = np.where(fg, nu * (-r / p + (1.0 - r) / (1.0 - p)), 0.0)
    return s, d_kappa, d_nu, d_p


def f_act(x, eta: int):
    """Squash a significance into ``[0, 1)``: ``2*sigmoid(x + ln eta) - 1``.

    Evaluated as ``tanh((x + ln eta) / 2)``, the same function without the
    cancellation near zero, and held below 1 where tanh rounds up to it.
    """
    z = np.asarray(x, dtype=np.float64) + math.log(eta)
    out = np.minimum(np.tanh(0.5 * z), _BELOW_ONE)
    return float(out) if out.ndim == 0 else out
