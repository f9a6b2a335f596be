"""Differentiable object-level NFA scoring of pooled regions.

Each evidence map is read as fuzzy binary data: ``sigmoid(value)`` is the
degree to which a pixel is "on". The density ``p`` of the whole map and the
soft count ``kappa`` inside each pooled region feed the Hoeffding
significance, which :func:`olnfa.nfa.f_act` turns into an objectness score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, register_op, sigmoid_array
from .nfa import P_MAX, P_MIN, f_act, significance_arrays
from .roi_align import pool, roi_pool

__all__ = [
    "EvidenceMap",
    "Roi",
    "soft_count",
    "global_density",
    "objectness_scores",
    "significance_op",
    "f_act_op",
    "score_rois",
]


@dataclass
class EvidenceMap:
    """One single-channel detection-level map and its cached density."""

    values: np.ndarray
    eta: int = 1
    p: float = field(init=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.p = global_density(self.values)


@dataclass
class Roi:
    box: tuple[float, float, float, float]
    patch: np.ndarray
    nu: float = field(init=False)
    kappa: float = field(init=False)

    def __post_init__(self):
        self.patch = np.asarray(self.patch, dtype=np.float64)
        self.nu = float(self.patch.size)
        self.kappa = soft_count(self.patch)

    @classmethod
    def from_map(cls, emap: EvidenceMap, box, R: int = 8) -> "Roi":
        return cls(tuple(float(v) for v in box), pool(emap.values, box, R))


def soft_count(patch) -> float:
    """Sum of pixel memberships ``sigmoid(patch)``."""
    patch = np.asarray(patch, dtype=np.float64)
    if not np.all(np.isfinite(patch)):
        raise ValueError("patch contains non-finite values")
    return float(sigmoid_array(patch).sum())


def global_density(values) -> float:
    """Mean membership over the map, clamped to ``[1e-6, 1 - 1e-6]``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty evidence map")
    return float(np.clip(sigmoid_array(values).mean(), P_MIN, P_MAX))


def objectness_scores(emap: EvidenceMap, rois: list[Roi]) -> list[float]:
    """Objectness in ``[0, 1)`` of every region, with ``eta = len(rois)``."""
    eta = len(rois)
    if eta == 0:
        raise ValueError("no regions to score (eta = 0)")
    emap.eta = eta
    kappa = np.array([r.kappa for r in rois])
    nu = np.array([r.nu for r in rois])
    s = significance_arrays(kappa, nu, emap.p, eta)[0]
    return [float(v) for v in np.atleast_1d(f_act(s, eta))]


# ----------------------------------------------------------------------
# differentiable ops
# ----------------------------------------------------------------------

def _sig_fwd(kappa, nu, p, eta=1):
    s, dk, dn, dp = significance_arrays(kappa, nu, p, eta)
    return s.astype(kappa.dtype, copy=False), (dk, dn, dp, kappa.shape, nu.shape, p.shape)


def _sig_adj(ctx, g):
    dk, dn, dp, sk, sn, sp = ctx
    return (ad._unbroadcast(g * dk, sk), ad._unbroadcast(g * dn, sn),
            ad._unbroadcast(g * dp, sp))


def _f_act_forward(x, eta):
    z = np.asarray(x, dtype=np.float64) + math.log(eta)
    return np.tanh(0.5 * z)


def _f_act_fwd(x, eta=1):
    t = _f_act_forward(x, eta)
    # keep scores strictly below one even after a cast to float32
    top = np.nextafter(np.asarray(1.0, dtype=x.dtype), np.asarray(0.0, dtype=x.dtype))
    return np.minimum(t, top).astype(x.dtype, copy=False), t


def _f_act_adj(t, g):
    return (g * 0.5 * (1.0 - t * t),)


significance_op = register_op("significance", _sig_fwd, _sig_adj)
f_act_op = register_op("f_act", _f_act_fwd, _f_act_adj)


def score_rois(evidence: Tensor, boxes: Tensor, R: int = 8, nu_mode: str = "pooled"):
    """Score every box of every image in a batch.

    Parameters
    ----------
    evidence : Tensor
        ``(B, H, W)`` evidence maps.
    boxes : Tensor
        ``(B, n, 4)`` boxes ``(cx, cy, w, h)`` in map pixels; all ``n`` boxes
        of an image are tested together, so ``eta = n``.
    nu_mode : {"pooled", "box"}
        ``"pooled"`` uses the patch area ``R*R`` as the window size; ``"box"``
        uses the box area ``w*h`` and rescales the soft count to it.

    Returns
    -------
    (scores, significance) : tuple of Tensor, each ``(B, n)``.
    """
    b, n, _ = boxes.shape
    eta = n
    flat = ad.reshape(boxes, shape=(b * n, 4))
    bidx = np.repeat(np.arange(b, dtype=np.intp), n)
    patches = roi_pool(evidence, flat, R=R, bidx=bidx)               # (b*n, R, R)
    member = ad.logistic(patches)
    p = ad.spatial_mean(ad.logistic(evidence))                      # (b,)
    p = ad.clip(ad.reshape(p, shape=(b, 1)), lo=P_MIN, hi=P_MAX)
    if nu_mode == "pooled":
        kappa = ad.reshape(ad.spatial_sum(member), shape=(b, n))
        nu = np.full((1, 1), float(R * R), dtype=evidence.dtype)
    elif nu_mode == "box":
        area = ad.reshape(boxes[:, :, 2] * boxes[:, :, 3], shape=(b, n))
        kappa = ad.reshape(ad.spatial_mean(member), shape=(b, n)) * area
        nu = area
    else:
        raise ValueError(f"unknown nu_mode {nu_mode!r}")
    sig = significance_op(kappa, nu, p, eta=eta)
    # sig >= -ln(eta) exactly, but float32 rounding of that floor can dip the score below 0
    return ad.clip(f_act_op(sig, eta=eta), lo=0.0, hi=1.0), sig
