"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same float64 arithmetic. Used when the extension was not
built, or when ``OLNFA_PURE_PYTHON=1`` is set.
"""
from __future__ import annotations

import math

import numpy as np


def _log_pmf_sum(lo: int, hi: int, nu: int, log_p: float, log_q: float) -> float:
    """``ln sum_{i=lo}^{hi} pmf(i)`` via the ratio recurrence and log-sum-exp."""
    first = (math.lgamma(nu + 1.0) - math.lgamma(lo + 1.0)
             - math.lgamma(nu - lo + 1.0) + lo * log_p + (nu - lo) * log_q)
    i = np.arange(lo, hi, dtype=np.float64)
    steps = np.log((nu - i) / (i + 1.0)) + (log_p - log_q)
    terms = np.empty(hi - lo + 1)
    terms[0] = first
    # sequential accumulation, matching the compiled loop's rounding
    acc = first
    for j, s in enumerate(steps, start=1):
        acc = acc + s
        terms[j] = acc
    top = terms.max()
    return top + math.log(float(np.exp(terms - top).sum()))


def log_binomial_tail(kappa: int, nu: int, p: float) -> float:
    if kappa <= 0:
        return 0.0
    log_p, log_q = math.log(p), math.log1p(-p)
    if kappa <= nu * p:
        # tail near 1: subtract the short lower sum instead of rounding the long one
        lower = _log_pmf_sum(0, kappa - 1, nu, log_p, log_q)
        return math.log1p(-min(math.exp(lower), 1.0)) if lower < 0.0 else -math.inf
    return min(_log_pmf_sum(kappa, nu, nu, log_p, log_q), 0.0)


def log_binomial_tail_table(nu: int, p: float) -> np.ndarray:
    return np.array([log_binomial_tail(k, nu, p) for k in range(nu + 1)])


def _sample_grid(corners: np.ndarray, R: int):
    frac = (np.arange(R) + 0.5) / R
    x1, y1, x2, y2 = (corners[:, k:k + 1] for k in range(4))
    xs = x1 + frac * (x2 - x1)          # (n, R)
    ys = y1 + frac * (y2 - y1)
    return frac, xs, ys


def _neighbours(maps, bidx, xs, ys):
    B, H, W = maps.shape
    u = xs - 0.5
    v = ys - 0.5
    j0 = np.floor(u).astype(np.intp)
    i0 = np.floor(v).astype(np.intp)
    lx = (u - j0)[:, None, :]            # (n, 1, R)
    ly = (v - i0)[:, :, None]            # (n, R, 1)
    n, R = xs.shape
    ii = i0[:, :, None] + np.array([0, 0, 1, 1])[None, None, :]  # (n, R, 4)
    jj = j0[:, :, None] + np.array([0, 1, 0, 1])[None, None, :]
    rows = np.broadcast_to(ii[:, :, None, :], (n, R, R, 4))
    cols = np.broadcast_to(jj[:, None, :, :], (n, R, R, 4))
    inside = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    flat = (bidx[:, None, None, None] * H + np.clip(rows, 0, H - 1)) * W + np.clip(cols, 0, W - 1)
    vals = np.where(inside, maps.reshape(-1)[flat], 0.0)
    return lx, ly, vals, flat, inside


def roi_align_forward(maps, corners, bidx, R):
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    corners = np.ascontiguousarray(corners, dtype=np.float64)
    _, xs, ys = _sample_grid(corners, R)
    lx, ly, vals, _, _ = _neighbours(maps, np.asarray(bidx), xs, ys)
    v00, v01, v10, v11 = (vals[..., k] for k in range(4))
    return ((1 - ly) * ((1 - lx) * v00 + lx * v01)
            + ly * ((1 - lx) * v10 + lx * v11))


def roi_align_backward(maps, corners, bidx, R, upstream):
    maps = np.ascontiguousarray(maps, dtype=np.float64)
    corners = np.ascontiguousarray(corners, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    frac, xs, ys = _sample_grid(corners, R)
    lx, ly, vals, flat, inside = _neighbours(maps, np.asarray(bidx), xs, ys)
    weights = np.stack([(1 - ly) * (1 - lx), (1 - ly) * lx,
                        ly * (1 - lx), ly * lx], axis=-1)
    contrib = np.where(inside, weights * upstream[..., None], 0.0)
    gmap = np.bincount(flat.reshape(-1), weights=contrib.reshape(-1),
                       minlength=maps.size).reshape(maps.shape)

    v00, v01, v10, v11 = (vals[..., k] for k in range(4))
    dvdx = (1 - ly) * (v01 - v00) + ly * (v11 - v10)
    dvdy = (1 - lx) * (v10 - v00) + lx * (v11 - v01)
    gx = (upstream * dvdx).sum(axis=1)   # (n, R) over columns
    gy = (upstream * dvdy).sum(axis=2)   # (n, R) over rows
    gbox = np.stack([(gx * (1 - frac)).sum(1), (gy * (1 - frac)).sum(1),
                     (gx * frac).sum(1), (gy * frac).sum(1)], axis=1)
    return gmap, gbox
