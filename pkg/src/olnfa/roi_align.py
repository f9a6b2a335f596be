"""Bilinear ROI pooling of single-channel maps.

Boxes are ``(cx, cy, w, h)`` in map pixel units, where pixel ``(i, j)``
covers ``[j, j+1) x [i, i+1)`` and its value sits at ``(j + 0.5, i + 0.5)``.
A box is clipped to ``[0, W] x [0, H]``, cut into ``R x R`` equal cells and
each cell is read once, at its centre, by bilinear interpolation of the four
surrounding pixel values. Reads outside the map return 0.
"""
from __future__ import annotations

import numpy as np

from ._backend import kernels
from .autodiff import register_op

__all__ = ["pool", "pool_adjoint", "pool_many", "clip_boxes", "roi_pool"]


class DegenerateBoxError(ValueError):
    """A proposal with no area left after clipping to the map."""


def clip_boxes(boxes: np.ndarray, height: int, width: int):
    """Corners ``(x1, y1, x2, y2)`` clipped to the map, plus pass-through masks.

    The masks flag which raw corners were inside the map, i.e. which ones
    still move when the box does.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx, cy, w, h = boxes.T
    if np.any(w <= 0) or np.any(h <= 0):
        raise DegenerateBoxError("box width and height must be positive")
    raw = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    hi = np.array([width, height, width, height], dtype=np.float64)
    corners = np.clip(raw, 0.0, hi)
    free = (raw >= 0.0) & (raw <= hi)
    if np.any(corners[:, 2] <= corners[:, 0]) or np.any(corners[:, 3] <= corners[:, 1]):
        raise DegenerateBoxError("box has zero area after clipping to the map")
    return np.ascontiguousarray(corners), free


def _as_maps(maps) -> np.ndarray:
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if maps.ndim != 3:
        raise ValueError(f"expected (H, W) or (B, H, W) maps, got shape {maps.shape}")
    return np.ascontiguousarray(maps)


def _batch_index(bidx, n: int) -> np.ndarray:
    if bidx is None:
        return np.zeros(n, dtype=np.intp)
    return np.ascontiguousarray(np.asarray(bidx, dtype=np.intp).reshape(n))


def pool_many(maps, boxes, R: int, bidx=None) -> np.ndarray:
    """Pool ``n`` boxes; ``bidx[r]`` picks the map each box reads from."""
    maps = _as_maps(maps)
    corners, _ = clip_boxes(boxes, maps.shape[1], maps.shape[2])
    return kernels.roi_align_forward(maps, corners, _batch_index(bidx, len(corners)), int(R))


def pool_many_adjoint(maps, boxes, R: int, upstream, bidx=None):
    maps = _as_maps(maps)
    corners, free = clip_boxes(boxes, maps.shape[1], maps.shape[2])
    upstream = np.ascontiguousarray(np.asarray(upstream, dtype=np.float64).reshape(len(corners), R, R))
    gmap, gcorner = kernels.roi_align_backward(
        maps, corners, _batch_index(bidx, len(corners)), int(R), upstream)
    gcorner = np.where(free, gcorner, 0.0)
    gx1, gy1, gx2, gy2 = gcorner.T
    gbox = np.stack([gx1 + gx2, gy1 + gy2, 0.5 * (gx2 - gx1), 0.5 * (gy2 - gy1)], axis=1)
    return gmap, gbox


def pool(feature_map, box, R: int = 8) -> np.ndarray:
    """Pool one box from an ``(H, W)`` map into an ``R x R`` patch.

    Raises :class:`DegenerateBoxError` if the clipped box has no area.
    """
    return pool_many(feature_map, np.asarray(box, dtype=np.float64)[None], R)[0]


def pool_adjoint(feature_map, box, R: int, upstream):
    """Vector-Jacobian product of :func:`pool`.

    Returns ``(map_adjoint, box_adjoint)``; the box adjoint is with respect
    to ``(cx, cy, w, h)`` and is zero along any clipped side.
    """
    gmap, gbox = pool_many_adjoint(feature_map, np.asarray(box, dtype=np.float64)[None], R,
                                   np.asarray(upstream)[None])
    return gmap[0], gbox[0]


def _roi_fwd(maps, boxes, R=8, bidx=None):
    squeeze = maps.ndim == 2
    m = _as_maps(maps)
    b = _batch_index(bidx, boxes.shape[0])
    out = pool_many(m, boxes, R, b).astype(maps.dtype, copy=False)
    return out, (m, np.asarray(boxes, dtype=np.float64), R, b, squeeze, maps.dtype, boxes.dtype)


def _roi_adj(ctx, g):
    m, boxes, R, b, squeeze, mdt, bdt = ctx
    gmap, gbox = pool_many_adjoint(m, boxes, R, g, b)
    if squeeze:
        gmap = gmap[0]
    return gmap.astype(mdt, copy=False), gbox.astype(bdt, copy=False)


roi_pool = register_op("roi_pool", _roi_fwd, _roi_adj)
