"""Central-difference verification of registered adjoints.

:func:`gradcheck` compares the reverse-mode adjoints of a scalar function to
central finite differences at one point. :func:`run_suite` does this for
every op in a registry at many random points, each op reduced to a scalar
through a fixed random weighting of its output.

Points where the function has a kink within reach of the finite-difference
stencil (a ReLU corner, the background/target branch of the significance,
a pixel boundary crossed by a ROI sample) are not differentiable there;
an op's ``exclude`` hook flags them and they are skipped and resampled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import roi_align as _roi  # noqa: F401  (registers roi_pool)
from . import significance as _sig  # noqa: F401  (registers significance, f_act)
from .autodiff import REGISTRY, OpRegistry, Tensor

__all__ = ["GradcheckReport", "OpCase", "CASES", "gradcheck", "check_op", "run_suite", "format_suite"]


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    rel_errors: list[float] = field(default_factory=list)
    excluded: bool = False
    reason: str = ""


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-10)
    return float(np.max(np.abs(a - n), initial=0.0) / scale)


def gradcheck(fn: Callable[..., Tensor], point, step: float = 1e-6, tol: float = 1e-5,
              exclude: Callable | None = None) -> GradcheckReport:
    """Check the adjoints of ``fn`` at ``point`` against central differences.

    ``fn`` takes one :class:`Tensor` per array in ``point`` and returns a
    scalar tensor. The error for each input is the max-norm of the
    difference divided by the larger max-norm of the two gradients.
    ``exclude(point, step)`` may return a reason string to skip the point.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    point = [np.array(x, dtype=np.float64) for x in point]
    if exclude is not None:
        reason = exclude(point, step)
        if reason:
            return GradcheckReport(True, 0.0, excluded=True, reason=reason)
    leaves = [Tensor(x.copy(), requires_grad=True) for x in point]
    analytic = ad.backward(fn(*leaves), leaves)

    errors = []
    for k, x in enumerate(point):
        numeric = np.zeros_like(x)
        flat = numeric.reshape(-1)
        for idx in range(x.size):
            args_p = [y.copy() for y in point]
            args_m = [y.copy() for y in point]
            args_p[k].reshape(-1)[idx] += step
            args_m[k].reshape(-1)[idx] -= step
            fp = fn(*(Tensor(y) for y in args_p)).item()
            fm = fn(*(Tensor(y) for y in args_m)).item()
            flat[idx] = (fp - fm) / (2.0 * step)
        errors.append(_rel_error(analytic[k], numeric))
    worst = max(errors, default=0.0)
    return GradcheckReport(bool(worst < tol), worst, errors)


# ----------------------------------------------------------------------
# per-op sampling for the suite
# ----------------------------------------------------------------------

@dataclass
class OpCase:
    """How to draw an interior test point for one op."""

    sample: Callable[[np.random.Generator], tuple[list[np.ndarray], dict]]
    exclude: Callable[[list[np.ndarray], dict, float], str] | None = None
    step: float = 1e-6


def _near(values, targets, margin) -> bool:
    values = np.asarray(values, dtype=np.float64)
    return bool(np.any(np.abs(values[..., None] - np.asarray(targets, dtype=np.float64)) < margin))


def _pair(shape_a=(3, 4), shape_b=(3, 4), lo=-2.0, hi=2.0):
    def sample(rng):
        return [rng.uniform(lo, hi, shape_a), rng.uniform(lo, hi, shape_b)], {}
    return sample


def _div_sample(rng):
    b = rng.uniform(0.5, 2.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    return [rng.uniform(-2, 2, (3, 4)), b], {}


def _minmax_exclude(pt, attrs, step):
    return "kink" if np.min(np.abs(pt[0] - pt[1])) < 10 * step else ""


def _leaky_exclude(pt, attrs, step):
    return "kink" if np.min(np.abs(pt[0])) < 10 * step else ""


def _clip_sample(rng):
    return [rng.uniform(-2, 2, (4, 5))], {"lo": -1.0, "hi": 1.0}


def _clip_exclude(pt, attrs, step):
    return "kink" if _near(pt[0], [attrs["lo"], attrs["hi"]], 10 * step) else ""


def _conv_sample(rng):
    stride = int(rng.choice([1, 2]))
    padding = int(rng.choice([0, 1]))
    x = rng.normal(size=(2, 2, 6, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    return [x, w, b], {"stride": stride, "padding": padding}


def _gather_sample(rng):
    x = rng.normal(size=(4, 5))
    index = (rng.integers(0, 4, 6), rng.integers(0, 5, 6))  # repeats exercise accumulation
    return [x], {"index": index}


def _reshape_sample(rng):
    return [rng.normal(size=(2, 6))], {"shape": (3, 4)}


def _sum_sample(rng):
    return [rng.normal(size=(2, 3, 4))], {"axis": int(rng.integers(0, 3))}


def _sig_sample(rng):
    nu = rng.uniform(4.0, 64.0, 6)
    kappa = rng.uniform(0.02, 0.98, 6) * nu
    p = rng.uniform(0.05, 0.6, (1,))
    return [kappa, nu, p], {"eta": int(rng.integers(1, 500))}


def _sig_exclude(pt, attrs, step):
    kappa, nu, p = pt
    r = kappa / nu
    # one stencil step moves r by at most step/nu + step*kappa/nu^2
    if np.min(np.abs(r - p)) < 100 * step:
        return "branch-adjacent, excluded"
    return ""


def _f_act_sample(rng):
    return [rng.normal(0.0, 4.0, 7)], {"eta": int(rng.integers(1, 1000))}


def _roi_sample(rng):
    B, H, W, n = 2, 6, 7, 3
    maps = rng.normal(size=(B, H, W))
    cx = rng.uniform(1.0, W - 1.0, n)
    cy = rng.uniform(1.0, H - 1.0, n)
    w = rng.uniform(0.6, 2.0 * W, n)   # some boxes spill over and get clipped
    h = rng.uniform(0.6, 2.0 * H, n)
    boxes = np.stack([cx, cy, w, h], axis=1)
    R = int(rng.choice([2, 3, 4]))
    return [maps, boxes], {"R": R, "bidx": rng.integers(0, B, n)}


def _roi_exclude(pt, attrs, step):
    maps, boxes = pt
    H, W = maps.shape[-2:]
    R = attrs["R"]
    cx, cy, w, h = boxes.T
    raw = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    margin = 10 * step
    if _near(raw[:, [0, 2]], [0.0, W], margin) or _near(raw[:, [1, 3]], [0.0, H], margin):
        return "clip boundary"
    corners = np.clip(raw, 0.0, [W, H, W, H])
    frac = (np.arange(R) + 0.5) / R
    xs = corners[:, :1] + frac * (corners[:, 2:3] - corners[:, :1]) - 0.5
    ys = corners[:, 1:2] + frac * (corners[:, 3:4] - corners[:, 1:2]) - 0.5
    if np.min(np.abs(xs - np.round(xs))) < margin or np.min(np.abs(ys - np.round(ys))) < margin:
        return "sample on pixel grid line"
    return ""


CASES: dict[str, OpCase] = {
    "add": OpCase(_pair((3, 4), (1, 4))),
    "sub": OpCase(_pair((3, 4), (3, 1))),
    "mul": OpCase(_pair()),
    "div": OpCase(_div_sample),
    "ln": OpCase(lambda rng: ([rng.uniform(0.3, 3.0, (3, 4))], {})),
    "exp": OpCase(lambda rng: ([rng.uniform(-2.0, 2.0, (3, 4))], {})),
    "logistic": OpCase(lambda rng: ([rng.normal(0.0, 3.0, (3, 4))], {})),
    "leaky_relu": OpCase(lambda rng: ([rng.normal(size=(3, 4))], {"slope": 0.1}), _leaky_exclude),
    "minimum": OpCase(_pair(), _minmax_exclude),
    "maximum": OpCase(_pair(), _minmax_exclude),
    "clip": OpCase(_clip_sample, _clip_exclude),
    "sum": OpCase(_sum_sample),
    "mean": OpCase(_sum_sample),
    "spatial_sum": OpCase(lambda rng: ([rng.normal(size=(2, 3, 4))], {})),
    "spatial_mean": OpCase(lambda rng: ([rng.normal(size=(2, 3, 4))], {})),
    "reshape": OpCase(_reshape_sample),
    "transpose": OpCase(lambda rng: ([rng.normal(size=(2, 3, 4))], {"axes": (0, 2, 1)})),
    "gather": OpCase(_gather_sample),
    "conv2d": OpCase(_conv_sample),
    "significance": OpCase(_sig_sample, _sig_exclude, step=1e-5),
    "f_act": OpCase(_f_act_sample),
    "roi_pool": OpCase(_roi_sample, _roi_exclude),
}


def _weighted(op, attrs, weights):
    def fn(*tensors):
        out = op(*tensors, **attrs)
        return ad.sum_(ad.mul(out, weights))
    return fn


def check_op(op, case: OpCase, n_points: int = 100, seed: int = 0,
             tol: float = 1e-5, max_draws: int | None = None) -> dict:
    """Gradcheck ``op`` at ``n_points`` interior points; returns a summary dict."""
    rng = np.random.default_rng(seed)
    max_draws = max_draws or 20 * n_points
    worst, checked, excluded, failures = 0.0, 0, 0, 0
    for _ in range(max_draws):
        if checked >= n_points:
            break
        point, attrs = case.sample(rng)
        out_shape = np.shape(op.forward(*[np.asarray(x) for x in point], **attrs)[0])
        weights = rng.normal(size=out_shape)
        excl = (lambda pt, s: case.exclude(pt, attrs, s)) if case.exclude else None
        rep = gradcheck(_weighted(op, attrs, weights), point, case.step, tol, excl)
        if rep.excluded:
            excluded += 1
            continue
        checked += 1
        worst = max(worst, rep.max_rel_error)
        failures += not rep.passed
    return {"op": op.name, "points": checked, "excluded": excluded,
            "max_rel_error": worst, "passed": failures == 0 and checked == n_points}


def run_suite(registry: OpRegistry | None = None, cases: dict[str, OpCase] | None = None,
              n_points: int = 100, seed: int = 0, tol: float = 1e-5) -> list[dict]:
    """Check every op in ``registry``; ops with no sampling case fail as untested."""
    registry = registry or REGISTRY
    cases = CASES if cases is None else cases
    rows = []
    for k, name in enumerate(registry.names()):
        if name not in cases:
            rows.append({"op": name, "points": 0, "excluded": 0,
                         "max_rel_error": math.nan, "passed": False})
            continue
        rows.append(check_op(registry[name], cases[name], n_points, seed + k, tol))
    return rows


def format_suite(rows: list[dict]) -> str:
    lines = [f"{'op':<14} {'points':>6} {'excl':>5} {'max_rel_err':>12}  result"]
    for r in rows:
        status = "PASS" if r["passed"] else ("UNTESTED" if r["points"] == 0 else "FAIL")
        lines.append(f"{r['op']:<14} {r['points']:>6} {r['excluded']:>5} "
                     f"{r['max_rel_error']:>12.3e}  {status}")
    n_ok = sum(r["passed"] for r in rows)
    lines.append(f"{n_ok}/{len(rows)} ops passed")
    return "\n".join(lines)
