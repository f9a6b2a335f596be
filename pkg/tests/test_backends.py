import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olnfa import _backend

compiled = _backend.load(True)
fallback = _backend.load(False)
needs_compiled = pytest.mark.skipif(compiled is fallback, reason="compiled kernels not built")


def random_case(rng, b=3, h=9, w=11, n=40, R=5):
    maps = rng.normal(size=(b, h, w))
    cx, cy = rng.uniform(0, w, n), rng.uniform(0, h, n)
    bw, bh = rng.uniform(0.3, 5, n), rng.uniform(0.3, 5, n)
    corners = np.stack([np.clip(cx - bw / 2, 0, w), np.clip(cy - bh / 2, 0, h),
                        np.clip(cx + bw / 2, 0, w), np.clip(cy + bh / 2, 0, h)], axis=1)
    keep = (corners[:, 2] > corners[:, 0]) & (corners[:, 3] > corners[:, 1])
    corners = np.ascontiguousarray(corners[keep])
    bidx = rng.integers(0, b, len(corners)).astype(np.intp)
    up = rng.normal(size=(len(corners), R, R))
    return maps, corners, bidx, R, up


@needs_compiled
def test_roi_forward_agrees():
    rng = np.random.default_rng(0)
    for _ in range(20):
        maps, corners, bidx, R, _ = random_case(rng)
        np.testing.assert_allclose(compiled.roi_align_forward(maps, corners, bidx, R),
                                   fallback.roi_align_forward(maps, corners, bidx, R),
                                   rtol=0, atol=1e-13)


@needs_compiled
def test_roi_backward_agrees():
    rng = np.random.default_rng(1)
    for _ in range(20):
        maps, corners, bidx, R, up = random_case(rng)
        for a, b in zip(compiled.roi_align_backward(maps, corners, bidx, R, up),
                        fallback.roi_align_backward(maps, corners, bidx, R, up)):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_compiled
@settings(max_examples=300)
@given(st.integers(1, 300), st.data(), st.floats(1e-4, 1 - 1e-4))
# summation order differs between backends; both are checked against exact oracles elsewhere
def test_log_tail_agrees(nu, data, p):
    kappa = data.draw(st.integers(0, nu))
    a = compiled.log_binomial_tail(kappa, nu, p)
    b = fallback.log_binomial_tail(kappa, nu, p)
    assert a == pytest.approx(b, rel=1e-10, abs=1e-14)


@needs_compiled
def test_tail_tables_agree():
    for nu in (1, 10, 64, 500):
        for p in (0.01, 0.3, 0.77):
            np.testing.assert_allclose(compiled.log_binomial_tail_table(nu, p),
                                       fallback.log_binomial_tail_table(nu, p), rtol=1e-10, atol=1e-14)


def test_empty_roi_batch():
    maps = np.zeros((1, 4, 4))
    corners = np.zeros((0, 4))
    bidx = np.zeros(0, dtype=np.intp)
    for k in {compiled, fallback}:
        assert k.roi_align_forward(maps, corners, bidx, 3).shape == (0, 3, 3)
        gmap, gbox = k.roi_align_backward(maps, corners, bidx, 3, np.zeros((0, 3, 3)))
        assert gmap.shape == (1, 4, 4) and gbox.shape == (0, 4)


def test_environment_forces_fallback():
    code = "from olnfa import _backend; print(_backend.BACKEND)"
    env = dict(os.environ, OLNFA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_compiled
def test_compiled_selected_by_default():
    env = {k: v for k, v in os.environ.items() if k != "OLNFA_PURE_PYTHON"}
    code = "from olnfa import _backend; print(_backend.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "compiled"
