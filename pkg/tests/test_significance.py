import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olnfa import autodiff as ad
from olnfa.autodiff import Tensor
from olnfa.gradcheck import gradcheck
from olnfa.nfa import f_act, significance_hoeffding
from olnfa.significance import (EvidenceMap, Roi, global_density, objectness_scores, score_rois,
                                soft_count)


def sig(v):
    return 1.0 / (1.0 + np.exp(-v))


def tiles(size, step):
    """Integer-aligned step x step boxes tiling a size x size map."""
    c = np.arange(step / 2, size, step)
    return [(x, y, float(step), float(step)) for y in c for x in c]


# -- soft counts and density -------------------------------------------------

def test_soft_count_examples():
    assert soft_count(np.zeros((4, 4))) == 8.0
    assert soft_count(np.full((4, 4), 20.0)) == pytest.approx(16.0, abs=1e-6)
    patch = np.random.default_rng(0).normal(size=(8, 8)) * 3
    assert soft_count(patch) == pytest.approx(sig(patch).sum(), rel=1e-14)
    with pytest.raises(ValueError):
        soft_count(np.array([[np.nan]]))


@settings(max_examples=100)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=64))
def test_soft_count_inside_bounds(values):
    k = soft_count(np.array(values))
    assert 0.0 <= k <= len(values)


def test_global_density_examples():
    assert global_density(np.zeros((5, 5))) == 0.5
    assert global_density(np.full((5, 5), -40.0)) == 1e-6
    assert global_density(np.full((5, 5), 40.0)) == 1 - 1e-6
    m = np.random.default_rng(1).normal(size=(9, 9))
    assert global_density(m) == pytest.approx(sig(m).mean(), rel=1e-14)
    assert EvidenceMap(m).p == global_density(m)
    with pytest.raises(ValueError):
        global_density(np.zeros((0, 3)))


# -- objectness scores -------------------------------------------------------

def test_background_roi_scores_zero():
    m = np.zeros((16, 16))
    m[:8] = 1.0
    emap = EvidenceMap(m)
    rois = [Roi.from_map(emap, (4, 12, 8, 8)), Roi.from_map(emap, (12, 12, 8, 8))]
    assert objectness_scores(emap, rois) == [0.0, 0.0]
    assert emap.eta == 2


def test_bright_blob_scores_high():
    m = np.full((16, 16), -20.0)
    m[6:8, 9:11] = 20.0
    emap = EvidenceMap(m)
    roi = Roi.from_map(emap, (10.0, 7.0, 2.0, 2.0), R=8)
    # independent recomputation from the nfa formulas
    kappa = sig(roi.patch).sum()
    p = sig(m).mean()
    s = significance_hoeffding(kappa, 64, p, 1).value
    assert roi.nu == 64 and roi.kappa == pytest.approx(kappa, rel=1e-14)
    score = objectness_scores(emap, [roi])[0]
    assert score == pytest.approx(f_act(s, 1), rel=1e-14)
    assert score > 0.9


def test_eta_zero_rejected():
    with pytest.raises(ValueError, match="eta"):
        objectness_scores(EvidenceMap(np.zeros((4, 4))), [])


def test_noise_map_mean_score_small():
    rng = np.random.default_rng(2)
    boxes = tiles(64, 8)
    means = []
    for _ in range(1000):
        emap = EvidenceMap(rng.normal(size=(64, 64)))
        rois = [Roi.from_map(emap, b) for b in boxes]
        means.append(np.mean(objectness_scores(emap, rois)))
    assert np.mean(means) < 0.05


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 5.0))
def test_monotone_response(seed, c):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(128, 128))
    box = (20.0, 36.0, 8.0, 8.0)
    before = objectness_scores(EvidenceMap(m), [Roi.from_map(EvidenceMap(m), box)])[0]
    bumped = m.copy()
    # pixels read by the box's samples: rows 32..39, columns 16..23
    bumped[32:40, 16:24] += c
    after = objectness_scores(EvidenceMap(bumped), [Roi.from_map(EvidenceMap(bumped), box)])[0]
    assert after >= before - 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    emap = EvidenceMap(rng.normal(size=(24, 24)) * 2)
    rois = [Roi.from_map(emap, b) for b in tiles(24, 6)]
    perm = rng.permutation(len(rois))
    base = objectness_scores(emap, rois)
    permuted = objectness_scores(emap, [rois[i] for i in perm])
    assert permuted == [base[i] for i in perm]


@given(st.integers(0, 2**31 - 1))
def test_scores_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    emap = EvidenceMap(rng.normal(size=(16, 16)) * rng.uniform(0.1, 50))
    rois = [Roi.from_map(emap, b) for b in tiles(16, 4)]
    s = np.array(objectness_scores(emap, rois))
    assert np.all((s >= 0) & (s < 1))


# -- differentiable path -----------------------------------------------------

def test_score_rois_matches_numpy_path():
    rng = np.random.default_rng(3)
    ev = rng.normal(size=(2, 12, 12)) * 2
    boxes = rng.uniform([2, 2, 1, 1], [10, 10, 4, 4], size=(2, 5, 4))
    scores, significance = score_rois(Tensor(ev), Tensor(boxes), R=8)
    for b in range(2):
        emap = EvidenceMap(ev[b])
        rois = [Roi.from_map(emap, bx) for bx in boxes[b]]
        assert np.allclose(scores.data[b], objectness_scores(emap, rois), atol=1e-12)
        want = [significance_hoeffding(r.kappa, r.nu, emap.p, 5).value for r in rois]
        assert np.allclose(significance.data[b], want, atol=1e-10)


def test_score_rois_box_mode():
    rng = np.random.default_rng(4)
    ev = rng.normal(size=(1, 12, 12)) * 2
    boxes = rng.uniform([2, 2, 1, 1], [10, 10, 4, 4], size=(1, 4, 4))
    _, s = score_rois(Tensor(ev), Tensor(boxes), R=8, nu_mode="box")
    p = sig(ev[0]).mean()
    for k, bx in enumerate(boxes[0]):
        area = bx[2] * bx[3]
        roi = Roi.from_map(EvidenceMap(ev[0]), bx)
        want = significance_hoeffding(roi.kappa / 64 * area, area, p, 4).value
        assert s.data[0, k] == pytest.approx(want, abs=1e-10)
    with pytest.raises(ValueError):
        score_rois(Tensor(ev), Tensor(boxes), nu_mode="area")


def test_gradient_reaches_pixels_inside_roi():
    m = np.full((1, 16, 16), -2.0)
    m[0, 6:9, 6:9] = -1.2     # weak enough that the score stays below saturation
    ev = Tensor(m, requires_grad=True)
    boxes = Tensor(np.array([[[7.5, 7.5, 3.0, 3.0], [2.0, 2.0, 2.0, 2.0]]]))
    scores, s = score_rois(ev, boxes)
    assert s.data[0, 0] > -math.log(2) and scores.data[0, 0] < 0.999   # non-background, unsaturated
    ad.backward(ad.sum_(scores[:, 0]))
    assert ev.grad[0, 6:9, 6:9].max() > 0


def test_score_rois_gradcheck_through_maps_and_boxes():
    rng = np.random.default_rng(5)
    ev0 = rng.normal(size=(1, 8, 8)) * 1.5
    ev0[0, 3:5, 3:5] += 3.0
    boxes0 = np.array([[[4.1, 4.2, 2.3, 1.9], [2.6, 5.7, 1.7, 2.2], [6.3, 2.4, 2.1, 2.6]]])

    def fn(ev, bx):
        sc, _ = score_rois(ev, bx, R=4)
        return ad.sum_(sc * np.array([[0.7, -0.3, 1.1]]))

    rep = gradcheck(fn, [ev0, boxes0], step=1e-6, tol=1e-5)
    assert rep.passed, rep.rel_errors
