import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from olnfa import autodiff as ad
from olnfa.boxes import iou_matrix, nms
from olnfa.detector import (Detector, DetectorConfig, assign_targets, batch_targets, compute_loss,
                            reference_loss)
from olnfa.synth import Annotation, Item, SceneConfig, generate_scene
from olnfa.training import (Adam, TrainingDiverged, checkpoint_bytes, load_checkpoint, save_checkpoint,
                            train)

SMALL = dict(input_size=32, widths=(4, 8, 8), batch_size=2)


def ann_px(cx, cy, w, h, size=128):
    return Annotation(cx / size, cy / size, w / size, h / size)


def small_items(n=2, seed=0):
    cfg = SceneConfig(size=32, targets=(1, 1), area=(6, 30))
    return [Item(f"i{s}", *generate_scene(seed + s, cfg)) for s in range(n)]


# -- config ------------------------------------------------------------------------

@pytest.mark.parametrize("bad", [dict(head="dense"), dict(strides=(3,)), dict(strides=(4, 64)),
                                 dict(input_size=100, strides=(8,)), dict(lambda_box=-1.0),
                                 dict(nu_mode="other")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        DetectorConfig(**bad)


def test_config_dict_round_trip():
    cfg = DetectorConfig(head="baseline", strides=(8, 4))
    assert cfg.strides == (4, 8)
    assert DetectorConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        DetectorConfig.from_dict({"head": "baseline", "depth": 3})


# -- forward -----------------------------------------------------------------------

def test_zero_init_heads_symmetry():
    img = np.random.default_rng(0).uniform(size=(2, 128, 128))
    base = Detector(DetectorConfig(head="baseline", zero_init_heads=True)).forward(img)
    for lvl in base:
        assert np.all(lvl.scores.data == 0.5)
    ol = Detector(DetectorConfig(head="ol-nfa", zero_init_heads=True)).forward(img)
    for lvl in ol:
        s = lvl.scores.data
        assert np.all(s == s.flat[0])
        assert 0.0 <= s.flat[0] < 1.0


@pytest.mark.parametrize("strides", [(4, 8), (2, 4, 8)])
def test_box_count_per_level(strides):
    cfg = DetectorConfig(strides=strides, head="baseline")
    outs = Detector(cfg).forward(np.zeros((1, 128, 128)))
    assert [o.stride for o in outs] == list(strides)
    for o in outs:
        n = (128 // o.stride) ** 2
        assert o.boxes.shape == (1, 4, n) and o.scores.shape == (1, n)
        assert o.evidence.shape == (1, 128 // o.stride, 128 // o.stride)


def test_decoded_centre_stays_in_its_cell():
    cfg = DetectorConfig(head="baseline")
    outs = Detector(cfg, seed=3).forward(np.random.default_rng(1).uniform(size=(1, 128, 128)))
    for o in outs:
        g = 128 // o.stride
        cx = o.boxes.data[0, 0].reshape(g, g) / o.stride
        cy = o.boxes.data[0, 1].reshape(g, g) / o.stride
        jj, ii = np.meshgrid(np.arange(g), np.arange(g))
        assert np.all((cx >= jj) & (cx <= jj + 1) & (cy >= ii) & (cy <= ii + 1))
        assert np.all(o.boxes.data[0, 2:] > 0)


@pytest.mark.parametrize("img", [np.full((128, 128), 1.5), np.full((128, 128), -0.1),
                                 np.full((128, 128), np.nan), np.zeros((64, 64))])
def test_bad_input_rejected(img):
    with pytest.raises(ValueError):
        Detector(DetectorConfig()).forward(img)


def test_incompatible_weights_rejected():
    params = Detector(DetectorConfig(strides=(4, 8))).state_dict()
    with pytest.raises(ValueError, match="checkpoint"):
        Detector(DetectorConfig(strides=(4,)), params)


def test_olnfa_scores_follow_f_act():
    from olnfa.nfa import f_act
    cfg = DetectorConfig(head="ol-nfa")
    outs = Detector(cfg, seed=2).forward(np.random.default_rng(2).uniform(size=(1, 128, 128)))
    for o in outs:
        n = o.scores.shape[1]
        want = f_act(o.significance.data.astype(np.float64), n)
        assert np.allclose(o.scores.data, want, atol=1e-6)


# -- targets -----------------------------------------------------------------------

def test_small_centred_target_goes_to_stride_4():
    # 3 x 2 px box: area 6, size sqrt(6) is nearest to stride 4 in log scale
    levels = assign_targets([ann_px(64.0, 64.0, 3.0, 2.0)], (4, 8), 128)
    assert levels[0].objectness.sum() == 1 and levels[1].objectness.sum() == 0
    cell = int(np.flatnonzero(levels[0].objectness)[0])
    assert cell == 16 * 32 + 16
    assert np.allclose(levels[0].boxes[cell], (64, 64, 3, 2))


def test_large_target_goes_to_stride_8():
    levels = assign_targets([ann_px(30.0, 70.0, 10.0, 9.0)], (4, 8), 128)
    assert levels[0].objectness.sum() == 0 and levels[1].objectness.sum() == 1


def test_empty_annotations_all_negative():
    for lvl in assign_targets([], (4, 8), 128):
        assert lvl.objectness.sum() == 0 and lvl.collisions == 0


def test_two_targets_two_positives():
    levels = assign_targets([ann_px(10, 10, 3, 3), ann_px(100, 90, 3, 3)], (4, 8), 128)
    assert sum(l.objectness.sum() for l in levels) == 2


def test_collision_larger_wins():
    small, big = ann_px(41.0, 41.0, 2.0, 2.0), ann_px(42.0, 42.0, 3.0, 3.0)
    for order in ([small, big], [big, small]):
        lv = assign_targets(order, (4, 8), 128)[0]
        assert lv.objectness.sum() == 1 and lv.collisions == 1
        assert np.allclose(lv.boxes[np.flatnonzero(lv.objectness)[0]], (42, 42, 3, 3))


def test_target_outside_image_rejected():
    with pytest.raises(ValueError):
        assign_targets([Annotation(1.2, 0.5, 0.1, 0.1)], (4, 8), 128)


def test_boundary_centre_clamped_to_last_cell():
    lv = assign_targets([Annotation(1.0, 1.0, 0.02, 0.02)], (4,), 128)[0]
    assert lv.objectness[-1] == 1


# -- loss --------------------------------------------------------------------------

class Fake:
    """Stand-in for LevelOutput carrying fixed scores and boxes."""

    def __init__(self, scores, boxes, stride=4):
        self.scores = ad.Tensor(np.asarray(scores, np.float64), requires_grad=True)
        self.boxes = ad.Tensor(np.asarray(boxes, np.float64), requires_grad=True)
        self.stride = stride


def test_perfect_predictions_loss_tiny():
    anns = [[ann_px(64, 64, 3, 2), ann_px(20, 100, 12, 10)]]
    targets = batch_targets(anns, (4, 8), 128)
    outs = [Fake(np.where(obj > 0, 1 - 1e-6, 1e-6), box) for obj, box in targets]
    loss, parts = compute_loss(outs, targets, lambda_box=1.0, pos_weight=10.0)
    assert float(loss.data) < 1e-4 and parts["box"] < 1e-12


def test_half_scores_give_ln2_per_cell():
    targets = batch_targets([[]], (4, 8), 128)
    outs = [Fake(np.full_like(obj, 0.5), box) for obj, box in targets]
    loss, parts = compute_loss(outs, targets, lambda_box=1.0)
    assert float(loss.data) == pytest.approx(math.log(2), rel=1e-6)   # float32 targets
    assert parts["box"] == 0.0


def test_loss_matches_reference_on_random_cases():
    rng = np.random.default_rng(0)
    for trial in range(10):
        anns = [[ann_px(*rng.uniform(4, 124, 2), *rng.uniform(1, 20, 2)) for _ in range(rng.integers(0, 4))]
                for _ in range(2)]
        targets = batch_targets(anns, (8, 16), 64 * 2)
        scores = [rng.uniform(0, 1, obj.shape) for obj, _ in targets]
        boxes = [np.concatenate([rng.uniform(0, 128, (2, 2, obj.shape[1])),
                                 rng.uniform(0.5, 30, (2, 2, obj.shape[1]))], axis=1) for obj, _ in targets]
        outs = [Fake(s, b) for s, b in zip(scores, boxes)]
        lam, pw = rng.uniform(0, 3), rng.uniform(1, 20)
        loss, _ = compute_loss(outs, targets, lam, pw)
        assert float(loss.data) == pytest.approx(reference_loss(scores, boxes, targets, lam, pw), rel=1e-6)


def test_loss_shape_mismatch():
    targets = batch_targets([[]], (4, 8), 128)
    outs = [Fake(np.full((1, 10), 0.5), np.ones((1, 4, 10))), Fake(np.full((1, 10), 0.5), np.ones((1, 4, 10)))]
    with pytest.raises(ValueError):
        compute_loss(outs, targets, 1.0)
    with pytest.raises(ValueError):
        compute_loss(outs[:1], targets, 1.0)


@pytest.mark.parametrize("head", ["baseline", "ol-nfa"])
def test_lambda_zero_gives_zero_box_gradient(head):
    cfg = DetectorConfig(head=head, lambda_box=0.0, **SMALL)
    model = Detector(cfg, seed=1)
    items = small_items()
    outs = model.forward(np.stack([it.image for it in items]))
    targets = batch_targets([it.annotations for it in items], cfg.strides, cfg.input_size)
    loss, _ = compute_loss(outs, targets, cfg.lambda_box, cfg.pos_weight)
    ad.backward(loss)
    for name, p in model.params.items():
        if ".box." in name:
            assert p.grad is None or not np.any(p.grad), name
    assert any(p.grad is not None and np.any(p.grad) for n, p in model.params.items() if n.startswith("stage"))


# -- training ----------------------------------------------------------------------

@pytest.mark.parametrize("head", ["baseline", "ol-nfa"])
def test_training_deterministic(head):
    cfg = DetectorConfig(head=head, steps=3, **SMALL)
    items = small_items(3)
    a = checkpoint_bytes(train(items, cfg, seed=5).model)
    b = checkpoint_bytes(train(items, cfg, seed=5).model)
    c = checkpoint_bytes(train(items, cfg, seed=6).model)
    assert a == b and a != c


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train([], DetectorConfig(**SMALL))


def test_divergence_reported():
    cfg = DetectorConfig(head="baseline", steps=1, **SMALL)
    items = small_items(1)
    items[0].image[:] = 0.5
    import olnfa.training as tr
    orig = tr.compute_loss
    try:
        tr.compute_loss = lambda *a, **k: (ad.Tensor(np.array(np.nan)), {"bce": np.nan, "box": 0.0})
        with pytest.raises(TrainingDiverged, match="step 0"):
            train(items, cfg)
    finally:
        tr.compute_loss = orig


def test_olnfa_gradient_reaches_backbone():
    cfg = DetectorConfig(head="ol-nfa", lambda_box=0.0, **SMALL)
    model = Detector(cfg, seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    items = small_items(2)
    opt = Adam(model.params)
    outs = model.forward(np.stack([it.image for it in items]))
    loss, _ = compute_loss(outs, batch_targets([it.annotations for it in items], cfg.strides, 32), 0.0)
    ad.backward(loss)
    opt.step()
    changed = [k for k in before if k.startswith("stage") and not np.array_equal(before[k], model.params[k].data)]
    assert changed


def test_olnfa_scores_in_range_during_training():
    cfg = DetectorConfig(head="ol-nfa", lr=1e-2, **SMALL)
    model = Detector(cfg, seed=0)
    opt = Adam(model.params, lr=cfg.lr)
    items = small_items(2)
    x = np.stack([it.image for it in items])
    targets = batch_targets([it.annotations for it in items], cfg.strides, 32)
    for _ in range(25):
        outs = model.forward(x)
        for o in outs:
            assert np.all((o.scores.data >= 0) & (o.scores.data < 1))
        loss, _ = compute_loss(outs, targets, cfg.lambda_box, cfg.pos_weight)
        ad.backward(loss)
        opt.step()


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    model = Detector(DetectorConfig(head="baseline", **SMALL), seed=4)
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"seed": 4})
    loaded, meta = load_checkpoint(path)
    assert meta == {"seed": 4}
    assert loaded.config == model.config
    for k, v in model.state_dict().items():
        assert np.array_equal(v, loaded.state_dict()[k])
    assert checkpoint_bytes(loaded, {"seed": 4}) == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError, match="not an olnfa checkpoint"):
        load_checkpoint(bad)
    raw = bytearray(checkpoint_bytes(Detector(DetectorConfig(**SMALL))))
    raw[8] = 99
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)


# -- detect / NMS ------------------------------------------------------------------

def test_detect_threshold_one_is_empty():
    model = Detector(DetectorConfig(head="baseline"), seed=0)
    assert model.detect(np.zeros((128, 128)), score_threshold=1.0) == []


def test_detect_boxes_normalised_and_sorted():
    model = Detector(DetectorConfig(head="baseline", zero_init_heads=True), seed=0)
    dets = model.detect(np.zeros((128, 128)), score_threshold=0.5, nms_iou=0.5)
    assert dets
    assert all(0 <= d.box[0] <= 1 and 0 <= d.box[1] <= 1 for d in dets)
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    assert all(math.isnan(d.significance) for d in dets)


def test_nms_identical_boxes():
    keep = nms([[0.5, 0.5, 0.1, 0.1]] * 2, [0.9, 0.9])
    assert len(keep) == 1
    keep = nms([[0.5, 0.5, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1], [0.1, 0.1, 0.05, 0.05]], [0.3, 0.9, 0.5])
    assert list(keep) == [1, 2]
    assert len(nms(np.zeros((0, 4)), [])) == 0


box_st = st.tuples(st.integers(0, 8), st.integers(0, 8), st.integers(1, 4), st.integers(1, 4))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(box_st, st.integers(0, 3)), min_size=1, max_size=12), st.randoms())
def test_nms_independent_of_input_order(entries, rnd):
    boxes = np.array([b for b, _ in entries], dtype=float) / 8
    scores = np.array([s for _, s in entries], dtype=float) / 4
    kept = {tuple(boxes[i]) + (scores[i],) for i in nms(boxes, scores)}
    perm = list(range(len(entries)))
    rnd.shuffle(perm)
    kept2 = {tuple(boxes[perm][i]) + (scores[perm][i],) for i in nms(boxes[perm], scores[perm])}
    assert kept == kept2
    kb = boxes[nms(boxes, scores)]
    iou = iou_matrix(kb, kb)
    np.fill_diagonal(iou, 0)
    assert np.all(iou <= 0.5)
