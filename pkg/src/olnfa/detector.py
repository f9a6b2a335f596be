"""A tiny anchor-free grid detector with two interchangeable objectness heads.

Backbone: a stack of stride-2 stages (3x3 conv, leaky ReLU, 3x3 conv, leaky
ReLU). The feature map of every stage whose stride is listed in
``DetectorConfig.strides`` is a detection level. Each level has 1x1 heads
for

* box regression, per cell ``(tx, ty, tw, th)`` decoded as
  ``cx = (j + sigmoid(tx)) * s`` and ``w = s * exp(clip(tw, -3, 3))``;
* a single-channel evidence map (used by the ``ol-nfa`` head);
* an objectness logit (used by the ``baseline`` head only).

``baseline`` objectness is ``sigmoid(logit)``. ``ol-nfa`` objectness pools
every cell's decoded box from the evidence map and scores it with
:func:`olnfa.significance.score_rois`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import nms
from .significance import score_rois

HEADS = ("baseline", "ol-nfa")
BOX_LOG_LIMIT = 3.0
SCORE_EPS = 1e-6

__all__ = [
    "DetectorConfig",
    "Detection",
    "LevelOutput",
    "Detector",
    "assign_targets",
    "compute_loss",
    "reference_loss",
]


@dataclass
class DetectorConfig:
    input_size: int = 128
    widths: tuple[int, ...] = (8, 16, 32)      # one per stride-2 stage
    strides: tuple[int, ...] = (4, 8)
    R: int = 8
    head: str = "ol-nfa"
    nu_mode: str = "pooled"
    lambda_box: float = 1.0
    pos_weight: float = 10.0
    lr: float = 1e-3
    batch_size: int = 16
    steps: int = 400
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    leaky_slope: float = 0.1
    augment: bool = True
    roi_box_grad: bool = False
    zero_init_heads: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(sorted(int(s) for s in self.strides))
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.nu_mode not in ("pooled", "box"):
            raise ValueError(f"nu_mode must be 'pooled' or 'box', got {self.nu_mode!r}")
        if self.lambda_box < 0:
            raise ValueError("lambda_box must be non-negative")
        for s in self.strides:
            if s < 2 or s & (s - 1):
                raise ValueError(f"strides must be powers of two >= 2, got {s}")
            if self.input_size % s:
                raise ValueError(f"stride {s} does not divide input size {self.input_size}")
        if int(math.log2(self.strides[-1])) > len(self.widths):
            raise ValueError(f"need {int(math.log2(self.strides[-1]))} stage widths "
                             f"for stride {self.strides[-1]}, got {len(self.widths)}")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown detector config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Detection:
    box: tuple[float, float, float, float]   # normalised (cx, cy, w, h)
    score: float
    significance: float
    level: int


@dataclass
class LevelOutput:
    stride: int
    grid: tuple[int, int]
    boxes: Tensor                 # (B, 4, n) image pixels, (cx, cy, w, h)
    scores: Tensor                # (B, n) in [0, 1)
    evidence: Tensor              # (B, h, w)
    significance: Tensor | None = None
    logits: Tensor | None = None


def _init_params(cfg: DetectorConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def conv(name, cin, cout, k, std=None):
        std = math.sqrt(2.0 / (cin * k * k)) if std is None else std
        params[f"{name}.weight"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        params[f"{name}.bias"] = np.zeros(cout, dtype=np.float32)

    cin = 1
    n_stages = int(math.log2(cfg.strides[-1]))
    for k in range(n_stages):
        conv(f"stage{k}.down", cin, cfg.widths[k], 3)
        conv(f"stage{k}.conv", cfg.widths[k], cfg.widths[k], 3)
        cin = cfg.widths[k]
    for s in cfg.strides:
        c = cfg.widths[int(math.log2(s)) - 1]
        zero = 0.0 if cfg.zero_init_heads else None
        conv(f"level{s}.box", c, 4, 1, std=0.0 if cfg.zero_init_heads else 0.01)
        conv(f"level{s}.evidence", c, 1, 1, std=zero)
        conv(f"level{s}.obj", c, 1, 1, std=0.0 if cfg.zero_init_heads else 0.01)
        if not cfg.zero_init_heads:
            # objectness prior of ~8 targets per image, as in YOLO bias init
            params[f"level{s}.obj.bias"][:] = math.log(8.0 / (cfg.input_size // s) ** 2)
    return params


class Detector:
    def __init__(self, config: DetectorConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0):
        self.config = config
        raw = params if params is not None else _init_params(config, seed)
        expected = _init_params(config, 0)
        if set(raw) != set(expected) or any(raw[k].shape != expected[k].shape for k in expected):
            raise ValueError("checkpoint weights do not match the detector configuration")
        self.params = {k: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True, name=k)
                       for k, v in sorted(raw.items())}

    # ------------------------------------------------------------------
    def _conv(self, x, name, stride=1, padding=None):
        w = self.params[f"{name}.weight"]
        k = w.shape[-1]
        return ad.conv2d(x, w, self.params[f"{name}.bias"], stride=stride,
                         padding=k // 2 if padding is None else padding)

    def features(self, x: Tensor) -> dict[int, Tensor]:
        slope = self.config.leaky_slope
        feats = {}
        n_stages = int(math.log2(self.config.strides[-1]))
        for k in range(n_stages):
            x = ad.leaky_relu(self._conv(x, f"stage{k}.down", stride=2), slope=slope)
            x = ad.leaky_relu(self._conv(x, f"stage{k}.conv"), slope=slope)
            stride = 2 ** (k + 1)
            if stride in self.config.strides:
                feats[stride] = x
        return feats

    def forward(self, images) -> list[LevelOutput]:
        """Run the network on a ``(B, H, W)`` or ``(B, 1, H, W)`` batch in ``[0, 1]``."""
        cfg = self.config
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 2:
            x = x[None]
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[1:] != (1, cfg.input_size, cfg.input_size):
            raise ValueError(f"expected images of size {cfg.input_size}, got {x.shape[-2:]}")
        if x.min() < 0.0 or x.max() > 1.0 or not np.isfinite(x).all():
            raise ValueError("input images must be normalised to [0, 1]")
        feats = self.features(Tensor(x))
        b = x.shape[0]
        outs = []
        for s in cfg.strides:
            f = feats[s]
            h, w = f.shape[-2:]
            n = h * w
            raw = ad.reshape(self._conv(f, f"level{s}.box", padding=0), shape=(b, 4, n))
            boxes = self._decode(raw, s, h, w)
            evidence = ad.reshape(self._conv(f, f"level{s}.evidence", padding=0), shape=(b, h, w))
            out = LevelOutput(s, (h, w), boxes, None, evidence)
            if cfg.head == "baseline":
                logits = ad.reshape(self._conv(f, f"level{s}.obj", padding=0), shape=(b, n))
                out.logits = logits
                out.scores = ad.logistic(logits)
            else:
                fboxes = ad.transpose(boxes, axes=(0, 2, 1)) * np.float32(1.0 / s)
                if not cfg.roi_box_grad:
                    fboxes = Tensor(fboxes.data)
                out.scores, out.significance = score_rois(evidence, fboxes, cfg.R, cfg.nu_mode)
            outs.append(out)
        return outs

    @staticmethod
    def _decode(raw: Tensor, stride: int, h: int, w: int) -> Tensor:
        jj, ii = np.meshgrid(np.arange(w), np.arange(h))
        offset = np.zeros((1, 4, h * w), dtype=np.float32)
        offset[0, 0] = jj.reshape(-1)
        offset[0, 1] = ii.reshape(-1)
        xy_mask = np.array([1, 1, 0, 0], dtype=np.float32).reshape(1, 4, 1)
        wh_mask = 1.0 - xy_mask
        xy = (ad.logistic(raw) + offset) * xy_mask
        wh = ad.exp(ad.clip(raw, lo=-BOX_LOG_LIMIT, hi=BOX_LOG_LIMIT)) * wh_mask
        return (xy + wh) * np.float32(stride)

    # ------------------------------------------------------------------
    def detect(self, image, score_threshold: float = 0.5, nms_iou: float = 0.5) -> list[Detection]:
        """Threshold, then greedy NMS across all levels; boxes normalised to [0, 1]."""
        outs = self.forward(np.asarray(image)[None])
        size = float(self.config.input_size)
        boxes, scores, sigs, levels = [], [], [], []
        for lvl in outs:
            sc = lvl.scores.data[0].astype(np.float64)
            keep = sc >= score_threshold
            if not keep.any():
                continue
            boxes.append(lvl.boxes.data[0].T[keep].astype(np.float64) / size)
            scores.append(sc[keep])
            sig = lvl.significance.data[0][keep] if lvl.significance is not None else np.full(keep.sum(), np.nan)
            sigs.append(sig.astype(np.float64))
            levels.append(np.full(keep.sum(), lvl.stride))
        if not scores:
            return []
        boxes, scores = np.concatenate(boxes), np.concatenate(scores)
        sigs, levels = np.concatenate(sigs), np.concatenate(levels)
        return [Detection(tuple(float(v) for v in boxes[i]), float(scores[i]),
                          float(sigs[i]), int(levels[i]))
                for i in nms(boxes, scores, nms_iou)]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}


# ----------------------------------------------------------------------
# targets and loss
# ----------------------------------------------------------------------

@dataclass
class LevelTargets:
    stride: int
    objectness: np.ndarray        # (n,) 0/1
    boxes: np.ndarray             # (n, 4) image pixels; dummy unit boxes at negatives
    collisions: int = 0


def assign_targets(annotations, strides, input_size: int) -> list[LevelTargets]:
    """Mark the cell holding each target centre, at the level whose stride is
    closest in log scale to the target size ``sqrt(w*h)`` (image pixels).

    Two targets landing in one cell: the larger one is kept and the clash is
    counted in ``collisions``.
    """
    strides = sorted(strides)
    levels = []
    for s in strides:
        g = input_size // s
        tb = np.tile(np.array([0.5, 0.5, 1.0, 1.0]), (g * g, 1))
        levels.append(LevelTargets(s, np.zeros(g * g), tb))
    claimed: dict[tuple[int, int], float] = {}
    for a in annotations:
        cx, cy, w, h = (v * input_size for v in (a.cx, a.cy, a.w, a.h))
        if not (0 <= cx <= input_size and 0 <= cy <= input_size) or w <= 0 or h <= 0:
            raise ValueError(f"annotation outside the image: {a}")
        size = math.sqrt(w * h)
        li = int(np.argmin([abs(math.log(size / s)) for s in strides]))
        s = strides[li]
        g = input_size // s
        cell = min(int(cy // s), g - 1) * g + min(int(cx // s), g - 1)
        area = w * h
        key = (li, cell)
        if key in claimed:
            levels[li].collisions += 1
            if area <= claimed[key]:
                continue
        claimed[key] = area
        levels[li].objectness[cell] = 1.0
        levels[li].boxes[cell] = (cx, cy, w, h)
    return levels


def batch_targets(annotation_lists, strides, input_size):
    per_image = [assign_targets(a, strides, input_size) for a in annotation_lists]
    out = []
    for li, s in enumerate(sorted(strides)):
        obj = np.stack([t[li].objectness for t in per_image])
        box = np.stack([t[li].boxes for t in per_image]).transpose(0, 2, 1)  # (B, 4, n)
        out.append((obj.astype(np.float32), box.astype(np.float32)))
    return out


def _iou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """IoU between predicted ``(B, 4, n)`` boxes and constant targets."""
    px, py, pw, ph = (pred[:, k] for k in range(4))
    tx, ty, tw, th = (target[:, k] for k in range(4))
    ix = ad.maximum(ad.minimum(px + pw * 0.5, tx + tw * 0.5) - ad.maximum(px - pw * 0.5, tx - tw * 0.5), 0.0)
    iy = ad.maximum(ad.minimum(py + ph * 0.5, ty + th * 0.5) - ad.maximum(py - ph * 0.5, ty - th * 0.5), 0.0)
    inter = ix * iy
    union = pw * ph + tw * th - inter
    return inter / union


def compute_loss(outputs: list[LevelOutput], targets, lambda_box: float, pos_weight: float = 1.0):
    """Mean BCE over all cells of all levels + ``lambda_box * sum(1 - IoU)`` over
    positive cells, both averaged over the batch. Positive cells carry weight
    ``pos_weight`` inside the BCE.

    Returns ``(loss, parts)`` where ``parts`` holds the two terms as floats.
    """
    if len(outputs) != len(targets):
        raise ValueError("predictions and targets have different level counts")
    b = outputs[0].scores.shape[0]
    n_cells = sum(o.scores.shape[1] for o in outputs)
    bce_total = None
    box_total = None
    for out, (obj, tbox) in zip(outputs, targets):
        if out.scores.shape != obj.shape or out.boxes.shape != tbox.shape:
            raise ValueError(f"shape mismatch at stride {out.stride}: "
                             f"{out.scores.shape} vs {obj.shape}")
        s = ad.clip(out.scores, lo=SCORE_EPS, hi=1.0 - SCORE_EPS)
        bce = ad.sum_((obj * np.float32(pos_weight)) * ad.ln(s) + (1.0 - obj) * ad.ln(1.0 - s))
        bce = bce * np.float32(-1.0)
        bce_total = bce if bce_total is None else bce_total + bce
        if lambda_box > 0 and obj.any():
            term = ad.sum_((1.0 - _iou_tensor(out.boxes, tbox)) * obj)
            box_total = term if box_total is None else box_total + term
    loss = bce_total * np.float32(1.0 / (b * n_cells))
    box_value = 0.0
    if box_total is not None:
        loss = loss + box_total * np.float32(lambda_box / b)
        box_value = float(box_total.data) / b
    return loss, {"bce": float(bce_total.data) / (b * n_cells), "box": box_value}


def reference_loss(scores, boxes, targets, lambda_box: float, pos_weight: float = 1.0) -> float:
    """Straight-line float64 evaluation of :func:`compute_loss`, cell by cell."""
    total_bce, total_box, n_cells, batch = 0.0, 0.0, 0, None
    for sc, bx, (obj, tbox) in zip(scores, boxes, targets):
        sc, bx = np.asarray(sc, np.float64), np.asarray(bx, np.float64)
        batch = sc.shape[0]
        n_cells += sc.shape[1]
        for i in range(sc.shape[0]):
            for c in range(sc.shape[1]):
                s = min(max(sc[i, c], SCORE_EPS), 1.0 - SCORE_EPS)
                t = obj[i, c]
                total_bce -= pos_weight * t * math.log(s) + (1 - t) * math.log(1 - s)
                if t:
                    p, q = bx[i, :, c], np.asarray(tbox[i, :, c], np.float64)
                    iw = max(0.0, min(p[0] + p[2] / 2, q[0] + q[2] / 2) - max(p[0] - p[2] / 2, q[0] - q[2] / 2))
                    ih = max(0.0, min(p[1] + p[3] / 2, q[1] + q[3] / 2) - max(p[1] - p[3] / 2, q[1] - q[3] / 2))
                    inter = iw * ih
                    total_box += 1.0 - inter / (p[2] * p[3] + q[2] * q[3] - inter)
    return total_bce / (batch * n_cells) + lambda_box * total_box / batch


def config_json(cfg: DetectorConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
