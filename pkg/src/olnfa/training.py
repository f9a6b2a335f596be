"""Training loop, Adam, and the checkpoint container."""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .detector import Detector, DetectorConfig, batch_targets, compute_loss
from .synth import Annotation, Item

log = logging.getLogger(__name__)

MAGIC = b"OLNFACKP"
FORMAT_VERSION = 1

__all__ = ["TrainingDiverged", "TrainResult", "Adam", "train", "save_checkpoint",
           "load_checkpoint", "checkpoint_bytes", "write_loss_curve"]


class TrainingDiverged(RuntimeError):
    pass


class Adam:
    def __init__(self, params: dict[str, ad.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data - update).astype(np.float32)


@dataclass
class TrainResult:
    model: Detector
    losses: list[float] = field(default_factory=list)
    bce: list[float] = field(default_factory=list)
    box: list[float] = field(default_factory=list)


def _flip(image: np.ndarray, anns: list[Annotation], horizontal: bool, vertical: bool):
    if horizontal:
        image = image[:, ::-1]
        anns = [Annotation(1.0 - a.cx, a.cy, a.w, a.h, a.cls) for a in anns]
    if vertical:
        image = image[::-1, :]
        anns = [Annotation(a.cx, 1.0 - a.cy, a.w, a.h, a.cls) for a in anns]
    return image, anns


def train(items: list[Item], config: DetectorConfig, seed: int = 0, steps: int | None = None,
          log_every: int = 0) -> TrainResult:
    """Train from scratch with Adam; deterministic for a given ``seed``."""
    if not items:
        raise ValueError("cannot train on an empty dataset")
    steps = config.steps if steps is None else steps
    rng = np.random.default_rng(seed)
    model = Detector(config, seed=int(rng.integers(2**31)))
    opt = Adam(model.params, config.lr, config.beta1, config.beta2, config.adam_eps)
    result = TrainResult(model)
    images = [np.asarray(it.image, dtype=np.float32) for it in items]
    order: list[int] = []
    bs = min(config.batch_size, len(items))
    for step in range(steps):
        if len(order) < bs:
            order.extend(rng.permutation(len(items)).tolist())
        idx, order = order[:bs], order[bs:]
        batch, anns = [], []
        for i in idx:
            img, a = images[i], items[i].annotations
            if config.augment:
                img, a = _flip(img, a, bool(rng.integers(2)), bool(rng.integers(2)))
            batch.append(img)
            anns.append(a)
        outputs = model.forward(np.stack(batch))
        targets = batch_targets(anns, config.strides, config.input_size)
        loss, parts = compute_loss(outputs, targets, config.lambda_box, config.pos_weight)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step} "
                                   f"(bce={parts['bce']}, box={parts['box']})")
        ad.backward(loss)
        opt.step()
        result.losses.append(value)
        result.bce.append(parts["bce"])
        result.box.append(parts["box"])
        if log_every and (step % log_every == 0 or step == steps - 1):
            log.info("step %d loss %.5f (bce %.5f box %.5f)", step, value, parts["bce"], parts["box"])
    return result


# ----------------------------------------------------------------------
# checkpoint container
#
#   magic "OLNFACKP" | u32 version | u32 len + config JSON (utf-8)
#   u32 tensor count | per tensor: u16 len + name, u8 ndim, ndim x u32 dims,
#   row-major little-endian float32 payload
# ----------------------------------------------------------------------

def checkpoint_bytes(model: Detector, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta = {"detector": model.config.to_dict(), **(extra or {})}
    cfg = json.dumps(meta, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: Detector, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, extra))
    return path


def load_checkpoint(path) -> tuple[Detector, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path} is not an olnfa checkpoint")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (n,) = take("<I")
    meta = json.loads(data[pos:pos + n])
    pos += n
    (count,) = take("<I")
    state = {}
    for _ in range(count):
        (ln,) = take("<H")
        name = data[pos:pos + ln].decode()
        pos += ln
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    config = DetectorConfig.from_dict(meta.pop("detector"))
    return Detector(config, state), meta


def write_loss_curve(path, result: TrainResult) -> Path:
    path = Path(path)
    lines = ["step\tloss\tbce\tbox\n"]
    lines += [f"{i}\t{l:.8e}\t{b:.8e}\t{x:.8e}\n"
              for i, (l, b, x) in enumerate(zip(result.losses, result.bce, result.box))]
    path.write_text("".join(lines))
    return path
