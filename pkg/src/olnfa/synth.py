"""Synthetic infrared-like scenes and the on-disk dataset layout.

Layout of a dataset directory::

    images/<stem>.png          8- or 16-bit grayscale
    labels/<stem>.txt          one "0 cx cy w h" line per target, normalised
    splits/{train,val,test}.txt
    folds/fewshot_k<K>_f<F>.txt

Any dataset already in this layout (real or synthetic) loads through
:func:`load_dataset`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

__all__ = [
    "SceneConfig",
    "Annotation",
    "Item",
    "Dataset",
    "generate_scene",
    "split_dataset",
    "make_fewshot_folds",
    "write_dataset",
    "load_dataset",
    "read_labels",
    "format_labels",
]

# half-maximum area of an axis-aligned Gaussian: pi * 2 ln 2 * sx * sy
_HALF_MAX_AREA = 2.0 * math.pi * math.log(2.0)


@dataclass
class SceneConfig:
    size: int = 128
    background: str = "clouds"              # "flat" or "clouds"
    targets: tuple[int, int] = (1, 3)       # inclusive range per image
    amplitude: tuple[float, float] = (0.25, 0.6)
    area: tuple[float, float] = (2.0, 100.0)    # half-maximum area, pixels
    aspect: tuple[float, float] = (0.6, 1.6)
    noise: float = 0.02
    cloud_scale: tuple[float, float] = (3.0, 10.0)  # low-pass sigma, pixels
    cloud_contrast: tuple[float, float] = (0.1, 0.4)
    level: tuple[float, float] = (0.1, 0.4)        # background offset
    max_tries: int = 100

    def __post_init__(self):
        if self.background not in ("flat", "clouds"):
            raise ValueError(f"unknown background kind {self.background!r}")
        if self.size < 8:
            raise ValueError("image size must be at least 8")
        lo, hi = self.targets
        if lo < 0 or hi < lo:
            raise ValueError(f"bad target count range {self.targets}")
        if not 0 < self.area[0] <= self.area[1]:
            raise ValueError(f"bad area range {self.area}")
        for name in ("targets", "amplitude", "area", "aspect", "cloud_scale", "cloud_contrast", "level"):
            setattr(self, name, tuple(getattr(self, name)))


@dataclass(frozen=True)
class Annotation:
    cx: float
    cy: float
    w: float
    h: float
    cls: int = 0

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass
class Item:
    stem: str
    image: np.ndarray
    annotations: list[Annotation]


@dataclass
class Dataset:
    items: list[Item]
    splits: dict[str, list[str]] = field(default_factory=dict)
    folds: dict[tuple[int, int], list[str]] = field(default_factory=dict)

    def by_stem(self) -> dict[str, Item]:
        return {it.stem: it for it in self.items}

    def subset(self, stems) -> list[Item]:
        lookup = self.by_stem()
        return [lookup[s] for s in stems]


def _background(rng, cfg: SceneConfig) -> np.ndarray:
    n = cfg.size
    level = rng.uniform(*cfg.level)
    if cfg.background == "flat":
        return np.full((n, n), level)
    noise = rng.standard_normal((n, n))
    smooth = gaussian_filter(noise, rng.uniform(*cfg.cloud_scale), mode="wrap")
    smooth = (smooth - smooth.min()) / max(smooth.max() - smooth.min(), 1e-12)
    return level + rng.uniform(*cfg.cloud_contrast) * smooth


def _blob(n, cx, cy, sx, sy):
    coords = np.arange(n) + 0.5
    gx = np.exp(-0.5 * ((coords - cx) / sx) ** 2)
    gy = np.exp(-0.5 * ((coords - cy) / sy) ** 2)
    return np.outer(gy, gx)


def _draw_target(rng, cfg: SceneConfig):
    """One blob profile (peak 1) whose half-maximum area is inside ``cfg.area``."""
    n = cfg.size
    lo, hi = math.log(cfg.area[0]), math.log(cfg.area[1])
    for _ in range(cfg.max_tries):
        area = math.exp(rng.uniform(lo, hi))
        aspect = rng.uniform(*cfg.aspect)
        sx = math.sqrt(area / _HALF_MAX_AREA * aspect)
        sy = math.sqrt(area / _HALF_MAX_AREA / aspect)
        margin = 1.0
        cx = rng.uniform(margin, n - margin)
        cy = rng.uniform(margin, n - margin)
        prof = _blob(n, cx, cy, sx, sy)
        support = prof >= 0.5 * prof.max()
        measured = int(support.sum())
        # pixel-grid discretisation can push tiny blobs outside the range
        if cfg.area[0] <= measured <= cfg.area[1]:
            return prof, support
    return None


def _support_box(support: np.ndarray):
    rows = np.flatnonzero(support.any(axis=1))
    cols = np.flatnonzero(support.any(axis=0))
    return cols[0], rows[0], cols[-1] + 1, rows[-1] + 1   # x1, y1, x2, y2 in pixels


def generate_scene(seed: int, config: SceneConfig | None = None):
    """Render one scene; returns ``(image, annotations)``.

    The image is float64 in ``[0, 1]``; boxes are normalised ``(cx, cy, w, h)``
    tightly covering each target's half-maximum support. Targets whose
    (dilated) boxes would overlap an earlier one are redrawn; after
    ``max_tries`` failures the scene keeps fewer targets and logs it.
    """
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    n = cfg.size
    image = _background(rng, cfg)
    wanted = int(rng.integers(cfg.targets[0], cfg.targets[1] + 1))
    boxes: list[tuple[int, int, int, int]] = []
    annotations: list[Annotation] = []
    tries = 0
    while len(boxes) < wanted and tries < cfg.max_tries:
        tries += 1
        drawn = _draw_target(rng, cfg)
        if drawn is None:
            continue
        prof, support = drawn
        x1, y1, x2, y2 = _support_box(support)
        if any(x1 < bx2 + 2 and bx1 < x2 + 2 and y1 < by2 + 2 and by1 < y2 + 2
               for bx1, by1, bx2, by2 in boxes):
            continue
        boxes.append((x1, y1, x2, y2))
        image = image + rng.uniform(*cfg.amplitude) * prof
        annotations.append(Annotation(float(x1 + x2) / (2 * n), float(y1 + y2) / (2 * n),
                                      float(x2 - x1) / n, float(y2 - y1) / n))
    if len(boxes) < wanted:
        log.warning("scene %d: placed %d of %d targets", seed, len(boxes), wanted)
    if cfg.noise > 0:
        image = image + rng.normal(0.0, cfg.noise, image.shape)
    return np.clip(image, 0.0, 1.0), annotations


# ----------------------------------------------------------------------
# splits and folds
# ----------------------------------------------------------------------

def split_dataset(items, seed: int):
    """Seeded 60/20/20 split: sizes ``floor(0.6n)``, ``floor(0.2n)``, remainder."""
    items = list(items)
    n = len(items)
    if n < 5:
        raise ValueError(f"need at least 5 items to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train, n_val = (6 * n) // 10, (2 * n) // 10
    pick = [items[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


def make_fewshot_folds(train_set, k: int, n_folds: int = 3, seed: int = 0):
    """``n_folds`` pairwise-disjoint random subsets of size ``k``."""
    train_set = list(train_set)
    if k < 1 or n_folds < 1:
        raise ValueError("k and n_folds must be positive")
    if k * n_folds > len(train_set):
        raise ValueError(f"{n_folds} folds of {k} need {k * n_folds} items, have {len(train_set)}")
    order = np.random.default_rng(seed).permutation(len(train_set))
    return [[train_set[i] for i in order[f * k:(f + 1) * k]] for f in range(n_folds)]


# ----------------------------------------------------------------------
# disk IO
# ----------------------------------------------------------------------

def format_labels(annotations) -> str:
    return "".join(f"{a.cls} {a.cx:.6f} {a.cy:.6f} {a.w:.6f} {a.h:.6f}\n" for a in annotations)


def read_labels(path: Path) -> list[Annotation]:
    out = []
    if not path.exists():
        return out
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise ValueError(f"{path}:{lineno}: expected 'cls cx cy w h', got {line!r}")
        cls, cx, cy, w, h = int(parts[0]), *map(float, parts[1:])
        out.append(Annotation(cx, cy, w, h, cls))
    return out


def save_png(path: Path, image: np.ndarray, bits: int = 16) -> None:
    if bits == 16:
        arr = np.round(np.clip(image, 0.0, 1.0) * 65535).astype(np.uint16)
        Image.fromarray(arr).save(path, format="PNG")
    else:
        arr = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(path, format="PNG")


def load_png(path: Path) -> np.ndarray:
    """Grayscale image scaled to ``[0, 1]`` from 8- or 16-bit storage."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return np.clip(arr / 65535.0, 0.0, 1.0)
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def _write_list(path: Path, stems) -> None:
    path.write_text("".join(f"{s}\n" for s in stems))


def write_dataset(out_dir, items: list[Item], splits: dict[str, list[str]] | None = None,
                  folds: dict[tuple[int, int], list[str]] | None = None, bits: int = 16) -> Path:
    out = Path(out_dir)
    for sub in ("images", "labels", "splits", "folds"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for it in items:
        save_png(out / "images" / f"{it.stem}.png", it.image, bits)
        (out / "labels" / f"{it.stem}.txt").write_text(format_labels(it.annotations))
    for name in ("train", "val", "test"):
        _write_list(out / "splits" / f"{name}.txt", (splits or {}).get(name, []))
    for (k, f), stems in (folds or {}).items():
        _write_list(out / "folds" / f"fewshot_k{k}_f{f}.txt", stems)
    return out


def _read_list(path: Path) -> list[str]:
    return [ln.strip() for ln in path.read_text().splitlines() if ln.strip()] if path.exists() else []


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "images").is_dir():
        raise FileNotFoundError(f"{root} is not a dataset directory (no images/)")
    items = []
    for img in sorted((root / "images").glob("*.png")):
        items.append(Item(img.stem, load_png(img), read_labels(root / "labels" / f"{img.stem}.txt")))
    splits = {name: _read_list(root / "splits" / f"{name}.txt") for name in ("train", "val", "test")}
    folds = {}
    for path in sorted((root / "folds").glob("fewshot_k*_f*.txt")):
        k, f = path.stem.removeprefix("fewshot_k").split("_f")
        folds[(int(k), int(f))] = _read_list(path)
    return Dataset(items, splits, folds)


def scene_config_dict(cfg: SceneConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}
