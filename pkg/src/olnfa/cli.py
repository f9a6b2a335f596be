"""``olnfa`` command line: synth, train, detect, eval, gradcheck, fewshot.

Every subcommand takes ``--config run.yaml``, any number of
``--set section.key=value`` overrides (values parsed as YAML) and ``--seed``,
and writes the fully resolved configuration to ``<out_dir>/config.yaml``.
"""
from __future__ import annotations

import argparse
import copy
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, ImageDraw

from .detector import DetectorConfig
from .synth import SceneConfig

log = logging.getLogger("olnfa")

STANDARD_SHOTS = (15, 25)

EVAL_DEFAULTS = {"score_threshold": 0.5, "iou_threshold": 0.25, "nms_iou": 0.5, "split": "test"}
SYNTH_DEFAULTS = {"n": 200, "bits": 16, "shots": [15, 25], "folds": 3}
TRAIN_DEFAULTS = {"split": "train", "fold": None}
FEWSHOT_DEFAULTS = {"k": 15, "folds": 3, "tune_threshold": True}


class CliError(Exception):
    """A user-facing failure; reported without a traceback."""


def default_config() -> dict:
    det = DetectorConfig().to_dict()
    scene = {f.name: getattr(SceneConfig(), f.name) for f in fields(SceneConfig)}
    scene = {k: list(v) if isinstance(v, tuple) else v for k, v in scene.items()}
    return {
        "seed": 0,
        "detector": det,
        "scene": scene,
        "eval": dict(EVAL_DEFAULTS),
        "synth": dict(SYNTH_DEFAULTS),
        "train": dict(TRAIN_DEFAULTS),
        "fewshot": dict(FEWSHOT_DEFAULTS),
    }


def _merge(base: dict, update: dict, where: str = "") -> None:
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise CliError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise CliError(f"config key '{path}' must be a mapping")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def _apply_set(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise CliError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    value = yaml.safe_load(raw)
    node = {}
    nested = node
    for p in parts[:-1]:
        nested[p] = {}
        nested = nested[p]
    nested[parts[-1]] = value
    _merge(cfg, node)


def resolve_config(config_path=None, sets=(), seed=None) -> dict:
    """Defaults, then the YAML file, then ``--set`` overrides, then ``--seed``."""
    cfg = default_config()
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text()) or {}
        if not isinstance(loaded, dict):
            raise CliError(f"{path}: top level must be a mapping")
        _merge(cfg, loaded)
    for s in sets:
        _apply_set(cfg, s)
    if seed is not None:
        cfg["seed"] = int(seed)
    # validate eagerly so bad values fail before any work is done
    try:
        detector_config(cfg)
        scene_config(cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc
    return cfg


def detector_config(cfg: dict) -> DetectorConfig:
    return DetectorConfig.from_dict(copy.deepcopy(cfg["detector"]))


def scene_config(cfg: dict) -> SceneConfig:
    return SceneConfig(**copy.deepcopy(cfg["scene"]))


def echo_config(cfg: dict, target_dir: Path, **paths) -> Path:
    target_dir.mkdir(parents=True, exist_ok=True)
    resolved = copy.deepcopy(cfg)
    if paths:
        resolved["paths"] = {k: str(v) for k, v in paths.items()}
    target = target_dir / "config.yaml"
    target.write_text(yaml.safe_dump(resolved, sort_keys=True))
    return target


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from .synth import Item, generate_scene, make_fewshot_folds, split_dataset, write_dataset

    n = cfg["synth"]["n"] if args.n is None else args.n
    cfg["synth"]["n"] = n
    if n < 0:
        raise CliError("n must be non-negative")
    out = Path(args.out_dir)
    scfg = scene_config(cfg)
    scene_seeds = np.random.default_rng(cfg["seed"]).integers(0, 2**63 - 1, size=n)
    items = [Item(f"{i:05d}", *generate_scene(int(s), scfg)) for i, s in enumerate(scene_seeds)]
    if n >= 5:
        train, val, test = split_dataset(items, cfg["seed"])
    else:
        train, val, test = items, [], []
        if n:
            log.warning("fewer than 5 images: everything goes to the train split")
    splits = {"train": [it.stem for it in train], "val": [it.stem for it in val],
              "test": [it.stem for it in test]}
    folds = {}
    n_folds = cfg["synth"]["folds"]
    for k in cfg["synth"]["shots"]:
        if k * n_folds > len(train):
            log.warning("train split too small for %d folds of %d; skipped", n_folds, k)
            continue
        for f, fold in enumerate(make_fewshot_folds(train, k, n_folds, cfg["seed"])):
            folds[(k, f)] = [it.stem for it in fold]
    write_dataset(out, items, splits, folds, bits=cfg["synth"]["bits"])
    echo_config(cfg, out, out_dir=out)
    print(f"wrote {n} images to {out} (train {len(train)}, val {len(val)}, test {len(test)})")
    return 0


def _load_dataset(path):
    from .synth import load_dataset

    path = Path(path)
    if not path.exists():
        raise CliError(f"dataset not found: {path}")
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc


def _select(ds, split: str, fold=None):
    if fold is not None:
        k, f = (int(v) for v in fold)
        if (k, f) not in ds.folds:
            raise CliError(f"fold k={k} f={f} not found in dataset")
        stems = ds.folds[(k, f)]
    else:
        if split not in ds.splits:
            raise CliError(f"unknown split {split!r}")
        stems = ds.splits[split]
    try:
        return ds.subset(stems)
    except KeyError as exc:
        raise CliError(f"split lists a missing image: {exc}") from exc


def cmd_train(args, cfg) -> int:
    from .training import save_checkpoint, train, write_loss_curve

    if args.head:
        cfg["detector"]["head"] = args.head
    dcfg = detector_config(cfg)
    ds = _load_dataset(args.dataset)
    items = _select(ds, cfg["train"]["split"], cfg["train"]["fold"])
    if not items:
        raise CliError("the selected training split is empty")
    out = Path(args.out_dir)
    echo_config(cfg, out, dataset=args.dataset, out_dir=out)
    t0 = time.perf_counter()
    result = train(items, dcfg, seed=cfg["seed"], log_every=args.log_every)
    save_checkpoint(out / "model.ckpt", result.model, {"seed": cfg["seed"]})
    write_loss_curve(out / "loss_curve.tsv", result)
    print(f"trained {dcfg.head} on {len(items)} images for {len(result.losses)} steps "
          f"in {time.perf_counter() - t0:.1f}s; loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    return 0


def _load_model(path):
    from .training import load_checkpoint

    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)[0]
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _draw_overlay(image: np.ndarray, dets, gts, size: int, scale: int = 4) -> Image.Image:
    # ground truth in green, detections in red
    gray = Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
    canvas = gray.convert("RGB").resize((gray.width * scale, gray.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(canvas)
    px = size * scale

    def rect(box, colour):
        cx, cy, w, h = box
        draw.rectangle([(cx - w / 2) * px, (cy - h / 2) * px, (cx + w / 2) * px, (cy + h / 2) * px],
                       outline=colour, width=1)

    for a in gts:
        rect((a.cx, a.cy, a.w, a.h), (0, 255, 0))
    for d in dets:
        rect(d.box, (255, 0, 0))
    return canvas


def cmd_detect(args, cfg) -> int:
    from .synth import load_png, read_labels

    model = _load_model(args.checkpoint)
    src = Path(args.input)
    if src.is_dir():
        images = sorted(src.glob("*.png"))
    elif src.is_file():
        images = [src]
    else:
        raise CliError(f"input not found: {src}")
    threshold = cfg["eval"]["score_threshold"] if args.threshold is None else args.threshold
    cfg["eval"]["score_threshold"] = threshold
    out = Path(args.out_dir)
    echo_config(cfg, out, checkpoint=args.checkpoint, input=src, out_dir=out)
    if args.overlay:
        (out / "overlays").mkdir(exist_ok=True)
    lines = []
    size = model.config.input_size
    for path in images:
        image = load_png(path)
        dets = model.detect(image, threshold, cfg["eval"]["nms_iou"])
        for d in dets:
            lines.append(f"{path.stem} {d.score:.6f} {d.box[0]:.6f} {d.box[1]:.6f} "
                         f"{d.box[2]:.6f} {d.box[3]:.6f} {d.significance:.6f}\n")
        if args.overlay:
            labels = path.parent.parent / "labels" / f"{path.stem}.txt"
            _draw_overlay(image, dets, read_labels(labels), size).save(out / "overlays" / f"{path.stem}.png")
    (out / "detections.txt").write_text("".join(lines))
    print(f"{len(lines)} detections in {len(images)} images -> {out / 'detections.txt'}")
    return 0


def cmd_eval(args, cfg) -> int:
    from .fewshot import collect_detections, evaluate_model, tune_threshold

    if args.split:
        cfg["eval"]["split"] = args.split
    model = _load_model(args.checkpoint)
    ds = _load_dataset(args.dataset)
    items = _select(ds, cfg["eval"]["split"])
    if not items:
        raise CliError(f"split {cfg['eval']['split']!r} is empty")
    ev = cfg["eval"]
    if args.tune_threshold:
        val = _select(ds, "val")
        if not val:
            raise CliError("--tune-threshold needs a non-empty val split")
        # the echoed config records the threshold actually used
        ev["score_threshold"] = tune_threshold(collect_detections(model, val, nms_iou=ev["nms_iou"]),
                                               ev["iou_threshold"])
    m = evaluate_model(model, items, ev["score_threshold"], ev["iou_threshold"], ev["nms_iou"])
    out = Path(args.out_dir)
    echo_config(cfg, out, checkpoint=args.checkpoint, dataset=args.dataset, out_dir=out)
    header = "head\tsplit\tprecision\trecall\tf1\tap\ttp\tfp\tfn\n"
    row = (f"{model.config.head}\t{ev['split']}\t{m.precision:.6f}\t{m.recall:.6f}\t{m.f1:.6f}\t"
           f"{m.ap:.6f}\t{m.tp}\t{m.fp}\t{m.fn}\n")
    (out / "metrics.tsv").write_text(header + row)
    print(f"{model.config.head} on {len(items)} {ev['split']} images: "
          f"P {m.precision:.3f} R {m.recall:.3f} F1 {m.f1:.3f} AP {m.ap:.3f}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .gradcheck import format_suite, run_suite

    rows = run_suite(n_points=args.points, seed=cfg["seed"], tol=args.tol)
    report = format_suite(rows)
    print(report)
    if args.out_dir:
        out = Path(args.out_dir)
        echo_config(cfg, out, out_dir=out)
        (out / "gradcheck.txt").write_text(report + "\n")
    return 0 if all(r["passed"] for r in rows) else 1


def cmd_fewshot(args, cfg) -> int:
    from .fewshot import FewShotError, run_fewshot_experiment
    from .synth import make_fewshot_folds

    k = cfg["fewshot"]["k"] if args.k is None else args.k
    cfg["fewshot"]["k"] = k
    if k not in STANDARD_SHOTS:
        log.warning("k=%d differs from the 15- and 25-shot settings; running anyway", k)
    ds = _load_dataset(args.dataset)
    n_folds = cfg["fewshot"]["folds"]
    stored = [ds.folds.get((k, f)) for f in range(n_folds)]
    if all(s is not None for s in stored):
        folds = [ds.subset(s) for s in stored]
    else:
        try:
            folds = make_fewshot_folds(ds.subset(ds.splits["train"]), k, n_folds, cfg["seed"])
        except ValueError as exc:
            raise CliError(str(exc)) from exc
    test = _select(ds, cfg["eval"]["split"])
    # per-model operating threshold from the val split, when asked for and available
    val = _select(ds, "val") if cfg["fewshot"]["tune_threshold"] else None
    if cfg["fewshot"]["tune_threshold"] and not val:
        log.warning("val split is empty; using eval.score_threshold for every model")
    out = Path(args.out_dir)
    echo_config(cfg, out, dataset=args.dataset, out_dir=out)
    ev = cfg["eval"]
    try:
        reports = run_fewshot_experiment(detector_config(cfg), folds, test, k, seed=cfg["seed"],
                                         score_threshold=ev["score_threshold"],
                                         iou_threshold=ev["iou_threshold"],
                                         out_path=out / "results.tsv", val=val or None)
    except FewShotError as exc:
        raise CliError(str(exc)) from exc
    for head, rep in reports.items():
        print(f"{head:>8}  F1 {rep.mean['f1']:.3f} +- {rep.std['f1']:.3f}  AP {rep.mean['ap']:.3f}")
    return 0


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. detector.head=baseline")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="olnfa", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("out_dir")
    s.add_argument("--n", type=int, help="number of images")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a detector")
    s.add_argument("dataset")
    s.add_argument("out_dir")
    s.add_argument("--head", choices=("baseline", "ol-nfa"))
    s.add_argument("--log-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", parents=[common], help="run a checkpoint on images")
    s.add_argument("checkpoint")
    s.add_argument("input", help="a PNG image or a directory of them")
    s.add_argument("out_dir")
    s.add_argument("--threshold", type=float)
    s.add_argument("--overlay", action="store_true", help="also write boxed overlay images")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset split")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("out_dir")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--tune-threshold", action="store_true",
                   help="use the F1-best score threshold on the val split")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op")
    s.add_argument("--points", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-5)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("fewshot", parents=[common], help="few-shot comparison of both heads")
    s.add_argument("dataset")
    s.add_argument("out_dir")
    s.add_argument("--k", type=int)
    s.set_defaults(func=cmd_fewshot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.sets, args.seed)
        return args.func(args, cfg)
    except CliError as exc:
        print(f"olnfa {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
