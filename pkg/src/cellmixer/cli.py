"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__, provenance
from .config import PipelineConfig, load_config_file
from .errors import DataError, DegenerateInputError, ParameterError, TrainingError

log = logging.getLogger("cellmixer")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3
SEED_ENV = "CELLMIXER_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


def _setup_logging(verbosity: int, fmt: str) -> None:
    level = logging.WARNING - 10 * min(verbosity, 2)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if fmt == "json" else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


# --- config -------------------------------------------------------------------


def _set(d: dict, section: str, key: str, value) -> None:
    if value is not None:
        d.setdefault(section, {})[key] = value


def resolve_seed(flag, file_seed=None) -> int:
    """``--seed`` beats ``$CELLMIXER_SEED``, which beats the config file."""
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ParameterError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return int(file_seed) if file_seed is not None else 0


def build_config(args) -> PipelineConfig:
    d = load_config_file(args.config) if args.config else {}
    d["seed"] = resolve_seed(args.seed, d.get("seed"))
    if args.workers is not None:
        d["workers"] = args.workers
    for section, key, attr in _OVERRIDES:
        _set(d, section, key, getattr(args, attr, None))
    return PipelineConfig.from_dict(d)


# (section, key, argparse dest) pairs; flags win over the config file
_OVERRIDES = [
    ("phantom", "image_size", "image_size"),
    ("extraction", "threshold_mode", "threshold_mode"),
    ("extraction", "erosion_size", "erosion_size"),
    ("extraction", "min_component_area", "min_area"),
    ("mixer", "lambda", "lam"),
    ("train", "iterations", "iterations"),
    ("train", "learning_rate", "lr"),
    ("train", "crop_size", "crop_size"),
    ("eval", "window", "window"),
    ("eval", "stride", "stride"),
    ("eval", "convention", "convention"),
    ("data", "train_per_class", "train_per_class"),
    ("data", "val_fraction", "val_fraction"),
    ("data", "manifest", "data_manifest"),
]


# --- subcommands ----------------------------------------------------------------


def _write_population(images, out: Path, prefix: str, cls, cfg_dict, seed):
    from .experiment import _write_phantoms
    from .manifest import DatasetManifest

    records = _write_phantoms(images, out, prefix, cls, "train")
    manifest = DatasetManifest(records, out)
    manifest.write(out / "manifest.jsonl")
    names = [r.image for r in records] + [r.labels for r in records] + ["manifest.jsonl"]
    provenance.record(out, names, cfg_dict, seed)
    print(f"wrote {len(records)} images to {out}")


def cmd_phantom(args, cfg):
    from .phantom import generate_population

    pc = replace(cfg.phantom, seed=cfg.seed)
    imgs = generate_population(args.cls, args.n, pc)
    _write_population(imgs, Path(args.out), f"class{args.cls}", args.cls, pc.to_dict(), cfg.seed)


def cmd_phantom_mix(args, cfg):
    from .phantom import generate_true_mixture, parse_mix

    pc = replace(cfg.phantom, seed=cfg.seed)
    imgs = generate_true_mixture(parse_mix(args.mix), args.n, pc)
    _write_population(imgs, Path(args.out), "mix", None, pc.to_dict(), cfg.seed)


def _read_manifest(path):
    from .manifest import DatasetManifest

    return DatasetManifest.read(path)


def cmd_extract(args, cfg):
    from .foreground import extract_batch
    from .manifest import DatasetManifest, Record

    manifest = _read_manifest(args.manifest)
    if args.cls is not None:
        manifest = DatasetManifest([Record(r.image, r.labels, args.cls, r.split) for r in manifest], manifest.root)
    out = Path(args.out)
    report, labeled = extract_batch(manifest, cfg.extraction, out, cfg.workers)
    labeled.write(out / "manifest.jsonl")
    (out / "report.json").write_text(report.to_json() + "\n")
    names = [r.labels for r in labeled] + ["manifest.jsonl", "report.json"]
    provenance.record(out, names, cfg.extraction.to_dict(), cfg.seed)
    if args.report:
        Path(args.report).write_text(report.to_json() + "\n")
    else:
        print(report.to_json())
    if report.processed == 0 and len(manifest):
        raise DataError("foreground extraction failed on every image")


def cmd_split(args, cfg):
    from .manifest import split_manifest

    manifest = _read_manifest(args.manifest)
    out = Path(args.out)
    labeled = split_manifest(manifest, cfg.data.val_fraction, cfg.seed)
    # keep paths valid when the output lives in another directory
    from .manifest import DatasetManifest, Record

    records = [Record(str(labeled.resolve(r.image).resolve()),
                      None if r.labels is None else str(labeled.resolve(r.labels).resolve()), r.cls, r.split)
               for r in labeled] if out.parent.resolve() != manifest.root.resolve() else labeled.records
    DatasetManifest(records, out.parent).write(out)
    provenance.record(out.parent, [out.name], {"val_fraction": cfg.data.val_fraction}, cfg.seed)
    counts = {s: sum(r.split == s for r in labeled) for s in ("train", "val", "test")}
    print(json.dumps(counts))


def _pool(manifest_path, cfg, split=None):
    from .mixer import SamplePool

    manifest = _read_manifest(manifest_path)
    if split is not None and not any(r.split == split for r in manifest):
        split = None
    return SamplePool.from_manifest(manifest, cfg.mixer.target_bg_mean, cfg.mixer.target_bg_std, split=split)


def cmd_mix(args, cfg):
    from .mixer import synthesize_set

    pool = _pool(args.manifest, cfg, args.split)
    mcfg = replace(cfg.mixer, seed=cfg.seed)
    if args.crop_size is not None:
        mcfg = replace(mcfg, crop_size=args.crop_size)
    synthesize_set(pool, mcfg, args.n, args.out, cfg.workers)
    print(f"wrote {args.n} mixed samples to {args.out}")


def cmd_train(args, cfg):
    from .segmenter import train

    pool = _pool(args.manifest, cfg, "train")
    tcfg = replace(cfg.train, seed=cfg.seed, log_every=cfg.train.log_every or max(1, cfg.train.iterations // 10))
    mcfg = replace(cfg.mixer, seed=cfg.seed, crop_size=tcfg.crop_size)
    result = train(pool, tcfg, args.mode, mcfg, cfg.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.model.save(out)
    provenance.record(out.parent, [out.name], {"train": tcfg.to_dict(), "mixer": mcfg.to_dict(), "mode": args.mode},
                      cfg.seed)
    print(f"saved {args.mode} model to {out} (final loss {result.loss_trace[-1]:.4f})" if result.loss_trace
          else f"saved {args.mode} model to {out}")


def _load_model(path):
    from .segmenter import PixelClassifier

    try:
        return PixelClassifier.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc


def cmd_infer(args, cfg):
    from .imaging import load_image, save_labels
    from .segmenter import predict_image

    model = _load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    paths = list(args.images) + list(args.image)
    if not paths:
        raise ParameterError("infer needs at least one image")
    for p in paths:
        try:
            img = load_image(p)
        except OSError as exc:
            raise DataError(f"cannot read image {p}: {exc}") from exc
        name = f"{Path(p).stem}_pred.png"
        save_labels(out / name, predict_image(model, img, cfg.eval.window, cfg.eval.stride))
        names.append(name)
    provenance.record(out, names, {"model": str(args.model), "eval": cfg.to_dict()["eval"]}, cfg.seed)
    print(f"wrote {len(names)} predictions to {out}")


def cmd_eval(args, cfg):
    from .metrics import compare_report, evaluate_model, format_table, to_json

    manifest = _read_manifest(args.manifest)
    if not any(r.labels for r in manifest):
        raise DataError(f"manifest {args.manifest} has no label maps to score against")
    results = []
    for path in args.model:
        name = Path(path).stem
        results.append(evaluate_model(_load_model(path), manifest, cfg.eval.window, cfg.eval.stride,
                                      args.dataset, name, cfg.eval.convention, cfg.eval.per_image))
    out = {"results": results}
    if len(results) == 2:
        out["comparison"] = compare_report(results[:1], results[1:])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(to_json(out) + "\n")
    print(format_table(results), end="")


def cmd_overlay(args, cfg):
    from .imaging import load_image, load_labels
    from .overlay import render_overlay

    try:
        img, labels = load_image(args.image), load_labels(args.labels)
    except OSError as exc:
        raise DataError(str(exc)) from exc
    if img.shape != labels.shape:
        raise DataError(f"image {img.shape} and labels {labels.shape} differ in shape")
    print(render_overlay(img, labels, args.out, args.alpha))


def cmd_run_experiment(args, cfg):
    from .experiment import run_experiment

    report = run_experiment(cfg, args.out)
    from .metrics import format_table

    print(format_table(report["results"]), end="")
    for d in report["comparison"]["datasets"]:
        print(f"{d['dataset']}: cellmixer - baseline foreground mIoU = {d['delta_foreground_mIoU']:+.2f}")


def cmd_info(args, cfg):
    print(json.dumps({"version": __version__, "config": cfg.to_dict()}, indent=2, sort_keys=True))


# --- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common options")
    g.add_argument("--config", help="JSON or YAML config file; flags override it")
    g.add_argument("--seed", type=int, help=f"global seed (default: ${SEED_ENV}, then the config, then 0)")
    g.add_argument("--workers", type=int, help="worker threads")
    g.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")
    g.add_argument("--log-format", choices=("text", "json"), default="text")

    p = _Parser(prog="cellmixer", description="Mixed-population cell segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"cellmixer {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("phantom", cmd_phantom, "generate homogeneous phantom images with truth")
    sp.add_argument("--class", dest="cls", type=int, choices=(1, 2, 3), required=True)
    sp.add_argument("-n", type=int, default=10)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--out", required=True)

    sp = add("phantom-mix", cmd_phantom_mix, "generate true-mixture phantom images with truth")
    sp.add_argument("--mix", default="1:0.3333333333,2:0.3333333333,3:0.3333333334", help='e.g. "1:0.5,2:0.5"')
    sp.add_argument("-n", type=int, default=10)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--out", required=True)

    sp = add("extract", cmd_extract, "unsupervised foreground extraction into label maps")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--class", dest="cls", type=int, choices=(1, 2, 3), help="override every record's class")
    sp.add_argument("--threshold-mode", choices=("otsu", "local_mean"))
    sp.add_argument("--erosion-size", type=int)
    sp.add_argument("--min-area", type=int)
    sp.add_argument("--out", required=True)
    sp.add_argument("--report", help="write the JSON report here instead of stdout")

    sp = add("split", cmd_split, "stratified train/val split of a manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--val-fraction", type=float)
    sp.add_argument("--out", required=True, help="output manifest path")

    sp = add("mix", cmd_mix, "write artificial mixtures from a labeled manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", default="train")
    sp.add_argument("-n", "--count", dest="n", type=int, default=100)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--crop-size", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a pixel classifier")
    sp.add_argument("--manifest", required=True, help="labeled manifest; the train split is used")
    sp.add_argument("--mode", choices=("baseline", "cellmixer"), default="cellmixer")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--crop-size", type=int)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--out", required=True, help="model JSON path")

    sp = add("infer", cmd_infer, "sliding-window prediction on images")
    sp.add_argument("--model", required=True)
    sp.add_argument("images", nargs="*")
    sp.add_argument("--image", action="append", default=[], help="image path (repeatable)")
    sp.add_argument("--window", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "score one or two models on a labeled manifest")
    sp.add_argument("--model", action="append", required=True, help="repeat to compare two models")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--dataset", default="test")
    sp.add_argument("--window", type=int)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--convention", choices=("recall", "precision"))
    sp.add_argument("--out", help="write the full JSON report here")

    sp = add("overlay", cmd_overlay, "render a label map over its image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--alpha", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("run-experiment", cmd_run_experiment, "full baseline-vs-cellmixer comparison")
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--train-per-class", type=int)
    sp.add_argument("--val-fraction", type=float)
    sp.add_argument("--manifest", dest="data_manifest", help="homogeneous manifest instead of phantoms")

    add("info", cmd_info, "print version and the effective config")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose, args.log_format)
    try:
        cfg = build_config(args)
        args.func(args, cfg)
    except TrainingError as exc:
        log.error("training failed: %s", exc)
        return EXIT_TRAINING
    except (DataError, DegenerateInputError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ParameterError, ValueError) as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_USAGE
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
