"""End-to-end run: phantoms, extraction, split, two trainings, three test sets."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from . import __version__, provenance
from .config import PipelineConfig, derive_seed
from .errors import DataError
from .foreground import extract_batch
from .imaging import load_image, load_labels, save_image, save_labels
from .manifest import DatasetManifest, Record, split_manifest
from .metrics import compare_report, evaluate_model, format_table, to_json
from .mixer import SamplePool, synthesize_set
from .overlay import render_overlay
from .phantom import generate_population, generate_true_mixture, parse_mix
from .segmenter import predict_image, train

log = logging.getLogger(__name__)

MODELS = ("baseline", "cellmixer")


def module_seeds(seed: int) -> dict:
    names = ("phantom_train", "phantom_test", "split", "mixer", "artificial", "train")
    return {n: derive_seed(seed, n) for n in names}


def _write_phantoms(images, out_dir: Path, prefix: str, cls=None, split="train", with_labels=True):
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if with_labels:
        (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    records = []
    for i, p in enumerate(images):
        img_name = f"images/{prefix}_{i:04d}.png"
        save_image(out_dir / img_name, p.image)
        lab_name = None
        if with_labels:
            lab_name = f"labels/{prefix}_{i:04d}.png"
            save_labels(out_dir / lab_name, p.labels)
        records.append(Record(img_name, lab_name, cls, split))
    return records


def _load_pairs(manifest: DatasetManifest):
    return [(load_image(manifest.resolve(r.image)), load_labels(manifest.resolve(r.labels)))
            for r in manifest.records if r.labels is not None]


def _build_data(cfg: PipelineConfig, seeds: dict, data_dir: Path):
    """Return (raw homogeneous manifest, unmixed test manifest, true-mixture manifest or None)."""
    if cfg.data.manifest:
        user = DatasetManifest.read(cfg.data.manifest)
        if not user.records:
            raise DataError(f"manifest {cfg.data.manifest} is empty")
        raw = DatasetManifest([r for r in user.records if r.split != "test"], user.root)
        test = DatasetManifest([r for r in user.records if r.split == "test" and r.labels], user.root)
        return raw, test, None

    pc = cfg.phantom
    train_cfg = replace(pc, seed=seeds["phantom_train"])
    test_cfg = replace(pc, seed=seeds["phantom_test"])
    raw_records, test_records = [], []
    for c in (1, 2, 3):
        imgs = generate_population(c, cfg.data.train_per_class, train_cfg)
        raw_records += _write_phantoms(imgs, data_dir / "homogeneous", f"class{c}", c, with_labels=False)
        imgs = generate_population(c, cfg.eval.test_unmixed_per_class, test_cfg)
        test_records += _write_phantoms(imgs, data_dir / "unmixed_test", f"class{c}", c, "test")
    raw = DatasetManifest(raw_records, data_dir / "homogeneous")
    raw.write(data_dir / "homogeneous" / "manifest.jsonl")
    test = DatasetManifest(test_records, data_dir / "unmixed_test")
    test.write(data_dir / "unmixed_test" / "manifest.jsonl")

    mix_imgs = generate_true_mixture(parse_mix(cfg.eval.mixture), cfg.eval.test_true_mixture, test_cfg)
    mix = DatasetManifest(_write_phantoms(mix_imgs, data_dir / "true_mixture", "mix", None, "test"),
                          data_dir / "true_mixture")
    mix.write(data_dir / "true_mixture" / "manifest.jsonl")
    return raw, test, mix


def run_experiment(cfg: PipelineConfig, out_dir) -> dict:
    """Run the whole comparison and write ``report.json``, ``table.txt`` and overlays.

    The report depends only on the config: it holds no paths, timings or
    timestamps, so two runs with the same seed produce identical bytes.
    """
    t0 = time.perf_counter()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = module_seeds(cfg.seed)
    config = cfg.to_dict()

    raw, test_unmixed, test_mix = _build_data(cfg, seeds, out / "data")
    log.info("data ready: %d homogeneous records", len(raw))

    report, labeled = extract_batch(raw, cfg.extraction, out / "extracted", cfg.workers)
    (out / "extracted" / "report.json").write_text(report.to_json() + "\n")
    if report.processed == 0:
        raise DataError("foreground extraction failed on every image")
    labeled = split_manifest(labeled, cfg.data.val_fraction, seeds["split"])
    labeled.write(out / "extracted" / "manifest.jsonl")
    log.info("extracted %d images (%d failed)", report.processed, report.failed)

    mcfg = replace(cfg.mixer, seed=seeds["mixer"], crop_size=cfg.train.crop_size)
    pool = SamplePool.from_manifest(labeled, mcfg.target_bg_mean, mcfg.target_bg_std, split="train")
    tcfg = replace(cfg.train, seed=seeds["train"])

    models = {}
    (out / "models").mkdir(exist_ok=True)
    for mode in MODELS:
        log.info("training %s for %d iterations", mode, tcfg.iterations)
        models[mode] = train(pool, tcfg, mode, mcfg, cfg.workers).model
        models[mode].save(out / "models" / f"{mode}.json")

    datasets = [("unmixed", test_unmixed)]
    val = labeled.subset("val")
    if len({r.cls for r in val.records}) >= 2 and cfg.eval.test_artificial > 0:
        val_pool = SamplePool.from_manifest(val, mcfg.target_bg_mean, mcfg.target_bg_std)
        amcfg = replace(mcfg, seed=seeds["artificial"], crop_size=min(cfg.eval.window, cfg.phantom.image_size))
        art = synthesize_set(val_pool, amcfg, cfg.eval.test_artificial, out / "data" / "artificial_mix", cfg.workers)
        datasets.append(("artificial_mix", art))
    else:
        log.warning("validation split has fewer than two classes; skipping the artificial-mix test set")
    if test_mix is not None:
        datasets.append(("true_mixture", test_mix))

    results = {m: [] for m in MODELS}
    ev = cfg.eval
    for name, manifest in datasets:
        pairs = _load_pairs(manifest)
        if not pairs:
            log.warning("test set %s has no labeled images; skipped", name)
            continue
        window = min(ev.window, *pairs[0][0].shape)
        for mode in MODELS:
            r = evaluate_model(models[mode], pairs, window, min(ev.stride, window), name, mode,
                               ev.convention, ev.per_image)
            results[mode].append(r)
            log.info("%s on %s: foreground mIoU %.2f", mode, name, r["foreground_means"]["mIoU"])

    comparison = compare_report(results["baseline"], results["cellmixer"])
    full = {
        "tool_version": __version__,
        "seed": cfg.seed,
        "module_seeds": seeds,
        "config_hash": provenance.config_hash(config),
        "config": config,
        "extraction": report.to_dict() | {"failures": [f["error"] for f in report.failures]},
        "results": results["baseline"] + results["cellmixer"],
        "comparison": comparison,
    }
    (out / "report.json").write_text(to_json(full) + "\n")
    (out / "table.txt").write_text(format_table(full["results"]))

    overlays = []
    if test_mix is not None and ev.overlays > 0:
        pairs = _load_pairs(test_mix)[: ev.overlays]
        for i, (img, truth) in enumerate(pairs):
            window = min(ev.window, *img.shape)
            overlays.append(render_overlay(img, truth, out / "overlays" / f"mix_{i:02d}_truth.png").relative_to(out))
            for mode in MODELS:
                pred = predict_image(models[mode], img, window, min(ev.stride, window))
                path = out / "overlays" / f"mix_{i:02d}_{mode}.png"
                overlays.append(render_overlay(img, pred, path).relative_to(out))

    artifacts = ["report.json", "table.txt"] + [f"models/{m}.json" for m in MODELS] + [str(p) for p in overlays]
    provenance.record(out, artifacts, config, cfg.seed)
    log.info("experiment finished in %.1f s", time.perf_counter() - t0)
    return full


def load_report(path) -> dict:
    return json.loads(Path(path).read_text())
