"""Per-class accuracy and IoU from a pooled confusion matrix."""

from __future__ import annotations

import json

import numpy as np

from . import CLASS_NAMES, IGNORE_INDEX
from .errors import DegenerateInputError, ParameterError


class ConfusionMatrix:
    """Pixel counts with ground truth along rows and prediction along columns."""

    def __init__(self, n_labels: int = 4, counts=None):
        self.n_labels = n_labels
        self.counts = np.zeros((n_labels, n_labels), dtype=np.int64) if counts is None else np.array(counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_labels, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.n_labels, self.counts.copy())


def accumulate(cm: ConfusionMatrix, truth, pred) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one (truth, prediction) pair."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ParameterError(f"shape mismatch: {truth.shape} vs {pred.shape}")
    if (pred == IGNORE_INDEX).any():
        raise ParameterError("predictions cannot contain the ignore label")
    n = cm.n_labels
    keep = truth != IGNORE_INDEX
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= n or p.max() >= n):
        raise ParameterError(f"labels must lie below {n}")
    counts = np.bincount(t * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, cm.counts + counts)


def per_class_metrics(cm: ConfusionMatrix, convention: str = "recall") -> dict:
    """Map class index -> ``{"accuracy", "iou"}`` in percent.

    Accuracy is recall (diagonal over the truth row) by default, or
    precision (diagonal over the prediction column). Classes with no truth
    and no predicted pixels are absent from the result.
    """
    if cm.total == 0:
        raise DegenerateInputError("confusion matrix is empty")
    if convention not in ("recall", "precision"):
        raise ParameterError(f"unknown accuracy convention {convention!r}")
    c = cm.counts
    diag = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    out = {}
    for k in range(cm.n_labels):
        if rows[k] == 0 and cols[k] == 0:
            continue
        denom = rows[k] if convention == "recall" else cols[k]
        acc = 100.0 * diag[k] / denom if denom else 0.0
        iou = 100.0 * diag[k] / (rows[k] + cols[k] - diag[k])
        out[k] = {"accuracy": float(acc), "iou": float(iou)}
    return out


def summarize(per_class: dict, classes=None) -> dict:
    """Means over the given classes (all present classes by default)."""
    keys = [k for k in (classes if classes is not None else per_class) if k in per_class]
    if not keys:
        return {"mAcc": float("nan"), "mIoU": float("nan")}
    return {
        "mAcc": float(np.mean([per_class[k]["accuracy"] for k in keys])),
        "mIoU": float(np.mean([per_class[k]["iou"] for k in keys])),
    }


def evaluate_model(model, items, window: int, stride: int, dataset: str = "", model_name: str = "",
                   convention: str = "recall", per_image: bool = False, classes=None) -> dict:
    """Run sliding-window inference over ``(image, truth)`` pairs and score them.

    ``items`` may be a :class:`~cellmixer.manifest.DatasetManifest` with label
    maps or any iterable of ``(image, truth)`` arrays. Counts are pooled into
    one confusion matrix unless ``per_image`` is set, in which case per-class
    scores are averaged over images.
    """
    from .imaging import load_image, load_labels
    from .manifest import DatasetManifest
    from .segmenter import predict_image

    if isinstance(items, DatasetManifest):
        manifest = items
        items = ((load_image(manifest.resolve(r.image)), load_labels(manifest.resolve(r.labels)))
                 for r in manifest.records if r.labels is not None)
    pooled = ConfusionMatrix(model.n_classes + 1)
    per_image_scores = []
    n_images = 0
    for img, truth in items:
        pred = predict_image(model, img, window, stride)
        single = accumulate(ConfusionMatrix(model.n_classes + 1), truth, pred)
        pooled = pooled + single
        n_images += 1
        if per_image and single.total:
            per_image_scores.append(per_class_metrics(single, convention))
    if per_image:
        table = {}
        for k in range(model.n_classes + 1):
            vals = [s[k] for s in per_image_scores if k in s]
            if vals:
                table[k] = {m: float(np.mean([v[m] for v in vals])) for m in ("accuracy", "iou")}
    else:
        table = per_class_metrics(pooled, convention)
    return {
        "dataset": dataset,
        "model": model_name,
        "images": n_images,
        "convention": convention,
        "per_class": {CLASS_NAMES[k]: v for k, v in sorted(table.items())},
        "foreground_means": summarize(table, classes if classes is not None else (1, 2, 3)),
        "all_means": summarize(table),
        "confusion": pooled.counts.tolist(),
    }


def compare_report(results_a: list, results_b: list) -> dict:
    """Per-dataset, per-class deltas of model B over model A, with the winner named."""
    by_key_b = {r["dataset"]: r for r in results_b}
    datasets = []
    for ra in results_a:
        rb = by_key_b.get(ra["dataset"])
        if rb is None:
            continue
        rows = []
        for cls in ra["per_class"]:
            if cls not in rb["per_class"]:
                continue
            a, b = ra["per_class"][cls], rb["per_class"][cls]
            d_iou = b["iou"] - a["iou"]
            rows.append({
                "class": cls,
                "accuracy_a": a["accuracy"], "accuracy_b": b["accuracy"],
                "iou_a": a["iou"], "iou_b": b["iou"],
                "delta_accuracy": b["accuracy"] - a["accuracy"],
                "delta_iou": d_iou,
                "winner": rb["model"] if d_iou > 0 else ra["model"] if d_iou < 0 else "tie",
            })
        d_miou = rb["foreground_means"]["mIoU"] - ra["foreground_means"]["mIoU"]
        datasets.append({
            "dataset": ra["dataset"],
            "classes": rows,
            "foreground_mIoU_a": ra["foreground_means"]["mIoU"],
            "foreground_mIoU_b": rb["foreground_means"]["mIoU"],
            "delta_foreground_mIoU": d_miou,
            "winner": rb["model"] if d_miou > 0 else ra["model"] if d_miou < 0 else "tie",
        })
    model_a = results_a[0]["model"] if results_a else ""
    model_b = results_b[0]["model"] if results_b else ""
    return {"model_a": model_a, "model_b": model_b, "datasets": datasets}


def format_table(results: list) -> str:
    """Plain-text table with one row per dataset and model, one column pair per class.

    One row per (model, class); one mAcc/mIoU column pair per dataset.
    """
    datasets = []
    for r in results:
        if r["dataset"] not in datasets:
            datasets.append(r["dataset"])
    models = []
    for r in results:
        if r["model"] not in models:
            models.append(r["model"])
    lookup = {(r["model"], r["dataset"]): r for r in results}
    head1 = f"{'':12}{'':12}" + "".join(f"{d:^{2 * 8 + 1}}" for d in datasets)
    head2 = f"{'Model':<12}{'Class':<12}" + "".join(f"{'mAcc':>8} {'mIoU':>8}" for _ in datasets)
    lines = [head1.rstrip(), head2, "-" * len(head2)]
    for m in models:
        for k in range(4):
            name = CLASS_NAMES[k]
            cells = []
            for d in datasets:
                pc = lookup.get((m, d), {}).get("per_class", {})
                if name in pc:
                    cells.append(f"{pc[name]['accuracy']:8.2f} {pc[name]['iou']:8.2f}")
                else:
                    cells.append(f"{'-':>8} {'-':>8}")
            label = m if k == 0 else ""
            lines.append(f"{label:<12}{name:<12}" + "".join(cells))
        lines.append("-" * len(head2))
    return "\n".join(lines) + "\n"


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True)
