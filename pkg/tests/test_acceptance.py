"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from cellmixer.config import PipelineConfig
from cellmixer.experiment import run_experiment
from cellmixer.foreground import extract_foreground
from cellmixer.imaging import StructuringElement, erode, otsu_threshold, sobel_gradient_magnitude
from cellmixer.manifest import DatasetManifest, Record, split_manifest
from cellmixer.metrics import ConfusionMatrix, accumulate, per_class_metrics
from cellmixer.mixer import mix_images, mix_labels, normalize_background
from cellmixer.phantom import PhantomConfig, generate_population
from cellmixer.segmenter import softmax, tversky_loss

RESULTS = {}


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ---- independent oracles ---------------------------------------------------------

def clamp_get(a, y, x):
    h, w = a.shape
    return a[min(max(y, 0), h - 1), min(max(x, 0), w - 1)]


def sobel_oracle(img):
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    h, w = img.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            sx = sy = 0.0
            for i in range(3):
                for j in range(3):
                    v = clamp_get(img, y + i - 1, x + j - 1)
                    sx += kx[i][j] * v
                    sy += kx[j][i] * v
            out[y, x] = (sx * sx + sy * sy) ** 0.5
    return out


def erode_oracle(f, offsets):
    h, w = f.shape
    return np.array([[min(clamp_get(f, y - di, x - dj) for di, dj in offsets) for x in range(w)] for y in range(h)])


def otsu_oracle(values, bins=256):
    values = np.asarray(values, dtype=np.float64).ravel()
    edges = np.linspace(values.min(), values.max(), bins + 1)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    n = int(counts.sum())
    best, best_k = None, None
    for k in range(bins - 1):
        n0 = int(counts[: k + 1].sum())
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            continue
        m0 = Fraction(sum(int(counts[i]) * (2 * i + 1) for i in range(k + 1)), 2 * n0)
        m1 = Fraction(sum(int(counts[i]) * (2 * i + 1) for i in range(k + 1, bins)), 2 * n1)
        var = Fraction(n0 * n1, n * n) * (m0 - m1) ** 2
        if best is None or var > best:
            best, best_k = var, k
    return edges[best_k + 1]


def soft_dice(p, target, k, eps):
    p = p.reshape(-1, k)
    t = np.eye(k)[target.reshape(-1)]
    vals = [1 - (2 * p[:, c] @ t[:, c] + 2 * eps) / (p[:, c].sum() + t[:, c].sum() + 2 * eps) for c in range(k)]
    return float(np.mean(vals))


def counting_oracle(truth, pred, n=4):
    tp, rows, cols = [0] * n, [0] * n, [0] * n
    for t, p in zip(truth.ravel().tolist(), pred.ravel().tolist()):
        if t == 255:
            continue
        rows[t] += 1
        cols[p] += 1
        tp[t] += t == p
    return {k: {"accuracy": 100.0 * tp[k] / rows[k] if rows[k] else 0.0,
                "iou": 100.0 * tp[k] / (rows[k] + cols[k] - tp[k])}
            for k in range(n) if rows[k] or cols[k]}


# ---- criteria --------------------------------------------------------------------

def test_criterion_1_mask_mix_algebra():
    rng = np.random.default_rng(1)
    pairs = []
    for _ in range(1000):
        shape = tuple(rng.integers(1, 65, 2))
        pairs.append((rng.integers(0, 4, shape, dtype=np.uint8), rng.integers(0, 4, shape, dtype=np.uint8)))
    t0 = time.perf_counter()
    outs = [mix_labels(a, b) for a, b in pairs]
    elapsed = time.perf_counter() - t0
    bad = 0
    for (a, b), got in zip(pairs, outs):
        want = [[y if y != 0 else x for x, y in zip(ra, rb)] for ra, rb in zip(a.tolist(), b.tolist())]
        bad += got.tolist() != want
    report(1, bad == 0 and elapsed < 5, f"{1000 - bad}/1000 pairs agree with per-pixel oracle, {elapsed:.2f}s (< 5s)")


def test_criterion_2_image_mix_identities():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(1, 65, 2))
        i, j = rng.random(shape), rng.random(shape)
        lam = float(rng.uniform(0.01, 0.99))
        worst = max(worst,
                    np.abs(mix_images(i, i, lam) - i).max(),
                    np.abs(mix_images(i, j, 1.0) - i).max(),
                    np.abs(mix_images(i, j, lam, clamp=False) - mix_images(j, i, 1 - lam, clamp=False)).max())
    report(2, worst <= 1e-6, f"max deviation {worst:.2e} over 100 images (<= 1e-6)")


def test_criterion_3_low_level_oracles():
    rng = np.random.default_rng(3)
    square = StructuringElement.square(3)
    sq_offsets = [(i - 1, j - 1) for i in range(3) for j in range(3)]
    sobel_err, erode_bad, otsu_bad = 0.0, 0, 0
    for _ in range(200):
        img = rng.random(tuple(rng.integers(3, 17, 2)))
        sobel_err = max(sobel_err, np.abs(sobel_gradient_magnitude(img) - sobel_oracle(img)).max())
        erode_bad += not np.array_equal(erode(img, square), erode_oracle(img, sq_offsets))
        otsu_bad += otsu_threshold(img) != otsu_oracle(img)
    ok = sobel_err <= 1e-6 and erode_bad == 0 and otsu_bad == 0
    report(3, ok, f"Sobel max err {sobel_err:.1e} (<= 1e-6), erosion mismatches {erode_bad}/200, "
                  f"Otsu mismatches {otsu_bad}/200")


def test_criterion_4_background_normalization():
    worst_mean = worst_std = 0.0
    for k, p in enumerate(generate_population(1, 34, PhantomConfig(seed=40))
                          + generate_population(2, 33, PhantomConfig(seed=41))
                          + generate_population(3, 33, PhantomConfig(seed=42))):
        out = normalize_background(p.image, p.labels, 0.5, 0.05, clamp=False)
        bg = out[p.labels == 0]
        worst_mean = max(worst_mean, abs(bg.mean() - 0.5))
        worst_std = max(worst_std, abs(bg.std() - 0.05))
    ok = worst_mean <= 1e-3 and worst_std <= 5e-3
    report(4, ok, f"100 phantoms: max |mean-0.5| {worst_mean:.1e} (<= 1e-3), max |std-0.05| {worst_std:.1e} (<= 5e-3)")


def test_criterion_5_tversky_gradient():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        scores = rng.standard_normal((8, 8, 4))
        target = rng.integers(0, 4, (8, 8))
        a, b = rng.uniform(0.1, 0.9, 2)
        _, grad = tversky_loss(softmax(scores), target, a, b)
        num = np.zeros_like(scores)
        h = 1e-6
        for idx in np.ndindex(scores.shape):
            up, dn = scores.copy(), scores.copy()
            up[idx] += h
            dn[idx] -= h
            num[idx] = (tversky_loss(softmax(up), target, a, b)[0] - tversky_loss(softmax(dn), target, a, b)[0]) / (2 * h)
        worst = max(worst, np.linalg.norm(grad - num) / np.linalg.norm(num))
    dice_err = 0.0
    for _ in range(20):
        p = softmax(3 * rng.standard_normal((8, 8, 4)))
        target = rng.integers(0, 4, (8, 8))
        dice_err = max(dice_err, abs(tversky_loss(p, target, 0.5, 0.5, 1.0)[0] - soft_dice(p, target, 4, 1.0)))
    ok = worst <= 1e-4 and dice_err <= 1e-10
    report(5, ok, f"20 trials: max FD rel err {worst:.1e} (<= 1e-4), soft-Dice gap {dice_err:.1e} (<= 1e-10)")


def test_criterion_6_metrics_oracle():
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(500):
        shape = tuple(rng.integers(1, 33, 2))
        truth = rng.choice([0, 1, 2, 3, 255], size=shape, p=[0.4, 0.2, 0.15, 0.15, 0.1]).astype(np.uint8)
        truth.flat[0] = 0
        pred = rng.integers(0, 4, shape).astype(np.uint8)
        bad += per_class_metrics(accumulate(ConfusionMatrix(), truth, pred)) != counting_oracle(truth, pred)
    m = per_class_metrics(ConfusionMatrix(2, [[50, 10], [5, 35]]))
    worked = (round(m[0]["accuracy"], 2), round(m[0]["iou"], 2))
    ok = bad == 0 and worked == (83.33, 76.92)
    report(6, ok, f"{500 - bad}/500 pairs exact, worked example {worked[0]:.2f} / {worked[1]:.2f} (83.33 / 76.92)")


def test_criterion_7_extraction_quality():
    means = {}
    for c in (1, 2, 3):
        ious = []
        for p in generate_population(c, 50, PhantomConfig(seed=70 + c)):
            m = extract_foreground(p.image)
            t = p.labels > 0
            ious.append((m & t).sum() / (m | t).sum())
        means[c] = float(np.mean(ious))
    ok = min(means.values()) >= 0.80
    detail = ", ".join(f"class {c} {v:.3f}" for c, v in means.items())
    report(7, ok, f"mean IoU over 50 images per class: {detail} (>= 0.80)")


@pytest.fixture(scope="module")
def experiment_runs(tmp_path_factory):
    cfg = PipelineConfig(seed=0)
    t0 = time.perf_counter()
    a = tmp_path_factory.mktemp("run_a")
    rep = run_experiment(cfg, a)
    elapsed = time.perf_counter() - t0
    return cfg, a, rep, elapsed


def test_criterion_8_mixture_claim(experiment_runs):
    _, _, rep, elapsed = experiment_runs
    res = {(r["dataset"], r["model"]): r for r in rep["results"]}
    miou = {k: v["foreground_means"]["mIoU"] for k, v in res.items()}
    gain = miou[("true_mixture", "cellmixer")] - miou[("true_mixture", "baseline")]
    drop = miou[("unmixed", "baseline")] - miou[("true_mixture", "baseline")]
    gate = {m: min(v["accuracy"] for v in res[("unmixed", m)]["per_class"].values()) for m in ("baseline", "cellmixer")}
    n_mix = res[("true_mixture", "baseline")]["images"]
    ok = gain >= 5 and drop >= 5 and min(gate.values()) >= 90 and elapsed <= 600 and n_mix == 50
    report(8, ok, f"{n_mix} mixture images: gain {gain:+.2f} (>= 5), baseline drop {drop:+.2f} (>= 5), "
                  f"min unmixed per-class acc baseline {gate['baseline']:.1f} / cellmixer {gate['cellmixer']:.1f} "
                  f"(>= 90), {elapsed:.0f}s (<= 600)")


def test_criterion_9_determinism(experiment_runs, tmp_path):
    cfg, a, _, _ = experiment_runs
    run_experiment(cfg, tmp_path / "run_b")
    same = (a / "report.json").read_bytes() == (tmp_path / "run_b" / "report.json").read_bytes()
    recs = [Record(f"c{c}/{i:05d}.png", cls=c) for c, n in ((1, 2405), (2, 1603), (3, 588)) for i in range(n)]
    out = split_manifest(DatasetManifest(recs, "."), 0.10, seed=0)
    sizes = tuple(sum(r.split == "val" and r.cls == c for r in out.records) for c in (1, 2, 3))
    ok = same and sizes == (241, 160, 59)
    report(9, ok, f"reports byte-identical: {same}, val sizes {sizes} (241, 160, 59)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
