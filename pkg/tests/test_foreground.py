import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from cellmixer.errors import DegenerateInputError, ParameterError
from cellmixer.foreground import (
    ExtractionConfig,
    assign_label,
    extract_batch,
    extract_foreground,
    remove_small_components,
)
from cellmixer.imaging import load_labels, save_image
from cellmixer.manifest import DatasetManifest, Record


def iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    return (a & b).sum() / (a | b).sum()


def disk_scene(n=10, size=200, radius=12, seed=0):
    """Flat background with ``n`` non-touching high-contrast disks."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    truth = np.zeros((size, size), bool)
    centers = []
    while len(centers) < n:
        c = rng.uniform(radius + 3, size - radius - 3, 2)
        if all(np.hypot(*(c - d)) > 2 * radius + 6 for d in centers):
            centers.append(c)
    for cy, cx in centers:
        truth |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    img = np.where(truth, 0.2, 0.6) + 0.01 * rng.standard_normal((size, size))
    return np.clip(img, 0, 1), truth


def test_constant_image_is_degenerate():
    with pytest.raises(DegenerateInputError):
        extract_foreground(np.full((32, 32), 0.4))


def test_tiny_image_rejected():
    with pytest.raises(ParameterError):
        extract_foreground(np.zeros((2, 8)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_disks_recovered(seed):
    img, truth = disk_scene(seed=seed)
    assert iou(extract_foreground(img), truth) >= 0.80


def test_local_mean_mode_runs():
    img, truth = disk_scene(seed=3)
    mask = extract_foreground(img, ExtractionConfig(threshold_mode="local_mean", threshold_window=31))
    assert mask.shape == img.shape and mask.any()


def test_isolated_pixel_does_not_change_mask():
    img, _ = disk_scene(seed=4)
    base = extract_foreground(img)
    spiked = img.copy()
    from scipy.ndimage import distance_transform_edt

    # the background pixel farthest from any cell
    dist = distance_transform_edt(~base)
    far = np.unravel_index(np.argmax(dist), dist.shape)
    spiked[far] = 1.0
    np.testing.assert_array_equal(extract_foreground(spiked), base)


def test_extraction_is_deterministic():
    img, _ = disk_scene(seed=5)
    np.testing.assert_array_equal(extract_foreground(img), extract_foreground(img.copy()))


def test_config_validation():
    with pytest.raises(ParameterError):
        ExtractionConfig(sigma_pre=0)
    with pytest.raises(ParameterError):
        ExtractionConfig(threshold_mode="magic")
    with pytest.raises(ParameterError):
        ExtractionConfig(min_component_area=-1)


# ---- label assignment -----------------------------------------------------------

def test_assign_label_examples():
    assert not assign_label(np.zeros((3, 4), bool), 1).any()
    assert (assign_label(np.ones((3, 4), bool), 3) == 3).all()
    checker = (np.add.outer(np.arange(5), np.arange(6)) % 2).astype(bool)
    out = assign_label(checker, 2)
    assert (out[checker] == 2).all() and (out[~checker] == 0).all()


@pytest.mark.parametrize("bad", [0, 4, 255])
def test_assign_label_rejects_bad_class(bad):
    with pytest.raises(ParameterError):
        assign_label(np.ones((2, 2), bool), bad)


masks = arrays(bool, st.tuples(st.integers(1, 20), st.integers(1, 20)))


@settings(max_examples=60, deadline=None)
@given(masks, st.sampled_from([1, 2, 3]))
def test_assign_label_counts(fg, c):
    out = assign_label(fg, c)
    assert (out == c).sum() == fg.sum()
    assert out.dtype == np.uint8


@settings(max_examples=60, deadline=None)
@given(masks, st.integers(0, 30), st.integers(0, 30))
def test_cleanup_monotone(fg, a, b):
    lo, hi = sorted((a, b))
    small = remove_small_components(fg, lo)
    large = remove_small_components(fg, hi)
    assert large.sum() <= small.sum() <= fg.sum()
    assert not (large & ~fg).any()


# ---- batch ----------------------------------------------------------------------

def test_extract_batch_records_failures(tmp_path):
    img, truth = disk_scene(seed=6)
    save_image(tmp_path / "good.png", img)
    save_image(tmp_path / "flat.png", np.full((40, 40), 0.5))
    (tmp_path / "broken.png").write_text("garbage")
    manifest = DatasetManifest(
        [Record("good.png", cls=2), Record("flat.png", cls=1), Record("broken.png", cls=3), Record("missing.png", cls=1)],
        tmp_path,
    )
    report, labeled = extract_batch(manifest, ExtractionConfig(), tmp_path / "out")
    assert report.processed == 1 and report.failed == 3
    assert len(labeled) == 1
    labels = load_labels(labeled.resolve(labeled.records[0].labels))
    assert set(np.unique(labels)) <= {0, 2}
    assert iou(labels == 2, truth) >= 0.80
    assert report.foreground_fraction["2"] == pytest.approx((labels == 2).mean())
    json.loads(report.to_json())


def test_extract_batch_parallel_matches_serial(tmp_path):
    recs = []
    for k in range(4):
        img, _ = disk_scene(seed=10 + k)
        save_image(tmp_path / f"i{k}.png", img)
        recs.append(Record(f"i{k}.png", cls=1 + k % 3))
    manifest = DatasetManifest(recs, tmp_path)
    r1, m1 = extract_batch(manifest, ExtractionConfig(), tmp_path / "a", workers=1)
    r2, m2 = extract_batch(manifest, ExtractionConfig(), tmp_path / "b", workers=3)
    assert r1.to_dict() == r2.to_dict()
    for a, b in zip(m1.records, m2.records):
        np.testing.assert_array_equal(load_labels(m1.resolve(a.labels)), load_labels(m2.resolve(b.labels)))
