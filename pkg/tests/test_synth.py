"""Synthetic scene generation and dataset round-trips."""

import json

import numpy as np
import pytest

from gfr.synth import (
    CLASS_NAMES,
    LARGE_MIN_AREA,
    SIZE_RANGES,
    SMALL_MAX_AREA,
    bucket_of,
    generate_dataset,
    generate_scene,
    load_dataset,
    load_image_blob,
    normalize_size_mix,
    save_dataset,
    save_image_blob,
)


def test_scene_shapes_and_ranges():
    scene = generate_scene(seed=0, num_objects=4, size_mix={"small": 0.5, "large": 0.5})
    assert scene.image.shape == (3, 320, 320)
    assert scene.image.dtype == np.float64
    assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
    assert scene.boxes.shape == (len(scene.labels), 4)
    assert np.all(scene.boxes[:, 2] > scene.boxes[:, 0])
    assert np.all(scene.boxes[:, 3] > scene.boxes[:, 1])
    assert np.all(scene.boxes >= 0.0) and np.all(scene.boxes <= 1.0)
    assert np.all(scene.labels >= 0) and np.all(scene.labels < len(CLASS_NAMES))


def test_scene_determinism():
    a = generate_scene(seed=7, num_objects=3, size_mix={"medium": 1.0})
    b = generate_scene(seed=7, num_objects=3, size_mix={"medium": 1.0})
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.boxes, b.boxes)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_scene(seed=8, num_objects=3, size_mix={"medium": 1.0})
    assert not np.array_equal(a.image, c.image)


def box_of_area(area, aspect=1.0):
    w = (area * aspect) ** 0.5
    return (0.0, 0.0, w, area / w)


def test_bucket_of_thresholds():
    assert bucket_of(box_of_area(0.01)) == "small"
    assert bucket_of(box_of_area(SMALL_MAX_AREA)) == "medium"
    assert bucket_of(box_of_area(0.1)) == "medium"
    assert bucket_of(box_of_area(LARGE_MIN_AREA)) == "medium"
    assert bucket_of(box_of_area(0.2)) == "large"


def test_sampling_ranges_respect_buckets():
    lo, hi = SIZE_RANGES["small"]
    assert hi < SMALL_MAX_AREA
    lo, hi = SIZE_RANGES["medium"]
    assert lo > SMALL_MAX_AREA and hi < LARGE_MIN_AREA
    lo, hi = SIZE_RANGES["large"]
    assert lo > LARGE_MIN_AREA


def test_generated_boxes_land_in_requested_buckets():
    """Every drawn object's box area must fall in its requested bucket."""
    # small-only scenes contain only small boxes, large-only only large
    small_scene = generate_scene(seed=1, num_objects=4, size_mix={"small": 1.0})
    assert all(b == "small" for b in small_scene.buckets)
    large_scene = generate_scene(seed=2, num_objects=2, size_mix={"large": 1.0})
    assert all(b == "large" for b in large_scene.buckets)


def test_size_mix_frequencies():
    counts = {"small": 0, "medium": 0, "large": 0}
    total = 0
    mix = {"small": 0.5, "medium": 0.2, "large": 0.3}
    scenes = generate_dataset(seed=11, count=300, size_mix=mix, min_objects=2, max_objects=4)
    for scene in scenes:
        for b in scene.buckets:
            counts[b] += 1
            total += 1
    for name, frac in mix.items():
        assert counts[name] / total == pytest.approx(frac, abs=0.1)


def test_normalize_size_mix():
    mix = normalize_size_mix({"small": 2.0, "large": 2.0})
    assert mix == {"small": 0.5, "medium": 0.0, "large": 0.5}
    with pytest.raises(ValueError):
        normalize_size_mix({"tiny": 1.0})
    with pytest.raises(ValueError):
        normalize_size_mix({"small": 0.0})


def test_zero_objects_scene():
    scene = generate_scene(seed=3, num_objects=0, size_mix={"medium": 1.0})
    assert scene.boxes.shape == (0, 4)
    assert scene.labels.shape == (0,)
    assert scene.image.shape == (3, 320, 320)


def test_objects_have_low_mutual_overlap():
    for seed in range(10):
        scene = generate_scene(seed=seed, num_objects=5, size_mix={"medium": 1.0})
        n = len(scene.boxes)
        for i in range(n):
            for j in range(i + 1, n):
                a, b = scene.boxes[i], scene.boxes[j]
                ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
                ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
                inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
                union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
                assert inter / union <= 0.15 + 1e-9


def test_objects_visible_against_background():
    """Pixels inside each box must differ from the background statistics."""
    scene = generate_scene(seed=4, num_objects=2, size_mix={"large": 1.0})
    size = scene.image.shape[1]
    for (x0, y0, x1, y1), label in zip(scene.boxes, scene.labels):
        c0, r0 = int(x0 * size), int(y0 * size)
        c1, r1 = int(x1 * size), int(y1 * size)
        patch = scene.image[:, r0:r1, c0:c1]
        # background is gray (all channels near 0.5); shapes are saturated colors
        channel_spread = np.abs(patch.mean(axis=(1, 2)) - 0.5)
        assert channel_spread.max() > 0.1


def test_image_blob_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    img = rng.random((3, 17, 23))
    path = tmp_path / "img.bin"
    save_image_blob(path, img)
    back = load_image_blob(path)
    np.testing.assert_array_equal(back, img)
    assert back.dtype == np.float64


def test_image_blob_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_image_blob(path)


def test_dataset_roundtrip(tmp_path):
    scenes = generate_dataset(seed=6, count=4, size_mix={"small": 0.5, "large": 0.5})
    out = tmp_path / "ds"
    save_dataset(out, scenes)
    assert (out / "annotations.jsonl").exists()
    loaded = load_dataset(out)
    assert len(loaded) == 4
    for orig, back in zip(scenes, loaded):
        np.testing.assert_array_equal(orig.image, back.image)
        np.testing.assert_allclose(orig.boxes, back.boxes, atol=1e-6)
        np.testing.assert_array_equal(orig.labels, back.labels)


def test_annotations_schema(tmp_path):
    scenes = generate_dataset(seed=9, count=2, size_mix={"medium": 1.0}, min_objects=2, max_objects=2)
    out = tmp_path / "ds"
    save_dataset(out, scenes)
    lines = (out / "annotations.jsonl").read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines):
        rec = json.loads(line)
        assert rec["image_id"] == i
        assert rec["file"] == f"image_{i:05d}.bin"
        assert len(rec["boxes"]) == len(rec["labels"]) >= 1
        for box in rec["boxes"]:
            assert len(box) == 4


def test_dataset_class_coverage():
    scenes = generate_dataset(seed=10, count=10, size_mix={"medium": 1.0}, min_objects=3, max_objects=6)
    seen = set()
    for scene in scenes:
        seen.update(int(l) for l in scene.labels)
    assert seen == {0, 1, 2}
