#!/usr/bin/env python3
"""
Tests for annotation loading, patch extraction, augmentation, rebalancing,
splitting and PST1 archives.
"""

import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from boxes import BoundingBox, intersects
from dataset import (
    DIHEDRAL,
    AnnotatedImage,
    PatchSet,
    apply_dihedral,
    augment_positives,
    extract_patches,
    load_annotations,
    load_patches,
    load_truth_boxes,
    positive_window,
    rebalance,
    resample_bilinear,
    save_patches,
    split,
)
from errors import (
    AnnotationBoundsError,
    AnnotationImageMissingError,
    AnnotationSyntaxError,
    DatasetError,
    PatchArchiveError,
)
from raster import save_raster


def write_annotations(tmp_path, records, size=(100, 100)):
    """Write one random RGB image per record and the JSON-lines file that points at them."""
    height, width = size
    rng = np.random.default_rng(0)
    lines = []
    for record in records:
        image = rng.integers(0, 256, size=(3, height, width)).astype(np.float32) / np.float32(255)
        save_raster(image, str(tmp_path / record["image"]))
        lines.append(json.dumps(record))
    path = tmp_path / "annotations.jsonl"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def random_set(n_pos, n_neg, size=4, images=None, seed=0):
    rng = np.random.default_rng(seed)
    n = n_pos + n_neg
    images = images or ["a.ppm"]
    return PatchSet(
        patches=rng.random((n, 3, size, size), dtype=np.float32),
        labels=np.array([1] * n_pos + [0] * n_neg),
        provenance=[{"image": images[i % len(images)], "x": i, "y": 0, "side": size, "transform": "identity"}
                    for i in range(n)],
    )


def test_load_annotations_box_counts(tmp_path):
    path = write_annotations(tmp_path, [
        {"image": "a.ppm", "boxes": [{"x": 10, "y": 10, "w": 8, "h": 8}, {"x": 60, "y": 40, "w": 12, "h": 9}]},
        {"image": "b.ppm", "boxes": []},
        {"image": "c.ppm", "boxes": [{"x": 0, "y": 0, "w": 100, "h": 100, "label": "tb"}]},
    ])
    images = load_annotations(path)
    assert [len(image.boxes) for image in images] == [2, 0, 1]
    assert images[2].boxes[0].label == "tb"
    assert images[0].pixels.shape == (3, 100, 100)
    assert list(load_truth_boxes(path)) == ["a.ppm", "b.ppm", "c.ppm"]


def test_out_of_bounds_box_names_line(tmp_path):
    path = write_annotations(tmp_path, [
        {"image": "a.ppm", "boxes": []},
        {"image": "b.ppm", "boxes": [{"x": 95, "y": 10, "w": 10, "h": 10}]},
    ])
    with pytest.raises(AnnotationBoundsError) as info:
        load_annotations(path)
    assert info.value.line == 2
    assert "line 2" in str(info.value)


def test_malformed_annotations(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"image": "a.ppm"\n', encoding="utf-8")
    with pytest.raises(AnnotationSyntaxError):
        load_annotations(str(path))

    path.write_text('{"image": "missing.ppm", "boxes": []}\n', encoding="utf-8")
    with pytest.raises(AnnotationImageMissingError):
        load_annotations(str(path))


def test_positive_window_is_centered():
    box = BoundingBox(45, 45, 10, 10)
    assert positive_window(box, 20, 100, 100) == (40, 40, 20)
    # shifted inward at the border
    assert positive_window(BoundingBox(0, 0, 6, 6), 20, 100, 100) == (0, 0, 20)
    # large boxes widen the crop
    assert positive_window(BoundingBox(10, 10, 30, 24), 20, 100, 100) == (10, 7, 30)


def test_resample_bilinear_constant_and_identity():
    image = np.full((3, 30, 30), 0.25, dtype=np.float32)
    out = resample_bilinear(image, 20)
    assert out.shape == (3, 20, 20)
    np.testing.assert_allclose(out, 0.25)
    ramp = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
    np.testing.assert_array_equal(resample_bilinear(ramp, 4), ramp)


def test_extract_patches_counts_and_negatives(tmp_path):
    boxes = [{"x": 45, "y": 45, "w": 10, "h": 10}, {"x": 5, "y": 70, "w": 12, "h": 12}]
    path = write_annotations(tmp_path, [
        {"image": "a.ppm", "boxes": boxes},
        {"image": "b.ppm", "boxes": []},
    ])
    images = load_annotations(path)
    patches = extract_patches(images, patch_size=20, neg_per_image=10, seed=3)
    assert patches.positive_count == 2
    assert patches.negative_count == 20
    assert patches.patches.shape[1:] == (3, 20, 20)

    first = patches.provenance[0]
    assert (first["x"], first["y"]) == (40, 40)
    np.testing.assert_array_equal(patches.patches[0], images[0].pixels[:, 40:60, 40:60])

    annotated = [BoundingBox.from_dict(b) for b in boxes]
    for record, label in zip(patches.provenance, patches.labels):
        if label == 0 and record["image"] == "a.ppm":
            window = BoundingBox(record["x"], record["y"], 20, 20)
            assert not any(intersects(window, box) for box in annotated)


def test_extract_is_worker_independent(tmp_path):
    path = write_annotations(tmp_path, [
        {"image": f"{i}.ppm", "boxes": [{"x": 20 + i, "y": 30, "w": 10, "h": 10}]} for i in range(4)
    ])
    images = load_annotations(path)
    a = extract_patches(images, 20, 5, seed=7, workers=1)
    b = extract_patches(images, 20, 5, seed=7, workers=3)
    np.testing.assert_array_equal(a.patches, b.patches)
    assert a.provenance == b.provenance


def test_extract_warns_when_negatives_run_out(tmp_path):
    # the annotation covers the whole image, so every candidate is rejected
    path = write_annotations(tmp_path, [{"image": "full.ppm", "boxes": [{"x": 0, "y": 0, "w": 30, "h": 30}]}],
                             size=(30, 30))
    patches = extract_patches(load_annotations(path), 20, 3, max_neg_tries=50)
    assert patches.positive_count == 1
    assert patches.negative_count == 0
    assert len(patches.warnings) == 1


def test_small_image_is_skipped(tmp_path):
    image = AnnotatedImage(path="tiny.ppm", pixels=np.zeros((3, 10, 10), dtype=np.float32))
    patches = extract_patches([image], 20, 4)
    assert len(patches) == 0
    assert patches.warnings


def test_dihedral_group_properties():
    patch = np.arange(2 * 3 * 3, dtype=np.float32).reshape(2, 3, 3)
    twice = lambda name: apply_dihedral(apply_dihedral(patch, name), name)
    for name in ("rot180", "flip_h", "flip_v", "transpose", "antitranspose"):
        np.testing.assert_array_equal(twice(name), patch)
    four = patch
    for _ in range(4):
        four = apply_dihedral(four, "rot90")
    np.testing.assert_array_equal(four, patch)

    images = {apply_dihedral(patch, name).tobytes() for name in DIHEDRAL}
    assert len(images) == 8
    with pytest.raises(ValueError):
        apply_dihedral(patch, "shear")


def test_augment_multiplies_positives_only():
    data = random_set(10, 7)
    out = augment_positives(data, 4, seed=1)
    assert out.positive_count == 40
    assert out.negative_count == 7
    np.testing.assert_array_equal(out.patches[:17], data.patches)
    transforms = [record["transform"] for record in out.provenance[17:]]
    assert "identity" not in transforms
    # no repeated transform for a single source while multiplier <= 8
    for i in range(10):
        picks = transforms[i * 3:(i + 1) * 3]
        assert len(set(picks)) == 3

    assert len(augment_positives(data, 1)) == len(data)
    with pytest.raises(DatasetError):
        augment_positives(data, 0)


def test_rebalance_discards_negatives():
    data = random_set(100, 900)
    out = rebalance(data, 0.5, seed=2)
    assert out.positive_count == 100
    assert out.negative_count == 100
    assert out.positive_fraction == 0.5

    again = rebalance(data, 0.5, seed=2)
    np.testing.assert_array_equal(out.patches, again.patches)

    with pytest.raises(DatasetError):
        rebalance(random_set(10, 5), 0.1)
    with pytest.raises(DatasetError):
        rebalance(random_set(10, 0), 0.5)


def test_split_is_disjoint_by_image():
    names = [f"img{i}.ppm" for i in range(10)]
    data = random_set(30, 50, images=names)
    train, test = split(data, 0.2, seed=4)
    assert len(train) + len(test) == len(data)
    assert set(train.source_images()).isdisjoint(test.source_images())
    assert len(test.source_images()) == 2

    with pytest.raises(DatasetError):
        split(random_set(3, 3, images=["only.ppm"]), 0.5)


def test_patch_archive_round_trip(tmp_path):
    data = augment_positives(random_set(3, 4, size=6), 2)
    data.warnings.append("one warning")
    path = str(tmp_path / "p.pst")
    size = save_patches(data, path)
    assert size == os.path.getsize(path)

    loaded = load_patches(path)
    np.testing.assert_array_equal(loaded.patches, data.patches)
    np.testing.assert_array_equal(loaded.labels, data.labels)
    assert loaded.provenance == data.provenance
    assert loaded.warnings == ["one warning"]


def test_save_patches_creates_parent_dirs(tmp_path):
    path = str(tmp_path / "a" / "b" / "p.pst")
    assert save_patches(random_set(2, 2), path) == os.path.getsize(path)
    assert len(load_patches(path)) == 4

def test_patch_archive_errors(tmp_path):
    path = tmp_path / "bad.pst"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(PatchArchiveError):
        load_patches(str(path))

    good = str(tmp_path / "good.pst")
    save_patches(random_set(2, 2), good)
    with open(good, "rb") as f:
        data = f.read()
    path.write_bytes(data[:40])
    with pytest.raises(PatchArchiveError):
        load_patches(str(path))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
