#!/usr/bin/env python3
"""
Tests for sliding-window scoring, NMS, overlays and detection matching.
"""

import json
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from boxes import BoundingBox, Detection, iou
from dataset import AnnotatedImage
from detect import (
    DetectionConfig,
    detect,
    detect_images,
    grid_positions,
    match_detections,
    mine_hard_negatives,
    nms,
    render_detections,
    score_windows,
    total_match,
    write_detections,
)
from errors import ConfigError, DimensionError
from network import init_model, predict_scores, squeezenet_config, zero_model


def det(x, y, score, size=20):
    return Detection(box=BoundingBox(x, y, size, size), score=score)


def test_grid_counts():
    assert grid_positions(20, 20, 5).tolist() == [0]
    assert len(grid_positions(100, 20, 5)) == 17
    # the last window is snapped flush to the edge
    assert grid_positions(27, 20, 5).tolist() == [0, 5, 7]

    model = zero_model(squeezenet_config())
    cfg = DetectionConfig()
    assert score_windows(np.zeros((3, 20, 20), dtype=np.float32), model, cfg).count == 1
    assert score_windows(np.zeros((3, 100, 100), dtype=np.float32), model, cfg).count == 289


def test_batched_scores_match_single_windows():
    model = init_model(squeezenet_config(), seed=1)
    image = np.random.default_rng(2).random((3, 40, 45), dtype=np.float32)
    score_map = score_windows(image, model, DetectionConfig(stride=7, batch_size=5))
    for r, y in enumerate(score_map.ys):
        for c, x in enumerate(score_map.xs):
            single = predict_scores(model, image[None, :, y:y + 20, x:x + 20])[0]
            assert abs(score_map.scores[r, c] - single) <= 1e-6

    threaded = score_windows(image, model, DetectionConfig(stride=7, batch_size=5, workers=3))
    np.testing.assert_array_equal(threaded.scores, score_map.scores)


def test_rejects_mismatched_input():
    model = zero_model(squeezenet_config())
    with pytest.raises(DimensionError):
        score_windows(np.zeros((3, 10, 40), dtype=np.float32), model, DetectionConfig())
    with pytest.raises(DimensionError):
        score_windows(np.zeros((1, 40, 40), dtype=np.float32), model, DetectionConfig())
    with pytest.raises(DimensionError):
        score_windows(np.zeros((3, 40, 40), dtype=np.float32), model, DetectionConfig(window=30))
    with pytest.raises(ConfigError):
        DetectionConfig(detection_threshold=1.0)


def test_iou_example():
    assert abs(iou(BoundingBox(0, 0, 10, 10), BoundingBox(5, 0, 10, 10)) - 1 / 3) < 1e-12
    assert iou(BoundingBox(0, 0, 10, 10), BoundingBox(10, 0, 10, 10)) == 0.0
    assert iou(BoundingBox(3, 4, 5, 6), BoundingBox(3, 4, 5, 6)) == 1.0


def test_nms_example():
    a, b, c = det(0, 0, 0.9), det(5, 0, 0.8), det(40, 40, 0.7)
    assert nms([c, b, a], 0.3) == [a, c]
    # 300 / 500 overlap survives a looser threshold
    assert nms([c, b, a], 0.7) == [a, b, c]
    # equal scores: lower y, then lower x, wins
    tie = nms([det(5, 5, 0.5), det(0, 5, 0.5), det(4, 0, 0.5)], 0.3)
    assert tie[0].box.y == 0


def test_nms_against_pairwise_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        # scores on a coarse grid so the y/x tie-break is exercised
        candidates = [det(int(rng.integers(0, 100)), int(rng.integers(0, 100)), int(rng.integers(0, 20)) / 20.0)
                      for _ in range(int(rng.integers(1, 201)))]
        kept = nms(candidates, 0.3)

        ranked = sorted(candidates, key=lambda d: (-d.score, d.box.y, d.box.x))
        expected = []
        for d in ranked:
            if all(iou(d.box, k.box) <= 0.3 for k in expected):
                expected.append(d)
        assert kept == expected

        for i, p in enumerate(kept):
            for q in kept[i + 1:]:
                assert iou(p.box, q.box) <= 0.3
        assert [d.score for d in kept] == sorted((d.score for d in kept), reverse=True)


def test_render_only_changes_outlines(tmp_path):
    image = np.zeros((1, 30, 30), dtype=np.float32)
    path = str(tmp_path / "out.ppm")
    pixels = render_detections(image, [Detection(BoundingBox(5, 5, 10, 10), 0.9)], [BoundingBox(18, 18, 6, 6)], path)
    assert pixels.shape == (30, 30, 3)
    red = np.all(pixels == [255, 0, 0], axis=2)
    white = np.all(pixels == [255, 255, 255], axis=2)
    assert red.sum() == 2 * 10 + 2 * 8
    assert white.sum() == 2 * 6 + 2 * 4
    assert pixels.any(axis=2).sum() == red.sum() + white.sum()
    assert os.path.getsize(path) == len(b"P6\n30 30\n255\n") + 30 * 30 * 3


def test_matching_cases():
    truth = [BoundingBox(0, 0, 20, 20), BoundingBox(40, 0, 20, 20), BoundingBox(0, 40, 20, 20)]

    exact = match_detections([Detection(b, 0.9) for b in truth], truth)
    assert (exact.true_positives, exact.false_positives, exact.false_negatives) == (3, 0, 0)
    assert exact.precision == 1.0 and exact.recall == 1.0

    empty = match_detections([], truth)
    assert (empty.true_positives, empty.false_negatives) == (0, 3)
    assert empty.precision == 0.0

    mixed = match_detections([det(2, 0, 0.9), det(42, 2, 0.8), det(80, 80, 0.95)], truth)
    assert (mixed.true_positives, mixed.false_positives, mixed.false_negatives) == (2, 1, 1)
    assert abs(mixed.precision - 2 / 3) < 1e-12

    # two detections on one truth box: only the higher score matches
    double = match_detections([det(1, 0, 0.6), det(0, 1, 0.9)], truth[:1])
    assert double.pairs == [(1, 0)]


def test_threshold_monotonicity():
    model = init_model(squeezenet_config(), seed=4)
    image = np.random.default_rng(5).random((3, 60, 60), dtype=np.float32)
    score_map = score_windows(image, model, DetectionConfig(stride=4))
    counts = [len(score_map.candidates(t)) for t in np.linspace(0.01, 0.99, 25)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_detect_images_and_jsonl(tmp_path):
    model = zero_model(squeezenet_config())
    cfg = DetectionConfig(detection_threshold=0.4, overlap_threshold=0.3)
    found = detect(np.zeros((3, 40, 40), dtype=np.float32), model, cfg)
    assert found and all(d.score == 0.5 for d in found)
    assert (found[0].box.x, found[0].box.y) == (0, 0)

    images = [AnnotatedImage(path="a.ppm", pixels=np.zeros((3, 40, 40), dtype=np.float32),
                             boxes=[BoundingBox(0, 0, 20, 20)])]
    results = detect_images(images, model, cfg)
    assert total_match(results).true_positives == 1

    path = str(tmp_path / "detections.jsonl")
    assert write_detections(path, results) == len(results[0].detections)
    with open(path, encoding="utf-8") as f:
        first = json.loads(f.readline())
    assert first["image"] == "a.ppm"
    assert set(first) == {"image", "x", "y", "w", "h", "score"}

    strict = DetectionConfig(detection_threshold=0.6)
    assert detect(np.zeros((3, 40, 40), dtype=np.float32), model, strict) == []


def test_mine_hard_negatives_skips_framed_objects():
    model = zero_model(squeezenet_config())
    pixels = np.random.default_rng(6).random((3, 40, 40), dtype=np.float32)
    images = [AnnotatedImage(path="a.ppm", pixels=pixels, boxes=[BoundingBox(10, 10, 20, 20)])]
    cfg = DetectionConfig(detection_threshold=0.4)

    # 25 windows; 13 reach IoU 0.3 with the box or hold its center
    hard = mine_hard_negatives(images, model, cfg)
    assert len(hard) == 12
    assert not hard.labels.any()
    for crop, origin in zip(hard.patches, hard.provenance):
        assert origin["transform"] == "hard_negative"
        x, y = origin["x"], origin["y"]
        np.testing.assert_array_equal(crop, pixels[:, y:y + 20, x:x + 20])
        assert iou(BoundingBox(x, y, 20, 20), images[0].boxes[0]) < 0.3

    top = mine_hard_negatives(images, model, cfg, limit_per_image=3)
    assert [(o["x"], o["y"]) for o in top.provenance] == [(0, 0), (5, 0), (15, 0)]

    none = mine_hard_negatives(images, model, DetectionConfig(detection_threshold=0.6))
    assert len(none) == 0 and none.patch_size == 20

    with pytest.raises(ConfigError):
        mine_hard_negatives(images, model, cfg, limit_per_image=-1)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
