#!/usr/bin/env python3
"""
Quality of the whole pipeline on seeded synthetic microscopy: patch-level
AUC/AP, accuracy kept through quantization and fine-tuning, and full-image
detection precision/recall.

One module fixture trains the model once; the run takes about a minute.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from dataset import PatchSet, augment_positives, extract_patches, split
from detect import DetectionConfig, detect_images, mine_hard_negatives, total_match
from evaluate import evaluate, score_patches
from network import TrainingConfig, init_model, squeezenet_config, train
from quantize import QuantizeConfig, compression_report, finetune, quantize_model
from synth import SynthConfig, generate_synthetic

# blobs large enough that a 20x20 window framing one reaches IoU 0.3
SYNTH = dict(height=60, width=60, blob_count_min=1, blob_count_max=2,
             sigma_min=2.9, sigma_max=3.2, eccentricity_max=0.2, min_separation=24.0)


@pytest.fixture(scope="module")
def trained():
    """synth -> extract -> split -> augment -> train -> mine -> retrain."""
    images = generate_synthetic(SynthConfig(seed=42, **SYNTH), 60)
    patches = extract_patches(images, 20, neg_per_image=10, seed=42)
    train_set, test_set = split(patches, 0.3, seed=42)
    train_set = augment_positives(train_set, 4, seed=42)

    model = init_model(squeezenet_config(20), seed=42)
    train(model, train_set, TrainingConfig(lr=1e-3, batch_size=32, epochs=6, seed=42))

    train_names = set(train_set.source_images())
    train_images = [image for image in images if image.path in train_names]
    hard = mine_hard_negatives(train_images, model, DetectionConfig(), limit_per_image=10)
    train_set = PatchSet.concatenate([train_set, hard])
    train(model, train_set, TrainingConfig(lr=1e-3, batch_size=32, epochs=4, seed=43))
    return {"model": model, "train": train_set, "test": test_set}


def test_patch_level_auc_and_ap(trained):
    assert trained["test"].positive_count > 0 and trained["test"].negative_count > 0
    curve = evaluate(score_patches(trained["model"], trained["test"]))
    assert curve.auc >= 0.99
    assert curve.ap >= 0.95


def test_quantized_model_keeps_auc(trained):
    model = trained["model"]
    float_auc = evaluate(score_patches(model, trained["test"])).auc
    qcfg = QuantizeConfig(k=16, finetune_epochs=2, finetune_lr=1e-4, batch_size=32, seed=42)
    qm = quantize_model(model, qcfg)
    tuned, _ = finetune(qm, trained["train"], qcfg)
    tuned_auc = evaluate(score_patches(tuned, trained["test"])).auc
    assert abs(tuned_auc - float_auc) <= 0.005

    report = compression_report(model, tuned)
    assert report.compressed_bytes * 6 <= report.original_bytes


def test_detection_on_synthetic_images(trained):
    images = generate_synthetic(SynthConfig(seed=7, **SYNTH), 50)
    total = total_match(detect_images(images, trained["model"], DetectionConfig()))
    assert total.recall >= 0.9
    assert total.precision >= 0.8


def test_blank_images_have_no_detections(trained):
    blank = dict(SYNTH, blob_count_min=0, blob_count_max=0)
    images = generate_synthetic(SynthConfig(seed=9, **blank), 5)
    assert all(not image.boxes for image in images)
    for result in detect_images(images, trained["model"], DetectionConfig()):
        assert result.detections == []


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
