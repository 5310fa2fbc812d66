"""
Sliding-window pathogen detection.

Windows on a stride grid are scored by the classifier, thresholded, and
pruned with greedy non-maximum suppression. Also renders overlays and
matches detections against annotation boxes.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from boxes import BoundingBox, Detection, iou
from chunker import chunk_indices
from config import DetectSettings
from dataset import AnnotatedImage, PatchSet
from errors import ConfigError, DimensionError
from network import predict_scores
from quantize import ModelLike, as_model_state
from raster import RED, WHITE, draw_outline, promote_rgb, to_uint8, write_pixels
from utils import ensure_parent_dir, write_json_lines

logger = logging.getLogger(__name__)


@dataclass
class DetectionConfig:
    """
    Sliding-window settings.

    Attributes:
        window: Window extent; must equal the model input size
        stride: Grid step (None means window // 4)
        detection_threshold: Minimum positive probability of a candidate
        overlap_threshold: IoU above which NMS suppresses a window
        batch_size: Windows scored per forward pass
        match_iou: Minimum IoU for a detection to match a truth box
        workers: Threads for window scoring
    """

    window: int = 20
    stride: Optional[int] = None
    detection_threshold: float = 0.99
    overlap_threshold: float = 0.3
    batch_size: int = 256
    match_iou: float = 0.3
    workers: int = 1

    def __post_init__(self):
        if self.stride is None:
            self.stride = max(1, self.window // 4)
        checks = [
            (self.window >= 1, "window must be >= 1"),
            (self.stride >= 1, "stride must be >= 1"),
            (0 < self.detection_threshold < 1, "detection_threshold must be in (0, 1)"),
            (0 < self.overlap_threshold < 1, "overlap_threshold must be in (0, 1)"),
            (0 < self.match_iou < 1, "match_iou must be in (0, 1)"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @classmethod
    def from_settings(cls, settings: DetectSettings, workers: int = 1) -> 'DetectionConfig':
        return cls(
            window=settings.window,
            stride=settings.stride,
            detection_threshold=settings.detection_threshold,
            overlap_threshold=settings.overlap_threshold,
            batch_size=settings.batch_size,
            match_iou=settings.match_iou,
            workers=workers,
        )


@dataclass
class ScoreMap:
    """
    Scores of every window on the grid.

    Attributes:
        xs: Window left edges (columns of the grid)
        ys: Window top edges (rows of the grid)
        scores: Positive probabilities, shape (len(ys), len(xs))
        window: Window extent
    """

    xs: np.ndarray
    ys: np.ndarray
    scores: np.ndarray
    window: int

    @property
    def count(self) -> int:
        return int(self.scores.size)

    def candidates(self, threshold: float) -> List[Detection]:
        """Windows scoring at least threshold, in row-major grid order."""
        rows, cols = np.nonzero(self.scores >= threshold)
        return [
            Detection(box=BoundingBox(int(self.xs[c]), int(self.ys[r]), self.window, self.window),
                      score=float(self.scores[r, c]))
            for r, c in zip(rows, cols)
        ]


def grid_positions(extent: int, window: int, stride: int) -> np.ndarray:
    """Window origins along one axis, with a final window snapped flush to the far edge."""
    positions = list(range(0, extent - window + 1, stride))
    if positions[-1] != extent - window:
        positions.append(extent - window)
    return np.asarray(positions, dtype=np.int64)


def _check_model_input(image: np.ndarray, model, cfg: DetectionConfig) -> None:
    channels, size, _ = model.config.input_shape
    if image.ndim != 3:
        raise DimensionError(f"image must be (C, H, W), got shape {image.shape}")
    if image.shape[0] != channels:
        raise DimensionError(f"image has {image.shape[0]} channels, model expects {channels}")
    if cfg.window != size:
        raise DimensionError(f"window {cfg.window} does not match the model input size {size}")
    if image.shape[1] < cfg.window or image.shape[2] < cfg.window:
        raise DimensionError(f"image {image.shape[2]}x{image.shape[1]} is smaller than window {cfg.window}")


def score_windows(image: np.ndarray, model: ModelLike, cfg: DetectionConfig) -> ScoreMap:
    """
    Score every grid window with the classifier in infer mode.

    Args:
        image: (C, H, W) image in [0, 1]
        model: Float or quantized model
        cfg: Window, stride, batch size and workers

    Returns:
        ScoreMap over the grid

    Raises:
        DimensionError: Image smaller than the window or channel mismatch
    """
    runnable = as_model_state(model)
    _check_model_input(image, runnable, cfg)
    w = cfg.window
    ys = grid_positions(image.shape[1], w, cfg.stride)
    xs = grid_positions(image.shape[2], w, cfg.stride)

    view = sliding_window_view(image, (w, w), axis=(1, 2))  # (C, H-w+1, W-w+1, w, w)
    windows = view[:, ys][:, :, xs].transpose(1, 2, 0, 3, 4).reshape(-1, image.shape[0], w, w)
    windows = np.ascontiguousarray(windows, dtype=np.float32)

    chunks = chunk_indices(windows.shape[0], cfg.batch_size)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(lambda idx: predict_scores(runnable, windows[idx]), chunks))
    else:
        parts = [predict_scores(runnable, windows[idx]) for idx in chunks]
    scores = np.concatenate(parts).astype(np.float64).reshape(len(ys), len(xs))
    return ScoreMap(xs=xs, ys=ys, scores=scores, window=w)


def _nms_key(d: Detection):
    return (-d.score, d.box.y, d.box.x)


def nms(candidates: Sequence[Detection], overlap_threshold: float) -> List[Detection]:
    """
    Greedy non-maximum suppression.

    Keeps the best remaining candidate (score desc, then y asc, x asc) and
    drops every other candidate with IoU > overlap_threshold against it.

    Args:
        candidates: Detections already above the detection threshold
        overlap_threshold: Suppression IoU

    Returns:
        Kept detections sorted by score descending
    """
    remaining = sorted(candidates, key=_nms_key)
    kept: List[Detection] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [d for d in remaining if iou(best.box, d.box) <= overlap_threshold]
    return kept


def detect(image: np.ndarray, model: ModelLike, cfg: DetectionConfig) -> List[Detection]:
    """
    Score windows, threshold at detection_threshold and apply NMS.

    Returns:
        Detections sorted by score descending
    """
    score_map = score_windows(image, model, cfg)
    candidates = score_map.candidates(cfg.detection_threshold)
    kept = nms(candidates, cfg.overlap_threshold)
    logger.debug("%d windows, %d candidates, %d kept", score_map.count, len(candidates), len(kept))
    return kept


def render_detections(
    image: np.ndarray,
    detections: Sequence[Detection],
    truth_boxes: Sequence[BoundingBox],
    path: Optional[str] = None
) -> np.ndarray:
    """
    Draw truth boxes in white, then detections in red, as 1-pixel outlines.

    Args:
        image: (C, H, W) image in [0, 1]; gray is promoted to RGB
        detections: Detections to draw (on top)
        truth_boxes: Annotation boxes
        path: Output PPM path (skipped when None)

    Returns:
        (H, W, 3) uint8 overlay
    """
    pixels = promote_rgb(to_uint8(image))
    for box in truth_boxes:
        draw_outline(pixels, box, WHITE)
    for detection in detections:
        draw_outline(pixels, detection.box, RED)
    if path:
        ensure_parent_dir(path)
        write_pixels(pixels, path)
    return pixels


@dataclass
class MatchResult:
    """
    Detection-to-truth matching counts.

    Attributes:
        true_positives / false_positives / false_negatives: Counts
        pairs: (detection index, truth index) of every match
    """

    true_positives: int
    false_positives: int
    false_negatives: int
    pairs: List[tuple] = field(default_factory=list)

    @property
    def precision(self) -> float:
        found = self.true_positives + self.false_positives
        return self.true_positives / found if found else 0.0

    @property
    def recall(self) -> float:
        actual = self.true_positives + self.false_negatives
        return self.true_positives / actual if actual else 0.0

    def __add__(self, other: 'MatchResult') -> 'MatchResult':
        return MatchResult(
            true_positives=self.true_positives + other.true_positives,
            false_positives=self.false_positives + other.false_positives,
            false_negatives=self.false_negatives + other.false_negatives,
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "precision": self.precision,
            "recall": self.recall,
        }


def match_detections(
    detections: Sequence[Detection],
    truth_boxes: Sequence[BoundingBox],
    match_iou: float = 0.3
) -> MatchResult:
    """
    Greedy matching in descending score order.

    Each detection takes the unmatched truth box with the highest IoU if that
    IoU is at least match_iou (ties go to the lower truth index).

    Returns:
        MatchResult
    """
    order = sorted(range(len(detections)), key=lambda i: _nms_key(detections[i]))
    used = [False] * len(truth_boxes)
    pairs = []
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, truth in enumerate(truth_boxes):
            if used[j]:
                continue
            overlap = iou(detections[i].box, truth)
            if overlap > best_iou:
                best_j, best_iou = j, overlap
        if best_j >= 0 and best_iou >= match_iou:
            used[best_j] = True
            pairs.append((i, best_j))
    tp = len(pairs)
    return MatchResult(true_positives=tp, false_positives=len(detections) - tp,
                       false_negatives=len(truth_boxes) - tp, pairs=pairs)


@dataclass
class ImageDetections:
    """Detections of one image, with matching when truth is known."""

    image: str
    detections: List[Detection]
    match: Optional[MatchResult] = None


def detect_images(
    images: Iterable[AnnotatedImage],
    model: ModelLike,
    cfg: DetectionConfig,
    with_truth: bool = True
) -> List[ImageDetections]:
    """Run detect on every image and match against its annotation boxes."""
    runnable = as_model_state(model)
    results = []
    for image in images:
        found = detect(image.pixels, runnable, cfg)
        match = match_detections(found, image.boxes, cfg.match_iou) if with_truth else None
        results.append(ImageDetections(image=image.path, detections=found, match=match))
    return results


def total_match(results: Sequence[ImageDetections]) -> MatchResult:
    """Summed matching counts over images that have truth."""
    total = MatchResult(0, 0, 0)
    for result in results:
        if result.match is not None:
            total = total + result.match
    return total


def _holds_center(window: BoundingBox, truth: BoundingBox) -> bool:
    """True when truth's center lies in the central half of window."""
    cx, cy = truth.center
    q = window.w / 4.0
    return window.x + q <= cx < window.x + window.w - q and window.y + q <= cy < window.y + window.h - q


def mine_hard_negatives(
    images: Sequence[AnnotatedImage],
    model: ModelLike,
    cfg: DetectionConfig,
    limit_per_image: Optional[int] = None
) -> PatchSet:
    """
    Collect windows the model accepts that do not frame any annotation.

    A window scoring at least detection_threshold (before NMS) is a hard
    negative when its IoU with every truth box is below match_iou and no
    truth box center falls in its central half. Partially visible objects
    at window edges are the typical catch.

    Args:
        images: Annotated images (window-sized crops are taken from them)
        model: Float or quantized model
        cfg: Window, stride and thresholds
        limit_per_image: Keep at most this many per image, best scores first

    Returns:
        PatchSet of label-0 crops with provenance transform "hard_negative"
    """
    if limit_per_image is not None and limit_per_image < 0:
        raise ConfigError(f"limit_per_image must be >= 0, got {limit_per_image}")
    runnable = as_model_state(model)
    channels = runnable.config.input_shape[0]
    patches, provenance = [], []
    for image in images:
        score_map = score_windows(image.pixels, runnable, cfg)
        found = [d for d in sorted(score_map.candidates(cfg.detection_threshold), key=_nms_key)
                 if all(iou(d.box, t) < cfg.match_iou and not _holds_center(d.box, t) for t in image.boxes)]
        if limit_per_image is not None:
            found = found[:limit_per_image]
        for d in found:
            x, y = d.box.x, d.box.y
            patches.append(image.pixels[:, y:y + cfg.window, x:x + cfg.window].astype(np.float32))
            provenance.append({"image": image.path, "x": x, "y": y, "side": cfg.window,
                               "transform": "hard_negative"})
        logger.debug("%s: %d hard negatives", image.path, len(found))

    if not patches:
        return PatchSet.empty(cfg.window, channels)
    return PatchSet(patches=np.stack(patches), labels=np.zeros(len(patches), dtype=np.uint8),
                    provenance=provenance)


def write_detections(path: str, results: Sequence[ImageDetections]) -> int:
    """
    Write detections as JSON lines, one object per detection.

    Returns:
        Number of records written
    """
    ensure_parent_dir(path)
    return write_json_lines(path, (d.to_dict(image=r.image) for r in results for d in r.detections))
