"""
Annotated images and labeled patch sets.

Reads JSON-lines annotation files, cuts positive patches centered on each
annotation and negatives from random annotation-free windows, augments
positives with the dihedral group, rebalances classes, splits by source image
and stores patch sets in PST1 archives.
"""

import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from boxes import BoundingBox, intersects
from errors import (
    AnnotationBoundsError,
    AnnotationImageMissingError,
    AnnotationSyntaxError,
    DatasetError,
    PatchArchiveError,
)
from raster import load_raster
from utils import derive_seed, ensure_parent_dir

logger = logging.getLogger(__name__)

PATCH_MAGIC = b"PST1"
_PATCH_HEADER = struct.Struct("<4sHBI")

# dihedral group of the square, identity first
DIHEDRAL = ("identity", "rot90", "rot180", "rot270", "flip_h", "flip_v", "transpose", "antitranspose")


@dataclass
class AnnotatedImage:
    """
    An image with its annotation boxes.

    Attributes:
        path: Image path as written in the annotation file
        pixels: float32 (C, H, W) in [0, 1]
        boxes: Annotation rectangles, all inside the image
        meta: Generator details for synthetic images (empty otherwise)
    """

    path: str
    pixels: np.ndarray
    boxes: List[BoundingBox] = field(default_factory=list)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[2])

    def to_record(self) -> Dict[str, Any]:
        """Annotation JSON-lines record for this image."""
        return {"image": self.path, "boxes": [box.to_dict() for box in self.boxes]}


@dataclass
class PatchSet:
    """
    Labeled patches.

    Attributes:
        patches: float32 (N, C, s, s)
        labels: uint8 (N,) with values 0/1
        provenance: One dict per patch: image, x, y, side, transform
        warnings: Recoverable problems met while building the set
    """

    patches: np.ndarray
    labels: np.ndarray
    provenance: List[Dict[str, Any]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.patches.ndim != 4:
            raise DatasetError(f"patches must be (N, C, s, s), got shape {self.patches.shape}")
        if self.patches.shape[2] != self.patches.shape[3]:
            raise DatasetError(f"patches must be square, got {self.patches.shape[2]}x{self.patches.shape[3]}")
        if self.labels.shape != (self.patches.shape[0],):
            raise DatasetError(f"{self.labels.shape[0]} labels for {self.patches.shape[0]} patches")
        if self.labels.size and self.labels.max() > 1:
            raise DatasetError("labels must be 0 or 1")
        if self.provenance and len(self.provenance) != len(self.labels):
            raise DatasetError(f"{len(self.provenance)} provenance records for {len(self.labels)} patches")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def patch_size(self) -> int:
        return int(self.patches.shape[2])

    @property
    def channels(self) -> int:
        return int(self.patches.shape[1])

    @property
    def positive_count(self) -> int:
        return int(self.labels.sum())

    @property
    def negative_count(self) -> int:
        return len(self) - self.positive_count

    @property
    def positive_fraction(self) -> float:
        return self.positive_count / len(self) if len(self) else 0.0

    def source_images(self) -> List[str]:
        """Distinct source image names in first-seen order."""
        seen: Dict[str, None] = {}
        for record in self.provenance:
            seen.setdefault(record["image"], None)
        return list(seen)

    def subset(self, indices: Sequence[int]) -> 'PatchSet':
        """New PatchSet holding the given patches in the given order."""
        idx = np.asarray(indices, dtype=np.int64)
        return PatchSet(
            patches=self.patches[idx],
            labels=self.labels[idx],
            provenance=[self.provenance[i] for i in idx] if self.provenance else [],
            warnings=list(self.warnings),
        )

    @classmethod
    def empty(cls, patch_size: int, channels: int) -> 'PatchSet':
        return cls(patches=np.zeros((0, channels, patch_size, patch_size), dtype=np.float32),
                   labels=np.zeros(0, dtype=np.uint8))

    @classmethod
    def concatenate(cls, sets: Sequence['PatchSet']) -> 'PatchSet':
        """Join patch sets in order."""
        if not sets:
            raise DatasetError("Nothing to concatenate")
        return cls(
            patches=np.concatenate([s.patches for s in sets]),
            labels=np.concatenate([s.labels for s in sets]),
            provenance=[p for s in sets for p in s.provenance],
            warnings=[w for s in sets for w in s.warnings],
        )

    def summary(self) -> str:
        """One-line description: counts and positive percentage."""
        return (f"{len(self):,} patches ({self.positive_count:,} positive, "
                f"{self.positive_fraction * 100:.1f}%), {self.channels}x{self.patch_size}x{self.patch_size}")


# ---------------------------------------------------------------------------
# Annotations
# ---------------------------------------------------------------------------

def _parse_box(data: Any, line: int) -> BoundingBox:
    if not isinstance(data, dict):
        raise AnnotationSyntaxError("box must be an object", line)
    missing = [key for key in ("x", "y", "w", "h") if key not in data]
    if missing:
        raise AnnotationSyntaxError(f"box missing {', '.join(missing)}", line)
    try:
        return BoundingBox(
            x=float(data["x"]), y=float(data["y"]), w=float(data["w"]), h=float(data["h"]),
            label=data.get("label"), score=data.get("score"),
        )
    except (TypeError, ValueError) as e:
        raise AnnotationSyntaxError(f"invalid box: {e}", line) from e


def load_annotations(path: str, base_dir: Optional[str] = None) -> List[AnnotatedImage]:
    """
    Read a JSON-lines annotation file and the images it references.

    Each non-blank line is {"image": <path relative to base_dir>, "boxes": [...]}.
    Out-of-bounds boxes are an error, not clipped.

    Args:
        path: Annotation file path
        base_dir: Directory image paths are relative to (default: the file's directory)

    Returns:
        AnnotatedImage list in file order

    Raises:
        AnnotationSyntaxError: Malformed JSON or record
        AnnotationImageMissingError: Referenced image does not exist
        AnnotationBoundsError: Box outside its image
    """
    if base_dir is None:
        base_dir = os.path.dirname(os.path.abspath(path))

    images = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationSyntaxError(f"invalid JSON: {e.msg}", line_no) from e
            if not isinstance(record, dict) or not isinstance(record.get("image"), str):
                raise AnnotationSyntaxError('record needs an "image" string', line_no)
            raw_boxes = record.get("boxes", [])
            if not isinstance(raw_boxes, list):
                raise AnnotationSyntaxError('"boxes" must be a list', line_no)

            image_path = os.path.join(base_dir, record["image"])
            if not os.path.isfile(image_path):
                raise AnnotationImageMissingError(f"image not found: {record['image']}", line_no)
            pixels = load_raster(image_path)
            height, width = pixels.shape[1], pixels.shape[2]

            boxes = [_parse_box(item, line_no) for item in raw_boxes]
            for box in boxes:
                if not box.inside(width, height):
                    raise AnnotationBoundsError(
                        f"box ({box.x:g}, {box.y:g}, {box.w:g}, {box.h:g}) exceeds "
                        f"{width}x{height} image {record['image']}", line_no
                    )
            images.append(AnnotatedImage(path=record["image"], pixels=pixels, boxes=boxes))
    return images


def load_truth_boxes(path: str) -> Dict[str, List[BoundingBox]]:
    """Annotation boxes keyed by image path, without loading pixels."""
    truth: Dict[str, List[BoundingBox]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise AnnotationSyntaxError(f"invalid JSON: {e.msg}", line_no) from e
            if not isinstance(record, dict) or not isinstance(record.get("image"), str):
                raise AnnotationSyntaxError('record needs an "image" string', line_no)
            truth[record["image"]] = [_parse_box(item, line_no) for item in record.get("boxes", [])]
    return truth


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

def resample_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """
    Resize a (C, h, w) array to (C, size, size) by bilinear interpolation.

    Sample centers are aligned (pixel i covers [i, i+1)); edge samples clamp.
    """
    c, h, w = image.shape
    if h == size and w == size:
        return image.copy()

    def axis(src: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        pos = (np.arange(size) + 0.5) * (src / size) - 0.5
        pos = np.clip(pos, 0, src - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    img = image.astype(np.float64)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bottom = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bottom * fy[:, None]
    return out.astype(image.dtype)


def positive_window(box: BoundingBox, patch_size: int, width: int, height: int) -> Tuple[int, int, int]:
    """
    Square crop centered on a box.

    The side is max(patch_size, box max-dimension), limited to the image, and
    the window is shifted to stay inside the image.

    Returns:
        Tuple of (x, y, side)
    """
    side = max(patch_size, int(math.ceil(max(box.w, box.h))))
    side = min(side, width, height)
    cx, cy = box.center
    x = int(math.floor(cx - side / 2.0 + 0.5))
    y = int(math.floor(cy - side / 2.0 + 0.5))
    x = min(max(x, 0), width - side)
    y = min(max(y, 0), height - side)
    return x, y, side


def _extract_one(
    index: int,
    image: AnnotatedImage,
    patch_size: int,
    neg_per_image: int,
    max_neg_tries: int,
    seed: int
) -> Tuple[List[np.ndarray], List[int], List[Dict[str, Any]], List[str]]:
    height, width = image.height, image.width
    if height < patch_size or width < patch_size:
        message = f"{image.path}: {width}x{height} image smaller than patch {patch_size}, skipped"
        logger.warning(message)
        return [], [], [], [message]

    patches, labels, provenance, warnings = [], [], [], []
    for box in image.boxes:
        x, y, side = positive_window(box, patch_size, width, height)
        crop = image.pixels[:, y:y + side, x:x + side]
        patches.append(resample_bilinear(crop, patch_size))
        labels.append(1)
        provenance.append({"image": image.path, "x": x, "y": y, "side": side, "transform": "identity"})

    rng = np.random.default_rng(derive_seed(seed, index))
    found = 0
    tries = 0
    while found < neg_per_image and tries < max_neg_tries:
        tries += 1
        x = int(rng.integers(0, width - patch_size + 1))
        y = int(rng.integers(0, height - patch_size + 1))
        window = BoundingBox(x, y, patch_size, patch_size)
        if any(intersects(window, box) for box in image.boxes):
            continue
        patches.append(image.pixels[:, y:y + patch_size, x:x + patch_size].copy())
        labels.append(0)
        provenance.append({"image": image.path, "x": x, "y": y, "side": patch_size, "transform": "identity"})
        found += 1

    if found < neg_per_image:
        message = f"{image.path}: only {found}/{neg_per_image} negatives after {max_neg_tries} tries"
        logger.warning(message)
        warnings.append(message)
    return patches, labels, provenance, warnings


def extract_patches(
    images: Sequence[AnnotatedImage],
    patch_size: int,
    neg_per_image: int,
    max_neg_tries: int = 1000,
    seed: int = 42,
    workers: int = 1
) -> PatchSet:
    """
    Cut one positive per annotation and random negatives from every image.

    Positives are centered on the annotation box and resampled to
    patch_size. Negatives are drawn uniformly and rejected when they overlap
    any annotation with positive area. Each image uses a seed derived from
    (seed, image index), so the result does not depend on worker count.

    Args:
        images: Annotated images
        patch_size: Output patch extent
        neg_per_image: Negatives requested per image
        max_neg_tries: Candidate windows drawn per image before giving up
        seed: Base seed
        workers: Threads for per-image extraction

    Returns:
        PatchSet in image order (positives then negatives per image)
    """
    if patch_size < 1:
        raise DatasetError(f"patch_size must be >= 1, got {patch_size}")
    if not images:
        raise DatasetError("No images to extract patches from")
    channels = int(images[0].pixels.shape[0])

    args = [(i, image, patch_size, neg_per_image, max_neg_tries, seed) for i, image in enumerate(images)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _extract_one(*a), args))
    else:
        results = [_extract_one(*a) for a in args]

    patches = [p for r in results for p in r[0]]
    labels = [label for r in results for label in r[1]]
    provenance = [p for r in results for p in r[2]]
    warnings = [w for r in results for w in r[3]]
    if not patches:
        result = PatchSet.empty(patch_size, channels)
        result.warnings = warnings
        return result
    return PatchSet(
        patches=np.stack(patches).astype(np.float32),
        labels=np.asarray(labels, dtype=np.uint8),
        provenance=provenance,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# Augmentation, rebalancing, splitting
# ---------------------------------------------------------------------------

def apply_dihedral(patch: np.ndarray, transform: str) -> np.ndarray:
    """Apply a dihedral-group element to the spatial axes of a (C, s, s) patch."""
    if transform == "identity":
        out = patch
    elif transform == "rot90":
        out = np.rot90(patch, 1, axes=(1, 2))
    elif transform == "rot180":
        out = np.rot90(patch, 2, axes=(1, 2))
    elif transform == "rot270":
        out = np.rot90(patch, 3, axes=(1, 2))
    elif transform == "flip_h":
        out = patch[:, :, ::-1]
    elif transform == "flip_v":
        out = patch[:, ::-1, :]
    elif transform == "transpose":
        out = patch.transpose(0, 2, 1)
    elif transform == "antitranspose":
        out = np.rot90(patch.transpose(0, 2, 1), 2, axes=(1, 2))
    else:
        raise ValueError(f"Unknown transform '{transform}'")
    return np.ascontiguousarray(out)


def augment_positives(patches: PatchSet, multiplier: int, seed: int = 42) -> PatchSet:
    """
    Add multiplier - 1 transformed copies of every positive patch.

    Transforms are drawn from the seven non-identity dihedral elements,
    without repetition while multiplier <= 8. Negatives are untouched; the
    extras are appended after the input patches.

    Args:
        patches: Input set
        multiplier: Positive count factor (>= 1)
        seed: Seed for transform choice

    Returns:
        Augmented PatchSet
    """
    if multiplier < 1:
        raise DatasetError(f"multiplier must be >= 1, got {multiplier}")
    if multiplier == 1 or patches.positive_count == 0:
        return patches.subset(np.arange(len(patches)))

    rng = np.random.default_rng(seed)
    extras = multiplier - 1
    choices = DIHEDRAL[1:]
    new_patches, new_provenance = [], []
    for i in np.flatnonzero(patches.labels == 1):
        picks = rng.choice(len(choices), size=extras, replace=extras > len(choices))
        for pick in picks:
            name = choices[int(pick)]
            new_patches.append(apply_dihedral(patches.patches[i], name))
            source = dict(patches.provenance[i]) if patches.provenance else {"image": "", "x": 0, "y": 0}
            source["transform"] = name
            new_provenance.append(source)

    provenance = list(patches.provenance) + new_provenance if patches.provenance else []
    return PatchSet(
        patches=np.concatenate([patches.patches, np.stack(new_patches)]),
        labels=np.concatenate([patches.labels, np.ones(len(new_patches), dtype=np.uint8)]),
        provenance=provenance,
        warnings=list(patches.warnings),
    )


def rebalance(patches: PatchSet, target_pos_fraction: float, seed: int = 42) -> PatchSet:
    """
    Discard negatives until positives make up target_pos_fraction.

    Args:
        patches: Input set with both classes
        target_pos_fraction: Desired positive share in (0, 1)
        seed: Seed for choosing retained negatives

    Returns:
        PatchSet with all positives and a seeded subset of negatives, in input order

    Raises:
        DatasetError: Missing class, or the target would require discarding positives
    """
    if not 0 < target_pos_fraction < 1:
        raise DatasetError(f"target_pos_fraction must be in (0, 1), got {target_pos_fraction}")
    pos = patches.positive_count
    neg = patches.negative_count
    if pos == 0 or neg == 0:
        raise DatasetError(f"rebalance needs both classes (have {pos} positive, {neg} negative)")

    keep_neg = int(round(pos * (1.0 - target_pos_fraction) / target_pos_fraction))
    if keep_neg > neg:
        raise DatasetError(
            f"target positive fraction {target_pos_fraction} needs {keep_neg} negatives but only {neg} exist; "
            f"reaching it would require discarding positives"
        )
    keep_neg = max(keep_neg, 1)

    neg_idx = np.flatnonzero(patches.labels == 0)
    rng = np.random.default_rng(seed)
    kept = np.sort(rng.choice(neg_idx, size=keep_neg, replace=False))
    keep = np.sort(np.concatenate([np.flatnonzero(patches.labels == 1), kept]))
    return patches.subset(keep)


def split(patches: PatchSet, test_fraction: float, seed: int = 42) -> Tuple[PatchSet, PatchSet]:
    """
    Split by source image so no image contributes to both sides.

    Args:
        patches: Input set with provenance
        test_fraction: Share of source images assigned to the test side
        seed: Seed for the image permutation

    Returns:
        Tuple of (train, test), each in input order

    Raises:
        DatasetError: Fewer than 2 source images
    """
    if not 0 < test_fraction < 1:
        raise DatasetError(f"test_fraction must be in (0, 1), got {test_fraction}")
    images = sorted(patches.source_images())
    if len(images) < 2:
        raise DatasetError(f"split needs at least 2 source images, got {len(images)}")

    n_test = min(max(int(round(len(images) * test_fraction)), 1), len(images) - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    test_images = {images[i] for i in order[:n_test]}

    is_test = np.array([record["image"] in test_images for record in patches.provenance], dtype=bool)
    return patches.subset(np.flatnonzero(~is_test)), patches.subset(np.flatnonzero(is_test))


# ---------------------------------------------------------------------------
# PST1 archive
# ---------------------------------------------------------------------------

def save_patches(patches: PatchSet, path: str) -> int:
    """
    Write a PST1 patch archive.

    Layout (little-endian): "PST1" | extent u16 | channels u8 | count u32 |
    labels u8[count] | f32 patch data | u32 length + provenance JSON.

    Returns:
        Number of bytes written
    """
    trailer = json.dumps({"provenance": patches.provenance, "warnings": patches.warnings},
                         sort_keys=True, ensure_ascii=False).encode("utf-8")
    data = b"".join([
        _PATCH_HEADER.pack(PATCH_MAGIC, patches.patch_size, patches.channels, len(patches)),
        patches.labels.astype(np.uint8).tobytes(),
        np.ascontiguousarray(patches.patches, dtype="<f4").tobytes(),
        struct.pack("<I", len(trailer)),
        trailer,
    ])
    ensure_parent_dir(path)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def load_patches(path: str) -> PatchSet:
    """
    Read a PST1 patch archive.

    Raises:
        PatchArchiveError: Bad magic, truncation or malformed trailer
    """
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _PATCH_HEADER.size:
        raise PatchArchiveError(f"{path}: file too short for a patch archive header")
    magic, size, channels, count = _PATCH_HEADER.unpack_from(data, 0)
    if magic != PATCH_MAGIC:
        raise PatchArchiveError(f"{path}: bad magic {magic!r} (expected {PATCH_MAGIC!r})")

    offset = _PATCH_HEADER.size
    n_values = count * channels * size * size
    need = offset + count + 4 * n_values + 4
    if len(data) < need:
        raise PatchArchiveError(f"{path}: truncated ({len(data)} bytes, need at least {need})")
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=offset).copy()
    offset += count
    values = np.frombuffer(data, dtype="<f4", count=n_values, offset=offset)
    offset += 4 * n_values
    (trailer_len,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if len(data) < offset + trailer_len:
        raise PatchArchiveError(f"{path}: truncated provenance trailer")
    try:
        trailer = json.loads(data[offset:offset + trailer_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise PatchArchiveError(f"{path}: malformed provenance trailer: {e}") from e
    if labels.size and labels.max() > 1:
        raise PatchArchiveError(f"{path}: labels must be 0 or 1")

    return PatchSet(
        patches=values.reshape(count, channels, size, size).astype(np.float32),
        labels=labels,
        provenance=trailer.get("provenance", []),
        warnings=trailer.get("warnings", []),
    )
