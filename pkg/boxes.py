"""
Data structures for bounding boxes and detections.

Defines BoundingBox (annotation or window rectangle) and Detection (scored
window), along with rectangle helpers used by extraction, NMS and matching.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional


@dataclass(frozen=True)
class BoundingBox:
    """
    Axis-aligned pixel rectangle.

    Attributes:
        x: Left column of the top-left pixel
        y: Top row of the top-left pixel
        w: Width in pixels (> 0)
        h: Height in pixels (> 0)
        label: Optional class text
        score: Optional confidence in [0, 1]
    """

    x: float
    y: float
    w: float
    h: float
    label: Optional[str] = None
    score: Optional[float] = None

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"BoundingBox needs positive extents, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def contains_point(self, px: float, py: float) -> bool:
        """True if (px, py) lies inside the rectangle (edges inclusive)."""
        return self.x <= px <= self.x2 and self.y <= py <= self.y2

    def inside(self, width: int, height: int) -> bool:
        """True if the rectangle lies fully inside a width x height image."""
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def to_dict(self) -> Dict[str, Any]:
        """
        Convert BoundingBox to dictionary format for JSON serialization.

        Returns:
            Dictionary with x, y, w, h and label/score when present
        """
        data: Dict[str, Any] = {"x": self.x, "y": self.y, "w": self.w, "h": self.h}
        if self.label is not None:
            data["label"] = self.label
        if self.score is not None:
            data["score"] = self.score
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BoundingBox':
        """
        Create BoundingBox from dictionary.

        Args:
            data: Dictionary containing at minimum x, y, w and h

        Returns:
            New BoundingBox instance
        """
        return cls(
            x=data["x"],
            y=data["y"],
            w=data["w"],
            h=data["h"],
            label=data.get("label"),
            score=data.get("score")
        )


@dataclass(frozen=True)
class Detection:
    """
    A scored detection window.

    Attributes:
        box: Window rectangle
        score: Positive-class probability
    """

    box: BoundingBox
    score: float

    def to_dict(self, image: Optional[str] = None) -> Dict[str, Any]:
        """JSON-lines record: {"image", "x", "y", "w", "h", "score"}."""
        data: Dict[str, Any] = {}
        if image is not None:
            data["image"] = image
        data.update({"x": self.box.x, "y": self.box.y, "w": self.box.w, "h": self.box.h,
                     "score": self.score})
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Detection':
        """Create Detection from a JSON-lines record."""
        return cls(
            box=BoundingBox(x=data["x"], y=data["y"], w=data["w"], h=data["h"]),
            score=float(data["score"])
        )


def intersection_area(a: BoundingBox, b: BoundingBox) -> float:
    """Area of the overlap of two rectangles (0 when disjoint or touching)."""
    w = min(a.x2, b.x2) - max(a.x, b.x)
    h = min(a.y2, b.y2) - max(a.y, b.y)
    if w <= 0 or h <= 0:
        return 0.0
    return w * h


def intersects(a: BoundingBox, b: BoundingBox) -> bool:
    """True if the rectangles share a positive-area region."""
    return intersection_area(a, b) > 0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """
    Intersection over union of two positive-area rectangles.

    Args:
        a: First rectangle
        b: Second rectangle

    Returns:
        Overlap ratio in [0, 1]
    """
    inter = intersection_area(a, b)
    if inter == 0:
        return 0.0
    return inter / (a.area + b.area - inter)
