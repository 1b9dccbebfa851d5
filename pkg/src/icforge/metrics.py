"""Evaluation metrics: box overlap, detection quality, region error.

Boxes follow the half-open integer pixel convention: [xmin, ymin, xmax,
ymax) with area (xmax - xmin) * (ymax - ymin). Detection quality at an
IoU threshold of 0.5 reduces, for a single confidence-free prediction
per image, to the fraction of images whose prediction clears the
threshold; images without a prediction count as misses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ValidationError


def _coords(box) -> tuple[float, float, float, float]:
    if hasattr(box, "xmin"):
        return box.xmin, box.ymin, box.xmax, box.ymax
    xmin, ymin, xmax, ymax = box
    return xmin, ymin, xmax, ymax


def iou(a, b) -> float:
    """Intersection over union of two boxes; degenerate boxes score 0."""
    ax0, ay0, ax1, ay1 = _coords(a)
    bx0, by0, bx1, by1 = _coords(b)
    area_a = max(ax1 - ax0, 0) * max(ay1 - ay0, 0)
    area_b = max(bx1 - bx0, 0) * max(by1 - by0, 0)
    iw = max(min(ax1, bx1) - max(ax0, bx0), 0)
    ih = max(min(ay1, by1) - max(ay0, by0), 0)
    inter = iw * ih
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return inter / union


# ---------------------------------------------------------------------------
# annotations and detection quality
# ---------------------------------------------------------------------------

@dataclass
class Annotation:
    id: str
    width: int
    height: int
    bbox_tgt: tuple[int, int, int, int] | None = None
    bbox_ref: tuple[int, int, int, int] | None = None
    tag: str = ""


@dataclass
class AnnotationSet:
    items: dict[str, Annotation] = field(default_factory=dict)

    def add(self, ann: Annotation) -> None:
        if ann.id in self.items:
            raise ValidationError(f"duplicate annotation id '{ann.id}'")
        self.items[ann.id] = ann

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for ann in self.items.values():
                fh.write(json.dumps({
                    "id": ann.id, "width": ann.width, "height": ann.height,
                    "bbox_tgt": list(ann.bbox_tgt) if ann.bbox_tgt else None,
                    "bbox_ref": list(ann.bbox_ref) if ann.bbox_ref else None,
                    "tag": ann.tag,
                }) + "\n")

    @classmethod
    def load(cls, path) -> "AnnotationSet":
        out = cls()
        for line in Path(path).read_text().splitlines():
            d = json.loads(line)
            out.add(Annotation(
                d["id"], d["width"], d["height"],
                tuple(d["bbox_tgt"]) if d.get("bbox_tgt") else None,
                tuple(d["bbox_ref"]) if d.get("bbox_ref") else None,
                d.get("tag", ""),
            ))
        return out


def map_at_50(predictions: dict[str, object], annotations: AnnotationSet,
              role: str = "tgt") -> float:
    """Fraction of annotated images whose prediction reaches IoU 0.5."""
    if role not in ("tgt", "ref"):
        raise ValidationError(f"unknown box role '{role}'")
    unknown = set(predictions) - set(annotations.items)
    if unknown:
        raise ValidationError(f"predictions for unknown ids: {sorted(unknown)[:4]}")
    total = 0
    hits = 0
    for rid, ann in annotations.items.items():
        truth = ann.bbox_tgt if role == "tgt" else ann.bbox_ref
        if truth is None:
            continue
        total += 1
        pred = predictions.get(rid)
        if pred is None:
            continue
        if iou(pred, truth) >= 0.5:
            hits += 1
    if total == 0:
        raise ValidationError(f"no annotations carry a {role} box")
    return hits / total


def mean_iou(predictions: dict[str, object], annotations: AnnotationSet,
             role: str = "tgt") -> float:
    """Average IoU over annotated images; a missing prediction scores 0."""
    total = 0
    acc = 0.0
    for rid, ann in annotations.items.items():
        truth = ann.bbox_tgt if role == "tgt" else ann.bbox_ref
        if truth is None:
            continue
        total += 1
        pred = predictions.get(rid)
        if pred is not None:
            acc += iou(pred, truth)
    if total == 0:
        raise ValidationError(f"no annotations carry a {role} box")
    return acc / total


# ---------------------------------------------------------------------------
# pixel metrics
# ---------------------------------------------------------------------------

def _unit_range(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def subject_region_error(a: np.ndarray, b: np.ndarray,
                         mask: np.ndarray) -> float:
    """Mean squared channel difference over the masked pixels, in [0, 1]."""
    fa, fb = _unit_range(a), _unit_range(b)
    if fa.shape != fb.shape:
        raise DimensionError("images must share a shape")
    picked = np.asarray(mask) > 0
    if picked.shape != fa.shape[:2]:
        raise DimensionError("mask must match the image grid")
    if not picked.any():
        raise ValidationError("subject mask is empty")
    diff = fa[picked] - fb[picked]
    return float(np.mean(diff * diff))


class ToyEmbedBackend:
    """Deterministic image embedding: pooled patch colors, unit norm."""

    kind = "oracle"

    def __init__(self, grid: int = 8):
        self.grid = grid

    def embed(self, image: np.ndarray) -> np.ndarray:
        arr = _unit_range(image)
        h, w = arr.shape[:2]
        g = self.grid
        ys = (np.arange(h) * g // h)
        xs = (np.arange(w) * g // w)
        pooled = np.zeros((g, g, 3))
        counts = np.zeros((g, g, 1))
        np.add.at(pooled, (ys[:, None], xs[None, :]), arr)
        np.add.at(counts, (ys[:, None], xs[None, :]), 1.0)
        vec = (pooled / counts).reshape(-1)
        norm = np.linalg.norm(vec)
        return vec if norm == 0 else vec / norm


def embed_similarity(a: np.ndarray, b: np.ndarray, backend=None) -> float:
    """Cosine similarity of backend embeddings; symmetric by construction."""
    backend = backend or ToyEmbedBackend()
    if np.array_equal(np.asarray(a), np.asarray(b)):
        return 1.0
    va = backend.embed(a)
    vb = backend.embed(b)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(va, vb) / (na * nb))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Aggregated localization scores plus optional pixel-error deltas."""

    mean_iou_tgt: float
    map50_tgt: float
    mean_iou_ref: float | None = None
    map50_ref: float | None = None
    map50_pooled: float | None = None
    per_image: dict[str, float] = field(default_factory=dict)
    subject_error: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "mean_iou_tgt": self.mean_iou_tgt,
            "map50_tgt": self.map50_tgt,
            "mean_iou_ref": self.mean_iou_ref,
            "map50_ref": self.map50_ref,
            "map50_pooled": self.map50_pooled,
            "per_image": self.per_image,
            "subject_error": self.subject_error,
        }, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["id,iou"]
        for rid in sorted(self.per_image):
            lines.append(f"{rid},{self.per_image[rid]:.6f}")
        return "\n".join(lines) + "\n"


def evaluate_boxes(predictions_tgt: dict[str, object],
                   annotations: AnnotationSet,
                   predictions_ref: dict[str, object] | None = None) -> EvalReport:
    """Score predictions against annotations, pooled and per role."""
    report = EvalReport(
        mean_iou_tgt=mean_iou(predictions_tgt, annotations, "tgt"),
        map50_tgt=map_at_50(predictions_tgt, annotations, "tgt"),
    )
    for rid, ann in annotations.items.items():
        if ann.bbox_tgt is not None and rid in predictions_tgt:
            report.per_image[rid] = iou(predictions_tgt[rid], ann.bbox_tgt)
    pooled_hits = []
    for rid, ann in annotations.items.items():
        if ann.bbox_tgt is None:
            continue
        pred = predictions_tgt.get(rid)
        pooled_hits.append(pred is not None and iou(pred, ann.bbox_tgt) >= 0.5)
    if predictions_ref is not None:
        report.mean_iou_ref = mean_iou(predictions_ref, annotations, "ref")
        report.map50_ref = map_at_50(predictions_ref, annotations, "ref")
        for rid, ann in annotations.items.items():
            if ann.bbox_ref is None:
                continue
            pred = predictions_ref.get(rid)
            pooled_hits.append(pred is not None and iou(pred, ann.bbox_ref) >= 0.5)
    report.map50_pooled = float(np.mean(pooled_hits)) if pooled_hits else None
    return report
