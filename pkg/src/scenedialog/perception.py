"""Object detection on corrupted grids: region pooling and the linear detector.

The detector output is the preliminary object set: per-object node features,
per-ordered-pair edge features pooled from union boxes, and label logits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from .core import BoundingBox, SceneDialogError, ValidationError, iou, union_box
from .datagen import cell_centers, cells_in_box
from .missingness import CorruptedScene

ANCHOR_SCALES = (0.15, 0.25, 0.35)
ANCHOR_GRID = 6  # anchor centers per axis
NMS_IOU = 0.5


class DetectorError(SceneDialogError):
    pass


@dataclass(eq=False)
class PreliminaryObjectSet:
    """Detected boxes with node features, pairwise edge features, and logits."""

    boxes: List[BoundingBox]
    node_features: np.ndarray  # n x d
    edge_features: np.ndarray  # n x n x d, diagonal unused
    label_logits: np.ndarray  # n x C

    def __post_init__(self):
        n = len(self.boxes)
        if n < 1:
            raise ValidationError("object set needs at least one object")
        if self.node_features.shape[0] != n or self.edge_features.shape[:2] != (n, n):
            raise ValidationError("feature shapes inconsistent with box count")
        if self.node_features.shape[1] != self.edge_features.shape[2]:
            raise ValidationError("node and edge feature widths must match")
        for arr in (self.node_features, self.edge_features, self.label_logits):
            if not np.all(np.isfinite(arr)):
                raise ValidationError("object set features must be finite")

    @property
    def num_objects(self) -> int:
        return len(self.boxes)

    def ordered_pairs(self) -> List[Tuple[int, int]]:
        n = self.num_objects
        return [(i, j) for i in range(n) for j in range(n) if i != j]

    def edge_feature_list(self) -> List[np.ndarray]:
        return [self.edge_features[i, j] for i, j in self.ordered_pairs()]


@dataclass
class DetectorParams:
    weights: np.ndarray  # d x C
    bias: np.ndarray  # C
    threshold: float = 0.5
    trained: bool = False

    def __post_init__(self):
        if not (0.0 < self.threshold < 1.0):
            raise ValidationError("score threshold must lie in (0,1)")

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(
                {
                    "weights": self.weights.tolist(),
                    "bias": self.bias.tolist(),
                    "threshold": self.threshold,
                    "trained": self.trained,
                },
                fh,
            )

    @classmethod
    def load(cls, path) -> "DetectorParams":
        with open(path) as fh:
            obj = json.load(fh)
        return cls(
            weights=np.asarray(obj["weights"], dtype=np.float64),
            bias=np.asarray(obj["bias"], dtype=np.float64),
            threshold=float(obj["threshold"]),
            trained=bool(obj["trained"]),
        )


def pool_region(grid: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Mean of cells whose centers lie in the box, plus the box geometry tail."""
    h, w, _ = grid.shape
    mask = cells_in_box(h, w, box)
    if mask.any():
        pooled = grid[mask].mean(axis=0)
    else:
        cx, cy = cell_centers(h, w)
        bx, by = box.center
        nearest = np.argmin((cx - bx) ** 2 + (cy - by) ** 2)
        pooled = grid.reshape(-1, grid.shape[2])[nearest]
    return np.concatenate([pooled, np.asarray(box.as_tuple())])


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _anchor_boxes() -> List[BoundingBox]:
    anchors = []
    centers = (np.arange(ANCHOR_GRID) + 0.5) / ANCHOR_GRID
    for scale in ANCHOR_SCALES:
        for cy in centers:
            for cx in centers:
                x = min(max(cx - scale / 2.0, 0.0), 1.0 - scale)
                y = min(max(cy - scale / 2.0, 0.0), 1.0 - scale)
                anchors.append(BoundingBox(x, y, scale, scale))
    return anchors


def _propose_boxes(grid: np.ndarray, params: DetectorParams) -> List[BoundingBox]:
    anchors = _anchor_boxes()
    feats = np.stack([pool_region(grid, a) for a in anchors])
    scores = _softmax(feats @ params.weights + params.bias).max(axis=1)
    order = np.argsort(-scores, kind="stable")
    kept: List[BoundingBox] = []
    for idx in order:
        if scores[idx] < params.threshold:
            break
        cand = anchors[idx]
        if all(iou(cand, k) <= NMS_IOU for k in kept):
            kept.append(cand)
    if not kept:
        kept = [anchors[order[0]]]  # never return an empty detection
    return kept


def detect(corrupted: CorruptedScene, params: DetectorParams, mode: str) -> PreliminaryObjectSet:
    """First pipeline factor: boxes, node/edge features, label logits."""
    if mode not in ("gt_boxes", "predicted_boxes"):
        raise DetectorError(f"unknown detect mode {mode!r}")
    if mode == "predicted_boxes" and not params.trained:
        raise DetectorError("predicted_boxes mode requires a trained detector")

    grid = corrupted.corrupted_grid
    if mode == "gt_boxes":
        boxes = list(corrupted.base.boxes)
    else:
        boxes = _propose_boxes(grid, params)

    n = len(boxes)
    nodes = np.stack([pool_region(grid, b) for b in boxes])
    d = nodes.shape[1]
    edges = np.zeros((n, n, d))
    union_pooled = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            key = (min(i, j), max(i, j))
            if key not in union_pooled:
                u = union_box(boxes[i], boxes[j])
                union_pooled[key] = pool_region(grid, u)[:-4]
            # Shared union-box channels; the geometry tail is the subject box.
            edges[i, j] = np.concatenate([union_pooled[key], np.asarray(boxes[i].as_tuple())])
    logits = nodes @ params.weights + params.bias
    return PreliminaryObjectSet(
        boxes=boxes, node_features=nodes, edge_features=edges, label_logits=logits
    )


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 200
    learning_rate: float = 0.5
    threshold: float = 0.5


def train_detector(
    dataset: Sequence[CorruptedScene],
    cfg: DetectorTrainConfig = DetectorTrainConfig(),
    num_classes: int | None = None,
) -> DetectorParams:
    """Fit the linear classifier on pooled GT-box features by gradient descent."""
    if not dataset:
        raise DetectorError("cannot train a detector on an empty dataset")
    feats = []
    labels = []
    for corrupted in dataset:
        for box, label in corrupted.base.objects:
            feats.append(pool_region(corrupted.corrupted_grid, box))
            labels.append(label)
    x = np.stack(feats)
    y = np.asarray(labels)
    if num_classes is None:
        num_classes = int(y.max()) + 1
    d = x.shape[1]

    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    onehot = np.eye(num_classes)[y]
    for _ in range(cfg.epochs):
        probs = _softmax(x @ w + b)
        grad = (probs - onehot) / len(y)
        w -= cfg.learning_rate * (x.T @ grad)
        b -= cfg.learning_rate * grad.sum(axis=0)
    return DetectorParams(weights=w, bias=b, threshold=cfg.threshold, trained=True)


def train_accuracy(dataset: Sequence[CorruptedScene], params: DetectorParams) -> float:
    correct = 0
    total = 0
    for corrupted in dataset:
        for box, label in corrupted.base.objects:
            feats = pool_region(corrupted.corrupted_grid, box)
            correct += int(np.argmax(feats @ params.weights + params.bias) == label)
            total += 1
    return correct / total if total else 0.0
