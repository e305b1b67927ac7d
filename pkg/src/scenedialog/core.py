"""Shared domain types, vocabularies, and geometric primitives.

All types here are immutable (or treated as such) value objects and are safe
to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

BACKGROUND_PREDICATE = "__background__"

DIST_TOL = 1e-6


class SceneDialogError(Exception):
    """Base class for all package errors."""


class ValidationError(SceneDialogError):
    """A domain object violates one of its invariants."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box with normalized top-left corner and extent."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.x >= 0.0 and self.y >= 0.0):
            raise ValidationError(f"box corner must be nonnegative: {self}")
        if not (self.w > 0.0 and self.h > 0.0):
            raise ValidationError(f"box extent must be positive: {self}")
        if self.x + self.w > 1.0 + 1e-9 or self.y + self.h > 1.0 + 1e-9:
            raise ValidationError(f"box exceeds unit frame: {self}")

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.w * self.h

    def contains_point(self, px: float, py: float) -> bool:
        return self.x <= px <= self.x + self.w and self.y <= py <= self.y + self.h

    def contains_box(self, other: "BoundingBox") -> bool:
        return (
            self.x <= other.x
            and self.y <= other.y
            and self.x + self.w >= other.x + other.w
            and self.y + self.h >= other.y + other.h
        )

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two normalized boxes."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def union_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    """Smallest axis-aligned box containing both inputs."""
    x0 = min(a.x, b.x)
    y0 = min(a.y, b.y)
    x1 = max(a.x + a.w, b.x + b.w)
    y1 = max(a.y + a.h, b.y + b.h)
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class Vocabulary:
    """Object class names plus predicate names with a reserved background slot."""

    object_classes: Tuple[str, ...]
    predicate_classes: Tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "object_classes", tuple(self.object_classes))
        object.__setattr__(self, "predicate_classes", tuple(self.predicate_classes))
        if len(self.object_classes) < 2 or len(self.predicate_classes) < 2:
            raise ValidationError("vocabulary needs >= 2 object and predicate classes")
        if len(set(self.object_classes)) != len(self.object_classes):
            raise ValidationError("duplicate object class names")
        if len(set(self.predicate_classes)) != len(self.predicate_classes):
            raise ValidationError("duplicate predicate names")
        if self.predicate_classes[0] != BACKGROUND_PREDICATE:
            raise ValidationError("background predicate must sit at index 0")

    @property
    def num_classes(self) -> int:
        return len(self.object_classes)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_classes)

    def to_json_obj(self) -> dict:
        return {
            "object_classes": list(self.object_classes),
            "predicate_classes": list(self.predicate_classes),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["object_classes"]), tuple(obj["predicate_classes"]))


@dataclass(frozen=True)
class RelationTriple:
    """Directed subject --predicate--> object edge over scene objects."""

    subject_index: int
    predicate_index: int
    object_index: int

    def __post_init__(self):
        if self.subject_index == self.object_index:
            raise ValidationError("relation cannot be reflexive")
        if self.predicate_index <= 0:
            raise ValidationError("relation predicate must be non-background")


@dataclass(frozen=True)
class QACandidate:
    """One selectable question with its stored answer."""

    question_text: str
    answer_text: str
    is_ground_truth: bool
    target_object_index: Optional[int] = None

    def __post_init__(self):
        if not self.question_text.strip():
            raise ValidationError("question text must be nonempty")
        if self.is_ground_truth and self.target_object_index is None:
            raise ValidationError("ground-truth candidate needs a target object")
        if not self.is_ground_truth and self.target_object_index is not None:
            raise ValidationError("distractor candidate cannot target an object")


@dataclass(eq=False)
class SceneInstance:
    """Ground-truth scene: feature grid, labeled boxes, relations, QA pool."""

    scene_id: str
    feature_grid: np.ndarray  # H x W x D
    objects: List[Tuple[BoundingBox, int]]
    relations: List[RelationTriple]
    qa_candidates: List[QACandidate] = field(default_factory=list)

    def __post_init__(self):
        self.feature_grid = np.asarray(self.feature_grid, dtype=np.float64)
        if self.feature_grid.ndim != 3 or min(self.feature_grid.shape) < 1:
            raise ValidationError(
                f"{self.scene_id}: feature grid must be H x W x D with all dims >= 1"
            )
        if len(self.objects) < 1:
            raise ValidationError(f"{self.scene_id}: scene needs at least one object")
        n = len(self.objects)
        for rel in self.relations:
            if not (0 <= rel.subject_index < n and 0 <= rel.object_index < n):
                raise ValidationError(
                    f"{self.scene_id}: relation references object out of range"
                )
        for cand in self.qa_candidates:
            if cand.target_object_index is not None and not (
                0 <= cand.target_object_index < n
            ):
                raise ValidationError(
                    f"{self.scene_id}: QA candidate targets object out of range"
                )

    @property
    def num_objects(self) -> int:
        return len(self.objects)

    @property
    def boxes(self) -> List[BoundingBox]:
        return [box for box, _ in self.objects]

    @property
    def labels(self) -> List[int]:
        return [label for _, label in self.objects]

    def validate_against(self, vocab: Vocabulary) -> None:
        for _, label in self.objects:
            if not (0 <= label < vocab.num_classes):
                raise ValidationError(f"{self.scene_id}: object label out of range")
        for rel in self.relations:
            if not (0 < rel.predicate_index < vocab.num_predicates):
                raise ValidationError(f"{self.scene_id}: predicate out of range")

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneInstance):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and np.array_equal(self.feature_grid, other.feature_grid)
            and self.objects == other.objects
            and self.relations == other.relations
            and self.qa_candidates == other.qa_candidates
        )

    def to_json_obj(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "feature_grid": self.feature_grid.tolist(),
            "objects": [
                {"box": list(box.as_tuple()), "class_index": label}
                for box, label in self.objects
            ],
            "relations": [
                {
                    "subject_index": r.subject_index,
                    "predicate_index": r.predicate_index,
                    "object_index": r.object_index,
                }
                for r in self.relations
            ],
            "qa_candidates": [
                {
                    "question_text": c.question_text,
                    "answer_text": c.answer_text,
                    "is_ground_truth": c.is_ground_truth,
                    "target_object_index": c.target_object_index,
                }
                for c in self.qa_candidates
            ],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "SceneInstance":
        try:
            objects = [
                (BoundingBox(*o["box"]), int(o["class_index"])) for o in obj["objects"]
            ]
            relations = [
                RelationTriple(
                    int(r["subject_index"]),
                    int(r["predicate_index"]),
                    int(r["object_index"]),
                )
                for r in obj["relations"]
            ]
            candidates = [
                QACandidate(
                    question_text=c["question_text"],
                    answer_text=c["answer_text"],
                    is_ground_truth=bool(c["is_ground_truth"]),
                    target_object_index=c.get("target_object_index"),
                )
                for c in obj["qa_candidates"]
            ]
            return cls(
                scene_id=str(obj["scene_id"]),
                feature_grid=np.asarray(obj["feature_grid"], dtype=np.float64),
                objects=objects,
                relations=relations,
                qa_candidates=candidates,
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ValidationError(f"malformed scene record: {exc}") from exc


def save_scenes_jsonl(scenes: Iterable[SceneInstance], path) -> None:
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene.to_json_obj()) + "\n")


@dataclass(eq=False)
class SceneGraphPrediction:
    """Predicted graph: boxes, label distributions, per-pair predicate distributions."""

    boxes: List[BoundingBox]
    object_label_dist: np.ndarray  # n x C
    predicate_dist: np.ndarray  # n x n x P, diagonal pairs ignored

    def __post_init__(self):
        self.object_label_dist = np.asarray(self.object_label_dist, dtype=np.float64)
        self.predicate_dist = np.asarray(self.predicate_dist, dtype=np.float64)
        n = len(self.boxes)
        if self.object_label_dist.shape[0] != n or self.predicate_dist.shape[:2] != (n, n):
            raise ValidationError("prediction shapes inconsistent with box count")
        _check_rows_stochastic(self.object_label_dist, "object label")
        off_diag = self.predicate_dist[~np.eye(n, dtype=bool)]
        if off_diag.size:
            _check_rows_stochastic(off_diag, "predicate")

    @property
    def num_objects(self) -> int:
        return len(self.boxes)


def _check_rows_stochastic(rows: np.ndarray, what: str) -> None:
    flat = rows.reshape(-1, rows.shape[-1])
    if np.any(flat < -DIST_TOL):
        raise ValidationError(f"{what} distribution has negative entries")
    sums = flat.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > DIST_TOL):
        raise ValidationError(f"{what} distribution rows must sum to 1")
