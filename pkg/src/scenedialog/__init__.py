"""Scene graph generation from corrupted visual input, supplemented by a
multi-round question-answer dialog against an oracle."""

from .core import (
    BoundingBox,
    QACandidate,
    RelationTriple,
    SceneDialogError,
    SceneGraphPrediction,
    SceneInstance,
    ValidationError,
    Vocabulary,
    iou,
    union_box,
)

__all__ = [
    "BoundingBox",
    "QACandidate",
    "RelationTriple",
    "SceneDialogError",
    "SceneGraphPrediction",
    "SceneInstance",
    "ValidationError",
    "Vocabulary",
    "iou",
    "union_box",
]

__version__ = "0.1.0"
