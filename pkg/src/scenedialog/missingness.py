"""Corruption of scene feature grids: object blur, image blur, semantic mask."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, Sequence

import numpy as np

from .core import SceneDialogError, SceneInstance, ValidationError
from .datagen import cells_in_box

CORRUPTION_KINDS = ("object_blur", "image_blur", "semantic_mask", "none")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    sigma: float = 0.0  # blur strength in grid-cell units; ignored for mask/none

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValidationError(f"unknown corruption kind {self.kind!r}")
        if self.kind in ("object_blur", "image_blur") and not self.sigma > 0.0:
            raise ValidationError("blur requires sigma > 0")
        if self.sigma < 0.0:
            raise ValidationError("sigma must be nonnegative")

    def to_json_obj(self) -> dict:
        return {"kind": self.kind, "sigma": self.sigma}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CorruptionSpec":
        return cls(kind=obj["kind"], sigma=float(obj.get("sigma", 0.0)))


@dataclass(eq=False)
class CorruptedScene:
    base: SceneInstance
    corrupted_grid: np.ndarray
    spec: CorruptionSpec

    def __post_init__(self):
        self.corrupted_grid = np.asarray(self.corrupted_grid, dtype=np.float64)
        if self.corrupted_grid.shape != self.base.feature_grid.shape:
            raise ValidationError("corrupted grid shape differs from base grid")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(2.0 * sigma))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def _blur_grid(grid: np.ndarray, sigma: float) -> np.ndarray:
    """Separable per-channel Gaussian smoothing with reflect padding."""
    kernel = _gaussian_kernel(sigma)
    radius = (len(kernel) - 1) // 2
    out = grid
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        out = np.apply_along_axis(
            lambda col: np.convolve(col, kernel, mode="valid"), axis, padded
        )
    return out


def _object_mask(scene: SceneInstance) -> np.ndarray:
    h, w, _ = scene.feature_grid.shape
    mask = np.zeros((h, w), dtype=bool)
    for box, _ in scene.objects:
        mask |= cells_in_box(h, w, box)
    return mask


def apply(scene: SceneInstance, spec: CorruptionSpec) -> CorruptedScene:
    """Produce the corrupted grid for a scene; the input scene is untouched."""
    grid = scene.feature_grid
    if spec.kind == "none":
        corrupted = grid.copy()
    elif spec.kind == "image_blur":
        corrupted = _blur_grid(grid, spec.sigma)
    elif spec.kind == "object_blur":
        corrupted = grid.copy()
        mask = _object_mask(scene)
        corrupted[mask] = _blur_grid(grid, spec.sigma)[mask]
    elif spec.kind == "semantic_mask":
        corrupted = grid.copy()
        corrupted[_object_mask(scene)] = 0.0
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise SceneDialogError(f"unhandled corruption kind {spec.kind!r}")
    return CorruptedScene(base=scene, corrupted_grid=corrupted, spec=spec)


def apply_dataset(scenes: Iterable[SceneInstance], spec: CorruptionSpec) -> List[CorruptedScene]:
    return [apply(scene, spec) for scene in scenes]


def save_corrupted_jsonl(corrupted: Iterable[CorruptedScene], path) -> None:
    import json

    with open(path, "w") as fh:
        for item in corrupted:
            fh.write(
                json.dumps(
                    {
                        "base": item.base.to_json_obj(),
                        "corrupted_grid": item.corrupted_grid.tolist(),
                        "spec": item.spec.to_json_obj(),
                    }
                )
                + "\n"
            )


def load_corrupted_jsonl(path) -> List[CorruptedScene]:
    import json

    items: List[CorruptedScene] = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            items.append(
                CorruptedScene(
                    base=SceneInstance.from_json_obj(obj["base"]),
                    corrupted_grid=np.asarray(obj["corrupted_grid"], dtype=np.float64),
                    spec=CorruptionSpec.from_json_obj(obj["spec"]),
                )
            )
    return items


def severity_probe(dataset: Sequence[SceneInstance], spec: CorruptionSpec, detector) -> float:
    """Mean ground-truth-box classification accuracy of a trained detector under spec."""
    from . import perception

    if not detector.trained:
        raise SceneDialogError("severity probe needs a trained detector")
    correct = 0
    total = 0
    for scene in dataset:
        corrupted = apply(scene, spec)
        for box, label in scene.objects:
            feats = perception.pool_region(corrupted.corrupted_grid, box)
            logits = feats @ detector.weights + detector.bias
            correct += int(np.argmax(logits) == label)
            total += 1
    return correct / total if total else 0.0
