"""Deterministic synthetic scene generation and QA candidate pooling.

Scenes live on a feature grid instead of pixels. Each object stamps a
class-indexed basis signature into the grid, relations follow fixed geometric
rules of the boxes, and every object gets one ground-truth region question
whose answer is its class name.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    BACKGROUND_PREDICATE,
    BoundingBox,
    QACandidate,
    RelationTriple,
    SceneDialogError,
    SceneInstance,
    ValidationError,
    Vocabulary,
    iou,
)

OBJECT_CLASS_NAMES = (
    "cube", "ball", "cone", "lamp", "chair", "plant",
    "mug", "book", "clock", "vase", "drum", "kite",
)

SPATIAL_PREDICATES = ("left_of", "above", "overlaps", "near")

# Fixed rule margins; not configurable so ground truth is stable across configs.
LEFT_MARGIN = 0.15
ABOVE_MARGIN = 0.15
NEAR_DISTANCE = 0.25

MAX_PLACEMENT_ATTEMPTS = 1000

_QUADRANT_WORDS = (("top", "left"), ("top", "right"), ("bottom", "left"), ("bottom", "right"))


class GenerationError(SceneDialogError):
    pass


class PoolError(SceneDialogError):
    pass


class LoadError(SceneDialogError):
    pass


@dataclass(frozen=True)
class GenConfig:
    grid_h: int = 12
    grid_w: int = 12
    grid_d: int = 6
    num_classes: int = 6
    num_predicates: int = len(SPATIAL_PREDICATES) + 1
    min_objects: int = 2
    max_objects: int = 4
    n_cand: int = 100
    scenes: int = 500
    seed: int = 0
    noise_std: float = 0.05

    def __post_init__(self):
        if min(self.grid_h, self.grid_w, self.grid_d) < 1:
            raise ValidationError("grid dimensions must be positive")
        if not (1 <= self.min_objects <= self.max_objects):
            raise ValidationError("invalid objects-per-scene range")
        if self.max_objects > len(_QUADRANT_WORDS):
            raise ValidationError("at most one object per quadrant is supported")
        if not (2 <= self.num_classes <= len(OBJECT_CLASS_NAMES)):
            raise ValidationError("num_classes out of supported range")
        if self.num_classes < self.max_objects:
            raise ValidationError("need at least as many classes as objects per scene")
        if self.grid_d < self.num_classes:
            raise ValidationError("grid depth must hold one signature channel per class")
        if self.num_predicates != len(SPATIAL_PREDICATES) + 1:
            raise ValidationError("predicate set is fixed by the spatial rules")
        if self.n_cand < self.max_objects:
            raise ValidationError("n_cand must cover the ground-truth candidates")
        if self.scenes < 0:
            raise ValidationError("scene count must be nonnegative")


def default_vocabulary(cfg: GenConfig) -> Vocabulary:
    return Vocabulary(
        object_classes=OBJECT_CLASS_NAMES[: cfg.num_classes],
        predicate_classes=(BACKGROUND_PREDICATE,) + SPATIAL_PREDICATES,
    )


def relations_from_boxes(boxes: Sequence[BoundingBox]) -> List[RelationTriple]:
    """Apply the fixed geometric rules to every ordered pair."""
    pred_index = {name: i + 1 for i, name in enumerate(SPATIAL_PREDICATES)}
    triples: List[RelationTriple] = []
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i == j:
                continue
            (ax, ay), (bx, by) = a.center, b.center
            overlap = iou(a, b) > 0.0
            fired = []
            if ax < bx - LEFT_MARGIN:
                fired.append("left_of")
            if ay < by - ABOVE_MARGIN:
                fired.append("above")
            if overlap:
                fired.append("overlaps")
            if not overlap and np.hypot(ax - bx, ay - by) < NEAR_DISTANCE:
                fired.append("near")
            for name in fired:
                triples.append(RelationTriple(i, pred_index[name], j))
    return triples


def quadrant_of(box: BoundingBox) -> Tuple[str, str]:
    cx, cy = box.center
    return ("top" if cy < 0.5 else "bottom", "left" if cx < 0.5 else "right")


def region_question(box: BoundingBox) -> str:
    vpos, hpos = quadrant_of(box)
    return f"what is the object at the {vpos} {hpos}?"


def _place_objects(rng: np.random.Generator, cfg: GenConfig, seed: int) -> List[BoundingBox]:
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    boxes: List[BoundingBox] = []
    used_quadrants = set()
    attempts = 0
    while len(boxes) < n:
        if attempts >= MAX_PLACEMENT_ATTEMPTS:
            raise GenerationError(f"placement failed after {attempts} attempts (seed {seed})")
        attempts += 1
        w = float(rng.uniform(0.12, 0.28))
        h = float(rng.uniform(0.12, 0.28))
        x = float(rng.uniform(0.0, 1.0 - w))
        y = float(rng.uniform(0.0, 1.0 - h))
        box = BoundingBox(x, y, w, h)
        # One object per quadrant keeps region questions unambiguous, and no
        # containment keeps every object individually resolvable.
        if quadrant_of(box) in used_quadrants:
            continue
        if any(box.contains_box(b) or b.contains_box(box) for b in boxes):
            continue
        boxes.append(box)
        used_quadrants.add(quadrant_of(box))
    return boxes


def cell_centers(h: int, w: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) coordinates of grid cell centers, each shaped h x w."""
    cols = (np.arange(w) + 0.5) / w
    rows = (np.arange(h) + 0.5) / h
    cx, cy = np.meshgrid(cols, rows)
    return cx, cy


def cells_in_box(h: int, w: int, box: BoundingBox) -> np.ndarray:
    """Boolean h x w mask of cells whose centers fall inside the box."""
    cx, cy = cell_centers(h, w)
    return (
        (cx >= box.x) & (cx <= box.x + box.w) & (cy >= box.y) & (cy <= box.y + box.h)
    )


def generate_scene(seed: int, cfg: GenConfig) -> SceneInstance:
    """Build one scene deterministically from its seed."""
    rng = np.random.default_rng(seed)
    boxes = _place_objects(rng, cfg, seed)
    labels = rng.choice(cfg.num_classes, size=len(boxes), replace=False)
    vocab = default_vocabulary(cfg)

    grid = rng.normal(0.0, cfg.noise_std, size=(cfg.grid_h, cfg.grid_w, cfg.grid_d))
    for box, label in zip(boxes, labels):
        mask = cells_in_box(cfg.grid_h, cfg.grid_w, box)
        grid[mask, int(label)] += 1.0

    objects = [(box, int(label)) for box, label in zip(boxes, labels)]
    candidates = [
        QACandidate(
            question_text=region_question(box),
            answer_text=vocab.object_classes[int(label)],
            is_ground_truth=True,
            target_object_index=i,
        )
        for i, (box, label) in enumerate(objects)
    ]
    return SceneInstance(
        scene_id=f"scene-{seed:08d}",
        feature_grid=grid,
        objects=objects,
        relations=relations_from_boxes(boxes),
        qa_candidates=candidates,
    )


def build_distractor_corpus(vocab: Vocabulary) -> List[QACandidate]:
    """Templated questions shared by all scenes of a dataset."""
    corpus: List[QACandidate] = []
    classes = vocab.object_classes
    for c in classes:
        for d in classes:
            if c == d:
                continue
            for template in (
                f"what is near the {c}?",
                f"what is to the left of the {c}?",
                f"what is above the {c}?",
                f"what overlaps the {c}?",
            ):
                corpus.append(QACandidate(template, d, is_ground_truth=False))
    for vpos, hpos in _QUADRANT_WORDS:
        for c in classes:
            corpus.append(
                QACandidate(f"what is the object at the {vpos} {hpos}?", c, is_ground_truth=False)
            )
    return corpus


def _mentions_any(text: str, names: Sequence[str]) -> bool:
    tokens = set(re.findall(r"[a-z0-9]+", text.lower()))
    return any(name in tokens for name in names)


def build_candidate_pool(
    scene: SceneInstance,
    distractor_corpus: Sequence[QACandidate],
    seed: int,
    n_cand: int,
    vocab: Optional[Vocabulary] = None,
) -> List[QACandidate]:
    """All GT candidates of the scene plus sampled distractors, shuffled."""
    if len(distractor_corpus) < n_cand:
        raise PoolError(
            f"distractor corpus ({len(distractor_corpus)}) smaller than n_cand ({n_cand})"
        )
    gt = [c for c in scene.qa_candidates if c.is_ground_truth]
    if len(gt) > n_cand:
        raise PoolError(f"{scene.scene_id}: more GT candidates than pool slots")

    gt_texts = {c.question_text for c in gt}
    present = (
        [vocab.object_classes[label] for label in scene.labels] if vocab is not None else []
    )
    # Prefer distractors about absent classes and never duplicate a GT question
    # text: a same-text distractor would carry a wrong answer for this scene.
    tiers: Tuple[List[QACandidate], List[QACandidate], List[QACandidate]] = ([], [], [])
    for cand in distractor_corpus:
        if cand.question_text in gt_texts:
            tiers[2].append(cand)
        elif _mentions_any(cand.question_text, present):
            tiers[1].append(cand)
        else:
            tiers[0].append(cand)

    rng = np.random.default_rng(seed)
    needed = n_cand - len(gt)
    chosen: List[QACandidate] = []
    for tier in tiers:
        if len(chosen) >= needed:
            break
        take = min(needed - len(chosen), len(tier))
        idx = rng.permutation(len(tier))[:take]
        chosen.extend(tier[i] for i in idx)
    if len(chosen) < needed:
        raise PoolError(f"{scene.scene_id}: corpus exhausted while filling the pool")

    pool = gt + chosen
    order = rng.permutation(len(pool))
    return [pool[i] for i in order]


def generate_dataset(cfg: GenConfig) -> List[SceneInstance]:
    """Generate cfg.scenes scenes with pooled candidates, seeds cfg.seed + i."""
    vocab = default_vocabulary(cfg)
    corpus = build_distractor_corpus(vocab)
    scenes = []
    for i in range(cfg.scenes):
        scene = generate_scene(cfg.seed + i, cfg)
        scene.qa_candidates = build_candidate_pool(
            scene, corpus, seed=cfg.seed + i, n_cand=cfg.n_cand, vocab=vocab
        )
        scenes.append(scene)
    return scenes


def load_vg_subset(
    path, vocab: Optional[Vocabulary] = None, skip_invalid: bool = False
) -> List[SceneInstance]:
    """Load a pre-exported JSONL subset in the native scene format."""
    scenes: List[SceneInstance] = []
    try:
        fh = open(path)
    except OSError as exc:
        raise LoadError(f"cannot open {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                scene = SceneInstance.from_json_obj(obj)
                if vocab is not None:
                    scene.validate_against(vocab)
            except (json.JSONDecodeError, ValidationError) as exc:
                if skip_invalid:
                    continue
                raise LoadError(f"{path}: line {lineno}: {exc}") from exc
            scenes.append(scene)
    return scenes
