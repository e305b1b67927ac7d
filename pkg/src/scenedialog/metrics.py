"""Mean recall@K under the PredCls / SGCls / SGDet protocols."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import SceneDialogError, SceneGraphPrediction, SceneInstance, Vocabulary, iou
from .sgg import ranked_triples

PROTOCOLS = ("predcls", "sgcls", "sgdet")
K_VALUES = (20, 50, 100)
SGDET_IOU = 0.5


class MetricsError(SceneDialogError):
    pass


@dataclass
class MetricsReport:
    """mR@K per protocol plus the per-predicate recall vectors behind them."""

    mean_recall: Dict[str, Dict[int, float]] = field(default_factory=dict)
    per_predicate: Dict[str, Dict[int, Dict[str, float]]] = field(default_factory=dict)
    skipped_scenes: List[str] = field(default_factory=list)

    def to_json_obj(self) -> dict:
        return {
            "mean_recall": {
                proto: {str(k): v for k, v in by_k.items()}
                for proto, by_k in self.mean_recall.items()
            },
            "per_predicate": {
                proto: {
                    str(k): dict(sorted(vec.items())) for k, vec in by_k.items()
                }
                for proto, by_k in self.per_predicate.items()
            },
            "skipped_scenes": list(self.skipped_scenes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2, sort_keys=True)


def _triple_hit(
    triple: Tuple[int, int, int],
    gt: Tuple[int, int, int],
    protocol: str,
    scene: SceneInstance,
    prediction: SceneGraphPrediction,
) -> bool:
    i, p, j = triple
    s, gp, o = gt
    if p != gp:
        return False
    if protocol in ("predcls", "sgcls"):
        if (i, j) != (s, o):
            return False
        if protocol == "predcls":
            return True
        pred_labels = np.argmax(prediction.object_label_dist, axis=-1)
        return (
            pred_labels[i] == scene.labels[s] and pred_labels[j] == scene.labels[o]
        )
    # sgdet: boxes must match at IoU >= 0.5 with correct labels
    pred_labels = np.argmax(prediction.object_label_dist, axis=-1)
    return (
        pred_labels[i] == scene.labels[s]
        and pred_labels[j] == scene.labels[o]
        and iou(prediction.boxes[i], scene.boxes[s]) >= SGDET_IOU
        and iou(prediction.boxes[j], scene.boxes[o]) >= SGDET_IOU
    )


def recall_counts(
    ranked: Sequence[Tuple[int, int, int, float]],
    scene: SceneInstance,
    prediction: SceneGraphPrediction,
    protocol: str,
    k: int,
) -> Dict[int, Tuple[int, int]]:
    """Per-predicate-class (hits, total) over this scene's GT triples."""
    if protocol not in PROTOCOLS:
        raise MetricsError(f"unknown protocol {protocol!r}")
    top = ranked[:k]
    counts: Dict[int, Tuple[int, int]] = {}
    for rel in scene.relations:
        gt = (rel.subject_index, rel.predicate_index, rel.object_index)
        hit = int(
            any(_triple_hit((i, p, j), gt, protocol, scene, prediction) for i, p, j, _ in top)
        )
        hits, total = counts.get(rel.predicate_index, (0, 0))
        counts[rel.predicate_index] = (hits + hit, total + 1)
    return counts


def recall_at_k(
    ranked: Sequence[Tuple[int, int, int, float]],
    scene: SceneInstance,
    prediction: SceneGraphPrediction,
    protocol: str,
    k: int,
) -> Dict[int, float]:
    """Per-predicate-class recall for one scene (classes absent from GT omitted)."""
    return {
        p: hits / total
        for p, (hits, total) in recall_counts(ranked, scene, prediction, protocol, k).items()
    }


def mean_recall(
    items: Sequence[Tuple[SceneInstance, SceneGraphPrediction]],
    protocol: str,
    k: int,
    skipped: Optional[List[str]] = None,
) -> Tuple[float, Dict[int, float]]:
    """Micro-aggregated mean recall: counts summed over scenes, then the
    per-class ratios averaged over predicate classes present in the corpus."""
    totals: Dict[int, Tuple[int, int]] = {}
    for scene, prediction in items:
        if not scene.relations:
            if skipped is not None:
                skipped.append(scene.scene_id)
            continue
        ranked = ranked_triples(prediction)
        for p, (h, t) in recall_counts(ranked, scene, prediction, protocol, k).items():
            hits, total = totals.get(p, (0, 0))
            totals[p] = (hits + h, total + t)
    if not totals:
        raise MetricsError("no ground-truth relations in the corpus")
    per_class = {p: h / t for p, (h, t) in totals.items()}
    return sum(per_class.values()) / len(per_class), per_class


def build_report(
    items: Sequence[Tuple[SceneInstance, SceneGraphPrediction]],
    vocab: Vocabulary,
    protocols_by_items: Dict[str, Sequence[Tuple[SceneInstance, SceneGraphPrediction]]] = None,
    protocols: Sequence[str] = PROTOCOLS,
) -> MetricsReport:
    """Evaluate one prediction set under a list of protocols.

    protocols_by_items maps protocol name to its own (scene, prediction)
    pairs when the protocols were produced from different inputs.
    """
    report = MetricsReport()
    for protocol in protocols:
        proto_items = (
            protocols_by_items[protocol] if protocols_by_items is not None else items
        )
        report.mean_recall[protocol] = {}
        report.per_predicate[protocol] = {}
        for k in K_VALUES:
            skipped: List[str] = []
            value, per_class = mean_recall(proto_items, protocol, k, skipped)
            report.mean_recall[protocol][k] = value
            report.per_predicate[protocol][k] = {
                vocab.predicate_classes[p]: r for p, r in per_class.items()
            }
            report.skipped_scenes = sorted(set(report.skipped_scenes) | set(skipped))
    return report


def render_markdown_table(rows: Sequence[Tuple[str, str, MetricsReport]]) -> str:
    """Benchmark table: one row per (vision input, model variant)."""
    header = ["Vision Input", "Model"]
    for proto in PROTOCOLS:
        for k in K_VALUES:
            header.append(f"{proto} mR@{k}")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for vision, model, report in rows:
        cells = [vision, model]
        for proto in PROTOCOLS:
            for k in K_VALUES:
                value = report.mean_recall.get(proto, {}).get(k)
                cells.append(f"{value:.4f}" if value is not None else "-")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
