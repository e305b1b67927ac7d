"""Scene graph heads: object label and predicate prediction plus triple ranking.

Two heads share one interface: a frequency head (classifier + empirical
predicate table) and a lightweight contextual head (one round of mean
message passing, then object and predicate classifiers).
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .core import (
    SceneDialogError,
    SceneGraphPrediction,
    SceneInstance,
    Vocabulary,
)
from .perception import PreliminaryObjectSet

HEAD_KINDS = ("freq", "context")


class HeadError(SceneDialogError):
    pass


def fit_freq_table(
    scenes: Sequence[SceneInstance], vocab: Vocabulary, alpha: float = 1.0
) -> np.ndarray:
    """Empirical P(predicate | subject class, object class) with Laplace smoothing.

    Ordered object pairs without a relation count toward the background slot.
    """
    if not scenes:
        raise HeadError("cannot fit a frequency table on an empty dataset")
    if not alpha > 0:
        raise HeadError("smoothing alpha must be positive")
    c, p = vocab.num_classes, vocab.num_predicates
    counts = np.zeros((c, c, p))
    for scene in scenes:
        labels = scene.labels
        related = set()
        for rel in scene.relations:
            counts[labels[rel.subject_index], labels[rel.object_index], rel.predicate_index] += 1
            related.add((rel.subject_index, rel.object_index))
        n = scene.num_objects
        for i in range(n):
            for j in range(n):
                if i != j and (i, j) not in related:
                    counts[labels[i], labels[j], 0] += 1
    table = counts + alpha
    return table / table.sum(axis=2, keepdims=True)


class FreqHead(nn.Module):
    """Object classifier over node features; predicates from the fitted table."""

    def __init__(self, feat_dim: int, vocab: Vocabulary):
        super().__init__()
        self.classifier = nn.Linear(feat_dim, vocab.num_classes)
        self.register_buffer(
            "freq_table",
            torch.full(
                (vocab.num_classes, vocab.num_classes, vocab.num_predicates),
                1.0 / vocab.num_predicates,
            ),
        )
        self.double()

    def set_table(self, table: np.ndarray) -> None:
        self.freq_table.copy_(torch.as_tensor(table, dtype=torch.float64))

    def object_logits(self, nodes: torch.Tensor) -> torch.Tensor:
        return self.classifier(nodes)


class ContextHead(nn.Module):
    """Mean-aggregation message passing, then object and predicate classifiers."""

    def __init__(self, feat_dim: int, vocab: Vocabulary, hidden: int = 64):
        super().__init__()
        self.w_self = nn.Linear(feat_dim, feat_dim)
        self.w_msg = nn.Linear(feat_dim, feat_dim)
        self.classifier = nn.Linear(feat_dim, vocab.num_classes)
        self.predicate_net = nn.Sequential(
            nn.Linear(3 * feat_dim, hidden),
            nn.ReLU(),
            nn.Linear(hidden, vocab.num_predicates),
        )
        self.double()

    def contextualize(self, nodes: torch.Tensor) -> torch.Tensor:
        pooled = nodes.mean(dim=-2, keepdim=True).expand_as(nodes)
        return torch.relu(self.w_self(nodes) + self.w_msg(pooled))

    def object_logits(self, nodes: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.contextualize(nodes))

    def predicate_logits(self, nodes: torch.Tensor, edges: torch.Tensor) -> torch.Tensor:
        """Logits for every ordered pair; shape (..., n, n, P)."""
        ctx = self.contextualize(nodes)
        n = ctx.shape[-2]
        subj = ctx.unsqueeze(-2).expand(*ctx.shape[:-1], n, ctx.shape[-1])
        obj = ctx.unsqueeze(-3).expand_as(subj)
        return self.predicate_net(torch.cat([subj, obj, edges], dim=-1))


def make_head(kind: str, feat_dim: int, vocab: Vocabulary) -> nn.Module:
    if kind == "freq":
        return FreqHead(feat_dim, vocab)
    if kind == "context":
        return ContextHead(feat_dim, vocab)
    raise HeadError(f"unknown head kind {kind!r}")


def predict_graph(
    objset: PreliminaryObjectSet,
    head: nn.Module,
    label_override: Optional[np.ndarray] = None,
) -> SceneGraphPrediction:
    """Row-stochastic label and predicate distributions for an object set.

    label_override replaces the predicted label distribution (used by the
    PredCls protocol, where ground-truth labels are given).
    """
    nodes = torch.as_tensor(objset.node_features, dtype=torch.float64)
    edges = torch.as_tensor(objset.edge_features, dtype=torch.float64)
    n = objset.num_objects
    with torch.no_grad():
        label_dist = torch.softmax(head.object_logits(nodes), dim=-1).numpy()
        if label_override is not None:
            label_dist = np.asarray(label_override, dtype=np.float64)
        if isinstance(head, FreqHead):
            labels = np.argmax(label_dist, axis=-1)
            table = head.freq_table.numpy()
            pred_dist = table[labels[:, None], labels[None, :]]
        else:
            pred_dist = torch.softmax(
                head.predicate_logits(nodes, edges), dim=-1
            ).numpy()
    num_predicates = pred_dist.shape[-1]
    background = np.zeros(num_predicates)
    background[0] = 1.0
    pred_dist = pred_dist.copy()
    pred_dist[np.arange(n), np.arange(n)] = background
    return SceneGraphPrediction(
        boxes=list(objset.boxes),
        object_label_dist=label_dist,
        predicate_dist=pred_dist,
    )


def ranked_triples(pred: SceneGraphPrediction) -> List[Tuple[int, int, int, float]]:
    """Graph-constrained ranked (subject, predicate, object, score) list.

    One non-background predicate per ordered pair, scored by the product of
    both argmax label probabilities and the predicate probability; sorted by
    descending score with (i, j, p) lexicographic tie-break.
    """
    n = pred.num_objects
    label_conf = pred.object_label_dist.max(axis=-1)
    entries = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            probs = pred.predicate_dist[i, j]
            p = int(np.argmax(probs[1:])) + 1  # background excluded
            score = float(label_conf[i] * label_conf[j] * probs[p])
            entries.append((i, p, j, score))
    entries.sort(key=lambda e: (-e[3], e[0], e[2], e[1]))
    return entries
