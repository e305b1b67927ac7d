"""Multi-round question selection, oracle answering, and history encoding.

Questions are picked from a fixed candidate pool by embedding similarity.
Selection is softmax-relaxed during training (temperature SOFT_TAU) and a
hard argmax at evaluation. The dialog history is a fixed-width vector that
absorbs one fused QA embedding per round.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from .core import SceneDialogError, SceneInstance, ValidationError

SOFT_TAU = 0.5


class DialogError(SceneDialogError):
    pass


class EncodingError(SceneDialogError):
    pass


@dataclass(frozen=True)
class DialogConfig:
    n_rounds: int = 10
    n_cand: int = 100
    d_q: int = 32
    d_h: int = 32
    selection_mode: str = "soft"
    no_repeat: bool = True

    def __post_init__(self):
        if self.n_rounds < 1:
            raise ValidationError("dialog needs at least one round")
        if self.selection_mode not in ("soft", "hard"):
            raise ValidationError("selection_mode must be 'soft' or 'hard'")
        if self.no_repeat and self.n_cand < self.n_rounds:
            raise ValidationError("no_repeat requires n_cand >= n_rounds")
        if self.d_q < 1 or self.d_h < 1:
            raise ValidationError("embedding widths must be positive")


def encode_question(text: str, dim: int) -> np.ndarray:
    """Deterministic token-hash bag-of-words embedding, L2-normalized."""
    tokens = re.findall(r"[a-z0-9]+", text.lower())
    if not tokens:
        raise EncodingError(f"cannot encode empty text {text!r}")
    vec = np.zeros(dim)
    for token in tokens:
        bucket = int(hashlib.md5(token.encode()).hexdigest(), 16) % dim
        vec[bucket] += 1.0
    return vec / np.linalg.norm(vec)


def encode_texts(texts: Sequence[str], dim: int) -> np.ndarray:
    return np.stack([encode_question(t, dim) for t in texts])


class ResidualMixer(nn.Module):
    """Input projection followed by two mixing layers with an additive skip."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.inp = nn.Linear(in_dim, out_dim)
        self.mix1 = nn.Linear(out_dim, out_dim)
        self.mix2 = nn.Linear(out_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.inp(x)
        return h + self.mix2(torch.relu(self.mix1(h)))


class DialogParams(nn.Module):
    """Question decoder, history encoder, and QA fusion weights."""

    def __init__(self, node_dim: int, cfg: DialogConfig):
        super().__init__()
        self.node_dim = node_dim
        self.d_q = cfg.d_q
        self.d_h = cfg.d_h
        self.question_decoder = ResidualMixer(node_dim + cfg.d_h, cfg.d_q)
        self.history_encoder = ResidualMixer(cfg.d_h + cfg.d_h, cfg.d_h)
        self.qa_fusion = nn.Linear(2 * cfg.d_q, cfg.d_h)
        self.double()


@dataclass(eq=False)
class EncodedQA:
    x_q: torch.Tensor
    x_a: torch.Tensor
    x_qa: torch.Tensor


@dataclass(eq=False)
class DialogState:
    history: torch.Tensor  # (d_h,)
    selected: List[Tuple[int, EncodedQA]] = field(default_factory=list)
    round: int = 0
    # soft-mode selection weight vectors, one per round; lets the trainer
    # attach a selection objective without re-running the dialog
    selection_weights: List[torch.Tensor] = field(default_factory=list)

    @classmethod
    def initial(cls, d_h: int) -> "DialogState":
        return cls(history=torch.zeros(d_h, dtype=torch.float64))

    def selected_indices(self) -> List[int]:
        return [idx for idx, _ in self.selected]


def _as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=torch.float64)


def decoder_query(
    pooled_nodes: torch.Tensor, history: torch.Tensor, params: DialogParams
) -> torch.Tensor:
    """Generated query embedding from mean-pooled node features and history."""
    return params.question_decoder(torch.cat([pooled_nodes, history], dim=-1))


def masked_similarities(
    query: torch.Tensor, cand_embs: torch.Tensor, excluded: Sequence[int]
) -> torch.Tensor:
    """Cosine similarity per candidate, excluded entries at -inf."""
    q = query / torch.linalg.norm(query, dim=-1, keepdim=True)
    sims = cand_embs @ q
    if excluded:
        sims = sims.clone()
        sims[list(excluded)] = float("-inf")
    return sims


def select_question(
    oprime_nodes,
    state: DialogState,
    cand_embs,
    params: DialogParams,
    mode: str,
    no_repeat: bool = True,
    temperature: float = SOFT_TAU,
):
    """Pick the next question: argmax index (hard) or softmax weights (soft).

    Returns (index or weight vector, generated query embedding).
    """
    nodes = _as_tensor(oprime_nodes)
    cand = _as_tensor(cand_embs)
    pooled = nodes.mean(dim=0)
    query = decoder_query(pooled, state.history, params)
    excluded = state.selected_indices() if no_repeat else []
    if len(excluded) >= cand.shape[0]:
        raise DialogError("all candidates excluded")
    sims = masked_similarities(query, cand, excluded)
    if mode == "hard":
        # numpy argmax breaks ties by lowest index
        idx = int(np.argmax(sims.detach().numpy()))
        return idx, query
    if mode == "soft":
        weights = torch.softmax(sims / temperature, dim=-1)
        return weights, query
    raise DialogError(f"unknown selection mode {mode!r}")


def answer_oracle(scene: SceneInstance, cand_index: int) -> str:
    """Stored answer of the indexed candidate; ground truth for GT candidates."""
    if not (0 <= cand_index < len(scene.qa_candidates)):
        raise DialogError(f"candidate index {cand_index} out of range")
    return scene.qa_candidates[cand_index].answer_text


def encode_qa_pair(x_q, x_a, params: DialogParams) -> torch.Tensor:
    """Fuse question and answer embeddings into one history-width vector."""
    x_q = _as_tensor(x_q)
    x_a = _as_tensor(x_a)
    if x_q.shape[-1] != params.d_q or x_a.shape[-1] != params.d_q:
        raise DialogError("QA embedding width mismatch")
    return params.qa_fusion(torch.cat([x_q, x_a], dim=-1))


def encode_history(
    state: DialogState, encoded: EncodedQA, params: DialogParams, cand_index: int
) -> DialogState:
    """Fold one QA pair into the history; width stays d_h, round increments."""
    if encoded.x_qa.shape[-1] != params.d_h:
        raise DialogError("fused QA width must equal the history width")
    # tanh keeps the recurrent history bounded across rounds; the unbounded
    # variant can blow up the forward pass late in training
    new_history = torch.tanh(
        params.history_encoder(torch.cat([state.history, encoded.x_qa], dim=-1))
    )
    return DialogState(
        history=new_history,
        selected=state.selected + [(cand_index, encoded)],
        round=state.round + 1,
        selection_weights=list(state.selection_weights),
    )


def random_select(state: DialogState, cfg: DialogConfig, seed: int) -> int:
    """Uniform choice over unexcluded candidates, deterministic per (seed, round)."""
    excluded = set(state.selected_indices()) if cfg.no_repeat else set()
    available = [i for i in range(cfg.n_cand) if i not in excluded]
    if not available:
        raise DialogError("all candidates excluded")
    rng = np.random.default_rng((seed, state.round))
    return int(available[rng.integers(len(available))])


def candidate_embeddings(
    scene: SceneInstance, cfg: DialogConfig
) -> Tuple[np.ndarray, np.ndarray]:
    """Question and answer embeddings for the scene's candidate pool."""
    if len(scene.qa_candidates) != cfg.n_cand:
        raise DialogError(
            f"{scene.scene_id}: pool has {len(scene.qa_candidates)} candidates, "
            f"expected {cfg.n_cand}"
        )
    q = encode_texts([c.question_text for c in scene.qa_candidates], cfg.d_q)
    a = encode_texts([c.answer_text for c in scene.qa_candidates], cfg.d_q)
    return q, a


def run_dialog(
    oprime_nodes,
    scene: SceneInstance,
    params: DialogParams,
    cfg: DialogConfig,
    policy: str = "learned",
    seed: int = 0,
    cand_embs: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> DialogState:
    """Run the full multi-round loop and return the final state.

    policy 'learned' uses the question decoder (cfg.selection_mode decides
    soft vs hard); policy 'random' substitutes seeded uniform choice.
    """
    if policy not in ("learned", "random"):
        raise DialogError(f"unknown policy {policy!r}")
    cand_q_np, cand_a_np = cand_embs if cand_embs is not None else candidate_embeddings(scene, cfg)
    cand_q = _as_tensor(cand_q_np)
    cand_a = _as_tensor(cand_a_np)
    soft = policy == "learned" and cfg.selection_mode == "soft"
    if soft:
        cand_qa = encode_qa_pair(cand_q, cand_a, params)

    nodes = _as_tensor(oprime_nodes)
    state = DialogState.initial(cfg.d_h)
    for _ in range(cfg.n_rounds):
        if policy == "random":
            idx = random_select(state, cfg, seed)
            x_q = cand_q[idx]
            x_a = cand_a[idx]
            encoded = EncodedQA(x_q, x_a, encode_qa_pair(x_q, x_a, params))
        else:
            sel, _query = select_question(
                nodes, state, cand_q, params, cfg.selection_mode, cfg.no_repeat
            )
            if soft:
                weights = sel
                idx = int(torch.argmax(weights).item())
                # Straight-through: the forward pass uses the argmax candidate
                # (matching hard-mode evaluation), gradients flow through the
                # softmax weights. Plain weight-averaging starves the decoder
                # of signal: cosine/tau bounds how far the mixture can
                # concentrate on any one candidate.
                onehot = torch.zeros_like(weights)
                onehot[idx] = 1.0
                w_st = onehot + weights - weights.detach()
                state.selection_weights.append(weights)
                encoded = EncodedQA(
                    x_q=w_st @ cand_q,
                    x_a=w_st @ cand_a,
                    x_qa=w_st @ cand_qa,
                )
            else:
                idx = sel
                x_q = cand_q[idx]
                x_a = _as_tensor(encode_question(answer_oracle(scene, idx), cfg.d_q))
                encoded = EncodedQA(x_q, x_a, encode_qa_pair(x_q, x_a, params))
        state = encode_history(state, encoded, params, idx)
    return state


def dialog_memory(state: DialogState) -> torch.Tensor:
    """Per-round fused QA vectors plus the final history, stacked row-wise."""
    rows = [encoded.x_qa for _, encoded in state.selected] + [state.history]
    return torch.stack(rows)


def transcript_entry(scene: SceneInstance, state: DialogState) -> dict:
    rounds = []
    for idx, _ in state.selected:
        cand = scene.qa_candidates[idx]
        rounds.append(
            {"index": idx, "question": cand.question_text, "answer": cand.answer_text}
        )
    return {"scene_id": scene.scene_id, "rounds": rounds}
