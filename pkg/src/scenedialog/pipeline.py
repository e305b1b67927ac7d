"""Two-stage training, evaluation, and the corruption x arm experiment matrix.

Stage 1 fits the detector on corrupted input; stage 2 freezes it and trains
the dialog, fusion, and graph-head parameters for one experimental arm:
baseline (no dialog), random_qa (seeded uniform selection), or si_dial
(learned soft selection).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import dialog as dialog_mod
from . import fusion as fusion_mod
from . import metrics as metrics_mod
from . import missingness, perception, sgg
from .core import SceneDialogError, SceneInstance, ValidationError, Vocabulary
from .datagen import GenConfig, default_vocabulary, generate_dataset
from .dialog import DialogConfig, DialogParams
from .fusion import FusionParams
from .metrics import PROTOCOLS, MetricsReport
from .missingness import CorruptedScene, CorruptionSpec

ARMS = ("baseline", "random_qa", "si_dial")


class PipelineError(SceneDialogError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.01
    epochs: int = 30
    batch_size: int = 16
    grad_clip: float = 1.0  # max gradient norm; the recurrent history explodes without it


@dataclass
class ExperimentConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    eval_scenes: int = 100
    eval_seed: int = 100000
    corruptions: List[CorruptionSpec] = field(
        default_factory=lambda: [CorruptionSpec("semantic_mask")]
    )
    dialog: DialogConfig = field(default_factory=DialogConfig)
    sgg_head: str = "context"
    arm: str = "si_dial"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    out_dir: str = "out"

    def __post_init__(self):
        if not self.seeds:
            raise ValidationError("at least one seed is required")
        if self.arm not in ARMS:
            raise ValidationError(f"unknown arm {self.arm!r}")
        if self.sgg_head not in sgg.HEAD_KINDS:
            raise ValidationError(f"unknown sgg head {self.sgg_head!r}")
        if self.gen.n_cand != self.dialog.n_cand:
            raise ValidationError("generator and dialog candidate counts must agree")

    def to_json_obj(self) -> dict:
        return {
            "gen": dataclasses.asdict(self.gen),
            "eval": {"scenes": self.eval_scenes, "seed": self.eval_seed},
            "corruptions": [c.to_json_obj() for c in self.corruptions],
            "dialog": dataclasses.asdict(self.dialog),
            "sgg_head": self.sgg_head,
            "arm": self.arm,
            "optimizer": dataclasses.asdict(self.optimizer),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ExperimentConfig":
        return cls(
            gen=GenConfig(**obj.get("gen", {})),
            eval_scenes=int(obj.get("eval", {}).get("scenes", 100)),
            eval_seed=int(obj.get("eval", {}).get("seed", 100000)),
            corruptions=[
                CorruptionSpec.from_json_obj(c) for c in obj.get("corruptions", [])
            ]
            or [CorruptionSpec("semantic_mask")],
            dialog=DialogConfig(**obj.get("dialog", {})),
            sgg_head=obj.get("sgg_head", "context"),
            arm=obj.get("arm", "si_dial"),
            optimizer=OptimizerConfig(**obj.get("optimizer", {})),
            seeds=list(obj.get("seeds", [0])),
            out_dir=obj.get("out_dir", "out"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_json_obj(json.load(fh))

    def config_hash(self) -> str:
        # out_dir is excluded: where artifacts land does not change the
        # experiment, and reruns into fresh directories must hash the same
        obj = self.to_json_obj()
        obj.pop("out_dir")
        canonical = json.dumps(obj, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class RunRecord:
    config_hash: str
    arm: str
    corruption: CorruptionSpec
    seeds: List[int]
    reports: Dict[int, MetricsReport] = field(default_factory=dict)
    wall_clock_s: float = 0.0
    artifact_paths: Dict[str, str] = field(default_factory=dict)
    hash_checks: Dict[str, bool] = field(default_factory=dict)


@dataclass
class TrainedModel:
    """All stage-2 parameters for one (arm, seed) run plus the frozen detector."""

    detector: perception.DetectorParams
    dialog_params: DialogParams
    fusion_params: FusionParams
    head: torch.nn.Module
    vocab: Vocabulary
    cfg: ExperimentConfig
    seed: int

    def module_state(self) -> dict:
        return {
            "dialog": self.dialog_params.state_dict(),
            "fusion": self.fusion_params.state_dict(),
            "head": self.head.state_dict(),
        }


def params_hash(module: torch.nn.Module) -> str:
    digest = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        digest.update(key.encode())
        digest.update(state[key].numpy().tobytes())
    return digest.hexdigest()


def detector_hash(params: perception.DetectorParams) -> str:
    digest = hashlib.sha256()
    digest.update(params.weights.tobytes())
    digest.update(params.bias.tobytes())
    return digest.hexdigest()


def feature_width(cfg: ExperimentConfig) -> int:
    return cfg.gen.grid_d + 4


def build_modules(
    cfg: ExperimentConfig, vocab: Vocabulary, seed: int
) -> Tuple[DialogParams, FusionParams, torch.nn.Module]:
    torch.manual_seed(seed)
    d = feature_width(cfg)
    dialog_params = DialogParams(d, cfg.dialog)
    fusion_params = FusionParams(d, cfg.dialog.d_h)
    head = sgg.make_head(cfg.sgg_head, d, vocab)
    return dialog_params, fusion_params, head


def predicate_targets(scene: SceneInstance) -> np.ndarray:
    """Per-ordered-pair predicate class, background where no relation fires.

    Pairs with several ground-truth predicates train on the lowest predicate
    index; evaluation still scores all ground-truth triples.
    """
    n = scene.num_objects
    targets = np.zeros((n, n), dtype=np.int64)
    for rel in sorted(scene.relations, key=lambda r: r.predicate_index, reverse=True):
        targets[rel.subject_index, rel.object_index] = rel.predicate_index
    return targets


@dataclass(eq=False)
class _PreparedScene:
    scene: SceneInstance
    objset: perception.PreliminaryObjectSet
    cand_embs: Tuple[np.ndarray, np.ndarray]
    label_targets: torch.Tensor
    predicate_target_flat: torch.Tensor
    offdiag: torch.Tensor  # boolean mask over the flattened n*n pair grid
    gt_cand_mask: torch.Tensor  # boolean mask over candidates: informative questions


def _prepare_scenes(
    scenes: Sequence[SceneInstance],
    spec: CorruptionSpec,
    detector: perception.DetectorParams,
    cfg: ExperimentConfig,
) -> List[_PreparedScene]:
    prepared = []
    for scene in scenes:
        corrupted = missingness.apply(scene, spec)
        objset = perception.detect(corrupted, detector, mode="gt_boxes")
        targets = predicate_targets(scene)
        n = scene.num_objects
        offdiag = ~torch.eye(n, dtype=torch.bool).reshape(-1)
        prepared.append(
            _PreparedScene(
                scene=scene,
                objset=objset,
                cand_embs=dialog_mod.candidate_embeddings(scene, cfg.dialog),
                label_targets=torch.as_tensor(scene.labels, dtype=torch.long),
                predicate_target_flat=torch.as_tensor(targets.reshape(-1)),
                offdiag=offdiag,
                gt_cand_mask=torch.tensor(
                    [c.is_ground_truth for c in scene.qa_candidates], dtype=torch.bool
                ),
            )
        )
    return prepared


def _scene_loss(
    prep: _PreparedScene,
    model_nodes: torch.Tensor,
    model_edges: torch.Tensor,
    head: torch.nn.Module,
) -> torch.Tensor:
    """Object plus predicate cross-entropy, weighted 1:1."""
    obj_logits = head.object_logits(model_nodes)
    loss = torch.nn.functional.cross_entropy(obj_logits, prep.label_targets)
    if isinstance(head, sgg.ContextHead):
        pred_logits = head.predicate_logits(model_nodes, model_edges)
        flat = pred_logits.reshape(-1, pred_logits.shape[-1])
        loss = loss + torch.nn.functional.cross_entropy(
            flat[prep.offdiag], prep.predicate_target_flat[prep.offdiag]
        )
    return loss


SELECTION_LOSS_WEIGHT = 1.0


def _selection_loss(prep: _PreparedScene, state: dialog_mod.DialogState) -> torch.Tensor:
    """Negative log of the soft-selection mass on still-available informative
    questions, averaged over rounds that have any left.

    This supervises the question decoder directly; the task loss alone gives
    it no usable signal, because an untrained decoder picks informative
    questions too rarely for the fusion module to ever learn to route them.
    """
    chosen = state.selected_indices()
    terms = []
    for rnd, weights in enumerate(state.selection_weights):
        remaining = prep.gt_cand_mask.clone()
        remaining[chosen[:rnd]] = False
        if bool(remaining.any()):
            terms.append(-torch.log(weights[remaining].sum().clamp_min(1e-12)))
    if not terms:
        return torch.zeros((), dtype=torch.float64)
    return torch.stack(terms).mean()


def _forward_features(
    prep: _PreparedScene,
    arm: str,
    model: TrainedModel,
    dialog_cfg: DialogConfig,
    scene_seed: int,
) -> Tuple[torch.Tensor, torch.Tensor, Optional[dialog_mod.DialogState]]:
    nodes = torch.as_tensor(prep.objset.node_features, dtype=torch.float64)
    edges = torch.as_tensor(prep.objset.edge_features, dtype=torch.float64)
    if arm == "baseline":
        return nodes, edges, None
    policy = "random" if arm == "random_qa" else "learned"
    state = dialog_mod.run_dialog(
        prep.objset.node_features,
        prep.scene,
        model.dialog_params,
        dialog_cfg,
        policy=policy,
        seed=scene_seed,
        cand_embs=prep.cand_embs,
    )
    memory = dialog_mod.dialog_memory(state)
    fp = model.fusion_params
    new_nodes = fusion_mod.update_features(nodes, memory, fp.node_query, fp.node_gate, fp)
    new_edges = fusion_mod.update_features(edges, memory, fp.edge_query, fp.edge_gate, fp)
    return new_nodes, new_edges, state


def _trainable_parameters(model: TrainedModel, arm: str) -> List[torch.nn.Parameter]:
    params = list(model.head.parameters())
    if arm == "baseline":
        return params
    params += list(model.fusion_params.parameters())
    params += list(model.dialog_params.history_encoder.parameters())
    params += list(model.dialog_params.qa_fusion.parameters())
    if arm == "si_dial":
        params += list(model.dialog_params.question_decoder.parameters())
    return params


def train_stage2(
    model: TrainedModel,
    prepared: Sequence[_PreparedScene],
    arm: str,
    seed: int,
) -> None:
    opt_cfg = model.cfg.optimizer
    trainable = _trainable_parameters(model, arm)
    optimizer = torch.optim.Adam(trainable, lr=opt_cfg.learning_rate)
    rng = np.random.default_rng(seed)
    for _epoch in range(opt_cfg.epochs):
        order = rng.permutation(len(prepared))
        for start in range(0, len(order), opt_cfg.batch_size):
            batch = order[start : start + opt_cfg.batch_size]
            optimizer.zero_grad()
            total = torch.zeros((), dtype=torch.float64)
            for scene_idx in batch:
                prep = prepared[scene_idx]
                scene_seed = int(
                    np.random.default_rng((seed, _epoch, int(scene_idx))).integers(2**31)
                )
                nodes, edges, state = _forward_features(
                    prep, arm, model, model.cfg.dialog, scene_seed=scene_seed
                )
                total = total + _scene_loss(prep, nodes, edges, model.head)
                if arm == "si_dial" and state is not None:
                    total = total + SELECTION_LOSS_WEIGHT * _selection_loss(prep, state)
            loss = total / len(batch)
            if not torch.isfinite(loss):
                raise PipelineError(f"training loss diverged at epoch {_epoch}")
            loss.backward()
            if opt_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(trainable, opt_cfg.grad_clip)
            optimizer.step()


def train(cfg: ExperimentConfig, train_scenes: Optional[List[SceneInstance]] = None) -> RunRecord:
    """Run stage 1 and stage 2 for every seed of one (corruption, arm) cell."""
    if len(cfg.corruptions) != 1:
        raise PipelineError("train() expects exactly one corruption spec per run")
    spec = cfg.corruptions[0]
    torch.set_num_threads(1)
    started = time.monotonic()
    vocab = default_vocabulary(cfg.gen)
    if train_scenes is None:
        train_scenes = generate_dataset(cfg.gen)
    if not train_scenes:
        raise PipelineError("empty training dataset")

    out_dir = Path(cfg.out_dir)
    record = RunRecord(
        config_hash=cfg.config_hash(), arm=cfg.arm, corruption=spec, seeds=list(cfg.seeds)
    )

    corrupted_train = missingness.apply_dataset(train_scenes, spec)
    freq_table = (
        sgg.fit_freq_table(train_scenes, vocab) if cfg.sgg_head == "freq" else None
    )

    # Stage 1: the detector is deterministic given the data, so it is shared
    # across seeds, as is the per-scene preparation that depends only on it.
    detector = perception.train_detector(corrupted_train, num_classes=vocab.num_classes)
    detector_before = detector_hash(detector)
    prepared = _prepare_scenes(train_scenes, spec, detector, cfg)

    for seed in cfg.seeds:
        seed_dir = out_dir / f"seed-{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)

        dialog_params, fusion_params, head = build_modules(cfg, vocab, seed)
        if freq_table is not None:
            head.set_table(freq_table)
        model = TrainedModel(
            detector=detector,
            dialog_params=dialog_params,
            fusion_params=fusion_params,
            head=head,
            vocab=vocab,
            cfg=cfg,
            seed=seed,
        )
        qd_before = params_hash(dialog_params.question_decoder)
        dialog_before = params_hash(dialog_params)
        fusion_before = params_hash(fusion_params)

        train_stage2(model, prepared, cfg.arm, seed)

        record.hash_checks[f"seed-{seed}/detector_frozen"] = (
            detector_hash(detector) == detector_before
        )
        if cfg.arm in ("baseline", "random_qa"):
            record.hash_checks[f"seed-{seed}/question_decoder_untouched"] = (
                params_hash(dialog_params.question_decoder) == qd_before
            )
        if cfg.arm == "baseline":
            record.hash_checks[f"seed-{seed}/dialog_untouched"] = (
                params_hash(dialog_params) == dialog_before
            )
            record.hash_checks[f"seed-{seed}/fusion_untouched"] = (
                params_hash(fusion_params) == fusion_before
            )

        detector_path = seed_dir / "detector.json"
        detector.save(detector_path)
        params_path = seed_dir / f"params-{cfg.arm}.bin"
        torch.save(model.module_state(), params_path)
        record.artifact_paths[f"seed-{seed}/detector"] = str(detector_path)
        record.artifact_paths[f"seed-{seed}/params"] = str(params_path)

    if not all(record.hash_checks.values()):
        raise PipelineError(f"parameter freeze violated: {record.hash_checks}")
    record.wall_clock_s = time.monotonic() - started
    return record


def load_model(cfg: ExperimentConfig, seed: int) -> TrainedModel:
    seed_dir = Path(cfg.out_dir) / f"seed-{seed}"
    detector = perception.DetectorParams.load(seed_dir / "detector.json")
    vocab = default_vocabulary(cfg.gen)
    dialog_params, fusion_params, head = build_modules(cfg, vocab, seed)
    state = torch.load(seed_dir / f"params-{cfg.arm}.bin", weights_only=True)
    dialog_params.load_state_dict(state["dialog"])
    fusion_params.load_state_dict(state["fusion"])
    head.load_state_dict(state["head"])
    return TrainedModel(
        detector=detector,
        dialog_params=dialog_params,
        fusion_params=fusion_params,
        head=head,
        vocab=vocab,
        cfg=cfg,
        seed=seed,
    )


def _predict_scene(
    scene: SceneInstance,
    spec: CorruptionSpec,
    model: TrainedModel,
    arm: str,
    box_mode: str,
    scene_seed: int,
) -> Tuple[perception.PreliminaryObjectSet, Optional[dialog_mod.DialogState]]:
    cfg = model.cfg
    corrupted = missingness.apply(scene, spec)
    objset = perception.detect(corrupted, model.detector, mode=box_mode)
    state = None
    if arm != "baseline":
        hard_cfg = replace(cfg.dialog, selection_mode="hard")
        policy = "random" if arm == "random_qa" else "learned"
        state = dialog_mod.run_dialog(
            objset.node_features,
            scene,
            model.dialog_params,
            hard_cfg,
            policy=policy,
            seed=scene_seed,
        )
        objset = fusion_mod.update_vision(objset, state, model.fusion_params, hard_cfg)
    return objset, state


def evaluate(
    cfg: ExperimentConfig,
    record: RunRecord,
    protocols: Sequence[str] = PROTOCOLS,
    eval_scenes: Optional[List[SceneInstance]] = None,
    write_artifacts: bool = True,
) -> Dict[int, MetricsReport]:
    """Hard-selection evaluation of a trained record under the given protocols."""
    torch.set_num_threads(1)
    unknown = set(protocols) - set(PROTOCOLS)
    if unknown:
        raise PipelineError(f"unknown protocols: {sorted(unknown)}")
    spec = record.corruption
    if eval_scenes is None:
        eval_cfg = replace(cfg.gen, scenes=cfg.eval_scenes, seed=cfg.eval_seed)
        eval_scenes = generate_dataset(eval_cfg)

    out_dir = Path(cfg.out_dir)
    reports: Dict[int, MetricsReport] = {}
    for seed in record.seeds:
        model = load_model(cfg, seed)
        gt_items = []
        predcls_items = []
        det_items = []
        transcripts = []
        for i, scene in enumerate(eval_scenes):
            scene_seed = int(np.random.default_rng((cfg.eval_seed, seed, i)).integers(2**31))
            if "predcls" in protocols or "sgcls" in protocols:
                objset, state = _predict_scene(
                    scene, spec, model, cfg.arm, "gt_boxes", scene_seed
                )
                pred = sgg.predict_graph(objset, model.head)
                gt_items.append((scene, pred))
                if "predcls" in protocols:
                    onehot = np.eye(model.vocab.num_classes)[scene.labels]
                    predcls_items.append(
                        (scene, sgg.predict_graph(objset, model.head, label_override=onehot))
                    )
                if state is not None:
                    transcripts.append(dialog_mod.transcript_entry(scene, state))
            if "sgdet" in protocols:
                objset, _ = _predict_scene(
                    scene, spec, model, cfg.arm, "predicted_boxes", scene_seed
                )
                det_items.append((scene, sgg.predict_graph(objset, model.head)))
        by_protocol = {"predcls": predcls_items, "sgcls": gt_items, "sgdet": det_items}
        report = metrics_mod.build_report(
            gt_items,
            model.vocab,
            protocols_by_items=by_protocol,
            protocols=list(protocols),
        )
        reports[seed] = report
        record.reports[seed] = report
        if write_artifacts:
            seed_dir = out_dir / f"seed-{seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            if transcripts:
                with open(seed_dir / "transcripts.jsonl", "w") as fh:
                    for entry in transcripts:
                        fh.write(json.dumps(entry) + "\n")
    if write_artifacts:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report_json(out_dir / "report.json", cfg, record)
    return reports


def write_report_json(path, cfg: ExperimentConfig, record: RunRecord) -> None:
    payload = {
        "config_hash": record.config_hash,
        "arm": record.arm,
        "corruption": record.corruption.to_json_obj(),
        "seeds": {str(s): r.to_json_obj() for s, r in record.reports.items()},
        "hash_checks": record.hash_checks,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class ExperimentCell:
    corruption: CorruptionSpec
    arm: str
    mean: Dict[str, Dict[int, float]] = field(default_factory=dict)
    std: Dict[str, Dict[int, float]] = field(default_factory=dict)
    error: Optional[str] = None


def run_experiment(
    cfg: ExperimentConfig,
    protocols: Sequence[str] = PROTOCOLS,
    arms: Sequence[str] = ARMS,
) -> List[ExperimentCell]:
    """Train and evaluate every (corruption, arm) cell; failures stay local."""
    base_out = Path(cfg.out_dir)
    train_scenes = generate_dataset(cfg.gen)
    eval_cfg = replace(cfg.gen, scenes=cfg.eval_scenes, seed=cfg.eval_seed)
    eval_scenes = generate_dataset(eval_cfg)

    cells: List[ExperimentCell] = []
    for spec in cfg.corruptions:
        for arm in arms:
            cell = ExperimentCell(corruption=spec, arm=arm)
            cell_cfg = replace(
                cfg,
                corruptions=[spec],
                arm=arm,
                out_dir=str(base_out / f"{spec.kind}-{arm}"),
            )
            try:
                record = train(cell_cfg, train_scenes=train_scenes)
                evaluate(cell_cfg, record, protocols=protocols, eval_scenes=eval_scenes)
                for proto in protocols:
                    cell.mean[proto] = {}
                    cell.std[proto] = {}
                    for k in metrics_mod.K_VALUES:
                        values = [
                            record.reports[s].mean_recall[proto][k] for s in record.seeds
                        ]
                        cell.mean[proto][k] = float(np.mean(values))
                        cell.std[proto][k] = float(np.std(values))
            except SceneDialogError as exc:
                cell.error = str(exc)
            cells.append(cell)
    return cells


def render_experiment_table(cells: Sequence[ExperimentCell]) -> str:
    header = ["Vision Input", "Arm"]
    for proto in PROTOCOLS:
        for k in metrics_mod.K_VALUES:
            header.append(f"{proto} mR@{k}")
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for cell in cells:
        row = [cell.corruption.kind, cell.arm]
        if cell.error is not None:
            row += [f"ERROR: {cell.error}"] + ["-"] * (len(header) - 3)
        else:
            for proto in PROTOCOLS:
                for k in metrics_mod.K_VALUES:
                    mean = cell.mean.get(proto, {}).get(k)
                    std = cell.std.get(proto, {}).get(k)
                    row.append(
                        f"{mean:.4f} ± {std:.4f}" if mean is not None else "-"
                    )
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def write_experiment_outputs(out_dir, cells: Sequence[ExperimentCell]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.md").write_text(render_experiment_table(cells))
    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["corruption", "arm"]
        for proto in PROTOCOLS:
            for k in metrics_mod.K_VALUES:
                header += [f"{proto}_mr{k}_mean", f"{proto}_mr{k}_std"]
        header.append("error")
        writer.writerow(header)
        for cell in cells:
            row = [cell.corruption.kind, cell.arm]
            for proto in PROTOCOLS:
                for k in metrics_mod.K_VALUES:
                    row += [
                        cell.mean.get(proto, {}).get(k, ""),
                        cell.std.get(proto, {}).get(k, ""),
                    ]
            row.append(cell.error or "")
            writer.writerow(row)
