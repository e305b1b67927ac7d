"""Unit tests for configuration, two-stage training, and evaluation plumbing.

These use a deliberately tiny configuration (few scenes, few epochs, short
dialogs) so the full train/evaluate path runs in seconds.
"""

import dataclasses
import json

import numpy as np
import pytest
import torch

from scenedialog.core import ValidationError
from scenedialog.datagen import GenConfig, default_vocabulary, generate_dataset
from scenedialog.dialog import DialogConfig
from scenedialog.missingness import CorruptionSpec
from scenedialog.pipeline import (
    ARMS,
    ExperimentConfig,
    OptimizerConfig,
    PipelineError,
    evaluate,
    load_model,
    predicate_targets,
    run_experiment,
    train,
    write_experiment_outputs,
)


def tiny_config(out_dir, arm="si_dial", seeds=(0,), kind="semantic_mask", sigma=0.0):
    return ExperimentConfig(
        gen=GenConfig(scenes=6, seed=0, n_cand=12),
        eval_scenes=4,
        eval_seed=5000,
        corruptions=[CorruptionSpec(kind, sigma)],
        dialog=DialogConfig(n_rounds=3, n_cand=12),
        optimizer=OptimizerConfig(epochs=2, batch_size=4),
        seeds=list(seeds),
        arm=arm,
        out_dir=str(out_dir),
    )


class TestExperimentConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg.to_json_obj()))
        assert ExperimentConfig.load(path).to_json_obj() == cfg.to_json_obj()

    def test_hash_stable_under_key_reordering(self, tmp_path):
        cfg = tiny_config(tmp_path)
        obj = cfg.to_json_obj()
        reordered = dict(reversed(list(obj.items())))
        assert ExperimentConfig.from_json_obj(reordered).config_hash() == cfg.config_hash()

    def test_candidate_count_mismatch_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            ExperimentConfig(
                gen=GenConfig(scenes=2, n_cand=12),
                dialog=DialogConfig(n_rounds=3, n_cand=20),
                out_dir=str(tmp_path),
            )

    def test_unknown_arm_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            tiny_config(tmp_path, arm="oracle")


class TestPredicateTargets:
    def test_lowest_predicate_index_wins(self):
        scenes = generate_dataset(GenConfig(scenes=3, seed=0))
        for scene in scenes:
            targets = predicate_targets(scene)
            by_pair = {}
            for rel in scene.relations:
                key = (rel.subject_index, rel.object_index)
                by_pair.setdefault(key, []).append(rel.predicate_index)
            for (i, j), preds in by_pair.items():
                assert targets[i, j] == min(preds)
            n = scene.num_objects
            related = set(by_pair)
            for i in range(n):
                for j in range(n):
                    if (i, j) not in related:
                        assert targets[i, j] == 0


class TestTrainEvaluate:
    @pytest.mark.parametrize("arm", ARMS)
    def test_train_produces_artifacts_and_passes_hash_checks(self, tmp_path, arm):
        cfg = tiny_config(tmp_path / arm, arm=arm)
        record = train(cfg)
        assert all(record.hash_checks.values())
        seed_dir = tmp_path / arm / "seed-0"
        assert (seed_dir / "detector.json").exists()
        assert (seed_dir / f"params-{arm}.bin").exists()

    def test_evaluate_writes_report_and_transcripts(self, tmp_path):
        cfg = tiny_config(tmp_path, arm="si_dial")
        record = train(cfg)
        reports = evaluate(cfg, record)
        assert set(reports) == {0}
        report = json.loads((tmp_path / "report.json").read_text())
        assert set(report["seeds"]) == {"0"}
        lines = (tmp_path / "seed-0" / "transcripts.jsonl").read_text().splitlines()
        assert len(lines) == cfg.eval_scenes
        entry = json.loads(lines[0])
        assert set(entry) == {"scene_id", "rounds"}
        assert len(entry["rounds"]) == cfg.dialog.n_rounds

    def test_baseline_writes_no_transcripts(self, tmp_path):
        cfg = tiny_config(tmp_path, arm="baseline")
        record = train(cfg)
        evaluate(cfg, record)
        assert not (tmp_path / "seed-0" / "transcripts.jsonl").exists()

    def test_load_model_round_trip(self, tmp_path):
        cfg = tiny_config(tmp_path)
        train(cfg)
        model = load_model(cfg, 0)
        reloaded = load_model(cfg, 0)
        for a, b in zip(model.head.parameters(), reloaded.head.parameters()):
            torch.testing.assert_close(a, b)

    def test_multiple_corruptions_rejected(self, tmp_path):
        cfg = tiny_config(tmp_path)
        cfg = dataclasses.replace(
            cfg,
            corruptions=[CorruptionSpec("semantic_mask"), CorruptionSpec("none")],
        )
        with pytest.raises(PipelineError):
            train(cfg)

    def test_seed_determinism_of_metrics(self, tmp_path):
        values = []
        for run in ("a", "b"):
            cfg = tiny_config(tmp_path / run)
            record = train(cfg)
            reports = evaluate(cfg, record, protocols=["sgcls"])
            values.append(reports[0].mean_recall["sgcls"][20])
        assert values[0] == values[1]


class TestRunExperiment:
    def test_grid_shape_and_outputs(self, tmp_path):
        cfg = tiny_config(tmp_path, kind="none")
        cfg = dataclasses.replace(
            cfg,
            corruptions=[CorruptionSpec("none"), CorruptionSpec("semantic_mask")],
        )
        cells = run_experiment(cfg, protocols=["sgcls"], arms=["baseline", "random_qa"])
        assert len(cells) == 4
        assert all(cell.error is None for cell in cells)
        write_experiment_outputs(tmp_path, cells)
        table = (tmp_path / "table.md").read_text()
        assert "baseline" in table and "semantic_mask" in table
        csv_lines = (tmp_path / "table.csv").read_text().splitlines()
        assert len(csv_lines) == 5
