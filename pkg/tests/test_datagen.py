"""Unit tests for synthetic scene generation and candidate pooling."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scenedialog.core import BoundingBox, QACandidate, SceneInstance, save_scenes_jsonl
from scenedialog.datagen import (
    GenConfig,
    LoadError,
    PoolError,
    build_candidate_pool,
    build_distractor_corpus,
    default_vocabulary,
    generate_dataset,
    generate_scene,
    load_vg_subset,
    region_question,
    relations_from_boxes,
)

CFG = GenConfig(scenes=5, seed=0)
VOCAB = default_vocabulary(CFG)
PRED_INDEX = {name: i for i, name in enumerate(VOCAB.predicate_classes)}


class TestRelationRules:
    def test_horizontal_pair_left_of_only(self):
        # centers (0.2, 0.5) and (0.8, 0.5): left_of fires, above does not
        a = BoundingBox(0.1, 0.4, 0.2, 0.2)
        b = BoundingBox(0.7, 0.4, 0.2, 0.2)
        triples = relations_from_boxes([a, b])
        kinds = {(t.subject_index, t.predicate_index, t.object_index) for t in triples}
        assert (0, PRED_INDEX["left_of"], 1) in kinds
        assert (0, PRED_INDEX["above"], 1) not in kinds
        assert (1, PRED_INDEX["left_of"], 0) not in kinds

    def test_single_object_no_relations(self):
        assert relations_from_boxes([BoundingBox(0.1, 0.1, 0.2, 0.2)]) == []

    def test_overlap_excludes_near(self):
        a = BoundingBox(0.1, 0.1, 0.3, 0.3)
        b = BoundingBox(0.2, 0.2, 0.3, 0.3)
        preds = {t.predicate_index for t in relations_from_boxes([a, b])}
        assert PRED_INDEX["overlaps"] in preds
        assert PRED_INDEX["near"] not in preds


class TestGenerateScene:
    def test_determinism(self):
        assert generate_scene(7, CFG) == generate_scene(7, CFG)

    def test_relations_regenerate_from_boxes(self):
        for seed in range(10):
            scene = generate_scene(seed, CFG)
            assert relations_from_boxes(scene.boxes) == scene.relations

    def test_signature_stamped_into_grid(self):
        # averaging in-box cells on the label channel recovers ~1.0 over noise
        scene = generate_scene(3, CFG)
        from scenedialog.datagen import cells_in_box

        for box, label in scene.objects:
            mask = cells_in_box(CFG.grid_h, CFG.grid_w, box)
            channel = scene.feature_grid[mask, label]
            assert channel.mean() > 0.5

    def test_gt_answers_name_classes(self):
        scene = generate_scene(11, CFG)
        for cand in scene.qa_candidates:
            assert cand.is_ground_truth
            _, label = scene.objects[cand.target_object_index]
            assert cand.answer_text == VOCAB.object_classes[label]
            box, _ = scene.objects[cand.target_object_index]
            assert cand.question_text == region_question(box)


class TestCandidatePool:
    def _scene(self, n_gt):
        scene = generate_scene(0, CFG)
        scene.qa_candidates = scene.qa_candidates[:n_gt]
        return scene

    def test_gt_plus_distractors(self):
        scene = generate_scene(0, CFG)
        n_gt = len(scene.qa_candidates)
        corpus = build_distractor_corpus(VOCAB)
        pool = build_candidate_pool(scene, corpus, seed=0, n_cand=100, vocab=VOCAB)
        assert len(pool) == 100
        assert sum(c.is_ground_truth for c in pool) == n_gt
        gt_texts = {c.question_text for c in scene.qa_candidates}
        assert gt_texts <= {c.question_text for c in pool}

    def test_zero_gt_all_distractors(self):
        scene = self._scene(0)
        corpus = build_distractor_corpus(VOCAB)
        pool = build_candidate_pool(scene, corpus, seed=0, n_cand=100, vocab=VOCAB)
        assert len(pool) == 100
        assert not any(c.is_ground_truth for c in pool)

    def test_pool_exactly_gt_when_full(self):
        scene = generate_scene(0, CFG)
        gt = [c for c in scene.qa_candidates if c.is_ground_truth]
        corpus = build_distractor_corpus(VOCAB)
        pool = build_candidate_pool(scene, corpus, seed=0, n_cand=len(gt), vocab=VOCAB)
        assert sorted(c.question_text for c in pool) == sorted(c.question_text for c in gt)

    def test_corpus_too_small(self):
        scene = generate_scene(0, CFG)
        with pytest.raises(PoolError):
            build_candidate_pool(scene, [], seed=0, n_cand=100, vocab=VOCAB)

    def test_no_distractor_duplicates_gt_text(self):
        corpus = build_distractor_corpus(VOCAB)
        for seed in range(5):
            scene = generate_scene(seed, CFG)
            pool = build_candidate_pool(scene, corpus, seed=seed, n_cand=100, vocab=VOCAB)
            gt_texts = {c.question_text for c in pool if c.is_ground_truth}
            distractor_texts = [
                c.question_text for c in pool if not c.is_ground_truth
            ]
            assert not gt_texts & set(distractor_texts)


class TestGenerateDataset:
    def test_empty(self):
        assert generate_dataset(GenConfig(scenes=0)) == []

    def test_distinct_ids_and_pool_size(self):
        scenes = generate_dataset(CFG)
        assert len({s.scene_id for s in scenes}) == len(scenes) == CFG.scenes
        assert all(len(s.qa_candidates) == CFG.n_cand for s in scenes)

    def test_serialization_round_trip(self, tmp_path):
        scenes = generate_dataset(CFG)
        path = tmp_path / "scenes.jsonl"
        save_scenes_jsonl(scenes, path)
        assert load_vg_subset(path) == scenes


class TestLoadVgSubset:
    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_vg_subset(path) == []

    def test_missing_file(self, tmp_path):
        with pytest.raises(LoadError):
            load_vg_subset(tmp_path / "nope.jsonl")

    def test_bad_record_names_line(self, tmp_path):
        scene = generate_scene(0, CFG)
        obj = scene.to_json_obj()
        obj["relations"] = [
            {"subject_index": 0, "predicate_index": 1, "object_index": 99}
        ]
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(LoadError, match="line 1"):
            load_vg_subset(path)

    def test_skip_invalid(self, tmp_path):
        good = generate_scene(0, CFG).to_json_obj()
        path = tmp_path / "mixed.jsonl"
        path.write_text("not json\n" + json.dumps(good) + "\n")
        scenes = load_vg_subset(path, skip_invalid=True)
        assert len(scenes) == 1


class TestGenConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"grid_h": 0},
            {"min_objects": 3, "max_objects": 2},
            {"max_objects": 5},
            {"num_classes": 1},
            {"grid_d": 2, "num_classes": 4},
            {"n_cand": 2, "max_objects": 3, "num_classes": 3, "grid_d": 3},
        ],
    )
    def test_invalid_configs(self, kwargs):
        from scenedialog.core import ValidationError

        with pytest.raises(ValidationError):
            GenConfig(**kwargs)
