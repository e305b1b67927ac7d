"""Unit tests for the three corruption levels."""

import hashlib

import numpy as np
import pytest

from scenedialog.core import BoundingBox, ValidationError
from scenedialog.datagen import GenConfig, cells_in_box, generate_scene
from scenedialog.missingness import (
    CorruptedScene,
    CorruptionSpec,
    apply,
    apply_dataset,
    load_corrupted_jsonl,
    save_corrupted_jsonl,
)

CFG = GenConfig(scenes=3, seed=0)


def _grid_hash(grid):
    return hashlib.sha256(grid.tobytes()).hexdigest()


class TestCorruptionSpec:
    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            CorruptionSpec("pixelate")

    def test_blur_requires_sigma(self):
        with pytest.raises(ValidationError):
            CorruptionSpec("image_blur", sigma=0.0)

    def test_json_round_trip(self):
        spec = CorruptionSpec("object_blur", sigma=1.5)
        assert CorruptionSpec.from_json_obj(spec.to_json_obj()) == spec


class TestApply:
    def test_none_is_identity(self):
        scene = generate_scene(0, CFG)
        out = apply(scene, CorruptionSpec("none"))
        assert np.array_equal(out.corrupted_grid, scene.feature_grid)

    def test_input_never_mutated(self):
        scene = generate_scene(1, CFG)
        before = _grid_hash(scene.feature_grid)
        for spec in (
            CorruptionSpec("none"),
            CorruptionSpec("image_blur", 1.0),
            CorruptionSpec("object_blur", 1.0),
            CorruptionSpec("semantic_mask"),
        ):
            apply(scene, spec)
        assert _grid_hash(scene.feature_grid) == before

    def test_blur_of_constant_grid_is_identity(self):
        scene = generate_scene(2, CFG)
        scene.feature_grid[:] = 3.5
        for kind in ("image_blur", "object_blur"):
            out = apply(scene, CorruptionSpec(kind, sigma=1.0))
            np.testing.assert_allclose(out.corrupted_grid, 3.5, atol=1e-12)

    def test_image_blur_preserves_mean_of_constant_border_grid(self):
        scene = generate_scene(2, CFG)
        scene.feature_grid[:] = 1.0
        scene.feature_grid[5:7, 5:7, :] = 4.0
        out = apply(scene, CorruptionSpec("image_blur", sigma=1.0))
        # reflect padding on constant borders keeps the per-channel mean
        np.testing.assert_allclose(
            out.corrupted_grid.mean(axis=(0, 1)),
            scene.feature_grid.mean(axis=(0, 1)),
            atol=1e-6,
        )

    def test_semantic_mask_zeroes_in_box_cells_only(self):
        scene = generate_scene(3, CFG)
        out = apply(scene, CorruptionSpec("semantic_mask"))
        h, w, _ = scene.feature_grid.shape
        mask = np.zeros((h, w), dtype=bool)
        for box in scene.boxes:
            mask |= cells_in_box(h, w, box)
        assert np.all(out.corrupted_grid[mask] == 0.0)
        np.testing.assert_array_equal(out.corrupted_grid[~mask], scene.feature_grid[~mask])

    def test_semantic_mask_full_cover_zeroes_everything(self):
        scene = generate_scene(0, CFG)
        scene.objects = [(BoundingBox(0.0, 0.0, 1.0, 1.0), 0)]
        scene.relations = []
        scene.qa_candidates = []
        out = apply(scene, CorruptionSpec("semantic_mask"))
        assert np.all(out.corrupted_grid == 0.0)

    def test_semantic_mask_reduces_l2(self):
        scene = generate_scene(4, CFG)
        out = apply(scene, CorruptionSpec("semantic_mask"))
        assert np.linalg.norm(out.corrupted_grid) < np.linalg.norm(scene.feature_grid)

    def test_object_blur_leaves_outside_cells_untouched(self):
        scene = generate_scene(5, CFG)
        out = apply(scene, CorruptionSpec("object_blur", sigma=1.0))
        h, w, _ = scene.feature_grid.shape
        mask = np.zeros((h, w), dtype=bool)
        for box in scene.boxes:
            mask |= cells_in_box(h, w, box)
        np.testing.assert_array_equal(out.corrupted_grid[~mask], scene.feature_grid[~mask])


class TestShapeGuard:
    def test_shape_mismatch_rejected(self):
        scene = generate_scene(0, CFG)
        with pytest.raises(ValidationError):
            CorruptedScene(scene, np.zeros((1, 1, 1)), CorruptionSpec("none"))


class TestSerialization:
    def test_round_trip(self, tmp_path):
        scenes = [generate_scene(i, CFG) for i in range(3)]
        corrupted = apply_dataset(scenes, CorruptionSpec("semantic_mask"))
        path = tmp_path / "corrupted.jsonl"
        save_corrupted_jsonl(corrupted, path)
        loaded = load_corrupted_jsonl(path)
        assert len(loaded) == 3
        for a, b in zip(corrupted, loaded):
            assert a.base == b.base
            np.testing.assert_array_equal(a.corrupted_grid, b.corrupted_grid)
            assert a.spec == b.spec
