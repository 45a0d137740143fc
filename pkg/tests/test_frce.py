"""
Unit tests for fine-grained reasoning cue extraction.
"""
import numpy as np
import pytest

from hiedit.edit_models import ImageTokens, SegmentationMap
from hiedit.errors import ShapeError
from hiedit.frce import (
    CueExtractor, FrceDiagnostics, GlobalCueExtractor, IDController, LocalCueExtractor, extract_global,
    extract_local, extract_object_tokens, fuse_visual_cues, id_controller, patch_labels, region_pooling,
    window_index,
)
from hiedit.selftest import composite_cases
from hiedit.tensor import constant, grad_check

D_ENC, D_LLM, HEADS = 6, 8, 2


@pytest.fixture
def tokens():
    """8x8x3 image tokens at patch sizes 2 (4x4 grid) and 4 (2x2 grid)."""
    rng = np.random.default_rng(11)
    return ImageTokens(scales=[constant(rng.normal(size=(16, D_ENC))), constant(rng.normal(size=(4, D_ENC)))],
                       patch_sizes=[2, 4], height=8, width=8, channels=3)


@pytest.fixture
def seg():
    labels = np.zeros((8, 8), dtype=np.int64)
    labels[0:4, 0:4] = 1
    labels[4:8, 4:8] = 2
    return SegmentationMap(labels=labels, n_regions=3)


class TestPatchBranch:
    """Windowed local cues."""

    def test_window_index_row_major(self):
        index = window_index(4, 4, 2)
        assert index.shape == (4, 4)
        assert index[0].tolist() == [0, 1, 4, 5]
        assert index[3].tolist() == [10, 11, 14, 15]

    def test_window_must_divide_grid(self):
        with pytest.raises(ShapeError):
            window_index(4, 4, 3)

    def test_one_row_per_window(self, tokens):
        extractor = LocalCueExtractor(D_ENC, D_LLM, HEADS, 2, np.random.default_rng(0))
        assert extract_local(tokens, extractor).shape == (4, D_LLM)

    def test_windows_are_independent(self, tokens):
        extractor = LocalCueExtractor(D_ENC, D_LLM, HEADS, 2, np.random.default_rng(0))
        before = extract_local(tokens, extractor).values
        fine = tokens.fine.values.copy()
        fine[[0, 1, 4, 5]] += 3.0
        changed = ImageTokens(scales=[constant(fine), tokens.scales[1]], patch_sizes=[2, 4],
                              height=8, width=8, channels=3)
        after = extract_local(changed, extractor).values
        assert not np.allclose(before[0], after[0])
        assert np.allclose(before[1:], after[1:])


class TestRegionBranch:
    """Region pooling and global cues."""

    def test_patch_labels_use_patch_centres(self, tokens, seg):
        labels = patch_labels(seg, tokens).reshape(4, 4)
        assert labels[0, 0] == 1 and labels[1, 1] == 1
        assert labels[3, 3] == 2
        assert labels[0, 3] == 0

    def test_patch_labels_shape_mismatch(self, tokens):
        with pytest.raises(ShapeError):
            patch_labels(SegmentationMap(labels=np.zeros((4, 4), dtype=np.int64), n_regions=1), tokens)

    def test_pooling_rows_are_means(self):
        weights = region_pooling(np.array([0, 0, 1, 1, 1]), 2)
        assert np.allclose(weights.sum(axis=1), 1.0)
        assert np.allclose(weights[1], [0, 0, 1 / 3, 1 / 3, 1 / 3])

    def test_empty_region_pools_globally(self):
        diagnostics = FrceDiagnostics()
        weights = region_pooling(np.array([0, 0, 1, 1]), 3, diagnostics)
        assert np.allclose(weights[2], 0.25)
        assert diagnostics.empty_regions == 1

    def test_one_row_per_region(self, tokens, seg):
        extractor = GlobalCueExtractor(D_ENC, D_LLM, HEADS, np.random.default_rng(0))
        assert extract_global(tokens, seg, extractor).shape == (3, D_LLM)

    def test_swapping_region_contents_swaps_their_rows(self, tokens, seg):
        extractor = GlobalCueExtractor(D_ENC, D_LLM, HEADS, np.random.default_rng(0))
        before = extract_global(tokens, seg, extractor).values
        first, second = [0, 1, 4, 5], [10, 11, 14, 15]
        fine = tokens.fine.values.copy()
        fine[first], fine[second] = tokens.fine.values[second], tokens.fine.values[first]
        swapped = ImageTokens(scales=[constant(fine), tokens.scales[1]], patch_sizes=[2, 4],
                              height=8, width=8, channels=3)
        after = extract_global(swapped, seg, extractor).values
        assert np.allclose(after[1], before[2], rtol=0, atol=1e-10)
        assert np.allclose(after[2], before[1], rtol=0, atol=1e-10)
        assert np.allclose(after[0], before[0], rtol=0, atol=1e-10)
        assert not np.allclose(before[1], before[2])

    def test_fuse_concatenates_rows(self):
        fused = fuse_visual_cues(constant(np.ones((4, D_LLM))), constant(np.zeros((3, D_LLM))))
        assert fused.shape == (7, D_LLM)
        assert np.array_equal(fused.values[:4], np.ones((4, D_LLM)))

    def test_fuse_width_mismatch(self):
        with pytest.raises(ShapeError):
            fuse_visual_cues(constant(np.ones((4, D_LLM))), constant(np.ones((3, D_LLM + 1))))


class TestTextualCues:
    """Object tokens and the ID controller."""

    def test_object_tokens_require_an_id(self):
        with pytest.raises(ValueError):
            extract_object_tokens([], lambda ids: constant(np.ones((len(ids), D_LLM))))

    def test_controller_keeps_object_rows(self):
        rng = np.random.default_rng(2)
        controller = IDController(D_LLM, HEADS, rng)
        out = id_controller(constant(rng.normal(size=(7, D_LLM))), constant(rng.normal(size=(2, D_LLM))), controller)
        assert out.shape == (2, D_LLM)

    def test_controller_reads_visual_cues(self):
        rng = np.random.default_rng(3)
        controller = IDController(D_LLM, HEADS, rng)
        objects = constant(rng.normal(size=(2, D_LLM)))
        a = id_controller(constant(rng.normal(size=(5, D_LLM))), objects, controller).values
        b = id_controller(constant(rng.normal(size=(5, D_LLM))), objects, controller).values
        assert not np.allclose(a, b)

    def test_controller_gradients(self):
        f, inputs = composite_cases(np.random.default_rng(4))["id_controller"]
        assert grad_check(f, inputs, coords=10, seed=4) < 1e-4


class TestCueExtractor:
    """Branch switches."""

    def _extractor(self, **switches):
        rngs = [np.random.default_rng(i) for i in range(3)]
        return CueExtractor(D_ENC, D_LLM, HEADS, 2, *rngs, **switches)

    def test_full_cues(self, tokens, seg):
        objects = constant(np.ones((2, D_LLM)))
        cues = self._extractor()(tokens, seg, objects)
        assert cues.r_visual.shape == (4 + 3, D_LLM)
        assert cues.r_textual.shape == (2, D_LLM)

    def test_region_only(self, tokens, seg):
        cues = self._extractor(use_patch=False)(tokens, seg, constant(np.ones((1, D_LLM))))
        assert cues.r_local is None
        assert cues.r_visual is cues.r_global

    def test_without_id_controller_textual_cues_are_objects(self, tokens, seg):
        objects = constant(np.ones((2, D_LLM)))
        cues = self._extractor(use_id=False)(tokens, seg, objects)
        assert cues.r_textual is objects

    def test_no_visual_branches(self, tokens, seg):
        objects = constant(np.ones((2, D_LLM)))
        cues = self._extractor(use_patch=False, use_region=False)(tokens, seg, objects)
        assert cues.r_visual is None
        assert cues.r_textual is objects
