"""
Unit tests for candidate scoring and selection.
"""
import numpy as np
import pytest

from hiedit.candidate_scorer import CandidateScorer, MetadataRuleScorer, psnr_db
from hiedit.edit_models import Category
from hiedit.errors import InputValidationError, ShapeError
from hiedit.scene_renderer import generate_source_candidates, render_scene

DIMS = (32, 32, 3)


@pytest.fixture
def scene():
    target, meta = render_scene(Category.TEMPORAL, 21, DIMS)
    return target, meta, generate_source_candidates(target, meta, 5)


class TestPsnr:
    def test_identical_images_give_the_cap(self):
        img = np.full((4, 4, 3), 0.5)
        assert psnr_db(img, img, 60.0) == 60.0

    def test_known_value(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.1)
        assert psnr_db(a, b, 60.0) == pytest.approx(20.0)


class TestCandidateScorer:
    """Weighted rule and perceptual scores."""

    @pytest.mark.parametrize("kwargs", [
        {"rule_weight": 0.7, "perceptual_weight": 0.7},
        {"rule_weight": -0.5, "perceptual_weight": 1.5},
        {"metric": "lpips"},
    ])
    def test_rejects_invalid_settings(self, kwargs):
        with pytest.raises(InputValidationError):
            CandidateScorer(**kwargs)

    @pytest.mark.parametrize("category", list(Category))
    def test_initial_state_scores_highest(self, category):
        target, meta = render_scene(category, 4, DIMS)
        candidates = generate_source_candidates(target, meta, 4)
        scores = CandidateScorer().score_candidates(candidates, target, meta)
        assert scores[0].rule_score == 1.0
        assert scores[0].combined == pytest.approx(1.0)
        assert all(s.combined < scores[0].combined for s in scores[1:])

    def test_scores_in_candidate_order(self, scene):
        target, meta, candidates = scene
        scores = CandidateScorer().score_candidates(candidates, target, meta)
        assert [s.candidate_id for s in scores] == list(range(5))
        assert all(0.0 <= s.combined <= 1.0 for s in scores)

    def test_select_top_n(self, scene):
        target, meta, candidates = scene
        selected = CandidateScorer().score_and_select(candidates, target, meta, 2)
        assert len(selected) == 2
        assert selected[0][0].candidate_id == 0
        assert selected[0][0].combined >= selected[1][0].combined
        assert selected[0][1] is candidates[0]

    def test_ssim_metric(self, scene):
        target, meta, candidates = scene
        scores = CandidateScorer(metric="ssim").score_candidates(candidates, target, meta)
        assert scores[0].perceptual == pytest.approx(1.0)
        assert scores[1].perceptual < 1.0

    def test_rule_only_weights(self, scene):
        target, meta, candidates = scene
        scores = CandidateScorer(rule_weight=1.0, perceptual_weight=0.0).score_candidates(candidates, target, meta)
        assert all(s.combined == s.rule_score for s in scores)

    @pytest.mark.parametrize("n", [0, 6])
    def test_select_out_of_range(self, scene, n):
        target, meta, candidates = scene
        with pytest.raises(InputValidationError):
            CandidateScorer().score_and_select(candidates, target, meta, n)

    def test_shape_mismatch(self, scene):
        target, meta, _ = scene
        with pytest.raises(ShapeError):
            CandidateScorer().score_candidates([np.zeros((16, 16, 3))], target, meta)


class TestMetadataRules:
    """Individual consistency checks."""

    def test_blank_candidate_fails_count_and_inverse(self, scene):
        target, meta, _ = scene
        blank = np.full(DIMS, meta.background[0])
        # only the background check passes
        assert MetadataRuleScorer().rule_score(blank, target, meta) == pytest.approx(1 / 3)

    def test_different_background_fails(self, scene):
        target, meta, candidates = scene
        brighter = np.clip(candidates[0] + 0.1, 0.0, 1.0)
        assert MetadataRuleScorer().rule_score(brighter, target, meta) < 1.0


class ConstantRules:
    def rule_score(self, candidate, target, metadata):
        return 1.0


class TestSelectionOracle:
    """Selection against an exhaustive sort of every candidate score."""

    def test_matches_full_sort_over_many_batches(self):
        scorer = CandidateScorer()
        categories = list(Category)
        for seed in range(50):
            target, meta = render_scene(categories[seed % len(categories)], 1000 + seed, DIMS)
            candidates = generate_source_candidates(target, meta, 100)
            expected = sorted(scorer.score_candidates(candidates, target, meta),
                              key=lambda s: (-s.combined, s.candidate_id))
            selected = scorer.score_and_select(candidates, target, meta, 10)
            assert [s.candidate_id for s, _ in selected] == [s.candidate_id for s in expected[:10]]

    def test_ties_go_to_the_lower_candidate_id(self, scene):
        target, meta, candidates = scene
        scorer = CandidateScorer(rule_weight=1.0, perceptual_weight=0.0, rules=ConstantRules())
        selected = scorer.score_and_select(list(reversed(candidates)), target, meta, 3)
        assert [s.candidate_id for s, _ in selected] == [0, 1, 2]
        assert all(s.combined == 1.0 for s, _ in selected)

    @pytest.mark.parametrize("category", list(Category))
    def test_candidates_are_pairwise_distinct(self, category):
        for seed in range(3):
            target, meta = render_scene(category, 40 + seed, DIMS)
            candidates = generate_source_candidates(target, meta, 16)
            for i in range(len(candidates)):
                for j in range(i + 1, len(candidates)):
                    assert not np.array_equal(candidates[i], candidates[j]), f"candidates {i} and {j} coincide"
