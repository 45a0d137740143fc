"""
Scoring and selection of source-image candidates.
"""
import logging
import math
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from .edit_models import CandidateScore, SceneMetadata
from .errors import InputValidationError, ShapeError
from .scene_renderer import render_objects
from .segmenter import LuminanceSegmenter, Segmenter, border_median, luminance, region_stats

logger = logging.getLogger(__name__)


class RuleScorer(Protocol):
    def rule_score(self, candidate: np.ndarray, target: np.ndarray, metadata: SceneMetadata) -> float:
        ...


class MetadataRuleScorer:
    """
    Fraction of metadata consistency checks a candidate passes:
    object count, background match and plausibility of the pre-edit object.
    """

    def __init__(self, segmenter: Optional[Segmenter] = None, background_tolerance: float = 0.02,
                 centre_tolerance: float = 3.0, area_tolerance: float = 0.25):
        self.segmenter = segmenter or LuminanceSegmenter()
        self.background_tolerance = background_tolerance
        self.centre_tolerance = centre_tolerance
        self.area_tolerance = area_tolerance

    def rule_score(self, candidate: np.ndarray, target: np.ndarray, metadata: SceneMetadata) -> float:
        seg = self.segmenter.segment_regions(candidate)
        checks = [
            self._check_object_count(seg.n_regions, metadata),
            self._check_background(candidate, target),
            self._check_inverse(region_stats(seg), metadata),
        ]
        return sum(checks) / len(checks)

    def _check_object_count(self, n_regions: int, metadata: SceneMetadata) -> bool:
        return n_regions - 1 == len(metadata.initial_objects)

    def _check_background(self, candidate: np.ndarray, target: np.ndarray) -> bool:
        gap = abs(border_median(luminance(candidate)) - border_median(luminance(target)))
        return gap <= self.background_tolerance

    def _check_inverse(self, regions, metadata: SceneMetadata) -> bool:
        if not regions:
            return False
        expected = np.asarray(metadata.referenced.center)
        _, centroid, area = min(regions, key=lambda reg: float(np.hypot(*(np.asarray(reg[1]) - expected))))
        distance = float(np.hypot(*(np.asarray(centroid) - expected)))
        if distance > self.centre_tolerance:
            return False
        if metadata.initial_area <= 0:
            return True
        return abs(area - metadata.initial_area) <= self.area_tolerance * metadata.initial_area


def psnr_db(reference: np.ndarray, candidate: np.ndarray, cap_db: float) -> float:
    """PSNR in dB over data range 1, capped; identical images give the cap."""
    if float(np.mean((reference - candidate) ** 2)) == 0.0:
        return cap_db
    return min(float(peak_signal_noise_ratio(reference, candidate, data_range=1.0)), cap_db)


class CandidateScorer:
    """
    combined = w_r · rule_score + w_p · perceptual, where perceptual is min(psnr, cap)/cap,
    or (ssim + 1)/2 when the SSIM metric is selected.
    """

    def __init__(self, rule_weight: float = 0.5, perceptual_weight: float = 0.5, metric: str = "psnr",
                 psnr_cap_db: float = 60.0, rules: Optional[RuleScorer] = None):
        if rule_weight < 0 or perceptual_weight < 0 or not math.isclose(rule_weight + perceptual_weight, 1.0):
            raise InputValidationError("scorer weights must be non-negative and sum to 1")
        if metric not in ("psnr", "ssim"):
            raise InputValidationError(f"unknown perceptual metric: {metric}")
        self.rule_weight = rule_weight
        self.perceptual_weight = perceptual_weight
        self.metric = metric
        self.psnr_cap_db = psnr_cap_db
        self.rules = rules or MetadataRuleScorer()

    def reference_image(self, metadata: SceneMetadata, dims: Sequence[int]) -> np.ndarray:
        """The unjittered pre-edit render."""
        return render_objects(metadata.initial_objects, metadata.background, dims)

    def _perceptual(self, reference: np.ndarray, candidate: np.ndarray, psnr: float) -> float:
        if self.metric == "ssim":
            ssim = structural_similarity(reference, candidate, data_range=1.0, channel_axis=-1)
            return min(1.0, max(0.0, (float(ssim) + 1.0) / 2.0))
        return psnr / self.psnr_cap_db

    def score_candidates(self, candidates: Sequence[np.ndarray], target: np.ndarray,
                         metadata: SceneMetadata) -> List[CandidateScore]:
        """Scores in candidate order."""
        reference = self.reference_image(metadata, target.shape)
        scores = []
        for candidate_id, candidate in enumerate(candidates):
            if candidate.shape != target.shape:
                raise ShapeError(f"candidate {candidate_id} has shape {candidate.shape}, target {target.shape}")
            rule = self.rules.rule_score(candidate, target, metadata)
            psnr = psnr_db(reference, candidate, self.psnr_cap_db)
            perceptual = self._perceptual(reference, candidate, psnr)
            combined = min(1.0, self.rule_weight * rule + self.perceptual_weight * perceptual)
            scores.append(CandidateScore(candidate_id=candidate_id, rule_score=rule, psnr=psnr,
                                         perceptual=perceptual, combined=combined))
            logger.debug(f"Candidate {candidate_id}: rule={rule:.3f} psnr={psnr:.2f} combined={combined:.4f}")
        return scores

    def score_and_select(self, candidates: Sequence[np.ndarray], target: np.ndarray, metadata: SceneMetadata,
                         n: int) -> List[Tuple[CandidateScore, np.ndarray]]:
        """
        Top-n candidates by combined score, ties broken by lower candidate id.

        Raises:
            InputValidationError: n < 1 or n larger than the number of candidates
        """
        if not 1 <= n <= len(candidates):
            raise InputValidationError(f"cannot select {n} of {len(candidates)} candidates")
        scores = self.score_candidates(candidates, target, metadata)
        ranked = sorted(scores, key=lambda s: (-s.combined, s.candidate_id))
        return [(s, candidates[s.candidate_id]) for s in ranked[:n]]
