"""
Unit tests for the editing metrics and report aggregation.
"""
import json
import math

import numpy as np
import pytest

from hiedit.errors import ShapeError
from hiedit.metrics import (
    METRIC_COLUMNS, RESERVED_COLUMNS, MetricDiagnostics, PatchStatEmbedder, ToyEmbedder, aggregate,
    category_weighted_mean, evaluate, metric_dir, metric_l1, metric_sim, render_table, unit, write_report,
)
from hiedit.model import MetricRow


class StubEmbedder:
    """Fixed embeddings keyed by the image's mean value and by caption text."""

    def __init__(self, images, texts):
        self.images = images
        self.texts = texts

    def embed_image(self, img):
        return np.asarray(self.images[round(float(np.mean(img)), 3)], dtype=float)

    def embed_text(self, text):
        return np.asarray(self.texts[text], dtype=float)


@pytest.fixture
def toy_embedder(pipeline):
    return ToyEmbedder(pipeline.image_encoder, pipeline.text_encoder, pipeline.vocab)


class TestPrimitives:
    """L1, cosine similarity and directional similarity."""

    def test_unit_of_zero_vector(self):
        assert np.allclose(unit(np.zeros(4)), np.full(4, 0.5))

    def test_l1(self):
        assert metric_l1(np.zeros((2, 2, 3)), np.full((2, 2, 3), 0.25)) == pytest.approx(0.25)

    def test_l1_shape_mismatch(self):
        with pytest.raises(ShapeError):
            metric_l1(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))

    def test_sim_of_unit_vectors(self):
        assert metric_sim(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
        assert metric_sim(np.array([0.6, 0.8]), np.array([0.6, 0.8])) == pytest.approx(1.0)

    def test_sim_normalises_and_counts(self):
        diagnostics = MetricDiagnostics()
        assert metric_sim(np.array([3.0, 0.0]), np.array([1.0, 0.0]), diagnostics) == pytest.approx(1.0)
        assert diagnostics.normalised_embeddings == 1

    def test_direction(self):
        emb = StubEmbedder({0.0: [1.0, 0.0], 1.0: [0.0, 1.0]}, {"src": [1.0, 0.0], "out": [0.0, 1.0]})
        value = metric_dir(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), "src", "out", emb)
        assert value == pytest.approx(1.0)
        opposite = metric_dir(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), "out", "src", emb)
        assert opposite == pytest.approx(-1.0)

    @pytest.mark.parametrize("c_img,c_txt", [(3.7, 1.0), (1.0, 0.25), (12.0, 40.0)])
    def test_direction_ignores_positive_scaling(self, c_img, c_txt):
        base, d_img = np.array([0.3, -0.2, 0.5]), np.array([0.4, 0.1, -0.7])
        text, d_txt = np.array([-0.1, 0.6, 0.2]), np.array([0.5, -0.3, 0.3])

        def direction(ci, ct):
            emb = StubEmbedder({0.0: base, 1.0: base + ci * d_img}, {"src": text, "out": text + ct * d_txt})
            return metric_dir(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), "src", "out", emb)

        assert abs(direction(c_img, c_txt) - direction(1.0, 1.0)) < 1e-12

    def test_constructed_parallel_direction(self):
        emb = StubEmbedder({0.0: [0.2, 0.1], 1.0: [0.8, 0.4]}, {"src": [1.0, 1.0], "out": [3.0, 2.0]})
        assert abs(metric_dir(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), "src", "out", emb) - 1.0) < 1e-9

    def test_degenerate_direction_is_zero(self):
        emb = StubEmbedder({0.5: [1.0, 0.0]}, {"src": [1.0, 0.0], "out": [0.0, 1.0]})
        diagnostics = MetricDiagnostics()
        img = np.full((2, 2, 3), 0.5)
        assert metric_dir(img, img, "src", "out", emb, diagnostics) == 0.0
        assert diagnostics.degenerate_directions == 1


class TestEmbedders:
    def test_toy_embeddings_are_unit(self, toy_embedder, dataset):
        sample = dataset.split_samples("val")[0]
        assert np.linalg.norm(toy_embedder.embed_image(sample.source)) == pytest.approx(1.0)
        assert np.linalg.norm(toy_embedder.embed_text(sample.target_caption)) == pytest.approx(1.0)

    def test_patch_stats_of_flat_image(self):
        emb = PatchStatEmbedder(4).embed_image(np.full((8, 8, 3), 0.3))
        assert emb.shape == (12,)
        assert np.linalg.norm(emb) == pytest.approx(1.0)

    def test_patch_stats_separate_images(self, dataset):
        a, b = dataset.split_samples("val")[:2]
        emb = PatchStatEmbedder(8)
        assert metric_sim(emb.embed_image(a.target), emb.embed_image(b.target)) < 1.0 - 1e-6


class TestEvaluate:
    """Per-sample rows and aggregation."""

    def test_targets_as_outputs(self, dataset, toy_embedder):
        samples = dataset.split_samples("val")
        report = evaluate(samples, {s.sample_id: s.target for s in samples}, toy_embedder, PatchStatEmbedder(8))
        assert report.overall.count == len(samples)
        assert report.overall.l1 == 0.0
        assert report.overall.sim_dino == pytest.approx(1.0)
        assert all(-1.0 <= r.sim_dir <= 1.0 for r in report.rows)
        assert set(report.categories) == {s.category.value for s in samples}

    def test_missing_outputs_are_omitted(self, dataset, toy_embedder):
        samples = dataset.split_samples("val")
        outputs = {s.sample_id: s.target for s in samples[1:]}
        report = evaluate(samples, outputs, toy_embedder, PatchStatEmbedder(8))
        assert report.omissions == [samples[0].sample_id]
        assert report.overall.count == len(samples) - 1

    def test_rows_sorted_by_sample_id(self, dataset, toy_embedder):
        samples = list(reversed(dataset.split_samples("train")))
        report = evaluate(samples, {s.sample_id: s.source for s in samples}, toy_embedder, PatchStatEmbedder(8))
        ids = [r.sample_id for r in report.rows]
        assert ids == sorted(ids)
        assert report.overall.sim_im == pytest.approx(1.0)

    def test_aggregates_ignore_sample_order(self, dataset, toy_embedder):
        samples = dataset.split_samples("train") + dataset.split_samples("val")
        outputs = {s.sample_id: s.source for s in samples}
        reference = evaluate(samples, outputs, toy_embedder, PatchStatEmbedder(8)).model_dump()
        rng = np.random.default_rng(0)
        for _ in range(3):
            shuffled = [samples[i] for i in rng.permutation(len(samples))]
            assert evaluate(shuffled, outputs, toy_embedder, PatchStatEmbedder(8)).model_dump() == reference

    def test_aggregate_means(self):
        rows = [MetricRow(sample_id=f"s{i}", category="Physical", sim_dir=0.1 * i, sim_im=0.5, sim_out=0.2,
                          l1=float(i), sim_dino=1.0) for i in range(4)]
        means = aggregate(rows)
        assert means.count == 4
        assert means.l1 == pytest.approx(1.5)
        assert means.sim_dir == pytest.approx(0.15)
        assert means.clip_score is None

    def test_empty_aggregate(self):
        means = aggregate([])
        assert means.count == 0
        assert all(getattr(means, c) is None for c in METRIC_COLUMNS)

    def test_category_means_recombine_to_overall(self, dataset, toy_embedder):
        samples = dataset.split_samples("train") + dataset.split_samples("val")
        report = evaluate(samples, {s.sample_id: s.source for s in samples}, toy_embedder, PatchStatEmbedder(8))
        for column in METRIC_COLUMNS:
            assert math.isclose(category_weighted_mean(report, column), getattr(report.overall, column),
                                rel_tol=1e-9, abs_tol=1e-12)


class TestReport:
    def test_write_and_render(self, dataset, toy_embedder, tmp_path):
        samples = dataset.split_samples("val")
        report = evaluate(samples, {s.sample_id: s.target for s in samples}, toy_embedder, PatchStatEmbedder(8),
                          variant="patch+region+id+vision+text")
        json_path, text_path = write_report(report, tmp_path / "eval")
        payload = json.loads(json_path.read_text())
        assert payload["variant"] == "patch+region+id+vision+text"
        assert all(payload["overall"][c] is None for c in RESERVED_COLUMNS)
        table = text_path.read_text()
        assert table == render_table(report)
        lines = table.splitlines()
        assert lines[0].startswith("split=val")
        assert lines[1].split()[:2] == ["group", "count"]
        assert lines[2].split()[0] == "overall"
