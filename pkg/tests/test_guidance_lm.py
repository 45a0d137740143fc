"""
Unit tests for the guidance LM, sequence assembly, the IMG-token loss and the QFormer.
"""
import math

import numpy as np
import pytest
from scipy.special import log_softmax as reference_log_softmax

from hiedit.errors import ShapeError
from hiedit.guidance_lm import (
    GuidanceLM, QFormer, assemble_sequence, extract_guidance, lm_forward, mllm_loss, qformer_align,
)
from hiedit.layers import LoraSettings
from hiedit.selftest import check_layout
from hiedit.tensor import ComputeTape, constant
from hiedit.vocabulary import Vocabulary

D = 8


@pytest.fixture
def vocab():
    return Vocabulary(["cube", "melt", "vase", "?"], r=3)


@pytest.fixture
def lm(vocab):
    return GuidanceLM(len(vocab), vocab.r, D, 2, 2, LoraSettings(rank=2, alpha=4.0), np.random.default_rng(0))


def _sequence(lm, rng, visual_rows=4):
    parts = [constant(rng.normal(size=(n, D))) for n in (5, visual_rows, 2, 6)]
    return assemble_sequence(*parts, lm.img_embeddings())


class TestGuidanceLM:
    """Parameter layout and freezing."""

    def test_only_adapters_and_img_table_train(self, lm):
        trainable = [n for n, t in lm.named_parameters() if t.requires_grad]
        assert "img_embed" in trainable
        assert all(n == "img_embed" or ".adapter." in n for n in trainable)
        assert lm.adapter_parameters()

    def test_embed_rejects_img_ids(self, lm, vocab):
        assert lm.embed([vocab.lookup("cube")]).shape == (1, D)
        with pytest.raises(ShapeError):
            lm.embed([vocab.img_ids[0]])

    def test_r_must_leave_base_tokens(self):
        with pytest.raises(ShapeError):
            GuidanceLM(4, 4, D, 2, 1, LoraSettings(), np.random.default_rng(0))

    def test_tied_head_covers_vocabulary(self, vocab):
        lm = GuidanceLM(len(vocab), vocab.r, D, 2, 1, LoraSettings(), np.random.default_rng(0), tie_head=True)
        assert lm.output_weight().shape == (len(vocab), D)


class TestSequence:
    """Assembly order and the IMG span."""

    def test_layout_ends(self, lm):
        seq, layout = _sequence(lm, np.random.default_rng(1))
        assert layout.ends == [5, 9, 11, 17, 20]
        assert seq.shape == (20, D)
        assert layout.span("img_tokens") == (17, 20)

    def test_missing_visual_cues_leave_an_empty_segment(self, lm):
        parts = [constant(np.ones((n, D))) for n in (5, 2, 6)]
        seq, layout = assemble_sequence(parts[0], None, parts[1], parts[2], lm.img_embeddings())
        start, stop = layout.span("visual_cues")
        assert start == stop == 5
        assert seq.shape == (16, D)

    def test_width_mismatch(self, lm):
        with pytest.raises(ShapeError):
            assemble_sequence(constant(np.ones((2, D))), constant(np.ones((2, D + 1))), constant(np.ones((1, D))),
                              constant(np.ones((3, D))), lm.img_embeddings())

    def test_random_layouts(self):
        assert check_layout(np.random.default_rng(5), trials=10)


class TestForward:
    """Causality, guidance extraction and the IMG-token loss."""

    def test_hidden_and_logit_shapes(self, lm, vocab):
        seq, _ = _sequence(lm, np.random.default_rng(1))
        hidden, logits = lm_forward(seq, lm)
        assert hidden.shape == (20, D)
        assert logits.shape == (20, len(vocab))

    def test_prefix_ignores_later_rows(self, lm):
        rng = np.random.default_rng(2)
        seq, _ = _sequence(lm, rng)
        changed = seq.values.copy()
        changed[-1] += 4.0
        a, _ = lm_forward(seq, lm)
        b, _ = lm_forward(constant(changed), lm)
        assert np.allclose(a.values[:-1], b.values[:-1])

    def test_guidance_is_final_r_rows(self, lm, vocab):
        seq, layout = _sequence(lm, np.random.default_rng(3))
        hidden, _ = lm_forward(seq, lm)
        v = extract_guidance(hidden, layout, vocab.r)
        assert np.array_equal(v.values, hidden.values[-vocab.r:])

    def test_mllm_loss_matches_reference_cross_entropy(self, lm, vocab):
        seq, layout = _sequence(lm, np.random.default_rng(4))
        _, logits = lm_forward(seq, lm)
        start, stop = layout.span("img_tokens")
        log_p = reference_log_softmax(logits.values[start:stop], axis=-1)
        expected = -sum(log_p[i, vocab.img_ids[i]] for i in range(vocab.r))
        assert mllm_loss(logits, layout, vocab).item() == pytest.approx(expected, rel=1e-10)

    def test_uniform_logits_cost_log_vocab_per_img_token(self, lm, vocab):
        seq, layout = _sequence(lm, np.random.default_rng(5))
        logits = constant(np.zeros((seq.shape[0], len(vocab))))
        expected = vocab.r * math.log(len(vocab))
        assert abs(mllm_loss(logits, layout, vocab).item() - expected) < 1e-9

    def test_mllm_loss_r_mismatch(self, lm):
        seq, layout = _sequence(lm, np.random.default_rng(4))
        _, logits = lm_forward(seq, lm)
        other = Vocabulary(["cube", "melt", "vase", "?"], r=2)
        with pytest.raises(ShapeError):
            mllm_loss(logits, layout, other)

    def test_loss_reaches_img_table_and_adapters_only(self, lm, vocab):
        rng = np.random.default_rng(6)
        with ComputeTape() as tape:
            seq, layout = _sequence(lm, rng)
            _, logits = lm_forward(seq, lm)
            loss = mllm_loss(logits, layout, vocab)
        tape.backward(loss)
        assert np.abs(lm.img_embed.grad).sum() > 0
        assert np.array_equal(lm.base_embed.grad, np.zeros_like(lm.base_embed.values))


class TestQFormer:
    def test_output_shape(self):
        rng = np.random.default_rng(0)
        qformer = QFormer(D, 4, 2, 5, 2, rng)
        assert qformer_align(constant(rng.normal(size=(3, D))), qformer).shape == (5, 4)

    def test_output_depends_on_guidance(self):
        rng = np.random.default_rng(1)
        qformer = QFormer(D, 4, 2, 5, 1, rng)
        a = qformer(constant(rng.normal(size=(3, D)))).values
        b = qformer(constant(rng.normal(size=(3, D)))).values
        assert not np.allclose(a, b)
