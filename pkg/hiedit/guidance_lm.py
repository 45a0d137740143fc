"""
Toy decoder-only guidance LM and the QFormer aligner.

The LM consumes already-embedded rows: image-adapter output, visual cues,
textual cues, instruction text and finally the r learnable IMG embeddings.
The hidden states at the IMG positions form the guidance V.
"""
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .edit_models import SequenceLayout
from .errors import ShapeError
from .layers import LayerNorm, Linear, LoraSettings, Module, ModuleList, TransformerLayer, parameter
from .tensor import Tensor, concat, log_softmax, matmul, neg, pick, slice_axis, sum_all, take_rows, transpose
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)

SEGMENTS = ("image", "visual_cues", "textual_cues", "text", "img_tokens")


class GuidanceLM(Module):
    """
    Causal transformer over continuous input rows.

    Token embeddings are split into a base table (ids below the IMG range) and a
    trainable [r, d_llm] IMG table. With ``freeze_base`` only the LoRA adapters on
    the attention projections and the IMG table receive gradient.
    """

    def __init__(self, vocab_size: int, r: int, d_llm: int, heads: int, n_layers: int,
                 lora: LoraSettings, rng: np.random.Generator, freeze_base: bool = True,
                 tie_head: bool = False, ln_eps: float = 1e-5):
        super().__init__()
        if r >= vocab_size:
            raise ShapeError(f"r={r} leaves no base tokens in a vocabulary of {vocab_size}")
        self.r = r
        self.d_llm = d_llm
        self.vocab_size = vocab_size
        self.tie_head = tie_head
        self.base_embed = parameter(rng.normal(0.0, 0.02, size=(vocab_size - r, d_llm)))
        self.layers = ModuleList([
            TransformerLayer(d_llm, heads, rng, lora=lora, ln_eps=ln_eps, label=f"lm.layer{i}")
            for i in range(n_layers)
        ])
        self.final_norm = LayerNorm(d_llm, ln_eps)
        if not tie_head:
            self.head = Linear(d_llm, vocab_size, rng, bias=False)
        if freeze_base:
            for name, tensor in self.named_parameters():
                if ".adapter." not in name:
                    tensor.requires_grad = False
        self.img_embed = parameter(rng.normal(0.0, 0.02, size=(r, d_llm)))

    @property
    def base_size(self) -> int:
        return self.vocab_size - self.r

    def embed(self, ids: Sequence[int]) -> Tensor:
        """Embedding rows for base-vocabulary ids."""
        ids = list(ids)
        if any(i < 0 or i >= self.base_size for i in ids):
            raise ShapeError(f"embed() takes base ids below {self.base_size}; IMG rows come from img_embeddings()")
        return take_rows(self.base_embed, ids)

    def img_embeddings(self) -> Tensor:
        return self.img_embed

    def output_weight(self) -> Tensor:
        if self.tie_head:
            return concat([self.base_embed, self.img_embed], axis=0)
        return self.head.weight

    def adapter_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if ".adapter." in n]


def assemble_sequence(ia_out: Tensor, r_visual: Optional[Tensor], r_textual: Tensor, text_emb: Tensor,
                      img_tokens: Tensor) -> Tuple[Tensor, SequenceLayout]:
    """
    T = [IA(E_I(I)); R_V; R_T; E_T(H); Q].

    ``r_visual`` may be None (both visual branches disabled), giving an empty segment.

    Returns:
        (sequence [L_total, d_llm], layout with cumulative segment ends)
    """
    parts = [ia_out, r_visual, r_textual, text_emb, img_tokens]
    width = ia_out.shape[-1]
    ends, total = [], 0
    for name, part in zip(SEGMENTS, parts):
        if part is not None:
            if part.ndim != 2 or part.shape[-1] != width:
                raise ShapeError(f"segment {name} has shape {part.shape}; expected [n, {width}]")
            total += part.shape[0]
        ends.append(total)
    seq = concat([p for p in parts if p is not None], axis=0)
    return seq, SequenceLayout(names=list(SEGMENTS), ends=ends)


def lm_forward(seq: Tensor, model: GuidanceLM) -> Tuple[Tensor, Tensor]:
    """
    Returns:
        (hidden [L, d_llm] after the final norm, logits [L, |vocab|])
    """
    if seq.ndim != 2 or seq.shape[-1] != model.d_llm:
        raise ShapeError(f"lm_forward expects [L, {model.d_llm}], got {seq.shape}")
    x = seq
    for layer in model.layers:
        x = layer(x, causal=True)
    hidden = model.final_norm(x)
    logits = matmul(hidden, transpose(model.output_weight()))
    return hidden, logits


def extract_guidance(hidden: Tensor, layout: SequenceLayout, r: int) -> Tensor:
    """V: the hidden rows of the final (IMG) segment."""
    start, stop = layout.span("img_tokens")
    if stop - start != r or stop != hidden.shape[0]:
        raise ShapeError(f"IMG segment [{start}, {stop}) of a {hidden.shape[0]}-row sequence is not the final {r} rows")
    return slice_axis(hidden, start, stop, axis=0)


def mllm_loss(logits: Tensor, layout: SequenceLayout, vocab: Vocabulary) -> Tensor:
    """Σ_i −log p(IMG_i) at the i-th IMG position; prefix positions carry no loss."""
    start, stop = layout.span("img_tokens")
    if stop - start != vocab.r:
        raise ShapeError(f"IMG segment length {stop - start} does not match r={vocab.r}")
    log_probs = log_softmax(slice_axis(logits, start, stop, axis=0))
    return neg(sum_all(pick(log_probs, vocab.img_ids)))


class QFormer(Module):
    """Learnable queries refined by (self-attention, cross-attention to V, feed-forward) blocks, then → d_diff."""

    def __init__(self, d_llm: int, d_diff: int, heads: int, n_queries: int, n_layers: int,
                 rng: np.random.Generator, ln_eps: float = 1e-5):
        super().__init__()
        self.queries = parameter(rng.normal(0.0, 0.02, size=(n_queries, d_llm)))
        self.layers = ModuleList([
            TransformerLayer(d_llm, heads, rng, cross=True, ln_eps=ln_eps, label=f"qformer.layer{i}")
            for i in range(n_layers)
        ])
        self.out = Linear(d_llm, d_diff, rng)

    def __call__(self, v: Tensor) -> Tensor:
        return qformer_align(v, self)


def qformer_align(v: Tensor, qformer: QFormer) -> Tensor:
    """V̂ [n_queries, d_diff]."""
    x = qformer.queries
    for layer in qformer.layers:
        x = layer(x, context=v)
    return qformer.out(x)
