"""
Cross-modal enhancer: a visual and a textual five-block cross-attention pipeline,
each turning (V̂, modality context, modality cues) into an enhanced feature R̄ and
a refined guidance ē.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import ShapeError
from .layers import CrossAttentionBlock, LayerNorm, Linear, Module, parameter
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Enhancer(Module):
    """
    Learnable queries Q_e and five cross-attention blocks of width d_diff.

    Blocks 1-4 apply residual + norm; block 5 is followed by Linear and Norm.
    """

    def __init__(self, d_diff: int, heads: int, n_e: int, rng: np.random.Generator, modality: str,
                 ln_eps: float = 1e-5):
        super().__init__()
        if modality not in ("visual", "textual"):
            raise ValueError(f"modality must be 'visual' or 'textual', got {modality!r}")
        self.modality = modality
        self.d_diff = d_diff
        self.queries = parameter(rng.normal(0.0, 0.02, size=(n_e, d_diff)))
        for i in range(1, 6):
            setattr(self, f"block{i}", CrossAttentionBlock(d_diff, heads, rng, residual_norm=i < 5, ln_eps=ln_eps,
                                                           label=f"cme.{modality}.block{i}"))
        self.out_linear = Linear(d_diff, d_diff, rng)
        self.out_norm = LayerNorm(d_diff, ln_eps)


def enhancer_forward(v_hat: Tensor, modality_ctx: Tensor, modality_cues: Tensor, e: Enhancer,
                     guidance_output: str = "v_bar") -> Tuple[Tensor, Tensor]:
    """
    F1 = CA(Q_e, V̂); F2 = CA(ctx, cues); V̄ = Norm(F1 + CA(F1, F2));
    G = CA(F2, V̄); R̄ = Norm(Linear(CA(G, cues))).

    Returns:
        (R̄ [n_ctx, d_diff], ē [n_e, d_diff]) with ē = V̄, or F1 when guidance_output == "f1"
    """
    for name, t in (("V_hat", v_hat), ("context", modality_ctx), ("cues", modality_cues)):
        if t.ndim != 2 or t.shape[-1] != e.d_diff:
            raise ShapeError(f"{e.modality} enhancer: {name} has shape {t.shape}, expected [n, {e.d_diff}]")
    f1 = e.block1(e.queries, v_hat)
    f2 = e.block2(modality_ctx, modality_cues)
    v_bar = e.block3(f1, f2)
    g = e.block4(f2, v_bar)
    r_bar = e.out_norm(e.out_linear(e.block5(g, modality_cues)))
    return r_bar, (f1 if guidance_output == "f1" else v_bar)


@dataclass
class EnhancedFeatures:
    r_bar_vis: Optional[Tensor] = None
    e_bar_vis: Optional[Tensor] = None
    r_bar_txt: Optional[Tensor] = None
    e_bar_txt: Optional[Tensor] = None


def enhance(v_hat: Tensor, vis_ctx: Optional[Tensor], vis_cues: Optional[Tensor], txt_ctx: Optional[Tensor],
            txt_cues: Optional[Tensor], visual_e: Optional[Enhancer], textual_e: Optional[Enhancer],
            guidance_output: str = "v_bar") -> EnhancedFeatures:
    """
    Run each enhancer on its own modality; inputs are already projected to d_diff.
    A modality whose enhancer or cues are None is skipped.
    """
    out = EnhancedFeatures()
    if visual_e is not None and vis_cues is not None:
        out.r_bar_vis, out.e_bar_vis = enhancer_forward(v_hat, vis_ctx, vis_cues, visual_e, guidance_output)
    if textual_e is not None and txt_cues is not None:
        out.r_bar_txt, out.e_bar_txt = enhancer_forward(v_hat, txt_ctx, txt_cues, textual_e, guidance_output)
    return out


class CrossModalEnhancer(Module):
    """Both enhancers plus the per-modality projections into d_diff."""

    def __init__(self, d_enc: int, d_llm: int, d_diff: int, heads: int, n_e: int, rng: np.random.Generator,
                 ln_eps: float = 1e-5, guidance_output: str = "v_bar",
                 use_visual: bool = True, use_textual: bool = True):
        super().__init__()
        self.visual = Enhancer(d_diff, heads, n_e, rng, "visual", ln_eps)
        self.textual = Enhancer(d_diff, heads, n_e, rng, "textual", ln_eps)
        self.vis_ctx_proj = Linear(d_enc, d_diff, rng)
        self.vis_cue_proj = Linear(d_llm, d_diff, rng)
        self.txt_ctx_proj = Linear(d_enc, d_diff, rng)
        self.txt_cue_proj = Linear(d_llm, d_diff, rng)
        self.guidance_output = guidance_output
        self.use_visual = use_visual
        self.use_textual = use_textual

    def __call__(self, v_hat: Tensor, img_feat: Tensor, r_visual: Optional[Tensor], txt_feat: Tensor,
                 r_textual: Tensor) -> EnhancedFeatures:
        run_visual = self.use_visual and r_visual is not None
        return enhance(
            v_hat,
            self.vis_ctx_proj(img_feat) if run_visual else None,
            self.vis_cue_proj(r_visual) if run_visual else None,
            self.txt_ctx_proj(txt_feat) if self.use_textual else None,
            self.txt_cue_proj(r_textual) if self.use_textual else None,
            self.visual if run_visual else None,
            self.textual if self.use_textual else None,
            self.guidance_output,
        )
