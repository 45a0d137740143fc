"""
Fine-grained reasoning cue extraction.

Visual cues: a patch-level branch (R_local) over windows of fine tokens and a
region-level branch (R_global) over segmentation regions, fused into R_V.
Textual cues: object tokens extracted from the instruction, grounded in R_V by
the ID controller into R_T.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .edit_models import ImageTokens, ReasoningCues, SegmentationMap
from .errors import ShapeError
from .layers import CrossAttentionBlock, FeedForward, LayerNorm, Linear, Module
from .tensor import Tensor, add, concat, constant, matmul, reshape, take_rows

logger = logging.getLogger(__name__)


@dataclass
class FrceDiagnostics:
    empty_regions: int = 0


def pool_rows(x: Tensor, weights: np.ndarray) -> Tensor:
    """Weighted row pooling: constant [k, n] weights times x [n, d]."""
    return matmul(constant(weights), x)


def window_index(grid_h: int, grid_w: int, window: int) -> np.ndarray:
    """[n_windows, window²] fine-token indices; windows and their members in row-major order."""
    if grid_h % window or grid_w % window:
        raise ShapeError(f"window {window} does not divide token grid {grid_h}x{grid_w}")
    rows = []
    for wr in range(grid_h // window):
        for wc in range(grid_w // window):
            rows.append([(wr * window + i) * grid_w + wc * window + j
                         for i in range(window) for j in range(window)])
    return np.asarray(rows, dtype=np.int64)


class LocalCueExtractor(Module):
    """Patch adapter P followed by E_P: self-attention and feed-forward within each window, mean per window."""

    def __init__(self, d_enc: int, d_llm: int, heads: int, window: int, rng: np.random.Generator,
                 ln_eps: float = 1e-5):
        super().__init__()
        self.window = window
        self.d_llm = d_llm
        self.patch_adapter = Linear(d_enc, d_llm, rng)
        self.attn = CrossAttentionBlock(d_llm, heads, rng, ln_eps=ln_eps, label="frce.local.self_attn")
        self.ff = FeedForward(d_llm, rng)
        self.ff_norm = LayerNorm(d_llm, ln_eps)

    def __call__(self, tokens: ImageTokens) -> Tensor:
        return extract_local(tokens, self)


def extract_local(tokens: ImageTokens, extractor: LocalCueExtractor) -> Tensor:
    """[n_p, d_llm] with n_p = (fine grid / window)²."""
    grid_h, grid_w = tokens.fine_grid
    index = window_index(grid_h, grid_w, extractor.window)
    n_p, members = index.shape
    x = extractor.patch_adapter(tokens.fine)
    windows = reshape(take_rows(x, index.reshape(-1)), (n_p, members, extractor.d_llm))
    h = extractor.attn(windows, windows)
    h = extractor.ff_norm(add(h, extractor.ff(h)))
    pooling = np.kron(np.eye(n_p), np.full((1, members), 1.0 / members))
    return pool_rows(reshape(h, (n_p * members, extractor.d_llm)), pooling)


class GlobalCueExtractor(Module):
    """Region pooling followed by E_R: h = Norm(x + FF(x)), out = Norm(h + CA(h, all tokens))."""

    def __init__(self, d_enc: int, d_llm: int, heads: int, rng: np.random.Generator, ln_eps: float = 1e-5):
        super().__init__()
        self.region_adapter = Linear(d_enc, d_llm, rng)
        self.ff = FeedForward(d_llm, rng)
        self.ff_norm = LayerNorm(d_llm, ln_eps)
        self.attn = CrossAttentionBlock(d_llm, heads, rng, ln_eps=ln_eps, label="frce.region.cross_attn")
        self.diagnostics = FrceDiagnostics()

    def __call__(self, tokens: ImageTokens, seg: SegmentationMap) -> Tensor:
        return extract_global(tokens, seg, self)


def patch_labels(seg: SegmentationMap, tokens: ImageTokens) -> np.ndarray:
    """Region label under the centre pixel of every fine patch, row-major."""
    if seg.labels.shape != (tokens.height, tokens.width):
        raise ShapeError(f"segmentation {seg.labels.shape} does not match image {tokens.height}x{tokens.width}")
    p = tokens.fine_patch
    grid_h, grid_w = tokens.fine_grid
    rows = np.arange(grid_h) * p + p // 2
    cols = np.arange(grid_w) * p + p // 2
    return seg.labels[np.ix_(rows, cols)].reshape(-1)


def region_pooling(labels: np.ndarray, n_regions: int, diagnostics: Optional[FrceDiagnostics] = None) -> np.ndarray:
    """[n_regions, n_tokens] mean-pooling weights; a region covering no patch centre pools globally."""
    n = labels.shape[0]
    weights = np.zeros((n_regions, n))
    for k in range(n_regions):
        member = labels == k
        if member.any():
            weights[k, member] = 1.0 / member.sum()
        else:
            weights[k, :] = 1.0 / n
            if diagnostics is not None:
                diagnostics.empty_regions += 1
            logger.warning(f"Region {k} covers no patch centre; using the global mean")
    return weights


def extract_global(tokens: ImageTokens, seg: SegmentationMap, extractor: GlobalCueExtractor) -> Tensor:
    """[n_r, d_llm], one row per segmentation region."""
    weights = region_pooling(patch_labels(seg, tokens), seg.n_regions, extractor.diagnostics)
    x = extractor.region_adapter(pool_rows(tokens.fine, weights))
    context = extractor.region_adapter(concat(tokens.coarse_to_fine(), axis=0))
    h = extractor.ff_norm(add(x, extractor.ff(x)))
    return extractor.attn(h, context)


def fuse_visual_cues(r_local: Tensor, r_global: Tensor) -> Tensor:
    """R_V = [R_local; R_global]."""
    if r_local.shape[-1] != r_global.shape[-1]:
        raise ShapeError(f"cannot fuse R_local {r_local.shape} with R_global {r_global.shape}")
    return concat([r_local, r_global], axis=0)


def extract_object_tokens(object_ids: Sequence[int], embed) -> Tensor:
    """O: embedding rows of the extracted object ids; ``embed`` maps ids to [n, d_llm]."""
    if not object_ids:
        raise ValueError("at least one object id is required (UNK when nothing was extracted)")
    return embed(list(object_ids))


class IDController(Module):
    """R_T = FF(CrossAttention(query = O, kv = R_V)), each sub-block with residual and norm."""

    def __init__(self, d_llm: int, heads: int, rng: np.random.Generator, ln_eps: float = 1e-5):
        super().__init__()
        self.attn = CrossAttentionBlock(d_llm, heads, rng, ln_eps=ln_eps, label="frce.id_controller")
        self.ff = FeedForward(d_llm, rng)
        self.ff_norm = LayerNorm(d_llm, ln_eps)

    def __call__(self, r_visual: Tensor, objects: Tensor) -> Tensor:
        return id_controller(r_visual, objects, self)


def id_controller(r_visual: Tensor, objects: Tensor, controller: IDController) -> Tensor:
    h = controller.attn(objects, r_visual)
    return controller.ff_norm(add(h, controller.ff(h)))


class CueExtractor(Module):
    """Both FRCE branches behind the ablation switches."""

    def __init__(self, d_enc: int, d_llm: int, heads: int, window: int, rng_local, rng_global, rng_id,
                 ln_eps: float = 1e-5, use_patch: bool = True, use_region: bool = True, use_id: bool = True):
        super().__init__()
        self.local = LocalCueExtractor(d_enc, d_llm, heads, window, rng_local, ln_eps)
        self.region = GlobalCueExtractor(d_enc, d_llm, heads, rng_global, ln_eps)
        self.id_controller = IDController(d_llm, heads, rng_id, ln_eps)
        self.use_patch = use_patch
        self.use_region = use_region
        self.use_id = use_id

    def __call__(self, tokens: ImageTokens, seg: SegmentationMap, objects: Tensor) -> ReasoningCues:
        r_local = self.local(tokens) if self.use_patch else None
        r_global = self.region(tokens, seg) if self.use_region else None
        if r_local is not None and r_global is not None:
            r_visual = fuse_visual_cues(r_local, r_global)
        else:
            r_visual = r_local if r_local is not None else r_global
        if self.use_id and r_visual is not None:
            r_textual = self.id_controller(r_visual, objects)
        else:
            r_textual = objects
        return ReasoningCues(objects=objects, r_textual=r_textual, r_local=r_local,
                             r_global=r_global, r_visual=r_visual)
