"""
Automatic editing metrics: L1 distance and embedding similarities, aggregated
per sample, overall and per category.

Reference pairs: sim_im compares the output with the source image, sim_out the
output image with the target caption, sim_dino the output with the target image,
and sim_dir the image-embedding change with the caption-embedding change.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from .config import CATEGORY_NAMES
from .edit_models import EditSample
from .encoders import ImageEncoder, TextEncoder, encode_image, encode_text, patchify
from .errors import DataIOError, ShapeError
from .model import MetricMeans, MetricReport, MetricRow
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("sim_dir", "sim_im", "sim_out", "l1", "sim_dino")
RESERVED_COLUMNS = ("clip_score", "mllm_score", "ins_align")
UNIT_TOLERANCE = 1e-9


class ImageEmbedder(Protocol):
    def embed_image(self, img: np.ndarray) -> np.ndarray:
        ...


class Embedder(ImageEmbedder, Protocol):
    def embed_text(self, text: str) -> np.ndarray:
        ...


@dataclass
class MetricDiagnostics:
    normalised_embeddings: int = 0
    degenerate_directions: int = 0


def unit(v: np.ndarray) -> np.ndarray:
    """L2-normalise; a zero vector maps to the uniform unit vector."""
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    norm = float(np.linalg.norm(v))
    if norm < 1e-12:
        return np.full(v.shape, 1.0 / math.sqrt(v.size))
    return v / norm


class ToyEmbedder:
    """Mean of the encoder's image tokens (all scales) and of the non-pad text token embeddings."""

    def __init__(self, image_encoder: ImageEncoder, text_encoder: TextEncoder, vocab: Vocabulary):
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.vocab = vocab

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        tokens = encode_image(img, self.image_encoder)
        rows = np.concatenate([t.values for t in tokens.scales], axis=0)
        return unit(rows.mean(axis=0))

    def embed_text(self, text: str) -> np.ndarray:
        emb, tokens = encode_text(text, self.vocab, self.text_encoder.max_len, self.text_encoder)
        return unit(emb.values[: tokens.length].mean(axis=0))


class PatchStatEmbedder:
    """Mean-centred vector of per-patch mean colours, L2-normalised."""

    def __init__(self, patch: int = 4):
        self.patch = patch

    def embed_image(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        c = img.shape[-1]
        stats = patchify(img, self.patch).reshape(-1, self.patch * self.patch, c).mean(axis=1).reshape(-1)
        return unit(stats - stats.mean())


def metric_l1(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute pixel difference."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"L1 needs equal shapes, got {a.shape} and {b.shape}")
    return float(np.abs(a - b).mean())


def _ensure_unit(v: np.ndarray, diagnostics: Optional[MetricDiagnostics]) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if abs(float(np.linalg.norm(v)) - 1.0) > UNIT_TOLERANCE:
        if diagnostics is not None:
            diagnostics.normalised_embeddings += 1
        logger.warning("Non-unit embedding passed to a similarity metric; normalising")
        v = unit(v)
    return v


def metric_sim(u: np.ndarray, v: np.ndarray, diagnostics: Optional[MetricDiagnostics] = None) -> float:
    """Cosine similarity of unit vectors, clipped to [-1, 1]."""
    u, v = _ensure_unit(u, diagnostics), _ensure_unit(v, diagnostics)
    if u.shape != v.shape:
        raise ShapeError(f"embedding sizes differ: {u.shape} vs {v.shape}")
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def metric_dir(src_img: np.ndarray, out_img: np.ndarray, src_caption: str, out_caption: str, emb: Embedder,
               diagnostics: Optional[MetricDiagnostics] = None) -> float:
    """
    cos(emb_img(out) − emb_img(src), emb_txt(out_caption) − emb_txt(src_caption)).

    Returns 0 and counts a degenerate direction when either change has norm below 1e-9.
    """
    d_img = emb.embed_image(out_img) - emb.embed_image(src_img)
    d_txt = emb.embed_text(out_caption) - emb.embed_text(src_caption)
    n_img, n_txt = float(np.linalg.norm(d_img)), float(np.linalg.norm(d_txt))
    if n_img < 1e-9 or n_txt < 1e-9:
        if diagnostics is not None:
            diagnostics.degenerate_directions += 1
        logger.debug("Degenerate edit direction; sim_dir set to 0")
        return 0.0
    return float(np.clip(np.dot(d_img, d_txt) / (n_img * n_txt), -1.0, 1.0))


def score_sample(sample: EditSample, output: np.ndarray, emb: Embedder, dino: ImageEmbedder,
                 diagnostics: Optional[MetricDiagnostics] = None) -> MetricRow:
    out_vec = emb.embed_image(output)
    return MetricRow(
        sample_id=sample.sample_id,
        category=sample.category.value,
        sim_dir=metric_dir(sample.source, output, sample.source_caption, sample.target_caption, emb, diagnostics),
        sim_im=metric_sim(out_vec, emb.embed_image(sample.source), diagnostics),
        sim_out=metric_sim(out_vec, emb.embed_text(sample.target_caption), diagnostics),
        l1=metric_l1(output, sample.target),
        sim_dino=metric_sim(dino.embed_image(output), dino.embed_image(sample.target), diagnostics),
    )


def aggregate(rows: Sequence[MetricRow]) -> MetricMeans:
    """Exact means (math.fsum) over rows in sample-id order; reserved columns stay null."""
    ordered = sorted(rows, key=lambda r: r.sample_id)
    if not ordered:
        return MetricMeans(count=0, sim_dir=None, sim_im=None, sim_out=None, l1=None, sim_dino=None)
    means = {col: math.fsum(getattr(r, col) for r in ordered) / len(ordered) for col in METRIC_COLUMNS}
    return MetricMeans(count=len(ordered), **means)


def evaluate(samples: Iterable[EditSample], outputs: Mapping[str, np.ndarray], emb: Embedder,
             dino: ImageEmbedder, split: str = "val", variant: str = "base") -> MetricReport:
    """
    Score every sample that has an output; samples without one are listed as omissions
    and excluded from every mean.
    """
    diagnostics = MetricDiagnostics()
    rows: List[MetricRow] = []
    omissions: List[str] = []
    for sample in sorted(samples, key=lambda s: s.sample_id):
        output = outputs.get(sample.sample_id)
        if output is None:
            omissions.append(sample.sample_id)
            continue
        rows.append(score_sample(sample, output, emb, dino, diagnostics))
    if omissions:
        logger.warning(f"{len(omissions)} samples have no output and are omitted from the means")
    categories = {
        name: aggregate([r for r in rows if r.category == name])
        for name in CATEGORY_NAMES if any(r.category == name for r in rows)
    }
    return MetricReport(
        split=split, variant=variant, rows=rows, overall=aggregate(rows), categories=categories,
        omissions=omissions, degenerate_directions=diagnostics.degenerate_directions,
        normalised_embeddings=diagnostics.normalised_embeddings,
    )


def _cell(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.6f}"


def render_table(report: MetricReport) -> str:
    """Aligned text table: one line for the overall means, then one per category."""
    header = ("group", "count") + METRIC_COLUMNS
    lines: List[Tuple[str, ...]] = [header]
    groups = [("overall", report.overall)] + list(report.categories.items())
    for name, means in groups:
        lines.append((name, str(means.count)) + tuple(_cell(getattr(means, c)) for c in METRIC_COLUMNS))
    widths = [max(len(line[i]) for line in lines) for i in range(len(header))]
    rendered = [
        "  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(line, widths)))
        for line in lines
    ]
    title = f"split={report.split} variant={report.variant} omitted={len(report.omissions)}"
    return "\n".join([title] + rendered) + "\n"


def write_report(report: MetricReport, out_dir) -> Tuple[Path, Path]:
    """Write ``metrics.json`` and ``metrics.txt``."""
    out = Path(out_dir)
    json_path, text_path = out / "metrics.json", out / "metrics.txt"
    try:
        out.mkdir(parents=True, exist_ok=True)
        json_path.write_text(json.dumps(report.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        text_path.write_text(render_table(report), encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"could not write metric report: {e}", str(out)) from e
    return json_path, text_path


def category_weighted_mean(report: MetricReport, column: str) -> Optional[float]:
    """Count-weighted recombination of the per-category means."""
    parts = [(m.count, getattr(m, column)) for m in report.categories.values() if m.count]
    if not parts:
        return None
    return math.fsum(c * v for c, v in parts) / sum(c for c, _ in parts)
