"""
Toy image/text encoders, the trainable image adapter and the latent decoder.

The finest scale of the image encoder doubles as the diffusion latent space,
so ImageDecoder only has to invert that one projection.
"""
import logging
from typing import List, Sequence, Tuple

import numpy as np

from .edit_models import ImageTokens, TokenizedText
from .errors import InputValidationError, ShapeError
from .layers import Linear, Module, ModuleList, parameter
from .tensor import Tensor, add, concat, constant, take_rows
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)


def patchify(img: np.ndarray, p: int) -> np.ndarray:
    """[H, W, C] → [(H/p)·(W/p), p·p·C], patches in row-major order."""
    h, w, c = img.shape
    if h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide image {h}x{w}")
    grid = img.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return grid.reshape((h // p) * (w // p), p * p * c)


def unpatchify(patches: np.ndarray, p: int, height: int, width: int, channels: int) -> np.ndarray:
    gh, gw = height // p, width // p
    grid = patches.reshape(gh, gw, p, p, channels).transpose(0, 2, 1, 3, 4)
    return grid.reshape(height, width, channels)


def validate_image(img: np.ndarray, shape: Tuple[int, int, int]) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape != tuple(shape):
        raise InputValidationError(f"image shape {img.shape} does not match configured {tuple(shape)}")
    if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
        raise InputValidationError("image pixels must lie in [0, 1]")
    return img


def _orthonormal_rows(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(max(d_in, d_out), min(d_in, d_out))))
    return q.T if d_out <= d_in else q


class ImageEncoder(Module):
    """
    E_I: per scale, flatten each patch, project to d_enc, add a learned positional embedding.
    """

    def __init__(self, height: int, width: int, channels: int, patch_sizes: Sequence[int], d_enc: int,
                 rng: np.random.Generator, frozen: bool = False):
        super().__init__()
        self.shape = (height, width, channels)
        self.patch_sizes = list(patch_sizes)
        self.d_enc = d_enc
        fine = min(self.patch_sizes)
        projections, positions = [], []
        for p in self.patch_sizes:
            proj = Linear(p * p * channels, d_enc, rng)
            if p == fine:
                proj.weight.values[...] = _orthonormal_rows(rng, d_enc, p * p * channels)
            projections.append(proj)
            n = (height // p) * (width // p)
            positions.append(parameter(rng.normal(0.0, 0.02, size=(n, d_enc))))
        self.projections = ModuleList(projections)
        for i, pos in enumerate(positions):
            setattr(self, f"pos_{i}", pos)
        self.positions: List[Tensor] = positions
        if frozen:
            self.freeze()

    def __call__(self, img: np.ndarray) -> ImageTokens:
        return encode_image(img, self)


def encode_image(img: np.ndarray, encoder: ImageEncoder) -> ImageTokens:
    """
    Raises:
        InputValidationError: wrong shape or pixels outside [0, 1]
    """
    img = validate_image(img, encoder.shape)
    h, w, c = encoder.shape
    scales = []
    for p, proj, pos in zip(encoder.patch_sizes, encoder.projections, encoder.positions):
        scales.append(add(proj(constant(patchify(img, p))), pos))
    return ImageTokens(scales=scales, patch_sizes=list(encoder.patch_sizes), height=h, width=w, channels=c)


class ImageDecoder:
    """Map fine-scale latent tokens back to pixels through the transpose of the fine projection."""

    def __init__(self, encoder: ImageEncoder):
        self.encoder = encoder
        self.index = int(np.argmin(encoder.patch_sizes))

    def decode(self, latent: np.ndarray) -> np.ndarray:
        proj = self.encoder.projections[self.index]
        pos = self.encoder.positions[self.index]
        centred = np.asarray(latent) - proj.bias.values - pos.values
        patches = centred @ proj.weight.values
        h, w, c = self.encoder.shape
        return np.clip(unpatchify(patches, self.encoder.patch_sizes[self.index], h, w, c), 0.0, 1.0)


class TextEncoder(Module):
    """E_T: token embedding plus learned positional embedding over a framed, padded id sequence."""

    def __init__(self, vocab_size: int, d_enc: int, max_len: int, rng: np.random.Generator, frozen: bool = False):
        super().__init__()
        self.max_len = max_len
        self.d_enc = d_enc
        self.embedding = parameter(rng.normal(0.0, 0.02, size=(vocab_size, d_enc)))
        self.position = parameter(rng.normal(0.0, 0.02, size=(max_len, d_enc)))
        if frozen:
            self.freeze()

    def __call__(self, instruction: str, vocab: Vocabulary) -> Tuple[Tensor, TokenizedText]:
        return encode_text(instruction, vocab, self.max_len, self)


def tokenize_instruction(instruction: str, vocab: Vocabulary, max_len: int) -> TokenizedText:
    ids = vocab.frame(instruction, max_len)
    length = sum(1 for i in ids if i != vocab.pad_id)
    return TokenizedText(ids=ids, length=length)


def encode_text(instruction: str, vocab: Vocabulary, max_len: int,
                encoder: TextEncoder) -> Tuple[Tensor, TokenizedText]:
    """
    Returns:
        ([max_len, d_enc] embeddings, TokenizedText with the framed ids and non-pad length)

    Raises:
        InputValidationError: empty instruction
    """
    if max_len != encoder.max_len:
        raise ShapeError(f"encoder was built for max_len={encoder.max_len}, got {max_len}")
    tokens = tokenize_instruction(instruction, vocab, max_len)
    return add(take_rows(encoder.embedding, tokens.ids), encoder.position), tokens


class ImageAdapter(Module):
    """IA: one shared per-token linear map d_enc → d_llm."""

    def __init__(self, d_enc: int, d_llm: int, rng: np.random.Generator):
        super().__init__()
        self.linear = Linear(d_enc, d_llm, rng)

    def __call__(self, tokens: ImageTokens) -> Tensor:
        return image_adapter(tokens, self)


def image_adapter(tokens: ImageTokens, adapter: ImageAdapter) -> Tensor:
    """Scales concatenated coarse-to-fine, then mapped to d_llm: [Σn_s, d_llm]."""
    return adapter.linear(concat(tokens.coarse_to_fine(), axis=0))
