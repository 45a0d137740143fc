"""
Core data types and enums for the editing pipeline and the synthetic data forge.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from .tensor import Tensor


class Category(Enum):
    """Reasoning category of a hypothetical instruction."""
    PHYSICAL = "Physical"
    TEMPORAL = "Temporal"
    CAUSAL = "Causal"
    STORY = "Story"


@dataclass
class ImageTokens:
    """Multi-scale encoder output: one [n_s, d_enc] token matrix per patch size."""
    scales: List[Tensor]
    patch_sizes: List[int]
    height: int
    width: int
    channels: int

    def __post_init__(self):
        """Validate token counts against the patch grid of every scale."""
        if len(self.scales) != len(self.patch_sizes):
            raise ValueError("one token matrix per patch size is required")
        for tokens, p in zip(self.scales, self.patch_sizes):
            if self.height % p or self.width % p:
                raise ValueError(f"patch size {p} does not divide {self.height}x{self.width}")
            expected = (self.height // p) * (self.width // p)
            if tokens.ndim != 2 or tokens.shape[0] != expected:
                raise ValueError(f"scale with patch {p} needs {expected} tokens, got shape {tokens.shape}")

    @property
    def fine_index(self) -> int:
        return int(np.argmin(self.patch_sizes))

    @property
    def fine(self) -> Tensor:
        """Finest-scale tokens; these double as the diffusion latent."""
        return self.scales[self.fine_index]

    @property
    def fine_patch(self) -> int:
        return self.patch_sizes[self.fine_index]

    @property
    def fine_grid(self) -> Tuple[int, int]:
        return self.height // self.fine_patch, self.width // self.fine_patch

    def coarse_to_fine(self) -> List[Tensor]:
        order = sorted(range(len(self.patch_sizes)), key=lambda i: -self.patch_sizes[i])
        return [self.scales[i] for i in order]


@dataclass
class TokenizedText:
    """Framed token ids ([BOS] tokens [EOS] [PAD]...) and the count of non-pad positions."""
    ids: List[int]
    length: int

    def __post_init__(self):
        if not 2 <= self.length <= len(self.ids):
            raise ValueError("length must count at least the BOS/EOS frame and fit in ids")


@dataclass
class SegmentationMap:
    """Per-pixel region labels; label 0 is the background."""
    labels: np.ndarray
    n_regions: int

    def __post_init__(self):
        """Validate that labels partition the pixels into [0, n_regions)."""
        if self.labels.ndim != 2:
            raise ValueError("labels must be a 2-D [H, W] array")
        if self.n_regions < 1:
            raise ValueError("a segmentation always has the background region")
        if self.labels.min() < 0 or self.labels.max() >= self.n_regions:
            raise ValueError(f"labels must lie in [0, {self.n_regions})")

    def area(self, region: int) -> int:
        return int((self.labels == region).sum())


@dataclass
class ReasoningCues:
    """
    Visual and textual reasoning cues.

    r_local / r_global are None when their branch is disabled; r_visual is None
    when both are.
    """
    objects: Tensor
    r_textual: Tensor
    r_local: Optional[Tensor] = None
    r_global: Optional[Tensor] = None
    r_visual: Optional[Tensor] = None

    def __post_init__(self):
        if self.r_textual.shape[0] != self.objects.shape[0]:
            raise ValueError("R_T must have one row per object token")
        if self.r_visual is not None and self.r_local is not None and self.r_global is not None:
            if self.r_visual.shape[0] != self.r_local.shape[0] + self.r_global.shape[0]:
                raise ValueError("R_V must be the row concatenation of R_local and R_global")


@dataclass
class SequenceLayout:
    """Segment names and cumulative end offsets of an assembled LM input sequence."""
    names: List[str]
    ends: List[int]

    def __post_init__(self):
        if len(self.names) != len(self.ends):
            raise ValueError("one end offset per segment")
        if any(b < a for a, b in zip([0] + self.ends[:-1], self.ends)):
            raise ValueError("segment ends must be non-decreasing")

    @property
    def total(self) -> int:
        return self.ends[-1] if self.ends else 0

    def span(self, name: str) -> Tuple[int, int]:
        i = self.names.index(name)
        return (self.ends[i - 1] if i else 0), self.ends[i]


@dataclass
class GuidanceBundle:
    """LM guidance V, its aligned form V̂, and the four enhanced features (None when an enhancer is off)."""
    v: Tensor
    v_hat: Tensor
    r_bar_vis: Optional[Tensor] = None
    e_bar_vis: Optional[Tensor] = None
    r_bar_txt: Optional[Tensor] = None
    e_bar_txt: Optional[Tensor] = None

    def enhanced(self) -> Dict[str, Tensor]:
        named = {
            "R_bar_vis": self.r_bar_vis, "e_bar_vis": self.e_bar_vis,
            "R_bar_txt": self.r_bar_txt, "e_bar_txt": self.e_bar_txt,
        }
        return {k: v for k, v in named.items() if v is not None}


@dataclass
class SceneObject:
    """One procedural primitive: shape, centre (row, col), half extents (rows, cols) and RGB colour."""
    name: str
    shape: str
    center: Tuple[float, float]
    half_extents: Tuple[float, float]
    color: Tuple[float, float, float]

    def __post_init__(self):
        if self.shape not in ("square", "disk", "diamond", "notched"):
            raise ValueError(f"unknown primitive shape: {self.shape}")
        if min(self.half_extents) <= 0:
            raise ValueError("half extents must be positive")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError("colour channels must lie in [0, 1]")


@dataclass
class SceneMetadata:
    """How a target scene was rendered and how to undo its transform."""
    category: Category
    seed: int
    transform: str
    object_name: str
    state_word: str
    initial_instruction: str
    background: Tuple[float, float, float]
    initial_objects: List[SceneObject]
    target_objects: List[SceneObject]
    initial_area: int = 0

    def __post_init__(self):
        if not self.initial_objects:
            raise ValueError("a scene has at least one object")

    @property
    def referenced(self) -> SceneObject:
        return self.initial_objects[0]


@dataclass
class CandidateScore:
    """Data class representing the scoring of a source-image candidate."""
    candidate_id: int
    rule_score: float       # 0.0-1.0
    psnr: float             # dB, capped
    perceptual: float       # 0.0-1.0, normalised psnr or ssim
    combined: float         # weighted combination

    def __post_init__(self):
        """Validate all normalised scores are within range."""
        for score in (self.rule_score, self.perceptual, self.combined):
            if not 0.0 <= score <= 1.0 + 1e-12:
                raise ValueError("normalised scores must be between 0.0 and 1.0")


@dataclass
class EditSample:
    """One dataset row: source image, hypothetical instruction, target image and category."""
    sample_id: str
    category: Category
    instruction: str
    source: np.ndarray
    target: np.ndarray
    seed: int
    object_name: str = ""
    state_word: str = ""
    extras: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("instruction must be nonempty")
        if not isinstance(self.category, Category):
            raise ValueError(f"invalid category: {self.category!r}")
        if self.source.shape != self.target.shape or self.source.ndim != 3:
            raise ValueError(f"source {self.source.shape} and target {self.target.shape} must share [H, W, C]")
        for name, img in (("source", self.source), ("target", self.target)):
            if img.min() < 0.0 or img.max() > 1.0:
                raise ValueError(f"{name} pixels must lie in [0, 1]")

    @property
    def source_caption(self) -> str:
        return f"a photo of a {self.object_name}"

    @property
    def target_caption(self) -> str:
        return f"a photo of a {self.state_word} {self.object_name}"
