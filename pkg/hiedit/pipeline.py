"""
End-to-end editing pipeline: encoders, reasoning cues, guidance LM, QFormer,
cross-modal enhancer and latent diffusion editor wired together.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from .cme import CrossModalEnhancer
from .config import PipelineConfig, check_dimensions
from .diffusion import LatentEditor, NoiseSchedule, diffusion_loss, sample_edit, total_loss
from .edit_models import GuidanceBundle, ImageTokens, ReasoningCues, SequenceLayout
from .encoders import ImageAdapter, ImageDecoder, ImageEncoder, TextEncoder, encode_image, encode_text, validate_image
from .errors import ConfigError, DataIOError
from .frce import CueExtractor, extract_object_tokens
from .guidance_lm import GuidanceLM, QFormer, assemble_sequence, extract_guidance, lm_forward, mllm_loss
from .layers import Linear, LoraSettings, Module
from .model import TrainState
from .object_extractor import build_object_extractor
from .preprocess_cache import PreprocessCache
from .seeding import RngStreams
from .segmenter import build_segmenter
from .tensor import Tensor, concat, slice_axis
from .tensor_io import load_archive, save_archive
from .vocabulary import Vocabulary

logger = logging.getLogger(__name__)

COMPONENTS = ("image_encoder", "text_encoder", "image_adapter", "text_adapter", "cues", "lm", "qformer", "cme",
              "editor")


@dataclass
class GuidanceResult:
    tokens: ImageTokens
    cues: ReasoningCues
    layout: SequenceLayout
    bundle: GuidanceBundle
    l_mllm: Tensor


@dataclass
class SampleLosses:
    l_mllm: Tensor
    l_dm: Tensor
    total: Tensor
    bundle: GuidanceBundle


def parameter_group(name: str) -> str:
    """Optimizer group of a pipeline parameter path."""
    if name.startswith("lm."):
        return "lora" if ".adapter." in name or name == "lm.img_embed" else "lm"
    if name.startswith(("image_adapter.", "text_adapter.")):
        return "adapters"
    if name.startswith("cues.local."):
        return "frce.patch"
    if name.startswith("cues.region."):
        return "frce.region"
    if name.startswith("cues.id_controller."):
        return "frce.id"
    if name.startswith("editor.denoiser."):
        return "denoiser"
    if name.startswith("editor.injector_"):
        return "injection"
    if name.startswith(("image_encoder.", "text_encoder.")):
        return "encoders"
    return name.split(".", 1)[0]


class EditingPipeline:
    """
    Every trainable component plus the deterministic preprocessing around them.

    Parameters are initialised from the ``init`` streams of the master seed, one
    stream per component, so two pipelines built from the same config and vocabulary
    are identical.
    """

    def __init__(self, config: PipelineConfig, vocab: Vocabulary):
        if vocab.r != config.lm.r:
            raise ConfigError(f"vocabulary has r={vocab.r} IMG tokens, config lm.r={config.lm.r}")
        self.config = config
        self.vocab = vocab
        self.streams = RngStreams(config.seed)
        init = lambda name: self.streams.generator("init", name)
        c, ab = config, config.ablation

        self.image_encoder = ImageEncoder(c.image.height, c.image.width, c.image.channels, c.image.patch_sizes,
                                          c.encoder.d_enc, init("image_encoder"), frozen=c.encoder.frozen)
        self.text_encoder = TextEncoder(len(vocab), c.encoder.d_enc, c.encoder.max_text_len, init("text_encoder"),
                                        frozen=c.encoder.frozen)
        self.image_adapter = ImageAdapter(c.encoder.d_enc, c.model.d_llm, init("image_adapter"))
        self.text_adapter = Linear(c.encoder.d_enc, c.model.d_llm, init("text_adapter"))
        self.cues = CueExtractor(c.encoder.d_enc, c.model.d_llm, c.model.heads, c.frce.window,
                                 init("frce.local"), init("frce.region"), init("frce.id"), c.model.ln_eps,
                                 use_patch=ab.use_patch_branch, use_region=ab.use_region_branch,
                                 use_id=ab.use_id_controller)
        lora = LoraSettings(rank=c.lora.rank, alpha=c.lora.alpha, init_std=c.lora.init_std)
        self.lm = GuidanceLM(len(vocab), c.lm.r, c.model.d_llm, c.model.heads, c.lm.n_layers, lora, init("lm"),
                             freeze_base=c.lm.freeze_base, tie_head=c.lm.tie_head, ln_eps=c.model.ln_eps)
        self.qformer = QFormer(c.model.d_llm, c.model.d_diff, c.model.heads, c.qformer.n_queries,
                               c.qformer.n_layers, init("qformer"), c.model.ln_eps)
        self.cme = CrossModalEnhancer(c.encoder.d_enc, c.model.d_llm, c.model.d_diff, c.model.heads, c.cme.n_e,
                                      init("cme"), c.model.ln_eps, c.cme.guidance_output,
                                      use_visual=ab.use_visual_enhancer, use_textual=ab.use_textual_enhancer)
        grid_h, grid_w = c.fine_grid
        self.editor = LatentEditor(grid_h * grid_w, c.n_image_tokens, c.encoder.max_text_len, c.encoder.d_enc,
                                   c.model.d_diff, c.model.heads, init("injection"), init("denoiser"),
                                   c.model.ln_eps)
        self._freeze_disabled()

        self.schedule = NoiseSchedule.linear(c.diffusion.t_steps, c.diffusion.beta_start, c.diffusion.beta_end)
        self.segmenter = build_segmenter(c.frce.segmenter, c.frce.tau, c.frce.min_area)
        self.object_extractor = build_object_extractor(c.frce.object_extractor)
        self.cache = PreprocessCache()
        self.decoder = ImageDecoder(self.image_encoder)

    def _freeze_disabled(self) -> None:
        ab = self.config.ablation
        has_visual = ab.use_patch_branch or ab.use_region_branch
        if not ab.use_patch_branch:
            self.cues.local.freeze()
        if not ab.use_region_branch:
            self.cues.region.freeze()
        if not (ab.use_id_controller and has_visual):
            self.cues.id_controller.freeze()
        if not (ab.use_visual_enhancer and has_visual):
            for part in (self.cme.visual, self.cme.vis_ctx_proj, self.cme.vis_cue_proj, self.editor.injector_vis):
                part.freeze()
        if not ab.use_textual_enhancer:
            for part in (self.cme.textual, self.cme.txt_ctx_proj, self.cme.txt_cue_proj, self.editor.injector_txt):
                part.freeze()

    # -- parameters ---------------------------------------------------------

    def modules(self) -> Dict[str, Module]:
        return {name: getattr(self, name) for name in COMPONENTS}

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(f"{name}.{p}", t) for name, module in self.modules().items() for p, t in module.named_parameters()]

    def trainable_parameters(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_parameters() if t.requires_grad]

    def parameter_groups(self) -> Dict[str, List[Tuple[str, Tensor]]]:
        groups: Dict[str, List[Tuple[str, Tensor]]] = {}
        for name, tensor in self.trainable_parameters():
            groups.setdefault(parameter_group(name), []).append((name, tensor))
        return groups

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, module in self.modules().items():
            prefix = f"{name}."
            module.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})

    # -- forward ------------------------------------------------------------

    def preprocess(self, source: np.ndarray, instruction: str):
        return self.cache.get_or_compute(
            source, instruction,
            lambda: (self.segmenter.segment_regions(source),
                     self.object_extractor.extract_object_ids(instruction, self.vocab)),
        )

    def guidance(self, source: np.ndarray, instruction: str) -> GuidanceResult:
        """Everything up to the enhanced features, plus the IMG-token loss."""
        c = self.config
        source = validate_image(source, (c.image.height, c.image.width, c.image.channels))
        tokens = encode_image(source, self.image_encoder)
        pre = self.preprocess(source, instruction)
        objects = extract_object_tokens(pre.object_ids, self.lm.embed)
        cues = self.cues(tokens, pre.segmentation, objects)

        text_emb, tokenized = encode_text(instruction, self.vocab, c.encoder.max_text_len, self.text_encoder)
        text_rows = self.text_adapter(slice_axis(text_emb, 0, tokenized.length, axis=0))
        seq, layout = assemble_sequence(self.image_adapter(tokens), cues.r_visual, cues.r_textual, text_rows,
                                        self.lm.img_embeddings())
        hidden, logits = lm_forward(seq, self.lm)
        l_mllm = mllm_loss(logits, layout, self.vocab)
        v = extract_guidance(hidden, layout, c.lm.r)
        v_hat = self.qformer(v)

        img_feat = concat(tokens.coarse_to_fine(), axis=0)
        enhanced = self.cme(v_hat, img_feat, cues.r_visual, text_emb, cues.r_textual)
        bundle = GuidanceBundle(v=v, v_hat=v_hat, r_bar_vis=enhanced.r_bar_vis, e_bar_vis=enhanced.e_bar_vis,
                                r_bar_txt=enhanced.r_bar_txt, e_bar_txt=enhanced.e_bar_txt)
        return GuidanceResult(tokens=tokens, cues=cues, layout=layout, bundle=bundle, l_mllm=l_mllm)

    def latent(self, img: np.ndarray) -> np.ndarray:
        """Fine-scale encoder tokens as a plain array."""
        return encode_image(img, self.image_encoder).fine.values.copy()

    def sample_losses(self, source: np.ndarray, instruction: str, target: np.ndarray,
                      rng: Optional[np.random.Generator] = None, fixed: Optional[Tuple[int, np.ndarray]] = None,
                      step: int = -1) -> SampleLosses:
        """L_MLLM, L_DM and their sum for one (source, instruction, target) triple."""
        result = self.guidance(source, instruction)
        z0 = self.latent(target)
        l_dm = diffusion_loss(z0, result.tokens.fine, result.bundle, self.schedule, self.editor, rng=rng, fixed=fixed)
        return SampleLosses(l_mllm=result.l_mllm, l_dm=l_dm, total=total_loss(result.l_mllm, l_dm, step),
                            bundle=result.bundle)

    def edit(self, source: np.ndarray, instruction: str, rng: np.random.Generator,
             steps: Optional[int] = None) -> Tuple[np.ndarray, GuidanceBundle]:
        """
        Single-image inference.

        Returns:
            (edited image [H, W, C] in [0, 1], guidance bundle)
        """
        result = self.guidance(source, instruction)
        steps = steps or self.config.diffusion.sample_steps
        z0_hat = sample_edit(result.tokens.fine, result.bundle, self.schedule, self.editor, steps, rng)
        return self.decoder.decode(z0_hat), result.bundle

    # -- checkpoints --------------------------------------------------------

    def _archive_manifest(self, names) -> Dict:
        return {"layers": sorted(names), "hyperparameters": self.config.dimensions()}

    def save_checkpoint(self, directory, step: int, optimizer_state: Optional[Dict[str, np.ndarray]] = None,
                        optimizer_steps: int = 0) -> Path:
        """
        Write base.rba, lora.rba, optimizer.rba, state.json and vocab.json into ``directory``.
        """
        directory = Path(directory)
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataIOError(f"could not create checkpoint directory: {e}", str(directory)) from e
        state = self.state_dict()
        lora = {k: v for k, v in state.items() if parameter_group(k) == "lora"}
        base = {k: v for k, v in state.items() if k not in lora}
        save_archive(directory / "base.rba", base, self._archive_manifest(base))
        save_archive(directory / "lora.rba", lora, self._archive_manifest(lora))
        opt = optimizer_state or {}
        save_archive(directory / "optimizer.rba", opt,
                     {"layers": sorted(opt), "hyperparameters": {"step_count": optimizer_steps}})
        train_state = TrainState(step=step, seed=self.config.seed, variant=self.config.ablation.variant,
                                 vocab_size=len(self.vocab), dimensions=self.config.dimensions())
        try:
            (directory / "state.json").write_text(
                json.dumps(train_state.model_dump(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"could not write training state: {e}", str(directory / "state.json")) from e
        self.vocab.save(directory / "vocab.json")
        logger.info(f"Checkpoint written: {directory}")
        return directory

    @classmethod
    def from_checkpoint(cls, config: PipelineConfig, directory) -> Tuple["EditingPipeline", TrainState]:
        """
        Rebuild a pipeline from a checkpoint directory.

        Raises:
            DataIOError: missing or unreadable checkpoint files
            ConfigError: checkpoint dimensions differ from the configuration
        """
        directory = Path(directory)
        state = read_train_state(directory)
        check_dimensions(config.dimensions(), state.dimensions, "checkpoint")
        vocab = Vocabulary.load(directory / "vocab.json")
        pipeline = cls(config, vocab)
        base, _ = load_archive(directory / "base.rba")
        lora, _ = load_archive(directory / "lora.rba")
        try:
            pipeline.load_state_dict({**base, **lora})
        except (KeyError, ValueError) as e:
            raise DataIOError(f"checkpoint does not match the pipeline: {e}", str(directory)) from e
        logger.info(f"Loaded checkpoint {directory} (step {state.step}, variant {state.variant})")
        return pipeline, state


def read_train_state(directory) -> TrainState:
    path = Path(directory) / "state.json"
    try:
        return TrainState(**json.loads(path.read_text(encoding="utf-8")))
    except OSError as e:
        raise DataIOError(f"could not read checkpoint state: {e}", str(path)) from e
    except (json.JSONDecodeError, ValidationError, TypeError) as e:
        raise DataIOError(f"invalid checkpoint state: {e}", str(path)) from e
