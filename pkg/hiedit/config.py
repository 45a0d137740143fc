"""
Layered pipeline configuration: defaults, RB_ environment, config file and overrides.
"""
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError, DataIOError

load_dotenv()

logger = logging.getLogger(__name__)

CATEGORY_NAMES = ("Physical", "Temporal", "Causal", "Story")


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ImageSettings(Section):
    height: int = Field(32, gt=0)
    width: int = Field(32, gt=0)
    channels: int = Field(3, gt=0)
    patch_sizes: List[int] = Field(default_factory=lambda: [4, 8])

    @field_validator("patch_sizes")
    @classmethod
    def _distinct_positive(cls, v: List[int]) -> List[int]:
        if not v or any(p <= 0 for p in v) or len(set(v)) != len(v):
            raise ValueError("patch_sizes must be distinct positive integers")
        return v


class EncoderSettings(Section):
    d_enc: int = Field(32, gt=0)
    max_text_len: int = Field(16, ge=3)
    frozen: bool = False


class ModelSettings(Section):
    d_llm: int = Field(64, gt=0)
    d_diff: int = Field(32, gt=0)
    heads: int = Field(4, gt=0)
    ln_eps: float = Field(1e-5, gt=0)


class FrceSettings(Section):
    window: int = Field(2, gt=0)
    segmenter: Literal["luminance-cc"] = "luminance-cc"
    object_extractor: Literal["stoplist"] = "stoplist"
    tau: float = Field(0.1, gt=0)
    min_area: int = Field(4, ge=1)


class LmSettings(Section):
    n_layers: int = Field(2, gt=0)
    r: int = Field(32, gt=0)
    freeze_base: bool = True
    tie_head: bool = False


class LoraConfig(Section):
    rank: int = Field(8, gt=0)
    alpha: float = Field(16.0, gt=0)
    init_std: float = Field(0.02, gt=0)


class QFormerSettings(Section):
    n_queries: int = Field(77, gt=0)
    n_layers: int = Field(6, gt=0)


class CmeSettings(Section):
    n_e: int = Field(16, gt=0)
    guidance_output: Literal["v_bar", "f1"] = "v_bar"


class DiffusionSettings(Section):
    t_steps: int = Field(100, gt=0)
    beta_start: float = Field(1e-4, gt=0)
    beta_end: float = Field(0.02, gt=0)
    sample_steps: int = Field(10, gt=0)

    @model_validator(mode="after")
    def _check_schedule(self):
        if not self.beta_start < self.beta_end < 1.0:
            raise ValueError("need beta_start < beta_end < 1")
        if self.sample_steps > self.t_steps:
            raise ValueError("sample_steps cannot exceed t_steps")
        return self


class OptimSettings(Section):
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(1e-2, ge=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainSettings(Section):
    batch_size: int = Field(16, gt=0)
    steps: int = Field(2000, ge=0)
    overfit: int = Field(0, ge=0)
    checkpoint_every: int = Field(100, gt=0)
    log_every: int = Field(10, gt=0)
    record_wall_time: bool = True


class DataSettings(Section):
    count: int = Field(400, ge=1)
    category_mix: Dict[str, float] = Field(default_factory=lambda: {name: 1.0 for name in CATEGORY_NAMES})
    candidates_m: int = Field(8, ge=1)
    select_n: int = Field(1, ge=1)
    rule_weight: float = Field(0.5, ge=0)
    perceptual_weight: float = Field(0.5, ge=0)
    perceptual_metric: Literal["psnr", "ssim"] = "psnr"
    psnr_cap_db: float = Field(60.0, gt=0)
    val_fraction: float = Field(0.1, ge=0, le=1)
    val_cap: int = Field(400, ge=0)

    @field_validator("category_mix")
    @classmethod
    def _check_mix(cls, v: Dict[str, float]) -> Dict[str, float]:
        if set(v) != set(CATEGORY_NAMES):
            raise ValueError(f"category_mix must name exactly {list(CATEGORY_NAMES)}, got {sorted(v)}")
        if any(w < 0 for w in v.values()):
            raise ValueError("category_mix weights must be non-negative")
        if sum(v.values()) <= 0:
            raise ValueError("category_mix weights must have a positive total")
        return {name: float(v[name]) for name in CATEGORY_NAMES}

    @model_validator(mode="after")
    def _check_selection(self):
        if abs(self.rule_weight + self.perceptual_weight - 1.0) > 1e-9:
            raise ValueError("rule_weight + perceptual_weight must equal 1")
        if self.select_n > self.candidates_m:
            raise ValueError("select_n cannot exceed candidates_m")
        return self


class EvalSettings(Section):
    split: Literal["train", "val"] = "val"
    force_targets: bool = False


class AblationSettings(Section):
    use_patch_branch: bool = True
    use_region_branch: bool = True
    use_id_controller: bool = True
    use_visual_enhancer: bool = True
    use_textual_enhancer: bool = True

    @property
    def variant(self) -> str:
        parts = [
            label for label, on in (
                ("patch", self.use_patch_branch),
                ("region", self.use_region_branch),
                ("id", self.use_id_controller),
                ("vision", self.use_visual_enhancer),
                ("text", self.use_textual_enhancer),
            ) if on
        ]
        return "+".join(parts) if parts else "base"


class PipelineConfig(BaseSettings):
    """
    Every knob of the editing pipeline.

    Values come from (highest first) command-line flags, ``--set`` overrides,
    a flat dotted-key JSON file, ``RB_``-prefixed environment variables
    (``RB_MODEL__HEADS=2``, ``RB_THREADS=8``) and the defaults below.
    """

    model_config = SettingsConfigDict(env_prefix="RB_", env_nested_delimiter="__", extra="forbid")

    seed: int = Field(7, ge=0)
    threads: int = Field(4, ge=1)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"] = "INFO"

    image: ImageSettings = Field(default_factory=ImageSettings)
    encoder: EncoderSettings = Field(default_factory=EncoderSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    frce: FrceSettings = Field(default_factory=FrceSettings)
    lm: LmSettings = Field(default_factory=LmSettings)
    lora: LoraConfig = Field(default_factory=LoraConfig)
    qformer: QFormerSettings = Field(default_factory=QFormerSettings)
    cme: CmeSettings = Field(default_factory=CmeSettings)
    diffusion: DiffusionSettings = Field(default_factory=DiffusionSettings)
    optim: OptimSettings = Field(default_factory=OptimSettings)
    train: TrainSettings = Field(default_factory=TrainSettings)
    data: DataSettings = Field(default_factory=DataSettings)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    ablation: AblationSettings = Field(default_factory=AblationSettings)

    @model_validator(mode="after")
    def _check_dimensions(self):
        heads = self.model.heads
        for name, d in (("model.d_llm", self.model.d_llm), ("model.d_diff", self.model.d_diff)):
            if d % heads:
                raise ValueError(f"{name}={d} is not divisible by model.heads={heads}")
        for p in self.image.patch_sizes:
            if self.image.height % p or self.image.width % p:
                raise ValueError(f"patch size {p} does not divide image {self.image.height}x{self.image.width}")
        grid_h, grid_w = self.fine_grid
        if grid_h % self.frce.window or grid_w % self.frce.window:
            raise ValueError(f"frce.window={self.frce.window} does not divide the {grid_h}x{grid_w} token grid")
        return self

    @property
    def fine_patch(self) -> int:
        return min(self.image.patch_sizes)

    @property
    def fine_grid(self):
        p = self.fine_patch
        return self.image.height // p, self.image.width // p

    @property
    def n_image_tokens(self) -> int:
        return sum((self.image.height // p) * (self.image.width // p) for p in self.image.patch_sizes)

    def dimensions(self) -> Dict[str, Any]:
        """Settings that fix tensor shapes; a checkpoint only loads under identical values."""
        flat = flatten_config(self)
        prefixes = ("image.", "encoder.d_enc", "encoder.max_text_len", "model.", "lm.", "lora.",
                    "qformer.", "cme.n_e", "diffusion.t_steps")
        return {k: v for k, v in flat.items() if k.startswith(prefixes)}


def flatten_config(config: PipelineConfig) -> Dict[str, Any]:
    """Dotted-key view of a config, sorted by key."""
    flat: Dict[str, Any] = {}
    for key, value in config.model_dump().items():
        if isinstance(value, dict) and key in PipelineConfig.model_fields and \
                isinstance(getattr(config, key), BaseModel):
            for sub_key, sub_value in value.items():
                flat[f"{key}.{sub_key}"] = sub_value
        else:
            flat[key] = value
    return dict(sorted(flat.items()))


def unflatten(flat: Mapping[str, Any]) -> Dict[str, Any]:
    """
    Turn ``{"cme.n_e": 16}`` into ``{"cme": {"n_e": 16}}``.

    Raises:
        ConfigError: on unknown sections or keys
    """
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        section, _, field = key.partition(".")
        if section not in PipelineConfig.model_fields:
            raise ConfigError(f"unknown config key: {key}")
        annotation = PipelineConfig.model_fields[section].annotation
        if field:
            if not (isinstance(annotation, type) and issubclass(annotation, BaseModel)):
                raise ConfigError(f"unknown config key: {key}")
            if field not in annotation.model_fields:
                raise ConfigError(f"unknown config key: {key}")
            nested.setdefault(section, {})[field] = value
        else:
            if isinstance(annotation, type) and issubclass(annotation, BaseModel):
                raise ConfigError(f"config key {key} names a section; use dotted keys")
            nested[section] = value
    return nested


def parse_override(text: str) -> Dict[str, Any]:
    """Parse one ``KEY=VALUE`` override; VALUE is JSON when it parses, else a string."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like KEY=VALUE, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return {key.strip(): value}


def parse_category_mix(text: str) -> Dict[str, float]:
    """Parse ``"Physical=1,Temporal=2,Causal=1,Story=0"``."""
    mix: Dict[str, float] = {}
    for part in text.split(","):
        name, sep, weight = part.partition("=")
        if not sep:
            raise ConfigError(f"category mix entry must look like NAME=WEIGHT, got {part!r}")
        try:
            mix[name.strip()] = float(weight)
        except ValueError as e:
            raise ConfigError(f"category weight for {name.strip()!r} is not a number: {weight!r}") from e
    return mix


def read_config_file(path) -> Dict[str, Any]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise DataIOError(f"could not read config file: {e}", str(path)) from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object of dotted keys")
    return raw


def _deep_merge(base: Dict[str, Any], extra: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[str] = None, overrides: Optional[List[str]] = None,
                cli_values: Optional[Mapping[str, Any]] = None) -> PipelineConfig:
    """
    Build the effective configuration.

    Args:
        path: optional flat dotted-key JSON file
        overrides: ``KEY=VALUE`` strings from ``--set``
        cli_values: dotted keys set by dedicated command-line flags

    Raises:
        ConfigError: unknown keys or values failing validation
    """
    layers: Dict[str, Any] = {}
    if path:
        layers = _deep_merge(layers, unflatten(read_config_file(path)))
    for text in overrides or []:
        layers = _deep_merge(layers, unflatten(parse_override(text)))
    if cli_values:
        layers = _deep_merge(layers, unflatten({k: v for k, v in cli_values.items() if v is not None}))
    return build_config(layers)


def build_config(nested: Mapping[str, Any]) -> PipelineConfig:
    try:
        return PipelineConfig(**nested)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def config_from_flat(flat: Mapping[str, Any]) -> PipelineConfig:
    """Rebuild a config echoed by ``write_config``."""
    return build_config(unflatten(flat))


def write_config(config: PipelineConfig, out_dir) -> Path:
    """Echo the effective config as sorted dotted keys into ``out_dir/config.json``."""
    path = Path(out_dir) / "config.json"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(flatten_config(config), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"could not write config echo: {e}", str(path)) from e
    return path


def check_dimensions(expected: Mapping[str, Any], found: Mapping[str, Any], what: str) -> None:
    """
    Raises:
        ConfigError: naming both dimension sets when any shape-fixing setting differs
    """
    differing = sorted(k for k in set(expected) | set(found) if expected.get(k) != found.get(k))
    if differing:
        ours = {k: expected.get(k) for k in differing}
        theirs = {k: found.get(k) for k in differing}
        raise ConfigError(f"{what} dimensions do not match the configuration: config {ours} vs {what} {theirs}")
