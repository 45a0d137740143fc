from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class Record(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- dataset files ---
class SampleRecord(Record):
    """One line of samples.jsonl."""
    sample_id: str
    category: str
    instruction: str
    initial_instruction: str
    object_name: str
    state_word: str
    seed: int
    scene: int
    rank: int
    rule_score: float
    combined: float
    split: str


class CategoryCounts(Record):
    train: int
    val: int


class DatasetManifest(Record):
    format: str = "hiedit-dataset/1"
    seed: int
    count: int
    image_shape: List[int]
    category_mix: Dict[str, float]
    candidates_m: int
    select_n: int
    weights: Dict[str, float]
    perceptual_metric: str
    counts: Dict[str, CategoryCounts]
    train_ids: List[str]
    val_ids: List[str]


# --- training ---
class TrainLogRecord(Record):
    """One line of train_log.jsonl."""
    step: int
    l_mllm: float
    l_dm: float
    l_total: float
    wall_ms: Optional[float]


class TrainState(Record):
    step: int
    seed: int
    variant: str
    vocab_size: int
    dimensions: Dict[str, Any]


class TrainingSummary(Record):
    steps: int
    first_loss: Optional[float]
    last_loss: Optional[float]
    best_moving_average: Optional[float]
    non_finite: int
    phase_ms: Dict[str, float]
    memory_mb: Optional[float] = None


# --- evaluation ---
class MetricRow(Record):
    sample_id: str
    category: str
    sim_dir: float
    sim_im: float
    sim_out: float
    l1: float
    sim_dino: float
    clip_score: Optional[float] = None
    mllm_score: Optional[float] = None
    ins_align: Optional[float] = None


class MetricMeans(Record):
    count: int
    sim_dir: Optional[float]
    sim_im: Optional[float]
    sim_out: Optional[float]
    l1: Optional[float]
    sim_dino: Optional[float]
    clip_score: Optional[float] = None
    mllm_score: Optional[float] = None
    ins_align: Optional[float] = None


class MetricReport(Record):
    """Per-sample rows, overall means, per-category means and omitted samples."""
    split: str
    variant: str
    rows: List[MetricRow]
    overall: MetricMeans
    categories: Dict[str, MetricMeans]
    omissions: List[str] = Field(default_factory=list)
    degenerate_directions: int = 0
    normalised_embeddings: int = 0


# --- selftest ---
class SelftestCase(Record):
    name: str
    kind: str
    max_rel_error: float
    passed: bool


class SelftestReport(Record):
    seeds: int
    tolerance: float
    cases: List[SelftestCase]
    invariants: Dict[str, bool]
    passed: bool
    seconds: float
