"""
Training loop: batches drawn from counter-keyed streams, L = L_MLLM + L_DM,
AdamW on the trainable parameter set, JSON-lines loss log and periodic
checkpoints that a later run can resume from.
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import PipelineConfig, write_config
from .dataset_builder import Dataset
from .diffusion import draw_noise_pair
from .errors import DataIOError, InputValidationError, NonFiniteLossError
from .model import TrainLogRecord, TrainingSummary
from .optim import AdamW
from .pipeline import EditingPipeline, read_train_state
from .seeding import RngStreams
from .tensor import ComputeTape, add, mul
from .tensor_io import load_archive
from .training_monitor import StepTimer, TrainingMonitor

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.jsonl"


def checkpoint_name(step: int) -> str:
    return f"step-{step:06d}"


def latest_checkpoint(out_dir) -> Optional[Path]:
    """Checkpoint named in ``checkpoints/latest.txt``, if any."""
    marker = Path(out_dir) / "checkpoints" / "latest.txt"
    if not marker.exists():
        return None
    return marker.parent / marker.read_text(encoding="utf-8").strip()


class Trainer:
    """
    Runs training steps over a dataset's train split.

    In overfit mode the first ``overfit`` train samples form the batch of every step
    and each batch slot keeps one fixed (t, ε) draw.
    """

    def __init__(self, config: PipelineConfig, dataset: Dataset, out_dir, pipeline: Optional[EditingPipeline] = None):
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.pipeline = pipeline or EditingPipeline(config, dataset.vocab)
        self.streams = RngStreams(config.seed)
        self.optimizer = AdamW(self.pipeline.trainable_parameters(), lr=config.optim.lr,
                               betas=(config.optim.beta1, config.optim.beta2), eps=config.optim.eps,
                               weight_decay=config.optim.weight_decay)
        self.monitor = TrainingMonitor()
        self.step = 0
        self.train_ids = dataset.split_ids("train")
        if not self.train_ids:
            raise InputValidationError("the dataset has no training samples")
        self.latent_shape = (int(np.prod(config.fine_grid)), config.encoder.d_enc)
        self._fixed_noise: Dict[int, Tuple[int, np.ndarray]] = {}

    # -- batching -----------------------------------------------------------

    def batch_ids(self, step: int) -> List[str]:
        overfit = self.config.train.overfit
        if overfit:
            return self.train_ids[:overfit]
        size = self.config.train.batch_size
        rng = self.streams.generator("train-batch", step)
        picks = rng.choice(len(self.train_ids), size=size, replace=size > len(self.train_ids))
        return [self.train_ids[int(i)] for i in picks]

    def noise_for(self, step: int, slot: int) -> Tuple[int, np.ndarray]:
        sched = self.pipeline.schedule
        if self.config.train.overfit:
            if slot not in self._fixed_noise:
                self._fixed_noise[slot] = draw_noise_pair(self.streams.generator("train-noise", 0, slot),
                                                          self.latent_shape, sched)
            return self._fixed_noise[slot]
        return draw_noise_pair(self.streams.generator("train-noise", step, slot), self.latent_shape, sched)

    # -- steps --------------------------------------------------------------

    def train_step(self, step: int) -> TrainLogRecord:
        """
        One optimizer step on the mean per-sample loss.

        Raises:
            NonFiniteLossError: a sample loss is NaN or infinite; parameters are left untouched
        """
        timer = StepTimer().start_step()
        ids = self.batch_ids(step)
        self.optimizer.zero_grad()
        l_mllm, l_dm = [], []
        with timer.time_phase("forward"):
            with ComputeTape() as tape:
                total = None
                for slot, sample_id in enumerate(ids):
                    sample = self.dataset.samples[sample_id]
                    losses = self.pipeline.sample_losses(sample.source, sample.instruction, sample.target,
                                                         fixed=self.noise_for(step, slot), step=step)
                    l_mllm.append(losses.l_mllm.item())
                    l_dm.append(losses.l_dm.item())
                    total = losses.total if total is None else add(total, losses.total)
                loss = mul(total, 1.0 / len(ids))
        with timer.time_phase("backward"):
            tape.backward(loss)
        with timer.time_phase("optimizer"):
            self.optimizer.step()
        self.step = step
        record = TrainLogRecord(
            step=step,
            l_mllm=math.fsum(l_mllm) / len(ids),
            l_dm=math.fsum(l_dm) / len(ids),
            l_total=loss.item(),
            wall_ms=round(timer.get_total_duration(), 3) if self.config.train.record_wall_time else None,
        )
        self.monitor.record_step(record.l_total, timer)
        return record

    def group_grad_norms(self) -> Dict[str, float]:
        """Gradient norm per parameter group after the latest backward pass."""
        return {
            group: math.sqrt(sum(float((t.grad ** 2).sum()) for _, t in params))
            for group, params in sorted(self.pipeline.parameter_groups().items())
        }

    # -- persistence --------------------------------------------------------

    def save_checkpoint(self) -> Path:
        directory = self.out_dir / "checkpoints" / checkpoint_name(self.step)
        self.pipeline.save_checkpoint(directory, self.step, self.optimizer.state_dict(), self.optimizer.step_count)
        marker = directory.parent / "latest.txt"
        try:
            marker.write_text(directory.name + "\n", encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"could not update latest checkpoint marker: {e}", str(marker)) from e
        return directory

    def resume(self, directory) -> None:
        """Restore parameters, optimizer moments and the step counter from a checkpoint."""
        pipeline, state = EditingPipeline.from_checkpoint(self.config, directory)
        self.pipeline.load_state_dict(pipeline.state_dict())
        tensors, manifest = load_archive(Path(directory) / "optimizer.rba")
        try:
            self.optimizer.load_state_dict(tensors, int(manifest["hyperparameters"]["step_count"]))
        except (KeyError, ValueError, TypeError) as e:
            raise DataIOError(f"optimizer state does not match the pipeline: {e}", str(directory)) from e
        self.step = state.step
        self._truncate_log(state.step)
        logger.info(f"Resumed from {directory} at step {state.step}")

    def _truncate_log(self, step: int) -> None:
        path = self.out_dir / LOG_NAME
        if not path.exists():
            return
        kept = [line for line in path.read_text(encoding="utf-8").splitlines()
                if line.strip() and json.loads(line)["step"] <= step]
        path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")

    def _append_log(self, record: TrainLogRecord) -> None:
        path = self.out_dir / LOG_NAME
        try:
            with path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record.model_dump(), sort_keys=True) + "\n")
        except OSError as e:
            raise DataIOError(f"could not append to training log: {e}", str(path)) from e

    # -- loop ---------------------------------------------------------------

    def run(self, steps: Optional[int] = None) -> TrainingSummary:
        """
        Train until ``steps`` (default ``train.steps``), checkpointing every
        ``train.checkpoint_every`` steps and at the end.

        Raises:
            NonFiniteLossError: training aborted; the last written checkpoint is kept
        """
        steps = self.config.train.steps if steps is None else steps
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataIOError(f"could not create output directory: {e}", str(self.out_dir)) from e
        write_config(self.config, self.out_dir)
        if self.step == 0:
            (self.out_dir / LOG_NAME).write_text("", encoding="utf-8")
        logger.info(f"Training {self.config.ablation.variant} from step {self.step} to {steps} "
                    f"on {len(self.train_ids)} samples ({len(self.optimizer.params)} trainable tensors)")
        for step in range(self.step + 1, steps + 1):
            try:
                record = self.train_step(step)
            except NonFiniteLossError as e:
                logger.error(f"{e}; last good checkpoint: {latest_checkpoint(self.out_dir)}")
                raise
            self._append_log(record)
            if step % self.config.train.log_every == 0:
                logger.info(f"step {step}: l_mllm={record.l_mllm:.4f} l_dm={record.l_dm:.4f} "
                            f"l_total={record.l_total:.4f}")
            if step % self.config.train.checkpoint_every == 0 or step == steps:
                self.save_checkpoint()
        self.monitor.log_summary()
        logger.info(self.pipeline.cache.statistics.describe())
        return self.monitor.summary()


def resume_directory(argument: str, out_dir) -> Path:
    """``--resume latest`` picks the newest checkpoint of ``out_dir``."""
    if argument == "latest":
        found = latest_checkpoint(out_dir)
        if found is None:
            raise DataIOError("no checkpoint to resume from", str(Path(out_dir) / "checkpoints"))
        return found
    read_train_state(argument)
    return Path(argument)
