"""
Timing and loss tracking for training runs.
"""
import logging
import math
import time
from collections import deque
from contextlib import contextmanager
from typing import Dict, Optional

# Optional psutil import
try:
    import psutil
    PSUTIL_AVAILABLE = True
except ImportError:
    PSUTIL_AVAILABLE = False

from .model import TrainingSummary

logger = logging.getLogger(__name__)


class StepTimer:
    """Context manager for timing the phases of one training step"""

    def __init__(self):
        self.timings: Dict[str, float] = {}
        self.start_time: Optional[float] = None

    def start_step(self) -> "StepTimer":
        self.start_time = time.perf_counter()
        self.timings = {}
        return self

    @contextmanager
    def time_phase(self, phase_name: str):
        """Time a specific phase (forward, backward, optimizer)"""
        phase_start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[phase_name] = self.timings.get(phase_name, 0.0) + (time.perf_counter() - phase_start) * 1000

    def get_total_duration(self) -> float:
        """Total step duration in milliseconds"""
        if self.start_time is None:
            return 0.0
        return (time.perf_counter() - self.start_time) * 1000

    def get_phase_duration(self, phase_name: str) -> float:
        return self.timings.get(phase_name, 0.0)


class TrainingMonitor:
    """Tracks losses, moving averages and per-phase time over a run"""

    def __init__(self, window: int = 50, history: int = 10000):
        self.window = window
        self.losses = deque(maxlen=history)
        self.recent = deque(maxlen=window)
        self.first_loss: Optional[float] = None
        self.best_moving_average: Optional[float] = None
        self.non_finite = 0
        self.steps = 0
        self.phase_totals: Dict[str, float] = {}

    def record_step(self, loss: float, timer: Optional[StepTimer] = None) -> None:
        self.steps += 1
        if not math.isfinite(loss):
            self.non_finite += 1
            return
        if self.first_loss is None:
            self.first_loss = loss
        self.losses.append(loss)
        self.recent.append(loss)
        if len(self.recent) == self.window:
            avg = self.moving_average()
            if self.best_moving_average is None or avg < self.best_moving_average:
                self.best_moving_average = avg
        if timer is not None:
            for phase, ms in timer.timings.items():
                self.phase_totals[phase] = self.phase_totals.get(phase, 0.0) + ms

    def moving_average(self) -> Optional[float]:
        if not self.recent:
            return None
        return math.fsum(self.recent) / len(self.recent)

    def memory_mb(self) -> Optional[float]:
        if not PSUTIL_AVAILABLE:
            return None
        try:
            return psutil.Process().memory_info().rss / (1024 * 1024)
        except Exception as e:
            logger.debug(f"Could not read process memory: {e}")
            return None

    def summary(self) -> TrainingSummary:
        return TrainingSummary(
            steps=self.steps,
            first_loss=self.first_loss,
            last_loss=self.losses[-1] if self.losses else None,
            best_moving_average=self.best_moving_average,
            non_finite=self.non_finite,
            phase_ms={k: round(v, 3) for k, v in sorted(self.phase_totals.items())},
            memory_mb=self.memory_mb(),
        )

    def log_summary(self) -> None:
        s = self.summary()
        memory = f"{s.memory_mb:.1f}MB" if s.memory_mb is not None else "n/a"
        logger.info(
            f"Training finished: {s.steps} steps | "
            f"loss {s.first_loss} -> {s.last_loss} | "
            f"best {self.window}-step avg {s.best_moving_average} | "
            f"non-finite {s.non_finite} | memory {memory}"
        )
