"""
Caching layer for deterministic per-sample preprocessing.
Segmentation maps and extracted object ids depend only on the source image and
the instruction, so they are computed once per (image, instruction) pair.
"""
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass
from threading import Lock
from typing import Callable, List, Optional, Tuple

import numpy as np

from .edit_models import SegmentationMap

logger = logging.getLogger(__name__)


@dataclass
class PreprocessStatistics:
    """Lookup counters of a PreprocessCache."""
    hits: int = 0
    misses: int = 0
    evictions: int = 0

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    @property
    def hit_ratio(self) -> float:
        """Fraction of lookups served from the cache, 0 before the first lookup."""
        return self.hits / self.lookups if self.lookups else 0.0

    def describe(self) -> str:
        return (f"{self.lookups} preprocessing lookups, {self.hit_ratio:.1%} cached, "
                f"{self.evictions} evicted")


@dataclass
class PreprocessedSample:
    segmentation: SegmentationMap
    object_ids: List[int]


class PreprocessCache:
    """
    LRU cache of PreprocessedSample entries keyed by a digest of image bytes and instruction.

    Thread-safe. Entries never expire: preprocessing is a pure function of the key.
    """

    def __init__(self, max_size: int = 4096):
        """
        Args:
            max_size: Maximum number of entries before least-recently-used eviction
        """
        if max_size < 1:
            raise ValueError("max_size must be positive")
        self.max_size = max_size
        self._cache: "OrderedDict[str, PreprocessedSample]" = OrderedDict()
        self._lock = Lock()
        self.statistics = PreprocessStatistics()

    @staticmethod
    def _generate_cache_key(image: np.ndarray, instruction: str) -> str:
        digest = hashlib.sha256(np.ascontiguousarray(image, dtype=np.float64).tobytes())
        digest.update(repr(image.shape).encode())
        digest.update(instruction.strip().lower().encode("utf-8"))
        return digest.hexdigest()

    def get(self, image: np.ndarray, instruction: str) -> Optional[PreprocessedSample]:
        key = self._generate_cache_key(image, instruction)
        with self._lock:
            entry = self._cache.get(key)
            if entry is None:
                self.statistics.misses += 1
                return None
            self._cache.move_to_end(key)
            self.statistics.hits += 1
            return entry

    def put(self, image: np.ndarray, instruction: str, entry: PreprocessedSample) -> None:
        key = self._generate_cache_key(image, instruction)
        with self._lock:
            self._cache[key] = entry
            self._cache.move_to_end(key)
            while len(self._cache) > self.max_size:
                evicted, _ = self._cache.popitem(last=False)
                self.statistics.evictions += 1
                logger.debug(f"Evicted preprocessing entry {evicted[:12]}")

    def get_or_compute(self, image: np.ndarray, instruction: str,
                       compute: Callable[[], Tuple[SegmentationMap, List[int]]]) -> PreprocessedSample:
        entry = self.get(image, instruction)
        if entry is None:
            seg, ids = compute()
            entry = PreprocessedSample(segmentation=seg, object_ids=list(ids))
            self.put(image, instruction, entry)
        return entry

    def clear(self) -> None:
        with self._lock:
            self._cache.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self._cache)
