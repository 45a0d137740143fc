"""
Named random streams derived from one master seed.

Each stream is a Philox generator whose key is a SHA-256 digest of
(master seed, stream name, counters). Adding a new stream never shifts the
draws of an existing one, and a stream for step ``s`` is reproducible without
replaying steps ``1..s-1``.
"""
import hashlib
import json
import logging

import numpy as np

logger = logging.getLogger(__name__)


class RngStreams:
    """Factory for counter-keyed, order-independent numpy generators."""

    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ValueError("master seed must be non-negative")
        self.master_seed = int(master_seed)

    def _digest(self, name: str, counters) -> bytes:
        payload = json.dumps([self.master_seed, name, [str(c) for c in counters]])
        return hashlib.sha256(payload.encode("utf-8")).digest()

    def generator(self, name: str, *counters) -> np.random.Generator:
        key = int.from_bytes(self._digest(name, counters)[:16], "little")
        return np.random.Generator(np.random.Philox(key=key))

    def derive_seed(self, name: str, *counters) -> int:
        """A 63-bit integer seed for components that take a plain seed."""
        return int.from_bytes(self._digest(name, counters)[16:24], "little") >> 1

    def __repr__(self) -> str:
        return f"RngStreams(master_seed={self.master_seed})"
