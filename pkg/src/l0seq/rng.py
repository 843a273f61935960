"""Reproducible random streams built on the Philox counter-based generator.

All stochastic parts of the toolkit (parameter init, gate noise, dropout
masks, corpus synthesis, batch shuffling) draw from an :class:`RngState`.
The underlying algorithm is Philox4x32-10 (Salmon et al., "Parallel random
numbers: as easy as 1, 2, 3"), seeded with the raw 64-bit key so the stream
is a pure function of the seed: the same seed and the same call sequence
reproduce the same values bit for bit.  Uniform doubles are the standard
53-bit construction ``(next_uint64 >> 11) * 2**-53``.

Independent substreams are derived with :meth:`RngState.derive`, which maps
``(seed, tag)`` through SHA-256 to a fresh 64-bit key, so e.g. the batch
order and the gate noise of a training run never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngState"]


class RngState:
    """A seekable, serializable uniform/normal sample stream.

    The full generator state (counter, key, and output buffer position) can
    be captured with :meth:`get_state` and restored with :meth:`set_state`,
    which is how checkpoints resume training mid-stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._bitgen = np.random.Philox(key=self.seed)
        self._gen = np.random.Generator(self._bitgen)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def open_uniform(self, size=None) -> np.ndarray:
        """Uniform draws guaranteed strictly inside (0, 1).

        numpy's uniform may return exactly 0.0; gate sampling needs the open
        interval, so draws are nudged away from the endpoints by one ulp-ish
        margin (tiny = 2**-53, the generator's own granularity).
        """
        tiny = 2.0**-53
        u = self._gen.uniform(size=size)
        return np.clip(u, tiny, 1.0 - tiny)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def derive(self, tag: str) -> "RngState":
        """Create an independent substream keyed by ``(seed, tag)``."""
        digest = hashlib.sha256(
            self.seed.to_bytes(8, "little") + tag.encode("utf-8")
        ).digest()
        return RngState(int.from_bytes(digest[:8], "little"))

    def get_state(self) -> dict[str, np.ndarray]:
        """Capture the generator state as flat uint64 arrays (checkpointable)."""
        st = self._bitgen.state
        return {
            "counter": st["state"]["counter"].copy(),
            "key": st["state"]["key"].copy(),
            "buffer": st["buffer"].copy(),
            "scalars": np.array(
                [st["buffer_pos"], st["has_uint32"], st["uinteger"], self.seed],
                dtype=np.uint64,
            ),
        }

    def set_state(self, state: dict[str, np.ndarray]) -> None:
        scalars = state["scalars"]
        self.seed = int(scalars[3])
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.asarray(state["counter"], dtype=np.uint64),
                "key": np.asarray(state["key"], dtype=np.uint64),
            },
            "buffer": np.asarray(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(scalars[0]),
            "has_uint32": int(scalars[1]),
            "uinteger": int(scalars[2]),
        }
