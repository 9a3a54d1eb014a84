"""Deterministic, counter-based random number generation.

Every draw is produced by a fresh Philox-4x64 generator keyed with the
128-bit pair ``(seed, counter)``; the counter is incremented once per
draw.  Because the key fully determines the output block, a stream can
be checkpointed and resumed by storing two integers, and identical
``(seed, counter)`` pairs give identical output on any platform running
the same numpy version.

Named sub-streams (data generation, parameter init, training, sampling)
are derived from one root seed by hashing the stream name, so ablation
runs can share the data stream while differing elsewhere.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

ALGORITHM = "philox4x64"
_MASK64 = (1 << 64) - 1


@dataclass
class RngState:
    """Checkpointable generator state: a seed and a draw counter."""

    seed: int
    counter: int = 0
    algorithm: str = ALGORITHM

    def clone(self) -> "RngState":
        return RngState(self.seed, self.counter, self.algorithm)


def derive_stream_seed(root_seed: int, name: str) -> int:
    """Derive the 64-bit seed of a named sub-stream from the root seed."""
    digest = hashlib.sha256(f"{root_seed & _MASK64}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root_seed: int, name: str) -> RngState:
    return RngState(derive_stream_seed(root_seed, name))


def _next_generator(rng: RngState) -> np.random.Generator:
    key = (rng.seed & _MASK64) | ((rng.counter & _MASK64) << 64)
    gen = np.random.Generator(np.random.Philox(key=key))
    rng.counter = (rng.counter + 1) & _MASK64
    return gen


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    return shape


def standard_normal(rng: RngState, shape, dtype=np.float32) -> np.ndarray:
    """i.i.d. N(0, 1) samples; advances the counter by one."""
    shape = _check_shape(shape)
    return _next_generator(rng).standard_normal(size=shape, dtype=dtype)


def uniform(rng: RngState, low: float, high: float, shape=()) -> np.ndarray:
    shape = _check_shape(shape) if shape else ()
    return _next_generator(rng).uniform(low, high, size=shape)


def integers(rng: RngState, low: int, high: int, shape=()) -> np.ndarray:
    """Uniform integers in the inclusive range [low, high]."""
    shape = _check_shape(shape) if shape else ()
    return _next_generator(rng).integers(low, high, size=shape, endpoint=True)
