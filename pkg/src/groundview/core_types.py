"""Shared value types, the [-1, 1] image convention and seed handling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

OVERHEAD_SIDE = 128
GROUND_SIDE = 64
CLASSES = ("rural", "urban")


class ImageRangeError(ValueError):
    """A byte image held a value outside [0, 255]."""


def normalize(raw) -> np.ndarray:
    """Map byte values in [0, 255] to float32 values in [-1, 1] via ``v / 127.5 - 1``."""
    raw = np.asarray(raw)
    bad = np.argwhere((raw < 0) | (raw > 255))
    if bad.size:
        coord = tuple(int(i) for i in bad[0])
        raise ImageRangeError(f"value {raw[coord]!r} at {coord} outside [0, 255]")
    return (raw.astype(np.float64) / 127.5 - 1.0).astype(np.float32)


def denormalize(t) -> np.ndarray:
    """Inverse of :func:`normalize` up to quantisation; out-of-range input is clamped."""
    t = np.clip(np.asarray(t, dtype=np.float64), -1.0, 1.0)
    return np.rint((t + 1.0) * 127.5).astype(np.uint8)


def _check_image(pixels, side, what):
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.shape != (side, side, 3):
        raise ValueError(f"{what} must be {side}x{side}x3, got {pixels.shape}")
    if not np.isfinite(pixels).all():
        raise ValueError(f"{what} has non-finite values")
    if pixels.min() < -1.0 or pixels.max() > 1.0:
        raise ValueError(f"{what} values must lie in [-1, 1]")
    return pixels


@dataclass(frozen=True)
class PairedSample:
    """One co-located overhead (128x128) / ground (64x64) pair."""

    overhead: np.ndarray
    ground: np.ndarray
    location_id: str
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "overhead", _check_image(self.overhead, OVERHEAD_SIDE, "overhead"))
        object.__setattr__(self, "ground", _check_image(self.ground, GROUND_SIDE, "ground"))
        if self.label is not None and self.label not in CLASSES:
            raise ValueError(f"label must be one of {CLASSES}, got {self.label!r}")
        self.overhead.setflags(write=False)
        self.ground.setflags(write=False)


def stack_samples(samples):
    """Stack a list of samples into ``(overheads, grounds, labels)`` arrays.

    ``labels`` holds 1 for urban, 0 for rural and -1 for unlabeled entries.
    """
    if not samples:
        raise ValueError("empty sample list")
    overheads = np.stack([s.overhead for s in samples])
    grounds = np.stack([s.ground for s in samples])
    labels = np.array([-1 if s.label is None else CLASSES.index(s.label) for s in samples])
    return overheads, grounds, labels


def check_unique_ids(samples):
    seen = set()
    for i, s in enumerate(samples):
        if s.location_id in seen:
            raise ValueError(f"duplicate location_id {s.location_id!r} at entry {i}")
        seen.add(s.location_id)


def as_seed(value) -> int:
    value = int(value)
    if not 0 <= value < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {value}")
    return value


def make_rng(seed, *stream) -> np.random.Generator:
    """Independent PCG64 generator for ``seed`` and an optional integer stream path.

    Distinct stream paths give statistically independent generators, so
    per-sample generators can be derived from (seed, index) without overlap
    between datasets built from different seeds.
    """
    return np.random.default_rng(np.random.SeedSequence([as_seed(seed), *stream]))
