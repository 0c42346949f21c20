"""Procedural co-located overhead / ground-level scene pairs.

A world is a 16x16 grid of terrain tokens.  The overhead view paints every
cell as an 8x8 block; the ground view looks out from the grid centre along
the centre row (west in the left half of the image, east in the right half),
drawing one horizontal band per cell with nearer cells taller.  The ground
view therefore depends only on the centre row and the world seed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_types import (
    CLASSES,
    GROUND_SIDE,
    OVERHEAD_SIDE,
    PairedSample,
    as_seed,
    make_rng,
    normalize,
)

GRID = 16
CELL_PX = OVERHEAD_SIDE // GRID
CENTER_ROW = GRID // 2
NOISE_AMPLITUDE = 0.05
URBAN_MIN_FRACTION = 0.35
RURAL_MAX_FRACTION = 0.15

TOKENS = ("grass", "tree", "road", "house", "water")
GRASS, TREE, ROAD, HOUSE, WATER = range(len(TOKENS))
BUILT = (ROAD, HOUSE)

# byte RGB; every pair differs by > 0.2 in some channel once normalised
PALETTE_BYTES = {
    "grass": (86, 160, 64),
    "tree": (24, 96, 40),
    "road": (128, 128, 128),
    "house": (196, 72, 56),
    "water": (40, 96, 200),
    "sky": (150, 200, 240),
}
PALETTE = {name: normalize(np.array(rgb)) for name, rgb in PALETTE_BYTES.items()}
_TOKEN_COLORS = np.stack([PALETTE[t] for t in TOKENS])

SKY_ROWS = GROUND_SIDE // 3
_HALF = GRID // 2

# stream ids for make_rng; fixed so renders are stable across releases
_WORLD_STREAM = {"rural": 11, "urban": 12}
_OVERHEAD_STREAM = 21
_GROUND_STREAM = 22
_DATASET_STREAM = 31


def built_fraction(cells) -> float:
    cells = np.asarray(cells)
    return float(np.isin(cells, BUILT).mean())


@dataclass(frozen=True)
class WorldGrid:
    cells: np.ndarray
    klass: str
    seed: int

    def __post_init__(self):
        cells = np.array(self.cells, dtype=np.int8)
        if cells.shape != (GRID, GRID) or cells.min() < 0 or cells.max() >= len(TOKENS):
            raise ValueError("cells must be a 16x16 grid of token ids")
        if self.klass not in CLASSES:
            raise ValueError(f"klass must be one of {CLASSES}")
        frac = built_fraction(cells)
        if self.klass == "urban" and frac < URBAN_MIN_FRACTION:
            raise ValueError(f"urban world with road+house fraction {frac:.3f} < {URBAN_MIN_FRACTION}")
        if self.klass == "rural" and frac > RURAL_MAX_FRACTION:
            raise ValueError(f"rural world with road+house fraction {frac:.3f} > {RURAL_MAX_FRACTION}")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "seed", as_seed(self.seed))


def _urban_cells(rng):
    cells = np.full((GRID, GRID), GRASS, dtype=np.int8)
    rows = rng.choice(GRID, size=rng.integers(2, 4), replace=False)
    cols = rng.choice(GRID, size=rng.integers(2, 4), replace=False)
    cells[rows, :] = ROAD
    cells[:, cols] = ROAD
    houses = (cells != ROAD) & (rng.random((GRID, GRID)) < 0.55)
    cells[houses] = HOUSE
    trees = (cells == GRASS) & (rng.random((GRID, GRID)) < 0.3)
    cells[trees] = TREE
    if rng.random() < 0.2:
        r, c = rng.integers(0, GRID - 2, size=2)
        cells[r : r + 2, c : c + 2] = WATER
    return cells


def _rural_cells(rng):
    cells = np.full((GRID, GRID), GRASS, dtype=np.int8)
    yy, xx = np.mgrid[:GRID, :GRID]
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0, GRID, size=2)
        radius = rng.uniform(1.5, 4.0)
        blob = (yy - cy) ** 2 + (xx - cx) ** 2 < radius**2
        cells[blob & (rng.random((GRID, GRID)) < 0.8)] = TREE
    if rng.random() < 0.5:
        cy, cx = rng.uniform(2, GRID - 2, size=2)
        cells[(yy - cy) ** 2 + (xx - cx) ** 2 < rng.uniform(1.0, 2.5) ** 2] = WATER
    if rng.random() < 0.4:
        c = rng.integers(GRID)
        cells[:, c] = ROAD
    n_houses = rng.integers(0, 8)
    idx = rng.choice(GRID * GRID, size=n_houses, replace=False)
    cells.flat[idx] = HOUSE
    return cells


def make_world(seed, target_class) -> WorldGrid:
    """Deterministic world of ``target_class``.

    Rejection sampling keeps the road+house fraction outside the ambiguous
    band both over the whole grid and along the centre row, so the ground
    view alone carries the class.
    """
    if target_class not in CLASSES:
        raise ValueError(f"target_class must be one of {CLASSES}")
    seed = as_seed(seed)
    rng = make_rng(seed, _WORLD_STREAM[target_class])
    while True:
        if target_class == "urban":
            cells = _urban_cells(rng)
            ok = (built_fraction(cells) >= URBAN_MIN_FRACTION
                  and built_fraction(cells[CENTER_ROW]) >= URBAN_MIN_FRACTION)
        else:
            cells = _rural_cells(rng)
            ok = (built_fraction(cells) <= RURAL_MAX_FRACTION
                  and built_fraction(cells[CENTER_ROW]) <= RURAL_MAX_FRACTION)
        if ok:
            return WorldGrid(cells=cells, klass=target_class, seed=seed)


def _noise(seed, stream, shape):
    rng = make_rng(seed, stream)
    return rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, size=shape).astype(np.float32)


def render_overhead(world: WorldGrid) -> np.ndarray:
    colors = _TOKEN_COLORS[world.cells]  # 16, 16, 3
    img = np.repeat(np.repeat(colors, CELL_PX, axis=0), CELL_PX, axis=1)
    img = img + _noise(world.seed, _OVERHEAD_STREAM, img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def band_edges(n_rows=GROUND_SIDE - SKY_ROWS, n_cells=_HALF):
    """Row offsets (from the bottom) where each distance band starts; nearest first."""
    weights = 1.0 / np.arange(1, n_cells + 1)
    cum = np.concatenate([[0.0], np.cumsum(weights)]) / weights.sum()
    return np.rint(cum * n_rows).astype(int)


_BAND_EDGES = band_edges()


def render_ground(world: WorldGrid) -> np.ndarray:
    row = world.cells[CENTER_ROW]
    west = row[:_HALF][::-1]  # nearest first
    east = row[_HALF:]
    img = np.empty((GROUND_SIDE, GROUND_SIDE, 3), dtype=np.float32)
    img[:SKY_ROWS] = PALETTE["sky"]
    half = GROUND_SIDE // 2
    for d in range(_HALF):
        lo = GROUND_SIDE - _BAND_EDGES[d + 1]
        hi = GROUND_SIDE - _BAND_EDGES[d]
        img[lo:hi, :half] = _TOKEN_COLORS[west[d]]
        img[lo:hi, half:] = _TOKEN_COLORS[east[d]]
    img = img + _noise(world.seed, _GROUND_STREAM, img.shape)
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def sample_seed(seed, index) -> int:
    """Per-sample world seed derived from the dataset seed and the sample index."""
    ss = np.random.SeedSequence([as_seed(seed), _DATASET_STREAM, int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def class_schedule(seed, n, class_balance):
    """Seeded class assignment with exactly ``floor(n * balance + 0.5)`` urban samples."""
    n_urban = int(np.floor(n * class_balance + 0.5))
    perm = make_rng(seed, _DATASET_STREAM).permutation(n)
    klass = np.array(["rural"] * n, dtype=object)
    klass[perm[:n_urban]] = "urban"
    return list(klass)


def make_sample(seed, index, klass) -> PairedSample:
    world = make_world(sample_seed(seed, index), klass)
    return PairedSample(
        overhead=render_overhead(world),
        ground=render_ground(world),
        location_id=f"s{as_seed(seed)}-{index:06d}",
        label=klass,
    )


def make_dataset(seed, n, class_balance=0.5):
    if n < 2:
        raise ValueError(f"dataset needs at least 2 samples, got n={n}")
    if not 0.0 < class_balance < 1.0:
        raise ValueError(f"class_balance must lie in (0, 1), got {class_balance}")
    schedule = class_schedule(seed, n, class_balance)
    return [make_sample(seed, i, k) for i, k in enumerate(schedule)]


def recover_label(overhead, tol=0.1) -> str:
    """Classify an overhead render by counting road/house palette pixels."""
    overhead = np.asarray(overhead)
    hit = np.zeros(overhead.shape[:2], dtype=bool)
    for name in ("road", "house"):
        hit |= np.abs(overhead - PALETTE[name]).max(axis=-1) <= tol
    return "urban" if hit.mean() >= URBAN_MIN_FRACTION else "rural"
