"""Multi-block mask sampling on the patch-token grid.

Masks are unions of a few random rectangles (blocks may overlap). The union
fraction is resampled into [ratio_min, ratio_max] and, failing that after
100 attempts, clamped by random trimming or padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskParams:
    n_blocks: int = 4
    scale_min: float = 0.15
    scale_max: float = 0.2
    aspect_min: float = 0.75
    aspect_max: float = 1.5
    ratio_min: float = 0.3
    ratio_max: float = 0.8

    def __post_init__(self):
        if not (0.0 < self.scale_min <= self.scale_max <= 1.0):
            raise ValueError("scale range must be within (0, 1]")
        if self.n_blocks < 1:
            raise ValueError("need at least one block")
        if not (0.0 <= self.ratio_min <= self.ratio_max <= 1.0):
            raise ValueError("ratio bounds must satisfy 0 <= min <= max <= 1")


@dataclass(frozen=True)
class MaskSpec:
    grid_h: int
    grid_w: int
    masked: tuple[int, ...]  # sorted token indices
    visible: tuple[int, ...]

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        m, v = set(self.masked), set(self.visible)
        if m & v:
            raise ValueError("masked and visible sets overlap")
        if m | v != set(range(n)):
            raise ValueError("masked and visible sets must partition the grid")

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def fraction(self) -> float:
        return len(self.masked) / self.n_tokens


def _sample_block(grid_h, grid_w, params: MaskParams, rng) -> np.ndarray:
    total = grid_h * grid_w
    area = rng.uniform(params.scale_min, params.scale_max) * total
    aspect = rng.uniform(params.aspect_min, params.aspect_max)
    h = int(round(np.sqrt(area * aspect)))
    w = int(round(np.sqrt(area / aspect)))
    h = min(max(h, 1), grid_h)
    w = min(max(w, 1), grid_w)
    top = int(rng.integers(0, grid_h - h + 1))
    left = int(rng.integers(0, grid_w - w + 1))
    block = np.zeros((grid_h, grid_w), dtype=bool)
    block[top : top + h, left : left + w] = True
    return block


def sample_multiblock(
    grid_h: int, grid_w: int, params: MaskParams = MaskParams(), seed: int | None = None, rng=None
) -> MaskSpec:
    """Sample a multi-block mask; deterministic given the seed.

    Exactly one of seed / rng should drive randomness; passing an rng lets
    a caller draw several masks from one stream.
    """
    if grid_h < 2 or grid_w < 2:
        raise ValueError("grid too small for block masking (need >= 2x2)")
    if rng is None:
        rng = np.random.default_rng(0 if seed is None else seed)
    total = grid_h * grid_w

    union = None
    for _attempt in range(100):
        union = np.zeros((grid_h, grid_w), dtype=bool)
        for _ in range(params.n_blocks):
            union |= _sample_block(grid_h, grid_w, params, rng)
        frac = union.sum() / total
        if params.ratio_min <= frac <= params.ratio_max:
            break
    masked = np.flatnonzero(union.reshape(-1))

    # Clamp by random trimming / padding if resampling never landed inside.
    lo = int(np.ceil(params.ratio_min * total))
    hi = int(np.floor(params.ratio_max * total))
    if len(masked) > hi:
        keep = rng.choice(len(masked), size=hi, replace=False)
        masked = masked[np.sort(keep)]
    elif len(masked) < lo:
        pool = np.setdiff1d(np.arange(total), masked)
        extra = rng.choice(len(pool), size=lo - len(masked), replace=False)
        masked = np.sort(np.concatenate([masked, pool[extra]]))

    visible = np.setdiff1d(np.arange(total), masked)
    return MaskSpec(grid_h, grid_w, tuple(int(i) for i in masked), tuple(int(i) for i in visible))
