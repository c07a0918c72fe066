"""Pseudo-real appearance model.

Manufactures a controllable gap between rendered (simulated) projections and
a stand-in "real" image domain: gaussian blur, gamma curve, multiplicative
low-frequency bias field, additive noise, in that fixed order, clamped to
>= 0. Intended for display-space images in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .projector import ProjectionImage


@dataclass(frozen=True)
class DomainStyle:
    blur_sigma: float = 0.0  # pixels
    gamma: float = 1.0
    noise_sigma: float = 0.0
    bias_amplitude: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("sigmas must be >= 0")
        if self.gamma <= 0:
            raise ValueError("gamma must be > 0")


DEFAULT_STYLE = DomainStyle(blur_sigma=1.0, gamma=1.4, noise_sigma=0.02, bias_amplitude=0.15, seed=0)


def _bias_field(shape, amplitude, rng):
    """Smooth multiplicative field 1 + amplitude * (low-frequency noise)."""
    coarse = rng.standard_normal((4, 4))
    coarse = coarse / max(np.abs(coarse).max(), 1e-12)
    zy = np.linspace(0, 3, shape[0])
    zx = np.linspace(0, 3, shape[1])
    y0 = np.minimum(zy.astype(int), 2)
    x0 = np.minimum(zx.astype(int), 2)
    fy = (zy - y0)[:, None]
    fx = (zx - x0)[None, :]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    field = (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy
    return 1.0 + amplitude * field


def pseudo_real_transform(img: ProjectionImage, style: DomainStyle) -> ProjectionImage:
    """Apply the pseudo-real pipeline: blur -> gamma -> bias -> noise.

    Identity parameters (0, 1, 0, 0) skip every stage, so the map is exactly
    the identity in that case. Deterministic in style.seed.
    """
    x = np.asarray(img.data, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("input image must be finite")
    rng = np.random.default_rng(style.seed)
    if style.blur_sigma > 0:
        x = ndimage.gaussian_filter(x, sigma=style.blur_sigma, mode="nearest")
    if style.gamma != 1.0:
        x = np.power(np.maximum(x, 0.0), style.gamma)
    if style.bias_amplitude != 0.0:
        x = x * _bias_field(x.shape, style.bias_amplitude, rng)
    if style.noise_sigma > 0:
        x = x + style.noise_sigma * rng.standard_normal(x.shape)
    # float32 -> float64 -> float32 is exact, so all-identity parameters
    # reproduce the input bit for bit.
    return ProjectionImage(np.maximum(x, 0.0).astype(np.float32), img.geometry)
