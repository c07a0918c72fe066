"""Desk-scale chest X-ray world model.

Synthetic CT phantoms are projected into 2D views by a cone-beam renderer;
a small encoder/predictor stack learns to predict projections under 3D
rotation actions; a vector-quantized decoder and FDK backprojection verify
that the learned latents carry 3D structure.
"""

__version__ = "0.1.0"

from .config import TrainConfig, load_config  # noqa: F401
from .phantoms import PhantomSpec, VoxelVolume, generate_phantom  # noqa: F401
from .projector import (Action, ConeBeamGeometry, ProjectionImage,  # noqa: F401
                        render_drr, render_drr_exact, to_display)
