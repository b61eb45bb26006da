"""Parallel-beam projection, FBP, and regularized iterative reconstruction."""

from .geometry import ScanGeometry, uniform_angles  # noqa: F401
from .projector import backproject, project  # noqa: F401
from .fbp import fbp, fbp_slice, filter_sinogram, ramp_filter_response  # noqa: F401
from .prior import (  # noqa: F401
    PriorParams,
    neighbor_weights,
    qggmrf_curvature,
    qggmrf_influence,
    qggmrf_potential,
)
from .mbir import (  # noqa: F401
    MbirOptions,
    ReconResult,
    mbir_reconstruct,
    reconstruct_stack,
)
