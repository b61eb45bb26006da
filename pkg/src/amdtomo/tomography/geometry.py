"""Parallel-beam scan geometry and per-view projection stencils.

The rotation axis runs along the volume ``slice`` axis, so each detector row
reads one slice and the in-plane problem is the same for every slice.  A
voxel projects onto the detector at

    t = x * cos(theta) + y * sin(theta)

with ``x`` the signed column offset and ``y`` the signed row offset from
volume center, both in physical units.  Its mass is spread over the two
nearest detector bins by linear interpolation and scaled by the pixel pitch,
so projections carry path lengths in physical units (a unit-valued object of
extent L along the ray integrates to L, not to a voxel count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix

__all__ = ["ScanGeometry", "uniform_angles"]


def uniform_angles(n_views: int) -> tuple[float, ...]:
    """`n_views` angles evenly covering [0, pi)."""
    if n_views < 1:
        raise ValueError("need at least one view")
    return tuple(float(v) for v in np.arange(n_views) * (math.pi / n_views))


@dataclass(frozen=True)
class ScanGeometry:
    """Immutable description of a parallel-beam scan.

    Parameters
    ----------
    angles : tuple of float
        View angles in radians.
    n_det_rows, n_det_cols : int
        Detector grid.  Detector rows map one-to-one onto volume slices.
    pixel_pitch : float
        Detector pixel size and voxel size, physical units (they are tied
        in this geometry).
    vol_shape : tuple of int
        (n_slices, n_rows, n_cols) of the reconstruction volume.  Defaults
        to (n_det_rows, n_det_cols, n_det_cols).
    """

    angles: tuple[float, ...]
    n_det_rows: int
    n_det_cols: int
    pixel_pitch: float = 1.0
    vol_shape: tuple[int, int, int] | None = None

    def __post_init__(self):
        if len(self.angles) < 1:
            raise ValueError("geometry needs at least one view angle")
        if self.n_det_rows < 1 or self.n_det_cols < 1:
            raise ValueError("detector dims must be positive")
        if not (self.pixel_pitch > 0):
            raise ValueError("pixel_pitch must be positive")
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        shape = self.vol_shape
        if shape is None:
            shape = (self.n_det_rows, self.n_det_cols, self.n_det_cols)
        shape = tuple(int(n) for n in shape)
        if len(shape) != 3 or any(n < 1 for n in shape):
            raise ValueError(f"bad vol_shape {shape}")
        if shape[0] != self.n_det_rows:
            raise ValueError(
                f"vol_shape[0]={shape[0]} must equal n_det_rows="
                f"{self.n_det_rows} (one detector row per slice)"
            )
        object.__setattr__(self, "vol_shape", shape)

    @property
    def n_views(self) -> int:
        return len(self.angles)

    @property
    def inplane_size(self) -> int:
        return self.vol_shape[1] * self.vol_shape[2]


def view_footprints(geom: ScanGeometry) -> tuple[np.ndarray, np.ndarray]:
    """Per-view detector footprint of every in-plane voxel.

    Returns
    -------
    bin0 : int32 array, shape (n_views, n_rows*n_cols)
        Lower of the two detector bins a voxel hits.  May be -1 (only
        bin0+1 is on the detector) and is forced to -1 with frac 0 when
        the whole footprint misses.
    frac : float64 array, same shape
        Interpolation weight of bin0+1; bin0 receives 1-frac.  Use sites
        must drop the weight of any bin index outside [0, n_det_cols).
    """
    return _footprints_cached(geom)


@lru_cache(maxsize=16)
def _footprints_cached(geom: ScanGeometry):
    _, n_rows, n_cols = geom.vol_shape
    delta = geom.pixel_pitch
    y = (np.arange(n_rows) - (n_rows - 1) / 2.0) * delta
    x = (np.arange(n_cols) - (n_cols - 1) / 2.0) * delta
    yy, xx = np.meshgrid(y, x, indexing="ij")
    yy = yy.ravel()
    xx = xx.ravel()
    n_q = n_rows * n_cols
    bin0 = np.empty((geom.n_views, n_q), dtype=np.int32)
    frac = np.empty((geom.n_views, n_q), dtype=np.float64)
    half = (geom.n_det_cols - 1) / 2.0
    for v, theta in enumerate(geom.angles):
        t = xx * math.cos(theta) + yy * math.sin(theta)
        u = t / delta + half
        b = np.floor(u)
        f = u - b
        b = b.astype(np.int64)
        # Footprint entirely off-detector: flag and neutralize.
        dead = (b < -1) | (b > geom.n_det_cols - 1)
        b[dead] = -1
        f[dead] = 0.0
        bin0[v] = b.astype(np.int32)
        frac[v] = f
    bin0.setflags(write=False)
    frac.setflags(write=False)
    return bin0, frac


@lru_cache(maxsize=16)
def view_matrices(geom: ScanGeometry):
    """Per-view sparse stencils S_v of shape (n_det_cols, n_rows*n_cols).

    ``S_v @ image.ravel()`` is one sinogram row of the in-plane projection,
    in physical path-length units.  The same matrices serve projection and
    (via transpose) the exact adjoint.
    """
    bin0, frac = view_footprints(geom)
    n_q = bin0.shape[1]
    cols = np.arange(n_q, dtype=np.int64)
    delta = geom.pixel_pitch
    mats = []
    for v in range(geom.n_views):
        b = bin0[v].astype(np.int64)
        f = frac[v]
        rows = np.concatenate([b, b + 1])
        vals = np.concatenate([delta * (1.0 - f), delta * f])
        ccols = np.concatenate([cols, cols])
        keep = (rows >= 0) & (rows < geom.n_det_cols)
        m = coo_matrix(
            (vals[keep], (rows[keep], ccols[keep])),
            shape=(geom.n_det_cols, n_q),
        ).tocsr()
        mats.append(m)
    return tuple(mats)
