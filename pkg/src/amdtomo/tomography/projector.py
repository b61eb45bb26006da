"""Forward projection and its exact adjoint."""

from __future__ import annotations

import numpy as np

from ..tensor_io import HyperTensor
from .geometry import ScanGeometry, view_matrices

__all__ = ["project", "backproject"]


def project(vol: HyperTensor, geom: ScanGeometry) -> HyperTensor:
    """Parallel-beam projection of a [slice, row, col] volume.

    Returns a [view, row, col] sinogram stack whose values are physical
    path lengths weighted by voxel values (the pixel pitch is folded in).
    """
    vol.require("slice", "row", "col")
    if vol.dims != geom.vol_shape:
        raise ValueError(f"volume dims {vol.dims} != geometry {geom.vol_shape}")
    n_s = geom.vol_shape[0]
    flat = vol.data.reshape(n_s, geom.inplane_size)
    out = np.empty((geom.n_views, n_s, geom.n_det_cols))
    for v, s_v in enumerate(view_matrices(geom)):
        # (n_det_cols, n_s) <- (n_det_cols, Q) @ (Q, n_s)
        out[v] = (s_v @ flat.T).T
    return HyperTensor(out, ("view", "row", "col"))


def backproject(sino: HyperTensor, geom: ScanGeometry) -> HyperTensor:
    """Adjoint of :func:`project`: [view, row, col] -> [slice, row, col].

    Exact transpose of the projection stencils, so the inner-product
    identity <A x, y> == <x, A^T y> holds to rounding error.
    """
    sino.require("view", "row", "col")
    expect = (geom.n_views, geom.n_det_rows, geom.n_det_cols)
    if sino.dims != expect:
        raise ValueError(f"sinogram dims {sino.dims} != geometry {expect}")
    n_s = geom.vol_shape[0]
    acc = np.zeros((n_s, geom.inplane_size))
    for v, s_v in enumerate(view_matrices(geom)):
        acc += (s_v.T @ sino.data[v].T).T
    return HyperTensor(acc.reshape(geom.vol_shape), ("slice", "row", "col"))
