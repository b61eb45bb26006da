"""Open-beam conditioning and projection-density formation.

The measured transmission chain is: average repeated open-beam count sets,
smooth the average with a normalized 2D Hamming kernel, take the negative
log ratio of object counts to that smoothed open beam, then subtract a per
(view, wavelength) offset estimated from pixels outside the sample. The
offset absorbs dose drift between views; its estimate comes from a
background mask that can be supplied explicitly or derived from the data
with :func:`auto_background_mask`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tensor_io import HyperTensor

__all__ = [
    "DensityStack",
    "average_openbeams",
    "smooth_openbeam",
    "compute_density",
    "correct_background",
    "auto_background_mask",
]


@dataclass(frozen=True)
class DensityStack:
    """Offset-corrected densities plus the correction that produced them.

    `offsets` holds the subtracted per (view, wavelength) background level;
    `background_mask` marks the outside-sample pixels it was estimated on.
    """

    p: HyperTensor
    offsets: np.ndarray = field(repr=False)
    background_mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.p.require("view", "row", "col", "wavelength")
        n_v, n_r, n_c, n_k = self.p.dims
        b = np.ascontiguousarray(self.offsets, dtype=np.float64)
        if b.shape != (n_v, n_k):
            raise ValueError(
                f"offsets shape {b.shape} != (n_views, n_bins) ({n_v}, {n_k})"
            )
        if not np.isfinite(b).all():
            raise ValueError("offsets must be finite")
        mask = np.ascontiguousarray(self.background_mask, dtype=bool)
        if mask.shape != (n_r, n_c):
            raise ValueError(
                f"mask shape {mask.shape} != image shape ({n_r}, {n_c})"
            )
        if not mask.any():
            raise ValueError("background mask must be nonempty")
        object.__setattr__(self, "offsets", b)
        object.__setattr__(self, "background_mask", mask)


def average_openbeams(stacks: HyperTensor) -> HyperTensor:
    """Arithmetic mean over repeated open-beam sets."""
    stacks.require("set", "row", "col", "wavelength")
    return HyperTensor(
        stacks.data.mean(axis=0), ("row", "col", "wavelength")
    )


def smooth_openbeam(ybar: HyperTensor, kernel_size: int = 5) -> HyperTensor:
    """Separable normalized Hamming smoothing of each wavelength image.

    `kernel_size` must be odd; boundaries are handled by edge replication,
    which keeps constant fields exactly constant.
    """
    ybar.require("row", "col", "wavelength")
    k = int(kernel_size)
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if k == 1:
        return HyperTensor(ybar.data.copy(), ybar.axis_labels)
    w = np.hamming(k)
    w /= w.sum()
    out = ndimage.convolve1d(ybar.data, w, axis=0, mode="nearest")
    out = ndimage.convolve1d(out, w, axis=1, mode="nearest")
    return HyperTensor(out, ybar.axis_labels)


def compute_density(
    y: HyperTensor, y_o: HyperTensor, floor: float = 1e-6
) -> HyperTensor:
    """Projection densities -log(y / y_o) with a zero-count guard.

    Counts below floor*y_o are lifted to that level before the log, so
    empty bins give the finite ceiling -log(floor) instead of inf.
    """
    y.require("view", "row", "col", "wavelength")
    y_o.require("row", "col", "wavelength")
    if y.dims[1:] != y_o.dims:
        raise ValueError(f"shape mismatch: y {y.dims} vs y_o {y_o.dims}")
    if not 0 < floor < 1:
        raise ValueError(f"floor must be in (0, 1), got {floor}")
    if (y_o.data <= 0).any():
        raise ValueError("open beam must be positive everywhere")
    num = np.maximum(y.data, floor * y_o.data)
    num /= y_o.data
    np.log(num, out=num)
    np.negative(num, out=num)
    return HyperTensor(num, y.axis_labels)


def correct_background(
    p_meas: HyperTensor, background_mask: np.ndarray
) -> DensityStack:
    """Subtract the masked-pixel mean density per (view, wavelength).

    After correction the mean over the mask is zero for every view and
    wavelength, up to float rounding.
    """
    p_meas.require("view", "row", "col", "wavelength")
    mask = np.ascontiguousarray(background_mask, dtype=bool)
    if mask.shape != p_meas.dims[1:3]:
        raise ValueError(
            f"mask shape {mask.shape} != image shape {p_meas.dims[1:3]}"
        )
    n_bg = int(mask.sum())
    if n_bg == 0:
        raise ValueError("background mask must select at least one pixel")
    w = mask.astype(np.float64)
    b = np.tensordot(p_meas.data, w, axes=([1, 2], [0, 1])) / n_bg
    p = p_meas.data - b[:, None, None, :]
    return DensityStack(HyperTensor(p, p_meas.axis_labels), b, mask)


def auto_background_mask(
    p_meas: HyperTensor, quantile: float = 0.2
) -> np.ndarray:
    """Estimate the outside-sample region from the data.

    Thresholds the view-and-wavelength-averaged density at the given
    quantile and keeps the largest below-threshold connected component
    that touches the image border. Fails when no such component exists;
    supply a mask explicitly in that case.
    """
    p_meas.require("view", "row", "col", "wavelength")
    if not 0 < quantile < 1:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    img = p_meas.data.mean(axis=(0, 3))
    low = img <= np.quantile(img, quantile)
    labeled, n = ndimage.label(low)
    border = np.concatenate(
        [labeled[0], labeled[-1], labeled[:, 0], labeled[:, -1]]
    )
    ids = np.unique(border[border > 0])
    if n == 0 or ids.size == 0:
        raise ValueError(
            "no border-touching background region found; "
            "supply background_mask explicitly"
        )
    counts = ndimage.sum_labels(np.ones_like(img), labeled, ids)
    return labeled == ids[int(np.argmax(counts))]
