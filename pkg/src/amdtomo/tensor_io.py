"""Labeled dense tensors and the on-disk formats used across the pipeline.

Every stage passes data around as a :class:`HyperTensor`: a C-contiguous
float64 array whose axes carry semantic labels (``view``, ``row``, ``col``,
``wavelength``, ...).  Labels are what stages validate against, so an
operation never has to guess which axis is which.

Two interchange formats live here:

* ``.amdt`` binary container, version 1.  Layout (all little-endian)::

      bytes 0..3    magic "AMDT"
      bytes 4..5    format version, u16 (currently 1)
      bytes 6..7    axis count, u16
      per axis      label code u8, axis length u64
      payload       float64, row-major, last axis fastest

  Writes of identical tensors are byte-identical, which makes checksum
  comparison across runs meaningful.

* spectra CSV: header ``lambda_angstrom,<name1>,...`` followed by one row
  per wavelength bin, values printed with 9 significant digits.
"""

from __future__ import annotations

import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "AXIS_LABELS",
    "HyperTensor",
    "WavelengthGrid",
    "SpectraTable",
    "TensorIOError",
    "BadMagicError",
    "UnsupportedVersionError",
    "TruncatedFileError",
    "save_tensor",
    "load_tensor",
    "export_spectra_csv",
    "import_spectra_csv",
]

MAGIC = b"AMDT"
FORMAT_VERSION = 1

# Axis label -> on-disk u8 code.  Codes are part of the file format; do not
# renumber.
AXIS_LABELS = {
    "view": 0,
    "row": 1,
    "col": 2,
    "wavelength": 3,
    "subspace": 4,
    "material": 5,
    "slice": 6,
    "set": 7,
    "component": 8,
}
_CODE_TO_LABEL = {v: k for k, v in AXIS_LABELS.items()}


class TensorIOError(Exception):
    """Base class for .amdt container errors."""


class BadMagicError(TensorIOError):
    """File does not start with the AMDT magic bytes."""


class UnsupportedVersionError(TensorIOError):
    """Container version is not one this reader understands."""


class TruncatedFileError(TensorIOError):
    """Header or payload ends before the declared size."""


@dataclass(frozen=True)
class HyperTensor:
    """Dense labeled tensor, float64, C-contiguous.

    Parameters
    ----------
    data : np.ndarray
        Array of any rank >= 1.  Converted to contiguous float64 on
        construction if needed; must be finite everywhere.
    axis_labels : tuple of str
        One label per axis, each from :data:`AXIS_LABELS`, no repeats.

    Notes
    -----
    Treat instances as immutable: operations that transform a tensor return
    a new one.  The underlying array is not defensively copied, so callers
    that keep a reference to ``data`` must not write through it.
    """

    data: np.ndarray
    axis_labels: tuple[str, ...]

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        labels = tuple(self.axis_labels)
        if arr.ndim == 0:
            raise ValueError("tensor must have at least one axis")
        if arr.ndim != len(labels):
            raise ValueError(
                f"rank {arr.ndim} does not match {len(labels)} axis labels"
            )
        for lab in labels:
            if lab not in AXIS_LABELS:
                raise ValueError(f"unknown axis label {lab!r}")
        if len(set(labels)) != len(labels):
            raise ValueError(f"repeated axis labels in {labels}")
        if not np.isfinite(arr).all():
            raise ValueError("tensor data contains non-finite values")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "axis_labels", labels)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    def axis(self, label: str) -> int:
        """Index of the axis carrying `label`; KeyError if absent."""
        try:
            return self.axis_labels.index(label)
        except ValueError:
            raise KeyError(
                f"tensor {self.axis_labels} has no axis {label!r}"
            ) from None

    def require(self, *labels: str) -> None:
        """Validate that the tensor axes are exactly `labels`, in order."""
        if self.axis_labels != tuple(labels):
            raise ValueError(
                f"expected axes {tuple(labels)}, got {self.axis_labels}"
            )


@dataclass(frozen=True)
class WavelengthGrid:
    """Uniform wavelength binning in angstrom.

    ``centers()`` returns midpoints of the ``n_bins`` equal-width bins that
    tile ``[lambda_min, lambda_max]``.
    """

    lambda_min: float
    lambda_max: float
    n_bins: int

    def __post_init__(self):
        if not (0.0 < self.lambda_min < self.lambda_max):
            raise ValueError(
                f"need 0 < lambda_min < lambda_max, got "
                f"[{self.lambda_min}, {self.lambda_max}]"
            )
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")

    @property
    def bin_width(self) -> float:
        return (self.lambda_max - self.lambda_min) / self.n_bins

    def centers(self) -> np.ndarray:
        w = self.bin_width
        return self.lambda_min + (np.arange(self.n_bins) + 0.5) * w

    def nearest_bin(self, lam: float) -> int:
        """Index of the bin whose center is closest to `lam`."""
        return int(np.argmin(np.abs(self.centers() - lam)))


@dataclass(frozen=True)
class SpectraTable:
    """Per-material linear attenuation spectra on a common wavelength grid.

    ``mu`` has one row per material, shape (n_materials, n_bins), units
    1/length (reciprocal of the pixel-pitch unit), non-negative.
    """

    names: tuple[str, ...]
    grid: WavelengthGrid
    mu: np.ndarray = field(repr=False)

    def __post_init__(self):
        mu = np.ascontiguousarray(self.mu, dtype=np.float64)
        names = tuple(self.names)
        if mu.ndim != 2:
            raise ValueError("mu must be 2-D (n_materials, n_bins)")
        if mu.shape != (len(names), self.grid.n_bins):
            raise ValueError(
                f"mu shape {mu.shape} does not match {len(names)} names and "
                f"grid n_bins={self.grid.n_bins}"
            )
        if len(set(names)) != len(names) or any(not n for n in names):
            raise ValueError("material names must be unique and non-empty")
        for n in names:
            if "," in n or "\n" in n:
                raise ValueError(f"material name {n!r} not CSV-safe")
        if not np.isfinite(mu).all():
            raise ValueError("spectra contain non-finite values")
        if (mu < 0).any():
            raise ValueError("spectra must be non-negative")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "names", names)

    @property
    def n_materials(self) -> int:
        return len(self.names)


def save_tensor(t: HyperTensor, path: str | Path) -> None:
    """Write `t` to `path` in the .amdt version-1 container."""
    path = Path(path)
    header = bytearray()
    header += MAGIC
    header += struct.pack("<HH", FORMAT_VERSION, len(t.axis_labels))
    for lab, n in zip(t.axis_labels, t.dims):
        header += struct.pack("<BQ", AXIS_LABELS[lab], n)
    arr = t.data
    if sys.byteorder != "little":  # pragma: no cover - LE hosts only in CI
        arr = arr.byteswap()
    with open(path, "wb") as f:
        f.write(bytes(header))
        arr.tofile(f)


def load_tensor(path: str | Path) -> HyperTensor:
    """Read an .amdt container written by :func:`save_tensor`.

    Raises
    ------
    BadMagicError, UnsupportedVersionError, TruncatedFileError
        On a foreign file, a future format version, or a payload shorter
        than the header promises.
    """
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise TruncatedFileError(f"{path}: header ends after {len(head)} bytes")
        if head[:4] != MAGIC:
            raise BadMagicError(f"{path}: magic {head[:4]!r}, expected {MAGIC!r}")
        version, n_axes = struct.unpack("<HH", head[4:8])
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"{path}: container version {version}, reader supports "
                f"{FORMAT_VERSION}"
            )
        labels = []
        dims = []
        for _ in range(n_axes):
            rec = f.read(9)
            if len(rec) < 9:
                raise TruncatedFileError(f"{path}: axis table cut short")
            code, n = struct.unpack("<BQ", rec)
            if code not in _CODE_TO_LABEL:
                raise TensorIOError(f"{path}: unknown axis code {code}")
            labels.append(_CODE_TO_LABEL[code])
            dims.append(int(n))
        want = int(np.prod(dims, dtype=np.int64)) if dims else 0
        payload = np.fromfile(f, dtype="<f8", count=want)
        if payload.size != want:
            raise TruncatedFileError(
                f"{path}: payload has {payload.size} of {want} values"
            )
        if f.read(1):
            raise TensorIOError(f"{path}: trailing bytes after payload")
    data = payload.astype(np.float64, copy=False).reshape(dims)
    return HyperTensor(data, tuple(labels))


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def export_spectra_csv(table: SpectraTable, path: str | Path) -> None:
    """Write `table` as CSV: header lambda_angstrom,<names>, one row per bin."""
    path = Path(path)
    lam = table.grid.centers()
    lines = ["lambda_angstrom," + ",".join(table.names)]
    for i in range(table.grid.n_bins):
        vals = ",".join(_fmt(v) for v in table.mu[:, i])
        lines.append(f"{_fmt(lam[i])},{vals}")
    path.write_text("\n".join(lines) + "\n")


def import_spectra_csv(path: str | Path) -> SpectraTable:
    """Read a spectra CSV written by :func:`export_spectra_csv`.

    The wavelength grid is rebuilt from the lambda column assuming the
    uniform binning the exporter uses; values come back exactly as printed
    (so to the 9 significant digits of the format).
    """
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise TensorIOError(f"{path}: empty spectra file")
    header = lines[0].split(",")
    if header[0] != "lambda_angstrom" or len(header) < 2:
        raise TensorIOError(f"{path}: bad spectra header {lines[0]!r}")
    names = tuple(header[1:])
    body = np.array(
        [[float(v) for v in ln.split(",")] for ln in lines[1:]], dtype=np.float64
    )
    if body.ndim != 2 or body.shape[1] != len(names) + 1:
        raise TensorIOError(f"{path}: ragged spectra rows")
    lam = body[:, 0]
    n = lam.size
    if n == 1:
        width = 1.0
    else:
        width = float(lam[1] - lam[0])
        if width <= 0 or not np.allclose(np.diff(lam), width, rtol=1e-6, atol=0):
            raise TensorIOError(f"{path}: lambda column is not a uniform grid")
    grid = WavelengthGrid(float(lam[0] - width / 2), float(lam[-1] + width / 2), n)
    return SpectraTable(names=names, grid=grid, mu=body[:, 1:].T)
