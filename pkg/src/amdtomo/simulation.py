"""Digital phantoms and simulated hyperspectral neutron radiographs.

Ground-truth attenuation spectra are built from a small parametric model
(linear absorption term plus sigmoid Bragg steps) so no external edge
library is needed; externally computed spectra can be injected through the
CSV import in :mod:`tensor_io` instead.

Radiographs follow Beer-Lambert attenuation through a labeled voxel volume
with independent Poisson counting noise per (view, pixel, wavelength bin).
Randomness uses numpy's PCG64 seeded through ``SeedSequence((seed, stream,
index))`` so per-view and per-set substreams are independent and every
output is reproducible from the single integer seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .tensor_io import HyperTensor, SpectraTable, WavelengthGrid
from .tomography import ScanGeometry, project

__all__ = [
    "BraggEdge",
    "EdgeModel",
    "Cylinder",
    "Box",
    "Phantom",
    "synth_mu_spectrum",
    "synth_spectra",
    "build_phantom",
    "phantom_from_config",
    "simulate_radiographs",
    "simulate_openbeam",
    "default_materials",
    "default_phantom",
    "DEFAULT_GRID",
]

# Substream tags keep radiograph and open-beam draws on disjoint streams
# even when the same base seed is used for both.
_RADIOGRAPH_STREAM = 0
_OPENBEAM_STREAM = 1

# Label 0 is void; primitives may carve with the reserved name "void".
VOID_NAME = "void"

DEFAULT_GRID = WavelengthGrid(1.5, 4.5, 1200)


@dataclass(frozen=True)
class BraggEdge:
    """One upward sigmoid step of `height` centered at `lambda_edge`.

    `width` is the sigmoid scale in Angstrom; the step reaches 98.7% of its
    height within +-5 widths.
    """

    lambda_edge: float
    height: float
    width: float

    def __post_init__(self):
        if not np.isfinite([self.lambda_edge, self.height, self.width]).all():
            raise ValueError("edge parameters must be finite")
        if self.height < 0:
            raise ValueError(f"edge height must be >= 0, got {self.height}")
        if self.width <= 0:
            raise ValueError(f"edge width must be > 0, got {self.width}")


@dataclass(frozen=True)
class EdgeModel:
    """Parametric attenuation model mu(lambda) = c + a*lambda + sum of edges.

    `baseline` c and `absorption_slope` a are in 1/length and
    1/(length*Angstrom); the linear term stands in for 1/v absorption.
    """

    name: str
    baseline: float
    absorption_slope: float
    edges: tuple[BraggEdge, ...] = ()

    def __post_init__(self):
        if not self.name:
            raise ValueError("material name must be non-empty")
        if not np.isfinite([self.baseline, self.absorption_slope]).all():
            raise ValueError("model parameters must be finite")
        object.__setattr__(self, "edges", tuple(self.edges))


def synth_mu_spectrum(model: EdgeModel, grid: WavelengthGrid) -> np.ndarray:
    """Evaluate `model` at the grid's bin centers, clamped at zero.

    A dip below zero worth more than 1% of the dynamic range before the
    clamp triggers a warning: the model is then likely misconfigured
    (e.g. a negative baseline overwhelming the edges).
    """
    lam = grid.centers()
    mu = model.baseline + model.absorption_slope * lam
    for e in model.edges:
        mu = mu + e.height * expit((lam - e.lambda_edge) / e.width)
    lo = float(mu.min())
    span = float(mu.max() - lo)
    if lo < 0 and -lo > 0.01 * max(span, np.finfo(np.float64).tiny):
        warnings.warn(
            f"mu spectrum for {model.name!r} reaches {lo:.3g} before the "
            "zero clamp; check baseline and slope",
            RuntimeWarning,
            stacklevel=2,
        )
    return np.maximum(mu, 0.0)


def synth_spectra(
    models: tuple[EdgeModel, ...] | list[EdgeModel], grid: WavelengthGrid
) -> SpectraTable:
    """Stack per-model spectra into a table, one row per material."""
    if not models:
        raise ValueError("need at least one edge model")
    mu = np.stack([synth_mu_spectrum(m, grid) for m in models])
    return SpectraTable(tuple(m.name for m in models), grid, mu)


@dataclass(frozen=True)
class Cylinder:
    """Circular cylinder with axis parallel to the rotation (slice) axis.

    `center_row`/`center_col` and `radius` are in voxel units on the
    in-plane grid; `slices` is a half-open [lo, hi) range, None for the
    full height.
    """

    material: str
    center_row: float
    center_col: float
    radius: float
    slices: tuple[int, int] | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")


@dataclass(frozen=True)
class Box:
    """Axis-aligned box over half-open index ranges per axis."""

    material: str
    slices: tuple[int, int]
    rows: tuple[int, int]
    cols: tuple[int, int]


@dataclass(frozen=True)
class Phantom:
    """Labeled voxel volume: 0 is void, m in 1..N_m indexes material_names."""

    label_volume: HyperTensor
    material_names: tuple[str, ...]
    voxel_pitch: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "material_names", tuple(self.material_names))
        self.label_volume.require("slice", "row", "col")
        lab = self.label_volume.data
        if not (lab == np.round(lab)).all():
            raise ValueError("labels must be integers stored as floats")
        if lab.min() < 0 or lab.max() > len(self.material_names):
            raise ValueError(
                f"labels must lie in 0..{len(self.material_names)}"
            )
        if self.voxel_pitch <= 0:
            raise ValueError(f"voxel_pitch must be > 0, got {self.voxel_pitch}")
        if len(set(self.material_names)) != len(self.material_names):
            raise ValueError("material names must be unique")
        if VOID_NAME in self.material_names:
            raise ValueError(f"{VOID_NAME!r} is reserved for label 0")

    @property
    def n_materials(self) -> int:
        return len(self.material_names)

    def indicator(self, material_id: int) -> HyperTensor:
        """Binary occupancy volume (as floats) for one material label."""
        if not 1 <= material_id <= self.n_materials:
            raise ValueError(f"material_id {material_id} out of range")
        mask = (self.label_volume.data == material_id).astype(np.float64)
        return HyperTensor(mask, ("slice", "row", "col"))


def _label_for(material: str, names: tuple[str, ...]) -> int:
    if material == VOID_NAME:
        return 0
    try:
        return names.index(material) + 1
    except ValueError:
        raise ValueError(
            f"unknown material {material!r}; known: {list(names)}"
        ) from None


def _check_range(r: tuple[int, int], n: int, what: str) -> tuple[int, int]:
    lo, hi = int(r[0]), int(r[1])
    if not 0 <= lo < hi <= n:
        raise ValueError(f"{what} range {r} does not fit in [0, {n})")
    return lo, hi


def build_phantom(
    primitives,
    material_names,
    shape: tuple[int, int, int],
    voxel_pitch: float = 1.0,
) -> Phantom:
    """Rasterize cylinder/box primitives into a labeled volume.

    Later primitives overwrite earlier ones. Every primitive must lie
    inside the volume (the in-plane footprint of a cylinder must fit within
    the physical extent [-0.5, n-0.5] of its axes).
    """
    names = tuple(material_names)
    n_s, n_r, n_c = (int(d) for d in shape)
    labels = np.zeros((n_s, n_r, n_c), dtype=np.float64)
    rr = np.arange(n_r, dtype=np.float64)[:, None]
    cc = np.arange(n_c, dtype=np.float64)[None, :]
    for prim in primitives:
        mid = float(_label_for(prim.material, names))
        if isinstance(prim, Cylinder):
            if not (
                prim.center_row - prim.radius >= -0.5
                and prim.center_row + prim.radius <= n_r - 0.5
                and prim.center_col - prim.radius >= -0.5
                and prim.center_col + prim.radius <= n_c - 0.5
            ):
                raise ValueError(f"cylinder {prim} extends outside the volume")
            lo, hi = _check_range(prim.slices or (0, n_s), n_s, "slice")
            inside = (rr - prim.center_row) ** 2 + (
                cc - prim.center_col
            ) ** 2 <= prim.radius**2
            labels[lo:hi, inside] = mid
        elif isinstance(prim, Box):
            s0, s1 = _check_range(prim.slices, n_s, "slice")
            r0, r1 = _check_range(prim.rows, n_r, "row")
            c0, c1 = _check_range(prim.cols, n_c, "col")
            labels[s0:s1, r0:r1, c0:c1] = mid
        else:
            raise TypeError(f"unsupported primitive {type(prim).__name__}")
    return Phantom(
        HyperTensor(labels, ("slice", "row", "col")), names, voxel_pitch
    )


def phantom_from_config(cfg: dict) -> Phantom:
    """Build a phantom from its config-dict form.

    Expected keys: shape (3 ints), materials (list of names), voxel_pitch
    (optional, default 1.0), primitives (list of dicts with a "kind" of
    "cylinder" or "box" plus that primitive's fields).
    """
    prims = []
    for p in cfg.get("primitives", []):
        p = dict(p)
        kind = p.pop("kind", None)
        if kind == "cylinder":
            if "slices" in p and p["slices"] is not None:
                p["slices"] = tuple(p["slices"])
            prims.append(Cylinder(**p))
        elif kind == "box":
            prims.append(
                Box(
                    material=p["material"],
                    slices=tuple(p["slices"]),
                    rows=tuple(p["rows"]),
                    cols=tuple(p["cols"]),
                )
            )
        else:
            raise ValueError(f"unknown primitive kind {kind!r}")
    return build_phantom(
        prims,
        tuple(cfg["materials"]),
        tuple(cfg["shape"]),
        float(cfg.get("voxel_pitch", 1.0)),
    )


def _material_mu(phantom: Phantom, spectra: SpectraTable) -> np.ndarray:
    """Spectra rows reordered to the phantom's label order, shape (N_m, N_k)."""
    rows = []
    for name in phantom.material_names:
        if name not in spectra.names:
            raise ValueError(f"spectra table has no entry for {name!r}")
        rows.append(spectra.mu[spectra.names.index(name)])
    return np.stack(rows)


def simulate_radiographs(
    phantom: Phantom,
    spectra: SpectraTable,
    geom: ScanGeometry,
    openbeam_rate: float,
    seed: int,
) -> tuple[HyperTensor, HyperTensor]:
    """Poisson-noised hyperspectral radiographs plus the ideal open beam.

    For each view the expected count is ``rate * exp(-sum_m path_m * mu_m)``
    where path_m is the projected thickness of material m along the ray.
    Returns ``(y, y_o_truth)``; y_o_truth is the constant rate field
    (open-beam noise is simulated separately by :func:`simulate_openbeam`).
    """
    if openbeam_rate <= 0:
        raise ValueError(f"openbeam_rate must be > 0, got {openbeam_rate}")
    _check_seed(seed)
    if geom.vol_shape != phantom.label_volume.dims:
        raise ValueError(
            f"geometry volume {geom.vol_shape} != phantom "
            f"{phantom.label_volume.dims}"
        )
    if geom.pixel_pitch != phantom.voxel_pitch:
        raise ValueError("geometry pixel_pitch must equal phantom voxel_pitch")
    mu = _material_mu(phantom, spectra)
    n_k = spectra.grid.n_bins
    n_v, n_r, n_c = geom.n_views, geom.n_det_rows, geom.n_det_cols
    paths = np.empty((phantom.n_materials, n_v, n_r, n_c))
    for m in range(phantom.n_materials):
        paths[m] = project(phantom.indicator(m + 1), geom).data
    y = np.empty((n_v, n_r, n_c, n_k))
    for v in range(n_v):
        od = np.tensordot(paths[:, v], mu, axes=(0, 0))
        lam = openbeam_rate * np.exp(-od)
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, _RADIOGRAPH_STREAM, v))
        )
        y[v] = rng.poisson(lam)
    y_o = np.full((n_r, n_c, n_k), float(openbeam_rate))
    return (
        HyperTensor(y, ("view", "row", "col", "wavelength")),
        HyperTensor(y_o, ("row", "col", "wavelength")),
    )


def simulate_openbeam(
    openbeam_rate: float,
    geom: ScanGeometry,
    grid: WavelengthGrid,
    n_sets: int,
    seed: int,
) -> HyperTensor:
    """`n_sets` independent flat-field Poisson count sets."""
    if openbeam_rate <= 0:
        raise ValueError(f"openbeam_rate must be > 0, got {openbeam_rate}")
    if n_sets < 1:
        raise ValueError(f"n_sets must be >= 1, got {n_sets}")
    _check_seed(seed)
    shape = (geom.n_det_rows, geom.n_det_cols, grid.n_bins)
    out = np.empty((n_sets,) + shape)
    for s in range(n_sets):
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, _OPENBEAM_STREAM, s))
        )
        out[s] = rng.poisson(openbeam_rate, size=shape)
    return HyperTensor(out, ("set", "row", "col", "wavelength"))


def _check_seed(seed: int) -> None:
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")


def default_materials() -> tuple[EdgeModel, EdgeModel, EdgeModel]:
    """Two strong absorbers and one roughly 10x weaker structural material.

    Attenuation values are per voxel-pitch unit, sized so a few tens of
    voxels of path give optical depths near 1-2 on the default grid.
    """
    return (
        EdgeModel(
            "nickel",
            baseline=0.030,
            absorption_slope=0.016,
            edges=(
                BraggEdge(2.34, 0.008, 0.012),
                BraggEdge(4.05, 0.022, 0.020),
            ),
        ),
        EdgeModel(
            "copper",
            baseline=0.024,
            absorption_slope=0.012,
            edges=(
                BraggEdge(2.43, 0.006, 0.012),
                BraggEdge(4.17, 0.016, 0.020),
            ),
        ),
        EdgeModel(
            "aluminum",
            baseline=0.003,
            absorption_slope=0.0012,
            edges=(
                BraggEdge(2.86, 0.0008, 0.012),
                BraggEdge(4.05, 0.0015, 0.020),
            ),
        ),
    )


def default_phantom(
    shape: tuple[int, int, int] = (64, 64, 64), voxel_pitch: float = 1.0
) -> Phantom:
    """Two absorber cylinders inside a weak-material shell.

    Scales with `shape`: the shell hugs the in-plane extent and the two
    inner cylinders sit left and right of center, stopping short of the
    top and bottom slices so the volume has axial structure.
    """
    names = tuple(m.name for m in default_materials())
    n_s, n_r, n_c = shape
    cr = (n_r - 1) / 2.0
    cc = (n_c - 1) / 2.0
    half = min(n_r, n_c) / 2.0
    outer = 0.82 * half
    bore = 0.69 * half
    r_in = 0.25 * half
    off = 0.34 * half
    zlo, zhi = max(1, n_s // 16), n_s - max(1, n_s // 16)
    prims = [
        Cylinder("aluminum", cr, cc, outer),
        Cylinder(VOID_NAME, cr, cc, bore),
        Cylinder("nickel", cr, cc - off, r_in, slices=(zlo, zhi)),
        Cylinder("copper", cr, cc + off, r_in, slices=(zlo, zhi)),
    ]
    return build_phantom(prims, names, shape, voxel_pitch)
