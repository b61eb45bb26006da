"""Run configuration: one YAML file maps onto these frozen dataclasses.

Parsing is strict: unknown keys raise, so a typo cannot silently fall
back to a default. Exactly one of the `simulation` and `inputs` sections
must be present; everything else has defaults, and the generated
reference config spells every one of them out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import yaml

__all__ = [
    "GridConfig",
    "GeometryConfig",
    "SimulationConfig",
    "InputsConfig",
    "PreprocessingConfig",
    "NmfConfig",
    "PriorConfig",
    "MbirConfig",
    "ClusteringConfig",
    "RdmdConfig",
    "PipelineConfig",
    "parse_config",
    "load_config",
    "reference_config_text",
    "write_reference_config",
]


@dataclass(frozen=True)
class GridConfig:
    lambda_min: float = 1.5
    lambda_max: float = 4.5
    n_bins: int = 1200


@dataclass(frozen=True)
class GeometryConfig:
    n_views: int = 32
    n_det_rows: int = 64
    n_det_cols: int = 64
    pixel_pitch: float = 1.0


@dataclass(frozen=True)
class SimulationConfig:
    """`materials`/`phantom` accept "default" or explicit structures:
    materials as a list of edge-model dicts (name, baseline,
    absorption_slope, edges: [{lambda_edge, height, width}]), phantom as
    the dict form the simulator's phantom builder takes."""

    rate: float = 1e4
    n_openbeam_sets: int = 8
    grid: GridConfig = field(default_factory=GridConfig)
    materials: object = "default"
    phantom: object = "default"


@dataclass(frozen=True)
class InputsConfig:
    """Measured-data paths. The .amdt container carries no wavelength
    scale, so a grid block is mandatory here."""

    counts: str | None = None
    openbeams: str | None = None
    grid: GridConfig | None = None


@dataclass(frozen=True)
class PreprocessingConfig:
    kernel_size: int = 5
    floor: float = 1e-6
    mask_source: str = "auto"
    mask_path: str | None = None
    quantile: float = 0.2

    def __post_init__(self):
        if self.mask_source not in ("auto", "file"):
            raise ValueError(
                f"mask_source must be 'auto' or 'file', got {self.mask_source!r}"
            )
        if self.mask_source == "file" and self.mask_path is None:
            raise ValueError("mask_source 'file' needs mask_path")


@dataclass(frozen=True)
class NmfConfig:
    max_iter: int = 500
    tol: float = 1e-5


@dataclass(frozen=True)
class PriorConfig:
    p_exp: float = 2.0
    q_exp: float = 1.2
    T_thresh: float = 1.0
    sigma_x: float | None = None
    cross_slice: bool = True


@dataclass(frozen=True)
class MbirConfig:
    sigma_v: float | None = None
    max_iter: int = 300
    stop_tol: float = 1e-5
    positivity: bool = False
    prior: PriorConfig = field(default_factory=PriorConfig)


@dataclass(frozen=True)
class ClusteringConfig:
    max_iter: int = 200
    tol: float = 1e-7
    ridge: float = 1e-6
    n_init: int = 4
    subsample: int = 2_000_000
    erode: bool = False
    overcluster: float = 1.5

    def __post_init__(self):
        if not 1.0 <= self.overcluster <= 8.0:
            raise ValueError(
                f"overcluster must be in [1, 8], got {self.overcluster}"
            )


@dataclass(frozen=True)
class RdmdConfig:
    slice_index: int | None = None
    masks_path: str | None = None


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "runs/amd"
    seed: int = 0
    n_materials: int = 3
    subspace_dim: int | None = None
    simulation: SimulationConfig | None = None
    inputs: InputsConfig | None = None
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    preprocessing: PreprocessingConfig = field(default_factory=PreprocessingConfig)
    nmf: NmfConfig = field(default_factory=NmfConfig)
    mbir: MbirConfig = field(default_factory=MbirConfig)
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    rdmd: RdmdConfig = field(default_factory=RdmdConfig)

    def __post_init__(self):
        simulated = self.simulation is not None
        measured = self.inputs is not None and (
            self.inputs.counts is not None or self.inputs.openbeams is not None
        )
        if simulated == measured:
            raise ValueError(
                "config needs exactly one of the simulation and inputs "
                "sections"
            )
        if measured and (
            self.inputs.counts is None or self.inputs.openbeams is None
        ):
            raise ValueError("inputs section needs both counts and openbeams")
        if measured and self.inputs.grid is None:
            raise ValueError("inputs section needs a grid block")
        if self.n_materials < 1:
            raise ValueError(
                f"n_materials must be >= 1, got {self.n_materials}"
            )
        if self.subspace_dim is not None and self.subspace_dim < 1:
            raise ValueError(
                f"subspace_dim must be >= 1, got {self.subspace_dim}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    @property
    def simulated(self) -> bool:
        return self.simulation is not None


def _build(cls, raw, where):
    """Instantiate a config dataclass from a dict, rejecting unknown keys."""
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{where} must be a mapping, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**raw)


_SECTIONS = {
    "geometry": GeometryConfig,
    "preprocessing": PreprocessingConfig,
    "nmf": NmfConfig,
    "clustering": ClusteringConfig,
    "rdmd": RdmdConfig,
}


def parse_config(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ValueError("config root must be a mapping")
    raw = dict(raw)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build(cls, raw.pop(name), name)
    if raw.get("simulation") is not None:
        sim = dict(raw.pop("simulation"))
        grid = _build(GridConfig, sim.pop("grid", None), "simulation.grid")
        kwargs["simulation"] = _build(
            SimulationConfig, {**sim, "grid": grid}, "simulation"
        )
    else:
        raw.pop("simulation", None)
    if raw.get("inputs") is not None:
        inp = dict(raw.pop("inputs"))
        grid = None
        if inp.get("grid") is not None:
            grid = _build(GridConfig, inp.pop("grid"), "inputs.grid")
        else:
            inp.pop("grid", None)
        kwargs["inputs"] = _build(InputsConfig, {**inp, "grid": grid}, "inputs")
    else:
        raw.pop("inputs", None)
    if raw.get("mbir") is not None:
        mb = dict(raw.pop("mbir"))
        prior = _build(PriorConfig, mb.pop("prior", None), "mbir.prior")
        kwargs["mbir"] = _build(MbirConfig, {**mb, "prior": prior}, "mbir")
    else:
        raw.pop("mbir", None)
    for key in ("out_dir", "seed", "n_materials", "subspace_dim"):
        if key in raw:
            kwargs[key] = raw.pop(key)
    if raw:
        raise ValueError(f"unknown keys in config: {sorted(raw)}")
    return PipelineConfig(**kwargs)


def load_config(
    path: str | Path,
    out_dir: str | None = None,
    seed: int | None = None,
) -> PipelineConfig:
    """Parse a YAML config file, with optional command-line overrides."""
    with open(path) as f:
        cfg = parse_config(yaml.safe_load(f))
    if out_dir is not None:
        cfg = replace(cfg, out_dir=out_dir)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


_REFERENCE = """\
# Reference configuration. Every tunable appears here with its default;
# delete anything you do not want to override.

seed: 0
out_dir: runs/amd
n_materials: 3
subspace_dim: null          # null -> 3 * n_materials components

# Exactly one of `simulation` and `inputs` may be active. To run on
# measured data, set `simulation: null` and fill in the .amdt paths.
simulation:
  rate: 10000.0             # open-beam counts per detector bin
  n_openbeam_sets: 8        # independent flat-field exposures to average
  grid:
    lambda_min: 1.5         # angstrom
    lambda_max: 4.5
    n_bins: 1200
  materials: default        # or a list of {name, baseline, absorption_slope,
                            #   edges: [{lambda_edge, height, width}, ...]}
  phantom: default          # or {shape, materials, voxel_pitch, primitives}
inputs: null
#   counts: path/to/counts.amdt
#   openbeams: path/to/openbeams.amdt
#   grid: {lambda_min: 1.5, lambda_max: 4.5, n_bins: 1200}

geometry:
  n_views: 32
  n_det_rows: 64
  n_det_cols: 64
  pixel_pitch: 1.0          # voxel thickness delta, units of length

preprocessing:
  kernel_size: 5            # Hamming window width for open-beam smoothing
  floor: 1.0e-6             # zero-count guard as a fraction of open beam
  mask_source: auto         # auto | file
  mask_path: null           # required when mask_source: file
  quantile: 0.2             # auto-mask darkness threshold

nmf:
  max_iter: 500
  tol: 1.0e-5               # relative objective decrease over 10 iterations

mbir:
  sigma_v: null             # null -> estimated from background rays
  max_iter: 300             # generous; stop_tol usually ends passes earlier
  stop_tol: 1.0e-5          # relative objective decrease per pass
  positivity: false
  prior:
    p_exp: 2.0
    q_exp: 1.2
    T_thresh: 1.0
    sigma_x: null           # null -> 0.2 x pilot interquartile range
    cross_slice: true

clustering:
  max_iter: 200
  tol: 1.0e-7               # relative log-likelihood increase
  ridge: 1.0e-6             # covariance ridge, fraction of trace/dim
  n_init: 4                 # EM restarts, best kept
  subsample: 2000000        # voxel cap for fitting (assignment uses all)
  erode: false              # trim a 1-voxel shell before computing T
  overcluster: 1.5          # fit ceil(1.5 x clusters), merge extras back

rdmd:
  slice_index: null         # null -> middle slice
  masks_path: null          # per-material masks, required for run-rdmd
"""


def reference_config_text() -> str:
    return _REFERENCE


def write_reference_config(path: str | Path) -> None:
    Path(path).write_text(_REFERENCE)
