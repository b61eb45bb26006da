"""Staged execution of the decomposition workflow with persisted state.

Every stage writes its products into the run's output directory and
records timing and scalar metrics in `report.json`, so any stage can be
re-run later from what is already on disk. Two stage chains share the
front half:

  amd:  simulate -> preprocess -> subspace-nmf -> subspace-mbir
        -> segment -> material-nmf -> material-mbir
  rdmd: simulate -> preprocess -> rdmd-decompose -> rdmd-nnls -> rdmd-mbir

The reference method (rdmd) reconstructs every wavelength bin of one
slice with filtered back projection and reads spectra off user-supplied
region masks; the autonomous chain gets them from clustered subspace
reconstructions. Both end with the same fixed-dictionary solve and
per-material reconstruction.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..clustering import (
    GmmOptions,
    Segmentation,
    fit_gmm,
    material_dictionary,
    match_materials,
    reduce_mixture,
    segment,
)
from ..factorization import (
    NmfOptions,
    choose_subspace_dim,
    flatten_densities,
    nmf,
    nmf_fixed_dictionary,
)
from ..preprocessing import (
    DensityStack,
    auto_background_mask,
    average_openbeams,
    compute_density,
    correct_background,
    smooth_openbeam,
)
from ..simulation import (
    BraggEdge,
    EdgeModel,
    Phantom,
    default_materials,
    default_phantom,
    phantom_from_config,
    simulate_openbeam,
    simulate_radiographs,
    synth_spectra,
)
from ..tensor_io import (
    HyperTensor,
    SpectraTable,
    WavelengthGrid,
    export_spectra_csv,
    import_spectra_csv,
    load_tensor,
    save_tensor,
)
from ..tomography import (
    MbirOptions,
    PriorParams,
    ScanGeometry,
    fbp_slice,
    reconstruct_stack,
    uniform_angles,
)
from .config import GeometryConfig, GridConfig, PipelineConfig

__all__ = [
    "AMD_STAGES",
    "RDMD_STAGES",
    "RunReport",
    "StageError",
    "masks_from_phantom",
    "run_amd",
    "run_rdmd",
    "run_simulation",
]

AMD_STAGES = (
    "simulate",
    "preprocess",
    "subspace-nmf",
    "subspace-mbir",
    "segment",
    "material-nmf",
    "material-mbir",
)

RDMD_STAGES = (
    "simulate",
    "preprocess",
    "rdmd-decompose",
    "rdmd-nnls",
    "rdmd-mbir",
)

REPORT_NAME = "report.json"


class StageError(RuntimeError):
    """A pipeline stage failed; the report on disk is marked partial."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class RunReport:
    """Everything a finished (or aborted) run leaves behind besides data.

    `metrics` is flat name -> float; keys are prefixed with the stage
    that produced them so re-running a stage replaces exactly its own
    entries. `timings_seconds` is kept apart from the metrics because
    wall clock is the one thing a repeated run never reproduces.
    """

    version: str
    method: str
    config: dict
    partial: bool = False
    failed_stage: str | None = None
    timings_seconds: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    reconstruction_invocations: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "RunReport":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown report fields {sorted(unknown)}")
        return cls(**data)

    def files(self) -> list[str]:
        out = set()
        for names in self.manifest.values():
            out.update(names)
        return sorted(out)


def _build_grid(g: GridConfig) -> WavelengthGrid:
    return WavelengthGrid(g.lambda_min, g.lambda_max, g.n_bins)


def _build_geometry(g: GeometryConfig) -> ScanGeometry:
    return ScanGeometry(
        uniform_angles(g.n_views), g.n_det_rows, g.n_det_cols, g.pixel_pitch
    )


def _build_materials(spec) -> tuple[EdgeModel, ...]:
    if spec == "default":
        return default_materials()
    if isinstance(spec, (list, tuple)):
        models = []
        for raw in spec:
            raw = dict(raw)
            edges = tuple(BraggEdge(**e) for e in raw.pop("edges", ()))
            models.append(EdgeModel(edges=edges, **raw))
        return tuple(models)
    raise ValueError(
        f"materials must be 'default' or a list of edge models, got {spec!r}"
    )


def _build_phantom(spec, geo: GeometryConfig) -> Phantom:
    shape = (geo.n_det_rows, geo.n_det_cols, geo.n_det_cols)
    if spec == "default":
        return default_phantom(shape, geo.pixel_pitch)
    if isinstance(spec, dict):
        spec = dict(spec)
        spec.setdefault("voxel_pitch", geo.pixel_pitch)
        return phantom_from_config(spec)
    raise ValueError(
        f"phantom must be 'default' or a config mapping, got {spec!r}"
    )


def _estimate_sigma_v(V: np.ndarray, bg: np.ndarray) -> np.ndarray:
    """Per-column noise level from rays that miss the sample.

    Background coefficients should scatter around zero, so their standard
    deviation is a direct read of the forward-model noise. Falls back to
    the all-ray deviation when the mask selects nothing, and floors the
    result so noiseless data still yields a usable weight.
    """
    vals = V[bg] if bg.any() else V
    sig = vals.std(axis=0)
    floor = 1e-6 * np.maximum(np.abs(V).max(axis=0, initial=0.0), 1.0)
    return np.maximum(sig, floor)


def masks_from_phantom(
    labels: HyperTensor,
    slice_index: int | None = None,
    shrink: int = 1,
    n_materials: int | None = None,
) -> HyperTensor:
    """Per-material region masks for one slice of a labeled volume.

    Stands in for the manual region picking the reference method needs:
    each material's in-slice footprint, eroded `shrink` voxels to stay
    clear of partial-volume boundaries (a region erosion would wipe out
    keeps its full footprint). Returns a [material, row, col] tensor of
    0/1 indicators.
    """
    labels.require("slice", "row", "col")
    n_s = labels.dims[0]
    s = n_s // 2 if slice_index is None else int(slice_index)
    if not 0 <= s < n_s:
        raise ValueError(f"slice_index {s} outside 0..{n_s - 1}")
    n_m = int(labels.data.max()) if n_materials is None else int(n_materials)
    if n_m < 1:
        raise ValueError("labeled volume has no materials")
    lab2 = labels.data[s]
    out = np.zeros((n_m,) + lab2.shape)
    for m in range(1, n_m + 1):
        mask = lab2 == m
        if shrink > 0 and mask.any():
            core = ndimage.binary_erosion(mask, iterations=shrink)
            if core.any():
                mask = core
        if not mask.any():
            raise ValueError(f"material {m} does not appear in slice {s}")
        out[m - 1] = mask
    return HyperTensor(out, ("material", "row", "col"))


class _Run:
    """Mutable state shared by the stages of one execution.

    Intermediates live in `cache` keyed by logical name; a miss falls
    back to the persisted file, which is how resumed runs pick up where
    an earlier process stopped.
    """

    def __init__(self, cfg: PipelineConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.cache: dict = {}

    def path(self, name: str) -> Path:
        return self.out / name

    def grid(self) -> WavelengthGrid:
        src = self.cfg.simulation.grid if self.cfg.simulated else self.cfg.inputs.grid
        return _build_grid(src)

    def geometry(self) -> ScanGeometry:
        return _build_geometry(self.cfg.geometry)

    def _load(self, name: str, axes: tuple, producer: str) -> HyperTensor:
        path = self.path(name)
        if not path.exists():
            raise FileNotFoundError(
                f"{path} is missing; run the {producer!r} stage first"
            )
        t = load_tensor(path)
        t.require(*axes)
        return t

    def counts(self) -> HyperTensor:
        if "counts" not in self.cache:
            axes = ("view", "row", "col", "wavelength")
            if self.cfg.simulated:
                self.cache["counts"] = self._load("counts.amdt", axes, "simulate")
            else:
                t = load_tensor(self.cfg.inputs.counts)
                t.require(*axes)
                self.cache["counts"] = t
        return self.cache["counts"]

    def openbeams(self) -> HyperTensor:
        if "openbeams" not in self.cache:
            axes = ("set", "row", "col", "wavelength")
            if self.cfg.simulated:
                self.cache["openbeams"] = self._load(
                    "openbeams.amdt", axes, "simulate"
                )
            else:
                t = load_tensor(self.cfg.inputs.openbeams)
                t.require(*axes)
                self.cache["openbeams"] = t
        return self.cache["openbeams"]

    def density(self) -> DensityStack:
        if "density" not in self.cache:
            p = self._load(
                "density.amdt",
                ("view", "row", "col", "wavelength"),
                "preprocess",
            )
            off = self._load("offsets.amdt", ("view", "wavelength"), "preprocess")
            mask = self._load("background_mask.amdt", ("row", "col"), "preprocess")
            self.cache["density"] = DensityStack(p, off.data, mask.data != 0)
        return self.cache["density"]

    def background_mask(self) -> np.ndarray:
        if "density" in self.cache:
            return self.cache["density"].background_mask
        mask = self._load("background_mask.amdt", ("row", "col"), "preprocess")
        return mask.data != 0

    def subspace_dictionary(self) -> np.ndarray:
        if "D_s" not in self.cache:
            self.cache["D_s"] = self._load(
                "D_s.amdt", ("wavelength", "subspace"), "subspace-nmf"
            ).data
        return self.cache["D_s"]

    def subspace_coefficients(self) -> HyperTensor:
        if "V_s" not in self.cache:
            self.cache["V_s"] = self._load(
                "V_s.amdt",
                ("view", "row", "col", "subspace"),
                "subspace-nmf",
            )
        return self.cache["V_s"]

    def subspace_volumes(self) -> HyperTensor:
        if "x_s" not in self.cache:
            self.cache["x_s"] = self._load(
                "x_s.amdt",
                ("slice", "row", "col", "subspace"),
                "subspace-mbir",
            )
        return self.cache["x_s"]

    def segmentation(self) -> Segmentation:
        if "segmentation" not in self.cache:
            labels = self._load("labels.amdt", ("slice", "row", "col"), "segment")
            path = self.path("segmentation.json")
            if not path.exists():
                raise FileNotFoundError(
                    f"{path} is missing; run the 'segment' stage first"
                )
            data = json.loads(path.read_text())
            means = np.array(
                [
                    [math.nan if v is None else v for v in row]
                    for row in data["cluster_means"]
                ]
            )
            self.cache["segmentation"] = Segmentation(
                labels,
                means,
                int(data["background_cluster_id"]),
                np.array(data["valid_rows"], dtype=bool),
            )
        return self.cache["segmentation"]

    def material_dictionary_matrix(self) -> np.ndarray:
        if "D_m" not in self.cache:
            self.cache["D_m"] = self._load(
                "D_m.amdt", ("wavelength", "material"), self._dict_producer()
            ).data
        return self.cache["D_m"]

    def material_coefficients(self) -> HyperTensor:
        if "V_m" not in self.cache:
            self.cache["V_m"] = self._load(
                "V_m.amdt",
                ("view", "row", "col", "material"),
                self._nnls_producer(),
            )
        return self.cache["V_m"]

    def _dict_producer(self) -> str:
        return "material-nmf" if self.cfg.rdmd.masks_path is None else "rdmd-decompose"

    def _nnls_producer(self) -> str:
        return "material-nmf" if self.cfg.rdmd.masks_path is None else "rdmd-nnls"

    def reference_spectra(self) -> SpectraTable | None:
        """Ground-truth spectra if the simulate stage left them behind.

        Rebuilt on the run's exact grid: the CSV round trip reconstructs
        bin edges from printed centers, which lands within float noise of
        the original but not bitwise on it.
        """
        path = self.path("reference_spectra.csv")
        if not path.exists():
            return None
        ref = import_spectra_csv(path)
        grid = self.grid()
        if ref.grid.n_bins != grid.n_bins or not np.allclose(
            ref.grid.centers(), grid.centers(), rtol=1e-9, atol=1e-9
        ):
            return None
        return SpectraTable(ref.names, grid, ref.mu)


def _nrmse_metrics(
    run: _Run, stage: str, table: SpectraTable
) -> dict[str, float]:
    """Match estimated spectra against ground truth when it is on disk."""
    ref = run.reference_spectra()
    if ref is None or len(ref.names) != len(table.names):
        return {}
    perm, nrmse = match_materials(table, ref)
    out = {}
    for j, name in enumerate(ref.names):
        out[f"{stage}.nrmse.{name}"] = float(nrmse[j])
        out[f"{stage}.match.{name}"] = float(perm[j])
    return out


def _mbir_metrics(stage: str, results: list) -> dict[str, float]:
    out = {f"{stage}.reconstructions": float(len(results))}
    for j, res in enumerate(results):
        out[f"{stage}.final_objective.{j}"] = float(res.objective_trace[-1])
        out[f"{stage}.converged.{j}"] = float(res.converged)
        out[f"{stage}.noise_sigma.{j}"] = float(res.noise_sigma)
    return out


def _reconstruct(
    run: _Run, V: np.ndarray, geom: ScanGeometry, bg: np.ndarray, stage: str
) -> tuple[HyperTensor, dict[str, float]]:
    """Shared coefficient-stack reconstruction for both chains."""
    mb = run.cfg.mbir
    if mb.sigma_v is not None:
        sig = np.full(V.shape[1], float(mb.sigma_v))
    else:
        sig = _estimate_sigma_v(V, bg)
    pp = PriorParams(
        p_exp=mb.prior.p_exp,
        q_exp=mb.prior.q_exp,
        T_thresh=mb.prior.T_thresh,
        sigma_x=mb.prior.sigma_x,
        cross_slice=mb.prior.cross_slice,
    )
    opts = MbirOptions(
        max_iter=mb.max_iter,
        stop_tol=mb.stop_tol,
        positivity=mb.positivity,
        order_seed=run.cfg.seed,
    )
    collect: list = []
    x = reconstruct_stack(V, geom, sig, pp, opts, collect)
    return x, _mbir_metrics(stage, collect)


def _rdmd_slice(run: _Run, n_rows: int) -> int:
    s = run.cfg.rdmd.slice_index
    s = n_rows // 2 if s is None else int(s)
    if not 0 <= s < n_rows:
        raise ValueError(f"rdmd slice_index {s} outside 0..{n_rows - 1}")
    return s


def _rdmd_geometry(run: _Run) -> ScanGeometry:
    g = run.cfg.geometry
    return ScanGeometry(
        uniform_angles(g.n_views), 1, g.n_det_cols, g.pixel_pitch
    )


# ---------------------------------------------------------------- stages


def _stage_simulate(run: _Run):
    cfg = run.cfg
    sim = cfg.simulation
    grid = _build_grid(sim.grid)
    geom = run.geometry()
    spectra = synth_spectra(_build_materials(sim.materials), grid)
    phantom = _build_phantom(sim.phantom, cfg.geometry)
    y, _ = simulate_radiographs(phantom, spectra, geom, sim.rate, cfg.seed)
    beams = simulate_openbeam(
        sim.rate, geom, grid, sim.n_openbeam_sets, cfg.seed
    )
    # reference rows in phantom label order, so row m is material label m+1
    order = [spectra.names.index(n) for n in phantom.material_names]
    reference = SpectraTable(
        phantom.material_names, grid, spectra.mu[order]
    )
    save_tensor(y, run.path("counts.amdt"))
    save_tensor(beams, run.path("openbeams.amdt"))
    save_tensor(phantom.label_volume, run.path("phantom_labels.amdt"))
    export_spectra_csv(reference, run.path("reference_spectra.csv"))
    run.cache["counts"] = y
    run.cache["openbeams"] = beams
    metrics = {
        "simulate.mean_counts": float(y.data.mean()),
        "simulate.openbeam_rate": float(sim.rate),
        "simulate.n_materials": float(phantom.n_materials),
    }
    files = [
        "counts.amdt",
        "openbeams.amdt",
        "phantom_labels.amdt",
        "reference_spectra.csv",
    ]
    return files, metrics


def _stage_preprocess(run: _Run):
    cfg = run.cfg
    pre = cfg.preprocessing
    grid = run.grid()
    geom = run.geometry()
    beam = smooth_openbeam(average_openbeams(run.openbeams()), pre.kernel_size)
    run.cache.pop("openbeams", None)
    counts = run.counts()
    expect = (geom.n_views, geom.n_det_rows, geom.n_det_cols, grid.n_bins)
    if counts.dims != expect:
        raise ValueError(
            f"counts dims {counts.dims} do not match configured "
            f"geometry/grid {expect}"
        )
    p_meas = compute_density(counts, beam, pre.floor)
    run.cache.pop("counts", None)
    del counts
    if pre.mask_source == "auto":
        mask = auto_background_mask(p_meas, pre.quantile)
    else:
        t = load_tensor(pre.mask_path)
        t.require("row", "col")
        mask = t.data != 0
    stack = correct_background(p_meas, mask)
    del p_meas
    save_tensor(stack.p, run.path("density.amdt"))
    save_tensor(
        HyperTensor(stack.offsets, ("view", "wavelength")),
        run.path("offsets.amdt"),
    )
    save_tensor(
        HyperTensor(mask.astype(np.float64), ("row", "col")),
        run.path("background_mask.amdt"),
    )
    run.cache["density"] = stack
    metrics = {
        "preprocess.background_fraction": float(mask.mean()),
        "preprocess.offset_abs_mean": float(np.abs(stack.offsets).mean()),
        "preprocess.density_max": float(stack.p.data.max()),
    }
    return ["density.amdt", "offsets.amdt", "background_mask.amdt"], metrics


def _stage_subspace_nmf(run: _Run):
    cfg = run.cfg
    stack = run.density()
    n_s = cfg.subspace_dim or choose_subspace_dim(cfg.n_materials)
    P = flatten_densities(stack)
    fac = nmf(
        P, n_s, NmfOptions(cfg.nmf.max_iter, cfg.nmf.tol, seed=cfg.seed)
    )
    n_v, n_r, n_c, _ = stack.p.dims
    V_s = HyperTensor(
        fac.V.reshape(n_v, n_r, n_c, n_s),
        ("view", "row", "col", "subspace"),
    )
    save_tensor(
        HyperTensor(fac.D, ("wavelength", "subspace")), run.path("D_s.amdt")
    )
    save_tensor(V_s, run.path("V_s.amdt"))
    run.cache["D_s"] = fac.D
    run.cache["V_s"] = V_s
    metrics = {
        "subspace-nmf.components": float(n_s),
        "subspace-nmf.final_objective": float(fac.objective_trace[-1]),
        "subspace-nmf.iterations": float(len(fac.objective_trace)),
        "subspace-nmf.converged": float(fac.converged),
        "subspace-nmf.clamped_fraction": float(fac.clamped_fraction),
    }
    return ["D_s.amdt", "V_s.amdt"], metrics


def _stage_subspace_mbir(run: _Run):
    V_s = run.subspace_coefficients()
    n_v, n_r, n_c, n_s = V_s.dims
    V = V_s.data.reshape(-1, n_s)
    mask = run.background_mask()
    bg = np.broadcast_to(mask[None], (n_v, n_r, n_c)).reshape(-1)
    x, metrics = _reconstruct(run, V, run.geometry(), bg, "subspace-mbir")
    x_s = HyperTensor(x.data, ("slice", "row", "col", "subspace"))
    save_tensor(x_s, run.path("x_s.amdt"))
    run.cache["x_s"] = x_s
    return ["x_s.amdt"], metrics


def _stage_segment(run: _Run):
    cfg = run.cfg
    x_s = run.subspace_volumes()
    cl = cfg.clustering
    n_regions = cfg.n_materials + 1
    n_components = math.ceil(cl.overcluster * n_regions)
    model = fit_gmm(
        x_s,
        n_components,
        GmmOptions(
            max_iter=cl.max_iter,
            tol=cl.tol,
            ridge=cl.ridge,
            seed=cfg.seed,
            n_init=cl.n_init,
            subsample=cl.subsample,
        ),
    )
    groups = None
    if n_components > n_regions:
        _, groups = reduce_mixture(model, n_regions)
    seg = segment(x_s, model, erode=cl.erode, groups=groups)
    save_tensor(seg.labels, run.path("labels.amdt"))
    # cluster means can carry NaN rows (empty clusters), which the tensor
    # container refuses; JSON gets them as nulls instead
    doc = {
        "background_cluster_id": seg.background_cluster_id,
        "valid_rows": [bool(v) for v in seg.valid_rows],
        "cluster_means": [
            [None if not math.isfinite(v) else v for v in row]
            for row in seg.cluster_means
        ],
        "gmm_weights": model.weights.tolist(),
        "gmm_means": model.means.tolist(),
        "gmm_covariances": model.covariances.tolist(),
        "gmm_log_likelihood": float(model.log_likelihood_trace[-1]),
        "component_groups": None if groups is None else [list(g) for g in groups],
    }
    run.path("segmentation.json").write_text(
        json.dumps(doc, indent=2) + "\n"
    )
    run.cache["segmentation"] = seg
    counts = np.bincount(
        seg.labels.data.astype(np.int64).reshape(-1), minlength=n_regions
    )
    metrics = {
        "segment.n_clusters": float(n_regions),
        "segment.mixture_components": float(n_components),
        "segment.background_cluster_id": float(seg.background_cluster_id),
        "segment.valid_rows": float(seg.valid_rows.sum()),
        "segment.log_likelihood": float(model.log_likelihood_trace[-1]),
    }
    for k in range(n_regions):
        metrics[f"segment.cluster_fraction.{k}"] = float(
            counts[k] / counts.sum()
        )
    return ["labels.amdt", "segmentation.json"], metrics


def _stage_material_nmf(run: _Run):
    cfg = run.cfg
    D_s = run.subspace_dictionary()
    seg = run.segmentation()
    stack = run.density()
    grid = run.grid()
    delta = cfg.geometry.pixel_pitch
    D_m, table = material_dictionary(D_s, seg, delta, grid)
    P = flatten_densities(stack)
    V, residuals = nmf_fixed_dictionary(P, D_m)
    n_v, n_r, n_c, _ = stack.p.dims
    V_m = HyperTensor(
        V.reshape(n_v, n_r, n_c, V.shape[1]),
        ("view", "row", "col", "material"),
    )
    save_tensor(
        HyperTensor(D_m, ("wavelength", "material")), run.path("D_m.amdt")
    )
    save_tensor(V_m, run.path("V_m.amdt"))
    export_spectra_csv(table, run.path("spectra.csv"))
    run.cache["D_m"] = D_m
    run.cache["V_m"] = V_m
    metrics = {
        "material-nmf.materials": float(D_m.shape[1]),
        "material-nmf.residual_rms": float(
            np.sqrt(np.mean(residuals**2))
        ),
        "material-nmf.residual_max": float(residuals.max()),
    }
    metrics.update(_nrmse_metrics(run, "material-nmf", table))
    return ["D_m.amdt", "V_m.amdt", "spectra.csv"], metrics


def _stage_material_mbir(run: _Run):
    V_m = run.material_coefficients()
    n_v, n_r, n_c, n_m = V_m.dims
    V = V_m.data.reshape(-1, n_m)
    mask = run.background_mask()
    bg = np.broadcast_to(mask[None], (n_v, n_r, n_c)).reshape(-1)
    x, metrics = _reconstruct(run, V, run.geometry(), bg, "material-mbir")
    x_m = HyperTensor(x.data, ("slice", "row", "col", "material"))
    save_tensor(x_m, run.path("x_m.amdt"))
    return ["x_m.amdt"], metrics


def _stage_rdmd_decompose(run: _Run):
    cfg = run.cfg
    if cfg.rdmd.masks_path is None:
        raise ValueError(
            "the reference method needs per-material region masks; "
            "set rdmd.masks_path"
        )
    masks = load_tensor(cfg.rdmd.masks_path)
    masks.require("material", "row", "col")
    stack = run.density()
    grid = run.grid()
    n_v, n_r, n_c, n_k = stack.p.dims
    if masks.dims[1:] != (n_c, n_c):
        raise ValueError(
            f"masks are {masks.dims[1:]}, reconstruction slice is "
            f"{(n_c, n_c)}"
        )
    n_m = masks.dims[0]
    if n_m != cfg.n_materials:
        raise ValueError(
            f"{n_m} masks but n_materials={cfg.n_materials}"
        )
    s = _rdmd_slice(run, n_r)
    geom1 = _rdmd_geometry(run)
    sino = stack.p.data[:, s, :, :]
    recons = np.empty((n_k, n_c, n_c))
    for k in range(n_k):
        recons[k] = fbp_slice(np.ascontiguousarray(sino[:, :, k]), geom1)
    mu = np.empty((n_m, n_k))
    for m in range(n_m):
        sel = masks.data[m] != 0
        mu[m] = recons[:, sel].mean(axis=1)
    neg = float(
        -mu[mu < 0].sum() / max(np.abs(mu).sum(), np.finfo(np.float64).tiny)
    )
    np.maximum(mu, 0.0, out=mu)
    names = tuple(f"material_{m}" for m in range(n_m))
    table = SpectraTable(names, grid, mu)
    D_m = np.ascontiguousarray(mu.T) * cfg.geometry.pixel_pitch
    save_tensor(
        HyperTensor(recons, ("wavelength", "row", "col")),
        run.path("bin_recons.amdt"),
    )
    save_tensor(
        HyperTensor(D_m, ("wavelength", "material")), run.path("D_m.amdt")
    )
    export_spectra_csv(table, run.path("spectra.csv"))
    run.cache["D_m"] = D_m
    metrics = {
        "rdmd-decompose.reconstructions": float(n_k),
        "rdmd-decompose.slice_index": float(s),
        "rdmd-decompose.clamped_fraction": neg,
    }
    metrics.update(_nrmse_metrics(run, "rdmd-decompose", table))
    return ["bin_recons.amdt", "D_m.amdt", "spectra.csv"], metrics


def _stage_rdmd_nnls(run: _Run):
    cfg = run.cfg
    stack = run.density()
    D_m = run.material_dictionary_matrix()
    n_v, n_r, n_c, n_k = stack.p.dims
    s = _rdmd_slice(run, n_r)
    P = stack.p.data[:, s, :, :].reshape(n_v * n_c, n_k)
    V, residuals = nmf_fixed_dictionary(P, D_m)
    V_m = HyperTensor(
        V.reshape(n_v, 1, n_c, V.shape[1]),
        ("view", "row", "col", "material"),
    )
    save_tensor(V_m, run.path("V_m.amdt"))
    run.cache["V_m"] = V_m
    metrics = {
        "rdmd-nnls.residual_rms": float(np.sqrt(np.mean(residuals**2))),
        "rdmd-nnls.residual_max": float(residuals.max()),
    }
    return ["V_m.amdt"], metrics


def _stage_rdmd_mbir(run: _Run):
    V_m = run.material_coefficients()
    n_v, one, n_c, n_m = V_m.dims
    if one != 1:
        raise ValueError("reference-method coefficients must be single-slice")
    mask = run.background_mask()
    s = _rdmd_slice(run, mask.shape[0])
    V = V_m.data.reshape(-1, n_m)
    bg = np.broadcast_to(mask[s][None], (n_v, n_c)).reshape(-1)
    x, metrics = _reconstruct(run, V, _rdmd_geometry(run), bg, "rdmd-mbir")
    x_m = HyperTensor(x.data, ("slice", "row", "col", "material"))
    save_tensor(x_m, run.path("x_m.amdt"))
    return ["x_m.amdt"], metrics


_STAGE_FNS = {
    "simulate": _stage_simulate,
    "preprocess": _stage_preprocess,
    "subspace-nmf": _stage_subspace_nmf,
    "subspace-mbir": _stage_subspace_mbir,
    "segment": _stage_segment,
    "material-nmf": _stage_material_nmf,
    "material-mbir": _stage_material_mbir,
    "rdmd-decompose": _stage_rdmd_decompose,
    "rdmd-nnls": _stage_rdmd_nnls,
    "rdmd-mbir": _stage_rdmd_mbir,
}


def _check_stages(stages, canon, cfg) -> tuple:
    stages = tuple(stages)
    bad = [s for s in stages if s not in canon]
    if bad:
        raise ValueError(f"unknown stages {bad}; choose from {list(canon)}")
    idx = [canon.index(s) for s in stages]
    if len(set(idx)) != len(idx) or sorted(idx) != idx:
        raise ValueError("stages must be unique and in pipeline order")
    if "simulate" in stages and not cfg.simulated:
        raise ValueError("the simulate stage needs a simulation config")
    return stages


def _execute(cfg: PipelineConfig, method: str, canon, stages) -> RunReport:
    if stages is None:
        stages = canon if cfg.simulated else canon[1:]
    else:
        stages = _check_stages(stages, canon, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    report_path = out / REPORT_NAME
    from .. import __version__

    if report_path.exists():
        report = RunReport.load(report_path)
        report.version = __version__
        report.method = method
        report.config = asdict(cfg)
    else:
        report = RunReport(
            version=__version__, method=method, config=asdict(cfg)
        )
    report.partial = False
    report.failed_stage = None
    for name in stages:
        t0 = time.perf_counter()
        try:
            files, metrics = _STAGE_FNS[name](run)
        except Exception as exc:
            report.partial = True
            report.failed_stage = name
            _finish(report, out)
            raise StageError(name, exc) from exc
        report.timings_seconds[name] = time.perf_counter() - t0
        stale = [k for k in report.metrics if k.startswith(name + ".")]
        for k in stale:
            del report.metrics[k]
        report.metrics.update(metrics)
        report.manifest[name] = list(files)
    _finish(report, out)
    return report


def _finish(report: RunReport, out: Path) -> None:
    report.reconstruction_invocations = int(
        round(
            sum(
                v
                for k, v in report.metrics.items()
                if k.endswith(".reconstructions")
            )
        )
    )
    report.save(out / REPORT_NAME)
    if not report.partial:
        missing = [f for f in report.files() if not (out / f).exists()]
        if missing:
            raise RuntimeError(
                f"manifest files missing after run: {missing}"
            )


def run_amd(cfg: PipelineConfig, stages=None) -> RunReport:
    """Execute the autonomous chain (or the `stages` subset, resuming
    from persisted intermediates)."""
    return _execute(cfg, "amd", AMD_STAGES, stages)


def run_rdmd(cfg: PipelineConfig, stages=None) -> RunReport:
    """Execute the mask-supervised reference chain."""
    return _execute(cfg, "rdmd", RDMD_STAGES, stages)


def run_simulation(cfg: PipelineConfig) -> RunReport:
    """Generate and persist synthetic inputs only."""
    if not cfg.simulated:
        raise ValueError("run_simulation needs a simulation config")
    return _execute(cfg, "simulate", AMD_STAGES, ("simulate",))
