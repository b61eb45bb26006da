"""Side-by-side evaluation of an autonomous run against the reference run.

Spectra quality is judged the same way for both: optimal matching of
estimated to ground-truth spectra, then per-material NRMSE. Cost is
judged by reconstruction counts (the structural claim) and by measured
decomposition wall clock, which excludes simulation and preprocessing
since both chains share them unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..clustering import match_materials
from ..tensor_io import SpectraTable, import_spectra_csv
from .run import AMD_STAGES, RDMD_STAGES, RunReport

__all__ = ["ComparisonTable", "compare_runs"]

_SHARED_STAGES = ("simulate", "preprocess")


@dataclass(frozen=True)
class ComparisonTable:
    materials: tuple[str, ...]
    amd_nrmse: np.ndarray
    rdmd_nrmse: np.ndarray
    amd_reconstructions: int
    rdmd_reconstructions: int
    amd_seconds: float
    rdmd_seconds: float

    @property
    def wall_clock_ratio(self) -> float:
        """Reference decomposition time over autonomous decomposition
        time; above 1 means the autonomous chain was faster."""
        return self.rdmd_seconds / self.amd_seconds

    def to_text(self) -> str:
        w = max(len(n) for n in self.materials + ("material",))
        lines = [
            f"{'material':<{w}}  {'amd nrmse':>10}  {'rdmd nrmse':>10}"
        ]
        for j, name in enumerate(self.materials):
            lines.append(
                f"{name:<{w}}  {self.amd_nrmse[j]:>10.4f}  "
                f"{self.rdmd_nrmse[j]:>10.4f}"
            )
        lines += [
            "",
            f"reconstructions: amd {self.amd_reconstructions}, "
            f"rdmd {self.rdmd_reconstructions}",
            f"decomposition seconds: amd {self.amd_seconds:.2f}, "
            f"rdmd {self.rdmd_seconds:.2f}",
            f"wall clock ratio (rdmd/amd): {self.wall_clock_ratio:.3f}",
        ]
        return "\n".join(lines)


def _decomposition_seconds(report: RunReport) -> float:
    canon = RDMD_STAGES if report.method == "rdmd" else AMD_STAGES
    own = [s for s in canon if s not in _SHARED_STAGES]
    return float(
        sum(report.timings_seconds.get(s, 0.0) for s in own)
    )


def _run_spectra(report: RunReport, reference: SpectraTable) -> SpectraTable:
    out_dir = Path(report.config["out_dir"])
    path = out_dir / "spectra.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; was the run completed?")
    est = import_spectra_csv(path)
    grid = reference.grid
    if est.grid.n_bins != grid.n_bins or not np.allclose(
        est.grid.centers(), grid.centers(), rtol=1e-9, atol=1e-9
    ):
        raise ValueError(
            f"{path} is on a different wavelength grid than the reference"
        )
    # CSV round trip rebuilds the grid to float noise; realign exactly
    return SpectraTable(est.names, grid, est.mu)


def compare_runs(
    amd: RunReport, rdmd: RunReport, reference: SpectraTable
) -> ComparisonTable:
    """Build the comparison from two finished run reports.

    Spectra are read from each run's output directory (reports carry
    metrics, not data) and matched independently against `reference`.
    """
    for rep, label in ((amd, "amd"), (rdmd, "rdmd")):
        if rep.partial:
            raise ValueError(f"{label} report is marked partial")
    _, amd_nrmse = match_materials(_run_spectra(amd, reference), reference)
    _, rdmd_nrmse = match_materials(_run_spectra(rdmd, reference), reference)
    return ComparisonTable(
        materials=tuple(reference.names),
        amd_nrmse=amd_nrmse,
        rdmd_nrmse=rdmd_nrmse,
        amd_reconstructions=amd.reconstruction_invocations,
        rdmd_reconstructions=rdmd.reconstruction_invocations,
        amd_seconds=_decomposition_seconds(amd),
        rdmd_seconds=_decomposition_seconds(rdmd),
    )
