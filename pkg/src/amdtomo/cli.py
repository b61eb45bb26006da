"""Command line front end.

Heavy imports are deferred until after argument parsing so that
`--threads` can pin the BLAS/OpenMP pool sizes through the environment
before numpy comes up; set after import they would be ignored.
"""

from __future__ import annotations

import argparse
import os
import sys

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "NUMBA_NUM_THREADS",
)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amdtomo",
        description=(
            "Material decomposition for hyperspectral neutron CT: "
            "simulate data, run the autonomous or the mask-supervised "
            "reference pipeline, and compare the results."
        ),
    )
    subs = parser.add_subparsers(dest="command", required=True)

    def common(sp, stage=False):
        sp.add_argument("--config", required=True, help="YAML run config")
        sp.add_argument("--seed", type=int, help="override config seed")
        sp.add_argument("--out", help="override config output directory")
        if stage:
            sp.add_argument(
                "--stage", help="resume from this stage (runs it and the rest)"
            )
        sp.add_argument(
            "--threads", type=int, help="BLAS/OpenMP thread count"
        )

    common(subs.add_parser("simulate", help="generate synthetic inputs only"))
    common(subs.add_parser("run-amd", help="autonomous pipeline"), stage=True)
    common(
        subs.add_parser("run-rdmd", help="per-bin reference pipeline"),
        stage=True,
    )

    sp = subs.add_parser("compare", help="tabulate two finished runs")
    sp.add_argument("--amd", required=True, help="report.json of the amd run")
    sp.add_argument("--rdmd", required=True, help="report.json of the rdmd run")
    sp.add_argument(
        "--reference", required=True, help="ground-truth spectra CSV"
    )
    sp.add_argument("--out", help="directory for comparison.txt/.json")
    sp.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")

    sp = subs.add_parser(
        "export-plots", help="per-material spectrum CSVs for plotting"
    )
    sp.add_argument("--spectra", required=True, help="estimated spectra CSV")
    sp.add_argument(
        "--reference", help="optional ground-truth CSV for overlay columns"
    )
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
    return parser


def _cmd_run(args) -> int:
    from amdtomo.pipeline import load_config, run_amd, run_rdmd, run_simulation
    from amdtomo.pipeline.run import AMD_STAGES, RDMD_STAGES

    cfg = load_config(args.config, out_dir=args.out, seed=args.seed)
    if args.command == "simulate":
        report = run_simulation(cfg)
    else:
        runner, canon = {
            "run-amd": (run_amd, AMD_STAGES),
            "run-rdmd": (run_rdmd, RDMD_STAGES),
        }[args.command]
        stages = None
        if args.stage is not None:
            if args.stage not in canon:
                raise ValueError(
                    f"unknown stage {args.stage!r}; choose from {list(canon)}"
                )
            stages = canon[canon.index(args.stage):]
        report = runner(cfg, stages=stages)
    for name, dt in sorted(report.timings_seconds.items()):
        print(f"{name}: {dt:.2f} s")
    print(f"report: {os.path.join(cfg.out_dir, 'report.json')}")
    return 0


def _cmd_compare(args) -> int:
    import json
    from pathlib import Path

    import numpy as np

    from amdtomo.pipeline import RunReport, compare_runs
    from amdtomo.tensor_io import import_spectra_csv

    table = compare_runs(
        RunReport.load(args.amd),
        RunReport.load(args.rdmd),
        import_spectra_csv(args.reference),
    )
    print(table.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.txt").write_text(table.to_text() + "\n")
        doc = {
            "materials": list(table.materials),
            "amd_nrmse": np.asarray(table.amd_nrmse).tolist(),
            "rdmd_nrmse": np.asarray(table.rdmd_nrmse).tolist(),
            "amd_reconstructions": table.amd_reconstructions,
            "rdmd_reconstructions": table.rdmd_reconstructions,
            "amd_seconds": table.amd_seconds,
            "rdmd_seconds": table.rdmd_seconds,
            "wall_clock_ratio": table.wall_clock_ratio,
        }
        (out / "comparison.json").write_text(json.dumps(doc, indent=2) + "\n")
        print(f"wrote {out / 'comparison.txt'} and {out / 'comparison.json'}")
    return 0


def _cmd_export_plots(args) -> int:
    from pathlib import Path

    import numpy as np

    from amdtomo.clustering import match_materials
    from amdtomo.tensor_io import SpectraTable, import_spectra_csv

    est = import_spectra_csv(args.spectra)
    ref = None
    if args.reference:
        ref = import_spectra_csv(args.reference)
        if ref.grid.n_bins != est.grid.n_bins or not np.allclose(
            ref.grid.centers(), est.grid.centers(), rtol=1e-9, atol=1e-9
        ):
            raise ValueError("reference is on a different wavelength grid")
        if len(ref.names) != len(est.names):
            raise ValueError(
                f"{len(est.names)} estimated vs {len(ref.names)} reference "
                "materials"
            )
        ref = SpectraTable(ref.names, est.grid, ref.mu)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lam = est.grid.centers()
    match = None
    if ref is not None:
        perm, _ = match_materials(est, ref)
        # invert: for estimated row i, which reference row it serves
        match = {int(perm[j]): j for j in range(len(ref.names))}
    for i, name in enumerate(est.names):
        header = "lambda_angstrom,mu"
        cols = [lam, est.mu[i]]
        if match is not None:
            j = match[i]
            header += f",reference_mu_{ref.names[j]}"
            cols.append(ref.mu[j])
        body = "\n".join(
            ",".join(f"{v:.9g}" for v in row) for row in zip(*cols)
        )
        path = out / f"{name}.csv"
        path.write_text(header + "\n" + body + "\n")
        print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if getattr(args, "threads", None) is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)

    from amdtomo.pipeline import StageError

    try:
        if args.command in ("simulate", "run-amd", "run-rdmd"):
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        return _cmd_export_plots(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
