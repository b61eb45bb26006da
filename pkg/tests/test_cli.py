"""Exit codes, stage resumption, and file outputs of the amdtomo command."""

import json

import pytest
import yaml

from amdtomo import load_tensor, save_tensor
from amdtomo.cli import main
from amdtomo.pipeline.run import masks_from_phantom


def write_config(path, out_dir, **over):
    raw = {
        "seed": 5,
        "out_dir": str(out_dir),
        "n_materials": 3,
        "simulation": {
            "rate": 1e4,
            "n_openbeam_sets": 4,
            "grid": {"lambda_min": 1.5, "lambda_max": 4.5, "n_bins": 48},
        },
        "geometry": {"n_views": 8, "n_det_rows": 16, "n_det_cols": 16},
        "nmf": {"max_iter": 150, "tol": 1e-4},
        "mbir": {"max_iter": 12, "stop_tol": 1e-4},
        "clustering": {"n_init": 2, "max_iter": 80},
    }
    raw.update(over)
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture(scope="module")
def amd_cli_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_amd")
    out = root / "run"
    cfg = write_config(root / "amd.yaml", out)
    assert main(["simulate", "--config", str(cfg)]) == 0
    assert main(["run-amd", "--config", str(cfg), "--stage", "preprocess"]) == 0
    return cfg, out


@pytest.fixture(scope="module")
def rdmd_cli_run(amd_cli_run, tmp_path_factory):
    _, amd_out = amd_cli_run
    root = tmp_path_factory.mktemp("cli_rdmd")
    out = root / "run"
    masks = masks_from_phantom(
        load_tensor(amd_out / "phantom_labels.amdt"), shrink=0
    )
    masks_path = root / "masks.amdt"
    save_tensor(masks, masks_path)
    cfg = write_config(
        root / "rdmd.yaml", out, rdmd={"masks_path": str(masks_path)}
    )
    assert main(["run-rdmd", "--config", str(cfg)]) == 0
    return cfg, out


class TestExitCodes:
    def test_zero_threads_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.yaml"
        code = main(
            ["run-amd", "--config", str(cfg), "--threads", "0"]
        )
        assert code == 1
        assert "--threads" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["run-amd", "--config", str(tmp_path / "nope.yaml")])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_unknown_stage_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "run")
        code = main(
            ["run-amd", "--config", str(cfg), "--stage", "polish"]
        )
        assert code == 1
        assert "unknown stage" in capsys.readouterr().err

    def test_stage_failure_exits_two(self, tmp_path, capsys):
        # rdmd without masks dies inside its first own stage
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "run")
        code = main(["run-rdmd", "--config", str(cfg)])
        assert code == 2
        assert "rdmd-decompose" in capsys.readouterr().err


class TestRunCommands:
    def test_resumed_run_reports_all_stages(self, amd_cli_run, capsys):
        cfg, out = amd_cli_run
        report = json.loads((out / "report.json").read_text())
        assert not report["partial"]
        assert set(report["timings_seconds"]) == {
            "simulate",
            "preprocess",
            "subspace-nmf",
            "subspace-mbir",
            "segment",
            "material-nmf",
            "material-mbir",
        }
        assert report["reconstruction_invocations"] == 12

    def test_run_prints_report_path(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "sim")
        assert main(["simulate", "--config", str(cfg)]) == 0
        text = capsys.readouterr().out
        assert "simulate:" in text
        assert "report.json" in text

    def test_out_override_redirects_run(self, tmp_path):
        cfg = write_config(tmp_path / "c.yaml", tmp_path / "a")
        alt = tmp_path / "b"
        assert main(
            ["simulate", "--config", str(cfg), "--out", str(alt)]
        ) == 0
        assert (alt / "counts.amdt").exists()
        assert not (tmp_path / "a").exists()


class TestCompare:
    def test_writes_table_and_json(
        self, amd_cli_run, rdmd_cli_run, tmp_path, capsys
    ):
        _, amd_out = amd_cli_run
        _, rdmd_out = rdmd_cli_run
        out = tmp_path / "cmp"
        code = main(
            [
                "compare",
                "--amd", str(amd_out / "report.json"),
                "--rdmd", str(rdmd_out / "report.json"),
                "--reference", str(amd_out / "reference_spectra.csv"),
                "--out", str(out),
            ]
        )
        assert code == 0
        text = capsys.readouterr().out
        assert "reconstructions" in text
        assert (out / "comparison.txt").exists()
        doc = json.loads((out / "comparison.json").read_text())
        assert doc["amd_reconstructions"] == 12
        assert doc["rdmd_reconstructions"] == 48 + 3
        assert doc["wall_clock_ratio"] > 0
        assert len(doc["materials"]) == 3

    def test_rejects_missing_report(self, tmp_path, capsys):
        code = main(
            [
                "compare",
                "--amd", str(tmp_path / "a.json"),
                "--rdmd", str(tmp_path / "b.json"),
                "--reference", str(tmp_path / "r.csv"),
            ]
        )
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestExportPlots:
    def test_per_material_files_with_reference(
        self, amd_cli_run, tmp_path, capsys
    ):
        _, amd_out = amd_cli_run
        out = tmp_path / "plots"
        code = main(
            [
                "export-plots",
                "--spectra", str(amd_out / "spectra.csv"),
                "--reference", str(amd_out / "reference_spectra.csv"),
                "--out", str(out),
            ]
        )
        assert code == 0
        files = sorted(p.name for p in out.glob("*.csv"))
        assert files == [
            "material_0.csv",
            "material_1.csv",
            "material_2.csv",
        ]
        lines = (out / "material_0.csv").read_text().splitlines()
        assert len(lines) == 1 + 48
        head = lines[0].split(",")
        assert head[:2] == ["lambda_angstrom", "mu"]
        assert head[2].startswith("reference_mu_")

    def test_reference_optional(self, amd_cli_run, tmp_path):
        _, amd_out = amd_cli_run
        out = tmp_path / "plots"
        assert main(
            [
                "export-plots",
                "--spectra", str(amd_out / "spectra.csv"),
                "--out", str(out),
            ]
        ) == 0
        lines = (out / "material_1.csv").read_text().splitlines()
        assert lines[0] == "lambda_angstrom,mu"
