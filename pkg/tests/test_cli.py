"""Command-line pipeline: exit codes, report artifacts, determinism."""

import copy
import json
import shutil
import subprocess
import sys

import pytest

from effdiff import cli

BASE = {
    "environment": {"model": "identity", "d": 2, "seed": 0},
    "cells_per_side": 16,
    "moments": {"p": 3.0, "q": 2.0},
    "solver": {"tol": 1e-10, "max_iter": 2000, "preconditioner": "auto"},
    "sublinearity": {"radius": 0.25, "sizes": [16, 32]},
    "audit": {"sizes": [16, 32]},
    "montecarlo": {"n_paths": 300, "t_max": 0.5,
                   "record_times": [0.25, 0.5], "theta": 2.0,
                   "min_paths_for_ks": 1000},
    "stages": ["gen", "validate", "solve", "effective", "sublinearity",
               "audit", "simulate"],
    "check": {"D": [[2.0, 0.0], [0.0, 2.0]], "rel_tol": 0.02},
    "seed": 5,
}


def write_cfg(path, **overrides):
    cfg = copy.deepcopy(BASE)
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **val}
        elif val is None and key in cfg:
            del cfg[key]
        else:
            cfg[key] = val
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_full")
    cfg = write_cfg(root / "config.json")
    out = root / "out"
    code = cli.main(["run", "--config", str(cfg), "--out", str(out),
                     "--check"])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    return cfg, out, report


def test_full_run_report_and_artifacts(full_run):
    cfg, out, report = full_run
    assert report["schema"] == "effdiff-report/1"
    stages = report["stages"]
    assert set(stages) == {"gen", "validate", "solve", "effective",
                           "sublinearity", "audit", "simulate", "check"}
    assert stages["check"]["passed"] is True
    assert stages["check"]["max_rel_error"] < 1e-8
    for name in ("field.ehf1", "correctors.chi1", "walk.wlk1",
                 "sublinearity.csv", "audit.csv", "report.json"):
        assert (out / name).exists(), name
    sim = stages["simulate"]
    assert sim["n_paths"] == 300
    assert "clt" not in sim                      # below min_paths_for_ks
    assert sim["time_change"]["conservativeness"]["target"] == 0.5
    assert set(report["wall_clock_s"]) == set(stages) - {"check"}
    # identity corrector vanishes: the sublinearity slope is undefined
    assert stages["sublinearity"]["slope"] is None
    assert all(r["sup_norm"] == 0.0 for r in stages["sublinearity"]["rows"])


def test_run_is_deterministic_modulo_paths_and_clocks(full_run, tmp_path):
    cfg, _, first = full_run
    out2 = tmp_path / "out2"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out2),
                     "--check"]) == 0
    second = json.loads((out2 / "report.json").read_text())

    def scrub(rep):
        rep = copy.deepcopy(rep)
        rep.pop("wall_clock_s")
        for frag in rep["stages"].values():
            frag.pop("path", None)
        return rep

    assert scrub(first) == scrub(second)


def test_check_failure_exits_4(full_run, tmp_path, capsys):
    cfg = write_cfg(tmp_path / "bad.json",
                    check={"D": [[3.0, 0.0], [0.0, 3.0]], "rel_tol": 0.02})
    code = cli.main(["run", "--config", str(cfg),
                     "--out", str(tmp_path / "o"), "--check"])
    assert code == 4
    assert "check failed" in capsys.readouterr().err


def test_check_without_block_exits_2(tmp_path):
    cfg = write_cfg(tmp_path / "nocheck.json", check=None)
    assert cli.main(["run", "--config", str(cfg),
                     "--out", str(tmp_path / "o"), "--check"]) == 2


def test_run_without_check_flag_skips_check_stage(tmp_path):
    cfg = write_cfg(tmp_path / "c.json",
                    stages=["gen", "validate"],
                    check={"D": [[999.0, 0.0], [0.0, 999.0]]})
    out = tmp_path / "o"
    assert cli.main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert "check" not in report["stages"]


def test_inadmissible_moments_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "inadm.json", moments={"p": 2.0, "q": 2.0})
    assert cli.main(["run", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "must be < 2/d" in err


def test_nonconvergence_exits_3(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path / "hard.json",
        environment={"model": "heavy_tail", "d": 2, "seed": 1,
                     "params": {"tail_index_lo": 3.0, "tail_index_hi": 3.0,
                                "correlation_cells": 1}},
        solver={"tol": 1e-12, "max_iter": 2, "preconditioner": "none"},
        stages=["solve"])
    assert cli.main(["run", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 3
    assert "did not converge" in capsys.readouterr().err


@pytest.mark.parametrize("overrides, needle", [
    (dict(bogus_key=1), "unknown keys"),
    (dict(montecarlo={"warp": 9}), "unknown keys"),
    (dict(environment=None), "environment"),
    (dict(stages=["gen", "teleport"]), "stages"),
    (dict(montecarlo={"theta": "Theta"}), "theta"),
    (dict(solver={"preconditioner": "ilu"}), "preconditioner"),
])
def test_config_validation_exits_2(tmp_path, capsys, overrides, needle):
    cfg = write_cfg(tmp_path / "c.json", **overrides)
    assert cli.main(["run", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
    assert needle in capsys.readouterr().err


def test_stage_failures_name_the_stage(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path / "c.json",
        environment={"model": "bessel_trap", "d": 2, "seed": 0,
                     "params": {"exponent": 2.0}},
        stages=["gen", "simulate"])
    assert cli.main(["run", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
    assert "stage simulate" in capsys.readouterr().err


def test_single_stage_subcommand(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    out = tmp_path / "o"
    assert cli.main(["gen", "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert list(report["stages"]) == ["gen"]
    assert (out / "field.ehf1").exists()


def test_seed_override_lands_in_echo_and_walk(tmp_path):
    cfg = write_cfg(tmp_path / "c.json", stages=["gen"])
    out = tmp_path / "o"
    assert cli.main(["gen", "--config", str(cfg), "--out", str(out),
                     "--seed", "99"]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["config"]["seed"] == 99


def test_report_json_reemission_is_bit_identical(full_run, capsys):
    _, out, _ = full_run
    assert cli.main(["report", "--report", str(out / "report.json"),
                     "--format", "json"]) == 0
    stdout = capsys.readouterr().out
    assert stdout == (out / "report.json").read_text()


def test_report_md_rendering(full_run, capsys):
    _, out, _ = full_run
    assert cli.main(["report", "--report", str(out / "report.json"),
                     "--format", "md"]) == 0
    md = capsys.readouterr().out
    assert "D₁₁ = 2.000000" in md
    assert "D₂₂ = 2.000000" in md
    assert "## Variational bounds" in md
    assert "| direction | lower | value | upper | ok |" in md
    assert "undefined (sup-norms identically zero)" in md


def test_report_csv_rendering(full_run, tmp_path, capsys):
    _, out, _ = full_run
    dest = tmp_path / "csv"
    assert cli.main(["report", "--report", str(out / "report.json"),
                     "--format", "csv", "--out", str(dest)]) == 0
    assert (dest / "sublinearity.csv").read_text().splitlines()[0] == \
        "epsilon,sup_norm"
    assert (dest / "audit.csv").read_text().splitlines()[0] == \
        "epsilon,lhs,rhs_core,ratio"
    assert not (dest / "clt.csv").exists()       # no KS block in this run


def test_report_schema_mismatch_exits_2(tmp_path, capsys):
    bogus = tmp_path / "r.json"
    bogus.write_text(json.dumps({"schema": "effdiff-report/999"}))
    assert cli.main(["report", "--report", str(bogus)]) == 2
    assert "schema" in capsys.readouterr().err


def test_report_invalid_json_exits_2(tmp_path):
    bogus = tmp_path / "r.json"
    bogus.write_text("{not json")
    assert cli.main(["report", "--report", str(bogus)]) == 2


def test_bad_threads_env_exits_2(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("EH_THREADS", "lots")
    cfg = write_cfg(tmp_path / "c.json", stages=["gen"])
    assert cli.main(["gen", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
    assert "EH_THREADS" in capsys.readouterr().err


def test_threads_flag_accepted(tmp_path, monkeypatch):
    monkeypatch.setenv("EH_THREADS", "not-a-number")  # flag must win
    cfg = write_cfg(tmp_path / "c.json", stages=["gen"])
    assert cli.main(["--threads", "2", "gen", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 0


def test_console_script_entry_point(tmp_path):
    exe = shutil.which("effdiff")
    if exe is None:
        pytest.skip("console script not installed")
    cfg = write_cfg(tmp_path / "c.json", stages=["gen"])
    proc = subprocess.run(
        [exe, "gen", "--config", str(cfg), "--out", str(tmp_path / "o")],
        capture_output=True, text=True, timeout=600)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "o" / "report.json").exists()


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "absent.json"),
                     "--out", str(tmp_path / "o")]) == 2
