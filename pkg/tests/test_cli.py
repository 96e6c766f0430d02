"""Command-line harness: exit codes, artifact envelopes, determinism."""

from __future__ import annotations

import json
import os
from importlib.resources import files

import pytest

from mfstop import cli
from mfstop.measures import measure_from_csv

BUNDLED_PUT = str(files("mfstop").joinpath("configs", "standard_put.json"))


def _write_config(tmp_path, name="cfg.json", **overrides):
    payload = {
        "problem": "standard_put",
        "seed": 3,
        "grid_n": 4,
        "paths_per_atom": 40,
        "mollifier_n": 4,
        "z_samples": 32,
    }
    payload.update(overrides)
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def _load_artifact(out_dir, name):
    with open(os.path.join(out_dir, name)) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# exit codes
# ---------------------------------------------------------------------------


def test_unknown_config_field_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{"problem": "standard_put", "seed": 1, "zzz": 5}')
    assert cli.main(["solve", "--config", str(path)]) == 2
    assert "zzz" in capsys.readouterr().err


def test_invalid_json_exits_2(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert cli.main(["solve", "--config", str(path)]) == 2
    assert "not valid JSON" in capsys.readouterr().err


def test_missing_config_file_exits_1(tmp_path):
    assert cli.main(["solve", "--config", str(tmp_path / "absent.json")]) == 1


def test_solve_without_config_exits_2(capsys):
    assert cli.main(["solve"]) == 2
    assert "config" in capsys.readouterr().err


def test_usage_error_exits_2():
    # argparse handles malformed flags itself
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["solve", "--seed", "-3"])
    assert excinfo.value.code == 2


def test_example_problem_mismatch_exits_2(tmp_path, capsys):
    path = _write_config(tmp_path, problem="mean_variance")
    assert cli.main(["example", "standard", "--config", path]) == 2
    assert "'problem'" in capsys.readouterr().err


def test_residual_time_out_of_range_exits_2(tmp_path, capsys):
    path = _write_config(tmp_path)
    assert cli.main(["residual", "--config", path, "--time", "99.0"]) == 2
    assert "time" in capsys.readouterr().err.lower()


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------


def test_simulate_writes_envelope_and_terminal_measure(tmp_path):
    cfg = _write_config(tmp_path)
    out = str(tmp_path / "run")
    assert cli.main(["simulate", "--config", cfg, "--out", out, "--quiet"]) == 0

    payload = _load_artifact(out, "simulate.json")
    for key in ("subcommand", "config_sha256", "seed", "version", "runtime_ms"):
        assert key in payload
    assert payload["subcommand"] == "simulate"
    assert payload["seed"] == 3
    assert payload["n_paths"] == 4 * 40

    terminal = measure_from_csv(os.path.join(out, "simulate_terminal.csv"))
    assert abs(terminal.ws.sum() - 1.0) < 1e-9


def test_repeat_run_same_seed_is_byte_identical(tmp_path):
    cfg = _write_config(tmp_path)
    outs = []
    for sub in ("a", "b"):
        out = str(tmp_path / sub)
        assert cli.main(["simulate", "--config", cfg, "--out", out, "--quiet"]) == 0
        outs.append(out)

    def stable_lines(out_dir):
        with open(os.path.join(out_dir, "simulate.json")) as fh:
            return [ln for ln in fh if "runtime_ms" not in ln]

    assert stable_lines(outs[0]) == stable_lines(outs[1])
    csvs = [open(os.path.join(o, "simulate_terminal.csv"), "rb").read() for o in outs]
    assert csvs[0] == csvs[1]


def test_seed_flag_overrides_config(tmp_path):
    cfg = _write_config(tmp_path)
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    assert cli.main(["simulate", "--config", cfg, "--out", out_a, "--quiet"]) == 0
    assert cli.main(["simulate", "--config", cfg, "--seed", "99",
                     "--out", out_b, "--quiet"]) == 0
    a = _load_artifact(out_a, "simulate.json")
    b = _load_artifact(out_b, "simulate.json")
    assert a["seed"] == 3 and b["seed"] == 99
    assert a["value_never_stop"] != b["value_never_stop"]
    # seed is part of the effective config, so the hash moves with it
    assert a["config_sha256"] != b["config_sha256"]


def test_stdout_mode_prints_json(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert cli.main(["mollify", "--config", cfg]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["subcommand"] == "mollify"
    assert payload["value"] == pytest.approx(payload["raw_value"], abs=0.5)


# ---------------------------------------------------------------------------
# bundled configs and example tables
# ---------------------------------------------------------------------------


def test_solve_bundled_put_matches_aggregate_oracle(tmp_path):
    out = str(tmp_path / "run")
    assert cli.main(["solve", "--config", BUNDLED_PUT, "--out", out, "--quiet"]) == 0
    payload = _load_artifact(out, "solve.json")
    tol = max(0.02 * abs(payload["aggregate_oracle"]), 3.0 * payload["mc_stderr"])
    assert payload["abs_gap"] <= tol
    assert len(payload["policy"]["nodes"]) == 8


def _read_table(path):
    rows = []
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if not ln.startswith("#")]
    header = lines[0].split(",")
    assert header == ["parameter", "value", "oracle_value", "abs_gap", "stderr"]
    for ln in lines[1:]:
        cells = ln.split(",")
        rows.append({"parameter": cells[0],
                     **{k: float(v) for k, v in zip(header[1:], cells[1:])}})
    return rows


def test_example_distortion_table_matches_quadrature(tmp_path):
    out = str(tmp_path / "run")
    assert cli.main(["example", "distortion", "--out", out, "--quiet"]) == 0
    rows = _read_table(os.path.join(out, "example_distortion.csv"))
    assert len(rows) == 3
    for row in rows:
        assert row["abs_gap"] <= 1e-10


def test_example_table_embeds_config_hash(tmp_path):
    out = str(tmp_path / "run")
    assert cli.main(["example", "distortion", "--out", out, "--quiet"]) == 0
    with open(os.path.join(out, "example_distortion.csv")) as fh:
        head = [fh.readline() for _ in range(3)]
    assert head[0].startswith("# config_sha256=")
    assert head[1].startswith("# seed=")
    assert head[2].startswith("# version=")
