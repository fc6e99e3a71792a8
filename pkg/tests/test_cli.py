import csv
import io
import json

import pytest

from qstop import cli
from qstop.config import ConfigError, parse_config
from qstop.filtering import DegenerateObservationError
from qstop.pipeline import CSV_COLUMNS

SMALL = """
[model]
preset = watertank
horizon = 4

[run]
n_hidden_points = 6
m_chain_points = 20, 40
n_paths = 1500
n_fresh_paths = 500
seed = 17

[clvq]
n_iterations = 3000
lloyd_rounds = 5
samples_per_round = 5000
n_count = 20000
"""

FINITE_CONST = """
[model]
preset = finite
finite_name = h3-o2-T4
horizon = 1
reward_constant = 0.625

[run]
m_chain_points = 10
n_paths = 200
n_fresh_paths = 100
"""


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(SMALL)
    return p


def run_cli(argv, capsys):
    code = cli.main([str(a) for a in argv])
    return code, capsys.readouterr()


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


def test_run_writes_one_row_per_pair_and_is_deterministic(cfg_file, tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run_cli(["run", "--config", cfg_file, "--out", a], capsys)[0] == 0
    assert run_cli(["run", "--config", cfg_file, "--out", b, "--jobs", "2"], capsys)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    recs = rows(a.read_text())
    assert list(recs[0].keys()) == CSV_COLUMNS
    assert [(r["N"], r["M"]) for r in recs] == [("6", "20"), ("6", "40")]
    for r in recs:
        assert r["seed"] == "17" and r["runtime_s"] == ""
        assert 0.5 <= float(r["value"]) <= 1.0
        assert r["precondition_ok"] == "False"
        assert float(r["total_bound"]) > 0


def test_seed_override_changes_results(cfg_file, capsys):
    _, out1 = run_cli(["run", "--config", cfg_file], capsys)
    _, out2 = run_cli(["run", "--config", cfg_file, "--seed", "18"], capsys)
    r1, r2 = rows(out1.out), rows(out2.out)
    assert r2[0]["seed"] == "18" and r1[0]["value"] != r2[0]["value"]
    assert r1[0]["config_hash"] != r2[0]["config_hash"]


def test_json_output_includes_error_report(cfg_file, capsys):
    code, out = run_cli(["run", "--config", cfg_file, "--format", "json", "--timings"], capsys)
    assert code == 0
    recs = json.loads(out.out)
    assert len(recs) == 2
    rep = recs[0]["error_report"]
    assert len(rep["lip_v"]) == 5 and rep["chain_errors"][0] == 0.0
    assert float(recs[0]["runtime_s"]) > 0 and "chain" in recs[0]["timings"]


def test_stagewise_equals_run(cfg_file, tmp_path, capsys):
    grid, paths, chain = tmp_path / "grid.txt", tmp_path / "paths.npz", tmp_path / "chain.npz"
    assert run_cli(["quantize-measure", "--config", cfg_file, "--out", grid], capsys)[0] == 0
    assert run_cli(["simulate", "--config", cfg_file, "--grid", grid, "--out", paths], capsys)[0] == 0
    code, out = run_cli(["solve", "--config", cfg_file, "--grid", grid, "--paths", paths, "-M", "40",
                         "--chain-out", chain], capsys)
    assert code == 0
    staged = rows(out.out)[0]
    _, full = run_cli(["run", "--config", cfg_file], capsys)
    whole = [r for r in rows(full.out) if r["M"] == "40"][0]
    assert staged == whole

    code, out = run_cli(["bounds", "--config", cfg_file, "--chain", chain], capsys)
    assert code == 0
    rep = json.loads(out.out)
    assert rep["total"] == whole["total_bound"] and rep["precondition_ok"] is False


def test_table_matches_run(cfg_file, tmp_path, capsys):
    code, out = run_cli(["table", "--config", cfg_file, "--out", tmp_path / "t.csv"], capsys)
    assert code == 0
    lines = out.out.splitlines()
    assert lines[0].startswith("M") and "N=6" in lines[0] and len(lines) == 3
    _, full = run_cli(["run", "--config", cfg_file], capsys)
    assert (tmp_path / "t.csv").read_text() == full.out
    assert f"{float(rows(full.out)[0]['value']):.4f}" in lines[1]


@pytest.mark.filterwarnings("ignore:.*lossless:RuntimeWarning")
def test_constant_reward_finite_model(tmp_path, capsys):
    p = tmp_path / "f.ini"
    p.write_text(FINITE_CONST)
    code, out = run_cli(["run", "--config", p], capsys)
    assert code == 0
    assert float(rows(out.out)[0]["value"]) == pytest.approx(0.625, abs=1e-15)


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[run]\nbogus = 3\n")
    assert run_cli(["run", "--config", bad], capsys)[0] == 1
    bad.write_text("[run]\nn_paths = 0\n")
    assert run_cli(["run", "--config", bad], capsys)[0] == 1
    assert run_cli(["run", "--config", tmp_path / "missing.ini"], capsys)[0] == 1
    bad.write_text("[model]\npreset = finite\nfinite_name = nope\n")
    code, out = run_cli(["run", "--config", bad], capsys)
    assert code == 1


def test_missing_artifact_exits_2_and_names_stage(cfg_file, tmp_path, capsys):
    code, out = run_cli(["solve", "--config", cfg_file, "--grid", tmp_path / "none.txt", "--paths",
                         tmp_path / "none.npz"], capsys)
    assert code == 2 and "quantize-measure" in out.err
    code, out = run_cli(["bounds", "--config", cfg_file, "--chain", tmp_path / "none.npz"], capsys)
    assert code == 2 and "solve" in out.err


def test_unwritable_output_exits_3(cfg_file, tmp_path, capsys):
    code, _ = run_cli(["quantize-measure", "--config", cfg_file, "--out", tmp_path / "no" / "dir" / "g.txt"],
                      capsys)
    assert code == 3


def test_exit_code_mapping():
    assert cli.exit_code(ConfigError("x")) == 1
    assert cli.exit_code(DegenerateObservationError("x")) == 2
    assert cli.exit_code(cli.MissingArtifact("x")) == 2
    assert cli.exit_code(PermissionError("x")) == 3


def test_config_parsing_and_hash():
    cfg = parse_config(SMALL)
    assert cfg.n_hidden_points == (6,) and cfg.m_chain_points == (20, 40)
    assert cfg.model.horizon == 4 and cfg.clvq.lloyd_rounds == 5
    alias = parse_config(SMALL + "\n[chain]\nlloyd_rounds = 3\n")
    assert alias.chain.lloyd_rounds == 3 and alias.config_hash() != cfg.config_hash()
    from dataclasses import replace
    assert replace(cfg, out="x.csv", jobs=4, output_format="json").config_hash() == cfg.config_hash()
    assert parse_config("[run]\nformat = json\n").output_format == "json"
    with pytest.raises(ConfigError):
        parse_config("[extra]\na = 1\n")
    with pytest.raises(ConfigError):
        parse_config("[run]\nseed = -1\n")
