import csv
import json
import subprocess
import sys

import pytest

from mono_split.cli import main
from mono_split.experiments import CournotTwoStageParams, make_cournot, make_synthetic, save_instance
from mono_split.harness import (
    AGGREGATE_HEADER,
    TRACE_HEADER,
    ConfigError,
    _jobs,
    build_preset,
    parse_config_text,
)

SA_CONFIG = """\
problem:
  generator: synthetic
  params: {dim: 2, sigma: 1.0, L: 2.0, nu1: 0.1, nu2: 0.1, seed: 0}
solvers:
  - scheme: sa
    eval_budget: 100
n_trials: 2
seed: 3
"""


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def _strip_time(rows):
    col = rows[0].index("time_mean_s")
    return [r[:col] + r[col + 1:] for r in rows]


def test_run_sa_two_trials(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SA_CONFIG)
    assert main(["run", str(cfg), "--out", str(tmp_path / "o"), "--jobs", "1"]) == 0
    rows = _rows(tmp_path / "o" / "aggregate.csv")
    assert tuple(rows[0]) == AGGREGATE_HEADER
    assert len(rows) == 2 and rows[1][0] == "sa" and rows[1][2] == "2" and rows[1][-1] == "3"
    traces = sorted((tmp_path / "o" / "traces").iterdir())
    assert len(traces) == 2
    trace = _rows(traces[0])
    assert tuple(trace[0]) == TRACE_HEADER and len(trace) == 101
    meta = json.loads((tmp_path / "o" / "metadata.json").read_text())
    assert meta["seed_base"] == 3 and "seed_base + trial_index" in meta["trial_seed_rule"]


def test_run_is_deterministic(tmp_path):
    cfg = tmp_path / "c.json"
    doc = {"problem": {"generator": "cournot", "params": {"J": 4, "epsilon": 0.1}},
           "solvers": [{"scheme": "vr_smfbs", "batch_schedule": {"kind": "polynomial", "a": 1.01}},
                       {"scheme": "sa"}],
           "n_trials": 3}
    for s in doc["solvers"]:
        s["eval_budget"] = 400
    cfg.write_text(json.dumps(doc))
    main(["run", str(cfg), "--out", str(tmp_path / "a"), "--jobs", "1"])
    main(["run", str(cfg), "--out", str(tmp_path / "b"), "--jobs", "2"])
    a, b = _rows(tmp_path / "a" / "aggregate.csv"), _rows(tmp_path / "b" / "aggregate.csv")
    assert _strip_time(a) == _strip_time(b)
    assert [r[0] for r in a[1:]] == ["sa", "vr_smfbs"]


def test_malformed_yaml_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("problem:\n  generator: synthetic\nsolvers: [\n  - scheme: sa\n")
    assert main(["run", str(cfg)]) == 2
    assert "line" in capsys.readouterr().err


def test_bad_field_named(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text(SA_CONFIG.replace("eval_budget: 100", "eval_budget: 100\n    colour: red"))
    assert main(["run", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "solvers[0]" in err and "colour" in err


def test_config_errors():
    with pytest.raises(ConfigError, match="solvers"):
        parse_config_text("problem: {generator: synthetic}\nsolvers: []\n")
    with pytest.raises(ConfigError, match="n_trials"):
        parse_config_text(SA_CONFIG.replace("n_trials: 2", "n_trials: 1"))
    with pytest.raises(ConfigError, match="metrics"):
        parse_config_text(SA_CONFIG + "metrics: [speed]\n")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_all_trials_diverge_exit_code(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(SA_CONFIG.replace("scheme: sa", "scheme: vr_smfbs\n    step_rule: {kind: constant, gamma: 40.0}")
                   .replace("eval_budget: 100", "eval_budget: 4000"))
    assert main(["run", str(cfg), "--out", str(tmp_path / "o"), "--jobs", "1"]) == 3
    rows = _rows(tmp_path / "o" / "aggregate.csv")
    assert rows[1][2] == "0" and rows[1][3] == "nan"


def test_table2_preset_structure():
    preset = build_preset("table2", scale=0.1, trials=2)
    main_rows = {(t.solver, t.L_label) for t in preset.tasks if t.group == "table2"}
    assert len(main_rows) == 8
    assert {t.L_label for t in preset.tasks if t.group == "table2"} == {"1e1", "1e2", "1e3", "1e4"}
    assert {t.config["eval_budget"] for t in preset.tasks if t.group == "table2"} == {2000}


def test_table3_has_complicated_row():
    preset = build_preset("table3", scale=1.0, trials=2)
    comp = [t for t in preset.tasks if t.group == "table3_complicated"]
    assert {t.solver for t in comp} == {"vr_smfbs", "sa"}
    assert {t.config["eval_budget"] for t in comp} == {2000}
    assert all(t.problem["params"]["complicated_set"] for t in comp)


def test_table4_nu_values():
    preset = build_preset("table4", scale=1.0, trials=2)
    saa = [t for t in preset.tasks if t.solver == "saa"]
    assert sorted({t.config["nu_samples"] for t in saa}) == [1000, 2000, 4000, 10000, 20000]
    vr = [t for t in preset.tasks if t.solver == "vr_smfbs"]
    assert sorted({t.config["eval_budget"] for t in vr}) == [1000, 2000, 4000, 10000, 20000]


def test_reproduce_small_table2(tmp_path, capsys):
    out = tmp_path / "t2"
    assert main(["reproduce", "table2", "--scale", "0.01", "--trials", "2", "--J", "4", "--out", str(out),
                 "--jobs", "1"]) == 0
    rows = _rows(out / "table2.csv")
    assert tuple(rows[0]) == AGGREGATE_HEADER and len(rows) == 9
    assert len(_rows(out / "table2_complicated.csv")) == 3
    assert "merely monotone" in capsys.readouterr().out


def test_unknown_table_rejected():
    with pytest.raises(SystemExit) as info:
        main(["reproduce", "table9"])
    assert info.value.code == 2


def test_jobs_from_environment(monkeypatch):
    monkeypatch.setenv("MONO_SPLIT_JOBS", "3")
    assert _jobs(None) == 3
    assert _jobs(5) == 5
    monkeypatch.setenv("MONO_SPLIT_JOBS", "many")
    with pytest.raises(ConfigError):
        _jobs(None)


def test_validate_passes_synthetic(tmp_path, capsys):
    path = tmp_path / "s.json"
    save_instance(make_synthetic(4, 1.0, 3.0, 0.2, 0.3, seed=1), path)
    assert main(["validate", str(path)]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_validate_catches_understated_lipschitz(tmp_path, capsys):
    path = tmp_path / "s.json"
    save_instance(make_cournot(CournotTwoStageParams(J=5, epsilon=0.1)), path)
    doc = json.loads(path.read_text())
    doc["derived"]["lipschitz_L"] /= 2
    path.write_text(json.dumps(doc))
    assert main(["validate", str(path)]) == 4
    captured = capsys.readouterr()
    assert "[FAIL] Lipschitz" in captured.out and "Lipschitz" in captured.err


def test_validate_cournot_expectation_check(tmp_path, capsys):
    path = tmp_path / "c.json"
    save_instance(make_cournot(CournotTwoStageParams(J=3, epsilon=0.1)), path)
    assert main(["validate", str(path)]) == 0
    assert "[PASS] closed-form expectation" in capsys.readouterr().out


def test_validate_missing_file(tmp_path):
    assert main(["validate", str(tmp_path / "nope.json")]) == 2


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "mono_split.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "reproduce" in out.stdout
