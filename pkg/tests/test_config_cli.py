import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from gbse.cli import main
from gbse.config import ConfigError, load_config, parse_config, with_override
from gbse.experiments import (
    BENCH_HEADER,
    DETECT_HEADER,
    MULTISENSOR_HEADER,
    BenchPattern,
    _bench_schedule,
    attack_intensity,
    run_bench,
    run_detect,
    run_multisensor_map,
)

BASE = """
[model]
A = [[1.0]]
C = [[[1.0]], [[1.0]]]
Q = [[0.5]]
R = [[[2.0]], [[2.0]]]
P0 = [[1.0]]

[window]
N = 6

[attack]
kind = "constant_bias"
targets = [2]
mu = [3.0]
t_start = 3

[detector]
alpha = 6.0
tau = 2
solver = "direct"

[run]
trials = 4
master_seed = 11
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


def test_config_roundtrip(tmp_path):
    cfg = load_config(write(tmp_path, BASE))
    assert cfg.model.M == 2
    assert cfg.N == 6
    assert cfg.attack.kind == "constant_bias"
    assert cfg.tau == 2
    assert cfg.trials == 4
    assert cfg.timing is False


def test_config_rejects_unknown_keys(tmp_path):
    bad = BASE + "\n[run2]\nx = 1\n"
    with pytest.raises(ConfigError, match="unknown config table"):
        load_config(write(tmp_path, bad))
    bad = BASE.replace("master_seed = 11", "master_seed = 11\nbanana = 2")
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(write(tmp_path, bad))


def test_config_rejects_dimension_lies(tmp_path):
    bad = BASE.replace("[model]", "[model]\nn = 3")
    with pytest.raises(ConfigError, match="matrices imply"):
        load_config(write(tmp_path, bad))


def test_config_rejects_bad_sweep(tmp_path):
    bad = BASE + "\n[sweep]\nparameter = \"run.trials\"\nvalues = [1]\n"
    with pytest.raises(ConfigError, match="sweep.parameter"):
        load_config(write(tmp_path, bad))
    bad = BASE + "\n[sweep]\nparameter = \"attack.mu\"\nvalues = []\n"
    with pytest.raises(ConfigError, match="non-empty"):
        load_config(write(tmp_path, bad))


def test_with_override_changes_single_value(tmp_path):
    cfg = load_config(write(tmp_path, BASE))
    out = with_override(cfg, "attack.mu", [9.0])
    assert attack_intensity(out.attack) == 9.0
    assert attack_intensity(cfg.attack) == 3.0
    assert out.trials == cfg.trials


def test_run_detect_zero_trials_is_empty(tmp_path):
    cfg = load_config(write(tmp_path, BASE.replace("trials = 4", "trials = 0")))
    assert run_detect(cfg) == []


def test_run_detect_rows_and_schema(tmp_path):
    cfg = load_config(write(tmp_path, BASE))
    rows = run_detect(cfg)
    assert len(rows) == 5  # one per method, single sweep point
    methods = [r[0] for r in rows]
    assert methods == ["chi2", "cusum", "resilient", "gbs", "smoother"]
    for row in rows:
        assert len(row) == len(DETECT_HEADER)
        assert row[1] == "constant_bias"
        assert row[3] == 4  # trials
        assert row[-1] == 0  # errors


def test_run_detect_deterministic_across_workers(tmp_path):
    cfg1 = load_config(write(tmp_path, BASE))
    rows1 = run_detect(cfg1)
    cfg2 = load_config(write(tmp_path, BASE))
    cfg2.workers = 2
    rows2 = run_detect(cfg2)
    assert rows1 == rows2


def test_bench_schedules():
    import gbse.config as c

    cfg = parse_config(
        {
            "model": {
                "A": [[1.0]],
                "C": [[[1.0]], [[1.0]]],
                "Q": [[0.5]],
                "R": [[[2.0]], [[2.0]]],
                "P0": [[1.0]],
            },
            "window": {"N": 3},
        }
    )
    rng = np.random.default_rng(0)
    init, steps = _bench_schedule(cfg, BenchPattern("timeline"), rng)
    assert len(init) == 0
    assert steps[2] == [(2, 1), (2, 2)]
    init, steps = _bench_schedule(cfg, BenchPattern("sensor"), rng)
    assert steps[1] == [(0, 2), (1, 2), (2, 2), (3, 2)]
    init, steps = _bench_schedule(cfg, BenchPattern("random", hidden_fraction=0.25), rng)
    assert len(init) == 8 - 2
    assert sum(len(s) for s in steps) == 2
    with pytest.raises(ValueError, match="hidden_fraction"):
        BenchPattern("random", hidden_fraction=1.5)


def test_run_bench_objectives_agree(tmp_path):
    cfg = load_config(write(tmp_path, BASE))
    cfg.bench_reps = 1
    rows = run_bench(cfg, BenchPattern("timeline"))
    assert [r[0] for r in rows[:2]] == [0, 0]
    assert len(rows) == 2 * (cfg.N + 1)
    for k in range(0, len(rows), 2):
        obj_direct = rows[k][4]
        obj_iter = rows[k + 1][4]
        assert obj_direct == pytest.approx(obj_iter, rel=1e-5, abs=1e-7)
        assert len(rows[k]) == len(BENCH_HEADER)


def test_run_multisensor_grid(tmp_path):
    text = BASE.replace('kind = "constant_bias"', 'kind = "random_interference"').replace(
        "mu = [3.0]\nt_start = 3", "R_tilde = [[50.0]]"
    ).replace("trials = 4", "trials = 2")
    cfg = load_config(write(tmp_path, text))
    rows = run_multisensor_map(cfg)
    assert len(rows) == 2 * (cfg.N + 1) * cfg.model.M
    assert len(rows[0]) == len(MULTISENSOR_HEADER)
    # attacked sensor 2 should collect more flags than sensor 1
    flags = {1: 0, 2: 0}
    for trial, t, j, err, ind in rows:
        flags[j] += ind
    assert flags[2] > flags[1]


def test_cli_exit_codes_and_byte_determinism(tmp_path):
    cfg_path = write(tmp_path, BASE)
    out1 = tmp_path / "a.csv"
    out2 = tmp_path / "b.csv"
    assert main(["detect", "--config", cfg_path, "--out", str(out1), "--workers", "1"]) == 0
    assert main(["detect", "--config", cfg_path, "--out", str(out2), "--workers", "2"]) == 0
    assert out1.read_bytes() == out2.read_bytes()

    missing = str(tmp_path / "nope.toml")
    assert main(["detect", "--config", missing, "--out", str(out1)]) == 2

    bad = write(tmp_path, BASE + "\n[extra]\nz = 1\n", name="bad.toml")
    assert main(["detect", "--config", bad, "--out", str(out1)]) == 2


def test_cli_simulate_writes_csv(tmp_path):
    cfg_path = write(tmp_path, BASE)
    out = tmp_path / "sim.csv"
    assert main(["simulate", "--config", cfg_path, "--out", str(out), "--seed", "3"]) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "time,sensor,y_0,x_0"
    assert len(lines) == 1 + 7 * 2


def test_cli_console_script_runs(tmp_path):
    cfg_path = write(tmp_path, BASE)
    out = tmp_path / "c.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "gbse", "detect", "--config", cfg_path, "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert Path(out).exists()


def test_run_detect_records_failures_without_aborting(tmp_path, monkeypatch):
    import gbse.experiments as ex

    def boom(*args, **kwargs):
        raise RuntimeError("detector exploded")

    monkeypatch.setattr(ex.baselines, "chi2_detector", boom)
    cfg = load_config(write(tmp_path, BASE))
    rows = run_detect(cfg)
    by_method = {r[0]: r for r in rows}
    assert by_method["chi2"][-1] == cfg.trials  # every trial errored
    assert np.isnan(by_method["chi2"][4])
    assert by_method["gbs"][-1] == 0  # other methods unaffected
    assert by_method["gbs"][3] == cfg.trials


def test_csv_headers_are_stable():
    assert DETECT_HEADER == [
        "method", "attack_kind", "intensity", "trials",
        "detection_success_rate", "false_alarm_rate", "mean_mse",
        "mse_stddev", "mean_runtime_ms", "errors",
    ]
    assert BENCH_HEADER == ["step", "method", "wall_time_ms", "iterations", "objective"]
    assert MULTISENSOR_HEADER == ["trial", "time", "sensor", "weighted_error", "indicator"]


def test_multisensor_clean_variant_flag_rate_near_null():
    import scipy.stats

    M = 8
    raw = {
        "model": {
            "A": [[1.0]], "C": [[[1.0]]] * M, "Q": [[0.5]],
            "R": [[[20.0]]] * M, "P0": [[1.0]],
        },
        "window": {"N": 20},
        "attack": {"kind": "none"},
        "detector": {"alpha": 6.0, "tau": 3, "solver": "direct"},
        "run": {"trials": 40, "master_seed": 17},
    }
    rows = run_multisensor_map(parse_config(raw))
    flags = sum(r[4] for r in rows)
    cells = len(rows)
    null_rate = scipy.stats.chi2.sf(6.0, df=1)
    sigma = np.sqrt(null_rate * (1 - null_rate) / cells)
    assert flags / cells < null_rate + 3 * sigma


def test_cli_runtime_error_exit_code(tmp_path):
    cfg_path = write(tmp_path, BASE)
    # Unwritable output directory surfaces as a runtime error, exit 3.
    out = str(tmp_path / "no_such_dir" / "x.csv")
    assert main(["detect", "--config", cfg_path, "--out", out]) == 3


def test_shipped_configs_load_and_run():
    root = Path(__file__).resolve().parents[1] / "demos" / "configs"
    det = load_config(str(root / "detect_two_sensor.toml"))
    assert det.model.M == 2 and det.N == 20
    assert det.alpha == 6.0 and det.tau == 3
    det.trials = 2
    det.sweep_values = det.sweep_values[:1]
    assert len(run_detect(det)) == 5

    bench = load_config(str(root / "bench_update_rules.toml"))
    assert bench.model.n == 3 and bench.model.M == 10

    multi = load_config(str(root / "multisensor_20.toml"))
    assert multi.model.M == 20 and multi.attack.targets == frozenset({1, 2, 3, 4, 5})
