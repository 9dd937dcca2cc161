import csv
import json
import math
import os

import mock

from mlgamp import stateevo
from mlgamp.gamp import DivergenceError
from mlgamp_harness import harness
from mlgamp_harness.main import EXIT_CONFIG, EXIT_DIVERGED, EXIT_GAP, EXIT_OK, run
from mlgamp_harness.settings import load_settings


def read_csv(filename):
    with open(filename, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def read_echo(out):
    with open(f"{out}.config.json") as f:
        return json.load(f)


def test_run(write_config, small_config, tmp_path, capsys) -> None:
    # GIVEN
    config = write_config(small_config)
    out = str(tmp_path / "result.csv")

    # WHEN
    code = run(["run", "--config", config, "--out", out, "--jobs", "1"])

    # THEN
    assert code == EXIT_OK
    rows = read_csv(out)
    assert len(rows) == 2 * 5
    assert list(rows[0]) == ["trial", "iter", "nmse", "nmse_db", "ser", "se_mse", "se_mse_db"]
    for it in range(1, 6):
        se = {r["se_mse"] for r in rows if int(r["iter"]) == it}
        assert len(se) == 1
    assert read_echo(out)["status"] == "ok"
    assert "final mean NMSE" in capsys.readouterr().out
    echoed = load_settings(f"{out}.config.json", environ={})
    assert echoed.experiment.trials == 2
    assert echoed.output == out


def test_default_output_path(write_config, small_config) -> None:
    config = write_config(small_config)
    assert run(["run", "--config", config, "--jobs", "1", "--iters", "2"]) == EXIT_OK
    out = os.path.splitext(config)[0] + "-run.csv"
    assert len(read_csv(out)) == 4


def test_seed_override_changes_trials_not_se(write_config, small_config, tmp_path) -> None:
    config = write_config(small_config)
    first = str(tmp_path / "a.csv")
    second = str(tmp_path / "b.csv")

    run(["run", "--config", config, "--out", first, "--jobs", "1"])
    run(["run", "--config", config, "--out", second, "--jobs", "1", "--seed", "8"])

    a, b = read_csv(first), read_csv(second)
    assert [r["nmse"] for r in a] != [r["nmse"] for r in b]
    assert [r["se_mse"] for r in a] == [r["se_mse"] for r in b]
    assert read_echo(second)["run"]["seed"] == 8


def test_malformed_json(write_config, tmp_path, capsys) -> None:
    config = write_config('{"model": {"layers": [}')
    out = str(tmp_path / "never.csv")

    assert run(["run", "--config", config, "--out", out]) == EXIT_CONFIG

    assert not os.path.exists(out)
    assert "malformed JSON" in capsys.readouterr().err


def test_invalid_config_names_key(write_config, small_config, tmp_path, capsys) -> None:
    small_config["model"]["layers"][1]["channel"]["bitz"] = 3
    config = write_config(small_config)
    assert run(["se", "--config", config, "--out", str(tmp_path / "x.csv")]) == EXIT_CONFIG
    assert "model.layers[1].channel.bitz" in capsys.readouterr().err


def test_missing_config(monkeypatch) -> None:
    monkeypatch.delenv("MLGAMP_CONFIG", raising=False)
    assert run(["se"]) == EXIT_CONFIG


def test_se(write_config, small_config, tmp_path) -> None:
    config = write_config(small_config)
    out = str(tmp_path / "se.csv")

    assert run(["se", "--config", config, "--out", out]) == EXIT_OK

    rows = read_csv(out)
    assert 1 <= len(rows) <= 5
    assert list(rows[0])[:3] == ["iter", "mse", "mse_db"]
    assert "Sigma_2" in rows[0]
    mse = [float(r["mse"]) for r in rows]
    assert all(b <= a + 1e-12 for a, b in zip(mse, mse[1:]))


def test_se_breakdown(write_config, small_config, tmp_path, monkeypatch) -> None:
    monkeypatch.setattr(stateevo, "_information_last", lambda *args: math.nan)
    config = write_config(small_config)
    out = str(tmp_path / "se.csv")

    assert run(["se", "--config", config, "--out", out]) == EXIT_DIVERGED

    rows = read_csv(out)
    assert rows[-1]["iter"] == "1"
    assert math.isnan(float(rows[-1]["mse"]))
    assert read_echo(out)["status"] == "breakdown"


def test_run_divergence_keeps_partial_csv(write_config, small_config, tmp_path) -> None:
    # GIVEN
    estimator = harness.run

    def diverging(spec, matrices, y, opts):
        estimate, trace = estimator(spec, matrices, y, opts)
        trace.failure = DivergenceError(1, 0, "Sigma")
        return estimate, trace

    config = write_config(small_config)
    out = str(tmp_path / "run.csv")

    # WHEN
    with mock.patch.object(harness, "run", side_effect=diverging) as patched:
        code = run(["run", "--config", config, "--out", out, "--jobs", "1"])

    # THEN
    assert code == EXIT_DIVERGED
    assert patched.called
    rows = read_csv(out)
    assert len(rows) == 11
    assert (rows[-1]["trial"], rows[-1]["iter"]) == ("1", "6")
    assert math.isnan(float(rows[-1]["nmse"]))
    assert read_echo(out)["status"] == "diverged"


def test_compare(write_config, small_config, tmp_path) -> None:
    config = write_config(small_config)
    out = str(tmp_path / "compare.csv")

    code = run(["compare", "--config", config, "--out", out, "--jobs", "1", "--threshold-db", "100"])

    assert code == EXIT_OK
    rows = read_csv(out)
    assert [int(r["iter"]) for r in rows] == [1, 2, 3, 4, 5]
    assert all(float(r["gap_db"]) >= 0 for r in rows)
    assert all(r["se_ser"] != "" for r in rows)


def test_compare_zero_threshold(write_config, small_config, tmp_path) -> None:
    config = write_config(small_config)
    out = str(tmp_path / "compare.csv")

    code = run(["compare", "--config", config, "--out", out, "--jobs", "1", "--threshold-db", "0"])

    assert code == EXIT_GAP
    assert read_echo(out)["status"] == "gap-exceeded"


def test_sweep_writes_file_per_point(write_config, small_config, tmp_path) -> None:
    small_config["sweep"] = {"parameter": "bits", "values": [1, None], "layers": [2]}
    small_config["run"]["iters"] = 2
    config = write_config(small_config)
    out = str(tmp_path / "sweep.csv")

    assert run(["run", "--config", config, "--out", out, "--jobs", "1"]) == EXIT_OK

    assert len(read_csv(str(tmp_path / "sweep-bits1.csv"))) == 4
    assert len(read_csv(str(tmp_path / "sweep-bitsinf.csv"))) == 4
    assert read_echo(str(tmp_path / "sweep-bits1.csv"))["model"]["layers"][1]["channel"]["bits"] == 1

