import json
import math

import numpy as np
import pytest

from conftest import oracle_mdp
from mbpg.cli import main
from mbpg.env import save_tabular_mdp
from mbpg.harness import (
    ConfigError,
    SuiteResult,
    aggregate,
    bucket_curve,
    export_suite,
    parse_config,
    parse_seeds,
    run_suite,
)
from mbpg.optimizers import TrainConfig
from mbpg.record import COLUMNS, ExportError, RunRecord, RunRow, export, from_csv, load, to_csv


@pytest.fixture
def mdp_path(tmp_path):
    path = tmp_path / "mdp.json"
    save_tabular_mdp(oracle_mdp(), path)
    return path


def test_table_row_config():
    cfg = parse_config("--algo is-mbpg --env cartpole --k 0.75 --c 2 --m 2 --batch 50 --horizon 100 "
                       "--gamma 0.99 --probes 500000 --seed 1".split())
    assert (cfg.algo, cfg.env, cfg.batch, cfg.horizon, cfg.probes, cfg.seed) == ("is-mbpg", "cartpole", 50, 100,
                                                                                  500000, 1)
    assert (cfg.k, cfg.c, cfg.m, cfg.gamma) == (0.75, 2.0, 2.0, 0.99)


def test_vanilla_config():
    cfg = parse_config(["--algo", "vanilla-pg", "--lr", "0.01"])
    assert cfg.algo == "vanilla-pg" and cfg.lr == 0.01


def test_invalid_values_name_the_key(tmp_path):
    with pytest.raises(ConfigError) as err:
        parse_config(["--batch", "0"])
    assert err.value.key == "batch"
    with pytest.raises(ConfigError) as err:
        parse_config(["--hvp-delta", "0.5"])
    assert err.value.key == "hvp_delta"
    with pytest.raises(ConfigError) as err:
        parse_config(["--env", "mujoco"])
    assert err.value.key == "env"
    with pytest.raises(ConfigError):
        parse_config(["--momentum", "0.9"])


def test_file_values_and_cli_override(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"algo": "is-mbpg-star", "k": 0.9, "batch": 10, "clip-high": 100.0}))
    cfg = parse_config(["--batch", "20"], file=path)
    assert (cfg.algo, cfg.k, cfg.batch, cfg.clip_high) == ("is-mbpg-star", 0.9, 20, 100.0)
    cfg2 = parse_config(["--config", str(path)])
    assert cfg2.batch == 10
    path.write_text(json.dumps({"learning_rate": 0.1}))
    with pytest.raises(ConfigError) as err:
        parse_config([], file=path)
    assert err.value.key == "learning_rate"
    path.write_text(json.dumps({"batch": 2.5}))
    with pytest.raises(ConfigError, match="batch"):
        parse_config([], file=path)


def test_parse_seeds():
    assert parse_seeds("1-10") == list(range(1, 11))
    assert parse_seeds("1,3,5-6") == [1, 3, 5, 6]
    with pytest.raises(ConfigError):
        parse_seeds("1,1")
    with pytest.raises(ConfigError):
        run_suite(TrainConfig(), [3, 3])


def _tab_cfg(path, **kw):
    return TrainConfig(env=f"tabular:{path}", horizon=3, gamma=0.9, probes=150, **kw)


def test_suite_is_ordered_and_independent_of_workers(mdp_path):
    cfg = _tab_cfg(mdp_path, algo="is-mbpg", batch=2)
    seq = run_suite(cfg, [4, 1, 7])
    par = run_suite(cfg, [4, 1, 7], workers=3)
    assert seq.seeds == [4, 1, 7]
    assert [r.metadata["seed"] for r in seq.ok] == [4, 1, 7]
    assert [to_csv(r) for r in seq.ok] == [to_csv(r) for r in par.ok]
    for rec in seq.ok:
        probes = rec.column("system_probes")
        assert all(a < b for a, b in zip(probes, probes[1:]))


def test_suite_flags_failed_seeds(mdp_path):
    res = run_suite(_tab_cfg(mdp_path, algo="vanilla-pg", lr=1e9), [1, 2])
    assert res.ok == [] and set(res.failures) == {1, 2}
    assert "diverged" in res.failures[1]


def _record(points):
    rec = RunRecord()
    for i, (probes, ret) in enumerate(points, start=1):
        rec.append(RunRow(i, probes, ret, 1.0, 0.1, 0.5))
    return rec


def test_aggregate_is_per_bucket_mean():
    rng = np.random.default_rng(0)
    recs = []
    for _ in range(5):
        probes = np.cumsum(rng.integers(5, 40, size=60))
        recs.append(_record(zip(probes.tolist(), rng.uniform(0, 100, 60).tolist())))
    agg = aggregate(recs, budget=1000)
    assert len(agg["edges"]) == 100 and agg["edges"][0] == 10.0
    curves = np.stack([bucket_curve(r, np.array(agg["edges"])) for r in recs])
    for j in range(100):
        col = curves[:, j][~np.isnan(curves[:, j])]
        if len(col):
            assert abs(agg["mean"][j] - sum(col) / len(col)) <= 1e-12
            assert abs(agg["std"][j] - np.std(col)) <= 1e-12
        else:
            assert math.isnan(agg["mean"][j])


def test_bucket_curve_uses_latest_row():
    rec = _record([(5, 1.0), (12, 2.0), (30, 3.0)])
    np.testing.assert_array_equal(bucket_curve(rec, np.array([4, 5, 20, 40])), [np.nan, 1.0, 2.0, 3.0])


def test_empty_record_is_header_only(tmp_path):
    path = export(RunRecord(), tmp_path / "empty.csv")
    assert path.read_text() == ",".join(COLUMNS) + "\n"
    assert load(path).rows == []


def test_csv_roundtrip_byte_identical(tmp_path, mdp_path):
    rec = run_suite(_tab_cfg(mdp_path, algo="ha-mbpg"), [2]).ok[0]
    rec.rows.append(RunRow(999, 10**9, 1 / 3, math.pi * 1e-300, 2.0**-60, 0.1 + 0.2, 7))
    first = export(rec, tmp_path / "a.csv").read_text()
    second = to_csv(load(tmp_path / "a.csv"))
    assert first == second
    assert from_csv(first).rows == rec.rows


def test_json_export_has_metadata(tmp_path, mdp_path):
    cfg = _tab_cfg(mdp_path, algo="is-mbpg", k=0.6, c=3.0, m=4.0, batch=2)
    rec = run_suite(cfg, [5]).ok[0]
    path = export(rec, tmp_path / "r.json", "json")
    data = json.loads(path.read_text())
    assert data["metadata"]["seed"] == 5
    conf = data["metadata"]["config"]
    for key, val in {"algo": "is-mbpg", "k": 0.6, "c": 3.0, "m": 4.0, "batch": 2, "horizon": 3, "gamma": 0.9,
                     "probes": 150, "clip_low": 1e-4, "clip_high": 1e4, "hvp_delta": 1e-4, "seed": 5}.items():
        assert conf[key] == val
    assert load(path).rows == rec.rows


def test_export_io_error_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ExportError, match="file"):
        export(RunRecord(), blocker / "sub" / "r.csv")


def test_export_suite_writes_summary(tmp_path):
    res = SuiteResult(seeds=[1, 2], records=[_record([(5, 1.0)]), None], failures={2: "boom"})
    res.summary = aggregate(res.ok, 10)
    paths = export_suite(res, tmp_path / "out")
    assert [p.name for p in paths] == ["seed_1.csv", "summary.json"]
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["failed_seeds"] == {"2": "boom"} and summary["seeds"] == [1, 2]


def test_cli_success_and_outputs(tmp_path, mdp_path):
    out = tmp_path / "runs"
    code = main(["--algo", "is-mbpg", "--env", f"tabular:{mdp_path}", "--horizon", "3", "--gamma", "0.9",
                 "--probes", "60", "--seeds", "1-2", "--out", str(out), "--format", "json"])
    assert code == 0
    assert sorted(p.name for p in out.iterdir()) == ["seed_1.json", "seed_2.json", "summary.json"]


def test_cli_config_error(capsys):
    assert main(["--batch", "0"]) == 1
    assert "batch" in capsys.readouterr().err
    assert main(["--algo", "sgd"]) == 1
    assert main(["--seeds", "2,2"]) == 1


def test_cli_partial_failure(mdp_path):
    code = main(["--algo", "vanilla-pg", "--lr", "1e9", "--env", f"tabular:{mdp_path}", "--horizon", "3",
                 "--probes", "60", "--seeds", "1,2"])
    assert code == 2


def test_cli_same_seed_byte_identical(tmp_path, mdp_path):
    args = ["--algo", "is-mbpg", "--env", f"tabular:{mdp_path}", "--horizon", "3", "--probes", "90", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "seed_3.csv").read_bytes() == (tmp_path / "b" / "seed_3.csv").read_bytes()
