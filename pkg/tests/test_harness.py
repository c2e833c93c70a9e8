"""Experiment grid runner, result persistence, and the CLI."""

import dataclasses

import numpy as np
import pytest

from sbilab import cli, harness, inference


def _tuple_without_clock(row):
    return dataclasses.astuple(row)[:-1]


def _small_cfg(**overrides):
    base = dict(model="toy", method="npe", n_list=[40], rules=["n", "nlogn"],
                replications=2, m_draws=500, k=2, master_seed=3,
                max_epochs=30)
    base.update(overrides)
    return harness.ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# Schedules and config plumbing


def test_rules_constant():
    assert harness.RULES == ("n", "nlogn", "n1.5", "n2")


def test_n_schedule_values():
    assert harness.n_schedule(100, "n") == 100
    assert harness.n_schedule(100, "nlogn") == 461
    assert harness.n_schedule(100, "n1.5") == 1000
    assert harness.n_schedule(100, "n2") == 10000
    assert harness.n_schedule(1000, "n2") == 1000000
    assert harness.n_schedule(2, "nlogn") == 2


def test_n_schedule_errors():
    with pytest.raises(ValueError):
        harness.n_schedule(1, "n")
    with pytest.raises(ValueError):
        harness.n_schedule(100, "n3")


def test_config_json_round_trip():
    cfg = _small_cfg(summary="octiles", theta_true=[0.5])
    back = harness.ExperimentConfig.from_json(cfg.to_json())
    assert back == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        harness.ExperimentConfig.from_json('{"model": "toy", "bogus": 1}')


def test_config_hash_is_stable_and_sensitive():
    cfg = _small_cfg()
    h1 = harness.config_hash(cfg)
    h2 = harness.config_hash(_small_cfg())
    assert h1 == h2
    assert len(h1) == 12
    assert int(h1, 16) >= 0
    assert harness.config_hash(_small_cfg(master_seed=4)) != h1


def test_effective_k():
    assert harness.effective_k(8, 100) == 4
    assert harness.effective_k(8, 200) == 8
    assert harness.effective_k(8, 1000) == 8
    assert harness.effective_k(8, 10) == 1
    assert harness.effective_k(2, 10000) == 2


# ---------------------------------------------------------------------------
# Row persistence


def test_save_load_rows_round_trip(tmp_path):
    rows = [
        harness.ResultRow("toy", "npe", 40, "n", 40, 0, 123,
                          "post_mean_theta", 0.123456789012345, 41,
                          note="x"),
        harness.ResultRow("toy", "npe", 40, "nlogn", 148, 1, 456,
                          "kld_vs_oracle", -0.05, 149),
    ]
    path = tmp_path / "rows.csv"
    harness.save_rows(rows, path)
    back = harness.load_rows(path)
    assert len(back) == 2
    assert ({_tuple_without_clock(r) for r in back}
            == {_tuple_without_clock(r) for r in rows})


def test_load_rows_rejects_unknown_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        harness.load_rows(path)


# ---------------------------------------------------------------------------
# Grid execution


def test_run_experiment_zero_replications():
    rows, paths = harness.run_experiment(_small_cfg(replications=0))
    assert rows == []
    assert paths == {}


def test_run_experiment_row_accounting():
    cfg = _small_cfg(rules=["n"], replications=1)
    rows, _ = harness.run_experiment(cfg)
    metrics_seen = {r.metric for r in rows}
    assert "error" not in metrics_seen
    # 1 param: 3 point metrics + 3 levels x (lo, hi, hit) + 4
    # diagnostics + 1 divergence = 17 rows
    assert len(rows) == 17
    for name in ("post_mean_theta", "post_sd_theta", "bias_theta",
                 "ci90_lo_theta", "ci90_hi_theta", "hit90_theta",
                 "k_eff", "fit_epochs", "fit_val_nll",
                 "leaked_fraction", "kld_vs_oracle"):
        assert name in metrics_seen
    row = rows[0]
    assert row.n_train == 40
    assert row.sim_budget == 41
    k_eff = [r for r in rows if r.metric == "k_eff"][0]
    assert k_eff.value == 1.0  # 40 // 25


def test_run_experiment_rerun_is_byte_identical(tmp_path):
    cfg = _small_cfg()
    harness.run_experiment(cfg, out_dir=tmp_path / "a")
    harness.run_experiment(cfg, out_dir=tmp_path / "b")
    a = (tmp_path / "a" / "results.csv").read_bytes()
    b = (tmp_path / "b" / "results.csv").read_bytes()
    assert a == b
    assert (tmp_path / "a" / "meta.json").exists()


def test_run_experiment_cells_are_config_independent():
    # the n=40 cells must not depend on whether n=60 is also in the grid
    rows_small, _ = harness.run_experiment(
        _small_cfg(rules=["n"], replications=1))
    rows_big, _ = harness.run_experiment(
        _small_cfg(rules=["n"], replications=1, n_list=[40, 60]))
    big_40 = [r for r in rows_big if r.n == 40]
    assert ({_tuple_without_clock(r) for r in big_40}
            == {_tuple_without_clock(r) for r in rows_small})


def test_run_experiment_isolates_cell_failures(monkeypatch):
    real = inference.run_npe

    def flaky(spec, s_obs, n_train, rng, **kwargs):
        if n_train == 148:  # the nlogn cell
            raise RuntimeError("boom")
        return real(spec, s_obs, n_train, rng, **kwargs)

    monkeypatch.setattr(harness.inference, "run_npe", flaky)
    rows, _ = harness.run_experiment(_small_cfg(replications=1))
    errors = [r for r in rows if r.metric == "error"]
    good = [r for r in rows if r.rule == "n" and r.metric != "error"]
    assert len(errors) == 1
    assert errors[0].rule == "nlogn"
    assert "boom" in errors[0].note
    assert len(good) == 17


def test_run_experiment_unknown_method_errors_per_cell():
    rows, _ = harness.run_experiment(
        _small_cfg(method="vi", rules=["n"], replications=1))
    assert all(r.metric == "error" for r in rows)
    assert "vi" in rows[0].note


# ---------------------------------------------------------------------------
# Coverage table and incompatibility summary


def test_coverage_table_formats_levels():
    rows = []
    for rule, hits in (("n", [1, 1, 1, 1]), ("n2", [1, 0, 1, 0])):
        for rep, hit in enumerate(hits):
            for level in (80, 90, 95):
                rows.append(harness.ResultRow(
                    "stereo", "npe", 100, rule, 100, rep, 1,
                    f"hit{level}_rate", float(hit), 1))
    table = harness.coverage_table(rows)
    assert len(table) == 1
    entry = table[0]
    assert set(entry) == {"n_obs", "n", "n2"}
    assert entry["n_obs"] == 100
    assert entry["n"] == "1.00/1.00/1.00"
    assert entry["n2"] == "0.50/0.50/0.50"


def test_coverage_table_requires_hit_rows():
    with pytest.raises(ValueError):
        harness.coverage_table([harness.ResultRow(
            "toy", "npe", 40, "n", 40, 0, 1, "post_mean_theta", 0.1, 41)])


def test_incompat_summary_spearman():
    rows = []
    means = {"n": 4.0, "nlogn": 3.0, "n1.5": 2.0, "n2": 1.0}
    for rule, mean in means.items():
        for rep in range(3):
            rows.append(harness.ResultRow(
                "ma2", "npe", 100, rule, 100, rep, 1,
                "kld_vs_oracle", mean + 0.01 * rep, 1))
    out = harness.incompat_summary(rows)
    assert out["rules"] == ["n", "nlogn", "n1.5", "n2"]
    assert out["spearman"] == -1.0
    with pytest.raises(ValueError):
        harness.incompat_summary(rows[:2])


def test_incompatibility_study_requires_ma2():
    with pytest.raises(ValueError):
        harness.incompatibility_study(_small_cfg(model="toy"), 0.5)


def test_incompatibility_study_none_delta_matches_plain_run():
    cfg = harness.ExperimentConfig(
        model="ma2", method="npe", n_list=[30], rules=["n"],
        replications=1, m_draws=400, k=2, master_seed=5, max_epochs=20)
    plain, _ = harness.run_experiment(cfg)
    via_study = harness.incompatibility_study(cfg, None)
    assert ({_tuple_without_clock(r) for r in via_study}
            == {_tuple_without_clock(r) for r in plain})


# ---------------------------------------------------------------------------
# CLI


def test_cli_simulate_and_fit_round(tmp_path):
    out = str(tmp_path)
    assert cli.main(["--out", out, "simulate", "--model", "toy",
                     "--n", "50", "--reps", "5"]) == 0
    assert (tmp_path / "summaries.csv").exists()

    assert cli.main(["--out", out, "fit-npe", "--model", "toy", "--n", "100",
                     "--train-n", "2000", "--k", "2", "--m", "1000"]) == 0
    assert (tmp_path / "npe-draws.csv").exists()
    assert (tmp_path / "npe-mixture.json").exists()

    assert cli.main(["--out", out, "fit-nle", "--model", "toy", "--n", "100",
                     "--train-n", "2000", "--k", "2", "--m", "500"]) == 0
    assert (tmp_path / "nle-draws.csv").exists()

    assert cli.main(["--out", out, "oracle-sample", "--model", "toy",
                     "--n", "100", "--m", "2000"]) == 0
    assert cli.main(["--out", out, "kld",
                     "--p", str(tmp_path / "oracle-draws.csv"),
                     "--q", str(tmp_path / "npe-draws.csv")]) == 0

    npe = inference.load_draws(tmp_path / "npe-draws.csv")
    assert npe.method == "npe"
    assert len(npe) == 1000


def test_cli_abc(tmp_path):
    out = str(tmp_path)
    assert cli.main(["--out", out, "abc", "--model", "toy", "--n", "100",
                     "--particles", "300", "--max-sims", "20000"]) == 0
    ds = inference.load_draws(tmp_path / "abc-draws.csv")
    assert ds.method == "abc-smc"
    assert len(ds) == 300


def test_cli_experiment_and_coverage_table(tmp_path):
    out = str(tmp_path)
    code = cli.main(["--out", out, "experiment", "--model", "toy",
                     "--method", "npe", "--n-list", "40", "--rules", "n",
                     "--reps", "1", "--m", "500"])
    assert code == 0
    results = tmp_path / "results.csv"
    assert results.exists()
    assert cli.main(["--out", out, "coverage-table",
                     "--results", str(results)]) == 0
    assert (tmp_path / "coverage.csv").exists()


def test_cli_experiment_reports_cell_errors(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("forced failure")

    monkeypatch.setattr(harness.inference, "run_npe", boom)
    code = cli.main(["--out", str(tmp_path), "experiment", "--model", "toy",
                     "--method", "npe", "--n-list", "40", "--rules", "n",
                     "--reps", "1", "--m", "100"])
    assert code == 1


def test_cli_obs_length_check(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["--out", str(tmp_path), "fit-npe", "--model", "toy",
                  "--n", "100", "--train-n", "1000",
                  "--obs", "0.1,0.2"])
