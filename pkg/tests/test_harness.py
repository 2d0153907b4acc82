import dataclasses
import filecmp

import numpy as np
import pandas as pd
import pytest

from cellfree_jcd import cli, config, harness
from cellfree_jcd.config import ExperimentConfig, ScenarioConfig
from cellfree_jcd.model import GeometryConfig

SMALL = ScenarioConfig(K=3, T_p=2, geometry=GeometryConfig(area=(200.0, 200.0), ap_grid=(2, 2)))


def small_cfg(**kw):
    base = dict(study="ser_vs_power", drops=3, realizations=1, powers_dbm=(10.0,), Td=(4,), seed=7, scenario=SMALL)
    base.update(kw)
    return ExperimentConfig(**base)


def test_one_trial_one_record():
    res = harness.run_experiment(small_cfg(drops=1, algorithms=("ep_mod",), pilots=("dft",)), write=False)
    agg = res.records[res.records.ue == -1]
    assert len(agg) == 1
    assert len(res.records) == 1 + 3
    assert list(res.records.columns) == list(harness.CSV_HEADER)


def test_csv_header_exact(tmp_path):
    res = harness.run_experiment(small_cfg(drops=1), out_dir=tmp_path)
    first = res.csv_path.read_text().splitlines()[0]
    assert first == "study,algorithm,pilot,Td,power_dbm,drop,realization,ue,nmse,ser,ck,diverged,seed_hi,seed_lo"


def test_deterministic_across_worker_counts(tmp_path):
    a = harness.run_experiment(small_cfg(workers=1, trace=True), out_dir=tmp_path / "a")
    b = harness.run_experiment(small_cfg(workers=2, trace=True), out_dir=tmp_path / "b")
    assert filecmp.cmp(a.csv_path, b.csv_path, shallow=False)
    assert filecmp.cmp(a.trace_path, b.trace_path, shallow=False)


def test_in_memory_matches_csv(tmp_path):
    res = harness.run_experiment(small_cfg(), out_dir=tmp_path)
    disk = harness.read_results(res.csv_path)
    pd.testing.assert_frame_equal(res.records.reset_index(drop=True), disk, check_dtype=False)


def test_record_reproducible_from_seed_tuple():
    cfg = small_cfg(drops=4, algorithms=("mmse_pilot_csi",), pilots=("dft",)).resolved()
    res = harness.run_experiment(cfg, write=False)
    row = res.records[(res.records.ue == -1) & (res.records["drop"] == 2)].iloc[0]
    assert (int(row.seed_hi), int(row.seed_lo)) == harness.trial_seeds(cfg.seed, 2, 0)
    again = harness.run_trial(cfg, 2, 0)[0]
    assert again.ser == row.ser and again.nmse == row.nmse


def test_common_random_numbers_across_powers():
    cfg = small_cfg(drops=1, powers_dbm=(0.0, 10.0), algorithms=("mmse_perfect_csi",), pilots=("dft",)).resolved()
    recs = harness.run_trial(cfg, 0, 0)
    assert recs[0].seed_lo == recs[1].seed_lo
    # same unit noise and data: higher power cannot produce more errors here
    assert recs[1].ser <= recs[0].ser


def test_aggregates_equal_mean_of_persisted_rows():
    res = harness.run_experiment(small_cfg(drops=4), write=False)
    df = res.records
    curve = harness.mean_curve(df, "ser")
    agg = df[df.ue == -1]
    for _, r in curve.dropna(subset=["mean"]).iterrows():
        sel = agg[(agg.algorithm == r.algorithm) & (agg.pilot == r.pilot) & (agg.Td == r.Td) & (agg.power_dbm == r.power_dbm)]
        assert r["mean"] == pytest.approx(sel.ser.mean())
    # the trial-level SER is the mean of the per-UE SERs
    for (alg, pil, d), g in df[df.ser.notna()].groupby(["algorithm", "pilot", "drop"]):
        assert g[g.ue == -1].ser.iloc[0] == pytest.approx(g[g.ue >= 0].ser.mean())


def test_plot_series_counts(tmp_path):
    res = harness.run_experiment(small_cfg(algorithms=("ep_mod", "mmse_pilot_csi")), write=False)
    files = harness.emit_plot_series(res, "ser_vs_power", tmp_path)
    assert len(files) == 4
    assert sorted(f.name for f in files) == [
        "ep_mod_dft_Td4.txt", "ep_mod_hadamard_Td4.txt", "mmse_pilot_csi_dft_Td4.txt", "mmse_pilot_csi_hadamard_Td4.txt"]
    data = np.loadtxt(files[0])
    assert data.shape == (5,)  # one power: power, ser, stderr, n, diverged


def test_all_studies_emit(tmp_path):
    res = harness.run_experiment(small_cfg(drops=2, realizations=2, trace=True), write=False)
    for study in config.STUDIES:
        files = harness.emit_plot_series(res, study, tmp_path / study)
        assert files and all(f.stat().st_size > 0 for f in files)
    cdf = np.loadtxt(tmp_path / "cdf_ser" / "ep_mod_dft_Td4.txt")
    assert cdf.shape[0] == 2 * 3  # drops x UEs, realizations averaged
    assert cdf[-1, 1] == 1.0
    it = np.loadtxt(tmp_path / "nmse_vs_iter" / "ep_mod_dft_Td4.txt")
    assert it.shape[0] == 21


def test_cdf_ck_study_needs_no_algorithms(tmp_path):
    res = harness.run_experiment(small_cfg(study="cdf_ck", drops=5), out_dir=tmp_path)
    assert set(res.records.algorithm) == {harness.METRIC_ONLY}
    assert res.records.nmse.isna().all() and res.records.ck.notna().all()
    files = harness.emit_plot_series(res.csv_path, "cdf_ck", tmp_path / "s")
    assert sorted(f.name for f in files) == ["pc_metric_dft.txt", "pc_metric_hadamard.txt"]
    assert np.loadtxt(files[0]).shape == (15, 2)


def test_missing_and_empty_inputs(tmp_path):
    res = harness.run_experiment(small_cfg(algorithms=("ep_mod",), pilots=("dft",)), write=False)
    with pytest.raises(harness.MissingDataError, match="ep_legacy_dft_Td4"):
        harness.emit_plot_series(res, "ser_vs_power", tmp_path, required=[("ep_mod", "dft", 4), ("ep_legacy", "dft", 4)])
    with pytest.raises(harness.MissingDataError, match="traces"):
        harness.emit_plot_series(res, "nmse_vs_iter", tmp_path)
    empty = res.records.iloc[:0]
    with pytest.raises(harness.MissingDataError):
        harness.emit_plot_series(empty, "ser_vs_power", tmp_path / "e")
    assert not (tmp_path / "e").exists()
    with pytest.raises(ValueError):
        harness.emit_plot_series(res, "bogus", tmp_path)


def test_divergence_flagged_and_excluded(monkeypatch):
    from cellfree_jcd import ep

    real = ep.run
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 1:
            raise ep.EPDivergence("forced")
        return real(*a, **k)

    monkeypatch.setattr(ep, "run", flaky)
    res = harness.run_experiment(small_cfg(algorithms=("ep_mod",), pilots=("dft",)), write=False)
    agg = res.records[res.records.ue == -1]
    assert agg.diverged.sum() == 1
    assert agg[agg.diverged == 1].ser.isna().all()
    curve = harness.mean_curve(res.records, "ser")
    assert int(curve.n.iloc[0]) == 2 and int(curve.diverged.iloc[0]) == 1


def test_paired_difference():
    res = harness.run_experiment(small_cfg(drops=5, algorithms=("mmse_pilot_csi", "mmse_perfect_csi")), write=False)
    m, se, n = harness.paired_difference(res.records, "ser", dict(algorithm="mmse_perfect_csi", pilot="dft"), dict(algorithm="mmse_pilot_csi", pilot="dft"))
    assert n == 5 and se >= 0 and np.isfinite(m)


def test_config_validation_and_defaults():
    cfg = ExperimentConfig(study="ser_vs_ck").resolved()
    assert (cfg.drops, cfg.realizations) == (100, 100)
    assert cfg.powers_dbm == (16.0,) and cfg.Td == (30,)
    full = ExperimentConfig(study="ser_vs_power", full_scale=True).resolved()
    assert (full.drops, full.realizations) == (10_000, 1)
    assert ExperimentConfig().resolved().powers_dbm == tuple(float(p) for p in range(0, 21, 2))
    for bad in (dict(study="nope"), dict(algorithms=()), dict(algorithms=("xyz",)), dict(drops=0), dict(pilots=("gold",))):
        with pytest.raises(ValueError):
            ExperimentConfig(**bad).resolved()


def test_parsers():
    assert config.parse_power_sweep("0:20:5") == (0.0, 5.0, 10.0, 15.0, 20.0)
    assert config.parse_power_sweep("16") == (16.0,)
    assert config.parse_power_sweep("1,2.5") == (1.0, 2.5)
    assert config.parse_trials("100x100") == (100, 100)
    assert config.parse_trials("200×1") == (200, 1)
    assert config.parse_trials("7") == (7, 1)
    with pytest.raises(ValueError):
        config.parse_power_sweep("5:0:1")


def test_yaml_config(tmp_path):
    cfg = config.load_config("configs/default.yaml").resolved()
    assert cfg.scenario.L == 16 and cfg.scenario.K == 8 and cfg.scenario.T_p == 4
    assert cfg.ep.eta == 0.5 and cfg.ep.max_iter == 20
    assert cfg.powers_dbm[0] == 0.0 and cfg.powers_dbm[-1] == 20.0
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario:\n  KK: 3\n")
    with pytest.raises(ValueError, match="KK"):
        config.load_config(bad)


def test_out_dir_env_override(monkeypatch, tmp_path):
    monkeypatch.setenv(config.OUT_DIR_ENV, str(tmp_path / "env"))
    assert harness.resolve_out_dir("results") == tmp_path / "env"
    assert harness.resolve_out_dir("results", str(tmp_path / "cli")) == tmp_path / "cli"


def test_cli_simulate_and_plot(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(
        "scenario:\n  K: 3\n  T_p: 2\n  geometry:\n    ap_grid: [2, 2]\n"
        "experiment:\n  study: nmse_vs_power\n  Td: [4]\n"
    )
    rc = cli.main(["simulate", "--config", str(cfg), "--trials", "2x1", "--power-sweep", "0:10:10",
                   "--algorithms", "ep_mod,genie_mmse", "--pilots", "dft", "--seed", "3", "--out", str(tmp_path / "o")])
    assert rc == 0
    csv = tmp_path / "o" / "nmse_vs_power.csv"
    df = harness.read_results(csv)
    assert set(df.algorithm) == {"ep_mod", "genie_mmse"} and set(df.power_dbm) == {0.0, 10.0}
    assert sorted(p.name for p in (tmp_path / "o" / "nmse_vs_power_series").iterdir()) == ["ep_mod_dft_Td4.txt", "genie_mmse_dft_Td4.txt"]
    rc = cli.main(["plot", "--results", str(csv), "--study", "ser_vs_power", "--out", str(tmp_path / "p")])
    assert rc == 0
    assert rc == 0 and len(list((tmp_path / "p").iterdir())) == 1


def test_cli_errors(tmp_path, capsys):
    assert cli.main(["plot", "--results", str(tmp_path / "missing.csv"), "--study", "cdf_ck", "--out", str(tmp_path)]) != 0
    assert "error" in capsys.readouterr().err
    assert cli.main(["simulate", "--config", str(tmp_path / "none.yaml")]) != 0
    assert cli.main(["simulate", "--trials", "0x1", "--out", str(tmp_path)]) != 0
    with pytest.raises(SystemExit):
        cli.main(["simulate", "--study", "bogus"])
