import json

import numpy as np
import pandas as pd
import pytest
import yaml

from stevent.cli import EXIT_CONFIG, EXIT_DATA, EXIT_IO, main
from stevent.hdgm import HdgmParams
from stevent.panel import write_panel_csv
from stevent.simgen import SimConfig, simulate_panel


@pytest.fixture
def toy(tmp_path):
    """Simulated 4-station panel with a drop of 2 marginal sd from 2000-05-30."""
    sim = simulate_panel(SimConfig(4, 150, 20, HdgmParams([5.0, 1.0], 0.6, 1.0, 30.0, 0.5), shift=-2.0, seed=3))
    data = tmp_path / "data"
    data.mkdir()
    paths = write_panel_csv(sim.panel, data)
    return tmp_path, {k: str(v) for k, v in paths.items()}


def write_cfg(tmp_path, paths, **extra):
    cfg = {
        "version": 1,
        "data": dict(paths),
        "event_date": "2000-05-30",
        "models": ["lm"],
        "output": str(tmp_path / "out"),
        "numeric": {"max_order": 1, "em_max_iter": 50},
    }
    cfg.update(extra)
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


class TestIngestCheck:
    def test_summary(self, toy):
        tmp, paths = toy
        assert main(["ingest-check", "--config", write_cfg(tmp, paths)]) == 0
        s = json.loads((tmp / "out" / "ingest_summary.json").read_text())
        assert s["n_stations"] == 4 and s["n_times"] == 170

    def test_missing_file(self, toy, capsys):
        tmp, paths = toy
        paths = dict(paths, observations=str(tmp / "nope.csv"))
        assert main(["ingest-check", "--config", write_cfg(tmp, paths)]) == EXIT_DATA
        assert "nope.csv" in capsys.readouterr().err


class TestFit:
    def test_lm_two_stations(self, tmp_path):
        sim = simulate_panel(SimConfig(2, 40, 5, HdgmParams([1.0, 1.0], 0.5, 1.0, 10.0, 1.0), seed=0))
        d = tmp_path / "d"
        d.mkdir()
        paths = {k: str(v) for k, v in write_panel_csv(sim.panel, d).items()}
        cfg = write_cfg(tmp_path, paths, event_date="2000-02-10")
        assert main(["fit", "--config", cfg]) == 0
        s = pd.read_csv(tmp_path / "out" / "fits" / "main" / "lm_summary.csv")
        assert list(s.columns) == ["station_id", "model_kind", "p_ar", "q_ma", "aicc", "residual_variance"]
        assert len(s) == 2
        assert (tmp_path / "out" / "config.json").exists()

    def test_all_models_three_scenarios(self, toy):
        tmp, paths = toy
        scen = [{"name": "early", "event_date": "2000-05-29"}, {"name": "main", "event_date": "2000-05-30"},
                {"name": "short", "event_date": "2000-05-30", "end_date": "2000-06-10"}]
        cfg = write_cfg(tmp, paths, scenarios=scen, models="all")
        assert main(["fit", "--config", cfg]) == 0
        artifacts = sorted((tmp / "out" / "fits").glob("*/*.json"))
        assert len(artifacts) == 12
        status = pd.read_csv(tmp / "out" / "fit_status.csv")
        assert len(status) == 12 and "converged" in status.columns
        hd = json.loads((tmp / "out" / "fits" / "main" / "hdgm.json").read_text())
        assert {"beta", "g", "nu", "theta", "sigma2_eps", "loglik", "converged"} <= set(hd)

    def test_unwritable_output(self, toy):
        tmp, paths = toy
        blocker = tmp / "file"
        blocker.write_text("x")
        cfg = write_cfg(tmp, paths, output=str(blocker / "sub"))
        assert main(["fit", "--config", cfg]) == EXIT_IO

    def test_flags_override(self, toy):
        tmp, paths = toy
        cfg = write_cfg(tmp, paths)
        assert main(["fit", "--config", cfg, "--out", str(tmp / "o2"), "--models", "regar1"]) == 0
        eff = json.loads((tmp / "o2" / "config.json").read_text())
        assert eff["effective"]["models"] == ["regar1"]
        assert (tmp / "o2" / "fits" / "main" / "regar1.json").exists()


class TestEvstudy:
    def test_h1_report(self, toy):
        tmp, paths = toy
        cfg = write_cfg(tmp, paths, models=["lm", "hdgm"], statistics=["P1", "Z_patell", "Z_BMP_adj", "CumRank"])
        assert main(["evstudy", "--config", cfg]) == 0
        out = tmp / "out" / "main"
        b = pd.read_csv(out / "battery_lm.csv")
        assert list(b.stat_id) == ["P1", "Z_BMP_adj", "CumRank", "Z_patell"]
        assert b.loc[b.stat_id == "P1", "stars"].item() == "unavailable"
        avail = b[b.stat_id != "P1"]
        assert (avail.value < 0).all() and (avail.p_left < 0.05).all()
        p = pd.read_csv(out / "plot_hdgm.csv")
        assert list(p.columns) == ["date", "mean_ac", "lower", "upper", "event_window"]
        assert p.event_window.sum() == 20
        d = pd.read_csv(out / "diagnostics.csv", index_col=0)
        assert list(d.columns) == ["lm", "hdgm"]
        j = json.loads((out / "battery_hdgm.json").read_text())
        assert len(j["results"]) == 4

    def test_scenarios_and_consistency(self, toy):
        tmp, paths = toy
        scen = [{"name": "a", "event_date": "2000-05-29"}, {"name": "b", "event_date": "2000-05-30"}]
        cfg = write_cfg(tmp, paths, scenarios=scen, statistics=["Z_patell", "CumRank"])
        assert main(["evstudy", "--config", cfg]) == 0
        comp = pd.read_csv(tmp / "out" / "scenario_comparison.csv")
        assert list(comp.columns) == ["scenario", "model", "stat_id", "value", "stars"]
        assert set(comp.scenario) == {"a", "b"} and len(comp) == 4
        sc = pd.read_csv(tmp / "out" / "sign_consistency.csv")
        assert len(sc) == 2 and sc.consistent.all() and (sc.n_negative == 2).all()

    def test_from_fits(self, toy):
        tmp, paths = toy
        cfg = write_cfg(tmp, paths)
        assert main(["fit", "--config", cfg]) == 0
        assert main(["evstudy", "--config", cfg, "--from-fits", str(tmp / "out" / "fits"), "--out",
                     str(tmp / "o2")]) == 0
        a = pd.read_csv(tmp / "o2" / "main" / "battery_lm.csv")
        assert main(["evstudy", "--config", cfg, "--out", str(tmp / "o3")]) == 0
        b = pd.read_csv(tmp / "o3" / "main" / "battery_lm.csv")
        np.testing.assert_allclose(a.value, b.value, rtol=1e-10, equal_nan=True)

    def test_missing_fits(self, toy, capsys):
        tmp, paths = toy
        cfg = write_cfg(tmp, paths)
        assert main(["evstudy", "--config", cfg, "--from-fits", str(tmp / "none")]) == EXIT_DATA
        assert "stevent fit" in capsys.readouterr().err

    def test_diagnostics_command(self, toy):
        tmp, paths = toy
        assert main(["diagnostics", "--config", write_cfg(tmp, paths, models=["lm", "regar1"])]) == 0
        d = pd.read_csv(tmp / "out" / "main" / "diagnostics.csv", index_col=0)
        assert list(d.index)[0] == "rho_bar" and list(d.columns) == ["lm", "regar1"]


class TestConfigErrors:
    @pytest.mark.parametrize("patch", [
        {"version": 2},
        {"models": ["arima"]},
        {"statistics": ["Z_nope"]},
        {"event_date": "not-a-date"},
        {"numeric": {"max_order": 9}},
    ])
    def test_rejected(self, toy, patch):
        tmp, paths = toy
        assert main(["fit", "--config", write_cfg(tmp, paths, **patch)]) == EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert main(["fit", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG

    def test_event_outside(self, toy):
        tmp, paths = toy
        assert main(["fit", "--config", write_cfg(tmp, paths, event_date="1999-01-01")]) == EXIT_DATA


MC = {
    "replications": 5,
    "base": {"beta": [1.0, 0.5], "n_stations": 5, "tau0": 60, "tau1": 5, "nu": 0.0},
    "grid": [{"name": "H0"}, {"name": "H1", "shift": -1.0}],
}


class TestMc:
    def _cfg(self, tmp, mc, out="mc"):
        p = tmp / f"{out}.yaml"
        p.write_text(yaml.safe_dump({"version": 1, "seed": 4, "output": str(tmp / out), "mc": mc,
                                     "statistics": ["Z_patell", "CumRank"]}))
        return str(p)

    def test_deterministic(self, tmp_path):
        assert main(["mc", "--config", self._cfg(tmp_path, MC, "a")]) == 0
        assert main(["mc", "--config", self._cfg(tmp_path, MC, "b")]) == 0
        a = pd.read_csv(tmp_path / "a" / "mc_report.csv")
        b = pd.read_csv(tmp_path / "b" / "mc_report.csv")
        pd.testing.assert_frame_equal(a, b)
        assert set(a.scenario) == {"H0", "H1"}
        assert json.loads((tmp_path / "a" / "mc_report.json").read_text())["root_seed"] == 4

    def test_invalid_grid(self, tmp_path):
        mc = dict(MC, grid=[{"name": "bad", "tau1": 0}])
        assert main(["mc", "--config", self._cfg(tmp_path, mc)]) == EXIT_CONFIG
        assert not (tmp_path / "mc").exists()

    def test_unknown_key(self, tmp_path):
        mc = dict(MC, grid=[{"name": "bad", "colour": 1}])
        assert main(["mc", "--config", self._cfg(tmp_path, mc)]) == EXIT_CONFIG

    def test_replications_flag(self, tmp_path):
        assert main(["mc", "--config", self._cfg(tmp_path, MC), "--replications", "3"]) == 0
        assert (pd.read_csv(tmp_path / "mc" / "mc_report.csv").replications == 3).all()
