"""Command-line front end.

Subcommands
-----------
ingest-check  load the CSV inputs and report panel shape and missingness
fit           fit each model on each scenario's estimation window
evstudy       abnormal values, test battery, diagnostics and plot data
diagnostics   diagnostics table only
mc            Monte Carlo size/power experiment from the ``mc`` section

Exit codes: 0 success, 2 configuration, 3 data, 4 numerical, 5 I/O.

The config file (YAML or JSON) is declarative; command-line flags override
its values and the effective config is copied into the output directory.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .baselines import MAX_ORDER
from .diagnostics import diagnostics_table
from .errors import ConfigError, DataError, NumericalError, ParameterError, SteventError
from .eventstudy import DEFAULT_REGISTRY, compute_abnormal, plot_data, run_battery
from .hdgm import HdgmParams
from .panel import Panel, add_lagged_covariates, ingest_csv, split_windows
from .pipeline import expand_models, fit_model
from .simgen import Scenario, SimConfig, run_monte_carlo

log = logging.getLogger("stevent")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
CONFIG_VERSION = 1


# -- config -------------------------------------------------------------------------------

@dataclass
class EventScenario:
    name: str
    event_date: str
    end_date: str | None = None


@dataclass
class RunConfig:
    """Effective run configuration (see README for the file schema)."""

    stations: str | None = None
    observations: str | None = None
    covariates: str | None = None
    lag_base: list = field(default_factory=list)
    lags: list = field(default_factory=list)
    scenarios: list = field(default_factory=list)
    models: list = field(default_factory=lambda: ["hdgm"])
    statistics: list | None = None
    output: str = "stevent-out"
    seed: int = 0
    threads: int = 1
    em_tol: float = 1e-6
    em_max_iter: int = 400
    smoothness: float = 0.5
    insample: str = "smoothed"
    max_order: int = MAX_ORDER
    hampel_half_window: int = 10
    hampel_threshold: float = 3.0
    two_sided: bool = False
    mc: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def hdgm_options(self) -> dict:
        return {"tol": self.em_tol, "max_iter": self.em_max_iter, "smoothness": self.smoothness}

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k not in ("raw", "scenarios")}
        d["scenarios"] = [s.__dict__ for s in self.scenarios]
        d["version"] = CONFIG_VERSION
        return d


def _date(v, what):
    if v is None:
        return None
    try:
        return str(np.datetime64(str(v), "D"))
    except ValueError:
        raise ConfigError(f"{what} {v!r} is not a valid date") from None


def load_config(path) -> dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping")
    return data


def build_config(raw: dict, args) -> RunConfig:
    """Merge the config mapping with command-line overrides and validate."""
    raw = dict(raw)
    version = raw.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version}")
    data = dict(raw.get("data") or {})
    numeric = dict(raw.get("numeric") or {})
    cfg = RunConfig(raw=raw)
    cfg.stations = data.get("stations")
    cfg.observations = data.get("observations")
    cfg.covariates = data.get("covariates")
    lagged = data.get("lagged") or {}
    cfg.lag_base = list(lagged.get("base", []))
    cfg.lags = [int(l) for l in lagged.get("lags", [])]
    base_dir = Path(getattr(args, "config", None) or ".").resolve().parent if getattr(args, "config", None) else Path.cwd()
    for attr in ("stations", "observations", "covariates"):
        v = getattr(cfg, attr)
        if v is not None and not os.path.isabs(v):
            setattr(cfg, attr, str(base_dir / v))

    scen = raw.get("scenarios")
    event = getattr(args, "event_date", None) or raw.get("event_date")
    end = getattr(args, "end_date", None) or raw.get("end_date")
    if scen:
        for i, s in enumerate(scen):
            if not isinstance(s, dict) or "event_date" not in s:
                raise ConfigError(f"scenario {i} needs an event_date")
            cfg.scenarios.append(EventScenario(str(s.get("name", f"scenario{i + 1}")),
                                               _date(s["event_date"], "event_date"),
                                               _date(s.get("end_date"), "end_date")))
    elif event is not None:
        cfg.scenarios.append(EventScenario("main", _date(event, "event_date"), _date(end, "end_date")))
    names = [s.name for s in cfg.scenarios]
    if len(set(names)) != len(names):
        raise ConfigError("scenario names must be unique")

    models = getattr(args, "models", None) or raw.get("models", ["hdgm"])
    cfg.models = expand_models(models)
    stats_ = getattr(args, "stats", None) or raw.get("statistics")
    if stats_ is not None:
        if isinstance(stats_, str):
            stats_ = [s.strip() for s in stats_.split(",") if s.strip()]
        DEFAULT_REGISTRY.validate(stats_)
        cfg.statistics = list(stats_)
    cfg.output = getattr(args, "out", None) or raw.get("output") or cfg.output
    seed = getattr(args, "seed", None)
    cfg.seed = int(seed if seed is not None else raw.get("seed", 0))
    threads = getattr(args, "threads", None)
    cfg.threads = int(threads if threads is not None else raw.get("threads", 1))
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    for key, typ in (("em_tol", float), ("em_max_iter", int), ("smoothness", float), ("max_order", int),
                     ("hampel_half_window", int), ("hampel_threshold", float), ("two_sided", bool),
                     ("insample", str)):
        if key in numeric:
            try:
                setattr(cfg, key, typ(numeric[key]))
            except (TypeError, ValueError):
                raise ConfigError(f"numeric.{key} must be {typ.__name__}") from None
    if not 0 <= cfg.max_order <= MAX_ORDER:
        raise ConfigError(f"numeric.max_order must be in [0, {MAX_ORDER}]")
    if cfg.insample not in ("smoothed", "predicted"):
        raise ConfigError("numeric.insample must be 'smoothed' or 'predicted'")
    if cfg.em_tol <= 0 or cfg.em_max_iter < 1:
        raise ConfigError("numeric.em_tol must be positive and em_max_iter >= 1")
    if cfg.hampel_half_window < 1 or cfg.hampel_threshold <= 0:
        raise ConfigError("Hampel half window must be >= 1 and threshold positive")
    cfg.mc = dict(raw.get("mc") or {})
    reps = getattr(args, "replications", None)
    if reps is not None:
        cfg.mc["replications"] = int(reps)
    return cfg


# -- output helpers -------------------------------------------------------------------------

def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    # probe writability up front so I/O failures surface before any fitting
    fd, probe = tempfile.mkstemp(dir=out, prefix=".probe-")
    os.close(fd)
    os.unlink(probe)
    return out


def atomic_write(path, text: str):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp)
        raise


def write_csv(df: pd.DataFrame, path, index=False):
    atomic_write(path, df.to_csv(index=index))


def write_json(obj, path):
    atomic_write(path, json.dumps(obj, indent=2, default=_jsonable) + "\n")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, (_dt.date, _dt.datetime, np.datetime64)):
        return str(o)
    raise TypeError(type(o).__name__)


def _save_config(cfg: RunConfig, out: Path, args):
    write_json({"effective": cfg.to_dict(), "source": cfg.raw, "command": args.command,
                "version": __version__, "written": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")},
               out / "config.json")
    if getattr(args, "config", None):
        atomic_write(out / ("config" + Path(args.config).suffix + ".orig"), Path(args.config).read_text(encoding="utf-8"))


# -- data ---------------------------------------------------------------------------------------

def _load_panel(cfg: RunConfig) -> Panel:
    if not cfg.stations or not cfg.observations:
        raise ConfigError("config must give data.stations and data.observations")
    panel = ingest_csv(cfg.stations, cfg.observations, cfg.covariates)
    if cfg.lags:
        panel = add_lagged_covariates(panel, cfg.lag_base or list(panel.covariate_names), cfg.lags)
    return panel


def _require_scenarios(cfg: RunConfig):
    if not cfg.scenarios:
        raise ConfigError("no event_date or scenarios configured")


def _fit_all(cfg: RunConfig, panel: Panel):
    """Yield (scenario, split, model, ModelFit) for every scenario x model."""
    for sc in cfg.scenarios:
        split = split_windows(panel, sc.event_date, sc.end_date)
        for m in cfg.models:
            log.info("fitting %s on scenario %s (tau0=%d, tau1=%d)", m, sc.name, split.tau0, split.tau1)
            fit = fit_model(panel, split, m, max_order=cfg.max_order, hdgm_options=cfg.hdgm_options(),
                            insample=cfg.insample)
            for note in fit.notes:
                log.warning("%s/%s: %s", sc.name, m, note)
            yield sc, split, m, fit


def _nc_frame(panel: Panel, split, nc) -> pd.DataFrame:
    df = pd.DataFrame(nc.T, columns=list(panel.station_ids))
    df.insert(0, "date", [str(d) for d in panel.timeline[split.omega]])
    return df


def _write_fit(out: Path, sc, split, m, fit, panel):
    d = out / "fits" / sc.name
    if fit.hdgm is not None:
        write_json(fit.hdgm.to_dict(), d / f"{m}.json")
    else:
        write_csv(pd.DataFrame(fit.summary_rows()), d / f"{m}_summary.csv")
        write_json({"model": m, "stations": [_baseline_json(f) for f in fit.baselines]}, d / f"{m}.json")
    write_csv(_nc_frame(panel, split, fit.nc), d / f"{m}_normal_values.csv")


def _baseline_json(f) -> dict:
    return {
        **f.summary(),
        "coefficients": dict(zip(f.coef_names, map(float, f.coef))),
        "ar": list(map(float, f.ar)),
        "ma": list(map(float, f.ma)),
        "sigma2": f.sigma2,
        "loglik": f.loglik,
        "converged": f.converged,
        "message": f.message,
    }


def _load_nc(fits_dir: Path, sc, m, panel, split):
    path = fits_dir / sc.name / f"{m}_normal_values.csv"
    if not path.exists():
        raise DataError(f"no fitted normal values at {path}; run 'stevent fit' with the same config first "
                        f"or drop --from-fits to fit in-line")
    df = pd.read_csv(path)
    missing = [s for s in panel.station_ids if s not in df.columns]
    if missing or len(df) != split.tau:
        raise DataError(f"{path} does not match the panel and windows of scenario {sc.name}")
    return df[list(panel.station_ids)].to_numpy(float).T


# -- commands ----------------------------------------------------------------------------------------

def cmd_ingest_check(cfg: RunConfig, args) -> int:
    panel = _load_panel(cfg)
    out = _prepare_out(cfg.output)
    obs = panel.observations
    summary = {
        "n_stations": panel.n_stations,
        "n_times": panel.n_times,
        "start": str(panel.timeline[0]),
        "end": str(panel.timeline[-1]),
        "covariates": list(panel.covariate_names),
        "first_usable": panel.first_usable,
        "missing_pct": float(100 * np.mean(~np.isfinite(obs))),
        "per_station_missing_pct": {s: float(100 * np.mean(~np.isfinite(r))) for s, r in zip(panel.station_ids, obs)},
    }
    windows = []
    for sc in cfg.scenarios:
        sp = split_windows(panel, sc.event_date, sc.end_date)
        windows.append({"scenario": sc.name, "tau0": sp.tau0, "tau1": sp.tau1,
                        "estimation_start": str(panel.timeline[sp.t0 + 1]),
                        "event_start": str(panel.timeline[sp.t1 + 1]),
                        "event_end": str(panel.timeline[sp.t_end])})
    summary["windows"] = windows
    write_json(summary, out / "ingest_summary.json")
    _save_config(cfg, out, args)
    print(f"{panel.n_stations} stations x {panel.n_times} days "
          f"({summary['start']} .. {summary['end']}), {summary['missing_pct']:.2f}% missing")
    for w in windows:
        print(f"  {w['scenario']}: tau0={w['tau0']} tau1={w['tau1']} event {w['event_start']}..{w['event_end']}")
    return EXIT_OK


def cmd_fit(cfg: RunConfig, args) -> int:
    _require_scenarios(cfg)
    out = _prepare_out(cfg.output)
    panel = _load_panel(cfg)
    _save_config(cfg, out, args)
    rows, n_art = [], 0
    for sc, split, m, fit in _fit_all(cfg, panel):
        _write_fit(out, sc, split, m, fit, panel)
        n_art += 1
        rows.append({"scenario": sc.name, "model": m, "converged": fit.converged, "notes": " | ".join(fit.notes)})
        if fit.hdgm is not None:
            print(f"{sc.name}/{m}: loglik={fit.hdgm.loglik:.3f} iterations={fit.hdgm.iterations} "
                  f"converged={fit.hdgm.converged}")
        else:
            print(f"{sc.name}/{m}: {len(fit.baselines)} station fits")
    write_csv(pd.DataFrame(rows), out / "fit_status.csv")
    print(f"wrote {n_art} fit artifacts to {out}")
    return EXIT_OK


def _abnormal_sets(cfg, panel, args):
    fits_dir = Path(args.from_fits) if getattr(args, "from_fits", None) else None
    for sc in cfg.scenarios:
        split = split_windows(panel, sc.event_date, sc.end_date)
        for m in cfg.models:
            if fits_dir is not None:
                nc = _load_nc(fits_dir, sc, m, panel, split)
            else:
                fit = fit_model(panel, split, m, max_order=cfg.max_order, hdgm_options=cfg.hdgm_options(),
                                insample=cfg.insample)
                for note in fit.notes:
                    log.warning("%s/%s: %s", sc.name, m, note)
                nc = fit.nc
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", RuntimeWarning)
                abn = compute_abnormal(panel, nc, split)
            for w in caught:
                log.warning("%s/%s: %s", sc.name, m, w.message)
            yield sc, split, m, abn


def _diag(cfg, abns):
    return diagnostics_table(abns, half_window=cfg.hampel_half_window, threshold=cfg.hampel_threshold)


def cmd_evstudy(cfg: RunConfig, args) -> int:
    _require_scenarios(cfg)
    out = _prepare_out(cfg.output)
    panel = _load_panel(cfg)
    _save_config(cfg, out, args)
    per_scenario: dict = {}
    sign_rows = []
    for sc, split, m, abn in _abnormal_sets(cfg, panel, args):
        d = out / sc.name
        rep = run_battery(abn, cfg.statistics, two_sided=cfg.two_sided, label=f"{sc.name}/{m}")
        write_csv(rep.to_frame(), d / f"battery_{m}.csv")
        atomic_write(d / f"battery_{m}.json", rep.to_json())
        write_csv(plot_data(abn), d / f"plot_{m}.csv")
        per_scenario.setdefault(sc.name, {})[m] = abn
        for r in rep:
            if r.available:
                sign_rows.append({"scenario": sc.name, "model": m, "stat_id": r.stat_id, "value": r.value,
                                  "stars": r.stars})
        print(f"== {sc.name} / {m} (tau0={split.tau0}, tau1={split.tau1}, r_bar={abn.r_bar:.3f})")
        print(rep.format())
    for name, abns in per_scenario.items():
        write_csv(_diag(cfg, abns), out / name / "diagnostics.csv", index=True)
    if sign_rows:
        table = pd.DataFrame(sign_rows)
        write_csv(table, out / "scenario_comparison.csv")
        if len(per_scenario) > 1:
            summ = _sign_consistency(table)
            write_csv(summ, out / "sign_consistency.csv")
            n_ok = int(summ.consistent.sum())
            print(f"sign consistency across {len(per_scenario)} scenarios: {n_ok}/{len(summ)} (model, statistic) pairs")
    return EXIT_OK


def _sign_consistency(table: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for (m, sid), g in table.groupby(["model", "stat_id"], sort=False):
        s = np.sign(g.value.to_numpy())
        rows.append({"model": m, "stat_id": sid, "n_scenarios": len(g), "n_negative": int(np.sum(s < 0)),
                     "n_positive": int(np.sum(s > 0)), "consistent": bool(np.all(s == s[0]))})
    return pd.DataFrame(rows)


def cmd_diagnostics(cfg: RunConfig, args) -> int:
    _require_scenarios(cfg)
    out = _prepare_out(cfg.output)
    panel = _load_panel(cfg)
    _save_config(cfg, out, args)
    per_scenario: dict = {}
    for sc, split, m, abn in _abnormal_sets(cfg, panel, args):
        per_scenario.setdefault(sc.name, {})[m] = abn
    for name, abns in per_scenario.items():
        table = _diag(cfg, abns)
        write_csv(table, out / name / "diagnostics.csv", index=True)
        print(f"== {name}")
        print(table.round(3).to_string())
    return EXIT_OK


def mc_scenarios(mc: dict) -> list[Scenario]:
    """Build the Monte Carlo grid from the ``mc`` config section.

    ``base`` holds SimConfig fields plus HDGM parameters (beta, g, nu, theta,
    sigma2_eps); each ``grid`` entry has a ``name`` and overrides, including
    ``model`` for the normal-value model.
    """
    base = dict(mc.get("base") or {})
    grid = mc.get("grid") or [{"name": "H0"}]
    if not isinstance(grid, list):
        raise ConfigError("mc.grid must be a list")
    out = []
    prm_keys = ("beta", "g", "nu", "theta", "sigma2_eps", "smoothness")
    sim_keys = ("n_stations", "tau0", "tau1", "side_km", "shift")
    for i, cell in enumerate(grid):
        spec = {**base, **(cell or {})}
        name = str(spec.pop("name", f"cell{i + 1}"))
        model = str(spec.pop("model", "lm")).lower()
        expand_models(model)
        unknown = set(spec) - set(prm_keys) - set(sim_keys)
        if unknown:
            raise ConfigError(f"mc cell {name}: unknown keys {sorted(unknown)}")
        try:
            prm = HdgmParams(np.asarray(spec.get("beta", [1.0, 0.5]), float), spec.get("g", 0.0),
                             spec.get("nu", 0.0), spec.get("theta", 10.0), spec.get("sigma2_eps", 1.0),
                             spec.get("smoothness", 0.5))
            sim = SimConfig(int(spec.get("n_stations", 10)), int(spec.get("tau0", 200)), int(spec.get("tau1", 20)),
                            prm, side_km=float(spec.get("side_km", 100.0)), shift=float(spec.get("shift", 0.0)))
        except (ParameterError, TypeError, ValueError) as exc:
            raise ConfigError(f"mc cell {name}: {exc}") from None
        out.append(Scenario(name, sim, model))
    return out


def cmd_mc(cfg: RunConfig, args) -> int:
    mc = cfg.mc
    scen = mc_scenarios(mc)
    reps = int(mc.get("replications", 200))
    if reps < 1:
        raise ConfigError("mc.replications must be >= 1")
    out = _prepare_out(cfg.output)
    _save_config(cfg, out, args)

    def progress(name, done, total):
        if done == total or done % max(1, total // 10) == 0:
            log.info("%s: %d/%d replications", name, done, total)

    rep = run_monte_carlo(scen, reps, stats=cfg.statistics, root_seed=cfg.seed, two_sided=cfg.two_sided,
                          n_jobs=cfg.threads, hdgm_options=cfg.hdgm_options(), progress=progress)
    write_csv(rep.table, out / "mc_report.csv")
    atomic_write(out / "mc_report.json", rep.to_json() + "\n")
    print(rep.wide(0.05).round(3).to_string())
    flagged = rep.table[rep.table.flagged].scenario.unique()
    if len(flagged):
        print(f"flagged cells (>10% failed replications): {', '.join(flagged)}")
    return EXIT_OK


COMMANDS = {
    "ingest-check": cmd_ingest_check,
    "fit": cmd_fit,
    "evstudy": cmd_evstudy,
    "diagnostics": cmd_diagnostics,
    "mc": cmd_mc,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker processes for Monte Carlo replications")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--models", nargs="+", help="hdgm, lm, regar1, regarma or all")
    common.add_argument("--stats", help="comma-separated statistic ids")
    common.add_argument("--event-date", dest="event_date")
    common.add_argument("--end-date", dest="end_date")

    p = argparse.ArgumentParser(prog="stevent", description="Spatio-temporal event studies on station panels.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest-check", parents=[common], help="validate and summarize input data")
    sub.add_parser("fit", parents=[common], help="fit models and write fit artifacts")
    ev = sub.add_parser("evstudy", parents=[common], help="run the event study")
    ev.add_argument("--from-fits", dest="from_fits", help="reuse normal values written by 'fit' (its fits/ dir)")
    dg = sub.add_parser("diagnostics", parents=[common], help="abnormal-value diagnostics table")
    dg.add_argument("--from-fits", dest="from_fits")
    mc = sub.add_parser("mc", parents=[common], help="Monte Carlo size/power experiment")
    mc.add_argument("--replications", type=int)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, ParameterError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SteventError as exc:  # pragma: no cover - every subclass is mapped above
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
