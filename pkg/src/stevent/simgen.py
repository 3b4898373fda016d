"""Synthetic HDGM panels and the Monte Carlo size/power harness."""
from __future__ import annotations

import json
import warnings
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError
from .hdgm import HdgmParams, matern_matrix
from .panel import Panel, Station, WindowSplit, distance_matrix

log = logging.getLogger(__name__)

ALPHAS = (0.01, 0.05, 0.10)


@dataclass(frozen=True, eq=False)
class SimConfig:
    """Simulation settings for one scenario.

    ``params.beta`` has the intercept first followed by one coefficient per
    standard-normal covariate.  ``shift`` is the level change added over the
    event window, in units of ``sqrt(nu + sigma2_eps)``.
    """

    n_stations: int
    tau0: int
    tau1: int
    params: HdgmParams
    side_km: float = 100.0
    coords: np.ndarray | None = None
    shift: float = 0.0
    seed: int = 0
    start_date: str = "2000-01-01"

    def __post_init__(self):
        if self.n_stations < 1:
            raise ConfigError("n_stations must be >= 1")
        if self.tau0 < 10:
            raise ConfigError("tau0 must be >= 10")
        if self.tau1 < 1:
            raise ConfigError("tau1 must be >= 1")
        if not math.isfinite(self.shift):
            raise ConfigError("shift must be finite")
        if self.coords is not None:
            c = np.asarray(self.coords, float)
            if c.shape != (self.n_stations, 2):
                raise ConfigError(f"coords must have shape ({self.n_stations}, 2)")
            object.__setattr__(self, "coords", c)
        elif not self.side_km > 0:
            raise ConfigError("side_km must be positive")

    @property
    def n_covariates(self) -> int:
        return len(self.params.beta) - 1

    def replace(self, **changes) -> "SimConfig":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return SimConfig(**kw)

    def describe(self) -> dict:
        d = {k: getattr(self, k) for k in ("n_stations", "tau0", "tau1", "side_km", "shift", "seed")}
        d.update({k: v for k, v in self.params.to_dict().items() if k != "beta"})
        return d


@dataclass(frozen=True, eq=False)
class SimulatedPanel:
    panel: Panel
    split: WindowSplit
    params: HdgmParams
    latent: np.ndarray
    config: SimConfig


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_panel(config: SimConfig, seed=None) -> SimulatedPanel:
    """Draw one panel from the HDGM with an optional event-window level shift.

    ``seed`` overrides ``config.seed`` (an int, a ``SeedSequence`` or a
    ``Generator``).
    """
    rng = _rng(config.seed if seed is None else seed)
    prm = config.params
    n, tau = config.n_stations, config.tau0 + config.tau1
    coords = config.coords if config.coords is not None else rng.uniform(0, config.side_km, (n, 2))
    M = matern_matrix(distance_matrix(coords), prm.theta, prm.smoothness)
    L = np.linalg.cholesky(M + 1e-12 * np.eye(n))
    z = rng.standard_normal((tau, n)) @ L.T
    w = np.empty((tau, n))
    w[0] = z[0] * math.sqrt(prm.nu / (1 - prm.g**2))
    sd = math.sqrt(prm.nu)
    for t in range(1, tau):
        w[t] = prm.g * w[t - 1] + sd * z[t]
    k = config.n_covariates
    X = rng.standard_normal((n, tau, k))
    eps = rng.standard_normal((n, tau)) * math.sqrt(prm.sigma2_eps)
    y = prm.beta[0] + X @ prm.beta[1:] + w.T + eps
    if config.shift:
        y[:, config.tau0:] += config.shift * math.sqrt(prm.nu + prm.sigma2_eps)
    timeline = np.datetime64(config.start_date, "D") + np.arange(tau)
    stations = [Station(f"S{i + 1:03d}", float(x), float(yy)) for i, (x, yy) in enumerate(coords)]
    panel = Panel(stations, timeline, y, X, tuple(f"x{j + 1}" for j in range(k)))
    split = WindowSplit(-1, config.tau0 - 1, tau - 1)
    return SimulatedPanel(panel, split, prm, w.T.copy(), config)


# -- Monte Carlo harness --------------------------------------------------------------

MIN_REPORT_REPLICATIONS = 200
FAILURE_LIMIT = 0.10


@dataclass(frozen=True, eq=False)
class Scenario:
    """One grid cell: a simulation config and the model used for normal values."""

    name: str
    config: SimConfig
    model: str = "lm"

    def describe(self) -> dict:
        return {"scenario": self.name, "model": self.model, **self.config.describe()}


def replication_seed(root_seed: int, rep: int) -> np.random.SeedSequence:
    """Counter-based stream for replication ``rep``.

    The stream does not depend on the grid cell, so cells that differ only
    in ``shift`` share their noise (common random numbers).
    """
    return np.random.SeedSequence(int(root_seed), spawn_key=(int(rep),))


def _one_replication(scenario: Scenario, rep: int, root_seed: int, stat_ids, two_sided: bool, hdgm_options):
    # imported lazily to keep simgen importable without the fitting stack
    from .eventstudy import compute_abnormal, run_battery
    from .pipeline import fit_model

    sim = simulate_panel(scenario.config, seed=np.random.default_rng(replication_seed(root_seed, rep)))
    try:
        fit = fit_model(sim.panel, sim.split, scenario.model, hdgm_options=hdgm_options)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            abn = compute_abnormal(sim.panel, fit.nc, sim.split)
            rep_ = run_battery(abn, stat_ids, two_sided=two_sided, on_error="record")
    except Exception as exc:  # noqa: BLE001 - any fit failure is tallied, not fatal
        return rep, None, None, f"{type(exc).__name__}: {exc}"
    values = {r.stat_id: r.value for r in rep_ if r.available}
    pvals = {r.stat_id: r.p_value for r in rep_ if r.available}
    return rep, values, pvals, abn.r_bar


@dataclass
class McReport:
    """Rejection rates per scenario, statistic and level.

    ``table`` has one row per (scenario, stat_id, alpha) with columns
    scenario, model, shift, r_bar_mean, stat_id, alpha, rate, mc_se,
    n_valid, n_failed, replications, flagged.  ``values`` keeps the raw
    statistic values per scenario (replications x statistics).
    """

    table: pd.DataFrame
    values: dict
    root_seed: int
    replications: int
    failures: dict

    def rate(self, scenario: str, stat_id: str, alpha: float = 0.05) -> float:
        return float(self._row(scenario, stat_id, alpha)["rate"])

    def mc_se(self, scenario: str, stat_id: str, alpha: float = 0.05) -> float:
        return float(self._row(scenario, stat_id, alpha)["mc_se"])

    def _row(self, scenario, stat_id, alpha):
        t = self.table
        m = (t.scenario == scenario) & (t.stat_id == stat_id) & np.isclose(t.alpha, alpha)
        if not m.any():
            raise KeyError((scenario, stat_id, alpha))
        return t[m].iloc[0]

    def wide(self, alpha: float = 0.05) -> pd.DataFrame:
        t = self.table[np.isclose(self.table.alpha, alpha)]
        return t.pivot(index="stat_id", columns="scenario", values="rate")

    def to_csv(self, path):
        self.table.to_csv(path, index=False, encoding="utf-8")

    def to_json(self, path=None) -> str:
        payload = {
            "root_seed": self.root_seed,
            "replications": self.replications,
            "failures": self.failures,
            "rows": json.loads(self.table.to_json(orient="records")),
        }
        text = json.dumps(payload, indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


def run_monte_carlo(scenarios: Sequence[Scenario], replications: int = MIN_REPORT_REPLICATIONS,
                    stats: Sequence[str] | None = None, root_seed: int = 0, alphas=ALPHAS,
                    two_sided: bool = False, n_jobs: int = 1, hdgm_options: dict | None = None,
                    progress=None) -> McReport:
    """Size/power experiment over a grid of scenarios.

    Each replication simulates a panel, fits the scenario's model on the
    estimation window, computes abnormal values and runs the battery.
    Failed replications are excluded and counted; a cell whose failure
    share exceeds 10% is flagged.  Fewer than 200 replications is allowed
    but logged as below reporting strength.
    """
    from .eventstudy import DEFAULT_REGISTRY

    if replications < 1:
        raise ConfigError("replications must be >= 1")
    if replications < MIN_REPORT_REPLICATIONS:
        log.warning("%d replications is below the reporting minimum of %d", replications, MIN_REPORT_REPLICATIONS)
    scenarios = list(scenarios)
    if not scenarios:
        raise ConfigError("empty scenario grid")
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ConfigError("scenario names must be unique")
    stat_ids = list(stats) if stats is not None else DEFAULT_REGISTRY.implemented()
    DEFAULT_REGISTRY.validate(stat_ids)
    stat_ids = [s for s in stat_ids if DEFAULT_REGISTRY[s].available]
    alphas = tuple(float(a) for a in alphas)

    rows, values, failures = [], {}, {}
    for sc in scenarios:
        args = [(sc, r, root_seed, stat_ids, two_sided, hdgm_options) for r in range(replications)]
        if n_jobs and n_jobs > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=n_jobs) as ex:
                out = list(ex.map(_one_replication, *zip(*args)))
        else:
            out = []
            for a in args:
                out.append(_one_replication(*a))
                if progress is not None:
                    progress(sc.name, a[1] + 1, replications)
        out.sort(key=lambda o: o[0])
        vals = np.full((replications, len(stat_ids)), np.nan)
        pv = np.full_like(vals, np.nan)
        rbars, errs = [], []
        for rep, v, p, extra in out:
            if v is None:
                errs.append(extra)
                continue
            rbars.append(extra)
            for j, sid in enumerate(stat_ids):
                vals[rep, j] = v.get(sid, np.nan)
                pv[rep, j] = p.get(sid, np.nan)
        n_failed = len(errs)
        failures[sc.name] = errs
        values[sc.name] = pd.DataFrame(vals, columns=stat_ids)
        flagged = n_failed / replications > FAILURE_LIMIT
        for j, sid in enumerate(stat_ids):
            ok = np.isfinite(pv[:, j])
            n_valid = int(ok.sum())
            for a in alphas:
                rate = float(np.mean(pv[ok, j] < a)) if n_valid else np.nan
                se = math.sqrt(rate * (1 - rate) / n_valid) if n_valid else np.nan
                rows.append({
                    "scenario": sc.name,
                    "model": sc.model,
                    "shift": sc.config.shift,
                    "r_bar_mean": float(np.mean(rbars)) if rbars else np.nan,
                    "stat_id": sid,
                    "alpha": a,
                    "rate": rate,
                    "mc_se": se,
                    "n_valid": n_valid,
                    "n_failed": replications - n_valid,
                    "replications": replications,
                    "flagged": bool(flagged or (replications - n_valid) / replications > FAILURE_LIMIT),
                })
    return McReport(pd.DataFrame(rows), values, int(root_seed), int(replications), failures)
