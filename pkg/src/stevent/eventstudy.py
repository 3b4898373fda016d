"""Abnormal-value calculus and the event-study test battery.

Abnormal values are observed minus normal values over the estimation and
event windows.  The battery covers five families of statistics:

* ``t``       cross-sectional, crude-dependence and skewness-adjusted t tests
* ``patell``  standardized abnormal values (plus the Kolari-Pynnonen
              cross-correlation adjustment)
* ``bmp``     standardized cross-sectional test (plus adjustment)
* ``corrado`` cumulative rank tests and their variants
* ``grank``   generalized rank tests

Every p-value is left-tailed unless ``two_sided=True`` is requested.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .errors import DataError, NumericalError, ParameterError, UnknownStatisticError
from .panel import Panel, WindowSplit, mean_pairwise_correlation

MIN_POINTS = 30

__all__ = [
    "AbnormalPanel",
    "TestResult",
    "StatSpec",
    "StatRegistry",
    "BatteryReport",
    "DEFAULT_REGISTRY",
    "REPORT_ORDER",
    "compute_abnormal",
    "t_family",
    "patell_family",
    "bmp_family",
    "corrado_family",
    "grank_family",
    "run_battery",
    "register_statistic",
    "plot_data",
    "stars",
]


# -- abnormal values ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AbnormalPanel:
    """Abnormal values over both windows for the included stations.

    Attributes
    ----------
    ac : ndarray (N, tau)
        Abnormal values, NaN where the observation is missing.
    cac : ndarray (N,)
        Event-window sums; NaN for stations with a missing event value.
    sigma_hat : ndarray (N,)
        Estimation-window standard deviations (denominator ``n0 - ddof``).
    r_bar : float
        Average pairwise Pearson correlation of estimation-window values.
    """

    ac: np.ndarray
    cac: np.ndarray
    split: WindowSplit
    sigma_hat: np.ndarray
    r_bar: float
    station_ids: tuple = ()
    dates: np.ndarray | None = None
    excluded: tuple = ()
    notes: tuple = ()

    def __post_init__(self):
        for name in ("ac", "cac", "sigma_hat"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.ac.ndim != 2 or self.ac.shape[1] != self.split.tau:
            raise DataError(f"ac must have shape (N, {self.split.tau})")
        n = self.ac.shape[0]
        if n < 1:
            raise DataError("no stations in the abnormal panel")
        if self.cac.shape != (n,) or self.sigma_hat.shape != (n,):
            raise DataError("cac and sigma_hat must have one entry per station")
        if not np.all(self.sigma_hat > 0):
            raise DataError("sigma_hat must be positive for every included station")
        if not self.station_ids:
            object.__setattr__(self, "station_ids", tuple(f"S{i + 1:03d}" for i in range(n)))

    @property
    def n_stations(self) -> int:
        return self.ac.shape[0]

    @property
    def tau0(self) -> int:
        return self.split.tau0

    @property
    def tau1(self) -> int:
        return self.split.tau1

    @property
    def estimation(self) -> np.ndarray:
        return self.ac[:, : self.tau0]

    @property
    def event(self) -> np.ndarray:
        return self.ac[:, self.tau0:]

    @property
    def complete(self) -> np.ndarray:
        """Stations with every event-window value present."""
        return np.isfinite(self.cac)

    def with_ac(self, ac, **kw) -> "AbnormalPanel":
        """Rebuild from new abnormal values, recomputing derived fields."""
        return from_abnormal(ac, self.split, station_ids=self.station_ids, dates=self.dates, **kw)


def _sigma_hat(est, ddof):
    n0 = np.sum(np.isfinite(est), axis=1)
    dev = est - np.nanmean(est, axis=1, keepdims=True)
    return np.sqrt(np.nansum(dev * dev, axis=1) / (n0 - ddof))


def from_abnormal(ac, split: WindowSplit, station_ids=None, dates=None, min_points: int = MIN_POINTS,
                  ddof: int = 0) -> AbnormalPanel:
    """Build an :class:`AbnormalPanel` directly from an (N, tau) matrix."""
    ac = np.array(ac, dtype=float)
    if ac.ndim != 2 or ac.shape[1] != split.tau:
        raise DataError(f"abnormal matrix must have shape (N, {split.tau}), got {ac.shape}")
    ids = tuple(station_ids) if station_ids is not None else tuple(f"S{i + 1:03d}" for i in range(ac.shape[0]))
    est = ac[:, : split.tau0]
    n0 = np.sum(np.isfinite(est), axis=1)
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sig = _sigma_hat(est, ddof)
    keep = (n0 >= min_points) & (sig > 0)
    notes, excluded = [], []
    for i in np.flatnonzero(~keep):
        why = f"{n0[i]} estimation-window points (< {min_points})" if n0[i] < min_points else "constant estimation-window values"
        excluded.append(ids[i])
        notes.append(f"station {ids[i]} excluded: {why}")
        warnings.warn(notes[-1], RuntimeWarning, stacklevel=2)
    if not keep.any():
        raise DataError("every station was excluded from the abnormal panel")
    ac, sig = ac[keep], sig[keep]
    ids = tuple(s for s, k in zip(ids, keep) if k)
    cac = np.sum(ac[:, split.tau0:], axis=1)
    if ac.shape[0] > 1:
        z = ac[:, : split.tau0] / sig[:, None]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            r_bar = mean_pairwise_correlation(z).mean
        notes.extend(str(w.message) for w in caught)
    else:
        r_bar = 0.0
    return AbnormalPanel(ac, cac, split, sig, float(r_bar), ids, dates, tuple(excluded), tuple(notes))


def compute_abnormal(panel: Panel, nc, split: WindowSplit, min_points: int = MIN_POINTS,
                     ddof: int = 0) -> AbnormalPanel:
    """Abnormal values ``AC = C - NC`` over both windows.

    ``nc`` may cover both windows, shape (N, tau), or the whole panel
    timeline, shape (N, n_times).  Stations with fewer than ``min_points``
    non-missing estimation-window values are excluded with a warning.
    """
    nc = np.asarray(nc, dtype=float)
    n = panel.n_stations
    if nc.shape == (n, panel.n_times) and panel.n_times != split.tau:
        nc = nc[:, split.omega]
    if nc.shape != (n, split.tau):
        raise DataError(f"normal values must have shape ({n}, {split.tau}) or ({n}, {panel.n_times}), got {nc.shape}")
    obs = panel.observations[:, split.omega]
    if np.any(~np.isfinite(nc) & np.isfinite(obs)):
        raise DataError("normal values are missing where observations exist")
    ac = obs - nc
    return from_abnormal(ac, split, panel.station_ids, panel.timeline[split.omega], min_points, ddof)


# -- results ----------------------------------------------------------------------------

def stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.10 else ""


@dataclass(frozen=True)
class TestResult:
    stat_id: str
    value: float
    p_left: float
    cd_adjusted: bool
    family: str
    reference_distribution: str
    df: float | None = None
    available: bool = True
    note: str = ""
    two_sided: bool = False

    __test__ = False  # not a pytest class

    @property
    def p_value(self) -> float:
        if not self.two_sided:
            return self.p_left
        return float(min(1.0, 2.0 * min(self.p_left, 1.0 - self.p_left)))

    @property
    def stars(self) -> str:
        return stars(self.p_value) if self.available else ""

    def as_dict(self) -> dict:
        return {
            "stat_id": self.stat_id,
            "family": self.family,
            "cd_adjusted": self.cd_adjusted,
            "value": self.value if self.available else None,
            "p_left": self.p_left if self.available else None,
            "stars": self.stars if self.available else "unavailable",
            "reference": self.reference_distribution,
            "note": self.note,
        }


def _p_left(value, df):
    if np.isnan(value):
        return np.nan
    return float(stats.norm.cdf(value) if df is None else stats.t.cdf(value, df))


def _ref_name(df):
    return "standard normal" if df is None else f"student-t({df:g})"


# -- parametric families ------------------------------------------------------------------

def _ratio(num, den, what):
    """num/den where 0/0 is 0 and x/0 is an error."""
    if den > 0:
        return num / den
    if num == 0:
        return 0.0
    raise NumericalError(f"zero {what}")


def _param_stations(abn: AbnormalPanel, need: int):
    ok = abn.complete
    if ok.sum() < need:
        raise DataError(f"{int(ok.sum())} stations with a complete event window, need >= {need}")
    return ok


def t_family(abn: AbnormalPanel) -> dict:
    """cross_T_test, crude_dep_T_test and T_skew as ``{id: (value, df)}``.

    ``T_skew`` uses the monotone cubic form of the skewness-adjusted t.
    """
    ok = _param_stations(abn, 3)
    cac = abn.cac[ok]
    n = cac.size
    mean, sd = float(cac.mean()), float(cac.std(ddof=1))
    s = _ratio(mean, sd, "cross-sectional variance of CAC")
    cross_t = math.sqrt(n) * s
    a_bar = np.nanmean(abn.ac[ok], axis=0)
    est = a_bar[: abn.tau0]
    s_a = float(np.nanstd(est, ddof=1))
    crude = _ratio(float(np.nansum(a_bar[abn.tau0:])), math.sqrt(abn.tau1) * s_a, "variance of the mean abnormal series")
    if sd > 0:
        z = (cac - mean) / sd
        gamma = n * float(np.sum(z**3)) / ((n - 1) * (n - 2))
    else:
        gamma = 0.0
    t_skew = math.sqrt(n) * (s + gamma * s * s / 3.0 + gamma**2 * s**3 / 27.0 + gamma / (6.0 * n))
    n_est = int(np.sum(np.isfinite(est)))
    return {
        "cross_T_test": (cross_t, n - 1),
        "crude_dep_T_test": (crude, n_est - 1),
        "T_skew": (t_skew, n - 1),
    }


def _patell_factor(n0, tau1):
    if np.any(n0 <= 4):
        raise ParameterError("Patell standardization needs more than 4 estimation-window points")
    return tau1 * (n0 - 2.0) / (n0 - 4.0)


def _csar(abn: AbnormalPanel, ok):
    n0 = np.sum(np.isfinite(abn.estimation[ok]), axis=1)
    csar = abn.cac[ok] / abn.sigma_hat[ok]
    return csar, _patell_factor(n0, abn.tau1)


def _dependence(r_bar, n):
    d = 1.0 + (n - 1) * r_bar
    if d <= 0:
        raise NumericalError(f"1 + (N-1) r_bar = {d:.3g} is not positive")
    return d


def patell_family(abn: AbnormalPanel) -> dict:
    """Z_patell and Z_patell_adj; standard-normal reference."""
    ok = _param_stations(abn, 1)
    csar, fac = _csar(abn, ok)
    n = csar.size
    z = float(np.sum(csar) / math.sqrt(np.sum(fac)))
    z_adj = z / math.sqrt(_dependence(abn.r_bar, n))
    return {"Z_patell": (z, None), "Z_patell_adj": (z_adj, None)}


def bmp_family(abn: AbnormalPanel) -> dict:
    """Z_BMP and Z_BMP_adj, referred to Student-t with N-1 df."""
    ok = _param_stations(abn, 3)
    csar, fac = _csar(abn, ok)
    scar = csar / np.sqrt(fac)
    n = scar.size
    z = math.sqrt(n) * _ratio(float(scar.mean()), float(scar.std(ddof=1)), "cross-sectional variance of SCAR")
    d = _dependence(abn.r_bar, n)
    z_adj = z * math.sqrt(max(1.0 - abn.r_bar, 0.0) / d)
    return {"Z_BMP": (z, n - 1), "Z_BMP_adj": (z_adj, n - 1)}


# -- rank families ----------------------------------------------------------------------------

def _scaled_ranks(mat, ids=None, notes=None):
    """Row-wise mid-ranks scaled to ``K/(n+1) - 1/2``; NaN stays NaN.

    Rows whose values are all tied are dropped.  Returns (U, kept_mask).
    """
    u = np.full(mat.shape, np.nan)
    keep = np.ones(mat.shape[0], dtype=bool)
    for i, row in enumerate(mat):
        o = np.isfinite(row)
        v = row[o]
        if v.size < 2 or np.all(v == v[0]):
            keep[i] = False
            msg = f"station {ids[i] if ids else i} excluded from rank statistics: all values tied"
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
            if notes is not None:
                notes.append(msg)
            continue
        u[i, o] = stats.rankdata(v) / (v.size + 1.0) - 0.5
    if not keep.any():
        raise DataError("every station was excluded from the rank statistics")
    return u[keep], keep


def _check_rank_lengths(abn: AbnormalPanel):
    n = np.sum(np.isfinite(abn.ac), axis=1)
    if np.any(n < MIN_POINTS):
        raise DataError(f"rank statistics need >= {MIN_POINTS} non-missing values per station")


def _t_form(z, T):
    """``z * sqrt((T-2)/(T-1-z^2))`` with infinite limits."""
    den = T - 1.0 - z * z
    if den <= 0:
        return math.copysign(np.inf, z) if z != 0 else 0.0
    return z * math.sqrt((T - 2.0) / den)


def corrado_family(abn: AbnormalPanel) -> dict:
    """Cumulative rank statistics.

    U is built from mid-ranks over each station's non-missing values in both
    windows.  With ``Ubar_t`` the cross-station mean and ``N_t`` the stations
    present at ``t``:

    * CumRank       sum over the event window of Ubar_t / (sqrt(tau1) s)
                    with ``s^2 = mean_t Ubar_t^2``
    * CumRank_mod   same with ``Ubar_t`` rescaled by ``sqrt(N_t / N)``
    * CumRank_T     t form of CumRank_mod, df ``tau - 2``
    * CumRank_Z     pooled rank sum over its exact permutation variance
                    under cross-sectional independence
    * CumRank_Z_adj CumRank_mod with the finite-population variance
                    ``tau1 (tau - tau1) / (tau - 1)`` of a window sum
    """
    _check_rank_lengths(abn)
    u, _ = _scaled_ranks(abn.ac, abn.station_ids)
    n = u.shape[0]
    tau, tau0, tau1 = abn.split.tau, abn.tau0, abn.tau1
    present = np.isfinite(u)
    n_t = present.sum(axis=0)
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ubar = np.nanmean(u, axis=0)
    live = n_t > 0
    ubar_mod = np.where(live, np.sqrt(n_t / n) * np.nan_to_num(ubar), 0.0)
    ubar = np.where(live, ubar, 0.0)
    s = math.sqrt(float(np.sum(ubar[live] ** 2) / live.sum()))
    s_mod = math.sqrt(float(np.sum(ubar_mod[live] ** 2) / live.sum()))
    ev = slice(tau0, tau)
    cum = _ratio(float(ubar[ev].sum()), math.sqrt(tau1) * s, "rank variance")
    cum_mod = _ratio(float(ubar_mod[ev].sum()), math.sqrt(tau1) * s_mod, "rank variance")
    cum_t = _t_form(cum_mod, tau)
    # pooled statistic with per-station sampling-without-replacement variance
    n_s = present.sum(axis=1)
    m_s = present[:, ev].sum(axis=1)
    v_s = np.nansum(u * u, axis=1) / n_s
    var = float(np.sum(m_s * v_s * (n_s - m_s) / (n_s - 1)))
    cum_z = _ratio(float(np.nansum(u[:, ev])), math.sqrt(var), "rank variance")
    fpc = tau1 * (tau - tau1) / (tau - 1.0)
    cum_z_adj = _ratio(float(ubar_mod[ev].sum()), s_mod * math.sqrt(fpc), "rank variance")
    return {
        "CumRank": (cum, None),
        "CumRank_mod": (cum_mod, None),
        "CumRank_T": (cum_t, tau - 2),
        "CumRank_Z": (cum_z, None),
        "CumRank_Z_adj": (cum_z_adj, None),
    }


def _generalized_ranks(abn: AbnormalPanel):
    """U matrix (N, tau0 + 1): estimation SARs then the event SCAR*."""
    est = abn.estimation / abn.sigma_hat[:, None]
    n0 = np.sum(np.isfinite(est), axis=1)
    m = np.sum(np.isfinite(abn.event), axis=1)
    if np.any(m == 0):
        raise DataError("a station has no event-window values")
    csar = np.nansum(abn.event, axis=1) / abn.sigma_hat
    scar = csar / np.sqrt(_patell_factor(n0, 1) * m)
    if scar.size > 1:
        sd = float(scar.std(ddof=1))
        if sd > 0:
            scar = scar / sd
    g = np.column_stack([est, scar])
    return _scaled_ranks(g, abn.station_ids)


def grank_family(abn: AbnormalPanel) -> dict:
    """Generalized rank statistics Z_grank, T_grank and Z_grank_adj.

    ``Z_grank = Ubar_E / s`` with ``s^2 = sum_t (N_t/N) Ubar_t^2 / (tau0+1)``
    over the estimation positions plus the event position E.  ``T_grank`` is
    its t form with ``tau0 - 1`` df; ``Z_grank_adj`` divides by
    ``sqrt(1 + (N-1) r_U)`` with ``r_U`` the mean pairwise correlation of
    the U series.
    """
    _check_rank_lengths(abn)
    u, _ = _generalized_ranks(abn)
    n = u.shape[0]
    T = abn.tau0 + 1
    present = np.isfinite(u)
    n_t = present.sum(axis=0)
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        ubar = np.where(n_t > 0, np.nanmean(u, axis=0), 0.0)
    s = math.sqrt(float(np.sum(n_t / n * ubar**2)) / T)
    z = _ratio(float(ubar[-1]), s, "generalized rank variance")
    t = _t_form(z, T)
    if n > 1:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            r_u = mean_pairwise_correlation(u).mean
    else:
        r_u = 0.0
    z_adj = z / math.sqrt(_dependence(r_u, n))
    return {"Z_grank": (z, None), "T_grank": (t, T - 2), "Z_grank_adj": (z_adj, None)}


# -- registry -----------------------------------------------------------------------------------

FAMILIES = {
    "t": t_family,
    "patell": patell_family,
    "bmp": bmp_family,
    "corrado": corrado_family,
    "grank": grank_family,
}


@dataclass(frozen=True)
class StatSpec:
    """Registry entry.

    ``kernel`` maps an :class:`AbnormalPanel` to ``value`` or
    ``(value, df)``; ``df=None`` means a standard-normal reference.  A
    ``None`` kernel marks an unfilled extension slot.
    """

    stat_id: str
    family: str
    cd_adjusted: bool
    parametric: bool
    kernel: Callable | None = field(default=None, compare=False)
    source: str = ""

    @property
    def available(self) -> bool:
        return self.kernel is not None or self.family in FAMILIES


class StatRegistry:
    """Ordered mapping from statistic id to :class:`StatSpec`."""

    def __init__(self, specs: Iterable[StatSpec] = ()):
        self._specs: dict[str, StatSpec] = {}
        for s in specs:
            self.add(s)

    def add(self, spec: StatSpec, replace_slot: bool = False):
        old = self._specs.get(spec.stat_id)
        if old is not None and not (replace_slot and not old.available):
            raise ParameterError(f"statistic {spec.stat_id!r} is already registered")
        self._specs[spec.stat_id] = spec

    def __getitem__(self, stat_id) -> StatSpec:
        try:
            return self._specs[stat_id]
        except KeyError:
            raise UnknownStatisticError([stat_id], list(self._specs)) from None

    def __contains__(self, stat_id) -> bool:
        return stat_id in self._specs

    def __iter__(self):
        return iter(self._specs.values())

    def __len__(self) -> int:
        return len(self._specs)

    @property
    def ids(self) -> list[str]:
        return list(self._specs)

    def implemented(self) -> list[str]:
        return [s.stat_id for s in self if s.available]

    def validate(self, ids: Sequence[str]):
        bad = [i for i in ids if i not in self._specs]
        if bad:
            raise UnknownStatisticError(bad, self.ids)

    def copy(self) -> "StatRegistry":
        return StatRegistry(self._specs.values())


def _builtin_registry() -> StatRegistry:
    rows = [
        # id, family, adjusted, parametric, source
        ("P1", "extension", True, False, "extension slot for a user-supplied kernel"),
        ("P2", "extension", True, False, "extension slot for a user-supplied kernel"),
        ("Corrado_Tukey_adj", "extension", True, False, "extension slot for a user-supplied kernel"),
        ("Z_patell_adj", "patell", True, True, "Kolari & Pynnonen (2010), cross-correlation adjusted Patell"),
        ("Z_BMP_adj", "bmp", True, True, "Kolari & Pynnonen (2010), adjusted BMP"),
        ("T_grank", "grank", True, False, "Kolari & Pynnonen (2011), t form of the generalized rank test"),
        ("Z_grank_adj", "grank", True, False, "Kolari & Pynnonen (2011), dependence-adjusted generalized rank"),
        ("CumRank", "corrado", True, False, "Corrado (1989), cumulative rank test"),
        ("CumRank_mod", "corrado", True, False, "Corrado & Zivney (1992), missing-value rescaled ranks"),
        ("CumRank_T", "corrado", True, False, "Corrado & Zivney (1992), t form"),
        ("CumRank_Z_adj", "corrado", True, False, "Hagnas & Pynnonen (2014), finite-window variance"),
        ("cross_T_test", "t", False, True, "Brown & Warner (1985), cross-sectional t"),
        ("crude_dep_T_test", "t", False, True, "Brown & Warner (1985), crude dependence adjustment"),
        ("T_skew", "t", False, True, "Hall (1992) skewness-adjusted t"),
        ("Z_patell", "patell", False, True, "Patell (1976)"),
        ("CumRank_Z", "corrado", False, False, "Corrado (1989), pooled rank sum"),
        ("Z_grank", "grank", False, False, "Kolari & Pynnonen (2011), generalized rank Z"),
        ("Z_BMP", "bmp", False, True, "Boehmer, Musumeci & Poulsen (1991)"),
    ]
    return StatRegistry(StatSpec(i, f, a, p, None, src) for i, f, a, p, src in rows)


DEFAULT_REGISTRY = _builtin_registry()
REPORT_ORDER = tuple(DEFAULT_REGISTRY.ids)


def register_statistic(stat_id: str, kernel: Callable, family: str = "extension", cd_adjusted: bool = False,
                       parametric: bool = False, source: str = "", registry: StatRegistry | None = None):
    """Add a user statistic, or fill an empty extension slot such as ``P1``.

    ``kernel(abn)`` returns ``value`` (standard-normal reference) or
    ``(value, df)`` (Student-t reference).
    """
    reg = DEFAULT_REGISTRY if registry is None else registry
    if stat_id in reg and not reg[stat_id].available:
        old = reg[stat_id]
        cd_adjusted, parametric = old.cd_adjusted, old.parametric
    reg.add(StatSpec(stat_id, family, cd_adjusted, parametric, kernel, source), replace_slot=True)
    return reg[stat_id]


# -- battery --------------------------------------------------------------------------------------

@dataclass
class BatteryReport:
    results: list
    label: str = ""
    notes: tuple = ()

    def __iter__(self):
        return iter(self.results)

    def __getitem__(self, stat_id) -> TestResult:
        for r in self.results:
            if r.stat_id == stat_id:
                return r
        raise KeyError(stat_id)

    def values(self) -> dict:
        return {r.stat_id: r.value for r in self.results if r.available}

    def to_frame(self) -> pd.DataFrame:
        cols = ["stat_id", "family", "cd_adjusted", "value", "p_left", "stars"]
        return pd.DataFrame([r.as_dict() for r in self.results], columns=cols + ["reference", "note"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, encoding="utf-8")

    def to_json(self, path=None) -> str:
        payload = {"label": self.label, "notes": list(self.notes), "results": [r.as_dict() for r in self.results]}
        text = json.dumps(payload, indent=2, default=_json_default)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text

    def format(self) -> str:
        lines = [f"{'stat_id':<20}{'CD':<7}{'value':>12}  {'p':>8}"]
        for r in self.results:
            cd = "Adj" if r.cd_adjusted else "Unadj"
            if not r.available:
                lines.append(f"{r.stat_id:<20}{cd:<7}{'unavailable':>12}")
                continue
            lines.append(f"{r.stat_id:<20}{cd:<7}{r.value:>12.3f}  {r.p_value:>8.4f} {r.stars}")
        return "\n".join(lines)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)


def run_battery(abn: AbnormalPanel, stats_ids: Sequence[str] | None = None, registry: StatRegistry | None = None,
                two_sided: bool = False, on_error: str = "raise", label: str = "") -> BatteryReport:
    """Evaluate the requested statistics (default: all registered).

    Results follow the registry order (adjusted statistics first).  With
    ``on_error="record"`` a failing family yields NaN values and a note
    instead of raising.
    """
    reg = DEFAULT_REGISTRY if registry is None else registry
    ids = reg.ids if stats_ids is None else list(stats_ids)
    reg.validate(ids)
    wanted = set(ids)
    cache: dict = {}
    out = []
    for spec in reg:
        if spec.stat_id not in wanted:
            continue
        if not spec.available:
            out.append(TestResult(spec.stat_id, np.nan, np.nan, spec.cd_adjusted, spec.family, "",
                                  None, False, "unavailable: extension slot not filled", two_sided))
            continue
        try:
            if spec.kernel is not None:
                res = spec.kernel(abn)
                value, df = res if isinstance(res, tuple) else (res, None)
            else:
                if spec.family not in cache:
                    cache[spec.family] = FAMILIES[spec.family](abn)
                value, df = cache[spec.family][spec.stat_id]
            value = float(value)
            out.append(TestResult(spec.stat_id, value, _p_left(value, df), spec.cd_adjusted, spec.family,
                                  _ref_name(df), df, True, "", two_sided))
        except (DataError, NumericalError, ParameterError) as exc:
            if on_error == "raise":
                raise
            out.append(TestResult(spec.stat_id, np.nan, np.nan, spec.cd_adjusted, spec.family, "",
                                  None, True, f"failed: {exc}", two_sided))
    return BatteryReport(out, label, abn.notes)


# -- plot data --------------------------------------------------------------------------------------

def plot_data(abn: AbnormalPanel, z: float = 1.96) -> pd.DataFrame:
    """Daily cross-station mean abnormal value with a normal band.

    Columns: date, mean_ac, lower, upper, event_window (0 before the event,
    1 from the event date on).
    """
    ac = abn.ac
    n_t = np.sum(np.isfinite(ac), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(ac, axis=0)
        sd = np.nanstd(ac, axis=0, ddof=1)
        se = np.where(n_t > 1, sd / np.sqrt(n_t), np.nan)
    dates = abn.dates if abn.dates is not None else np.arange(abn.split.tau)
    return pd.DataFrame({
        "date": [str(d) for d in dates],
        "mean_ac": mean,
        "lower": mean - z * se,
        "upper": mean + z * se,
        "event_window": abn.split.event_mask().astype(int),
    })
