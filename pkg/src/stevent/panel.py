"""Geo-referenced panels of station time series.

A :class:`Panel` holds ``N`` stations observed on a common, equally spaced
timeline.  Observations may be missing (``NaN``); covariates must be complete
on every time index from ``first_usable`` onwards, which is where lagged
covariates become defined.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DataError,
    DuplicationError,
    IngestionError,
    TimelineError,
    WindowError,
)

EARTH_RADIUS_KM = 6371.0088
MIN_ESTIMATION_POINTS = 10

__all__ = [
    "Station",
    "Panel",
    "WindowSplit",
    "CorrelationSummary",
    "ingest_csv",
    "project_lonlat",
    "add_lagged_covariates",
    "split_windows",
    "distance_matrix",
    "mean_pairwise_correlation",
]


@dataclass(frozen=True)
class Station:
    id: str
    x: float
    y: float
    static_covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise DataError(f"station {self.id!r} has non-finite coordinates")


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """Rectangular station-by-time panel.

    Parameters
    ----------
    stations : sequence of Station
        Length ``N``; ids must be unique.
    timeline : array_like
        Length ``tau`` strictly increasing, equally spaced stamps
        (``datetime64`` or numeric).
    observations : array_like, shape (N, tau)
        Responses, ``NaN`` marks a missing cell.
    covariates : array_like, shape (N, tau, p)
    covariate_names : sequence of str, length p
    first_usable : int
        First time index where every covariate is defined.
    """

    stations: tuple
    timeline: np.ndarray
    observations: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    first_usable: int = 0

    def __post_init__(self):
        stations = tuple(self.stations)
        timeline = np.asarray(self.timeline).copy()
        timeline.setflags(write=False)
        obs = _frozen(self.observations)
        cov = _frozen(self.covariates)
        names = tuple(self.covariate_names)
        if cov.ndim == 2 and obs.ndim == 2 and cov.size == 0:
            cov = _frozen(np.zeros(obs.shape + (0,)))
        object.__setattr__(self, "stations", stations)
        object.__setattr__(self, "timeline", timeline)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "first_usable", int(self.first_usable))
        self._validate()

    def _validate(self):
        n, tau = len(self.stations), len(self.timeline)
        if n < 1:
            raise DataError("panel needs at least one station")
        if tau < 3:
            raise DataError(f"panel needs at least 3 time points, got {tau}")
        ids = [s.id for s in self.stations]
        if len(set(ids)) != n:
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicationError(f"duplicate station ids: {dup}")
        if self.observations.shape != (n, tau):
            raise DataError(f"observations shape {self.observations.shape} != {(n, tau)}")
        if self.covariates.ndim != 3 or self.covariates.shape[:2] != (n, tau):
            raise DataError(f"covariates shape {self.covariates.shape} incompatible with {(n, tau)}")
        if self.covariates.shape[2] != len(self.covariate_names):
            raise DataError("covariate_names length does not match covariates")
        if len(set(self.covariate_names)) != len(self.covariate_names):
            raise DuplicationError("duplicate covariate names")
        step = np.diff(self.timeline)
        if np.any(step <= step.dtype.type(0)) or np.any(step != step[0]):
            raise TimelineError("timeline must be strictly increasing with a constant step")
        if not 0 <= self.first_usable < tau:
            raise DataError(f"first_usable={self.first_usable} outside [0, {tau})")
        tail = self.covariates[:, self.first_usable:, :]
        if not np.all(np.isfinite(tail)):
            s, t, j = np.argwhere(~np.isfinite(tail))[0]
            raise DataError(
                f"covariate {self.covariate_names[j]!r} missing at station "
                f"{self.stations[s].id!r}, time index {t + self.first_usable}"
            )
        all_missing = np.all(np.isnan(self.observations), axis=1)
        if np.any(all_missing):
            bad = [self.stations[i].id for i in np.flatnonzero(all_missing)]
            raise DataError(f"stations with no observations: {bad}")

    @property
    def n_stations(self) -> int:
        return len(self.stations)

    @property
    def n_times(self) -> int:
        return len(self.timeline)

    @property
    def station_ids(self) -> list[str]:
        return [s.id for s in self.stations]

    @property
    def coords(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s in self.stations], dtype=float)

    def covariate(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise ConfigError(f"unknown covariate {name!r}") from None
        return self.covariates[:, :, j]

    def design(self, intercept: bool = True) -> np.ndarray:
        """Regressor array of shape (N, tau, p [+1]); intercept first."""
        if not intercept:
            return np.array(self.covariates)
        ones = np.ones(self.observations.shape + (1,))
        return np.concatenate([ones, self.covariates], axis=2)

    def design_names(self, intercept: bool = True) -> list[str]:
        return (["intercept"] if intercept else []) + list(self.covariate_names)

    def restrict(self, start: int, stop: int) -> "Panel":
        """Time slice ``[start, stop)`` as a new panel."""
        if not 0 <= start < stop <= self.n_times:
            raise ConfigError(f"invalid slice [{start}, {stop})")
        return Panel(
            self.stations,
            self.timeline[start:stop],
            self.observations[:, start:stop],
            self.covariates[:, start:stop, :],
            self.covariate_names,
            first_usable=max(0, self.first_usable - start),
        )

    def replace(self, **changes) -> "Panel":
        kw = dict(
            stations=self.stations,
            timeline=self.timeline,
            observations=self.observations,
            covariates=self.covariates,
            covariate_names=self.covariate_names,
            first_usable=self.first_usable,
        )
        kw.update(changes)
        return Panel(**kw)

    def with_static_covariates(self, names: Sequence[str] | None = None) -> "Panel":
        """Append station-level static covariates as time-constant columns."""
        if names is None:
            names = list(self.stations[0].static_covariates)
        cols = []
        for name in names:
            try:
                vals = [float(s.static_covariates[name]) for s in self.stations]
            except KeyError:
                raise ConfigError(f"static covariate {name!r} missing on some station") from None
            cols.append(np.broadcast_to(np.array(vals)[:, None], self.observations.shape))
        if not cols:
            return self
        extra = np.stack(cols, axis=2)
        return self.replace(
            covariates=np.concatenate([self.covariates, extra], axis=2),
            covariate_names=self.covariate_names + tuple(names),
        )


@dataclass(frozen=True)
class WindowSplit:
    """Estimation/event window split by time index.

    ``omega0`` covers indices ``t0+1 .. t1`` and ``omega1`` covers
    ``t1+1 .. t_end``; the event date is index ``t1 + 1``.
    """

    t0: int
    t1: int
    t_end: int
    min_tau0: int = field(default=MIN_ESTIMATION_POINTS, repr=False, compare=False)

    def __post_init__(self):
        if not self.t0 < self.t1 < self.t_end:
            raise WindowError(f"need t0 < t1 < t_end, got {self.t0}, {self.t1}, {self.t_end}")
        if self.tau0 < self.min_tau0:
            raise WindowError(f"estimation window has {self.tau0} points, need >= {self.min_tau0}")

    @property
    def tau0(self) -> int:
        return self.t1 - self.t0

    @property
    def tau1(self) -> int:
        return self.t_end - self.t1

    @property
    def tau(self) -> int:
        return self.tau0 + self.tau1

    @property
    def omega0(self) -> slice:
        return slice(self.t0 + 1, self.t1 + 1)

    @property
    def omega1(self) -> slice:
        return slice(self.t1 + 1, self.t_end + 1)

    @property
    def omega(self) -> slice:
        return slice(self.t0 + 1, self.t_end + 1)

    def event_mask(self) -> np.ndarray:
        """Boolean mask over ``omega`` flagging event-window positions."""
        m = np.zeros(self.tau, dtype=bool)
        m[self.tau0:] = True
        return m


@dataclass(frozen=True)
class CorrelationSummary:
    mean: float
    min: float
    q25: float
    median: float
    q75: float
    max: float
    n_pairs: int
    n_excluded: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def project_lonlat(lon, lat):
    """Equirectangular projection (km) about the centroid of the points."""
    lon = np.asarray(lon, dtype=float)
    lat = np.asarray(lat, dtype=float)
    lon0, lat0 = np.mean(lon), np.mean(lat)
    k = np.pi / 180.0 * EARTH_RADIUS_KM
    x = (lon - lon0) * k * np.cos(np.deg2rad(lat0))
    y = (lat - lat0) * k
    return x, y


def _read_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"file not found: {path}")
    df = pd.read_csv(path, na_values=["NA", ""], keep_default_na=False, encoding="utf-8", float_precision="round_trip",
                     dtype={"id": str, "station_id": str, "name": str})
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise IngestionError(f"{path.name}: missing columns {missing}")
    return df


def _regular_timeline(stamps) -> np.ndarray:
    t = np.unique(np.asarray(stamps, dtype="datetime64[D]"))
    if len(t) >= 2:
        step = np.diff(t)
        if np.any(step != step[0]):
            gaps = t[1:][step != step.min()]
            raise TimelineError(f"timeline has non-constant step; first irregular stamp {gaps[0]}")
    return t


def ingest_csv(stations_file, observations_file, covariates_file=None, include_static: bool = True) -> Panel:
    """Read a panel from three UTF-8 CSV files.

    ``stations_file`` has ``id,x,y`` (planar km) or ``id,lon,lat`` plus any
    static covariates; ``observations_file`` is long format
    ``station_id,timestamp,value`` and ``covariates_file`` long format
    ``station_id,timestamp,name,value``.
    """
    st = _read_csv(stations_file, ["id"])
    if {"x", "y"} <= set(st.columns):
        xs, ys = st["x"].to_numpy(float), st["y"].to_numpy(float)
        coord_cols = {"x", "y"}
    elif {"lon", "lat"} <= set(st.columns):
        xs, ys = project_lonlat(st["lon"], st["lat"])
        coord_cols = {"lon", "lat"}
    else:
        raise IngestionError("stations file needs x,y or lon,lat columns")
    if st["id"].duplicated().any():
        raise DuplicationError(f"duplicate station ids: {sorted(st['id'][st['id'].duplicated()].unique())}")
    static_cols = [c for c in st.columns if c not in coord_cols | {"id"}]
    stations = tuple(
        Station(str(r["id"]), float(x), float(y), {c: float(r[c]) for c in static_cols})
        for (_, r), x, y in zip(st.iterrows(), xs, ys)
    )
    index = {s.id: i for i, s in enumerate(stations)}

    obs = _read_csv(observations_file, ["station_id", "timestamp", "value"])
    frames = [obs]
    cov = None
    if covariates_file is not None:
        cov = _read_csv(covariates_file, ["station_id", "timestamp", "name", "value"])
        frames.append(cov)
    for df, label in zip(frames, ["observations", "covariates"]):
        unknown = sorted(set(df["station_id"]) - set(index))
        if unknown:
            raise IngestionError(f"{label} reference unknown station id(s): {', '.join(unknown)}")
        df["timestamp"] = pd.to_datetime(df["timestamp"]).values.astype("datetime64[D]")

    if obs.duplicated(["station_id", "timestamp"]).any():
        d = obs[obs.duplicated(["station_id", "timestamp"], keep=False)].iloc[0]
        raise DuplicationError(f"duplicate observation for station {d['station_id']!r} at {d['timestamp']}")
    stamps = obs["timestamp"].to_numpy()
    if cov is not None:
        stamps = np.concatenate([stamps, cov["timestamp"].to_numpy()])
    timeline = _regular_timeline(stamps)
    tpos = {t: i for i, t in enumerate(timeline)}

    n, tau = len(stations), len(timeline)
    y = np.full((n, tau), np.nan)
    y[obs["station_id"].map(index).to_numpy(), [tpos[t] for t in obs["timestamp"].to_numpy()]] = obs["value"].to_numpy(float)

    names: list[str] = []
    X = np.zeros((n, tau, 0))
    if cov is not None:
        if cov.duplicated(["station_id", "timestamp", "name"]).any():
            raise DuplicationError("duplicate (station_id, timestamp, name) rows in covariates")
        names = list(dict.fromkeys(cov["name"]))
        X = np.full((n, tau, len(names)), np.nan)
        jpos = {nm: j for j, nm in enumerate(names)}
        X[
            cov["station_id"].map(index).to_numpy(),
            [tpos[t] for t in cov["timestamp"].to_numpy()],
            cov["name"].map(jpos).to_numpy(),
        ] = cov["value"].to_numpy(float)
    panel = Panel(stations, timeline, y, X, tuple(names))
    if include_static and static_cols:
        panel = panel.with_static_covariates(static_cols)
    return panel


def write_panel_csv(panel: Panel, directory, prefix: str = "") -> dict:
    """Write ``panel`` in the three-file layout read by :func:`ingest_csv`.

    Returns the paths as ``{"stations", "observations", "covariates"}``.
    Missing observations are written as ``NA``.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / f"{prefix}{k}.csv" for k in ("stations", "observations", "covariates")}
    st = pd.DataFrame({"id": panel.station_ids, "x": panel.coords[:, 0], "y": panel.coords[:, 1]})
    st.to_csv(paths["stations"], index=False)
    stamps = [str(t) for t in panel.timeline]
    n, tau = panel.observations.shape
    obs = pd.DataFrame({
        "station_id": np.repeat(panel.station_ids, tau),
        "timestamp": np.tile(stamps, n),
        "value": panel.observations.reshape(-1),
    })
    obs.to_csv(paths["observations"], index=False, na_rep="NA")
    if panel.covariate_names:
        p = len(panel.covariate_names)
        cov = pd.DataFrame({
            "station_id": np.repeat(panel.station_ids, tau * p),
            "timestamp": np.tile(np.repeat(stamps, p), n),
            "name": np.tile(panel.covariate_names, n * tau),
            "value": panel.covariates.reshape(-1),
        })
        cov.to_csv(paths["covariates"], index=False, na_rep="NA")
    else:
        paths["covariates"] = None
    return {k: (str(v) if v is not None else None) for k, v in paths.items()}


def add_lagged_covariates(panel: Panel, base_names: Sequence[str], lags: Sequence[int]) -> Panel:
    """Append ``<base>_lag<k>`` columns; earlier indices become unusable."""
    lags = [int(k) for k in lags]
    if not lags:
        return panel
    if min(lags) < 1:
        raise ConfigError("lags must be positive integers")
    if max(lags) >= panel.n_times - panel.first_usable:
        raise ConfigError(f"lag {max(lags)} too long for a timeline of {panel.n_times} points")
    cols, names = [], []
    for base in base_names:
        src = panel.covariate(base)
        for k in lags:
            lagged = np.full_like(src, np.nan)
            lagged[:, k:] = src[:, :-k]
            cols.append(lagged)
            names.append(f"{base}_lag{k}")
    clash = set(names) & set(panel.covariate_names)
    if clash:
        raise ConfigError(f"covariates already exist: {sorted(clash)}")
    return panel.replace(
        covariates=np.concatenate([panel.covariates, np.stack(cols, axis=2)], axis=2),
        covariate_names=panel.covariate_names + tuple(names),
        first_usable=panel.first_usable + max(lags),
    )


def _time_index(panel: Panel, stamp) -> int:
    tl = panel.timeline
    if np.issubdtype(tl.dtype, np.datetime64):
        stamp = np.datetime64(stamp, "D")
    i = int(np.searchsorted(tl, stamp, side="left"))
    return i


def split_windows(panel: Panel, event_date, end_date=None) -> WindowSplit:
    """Split the usable timeline at ``event_date`` (first event-window stamp).

    ``end_date`` (inclusive) truncates the event window; defaults to the last
    stamp of the panel.
    """
    i_event = _time_index(panel, event_date)
    if i_event <= panel.first_usable or i_event >= panel.n_times:
        raise WindowError(f"event date {event_date} is not strictly inside the usable timeline")
    if end_date is None:
        t_end = panel.n_times - 1
    else:
        t_end = int(np.searchsorted(panel.timeline, np.datetime64(end_date, "D")
                                    if np.issubdtype(panel.timeline.dtype, np.datetime64) else end_date,
                                    side="right")) - 1
        if t_end < i_event:
            raise WindowError(f"end date {end_date} precedes event date {event_date}")
    t0 = panel.first_usable - 1
    t1 = i_event - 1
    if t1 - t0 < MIN_ESTIMATION_POINTS:
        raise WindowError(f"only {t1 - t0} estimation points before {event_date}; need >= {MIN_ESTIMATION_POINTS}")
    return WindowSplit(t0, t1, t_end)


def distance_matrix(panel_or_coords) -> np.ndarray:
    """Pairwise Euclidean distances (km) between station coordinates."""
    xy = panel_or_coords.coords if isinstance(panel_or_coords, Panel) else np.asarray(panel_or_coords, float)
    diff = xy[:, None, :] - xy[None, :, :]
    d = np.sqrt(np.sum(diff**2, axis=-1))
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_correlations(matrix, min_overlap: int = 3):
    """Pairwise-complete Pearson correlations of the rows of ``matrix``.

    Returns the upper-triangle coefficients (NaN for excluded pairs).
    """
    a = np.asarray(matrix, dtype=float)
    n = a.shape[0]
    iu = np.triu_indices(n, k=1)
    if np.all(np.isfinite(a)):
        c = a - a.mean(axis=1, keepdims=True)
        ss = np.sqrt(np.sum(c * c, axis=1))
        with np.errstate(invalid="ignore", divide="ignore"):
            r = (c @ c.T) / np.outer(ss, ss)
        ok = (ss > 0)[:, None] & (ss > 0)[None, :]
        r = np.where(ok, r, np.nan)
        if a.shape[1] < min_overlap:
            r[:] = np.nan
        return np.clip(r[iu], -1.0, 1.0)
    r = pd.DataFrame(a.T).corr(min_periods=min_overlap).to_numpy()
    return np.clip(r[iu], -1.0, 1.0)


def mean_pairwise_correlation(matrix, min_overlap: int = 3) -> CorrelationSummary:
    """Average pairwise Pearson correlation across rows, with a summary.

    Pairs overlapping on fewer than ``min_overlap`` points or with zero
    variance on the overlap are dropped with a warning.
    """
    a = np.asarray(matrix, dtype=float)
    if a.ndim != 2 or a.shape[0] < 2:
        raise DataError("need a 2-D matrix with at least two rows")
    r = pairwise_correlations(a, min_overlap)
    ok = np.isfinite(r)
    excluded = int(np.sum(~ok))
    if not ok.any():
        raise DataError("all station pairs were excluded from the correlation summary")
    if excluded:
        warnings.warn(f"{excluded} station pair(s) excluded from the correlation average", RuntimeWarning, stacklevel=2)
    v = r[ok]
    q25, med, q75 = np.quantile(v, [0.25, 0.5, 0.75])
    return CorrelationSummary(float(v.mean()), float(v.min()), float(q25), float(med), float(q75),
                              float(v.max()), int(v.size), excluded)
