"""Descriptive diagnostics of estimation-window abnormal values."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, NumericalError
from .eventstudy import AbnormalPanel

DEFAULT_LAGS = (1, 3, 7, 14, 21)
MAD_SCALE = 1.4826

__all__ = ["DiagnosticsRow", "acf_at", "hampel_outlier_pct", "diagnostics_table", "station_diagnostics"]


@dataclass(frozen=True)
class DiagnosticsRow:
    rho_bar: float
    mu: float
    sigma: float
    skewness: float
    kurtosis: float
    phi_1: float
    phi_3: float
    phi_7: float
    phi_14: float
    phi_21: float
    outlier_pct: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def acf_at(series, lags: Sequence[int] = DEFAULT_LAGS) -> np.ndarray:
    """Sample autocorrelations at the given lags.

    Missing points contribute zero to the lagged cross-products after
    centring, and the denominator is the full sum of squared deviations, so
    every value lies in [-1, 1].
    """
    x = np.asarray(series, dtype=float)
    lags = [int(l) for l in lags]
    if any(l < 1 for l in lags):
        raise DataError("lags must be positive")
    if x.size <= max(lags) + 2:
        raise DataError(f"series of length {x.size} is too short for lag {max(lags)}")
    o = np.isfinite(x)
    dev = np.where(o, x - np.mean(x[o]) if o.any() else 0.0, 0.0)
    ss = float(dev @ dev)
    if not ss > 0:
        raise NumericalError("zero variance series has no autocorrelation")
    return np.array([float(dev[l:] @ dev[:-l]) / ss for l in lags])


def hampel_outlier_pct(series, half_window: int = 10, threshold: float = 3.0) -> float:
    """Percentage of points flagged by a centred Hampel filter.

    Only points with a full window of ``2*half_window + 1`` values are
    assessed.  The inequality is strict, so a window with zero MAD flags
    only points that differ from its median (nothing, for a constant
    window).  Missing values are skipped before windowing.
    """
    x = np.asarray(series, dtype=float)
    x = x[np.isfinite(x)]
    w = 2 * half_window + 1
    if x.size <= w:
        raise DataError(f"series of length {x.size} is too short for window {w}")
    win = sliding_window_view(x, w)
    med = np.median(win, axis=1)
    mad = MAD_SCALE * np.median(np.abs(win - med[:, None]), axis=1)
    centre = x[half_window: x.size - half_window]
    flagged = np.abs(centre - med) > threshold * mad
    return 100.0 * float(flagged.sum()) / x.size


def station_diagnostics(values, lags=DEFAULT_LAGS, half_window: int = 10, threshold: float = 3.0) -> dict:
    """Per-station moments, autocorrelations and outlier share."""
    x = np.asarray(values, dtype=float)
    v = x[np.isfinite(x)]
    if v.size < 3:
        raise DataError("need at least three values")
    sd = float(np.std(v, ddof=1))
    if not sd > 0:
        raise NumericalError("zero variance series")
    phi = acf_at(x, lags)
    out = {
        "mu": float(v.mean()),
        "sigma": sd,
        "skewness": float(stats.skew(v)),
        "kurtosis": float(stats.kurtosis(v, fisher=False)),
    }
    out.update({f"phi_{l}": float(p) for l, p in zip(lags, phi)})
    out["outlier_pct"] = hampel_outlier_pct(x, half_window, threshold)
    return out


def _panel_row(abn: AbnormalPanel, lags, half_window, threshold) -> dict:
    per = [station_diagnostics(row, lags, half_window, threshold) for row in abn.estimation]
    df = pd.DataFrame(per)
    row = {"rho_bar": abn.r_bar}
    row.update(df.mean().to_dict())
    return row


def diagnostics_table(acs: Mapping[str, AbnormalPanel], lags=DEFAULT_LAGS, half_window: int = 10,
                      threshold: float = 3.0) -> pd.DataFrame:
    """Cross-station averages of estimation-window diagnostics.

    Returns a frame with statistics as rows and models as columns.
    """
    if not acs:
        raise DataError("no models supplied")
    cols = {}
    for name, abn in acs.items():
        cols[name] = _panel_row(abn, lags, half_window, threshold)
    table = pd.DataFrame(cols)
    order = ["rho_bar", "mu", "sigma", "skewness", "kurtosis"] + [f"phi_{l}" for l in lags] + ["outlier_pct"]
    table = table.loc[order]
    table.index.name = "statistic"
    return table


def to_rows(table: pd.DataFrame) -> dict:
    """Column-wise :class:`DiagnosticsRow` objects (default lags only)."""
    return {c: DiagnosticsRow(**table[c].to_dict()) for c in table.columns}
