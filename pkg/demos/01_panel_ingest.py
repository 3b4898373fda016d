"""Build a station panel from long-format CSV files, add lags, split windows."""
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from stevent.panel import add_lagged_covariates, distance_matrix, ingest_csv, mean_pairwise_correlation, split_windows

rng = np.random.default_rng(0)
work = Path(tempfile.mkdtemp())

# three stations on a small planar grid (km)
pd.DataFrame({"id": ["A", "B", "C"], "x": [0.0, 3.0, 6.0], "y": [0.0, 4.0, 0.0]}).to_csv(work / "stations.csv", index=False)

# one year of daily values; a regional signal plus station noise, a few gaps
days = pd.date_range("2019-01-01", periods=365, freq="D")
temp = 10 + 8 * np.sin(2 * np.pi * np.arange(365) / 365)
rows, covs = [], []
for s in "ABC":
    y = 40 - 1.2 * temp + rng.normal(0, 5, 365)
    y[rng.choice(365, 10, replace=False)] = np.nan
    rows += [(s, d.date().isoformat(), v) for d, v in zip(days, y)]
    covs += [(s, d.date().isoformat(), "temp", t) for d, t in zip(days, temp)]
pd.DataFrame(rows, columns=["station_id", "timestamp", "value"]).to_csv(work / "obs.csv", index=False, na_rep="NA")
pd.DataFrame(covs, columns=["station_id", "timestamp", "name", "value"]).to_csv(work / "cov.csv", index=False)

panel = ingest_csv(work / "stations.csv", work / "obs.csv", work / "cov.csv")
print("stations", panel.station_ids, "time points", panel.n_times)
print("missing share per station", np.isnan(panel.observations).mean(axis=1).round(3))

# lagged regressors: the first 2 days become unusable for fitting
panel = add_lagged_covariates(panel, ["temp"], [1, 2])
print("covariates", panel.covariate_names, "first usable index", panel.first_usable)

# event on 1 November: estimation window before, event window from that day on
split = split_windows(panel, "2019-11-01")
print("tau0", split.tau0, "tau1", split.tau1)

print("distances (km)\n", distance_matrix(panel).round(2))
summary = mean_pairwise_correlation(panel.observations[:, split.omega0])
print("mean pairwise correlation", round(summary.mean, 3), "median", round(summary.median, 3))
