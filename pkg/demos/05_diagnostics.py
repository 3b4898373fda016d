"""Estimation-window diagnostics of abnormal values across models."""
import warnings

from stevent.baselines import fit_panel_baselines
from stevent.diagnostics import acf_at, diagnostics_table, hampel_outlier_pct
from stevent.eventstudy import compute_abnormal
from stevent.hdgm import HdgmParams, em_fit, normal_values
from stevent.simgen import SimConfig, simulate_panel

sim = simulate_panel(SimConfig(12, 250, 20, HdgmParams([30.0, 4.0], 0.8, 2.0, 50.0, 0.6), side_km=60.0, seed=11))
panel, split = sim.panel, sim.split

abns = {}
fit = em_fit(panel, split)
abns["hdgm"] = compute_abnormal(panel, normal_values(panel, split, fit.params), split)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    for kind in ("lm", "regar1", "regarma"):
        _, nc, _ = fit_panel_baselines(panel, split, kind, max_order=2)
        abns[kind] = compute_abnormal(panel, nc, split)

# rows are statistics, columns are models; each cell is a cross-station average
print(diagnostics_table(abns).round(3).to_string())

# the building blocks work on single series too
x = abns["lm"].estimation[0]
print("\nstation 1, lm: acf", acf_at(x).round(3), "outliers %", round(hampel_outlier_pct(x), 2))
