"""Abnormal values and the test battery on a simulated level drop of 1.5 units."""
import numpy as np

from stevent.eventstudy import compute_abnormal, plot_data, register_statistic, run_battery
from stevent.hdgm import HdgmParams, em_fit, normal_values
from stevent.baselines import fit_panel_baselines
from stevent.simgen import SimConfig, simulate_panel

params = HdgmParams([20.0, 2.0], g=0.7, nu=1.5, theta=40.0, sigma2_eps=0.5)
sim = simulate_panel(SimConfig(15, 300, 30, params, side_km=80.0, shift=-1.5, seed=7))
panel, split = sim.panel, sim.split

# normal values from the spatial model and from per-station OLS
fit = em_fit(panel, split)
abn_hdgm = compute_abnormal(panel, normal_values(panel, split, fit.params), split)
_, nc_lm, _ = fit_panel_baselines(panel, split, "lm")
abn_lm = compute_abnormal(panel, nc_lm, split)
print("residual cross-correlation: hdgm", round(abn_hdgm.r_bar, 3), " lm", round(abn_lm.r_bar, 3))

for label, abn in (("HDGM", abn_hdgm), ("lm", abn_lm)):
    print(f"\n== {label}")
    print(run_battery(abn, label=label).format())

# filling an extension slot with a user statistic (sign test on CAC)


def sign_z(abn):
    k = int(np.sum(abn.cac > 0))
    n = abn.cac.size
    return (k - n / 2) / np.sqrt(n / 4)


register_statistic("P1", sign_z, source="demo: cross-sectional sign test")
print("\nP1 now reports", round(run_battery(abn_hdgm, ["P1"])["P1"].value, 3))

# daily mean abnormal value with a band, ready for an external plotting tool
pdata = plot_data(abn_hdgm)
print(pdata.iloc[split.tau0 - 3: split.tau0 + 3].round(3).to_string(index=False))
