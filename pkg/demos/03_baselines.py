"""Per-station temporal baselines: OLS, regression with AR(1) errors, AICc-selected regARMA."""
import numpy as np

from stevent.baselines import aicc_grid, fit_lm, fit_regarma, forecast_baseline, select_order_aicc

rng = np.random.default_rng(3)
n = 400
x = rng.normal(size=(n, 1))

# regression errors follow an ARMA(2,1)
z = rng.standard_normal(n + 100)
e = np.zeros(n + 100)
for t in range(2, n + 100):
    e[t] = 0.5 * e[t - 1] + 0.2 * e[t - 2] + z[t] + 0.4 * z[t - 1]
y = 10 + 3 * x[:, 0] + e[100:]
y[[50, 51, 300]] = np.nan  # the state-space likelihood skips gaps

lm = fit_lm(y, x)
ar1 = fit_regarma(y, x, (1, 0))
print("lm     coef", lm.coef.round(3), "AICc", round(lm.aicc, 1))
print("regAR1 coef", ar1.coef.round(3), "phi", ar1.ar.round(3), "AICc", round(ar1.aicc, 1))

# AICc over a small grid; the full grid goes up to (7, 7)
fits, table = aicc_grid(y, x, max_order=3)
print(table.pivot(index="p_ar", columns="q_ma", values="aicc").round(1))
order = select_order_aicc(y, x, max_order=3)
best = fits[tuple(order)]
print("selected", tuple(order), "AR", best.ar.round(3), "MA", best.ma.round(3))

# forecasts: the ARMA error part decays toward the regression surface
x_future = rng.normal(size=(10, 1))
fc = forecast_baseline(best, x_future)
surface = best.coef[0] + best.coef[1] * x_future[:, 0]
print("error forecast by horizon", (fc - surface).round(3))
