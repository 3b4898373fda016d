"""Per-station temporal baselines: lm, regression with AR(1) errors, regARMA.

Regression with ARMA(p, q) disturbances is fitted by exact maximum
likelihood.  For fixed ARMA coefficients the likelihood is evaluated with a
Kalman filter on the Harvey state-space form, run jointly over the response
and every regressor column; the regression coefficients and the innovation
variance are then concentrated out by GLS on the filtered innovations.
Missing responses are skipped by the filter.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
import pandas as pd
from scipy import optimize

from .errors import ConfigError, DataError, NumericalError, RankDeficiencyError
from .panel import Panel, WindowSplit

MAX_ORDER = 7
LOG2PI = math.log(2.0 * math.pi)
ROOT_MARGIN = 0.01
COMMON_FACTOR_TOL = 0.1
FTOL = 1e-8
STEADY_TOL = 1e-12

__all__ = [
    "ArmaOrder",
    "BaselineFit",
    "fit_lm",
    "fit_regarma",
    "select_order_aicc",
    "forecast_baseline",
    "fit_panel_baselines",
    "write_fit_summaries",
]


@dataclass(frozen=True, order=True)
class ArmaOrder:
    p_ar: int
    q_ma: int

    def __post_init__(self):
        for v in (self.p_ar, self.q_ma):
            if not (isinstance(v, (int, np.integer)) and 0 <= v <= MAX_ORDER):
                raise ConfigError(f"ARMA orders must be integers in [0, {MAX_ORDER}], got ({self.p_ar}, {self.q_ma})")

    def __iter__(self):
        return iter((self.p_ar, self.q_ma))


@dataclass(frozen=True, eq=False)
class BaselineFit:
    station_id: str | None
    model_kind: str
    order: ArmaOrder
    coef: np.ndarray
    coef_names: tuple
    ar: np.ndarray
    ma: np.ndarray
    sigma2: float
    loglik: float
    aicc: float
    residual_variance: float
    n_obs: int
    converged: bool = True
    message: str = ""
    state_mean: np.ndarray = field(default=None, repr=False)
    state_cov: np.ndarray = field(default=None, repr=False)
    fitted: np.ndarray = field(default=None, repr=False)
    raw: np.ndarray = field(default=None, repr=False)

    @property
    def n_params(self) -> int:
        return len(self.coef) + self.order.p_ar + self.order.q_ma + 1

    def summary(self) -> dict:
        return {
            "station_id": self.station_id,
            "model_kind": self.model_kind,
            "p_ar": self.order.p_ar,
            "q_ma": self.order.q_ma,
            "aicc": self.aicc,
            "residual_variance": self.residual_variance,
        }


# -- design helpers -------------------------------------------------------------

def _design(X, n, intercept):
    if X is None:
        X = np.zeros((n, 0))
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] != n:
        raise DataError(f"covariates have {X.shape[0]} rows, series has {n}")
    if intercept:
        X = np.column_stack([np.ones(n), X])
    if X.shape[1] == 0:
        raise DataError("empty design matrix")
    return X


def _names(names, k, intercept):
    if names is None:
        names = [f"x{j + 1}" for j in range(k - int(intercept))]
    names = list(names)
    return tuple((["intercept"] if intercept else []) + names)


def _check_rank(X, names):
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    bad = []
    r_prev = 0
    for j in range(X.shape[1]):
        r = np.linalg.matrix_rank(X[:, : j + 1])
        if r == r_prev:
            bad.append(names[j])
        r_prev = r
    raise RankDeficiencyError(bad)


def _aicc(loglik, k, n):
    if n - k - 1 <= 0:
        return np.inf
    return -2.0 * loglik + 2.0 * k + 2.0 * k * (k + 1) / (n - k - 1)


# -- ARMA state space -------------------------------------------------------------

def _transition(phi, theta):
    m = max(len(phi), len(theta) + 1, 1)
    T = np.zeros((m, m))
    T[: len(phi), 0] = phi
    T[: m - 1, 1:] += np.eye(m - 1)
    R = np.zeros(m)
    R[0] = 1.0
    R[1 : len(theta) + 1] = theta
    return T, R


def _stationary_cov(T, R):
    RR = np.outer(R, R)
    m = T.shape[0]
    if m == 1:
        return RR / (1.0 - T[0, 0] ** 2)
    P = np.linalg.solve(np.eye(m * m) - np.kron(T, T), RR.reshape(-1)).reshape(m, m)
    return 0.5 * (P + P.T)


@numba.njit(cache=True)
def _arma_filter(Y, T, RR, P0):  # pragma: no cover - compiled
    n, c = Y.shape
    m = T.shape[0]
    a = np.zeros((m, c))
    P = P0.copy()
    V = np.full((n, c), np.nan)
    F = np.full(n, np.nan)
    pred = np.zeros((n, c))
    a_f = np.zeros((m, c))
    P_f = P0.copy()
    for t in range(n):
        for j in range(c):
            pred[t, j] = a[0, j]
        if not np.isnan(Y[t, 0]):
            f = P[0, 0]
            F[t] = f
            K = P[:, 0] / f
            for j in range(c):
                v = Y[t, j] - a[0, j]
                V[t, j] = v
                for i in range(m):
                    a[i, j] += K[i] * v
            P = P - np.outer(K, P[0, :])
        if t == n - 1:
            a_f[:, :] = a
            P_f[:, :] = P
        a = T @ a
        P = T @ P @ T.T + RR
        P = 0.5 * (P + P.T)
    return V, F, pred, a_f, P_f


@numba.njit(cache=True)
def _fast_loglik(Y, phi_m, R, P0, steady_tol):  # pragma: no cover - compiled
    """Weighted innovation cross-products for the concentrated likelihood.

    Uses the companion structure of T (``phi_m`` is the AR vector padded to
    the state dimension).  Covariance recursions stop once the predicted
    covariance settles and resume after a missing observation.  Returns
    ``(A, sum log F, n_obs)`` with ``A = sum v v' / F`` over [y, X] columns.
    """
    n, c = Y.shape
    m = phi_m.shape[0]
    a = np.zeros((m, c))
    P = P0.copy()
    TP = np.empty((m, m))
    Pold = np.empty((m, m))
    K = np.empty(m)
    p0 = np.empty(m)
    A = np.zeros((c, c))
    sum_logf = 0.0
    n_obs = 0
    steady = False
    f = 1.0
    v = np.empty(c)
    for t in range(n):
        obs = not np.isnan(Y[t, 0])
        if obs:
            if not steady:
                f = P[0, 0]
                for i in range(m):
                    K[i] = P[i, 0] / f
            sum_logf += np.log(f)
            n_obs += 1
            for j in range(c):
                v[j] = Y[t, j] - a[0, j]
            w = 1.0 / f
            for j in range(c):
                for l in range(j, c):
                    A[j, l] += v[j] * v[l] * w
            for i in range(m):
                for j in range(c):
                    a[i, j] += K[i] * v[j]
        else:
            steady = False
        # a <- T a
        for j in range(c):
            a0 = a[0, j]
            for i in range(m - 1):
                a[i, j] = phi_m[i] * a0 + a[i + 1, j]
            a[m - 1, j] = phi_m[m - 1] * a0
        if steady:
            continue
        for i in range(m):
            for j in range(m):
                Pold[i, j] = P[i, j]
        if obs:
            for j in range(m):
                p0[j] = P[0, j]
            for i in range(m):
                for j in range(m):
                    P[i, j] -= K[i] * p0[j]
        for i in range(m):
            for j in range(m):
                nxt = P[i + 1, j] if i + 1 < m else 0.0
                TP[i, j] = phi_m[i] * P[0, j] + nxt
        diff = 0.0
        for i in range(m):
            for j in range(i, m):
                nxt = TP[i, j + 1] if j + 1 < m else 0.0
                val = TP[i, 0] * phi_m[j] + nxt + R[i] * R[j]
                P[i, j] = val
                P[j, i] = val
                d = abs(val - Pold[i, j])
                if d > diff:
                    diff = d
        if obs and diff < steady_tol:
            steady = True
            f = P[0, 0]
            for i in range(m):
                K[i] = P[i, 0] / f
    for j in range(c):
        for l in range(j):
            A[j, l] = A[l, j]
    return A, sum_logf, n_obs


@numba.njit(cache=True)
def _pacf_to_coef(x):  # pragma: no cover - compiled
    p = x.shape[0]
    phi = np.zeros(p)
    tmp = np.zeros(p)
    for k in range(p):
        r = np.tanh(x[k])
        for i in range(k):
            tmp[i] = phi[i]
        for i in range(k):
            phi[i] = tmp[i] - r * tmp[k - 1 - i]
        phi[k] = r
    return phi


@numba.njit(cache=True)
def _stationary_cov_nb(phi_m, R):  # pragma: no cover - compiled
    m = phi_m.shape[0]
    if m == 1:
        out = np.empty((1, 1))
        out[0, 0] = R[0] * R[0] / (1.0 - phi_m[0] ** 2)
        return out
    T = np.zeros((m, m))
    for i in range(m):
        T[i, 0] = phi_m[i]
        if i + 1 < m:
            T[i, i + 1] = 1.0
    lhs = np.eye(m * m) - np.kron(T, T)
    rhs = np.outer(R, R).reshape(m * m)
    P = np.linalg.solve(lhs, rhs).reshape((m, m))
    return 0.5 * (P + P.T)


@numba.njit(cache=True)
def _conc_loglik(x, p, q, Y, steady_tol):  # pragma: no cover - compiled
    """Concentrated log-likelihood at unconstrained ARMA parameters ``x``."""
    phi = _pacf_to_coef(x[:p])
    theta = -_pacf_to_coef(x[p:])
    m = max(p, q + 1)
    phi_m = np.zeros(m)
    phi_m[:p] = phi
    R = np.zeros(m)
    R[0] = 1.0
    R[1 : q + 1] = theta
    P0 = _stationary_cov_nb(phi_m, R)
    A, slf, n = _fast_loglik(Y, phi_m, R, P0, steady_tol)
    beta = np.linalg.solve(A[1:, 1:].copy(), A[1:, 0].copy())
    s2 = (A[0, 0] - np.dot(A[0, 1:], beta)) / n
    if not s2 > 0:
        return -np.inf
    return -0.5 * n * (LOG2PI + np.log(s2) + 1.0) - 0.5 * slf


def _constrain(x):
    """Unconstrained reals -> coefficients of a stationary AR polynomial."""
    r = np.tanh(x)
    p = len(r)
    phi = np.zeros(p)
    for k in range(p):
        prev = phi[:k].copy()
        phi[k] = r[k]
        phi[:k] = prev - r[k] * prev[::-1]
    return phi


def _unconstrain(phi):
    phi = np.array(phi, float)
    p = len(phi)
    r = np.zeros(p)
    for k in range(p - 1, -1, -1):
        rk = phi[k]
        r[k] = rk
        if k:
            prev = (phi[:k] + rk * phi[:k][::-1]) / (1.0 - rk * rk)
            phi = prev
    return np.arctanh(np.clip(r, -0.999999, 0.999999))


def _min_root_modulus(coeffs, sign):
    """Smallest root modulus of 1 + sign*c1 z + sign*c2 z^2 + ..."""
    if len(coeffs) == 0 or not np.any(coeffs):
        return np.inf
    poly = np.r_[1.0, sign * np.asarray(coeffs)]
    roots = np.roots(poly[::-1])
    return float(np.min(np.abs(roots))) if roots.size else np.inf


def _common_factor_gap(phi, theta):
    """Smallest distance between an AR root and an MA root."""
    if len(phi) == 0 or len(theta) == 0 or not np.any(phi) or not np.any(theta):
        return np.inf
    ra = np.roots(np.r_[1.0, -np.asarray(phi)][::-1])
    rm = np.roots(np.r_[1.0, np.asarray(theta)][::-1])
    if ra.size == 0 or rm.size == 0:
        return np.inf
    return float(np.min(np.abs(ra[:, None] - rm[None, :])))


class _Concentrated:
    """Concentrated ARMA log-likelihood for a fixed regression design."""

    def __init__(self, y, X):
        self.Y = np.ascontiguousarray(np.column_stack([y, X]))
        self.n = int(np.sum(np.isfinite(y)))
        self.k = X.shape[1]

    def evaluate(self, phi, theta, full=False):
        T, R = _transition(phi, theta)
        P0 = _stationary_cov(T, R)
        if not full:
            A, slf, n = _fast_loglik(self.Y, np.ascontiguousarray(T[:, 0]), R, P0, STEADY_TOL)
            beta = np.linalg.solve(A[1:, 1:], A[1:, 0])
            s2 = (A[0, 0] - A[0, 1:] @ beta) / n
            if not s2 > 0:
                return -np.inf
            return -0.5 * n * (LOG2PI + math.log(s2) + 1.0) - 0.5 * slf
        V, F, pred, a_f, P_f = _arma_filter(self.Y, T, np.outer(R, R), P0)
        o = np.isfinite(F)
        w = 1.0 / np.sqrt(F[o])
        Vy = V[o, 0] * w
        VX = V[o, 1:] * w[:, None]
        beta, *_ = np.linalg.lstsq(VX, Vy, rcond=None)
        e = Vy - VX @ beta
        n = self.n
        s2 = float(e @ e) / n
        if not s2 > 0:
            s2 = 1e-300
        ll = -0.5 * n * (LOG2PI + math.log(s2) + 1.0) - 0.5 * float(np.sum(np.log(F[o])))
        if not full:
            return ll
        coefs = np.r_[1.0, -beta]
        state = a_f @ coefs
        fitted_u = pred @ coefs
        return ll, beta, s2, state, P_f * s2, fitted_u


# -- public API --------------------------------------------------------------------

def fit_lm(series, covariates=None, station_id=None, names=None, intercept: bool = True) -> BaselineFit:
    """Ordinary least squares on the non-missing rows.

    Residual variance uses denominator ``n - k``; the log-likelihood and AICc
    use the ML variance.
    """
    y = np.asarray(series, dtype=float)
    X = _design(covariates, len(y), intercept)
    cnames = _names(names, X.shape[1], intercept)
    o = np.isfinite(y)
    Xo, yo = X[o], y[o]
    n, k = Xo.shape
    if n <= k:
        raise DataError(f"{n} observations for {k} regressors")
    _check_rank(Xo, cnames)
    beta, *_ = np.linalg.lstsq(Xo, yo, rcond=None)
    resid = yo - Xo @ beta
    rss = float(resid @ resid)
    s2_ml = rss / n
    ll = -0.5 * n * (LOG2PI + math.log(max(s2_ml, 1e-300)) + 1.0)
    return BaselineFit(
        station_id, "lm", ArmaOrder(0, 0), beta, cnames, np.zeros(0), np.zeros(0), s2_ml, ll,
        _aicc(ll, k + 1, n), rss / (n - k), n, True, "",
        np.zeros(1), np.zeros((1, 1)), X @ beta,
    )


def fit_regarma(series, covariates=None, order=(1, 0), station_id=None, names=None,
                intercept: bool = True, model_kind: str | None = None, start=None) -> BaselineFit:
    """Exact ML regression with ARMA(p, q) errors.

    The returned fit is flagged ``converged=False`` when the optimiser fails
    or the optimum sits on the stationarity/invertibility boundary.
    """
    order = order if isinstance(order, ArmaOrder) else ArmaOrder(*order)
    p, q = order
    y = np.asarray(series, dtype=float)
    X = _design(covariates, len(y), intercept)
    cnames = _names(names, X.shape[1], intercept)
    o = np.isfinite(y)
    n, k = int(o.sum()), X.shape[1]
    if n <= k + p + q + 1:
        raise DataError(f"{n} observations are too few for ARMA{(p, q)} with {k} regressors")
    _check_rank(X[o], cnames)
    kind = model_kind or ("regAR1" if (p, q) == (1, 0) else "regARMA")
    conc = _Concentrated(y, X)

    def unpack(x):
        return _constrain(x[:p]), -_constrain(x[p:])

    converged, message = True, ""
    if p + q == 0:
        xopt = np.zeros(0)
    else:
        x0 = np.zeros(p + q) if start is None else np.asarray(start, float)

        Y = conc.Y

        def nll(x):
            try:
                v = -_conc_loglik(np.asarray(x, dtype=float), p, q, Y, STEADY_TOL)
            except Exception:  # noqa: BLE001 - singular Lyapunov system or GLS step
                return 1e300
            return v if np.isfinite(v) else 1e300

        res = optimize.minimize(nll, x0, method="L-BFGS-B", options={"maxiter": 500, "ftol": FTOL})
        xopt = res.x if res.fun <= nll(x0) else x0
        if not (res.success or "ABNORMAL" in str(res.message)):
            converged, message = False, f"optimizer: {res.message}"
    phi, theta = unpack(xopt)
    ll, beta, s2, state, state_cov, fitted_u = conc.evaluate(phi, theta, full=True)
    if converged and (_min_root_modulus(phi, -1.0) < 1 + ROOT_MARGIN or _min_root_modulus(theta, 1.0) < 1 + ROOT_MARGIN):
        converged, message = False, "optimum on the stationarity/invertibility boundary"
    elif converged and _common_factor_gap(phi, theta) < COMMON_FACTOR_TOL:
        converged, message = False, "near-common AR/MA factor (redundant parameterization)"
    n_par = k + p + q + 1
    return BaselineFit(
        station_id, kind, order, beta, cnames, phi, theta, s2, ll, _aicc(ll, n_par, n), s2, n,
        converged, message, state, state_cov, X @ beta + fitted_u, xopt,
    )


def _grid(max_order):
    cells = [(p, q) for p in range(max_order + 1) for q in range(max_order + 1)]
    return sorted(cells, key=lambda c: (c[0] + c[1], c[0]))


def _warm_start(fits, p, q):
    """Start from the better nested neighbour, padded with a zero partial
    autocorrelation so the starting polynomial is unchanged."""
    best = None
    for (pp, qq) in ((p - 1, q), (p, q - 1)):
        f = fits.get((pp, qq))
        if f is not None and (best is None or f.loglik > best.loglik):
            best = f
    if best is None:
        return None
    pp, qq = best.order
    x = best.raw
    return np.r_[x[:pp], np.zeros(p - pp), x[pp:], np.zeros(q - qq)]


def aicc_grid(series, covariates=None, max_order: int = MAX_ORDER, intercept: bool = True, names=None):
    """Fit every order in the grid; returns ``(fits, table)``.

    ``table`` is a DataFrame with one row per cell (aicc is NaN for failed
    cells).
    """
    if max_order > MAX_ORDER:
        raise ConfigError(f"max_order cannot exceed {MAX_ORDER}")
    y = np.asarray(series, dtype=float)
    X = _design(covariates, len(y), intercept)
    _check_rank(X[np.isfinite(y)], _names(names, X.shape[1], intercept))
    fits, rows = {}, []
    for p, q in _grid(max_order):
        start = _warm_start(fits, p, q)
        try:
            f = fit_regarma(series, covariates, (p, q), intercept=intercept, names=names,
                            model_kind="regARMA", start=start)
            ok = f.converged and np.isfinite(f.aicc)
        except (DataError, NumericalError, np.linalg.LinAlgError) as exc:
            f, ok = None, False
        if ok:
            fits[(p, q)] = f
        rows.append({"p_ar": p, "q_ma": q, "aicc": f.aicc if ok else np.nan, "ok": ok})
    return fits, pd.DataFrame(rows)


def _best(fits):
    return min(fits, key=lambda c: (fits[c].aicc, c[0] + c[1], c[0]))


def select_order_aicc(series, covariates=None, max_order: int = MAX_ORDER, intercept: bool = True) -> ArmaOrder:
    """Order in ``(0,0)..(max_order,max_order)`` minimising AICc.

    Ties go to the smaller ``p + q``, then the smaller ``p``.
    """
    fits, _ = aicc_grid(series, covariates, max_order, intercept)
    if not fits:
        raise NumericalError("every ARMA order in the grid failed to fit")
    return ArmaOrder(*_best(fits))


def forecast_baseline(fit: BaselineFit, covariates=None, horizon: int | None = None) -> np.ndarray:
    """Regression surface plus the ARMA error forecast from the estimation end."""
    intercept = len(fit.coef_names) > 0 and fit.coef_names[0] == "intercept"
    if covariates is None:
        if horizon is None:
            raise ConfigError("need covariates or a horizon")
        X = _design(None, horizon, intercept)
    else:
        c = np.asarray(covariates, dtype=float)
        n = c.shape[0] if c.ndim else 0
        X = _design(c, n, intercept)
    if not np.all(np.isfinite(X)):
        raise DataError("covariates over the event window contain missing values")
    mean = X @ fit.coef
    h = X.shape[0]
    if fit.model_kind == "lm" or fit.order.p_ar + fit.order.q_ma == 0:
        return mean
    T, _ = _transition(fit.ar, fit.ma)
    a = np.array(fit.state_mean, float)
    err = np.empty(h)
    for i in range(h):
        a = T @ a
        err[i] = a[0]
    return mean + err


# -- panel-level driver -----------------------------------------------------------------

def fit_panel_baselines(panel: Panel, split: WindowSplit, kind: str, max_order: int = MAX_ORDER,
                        intercept: bool = True):
    """Fit one baseline per station; return ``(fits, normal_values, notes)``.

    ``normal_values`` has shape (N, tau) over both windows: in-sample fitted
    values (one-step predictions for ARMA errors) then event-window forecasts.
    """
    kind = kind.lower()
    if kind not in ("lm", "regar1", "regarma"):
        raise ConfigError(f"unknown baseline kind {kind!r}")
    Xall = panel.covariates
    names = panel.covariate_names
    fits, nc, notes = [], np.empty((panel.n_stations, split.tau)), []
    for i, sid in enumerate(panel.station_ids):
        y = panel.observations[i, split.omega0]
        X0 = Xall[i, split.omega0, :]
        X1 = Xall[i, split.omega1, :]
        if kind == "lm":
            f = fit_lm(y, X0, sid, names, intercept)
        elif kind == "regar1":
            f = fit_regarma(y, X0, (1, 0), sid, names, intercept, model_kind="regAR1")
            if not f.converged:
                notes.append(f"{sid}: regAR1 {f.message}")
        else:
            grid, _ = aicc_grid(y, X0, max_order, intercept, names)
            if grid:
                best = grid[_best(grid)]
                f = BaselineFit(**{**best.__dict__, "station_id": sid})
            else:
                msg = f"{sid}: every ARMA order failed; falling back to lm"
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
                notes.append(msg)
                f = fit_lm(y, X0, sid, names, intercept)
        fits.append(f)
        nc[i, : split.tau0] = f.fitted
        nc[i, split.tau0:] = forecast_baseline(f, X1)
    return fits, nc, notes


def write_fit_summaries(fits: Sequence[BaselineFit], path) -> pd.DataFrame:
    df = pd.DataFrame([f.summary() for f in fits],
                      columns=["station_id", "model_kind", "p_ar", "q_ma", "aicc", "residual_variance"])
    df.to_csv(path, index=False)
    return df
