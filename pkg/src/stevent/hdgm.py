"""Hidden dynamics geostatistical model (HDGM).

The response at station ``s`` and time ``t`` is

    y[s, t] = x[s, t] @ beta + w[s, t] + eps[s, t],
    w[:, t] = g * w[:, t-1] + omega[:, t],   omega[:, t] ~ N(0, nu * M(theta)),

with ``eps`` white noise of variance ``sigma2_eps`` and ``M`` a Matérn
correlation matrix over station distances.  The latent field is started
from its stationary law ``N(0, nu / (1 - g**2) * M)``.

Estimation uses an exact Kalman filter likelihood and an EM algorithm whose
M-step is closed form for ``beta``, ``sigma2_eps``, ``g`` and ``nu`` and a
bounded one-dimensional search for ``theta``.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace as _dc_replace

import numpy as np
from scipy import linalg, optimize, special

from .errors import DataError, NumericalError, ParameterError
from .panel import Panel, WindowSplit, distance_matrix

LOG2PI = math.log(2.0 * math.pi)
THETA_MIN_KM = 0.1
JITTER = 1e-10
MONOTONE_TOL = 1e-8

__all__ = [
    "HdgmParams",
    "FitResult",
    "SmootherResult",
    "matern_correlation",
    "matern_matrix",
    "initial_params",
    "kalman_loglik",
    "kalman_smooth",
    "em_fit",
    "forecast_normal",
    "normal_values",
]


@dataclass(frozen=True, eq=False)
class HdgmParams:
    beta: np.ndarray
    g: float
    nu: float
    theta: float
    sigma2_eps: float
    smoothness: float = 0.5

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        for name in ("g", "nu", "theta", "sigma2_eps", "smoothness"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not abs(self.g) < 1:
            raise ParameterError(f"|g| must be < 1, got {self.g}")
        for name in ("theta", "sigma2_eps", "smoothness"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ParameterError(f"{name} must be positive, got {v}")
        # nu = 0 is allowed for simulation (no latent field) but not for filtering
        if not (np.isfinite(self.nu) and self.nu >= 0):
            raise ParameterError(f"nu must be non-negative, got {self.nu}")
        if not np.all(np.isfinite(beta)):
            raise ParameterError("beta must be finite")

    def replace(self, **changes) -> "HdgmParams":
        return _dc_replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "g": self.g,
            "nu": self.nu,
            "theta": self.theta,
            "sigma2_eps": self.sigma2_eps,
            "smoothness": self.smoothness,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HdgmParams":
        return cls(np.asarray(d["beta"], float), d["g"], d["nu"], d["theta"], d["sigma2_eps"],
                   d.get("smoothness", 0.5))


@dataclass(frozen=True, eq=False)
class SmootherResult:
    """Fixed-interval smoother output over the estimation window.

    ``states`` and ``variances`` are (N, tau0); ``covariances`` is
    (tau0, N, N) and ``lag_one[t] = Cov(w[t+1], w[t] | data)``.
    """

    states: np.ndarray
    variances: np.ndarray
    covariances: np.ndarray
    lag_one: np.ndarray
    loglik: float


@dataclass(frozen=True, eq=False)
class FitResult:
    params: HdgmParams
    loglik_trace: np.ndarray
    smoothed_states: np.ndarray
    smoothed_variances: np.ndarray
    converged: bool
    iterations: int
    warnings: tuple = field(default_factory=tuple)

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    def to_dict(self) -> dict:
        d = self.params.to_dict()
        d.update(loglik=self.loglik, iterations=self.iterations, converged=self.converged)
        return d

    def to_json(self, path=None) -> str:
        s = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(s)
        return s


# -- Matérn -------------------------------------------------------------------

def matern_correlation(d, theta: float, smoothness: float = 0.5):
    """Matérn correlation at distance ``d`` with range ``theta``.

    Smoothness 1/2 gives ``exp(-d/theta)``; 3/2 and 5/2 use their closed
    forms and other values the Bessel-function expression.
    """
    if not theta > 0:
        raise ParameterError(f"theta must be positive, got {theta}")
    if not smoothness > 0:
        raise ParameterError(f"smoothness must be positive, got {smoothness}")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ParameterError("distances must be non-negative")
    r = d / theta
    if smoothness == 0.5:
        out = np.exp(-r)
    elif smoothness == 1.5:
        a = math.sqrt(3.0) * r
        out = (1.0 + a) * np.exp(-a)
    elif smoothness == 2.5:
        a = math.sqrt(5.0) * r
        out = (1.0 + a + a * a / 3.0) * np.exp(-a)
    else:
        a = np.sqrt(2.0 * smoothness) * r
        with np.errstate(invalid="ignore", over="ignore"):
            out = (2.0 ** (1.0 - smoothness) / special.gamma(smoothness)) * a**smoothness * special.kv(smoothness, a)
        out = np.where(a == 0, 1.0, out)
    return out if out.ndim else float(out)


def matern_matrix(dist: np.ndarray, theta: float, smoothness: float = 0.5) -> np.ndarray:
    m = np.asarray(matern_correlation(dist, theta, smoothness), dtype=float)
    return 0.5 * (m + m.T)


def _chol(a: np.ndarray, scale: float):
    """Cholesky factor with a single diagonal jitter retry."""
    try:
        return linalg.cho_factor(a, lower=True, check_finite=False)
    except linalg.LinAlgError:
        pass
    try:
        return linalg.cho_factor(a + JITTER * scale * np.eye(len(a)), lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise NumericalError("covariance matrix is not positive definite after jitter") from None


def _logdet(cf) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(cf[0]))))


# -- data plumbing --------------------------------------------------------------

class _Data:
    """Arrays for the estimation window, time-major."""

    def __init__(self, panel: Panel, split: WindowSplit, intercept: bool = True):
        w = split.omega0
        self.y = np.ascontiguousarray(panel.observations[:, w].T)
        self.X = np.ascontiguousarray(panel.design(intercept)[:, w, :].transpose(1, 0, 2))
        if not np.all(np.isfinite(self.X)):
            raise DataError("covariates must be complete over the estimation window")
        self.obs = np.isfinite(self.y)
        self.dist = distance_matrix(panel)
        self.T, self.N = self.y.shape
        self.p = self.X.shape[2]

    def offset(self, beta):
        if len(beta) != self.p:
            raise ParameterError(f"beta has length {len(beta)}, design has {self.p} columns")
        return self.X @ beta


def _state_matrices(params: HdgmParams, dist: np.ndarray):
    if not params.nu > 0:
        raise ParameterError("nu must be positive for filtering and smoothing")
    M = matern_matrix(dist, params.theta, params.smoothness)
    try:
        linalg.cho_factor(M, lower=True, check_finite=False)
    except linalg.LinAlgError:
        M = M + JITTER * np.eye(len(M))
        try:
            linalg.cho_factor(M, lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise NumericalError("Matérn matrix is not positive definite after jitter") from None
    gamma = params.nu * M
    p0 = gamma / (1.0 - params.g**2)
    return M, gamma, p0


def _filter(y, obs, offset, g, gamma, p0, s2, keep=True):
    """Kalman filter with per-time row deletion of missing responses."""
    T, N = y.shape
    a_pred = np.zeros((T, N))
    a_filt = np.zeros((T, N))
    if keep:
        P_pred = np.zeros((T, N, N))
        P_filt = np.zeros((T, N, N))
    ll = 0.0
    a = np.zeros(N)
    P = p0.copy()
    all_obs = obs.all(axis=1)
    for t in range(T):
        a_pred[t] = a
        if keep:
            P_pred[t] = P
        if all_obs[t]:
            S = P + s2 * np.eye(N)
            cf = _chol(S, s2)
            v = y[t] - offset[t] - a
            Sv = linalg.cho_solve(cf, v, check_finite=False)
            K_T = linalg.cho_solve(cf, P, check_finite=False)  # S^-1 P = K'
            a = a + P @ Sv
            P = P - P @ K_T
            ll -= 0.5 * (N * LOG2PI + _logdet(cf) + v @ Sv)
        elif obs[t].any():
            o = np.flatnonzero(obs[t])
            Poo = P[np.ix_(o, o)]
            Pao = P[:, o]
            S = Poo + s2 * np.eye(len(o))
            cf = _chol(S, s2)
            v = y[t, o] - offset[t, o] - a[o]
            Sv = linalg.cho_solve(cf, v, check_finite=False)
            K_T = linalg.cho_solve(cf, Pao.T, check_finite=False)
            a = a + Pao @ Sv
            P = P - Pao @ K_T
            ll -= 0.5 * (len(o) * LOG2PI + _logdet(cf) + v @ Sv)
        P = 0.5 * (P + P.T)
        a_filt[t] = a
        if keep:
            P_filt[t] = P
        a = g * a
        P = g * g * P + gamma
    if not np.isfinite(ll):
        raise NumericalError("non-finite log-likelihood")
    if keep:
        return ll, a_pred, P_pred, a_filt, P_filt
    return ll, a_pred, None, a_filt, P


def _smooth(g, a_pred, P_pred, a_filt, P_filt):
    T, N = a_filt.shape
    a_s = a_filt.copy()
    P_s = P_filt.copy()
    lag = np.zeros((max(T - 1, 0), N, N))
    for t in range(T - 2, -1, -1):
        cf = _chol(P_pred[t + 1], float(np.trace(P_pred[t + 1])) / N)
        # J = g P_filt[t] P_pred[t+1]^-1
        J = g * linalg.cho_solve(cf, P_filt[t], check_finite=False).T
        a_s[t] = a_filt[t] + J @ (a_s[t + 1] - a_pred[t + 1])
        P_s[t] = P_filt[t] + J @ (P_s[t + 1] - P_pred[t + 1]) @ J.T
        P_s[t] = 0.5 * (P_s[t] + P_s[t].T)
        lag[t] = P_s[t + 1] @ J.T
    return a_s, P_s, lag


def _run(data: _Data, params: HdgmParams, keep=True):
    _, gamma, p0 = _state_matrices(params, data.dist)
    return _filter(data.y, data.obs, data.offset(params.beta), params.g, gamma, p0, params.sigma2_eps, keep)


# -- public operations ------------------------------------------------------------

def kalman_loglik(panel: Panel, split: WindowSplit, params: HdgmParams, intercept: bool = True) -> float:
    """Exact Gaussian log-likelihood of the observed estimation-window data."""
    data = _Data(panel, split, intercept)
    return _run(data, params, keep=False)[0]


def _smoother(data: _Data, params: HdgmParams) -> SmootherResult:
    ll, a_pred, P_pred, a_filt, P_filt = _run(data, params)
    a_s, P_s, lag = _smooth(params.g, a_pred, P_pred, a_filt, P_filt)
    var = np.diagonal(P_s, axis1=1, axis2=2)
    return SmootherResult(a_s.T.copy(), var.T.copy(), P_s, lag, ll)


def kalman_smooth(panel: Panel, split: WindowSplit, params: HdgmParams, intercept: bool = True) -> SmootherResult:
    """Smoothed latent states given all estimation-window observations."""
    return _smoother(_Data(panel, split, intercept), params)


def initial_params(panel: Panel, split: WindowSplit, smoothness: float = 0.5, intercept: bool = True) -> HdgmParams:
    """Pooled-OLS starting values for EM."""
    data = _Data(panel, split, intercept)
    X = data.X[data.obs]
    y = data.y[data.obs]
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ beta
    v = float(np.var(resid, ddof=min(data.p, len(y) - 1)))
    v = max(v, 1e-8)
    d = data.dist[np.triu_indices(data.N, 1)]
    theta = float(np.median(d)) if d.size and np.median(d) > 0 else 1.0
    return HdgmParams(beta, 0.5, v / 2, theta, v / 2, smoothness)


def _moments(data: _Data, sm: SmootherResult):
    a = sm.states.T  # (T, N)
    P = sm.covariances
    T = data.T
    outer = P + a[:, :, None] * a[:, None, :]
    E11 = outer[0]
    S11 = outer[1:].sum(axis=0)
    S00 = outer[:-1].sum(axis=0)
    S10 = (sm.lag_one + a[1:, :, None] * a[:-1, None, :]).sum(axis=0)
    return a, P, E11, S11, S00, S10


def _update_g_nu(T, N, A, B, C, D, g_old):
    """Maximise the state part of the expected log-likelihood over (g, nu).

    Profiling out nu leaves a cubic first-order condition in g.
    """
    E = C - D

    def nu_of(g):
        return (A + D - 2.0 * g * B + g * g * E) / (T * N)

    def qp(g):
        nu = nu_of(g)
        if nu <= 0:
            return -np.inf
        return -0.5 * (T * N * math.log(nu) - N * math.log(1.0 - g * g))

    coeffs = [E * (1.0 - T), B * (T - 2.0), T * E + A + D, -T * B]
    cands = [g_old]
    if T > 1:
        for r in np.roots(coeffs):
            if abs(r.imag) < 1e-10 and abs(r.real) < 1.0 - 1e-9:
                cands.append(float(r.real))
    else:
        cands.append(0.0)
    g = max(cands, key=qp)
    return g, nu_of(g)


def _theta_objective(dist, smoothness, S_hat, T):
    def neg_q(log_theta):
        M = matern_matrix(dist, math.exp(log_theta), smoothness)
        try:
            cf = linalg.cho_factor(M, lower=True, check_finite=False)
        except linalg.LinAlgError:
            return np.inf
        return 0.5 * (T * _logdet(cf) + float(np.trace(linalg.cho_solve(cf, S_hat, check_finite=False))))
    return neg_q


def em_fit(panel: Panel, split: WindowSplit, init: HdgmParams | None = None, max_iter: int = 400,
           tol: float = 1e-6, intercept: bool = True, smoothness: float = 0.5,
           theta_bounds: tuple[float, float] | None = None, verbose: bool = False) -> FitResult:
    """Maximum likelihood via EM on the estimation window.

    Parameters
    ----------
    init : HdgmParams, optional
        Starting point; defaults to :func:`initial_params`.
    max_iter, tol
        Stop when the relative log-likelihood change drops below ``tol`` or
        after ``max_iter`` M-steps.
    theta_bounds : (float, float), optional
        Search interval for the spatial range in km; defaults to
        ``[0.1, 10 * panel diameter]``.

    Raises
    ------
    NumericalError
        If the log-likelihood decreases by more than ``1e-8`` between
        iterations, which would indicate a bug.
    """
    data = _Data(panel, split, intercept)
    if init is None:
        init = initial_params(panel, split, smoothness, intercept)
    if data.obs.sum() < 10 * data.p:
        raise DataError(f"estimation window has {data.obs.sum()} observations; need >= {10 * data.p}")
    params = init
    T, N = data.T, data.N
    diam = float(data.dist.max()) if N > 1 else 1.0
    lo, hi = theta_bounds if theta_bounds is not None else (THETA_MIN_KM, max(10.0 * diam, 10 * THETA_MIN_KM))
    Xo = data.X[data.obs]
    XtX = Xo.T @ Xo
    n_obs = int(data.obs.sum())
    trace: list[float] = []
    notes: list[str] = []
    converged = False
    sm = None
    it = 0
    for it in range(max_iter + 1):
        sm = _smoother(data, params)
        ll = sm.loglik
        if trace and ll < trace[-1] - MONOTONE_TOL:
            raise NumericalError(f"EM log-likelihood decreased at iteration {it}: {trace[-1]!r} -> {ll!r}")
        trace.append(ll)
        if verbose:
            print(f"iter {it:4d}  loglik {ll:.6f}  g={params.g:.4f} nu={params.nu:.4f} "
                  f"theta={params.theta:.3f} s2={params.sigma2_eps:.4f}")
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        if it == max_iter:
            break

        a, P, E11, S11, S00, S10 = _moments(data, sm)
        # observation block
        beta = np.linalg.solve(XtX, Xo.T @ (data.y - a)[data.obs])
        r = (data.y - data.X @ beta - a)[data.obs]
        pdiag = np.diagonal(P, axis1=1, axis2=2)[data.obs]
        s2 = float(np.sum(r * r + pdiag)) / n_obs
        # latent block: (g, nu) then theta
        M = matern_matrix(data.dist, params.theta, params.smoothness)
        cf = _chol(M, 1.0)

        def tr(S):
            return float(np.trace(linalg.cho_solve(cf, S, check_finite=False)))

        g, nu = _update_g_nu(T, N, tr(S11), tr(S10), tr(S00), tr(E11), params.g)
        theta = params.theta
        if N > 1:
            S_hat = ((1 - g * g) * E11 + S11 - g * (S10 + S10.T) + g * g * S00) / nu
            obj = _theta_objective(data.dist, params.smoothness, S_hat, T)
            res = optimize.minimize_scalar(obj, bounds=(math.log(lo), math.log(hi)), method="bounded",
                                           options={"xatol": 1e-7})
            if res.fun < obj(math.log(theta)):
                theta = math.exp(res.x)
        params = HdgmParams(beta, g, nu, theta, s2, params.smoothness)

    if N > 1 and (params.theta < lo * 1.001 or params.theta > hi * 0.999):
        msg = f"theta converged to the search bound ({params.theta:.4g} km)"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if not converged:
        notes.append(f"EM stopped after {max_iter} iterations without meeting tol={tol}")
    return FitResult(params, np.array(trace), sm.states, sm.variances, converged, it, tuple(notes))


def forecast_normal(panel: Panel, split: WindowSplit, params: HdgmParams, intercept: bool = True,
                    horizon: int | None = None) -> np.ndarray:
    """Normal values over the event window, shape (N, horizon).

    Uses only estimation-window data: ``x @ beta + g**h * w_filt[T1]``.
    ``horizon`` defaults to the event-window length and may be shorter,
    including zero.
    """
    horizon = split.tau1 if horizon is None else int(horizon)
    if not 0 <= horizon <= split.tau1:
        raise ValueError(f"horizon must lie in [0, {split.tau1}]")
    data = _Data(panel, split, intercept)
    if horizon == 0:
        return np.zeros((data.N, 0))
    _, _, _, a_filt, _ = _run(data, params, keep=False)
    Xe = panel.design(intercept)[:, split.t1 + 1:split.t1 + 1 + horizon, :]
    if not np.all(np.isfinite(Xe)):
        raise DataError("covariates must be complete over the event window")
    h = np.arange(1, horizon + 1)
    return Xe @ params.beta + np.outer(a_filt[-1], params.g**h)


def normal_values(panel: Panel, split: WindowSplit, params: HdgmParams, insample: str = "smoothed",
                  intercept: bool = True) -> np.ndarray:
    """Normal values over both windows, shape (N, tau).

    In the estimation window the latent field is the smoothed state
    (``insample="smoothed"``) or the one-step prediction
    (``insample="predicted"``); the event window is always a forecast.
    """
    data = _Data(panel, split, intercept)
    ll, a_pred, P_pred, a_filt, P_filt = _run(data, params)
    if insample == "smoothed":
        w, _, _ = _smooth(params.g, a_pred, P_pred, a_filt, P_filt)
    elif insample == "predicted":
        w = a_pred
    else:
        raise ValueError(f"insample must be 'smoothed' or 'predicted', got {insample!r}")
    fitted = data.X @ params.beta + w
    Xe = panel.design(intercept)[:, split.omega1, :]
    if not np.all(np.isfinite(Xe)):
        raise DataError("covariates must be complete over the event window")
    h = np.arange(1, split.tau1 + 1)
    fc = Xe @ params.beta + np.outer(a_filt[-1], params.g**h)
    return np.concatenate([fitted.T, fc], axis=1)
