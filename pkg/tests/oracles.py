"""Brute-force reference computations used by the test-suite.

Everything here builds the full joint Gaussian of the HDGM directly from
its process definition and conditions with dense linear algebra; nothing
is shared with the state-space code paths under test.
"""
import numpy as np
from scipy import stats


def exp_corr(coords, theta, smoothness=0.5):
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    r = d / theta
    if smoothness == 0.5:
        return np.exp(-r)
    if smoothness == 1.5:
        return (1 + np.sqrt(3) * r) * np.exp(-np.sqrt(3) * r)
    if smoothness == 2.5:
        return (1 + np.sqrt(5) * r + 5 * r**2 / 3) * np.exp(-np.sqrt(5) * r)
    raise ValueError(smoothness)


def latent_cov(coords, n_times, g, nu, theta, smoothness=0.5):
    """Cov of (w_1, ..., w_T) stacked time-major: g^|t-s| nu/(1-g^2) M."""
    M = exp_corr(coords, theta, smoothness)
    lags = np.abs(np.subtract.outer(np.arange(n_times), np.arange(n_times)))
    return np.kron(g**lags, nu / (1 - g * g) * M)


def joint(y, X, coords, beta, g, nu, theta, s2, smoothness=0.5):
    """Mean and covariance of vec(Y) (time-major) for y of shape (N, T)."""
    N, T = y.shape
    mean = np.einsum("ntp,p->tn", X, beta).reshape(-1)
    cov = latent_cov(coords, T, g, nu, theta, smoothness) + s2 * np.eye(N * T)
    return mean, cov


def dense_loglik(y, X, coords, beta, g, nu, theta, s2, smoothness=0.5):
    mean, cov = joint(y, X, coords, beta, g, nu, theta, s2, smoothness)
    v = y.T.reshape(-1)
    o = np.isfinite(v)
    return stats.multivariate_normal(mean[o], cov[np.ix_(o, o)]).logpdf(v[o])


def dense_smooth(y, X, coords, beta, g, nu, theta, s2, smoothness=0.5):
    """E[w | observed y] and Var(w_st | observed y), each (N, T)."""
    N, T = y.shape
    mean, cov = joint(y, X, coords, beta, g, nu, theta, s2, smoothness)
    W = latent_cov(coords, T, g, nu, theta, smoothness)
    v = y.T.reshape(-1)
    o = np.isfinite(v)
    K = np.linalg.solve(cov[np.ix_(o, o)], W[o, :]).T  # Cov(w, y_o) Σ_oo^-1
    m = K @ (v[o] - mean[o])
    V = W - K @ W[o, :]
    return m.reshape(T, N).T, np.diag(V).reshape(T, N).T


def dense_forecast(y, X_all, coords, beta, g, nu, theta, s2, horizon, smoothness=0.5):
    """E[x'beta + w_{T+h} | y_1..T] for h = 1..horizon, (N, horizon).

    ``X_all`` covers T + horizon time points.
    """
    N, T = y.shape
    Wfull = latent_cov(coords, T + horizon, g, nu, theta, smoothness)
    n_in = N * T
    mean = np.einsum("ntp,p->tn", X_all, beta).reshape(-1)
    v = y.T.reshape(-1)
    o = np.isfinite(v)
    cov_in = Wfull[:n_in, :n_in] + s2 * np.eye(n_in)
    cross = Wfull[n_in:, :n_in][:, o]
    m = mean[n_in:] + cross @ np.linalg.solve(cov_in[np.ix_(o, o)], v[o] - mean[:n_in][o])
    return m.reshape(horizon, N).T


def random_instance(rng, max_n=4, max_t=6, horizon=2, missing=True):
    """Small random panel plus parameters for oracle comparisons.

    Returns (y, X, coords, params-tuple, T) where y and X span T + horizon
    time points and the estimation window is the first T.
    """
    N = int(rng.integers(1, max_n + 1))
    T = int(rng.integers(2, max_t + 1))
    coords = rng.uniform(0, 50, (N, 2))
    y = rng.normal(size=(N, T + horizon))
    X = rng.normal(size=(N, T + horizon, 1))
    if missing and rng.random() < 0.5:
        y[rng.integers(N), rng.integers(T)] = np.nan
    if missing and T >= 3 and rng.random() < 0.3:
        y[:, 1] = np.nan
    prm = (rng.normal(size=2), rng.uniform(-0.9, 0.9), rng.uniform(0.5, 2), rng.uniform(5, 60), rng.uniform(0.3, 2))
    return y, X, coords, prm, T


def arma_acov(phi, theta, n, n_psi=3000):
    """Autocovariances gamma(0..n-1) of a unit-innovation ARMA process.

    Uses the MA(infinity) weights of (1 + theta(L)) / (1 - phi(L)).
    """
    psi = np.zeros(n_psi)
    psi[0] = 1.0
    for j in range(1, n_psi):
        v = theta[j - 1] if j - 1 < len(theta) else 0.0
        for i, a in enumerate(phi, start=1):
            if j - i >= 0:
                v += a * psi[j - i]
        psi[j] = v
    return np.array([psi[: n_psi - h] @ psi[h:] for h in range(n)])


def dense_regarma_loglik(y, X, phi, theta):
    """Profile log-likelihood of regression with ARMA errors (GLS beta, ML sigma2)."""
    n_all = len(y)
    g = arma_acov(np.asarray(phi, float), np.asarray(theta, float), n_all)
    lags = np.abs(np.subtract.outer(np.arange(n_all), np.arange(n_all)))
    o = np.isfinite(y)
    omega = g[lags][np.ix_(o, o)]
    yo, Xo = y[o], X[o]
    L = np.linalg.cholesky(omega)
    ys = np.linalg.solve(L, yo)
    Xs = np.linalg.solve(L, Xo)
    beta, *_ = np.linalg.lstsq(Xs, ys, rcond=None)
    r = ys - Xs @ beta
    n = len(yo)
    s2 = r @ r / n
    ll = -0.5 * n * (np.log(2 * np.pi) + np.log(s2) + 1) - np.log(np.diag(L)).sum()
    return ll, beta, s2
