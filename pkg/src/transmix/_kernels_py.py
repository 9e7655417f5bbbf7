"""NumPy implementations of the likelihood kernels.

Signatures and results match the compiled ``transmix._ext._kernels`` module;
this module is used whenever the extension is unavailable.
"""
import numpy as np
from scipy.special import expit, gammaln, psi

MU_EPS = 1e-12


def _shapes(eta, phi):
    mu = np.clip(expit(eta), MU_EPS, 1.0 - MU_EPS)
    return mu, mu * phi, (1.0 - mu) * phi


def loglik_matrix(gammas, slog, slog1m, n_triads, phi, mlogit, flogit):
    gammas = np.asarray(gammas, dtype=float)
    eta = gammas[:, 0] + np.multiply.outer(mlogit, gammas[:, 1]) + np.multiply.outer(flogit, gammas[:, 2])
    phi_ = phi[:, None]
    _, a, b = _shapes(eta, phi_)
    return ((a - 1.0) * slog[:, None] + (b - 1.0) * slog1m[:, None]
            - n_triads * (gammaln(a) + gammaln(b) - gammaln(phi_)))


def cluster_objective(gamma, weights, slog, slog1m, n_triads, phi, mlogit, flogit):
    keep = weights != 0.0
    if not keep.all():
        weights, slog, slog1m, phi, mlogit, flogit = (
            v[keep] for v in (weights, slog, slog1m, phi, mlogit, flogit))
    eta = gamma[0] + gamma[1] * mlogit + gamma[2] * flogit
    mu, a, b = _shapes(eta, phi)
    ell = (a - 1.0) * slog + (b - 1.0) * slog1m - n_triads * (gammaln(a) + gammaln(b) - gammaln(phi))
    d = weights * phi * (slog - slog1m - n_triads * (psi(a) - psi(b))) * mu * (1.0 - mu)
    grad = np.array([d.sum(), d @ mlogit, d @ flogit])
    return float(weights @ ell), grad


def maximize_cluster(gamma0, weights, slog, slog1m, n_triads, phi, mlogit, flogit,
                     gtol=1e-8, maxiter=200):
    from scipy.optimize import minimize

    wsum = weights.sum()
    scale = 1.0 / (wsum * n_triads) if wsum > 0 else 1.0

    def negative(g):
        value, grad = cluster_objective(g, weights, slog, slog1m, n_triads, phi, mlogit, flogit)
        return -value * scale, -grad * scale

    res = minimize(negative, np.asarray(gamma0, dtype=float), jac=True, method="BFGS",
                   options={"gtol": gtol, "maxiter": maxiter})
    return res.x, int(res.nit)
