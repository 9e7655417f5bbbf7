# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled likelihood kernels for the beta-regression mixture.

Both functions consume per-site sufficient statistics of the child values
(sum of log y and of log(1 - y) over triads) so their cost is independent of
the number of triads.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, lgamma

cnp.import_array()

cdef double MU_EPS = 1e-12


cdef inline double gammaln(double x) nogil:
    return lgamma(x)


cdef inline double psi(double x) nogil:
    # shift to x >= 6, then the asymptotic series through x^-14; error ~1e-13
    cdef double acc = 0.0, inv, inv2
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    return (acc + log(x) - 0.5 * inv
            - inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (1.0 / 240
            - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12)))))))


def digamma(double x):
    """The digamma used inside the kernels, exposed for testing."""
    return psi(x)


cdef inline double _mean(double eta) nogil:
    cdef double mu
    if eta >= 0:
        mu = 1.0 / (1.0 + exp(-eta))
    else:
        mu = exp(eta)
        mu = mu / (1.0 + mu)
    if mu < MU_EPS:
        return MU_EPS
    if mu > 1.0 - MU_EPS:
        return 1.0 - MU_EPS
    return mu


def loglik_matrix(const double[:, ::1] gammas, const double[::1] slog,
                  const double[::1] slog1m, double n_triads,
                  const double[::1] phi, const double[::1] mlogit,
                  const double[::1] flogit):
    cdef Py_ssize_t J = slog.shape[0], K = gammas.shape[0], j, k
    cdef double mu, a, b, lgphi
    out = np.empty((J, K), dtype=np.float64)
    cdef double[:, ::1] res = out
    with nogil:
        for j in range(J):
            lgphi = gammaln(phi[j])
            for k in range(K):
                mu = _mean(gammas[k, 0] + gammas[k, 1] * mlogit[j] + gammas[k, 2] * flogit[j])
                a = mu * phi[j]
                b = (1.0 - mu) * phi[j]
                res[j, k] = ((a - 1.0) * slog[j] + (b - 1.0) * slog1m[j]
                             - n_triads * (gammaln(a) + gammaln(b) - lgphi))
    return out


def cluster_objective(const double[::1] gamma, const double[::1] weights,
                      const double[::1] slog, const double[::1] slog1m,
                      double n_triads, const double[::1] phi,
                      const double[::1] mlogit, const double[::1] flogit):
    cdef Py_ssize_t J = slog.shape[0], j
    cdef double mu, a, b, w, d, value = 0.0, g0 = 0.0, g1 = 0.0, g2 = 0.0
    with nogil:
        for j in range(J):
            w = weights[j]
            if w == 0.0:
                continue
            mu = _mean(gamma[0] + gamma[1] * mlogit[j] + gamma[2] * flogit[j])
            a = mu * phi[j]
            b = (1.0 - mu) * phi[j]
            value += w * ((a - 1.0) * slog[j] + (b - 1.0) * slog1m[j]
                          - n_triads * (gammaln(a) + gammaln(b) - gammaln(phi[j])))
            d = w * phi[j] * (slog[j] - slog1m[j] - n_triads * (psi(a) - psi(b))) * mu * (1.0 - mu)
            g0 += d
            g1 += d * mlogit[j]
            g2 += d * flogit[j]
    grad = np.empty(3, dtype=np.float64)
    grad[0] = g0
    grad[1] = g1
    grad[2] = g2
    return value, grad


cdef double _objective(const double* gamma, const double[::1] weights,
                       const double[::1] slog, const double[::1] slog1m,
                       double n_triads, const double[::1] phi,
                       const double[::1] mlogit, const double[::1] flogit,
                       double scale, double* grad) nogil:
    # negated, scaled weighted objective; gradient written into grad[0:3]
    cdef Py_ssize_t J = slog.shape[0], j
    cdef double mu, a, b, w, d, value = 0.0
    grad[0] = 0.0
    grad[1] = 0.0
    grad[2] = 0.0
    for j in range(J):
        w = weights[j]
        if w == 0.0:
            continue
        mu = _mean(gamma[0] + gamma[1] * mlogit[j] + gamma[2] * flogit[j])
        a = mu * phi[j]
        b = (1.0 - mu) * phi[j]
        value += w * ((a - 1.0) * slog[j] + (b - 1.0) * slog1m[j]
                      - n_triads * (gammaln(a) + gammaln(b) - gammaln(phi[j])))
        d = w * phi[j] * (slog[j] - slog1m[j] - n_triads * (psi(a) - psi(b))) * mu * (1.0 - mu)
        grad[0] += d
        grad[1] += d * mlogit[j]
        grad[2] += d * flogit[j]
    grad[0] *= -scale
    grad[1] *= -scale
    grad[2] *= -scale
    return -value * scale


def maximize_cluster(const double[::1] gamma0, const double[::1] weights,
                     const double[::1] slog, const double[::1] slog1m,
                     double n_triads, const double[::1] phi,
                     const double[::1] mlogit, const double[::1] flogit,
                     double gtol=1e-8, int maxiter=200):
    """BFGS with backtracking line search on one cluster's objective.

    Returns ``(gamma, n_iter)``; the objective is scaled by
    ``1 / (sum(weights) * n_triads)`` before the gradient tolerance applies.
    """
    cdef double x[3]
    cdef double xn[3]
    cdef double g[3]
    cdef double gn[3]
    cdef double p[3]
    cdef double s[3]
    cdef double y[3]
    cdef double H[3][3]
    cdef double Hy[3]
    cdef double f, fn, slope, step, ys, yy, yHy, rho, gmax, wsum = 0.0, scale
    cdef Py_ssize_t i, r, c, it = 0, J = weights.shape[0]
    cdef int halvings
    cdef bint done
    for i in range(J):
        wsum += weights[i]
    scale = 1.0 / (wsum * n_triads) if wsum > 0 else 1.0
    for i in range(3):
        x[i] = gamma0[i]
    with nogil:
        for r in range(3):
            for c in range(3):
                H[r][c] = 1.0 if r == c else 0.0
        f = _objective(x, weights, slog, slog1m, n_triads, phi, mlogit, flogit, scale, g)
        while it < maxiter:
            gmax = 0.0
            for i in range(3):
                if g[i] > gmax:
                    gmax = g[i]
                elif -g[i] > gmax:
                    gmax = -g[i]
            if gmax < gtol:
                break
            slope = 0.0
            for r in range(3):
                p[r] = 0.0
                for c in range(3):
                    p[r] -= H[r][c] * g[c]
                slope += p[r] * g[r]
            if slope >= 0.0:
                # lost descent: restart from steepest descent
                for r in range(3):
                    for c in range(3):
                        H[r][c] = 1.0 if r == c else 0.0
                    p[r] = -g[r]
                slope = -(g[0] * g[0] + g[1] * g[1] + g[2] * g[2])
            step = 1.0
            halvings = 0
            while True:
                for i in range(3):
                    xn[i] = x[i] + step * p[i]
                fn = _objective(xn, weights, slog, slog1m, n_triads, phi, mlogit, flogit, scale, gn)
                if fn <= f + 1e-4 * step * slope:
                    break
                halvings += 1
                if halvings > 60:
                    break
                step *= 0.5
            if halvings > 60:
                break
            ys = 0.0
            yy = 0.0
            for i in range(3):
                s[i] = xn[i] - x[i]
                y[i] = gn[i] - g[i]
                ys += y[i] * s[i]
                yy += y[i] * y[i]
            it += 1
            if ys > 1e-12 * yy and yy > 0.0:
                if it == 1:
                    for r in range(3):
                        for c in range(3):
                            H[r][c] = (ys / yy) if r == c else 0.0
                rho = 1.0 / ys
                yHy = 0.0
                for r in range(3):
                    Hy[r] = 0.0
                    for c in range(3):
                        Hy[r] += H[r][c] * y[c]
                    yHy += y[r] * Hy[r]
                for r in range(3):
                    for c in range(3):
                        H[r][c] += (rho * rho * yHy + rho) * s[r] * s[c] \
                                   - rho * (Hy[r] * s[c] + s[r] * Hy[c])
            done = f - fn <= 1e-16 * (f if f > 0 else -f)
            for i in range(3):
                x[i] = xn[i]
                g[i] = gn[i]
            f = fn
            if done:
                break
    out = np.empty(3, dtype=np.float64)
    for i in range(3):
        out[i] = x[i]
    return out, it
