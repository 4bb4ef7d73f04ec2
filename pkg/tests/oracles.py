"""Independent reference implementations used only by the tests.

Everything here is deliberately written the slow, obvious way so the
fast library code has something honest to be checked against.
"""

import numpy as np
from scipy.integrate import dblquad
from scipy.special import gammaln


def log_marginal_quad(y, mu, sigma, logc=0.0):
    """Log of the count marginal for d=2 by adaptive quadrature.

    Integrates Poisson(y | exp(logc + x)) N(x | mu, sigma) over the
    plane on a box wide enough to hold both the prior mass and the
    likelihood peak.  Returns (log value, relative error estimate).
    """
    y = np.asarray(y, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if y.shape != (2,) or mu.shape != (2,) or sigma.shape != (2, 2):
        raise ValueError("quadrature oracle is d=2 only")
    sig_inv = np.linalg.inv(sigma)
    _, logdet = np.linalg.slogdet(sigma)
    lgy = gammaln(y + 1.0).sum()

    def log_f(x1, x2):
        x = np.array([x1, x2])
        lam = logc + x
        pois = y @ lam - np.exp(lam).sum() - lgy
        dx = x - mu
        gauss = -0.5 * dx @ sig_inv @ dx - 0.5 * logdet - np.log(2.0 * np.pi)
        return pois + gauss

    sd = np.sqrt(np.diag(sigma))
    like_mode = np.log(y + 0.5) - logc
    lo = np.minimum(mu - 8.0 * sd, like_mode - 6.0)
    hi = np.maximum(mu + 8.0 * sd, like_mode + 6.0)
    grid1 = np.linspace(lo[0], hi[0], 61)
    grid2 = np.linspace(lo[1], hi[1], 61)
    shift = max(log_f(a, b) for a in grid1 for b in grid2)
    val, abserr = dblquad(
        lambda x2, x1: np.exp(log_f(x1, x2) - shift),
        lo[0],
        hi[0],
        lo[1],
        hi[1],
        epsabs=1e-13,
        epsrel=1e-11,
    )
    if val <= 0:
        raise ValueError("quadrature returned a nonpositive mass")
    return shift + np.log(val), abserr / val


def ari_pair_counting(a, b):
    """Adjusted Rand index from explicit pair comparisons, O(n^2)."""
    a = np.asarray(a)
    b = np.asarray(b)
    n = a.shape[0]
    both = 0  # together in both partitions
    a_only = 0
    b_only = 0
    neither = 0
    for i in range(n):
        for j in range(i + 1, n):
            sa = a[i] == a[j]
            sb = b[i] == b[j]
            if sa and sb:
                both += 1
            elif sa:
                a_only += 1
            elif sb:
                b_only += 1
            else:
                neither += 1
    num = 2.0 * (both * neither - a_only * b_only)
    den = (both + a_only) * (a_only + neither) + (both + b_only) * (b_only + neither)
    if den == 0:
        return 1.0
    return num / den


def fd_grad(fun, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return g


def aggregated_stage2_objective(lam, psi, w, s_bar_full, n_g):
    """Loading/variance-dependent part of the summed factorized bound.

    Written per component with fresh beta/theta, the slow way, for
    checking the inner loop's sweeps.
    """
    g, d, k = lam.shape
    total = 0.0
    for j in range(g):
        q = np.linalg.inv(np.eye(k) + (lam[j] / psi[j][:, None]).T @ lam[j])
        beta = q @ (lam[j] / psi[j][:, None]).T
        theta = q + beta @ w[j] @ beta.T
        cross = lam[j] @ beta @ w[j]
        quad = w[j] - cross - cross.T + lam[j] @ theta @ lam[j].T
        val = (
            -0.5 * np.log(psi[j]).sum()
            - 0.5 * np.trace((quad + s_bar_full[j]) / psi[j][:, None])
            + 0.5 * np.linalg.slogdet(q)[1]
            - 0.5 * np.trace(q)
            - 0.5 * np.trace(beta @ w[j] @ beta.T)
        )
        total += n_g[j] * val
    return total


def random_spd(rng, d, scale=1.0):
    """A random symmetric positive definite matrix."""
    a = rng.standard_normal((d, d))
    return scale * (a @ a.T) + (0.1 + 0.9 * rng.random()) * np.eye(d)


def random_loadings_psi(rng, d, k):
    """Loadings and error variances in the ranges the presets use."""
    lam = rng.uniform(-1.0, 1.0, size=(d, k))
    psi = rng.uniform(0.25, 1.0, size=d)
    return lam, psi
