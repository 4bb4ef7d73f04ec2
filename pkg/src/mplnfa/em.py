"""Two-stage fitting driver and model selection.

A fit alternates a first stage (responsibilities, variational means
and covariances, mixing proportions, component means) with a second
stage (loadings and error variances under the requested constraint
pattern).  The per-iteration objective is the responsibility-marginal
total bound sum_i log sum_g pi_g exp(f_ig); every first-stage step
either maximizes it exactly over its block or is guarded by step
halving, so the recorded trace is non-decreasing up to tiny slack.

The grid search fans out over (G, K, model) triples with a thread
pool.  Each triple's fit is a pure function of the data and the
configuration, so results are identical for any worker count.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from threading import Lock

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .core import (
    ALL_MODELS,
    ComponentParams,
    CountMatrix,
    EmptyComponentError,
    InputError,
    MixtureModel,
    ModelId,
    NormalizationFactors,
    NumericalError,
    VariationalState,
    total_free_params,
)
from . import stage1, stage2

__all__ = [
    "FitConfig",
    "FitResult",
    "GridEntry",
    "GridSearchResult",
    "initialize",
    "fit_single",
    "bic",
    "icl",
    "grid_search",
]

# Initial mixing proportions are floored at 1 / (INIT_PI_FLOOR_SCALE * n).
INIT_PI_FLOOR_SCALE = 10
# Floor applied to initial error variances.
INIT_PSI_FLOOR = 0.05
# Initial variational covariance scale (S = INIT_S_SCALE * I).
INIT_S_SCALE = 0.1
# Reseeding attempts when a k-means start produces an empty cluster.
KMEANS_RESEEDS = 10


@dataclass(frozen=True)
class FitConfig:
    """Search space and optimizer settings.

    All statistically relevant settings live here; execution settings
    (worker counts) are passed separately so a config fully determines
    the result.
    """

    g_range: tuple = (1, 3)
    k_range: tuple = (1, 2)
    models: tuple = ALL_MODELS
    n_starts: int = 3
    max_outer: int = 1000
    tol_outer: float = 1e-5
    seed: int = 0
    e_step_sweeps: int = 1
    em_restarts: int = 1

    def __post_init__(self):
        g_lo, g_hi = (int(self.g_range[0]), int(self.g_range[1]))
        k_lo, k_hi = (int(self.k_range[0]), int(self.k_range[1]))
        if g_lo < 1 or g_hi < g_lo:
            raise InputError(f"invalid component range {self.g_range}")
        if k_lo < 1 or k_hi < k_lo:
            raise InputError(f"invalid factor range {self.k_range}")
        object.__setattr__(self, "g_range", (g_lo, g_hi))
        object.__setattr__(self, "k_range", (k_lo, k_hi))
        models = tuple(self.models)
        if not models or not all(isinstance(m, ModelId) for m in models):
            raise InputError("models must be a non-empty tuple of ModelId")
        if len(set(models)) != len(models):
            raise InputError("models must be distinct")
        object.__setattr__(self, "models", models)
        for name in ("n_starts", "max_outer", "e_step_sweeps", "em_restarts"):
            v = int(getattr(self, name))
            if v < 1:
                raise InputError(f"{name} must be at least 1")
            object.__setattr__(self, name, v)
        if not (float(self.tol_outer) > 0):
            raise InputError("tol_outer must be positive")
        object.__setattr__(self, "tol_outer", float(self.tol_outer))
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class FitResult:
    """Outcome of one (G, K, model) fit."""

    g: int
    k: int
    model_id: ModelId
    model: MixtureModel
    state: VariationalState
    elbo_trace: np.ndarray
    loglik_approx: float
    free_params: int
    bic: float
    icl: float
    assignments: np.ndarray
    converged: bool
    n_iter: int
    diagnostics: dict


@dataclass(frozen=True)
class GridEntry:
    """Lightweight per-triple summary kept for every grid cell."""

    g: int
    k: int
    model_id: ModelId
    bic: float
    icl: float
    loglik: float
    free_params: int
    converged: bool
    degenerate: bool
    n_iter: int
    error: str
    elbo_trace: tuple


@dataclass(frozen=True)
class GridSearchResult:
    """Best fit by BIC plus summaries of the whole grid."""

    best: FitResult
    best_icl: GridEntry
    entries: tuple


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def _assign_labels(x, centers):
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return d2.argmin(axis=1)


def _kmeans(x, g, rng, n_starts, max_iter=200):
    """Plain Lloyd iterations from random data-point seedings.

    Keeps the labels with the lowest within-cluster sum of squares
    over `n_starts` seedings.  A seeding whose clusters empty out is
    redrawn up to `KMEANS_RESEEDS` times before failing.
    """
    n, d = x.shape
    if g > n:
        raise InputError(f"cannot form {g} clusters from {n} samples")
    best_labels, best_wcss = None, np.inf
    for _ in range(n_starts):
        labels = None
        centers = None
        for _attempt in range(KMEANS_RESEEDS):
            centers = x[rng.choice(n, size=g, replace=False)]
            lab = _assign_labels(x, centers)
            ok = True
            for _it in range(max_iter):
                counts = np.bincount(lab, minlength=g)
                if np.any(counts == 0):
                    ok = False
                    break
                centers = np.zeros((g, d))
                np.add.at(centers, lab, x)
                centers /= counts[:, None]
                new_lab = _assign_labels(x, centers)
                if np.array_equal(new_lab, lab):
                    break
                lab = new_lab
            if ok:
                labels = lab
                break
        if labels is None:
            raise NumericalError(
                f"k-means produced an empty cluster in {KMEANS_RESEEDS} consecutive seedings"
            )
        wcss = ((x - centers[labels]) ** 2).sum()
        if wcss < best_wcss:
            best_wcss, best_labels = wcss, labels
    return best_labels


def _eigen_loadings(w, k):
    """Top-k eigenvectors of a scatter matrix scaled by sqrt(eigenvalues)."""
    vals, vecs = np.linalg.eigh(0.5 * (w + w.T))
    vals = np.clip(vals[::-1][:k], 0.0, None)
    vecs = vecs[:, ::-1][:, :k]
    return vecs * np.sqrt(vals)[None, :]


def _init_params(x, labels, g, k, model_id):
    """Cluster-wise eigen-initialization honouring the constraint pattern."""
    n, d = x.shape
    counts = np.bincount(labels, minlength=g).astype(np.float64)
    if np.any(counts == 0):
        raise NumericalError("initialization received an empty cluster")
    mu = np.zeros((g, d))
    np.add.at(mu, labels, x)
    mu /= counts[:, None]
    v = x - mu[labels]
    scatter = np.zeros((g, d, d))
    for j in range(g):
        vj = v[labels == j]
        scatter[j] = vj.T @ vj / counts[j]

    if model_id.lambda_constrained:
        pooled = np.einsum("g,gde->de", counts / n, scatter)
        lam = np.broadcast_to(_eigen_loadings(pooled, k), (g, d, k)).copy()
    else:
        lam = np.stack([_eigen_loadings(scatter[j], k) for j in range(g)])

    idx = np.arange(d)
    psi_raw = scatter[:, idx, idx] - np.einsum("gdk,gdk->gd", lam, lam)
    psi = stage2._psi_pattern(model_id, psi_raw, counts)
    psi = np.maximum(psi, INIT_PSI_FLOOR)

    pi = counts / n
    pi = np.maximum(pi, 1.0 / (INIT_PI_FLOOR_SCALE * n))
    pi = pi / pi.sum()
    return pi, mu, lam, psi


def _transformed(y, logc):
    """Per-sample log counts net of exposure, log(y + 1) - log C_i."""
    return np.log1p(y) - logc[:, None]


def _check_pair(data, factors):
    if not isinstance(data, CountMatrix):
        raise InputError("data must be a CountMatrix")
    if not isinstance(factors, NormalizationFactors):
        raise InputError("factors must be NormalizationFactors")
    if factors.n != data.n:
        raise InputError(
            f"normalization factors length {factors.n} does not match sample count {data.n}"
        )


def initialize(data, factors, g, k, seed, n_starts=3, model_id=None):
    """Deterministic starting point for a fit.

    Clusters log-transformed counts with k-means, then builds component
    parameters by per-cluster eigen-decomposition and a variational
    state centred on the transformed data.  The same arguments always
    produce bitwise-identical output.

    Returns (MixtureModel, VariationalState).
    """
    _check_pair(data, factors)
    if model_id is None:
        model_id = ModelId.from_string("UUU")
    g, k = int(g), int(k)
    if g < 1:
        raise InputError("G must be at least 1")
    if not (1 <= k <= data.d):
        raise InputError(f"K must be in [1, {data.d}], got {k}")
    y = data.values.astype(np.float64)
    logc = np.log(factors.c)
    x = _transformed(y, logc)
    rng = np.random.default_rng([seed, g])
    labels = _kmeans(x, g, rng, n_starts)
    return _state_from_labels(y, logc, x, labels, g, k, model_id)


def _state_from_labels(y, logc, x, labels, g, k, model_id):
    n, d = y.shape
    pi, mu, lam, psi = _init_params(x, labels, g, k, model_id)
    m = np.repeat(x[:, None, :], g, axis=1)
    s = np.broadcast_to(INIT_S_SCALE * np.eye(d), (n, g, d, d)).copy()
    zhat = np.zeros((n, g))
    zhat[np.arange(n), labels] = 1.0

    sig_inv, sig_logdet = _sigma_from(lam, psi)
    caches = _make_caches(y, logc, m, s, mu, sig_inv, sig_logdet)
    f = _assemble_f(caches, sig_logdet, d)

    beta = stage2._beta_from(lam, psi)
    p = np.einsum("gkd,ngd->ngk", beta, m - mu[None])
    q = _q_from(lam, psi)

    model = _build_model(g, k, model_id, pi, mu, lam, psi)
    state = VariationalState(m=m, s=s, p=p, q=q, zhat=zhat, f=f)
    return model, state


def _build_model(g, k, model_id, pi, mu, lam, psi):
    comps = tuple(
        ComponentParams(pi=float(pi[j]), mu=mu[j], lam=lam[j], psi=psi[j]) for j in range(g)
    )
    return MixtureModel(g=g, k=k, model_id=model_id, components=comps)


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


def bic(loglik, free_params, n):
    """Penalized score -2 loglik + free_params log n; smaller is better."""
    loglik = float(loglik)
    free_params = int(free_params)
    n = int(n)
    if n < 1 or free_params < 1:
        raise InputError("free_params and n must be positive")
    if not np.isfinite(loglik):
        raise InputError("loglik must be finite")
    return -2.0 * loglik + free_params * np.log(n)


def icl(bic_value, zhat):
    """BIC plus twice the responsibility entropy; smaller is better."""
    bic_value = float(bic_value)
    zhat = np.asarray(zhat, dtype=np.float64)
    if zhat.ndim != 2:
        raise InputError("zhat must be an (n, G) matrix")
    if np.any(zhat < 0) or np.any(np.abs(zhat.sum(axis=1) - 1.0) > 1e-8):
        raise InputError("zhat rows must be probability vectors")
    ent = -xlogy(zhat, zhat).sum()
    return bic_value + 2.0 * ent


# ---------------------------------------------------------------------------
# the outer loop
# ---------------------------------------------------------------------------


def _sigma_from(lam, psi):
    d = lam.shape[1]
    sig = np.einsum("gdk,gek->gde", lam, lam)
    sig[:, np.arange(d), np.arange(d)] += psi
    return stage1._sigma_factors(sig)


def _q_from(lam, psi):
    k = lam.shape[2]
    a = np.eye(k)[None] + np.einsum("gdk,gdl->gkl", lam / psi[..., None], lam)
    q = np.linalg.inv(a)
    return 0.5 * (q + q.transpose(0, 2, 1))


def _make_caches(y, logc, m, s, mu, sig_inv, sig_logdet):
    """Bound pieces reused across steps within an outer iteration."""
    n, g, d = m.shape
    idx = np.arange(d)
    s_diag = s[:, :, idx, idx]
    rate, clamps = stage1._rates_batch(logc, m, s_diag)
    sign, logdet_s = np.linalg.slogdet(s)
    return {
        "rate": rate,
        "expsum": rate.sum(-1),
        "quad": stage1._quad_batch(m, mu, sig_inv),
        "trs": stage1._trace_batch(sig_inv, s),
        "logdet_s": logdet_s,
        "my": np.einsum("ngd,nd->ng", m, y),
        "pois_const": logc * y.sum(1) - gammaln(y + 1.0).sum(1),
        "clamps": clamps,
    }


def _assemble_f(caches, sig_logdet, d):
    return (
        -0.5 * caches["quad"]
        - 0.5 * caches["trs"]
        + 0.5 * caches["logdet_s"]
        - 0.5 * sig_logdet[None, :]
        + 0.5 * d
        + caches["my"]
        + caches["pois_const"][:, None]
        - caches["expsum"]
    )


def _total_elbo(pi, f):
    return float(logsumexp(np.log(pi)[None, :] + f, axis=1).sum())


def _sigma_bound_part(sig_inv, sig_logdet, a_bar, n_g):
    """Sigma-dependent terms of the responsibility-weighted bound.

    a_bar holds, per component, the weighted mean of
    (m - mu)(m - mu)' + S over observations.
    """
    tr = np.einsum("gde,gde->g", sig_inv, a_bar)
    return float(-0.5 * np.dot(n_g, tr + sig_logdet))


def _guarded_sigma_step(model_id, zhat, s, stats, s_bar, lam, psi, sig_inv, sig_logdet):
    """Run the covariance inner loop, accepting only bound-ascending steps.

    The inner loop maximizes the factorized objective, which near a fixed
    point can disagree with the traced bound by more than the convergence
    slack.  Candidates are halved toward the previous (lam, psi) until the
    sigma-dependent bound terms stop decreasing; the previous values win if
    every step fails.  Returns the accepted values, their sigma factors,
    the inner-loop info dict, and guard counters.
    """
    n_g = stats.n_g
    a_bar = stats.w + np.einsum("ng,ngde->gde", zhat, s) / n_g[:, None, None]
    j_old = _sigma_bound_part(sig_inv, sig_logdet, a_bar, n_g)
    slack = 1e-9 * max(1.0, abs(j_old))

    lam_new, psi_new, info = stage2.run_inner_loop(model_id, stats, s_bar, lam, psi)
    backtracks = 0
    rejected = False
    eta = 1.0
    lam_cand, psi_cand = lam_new, psi_new
    for _ in range(stage1.MAX_HALVINGS):
        cand_inv, cand_logdet = _sigma_from(lam_cand, psi_cand)
        if _sigma_bound_part(cand_inv, cand_logdet, a_bar, n_g) >= j_old - slack:
            return lam_cand, psi_cand, cand_inv, cand_logdet, info, backtracks, rejected
        backtracks += 1
        eta *= 0.5
        # convex combinations keep tied rows tied and psi above its floor
        lam_cand = lam + eta * (lam_new - lam)
        psi_cand = psi + eta * (psi_new - psi)
    rejected = True
    return lam, psi, sig_inv, sig_logdet, info, backtracks, rejected


def _run_em(y, logc, x, labels, g, k, model_id, config):
    """Alternate the two stages from a label-based start to convergence."""
    n, d = y.shape
    idx = np.arange(d)
    pi, mu, lam, psi = _init_params(x, labels, g, k, model_id)
    m = np.repeat(x[:, None, :], g, axis=1)
    s = np.broadcast_to(INIT_S_SCALE * np.eye(d), (n, g, d, d)).copy()

    sig_inv, sig_logdet = _sigma_from(lam, psi)
    caches = _make_caches(y, logc, m, s, mu, sig_inv, sig_logdet)
    f = _assemble_f(caches, sig_logdet, d)
    trace = [_total_elbo(pi, f)]

    diag = {
        "exp_clamped": caches["clamps"],
        "s_guard_backtracks": 0,
        "m_guard_backtracks": 0,
        "sigma_guard_backtracks": 0,
        "sigma_guard_rejects": 0,
        "psi_floored": 0,
        "stage2_nonconverged_iters": 0,
        "stage2_sweeps_last": 0,
        "degenerate": False,
        "empty_component_iteration": None,
    }
    zhat = None
    converged = False
    n_iter = 0

    for t in range(1, config.max_outer + 1):
        n_iter = t
        zhat = stage1.update_responsibilities(f, pi)
        n_g = zhat.sum(axis=0)
        if np.any(n_g < stage1.EMPTY_TOL):
            diag["degenerate"] = True
            diag["empty_component_iteration"] = t
            break

        for _sweep in range(config.e_step_sweeps):
            (s, caches["trs"], caches["logdet_s"], caches["rate"], caches["expsum"],
             cl, nb) = stage1._update_s_guarded(
                sig_inv, logc, m, s, caches["trs"], caches["logdet_s"], caches["expsum"]
            )
            diag["exp_clamped"] += cl
            diag["s_guard_backtracks"] += nb
            (m, caches["rate"], caches["expsum"], caches["quad"], caches["my"],
             cl, nb) = stage1._update_m_guarded(
                y, logc, sig_inv, mu, m, s, caches["rate"], caches["quad"]
            )
            diag["exp_clamped"] += cl
            diag["m_guard_backtracks"] += nb

        pi, mu = stage1.update_pi_mu(zhat, m)

        stats = stage2.make_stage2_stats(zhat, m, mu, lam, psi)
        s_bar = np.einsum("ng,ngd->gd", zhat, s[:, :, idx, idx]) / n_g[:, None]
        lam, psi, sig_inv, sig_logdet, info, nb, rej = _guarded_sigma_step(
            model_id, zhat, s, stats, s_bar, lam, psi, sig_inv, sig_logdet
        )
        diag["psi_floored"] += info["psi_floored"]
        diag["stage2_sweeps_last"] = info["sweeps"]
        diag["sigma_guard_backtracks"] += nb
        diag["sigma_guard_rejects"] += int(rej)
        if not info["converged"]:
            diag["stage2_nonconverged_iters"] += 1

        caches["quad"] = stage1._quad_batch(m, mu, sig_inv)
        caches["trs"] = stage1._trace_batch(sig_inv, s)
        f = _assemble_f(caches, sig_logdet, d)
        trace.append(_total_elbo(pi, f))
        if abs(trace[-1] - trace[-2]) <= config.tol_outer * abs(trace[-2]):
            converged = True
            break

    if not diag["degenerate"]:
        zhat = stage1.update_responsibilities(f, pi)
        if np.any(zhat.sum(axis=0) < stage1.EMPTY_TOL):
            diag["degenerate"] = True
            diag["empty_component_iteration"] = n_iter

    beta = stage2._beta_from(lam, psi)
    p = np.einsum("gkd,ngd->ngk", beta, m - mu[None])
    q = _q_from(lam, psi)
    model = _build_model(g, k, model_id, pi, mu, lam, psi)
    state = VariationalState(m=m, s=s, p=p, q=q, zhat=zhat, f=f)

    loglik = trace[-1]
    rho = total_free_params(model_id, d, k, g)
    bic_val = bic(loglik, rho, n)
    icl_val = icl(bic_val, zhat)
    return FitResult(
        g=g,
        k=k,
        model_id=model_id,
        model=model,
        state=state,
        elbo_trace=np.asarray(trace),
        loglik_approx=loglik,
        free_params=rho,
        bic=bic_val,
        icl=icl_val,
        assignments=np.argmax(zhat, axis=1),
        converged=converged,
        n_iter=n_iter,
        diagnostics=diag,
    )


def fit_single(data, factors, g, k, model_id, config):
    """Fit one (G, K, model) triple.

    Runs `config.em_restarts` independently seeded starts and keeps
    the one with the highest final bound (restart 0 reproduces the
    single-start behaviour exactly).
    """
    _check_pair(data, factors)
    g, k = int(g), int(k)
    if not isinstance(model_id, ModelId):
        raise InputError("model_id must be a ModelId")
    if g < 1 or g > data.n:
        raise InputError(f"G must be in [1, {data.n}], got {g}")
    if not (1 <= k <= data.d):
        raise InputError(f"K must be in [1, {data.d}], got {k}")
    y = data.values.astype(np.float64)
    logc = np.log(factors.c)
    x = _transformed(y, logc)

    best = None
    for r in range(config.em_restarts):
        entropy = [config.seed, g] if r == 0 else [config.seed, r, g]
        labels = _kmeans(x, g, np.random.default_rng(entropy), config.n_starts)
        result = _run_em(y, logc, x, labels, g, k, model_id, config)
        if best is None or result.loglik_approx > best.loglik_approx:
            best = result
    return best


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


def _resolve_threads(threads):
    if threads is None:
        env = os.environ.get("MPLNFA_THREADS", "").strip()
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise InputError(f"MPLNFA_THREADS must be an integer, got {env!r}") from None
        else:
            threads = os.cpu_count() or 1
    threads = int(threads)
    if threads < 1:
        raise InputError("thread count must be at least 1")
    return min(threads, 64)


def grid_search(data, factors, config, threads=None):
    """Fit every (G, K, model) triple and select by BIC.

    Failed or degenerate triples are recorded in the summaries and
    excluded from selection.  The returned entries follow the triple
    order sorted by (G, K, model position); the selected fit is the
    BIC argmin with ties broken by that order, independent of worker
    scheduling.
    """
    _check_pair(data, factors)
    if not isinstance(config, FitConfig):
        raise InputError("config must be a FitConfig")
    g_lo, g_hi = config.g_range
    k_lo, k_hi = config.k_range
    if k_hi > data.d:
        raise InputError(f"k_range upper bound {k_hi} exceeds dimension {data.d}")
    if g_hi > data.n:
        raise InputError(f"g_range upper bound {g_hi} exceeds sample count {data.n}")
    threads = _resolve_threads(threads)

    y = data.values.astype(np.float64)
    logc = np.log(factors.c)
    x = _transformed(y, logc)
    labels_by_g = {
        g: _kmeans(x, g, np.random.default_rng([config.seed, g]), config.n_starts)
        for g in range(g_lo, g_hi + 1)
    }
    triples = [
        (g, k, model)
        for g in range(g_lo, g_hi + 1)
        for k in range(k_lo, k_hi + 1)
        for model in config.models
    ]

    results = {}
    best = {"key": None, "fit": None}
    lock = Lock()

    def _one(index, g, k, model):
        try:
            fit = _run_em(y, logc, x, labels_by_g[g], g, k, model, config)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            entry = GridEntry(
                g=g, k=k, model_id=model, bic=np.nan, icl=np.nan, loglik=np.nan,
                free_params=0, converged=False, degenerate=False, n_iter=0,
                error=str(exc), elbo_trace=(),
            )
            with lock:
                results[index] = entry
            return
        entry = GridEntry(
            g=g, k=k, model_id=model, bic=fit.bic, icl=fit.icl,
            loglik=fit.loglik_approx, free_params=fit.free_params,
            converged=fit.converged, degenerate=fit.diagnostics["degenerate"],
            n_iter=fit.n_iter, error="", elbo_trace=tuple(fit.elbo_trace),
        )
        with lock:
            results[index] = entry
            if not entry.degenerate and np.isfinite(entry.bic):
                key = (entry.bic, index)
                if best["key"] is None or key < best["key"]:
                    best["key"], best["fit"] = key, fit

    if threads == 1:
        for i, (g, k, model) in enumerate(triples):
            _one(i, g, k, model)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [
                pool.submit(_one, i, g, k, model) for i, (g, k, model) in enumerate(triples)
            ]
            for fut in futures:
                fut.result()

    entries = tuple(results[i] for i in range(len(triples)))
    if best["fit"] is None:
        raise NumericalError("every grid triple failed or degenerated; nothing to select")
    eligible = [
        (e.icl, i, e)
        for i, e in enumerate(entries)
        if not e.degenerate and e.error == "" and np.isfinite(e.icl)
    ]
    best_icl = min(eligible)[2]
    return GridSearchResult(best=best["fit"], best_icl=best_icl, entries=entries)
