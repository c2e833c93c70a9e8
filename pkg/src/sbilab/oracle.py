"""Reference posteriors for the benchmark models.

For ma2 and gk the summaries are asymptotically Gaussian with closed-form
moment maps, which yields a tractable "oracle" posterior over the
parameters given observed summaries. The toy model has an exact conjugate
posterior. Oracle draws come from an adaptive tempered SMC sampler (safe
under bimodality) or from random-walk MCMC for unimodal targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, ndtri

from . import models
from .rng import standard_normal, uniform_open

__all__ = [
    "ma2_acf",
    "ma2_moments",
    "gk_order_stat_moments",
    "GaussianSummaryLikelihood",
    "make_summary_likelihood",
    "oracle_log_posterior",
    "toy_posterior_sample",
    "SMCConfig",
    "TemperingSchedule",
    "tempered_smc",
    "oracle_sample",
]

_LOG2PI = np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# MA(2) summary moments


def ma2_acf(thetas) -> np.ndarray:
    """Theoretical autocovariances (lags 0..2) of the MA(2) process.

    Accepts (2,) or (m, 2); returns matching (3,) or (m, 3).
    """
    arr = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    t1, t2 = arr[:, 0], arr[:, 1]
    out = np.stack([1.0 + t1 * t1 + t2 * t2, t1 * (1.0 + t2), t2], axis=1)
    return out[0] if np.asarray(thetas).ndim == 1 else out


def ma2_moments(thetas, n: int):
    """Asymptotic mean and covariance of the MA(2) autocovariance summaries.

    The covariance truncates the autocovariance products at lag 2, which
    is exact for an MA(2) process:

        n * Cov(d_k1, d_k2) = sum_{h=-2..2} g_h g_{h+k1-k2}
                              + sum_{i=-2..2} g_{k1+i} g_{k2-i}

    with g_h the lag-|h| theoretical autocovariance, zero beyond lag 2.

    Parameters
    ----------
    thetas : array_like, shape (2,) or (m, 2)
        Points inside the prior support.
    n : int
        Series length.

    Returns
    -------
    (mean, cov) with shapes ((3,), (3, 3)) or ((m, 3), (m, 3, 3)).
    """
    single = np.asarray(thetas).ndim == 1
    arr = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    spec = models.make_spec("ma2", max(int(n), 3))
    if not bool(models.in_support(spec, arr).all()):
        raise ValueError("theta outside the ma2 prior support")
    if n < 3:
        raise ValueError("n must be >= 3")
    mean = np.atleast_2d(ma2_acf(arr))
    m = arr.shape[0]
    # gamma[h] for |h| <= 4 with padding so g_{k1+i} stays in range
    gam = np.zeros((m, 9))
    for lag in (0, 1, 2):
        gam[:, 4 + lag] = mean[:, lag]
        gam[:, 4 - lag] = mean[:, lag]
    cov = np.zeros((m, 3, 3))
    for k1 in range(3):
        for k2 in range(3):
            acc = np.zeros(m)
            for h in range(-2, 3):
                if abs(h + k1 - k2) <= 4:
                    acc += gam[:, 4 + h] * gam[:, 4 + h + k1 - k2]
            for i in range(-2, 3):
                acc += gam[:, 4 + k1 + i] * gam[:, 4 + k2 - i]
            cov[:, k1, k2] = acc / n
    return (mean[0], cov[0]) if single else (mean, cov)


# ---------------------------------------------------------------------------
# g-and-k order-statistic moments


def gk_order_stat_moments(thetas, probs, n: int):
    """Asymptotic mean and covariance of empirical g-and-k quantiles.

    Uses the classical order-statistic limit: for probability levels
    p_i with quantiles Q(p_i) and density f at those quantiles,

        Cov = (min(p_i, p_j) - p_i p_j) / (n f_i f_j),

    where f = phi(z(p)) / Q'(z(p)) through the quantile transform.

    Raises
    ------
    ValueError
        If the quantile derivative is non-positive at any level (the
        parameter would not define a valid distribution there).
    """
    single = np.asarray(thetas).ndim == 1
    arr = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if arr.shape[1] != 4:
        raise ValueError("gk theta must have 4 entries")
    # the map is defined wherever the quantile function is valid, which
    # is wider than the prior box (e.g. the A = g = k = 0 normal case)
    if (arr[:, 1] <= 0).any():
        raise ValueError("gk scale B must be positive")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or not ((probs > 0) & (probs < 1)).all():
        raise ValueError("probs must lie strictly inside (0, 1)")
    if np.any(np.diff(probs) <= 0):
        raise ValueError("probs must be strictly increasing")
    if n < 2:
        raise ValueError("n must be >= 2")
    z = ndtri(probs)
    phi = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    mean = models.gk_quantile(z, arr)
    dq = models.gk_quantile_deriv(z, arr)
    if np.any(dq <= 0):
        raise ValueError("non-positive quantile derivative; "
                         "theta does not define a valid density")
    dens = phi / dq
    pmat = np.minimum.outer(probs, probs) - np.outer(probs, probs)
    cov = pmat / (dens[:, :, None] * dens[:, None, :]) / n
    return (mean[0], cov[0]) if single else (mean, cov)


# ---------------------------------------------------------------------------
# Gaussian summary likelihood and oracle posterior


@dataclass
class GaussianSummaryLikelihood:
    """Summary likelihood S | theta ~ N(mean_fn(theta), cov_fn(theta)).

    cov_fn returns the covariance of the summary vector itself (sample
    size already folded in). A trace-scaled jitter keeps the Cholesky
    factorization alive near the support boundary.
    """

    mean_fn: object
    cov_fn: object
    dim: int
    jitter: float = 1e-10
    moments_fn: object = None  # optional (mean, cov) in one evaluation

    def log_density(self, s_obs, thetas) -> np.ndarray:
        arr = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        s = np.asarray(s_obs, dtype=np.float64).reshape(-1)
        if s.shape[0] != self.dim:
            raise ValueError(f"s_obs must have {self.dim} entries")
        if self.moments_fn is not None:
            mean, cov = self.moments_fn(arr)
            mean = np.atleast_2d(mean)
            cov = np.asarray(cov)
        else:
            mean = np.atleast_2d(self.mean_fn(arr))
            cov = np.asarray(self.cov_fn(arr))
        if cov.ndim == 2:
            cov = cov[None]
        scale = np.trace(cov, axis1=1, axis2=2) / self.dim
        cov = cov + (self.jitter * scale)[:, None, None] * np.eye(self.dim)
        try:
            fac = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as err:
            raise ValueError(
                "summary covariance not positive definite after jitter"
            ) from err
        resid = (s - mean)[:, :, None]
        white = np.linalg.solve(fac, resid)[:, :, 0]
        log_det = np.log(np.diagonal(fac, axis1=1, axis2=2)).sum(axis=1)
        return (-0.5 * (white * white).sum(axis=1) - log_det
                - 0.5 * self.dim * _LOG2PI)


def make_summary_likelihood(
        spec: models.ModelSpec,
        plugin_theta=None) -> GaussianSummaryLikelihood:
    """Oracle summary likelihood for ma2, gk, or toy specs.

    With plugin_theta set, the summary covariance is evaluated once at
    that point and reused for every parameter value; the default lets
    the covariance vary with the parameter.
    """
    if spec.name == "ma2":
        lik = GaussianSummaryLikelihood(
            mean_fn=lambda th: ma2_moments(th, spec.n)[0],
            cov_fn=lambda th: ma2_moments(th, spec.n)[1],
            dim=3,
            moments_fn=lambda th: ma2_moments(th, spec.n))
    elif spec.name == "gk":
        probs = models.OCTILES if spec.summary == "octiles" else models.HEXADECILES
        lik = GaussianSummaryLikelihood(
            mean_fn=lambda th: gk_order_stat_moments(th, probs, spec.n)[0],
            cov_fn=lambda th: gk_order_stat_moments(th, probs, spec.n)[1],
            dim=len(probs),
            moments_fn=lambda th: gk_order_stat_moments(th, probs, spec.n))
    elif spec.name == "toy":
        lik = GaussianSummaryLikelihood(
            mean_fn=lambda th: th.reshape(-1, 1),
            cov_fn=lambda th: np.full((th.shape[0], 1, 1), 1.0 / spec.n),
            dim=1)
    else:
        raise ValueError(f"no summary-likelihood oracle for model {spec.name!r}")
    if plugin_theta is not None:
        point = np.asarray(plugin_theta, dtype=np.float64).reshape(1, -1)
        cov0 = lik.cov_fn(point)[0]
        lik = GaussianSummaryLikelihood(
            mean_fn=lik.mean_fn,
            cov_fn=lambda th: np.broadcast_to(
                cov0, (th.shape[0],) + cov0.shape),
            dim=lik.dim)
    return lik


def oracle_log_posterior(spec: models.ModelSpec, s_obs):
    """Batched unnormalized oracle log posterior over parameters.

    Returns a callable mapping (m, d) parameter arrays to (m,) values of
    log prior + oracle log likelihood, -inf outside the prior support.
    """
    lik = make_summary_likelihood(spec)
    s = np.asarray(s_obs, dtype=np.float64).reshape(-1)

    def log_post(thetas):
        arr = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        out = models.log_prior(spec, arr)
        ok = np.isfinite(out)
        if ok.any():
            out[ok] += lik.log_density(s, arr[ok])
        return out

    return log_post


def toy_posterior_sample(s_obs, n: int, m: int, rng) -> np.ndarray:
    """Exact draws from the conjugate toy posterior, shape (m, 1)."""
    mean, var = models.toy_posterior_moments(s_obs, n)
    return mean + np.sqrt(var) * standard_normal(rng, (m, 1))


# ---------------------------------------------------------------------------
# Tempered sequential Monte Carlo


@dataclass
class SMCConfig:
    """Settings for tempered_smc."""

    n_particles: int = 4000
    ess_threshold: float = 0.5
    n_moves: int = 5
    max_stages: int = 1000


@dataclass
class TemperingSchedule:
    """Realized annealing ladder and the settings that produced it."""

    temperatures: list = field(default_factory=list)
    ess_threshold: float = 0.5
    n_particles: int = 0
    n_moves: int = 0

    @property
    def n_stages(self) -> int:
        return max(0, len(self.temperatures) - 1)


def _log_ess(log_w: np.ndarray) -> float:
    return 2.0 * logsumexp(log_w) - logsumexp(2.0 * log_w)


def _systematic_resample(weights: np.ndarray, rng) -> np.ndarray:
    n = weights.shape[0]
    positions = (rng.random() + np.arange(n)) / n
    return np.minimum(np.searchsorted(np.cumsum(weights), positions), n - 1)


def _next_temperature(loglik: np.ndarray, t: float, threshold: float) -> float:
    """Largest step whose conditional ESS stays at threshold * particles."""
    target = np.log(threshold * loglik.shape[0])

    def log_ess_at(dt):
        return _log_ess(dt * loglik)

    if log_ess_at(1.0 - t) >= target:
        return 1.0
    lo, hi = 0.0, 1.0 - t
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if log_ess_at(mid) >= target:
            lo = mid
        else:
            hi = mid
    return t + lo if t + lo < 1.0 else 1.0


def tempered_smc(log_prior, log_likelihood, sample_prior,
                 rng, config: SMCConfig | None = None):
    """Sample prior * exp(t * loglik) along an adaptive ladder t: 0 -> 1.

    Parameters
    ----------
    log_prior : callable
        Maps (m, d) parameter arrays to (m,) log prior values (-inf
        allowed outside the support).
    log_likelihood : callable
        Maps (m, d) arrays of in-support parameters to (m,) values.
    sample_prior : callable
        Maps (rng, size) to (size, d) prior draws.
    rng : numpy.random.Generator
    config : SMCConfig, optional

    Returns
    -------
    (draws, schedule)
        Equally-weighted draws of shape (n_particles, d) and the
        realized TemperingSchedule.

    Notes
    -----
    Each stage picks the next temperature by bisecting the conditional
    effective sample size to threshold * n_particles, resamples
    systematically, and applies n_moves random-walk Metropolis steps with
    a 2.38^2/d scaled empirical proposal covariance. Multimodal targets
    are handled by the tempering; the ladder always ends exactly at 1.
    """
    cfg = config or SMCConfig()
    if cfg.n_particles < 2:
        raise ValueError("need at least 2 particles")
    if not 0.0 < cfg.ess_threshold < 1.0:
        raise ValueError("ess_threshold must be in (0, 1)")
    parts = np.asarray(sample_prior(rng, cfg.n_particles), dtype=np.float64)
    if parts.ndim != 2 or parts.shape[0] != cfg.n_particles:
        raise ValueError("sample_prior must return (n_particles, d) draws")
    dim = parts.shape[1]
    lp = np.asarray(log_prior(parts), dtype=np.float64)
    if not np.isfinite(lp).all():
        raise ValueError("prior sampler produced out-of-support draws")
    ll = np.asarray(log_likelihood(parts), dtype=np.float64)
    if not np.isfinite(ll).all():
        raise ValueError("non-finite log likelihood at prior draws")

    schedule = TemperingSchedule([0.0], cfg.ess_threshold,
                                 cfg.n_particles, cfg.n_moves)

    def move_sweep(t_now: float) -> None:
        nonlocal parts, lp, ll
        cov = np.atleast_2d(np.cov(parts.T)) + 1e-12 * np.eye(dim)
        fac = np.linalg.cholesky(2.38**2 / dim * cov)
        for _ in range(cfg.n_moves):
            prop = parts + standard_normal(rng, (cfg.n_particles, dim)) @ fac.T
            lp_prop = np.asarray(log_prior(prop), dtype=np.float64)
            ok = np.isfinite(lp_prop)
            ll_prop = np.full(cfg.n_particles, -np.inf)
            if ok.any():
                ll_prop[ok] = log_likelihood(prop[ok])
            log_alpha = (lp_prop + t_now * ll_prop) - (lp + t_now * ll)
            accept = np.log(uniform_open(rng, cfg.n_particles)) < log_alpha
            parts[accept] = prop[accept]
            lp[accept] = lp_prop[accept]
            ll[accept] = ll_prop[accept]

    t = 0.0
    while t < 1.0:
        if schedule.n_stages >= cfg.max_stages:
            raise RuntimeError(
                f"tempering ladder exceeded {cfg.max_stages} stages")
        t_new = _next_temperature(ll, t, cfg.ess_threshold)
        log_w = (t_new - t) * ll
        log_w -= logsumexp(log_w)
        idx = _systematic_resample(np.exp(log_w), rng)
        parts, lp, ll = parts[idx], lp[idx], ll[idx]
        move_sweep(t_new)
        t = t_new
        schedule.temperatures.append(t)

    # resampled ancestors that rejected every move leave tied rows,
    # which poison nearest-neighbor KLD estimates; extra sweeps at
    # temperature 1 separate them without changing the target
    for _ in range(50):
        if np.unique(parts, axis=0).shape[0] == cfg.n_particles:
            break
        move_sweep(1.0)
    return parts, schedule


# ---------------------------------------------------------------------------
# Oracle draw dispatch


def oracle_sample(spec: models.ModelSpec, s_obs, m: int, rng,
                  method: str = "auto",
                  smc_config: SMCConfig | None = None) -> np.ndarray:
    """Draws from the oracle posterior for the given observed summaries.

    method "auto" picks the exact conjugate law for toy and tempered SMC
    for ma2 (whose partial posterior can be bimodal) and gk; "rwm" runs
    a thinned random-walk chain instead. The stereo model has no
    tractable oracle and raises.

    Returns an (m, d) array of draws.
    """
    if spec.name == "stereo":
        raise ValueError("the stereo model has no oracle posterior")
    if method == "auto":
        method = {"toy": "exact", "ma2": "smc", "gk": "smc"}[spec.name]
    if spec.name == "toy" and method == "exact":
        return toy_posterior_sample(s_obs, spec.n, m, rng)

    log_post = oracle_log_posterior(spec, s_obs)
    if method == "smc":
        cfg = smc_config or SMCConfig(n_particles=max(m, 1000))
        lik = make_summary_likelihood(spec)
        s = np.asarray(s_obs, dtype=np.float64).reshape(-1)
        draws, _ = tempered_smc(
            lambda th: models.log_prior(spec, th),
            lambda th: lik.log_density(s, th),
            lambda r, size: models.prior_sample(spec, r, size),
            rng, cfg)
        if draws.shape[0] < m:
            raise ValueError(
                "smc_config.n_particles must be >= m; tiling draws would "
                "duplicate rows and bias neighbor-based divergences")
        return draws[:m]
    if method == "rwm":
        # local import: inference builds on cde, not on this module
        from .inference import MCMCConfig, rwm_sample

        init = models.prior_sample(spec, rng, 64)
        vals = log_post(init)
        if not np.isfinite(vals).any():
            raise ValueError("could not initialise oracle MCMC")
        start = init[int(np.argmax(vals))]
        cfg = MCMCConfig()
        # thin so kept draws are almost never tied rejection repeats
        thin = max(1, int(np.ceil(np.log(4.0 * m)
                                  / -np.log1p(-cfg.target_accept))))
        cfg.n_steps = int(np.ceil(thin * m / (1.0 - cfg.burn_fraction))) + 1000
        ds = rwm_sample(lambda th: float(log_post(th[None])[0]),
                        start, rng, cfg)
        return ds.draws[-thin * m::thin]
    raise ValueError(f"unknown oracle method {method!r}")
