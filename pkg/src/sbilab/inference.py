"""Simulation-based posterior inference drivers.

run_npe fits the parameter-given-summaries direction of the conditional
mixture on prior-predictive pairs and reads the posterior off at the
observed summaries (one shot, no refitting rounds). run_nle fits the
summaries-given-parameters direction and explores the induced synthetic
posterior with adaptive random-walk Metropolis. abc_smc is the classical
adaptive ABC sequential Monte Carlo baseline.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import cde, models
from .rng import standard_normal, uniform_open

__all__ = [
    "DrawSet",
    "save_draws",
    "load_draws",
    "MCMCConfig",
    "ABCSMCConfig",
    "accept_probability",
    "rwm_sample",
    "run_npe",
    "run_nle",
    "abc_smc",
]


@dataclass
class DrawSet:
    """Weighted posterior draws plus the provenance needed to replay them."""

    draws: np.ndarray
    weights: np.ndarray
    method: str
    config_hash: str = ""
    seed: int | str = ""
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.draws.shape[0] != self.weights.shape[0]:
            raise ValueError("draws and weights must have equal length")
        if self.draws.shape[0] == 0:
            raise ValueError("a draw set must not be empty")
        if (self.weights < 0).any() or self.weights.sum() <= 0:
            raise ValueError("weights must be non-negative with positive sum")

    def __len__(self) -> int:
        return self.draws.shape[0]


def save_draws(ds: DrawSet, csv_path) -> None:
    """Write draws and weights to CSV with a JSON provenance sidecar."""
    path = str(csv_path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        dim = ds.draws.shape[1]
        writer.writerow([f"x{i}" for i in range(dim)] + ["weight"])
        for row, weight in zip(ds.draws, ds.weights):
            writer.writerow([repr(float(v)) for v in row]
                            + [repr(float(weight))])
    sidecar = {"method": ds.method, "config_hash": ds.config_hash,
               "seed": ds.seed, "info": ds.info}
    with open(path + ".json", "w", encoding="utf-8") as handle:
        json.dump(sidecar, handle, indent=2, sort_keys=True, default=str)


def load_draws(csv_path) -> DrawSet:
    path = str(csv_path)
    with open(path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    body = np.asarray(rows[1:], dtype=np.float64)
    try:
        with open(path + ".json", encoding="utf-8") as handle:
            side = json.load(handle)
    except FileNotFoundError:
        side = {"method": "unknown", "config_hash": "", "seed": "", "info": {}}
    return DrawSet(body[:, :-1], body[:, -1], side["method"],
                   side.get("config_hash", ""), side.get("seed", ""),
                   side.get("info", {}))


# ---------------------------------------------------------------------------
# Random-walk Metropolis


@dataclass
class MCMCConfig:
    """Random-walk Metropolis settings.

    The proposal is a diagonal Gaussian; its global scale follows a
    Robbins-Monro recursion toward target_accept and its per-coordinate
    widths track the running sd of the chain, during burn-in only. After
    burn-in the proposal is frozen so the chain is exactly Markov.
    """

    n_steps: int = 15000
    burn_fraction: float = 1.0 / 3.0
    init_scale: float = 0.1
    target_accept: float = 0.234


def accept_probability(lp_current: float, lp_proposal: float) -> float:
    """Metropolis acceptance probability min(1, exp(lp_prop - lp_cur))."""
    if lp_proposal >= lp_current:
        return 1.0
    return math.exp(lp_proposal - lp_current)


def rwm_sample(log_target, init, rng,
               config: MCMCConfig | None = None) -> DrawSet:
    """Adaptive random-walk Metropolis chain.

    Parameters
    ----------
    log_target : callable
        Maps a (d,) point to a float log density (-inf outside support).
    init : array_like, shape (d,)
        Starting point with finite log target.
    rng : numpy.random.Generator
    config : MCMCConfig, optional

    Returns
    -------
    DrawSet
        The post-burn-in chain, uniform weights; info records the
        realized post-burn-in acceptance rate and final proposal scale.

    Raises
    ------
    ValueError
        If the initial log target is not finite or the config leaves no
        post-burn-in draws.
    RuntimeError
        If the post-burn-in acceptance rate falls below 1 percent.
    """
    cfg = config or MCMCConfig()
    theta = np.asarray(init, dtype=np.float64).reshape(-1).copy()
    dim = theta.shape[0]
    lp = float(log_target(theta))
    if not np.isfinite(lp):
        raise ValueError("log target must be finite at the initial point")
    n_burn = int(cfg.burn_fraction * cfg.n_steps)
    n_keep = cfg.n_steps - n_burn
    if n_keep < 1:
        raise ValueError("config leaves no post-burn-in draws")

    log_scale = np.log(cfg.init_scale)
    widths = np.ones(dim)
    # Welford accumulators for per-coordinate spread during burn-in
    count, mean, m2 = 0, np.zeros(dim), np.zeros(dim)

    draws = np.empty((n_keep, dim))
    accepted_post = 0
    # proposal noise and accept thresholds pre-generated in blocks;
    # long chains would otherwise pay per-step RNG call overhead
    block = 1 << 13
    pos = block
    step_sd = np.exp(log_scale) * widths
    for step in range(cfg.n_steps):
        if pos == block:
            eps_blk = standard_normal(rng, (block, dim))
            u_blk = uniform_open(rng, block)
            pos = 0
        adapt = step < n_burn
        prop = theta + step_sd * eps_blk[pos]
        lp_prop = log_target(prop)
        alpha = accept_probability(lp, lp_prop) if math.isfinite(lp_prop) else 0.0
        if u_blk[pos] < alpha:
            theta, lp = prop, lp_prop
            if not adapt:
                accepted_post += 1
        pos += 1
        if adapt:
            gain = (step + 1) ** -0.6
            log_scale += gain * (alpha - cfg.target_accept)
            count += 1
            delta = theta - mean
            mean += delta / count
            m2 += delta * (theta - mean)
            if count > 50:
                sd = np.sqrt(m2 / (count - 1))
                widths = np.where(sd > 0, sd, widths)
            step_sd = np.exp(log_scale) * widths
        else:
            draws[step - n_burn] = theta

    rate = accepted_post / n_keep
    if rate < 0.01:
        raise RuntimeError(
            f"degenerate target: post-burn-in acceptance rate {rate:.4f}")
    return DrawSet(draws, np.full(n_keep, 1.0 / n_keep), "rwm",
                   info={"acceptance_rate": rate,
                         "proposal_scale": float(np.exp(log_scale)),
                         "proposal_widths": widths.tolist()})


# ---------------------------------------------------------------------------
# One-shot neural posterior / likelihood estimation


def _truncated_mixture_draws(mixture, spec, s_obs, m, rng,
                             max_oversample):
    kept = []
    total_kept = 0
    drawn = 0
    while total_kept < m:
        if drawn >= max_oversample * m:
            raise RuntimeError(
                "posterior mass concentrates outside the prior support: "
                f"kept {total_kept} of {drawn} draws")
        batch = cde.sample(mixture, s_obs, m, rng)
        drawn += m
        inside = batch[models.in_support(spec, batch)]
        total_kept += inside.shape[0]
        kept.append(inside)
    draws = np.concatenate(kept, axis=0)[:m]
    leaked = 1.0 - total_kept / drawn
    return draws, leaked


def run_npe(spec: models.ModelSpec, s_obs, n_train: int, rng,
            k: int = 8, m_draws: int = 10000,
            fit_config: cde.FitConfig | None = None,
            max_oversample: int = 100):
    """One-shot posterior estimation.

    Draws n_train parameters from the prior, simulates one summary vector
    each, fits q(theta | S), and samples the fitted density at the
    observed summaries, rejecting draws that leak outside the prior
    support (up to max_oversample * m_draws proposals).

    Returns
    -------
    (DrawSet, ConditionalMixture, FitReport)
        The draw set's info records the leaked fraction and fit
        diagnostics.
    """
    s = np.asarray(s_obs, dtype=np.float64).reshape(-1)
    if s.shape[0] != models.summary_dim(spec):
        raise ValueError("s_obs dimension mismatch")
    thetas = models.prior_sample(spec, rng, n_train)
    summaries = models.simulate_summaries(spec, thetas, rng)
    train = cde.make_training_set(thetas, summaries, "posterior")
    mixture, report = cde.fit(train, k, rng, fit_config)
    draws, leaked = _truncated_mixture_draws(
        mixture, spec, s, m_draws, rng, max_oversample)
    ds = DrawSet(draws, np.full(m_draws, 1.0 / m_draws), "npe",
                 info={"leaked_fraction": leaked, "n_train": n_train,
                       "k": k, "fit_val_nll": report.val_nll,
                       "fit_epochs": report.epochs_run})
    return ds, mixture, report


def run_nle(spec: models.ModelSpec, s_obs, n_train: int, rng,
            k: int = 8, m_draws: int = 10000,
            fit_config: cde.FitConfig | None = None,
            mcmc_config: MCMCConfig | None = None):
    """One-shot synthetic-likelihood estimation.

    Fits q(S | theta) on prior-predictive pairs, then samples
    log prior(theta) + log q(S_obs | theta) with adaptive random-walk
    Metropolis. The post burn-in chain is thinned so that kept draws
    are almost never exact repeats of a rejected stretch; repeats would
    poison nearest-neighbour KLD estimates computed on the draw set.

    Returns
    -------
    (DrawSet, ConditionalMixture, FitReport)
    """
    s = np.asarray(s_obs, dtype=np.float64).reshape(-1)
    if s.shape[0] != models.summary_dim(spec):
        raise ValueError("s_obs dimension mismatch")
    thetas = models.prior_sample(spec, rng, n_train)
    summaries = models.simulate_summaries(spec, thetas, rng)
    train = cde.make_training_set(thetas, summaries, "likelihood")
    mixture, report = cde.fit(train, k, rng, fit_config)

    log_q = cde.fixed_target_log_density_fn(mixture, s)
    log_p = models.log_prior_fn(spec)

    def log_target(theta):
        lp = log_p(theta)
        if lp == -np.inf:
            return -np.inf
        return lp + log_q(theta)

    cfg = mcmc_config or MCMCConfig()
    # keep every thin-th state: the chance that a kept pair is an
    # unmoved duplicate is (1 - accept)^thin ~ 1/(4 m_draws)
    thin = max(1, int(np.ceil(np.log(4.0 * m_draws)
                              / -np.log1p(-cfg.target_accept))))
    need = int(np.ceil(thin * m_draws / (1.0 - cfg.burn_fraction))) + 1
    if cfg.n_steps < need:
        cfg = MCMCConfig(n_steps=need, burn_fraction=cfg.burn_fraction,
                         init_scale=cfg.init_scale,
                         target_accept=cfg.target_accept)
    start = None
    cand = models.prior_sample(spec, rng, 100)
    for row in cand:
        if np.isfinite(log_target(row)):
            start = row
            break
    if start is None:
        raise RuntimeError("could not find a finite-density starting point")
    chain = rwm_sample(log_target, start, rng, cfg)
    draws = chain.draws[-thin * m_draws::thin]
    ds = DrawSet(draws, np.full(draws.shape[0], 1.0 / draws.shape[0]), "nle",
                 info={"n_train": n_train, "k": k, "thin": thin,
                       "acceptance_rate": chain.info["acceptance_rate"],
                       "fit_val_nll": report.val_nll,
                       "fit_epochs": report.epochs_run})
    return ds, mixture, report


# ---------------------------------------------------------------------------
# Adaptive ABC-SMC baseline


@dataclass
class ABCSMCConfig:
    """Adaptive ABC sequential Monte Carlo settings.

    Tolerances follow the given quantile of the current population's
    distances; the perturbation kernel is Gaussian with twice the
    weighted population covariance. The run stops when the simulation
    budget is exhausted, the tolerance target is reached, or the
    tolerance improves by less than min_improvement.
    """

    n_particles: int = 1000
    quantile: float = 0.5
    target_tolerance: float = 0.0
    max_simulations: int = 1_000_000
    min_improvement: float = 0.01
    ess_floor: float = 0.05


def _weighted_cov(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    mean = (points * weights[:, None]).sum(axis=0)
    centred = points - mean
    return (centred * weights[:, None]).T @ centred


def abc_smc(spec: models.ModelSpec, s_obs, rng,
            config: ABCSMCConfig | None = None) -> DrawSet:
    """Adaptive ABC-SMC posterior approximation.

    Distances are Euclidean on summaries standardized by the initial
    prior-predictive population's spread. Returns a weighted DrawSet;
    info records the tolerance ladder and total simulation count.

    Raises
    ------
    RuntimeError
        If the effective sample size collapses below
        ess_floor * n_particles.
    """
    cfg = config or ABCSMCConfig()
    if cfg.n_particles < 2:
        raise ValueError("need at least 2 particles")
    s = np.asarray(s_obs, dtype=np.float64).reshape(-1)
    if s.shape[0] != models.summary_dim(spec):
        raise ValueError("s_obs dimension mismatch")

    n = cfg.n_particles
    thetas = models.prior_sample(spec, rng, n)
    summaries = models.simulate_summaries(spec, thetas, rng)
    n_sims = n
    scale = summaries.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)

    def distance(summ):
        return np.sqrt((((summ - s) / scale) ** 2).sum(axis=1))

    dists = distance(summaries)
    weights = np.full(n, 1.0 / n)
    tol = float(np.quantile(dists, cfg.quantile))
    ladder = [tol]
    bounds = models.prior_bounds(spec)
    dim = bounds.shape[0]

    while True:
        if n_sims >= cfg.max_simulations or tol <= cfg.target_tolerance:
            break
        cov = 2.0 * _weighted_cov(thetas, weights)
        cov += 1e-12 * np.eye(dim)
        fac = np.linalg.cholesky(cov)

        new_thetas = np.empty((n, dim))
        new_dists = np.empty(n)
        filled = 0
        exhausted = False
        while filled < n and not exhausted:
            take = n - filled
            anc_idx = np.searchsorted(np.cumsum(weights),
                                      rng.random(take)).clip(max=n - 1)
            prop = (thetas[anc_idx]
                    + standard_normal(rng, (take, dim)) @ fac.T)
            ok = models.in_support(spec, prop)
            if ok.any():
                cand = prop[ok]
                summ = models.simulate_summaries(spec, cand, rng)
                n_sims += cand.shape[0]
                d_cand = distance(summ)
                hit = d_cand <= tol
                kept = cand[hit]
                take_now = min(kept.shape[0], n - filled)
                new_thetas[filled:filled + take_now] = kept[:take_now]
                new_dists[filled:filled + take_now] = d_cand[hit][:take_now]
                filled += take_now
            if n_sims >= cfg.max_simulations and filled < n:
                exhausted = True
        if exhausted:
            break

        # population Monte Carlo reweighting: prior over kernel mixture
        diff = new_thetas[:, None, :] - thetas[None, :, :]
        white = np.linalg.solve(fac[None], diff[..., None])[..., 0]
        log_kern = -0.5 * (white * white).sum(axis=2)
        log_kern += np.log(weights)[None, :]
        log_mix = np.logaddexp.reduce(log_kern, axis=1)
        log_w = models.log_prior(spec, new_thetas) - log_mix
        log_w -= log_w.max()
        weights = np.exp(log_w)
        weights /= weights.sum()
        ess = 1.0 / (weights ** 2).sum()
        if ess < cfg.ess_floor * n:
            raise RuntimeError(
                f"ABC-SMC effective sample size collapsed: {ess:.1f}")
        thetas, dists = new_thetas, new_dists

        new_tol = float(np.quantile(dists, cfg.quantile))
        improvement = (tol - new_tol) / tol if tol > 0 else 0.0
        tol = min(tol, new_tol)
        ladder.append(tol)
        if improvement < cfg.min_improvement:
            break

    return DrawSet(thetas, weights, "abc-smc",
                   info={"tolerances": ladder, "n_simulations": n_sims,
                         "rounds": len(ladder) - 1})
