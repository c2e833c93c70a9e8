"""Benchmark simulators, priors, and summary maps.

Four models are provided:

``ma2``
    Second-order moving-average series y_t = e_t + theta1*e_{t-1} +
    theta2*e_{t-2} with standard-normal innovations, summarised by the
    first three empirical autocovariances.
``gk``
    The g-and-k distribution, defined through its quantile function,
    summarised by empirical octiles or hexadeciles.
``stereo``
    Stereological extremes: a Poisson number of ellipsoidal inclusions
    whose largest diameters exceed a threshold by generalized-Pareto
    excesses, observed through planar sections and summarised by the
    retained-section count and log mean/min/max diameters.
``toy``
    Conjugate Gaussian check model: the summary is the mean of n unit
    variance normals around theta, with a standard-normal prior.

Every simulator is a pure function of (theta, n, rng) and raises
ValueError when theta lies outside the prior support.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import standard_normal, uniform_open

__all__ = [
    "ModelSpec",
    "make_spec",
    "param_names",
    "summary_dim",
    "prior_bounds",
    "in_support",
    "log_prior",
    "log_prior_fn",
    "prior_sample",
    "ma2_simulate",
    "ma2_summaries",
    "gk_quantile",
    "gk_quantile_deriv",
    "gk_simulate",
    "gk_summaries",
    "stereo_simulate",
    "stereo_summaries",
    "simulate_summaries",
    "simulate_observed",
    "OCTILES",
    "HEXADECILES",
    "NU0",
    "GK_C",
]

MODEL_NAMES = ("ma2", "gk", "stereo", "toy")

# Minimum observable section diameter in the stereological model.
NU0 = 5.0
# Fixed overall-asymmetry constant of the g-and-k family.
GK_C = 0.8

OCTILES = np.arange(1, 8) / 8.0
HEXADECILES = np.arange(1, 16) / 16.0

# Elements processed per chunk when simulating large batches.
_CHUNK_ELEMS = 1 << 24

_DEFAULT_TRUE = {
    "ma2": (0.6, 0.2),
    "gk": (3.0, 1.0, 2.0, 0.5),
    "stereo": (100.0, 2.0, -0.1),
    "toy": (0.8,),
}

_PARAM_NAMES = {
    "ma2": ("theta1", "theta2"),
    "gk": ("A", "B", "g", "k"),
    "stereo": ("lam", "sigma", "xi"),
    "toy": ("theta",),
}

# Bounding boxes used for sampling and truncation. The ma2 box is cut
# further by two linear constraints (see in_support); the toy prior is a
# standard normal and the box only truncates a ~1e-15 tail.
_BOUNDS = {
    "ma2": ((-1.0, 1.0), (-1.0, 1.0)),
    "gk": ((0.0, 10.0),) * 4,
    "stereo": ((30.0, 200.0), (0.0, 15.0), (-3.0, 3.0)),
    "toy": ((-8.0, 8.0),),
}


@dataclass(frozen=True)
class ModelSpec:
    """Complete description of one inference problem.

    Attributes
    ----------
    name : str
        One of ``ma2``, ``gk``, ``stereo``, ``toy``.
    n : int
        Observation size. Series length for ma2/gk/toy; for stereo it
        scales the sampling window, w = n / 100.
    summary : str
        Summary family. Only gk has a choice ("octiles" or
        "hexadeciles"); other models carry a fixed label.
    theta_true : tuple
        Generating parameter for synthetic-data studies.
    """

    name: str
    n: int
    summary: str
    theta_true: tuple


def make_spec(name: str, n: int, summary: str | None = None,
              theta_true=None) -> ModelSpec:
    """Build a ModelSpec with per-model defaults.

    Raises
    ------
    ValueError
        On an unknown model name, non-positive n, an unknown summary
        label, or a true parameter outside the prior support.
    """
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if summary is None:
        summary = {"ma2": "autocov", "gk": "octiles",
                   "stereo": "extremes", "toy": "mean"}[name]
    if name == "gk":
        if summary not in ("octiles", "hexadeciles"):
            raise ValueError(f"unknown gk summary {summary!r}")
    if theta_true is None:
        theta_true = _DEFAULT_TRUE[name]
    theta_true = tuple(float(v) for v in theta_true)
    spec = ModelSpec(name, int(n), summary, theta_true)
    if not bool(in_support(spec, np.array(theta_true))[0]):
        raise ValueError("theta_true outside prior support")
    return spec


def param_names(spec: ModelSpec) -> tuple:
    return _PARAM_NAMES[spec.name]


def theta_dim(spec: ModelSpec) -> int:
    return len(_PARAM_NAMES[spec.name])


def summary_dim(spec: ModelSpec) -> int:
    if spec.name == "ma2":
        return 3
    if spec.name == "gk":
        return 7 if spec.summary == "octiles" else 15
    if spec.name == "stereo":
        return 4
    return 1


def _gk_probs(spec: ModelSpec) -> np.ndarray:
    return OCTILES if spec.summary == "octiles" else HEXADECILES


def prior_bounds(spec: ModelSpec) -> np.ndarray:
    """Bounding box of the prior, shape (d, 2)."""
    return np.array(_BOUNDS[spec.name], dtype=np.float64)


def _as_batch(spec: ModelSpec, thetas) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    if arr.ndim != 2 or arr.shape[1] != theta_dim(spec):
        raise ValueError(
            f"theta must have {theta_dim(spec)} columns, got shape {arr.shape}")
    return arr


def in_support(spec: ModelSpec, thetas) -> np.ndarray:
    """Boolean mask of rows inside the prior support (open box)."""
    arr = _as_batch(spec, thetas)
    bounds = prior_bounds(spec)
    ok = np.all((arr > bounds[:, 0]) & (arr < bounds[:, 1]), axis=1)
    if spec.name == "ma2":
        t1, t2 = arr[:, 0], arr[:, 1]
        ok &= (t1 + t2 > -1.0) & (t1 - t2 < 1.0)
    return ok


def log_prior(spec: ModelSpec, thetas) -> np.ndarray:
    """Log prior density, -inf outside the support."""
    arr = _as_batch(spec, thetas)
    ok = in_support(spec, arr)
    out = np.full(arr.shape[0], -np.inf)
    if spec.name == "ma2":
        # box area 4 minus the two corner triangles cut by the linear
        # constraints, each of area 1/2
        out[ok] = -np.log(3.0)
    elif spec.name == "gk":
        out[ok] = -4.0 * np.log(10.0)
    elif spec.name == "stereo":
        out[ok] = -np.log(170.0 * 15.0 * 6.0)
    else:
        th = arr[ok, 0]
        out[ok] = -0.5 * th * th - 0.5 * np.log(2.0 * np.pi)
    return out


def log_prior_fn(spec: ModelSpec):
    """Scalar fast path: (d,) vector -> float, matching log_prior rows.

    MCMC loops call the prior once per step; the batch version's array
    plumbing dominates at that granularity.
    """
    bounds = prior_bounds(spec)
    lo, hi = bounds[:, 0], bounds[:, 1]
    name = spec.name
    if name == "ma2":
        const = -np.log(3.0)
    elif name == "gk":
        const = -4.0 * np.log(10.0)
    elif name == "stereo":
        const = -np.log(170.0 * 15.0 * 6.0)
    else:
        const = -0.5 * np.log(2.0 * np.pi)

    def lp(theta: np.ndarray) -> float:
        if not ((theta > lo) & (theta < hi)).all():
            return -np.inf
        if name == "ma2" and not (theta[0] + theta[1] > -1.0
                                  and theta[0] - theta[1] < 1.0):
            return -np.inf
        if name == "toy":
            return const - 0.5 * theta[0] * theta[0]
        return const

    return lp


def prior_sample(spec: ModelSpec, rng: np.random.Generator,
                 size: int) -> np.ndarray:
    """Draw `size` parameters from the prior, shape (size, d).

    The ma2 prior is uniform over the box cut by the linear constraints
    and is drawn by rejection inside the box (acceptance 3/4); the other
    paper-style priors are uniform boxes; the toy prior is N(0, 1).
    """
    if size < 0:
        raise ValueError("size must be >= 0")
    if spec.name == "toy":
        return standard_normal(rng, (size, 1))
    bounds = prior_bounds(spec)
    lo, hi = bounds[:, 0], bounds[:, 1]
    if spec.name != "ma2":
        return lo + (hi - lo) * rng.random((size, len(lo)))
    out = np.empty((size, 2))
    filled = 0
    drawn = 0
    while filled < size:
        if drawn >= 1_000_000 + 100 * size:
            raise ValueError("degenerate prior region")
        need = size - filled
        cand = lo + (hi - lo) * rng.random((need + (need // 2) + 8, 2))
        drawn += cand.shape[0]
        cand = cand[in_support(spec, cand)]
        take = min(len(cand), need)
        out[filled:filled + take] = cand[:take]
        filled += take
    return out


def _require_support(spec: ModelSpec, thetas: np.ndarray) -> None:
    if not bool(in_support(spec, thetas).all()):
        raise ValueError(f"theta outside the {spec.name} prior support")


# ---------------------------------------------------------------------------
# MA(2)


def _ma2_series(thetas: np.ndarray, n: int, rng) -> np.ndarray:
    # two warm-up innovations so y_1 already follows the stationary law
    t1 = thetas[:, 0][:, None]
    t2 = thetas[:, 1][:, None]
    eps = standard_normal(rng, (thetas.shape[0], n + 2))
    return eps[:, 2:] + t1 * eps[:, 1:-1] + t2 * eps[:, :-2]


def ma2_simulate(theta, n: int, rng) -> np.ndarray:
    """One MA(2) series of length n.

    Parameters
    ----------
    theta : array_like, shape (2,)
        Moving-average coefficients inside the prior support.
    n : int
        Series length, >= 3 so all three summary lags exist.
    rng : numpy.random.Generator
    """
    spec = make_spec("ma2", max(n, 3))
    arr = _as_batch(spec, theta)
    if arr.shape[0] != 1:
        raise ValueError("theta must be a single parameter vector")
    _require_support(spec, arr)
    if n < 3:
        raise ValueError("n must be >= 3")
    return _ma2_series(arr, n, rng)[0]


def ma2_summaries(series) -> np.ndarray:
    """First three empirical autocovariances, divisor n.

    Works on a single series (n,) or a batch (B, n); returns (3,) or
    (B, 3) accordingly.
    """
    y = np.asarray(series, dtype=np.float64)
    n = y.shape[-1]
    if n < 3:
        raise ValueError("series must have length >= 3")
    if not np.isfinite(y).all():
        raise ValueError("series must be finite")
    out = np.empty(y.shape[:-1] + (3,))
    for lag in (0, 1, 2):
        out[..., lag] = (y[..., lag:] * y[..., :n - lag]).sum(axis=-1) / n
    return out


# ---------------------------------------------------------------------------
# g-and-k


def _gk_parts(z, theta):
    arr = np.asarray(theta, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if arr.ndim == 1:
        a, b, g, k = (float(v) for v in arr)
    elif arr.ndim == 2 and arr.shape[1] == 4:
        # batch of rows; each broadcasts against the trailing axis of z
        a, b, g, k = (arr[:, j][:, None] for j in range(4))
    else:
        raise ValueError("theta must be one vector or a batch of rows")
    if np.any(np.asarray(b) <= 0):
        raise ValueError("gk scale B must be positive")
    t = np.tanh(0.5 * g * z)
    w = (1.0 + z * z) ** k
    return a, b, g, k, z, t, w


def gk_quantile(z, theta) -> np.ndarray:
    """Quantile function of the g-and-k law at normal scores z.

    theta may be a single parameter vector (result has z's shape) or a
    batch of rows (result gains a leading batch axis).
    """
    a, b, _, _, z, t, w = _gk_parts(z, theta)
    return a + b * (1.0 + GK_C * t) * w * z


def gk_quantile_deriv(z, theta) -> np.ndarray:
    """Derivative of the g-and-k quantile function with respect to z.

    Accepts the same single-vector or batched theta as gk_quantile.
    """
    _, b, g, k, z, t, w = _gk_parts(z, theta)
    one_pz2 = 1.0 + z * z
    inner = (0.5 * GK_C * g * z * (1.0 - t * t)
             + (1.0 + GK_C * t) * (2.0 * k * z * z / one_pz2 + 1.0))
    return b * w * inner


def _gk_sample(thetas: np.ndarray, n: int, rng) -> np.ndarray:
    z = standard_normal(rng, (thetas.shape[0], n))
    a = thetas[:, 0][:, None]
    b = thetas[:, 1][:, None]
    g = thetas[:, 2][:, None]
    k = thetas[:, 3][:, None]
    t = np.tanh(0.5 * g * z)
    w = (1.0 + z * z) ** k
    return a + b * (1.0 + GK_C * t) * w * z


def gk_simulate(theta, n: int, rng) -> np.ndarray:
    """n independent g-and-k draws via the quantile transform.

    Any finite theta with B > 0 is simulable (the prior box binds only
    the prior ops); n >= 16 so the downstream quantile summaries rest on
    at least one point per hexadecile bin.
    """
    arr = np.asarray(theta, dtype=np.float64).reshape(-1)
    if arr.shape[0] != 4:
        raise ValueError("theta must be a single parameter vector")
    if not np.isfinite(arr).all():
        raise ValueError("theta must be finite")
    if arr[1] <= 0:
        raise ValueError("gk scale B must be positive")
    if n < 16:
        raise ValueError("n must be >= 16")
    return _gk_sample(arr[None, :], n, rng)[0]


def gk_summaries(series, summary: str = "octiles") -> np.ndarray:
    """Empirical octiles or hexadeciles of a sample.

    Works on (n,) or (B, n) input; quantiles use linear interpolation.
    """
    y = np.asarray(series, dtype=np.float64)
    probs = OCTILES if summary == "octiles" else HEXADECILES
    if summary not in ("octiles", "hexadeciles"):
        raise ValueError(f"unknown gk summary {summary!r}")
    q = np.quantile(y, probs, axis=-1)
    return np.moveaxis(q, 0, -1)


# ---------------------------------------------------------------------------
# Stereological extremes


def _gpd_ppf(u, sigma, xi) -> np.ndarray:
    """Generalized-Pareto quantile function for u in (0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), u.shape)
    xi = np.broadcast_to(np.asarray(xi, dtype=np.float64), u.shape)
    log1mu = np.log1p(-u)
    small = np.abs(xi) < 1e-12
    xi_safe = np.where(small, 1.0, xi)
    heavy = sigma / xi_safe * np.expm1(-xi * log1mu)
    return np.where(small, -sigma * log1mu, heavy)


def _stereo_sections(thetas: np.ndarray, w: float, rng):
    """Candidate inclusions and retained section diameters.

    Returns (candidate_counts, rep_index_of_retained, retained_diams).
    The plane samples inclusions with probability proportional to the
    axis normal to it, which makes the relative offset Z uniform on
    (-1, 1) conditional on sampling; the observed section diameter is
    V3 * sqrt(1 - Z^2) and only sections above the threshold survive.
    """
    lam = thetas[:, 0]
    sig = thetas[:, 1]
    xi = thetas[:, 2]
    counts = rng.poisson(lam * w)
    total = int(counts.sum())
    rep = np.repeat(np.arange(thetas.shape[0]), counts)
    # latent axis ratios (V1, V2)/V3; they fix which axis meets the plane
    # but drop out of the observed diameter
    rng.random((2, total))
    u_gpd = uniform_open(rng, total)
    z = 2.0 * rng.random(total) - 1.0
    v3 = NU0 + _gpd_ppf(u_gpd, sig[rep], xi[rep])
    s = v3 * np.sqrt(1.0 - z * z)
    keep = s > NU0
    return counts, rep[keep], s[keep]


def stereo_simulate(theta, n: int, rng) -> np.ndarray:
    """Retained section diameters for one window of scale w = n / 100.

    Returns a variable-length 1-d array (possibly empty).
    """
    arr = np.asarray(theta, dtype=np.float64).reshape(-1)
    if arr.shape[0] != 3:
        raise ValueError("theta must be a single parameter vector")
    if not np.isfinite(arr).all():
        raise ValueError("theta must be finite")
    if arr[0] <= 0 or arr[1] <= 0:
        raise ValueError("rate and gpd scale must be positive")
    if n < 1:
        raise ValueError("n must be >= 1")
    _, _, diams = _stereo_sections(arr[None, :], n / 100.0, rng)
    return diams


def stereo_summaries(diams) -> np.ndarray:
    """Count and log mean/min/max of retained diameters.

    An empty sample carries real information (no large inclusions), so it
    maps to the sentinel (0, log nu0, log nu0, log nu0) instead of NaN.
    """
    d = np.asarray(diams, dtype=np.float64)
    if d.ndim != 1:
        raise ValueError("diameters must be a 1-d array")
    if d.size == 0:
        s = np.log(NU0)
        return np.array([0.0, s, s, s])
    return np.array([float(d.size), np.log(d.mean()),
                     np.log(d.min()), np.log(d.max())])


def _stereo_summary_batch(batch: int, rep: np.ndarray,
                          s: np.ndarray) -> np.ndarray:
    cnt = np.bincount(rep, minlength=batch).astype(np.float64)
    out = np.empty((batch, 4))
    out[:, 0] = cnt
    sentinel = np.log(NU0)
    has = cnt > 0
    if s.size:
        tot = np.bincount(rep, weights=s, minlength=batch)
        mn = np.full(batch, np.inf)
        np.minimum.at(mn, rep, s)
        mx = np.full(batch, -np.inf)
        np.maximum.at(mx, rep, s)
        out[has, 1] = np.log(tot[has] / cnt[has])
        out[has, 2] = np.log(mn[has])
        out[has, 3] = np.log(mx[has])
    out[~has, 1:] = sentinel
    return out


# ---------------------------------------------------------------------------
# Conjugate Gaussian toy


def toy_posterior_moments(s_obs: float, n: int) -> tuple:
    """Exact posterior mean and variance of the toy model.

    With prior N(0,1) and summary S ~ N(theta, 1/n), the posterior is
    N(n*S/(n+1), 1/(n+1)).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    s = float(np.asarray(s_obs).reshape(-1)[0])
    return n * s / (n + 1.0), 1.0 / (n + 1.0)


# ---------------------------------------------------------------------------
# Batched driver


def _simulate_chunk(spec: ModelSpec, thetas: np.ndarray, rng) -> np.ndarray:
    if spec.name == "ma2":
        if spec.n < 3:
            raise ValueError("ma2 needs n >= 3")
        return ma2_summaries(_ma2_series(thetas, spec.n, rng))
    if spec.name == "gk":
        return gk_summaries(_gk_sample(thetas, spec.n, rng), spec.summary)
    if spec.name == "stereo":
        _, rep, s = _stereo_sections(thetas, spec.n / 100.0, rng)
        return _stereo_summary_batch(thetas.shape[0], rep, s)
    # toy: the mean of n unit normals around theta is exactly
    # theta + z / sqrt(n) for a single standard normal z
    z = standard_normal(rng, (thetas.shape[0], 1))
    return thetas + z / np.sqrt(spec.n)


def _chunk_rows(spec: ModelSpec) -> int:
    if spec.name in ("ma2", "gk"):
        per_row = spec.n + 2
    elif spec.name == "stereo":
        per_row = int(200.0 * spec.n / 100.0) + 16
    else:
        per_row = 1
    return max(1, _CHUNK_ELEMS // per_row)


def simulate_summaries(spec: ModelSpec, thetas, rng) -> np.ndarray:
    """Simulate and summarise one dataset per parameter row.

    Parameters
    ----------
    spec : ModelSpec
    thetas : array_like, shape (B, d) or (d,)
        Parameters, all inside the prior support.
    rng : numpy.random.Generator

    Returns
    -------
    ndarray, shape (B, summary_dim)
    """
    arr = _as_batch(spec, thetas)
    _require_support(spec, arr)
    step = _chunk_rows(spec)
    if arr.shape[0] <= step:
        return _simulate_chunk(spec, arr, rng)
    parts = [_simulate_chunk(spec, arr[i:i + step], rng)
             for i in range(0, arr.shape[0], step)]
    return np.concatenate(parts, axis=0)


def simulate_observed(spec: ModelSpec, rng) -> np.ndarray:
    """Summaries of one synthetic dataset at the true parameter."""
    return simulate_summaries(spec, np.asarray(spec.theta_true), rng)[0]
