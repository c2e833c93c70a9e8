"""Gaussian mixture-of-experts conditional density estimation.

The estimator q(y | x) is a k-component Gaussian mixture whose gating
weights are an affine-softmax map of the condition, whose component means
are affine maps of the condition, and whose component covariances are
lower-triangular Cholesky factors with log-linear condition-dependent
diagonals and condition-independent off-diagonals. Both blocks are
z-scored internally; log densities are Jacobian-corrected back to the
original coordinates.

Training minimises the importance-weighted negative log likelihood

    loss = mean_i  K_i * ( -log q(y_i | x_i) )

with analytic gradients and an adaptive per-coordinate (Adam-style)
optimizer. The weights K_i are rescaled to unit mean, which leaves the
minimiser unchanged and makes training invariant to a constant rescaling
of the importance function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .rng import standard_normal

__all__ = [
    "TrainingSet",
    "make_training_set",
    "FitConfig",
    "FitReport",
    "ConditionalMixture",
    "fit",
    "log_density",
    "sample",
    "mixture_to_dict",
    "mixture_from_dict",
    "save_mixture",
    "load_mixture",
]

_FORMAT = "sbilab-mixture/1"
_LOG2PI = np.log(2.0 * np.pi)

_PARAM_KEYS = ("gate_w", "gate_b", "mean_w", "mean_b",
               "chol_diag_raw", "chol_diag_cond", "chol_off")


@dataclass
class TrainingSet:
    """Paired (condition, target) draws with importance weights.

    direction is "posterior" when the targets are parameters conditioned
    on summaries, "likelihood" when the targets are summaries conditioned
    on parameters. Standardization statistics for both blocks are fixed
    at construction so that fitted models carry them. conditions are
    stored with condition_transform already applied; the target block is
    never transformed (its density carries the Jacobian of z-scoring
    only).
    """

    conditions: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    direction: str
    cond_mean: np.ndarray
    cond_sd: np.ndarray
    target_mean: np.ndarray
    target_sd: np.ndarray
    condition_transform: str = "none"

    def __len__(self) -> int:
        return self.conditions.shape[0]


def _transform_conditions(x: np.ndarray, name: str) -> np.ndarray:
    if name == "none":
        return x
    if name == "asinh":
        return np.arcsinh(x)
    raise ValueError(f"unknown condition transform {name!r}")


_TAIL_RATIO_LIMIT = 3.0  # sd/IQR: normal 0.74, uniform 0.58, t_3 1.13


def _resolve_auto_transform(cond: np.ndarray) -> str:
    """Pick asinh only for extreme-tailed condition columns."""
    q1, q3 = np.percentile(cond, [25.0, 75.0], axis=0)
    iqr = q3 - q1
    sd = cond.std(axis=0)
    ok = (iqr > 0) & (sd > 0)
    if not ok.any():
        return "none"
    ratio = (sd[ok] / iqr[ok]).max()
    return "asinh" if ratio > _TAIL_RATIO_LIMIT else "none"


def make_training_set(params, summaries, direction: str = "posterior",
                      weights=None,
                      condition_transform: str = "auto") -> TrainingSet:
    """Assemble a training set from simulated (theta, S) pairs.

    Parameters
    ----------
    params : array_like, shape (N, d_theta)
    summaries : array_like, shape (N, d_s)
    direction : {"posterior", "likelihood"}
        Which block is the regression target.
    weights : array_like, shape (N,), optional
        Positive importance weights; defaults to 1.
    condition_transform : {"auto", "asinh", "none"}
        Bijection applied to the condition block before z-scoring.
        Heavy-tailed summaries otherwise dominate the standardization
        scale and erase the conditioning signal; transforming the
        condition block leaves the fitted conditional law unchanged.
        "auto" resolves to asinh only when some condition column is
        extremely heavy-tailed (sd above 3 IQR), since the transform
        bends affine structure the experts would otherwise get free.

    Raises
    ------
    ValueError
        On empty input, shape mismatch, non-finite entries, or
        non-positive weights.
    """
    p = np.asarray(params, dtype=np.float64)
    s = np.asarray(summaries, dtype=np.float64)
    if p.ndim != 2 or s.ndim != 2:
        raise ValueError("params and summaries must be 2-d arrays")
    if p.shape[0] != s.shape[0]:
        raise ValueError("params and summaries must have equal length")
    if p.shape[0] < 1:
        raise ValueError("training set must not be empty")
    if not (np.isfinite(p).all() and np.isfinite(s).all()):
        raise ValueError("training pairs must be finite")
    if direction not in ("posterior", "likelihood"):
        raise ValueError(f"unknown direction {direction!r}")
    if weights is None:
        w = np.ones(p.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1)
        if w.shape[0] != p.shape[0]:
            raise ValueError("weights must match the number of pairs")
        if not np.isfinite(w).all() or (w <= 0).any():
            raise ValueError("weights must be finite and positive")
    cond, target = (s, p) if direction == "posterior" else (p, s)
    if condition_transform == "auto":
        condition_transform = _resolve_auto_transform(cond)
    cond = _transform_conditions(cond, condition_transform)

    def _stats(a):
        mean = a.mean(axis=0)
        sd = a.std(axis=0)
        return mean, np.maximum(sd, 1e-12)

    cm, cs = _stats(cond)
    tm, ts = _stats(target)
    return TrainingSet(cond, target, w, direction, cm, cs, tm, ts,
                       condition_transform)


@dataclass
class FitConfig:
    """Optimizer settings for fit()."""

    batch_size: int = 256
    step_size: float = 1e-3
    max_epochs: int = 300
    patience: int = 20
    val_fraction: float = 0.1
    sigma_floor: float = 1e-4


@dataclass
class FitReport:
    """Training diagnostics returned alongside the fitted mixture."""

    train_nll: float
    val_nll: float
    val_trace: list
    epochs_run: int
    stopped_early: bool
    baseline_nll: float
    n_train: int
    n_val: int
    k: int


@dataclass
class ConditionalMixture:
    """Fitted mixture of affine Gaussian experts (standardized inside).

    Raw conditions pass through condition_transform, then z-scoring, before
    they reach the gating, mean, and scale maps; callers always hand in raw
    values. Expert Cholesky factors have condition-dependent diagonals
    sigma_floor + exp(chol_diag_raw + chol_diag_cond @ x) and
    condition-independent strictly-lower parts, so predictive spread can
    shrink where the condition is informative.
    """

    k: int
    gate_w: np.ndarray
    gate_b: np.ndarray
    mean_w: np.ndarray
    mean_b: np.ndarray
    chol_diag_raw: np.ndarray
    chol_diag_cond: np.ndarray
    chol_off: np.ndarray
    cond_mean: np.ndarray
    cond_sd: np.ndarray
    target_mean: np.ndarray
    target_sd: np.ndarray
    sigma_floor: float = 1e-4
    direction: str = "posterior"
    condition_transform: str = "none"

    @property
    def dim_condition(self) -> int:
        return self.gate_w.shape[1]

    @property
    def dim_target(self) -> int:
        return self.mean_b.shape[1]


# ---------------------------------------------------------------------------
# Forward pass and analytic gradients (standardized coordinates)


def _chol_diag(params: dict, x: np.ndarray, sigma_floor: float) -> np.ndarray:
    """Condition-dependent Cholesky diagonals, shape (n, k, d_t)."""
    return sigma_floor + np.exp(
        params["chol_diag_raw"]
        + np.einsum("ktc,nc->nkt", params["chol_diag_cond"], x))


def _forward(params: dict, x: np.ndarray, y: np.ndarray,
             sigma_floor: float):
    """Per-point log density plus the intermediates the gradient needs."""
    k, dt = params["chol_diag_raw"].shape
    logits = x @ params["gate_w"].T + params["gate_b"]
    log_pi = logits - logsumexp(logits, axis=1, keepdims=True)
    mu = np.einsum("kts,ns->nkt", params["mean_w"], x) + params["mean_b"]
    resid = y[:, None, :] - mu
    diag = _chol_diag(params, x, sigma_floor)
    off = np.tril(params["chol_off"], -1)
    # forward substitution, L = off + diag(diag), vectorized over (n, k)
    white = np.empty_like(resid)
    for i in range(dt):
        acc = resid[:, :, i]
        if i:
            acc = acc - np.einsum("kj,nkj->nk", off[:, i, :i],
                                  white[:, :, :i])
        white[:, :, i] = acc / diag[:, :, i]
    log_det = np.log(diag).sum(axis=2)
    log_comp = (-0.5 * (white * white).sum(axis=2)
                - log_det - 0.5 * dt * _LOG2PI)
    joint = log_pi + log_comp
    ll = logsumexp(joint, axis=1)
    return ll, (log_pi, off, diag, white, joint)


def _nll_and_grads(params: dict, x: np.ndarray, y: np.ndarray,
                   w: np.ndarray, sigma_floor: float):
    """Weighted NLL and its analytic gradient for every parameter array.

    Derivation: with responsibilities r_ij = softmax_j(joint_ij), gate
    logits receive -c_i (r - pi), component means receive
    -c_i r_ij Sigma_j^{-1} (y - mu), and the Cholesky factor receives
    -c_i r_ij (u v^T - diag(1/L_dd)) where v = L^{-1}(y - mu) and
    u = L^{-T} v, all with c_i = w_i / n. The diagonal entries chain
    through d = sigma_floor + exp(a + V x), so the raw offsets collect
    the diagonal direction times (d - sigma_floor) and V collects the
    same times the condition.
    """
    n = x.shape[0]
    k, dt = params["chol_diag_raw"].shape
    ll, (log_pi, off, diag, white, joint) = _forward(
        params, x, y, sigma_floor)
    loss = -(w * ll).sum() / n
    c = w / n
    resp = np.exp(joint - ll[:, None])

    g_logits = -c[:, None] * (resp - np.exp(log_pi))
    grads = {
        "gate_w": g_logits.T @ x,
        "gate_b": g_logits.sum(axis=0),
    }

    # backward substitution, L^T u = white, vectorized over (n, k)
    back = np.empty_like(white)
    for i in range(dt - 1, -1, -1):
        acc = white[:, :, i]
        if i < dt - 1:
            acc = acc - np.einsum("kj,nkj->nk", off[:, i + 1:, i],
                                  back[:, :, i + 1:])
        back[:, :, i] = acc / diag[:, :, i]
    coef = -c[:, None] * resp
    g_mu = coef[:, :, None] * back
    grads["mean_w"] = np.einsum("nkt,ns->kts", g_mu, x)
    grads["mean_b"] = g_mu.sum(axis=0)

    grads["chol_off"] = np.tril(
        np.einsum("nk,nkt,nks->kts", coef, back, white), -1)
    g_diag = (coef[:, :, None] * (back * white - 1.0 / diag)
              * (diag - sigma_floor))
    grads["chol_diag_raw"] = g_diag.sum(axis=0)
    grads["chol_diag_cond"] = np.einsum("nkt,nc->ktc", g_diag, x)
    return loss, grads


def _weighted_nll(params: dict, x: np.ndarray, y: np.ndarray,
                  w: np.ndarray, sigma_floor: float,
                  chunk: int = 1 << 16) -> float:
    total = 0.0
    for i in range(0, x.shape[0], chunk):
        ll, _ = _forward(params, x[i:i + chunk], y[i:i + chunk], sigma_floor)
        total += -(w[i:i + chunk] * ll).sum()
    return total / x.shape[0]


def _adam_init(params: dict) -> dict:
    return {
        "t": 0,
        "m": {key: np.zeros_like(val) for key, val in params.items()},
        "v": {key: np.zeros_like(val) for key, val in params.items()},
    }


def _adam_step(params: dict, grads: dict, state: dict, lr: float,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> None:
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for key in params:
        m = state["m"][key]
        v = state["v"][key]
        g = grads[key]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[key] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def _kmeanspp_centers(y: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seeding on the standardized target block."""
    n = y.shape[0]
    centers = np.empty((k, y.shape[1]))
    centers[0] = y[int(rng.integers(n))]
    if k == 1:
        return centers
    d2 = ((y - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[j:] = centers[0]
            break
        cum = np.cumsum(d2 / total)
        pick = int(np.searchsorted(cum, rng.random()))
        centers[j] = y[min(pick, n - 1)]
        d2 = np.minimum(d2, ((y - centers[j]) ** 2).sum(axis=1))
    return centers


def _ls_affine(x: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Weighted least-squares affine map y ~ slope x + intercept."""
    n = x.shape[0]
    design = np.concatenate([x, np.ones((n, 1))], axis=1)
    wd = design * w[:, None]
    gram = design.T @ wd
    gram += 1e-10 * np.eye(gram.shape[0])
    beta = np.linalg.solve(gram, wd.T @ y)
    resid = y - design @ beta
    return beta[:-1].T, beta[-1], resid


def _ls_baseline(x: np.ndarray, y: np.ndarray, w: np.ndarray,
                 sigma_floor: float):
    """Closed-form single-Gaussian affine fit and its weighted NLL."""
    dt = y.shape[1]
    slope, intercept, resid = _ls_affine(x, y, w)
    cov = (resid * w[:, None]).T @ resid / w.sum()
    cov += (sigma_floor ** 2) * np.eye(dt)
    fac = np.linalg.cholesky(cov)
    white = solve_triangular(fac, resid.T, lower=True).T
    log_det = np.log(np.diag(fac)).sum()
    ll = -0.5 * (white * white).sum(axis=1) - log_det - 0.5 * dt * _LOG2PI
    nll = -(w * ll).sum() / x.shape[0]
    return nll, slope, intercept, resid, fac


def fit(train: TrainingSet, k: int, rng,
        config: FitConfig | None = None):
    """Fit a k-component mixture of experts to a training set.

    Parameters
    ----------
    train : TrainingSet
    k : int
        Number of experts, >= 1; requires len(train) >= 10 * k.
    rng : numpy.random.Generator
        Drives the validation split, k-means++ seeding, and epoch
        shuffles; fits are bit-reproducible given the same stream.
    config : FitConfig, optional

    Returns
    -------
    (ConditionalMixture, FitReport)

    Raises
    ------
    ValueError
        If k < 1 or the training set is smaller than 10 * k.
    FloatingPointError
        If the loss turns non-finite during training.
    """
    cfg = config or FitConfig()
    n = len(train)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 10 * k:
        raise ValueError(f"need at least 10*k = {10 * k} training pairs, got {n}")

    x = (train.conditions - train.cond_mean) / train.cond_sd
    y = (train.targets - train.target_mean) / train.target_sd
    w = train.weights / train.weights.mean()
    dc, dt = x.shape[1], y.shape[1]

    n_val = min(max(1, int(round(cfg.val_fraction * n))), n - 1)
    perm = rng.permutation(n)
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    xt, yt, wt = x[train_idx], y[train_idx], w[train_idx]
    xv, yv, wv = x[val_idx], y[val_idx], w[val_idx]

    base_nll, slope, intercept, resid, resid_fac = _ls_baseline(
        xt, yt, wt, cfg.sigma_floor)
    resid_sd = np.maximum(resid.std(axis=0), 2.0 * cfg.sigma_floor)
    params = {
        "gate_w": np.zeros((k, dc)),
        "gate_b": np.zeros(k),
        # every expert starts at the least-squares affine map and
        # specializes from a k-means++ offset in the residuals
        "mean_w": np.tile(slope, (k, 1, 1)),
        "mean_b": intercept + _kmeanspp_centers(resid, k, rng),
        "chol_diag_raw": np.tile(
            np.log(resid_sd - cfg.sigma_floor), (k, 1)),
        "chol_diag_cond": np.zeros((k, dt, dc)),
        "chol_off": np.zeros((k, dt, dt)),
    }
    state = _adam_init(params)

    val_trace = [_weighted_nll(params, xv, yv, wv, cfg.sigma_floor)]
    best_val = val_trace[0]
    best_params = {key: val.copy() for key, val in params.items()}
    best_epoch = 0
    epochs_run = 0
    stopped_early = False

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grads = _nll_and_grads(
                params, xt[batch], yt[batch], wt[batch], cfg.sigma_floor)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, "
                    f"batch offset {start}")
            _adam_step(params, grads, state, cfg.step_size)
        epochs_run = epoch
        val_nll = _weighted_nll(params, xv, yv, wv, cfg.sigma_floor)
        if not np.isfinite(val_nll):
            raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        val_trace.append(val_nll)
        if val_nll < best_val:
            best_val = val_nll
            best_params = {key: val.copy() for key, val in params.items()}
            best_epoch = epoch
        elif epoch - best_epoch >= cfg.patience:
            stopped_early = True
            break

    train_nll = _weighted_nll(best_params, xt, yt, wt, cfg.sigma_floor)
    if train_nll > base_nll:
        # never return a fit worse than the closed-form single Gaussian:
        # collapse every expert onto the least-squares solution
        diag = np.maximum(np.diag(resid_fac) - cfg.sigma_floor, 1e-300)
        fallback = {
            "gate_w": np.zeros((k, dc)),
            "gate_b": np.zeros(k),
            "mean_w": np.tile(slope, (k, 1, 1)),
            "mean_b": np.tile(intercept, (k, 1)),
            "chol_diag_raw": np.tile(np.log(diag), (k, 1)),
            "chol_diag_cond": np.zeros((k, dt, dc)),
            "chol_off": np.tile(np.tril(resid_fac, -1), (k, 1, 1)),
        }
        fb_nll = _weighted_nll(fallback, xt, yt, wt, cfg.sigma_floor)
        if fb_nll < train_nll:
            best_params = fallback
            train_nll = fb_nll
            best_val = _weighted_nll(fallback, xv, yv, wv, cfg.sigma_floor)

    model = ConditionalMixture(
        k=k,
        gate_w=best_params["gate_w"],
        gate_b=best_params["gate_b"],
        mean_w=best_params["mean_w"],
        mean_b=best_params["mean_b"],
        chol_diag_raw=best_params["chol_diag_raw"],
        chol_diag_cond=best_params["chol_diag_cond"],
        chol_off=best_params["chol_off"],
        cond_mean=train.cond_mean.copy(),
        cond_sd=train.cond_sd.copy(),
        target_mean=train.target_mean.copy(),
        target_sd=train.target_sd.copy(),
        sigma_floor=cfg.sigma_floor,
        direction=train.direction,
        condition_transform=train.condition_transform,
    )
    report = FitReport(
        train_nll=train_nll,
        val_nll=best_val,
        val_trace=val_trace,
        epochs_run=epochs_run,
        stopped_early=stopped_early,
        baseline_nll=base_nll,
        n_train=len(train_idx),
        n_val=n_val,
        k=k,
    )
    return model, report


# ---------------------------------------------------------------------------
# Evaluation and sampling


def _model_params(model: ConditionalMixture) -> dict:
    return {key: getattr(model, key) for key in _PARAM_KEYS}


def log_density(model: ConditionalMixture, targets, conditions) -> np.ndarray:
    """Log q(target | condition) in original coordinates.

    Parameters
    ----------
    targets : array_like, shape (m, d_t) or (d_t,)
    conditions : array_like, shape (m, d_c) or (d_c,)
        A single condition is broadcast across all targets.

    Returns
    -------
    ndarray, shape (m,)
    """
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    x = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    if y.shape[1] != model.dim_target:
        raise ValueError(f"targets must have {model.dim_target} columns")
    if x.shape[1] != model.dim_condition:
        raise ValueError(f"conditions must have {model.dim_condition} columns")
    if x.shape[0] == 1 and y.shape[0] > 1:
        x = np.broadcast_to(x, (y.shape[0], x.shape[1]))
    if x.shape[0] != y.shape[0]:
        raise ValueError("batch sizes of targets and conditions differ")
    x = _transform_conditions(x, model.condition_transform)
    xs = (x - model.cond_mean) / model.cond_sd
    ys = (y - model.target_mean) / model.target_sd
    params = _model_params(model)
    jac = np.log(model.target_sd).sum()
    out = np.empty(y.shape[0])
    chunk = 1 << 16
    for i in range(0, y.shape[0], chunk):
        ll, _ = _forward(params, xs[i:i + chunk], ys[i:i + chunk],
                         model.sigma_floor)
        out[i:i + chunk] = ll - jac
    return out


def fixed_target_log_density_fn(model: ConditionalMixture, target):
    """Fast scalar evaluator of condition -> log q(target | condition).

    Precomputes what one fixed target row allows so MCMC loops avoid
    per-step batching overhead; with condition-independent scales the
    whitening factors are inverted once. Matches log_density to
    floating-point accuracy.
    """
    y_row = np.asarray(target, dtype=np.float64).reshape(-1)
    if y_row.shape[0] != model.dim_target:
        raise ValueError(f"target must have {model.dim_target} entries")
    y = (y_row - model.target_mean) / model.target_sd
    dim = model.dim_target
    gate_w, gate_b = model.gate_w, model.gate_b
    mean_w, mean_b = model.mean_w, model.mean_b
    cond_mean, cond_sd = model.cond_mean, model.cond_sd
    transform = model.condition_transform
    off = np.tril(model.chol_off, -1)
    jac = -0.5 * dim * _LOG2PI - np.log(model.target_sd).sum()

    if not model.chol_diag_cond.any():
        fac = off.copy()
        idx = np.arange(dim)
        fac[:, idx, idx] = model.sigma_floor + np.exp(model.chol_diag_raw)
        eye = np.eye(dim)
        inv_fac = np.stack([solve_triangular(fac[j], eye, lower=True)
                            for j in range(model.k)])
        log_det = np.log(np.diagonal(fac, axis1=1, axis2=2)).sum(axis=1)
        const = jac - log_det

        def log_q(condition: np.ndarray) -> float:
            x = (_transform_conditions(condition, transform)
                 - cond_mean) / cond_sd
            logits = gate_w @ x + gate_b
            logits -= logsumexp(logits)
            white = np.einsum("kts,ks->kt", inv_fac,
                              y - (mean_w @ x + mean_b))
            comp = const - 0.5 * np.einsum("kt,kt->k", white, white)
            return float(logsumexp(logits + comp))

        return log_q

    raw = model.chol_diag_raw
    vmat = model.chol_diag_cond
    floor = model.sigma_floor

    def log_q(condition: np.ndarray) -> float:
        x = (_transform_conditions(condition, transform)
             - cond_mean) / cond_sd
        logits = gate_w @ x + gate_b
        logits -= logsumexp(logits)
        diag = floor + np.exp(raw + vmat @ x)
        resid = y - (mean_w @ x + mean_b)
        white = np.empty_like(resid)
        for i in range(dim):
            acc = resid[:, i]
            if i:
                acc = acc - np.einsum("kj,kj->k", off[:, i, :i],
                                      white[:, :i])
            white[:, i] = acc / diag[:, i]
        comp = (jac - np.log(diag).sum(axis=1)
                - 0.5 * (white * white).sum(axis=1))
        return float(logsumexp(logits + comp))

    return log_q


def sample(model: ConditionalMixture, condition, m: int, rng) -> np.ndarray:
    """Draw m targets from q(. | condition), original coordinates."""
    if m < 0:
        raise ValueError("m must be >= 0")
    x = np.asarray(condition, dtype=np.float64).reshape(-1)
    if x.shape[0] != model.dim_condition:
        raise ValueError(f"condition must have {model.dim_condition} entries")
    x = _transform_conditions(x, model.condition_transform)
    xs = (x - model.cond_mean) / model.cond_sd
    logits = model.gate_w @ xs + model.gate_b
    pi = np.exp(logits - logsumexp(logits))
    pi /= pi.sum()
    comp = np.searchsorted(np.cumsum(pi), rng.random(m))
    comp = np.minimum(comp, model.k - 1)
    mu = model.mean_w @ xs + model.mean_b
    fac = np.tril(model.chol_off, -1)
    idx = np.arange(model.dim_target)
    fac[:, idx, idx] = model.sigma_floor + np.exp(
        model.chol_diag_raw + model.chol_diag_cond @ xs)
    eps = standard_normal(rng, (m, model.dim_target))
    ys = mu[comp] + np.einsum("nts,ns->nt", fac[comp], eps)
    return model.target_mean + model.target_sd * ys


# ---------------------------------------------------------------------------
# Serialization


def mixture_to_dict(model: ConditionalMixture) -> dict:
    data = {"format": _FORMAT, "k": model.k,
            "sigma_floor": model.sigma_floor, "direction": model.direction,
            "condition_transform": model.condition_transform}
    for key in (*_PARAM_KEYS, "cond_mean", "cond_sd",
                "target_mean", "target_sd"):
        data[key] = np.asarray(getattr(model, key)).tolist()
    return data


def mixture_from_dict(data: dict) -> ConditionalMixture:
    if data.get("format") != _FORMAT:
        raise ValueError(f"unsupported mixture format {data.get('format')!r}")
    arrays = {key: np.asarray(data[key], dtype=np.float64)
              for key in (*_PARAM_KEYS, "cond_mean", "cond_sd",
                          "target_mean", "target_sd")
              if key in data}
    # files written before condition-dependent scales default to zero maps
    arrays.setdefault("chol_diag_cond", np.zeros_like(arrays["mean_w"]))
    return ConditionalMixture(
        k=int(data["k"]), sigma_floor=float(data["sigma_floor"]),
        direction=str(data["direction"]),
        condition_transform=str(data.get("condition_transform", "none")),
        **arrays)


def save_mixture(model: ConditionalMixture, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(mixture_to_dict(model), handle)


def load_mixture(path) -> ConditionalMixture:
    with open(path, "r", encoding="utf-8") as handle:
        return mixture_from_dict(json.load(handle))
