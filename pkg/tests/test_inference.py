"""NPE, NLE with random-walk Metropolis, and the ABC-SMC baseline."""

import numpy as np
import pytest
from scipy import stats

from sbilab import inference, models, oracle
from sbilab.cde import sample as mixture_sample
from sbilab.metrics import knn_kld
from sbilab.rng import philox_stream


# ---------------------------------------------------------------------------
# DrawSet plumbing


def test_drawset_validation():
    with pytest.raises(ValueError):
        inference.DrawSet(np.zeros((3, 2)), np.ones(2), "x")
    with pytest.raises(ValueError):
        inference.DrawSet(np.zeros((0, 2)), np.ones(0), "x")
    with pytest.raises(ValueError):
        inference.DrawSet(np.zeros((2, 1)), np.array([-1.0, 2.0]), "x")
    with pytest.raises(ValueError):
        inference.DrawSet(np.zeros((2, 1)), np.zeros(2), "x")


def test_draws_round_trip(tmp_path):
    rng = philox_stream("inf", "rt")
    ds = inference.DrawSet(rng.normal(size=(100, 3)),
                           rng.uniform(0.1, 1.0, size=100),
                           "npe", config_hash="abc123", seed=77,
                           info={"n_train": 1000})
    path = tmp_path / "draws.csv"
    inference.save_draws(ds, path)
    back = inference.load_draws(path)
    assert np.array_equal(back.draws, ds.draws)
    assert np.array_equal(back.weights, ds.weights)
    assert back.method == "npe"
    assert back.config_hash == "abc123"
    assert back.info == {"n_train": 1000}


def test_load_draws_without_sidecar(tmp_path):
    ds = inference.DrawSet(np.ones((5, 1)), np.ones(5), "nle")
    path = tmp_path / "d.csv"
    inference.save_draws(ds, path)
    (tmp_path / "d.csv.json").unlink()
    back = inference.load_draws(path)
    assert back.method == "unknown"
    assert np.array_equal(back.draws, ds.draws)


# ---------------------------------------------------------------------------
# Random-walk Metropolis


def test_accept_probability_values():
    assert inference.accept_probability(-1.0, -1.0) == 1.0
    assert inference.accept_probability(-5.0, -1.0) == 1.0
    assert inference.accept_probability(-1.0, -3.0) == np.exp(-2.0)


def test_detailed_balance_three_state_target():
    # symmetric proposal (probability 1/2 to each other state) plus the
    # Metropolis rule must satisfy pi_i P(i->j) = pi_j P(j->i) exactly
    pi = np.array([0.5, 0.3, 0.2])
    lp = np.log(pi)
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            flow_ij = pi[i] * 0.5 * inference.accept_probability(lp[i], lp[j])
            flow_ji = pi[j] * 0.5 * inference.accept_probability(lp[j], lp[i])
            assert abs(flow_ij - flow_ji) < 1e-12


def test_rwm_standard_normal_moments():
    cfg = inference.MCMCConfig(n_steps=150000)
    ds = inference.rwm_sample(lambda th: -0.5 * float(th[0] * th[0]),
                              np.array([2.0]),
                              philox_stream("inf", "rwm-n"), cfg)
    assert ds.draws.shape[0] == 100000
    assert abs(ds.draws.mean()) < 0.02
    assert abs(ds.draws.var() - 1.0) < 0.05
    assert abs(ds.info["acceptance_rate"] - 0.234) < 0.1


def test_rwm_bimodal_target_visits_both_modes():
    def log_target(th):
        x = float(th[0])
        return float(np.logaddexp(-0.5 * ((x - 1.0) / 0.3) ** 2,
                                  -0.5 * ((x + 1.0) / 0.3) ** 2))

    cfg = inference.MCMCConfig(n_steps=150000)
    ds = inference.rwm_sample(log_target, np.array([1.0]),
                              philox_stream("inf", "rwm-bi"), cfg)
    frac_pos = (ds.draws[:, 0] > 0).mean()
    assert 0.2 < frac_pos < 0.8
    assert abs(ds.draws.mean()) < 0.05


def test_rwm_flat_target_uniform_over_box():
    # constant likelihood over the stereo prior box: each marginal of
    # the chain must be uniform (KS on a thinned subsample, 1% level)
    spec = models.make_spec("stereo", 100)
    log_prior = models.log_prior_fn(spec)
    cfg = inference.MCMCConfig(n_steps=120000)
    ds = inference.rwm_sample(log_prior, np.array([100.0, 7.0, 0.0]),
                              philox_stream("inf", "rwm-flat"), cfg)
    thinned = ds.draws[::40]
    crit = 1.628 / np.sqrt(thinned.shape[0])
    for j, (lo, hi) in enumerate([(30.0, 200.0), (0.0, 15.0), (-3.0, 3.0)]):
        stat = stats.kstest(thinned[:, j], "uniform",
                            args=(lo, hi - lo)).statistic
        assert stat < crit, f"marginal {j}: {stat:.4f}"


def test_rwm_error_contracts():
    flat = lambda th: 0.0  # noqa: E731
    with pytest.raises(ValueError):
        inference.rwm_sample(lambda th: -np.inf, np.zeros(1),
                             philox_stream("inf", "e1"))
    with pytest.raises(ValueError):
        inference.rwm_sample(flat, np.zeros(1), philox_stream("inf", "e2"),
                             inference.MCMCConfig(n_steps=10,
                                                  burn_fraction=1.0))
    # a target that accepts nothing beyond the initial point
    def spike(th):
        return 0.0 if float(th[0]) == 0.0 else -np.inf

    with pytest.raises(RuntimeError):
        inference.rwm_sample(spike, np.zeros(1),
                             philox_stream("inf", "e3"),
                             inference.MCMCConfig(n_steps=3000))


# ---------------------------------------------------------------------------
# NPE / NLE on the conjugate toy


def test_npe_nle_toy_conjugate_and_agreement():
    spec = models.make_spec("toy", 100)
    s_obs = np.array([0.5])
    mean, var = models.toy_posterior_moments(0.5, 100)
    sd = np.sqrt(var)

    npe, _, _ = inference.run_npe(spec, s_obs, 10000,
                                  philox_stream("inf", "npe-toy"))
    nle, _, _ = inference.run_nle(spec, s_obs, 10000,
                                  philox_stream("inf", "nle-toy"))
    exact = oracle.toy_posterior_sample(0.5, 100, 10000,
                                        philox_stream("inf", "toy-ex"))
    for ds in (npe, nle):
        assert len(ds) == 10000
        assert abs(ds.draws.mean() - mean) < 0.1 * sd
        assert abs(ds.draws.std() - sd) < 0.1 * sd
        assert abs(knn_kld(exact, ds.draws).value) < 0.1
    assert abs(knn_kld(npe.draws, nle.draws).value) < 0.1

    assert npe.info["leaked_fraction"] >= 0.0
    assert npe.info["n_train"] == 10000
    assert nle.info["thin"] >= 1
    assert abs(nle.info["acceptance_rate"] - 0.234) < 0.1
    # thinning must leave no tied rows to poison neighbour distances
    assert np.unique(nle.draws, axis=0).shape[0] == len(nle)


def test_npe_amortization_across_observations():
    # one fitted mixture read at two different observed summaries must
    # match refit-from-scratch runs at those summaries
    spec = models.make_spec("toy", 100)
    s1, s2 = np.array([0.3]), np.array([0.9])
    _, mixture, _ = inference.run_npe(spec, s1, 10000,
                                      philox_stream("inf", "amort-fit"))
    rng = philox_stream("inf", "amort-draw")
    for s_obs, label in ((s1, "a"), (s2, "b")):
        amortized, _ = inference._truncated_mixture_draws(
            mixture, spec, s_obs, 10000, rng, 100)
        refit, _, _ = inference.run_npe(
            spec, s_obs, 10000, philox_stream("inf", "amort-refit", label))
        assert abs(knn_kld(refit.draws, amortized).value) < 0.1


def test_run_npe_rejects_bad_input():
    spec = models.make_spec("toy", 100)
    with pytest.raises(ValueError):
        inference.run_npe(spec, np.zeros(2), 1000,
                          philox_stream("inf", "npe-e1"))
    with pytest.raises(ValueError):
        inference.run_npe(spec, np.zeros(1), 50,
                          philox_stream("inf", "npe-e2"), k=8)


def test_run_npe_ma2_concentrates_at_large_n():
    spec = models.make_spec("ma2", 10000)
    s_obs, _ = oracle.ma2_moments(np.array([0.6, 0.2]), 10000)
    ds, _, _ = inference.run_npe(spec, s_obs, 100000,
                                 philox_stream("inf", "npe-ma2"))
    assert models.in_support(spec, ds.draws).all()
    sds = ds.draws.std(axis=0)
    assert np.all(sds < 0.1)
    assert np.all(np.abs(ds.draws.mean(axis=0) - [0.6, 0.2]) < 0.1)


# ---------------------------------------------------------------------------
# ABC-SMC baseline


def test_abc_smc_accept_all_returns_prior():
    spec = models.make_spec("toy", 100)
    cfg = inference.ABCSMCConfig(n_particles=2000,
                                 target_tolerance=np.inf)
    ds = inference.abc_smc(spec, np.array([0.4]),
                           philox_stream("inf", "abc-prior"), cfg)
    stat = stats.kstest(ds.draws[:, 0], "norm").statistic
    assert stat < 1.628 / np.sqrt(2000)
    assert ds.info["rounds"] == 0


def test_abc_smc_toy_posterior_mean():
    spec = models.make_spec("toy", 100)
    s_obs = np.array([0.5])
    cfg = inference.ABCSMCConfig(n_particles=1000,
                                 max_simulations=300000,
                                 min_improvement=0.005)
    ds = inference.abc_smc(spec, s_obs, philox_stream("inf", "abc-toy"), cfg)
    mean, var = models.toy_posterior_moments(0.5, 100)
    w = ds.weights / ds.weights.sum()
    est = float(ds.draws[:, 0] @ w)
    ess = 1.0 / float(w @ w)
    mc_sd = np.sqrt(var / ess)
    assert abs(est - mean) < 3.0 * mc_sd
    tols = ds.info["tolerances"]
    assert all(b < a for a, b in zip(tols, tols[1:]))
    assert ds.info["n_simulations"] >= cfg.n_particles * ds.info["rounds"]


def test_abc_smc_validation():
    spec = models.make_spec("toy", 100)
    with pytest.raises(ValueError):
        inference.abc_smc(spec, np.array([0.1]),
                          philox_stream("inf", "abc-e1"),
                          inference.ABCSMCConfig(n_particles=1))
    with pytest.raises(ValueError):
        inference.abc_smc(spec, np.zeros(2),
                          philox_stream("inf", "abc-e2"))
