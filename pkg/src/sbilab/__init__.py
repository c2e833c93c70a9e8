"""Simulation-based Bayesian inference laboratory.

One-shot neural posterior and likelihood estimation with a Gaussian
mixture-of-experts density class, benchmark simulators with tractable
oracle posteriors, sample-based calibration metrics, and a reproducible
experiment harness.
"""

from .cde import (ConditionalMixture, FitConfig, FitReport, TrainingSet,
                  fit, load_mixture, log_density, make_training_set, sample,
                  save_mixture)
from .harness import (ExperimentConfig, ResultRow, coverage_table,
                      incompat_summary, incompatibility_study, n_schedule,
                      run_experiment)
from .inference import (ABCSMCConfig, DrawSet, MCMCConfig, abc_smc,
                        accept_probability, load_draws, run_nle, run_npe,
                        rwm_sample, save_draws)
from .metrics import (CoverageReport, KLDEstimate, coverage,
                      credible_interval, gaussianity_kld, knn_kld,
                      posterior_mean_bias)
from .models import (ModelSpec, in_support, log_prior, make_spec,
                     prior_bounds, prior_sample, simulate_observed,
                     simulate_summaries, summary_dim)
from .oracle import (GaussianSummaryLikelihood, SMCConfig,
                     TemperingSchedule, gk_order_stat_moments, ma2_moments,
                     make_summary_likelihood, oracle_log_posterior,
                     oracle_sample, tempered_smc, toy_posterior_sample)
from .rng import philox_stream, standard_normal, stream_seed, uniform_open

__version__ = "0.1.0"
