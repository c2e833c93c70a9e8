"""Command-line interface.

Subcommands mirror the library surface: simulate data, fit one-shot
posterior/likelihood estimators, run the ABC baseline, draw from oracle
posteriors, estimate divergences between draw files, and drive full
experiment grids. Output defaults under $SBILAB_OUT (or ./sbilab-out).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness, inference, metrics, models, oracle
from .rng import philox_stream

_DEF_OUT = os.environ.get("SBILAB_OUT", "sbilab-out")


def _out_path(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _add_model_args(parser, with_theta=True):
    parser.add_argument("--model", required=True,
                        choices=list(models.MODEL_NAMES))
    parser.add_argument("--n", type=int, required=True,
                        help="observation size")
    parser.add_argument("--summary", default=None,
                        help="gk only: octiles or hexadeciles")
    if with_theta:
        parser.add_argument("--theta", default=None,
                            help="comma-separated values, default truth")


def _spec(args) -> models.ModelSpec:
    theta = None
    if getattr(args, "theta", None):
        theta = tuple(float(v) for v in args.theta.split(","))
    return models.make_spec(args.model, args.n, args.summary, theta)


def _observed(spec, args) -> np.ndarray:
    if getattr(args, "obs", None):
        s = np.array([float(v) for v in args.obs.split(",")])
        if s.shape[0] != models.summary_dim(spec):
            raise SystemExit(f"--obs needs {models.summary_dim(spec)} values")
        return s
    rng = philox_stream(args.seed, spec.name, "observed")
    return models.simulate_observed(spec, rng)


def _cmd_simulate(args) -> int:
    spec = _spec(args)
    theta = np.asarray(spec.theta_true)
    rng = philox_stream(args.seed, spec.name, "simulate")
    thetas = np.tile(theta, (args.reps, 1))
    summ = models.simulate_summaries(spec, thetas, rng)
    path = _out_path(args, "summaries.csv")
    header = ",".join(f"s{i}" for i in range(summ.shape[1]))
    np.savetxt(path, summ, delimiter=",", header=header, comments="")
    print(f"wrote {args.reps} x {summ.shape[1]} summaries to {path}")
    return 0


def _fit_common(args, direction: str) -> int:
    spec = _spec(args)
    s_obs = _observed(spec, args)
    rng = philox_stream(args.seed, spec.name, direction, args.train_n)
    if direction == "npe":
        ds, mixture, report = inference.run_npe(
            spec, s_obs, args.train_n, rng, k=args.k, m_draws=args.m)
    else:
        ds, mixture, report = inference.run_nle(
            spec, s_obs, args.train_n, rng, k=args.k, m_draws=args.m)
    draws_path = _out_path(args, f"{direction}-draws.csv")
    inference.save_draws(ds, draws_path)
    from .cde import save_mixture

    mix_path = _out_path(args, f"{direction}-mixture.json")
    save_mixture(mixture, mix_path)
    print(f"{direction}: {len(ds)} draws -> {draws_path} "
          f"(val nll {report.val_nll:.4f}, epochs {report.epochs_run})")
    return 0


def _cmd_fit_npe(args) -> int:
    return _fit_common(args, "npe")


def _cmd_fit_nle(args) -> int:
    return _fit_common(args, "nle")


def _cmd_abc(args) -> int:
    spec = _spec(args)
    s_obs = _observed(spec, args)
    rng = philox_stream(args.seed, spec.name, "abc")
    cfg = inference.ABCSMCConfig(n_particles=args.particles,
                                 quantile=args.quantile,
                                 max_simulations=args.max_sims)
    ds = inference.abc_smc(spec, s_obs, rng, cfg)
    path = _out_path(args, "abc-draws.csv")
    inference.save_draws(ds, path)
    print(f"abc-smc: {len(ds)} particles, "
          f"{ds.info['n_simulations']} simulations -> {path}")
    return 0


def _cmd_oracle_sample(args) -> int:
    spec = _spec(args)
    s_obs = _observed(spec, args)
    rng = philox_stream(args.seed, spec.name, "oracle")
    draws = oracle.oracle_sample(spec, s_obs, args.m, rng)
    ds = inference.DrawSet(draws, np.full(len(draws), 1.0 / len(draws)),
                           "oracle")
    path = _out_path(args, "oracle-draws.csv")
    inference.save_draws(ds, path)
    print(f"oracle: {len(ds)} draws -> {path}")
    return 0


def _cmd_kld(args) -> int:
    p = inference.load_draws(args.p).draws
    q = inference.load_draws(args.q).draws
    est = metrics.knn_kld(p, q, k=args.k)
    print(f"kld {est.value:.6f} (n_p={est.n_p}, n_q={est.n_q}, k={est.k})")
    return 0


def _load_config(args) -> harness.ExperimentConfig:
    if args.config:
        with open(args.config, encoding="utf-8") as handle:
            cfg = harness.ExperimentConfig.from_json(handle.read())
    else:
        cfg = harness.ExperimentConfig()
    # flags override the file
    if args.model:
        cfg.model = args.model
    if args.method:
        cfg.method = args.method
    if args.n_list:
        cfg.n_list = [int(v) for v in args.n_list.split(",")]
    if args.rules:
        cfg.rules = args.rules.split(",")
    if args.reps is not None:
        cfg.replications = args.reps
    if args.master_seed is not None:
        cfg.master_seed = args.master_seed
    if args.m is not None:
        cfg.m_draws = args.m
    if args.paper_scale:
        cfg.replications = 100
    return cfg


def _experiment_exit(rows) -> int:
    errors = [r for r in rows if r.metric == "error"]
    for row in errors:
        print(f"error cell n={row.n} rule={row.rule} "
              f"rep={row.replication}: {row.note}", file=sys.stderr)
    return 1 if errors else 0


def _cmd_experiment(args) -> int:
    cfg = _load_config(args)
    rows, paths = harness.run_experiment(cfg, out_dir=args.out)
    print(f"{len(rows)} metric rows -> {paths.get('results', '(not saved)')}")
    return _experiment_exit(rows)


def _cmd_coverage_table(args) -> int:
    rows = harness.load_rows(args.results)
    table = harness.coverage_table(rows, param=args.param)
    path = _out_path(args, "coverage.csv")
    harness.save_coverage_table(table, path)
    for entry in table:
        print(entry)
    print(f"wrote {path}")
    return 0


def _cmd_incompat(args) -> int:
    cfg = _load_config(args)
    cfg.model = "ma2"
    rows = harness.incompatibility_study(cfg, args.delta0, out_dir=args.out)
    summary = harness.incompat_summary(
        [r for r in rows if r.metric == "kld_vs_oracle"])
    for rule, mean in zip(summary["rules"], summary["mean_kld"]):
        print(f"rule {rule}: mean kld {mean:.3f}")
    print(f"spearman(rule index, mean kld) = {summary['spearman']:.3f}")
    return _experiment_exit(rows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sbilab",
        description="simulation-based inference laboratory")
    parser.add_argument("--out", default=_DEF_OUT,
                        help="output directory (default $SBILAB_OUT)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate summary vectors")
    _add_model_args(p)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=_cmd_simulate)

    for name, fn in (("fit-npe", _cmd_fit_npe), ("fit-nle", _cmd_fit_nle)):
        p = sub.add_parser(name, help=f"one-shot {name[4:]} fit")
        _add_model_args(p)
        p.add_argument("--train-n", type=int, required=True)
        p.add_argument("--k", type=int, default=8)
        p.add_argument("--m", type=int, default=10000)
        p.add_argument("--seed", type=int, default=1)
        p.add_argument("--obs", default=None,
                       help="observed summaries, comma separated")
        p.set_defaults(func=fn)

    p = sub.add_parser("abc", help="adaptive ABC-SMC baseline")
    _add_model_args(p)
    p.add_argument("--particles", type=int, default=1000)
    p.add_argument("--quantile", type=float, default=0.5)
    p.add_argument("--max-sims", type=int, default=200000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--obs", default=None)
    p.set_defaults(func=_cmd_abc)

    p = sub.add_parser("oracle-sample", help="draw from an oracle posterior")
    _add_model_args(p)
    p.add_argument("--m", type=int, default=10000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--obs", default=None)
    p.set_defaults(func=_cmd_oracle_sample)

    p = sub.add_parser("kld", help="kNN divergence between two draw files")
    p.add_argument("--p", required=True, help="draws CSV treated as P")
    p.add_argument("--q", required=True, help="draws CSV treated as Q")
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(func=_cmd_kld)

    for name, fn in (("experiment", _cmd_experiment),
                     ("incompat", _cmd_incompat)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--model", default=None)
        p.add_argument("--method", default=None)
        p.add_argument("--n-list", default=None)
        p.add_argument("--rules", default=None)
        p.add_argument("--reps", type=int, default=None)
        p.add_argument("--m", type=int, default=None)
        p.add_argument("--master-seed", type=int, default=None)
        p.add_argument("--paper-scale", action="store_true",
                       help="full replication count (100 per cell)")
        if name == "incompat":
            p.add_argument("--delta0", type=float, required=True)
        p.set_defaults(func=fn)

    p = sub.add_parser("coverage-table",
                       help="aggregate hit rows into a coverage table")
    p.add_argument("--results", required=True)
    p.add_argument("--param", default=None)
    p.set_defaults(func=_cmd_coverage_table)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
