"""Experiment grid runner and result persistence.

A run is declared by an ExperimentConfig, expanded over (n, rule,
replication) cells, each seeded by a hash of (master_seed, model, method,
n, rule, replication) so any cell can be reproduced in isolation.
Metric rows go to a deterministic CSV (byte-identical across reruns of
the same config); wall-clock timings and config echo go to a JSON
sidecar that is excluded from that guarantee.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from . import cde, inference, metrics, models, oracle
from .rng import philox_stream, stream_seed

__all__ = [
    "RULES",
    "n_schedule",
    "ExperimentConfig",
    "config_hash",
    "ResultRow",
    "save_rows",
    "load_rows",
    "run_experiment",
    "coverage_table",
    "incompatibility_study",
    "incompat_summary",
]

RULES = ("n", "nlogn", "n1.5", "n2")

_SCHEMA_LINE = "# sbilab-results schema=1"
_CSV_HEADER = ("model", "method", "n", "rule", "n_train", "replication",
               "seed", "metric", "value", "sim_budget", "note")

_CI_LEVELS = ((80, 0.80), (90, 0.90), (95, 0.95))


def n_schedule(n: int, rule: str) -> int:
    """Training-set size for observation size n under a growth rule.

    Rules: "n" -> n, "nlogn" -> ceil(n ln n), "n1.5" -> ceil(n^1.5),
    "n2" -> n^2.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if rule == "n":
        return n
    if rule == "nlogn":
        return max(1, math.ceil(n * math.log(n)))
    if rule == "n1.5":
        return math.ceil(n ** 1.5)
    if rule == "n2":
        return n * n
    raise ValueError(f"unknown rule {rule!r}; expected one of {RULES}")


@dataclass
class ExperimentConfig:
    """Declarative description of one experiment grid."""

    model: str = "toy"
    method: str = "npe"
    summary: str = ""
    n_list: list = field(default_factory=lambda: [100])
    rules: list = field(default_factory=lambda: list(RULES))
    replications: int = 20
    m_draws: int = 10000
    k: int = 8
    master_seed: int = 1
    theta_true: list = field(default_factory=list)
    compute_kld: bool = True
    compute_gaussianity: bool = False
    max_oversample: int = 100
    batch_size: int = 256
    step_size: float = 1e-3
    max_epochs: int = 300
    patience: int = 20
    out_dir: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def spec_for(self, n: int) -> models.ModelSpec:
        return models.make_spec(self.model, n, self.summary or None,
                                tuple(self.theta_true) or None)

    def fit_config(self) -> cde.FitConfig:
        return cde.FitConfig(batch_size=self.batch_size,
                             step_size=self.step_size,
                             max_epochs=self.max_epochs,
                             patience=self.patience)


def config_hash(cfg: ExperimentConfig) -> str:
    canon = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]


@dataclass
class ResultRow:
    """One metric value from one experiment cell (long format)."""

    model: str
    method: str
    n: int
    rule: str
    n_train: int
    replication: int
    seed: int
    metric: str
    value: float
    sim_budget: int
    note: str = ""
    wall_clock: float = 0.0  # sidecar only; kept out of the CSV


def _row_key(row: ResultRow):
    rule_idx = RULES.index(row.rule) if row.rule in RULES else len(RULES)
    return (row.model, row.method, row.n, rule_idx, row.replication,
            row.metric)


def save_rows(rows, path) -> None:
    """Deterministic CSV: sorted rows, repr-formatted values."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write(_SCHEMA_LINE + "\n")
        writer = csv.writer(handle)
        writer.writerow(_CSV_HEADER)
        for row in sorted(rows, key=_row_key):
            writer.writerow([row.model, row.method, row.n, row.rule,
                             row.n_train, row.replication, row.seed,
                             row.metric, repr(float(row.value)),
                             row.sim_budget, row.note])


def load_rows(path) -> list:
    rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(line for line in handle
                            if not line.startswith("#"))
        header = next(reader)
        if tuple(header) != _CSV_HEADER:
            raise ValueError(f"unexpected result header {header!r}")
        for rec in reader:
            rows.append(ResultRow(
                model=rec[0], method=rec[1], n=int(rec[2]), rule=rec[3],
                n_train=int(rec[4]), replication=int(rec[5]),
                seed=int(rec[6]), metric=rec[7], value=float(rec[8]),
                sim_budget=int(rec[9]), note=rec[10]))
    return rows


def effective_k(k: int, n_train: int) -> int:
    """Shrink the expert count on tiny training sets.

    Cells with fewer than ~25 pairs per expert are run with a smaller
    mixture (the N = n = 100 schedule cell uses k = 4); the realized
    value is recorded per cell as the k_eff metric.
    """
    return min(k, max(1, n_train // 25))


def _cell_rows(cfg: ExperimentConfig, n: int, rule: str, rep: int,
               s_obs=None, oracle_draws=None, label: str = "") -> list:
    """Run one (n, rule, replication) cell and return its metric rows."""
    method = cfg.method
    tag = label or method
    labels = (cfg.master_seed, cfg.model, tag, n, rule, rep)
    seed = stream_seed(*labels)
    spec = cfg.spec_for(n)
    n_train = n_schedule(n, rule)
    base = dict(model=cfg.model, method=method, n=n, rule=rule,
                n_train=n_train, replication=rep, seed=seed,
                sim_budget=n_train + 1)

    if s_obs is None:
        s_obs = models.simulate_observed(
            spec, philox_stream(*labels, "data"))
    method_rng = philox_stream(*labels, "method")
    k_eff = effective_k(cfg.k, n_train)
    if method == "npe":
        ds, _, report = inference.run_npe(
            spec, s_obs, n_train, method_rng, k=k_eff,
            m_draws=cfg.m_draws, fit_config=cfg.fit_config(),
            max_oversample=cfg.max_oversample)
    elif method == "nle":
        ds, _, report = inference.run_nle(
            spec, s_obs, n_train, method_rng, k=k_eff,
            m_draws=cfg.m_draws, fit_config=cfg.fit_config())
    else:
        raise ValueError(f"unknown method {method!r}")

    rows = []

    def add(metric, value, note=""):
        rows.append(ResultRow(metric=metric, value=float(value),
                              note=note, **base))

    truth = np.asarray(spec.theta_true)
    names = models.param_names(spec)
    mean = ds.draws.mean(axis=0)
    sd = ds.draws.std(axis=0)
    bias = metrics.posterior_mean_bias(ds.draws, truth)
    for j, name in enumerate(names):
        add(f"post_mean_{name}", mean[j])
        add(f"post_sd_{name}", sd[j])
        add(f"bias_{name}", bias[j])
    for tag_level, level in _CI_LEVELS:
        ci = np.atleast_2d(metrics.credible_interval(ds.draws, level=level))
        for j, name in enumerate(names):
            add(f"ci{tag_level}_lo_{name}", ci[j, 0])
            add(f"ci{tag_level}_hi_{name}", ci[j, 1])
            add(f"hit{tag_level}_{name}",
                float(ci[j, 0] <= truth[j] <= ci[j, 1]))
    add("k_eff", k_eff)
    add("fit_epochs", report.epochs_run)
    add("fit_val_nll", report.val_nll)
    if method == "npe":
        add("leaked_fraction", ds.info["leaked_fraction"])
    else:
        add("accept_rate", ds.info["acceptance_rate"])

    if cfg.compute_kld and spec.name != "stereo":
        if oracle_draws is None:
            oracle_draws = oracle.oracle_sample(
                spec, s_obs, cfg.m_draws, philox_stream(*labels, "oracle"))
        # forward order: oracle posterior is P, the method draws are Q
        add("kld_vs_oracle", metrics.knn_kld(oracle_draws, ds.draws).value)
    if cfg.compute_gaussianity:
        add("gauss_kld", metrics.gaussianity_kld(ds.draws).value)
    return rows


def run_experiment(cfg: ExperimentConfig, out_dir=None):
    """Run every cell of the grid; persist results if out_dir is set.

    Per-cell failures become a single metric="error" row with the message
    in the note column, and the run continues.

    Returns
    -------
    (rows, paths)
        All ResultRows plus a dict with "results" / "meta" paths (empty
        when no output directory was given).
    """
    out = out_dir if out_dir is not None else (cfg.out_dir or None)
    rows = []
    timings = []
    for n in cfg.n_list:
        for rule in cfg.rules:
            for rep in range(cfg.replications):
                started = time.perf_counter()
                try:
                    cell = _cell_rows(cfg, n, rule, rep)
                except Exception as err:  # noqa: BLE001 - cell isolation
                    seed = stream_seed(cfg.master_seed, cfg.model,
                                       cfg.method, n, rule, rep)
                    cell = [ResultRow(
                        model=cfg.model, method=cfg.method, n=n, rule=rule,
                        n_train=n_schedule(n, rule), replication=rep,
                        seed=seed, metric="error", value=1.0,
                        sim_budget=0,
                        note=f"{type(err).__name__}: {err}")]
                elapsed = time.perf_counter() - started
                for row in cell:
                    row.wall_clock = elapsed
                timings.append({"n": n, "rule": rule, "replication": rep,
                                "seconds": elapsed})
                rows.extend(cell)

    paths = {}
    if out:
        os.makedirs(out, exist_ok=True)
        results_path = os.path.join(out, "results.csv")
        save_rows(rows, results_path)
        meta = {
            "config": dataclasses.asdict(cfg),
            "config_hash": config_hash(cfg),
            "schema": 1,
            "timings": timings,
            "errors": [dataclasses.asdict(r) for r in rows
                       if r.metric == "error"],
        }
        meta_path = os.path.join(out, "meta.json")
        with open(meta_path, "w", encoding="utf-8") as handle:
            json.dump(meta, handle, indent=2, sort_keys=True)
        paths = {"results": results_path, "meta": meta_path}
    return rows, paths


def coverage_table(rows, param: str | None = None,
                   levels=(80, 90, 95)) -> list:
    """Realized coverage per (n, rule) cell, formatted like "c80/c90/c95".

    Returns a list of dicts, one per n, keyed by "n_obs" and each rule
    ("n_obs" rather than "n" so the rule named "n" keeps its own column).
    Picks the first parameter found in the rows unless one is named.
    """
    usable = [r for r in rows if r.metric.startswith("hit")]
    if not usable:
        raise ValueError("no coverage rows found")
    if param is None:
        param = usable[0].metric.split("_", 1)[1]
    cells = {}
    for row in usable:
        tag, name = row.metric.split("_", 1)
        if name != param:
            continue
        level = int(tag[3:])
        cells.setdefault((row.n, row.rule, level), []).append(row.value)
    ns = sorted({key[0] for key in cells})
    rules = [rule for rule in RULES
             if any(key[1] == rule for key in cells)]
    table = []
    for n in ns:
        entry = {"n_obs": n}
        for rule in rules:
            vals = []
            for level in levels:
                hits = cells.get((n, rule, level))
                vals.append("-" if not hits else
                            format(float(np.mean(hits)), ".2f"))
            entry[rule] = "/".join(vals)
        table.append(entry)
    return table


def save_coverage_table(table, path) -> None:
    rules = [key for key in table[0] if key != "n_obs"]
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["n_obs"] + rules)
        for entry in table:
            writer.writerow([entry["n_obs"]] + [entry[r] for r in rules])


def incompatibility_study(cfg: ExperimentConfig, delta0: float | None,
                          out_dir=None):
    """NPE-vs-oracle divergence across rules under a forced first summary.

    For each replication one MA(2) dataset is summarised, its lag-0
    autocovariance is overwritten with delta0, a tempered-SMC oracle
    sample is drawn once, and every rule's NPE cell is scored against it
    (paired within the replication). delta0=None leaves the summaries
    untouched and reduces to the plain experiment grid.
    """
    if cfg.model != "ma2":
        raise ValueError("the incompatibility study is defined for ma2")
    if delta0 is None:
        return run_experiment(cfg, out_dir)[0]
    rows = []
    label = f"npe-delta0={delta0!r}"
    for n in cfg.n_list:
        spec = cfg.spec_for(n)
        for rep in range(cfg.replications):
            data_rng = philox_stream(cfg.master_seed, cfg.model, label,
                                     n, "data", rep)
            s_obs = models.simulate_observed(spec, data_rng)
            s_obs = s_obs.copy()
            s_obs[0] = delta0
            oracle_rng = philox_stream(cfg.master_seed, cfg.model, label,
                                       n, "oracle", rep)
            oracle_draws = oracle.oracle_sample(
                spec, s_obs, cfg.m_draws, oracle_rng,
                smc_config=oracle.SMCConfig(n_particles=cfg.m_draws))
            for rule in cfg.rules:
                try:
                    cell = _cell_rows(cfg, n, rule, rep, s_obs=s_obs,
                                      oracle_draws=oracle_draws,
                                      label=label)
                except Exception as err:  # noqa: BLE001 - cell isolation
                    cell = [ResultRow(
                        model=cfg.model, method=cfg.method, n=n,
                        rule=rule, n_train=n_schedule(n, rule),
                        replication=rep,
                        seed=stream_seed(cfg.master_seed, cfg.model,
                                         label, n, rule, rep),
                        metric="error", value=1.0, sim_budget=0,
                        note=f"{type(err).__name__}: {err}")]
                rows.extend(cell)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_rows(rows, os.path.join(out_dir, "results.csv"))
    return rows


def incompat_summary(rows) -> dict:
    """Mean divergence per rule and its Spearman trend over rule index."""
    per_rule = {}
    for row in rows:
        if row.metric == "kld_vs_oracle":
            per_rule.setdefault(row.rule, []).append(row.value)
    rules = [rule for rule in RULES if rule in per_rule]
    if len(rules) < 2:
        raise ValueError("need divergence rows for at least two rules")
    means = [float(np.mean(per_rule[rule])) for rule in rules]
    rho = float(spearmanr(np.arange(len(rules)), means).statistic)
    return {"rules": rules, "mean_kld": means, "spearman": rho}
