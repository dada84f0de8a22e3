"""Experiment orchestration: evaluation sweeps, policy selection, policy
learning benchmarks and the tabular theorem-verification suite.

Replications are independent tasks keyed by ``(grid value, replication)``.
Every random draw inside a task is seeded from ``(cfg.seed, replication,
stream)``, so results do not depend on how tasks are spread over workers;
aggregation always runs in grid/replication order.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import (
    TabularPolicy,
    on_policy_value,
    policy_value_exact,
    rng_for,
)
from .envs.synthetic import (
    SyntheticEnvConfig,
    build_synthetic_env,
    make_logging_policy,
    make_target_policy,
    sample_historical,
    sample_long_experiment,
    sample_short_experiment,
)
from .envs.tabular import (
    action_posterior,
    dr_variance_terms,
    marginal_surrogate,
    random_tabular_env,
    random_tabular_policy,
    surrogate_weight_table,
    tabular_exact_estimator_expectation,
    tabular_exact_kernel_moments,
    tabular_noise_term_identity,
    tabular_weight_variance_identity,
)
from .estimators import (
    RewardModelConfig,
    WeightConfig,
    avg_estimate,
    dr_estimate,
    dr_kernel,
    estimate_surrogate_weights,
    fit_reward_models,
    ips_estimate,
    ips_kernel,
    lci_estimate,
    lope_estimate,
    lope_kernel,
)
from .learners import (
    LearnerConfig,
    dr_pg_kernel,
    exact_policy_gradient,
    init_policy,
    ips_pg_kernel,
    lope_pg_kernel,
    reg_based_policy,
    train_policy,
)

log = logging.getLogger(__name__)

SWEEPABLE = ("n", "lambda", "sigma_r", "epsilon", "sigma_s", "n_clusters")
ESTIMATORS = ("lci", "ips", "dr", "lope")
SKYLINE = "avg"
LEARNERS = ("ips_pg", "dr_pg", "lope_pg", "reg_based")
_ENV_FIELD = {"lambda": "lam", "sigma_r": "sigma_r", "epsilon": "epsilon", "sigma_s": "sigma_s", "n_clusters": "n_clusters"}


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed determined by ``seed`` and ``keys``."""
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def _map(fn: Callable, tasks: Sequence, workers: int) -> list:
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _param_str(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else _fmt(v)


# ----------------------------------------------------------------- configs
@dataclass(frozen=True)
class SweepConfig:
    """One evaluation (or selection) experiment over a grid of one parameter.

    ``n`` is the common size of the historical, short-term and long-term
    samples unless ``n`` itself is swept.
    """

    swept_parameter: str = "n"
    grid: Tuple[float, ...] = (200, 400, 600, 800, 1000)
    replications: int = 500
    env: SyntheticEnvConfig = field(default_factory=SyntheticEnvConfig)
    n: int = 500
    estimators: Tuple[str, ...] = ESTIMATORS
    include_skyline: bool = True
    reward: RewardModelConfig = field(default_factory=RewardModelConfig)
    weights: WeightConfig = field(default_factory=WeightConfig)
    fix_env_across_replications: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if self.swept_parameter not in SWEEPABLE:
            raise ValueError(f"swept_parameter must be one of {SWEEPABLE}")
        grid = tuple(float(v) for v in self.grid)
        if not grid:
            raise ValueError("grid must be non-empty")
        if self.replications < 2:
            raise ValueError("replications must be >= 2 (variance needs two draws)")
        unknown = set(self.estimators) - set(ESTIMATORS) - {SKYLINE}
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "estimators", tuple(self.estimators))
        for v in grid:
            self.cell(v)

    def cell(self, value: float) -> Tuple[SyntheticEnvConfig, int]:
        """Environment config and sample size at one grid value."""
        if self.swept_parameter == "n":
            if value < 1 or not float(value).is_integer():
                raise ValueError(f"sample size must be a positive integer, got {value}")
            return self.env, int(value)
        name = _ENV_FIELD[self.swept_parameter]
        v = int(value) if name == "n_clusters" else float(value)
        return self.env.replace(**{name: v}), self.n

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        """Inverse of :meth:`to_dict`; rebuilds a run from its manifest."""
        from .learners import _reward_config_from_dict, _weight_config_from_dict

        d = dict(d)
        if "env" in d:
            d["env"] = SyntheticEnvConfig.from_dict(d["env"])
        if "reward" in d:
            d["reward"] = _reward_config_from_dict(d["reward"])
        if "weights" in d:
            d["weights"] = _weight_config_from_dict(d["weights"])
        for k in ("grid", "estimators"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "swept_parameter": self.swept_parameter,
            "grid": list(self.grid),
            "replications": self.replications,
            "env": self.env.to_dict(),
            "n": self.n,
            "estimators": list(self.estimators),
            "include_skyline": self.include_skyline,
            "reward": _plain(self.reward),
            "weights": _plain(self.weights),
            "fix_env_across_replications": self.fix_env_across_replications,
            "seed": self.seed,
        }


def _plain(obj):
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _plain(v) for k, v in vars(obj).items()}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    return obj


@dataclass(frozen=True)
class MetricRow:
    estimator_name: str
    parameter_value: float
    mse: float
    squared_bias: float
    variance: float
    n_replications: int
    complete: bool = True


@dataclass(frozen=True)
class ReplicationFailure:
    parameter_value: float
    replication: int
    estimator_name: str
    message: str


@dataclass
class SweepReport:
    swept_parameter: str
    rows: List[MetricRow]
    failures: List[ReplicationFailure] = field(default_factory=list)

    def row(self, estimator: str, value: float) -> MetricRow:
        for r in self.rows:
            if r.estimator_name == estimator and r.parameter_value == float(value):
                return r
        raise KeyError((estimator, value))

    def estimators(self) -> List[str]:
        return list(dict.fromkeys(r.estimator_name for r in self.rows))

    def grid(self) -> List[float]:
        return sorted(set(r.parameter_value for r in self.rows))

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimator", "param", "mse", "bias2", "var", "R"])
            for r in self.rows:
                w.writerow(
                    [r.estimator_name, _param_str(r.parameter_value), _fmt(r.mse),
                     _fmt(r.squared_bias), _fmt(r.variance), r.n_replications]
                )

    @classmethod
    def from_csv(cls, path: Union[str, Path], swept_parameter: str = "param") -> "SweepReport":
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"estimator", "param", "mse", "bias2", "var", "R"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise ValueError(f"sweep CSV needs columns {sorted(need)}")
            for rec in reader:
                rows.append(
                    MetricRow(rec["estimator"], float(rec["param"]), float(rec["mse"]),
                              float(rec["bias2"]), float(rec["var"]), int(rec["R"]))
                )
        return cls(swept_parameter, rows)

    def write_charts(self, out_dir: Union[str, Path]) -> List[str]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for metric, title in (("mse", "MSE"), ("bias2", "Squared bias"), ("var", "Variance")):
            p = out_dir / f"{metric}.svg"
            p.write_text(render_svg(self, metric, title))
            paths.append(str(p))
        return paths


# ------------------------------------------------------------ replications
@dataclass(frozen=True)
class ReplicationResult:
    """Estimates and ground truth from one replication of one cell."""

    v_target: float
    v_logging: float
    v_logging_hat: float
    estimates: Dict[str, float]
    errors: Dict[str, str] = field(default_factory=dict)


def evaluation_replicate(cfg: SweepConfig, value: float, rep: int) -> ReplicationResult:
    """Sample D_H, D_S, D_E for one replication and run every estimator."""
    env_cfg, n = cfg.cell(value)
    env_seed = env_cfg.seed if cfg.fix_env_across_replications else derive_seed(cfg.seed, rep, 0)
    env = build_synthetic_env(env_cfg.replace(seed=env_seed))
    pi0 = make_logging_policy(env)
    pi1 = make_target_policy(env)
    weights_pop = env.contexts.weights
    v1 = policy_value_exact(pi1, env.q_table, weights_pop)
    v0 = policy_value_exact(pi0, env.q_table, weights_pop)
    dh = sample_historical(env, pi0, n, derive_seed(cfg.seed, rep, 1))
    wanted = set(cfg.estimators) | ({SKYLINE} if cfg.include_skyline else set())

    est: Dict[str, float] = {}
    errs: Dict[str, str] = {}
    nuisance: dict = {}

    def bundle():
        if "bundle" not in nuisance:
            nuisance["bundle"] = fit_reward_models(dh, env.n_actions, cfg.reward)
        return nuisance["bundle"]

    def run(name, fn):
        if name not in wanted:
            return
        try:
            est[name] = float(fn().value)
        except Exception as exc:  # recorded per cell, never fatal
            errs[name] = f"{type(exc).__name__}: {exc}"

    run(SKYLINE, lambda: avg_estimate(sample_long_experiment(env, pi1, n, derive_seed(cfg.seed, rep, 3))))
    run("lci", lambda: lci_estimate(sample_short_experiment(env, pi1, n, derive_seed(cfg.seed, rep, 2)), bundle().q_hat_xs))
    run("ips", lambda: ips_estimate(dh, pi1))
    run("dr", lambda: dr_estimate(dh, pi1, bundle().q_hat_xa))

    def lope():
        ds = None
        if cfg.weights.use_short_experiment_for_weights:
            ds = sample_short_experiment(env, pi1, n, derive_seed(cfg.seed, rep, 2))
        wm = estimate_surrogate_weights(dh, pi1, pi0, cfg.weights, short_experiment=ds)
        return lope_estimate(dh, pi1, wm, bundle())

    run("lope", lope)
    return ReplicationResult(v1, v0, on_policy_value(dh), est, errs)


ReplicateFn = Callable[[SweepConfig, float, int], ReplicationResult]


def _safe_replicate(fn: ReplicateFn, cfg: SweepConfig, task: Tuple[float, int]):
    value, rep = task
    try:
        return fn(cfg, value, rep)
    except Exception as exc:
        return f"{type(exc).__name__}: {exc}"


def _run_cells(cfg: SweepConfig, workers: int, replicate: Optional[ReplicateFn]):
    fn = partial(_safe_replicate, replicate or evaluation_replicate, cfg)
    tasks = [(v, r) for v in cfg.grid for r in range(cfg.replications)]
    log.info("running %d replications over %s=%s", len(tasks), cfg.swept_parameter, list(cfg.grid))
    results = _map(fn, tasks, workers)
    cells: Dict[float, list] = {v: [] for v in cfg.grid}
    for (v, r), res in zip(tasks, results):
        cells[v].append((r, res))
    return cells


def _names(cfg: SweepConfig) -> List[str]:
    names = list(cfg.estimators)
    if cfg.include_skyline and SKYLINE not in names:
        names.append(SKYLINE)
    return names


def metric_row(name: str, value: float, errors: np.ndarray, expected: int) -> MetricRow:
    """MSE with its exact split into squared bias and population variance."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        return MetricRow(name, float(value), float("nan"), float("nan"), float("nan"), 0, False)
    mse = float(np.mean(e**2))
    bias2 = float(np.mean(e) ** 2)
    var = float(np.var(e))
    return MetricRow(name, float(value), mse, bias2, var, int(e.size), int(e.size) == expected)


def run_evaluation_sweep(
    cfg: SweepConfig, workers: int = 1, replicate: Optional[ReplicateFn] = None
) -> SweepReport:
    """MSE, squared bias and variance of every estimator at every grid value.

    Errors are taken against each replication's own ground truth, because
    the environment (and so ``V(pi1)``) is redrawn per replication unless
    ``fix_env_across_replications`` is set.
    """
    cells = _run_cells(cfg, workers, replicate)
    rows, failures = [], []
    for v in cfg.grid:
        errs: Dict[str, list] = {k: [] for k in _names(cfg)}
        for rep, res in cells[v]:
            if isinstance(res, str):
                failures.append(ReplicationFailure(v, rep, "*", res))
                continue
            for k in errs:
                if k in res.estimates:
                    errs[k].append(res.estimates[k] - res.v_target)
                else:
                    failures.append(ReplicationFailure(v, rep, k, res.errors.get(k, "missing estimate")))
        for k, e in errs.items():
            rows.append(metric_row(k, v, np.asarray(e), cfg.replications))
    for f in failures:
        log.warning("replication %d at %s=%g failed for %s: %s", f.replication, cfg.swept_parameter,
                    f.parameter_value, f.estimator_name, f.message)
    return SweepReport(cfg.swept_parameter, rows, failures)


# --------------------------------------------------------------- selection
@dataclass(frozen=True)
class SelectionRow:
    estimator_name: str
    parameter_value: float
    accuracy: float
    n_replications: int


@dataclass
class SelectionReport:
    swept_parameter: str
    rows: List[SelectionRow]
    failures: List[ReplicationFailure] = field(default_factory=list)

    def accuracy(self, estimator: str, value: float) -> float:
        for r in self.rows:
            if r.estimator_name == estimator and r.parameter_value == float(value):
                return r.accuracy
        raise KeyError((estimator, value))

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["estimator", "param", "accuracy", "R"])
            for r in self.rows:
                w.writerow([r.estimator_name, _param_str(r.parameter_value), _fmt(r.accuracy), r.n_replications])


def run_selection_experiment(
    cfg: SweepConfig, workers: int = 1, replicate: Optional[ReplicateFn] = None
) -> SelectionReport:
    """Fraction of replications in which an estimator ranks pi1 against pi0 correctly.

    ``V_hat(pi0)`` is the on-policy mean of D_H; success means
    ``sign(V_hat(pi1) - V_hat(pi0)) == sign(V(pi1) - V(pi0))``.
    """
    cells = _run_cells(cfg, workers, replicate)
    rows, failures = [], []
    for v in cfg.grid:
        hits: Dict[str, list] = {k: [] for k in _names(cfg)}
        for rep, res in cells[v]:
            if isinstance(res, str):
                failures.append(ReplicationFailure(v, rep, "*", res))
                continue
            truth = np.sign(res.v_target - res.v_logging)
            for k in hits:
                if k in res.estimates:
                    hits[k].append(np.sign(res.estimates[k] - res.v_logging_hat) == truth)
                else:
                    failures.append(ReplicationFailure(v, rep, k, res.errors.get(k, "missing estimate")))
        for k, h in hits.items():
            acc = float(np.mean(h)) if h else float("nan")
            rows.append(SelectionRow(k, v, acc, len(h)))
    return SelectionReport(cfg.swept_parameter, rows, failures)


# --------------------------------------------------------------------- OPL
@dataclass(frozen=True)
class OplConfig:
    """Policy-learning benchmark; only historical data is sampled."""

    swept_parameter: str = "n"
    grid: Tuple[float, ...] = (500,)
    replications: int = 50
    env: SyntheticEnvConfig = field(default_factory=SyntheticEnvConfig)
    n: int = 500
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    learners: Tuple[str, ...] = LEARNERS
    fix_env_across_replications: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", tuple(float(v) for v in self.grid))
        object.__setattr__(self, "learners", tuple(self.learners))
        if "lope_pg" not in self.learners:
            raise ValueError("values are reported relative to lope_pg, which must be included")
        unknown = set(self.learners) - set(LEARNERS)
        if unknown:
            raise ValueError(f"unknown learners {sorted(unknown)}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        self._sweep()

    def _sweep(self) -> SweepConfig:
        return SweepConfig(self.swept_parameter, self.grid, max(2, self.replications), self.env, self.n, seed=self.seed)

    def cell(self, value: float) -> Tuple[SyntheticEnvConfig, int]:
        return self._sweep().cell(value)

    def to_dict(self) -> dict:
        return {
            "swept_parameter": self.swept_parameter,
            "grid": list(self.grid),
            "replications": self.replications,
            "env": self.env.to_dict(),
            "n": self.n,
            "learner": self.learner.to_dict(),
            "learners": list(self.learners),
            "fix_env_across_replications": self.fix_env_across_replications,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class OplRow:
    learner: str
    parameter_value: float
    mean_value: float
    relative_value: float
    n_replications: int


@dataclass
class OplReport:
    swept_parameter: str
    rows: List[OplRow]
    failures: List[ReplicationFailure] = field(default_factory=list)

    def row(self, learner: str, value: float) -> OplRow:
        for r in self.rows:
            if r.learner == learner and r.parameter_value == float(value):
                return r
        raise KeyError((learner, value))

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["learner", "param", "mean_value", "relative_value", "R"])
            for r in self.rows:
                w.writerow([r.learner, _param_str(r.parameter_value), _fmt(r.mean_value),
                            _fmt(r.relative_value), r.n_replications])


def opl_replicate(cfg: OplConfig, value: float, rep: int) -> Dict[str, float]:
    """Exact values of the policies trained by every learner in one replication."""
    env_cfg, n = cfg.cell(value)
    env_seed = env_cfg.seed if cfg.fix_env_across_replications else derive_seed(cfg.seed, rep, 0)
    env = build_synthetic_env(env_cfg.replace(seed=env_seed))
    pi0 = make_logging_policy(env)
    dh = sample_historical(env, pi0, n, derive_seed(cfg.seed, rep, 1))
    w = env.contexts.weights
    out = {}
    for name in cfg.learners:
        if name == "reg_based":
            policy = reg_based_policy(dh, cfg.learner.reward, env.n_actions)
        else:
            lc = LearnerConfig.from_dict({**cfg.learner.to_dict(), "gradient_estimator": name})
            policy = train_policy(dh, lc, logging=pi0).model.to_tabular(env.contexts)
        out[name] = policy_value_exact(policy, env.q_table, w)
    return out


def _safe_opl(cfg: OplConfig, task):
    value, rep = task
    try:
        return opl_replicate(cfg, value, rep)
    except Exception as exc:
        return f"{type(exc).__name__}: {exc}"


def run_opl_experiment(cfg: OplConfig, workers: int = 1) -> OplReport:
    """Mean exact value of each learned policy, also relative to LOPE-PG's mean."""
    tasks = [(v, r) for v in cfg.grid for r in range(cfg.replications)]
    results = _map(partial(_safe_opl, cfg), tasks, workers)
    rows, failures = [], []
    for v in cfg.grid:
        vals: Dict[str, list] = {k: [] for k in cfg.learners}
        for (tv, rep), res in zip(tasks, results):
            if tv != v:
                continue
            if isinstance(res, str):
                failures.append(ReplicationFailure(v, rep, "*", res))
                continue
            for k in vals:
                vals[k].append(res[k])
        means = {k: float(np.mean(x)) if x else float("nan") for k, x in vals.items()}
        ref = means["lope_pg"]
        for k in cfg.learners:
            rows.append(OplRow(k, v, means[k], means[k] / ref if ref != 0 else float("nan"), len(vals[k])))
    return OplReport(cfg.swept_parameter, rows, failures)


# ------------------------------------------------------------ theorem suite
@dataclass(frozen=True)
class TheoremCheck:
    name: str
    max_gap: float
    tolerance: float
    passed: bool
    detail: str = ""


@dataclass
class TheoremReport:
    checks: List[TheoremCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def max_identity_gap(self) -> float:
        gaps = [c.max_gap for c in self.checks if c.name != "negative_control"]
        return max(gaps) if gaps else 0.0

    def check(self, name: str) -> TheoremCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "max_identity_gap": self.max_identity_gap,
                "checks": [asdict(c) for c in self.checks]}


def _h_bar(tab, h_xas: np.ndarray) -> np.ndarray:
    """``E_{p(s|x,a)}[h(x,a,s)]``."""
    return np.einsum("xas,xas->xa", tab.p_s_given_xa, h_xas)


def _bayes_weights(tab, pi0: TabularPolicy, pi1: TabularPolicy) -> np.ndarray:
    return np.einsum("xsa,xa->xs", action_posterior(tab, pi0), pi1.probs / pi0.probs)


def _fd_gradient(model, tab, h: float = 1e-4) -> np.ndarray:
    X = tab.contexts.features

    def value(theta):
        return policy_value_exact(model.with_theta(theta).probs(X), tab.q_xa, tab.p_x)

    eye = np.eye(model.n_params)
    return np.array([(value(model.theta + h * e) - value(model.theta - h * e)) / (2 * h) for e in eye])


def run_theorem_suite(seed: int = 0, n_envs: int = 10, same_policy: bool = False) -> TheoremReport:
    """Execute every exactness check on seeded random tabular environments.

    With ``same_policy=True`` the target policy equals the logging policy,
    in which case every identity gap should be zero up to rounding.
    """
    gaps: Dict[str, List[float]] = {k: [] for k in (
        "ips_dr_unbiased", "lope_surrogacy", "lope_cpc", "bayes_weight", "weight_variance",
        "noise_term", "dr_variance", "pg_unbiased", "pg_finite_difference")}
    negatives: List[float] = []
    nonneg_ok = True
    for i in range(n_envs):
        tab = random_tabular_env(derive_seed(seed, i, 1))
        sur = random_tabular_env(derive_seed(seed, i, 2), surrogacy=True)
        X, A, S = tab.q_xas.shape
        pi0 = random_tabular_policy(seed, X, A, i, 0)
        pi1 = pi0 if same_policy else random_tabular_policy(seed, X, A, i, 1)
        v1 = policy_value_exact(pi1, tab.q_xa, tab.p_x)
        rng = rng_for(seed, i, 99)
        q_hat = rng.uniform(-1, 1, (X, A))
        for k in (ips_kernel(pi0, pi1), dr_kernel(pi0, pi1, q_hat)):
            gaps["ips_dr_unbiased"].append(abs(tabular_exact_estimator_expectation(tab, k, pi0) - v1))

        # surrogacy: h_hat = 0 with Bayes-rule weights
        v1s = policy_value_exact(pi1, sur.q_xa, sur.p_x)
        k = lope_kernel(_bayes_weights(sur, pi0, pi1), np.zeros(sur.q_xas.shape), np.zeros(X))
        gaps["lope_surrogacy"].append(abs(tabular_exact_estimator_expectation(sur, k, pi0) - v1s))

        # CPC: h_hat = q + phi(x, s)
        phi = rng.uniform(-2, 2, (X, 1, S))
        h = tab.q_xas + phi
        h_pi = (pi1.probs * _h_bar(tab, h)).sum(axis=1)
        k = lope_kernel(_bayes_weights(tab, pi0, pi1), h, h_pi)
        gaps["lope_cpc"].append(abs(tabular_exact_estimator_expectation(tab, k, pi0) - v1))

        gaps["bayes_weight"].append(float(np.max(np.abs(_bayes_weights(tab, pi0, pi1) - surrogate_weight_table(tab, pi0, pi1)))))

        lhs, rhs = tabular_weight_variance_identity(tab, pi0, pi1)
        gaps["weight_variance"].append(abs(lhs - rhs))
        nonneg_ok &= lhs >= -1e-12
        lhs, rhs = tabular_noise_term_identity(tab, pi0, pi1)
        gaps["noise_term"].append(abs(lhs - rhs))
        nonneg_ok &= lhs >= -1e-12

        var = tabular_exact_kernel_moments(tab, dr_kernel(pi0, pi1, q_hat), pi0)[1]
        gaps["dr_variance"].append(abs(var - sum(dr_variance_terms(tab, pi0, pi1, q_hat))))

        # policy gradients at a random linear-softmax parameter
        model = init_policy("linear", X, A)
        model = model.with_theta(rng.normal(0.0, 0.5, model.n_params))
        feats = tab.contexts.features
        truth = exact_policy_gradient(model, tab.contexts, tab.q_xa)
        gaps["pg_finite_difference"].append(float(np.max(np.abs(truth - _fd_gradient(model, tab)))))
        post = action_posterior(tab, pi0)
        for kern in (
            ips_pg_kernel(model, feats, pi0),
            dr_pg_kernel(model, feats, pi0, q_hat),
            lope_pg_kernel(model, feats, pi0, post, tab.q_xas, tab.q_xa),
        ):
            g = tabular_exact_estimator_expectation(tab, kern, pi0)
            gaps["pg_unbiased"].append(float(np.max(np.abs(g - truth))))

        # negative control: action-dependent error on a surrogacy-violating env
        bad = tab.q_xas + rng.uniform(-1, 1, (X, A, 1))
        k = lope_kernel(_bayes_weights(tab, pi0, pi1), bad, (pi1.probs * _h_bar(tab, bad)).sum(axis=1))
        negatives.append(abs(tabular_exact_estimator_expectation(tab, k, pi0) - v1))

    tol = {"bayes_weight": 1e-12, "weight_variance": 1e-12, "noise_term": 1e-12, "dr_variance": 1e-12,
           "pg_finite_difference": 1e-5, "pg_unbiased": 1e-8}
    checks = []
    for name, g in gaps.items():
        t = tol.get(name, 1e-10)
        m = float(max(g))
        ok = m <= t and (nonneg_ok if name in ("weight_variance", "noise_term") else True)
        checks.append(TheoremCheck(name, m, t, ok))
    neg = float(min(negatives))
    checks.append(TheoremCheck(
        "negative_control", neg, 1e-6, same_policy or neg > 1e-6,
        "smallest exact LOPE bias over envs with an action-dependent reward-model error",
    ))
    return TheoremReport(checks)


# -------------------------------------------------------------------- SVG
_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f", "#8c564b", "#17becf")


def _nice(v: float) -> str:
    return format(v, ".3g")


def render_svg(report: SweepReport, metric: str, title: str = "", log_y: bool = True) -> str:
    """Line chart of one metric against the swept parameter.

    A pure function of the report rows, so re-rendering a stored CSV yields
    identical bytes.
    """
    attr = {"mse": "mse", "bias2": "squared_bias", "var": "variance"}[metric]
    width, height = 560, 380
    left, right, top, bottom = 70, 130, 40, 50
    pw, ph = width - left - right, height - top - bottom
    grid = report.grid()
    names = report.estimators()
    series = {}
    for name in names:
        pts = []
        for r in report.rows:
            if r.estimator_name == name and math.isfinite(getattr(r, attr)):
                pts.append((r.parameter_value, getattr(r, attr)))
        series[name] = sorted(pts)
    ys = [y for pts in series.values() for _, y in pts]
    positive = [y for y in ys if y > 0]
    if log_y and positive:
        floor = min(positive) / 10.0
        lo, hi = math.floor(math.log10(floor)), math.ceil(math.log10(max(positive)))
        hi = max(hi, lo + 1)

        def ty(y):
            return top + ph * (hi - math.log10(max(y, floor))) / (hi - lo)

        yticks = [(top + ph * (hi - e) / (hi - lo), f"1e{e}") for e in range(lo, hi + 1)]
    else:
        lo = min(ys, default=0.0)
        hi = max(ys, default=1.0)
        if hi == lo:
            hi = lo + 1.0

        def ty(y):
            return top + ph * (hi - y) / (hi - lo)

        yticks = [(ty(lo + k * (hi - lo) / 4), _nice(lo + k * (hi - lo) / 4)) for k in range(5)]
    xlo, xhi = (min(grid), max(grid)) if grid else (0.0, 1.0)
    if xhi == xlo:
        xhi = xlo + 1.0

    def tx(x):
        return left + pw * (x - xlo) / (xhi - xlo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{left + pw / 2:.2f}" y="24" text-anchor="middle" font-family="sans-serif" font-size="15">{title or metric}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for y, label in yticks:
        out.append(f'<line x1="{left - 4}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#dddddd"/>')
        out.append(f'<text x="{left - 8}" y="{y + 4:.2f}" text-anchor="end" font-family="sans-serif" font-size="11">{label}</text>')
    for x in grid:
        out.append(f'<text x="{tx(x):.2f}" y="{top + ph + 18}" text-anchor="middle" font-family="sans-serif" font-size="11">{_nice(x)}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" text-anchor="middle" font-family="sans-serif" font-size="12">{report.swept_parameter}</text>')
    for i, name in enumerate(names):
        color = "#999999" if name == SKYLINE else _PALETTE[i % len(_PALETTE)]
        pts = series[name]
        if pts:
            path = " ".join(f"{tx(x):.2f},{ty(y):.2f}" for x, y in pts)
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path}"/>')
            for x, y in pts:
                out.append(f'<circle cx="{tx(x):.2f}" cy="{ty(y):.2f}" r="3" fill="{color}"/>')
        ly = top + 14 + 18 * i
        out.append(f'<line x1="{left + pw + 12}" y1="{ly}" x2="{left + pw + 32}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 38}" y="{ly + 4}" font-family="sans-serif" font-size="12">{name.upper()}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
