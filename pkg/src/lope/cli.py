"""Command-line interface.

Exit codes: 0 success, 1 validation error (bad flags, bad inputs, failed
precondition), 2 runtime failure.  Every command writes ``manifest.json``
into its output directory.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import sys
from importlib import metadata
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import ContextSet, HistoricalDataset, TabularPolicy
from .envs.synthetic import (
    SyntheticEnvConfig,
    build_synthetic_env,
    dump_params_csv,
    make_logging_policy,
    make_target_policy,
    sample_historical,
)
from .estimators import (
    RewardModelConfig,
    WeightConfig,
    dr_estimate,
    estimate_surrogate_weights,
    fit_reward_models,
    ips_estimate,
    lope_estimate,
)
from .harness import (
    ESTIMATORS,
    SKYLINE,
    OplConfig,
    SweepConfig,
    SweepReport,
    render_svg,
    run_evaluation_sweep,
    run_opl_experiment,
    run_selection_experiment,
    run_theorem_suite,
)
from .learners import LearnerConfig, _reward_config_from_dict, _weight_config_from_dict, train_policy

log = logging.getLogger("lope")


class UsageError(Exception):
    """Invalid command line; reported with exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _grid(text: str) -> List[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must be comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("grid must contain at least one value")
    return vals


def _names(text: str) -> List[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _read_json(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(p) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path} must contain a JSON object")
    return data


def _experiment(cfg: dict):
    """Split a config JSON into env config and the remaining experiment keys.

    A file is either a bare environment config or an object with an
    ``env`` entry next to experiment keys such as ``n``, ``reward``,
    ``weights`` and ``learner``.
    """
    if "env" in cfg:
        rest = {k: v for k, v in cfg.items() if k != "env"}
        return SyntheticEnvConfig.from_dict(cfg["env"]), rest
    return SyntheticEnvConfig.from_dict(cfg), {}


def _estimator_configs(rest: dict):
    reward = _reward_config_from_dict(rest["reward"]) if "reward" in rest else RewardModelConfig()
    weights = _weight_config_from_dict(rest["weights"]) if "weights" in rest else WeightConfig()
    return reward, weights


class Run:
    """Output directory plus manifest bookkeeping for one command."""

    def __init__(self, command: str, out: str, config: dict, seed: Optional[int]):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "config": config,
            "seed": seed,
            "version": _version(),
            "started_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "outputs": [],
        }

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.manifest["outputs"].append(str(p))
        return p

    def add(self, paths: List[str]) -> None:
        self.manifest["outputs"].extend(paths)

    def finish(self) -> None:
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(self.manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


# ---------------------------------------------------------------- commands
def cmd_oracle_check(args) -> int:
    report = run_theorem_suite(args.seed, n_envs=args.n_envs)
    for c in report.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {c.name:22s} gap={c.max_gap:.3e} tol={c.tolerance:.0e}")
    print(f"max identity gap: {report.max_identity_gap:.3e}")
    if args.out:
        run = Run("oracle-check", args.out, {"n_envs": args.n_envs}, args.seed)
        with open(run.path("oracle_check.json"), "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
        run.finish()
    return 0 if report.passed else 2


def _load_dataset(args, policy: TabularPolicy) -> HistoricalDataset:
    contexts = None
    if args.contexts:
        feats = np.loadtxt(args.contexts, delimiter=",", ndmin=2)
        contexts = ContextSet.uniform(feats)
    dh = HistoricalDataset.from_csv(args.data)
    if len(dh) == 0:
        raise ValueError(f"{args.data}: dataset is empty; estimators need at least one record")
    if contexts is None:
        # without features each user is its own one-hot context
        contexts = ContextSet.uniform(np.eye(policy.n_users))
    return dh.with_contexts(contexts)


def cmd_estimate(args) -> int:
    policy = TabularPolicy.from_dict(_read_json(args.policy))
    cfg = _read_json(args.config)
    dh = _load_dataset(args, policy)
    reward, weights = _estimator_configs(cfg)
    n_actions = policy.n_actions
    if args.estimator == "ips":
        rep = ips_estimate(dh, policy)
    elif args.estimator == "dr":
        rep = dr_estimate(dh, policy, fit_reward_models(dh, n_actions, reward).q_hat_xa)
    else:
        if not args.logging:
            raise ValueError("the lope estimator needs --logging (logging policy JSON)")
        logging_policy = TabularPolicy.from_dict(_read_json(args.logging))
        wm = estimate_surrogate_weights(dh, policy, logging_policy, weights)
        rep = lope_estimate(dh, policy, wm, fit_reward_models(dh, n_actions, reward))
    out = rep.to_dict()
    print(json.dumps(out))
    if args.out:
        run = Run("estimate", args.out, {"estimator": args.estimator, **cfg}, None)
        with open(run.path("estimate.json"), "w") as fh:
            json.dump(out, fh, indent=2)
        run.finish()
    return 0


def _sweep_config(args) -> SweepConfig:
    env, rest = _experiment(_read_json(args.config))
    reward, weights = _estimator_configs(rest)
    estimators = tuple(_names(args.estimators)) if args.estimators else ESTIMATORS
    return SweepConfig(
        swept_parameter=args.param,
        grid=tuple(args.grid),
        replications=args.replications,
        env=env,
        n=int(rest.get("n", 500)),
        estimators=tuple(e for e in estimators if e != SKYLINE),
        include_skyline=not args.no_skyline,
        reward=reward,
        weights=weights,
        fix_env_across_replications=bool(rest.get("fix_env_across_replications", args.fix_env)),
        seed=args.seed,
    )


def cmd_sweep(args) -> int:
    cfg = _sweep_config(args)
    run = Run("sweep", args.out, cfg.to_dict(), cfg.seed)
    report = run_evaluation_sweep(cfg, workers=args.workers)
    report.to_csv(run.path("sweep.csv"))
    run.add(report.write_charts(run.dir))
    if report.failures:
        with open(run.path("failures.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["param", "replication", "estimator", "message"])
            for f in report.failures:
                w.writerow([f.parameter_value, f.replication, f.estimator_name, f.message])
    run.finish()
    for r in report.rows:
        print(f"{r.estimator_name:5s} {cfg.swept_parameter}={r.parameter_value:g} mse={r.mse:.4g} "
              f"bias2={r.squared_bias:.4g} var={r.variance:.4g} R={r.n_replications}")
    return 0


def cmd_select(args) -> int:
    cfg = _sweep_config(args)
    run = Run("select", args.out, cfg.to_dict(), cfg.seed)
    report = run_selection_experiment(cfg, workers=args.workers)
    report.to_csv(run.path("selection.csv"))
    run.finish()
    for r in report.rows:
        print(f"{r.estimator_name:5s} {cfg.swept_parameter}={r.parameter_value:g} accuracy={r.accuracy:.3f} R={r.n_replications}")
    return 0


def cmd_learn(args) -> int:
    cfg_dict = _read_json(args.config)
    lc = LearnerConfig.from_dict(cfg_dict)
    logging_policy = TabularPolicy.from_dict(_read_json(args.logging)) if args.logging else None
    if logging_policy is None and lc.gradient_estimator == "lope_pg":
        raise ValueError("lope_pg needs --logging (logging policy JSON)")
    ref = logging_policy or TabularPolicy(np.full((1, 2), 0.5))
    dh = _load_dataset(args, ref) if args.contexts or logging_policy else None
    if dh is None:
        raise ValueError("pass --contexts or --logging so users can be featurized")
    n_actions = args.n_actions or (logging_policy.n_actions if logging_policy else int(dh.action.max()) + 1)
    res = train_policy(dh, lc, logging=logging_policy, n_actions=n_actions)
    run = Run("learn", args.out, lc.to_dict(), lc.seed)
    with open(run.path("policy.json"), "w") as fh:
        json.dump(res.model.to_dict(), fh)
    with open(run.path("value_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "estimated_value"])
        for i, v in enumerate(res.value_trace):
            w.writerow([i, format(float(v), ".17g")])
    run.finish()
    print(f"final estimated value {res.value_trace[-1]:.6g} after {lc.epochs} epochs")
    return 0


def cmd_opl(args) -> int:
    env, rest = _experiment(_read_json(args.config))
    learner = LearnerConfig.from_dict(rest["learner"]) if "learner" in rest else LearnerConfig()
    cfg = OplConfig(
        swept_parameter=args.param,
        grid=tuple(args.grid),
        replications=args.replications,
        env=env,
        n=int(rest.get("n", 500)),
        learner=learner,
        seed=args.seed,
    )
    run = Run("opl", args.out, cfg.to_dict(), cfg.seed)
    report = run_opl_experiment(cfg, workers=args.workers)
    report.to_csv(run.path("opl.csv"))
    run.finish()
    for r in report.rows:
        print(f"{r.learner:9s} {cfg.swept_parameter}={r.parameter_value:g} value={r.mean_value:.4g} "
              f"relative={r.relative_value:.3f} R={r.n_replications}")
    return 0


def cmd_report(args) -> int:
    report = SweepReport.from_csv(args.csv, swept_parameter=args.param)
    run = Run("report", args.out, {"csv": args.csv, "param": args.param, "log_y": not args.linear}, None)
    for metric, title in (("mse", "MSE"), ("bias2", "Squared bias"), ("var", "Variance")):
        with open(run.path(f"{metric}.svg"), "w") as fh:
            fh.write(render_svg(report, metric, title, log_y=not args.linear))
    run.finish()
    return 0


def cmd_envs_dump(args) -> int:
    env_cfg = SyntheticEnvConfig.from_dict(_read_json(args.config)) if args.config else SyntheticEnvConfig()
    if args.seed is not None:
        env_cfg = env_cfg.replace(seed=args.seed)
    run = Run("envs dump", args.out, env_cfg.to_dict(), env_cfg.seed)
    run.add(dump_params_csv(build_synthetic_env(env_cfg), run.dir))
    run.finish()
    return 0


def cmd_envs_sample(args) -> int:
    env_cfg = SyntheticEnvConfig.from_dict(_read_json(args.config)) if args.config else SyntheticEnvConfig()
    if args.seed is not None:
        env_cfg = env_cfg.replace(seed=args.seed)
    env = build_synthetic_env(env_cfg)
    pi0, pi1 = make_logging_policy(env), make_target_policy(env)
    run = Run("envs sample", args.out, {**env_cfg.to_dict(), "n": args.n}, env_cfg.seed)
    sample_historical(env, pi0, args.n, env_cfg.seed + 1).to_csv(run.path("dh.csv"))
    np.savetxt(run.path("contexts.csv"), env.contexts.features, delimiter=",", fmt="%.17g")
    for name, pol in (("pi0.json", pi0), ("pi1.json", pi1)):
        with open(run.path(name), "w") as fh:
            json.dump(pol.to_dict(), fh)
    run.finish()
    return 0


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lope", description="Long-term off-policy evaluation and learning.", allow_abbrev=False)
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("oracle-check", help="run the tabular exactness suite", allow_abbrev=False)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-envs", type=int, default=10)
    s.add_argument("--out", help="directory for the JSON report and manifest")
    s.set_defaults(fn=cmd_oracle_check)

    s = sub.add_parser("estimate", help="estimate a policy's long-term value from a dataset CSV", allow_abbrev=False)
    s.add_argument("--estimator", choices=("ips", "dr", "lope"), required=True)
    s.add_argument("--data", required=True, help="historical dataset CSV")
    s.add_argument("--policy", required=True, help="target policy JSON with a 'probs' matrix")
    s.add_argument("--logging", help="logging policy JSON (lope only)")
    s.add_argument("--contexts", help="CSV of user features, one row per user")
    s.add_argument("--config", help="estimator config JSON with optional 'reward' and 'weights'")
    s.add_argument("--out", help="directory for the report and manifest")
    s.set_defaults(fn=cmd_estimate)

    for name, fn, help_ in (
        ("sweep", cmd_sweep, "MSE / squared bias / variance sweep"),
        ("select", cmd_select, "policy-selection accuracy sweep"),
    ):
        s = sub.add_parser(name, help=help_, allow_abbrev=False)
        s.add_argument("--param", required=True, choices=("n", "lambda", "sigma_r", "epsilon", "sigma_s", "n_clusters"))
        s.add_argument("--grid", required=True, type=_grid, help="comma-separated values")
        s.add_argument("--config", help="environment or experiment config JSON")
        s.add_argument("--replications", type=int, default=500)
        s.add_argument("--estimators", help=f"comma-separated subset of {','.join(ESTIMATORS)}")
        s.add_argument("--no-skyline", action="store_true", help="skip AVG on a long-term experiment")
        s.add_argument("--fix-env", action="store_true", help="keep one environment draw for all replications")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--out", default=f"runs/{name}")
        s.set_defaults(fn=fn)

    s = sub.add_parser("learn", help="train a policy by off-policy gradient ascent", allow_abbrev=False)
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="learner config JSON")
    s.add_argument("--logging", help="logging policy JSON (needed by lope_pg)")
    s.add_argument("--contexts", help="CSV of user features")
    s.add_argument("--n-actions", type=int)
    s.add_argument("--out", default="runs/learn")
    s.set_defaults(fn=cmd_learn)

    s = sub.add_parser("opl", help="policy-learning benchmark", allow_abbrev=False)
    s.add_argument("--param", default="n", choices=("n", "lambda", "sigma_r", "epsilon", "sigma_s", "n_clusters"))
    s.add_argument("--grid", type=_grid, default=[500.0])
    s.add_argument("--config", help="environment or experiment config JSON (may hold 'learner')")
    s.add_argument("--replications", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out", default="runs/opl")
    s.set_defaults(fn=cmd_opl)

    s = sub.add_parser("report", help="render SVG charts from a sweep CSV", allow_abbrev=False)
    s.add_argument("--csv", required=True)
    s.add_argument("--param", default="param", help="x-axis label")
    s.add_argument("--linear", action="store_true", help="linear instead of log-scaled y axis")
    s.add_argument("--out", default="runs/report")
    s.set_defaults(fn=cmd_report)

    s = sub.add_parser("envs", help="environment utilities", allow_abbrev=False)
    es = s.add_subparsers(dest="envs_command", parser_class=_Parser, metavar="ACTION")
    es.required = True
    d = es.add_parser("dump", help="write sampled parameter tensors to CSV", allow_abbrev=False)
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--out", default="runs/env")
    d.set_defaults(fn=cmd_envs_dump)
    d = es.add_parser("sample", help="write a historical dataset, contexts and both policies", allow_abbrev=False)
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--n", type=int, default=500)
    d.add_argument("--out", default="runs/sample")
    d.set_defaults(fn=cmd_envs_sample)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"lope: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("lope: error: --workers must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        print(f"lope: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"lope: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
