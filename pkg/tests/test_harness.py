import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lope.core import TabularPolicy, policy_value_exact, rng_for
from lope.envs import (
    SyntheticEnvConfig,
    build_synthetic_env,
    make_target_policy,
    random_tabular_env,
    random_tabular_policy,
    sample_long_experiment,
)
from lope.estimators import ips_estimate, ips_kernel
from lope.envs import tabular_exact_kernel_moments
from lope.harness import (
    OplConfig,
    ReplicationResult,
    SweepConfig,
    SweepReport,
    derive_seed,
    metric_row,
    render_svg,
    run_evaluation_sweep,
    run_opl_experiment,
    run_selection_experiment,
    run_theorem_suite,
)
from lope.learners import LearnerConfig

SMALL_ENV = SyntheticEnvConfig(n_users=60, n_actions=5, seed=1)


def _constant(cfg, value, rep):
    return ReplicationResult(1.5, 1.0, 1.0, {"ips": 1.5, "avg": 1.5})


class TestSweepConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SweepConfig(grid=())
        with pytest.raises(ValueError):
            SweepConfig(replications=1)
        with pytest.raises(ValueError):
            SweepConfig(swept_parameter="beta")
        with pytest.raises(ValueError):
            SweepConfig(estimators=("snips",))
        with pytest.raises(ValueError):
            SweepConfig(grid=(2.5,))

    def test_cell(self):
        cfg = SweepConfig(swept_parameter="lambda", grid=(0.0, 1.0), n=300)
        env, n = cfg.cell(1.0)
        assert env.lam == 1.0 and n == 300
        env, _ = SweepConfig(swept_parameter="n_clusters", grid=(5,)).cell(5)
        assert env.n_clusters == 5 and isinstance(env.n_clusters, int)

    def test_dict_round_trip(self):
        cfg = SweepConfig(swept_parameter="sigma_r", grid=(1.0, 9.0), replications=3, env=SMALL_ENV)
        assert SweepConfig.from_dict(cfg.to_dict()) == cfg

    def test_derive_seed_distinct(self):
        seeds = {derive_seed(0, r, s) for r in range(50) for s in range(4)}
        assert len(seeds) == 200


class TestMetrics:
    def test_constant_estimator_has_zero_error(self):
        cfg = SweepConfig(grid=(100,), replications=2, estimators=("ips",))
        rep = run_evaluation_sweep(cfg, replicate=_constant)
        for name in ("ips", "avg"):
            row = rep.row(name, 100)
            assert (row.mse, row.squared_bias, row.variance) == (0.0, 0.0, 0.0)
            assert row.complete and row.n_replications == 2

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 50))
    def test_decomposition_identity(self, seed, r):
        e = np.random.default_rng(seed).normal(loc=0.3, scale=2.0, size=r)
        row = metric_row("x", 1.0, e, r)
        assert abs(row.mse - (row.squared_bias + row.variance)) <= 1e-9 * (1 + row.mse)

    def test_failures_recorded_per_cell(self):
        def flaky(cfg, value, rep):
            if rep == 1:
                raise RuntimeError("boom")
            return _constant(cfg, value, rep)

        cfg = SweepConfig(grid=(100, 200), replications=3, estimators=("ips",))
        rep = run_evaluation_sweep(cfg, replicate=flaky)
        assert len(rep.failures) == 2
        assert "boom" in rep.failures[0].message
        row = rep.row("ips", 200)
        assert row.n_replications == 2 and not row.complete

    def test_ips_mse_matches_exact_variance(self):
        tab = random_tabular_env(11)
        pi0, pi1 = random_tabular_policy(11, 3, 4, 0), random_tabular_policy(11, 3, 4, 1)
        n = 10_000
        v1 = policy_value_exact(pi1, tab.q_xa, tab.p_x)
        single_var = tabular_exact_kernel_moments(tab, ips_kernel(pi0, pi1), pi0)[1]

        def replicate(cfg, value, rep):
            dh = tab.sample_historical(pi0, int(value), derive_seed(cfg.seed, rep, 1))
            return ReplicationResult(v1, 0.0, 0.0, {"ips": ips_estimate(dh, TabularPolicy(pi1.probs)).value})

        cfg = SweepConfig(grid=(n,), replications=200, estimators=("ips",), include_skyline=False)
        row = run_evaluation_sweep(cfg, replicate=replicate).row("ips", n)
        assert row.mse == pytest.approx(single_var / n, rel=0.2)

    def test_skyline_mse_is_reward_variance_over_n(self):
        cfg = SweepConfig(grid=(100,), replications=200, env=SMALL_ENV, estimators=(),
                          fix_env_across_replications=True)
        row = run_evaluation_sweep(cfg).row("avg", 100)
        env = build_synthetic_env(SMALL_ENV)
        r = sample_long_experiment(env, make_target_policy(env), 200_000, seed=5).rewards
        assert row.mse == pytest.approx(r.var() / 100, rel=0.3)


@pytest.fixture(scope="module")
def cfg():
    return SweepConfig(grid=(80, 120), replications=3, env=SMALL_ENV)


class TestSweeps:
    def test_all_estimators_reported(self, cfg):
        rep = run_evaluation_sweep(cfg)
        assert set(rep.estimators()) == {"lci", "ips", "dr", "lope", "avg"}
        assert rep.grid() == [80.0, 120.0]
        assert not rep.failures
        for row in rep.rows:
            assert np.isfinite(row.mse) and row.complete

    def test_worker_count_invariance(self, cfg):
        a = run_evaluation_sweep(cfg, workers=1)
        b = run_evaluation_sweep(cfg, workers=2)
        assert a.rows == b.rows

    def test_csv_round_trip(self, cfg, tmp_path):
        rep = run_evaluation_sweep(cfg)
        path = tmp_path / "sweep.csv"
        rep.to_csv(path)
        assert path.read_text().splitlines()[0] == "estimator,param,mse,bias2,var,R"
        back = SweepReport.from_csv(path)
        for r in rep.rows:
            assert back.row(r.estimator_name, r.parameter_value).mse == r.mse

    def test_charts_are_deterministic(self, cfg, tmp_path):
        rep = run_evaluation_sweep(cfg)
        paths = rep.write_charts(tmp_path)
        assert [p.rsplit("/", 1)[1] for p in paths] == ["mse.svg", "bias2.svg", "var.svg"]
        svg = render_svg(rep, "mse", "MSE")
        assert svg == render_svg(rep, "mse", "MSE")
        assert svg.startswith("<svg") and "LOPE" in svg


class TestSelection:
    def _oracle(self, cfg, value, rep):
        rng = rng_for(cfg.seed, rep, 7)
        v1, v0 = rng.normal(), rng.normal()
        return ReplicationResult(v1, v0, v0, {"ips": v1, "dr": v0 + float(rng.choice([-1.0, 1.0]))})

    def test_oracle_and_coin_flip(self):
        cfg = SweepConfig(grid=(100,), replications=500, estimators=("ips", "dr"), include_skyline=False)
        rep = run_selection_experiment(cfg, replicate=self._oracle)
        assert rep.accuracy("ips", 100) == 1.0
        assert abs(rep.accuracy("dr", 100) - 0.5) <= 3 * np.sqrt(0.25 / 500)

    def test_real_selection_runs(self):
        cfg = SweepConfig(grid=(100,), replications=2, env=SMALL_ENV)
        rep = run_selection_experiment(cfg)
        assert all(0.0 <= r.accuracy <= 1.0 for r in rep.rows)


class TestOpl:
    def test_zero_learning_rate_gives_equal_values(self):
        cfg = OplConfig(grid=(100,), replications=2, env=SMALL_ENV, learners=("ips_pg", "dr_pg", "lope_pg"),
                        learner=LearnerConfig(learning_rate=0.0, epochs=2))
        rep = run_opl_experiment(cfg)
        values = [rep.row(k, 100).mean_value for k in ("ips_pg", "dr_pg", "lope_pg")]
        np.testing.assert_allclose(values, values[0], rtol=1e-12)
        assert rep.row("lope_pg", 100).relative_value == 1.0

    def test_reg_based_included(self):
        cfg = OplConfig(grid=(100,), replications=2, env=SMALL_ENV, learner=LearnerConfig(epochs=5))
        rep = run_opl_experiment(cfg)
        assert {r.learner for r in rep.rows} == {"ips_pg", "dr_pg", "lope_pg", "reg_based"}
        assert not rep.failures


class TestTheoremSuite:
    def test_passes(self):
        rep = run_theorem_suite(seed=0, n_envs=10)
        assert rep.passed
        assert rep.max_identity_gap <= 1e-5
        assert rep.check("negative_control").max_gap > 1e-6

    def test_same_policy_gaps_vanish(self):
        rep = run_theorem_suite(seed=1, n_envs=3, same_policy=True)
        for c in rep.checks:
            if c.name not in ("pg_finite_difference", "pg_unbiased", "negative_control"):
                assert c.max_gap <= 1e-12, c.name
        assert rep.check("negative_control").max_gap <= 1e-12
