import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lope.core import HistoricalDataset, LongTermOutcomes, PreconditionError, ShortTermDataset, SupportError, on_policy_value
from lope.envs import (
    SyntheticEnvConfig,
    action_posterior,
    build_synthetic_env,
    dr_variance_terms,
    make_logging_policy,
    make_target_policy,
    random_tabular_env,
    random_tabular_policy,
    sample_historical,
    sample_short_experiment,
    surrogate_weight_table,
    tabular_exact_estimator_expectation,
    tabular_exact_kernel_moments,
)
from lope.envs.tabular import marginal_surrogate
from lope.estimators import (
    RewardModelBundle,
    RewardModelConfig,
    WeightConfig,
    avg_estimate,
    avg_kernel,
    dr_estimate,
    dr_kernel,
    estimate_surrogate_weights,
    exact_weight_model,
    fit_reward_models,
    ips_estimate,
    ips_kernel,
    lci_estimate,
    lci_kernel,
    lope_estimate,
    lope_kernel,
)


def _tab(seed=0, **kw):
    tab = random_tabular_env(seed, 3, 4, 3, **kw)
    return tab, random_tabular_policy(seed, 3, 4, 0), random_tabular_policy(seed, 3, 4, 1)


def _value(tab, pi):
    return float(tab.p_x @ (pi.probs * tab.q_xa).sum(axis=1))


def _zero2(u, a):
    return np.zeros(len(u))


def _zero3(u, a, s):
    return np.zeros(len(u))


@pytest.fixture(scope="module")
def small_env():
    env = build_synthetic_env(SyntheticEnvConfig(n_users=100, n_actions=5, seed=3))
    return env, make_logging_policy(env), make_target_policy(env)


@pytest.fixture(scope="module")
def dh(small_env):
    env, pi0, _ = small_env
    return sample_historical(env, pi0, 400, seed=1)


class TestAvg:
    def test_values(self):
        assert avg_estimate(LongTermOutcomes(np.array([1.0, 2.0, 3.0]))).value == 2.0
        assert avg_estimate(LongTermOutcomes(np.array([4.5]))).value == 4.5

    def test_empty(self):
        with pytest.raises(PreconditionError):
            avg_estimate(LongTermOutcomes(np.zeros(0)))

    def test_exact_expectation(self):
        tab, _, pi1 = _tab()
        assert tabular_exact_estimator_expectation(tab, avg_kernel(), pi1) == pytest.approx(_value(tab, pi1), abs=1e-12)


class TestLci:
    def test_constant_model(self, small_env):
        env, _, pi1 = small_env
        ds = sample_short_experiment(env, pi1, 50, seed=0)
        assert lci_estimate(ds, lambda u, s: np.full(len(u), 3.0)).value == pytest.approx(3.0)

    def test_unbiased_under_surrogacy(self):
        tab, _, pi1 = _tab(1, surrogacy=True)
        q_xs = tab.q_xas[:, 0, :]
        assert tabular_exact_estimator_expectation(tab, lci_kernel(q_xs), pi1) == pytest.approx(_value(tab, pi1), abs=1e-12)

    def test_biased_with_action_effect(self):
        tab, pi0, pi1 = _tab(2)
        post = action_posterior(tab, pi0)  # (X, S, A)
        q_xs = np.einsum("xsa,xas->xs", post, tab.q_xas)  # E[r | x, s] under pi0
        bias = tabular_exact_estimator_expectation(tab, lci_kernel(q_xs), pi1) - _value(tab, pi1)
        assert abs(bias) > 1e-3


class TestIps:
    def test_same_policy_is_on_policy(self, small_env, dh):
        _, pi0, _ = small_env
        assert ips_estimate(dh, pi0).value == pytest.approx(on_policy_value(dh), abs=1e-12)

    def test_zero_rewards(self, small_env, dh):
        assert ips_estimate(dh.with_rewards(np.zeros(len(dh))), small_env[2]).value == 0.0

    def test_support_violation(self, dh, small_env):
        bad = HistoricalDataset(dh.user_index, dh.action, np.r_[0.0, dh.propensity[1:]], dh.short_rewards, dh.long_reward)
        with pytest.raises(SupportError, match="record 0"):
            ips_estimate(bad, small_env[2])

    def test_diagnostics(self, small_env, dh):
        d = ips_estimate(dh, small_env[2]).diagnostics
        assert d["max_weight"] >= d["mean_weight"] > 0

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_exactly_unbiased(self, seed):
        tab, pi0, pi1 = _tab(seed)
        assert tabular_exact_estimator_expectation(tab, ips_kernel(pi0, pi1), pi0) == pytest.approx(_value(tab, pi1), abs=1e-10)


class TestDr:
    def test_zero_model_equals_ips(self, small_env, dh):
        pi1 = small_env[2]
        assert dr_estimate(dh, pi1, _zero2).value == ips_estimate(dh, pi1).value

    def test_exact_model_variance_is_noise_term(self):
        tab, pi0, pi1 = _tab(3)
        mean, var = tabular_exact_kernel_moments(tab, dr_kernel(pi0, pi1, tab.q_xa), pi0)
        noise, resid, ctx = dr_variance_terms(tab, pi0, pi1, tab.q_xa)
        assert mean == pytest.approx(_value(tab, pi1), abs=1e-12)
        assert resid == pytest.approx(0.0, abs=1e-14)
        assert var == pytest.approx(noise + ctx, abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_variance_decomposition(self, seed):
        tab, pi0, pi1 = _tab(seed)
        q_hat = np.random.default_rng(seed).normal(size=(3, 4))
        mean, var = tabular_exact_kernel_moments(tab, dr_kernel(pi0, pi1, q_hat), pi0)
        assert mean == pytest.approx(_value(tab, pi1), abs=1e-10)
        assert var == pytest.approx(sum(dr_variance_terms(tab, pi0, pi1, q_hat)), abs=1e-12)

    def test_on_policy_any_model(self):
        tab, pi0, _ = _tab(4)
        q_hat = np.random.default_rng(0).normal(size=(3, 4))
        assert tabular_exact_estimator_expectation(tab, dr_kernel(pi0, pi0, q_hat), pi0) == pytest.approx(_value(tab, pi0), abs=1e-12)


class TestSurrogateWeights:
    def test_same_policy_gives_unit_weights(self, small_env, dh):
        _, pi0, _ = small_env
        wm = estimate_surrogate_weights(dh, pi0, pi0, WeightConfig())
        np.testing.assert_allclose(wm.predict(dh.user_index, dh.short_rewards), 1.0, atol=1e-12)

    def test_exact_posterior_recovers_marginal_ratio(self):
        tab, pi0, pi1 = _tab(5)
        wm = exact_weight_model(action_posterior(tab, pi0), pi0, pi1)
        users, surr = np.repeat(np.arange(3), 3), np.tile(np.arange(3), 3)
        w = wm.predict(users, np.eye(3)[surr])
        np.testing.assert_allclose(w, surrogate_weight_table(tab, pi0, pi1)[users, surr], atol=1e-12)

    def test_normalized_per_context(self):
        tab, pi0, pi1 = _tab(6)
        w = surrogate_weight_table(tab, pi0, pi1)
        np.testing.assert_allclose((marginal_surrogate(tab, pi0) * w).sum(axis=1), 1.0, atol=1e-12)

    def test_action_independent_surrogates(self):
        tab, pi0, pi1 = _tab(7)
        from lope.envs import TabularEnv
        p_s = np.broadcast_to(tab.p_s_given_xa[:, :1, :], tab.p_s_given_xa.shape).copy()
        flat = TabularEnv(tab.p_x, p_s, tab.q_xas)
        wm = exact_weight_model(action_posterior(flat, pi0), pi0, pi1)
        users = np.repeat(np.arange(3), 3)
        np.testing.assert_allclose(wm.predict(users, np.eye(3)[np.tile(np.arange(3), 3)]), 1.0, atol=1e-12)

    def test_positive(self, small_env, dh):
        _, pi0, pi1 = small_env
        wm = estimate_surrogate_weights(dh, pi1, pi0)
        assert np.all(wm.predict(dh.user_index, dh.short_rewards) > 0)

    def test_max_weight_clips(self, small_env, dh):
        _, pi0, pi1 = small_env
        wm = estimate_surrogate_weights(dh, pi1, pi0, WeightConfig(max_weight=1.5))
        assert wm.predict(dh.user_index, dh.short_rewards).max() <= 1.5

    def test_needs_contexts(self, small_env, dh):
        _, pi0, pi1 = small_env
        bare = HistoricalDataset(dh.user_index, dh.action, dh.propensity, dh.short_rewards, dh.long_reward)
        with pytest.raises(PreconditionError, match="contexts"):
            estimate_surrogate_weights(bare, pi1, pi0)

    def test_short_experiment_flag(self, small_env, dh):
        env, pi0, pi1 = small_env
        cfg = WeightConfig(use_short_experiment_for_weights=True)
        with pytest.raises(PreconditionError):
            estimate_surrogate_weights(dh, pi1, pi0, cfg)
        ds = sample_short_experiment(env, pi1, 400, seed=2)
        w = estimate_surrogate_weights(dh, pi1, pi0, cfg, short_experiment=ds).predict(dh.user_index, dh.short_rewards)
        assert np.all(np.isfinite(w)) and np.all(w > 0)


class TestRewardModels:
    @pytest.mark.parametrize("encoding", ["additive", "interaction"])
    def test_bundle_complete(self, small_env, dh, encoding):
        b = fit_reward_models(dh, small_env[0].n_actions, RewardModelConfig(encoding=encoding))
        for fn in (b.h_hat, b.h_bar, b.q_hat_xa, b.q_hat_xs):
            assert fn is not None
        assert b.h_hat(dh.user_index, dh.action, dh.short_rewards).shape == (len(dh),)

    def test_unknown_encoding(self, small_env, dh):
        with pytest.raises(ValueError):
            fit_reward_models(dh, small_env[0].n_actions, RewardModelConfig(encoding="cubic"))

    def test_mlp_family(self, small_env, dh):
        from lope.models import MlpConfig
        cfg = RewardModelConfig(family="mlp", mlp=MlpConfig(hidden=(8,), epochs=2))
        b = fit_reward_models(dh, small_env[0].n_actions, cfg)
        assert np.all(np.isfinite(b.q_hat_xa(dh.user_index, dh.action)))

    def test_monte_carlo_hbar_needs_env(self, small_env, dh):
        with pytest.raises(ValueError):
            fit_reward_models(dh, small_env[0].n_actions, RewardModelConfig(hbar_mode="env_monte_carlo"))


class TestLope:
    def test_zero_model_is_surrogate_ips(self, small_env, dh):
        _, pi0, pi1 = small_env
        wm = estimate_surrogate_weights(dh, pi1, pi0)
        est = lope_estimate(dh, pi1, wm, RewardModelBundle(h_hat=_zero3, h_bar=_zero2))
        w = wm.predict(dh.user_index, dh.short_rewards)
        assert est.value == pytest.approx(np.mean(w * dh.long_reward), abs=1e-12)

    def test_missing_components(self, small_env, dh):
        _, pi0, pi1 = small_env
        wm = estimate_surrogate_weights(dh, pi1, pi0)
        with pytest.raises(PreconditionError):
            lope_estimate(dh, pi1, wm, RewardModelBundle(h_hat=_zero3))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_unbiased_under_cpc(self, seed):
        tab, pi0, pi1 = _tab(seed)
        phi = np.random.default_rng(seed).normal(scale=3.0, size=(3, 3))
        h_hat = tab.q_xas + phi[:, None, :]
        h_pi = (pi1.probs * (tab.p_s_given_xa * h_hat).sum(axis=2)).sum(axis=1)
        kern = lope_kernel(surrogate_weight_table(tab, pi0, pi1), h_hat, h_pi)
        assert tabular_exact_estimator_expectation(tab, kern, pi0) == pytest.approx(_value(tab, pi1), abs=1e-10)

    def test_unbiased_under_surrogacy(self):
        tab, pi0, pi1 = _tab(8, surrogacy=True)
        kern = lope_kernel(surrogate_weight_table(tab, pi0, pi1), np.zeros(tab.q_xas.shape), np.zeros(3))
        assert tabular_exact_estimator_expectation(tab, kern, pi0) == pytest.approx(_value(tab, pi1), abs=1e-12)

    def test_biased_without_cpc_or_surrogacy(self):
        tab, pi0, pi1 = _tab(9)
        kern = lope_kernel(surrogate_weight_table(tab, pi0, pi1), np.zeros(tab.q_xas.shape), np.zeros(3))
        assert abs(tabular_exact_estimator_expectation(tab, kern, pi0) - _value(tab, pi1)) > 1e-3

    def test_dataset_matches_kernel_terms(self):
        tab, pi0, pi1 = _tab(10)
        dh = tab.sample_historical(pi0, 300, seed=0)
        wm = exact_weight_model(action_posterior(tab, pi0), pi0, pi1)
        h_tab = tab.q_xas
        h_bar_tab = (tab.p_s_given_xa * h_tab).sum(axis=2)
        bundle = RewardModelBundle(
            h_hat=lambda u, a, s: h_tab[u, a, s.argmax(axis=1)],
            h_bar=lambda u, a: h_bar_tab[u, a],
        )
        kern = lope_kernel(surrogate_weight_table(tab, pi0, pi1), h_tab, (pi1.probs * h_bar_tab).sum(axis=1))
        s = dh.short_rewards.argmax(axis=1)
        by_kernel = np.mean([kern(x, a, ss, r) for x, a, ss, r in zip(dh.user_index, dh.action, s, dh.long_reward)])
        assert lope_estimate(dh, pi1, wm, bundle).value == pytest.approx(by_kernel, abs=1e-12)


class TestShiftEquivariance:
    def test_shift_by_constant(self, small_env, dh):
        env, pi0, pi1 = small_env
        c = 2.75
        shifted = dh.with_rewards(dh.long_reward + c)
        assert avg_estimate(LongTermOutcomes(dh.long_reward + c)).value == pytest.approx(avg_estimate(LongTermOutcomes(dh.long_reward)).value + c)
        assert ips_estimate(shifted, pi0).value == pytest.approx(ips_estimate(dh, pi0).value + c)
        q = fit_reward_models(dh, env.n_actions).q_hat_xa
        assert dr_estimate(shifted, pi1, lambda u, a: q(u, a) + c).value == pytest.approx(dr_estimate(dh, pi1, q).value + c)
        b = fit_reward_models(dh, env.n_actions)
        b_shift = RewardModelBundle(h_hat=lambda u, a, s: b.h_hat(u, a, s) + c, h_bar=lambda u, a: b.h_bar(u, a) + c)
        wm = estimate_surrogate_weights(dh, pi1, pi0)
        assert lope_estimate(shifted, pi1, wm, b_shift).value == pytest.approx(lope_estimate(dh, pi1, wm, b).value + c)


class TestShortTermDatasetShapes:
    def test_lci_on_fitted_model(self, small_env, dh):
        env, _, pi1 = small_env
        ds = sample_short_experiment(env, pi1, 100, seed=5)
        b = fit_reward_models(dh, env.n_actions)
        assert np.isfinite(lci_estimate(ds, b.q_hat_xs).value)

    def test_lci_empty(self):
        with pytest.raises(PreconditionError):
            lci_estimate(ShortTermDataset(np.zeros(0, int), np.zeros((0, 2))), lambda u, s: np.zeros(len(u)))
