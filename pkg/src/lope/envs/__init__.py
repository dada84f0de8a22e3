"""Generative environments: the synthetic benchmark and the tabular oracle."""
from .synthetic import (
    SyntheticEnv,
    SyntheticEnvConfig,
    SyntheticEnvParams,
    build_synthetic_env,
    dump_params_csv,
    expected_long,
    expected_short,
    greedy_policy,
    make_logging_policy,
    make_target_policy,
    monte_carlo_hbar,
    sample_historical,
    sample_long_experiment,
    sample_short_experiment,
)
from .tabular import (
    TabularEnv,
    action_posterior,
    dr_variance_terms,
    enumerate_tuples,
    marginal_surrogate,
    random_tabular_env,
    random_tabular_policy,
    surrogate_index,
    surrogate_weight_table,
    tabular_exact_estimator_expectation,
    tabular_exact_kernel_moments,
    tabular_marginal_surrogate,
    tabular_noise_term_identity,
    tabular_weight_variance_identity,
)
