"""Finite-population synthetic environment with clustered reward functions.

Expected short-term rewards (one independent parameter set per dimension d)::

    f_d(x, a) = x' M_f[d] e_a + theta_f_cluster[d, c(x)]' x + theta_f_action[d, a]' e_a

Surrogate and action effects::

    g(x, s) = theta_g[c(x)]' s
    h(x, a) = x' M_h e_a + theta_h_cluster[c(x)]' x + theta_h_action[a]' e_a

and the expected long-term reward ``q(x, a) = (1 - lam) g(x, f(x, a)) + lam h(x, a)``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Dict, Optional, Union

import numpy as np

from ..core import (
    ActionSpace,
    ContextSet,
    HistoricalDataset,
    LongTermOutcomes,
    ShortTermDataset,
    TabularPolicy,
    rng_for,
    sample_categorical,
)
from ..models import kmeans, softmax


@dataclass(frozen=True)
class SyntheticEnvConfig:
    n_users: int = 1000
    dim_x: int = 10
    n_actions: int = 30
    dim_e: int = 5
    dim_s: int = 3
    n_clusters: int = 3
    lam: float = 0.5
    beta: float = 0.5
    epsilon: float = 0.1
    sigma_r: float = 0.5
    sigma_s: float = 0.5
    reward_uses_realized_s: bool = True
    seed: int = 12345

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.sigma_r < 0 or self.sigma_s < 0:
            raise ValueError("noise scales must be non-negative")
        if not 1 <= self.n_clusters <= self.n_users:
            raise ValueError("need 1 <= n_clusters <= n_users")
        if self.n_actions < 2:
            raise ValueError("need at least two actions")

    def replace(self, **changes) -> "SyntheticEnvConfig":
        return SyntheticEnvConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: Dict) -> "SyntheticEnvConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown environment config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "SyntheticEnvConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


@dataclass(frozen=True)
class SyntheticEnvParams:
    M_f: np.ndarray  # (dim_s, dim_x, dim_e)
    M_h: np.ndarray  # (dim_x, dim_e)
    theta_g: np.ndarray  # (n_clusters, dim_s)
    theta_f_cluster: np.ndarray  # (dim_s, n_clusters, dim_x)
    theta_f_action: np.ndarray  # (dim_s, n_actions, dim_e)
    theta_h_cluster: np.ndarray  # (n_clusters, dim_x)
    theta_h_action: np.ndarray  # (n_actions, dim_e)
    cluster_of: np.ndarray  # (n_users,)

    def uniform_entries(self) -> np.ndarray:
        return np.concatenate(
            [
                np.ravel(getattr(self, name))
                for name in (
                    "M_f",
                    "M_h",
                    "theta_g",
                    "theta_f_cluster",
                    "theta_f_action",
                    "theta_h_cluster",
                    "theta_h_action",
                )
            ]
        )


def short_table(contexts: ContextSet, actions: ActionSpace, p: SyntheticEnvParams) -> np.ndarray:
    """Expected short-term rewards for every (user, action): shape (n_users, n_actions, dim_s)."""
    X, E = contexts.features, actions.embeddings
    c = p.cluster_of
    inter = np.einsum("ux,dxe,ae->uad", X, p.M_f, E)
    by_user = np.einsum("dux,ux->ud", p.theta_f_cluster[:, c, :], X)
    by_action = np.einsum("dae,ae->ad", p.theta_f_action, E)
    return inter + by_user[:, None, :] + by_action[None, :, :]


def action_effect_table(contexts: ContextSet, actions: ActionSpace, p: SyntheticEnvParams) -> np.ndarray:
    X, E = contexts.features, actions.embeddings
    by_user = (p.theta_h_cluster[p.cluster_of] * X).sum(axis=1)
    by_action = (p.theta_h_action * E).sum(axis=1)
    return X @ p.M_h @ E.T + by_user[:, None] + by_action[None, :]


@dataclass(frozen=True)
class SyntheticEnv:
    """Built environment; all tables are precomputed and read-only."""

    config: SyntheticEnvConfig
    contexts: ContextSet
    actions: ActionSpace
    params: SyntheticEnvParams
    f_table: np.ndarray  # (n_users, n_actions, dim_s)
    h_table: np.ndarray  # (n_users, n_actions)
    q_table: np.ndarray  # (n_users, n_actions)

    @property
    def n_users(self) -> int:
        return self.contexts.n_users

    @property
    def n_actions(self) -> int:
        return self.actions.n_actions

    @property
    def dim_s(self) -> int:
        return self.config.dim_s

    def surrogate_effect(self, user_index: np.ndarray, short_rewards: np.ndarray) -> np.ndarray:
        """g(x, s) for aligned arrays of users and short-reward vectors."""
        theta = self.params.theta_g[self.params.cluster_of[user_index]]
        return (theta * short_rewards).sum(axis=-1)


def build_synthetic_env(config: SyntheticEnvConfig) -> SyntheticEnv:
    """Draw features, embeddings and parameters, then cluster the users."""
    cfg = config
    rng = rng_for(cfg.seed, 0)
    X = rng.standard_normal((cfg.n_users, cfg.dim_x))
    E = rng.standard_normal((cfg.n_actions, cfg.dim_e))

    def unif(*shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    M_f = unif(cfg.dim_s, cfg.dim_x, cfg.dim_e)
    M_h = unif(cfg.dim_x, cfg.dim_e)
    theta_g = unif(cfg.n_clusters, cfg.dim_s)
    theta_f_cluster = unif(cfg.dim_s, cfg.n_clusters, cfg.dim_x)
    theta_f_action = unif(cfg.dim_s, cfg.n_actions, cfg.dim_e)
    theta_h_cluster = unif(cfg.n_clusters, cfg.dim_x)
    theta_h_action = unif(cfg.n_actions, cfg.dim_e)
    km = kmeans(X, cfg.n_clusters, seed=int(rng.integers(2**63 - 1)))
    params = SyntheticEnvParams(
        M_f, M_h, theta_g, theta_f_cluster, theta_f_action, theta_h_cluster, theta_h_action,
        km.assignments,
    )
    contexts = ContextSet.uniform(X)
    actions = ActionSpace(E)
    f_tab = short_table(contexts, actions, params)
    h_tab = action_effect_table(contexts, actions, params)
    g_of_f = np.einsum("ud,uad->ua", theta_g[params.cluster_of], f_tab)
    q_tab = (1.0 - cfg.lam) * g_of_f + cfg.lam * h_tab
    for arr in (f_tab, h_tab, q_tab):
        arr.setflags(write=False)
    return SyntheticEnv(cfg, contexts, actions, params, f_tab, h_tab, q_tab)


def _check_index(env: SyntheticEnv, user_index, action) -> None:
    u, a = np.asarray(user_index), np.asarray(action)
    if np.any((u < 0) | (u >= env.n_users)) or np.any((a < 0) | (a >= env.n_actions)):
        raise IndexError("user or action index out of range")


def expected_short(env: SyntheticEnv, user_index, action) -> np.ndarray:
    _check_index(env, user_index, action)
    return env.f_table[user_index, action]


def expected_long(env: SyntheticEnv, user_index, action) -> np.ndarray:
    _check_index(env, user_index, action)
    return env.q_table[user_index, action]


def make_logging_policy(env: SyntheticEnv, beta: Optional[float] = None) -> TabularPolicy:
    """Softmax of ``beta * q(x, .)`` per user."""
    beta = env.config.beta if beta is None else beta
    return TabularPolicy(softmax(beta * env.q_table), name=f"softmax(beta={beta})")


def greedy_policy(q_table: np.ndarray, epsilon: float = 0.0, name: str = "") -> TabularPolicy:
    """Epsilon-greedy on ``q_table``; ties go to the lowest action index."""
    q_table = np.asarray(q_table)
    n, k = q_table.shape
    probs = np.full((n, k), epsilon / k)
    probs[np.arange(n), q_table.argmax(axis=1)] += 1.0 - epsilon
    return TabularPolicy(probs, name=name)


def make_target_policy(env: SyntheticEnv, epsilon: Optional[float] = None) -> TabularPolicy:
    epsilon = env.config.epsilon if epsilon is None else epsilon
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    return greedy_policy(env.q_table, epsilon, name=f"eps-greedy(eps={epsilon})")


def _draw(env: SyntheticEnv, policy: TabularPolicy, n: int, seed: int, keys=()):
    if n < 1:
        raise ValueError("n must be >= 1")
    if policy.probs.shape != env.q_table.shape:
        raise ValueError("policy does not match the environment's population/action set")
    rng = rng_for(seed, *keys)
    cfg = env.config
    users = rng.choice(env.n_users, size=n, p=env.contexts.weights)
    actions = sample_categorical(policy.probs[users], rng)
    s_mean = env.f_table[users, actions]
    s = s_mean + cfg.sigma_s * rng.standard_normal(s_mean.shape)
    g_arg = s if cfg.reward_uses_realized_s else s_mean
    r = (1.0 - cfg.lam) * env.surrogate_effect(users, g_arg) + cfg.lam * env.h_table[users, actions]
    r = r + cfg.sigma_r * rng.standard_normal(n)
    return users, actions, s, r


def sample_historical(env: SyntheticEnv, logging_policy: TabularPolicy, n: int, seed: int) -> HistoricalDataset:
    users, actions, s, r = _draw(env, logging_policy, n, seed)
    return HistoricalDataset(
        users,
        actions,
        logging_policy.probs[users, actions],
        s,
        r,
        provenance=logging_policy.name or "logging",
        contexts=env.contexts,
    )


def sample_short_experiment(env: SyntheticEnv, target_policy: TabularPolicy, n: int, seed: int) -> ShortTermDataset:
    users, _, s, _ = _draw(env, target_policy, n, seed)
    return ShortTermDataset(users, s, contexts=env.contexts)


def sample_long_experiment(env: SyntheticEnv, target_policy: TabularPolicy, n: int, seed: int) -> LongTermOutcomes:
    _, _, _, r = _draw(env, target_policy, n, seed)
    return LongTermOutcomes(r)


def monte_carlo_hbar(
    env: SyntheticEnv, h_hat: Callable, n_draws: int = 100, seed: int = 0
) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Average ``h_hat(x, a, s)`` over ``n_draws`` draws of ``s ~ p(s | x, a)``."""
    def hbar(users: np.ndarray, actions: np.ndarray) -> np.ndarray:
        users = np.asarray(users)
        actions = np.asarray(actions)
        rng = rng_for(seed, 7)
        mean = env.f_table[users, actions]
        total = np.zeros(users.shape[0])
        for _ in range(n_draws):
            s = mean + env.config.sigma_s * rng.standard_normal(mean.shape)
            total += h_hat(users, actions, s)
        return total / n_draws

    return hbar


def dump_params_csv(env: SyntheticEnv, out_dir: Union[str, Path]) -> list:
    """Write every parameter tensor as a long-format CSV ``index...,value``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensors = {
        "user_features": env.contexts.features,
        "action_embeddings": env.actions.embeddings,
        "cluster_of": env.params.cluster_of,
        "q_table": env.q_table,
    }
    for f in fields(SyntheticEnvParams):
        tensors.setdefault(f.name, getattr(env.params, f.name))
    written = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        path = out_dir / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"i{k}" for k in range(arr.ndim)] + ["value"])
            for idx in np.ndindex(arr.shape):
                w.writerow([*idx, format(float(arr[idx]), ".17g")])
        written.append(str(path))
    return written
