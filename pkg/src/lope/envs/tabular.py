"""Fully enumerable environment with discrete surrogates.

Every expectation over ``p(x) pi(a|x) p(s|x,a) p(r|x,a,s)`` is a finite sum
here, which makes exact bias/variance statements checkable to rounding
error.  Reward noise has one of two enumerable laws:

* ``"two_point"``: ``r = q(x,a,s) +/- sigma(x,a,s)`` with probability 1/2 each.
  It matches the mean and variance of a Gaussian with the same parameters,
  which is all that estimators affine in ``r`` can see.
* ``"bernoulli"``: ``r in {0, 1}`` with ``P(r = 1) = q(x,a,s)`` (needs q in [0,1]).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Tuple

import numpy as np

from ..core import ContextSet, HistoricalDataset, ShortTermDataset, TabularPolicy, rng_for, sample_categorical

Kernel = Callable[[int, int, int, float], object]


@dataclass(frozen=True)
class TabularEnv:
    p_x: np.ndarray
    p_s_given_xa: np.ndarray
    q_xas: np.ndarray
    reward_noise_var: Optional[np.ndarray] = None
    reward_law: str = "two_point"
    contexts: ContextSet = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        p_x = np.asarray(self.p_x, float)
        p_s = np.asarray(self.p_s_given_xa, float)
        q = np.asarray(self.q_xas, float)
        var = np.zeros_like(q) if self.reward_noise_var is None else np.asarray(self.reward_noise_var, float)
        if p_s.ndim != 3 or q.shape != p_s.shape or var.shape != p_s.shape:
            raise ValueError("p_s_given_xa, q_xas and reward_noise_var must share shape (X, A, S)")
        if p_x.shape != (p_s.shape[0],) or abs(p_x.sum() - 1.0) > 1e-12 or np.any(p_x < 0):
            raise ValueError("p_x must be a probability vector over contexts")
        if np.any(p_s < 0) or np.any(np.abs(p_s.sum(axis=2) - 1.0) > 1e-12):
            raise ValueError("each p(s|x,a) slice must sum to 1")
        if np.any(var < 0):
            raise ValueError("reward_noise_var must be non-negative")
        if self.reward_law not in ("two_point", "bernoulli"):
            raise ValueError(f"unknown reward law {self.reward_law!r}")
        if self.reward_law == "bernoulli":
            if np.any((q < 0) | (q > 1)):
                raise ValueError("bernoulli rewards need q in [0, 1]")
            var = q * (1.0 - q)
        for name, arr in (("p_x", p_x), ("p_s_given_xa", p_s), ("q_xas", q), ("reward_noise_var", var)):
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "contexts", ContextSet(np.eye(p_x.shape[0]), p_x))

    @property
    def n_contexts(self) -> int:
        return self.p_s_given_xa.shape[0]

    @property
    def n_actions(self) -> int:
        return self.p_s_given_xa.shape[1]

    @property
    def n_surrogates(self) -> int:
        return self.p_s_given_xa.shape[2]

    @property
    def q_xa(self) -> np.ndarray:
        """Expected long reward given (x, a), marginalizing s."""
        return (self.p_s_given_xa * self.q_xas).sum(axis=2)

    def reward_outcomes(self, x: int, a: int, s: int) -> Iterator[Tuple[float, float]]:
        """Yield ``(r, p(r|x,a,s))`` pairs."""
        q = self.q_xas[x, a, s]
        if self.reward_law == "bernoulli":
            yield 1.0, q
            yield 0.0, 1.0 - q
            return
        sd = float(np.sqrt(self.reward_noise_var[x, a, s]))
        if sd == 0.0:
            yield q, 1.0
        else:
            yield q + sd, 0.5
            yield q - sd, 0.5

    def value(self, policy) -> float:
        probs = _probs(policy)
        return float(self.p_x @ (probs * self.q_xa).sum(axis=1))

    def sample_historical(self, policy, n: int, seed: int, *keys: int) -> HistoricalDataset:
        """Draw logged tuples; surrogates are stored one-hot in ``short_rewards``."""
        probs = _probs(policy)
        rng = rng_for(seed, *keys)
        x = rng.choice(self.n_contexts, size=n, p=self.p_x)
        a = sample_categorical(probs[x], rng)
        s = sample_categorical(self.p_s_given_xa[x, a], rng)
        q = self.q_xas[x, a, s]
        if self.reward_law == "bernoulli":
            r = (rng.random(n) < q).astype(float)
        else:
            sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
            r = q + sign * np.sqrt(self.reward_noise_var[x, a, s])
        return HistoricalDataset(
            x, a, probs[x, a], np.eye(self.n_surrogates)[s], r,
            provenance=getattr(policy, "name", "") or "tabular", contexts=self.contexts,
        )

    def sample_short_experiment(self, policy, n: int, seed: int, *keys: int) -> ShortTermDataset:
        ds = self.sample_historical(policy, n, seed, *keys)
        return ShortTermDataset(ds.user_index, ds.short_rewards, contexts=self.contexts)


def _probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, TabularPolicy) else np.asarray(policy, float)


def surrogate_index(short_rewards: np.ndarray) -> np.ndarray:
    """Recover discrete surrogate indices from one-hot rows."""
    return np.asarray(short_rewards).argmax(axis=-1)


def random_tabular_env(
    seed: int,
    n_contexts: int = 3,
    n_actions: int = 4,
    n_surrogates: int = 3,
    surrogacy: bool = False,
    noise_scale: float = 0.5,
    noise_depends_on_action: bool = True,
) -> TabularEnv:
    """Seeded random tables, normalized into distributions.

    With ``surrogacy=True`` the expected reward depends on (x, s) only.
    """
    rng = rng_for(seed, 101)
    p_x = rng.uniform(0.1, 1.0, n_contexts)
    p_x /= p_x.sum()
    p_s = rng.uniform(0.05, 1.0, (n_contexts, n_actions, n_surrogates))
    p_s /= p_s.sum(axis=2, keepdims=True)
    if surrogacy:
        q = np.broadcast_to(rng.uniform(-1, 1, (n_contexts, 1, n_surrogates)), p_s.shape).copy()
    else:
        q = rng.uniform(-1, 1, p_s.shape)
    if noise_depends_on_action:
        var = noise_scale**2 * rng.uniform(0.0, 1.0, p_s.shape)
    else:
        var = np.broadcast_to(noise_scale**2 * rng.uniform(0.0, 1.0, (n_contexts, 1, n_surrogates)), p_s.shape).copy()
    return TabularEnv(p_x, p_s, q, var)


def random_tabular_policy(seed: int, n_contexts: int, n_actions: int, *keys: int) -> TabularPolicy:
    rng = rng_for(seed, 202, *keys)
    p = rng.uniform(0.05, 1.0, (n_contexts, n_actions))
    return TabularPolicy(p / p.sum(axis=1, keepdims=True))


# ------------------------------------------------------------ enumeration
def marginal_surrogate(tab: TabularEnv, policy, x: Optional[int] = None) -> np.ndarray:
    """``pi(s|x) = sum_a pi(a|x) p(s|x,a)`` for one context or all of them."""
    probs = _probs(policy)
    full = np.einsum("xa,xas->xs", probs, tab.p_s_given_xa)
    return full if x is None else full[x]


tabular_marginal_surrogate = marginal_surrogate


def action_posterior(tab: TabularEnv, policy) -> np.ndarray:
    """``pi(a|x,s)`` by Bayes' rule, shape (X, S, A)."""
    probs = _probs(policy)
    joint = probs[:, :, None] * tab.p_s_given_xa  # (X, A, S)
    marg = joint.sum(axis=1, keepdims=True)
    return np.transpose(joint / marg, (0, 2, 1))


def surrogate_weight_table(tab: TabularEnv, pi0, pi1) -> np.ndarray:
    """Exact ``pi1(s|x) / pi0(s|x)``, shape (X, S)."""
    return marginal_surrogate(tab, pi1) / marginal_surrogate(tab, pi0)


def enumerate_tuples(tab: TabularEnv, policy) -> Iterator[Tuple[float, int, int, int, float]]:
    """Yield ``(probability, x, a, s, r)`` for every outcome with positive mass."""
    probs = _probs(policy)
    for x in range(tab.n_contexts):
        for a in range(tab.n_actions):
            pxa = tab.p_x[x] * probs[x, a]
            if pxa == 0.0:
                continue
            for s in range(tab.n_surrogates):
                pxas = pxa * tab.p_s_given_xa[x, a, s]
                if pxas == 0.0:
                    continue
                for r, pr in tab.reward_outcomes(x, a, s):
                    if pr > 0.0:
                        yield pxas * pr, x, a, s, r


def tabular_exact_kernel_moments(tab: TabularEnv, kernel: Kernel, policy):
    """Exact mean and (co)variance of ``kernel(x, a, s, r)`` for one draw.

    Vector-valued kernels return a mean vector and a covariance matrix.
    """
    mean = 0.0
    second = 0.0
    for p, x, a, s, r in enumerate_tuples(tab, policy):
        v = np.asarray(kernel(x, a, s, r), dtype=float)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError(f"kernel returned {v} at (x={x}, a={a}, s={s}, r={r})")
        mean = mean + p * v
        second = second + p * np.multiply.outer(v, v)
    cov = second - np.multiply.outer(mean, mean)
    if np.ndim(mean) == 0:
        return float(mean), float(cov)
    return mean, cov


def tabular_exact_estimator_expectation(tab: TabularEnv, estimator_kernel: Kernel, policy):
    """Exact expectation of a per-record estimator term under ``policy``.

    Because every estimator is a mean of i.i.d. per-record terms, this is the
    estimator's expectation at any sample size.
    """
    return tabular_exact_kernel_moments(tab, estimator_kernel, policy)[0]


def _weight_moments(tab: TabularEnv, pi0, pi1):
    p0, p1 = _probs(pi0), _probs(pi1)
    w_xa = p1 / p0
    post = action_posterior(tab, pi0)  # (X, S, A)
    m0_s = marginal_surrogate(tab, pi0)  # (X, S)
    w_xs = surrogate_weight_table(tab, pi0, pi1)
    cond_mean = np.einsum("xsa,xa->xs", post, w_xa)
    cond_var = np.einsum("xsa,xa->xs", post, w_xa**2) - cond_mean**2
    joint = tab.p_x[:, None, None] * p0[:, :, None] * tab.p_s_given_xa  # (X, A, S)
    return w_xa, w_xs, cond_var, m0_s, joint


def tabular_weight_variance_identity(tab: TabularEnv, pi0, pi1) -> Tuple[float, float]:
    """Both sides of the weight-variance reduction identity.

    ``lhs = V[w(x,a)] - V[w(x,s)]`` under ``p(x) pi0(a|x) p(s|x,a)`` and
    ``rhs = E_{p(x) pi0(s|x)}[ V_{pi0(a|x,s)}[w(x,a)] ]``.
    """
    w_xa, w_xs, cond_var, m0_s, joint = _weight_moments(tab, pi0, pi1)
    wa = np.broadcast_to(w_xa[:, :, None], joint.shape)
    ws = np.broadcast_to(w_xs[:, None, :], joint.shape)
    var_a = (joint * wa**2).sum() - (joint * wa).sum() ** 2
    var_s = (joint * ws**2).sum() - (joint * ws).sum() ** 2
    rhs = (tab.p_x[:, None] * m0_s * cond_var).sum()
    return float(var_a - var_s), float(rhs)


def tabular_noise_term_identity(
    tab: TabularEnv, pi0, pi1, sigma2_xs: Optional[np.ndarray] = None
) -> Tuple[float, float]:
    """Both sides of the noise-term reduction identity.

    ``sigma2_xs`` is a noise variance depending on (x, s) only; by default
    the env's noise variance averaged under ``pi0(a|x,s)``.
    """
    w_xa, w_xs, cond_var, m0_s, joint = _weight_moments(tab, pi0, pi1)
    if sigma2_xs is None:
        post = action_posterior(tab, pi0)
        sigma2_xs = np.einsum("xsa,xas->xs", post, tab.reward_noise_var)
    sig = sigma2_xs[:, None, :]
    lhs = (joint * w_xa[:, :, None] ** 2 * sig).sum() - (joint * w_xs[:, None, :] ** 2 * sig).sum()
    rhs = (tab.p_x[:, None] * m0_s * sigma2_xs * cond_var).sum()
    return float(lhs), float(rhs)


def dr_variance_terms(tab: TabularEnv, pi0, pi1, q_hat_xa: np.ndarray) -> Tuple[float, float, float]:
    """The three terms of the single-draw DR variance decomposition.

    Noise, weighted-residual and context terms, where the noise variance is
    ``V[r | x, a]`` (surrogate variation included).
    """
    p0, p1 = _probs(pi0), _probs(pi1)
    w = p1 / p0
    q_xa = tab.q_xa
    second = (tab.p_s_given_xa * (tab.q_xas**2 + tab.reward_noise_var)).sum(axis=2)
    sigma2_xa = second - q_xa**2
    noise = float((tab.p_x[:, None] * p0 * w**2 * sigma2_xa).sum())
    resid = w * (q_xa - q_hat_xa)
    m = (p0 * resid).sum(axis=1)
    resid_var = float(tab.p_x @ ((p0 * resid**2).sum(axis=1) - m**2))
    v1 = (p1 * q_xa).sum(axis=1)
    ctx = float(tab.p_x @ v1**2 - (tab.p_x @ v1) ** 2)
    return noise, resid_var, ctx
