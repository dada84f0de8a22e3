"""Off-policy learning with policy gradients: IPS-PG, DR-PG and LOPE-PG.

Every gradient estimator is written as a per-record gradient with respect
to the policy logits, ``G_i``, which is then pulled back through the
policy parameterization in one pass.  For a softmax policy the score is

    s(x, a) = J(x)^T (onehot(a) - pi(.|x))

where ``J(x)`` is the Jacobian of the logits, so an estimator of the form
``mean_i c_i s(x_i, a_i)`` has ``G_i = c_i (onehot(a_i) - pi_i) / n``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    ContextSet,
    HistoricalDataset,
    PreconditionError,
    TabularPolicy,
    rng_for,
)
from .estimators import (
    RewardModelBundle,
    RewardModelConfig,
    SurrogateWeightModel,
    WeightConfig,
    estimate_surrogate_weights,
    fit_reward_models,
    policy_average,
)
from .models import (
    flatten_params,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
    softmax,
    unflatten_params,
)

GRADIENT_ESTIMATORS = ("ips_pg", "dr_pg", "lope_pg")


# ----------------------------------------------------------------- policy
@dataclass(frozen=True)
class SoftmaxPolicyModel:
    """Softmax policy over a finite action set, temperature 1.

    Parameters
    ----------
    parameterization : {"linear", "mlp3"}
        ``linear`` uses logits ``x @ theta`` with ``theta`` of shape
        (dim_x, n_actions).  ``mlp3`` uses a rectifier network whose output
        layer produces the logits.
    theta : ndarray
        Flat parameter vector.
    dim_x, n_actions : int
    hidden : tuple of int
        Hidden widths for ``mlp3``; ignored for ``linear``.
    """

    parameterization: str
    theta: np.ndarray
    dim_x: int
    n_actions: int
    hidden: Tuple[int, ...] = (32, 32, 32)

    def __post_init__(self) -> None:
        if self.parameterization not in ("linear", "mlp3"):
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        theta = np.array(self.theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"theta has {theta.size} entries, expected {self.n_params}")
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError("policy parameters must be finite")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def sizes(self) -> List[int]:
        if self.parameterization == "linear":
            return [self.dim_x, self.n_actions]
        return [self.dim_x, *self.hidden, self.n_actions]

    @property
    def n_params(self) -> int:
        if self.parameterization == "linear":
            return self.dim_x * self.n_actions
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def with_theta(self, theta: np.ndarray) -> "SoftmaxPolicyModel":
        return replace(self, theta=theta)

    def _layers(self):
        s = self.sizes
        like = [(np.empty((a, b)), np.empty(b)) for a, b in zip(s[:-1], s[1:])]
        return unflatten_params(self.theta, like)

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.parameterization == "linear":
            return X @ self.theta.reshape(self.dim_x, self.n_actions)
        return mlp_forward(self._layers(), X)[0]

    def probs(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def pullback(self, X: np.ndarray, G: np.ndarray) -> np.ndarray:
        """``sum_i J(x_i)^T G_i`` as a flat vector, for logit gradients ``G``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.parameterization == "linear":
            return (X.T @ G).ravel()
        layers = self._layers()
        _, acts = mlp_forward(layers, X)
        return flatten_params(mlp_backward(layers, acts, G))

    def to_tabular(self, contexts: ContextSet, name: str = "") -> TabularPolicy:
        return TabularPolicy(self.probs(contexts.features), name=name)

    def to_dict(self) -> dict:
        return {
            "parameterization": self.parameterization,
            "dim_x": self.dim_x,
            "n_actions": self.n_actions,
            "hidden": list(self.hidden),
            "theta": self.theta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxPolicyModel":
        return cls(
            d["parameterization"],
            np.asarray(d["theta"], dtype=float),
            int(d["dim_x"]),
            int(d["n_actions"]),
            tuple(d.get("hidden", (32, 32, 32))),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def init_policy(
    parameterization: str,
    dim_x: int,
    n_actions: int,
    seed: int = 0,
    hidden: Sequence[int] = (32, 32, 32),
) -> SoftmaxPolicyModel:
    """Initial policy that is uniform over actions.

    The linear policy starts at ``theta = 0``.  The network keeps random
    hidden layers (all-zero hidden weights would never train) and a zero
    output layer, so its initial policy is uniform as well.
    """
    if parameterization == "linear":
        return SoftmaxPolicyModel("linear", np.zeros(dim_x * n_actions), dim_x, n_actions)
    layers = init_mlp_params([dim_x, *hidden, n_actions], rng_for(seed, 31), zero_output=True)
    return SoftmaxPolicyModel("mlp3", flatten_params(layers), dim_x, n_actions, tuple(hidden))


def score_function(model: SoftmaxPolicyModel, x: np.ndarray, a: int) -> np.ndarray:
    """Gradient of ``log pi_theta(a|x)`` with respect to ``theta``."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    g = -model.probs(x)
    g[0, a] += 1.0
    return model.pullback(x, g)


# -------------------------------------------------------- logit gradients
def _centered_value(probs: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Logit gradient of ``sum_a pi(a|x) v(x,a)``: ``pi * (v - pi . v)``."""
    return probs * (values - (probs * values).sum(axis=1, keepdims=True))


def _score_logits(probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
    g = -probs.copy()
    g[np.arange(len(actions)), actions] += 1.0
    return g


def _require_contexts(dh: HistoricalDataset) -> np.ndarray:
    if len(dh) == 0:
        raise PreconditionError("policy gradients need a non-empty dataset")
    if dh.contexts is None:
        raise PreconditionError("dataset needs attached contexts for policy learning")
    dh.check_support()
    return dh.features()


def _pop_probs(model: SoftmaxPolicyModel, dh: HistoricalDataset) -> np.ndarray:
    """Policy over the whole population; the dataset indexes into it."""
    return model.probs(dh.contexts.features)


def ips_pg_logit_grad(dh: HistoricalDataset, pi: np.ndarray) -> np.ndarray:
    p = pi[dh.user_index]
    w = p[np.arange(len(dh)), dh.action] / dh.propensity
    return (w * dh.long_reward)[:, None] * _score_logits(p, dh.action)


def dr_pg_logit_grad(dh: HistoricalDataset, pi: np.ndarray, q_hat_xa: Callable) -> np.ndarray:
    u = dh.user_index
    p = pi[u]
    w = p[np.arange(len(dh)), dh.action] / dh.propensity
    q_a = np.asarray(q_hat_xa(u, dh.action), dtype=float)
    q_all = _action_table(q_hat_xa, u, pi.shape[1])
    return (w * (dh.long_reward - q_a))[:, None] * _score_logits(p, dh.action) + _centered_value(p, q_all)


def lope_pg_logit_grad(
    dh: HistoricalDataset,
    pi: np.ndarray,
    weights: SurrogateWeightModel,
    bundle: RewardModelBundle,
    posterior: Optional[np.ndarray] = None,
) -> np.ndarray:
    if bundle.h_hat is None or bundle.h_bar is None:
        raise PreconditionError("LOPE-PG needs both h_hat and h_bar in the bundle")
    u = dh.user_index
    p = pi[u]
    w_s = weights.predict(u, dh.short_rewards, target_probs=pi, posterior=posterior)
    h = np.asarray(bundle.h_hat(u, dh.action, dh.short_rewards), dtype=float)
    m_all = _action_table(bundle.h_bar, u, pi.shape[1])
    return (w_s * (dh.long_reward - h))[:, None] * _score_logits(p, dh.action) + _centered_value(p, m_all)


def _action_table(fn: Callable, users: np.ndarray, n_actions: int) -> np.ndarray:
    n = len(users)
    vals = fn(np.repeat(users, n_actions), np.tile(np.arange(n_actions), n))
    return np.asarray(vals, dtype=float).reshape(n, n_actions)


def grad_ips_pg(dh: HistoricalDataset, model: SoftmaxPolicyModel) -> np.ndarray:
    """``mean_i w_theta(x_i,a_i) r_i s_theta(x_i,a_i)``."""
    X = _require_contexts(dh)
    G = ips_pg_logit_grad(dh, _pop_probs(model, dh))
    return model.pullback(X, G / len(dh))


def grad_dr_pg(dh: HistoricalDataset, model: SoftmaxPolicyModel, q_hat_xa: Callable) -> np.ndarray:
    X = _require_contexts(dh)
    G = dr_pg_logit_grad(dh, _pop_probs(model, dh), q_hat_xa)
    return model.pullback(X, G / len(dh))


def grad_lope_pg(
    dh: HistoricalDataset,
    model: SoftmaxPolicyModel,
    weights: SurrogateWeightModel,
    bundle: RewardModelBundle,
) -> np.ndarray:
    """LOPE-PG with ``w_theta(x,s) = sum_a pi0_hat(a|x,s) pi_theta(a|x) / pi0(a|x)``.

    The fitted classifier inside ``weights`` is reused for every theta.
    """
    X = _require_contexts(dh)
    G = lope_pg_logit_grad(dh, _pop_probs(model, dh), weights, bundle)
    return model.pullback(X, G / len(dh))


# ------------------------------------------------------- tabular kernels
def ips_pg_kernel(model: SoftmaxPolicyModel, features: np.ndarray, pi0: TabularPolicy):
    """Per-record IPS-PG gradient on one-hot-surrogate tabular data."""
    pi = model.probs(features)
    w = pi / pi0.probs

    def kernel(x, a, s, r):
        g = -pi[x].copy()
        g[a] += 1.0
        return model.pullback(features[x : x + 1], (w[x, a] * r * g)[None, :])

    return kernel


def dr_pg_kernel(model: SoftmaxPolicyModel, features: np.ndarray, pi0: TabularPolicy, q_hat_xa: np.ndarray):
    pi = model.probs(features)
    w = pi / pi0.probs
    dm = _centered_value(pi, q_hat_xa)

    def kernel(x, a, s, r):
        g = -pi[x].copy()
        g[a] += 1.0
        G = w[x, a] * (r - q_hat_xa[x, a]) * g + dm[x]
        return model.pullback(features[x : x + 1], G[None, :])

    return kernel


def lope_pg_kernel(
    model: SoftmaxPolicyModel,
    features: np.ndarray,
    pi0: TabularPolicy,
    posterior_xsa: np.ndarray,
    h_hat_xas: np.ndarray,
    h_bar_xa: np.ndarray,
):
    """Per-record LOPE-PG gradient from tables ``pi0(a|x,s)``, ``h_hat`` and ``h_bar``."""
    pi = model.probs(features)
    w_xs = np.einsum("xsa,xa->xs", posterior_xsa, pi / pi0.probs)
    dm = _centered_value(pi, h_bar_xa)

    def kernel(x, a, s, r):
        g = -pi[x].copy()
        g[a] += 1.0
        G = w_xs[x, s] * (r - h_hat_xas[x, a, s]) * g + dm[x]
        return model.pullback(features[x : x + 1], G[None, :])

    return kernel


def exact_policy_gradient(model: SoftmaxPolicyModel, contexts: ContextSet, q_xa: np.ndarray) -> np.ndarray:
    """``grad_theta sum_x p(x) sum_a pi_theta(a|x) q(x,a)`` by the chain rule."""
    pi = model.probs(contexts.features)
    G = contexts.weights[:, None] * _centered_value(pi, q_xa)
    return model.pullback(contexts.features, G)


# -------------------------------------------------------------- training
@dataclass(frozen=True)
class LearnerConfig:
    gradient_estimator: str = "lope_pg"
    learning_rate: float = 0.05
    epochs: int = 200
    batch_size: Optional[int] = None
    seed: int = 0
    parameterization: str = "linear"
    hidden: Tuple[int, ...] = (32, 32, 32)
    reward: RewardModelConfig = field(default_factory=RewardModelConfig)
    weights: WeightConfig = field(default_factory=WeightConfig)

    def __post_init__(self) -> None:
        if self.gradient_estimator not in GRADIENT_ESTIMATORS:
            raise ValueError(f"gradient_estimator must be one of {GRADIENT_ESTIMATORS}")
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        d = dict(d)
        if "reward" in d and isinstance(d["reward"], dict):
            d["reward"] = _reward_config_from_dict(d["reward"])
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = _weight_config_from_dict(d["weights"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "gradient_estimator": self.gradient_estimator,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "parameterization": self.parameterization,
            "hidden": list(self.hidden),
            "reward": _dataclass_dict(self.reward),
            "weights": _dataclass_dict(self.weights),
        }


def _dataclass_dict(obj) -> dict:
    out = {}
    for k, v in vars(obj).items():
        if hasattr(v, "__dataclass_fields__"):
            v = _dataclass_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def _reward_config_from_dict(d: dict) -> RewardModelConfig:
    from .models import MlpConfig

    d = dict(d)
    if isinstance(d.get("mlp"), dict):
        m = dict(d["mlp"])
        if "hidden" in m:
            m["hidden"] = tuple(m["hidden"])
        d["mlp"] = MlpConfig(**m)
    return RewardModelConfig(**d)


def _weight_config_from_dict(d: dict) -> WeightConfig:
    from .models import ClassifierConfig

    d = dict(d)
    if isinstance(d.get("classifier"), dict):
        d["classifier"] = ClassifierConfig(**d["classifier"])
    if "max_weight" in d:
        d["max_weight"] = float(d["max_weight"])
    return WeightConfig(**d)


@dataclass(frozen=True)
class TrainResult:
    model: SoftmaxPolicyModel
    value_trace: np.ndarray
    estimator: str


def _gradient_fn(dh: HistoricalDataset, config: LearnerConfig, logging: Optional[TabularPolicy], n_actions: int):
    """Fit nuisances once; return ``logit_grad(pi, idx)`` and ``value(pi)``.

    Both close over per-record tables so an epoch only re-evaluates the
    policy.  ``idx`` selects the records of the current batch.
    """
    est = config.gradient_estimator
    u, a, r = dh.user_index, dh.action, dh.long_reward
    rows = np.arange(len(dh))
    if est == "ips_pg":
        resid, dm = r, np.zeros((len(dh), n_actions))
    else:
        bundle = fit_reward_models(dh, n_actions, config.reward)
        if est == "dr_pg":
            resid = r - np.asarray(bundle.q_hat_xa(u, a), dtype=float)
            dm = _action_table(bundle.q_hat_xa, u, n_actions)
        else:
            resid = r - np.asarray(bundle.h_hat(u, a, dh.short_rewards), dtype=float)
            dm = _action_table(bundle.h_bar, u, n_actions)
    if est == "lope_pg":
        if logging is None:
            raise PreconditionError("LOPE-PG needs the logging policy over the whole population")
        weights = estimate_surrogate_weights(dh, logging, logging, config.weights)
        post = weights.posterior(u, dh.short_rewards)

        def weight(pi, idx):
            return weights.predict(u[idx], dh.short_rewards[idx], target_probs=pi, posterior=post[idx])
    else:
        def weight(pi, idx):
            return pi[u[idx], a[idx]] / dh.propensity[idx]

    def logit_grad(pi, idx):
        p = pi[u[idx]]
        g = _score_logits(p, a[idx])
        return (weight(pi, idx) * resid[idx])[:, None] * g + _centered_value(p, dm[idx])

    def value(pi):
        p = pi[u]
        return float(np.mean(weight(pi, rows) * resid + (p * dm).sum(axis=1)))

    return logit_grad, value


def train_policy(
    dh: HistoricalDataset,
    config: LearnerConfig,
    logging: Optional[TabularPolicy] = None,
    n_actions: Optional[int] = None,
    exact_gradient: Optional[Callable[[SoftmaxPolicyModel], np.ndarray]] = None,
    value_fn: Optional[Callable[[SoftmaxPolicyModel], float]] = None,
) -> TrainResult:
    """Gradient ascent ``theta <- theta + eta * grad`` from a uniform policy.

    Parameters
    ----------
    dh : HistoricalDataset
        Logged data with contexts attached.
    config : LearnerConfig
    logging : TabularPolicy, optional
        Logging policy over the population; required for LOPE-PG.
    n_actions : int, optional
        Defaults to the logging policy's action count.
    exact_gradient : callable, optional
        Replaces the estimated gradient (used with enumerable environments).
    value_fn : callable, optional
        Value recorded in the trace; defaults to the estimator's own value
        estimate of the current policy.

    Returns
    -------
    TrainResult
        Final model and one trace entry per epoch, starting with the
        initial policy (length ``epochs + 1``).
    """
    if n_actions is None:
        if logging is None:
            raise PreconditionError("pass n_actions or the logging policy")
        n_actions = logging.n_actions
    if dh.contexts is None:
        raise PreconditionError("dataset needs attached contexts for policy learning")
    if len(dh) == 0:
        raise PreconditionError("train_policy needs a non-empty dataset")
    dh.check_support()
    X_pop = dh.contexts.features
    model = init_policy(config.parameterization, X_pop.shape[1], n_actions, config.seed, config.hidden)

    logit_grad, est_value = None, None
    if exact_gradient is None or value_fn is None:
        logit_grad, est_value = _gradient_fn(dh, config, logging, n_actions)
    record = value_fn or (lambda m: est_value(m.probs(X_pop)))

    n = len(dh)
    bs = n if config.batch_size is None else min(config.batch_size, n)
    full = np.arange(n)
    trace = [record(model)]
    for epoch in range(config.epochs):
        if exact_gradient is not None:
            batches = [None]
        elif bs == n:
            batches = [full]
        else:
            order = rng_for(config.seed, 41, epoch).permutation(n)
            batches = [order[i : i + bs] for i in range(0, n, bs)]
        for idx in batches:
            if exact_gradient is not None:
                grad = exact_gradient(model)
            else:
                pi = model.probs(X_pop)
                G = logit_grad(pi, idx)
                grad = model.pullback(X_pop[dh.user_index[idx]], G / len(idx))
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite policy gradient at epoch {epoch}")
            model = model.with_theta(model.theta + config.learning_rate * grad)
        trace.append(record(model))
    return TrainResult(model, np.asarray(trace, dtype=float), config.gradient_estimator)


def reg_based_policy(
    dh: HistoricalDataset,
    q_hat_config: Optional[RewardModelConfig] = None,
    n_actions: Optional[int] = None,
) -> TabularPolicy:
    """Greedy policy on a fitted ``q_hat(x,a)``; ties go to the lowest action index."""
    if dh.contexts is None:
        raise PreconditionError("dataset needs attached contexts")
    k = int(n_actions if n_actions is not None else dh.action.max() + 1)
    bundle = fit_reward_models(dh, k, q_hat_config)
    users = np.arange(dh.contexts.n_users)
    q = _action_table(bundle.q_hat_xa, users, k)
    probs = np.zeros_like(q)
    probs[users, q.argmax(axis=1)] = 1.0
    return TabularPolicy(probs, name="reg_based")
