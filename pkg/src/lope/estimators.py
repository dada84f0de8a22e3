"""Long-term value estimators: AVG, LCI, IPS, DR and LOPE.

Every estimator is the mean of a per-record term.  The same term functions
back both the dataset estimators and the kernels used for exact
enumeration on a :class:`~lope.envs.tabular.TabularEnv`.

Nuisance callables are keyed by user index (the population is finite)::

    h_hat(users, actions, short)  -> (n,)    long-reward model using s
    h_bar(users, actions)         -> (n,)    approx. E_{p(s|x,a)}[h_hat(x,a,s)]
    q_hat_xa(users, actions)      -> (n,)    DR reward model
    q_hat_xs(users, short)        -> (n,)    LCI reward model
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    EstimateReport,
    HistoricalDataset,
    LongTermOutcomes,
    PreconditionError,
    ShortTermDataset,
    TabularPolicy,
)
from .models import (
    ClassifierConfig,
    MlpConfig,
    SoftmaxClassifier,
    fit_mlp,
    fit_ridge,
    fit_softmax_classifier,
)

UserActionFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
UserActionShortFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
UserShortFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


# ------------------------------------------------------------ term algebra
def ips_terms(w: np.ndarray, r: np.ndarray) -> np.ndarray:
    return w * r


def dr_terms(w: np.ndarray, r: np.ndarray, q_hat_a: np.ndarray, q_hat_pi: np.ndarray) -> np.ndarray:
    return w * (r - q_hat_a) + q_hat_pi


def lope_terms(w_s: np.ndarray, r: np.ndarray, h_hat: np.ndarray, h_hat_pi: np.ndarray) -> np.ndarray:
    return w_s * (r - h_hat) + h_hat_pi


def _weight_diagnostics(w: np.ndarray) -> dict:
    return {
        "n": float(w.shape[0]),
        "max_weight": float(w.max()),
        "mean_weight": float(w.mean()),
        "ess": float(w.sum() ** 2 / max((w**2).sum(), 1e-300)),
    }


def _require_records(n: int, name: str) -> None:
    if n == 0:
        raise PreconditionError(f"{name} requires a non-empty dataset")


def _check_target(dh: HistoricalDataset, target: TabularPolicy) -> None:
    if len(dh) and dh.user_index.max() >= target.n_users:
        raise PreconditionError("target policy is not defined for every logged user")
    if len(dh) and dh.action.max() >= target.n_actions:
        raise PreconditionError("logged action outside the target policy's action set")


def vanilla_weights(dh: HistoricalDataset, target: TabularPolicy) -> np.ndarray:
    dh.check_support()
    _check_target(dh, target)
    return target.probs[dh.user_index, dh.action] / dh.propensity


def policy_average(fn: UserActionFn, users: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """``sum_a probs[u, a] * fn(u, a)`` for every entry of ``users``."""
    n_actions = probs.shape[1]
    uu = np.repeat(users, n_actions)
    aa = np.tile(np.arange(n_actions), users.shape[0])
    vals = np.asarray(fn(uu, aa), dtype=float).reshape(users.shape[0], n_actions)
    return (probs[users] * vals).sum(axis=1)


# -------------------------------------------------------------- estimators
def avg_estimate(outcomes: LongTermOutcomes) -> EstimateReport:
    _require_records(len(outcomes), "avg_estimate")
    return EstimateReport("avg", float(np.mean(outcomes.rewards)), {"n": float(len(outcomes))})


def lci_estimate(ds: ShortTermDataset, q_hat_xs: UserShortFn) -> EstimateReport:
    _require_records(len(ds), "lci_estimate")
    preds = np.asarray(q_hat_xs(ds.user_index, ds.short_rewards), dtype=float)
    return EstimateReport("lci", float(preds.mean()), {"n": float(len(ds))})


def ips_estimate(dh: HistoricalDataset, target: TabularPolicy) -> EstimateReport:
    _require_records(len(dh), "ips_estimate")
    w = vanilla_weights(dh, target)
    return EstimateReport("ips", float(ips_terms(w, dh.long_reward).mean()), _weight_diagnostics(w))


def dr_estimate(dh: HistoricalDataset, target: TabularPolicy, q_hat_xa: UserActionFn) -> EstimateReport:
    _require_records(len(dh), "dr_estimate")
    w = vanilla_weights(dh, target)
    q_a = np.asarray(q_hat_xa(dh.user_index, dh.action), dtype=float)
    q_pi = policy_average(q_hat_xa, dh.user_index, target.probs)
    terms = dr_terms(w, dh.long_reward, q_a, q_pi)
    return EstimateReport("dr", float(terms.mean()), _weight_diagnostics(w))


# ------------------------------------------------------- surrogate weights
@dataclass(frozen=True)
class WeightConfig:
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    max_weight: float = float("inf")
    use_short_experiment_for_weights: bool = False
    logging_offset: bool = True
    encoding: str = "interaction"


@dataclass(frozen=True)
class SurrogateWeightModel:
    """Surrogate importance weights ``w(x,s) = E_{pi0(a|x,s)}[pi(a|x) / pi0(a|x)]``.

    Parameters
    ----------
    conditional: callable
        ``conditional(users, short)`` returns an (n, n_actions) array of
        ``pi0(a|x,s)`` estimates.
    logging_probs: ndarray of shape (n_users, n_actions)
        The logging policy over the whole population.
    target_probs: ndarray of shape (n_users, n_actions)
        The policy whose weights are produced by default.
    """

    conditional: Callable[[np.ndarray, np.ndarray], np.ndarray]
    logging_probs: np.ndarray
    target_probs: np.ndarray
    classifier: Optional[SoftmaxClassifier] = None
    max_weight: float = float("inf")
    ratio_correction: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    @property
    def target_over_logging(self) -> np.ndarray:
        return self.target_probs / self.logging_probs

    def posterior(self, users: np.ndarray, short: np.ndarray) -> np.ndarray:
        return np.asarray(self.conditional(users, short), dtype=float)

    def predict(
        self,
        users: np.ndarray,
        short: np.ndarray,
        target_probs: Optional[np.ndarray] = None,
        posterior: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Weights for aligned arrays of users and short-reward rows.

        ``target_probs`` swaps in another policy while reusing the fitted
        conditional; ``posterior`` skips re-evaluating it.
        """
        probs = self.target_probs if target_probs is None else target_probs
        post = self.posterior(users, short) if posterior is None else posterior
        w_xa = probs[users] / self.logging_probs[users]
        w = (post * w_xa).sum(axis=1)
        if self.ratio_correction is not None and target_probs is None:
            w = 0.5 * (w + self.ratio_correction(users, short))
        return np.minimum(w, self.max_weight)


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1)


def _xs_features(contexts, users: np.ndarray, short: np.ndarray, encoding: str = "additive") -> np.ndarray:
    x = contexts.features[users]
    s = np.asarray(short, float).reshape(len(users), -1)
    if encoding == "additive":
        return np.hstack([x, s])
    if encoding == "interaction":
        return np.hstack([x, s, _outer(x, s)])
    raise ValueError(f"unknown encoding {encoding!r}")


def estimate_surrogate_weights(
    dh: HistoricalDataset,
    target: TabularPolicy,
    logging: TabularPolicy,
    cfg: Optional[WeightConfig] = None,
    short_experiment: Optional[ShortTermDataset] = None,
) -> SurrogateWeightModel:
    """Fit ``pi0(a|x,s)`` by softmax classification of logged actions on x (+) s."""
    cfg = cfg or WeightConfig()
    _require_records(len(dh), "estimate_surrogate_weights")
    contexts = dh.contexts
    if contexts is None:
        raise PreconditionError("dataset needs attached contexts to fit surrogate weights")
    log_p0 = np.log(logging.probs) if cfg.logging_offset else None
    clf = fit_softmax_classifier(
        _xs_features(contexts, dh.user_index, dh.short_rewards, cfg.encoding),
        dh.action,
        cfg.classifier,
        n_classes=logging.n_actions,
        offsets=None if log_p0 is None else log_p0[dh.user_index],
    )

    def conditional(users, short):
        off = None if log_p0 is None else log_p0[users]
        return clf.predict_proba(_xs_features(contexts, users, short, cfg.encoding), offsets=off)

    correction = None
    if cfg.use_short_experiment_for_weights:
        if short_experiment is None:
            raise PreconditionError("use_short_experiment_for_weights needs a ShortTermDataset")
        correction = _domain_ratio(contexts, dh, short_experiment, cfg.classifier)
    return SurrogateWeightModel(
        conditional, logging.probs, target.probs, clf, cfg.max_weight, correction
    )


def _domain_ratio(contexts, dh: HistoricalDataset, ds: ShortTermDataset, clf_cfg: ClassifierConfig):
    """Density ratio p_S(x,s) / p_H(x,s) from a probabilistic source classifier."""
    X = np.vstack(
        [
            _xs_features(contexts, dh.user_index, dh.short_rewards),
            _xs_features(contexts, ds.user_index, ds.short_rewards),
        ]
    )
    y = np.r_[np.zeros(len(dh), int), np.ones(len(ds), int)]
    clf = fit_softmax_classifier(X, y, clf_cfg, n_classes=2)
    prior = len(dh) / len(ds)

    def ratio(users, short):
        p = clf.predict_proba(_xs_features(contexts, users, short))
        return prior * p[:, 1] / p[:, 0]

    return ratio


def exact_weight_model(posterior_xsa: np.ndarray, logging: TabularPolicy, target: TabularPolicy) -> SurrogateWeightModel:
    """Weight model from a known ``pi0(a|x,s)`` table (shape (X, S, A)) with one-hot surrogates."""
    def conditional(users, short):
        return posterior_xsa[users, np.asarray(short).argmax(axis=1)]

    return SurrogateWeightModel(conditional, logging.probs, target.probs)


# ----------------------------------------------------------- reward models
@dataclass(frozen=True)
class RewardModelBundle:
    h_hat: Optional[UserActionShortFn] = None
    h_bar: Optional[UserActionFn] = None
    q_hat_xa: Optional[UserActionFn] = None
    q_hat_xs: Optional[UserShortFn] = None
    models: dict = field(default_factory=dict, compare=False, repr=False)


@dataclass(frozen=True)
class RewardModelConfig:
    family: str = "ridge"
    l2: float = 1.0
    mlp: MlpConfig = field(default_factory=MlpConfig)
    hbar_mode: str = "auxiliary_fit"
    hbar_draws: int = 100
    encoding: str = "interaction"
    seed: int = 0


def _onehot(a: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((a.shape[0], k))
    out[np.arange(a.shape[0]), a] = 1.0
    return out


def _fit(X: np.ndarray, y: np.ndarray, cfg: RewardModelConfig, key: int):
    if cfg.family == "ridge":
        return fit_ridge(X, y, cfg.l2)
    if cfg.family == "mlp":
        return fit_mlp(X, y, cfg.mlp, seed=cfg.seed * 7919 + key)
    raise ValueError(f"unknown regressor family {cfg.family!r}")


def fit_reward_models(
    dh: HistoricalDataset,
    n_actions: int,
    cfg: Optional[RewardModelConfig] = None,
    hbar_fn: Optional[Callable[[UserActionShortFn], UserActionFn]] = None,
) -> RewardModelBundle:
    """Fit every reward model on the historical data only.

    Encodings: q(x,s) on x (+) s, q(x,a) on x (+) onehot(a), h(x,a,s) on
    x (+) onehot(a) (+) s.  ``h_bar`` regresses ``h_hat(x_i, a_i, s_i)`` on
    x (+) onehot(a) unless ``hbar_fn`` builds it from ``h_hat`` directly
    (e.g. by Monte Carlo over a known surrogate distribution).
    """
    cfg = cfg or RewardModelConfig()
    _require_records(len(dh), "fit_reward_models")
    contexts = dh.contexts
    if contexts is None:
        raise PreconditionError("dataset needs attached contexts to fit reward models")
    feats = contexts.features

    if cfg.encoding not in ("additive", "interaction"):
        raise ValueError(f"unknown encoding {cfg.encoding!r}")
    inter = cfg.encoding == "interaction"

    def enc_xa(u, a):
        x, e = feats[u], _onehot(np.asarray(a), n_actions)
        return np.hstack([x, e, _outer(x, e)]) if inter else np.hstack([x, e])

    def enc_xs(u, s):
        return _xs_features(contexts, u, s, cfg.encoding)

    def enc_xas(u, a, s):
        s = np.asarray(s, float).reshape(len(u), -1)
        parts = [enc_xa(u, a), s]
        if inter:
            parts.append(_outer(feats[u], s))
        return np.hstack(parts)

    u, a, s, r = dh.user_index, dh.action, dh.short_rewards, dh.long_reward
    m_xa = _fit(enc_xa(u, a), r, cfg, 1)
    m_xs = _fit(enc_xs(u, s), r, cfg, 2)
    m_xas = _fit(enc_xas(u, a, s), r, cfg, 3)

    def q_hat_xa(uu, aa):
        return m_xa.predict(enc_xa(uu, aa))

    def q_hat_xs(uu, ss):
        return m_xs.predict(enc_xs(uu, ss))

    def h_hat(uu, aa, ss):
        return m_xas.predict(enc_xas(uu, aa, ss))

    models = {"q_hat_xa": m_xa, "q_hat_xs": m_xs, "h_hat": m_xas}
    if hbar_fn is not None:
        h_bar = hbar_fn(h_hat)
    elif cfg.hbar_mode == "auxiliary_fit":
        m_bar = _fit(enc_xa(u, a), h_hat(u, a, s), cfg, 4)
        models["h_bar"] = m_bar

        def h_bar(uu, aa):
            return m_bar.predict(enc_xa(uu, aa))
    else:
        raise ValueError(f"hbar_mode {cfg.hbar_mode!r} needs an hbar_fn from the environment")
    return RewardModelBundle(h_hat, h_bar, q_hat_xa, q_hat_xs, models)


def lope_estimate(
    dh: HistoricalDataset,
    target: TabularPolicy,
    weights: SurrogateWeightModel,
    bundle: RewardModelBundle,
) -> EstimateReport:
    _require_records(len(dh), "lope_estimate")
    dh.check_support()
    _check_target(dh, target)
    if bundle.h_hat is None or bundle.h_bar is None:
        raise PreconditionError("lope_estimate needs both h_hat and h_bar in the bundle")
    w_s = weights.predict(dh.user_index, dh.short_rewards)
    h = np.asarray(bundle.h_hat(dh.user_index, dh.action, dh.short_rewards), dtype=float)
    h_pi = policy_average(bundle.h_bar, dh.user_index, target.probs)
    terms = lope_terms(w_s, dh.long_reward, h, h_pi)
    return EstimateReport("lope", float(terms.mean()), _weight_diagnostics(w_s))


# ------------------------------------------------------- tabular kernels
def avg_kernel():
    return lambda x, a, s, r: r


def lci_kernel(q_hat_xs: np.ndarray):
    """Per-record LCI term; enumerate it under the *target* policy."""
    return lambda x, a, s, r: q_hat_xs[x, s]


def ips_kernel(pi0: TabularPolicy, pi1: TabularPolicy):
    w = pi1.probs / pi0.probs
    return lambda x, a, s, r: ips_terms(w[x, a], r)


def dr_kernel(pi0: TabularPolicy, pi1: TabularPolicy, q_hat_xa: np.ndarray):
    w = pi1.probs / pi0.probs
    q_pi = (pi1.probs * q_hat_xa).sum(axis=1)
    return lambda x, a, s, r: dr_terms(w[x, a], r, q_hat_xa[x, a], q_pi[x])


def lope_kernel(w_xs: np.ndarray, h_hat_xas: np.ndarray, h_hat_pi: np.ndarray):
    """Per-record LOPE term from tables ``w(x,s)``, ``h_hat(x,a,s)`` and ``h_hat(x, pi1)``."""
    return lambda x, a, s, r: lope_terms(w_xs[x, s], r, h_hat_xas[x, a, s], h_hat_pi[x])
