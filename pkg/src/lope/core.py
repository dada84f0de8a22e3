"""Domain types shared across the package and exact policy values.

Contexts form a finite population of users, so the value of any tabular
policy can be computed exactly by enumeration.  Datasets are stored
column-wise (one numpy array per field) and expose record views on demand.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Union

import numpy as np

PathLike = Union[str, Path]


class DimensionError(ValueError):
    """Raised when array shapes disagree."""


class PreconditionError(ValueError):
    """Raised when an operation is called on inputs it does not accept."""


class SupportError(ValueError):
    """Raised when a logged action has zero logging propensity."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def _freeze_int(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.int64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ContextSet:
    """Finite population of users with feature vectors and sampling weights."""

    features: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        features = _freeze(self.features)
        if features.ndim != 2:
            raise DimensionError("features must be a 2d array (n_users, dim_x)")
        weights = _freeze(self.weights)
        if weights.shape != (features.shape[0],):
            raise DimensionError(
                f"weights has shape {weights.shape}, expected ({features.shape[0]},)"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be a probability vector")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def uniform(cls, features: np.ndarray) -> "ContextSet":
        n = np.asarray(features).shape[0]
        return cls(features=features, weights=np.full(n, 1.0 / n))

    @property
    def n_users(self) -> int:
        return self.features.shape[0]

    @property
    def dim_x(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ActionSpace:
    """Discrete action set together with action embeddings."""

    embeddings: np.ndarray

    def __post_init__(self) -> None:
        emb = _freeze(self.embeddings)
        if emb.ndim != 2:
            raise DimensionError("embeddings must be a 2d array (n_actions, dim_e)")
        if emb.shape[0] < 2:
            raise ValueError("an action space needs at least two actions")
        if not np.all(np.isfinite(emb)):
            raise ValueError("action embeddings must be finite")
        object.__setattr__(self, "embeddings", emb)

    @property
    def n_actions(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim_e(self) -> int:
        return self.embeddings.shape[1]


@dataclass(frozen=True)
class TabularPolicy:
    """Action probabilities for every user of a finite population.

    Parameters
    ----------
    probs: array-like of shape (n_users, n_actions)
        ``probs[x, a]`` is the probability of choosing action ``a`` for user ``x``.
    name: str, default=""
        Free-form identifier, written into dataset provenance.
    """

    probs: np.ndarray
    name: str = ""

    def __post_init__(self) -> None:
        probs = _freeze(self.probs)
        if probs.ndim != 2:
            raise DimensionError("policy probabilities must be 2d (n_users, n_actions)")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("every policy row must be a probability distribution")
        object.__setattr__(self, "probs", probs)

    @property
    def n_users(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def mix(self, other: "TabularPolicy", alpha: float) -> "TabularPolicy":
        """Return the mixture ``alpha * self + (1 - alpha) * other``."""
        return TabularPolicy(alpha * self.probs + (1.0 - alpha) * other.probs)

    def to_dict(self) -> dict:
        return {"name": self.name, "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "TabularPolicy":
        if "probs" not in d:
            raise ValueError("policy JSON needs a 'probs' matrix")
        return cls(np.asarray(d["probs"], dtype=float), name=str(d.get("name", "")))


@dataclass(frozen=True)
class HistoricalRecord:
    user_index: int
    action: int
    logging_propensity: float
    short_rewards: np.ndarray
    long_reward: float


@dataclass(frozen=True)
class HistoricalDataset:
    """Logged data collected by the logging policy (columnar storage).

    ``contexts`` is optional; estimators that need user features look them
    up through it.
    """

    user_index: np.ndarray
    action: np.ndarray
    propensity: np.ndarray
    short_rewards: np.ndarray
    long_reward: np.ndarray
    provenance: str = ""
    contexts: Optional[ContextSet] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "user_index", _freeze_int(self.user_index))
        object.__setattr__(self, "action", _freeze_int(self.action))
        object.__setattr__(self, "propensity", _freeze(self.propensity))
        short = _freeze(self.short_rewards)
        if short.ndim == 1:
            short = _freeze(short.reshape(-1, 1))
        object.__setattr__(self, "short_rewards", short)
        object.__setattr__(self, "long_reward", _freeze(self.long_reward))
        n = self.user_index.shape[0]
        for name in ("action", "propensity", "long_reward"):
            if getattr(self, name).shape != (n,):
                raise DimensionError(f"{name} must have shape ({n},)")
        if self.short_rewards.shape[0] != n:
            raise DimensionError(f"short_rewards must have {n} rows")
        if self.contexts is not None and n and self.user_index.max() >= self.contexts.n_users:
            raise DimensionError("user_index out of range for the attached contexts")

    def __len__(self) -> int:
        return self.user_index.shape[0]

    def __getitem__(self, i: int) -> HistoricalRecord:
        return HistoricalRecord(
            user_index=int(self.user_index[i]),
            action=int(self.action[i]),
            logging_propensity=float(self.propensity[i]),
            short_rewards=self.short_rewards[i],
            long_reward=float(self.long_reward[i]),
        )

    @property
    def records(self) -> Iterator[HistoricalRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def dim_s(self) -> int:
        return self.short_rewards.shape[1]

    def features(self) -> np.ndarray:
        """User feature rows aligned with the records."""
        if self.contexts is None:
            raise PreconditionError("dataset has no attached ContextSet")
        return self.contexts.features[self.user_index]

    def with_contexts(self, contexts: ContextSet) -> "HistoricalDataset":
        return HistoricalDataset(
            self.user_index,
            self.action,
            self.propensity,
            self.short_rewards,
            self.long_reward,
            provenance=self.provenance,
            contexts=contexts,
        )

    def with_rewards(self, long_reward: np.ndarray) -> "HistoricalDataset":
        return HistoricalDataset(
            self.user_index,
            self.action,
            self.propensity,
            self.short_rewards,
            long_reward,
            provenance=self.provenance,
            contexts=self.contexts,
        )

    def check_support(self) -> None:
        bad = np.flatnonzero(~(self.propensity > 0))
        if bad.size:
            i = int(bad[0])
            raise SupportError(
                f"record {i} (user {self.user_index[i]}, action {self.action[i]}) "
                "has zero logging propensity"
            )

    # ------------------------------------------------------------------ CSV
    def to_csv(self, path: PathLike) -> None:
        """Write ``user_index,action,propensity,s_0..s_{k-1},r``."""
        header = ["user_index", "action", "propensity"]
        header += [f"s_{d}" for d in range(self.dim_s)] + ["r"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(len(self)):
                row = [str(self.user_index[i]), str(self.action[i]), _fmt(self.propensity[i])]
                row += [_fmt(v) for v in self.short_rewards[i]]
                row.append(_fmt(self.long_reward[i]))
                writer.writerow(row)

    @classmethod
    def from_csv(
        cls, path: PathLike, contexts: Optional[ContextSet] = None, provenance: str = ""
    ) -> "HistoricalDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise PreconditionError(f"{path}: empty file (missing header)")
        header, body = rows[0], [r for r in rows[1:] if r]
        s_cols = [j for j, h in enumerate(header) if h.startswith("s_")]
        if header[:3] != ["user_index", "action", "propensity"] or header[-1] != "r":
            raise PreconditionError(f"{path}: unexpected header {header}")
        if not body:
            return cls(
                np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros((0, len(s_cols))),
                np.zeros(0), provenance=provenance, contexts=contexts,
            )
        data = np.array([[float(v) for v in r] for r in body])
        return cls(
            user_index=data[:, 0].astype(np.int64),
            action=data[:, 1].astype(np.int64),
            propensity=data[:, 2],
            short_rewards=data[:, s_cols],
            long_reward=data[:, -1],
            provenance=provenance,
            contexts=contexts,
        )


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


@dataclass(frozen=True)
class ShortTermDataset:
    """Users and short-term rewards observed in a short experiment of the new policy."""

    user_index: np.ndarray
    short_rewards: np.ndarray
    contexts: Optional[ContextSet] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "user_index", _freeze_int(self.user_index))
        short = _freeze(self.short_rewards)
        if short.ndim == 1:
            short = _freeze(short.reshape(-1, 1))
        if short.shape[0] != self.user_index.shape[0]:
            raise DimensionError("short_rewards rows must match user_index length")
        object.__setattr__(self, "short_rewards", short)

    def __len__(self) -> int:
        return self.user_index.shape[0]

    @property
    def records(self):
        return list(zip(self.user_index.tolist(), self.short_rewards))

    @property
    def dim_s(self) -> int:
        return self.short_rewards.shape[1]


@dataclass(frozen=True)
class LongTermOutcomes:
    """Long-term rewards observed under the new policy."""

    rewards: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rewards", _freeze(np.ravel(self.rewards)))

    def __len__(self) -> int:
        return self.rewards.shape[0]


@dataclass(frozen=True)
class EstimateReport:
    estimator_name: str
    value: float
    diagnostics: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise FloatingPointError(f"{self.estimator_name} produced a non-finite estimate")

    def to_dict(self) -> dict:
        return {
            "estimator_name": self.estimator_name,
            "value": self.value,
            "diagnostics": {k: float(v) for k, v in self.diagnostics.items()},
        }


def policy_value_exact(
    policy: Union[TabularPolicy, np.ndarray], q_table: np.ndarray, weights: np.ndarray
) -> float:
    """Exact value ``sum_x p(x) sum_a pi(a|x) q(x,a)`` over a finite population."""
    probs = policy.probs if isinstance(policy, TabularPolicy) else np.asarray(policy, float)
    q_table = np.asarray(q_table, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if probs.shape != q_table.shape:
        raise DimensionError(f"policy shape {probs.shape} != q_table shape {q_table.shape}")
    if weights.shape != (probs.shape[0],):
        raise DimensionError(f"weights shape {weights.shape} != ({probs.shape[0]},)")
    if not np.all(np.isfinite(q_table)):
        raise ValueError("q_table must be finite")
    return float(weights @ (probs * q_table).sum(axis=1))


def on_policy_value(dataset: HistoricalDataset) -> float:
    """Mean long-term reward of a dataset; estimates the logging policy's value."""
    if len(dataset) == 0:
        raise PreconditionError("on_policy_value requires a non-empty dataset")
    return float(np.mean(dataset.long_reward))


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Generator determined by ``seed`` and an optional tuple of integer keys.

    ``rng_for(seed, replication, stream)`` never shares state with any other
    key tuple, so parallel workers only need their keys.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` by inverse-CDF sampling."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((u[:, None] >= cdf).sum(axis=1), probs.shape[1] - 1)
