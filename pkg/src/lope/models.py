"""Small numpy-only nuisance models: ridge, softmax classifier, MLP and KMeans."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import DimensionError, PreconditionError

PROBA_FLOOR = 1e-9


# --------------------------------------------------------------------- ridge
@dataclass(frozen=True)
class RidgeModel:
    weights: np.ndarray
    intercept: float
    l2: float = 1.0

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=float) @ self.weights + self.intercept

    def to_dict(self) -> dict:
        return {
            "kind": "ridge",
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "l2": self.l2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RidgeModel":
        return cls(np.asarray(d["weights"], float), float(d["intercept"]), float(d["l2"]))


def fit_ridge(X: np.ndarray, y: np.ndarray, l2: float = 1.0) -> RidgeModel:
    """Minimize ``||y - Xw - b||^2 + l2 ||w||^2`` with an unpenalized intercept."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionError(f"X shape {X.shape} incompatible with y shape {y.shape}")
    if X.shape[0] < 1:
        raise PreconditionError("fit_ridge needs at least one row")
    if l2 < 0:
        raise ValueError("l2 must be non-negative")
    x_mean = X.mean(axis=0)
    y_mean = y.mean()
    Xc = X - x_mean
    gram = Xc.T @ Xc + l2 * np.eye(X.shape[1])
    if l2 == 0 and np.linalg.matrix_rank(gram) < X.shape[1]:
        raise np.linalg.LinAlgError("singular normal equations; use l2 > 0")
    w = np.linalg.solve(gram, Xc.T @ (y - y_mean))
    return RidgeModel(weights=w, intercept=float(y_mean - x_mean @ w), l2=float(l2))


# ------------------------------------------------------------ standardizing
def _standardizer(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    return mean, scale


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ------------------------------------------------------ softmax classifier
@dataclass(frozen=True)
class ClassifierConfig:
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 1e-4
    standardize: bool = True


@dataclass(frozen=True)
class SoftmaxClassifier:
    """Multinomial logistic regression; rows of ``weight_matrix`` are classes."""

    weight_matrix: np.ndarray
    intercepts: np.ndarray
    l2: float
    x_mean: np.ndarray
    x_scale: np.ndarray
    config: ClassifierConfig = field(default_factory=ClassifierConfig)

    @property
    def n_classes(self) -> int:
        return self.weight_matrix.shape[0]

    def predict_proba(self, X: np.ndarray, offsets: Optional[np.ndarray] = None) -> np.ndarray:
        """Class probabilities; ``offsets`` are fixed logits added per row and class."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.weight_matrix.shape[1]:
            raise DimensionError(
                f"classifier expects {self.weight_matrix.shape[1]} features, got {X.shape[1]}"
            )
        Z = (X - self.x_mean) / self.x_scale
        logits = Z @ self.weight_matrix.T + self.intercepts
        if offsets is not None:
            logits = logits + offsets
        p = softmax(logits)
        return (1.0 - self.n_classes * PROBA_FLOOR) * p + PROBA_FLOOR

    def to_dict(self) -> dict:
        return {
            "kind": "softmax_classifier",
            "weight_matrix": self.weight_matrix.tolist(),
            "intercepts": self.intercepts.tolist(),
            "l2": self.l2,
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "config": vars(self.config),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxClassifier":
        return cls(
            np.asarray(d["weight_matrix"], float),
            np.asarray(d["intercepts"], float),
            float(d["l2"]),
            np.asarray(d["x_mean"], float),
            np.asarray(d["x_scale"], float),
            ClassifierConfig(**d["config"]),
        )


def fit_softmax_classifier(
    X: np.ndarray,
    labels: np.ndarray,
    cfg: Optional[ClassifierConfig] = None,
    n_classes: Optional[int] = None,
    offsets: Optional[np.ndarray] = None,
) -> SoftmaxClassifier:
    """Full-batch gradient descent on L2-regularized mean cross-entropy.

    Parameters
    ----------
    X: array-like of shape (n, dim_in)
    labels: array-like of shape (n,)
        Integer class indices.
    cfg: ClassifierConfig, default=None
    n_classes: int, default=None
        Number of classes; inferred as ``labels.max() + 1`` when omitted, so
        pass it explicitly when some classes may be absent from the data.
    offsets: array-like of shape (n, n_classes), default=None
        Fixed per-row logits (e.g. log prior class probabilities).  The
        fitted model then learns only the departure from them.
    """
    cfg = cfg or ClassifierConfig()
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise PreconditionError("fit_softmax_classifier needs at least one sample")
    if labels.shape != (X.shape[0],):
        raise DimensionError("labels must have one entry per row of X")
    k = int(labels.max()) + 1 if n_classes is None else int(n_classes)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"class indices must lie in [0, {k})")
    if cfg.standardize:
        mean, scale = _standardizer(X)
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Z = (X - mean) / scale
    n = Z.shape[0]
    Y = np.zeros((n, k))
    Y[np.arange(n), labels] = 1.0
    W = np.zeros((k, Z.shape[1]))
    b = np.zeros(k)
    off = 0.0 if offsets is None else np.asarray(offsets, dtype=float)
    for _ in range(cfg.epochs):
        P = softmax(Z @ W.T + b + off)
        G = (P - Y) / n
        W -= cfg.learning_rate * (G.T @ Z + cfg.l2 * W)
        b -= cfg.learning_rate * G.sum(axis=0)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise FloatingPointError("softmax classifier diverged; lower the learning rate")
    return SoftmaxClassifier(W, b, cfg.l2, mean, scale, cfg)


# ------------------------------------------------------------------- MLP
Params = List[Tuple[np.ndarray, np.ndarray]]


def init_mlp_params(
    sizes: Sequence[int], rng: np.random.Generator, zero_output: bool = True
) -> Params:
    """He-initialized layers for ``sizes = [dim_in, h1, ..., dim_out]``."""
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_output:
            W = np.zeros((fan_in, fan_out))
        else:
            W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params.append((W, np.zeros(fan_out)))
    return params


def mlp_forward(params: Params, X: np.ndarray) -> Tuple[np.ndarray, list]:
    """Rectifier hidden layers, linear output.  Returns output and activations."""
    acts = [X]
    h = X
    for i, (W, b) in enumerate(params):
        z = h @ W + b
        h = z if i == len(params) - 1 else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def mlp_backward(params: Params, acts: list, grad_out: np.ndarray) -> Params:
    """Gradients of ``sum(grad_out * output)`` with respect to every layer."""
    grads: Params = [None] * len(params)  # type: ignore[list-item]
    g = grad_out
    for i in range(len(params) - 1, -1, -1):
        W, _ = params[i]
        grads[i] = (acts[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = (g @ W.T) * (acts[i] > 0)
    return grads


def flatten_params(params: Params) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params])


def unflatten_params(flat: np.ndarray, like: Params) -> Params:
    out, pos = [], 0
    for W, b in like:
        nw, nb = W.size, b.size
        out.append((flat[pos : pos + nw].reshape(W.shape).copy(), flat[pos + nw : pos + nw + nb].copy()))
        pos += nw + nb
    return out


@dataclass(frozen=True)
class MlpConfig:
    hidden: Tuple[int, ...] = (32, 32, 32)
    learning_rate: float = 1e-2
    epochs: int = 300
    batch_size: int = 64
    l2: float = 0.0
    standardize: bool = True


@dataclass(frozen=True)
class MlpRegressor:
    params: Params
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    config: MlpConfig = field(default_factory=MlpConfig)

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(W.shape[1] for W, _ in self.params[:-1])

    def predict(self, X: np.ndarray) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(X, float)) - self.x_mean) / self.x_scale
        out, _ = mlp_forward(self.params, Z)
        return out[:, 0] + self.y_mean

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "params": [[W.tolist(), b.tolist()] for W, b in self.params],
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "config": {**vars(self.config), "hidden": list(self.config.hidden)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpRegressor":
        cfg = dict(d["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        return cls(
            [(np.asarray(W, float), np.asarray(b, float)) for W, b in d["params"]],
            np.asarray(d["x_mean"], float),
            np.asarray(d["x_scale"], float),
            float(d["y_mean"]),
            MlpConfig(**cfg),
        )


class _Adam:
    def __init__(self, n: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def fit_mlp(
    X: np.ndarray, y: np.ndarray, cfg: Optional[MlpConfig] = None, seed: int = 0
) -> MlpRegressor:
    """Mini-batch training on mean squared error with Adam steps."""
    cfg = cfg or MlpConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionError(f"X shape {X.shape} incompatible with y shape {y.shape}")
    rng = np.random.default_rng(seed)
    if cfg.standardize:
        mean, scale = _standardizer(X)
    else:
        mean, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    Z = (X - mean) / scale
    y_mean = float(y.mean())
    target = (y - y_mean)[:, None]
    params = init_mlp_params([X.shape[1], *cfg.hidden, 1], rng)
    flat = flatten_params(params)
    opt = _Adam(flat.size, cfg.learning_rate)
    n = X.shape[0]
    bs = min(cfg.batch_size, n)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            out, acts = mlp_forward(params, Z[idx])
            resid = out - target[idx]
            loss = float(np.mean(resid**2))
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite MLP loss at epoch {epoch}")
            grads = mlp_backward(params, acts, 2.0 * resid / idx.size)
            g = flatten_params(grads)
            if cfg.l2:
                g = g + cfg.l2 * flat
            flat = flat - opt.step(g)
            params = unflatten_params(flat, params)
    return MlpRegressor(params, mean, scale, y_mean, cfg)


# ----------------------------------------------------------------- KMeans
@dataclass(frozen=True)
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_trace: Tuple[float, ...]

    def __iter__(self):
        return iter((self.centroids, self.assignments))


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def kmeans(points: np.ndarray, k: int, seed: int = 0, n_iter: int = 25) -> KMeansResult:
    """Lloyd's algorithm, stopping after ``n_iter`` updates or at convergence.

    Centroids start at ``k`` distinct data points drawn with ``seed``.  An
    empty cluster is re-seeded at the point farthest from its current
    centroid.  Final assignments are nearest-centroid for the returned
    centroids (ties go to the lowest index).
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise PreconditionError(f"need 1 <= k <= n_points, got k={k}, n={n}")
    rng = np.random.default_rng(seed)
    centroids = points[rng.choice(n, size=k, replace=False)].copy()
    trace = []
    prev = None
    for _ in range(n_iter):
        d = _sq_dists(points, centroids)
        assign = d.argmin(axis=1)
        if prev is not None and np.array_equal(assign, prev):
            break  # converged; further updates are no-ops
        prev = assign.copy()
        trace.append(float(d[np.arange(n), assign].sum()))
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = points[members].mean(axis=0)
            else:
                far = int(d[np.arange(n), assign].argmax())
                centroids[j] = points[far]
                assign[far] = j
                d[far, j] = 0.0
    d = _sq_dists(points, centroids)
    assign = d.argmin(axis=1)
    trace.append(float(d[np.arange(n), assign].sum()))
    return KMeansResult(centroids, assign, tuple(trace))


# ---------------------------------------------------------- serialization
_KINDS = {"ridge": RidgeModel, "softmax_classifier": SoftmaxClassifier, "mlp": MlpRegressor}


def model_to_json(model) -> str:
    return json.dumps(model.to_dict())


def model_from_json(text: str):
    d = json.loads(text)
    return _KINDS[d["kind"]].from_dict(d)
