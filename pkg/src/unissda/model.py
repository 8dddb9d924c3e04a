"""Linear softmax heads over feature vectors, with exact gradients.

Masked classes receive the logit ``SENTINEL`` so that their softmax mass
underflows to exactly zero. Gradients are written out by hand; the test suite
checks them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ConfigError, DataError, LabelError, ShapeError

SENTINEL = -1e30
_NORM_FLOOR = 1e-12


@dataclass
class ClassifierParams:
    weights: np.ndarray
    bias: np.ndarray
    temperature: float = 1.0
    cosine_mode: bool = False

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"weights {self.weights.shape} and bias {self.bias.shape} do not agree"
            )

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"weights": self.weights, "bias": self.bias}

    def with_arrays(self, arrays) -> "ClassifierParams":
        return replace(self, weights=arrays["weights"], bias=arrays["bias"])

    def copy(self) -> "ClassifierParams":
        return replace(self, weights=self.weights.copy(), bias=self.bias.copy())


def init_params(n_classes, n_features, rng, temperature=1.0, cosine_mode=False, std=0.01):
    """Gaussian weights with standard deviation ``std``, zero bias."""
    weights = std * rng.standard_normal((n_classes, n_features))
    return ClassifierParams(weights, np.zeros(n_classes), temperature, cosine_mode)


@dataclass
class HiddenLayer:
    """Optional learnable feature extractor ``tanh(X W^T + b)``."""

    weights: np.ndarray
    bias: np.ndarray

    def arrays(self):
        return {"hidden_weights": self.weights, "hidden_bias": self.bias}

    def with_arrays(self, arrays):
        return HiddenLayer(arrays["hidden_weights"], arrays["hidden_bias"])

    def copy(self):
        return HiddenLayer(self.weights.copy(), self.bias.copy())

    def forward(self, X):
        return np.tanh(X @ self.weights.T + self.bias)

    def backward(self, X, Z, dZ):
        dpre = dZ * (1.0 - Z * Z)
        return {"hidden_weights": dpre.T @ X, "hidden_bias": dpre.sum(axis=0)}


def init_hidden(n_features, width, rng):
    scale = 1.0 / np.sqrt(n_features)
    return HiddenLayer(scale * rng.standard_normal((width, n_features)), np.zeros(width))


def make_mask(n_classes, allowed) -> np.ndarray:
    mask = np.zeros(n_classes, dtype=bool)
    mask[list(allowed)] = True
    if not mask.any():
        raise ConfigError("a logit mask must allow at least one class")
    return mask


def _broadcast_mask(mask, n, c):
    if mask is None:
        return np.ones((n, c), dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (c,):
        return np.broadcast_to(mask, (n, c))
    if mask.shape != (n, c):
        raise ShapeError(f"mask shape {mask.shape} does not fit logits ({n}, {c})")
    return mask


def _row_normalize(A):
    norms = np.maximum(np.linalg.norm(A, axis=1, keepdims=True), _NORM_FLOOR)
    return A / norms, norms


def _forward_cache(params: ClassifierParams, Z, mask):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != params.weights.shape[1]:
        raise ShapeError(
            f"features of shape {Z.shape} do not match weights {params.weights.shape}"
        )
    cache = {"Z": Z}
    if params.cosine_mode:
        Wn, w_norm = _row_normalize(params.weights)
        Zn, z_norm = _row_normalize(Z)
        raw = Zn @ Wn.T
        cache.update(Wn=Wn, w_norm=w_norm, Zn=Zn, z_norm=z_norm)
    else:
        raw = Z @ params.weights.T + params.bias
    logits = raw / params.temperature
    full_mask = _broadcast_mask(mask, Z.shape[0], params.n_classes)
    logits[~full_mask] = SENTINEL
    cache["mask"] = full_mask
    return logits, cache


def forward(params: ClassifierParams, features, mask=None) -> np.ndarray:
    """Masked logits of shape (N, C).

    ``mask`` may be a length-C boolean vector shared by all rows or an (N, C)
    matrix for per-sample domain masks.
    """
    logits, _ = _forward_cache(params, features, mask)
    return logits


def _backward(params: ClassifierParams, cache, dlogits):
    """Gradients of a scalar w.r.t. weights, bias and the input features."""
    dlogits = np.where(cache["mask"], dlogits, 0.0)
    draw = dlogits / params.temperature
    if params.cosine_mode:
        Wn, Zn = cache["Wn"], cache["Zn"]
        dWn = draw.T @ Zn
        dZn = draw @ Wn
        dW = (dWn - Wn * np.sum(Wn * dWn, axis=1, keepdims=True)) / cache["w_norm"]
        dZ = (dZn - Zn * np.sum(Zn * dZn, axis=1, keepdims=True)) / cache["z_norm"]
        db = np.zeros_like(params.bias)
    else:
        dW = draw.T @ cache["Z"]
        db = draw.sum(axis=0)
        dZ = draw @ params.weights
    return {"weights": dW, "bias": db}, dZ


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts a vector or a matrix."""
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=-1, keepdims=True)
    if np.any(m <= SENTINEL / 2):
        raise DataError("softmax over a row where every class is masked")
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=-1, keepdims=True)
    if np.any(m <= SENTINEL / 2):
        raise DataError("softmax over a row where every class is masked")
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def interpolate_logits(g, g_prime, lam) -> np.ndarray:
    g, g_prime = np.asarray(g, dtype=np.float64), np.asarray(g_prime, dtype=np.float64)
    if g.shape != g_prime.shape:
        raise ShapeError(f"logit shapes differ: {g.shape} vs {g_prime.shape}")
    return softmax(lam * g + (1.0 - lam) * g_prime)


def _check_labels(labels, mask):
    labels = np.asarray(labels, dtype=np.int64)
    n, c = mask.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= c)):
        raise LabelError("label index outside the classifier's class range")
    if not mask[np.arange(n), labels].all():
        bad = labels[~mask[np.arange(n), labels]]
        raise LabelError(f"labels {sorted(set(bad.tolist()))} are masked out")
    return labels


def ce_from_logits(logits, labels, sample_weight=None):
    """Weighted mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    rows = np.arange(n)
    per_sample = -logp[rows, labels]
    w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    loss = float(np.sum(w * per_sample) / n) if n else 0.0
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits *= (w / max(n, 1))[:, None]
    return loss, dlogits, per_sample


def ce_loss_and_grad(
    params: ClassifierParams,
    features,
    labels,
    mask=None,
    sample_weight=None,
    weight_decay=0.0,
    return_input_grad=False,
):
    """Mean cross-entropy of a head and its exact gradient.

    The returned loss is the data term only. ``weight_decay`` adds
    ``weight_decay * theta`` to the gradient, which is the derivative of
    ``weight_decay / 2 * ||theta||^2``.
    """
    logits, cache = _forward_cache(params, features, mask)
    labels = _check_labels(labels, cache["mask"])
    loss, dlogits, _ = ce_from_logits(logits, labels, sample_weight)
    grads, dZ = _backward(params, cache, dlogits)
    if weight_decay:
        grads["weights"] = grads["weights"] + weight_decay * params.weights
        grads["bias"] = grads["bias"] + weight_decay * params.bias
    if return_input_grad:
        return loss, grads, dZ
    return loss, grads


def interpolated_ce_loss_and_grad(params, features, features_prime, labels, lam, mask=None):
    """Cross-entropy of ``softmax(lam * g + (1 - lam) * g')`` with its gradient.

    ``g`` is computed from ``features`` and ``g'`` from ``features_prime``;
    the input gradient is returned for both views.
    """
    g, cache = _forward_cache(params, features, mask)
    gp, cache_p = _forward_cache(params, features_prime, mask)
    labels = _check_labels(labels, cache["mask"])
    loss, dlogits, _ = ce_from_logits(lam * g + (1.0 - lam) * gp, labels)
    grads, dZ = _backward(params, cache, lam * dlogits)
    grads_p, dZp = _backward(params, cache_p, (1.0 - lam) * dlogits)
    grads = {k: grads[k] + grads_p[k] for k in grads}
    return loss, grads, dZ, dZp


SCHEDULES = ("constant", "cosine_with_warmup")


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "constant"
    warmup_steps: int = 50
    total_steps: int = 1500
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, t: int) -> float:
        base = self.learning_rate
        if self.schedule == "constant":
            return base
        if t < self.warmup_steps:
            return base * (t + 1) / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        progress = min((t - self.warmup_steps) / span, 1.0)
        return base * 0.5 * (1.0 + np.cos(np.pi * progress))


def sgd_step(params: dict, grads: dict, state: OptimizerState, t: int):
    """One SGD-with-momentum update (PyTorch convention).

    ``v <- momentum * v + (g + weight_decay * p)``; ``p <- p - lr(t) * v``.
    Returns new parameter arrays; ``state.velocity`` is updated in place.
    """
    lr = state.lr_at(t)
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        # zero-initialised velocity: momentum * 0 + g == g
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[name] = v
        out[name] = p - lr * v
    return out, state


def predict_from_logits(logits) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(logits, axis=1)
