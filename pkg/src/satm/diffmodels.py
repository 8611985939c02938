"""Small differentiable classifiers with closed-form derivative products.

Parameters are flat float64 vectors. The layout is row-major, weights
before biases, layer by layer:

* ``softmax_regression``: ``W (C x d), b (C)``
* ``mlp1``: ``W1 (h x d), b1 (h), W2 (C x h), b2 (C)``
* ``quadratic``: ``theta (d)``; a test surrogate with per-sample loss
  ``0.5 * ||theta - x||^2`` that ignores labels (``C == 1``).

All losses are weighted means over the batch plus an optional ridge term
``ridge * ||theta||^2 / 2``. Second-order products are computed with a
single forward-over-reverse (R-operator) pass: the directional derivative
of the parameter gradient gives the Hessian-vector product, and the
directional derivative of the input gradient gives the mixed product.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import _binio
from .errors import ContractError, NumericError
from .rng import generator

__all__ = [
    "ModelSpec",
    "LabeledBatch",
    "ce_loss",
    "ce_grad",
    "ce_hvp",
    "ce_mixed_vp",
    "second_order_products",
    "predict",
    "accuracy",
    "init_params",
    "params_to_bytes",
    "params_from_bytes",
]

ARCHS = ("softmax_regression", "mlp1", "quadratic")


def _tanh(a):
    f = np.tanh(a)
    d1 = 1.0 - f * f
    return f, d1, -2.0 * f * d1


def _sigmoid(a):
    f = 0.5 * (1.0 + np.tanh(0.5 * a))
    d1 = f * (1.0 - f)
    return f, d1, d1 * (1.0 - 2.0 * f)


def _softplus(a):
    f = np.logaddexp(0.0, a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a))
    return f, s, s * (1.0 - s)


# Each returns (value, first derivative, second derivative).
ACTIVATIONS = {"tanh": _tanh, "sigmoid": _sigmoid, "softplus": _softplus}


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    d: int
    C: int
    hidden: int = 0
    activation: str = "tanh"
    ridge: float = 0.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ContractError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.d < 1 or self.C < 1:
            raise ContractError(f"need d >= 1 and C >= 1, got d={self.d}, C={self.C}")
        if self.arch == "mlp1":
            if self.hidden < 1:
                raise ContractError("mlp1 needs a hidden width >= 1")
            if self.activation not in ACTIVATIONS:
                raise ContractError(
                    f"activation {self.activation!r} is not twice differentiable "
                    f"or unknown; choose from {sorted(ACTIVATIONS)}"
                )
        if self.arch == "softmax_regression" and self.C < 2:
            raise ContractError("softmax_regression needs C >= 2")
        if self.arch == "quadratic" and self.C != 1:
            raise ContractError("quadratic surrogate takes C == 1")
        if not (np.isfinite(self.ridge) and self.ridge >= 0):
            raise ContractError(f"ridge must be finite and >= 0, got {self.ridge}")

    @classmethod
    def softmax_regression(cls, d, C, ridge=0.0):
        return cls("softmax_regression", int(d), int(C), ridge=float(ridge))

    @classmethod
    def mlp1(cls, d, h, C, activation="tanh", ridge=0.0):
        return cls("mlp1", int(d), int(C), hidden=int(h), activation=activation, ridge=float(ridge))

    @classmethod
    def quadratic(cls, d, ridge=0.0):
        return cls("quadratic", int(d), 1, ridge=float(ridge))

    @property
    def param_count(self) -> int:
        d, C, h = self.d, self.C, self.hidden
        if self.arch == "softmax_regression":
            return C * d + C
        if self.arch == "mlp1":
            return h * d + h + C * h + C
        return d

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        return cls(**data)

    def label(self) -> str:
        if self.arch == "mlp1":
            return f"mlp1(h={self.hidden},{self.activation})"
        return self.arch

    def unpack(self, theta):
        """Split a flat vector into the layer arrays (views, no copies)."""
        d, C, h = self.d, self.C, self.hidden
        if self.arch == "softmax_regression":
            return theta[: C * d].reshape(C, d), theta[C * d:]
        if self.arch == "mlp1":
            i1 = h * d
            i2 = i1 + h
            i3 = i2 + C * h
            return (
                theta[:i1].reshape(h, d),
                theta[i1:i2],
                theta[i2:i3].reshape(C, h),
                theta[i3:],
            )
        return (theta,)


@dataclass(frozen=True)
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray
    sample_weights: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def coefficients(self) -> np.ndarray:
        """Per-sample weights of the mean reduction (they sum to one)."""
        if self.sample_weights is None:
            return np.full(self.n, 1.0 / self.n)
        w = np.asarray(self.sample_weights, dtype=np.float64)
        return w / w.sum()


def _check(spec: ModelSpec, theta, batch: LabeledBatch, v=None):
    theta = np.asarray(theta)
    if theta.ndim != 1 or theta.shape[0] != spec.param_count:
        raise ContractError(
            f"theta has shape {theta.shape}, expected ({spec.param_count},) for {spec.label()}"
        )
    X = np.asarray(batch.features)
    y = np.asarray(batch.labels)
    if X.ndim != 2 or X.shape[1] != spec.d or X.shape[0] < 1:
        raise ContractError(f"features have shape {X.shape}, expected (n>=1, {spec.d})")
    if y.shape != (X.shape[0],):
        raise ContractError(f"labels have shape {y.shape}, expected ({X.shape[0]},)")
    if not np.issubdtype(y.dtype, np.integer):
        raise ContractError("labels must be integers")
    if y.min() < 0 or y.max() >= spec.C:
        raise ContractError(f"labels must lie in [0, {spec.C})")
    if batch.sample_weights is not None:
        w = np.asarray(batch.sample_weights)
        if w.shape != y.shape or not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ContractError("sample_weights must be positive, finite and one per sample")
    if not np.all(np.isfinite(theta)):
        raise NumericError("theta contains non-finite entries")
    if not np.all(np.isfinite(X)):
        raise NumericError("features contain non-finite entries")
    if v is not None:
        v = np.asarray(v)
        if v.shape != theta.shape:
            raise ContractError(f"direction has shape {v.shape}, expected {theta.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError("direction contains non-finite entries")
    return theta.astype(np.float64, copy=False), X.astype(np.float64, copy=False), y


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(spec, theta, X):
    """Return (logits, cache) for the classifier architectures."""
    if spec.arch == "softmax_regression":
        W, b = spec.unpack(theta)
        return X @ W.T + b, None
    W1, b1, W2, b2 = spec.unpack(theta)
    a = X @ W1.T + b1
    g, s1, s2 = ACTIVATIONS[spec.activation](a)
    return g @ W2.T + b2, (a, g, s1, s2)


def _per_sample_ce(z, y):
    n = z.shape[0]
    shifted = z - z[np.arange(n), y][:, None]
    m = shifted.max(axis=1)
    e = np.exp(shifted - m[:, None])
    e[np.arange(n), shifted.argmax(axis=1)] = 0.0
    return m + np.log1p(e.sum(axis=1))


def ce_loss(spec: ModelSpec, theta, batch: LabeledBatch) -> float:
    theta, X, y = _check(spec, theta, batch)
    c = batch.coefficients()
    if spec.arch == "quadratic":
        per = 0.5 * np.sum((X - theta) ** 2, axis=1)
    else:
        z, _ = _forward(spec, theta, X)
        per = _per_sample_ce(z, y)
    loss = float(c @ per)
    if spec.ridge:
        loss += 0.5 * spec.ridge * float(theta @ theta)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    return loss


def _grad(spec, theta, X, y, c):
    """Gradient plus the intermediates the R-operator pass reuses."""
    if spec.arch == "quadratic":
        return theta - c @ X, None
    z, cache = _forward(spec, theta, X)
    p = _softmax(z)
    e = p.copy()
    e[np.arange(len(y)), y] -= 1.0
    e *= c[:, None]
    if spec.arch == "softmax_regression":
        grad = np.concatenate([(e.T @ X).ravel(), e.sum(axis=0)])
        return grad, (p, e, None)
    W1, b1, W2, b2 = spec.unpack(theta)
    a, g, s1, s2 = cache
    dg = e @ W2
    da = dg * s1
    grad = np.concatenate([(da.T @ X).ravel(), da.sum(axis=0), (e.T @ g).ravel(), e.sum(axis=0)])
    return grad, (p, e, (a, g, s1, s2, dg, da))


def ce_grad(spec: ModelSpec, theta, batch: LabeledBatch) -> np.ndarray:
    theta, X, y = _check(spec, theta, batch)
    grad, _ = _grad(spec, theta, X, y, batch.coefficients())
    if spec.ridge:
        grad = grad + spec.ridge * theta
    return grad


def _r_pass(spec, theta, X, y, c, v):
    """Directional derivatives along ``v`` of the parameter and input gradients."""
    if spec.arch == "quadratic":
        return v.copy(), -np.outer(c, v)
    _, (p, e, hidden) = _grad(spec, theta, X, y, c)
    if spec.arch == "softmax_regression":
        W, _ = spec.unpack(theta)
        V, vb = spec.unpack(v)
        Rz = X @ V.T + vb
        Rp = p * Rz
        Rp -= p * Rp.sum(axis=1, keepdims=True)
        Re = c[:, None] * Rp
        hvp = np.concatenate([(Re.T @ X).ravel(), Re.sum(axis=0)])
        mixed = e @ V + Re @ W
        return hvp, mixed
    W1, _, W2, _ = spec.unpack(theta)
    V1, vb1, V2, vb2 = spec.unpack(v)
    a, g, s1, s2, dg, da = hidden
    Ra = X @ V1.T + vb1
    Rg = s1 * Ra
    Rz = g @ V2.T + Rg @ W2.T + vb2
    Rp = p * Rz
    Rp -= p * Rp.sum(axis=1, keepdims=True)
    Re = c[:, None] * Rp
    Rdg = e @ V2 + Re @ W2
    Rda = Rdg * s1 + dg * s2 * Ra
    hvp = np.concatenate([
        (Rda.T @ X).ravel(),
        Rda.sum(axis=0),
        (Re.T @ g + e.T @ Rg).ravel(),
        Re.sum(axis=0),
    ])
    mixed = da @ V1 + Rda @ W1
    return hvp, mixed


def second_order_products(spec: ModelSpec, theta, batch: LabeledBatch, v):
    """Return ``(H v, d/dX [v . grad_theta L])`` from one shared pass."""
    theta, X, y = _check(spec, theta, batch, v)
    v = np.asarray(v, dtype=np.float64)
    hvp, mixed = _r_pass(spec, theta, X, y, batch.coefficients(), v)
    if spec.ridge:
        hvp = hvp + spec.ridge * v
    return hvp, mixed


def ce_hvp(spec: ModelSpec, theta, batch: LabeledBatch, v) -> np.ndarray:
    return second_order_products(spec, theta, batch, v)[0]


def ce_mixed_vp(spec: ModelSpec, theta, batch: LabeledBatch, v) -> np.ndarray:
    """Gradient with respect to ``batch.features`` of ``v . grad_theta L``; shape (n, d)."""
    return second_order_products(spec, theta, batch, v)[1]


def predict(spec: ModelSpec, theta, features) -> np.ndarray:
    if spec.arch == "quadratic":
        raise ContractError("the quadratic surrogate is not a classifier")
    z, _ = _forward(spec, np.asarray(theta, dtype=np.float64), np.asarray(features, dtype=np.float64))
    return z.argmax(axis=1)


def accuracy(spec: ModelSpec, theta, features, labels) -> float:
    return float(np.mean(predict(spec, theta, features) == np.asarray(labels)))


def init_params(spec: ModelSpec, seed: int, zero: bool = False) -> np.ndarray:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.

    ``zero=True`` returns the all-zero vector (uniform softmax output).
    """
    theta = np.zeros(spec.param_count)
    if zero:
        return theta
    rng = generator(seed, "init_params", spec.arch)
    if spec.arch == "quadratic":
        theta[:] = rng.uniform(-1.0, 1.0, spec.d)
        return theta
    parts = spec.unpack(theta)
    if spec.arch == "softmax_regression":
        parts[0][:] = rng.uniform(-1.0, 1.0, parts[0].shape) / np.sqrt(spec.d)
    else:
        parts[0][:] = rng.uniform(-1.0, 1.0, parts[0].shape) / np.sqrt(spec.d)
        parts[2][:] = rng.uniform(-1.0, 1.0, parts[2].shape) / np.sqrt(spec.hidden)
    return theta


def params_to_bytes(theta) -> bytes:
    return _binio.encode_array(theta)


def params_from_bytes(data: bytes, spec: ModelSpec | None = None) -> np.ndarray:
    reader = _binio.Reader(data, "parameter vector")
    theta = reader.array(None if spec is None else spec.param_count)
    reader.finish()
    return theta
