"""Differentiable predictive models with exact hand-derived gradients.

Two architectures: logistic regression and a one-hidden-layer perceptron
with tanh activation, each with a sigmoid head (binary) or softmax head
(three or more classes). Parameters live in a single flat vector with a
documented layout, and every gradient is written out by hand as a
vector-Jacobian product: the loss supplies d(loss)/d(scores) and the
model chains it back to parameter space. A central finite-difference
harness verifies the whole composition.

Score batches are plain arrays: shape (n,) strictly inside (0, 1) for
binary heads, shape (n, C) rows on the probability simplex for softmax
heads (see check_prediction_batch). Binary outputs are clipped to
[1e-15, 1 - 1e-15] purely as a float-precision guard against saturated
sigmoids rounding to exactly 0 or 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError, ShapeError

_BINARY_GUARD = 1e-15


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; parameter layouts are fixed by this."""

    kind: str                 # "logistic" | "mlp"
    input_dim: int
    hidden_dim: int = 0       # mlp only
    output_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ParameterError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ParameterError("input_dim must be >= 1")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ParameterError("mlp needs hidden_dim >= 1")
        if self.output_classes < 2:
            raise ParameterError("output_classes must be >= 2")

    @property
    def binary(self) -> bool:
        return self.output_classes == 2

    @property
    def head_width(self) -> int:
        return 1 if self.binary else self.output_classes


def n_params(spec: ModelSpec) -> int:
    """Length of the flat parameter vector for a given architecture."""
    d, c = spec.input_dim, spec.head_width
    if spec.kind == "logistic":
        return c * d + c
    h = spec.hidden_dim
    return h * d + h + c * h + c


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform initialization on [-1/sqrt(fan_in), +1/sqrt(fan_in)] per layer."""
    d, c = spec.input_dim, spec.head_width
    if spec.kind == "logistic":
        bound = 1.0 / math.sqrt(d)
        return rng.uniform(-bound, bound, size=c * d + c)
    h = spec.hidden_dim
    b1 = 1.0 / math.sqrt(d)
    b2 = 1.0 / math.sqrt(h)
    return np.concatenate([
        rng.uniform(-b1, b1, size=h * d + h),
        rng.uniform(-b2, b2, size=c * h + c),
    ])


def _unpack(spec: ModelSpec, params: np.ndarray):
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (n_params(spec),):
        raise ShapeError(
            f"expected {n_params(spec)} parameters for {spec.kind}, "
            f"got shape {params.shape}")
    d, c = spec.input_dim, spec.head_width
    if spec.kind == "logistic":
        W = params[: c * d].reshape(c, d)
        b = params[c * d:]
        return W, b
    h = spec.hidden_dim
    k = 0
    W1 = params[k: k + h * d].reshape(h, d); k += h * d
    b1 = params[k: k + h]; k += h
    W2 = params[k: k + c * h].reshape(c, h); k += c * h
    b2 = params[k:]
    return W1, b1, W2, b2


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _check_features(spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(
            f"expected features of shape (n, {spec.input_dim}), got {X.shape}")
    return X


def forward(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Model scores for a feature batch.

    Binary: sigmoid probabilities, shape (n,). Multi-class: softmax rows,
    shape (n, C).
    """
    X = _check_features(spec, features)
    if spec.kind == "logistic":
        W, b = _unpack(spec, params)
        Z = X @ W.T + b
    else:
        W1, b1, W2, b2 = _unpack(spec, params)
        H = np.tanh(X @ W1.T + b1)
        Z = H @ W2.T + b2
    if spec.binary:
        return np.clip(_sigmoid(Z[:, 0]), _BINARY_GUARD, 1.0 - _BINARY_GUARD)
    return _softmax(Z)


def check_prediction_batch(spec: ModelSpec, scores: np.ndarray) -> None:
    """Assert the documented score-batch invariants."""
    if spec.binary:
        if scores.ndim != 1 or not np.all((scores > 0) & (scores < 1)):
            raise ShapeError("binary scores must be shape (n,) strictly in (0,1)")
    else:
        if scores.ndim != 2 or scores.shape[1] != spec.output_classes:
            raise ShapeError(
                f"multi-class scores must be (n, {spec.output_classes})")
        if not np.allclose(scores.sum(axis=1), 1.0, atol=1e-9):
            raise ShapeError("multi-class rows must sum to 1 within 1e-9")


def _backprop(spec: ModelSpec, params: np.ndarray, X: np.ndarray,
              dscores: np.ndarray) -> np.ndarray:
    """Chain d(loss)/d(scores) back to the flat parameter vector."""
    if spec.kind == "logistic":
        W, b = _unpack(spec, params)
        Z = X @ W.T + b
        if spec.binary:
            s = np.clip(_sigmoid(Z[:, 0]), _BINARY_GUARD, 1.0 - _BINARY_GUARD)
            dZ = (dscores * s * (1.0 - s))[:, None]
        else:
            P = _softmax(Z)
            dZ = P * (dscores - (dscores * P).sum(axis=1, keepdims=True))
        return np.concatenate([(dZ.T @ X).ravel(), dZ.sum(axis=0)])

    W1, b1, W2, b2 = _unpack(spec, params)
    A = X @ W1.T + b1
    H = np.tanh(A)
    Z = H @ W2.T + b2
    if spec.binary:
        s = np.clip(_sigmoid(Z[:, 0]), _BINARY_GUARD, 1.0 - _BINARY_GUARD)
        dZ = (dscores * s * (1.0 - s))[:, None]
    else:
        P = _softmax(Z)
        dZ = P * (dscores - (dscores * P).sum(axis=1, keepdims=True))
    dH = dZ @ W2
    dA = dH * (1.0 - H * H)
    return np.concatenate([
        (dA.T @ X).ravel(), dA.sum(axis=0),
        (dZ.T @ H).ravel(), dZ.sum(axis=0),
    ])


def loss_and_grad(spec: ModelSpec, params: np.ndarray, loss,
                  features: np.ndarray) -> tuple[float, np.ndarray]:
    """Scalar loss and its exact parameter gradient at params.

    `loss` follows the score-objective convention of fairloss (it closes
    over labels/group masks and exposes value_and_grad on scores).
    """
    X = _check_features(spec, features)
    scores = forward(spec, params, X)
    value, dscores = loss.value_and_grad(scores)
    if not math.isfinite(value):
        raise NumericError(
            f"non-finite loss value {value!r}",
            component=getattr(loss, "name", type(loss).__name__))
    grad = _backprop(spec, params, X, np.asarray(dscores, dtype=np.float64))
    if not np.all(np.isfinite(grad)):
        raise NumericError(
            "non-finite gradient entries",
            component=getattr(loss, "name", type(loss).__name__))
    return value, grad


def grad_loss(spec: ModelSpec, params: np.ndarray, loss,
              features: np.ndarray) -> np.ndarray:
    """Exact gradient of the scalar loss at params (see loss_and_grad)."""
    return loss_and_grad(spec, params, loss, features)[1]


@dataclass(frozen=True)
class FiniteDiffReport:
    """Outcome of a central finite-difference gradient check."""

    max_rel_error: float     # over included coordinates; NaN if none included
    excluded: int            # coordinates skipped for kink adjacency
    rel_errors: np.ndarray   # per-coordinate, NaN where excluded


def finite_diff_check(spec: ModelSpec, params: np.ndarray, loss,
                      features: np.ndarray, step: float = 1e-5,
                      kink_margin: float = 1e-6) -> FiniteDiffReport:
    """Compare the analytic gradient against central differences.

    Relative error per coordinate is |analytic - numeric| divided by
    max(|analytic|, 1e-12). A coordinate is excluded when any of its
    three evaluations (base, +step, -step) puts a sample within
    kink_margin of a loss kink — the comparison is meaningless across a
    subgradient point.
    """
    if step <= 0:
        raise ParameterError(f"step must be > 0, got {step}")
    X = _check_features(spec, features)
    params = np.asarray(params, dtype=np.float64)
    analytic = grad_loss(spec, params, loss, X)

    def eval_at(theta):
        scores = forward(spec, theta, X)
        return loss.value(scores), loss.kink_gap(scores)

    _, base_gap = eval_at(params)
    p = params.size
    rel = np.full(p, np.nan)
    excluded = 0
    for i in range(p):
        up = params.copy(); up[i] += step
        dn = params.copy(); dn[i] -= step
        v_up, gap_up = eval_at(up)
        v_dn, gap_dn = eval_at(dn)
        if min(base_gap, gap_up, gap_dn) < kink_margin:
            excluded += 1
            continue
        numeric = (v_up - v_dn) / (2.0 * step)
        rel[i] = abs(analytic[i] - numeric) / max(abs(analytic[i]), 1e-12)
    included = ~np.isnan(rel)
    max_rel = float(np.max(rel[included])) if included.any() else math.nan
    return FiniteDiffReport(max_rel_error=max_rel, excluded=excluded,
                            rel_errors=rel)
