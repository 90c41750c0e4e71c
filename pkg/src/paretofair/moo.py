"""Multi-objective descent core.

Turns a set of per-objective gradients into a single update direction that
improves every objective at once whenever that is possible.  The pipeline is:

1. normalize gradients by empirical loss scales so objectives with wildly
   different magnitudes compete fairly,
2. form the Gram matrix of the (normalized) gradients,
3. solve the min-norm problem  min_{alpha in simplex} ||sum_k alpha_k g_k||^2
   with a certificate of optimality,
4. use g* = sum_k alpha_k g_k: its negation (normalized) is a common descent
   direction, and ||g*|| measures how far the iterate is from multi-objective
   stationarity (||g*|| = 0 iff zero lies in the convex hull of the gradients).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import NumericError, ParameterError, ShapeError
from .fairloss import ScoreObjective
from .models import ModelSpec, forward

SIMPLEX_TOL = 1e-10
STATIONARY_ZERO_TOL = 1e-8


def as_gradient_matrix(grads: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Stack K gradient vectors into a (K, p) matrix, validating shape and finiteness."""
    mat = np.atleast_2d(np.asarray(grads, dtype=np.float64))
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ShapeError(f"expected K >= 1 gradient rows, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NumericError("non-finite entries in gradient set")
    return mat


def check_simplex(alpha: np.ndarray) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1:
        raise ShapeError(f"simplex weights must be a vector, got shape {alpha.shape}")
    if np.any(alpha < -SIMPLEX_TOL) or abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
        raise ParameterError(
            f"weights must be nonnegative and sum to 1 (sum={alpha.sum():.3e})")
    return np.clip(alpha, 0.0, None)


@dataclass(frozen=True)
class LossScales:
    """Per-objective empirical maxima used to normalize gradients."""

    max_values: np.ndarray
    eps: float

    def __post_init__(self):
        if self.eps <= 0:
            raise ParameterError(f"scale guard must be positive, got {self.eps}")
        if np.any(self.max_values < self.eps):
            raise ParameterError("every loss scale must be at least the guard")


@dataclass(frozen=True)
class KktCertificate:
    """Optimality evidence for a min-norm solution on the simplex.

    mu is the multiplier of the sum-to-one constraint (always -alpha'G alpha),
    nu the multipliers of the nonnegativity constraints.  The residuals bound
    how far the reported alpha is from exact first-order optimality.
    """

    alpha: np.ndarray
    mu: float
    nu: np.ndarray
    stationarity_residual: float
    complementarity_residual: float
    gap: float
    converged: bool
    iterations: int


def estimate_loss_scales(
    spec: ModelSpec,
    params: np.ndarray,
    losses: Sequence[ScoreObjective],
    features: np.ndarray,
    eps: float = 1e-6,
) -> LossScales:
    """Empirical per-objective scale: max sample-level loss over the batch, plus eps."""
    if eps <= 0:
        raise ParameterError(f"scale guard must be positive, got {eps}")
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise ParameterError("cannot estimate loss scales on an empty batch")
    scores = None
    maxima = np.empty(len(losses))
    for k, loss in enumerate(losses):
        if hasattr(loss, "eval_params"):
            # parameter-space objective: its batch value is its only sample
            per_sample = np.array([loss.eval_params(params)[0]])
        else:
            if scores is None:
                scores = forward(spec, params, features)
            per_sample = np.asarray(loss.sample_values(scores), dtype=np.float64)
        if not np.all(np.isfinite(per_sample)):
            raise NumericError("non-finite sample loss while estimating scales",
                               component=loss.name)
        maxima[k] = per_sample.max() + eps
    return LossScales(max_values=maxima, eps=eps)


def normalize_gradients(grads: np.ndarray, scales: LossScales) -> np.ndarray:
    """Divide each objective's gradient by its loss scale."""
    mat = as_gradient_matrix(grads)
    if scales.max_values.shape[0] != mat.shape[0]:
        raise ShapeError(
            f"{scales.max_values.shape[0]} scales for {mat.shape[0]} gradients")
    return mat / scales.max_values[:, None]


def gram(grads: np.ndarray) -> np.ndarray:
    """Gram matrix of the gradient rows: G[i, j] = <g_i, g_j>."""
    mat = as_gradient_matrix(grads)
    g = mat @ mat.T
    return (g + g.T) / 2.0


def _affine_minimizer(g: np.ndarray, support: list) -> np.ndarray:
    """Minimizer of (1/2) b' G_SS b subject only to sum(b) = 1.

    Solved through the KKT system [[G_SS, 1], [1', 0]]; duplicated or
    linearly dependent gradients make it singular, in which case the
    least-squares solution (any affine minimizer) is used instead.
    """
    m = len(support)
    system = np.zeros((m + 1, m + 1))
    system[:m, :m] = g[np.ix_(support, support)]
    system[:m, m] = 1.0
    system[m, :m] = 1.0
    rhs = np.zeros(m + 1)
    rhs[m] = 1.0
    try:
        beta = np.linalg.solve(system, rhs)[:m]
        if not np.all(np.isfinite(beta)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        beta = np.linalg.lstsq(system, rhs, rcond=None)[0][:m]
    return beta


def min_norm_solve(g: np.ndarray, tol: float = 1e-10,
                   max_iter: int = 50_000) -> KktCertificate:
    """Minimize (1/2) alpha' G alpha over the probability simplex.

    Wolfe's min-norm-point scheme: keep a support of simplex vertices,
    jump to the exact affine-hull minimizer over that support, and when
    that point leaves the simplex, walk toward it until a coordinate
    hits zero and drop that vertex.  Each round either terminates or
    changes the support, so the method is finite in exact arithmetic;
    the iteration cap only guards against floating-point cycling.  The
    loop stops when the linearized (Frank-Wolfe) gap — an upper bound
    on the suboptimality — drops to tol.
    """
    if tol <= 0:
        raise ParameterError(f"tolerance must be positive, got {tol}")
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError(f"Gram matrix must be square, got shape {g.shape}")
    g = (g + g.T) / 2.0
    k = g.shape[0]

    # Deterministic tie-break: when the uniform combination is already
    # optimal (identical gradients being the canonical case), return it
    # rather than an arbitrary vertex of the optimal face.
    uniform = np.full(k, 1.0 / k)
    grad = g @ uniform
    value = float(uniform @ grad)
    gap = value - float(grad.min())
    if gap <= tol:
        mu = -value
        nu = grad + mu
        return KktCertificate(
            alpha=uniform, mu=mu, nu=nu,
            stationarity_residual=float(np.max(np.abs(grad + mu - nu))),
            complementarity_residual=float(np.max(np.abs(uniform * nu))),
            gap=float(max(gap, 0.0)), converged=True, iterations=0)

    support = [int(np.argmin(np.diag(g)))]
    weights = np.array([1.0])
    iterations = 0
    prev_value = np.inf
    while True:
        alpha = np.zeros(k)
        alpha[support] = weights
        grad = g @ alpha
        value = float(alpha @ grad)
        gap = value - float(grad.min())
        if gap <= tol or iterations >= max_iter or value >= prev_value:
            break
        prev_value = value
        iterations += 1

        toward = int(np.argmin(grad))
        if toward not in support:
            support.append(toward)
            weights = np.append(weights, 0.0)
        while iterations < max_iter:
            beta = _affine_minimizer(g, support)
            if beta.min() >= -1e-14:
                weights = np.clip(beta, 0.0, None)
                weights /= weights.sum()
                break
            # walk toward beta until the first coordinate reaches zero
            negative = beta < 0
            theta = float(np.min(weights[negative]
                                 / (weights[negative] - beta[negative])))
            weights = (1.0 - theta) * weights + theta * beta
            keep = weights > 1e-15
            if keep.all():
                keep[int(np.argmin(weights))] = False
            support = [s for s, kept in zip(support, keep) if kept]
            weights = np.clip(weights[keep], 0.0, None)
            weights /= weights.sum()
            iterations += 1

    gap = float(max(gap, 0.0))
    converged = gap <= tol
    mu = -value
    nu = grad + mu
    stationarity = float(np.max(np.abs(grad + mu - nu)))
    complementarity = float(np.max(np.abs(alpha * nu)))
    return KktCertificate(alpha=alpha, mu=mu, nu=nu,
                          stationarity_residual=stationarity,
                          complementarity_residual=complementarity,
                          gap=gap, converged=converged,
                          iterations=iterations)


def aggregate(grads: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Convex combination g* = sum_k alpha_k g_k."""
    mat = as_gradient_matrix(grads)
    alpha = check_simplex(alpha)
    if alpha.shape[0] != mat.shape[0]:
        raise ShapeError(f"{alpha.shape[0]} weights for {mat.shape[0]} gradients")
    return alpha @ mat


def pcp_direction(grads: np.ndarray, alpha: np.ndarray,
                  zero_tol: float = STATIONARY_ZERO_TOL) -> Optional[np.ndarray]:
    """Unit common-descent direction -g*/||g*||, or None at a stationary point.

    With alpha from min_norm_solve, the returned direction has nonpositive
    inner product with every objective gradient, so a small step along it
    cannot increase any objective to first order.
    """
    combined = aggregate(grads, alpha)
    norm = float(np.linalg.norm(combined))
    if norm <= zero_tol:
        return None
    return -combined / norm


def cone_membership(grads: np.ndarray, direction: np.ndarray,
                    slack: float = 0.0) -> bool:
    """True iff the direction does not increase any objective: <g_k, d> <= slack."""
    mat = as_gradient_matrix(grads)
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (mat.shape[1],):
        raise ShapeError(
            f"direction length {direction.shape} does not match gradients "
            f"of length {mat.shape[1]}")
    return bool(np.all(mat @ direction <= slack))


def stationarity_measure(grads: np.ndarray, tol: float = 1e-10,
                         max_iter: int = 50_000) -> float:
    """Distance from multi-objective stationarity: min-norm point of conv{g_k}.

    Zero certifies that no direction can decrease every objective at once.
    """
    mat = as_gradient_matrix(grads)
    cert = min_norm_solve(gram(mat), tol=tol, max_iter=max_iter)
    if not cert.converged:
        raise NumericError(
            f"min-norm solve did not reach gap {tol} in {max_iter} iterations",
            component="min_norm")
    return float(np.linalg.norm(aggregate(mat, cert.alpha)))
