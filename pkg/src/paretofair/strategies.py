"""Descent strategies and the adaptive switching rule.

Three ways to turn per-objective gradients into one update direction:

- ``pareto_cone``: min-norm aggregation (see :mod:`paretofair.moo`) that
  decreases every objective at once whenever the gradients permit it,
- ``adaptive``: exponential reweighting that pushes weight toward the
  objectives improving most slowly,
- ``exploration``: Dirichlet-sampled weights with momentum-style smoothing,
  used to escape flat or conflicting regions.

The selector switches among them by rule priority: stagnation first, gradient
alignment second, improvement-rate imbalance third; otherwise the current
strategy is kept.  A dwell counter stops the selector from thrashing.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Optional

import numpy as np

from .errors import ParameterError
from .moo import as_gradient_matrix

PARETO_CONE = "pareto_cone"
ADAPTIVE = "adaptive"
EXPLORATION = "exploration"
STRATEGIES = (PARETO_CONE, ADAPTIVE, EXPLORATION)

MIN_DWELL = 3          # iterations a strategy stays active before a switch
RATIO_GUARD = 1e-12    # denominator floor in the improvement-ratio rule
ZERO_NORM = 1e-15      # below this a vector counts as zero


@dataclass(frozen=True)
class SelectorThresholds:
    """Knobs for the switching rule; every field is exposed in run configs."""

    eps_align: float = 0.2     # min pairwise cosine that counts as aligned
    beta: float = 2.0          # improvement-ratio imbalance trigger
    delta: float = 1e-5        # stagnation tolerance on ||loss change||
    window: int = 5            # consecutive small steps that mean stagnant
    tau_adapt: float = 10.0    # exponential reweighting rate
    lambda_explore: float = 0.5  # smoothing weight on the fresh direction

    def __post_init__(self):
        if min(self.eps_align, self.beta, self.delta, self.tau_adapt) <= 0:
            raise ParameterError("selector thresholds must be positive")
        if self.beta <= 1:
            raise ParameterError(f"imbalance threshold must exceed 1, got {self.beta}")
        if not 0 < self.lambda_explore <= 1:
            raise ParameterError(
                f"exploration smoothing must lie in (0, 1], got {self.lambda_explore}")
        if self.window < 1:
            raise ParameterError(f"stagnation window must be >= 1, got {self.window}")


@dataclass
class StrategyState:
    """Single-owner mutable state threaded through the training loop."""

    active: str
    loss_history: Deque[np.ndarray]
    alpha_prev: np.ndarray
    d_last: np.ndarray
    rng: np.random.Generator
    stagnation_count: int = 0
    dwell: int = MIN_DWELL


def initial_state(n_params: int, n_objectives: int,
                  rng: np.random.Generator,
                  window: int = SelectorThresholds.window) -> StrategyState:
    """Fresh state: adaptive strategy, empty history, zero smoothing memory."""
    return StrategyState(
        active=ADAPTIVE,
        loss_history=deque(maxlen=window + 1),
        alpha_prev=np.full(n_objectives, 1.0 / n_objectives),
        d_last=np.zeros(n_params),
        rng=rng,
    )


def improvement_rates(loss_prev: np.ndarray, loss_cur: np.ndarray,
                      eps: float = 1e-8) -> np.ndarray:
    """Relative per-objective progress; negative entries mean worsening."""
    if eps <= 0:
        raise ParameterError(f"rate guard must be positive, got {eps}")
    loss_prev = np.asarray(loss_prev, dtype=np.float64)
    loss_cur = np.asarray(loss_cur, dtype=np.float64)
    return (loss_prev - loss_cur) / np.maximum(loss_prev, eps)


def aw_weights(rates: np.ndarray, tau_adapt: float) -> np.ndarray:
    """Exponential reweighting: slow objectives get large weights.

    alpha_k proportional to exp(-tau * rate_k), computed with the usual
    max-shift so extreme rates cannot overflow.
    """
    if tau_adapt <= 0:
        raise ParameterError(f"adaptation rate must be positive, got {tau_adapt}")
    rates = np.asarray(rates, dtype=np.float64)
    logits = -tau_adapt * rates
    weights = np.exp(logits - logits.max())
    return weights / weights.sum()


def detect_stagnation(loss_history, delta: float, window: int) -> bool:
    """True iff the last `window` consecutive loss changes were all tiny."""
    if window < 1:
        raise ParameterError(f"stagnation window must be >= 1, got {window}")
    history = list(loss_history)
    if len(history) < window + 1:
        return False
    recent = history[-(window + 1):]
    return all(
        float(np.linalg.norm(np.asarray(b) - np.asarray(a))) < delta
        for a, b in zip(recent, recent[1:]))


def observe_losses(state: StrategyState, losses: np.ndarray, delta: float) -> None:
    """Record the iteration's loss vector and maintain the stagnation counter."""
    losses = np.asarray(losses, dtype=np.float64)
    if state.loss_history and float(
            np.linalg.norm(losses - state.loss_history[-1])) < delta:
        state.stagnation_count += 1
    else:
        state.stagnation_count = 0
    state.loss_history.append(losses)


def _unit(vector: np.ndarray) -> Optional[np.ndarray]:
    norm = float(np.linalg.norm(vector))
    if norm <= ZERO_NORM:
        return None
    return vector / norm


def aw_direction(grads: np.ndarray, rates: np.ndarray,
                 tau_adapt: float) -> tuple[Optional[np.ndarray], np.ndarray]:
    """Adaptive-weighting step: unit descent along the reweighted gradient sum."""
    mat = as_gradient_matrix(grads)
    alpha = aw_weights(rates, tau_adapt)
    return _unit(-(alpha @ mat)), alpha


def pss_direction(grads: np.ndarray, state: StrategyState,
                  lambda_explore: float) -> tuple[Optional[np.ndarray], np.ndarray]:
    """Exploration step: Dirichlet-weighted descent blended with the last move.

    Uses the state's generator (reproducible), updates the smoothing memory,
    and returns the sampled weights alongside the unit direction.
    """
    if not 0 < lambda_explore <= 1:
        raise ParameterError(
            f"exploration smoothing must lie in (0, 1], got {lambda_explore}")
    mat = as_gradient_matrix(grads)
    alpha = state.rng.dirichlet(np.ones(mat.shape[0]))
    fresh = -(alpha @ mat)
    direction = _unit(lambda_explore * fresh + (1 - lambda_explore) * state.d_last)
    state.d_last = np.zeros(mat.shape[1]) if direction is None else direction
    return direction, alpha


def min_pairwise_cosine(grads: np.ndarray) -> float:
    """Smallest cosine between any two gradients; zero-norm rows count as 0.

    No pairs (a single objective) returns +1: one gradient is vacuously
    aligned with itself, so the alignment rule treats it as the best case.
    """
    mat = as_gradient_matrix(grads)
    k = mat.shape[0]
    if k < 2:
        return 1.0
    norms = np.linalg.norm(mat, axis=1)
    worst = 1.0
    for i in range(k):
        for j in range(i + 1, k):
            if norms[i] <= ZERO_NORM or norms[j] <= ZERO_NORM:
                cos = 0.0
            else:
                cos = float(mat[i] @ mat[j] / (norms[i] * norms[j]))
            worst = min(worst, cos)
    return worst


def select_strategy(state: StrategyState, grads: np.ndarray,
                    rates: np.ndarray,
                    thresholds: SelectorThresholds) -> str:
    """Pick the next strategy by rule priority, honoring the dwell hysteresis.

    1. stagnation          -> exploration
    2. aligned gradients   -> pareto_cone
    3. imbalanced progress -> adaptive (needs two improving objectives)
    4. otherwise           -> keep the current strategy
    """
    if state.dwell < MIN_DWELL:
        return state.active
    if detect_stagnation(state.loss_history, thresholds.delta, thresholds.window):
        return EXPLORATION
    if min_pairwise_cosine(grads) > thresholds.eps_align:
        return PARETO_CONE
    rates = np.asarray(rates, dtype=np.float64)
    positive = rates[rates > 0]
    if positive.size >= 2:
        ratio = positive.max() / max(positive.min(), RATIO_GUARD)
        if ratio > thresholds.beta:
            return ADAPTIVE
    return state.active


def commit_strategy(state: StrategyState, chosen: str) -> None:
    """Apply the selector's choice, resetting the dwell clock on a switch."""
    if chosen not in STRATEGIES:
        raise ParameterError(f"unknown strategy {chosen!r}")
    if chosen == state.active:
        state.dwell += 1
    else:
        state.active = chosen
        state.dwell = 1
