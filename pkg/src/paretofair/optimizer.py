"""Multi-strategy training loop with Pareto-front tracking.

One iteration: evaluate every objective and its gradient, normalize the
gradients by empirical loss scales, let the selector pick a strategy, step
the parameters a fixed length along that strategy's unit direction (after an
optional box-constraint filter), and feed the loss vector to the
non-dominated archive.  Everything is deterministic given the config seed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DiagnosticError, NumericError, ParameterError
from .fairloss import ScoreObjective
from .models import ModelSpec, init_params, loss_and_grad
from .moo import (
    STATIONARY_ZERO_TOL,
    aggregate,
    estimate_loss_scales,
    gram,
    min_norm_solve,
    normalize_gradients,
    pcp_direction,
)
from .strategies import (
    ADAPTIVE,
    EXPLORATION,
    PARETO_CONE,
    SelectorThresholds,
    aw_direction,
    commit_strategy,
    improvement_rates,
    initial_state,
    observe_losses,
    pss_direction,
    select_strategy,
)

OMEGA_FLOOR = 1e-16  # keeps log(omega) finite once stationarity is reached


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run; every field maps to a config key."""

    eta: float = 0.05
    iterations: int = 1000
    batch_mode: str = "full"              # "full" or "minibatch"
    batch_size: Optional[int] = None
    lam: float = 0.1                      # task weight used by objective builders
    seed: int = 0
    thresholds: SelectorThresholds = field(default_factory=SelectorThresholds)
    loss_spec: Optional[Sequence[ScoreObjective]] = None
    constraint_box: Optional[tuple] = None  # (lo, hi), broadcast to params
    zero_tol: float = STATIONARY_ZERO_TOL
    omega_every: int = 25                 # stationarity sampling period
    scale_refresh: int = 50               # full-batch scale recomputation period
    scale_eps: float = 1e-6
    qp_tol: float = 1e-10
    qp_max_iter: int = 50_000
    explore_on_stationary: bool = False   # walk the front instead of stopping
    archive_cap: int = 64

    def __post_init__(self):
        if self.eta <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.eta}")
        if self.iterations < 0:
            raise ParameterError(
                f"iteration count must be >= 0, got {self.iterations}")
        if self.batch_mode not in ("full", "minibatch"):
            raise ParameterError(
                f"batch_mode must be 'full' or 'minibatch', got {self.batch_mode!r}")
        if self.batch_mode == "minibatch" and (
                self.batch_size is None or self.batch_size < 1):
            raise ParameterError("minibatch mode needs batch_size >= 1")
        if min(self.omega_every, self.scale_refresh, self.archive_cap) < 1:
            raise ParameterError(
                "omega_every, scale_refresh, and archive_cap must be >= 1")


@dataclass(frozen=True)
class IterationRecord:
    """Everything the trace keeps about a single iteration."""

    t: int
    losses: tuple
    alpha: tuple
    strategy: str
    combined_norm: float
    update_norm: float
    omega: Optional[float]
    min_norm_converged: Optional[bool]
    wall_time: float

    def to_dict(self, include_timing: bool = True) -> dict:
        out = {
            "t": self.t,
            "losses": list(self.losses),
            "alpha": list(self.alpha),
            "strategy": self.strategy,
            "combined_norm": self.combined_norm,
            "update_norm": self.update_norm,
            "omega": self.omega,
            "min_norm_converged": self.min_norm_converged,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out


@dataclass
class TrainTrace:
    """Per-iteration records plus how the run ended."""

    records: list[IterationRecord] = field(default_factory=list)
    termination: str = "completed"

    def __len__(self) -> int:
        return len(self.records)

    def omega_samples(self) -> list[tuple[int, float]]:
        return [(r.t, r.omega) for r in self.records if r.omega is not None]

    def to_records(self, include_timing: bool = True) -> list[dict]:
        return [r.to_dict(include_timing) for r in self.records]


def dominates(a: np.ndarray, b: np.ndarray) -> bool:
    """Strict Pareto dominance for minimization: a beats b."""
    a, b = np.asarray(a), np.asarray(b)
    return bool(np.all(a <= b) and np.any(a < b))


@dataclass
class ArchiveEntry:
    losses: np.ndarray
    params: Optional[np.ndarray]
    snapshot_id: int


class ParetoArchive:
    """Bounded set of mutually non-dominated loss vectors with snapshots.

    Inserts are rejected when dominated (or exactly duplicated) by a member;
    members dominated by the newcomer are dropped.  Over the cap, the entry
    whose nearest neighbor in loss space is closest gets evicted, keeping
    the survivors spread across the front.
    """

    def __init__(self, cap: int = 64):
        if cap < 1:
            raise ParameterError(f"archive cap must be >= 1, got {cap}")
        self.cap = cap
        self.entries: list[ArchiveEntry] = []

    def __len__(self) -> int:
        return len(self.entries)

    def loss_matrix(self) -> np.ndarray:
        if not self.entries:
            return np.empty((0, 0))
        return np.array([e.losses for e in self.entries])

    def insert(self, losses: np.ndarray, params: Optional[np.ndarray] = None,
               snapshot_id: int = 0) -> bool:
        losses = np.asarray(losses, dtype=np.float64).copy()
        if not np.all(np.isfinite(losses)):
            raise NumericError("non-finite loss vector cannot enter the archive")
        for entry in self.entries:
            if dominates(entry.losses, losses) or np.array_equal(entry.losses, losses):
                return False
        self.entries = [e for e in self.entries if not dominates(losses, e.losses)]
        self.entries.append(ArchiveEntry(
            losses=losses,
            params=None if params is None else np.array(params, dtype=np.float64),
            snapshot_id=snapshot_id))
        if len(self.entries) > self.cap:
            self._evict_most_crowded()
        return True

    def _evict_most_crowded(self) -> None:
        points = self.loss_matrix()
        distance = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
        np.fill_diagonal(distance, np.inf)
        del self.entries[int(np.argmin(distance.min(axis=1)))]


def archive_insert(archive: ParetoArchive, losses: np.ndarray,
                   snapshot_id: int = 0,
                   params: Optional[np.ndarray] = None) -> ParetoArchive:
    """Functional-style wrapper around ParetoArchive.insert."""
    archive.insert(losses, params=params, snapshot_id=snapshot_id)
    return archive


def apply_constraints(direction: np.ndarray, params: np.ndarray,
                      constraint_box: Optional[tuple]) -> np.ndarray:
    """Zero direction components pointing out of the box at active bounds.

    Parameters strictly inside the box are never touched; without a box the
    direction passes through unchanged.
    """
    if constraint_box is None:
        return direction
    lo = np.broadcast_to(np.asarray(constraint_box[0], dtype=np.float64),
                         params.shape)
    hi = np.broadcast_to(np.asarray(constraint_box[1], dtype=np.float64),
                         params.shape)
    if np.any(lo > hi):
        raise ParameterError("box bounds must satisfy lo <= hi")
    filtered = np.array(direction, dtype=np.float64)
    filtered[(params >= hi) & (filtered > 0)] = 0.0
    filtered[(params <= lo) & (filtered < 0)] = 0.0
    return filtered


def convergence_diagnostic(trace: TrainTrace) -> float:
    """Least-squares slope of log(best stationarity so far) against log t."""
    samples = trace.omega_samples()
    if len(samples) < 2:
        raise DiagnosticError(
            f"need at least 2 stationarity samples, got {len(samples)}")
    ts = np.array([t for t, _ in samples], dtype=np.float64)
    best = np.minimum.accumulate(np.array([w for _, w in samples]))
    slope, _ = np.polyfit(np.log(ts), np.log(np.maximum(best, OMEGA_FLOOR)), 1)
    return float(slope)


class TrainResult(NamedTuple):
    params: np.ndarray
    trace: TrainTrace
    archive: ParetoArchive


class _BatchPlan:
    """Iteration -> sample indices, reshuffling once per epoch."""

    def __init__(self, n: int, config: TrainConfig, rng: np.random.Generator):
        self.n = n
        self.full = config.batch_mode == "full"
        self.size = n if self.full else min(config.batch_size, n)
        self.rng = rng
        self._order = np.arange(n)
        self._cursor = 0

    def next(self) -> tuple[np.ndarray, bool]:
        """Return (indices, epoch_started)."""
        if self.full:
            return self._order, True
        if self._cursor == 0:
            self._order = self.rng.permutation(self.n)
        start = self._cursor
        stop = min(start + self.size, self.n)
        self._cursor = 0 if stop >= self.n else stop
        return self._order[start:stop], start == 0


def train(config: TrainConfig, model: ModelSpec, dataset,
          params0: Optional[np.ndarray] = None) -> TrainResult:
    """Run the full training loop; deterministic given config.seed.

    `dataset` is either a feature matrix or any object with a `.features`
    attribute; the objectives in config.loss_spec close over labels and
    group structure themselves.
    """
    features = np.asarray(getattr(dataset, "features", dataset), dtype=np.float64)
    objectives = list(config.loss_spec or [])
    if not objectives:
        raise ParameterError("training needs at least one objective in loss_spec")
    n_objectives = len(objectives)

    rng = np.random.default_rng(config.seed)
    params = (init_params(model, rng) if params0 is None
              else np.array(params0, dtype=np.float64))
    state = initial_state(params.size, n_objectives, rng,
                          window=config.thresholds.window)
    archive = ParetoArchive(cap=config.archive_cap)
    trace = TrainTrace()
    batches = _BatchPlan(features.shape[0], config, rng)

    scales = None
    prev_losses = None
    for t in range(config.iterations):
        tick = time.perf_counter()
        indices, epoch_started = batches.next()
        if batches.full:
            batch_features, batch_objectives = features, objectives
            refresh = t % config.scale_refresh == 0
        else:
            batch_features = features[indices]
            batch_objectives = [obj.restrict(indices) for obj in objectives]
            refresh = epoch_started
        if scales is None or refresh:
            scales = _checked(lambda: estimate_loss_scales(
                model, params, objectives, features, config.scale_eps),
                t, trace)

        losses = np.empty(n_objectives)
        grads = np.empty((n_objectives, params.size))
        for k, objective in enumerate(batch_objectives):
            losses[k], grads[k] = _checked(
                lambda o=objective: _evaluate(model, params, o, batch_features),
                t, trace)

        observe_losses(state, losses, config.thresholds.delta)
        rates = (np.zeros(n_objectives) if prev_losses is None
                 else improvement_rates(prev_losses, losses))
        prev_losses = losses

        normalized = normalize_gradients(grads, scales)
        commit_strategy(state, select_strategy(state, normalized, rates,
                                               config.thresholds))

        omega = None
        if t == 1 or (t > 0 and t % config.omega_every == 0):
            raw_cert = min_norm_solve(gram(grads), config.qp_tol,
                                      config.qp_max_iter)
            omega = float(np.linalg.norm(aggregate(grads, raw_cert.alpha)))

        min_norm_converged = None
        if state.active == PARETO_CONE:
            cert = min_norm_solve(gram(normalized), config.qp_tol,
                                  config.qp_max_iter)
            min_norm_converged = cert.converged
            alpha = cert.alpha if cert.converged else state.alpha_prev
            direction = pcp_direction(normalized, alpha, config.zero_tol)
        elif state.active == ADAPTIVE:
            direction, alpha = aw_direction(normalized, rates,
                                            config.thresholds.tau_adapt)
        else:
            direction, alpha = pss_direction(normalized, state,
                                             config.thresholds.lambda_explore)
        state.alpha_prev = alpha

        stationary = direction is None
        if not stationary:
            direction = apply_constraints(direction, params, config.constraint_box)
            state.d_last = direction
        step = np.zeros_like(params) if stationary else config.eta * direction

        archive.insert(losses, params=params, snapshot_id=t)
        trace.records.append(IterationRecord(
            t=t,
            losses=tuple(float(v) for v in losses),
            alpha=tuple(float(a) for a in alpha),
            strategy=state.active,
            combined_norm=float(np.linalg.norm(alpha @ normalized)),
            update_norm=float(np.linalg.norm(step)),
            omega=omega,
            min_norm_converged=min_norm_converged,
            wall_time=time.perf_counter() - tick,
        ))

        if stationary:
            if config.explore_on_stationary and state.active != EXPLORATION:
                commit_strategy(state, EXPLORATION)
                continue
            trace.termination = "pareto_stationary"
            break
        params = params + step

    final_losses = _final_losses(config, model, params, objectives, features)
    if final_losses is not None:
        archive.insert(final_losses, params=params, snapshot_id=config.iterations)
    return TrainResult(params=params, trace=trace, archive=archive)


def _evaluate(model, params, objective, features):
    """Objectives defined directly on parameters bypass the model."""
    if hasattr(objective, "eval_params"):
        return objective.eval_params(params)
    return loss_and_grad(model, params, objective, features)


def _final_losses(config, model, params, objectives, features):
    """Loss vector of the returned parameters, for the archive's last insert."""
    if config.iterations == 0:
        return None
    values = np.empty(len(objectives))
    for k, objective in enumerate(objectives):
        values[k], _ = _evaluate(model, params, objective, features)
    return values


def _checked(thunk, iteration: int, trace: Optional[TrainTrace] = None):
    """Re-raise numeric failures with iteration and partial trace attached."""
    try:
        return thunk()
    except NumericError as err:
        out = err
        if err.iteration is None:
            out = NumericError(str(err), component=err.component,
                               iteration=iteration)
            out.__cause__ = err
        out.trace = trace
        raise out
