"""Differentiable fairness surrogates and training objectives.

Two indicator relaxations are provided — a tanh soft-round and a
piecewise-linear clipped ramp (band half-width gamma, slope 1/(2 gamma))
— plus the group-rate constructions built on them: soft demographic
parity and true-positive rates per intersectional group, pairwise
disparity means, and the multi-class per-class/per-group variant.

Every training objective here follows one calling convention: it maps a
model's score batch to a scalar and the exact gradient of that scalar
with respect to the scores. The model layer (see models.py) chains that
score-space gradient through the network to parameter space, which keeps
all gradients hand-derived and auditable end to end.

Empty groups (or groups without positives, for TPR) are flagged absent
and excluded from pairwise terms; they never contribute imputed zeros.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGroupError, ParameterError
from .groups import GroupTable

SCORE_CLIP = 1e-7  # scores are clamped to [SCORE_CLIP, 1 - SCORE_CLIP] before logs
TANH_STEEPNESS = 5.0


# ---------------------------------------------------------------------------
# surrogate primitives
# ---------------------------------------------------------------------------

def soft_round(x, tau: float, steepness: float = TANH_STEEPNESS):
    """Smooth threshold surrogate tanh(steepness*(x - tau))/2 + 0.5."""
    return np.tanh(steepness * (np.asarray(x, dtype=np.float64) - tau)) / 2.0 + 0.5


def soft_round_grad(x, tau: float, steepness: float = TANH_STEEPNESS):
    """Derivative of soft_round with respect to x."""
    t = np.tanh(steepness * (np.asarray(x, dtype=np.float64) - tau))
    return steepness * (1.0 - t * t) / 2.0


def ccr(x, tau: float, gamma: float):
    """Clipped linear ramp: 0 below tau-gamma, 1 above tau+gamma, linear between."""
    if gamma <= 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    lo, hi = tau - gamma, tau + gamma
    ramp = np.clip((x - lo) / (2.0 * gamma), 0.0, 1.0)
    # exact 0/1 at and beyond the band edges regardless of rounding
    return np.where(x <= lo, 0.0, np.where(x >= hi, 1.0, ramp))


def ccr_grad(x, tau: float, gamma: float):
    """Exported derivative of ccr: 0 outside the band, 1/(2 gamma) inside.

    At the two kinks x = tau +/- gamma the one-sided slopes disagree; the
    midpoint subgradient 1/(4 gamma) is returned there so backprop stays
    deterministic.
    """
    if gamma <= 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    x = np.asarray(x, dtype=np.float64)
    lo, hi = tau - gamma, tau + gamma
    g = np.where((x > lo) & (x < hi), 1.0 / (2.0 * gamma), 0.0)
    g = np.where((x == lo) | (x == hi), 1.0 / (4.0 * gamma), g)
    return g


def ccr_kink_gap(x, tau: float, gamma: float) -> float:
    """Distance from the nearest ccr kink, minimized over the batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return math.inf
    return float(np.minimum(np.abs(x - (tau - gamma)),
                            np.abs(x - (tau + gamma))).min())


@dataclass(frozen=True)
class SurrogateConfig:
    """Which indicator relaxation to use and its shape parameters."""

    kind: str = "tanh_soft_round"   # or "ccr"
    tau: float = 0.5
    gamma: float = 0.1              # ccr band half-width
    steepness: float = TANH_STEEPNESS  # tanh slope at the threshold

    def __post_init__(self):
        if self.kind not in ("tanh_soft_round", "ccr"):
            raise ParameterError(f"unknown surrogate kind {self.kind!r}")
        if not 0.0 < self.tau < 1.0:
            raise ParameterError(f"tau must be in (0,1), got {self.tau}")
        if self.kind == "ccr" and self.gamma <= 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if self.steepness <= 0:
            raise ParameterError(f"steepness must be > 0, got {self.steepness}")

    def apply(self, x):
        if self.kind == "ccr":
            return ccr(x, self.tau, self.gamma)
        return soft_round(x, self.tau, self.steepness)

    def grad(self, x):
        if self.kind == "ccr":
            return ccr_grad(x, self.tau, self.gamma)
        return soft_round_grad(x, self.tau, self.steepness)

    def kink_gap(self, x) -> float:
        if self.kind == "ccr":
            return ccr_kink_gap(x, self.tau, self.gamma)
        return math.inf


@dataclass(frozen=True)
class FairLossConfig:
    """Trade-off and smoothing constants for the composite fairness losses."""

    metric: str = "DP"          # or "TPR"
    lam: float = 0.1            # weight on the task term
    beta: float = 0.0           # l2 score-penalty weight (DP composite only)
    eps_smooth: float = 1e-6    # denominator guard
    eps_abs: float = 1e-6       # phi(x) = sqrt(x^2 + eps_abs)

    def __post_init__(self):
        if self.metric not in ("DP", "TPR"):
            raise ParameterError(f"metric must be DP or TPR, got {self.metric!r}")
        if self.lam < 0 or self.beta < 0:
            raise ParameterError("lam and beta must be >= 0")
        if self.eps_smooth <= 0 or self.eps_abs <= 0:
            raise ParameterError("eps_smooth and eps_abs must be > 0")


# ---------------------------------------------------------------------------
# per-group soft rates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupRates:
    """Per-group rates with an explicit presence flag (absent != 0)."""

    values: np.ndarray   # (G,), NaN where absent
    present: np.ndarray  # (G,) bool

    def present_values(self) -> np.ndarray:
        return self.values[self.present]


def _require_pairs(n_present: int, what: str):
    if n_present < 2:
        raise DegenerateGroupError(
            f"{what} needs >= 2 usable groups, got {n_present}")


def dp_per_group_soft(scores: np.ndarray, groups: GroupTable,
                      surrogate: SurrogateConfig) -> GroupRates:
    """Soft positive rate per group: mean surrogate-thresholded score.

    Empty groups come back flagged absent rather than as zeros.
    """
    soft = surrogate.apply(scores)
    values = np.full(groups.group_count, np.nan)
    present = groups.sizes > 0
    for g in np.flatnonzero(present):
        values[g] = soft[groups.masks[g]].mean()
    _require_pairs(int(present.sum()), "dp_per_group_soft")
    return GroupRates(values=values, present=present)


def tpr_per_group_soft(scores: np.ndarray, labels: np.ndarray, groups: GroupTable,
                       surrogate: SurrogateConfig, eps_smooth: float = 1e-6) -> GroupRates:
    """Soft true-positive rate per group.

    Sum of surrogate scores over the group's actual positives divided by
    (positive count + eps_smooth); groups without positives are absent.
    """
    soft = surrogate.apply(scores)
    pos = np.asarray(labels) == 1
    values = np.full(groups.group_count, np.nan)
    present = np.zeros(groups.group_count, dtype=bool)
    for g in range(groups.group_count):
        mask = groups.masks[g] & pos
        n_pos = int(mask.sum())
        if n_pos == 0:
            continue
        present[g] = True
        values[g] = soft[mask].sum() / (n_pos + eps_smooth)
    _require_pairs(int(present.sum()), "tpr_per_group_soft")
    return GroupRates(values=values, present=present)


def pairwise_fairness(M: np.ndarray, eps_abs: float = 1e-6, smooth: bool = True) -> float:
    """Mean disparity over all group pairs.

    Non-smooth: mean |M_i - M_j|. Smooth: the absolute value is replaced
    by phi(x) = sqrt(x^2 + eps_abs).
    """
    M = np.asarray(M, dtype=np.float64)
    _require_pairs(M.size, "pairwise_fairness")
    i, j = np.triu_indices(M.size, k=1)
    diffs = M[i] - M[j]
    if smooth:
        return float(np.sqrt(diffs * diffs + eps_abs).mean())
    return float(np.abs(diffs).mean())


def combined_loss(task_loss: float, fairness_loss: float, lam: float) -> float:
    """Trade-off combination with the weight on the task term."""
    if lam < 0:
        raise ParameterError(f"lam must be >= 0, got {lam}")
    return lam * task_loss + fairness_loss


# ---------------------------------------------------------------------------
# multi-class variants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MulticlassDp:
    """Per-class, per-group soft positive rates with group presence flags."""

    values: np.ndarray   # (C, G), NaN columns where absent
    present: np.ndarray  # (G,) bool


def multiclass_dp(probs: np.ndarray, memberships: np.ndarray) -> MulticlassDp:
    """Membership-weighted mean probability per class and group.

    probs: (n, C) rows on the simplex; memberships: (G, n) nonnegative
    weights. A group whose total membership is zero is excluded with a
    flag instead of dividing by zero.
    """
    probs = np.asarray(probs, dtype=np.float64)
    H = np.atleast_2d(np.asarray(memberships, dtype=np.float64))
    totals = H.sum(axis=1)
    present = totals > 0
    values = np.full((probs.shape[1], H.shape[0]), np.nan)
    if present.any():
        # DP[c, g] = sum_i p[i, c] h[g, i] / sum_i h[g, i]
        values[:, present] = (H[present] @ probs).T / totals[present]
    return MulticlassDp(values=values, present=present)


def multiclass_fair_loss(dp: np.ndarray, eps_abs: float = 1e-6) -> float:
    """Mean smooth pairwise disparity over classes and group pairs."""
    dp = np.atleast_2d(np.asarray(dp, dtype=np.float64))
    C, G = dp.shape
    _require_pairs(G, "multiclass_fair_loss")
    i, j = np.triu_indices(G, k=1)
    diffs = dp[:, i] - dp[:, j]
    total = float(np.sqrt(diffs * diffs + eps_abs).sum())
    return total / C * 2.0 / (G * (G - 1))


# ---------------------------------------------------------------------------
# training objectives: scalar value + exact gradient w.r.t. scores
# ---------------------------------------------------------------------------

class ScoreObjective:
    """Base contract: differentiable scalar functions of a score batch.

    Subclasses implement value_and_grad; sample_values supports loss-scale
    estimation (coupled objectives expose their batch value as a constant
    per-sample contribution); kink_gap reports distance to the nearest
    nondifferentiable point so gradient checks can exclude it.
    """

    name = "objective"

    def value_and_grad(self, scores: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def value(self, scores: np.ndarray) -> float:
        return self.value_and_grad(scores)[0]

    def sample_values(self, scores: np.ndarray) -> np.ndarray:
        n = np.asarray(scores).shape[0]
        return np.full(n, self.value(scores))

    def kink_gap(self, scores: np.ndarray) -> float:
        return math.inf

    def restrict(self, indices: np.ndarray) -> "ScoreObjective":
        """Bind the objective to a subset of samples (minibatch training)."""
        raise ParameterError(f"{self.name} does not support minibatch restriction")


class BinaryCrossEntropy(ScoreObjective):
    """Mean cross-entropy of sigmoid scores against +/-1 labels."""

    name = "task"

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels)
        if not np.all(np.isin(labels, (-1, 1))):
            raise ParameterError("binary labels must be +/-1")
        self.targets = (labels == 1).astype(np.float64)

    def _clip(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        clipped = np.clip(s, SCORE_CLIP, 1.0 - SCORE_CLIP)
        inside = (s > SCORE_CLIP) & (s < 1.0 - SCORE_CLIP)
        return clipped, inside

    def value_and_grad(self, scores):
        s, inside = self._clip(scores)
        t = self.targets
        n = s.shape[0]
        value = float(-np.mean(t * np.log(s) + (1 - t) * np.log(1 - s)))
        grad = np.where(inside, (-t / s + (1 - t) / (1 - s)) / n, 0.0)
        return value, grad

    def sample_values(self, scores):
        s, _ = self._clip(scores)
        t = self.targets
        return -(t * np.log(s) + (1 - t) * np.log(1 - s))

    def restrict(self, indices):
        return BinaryCrossEntropy(np.where(self.targets[indices] == 1.0, 1, -1))


class MulticlassCrossEntropy(ScoreObjective):
    """Mean negative log-likelihood of softmax rows against class indices."""

    name = "task"

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels, dtype=np.int64)

    def value_and_grad(self, scores):
        p = np.asarray(scores, dtype=np.float64)
        n = p.shape[0]
        rows = np.arange(n)
        picked = np.clip(p[rows, self.labels], SCORE_CLIP, 1.0)
        value = float(-np.mean(np.log(picked)))
        grad = np.zeros_like(p)
        inside = p[rows, self.labels] > SCORE_CLIP
        grad[rows, self.labels] = np.where(inside, -1.0 / (n * picked), 0.0)
        return value, grad

    def sample_values(self, scores):
        p = np.asarray(scores, dtype=np.float64)
        picked = np.clip(p[np.arange(p.shape[0]), self.labels], SCORE_CLIP, 1.0)
        return -np.log(picked)

    def restrict(self, indices):
        return MulticlassCrossEntropy(self.labels[indices])


class ScoreNormPenalty(ScoreObjective):
    """Squared l2 norm of the score vector (the composite loss's beta term)."""

    name = "score_penalty"

    def value_and_grad(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        return float(np.sum(s * s)), 2.0 * s

    def sample_values(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        return s * s

    def restrict(self, indices):
        return self


class GroupFairnessLoss(ScoreObjective):
    """Pairwise mean disparity of per-group soft rates (DP or TPR).

    The rate of every present group is differentiated through the
    surrogate; absent groups (empty, or positive-free for TPR) drop out
    of the pair mean entirely.
    """

    def __init__(self, metric: str, groups: GroupTable,
                 surrogate: SurrogateConfig | None = None,
                 labels: np.ndarray | None = None, smooth: bool = True,
                 eps_smooth: float = 1e-6, eps_abs: float = 1e-6):
        if metric not in ("dp", "tpr"):
            raise ParameterError(f"metric must be 'dp' or 'tpr', got {metric!r}")
        if metric == "tpr" and labels is None:
            raise ParameterError("tpr fairness needs labels")
        self.metric = metric
        self.groups = groups
        self.surrogate = surrogate or SurrogateConfig()
        self.labels = None if labels is None else np.asarray(labels)
        self.smooth = smooth
        self.eps_smooth = eps_smooth
        self.eps_abs = eps_abs
        self.name = f"fair_{metric}"
        # per-sample rate weights: dM_g/d soft_i for the sample's own group
        n = groups.masks.shape[1]
        self._weight = np.zeros(n)
        present = []
        for g in range(groups.group_count):
            if metric == "dp":
                mask = groups.masks[g]
                size = int(mask.sum())
                if size == 0:
                    continue
                self._weight[mask] = 1.0 / size
            else:
                mask = groups.masks[g] & (self.labels == 1)
                n_pos = int(mask.sum())
                if n_pos == 0:
                    continue
                self._weight[mask] = 1.0 / (n_pos + eps_smooth)
            present.append(g)
        if len(present) < 2:
            raise DegenerateGroupError(
                f"fair_{metric} needs >= 2 usable groups, got {len(present)}")
        self.present_groups = np.array(present)
        self._member_rows = []
        for g in self.present_groups:
            if metric == "dp":
                self._member_rows.append(groups.masks[g])
            else:
                self._member_rows.append(groups.masks[g] & (self.labels == 1))

    def _rates(self, soft: np.ndarray) -> np.ndarray:
        return np.array([np.sum(soft[m] * self._weight[m]) for m in self._member_rows])

    def value_and_grad(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        soft = self.surrogate.apply(s)
        M = self._rates(soft)
        G = M.size
        i, j = np.triu_indices(G, k=1)
        diffs = M[i] - M[j]
        n_pairs = diffs.size
        if self.smooth:
            value = float(np.sqrt(diffs * diffs + self.eps_abs).mean())
            psi = diffs / np.sqrt(diffs * diffs + self.eps_abs)
        else:
            value = float(np.abs(diffs).mean())
            psi = np.sign(diffs)
        # d value / d M_g, using the antisymmetry of psi
        dM = np.zeros(G)
        np.add.at(dM, i, psi)
        np.add.at(dM, j, -psi)
        dM /= n_pairs
        grad = np.zeros_like(s)
        sgrad = self.surrogate.grad(s)
        for g, mask in enumerate(self._member_rows):
            grad[mask] += dM[g] * self._weight[mask] * sgrad[mask]
        return value, grad

    def kink_gap(self, scores):
        gap = self.surrogate.kink_gap(np.asarray(scores, dtype=np.float64))
        if not self.smooth:
            soft = self.surrogate.apply(np.asarray(scores, dtype=np.float64))
            M = self._rates(soft)
            i, j = np.triu_indices(M.size, k=1)
            if i.size:
                gap = min(gap, float(np.abs(M[i] - M[j]).min()))
        return gap

    def restrict(self, indices):
        from .groups import restrict_groups
        labels = None if self.labels is None else self.labels[indices]
        return GroupFairnessLoss(self.metric, restrict_groups(self.groups, indices),
                                 self.surrogate, labels=labels, smooth=self.smooth,
                                 eps_smooth=self.eps_smooth, eps_abs=self.eps_abs)


class MulticlassFairnessLoss(ScoreObjective):
    """Smooth pairwise disparity of membership-weighted class probabilities."""

    name = "fair_multiclass"

    def __init__(self, memberships: np.ndarray, eps_abs: float = 1e-6):
        H = np.atleast_2d(np.asarray(memberships, dtype=np.float64))
        totals = H.sum(axis=1)
        present = totals > 0
        if int(present.sum()) < 2:
            raise DegenerateGroupError(
                f"multiclass fairness needs >= 2 groups with membership, "
                f"got {int(present.sum())}")
        self.H = H[present]
        self.totals = totals[present]
        self.eps_abs = eps_abs

    def value_and_grad(self, scores):
        p = np.asarray(scores, dtype=np.float64)
        C = p.shape[1]
        dp = (self.H @ p).T / self.totals          # (C, G)
        G = dp.shape[1]
        i, j = np.triu_indices(G, k=1)
        diffs = dp[:, i] - dp[:, j]
        root = np.sqrt(diffs * diffs + self.eps_abs)
        scale = 2.0 / (C * G * (G - 1))
        value = float(root.sum() * scale)
        psi = diffs / root                         # (C, pairs)
        dDP = np.zeros_like(dp)
        np.add.at(dDP.T, i, psi.T)
        np.add.at(dDP.T, j, -psi.T)
        dDP *= scale
        # chain: dDP[c,g]/dp[i,c] = H[g,i]/totals[g]
        grad = ((dDP / self.totals) @ self.H).T
        return value, grad

    def restrict(self, indices):
        return MulticlassFairnessLoss(self.H[:, indices], eps_abs=self.eps_abs)


class CompositeObjective(ScoreObjective):
    """Weighted sum of objectives sharing one score batch."""

    def __init__(self, terms: list[tuple[float, ScoreObjective]], name: str):
        self.terms = [(float(w), obj) for w, obj in terms if w != 0.0]
        self.name = name

    def value_and_grad(self, scores):
        total = 0.0
        grad = None
        for w, obj in self.terms:
            v, g = obj.value_and_grad(scores)
            total += w * v
            grad = w * g if grad is None else grad + w * g
        if grad is None:
            grad = np.zeros_like(np.asarray(scores, dtype=np.float64))
        return total, grad

    def sample_values(self, scores):
        n = np.asarray(scores).shape[0]
        out = np.zeros(n)
        for w, obj in self.terms:
            out = out + w * obj.sample_values(scores)
        return out

    def kink_gap(self, scores):
        gaps = [obj.kink_gap(scores) for _, obj in self.terms]
        return min(gaps) if gaps else math.inf

    def restrict(self, indices):
        return CompositeObjective(
            [(w, obj.restrict(indices)) for w, obj in self.terms], self.name)


def dp_loss(groups: GroupTable, labels: np.ndarray,
            surrogate: SurrogateConfig | None = None,
            config: FairLossConfig | None = None, smooth: bool = True) -> CompositeObjective:
    """Composite demographic-parity loss: disparity + lam*task + beta*penalty."""
    cfg = config or FairLossConfig(metric="DP")
    fair = GroupFairnessLoss("dp", groups, surrogate, smooth=smooth,
                             eps_smooth=cfg.eps_smooth, eps_abs=cfg.eps_abs)
    terms = [(1.0, fair), (cfg.lam, BinaryCrossEntropy(labels))]
    if cfg.beta > 0:
        terms.append((cfg.beta, ScoreNormPenalty()))
    return CompositeObjective(terms, name="dp_loss")


def tpr_loss(groups: GroupTable, labels: np.ndarray,
             surrogate: SurrogateConfig | None = None,
             config: FairLossConfig | None = None, smooth: bool = True) -> CompositeObjective:
    """Composite equal-opportunity loss: TPR disparity + lam*task."""
    cfg = config or FairLossConfig(metric="TPR")
    fair = GroupFairnessLoss("tpr", groups, surrogate, labels=labels, smooth=smooth,
                             eps_smooth=cfg.eps_smooth, eps_abs=cfg.eps_abs)
    return CompositeObjective([(1.0, fair), (cfg.lam, BinaryCrossEntropy(labels))],
                              name="tpr_loss")
