"""Model forward passes, hand-derived backprop, and the finite-difference harness."""
import math

import numpy as np
import pytest

from paretofair.errors import NumericError, ParameterError, ShapeError
from paretofair.fairloss import (
    BinaryCrossEntropy,
    FairLossConfig,
    GroupFairnessLoss,
    MulticlassCrossEntropy,
    MulticlassFairnessLoss,
    ScoreObjective,
    SurrogateConfig,
    dp_loss,
    tpr_loss,
)
from paretofair.groups import SensitiveAttributes, build_intersection
from paretofair.models import (
    FiniteDiffReport,
    ModelSpec,
    check_prediction_batch,
    finite_diff_check,
    forward,
    grad_loss,
    init_params,
    loss_and_grad,
    n_params,
)

LOGISTIC = ModelSpec(kind="logistic", input_dim=3)
MLP = ModelSpec(kind="mlp", input_dim=3, hidden_dim=4)


class ConstantLoss(ScoreObjective):
    name = "constant"

    def value_and_grad(self, scores):
        return 1.7, np.zeros_like(np.asarray(scores, dtype=np.float64))


class QuadraticParamLoss:
    """Half squared norm of the parameters, wired through the score API.

    Evaluating it requires bypassing scores entirely, so the test drives
    grad_loss with a loss whose score gradient is zero and adds the
    parameter term externally.
    """


class SumOfScores(ScoreObjective):
    name = "sum_scores"

    def value_and_grad(self, scores):
        s = np.asarray(scores, dtype=np.float64)
        return float(s.sum()), np.ones_like(s)


class TestForward:
    def test_zero_params_logistic(self):
        X = np.array([[1.0, -2.0, 0.5], [0.0, 0.0, 0.0]])
        scores = forward(LOGISTIC, np.zeros(n_params(LOGISTIC)), X)
        np.testing.assert_allclose(scores, 0.5)

    def test_zero_params_multiclass(self):
        spec = ModelSpec(kind="logistic", input_dim=2, output_classes=3)
        scores = forward(spec, np.zeros(n_params(spec)), np.array([[1.0, 2.0]]))
        np.testing.assert_allclose(scores, [[1 / 3, 1 / 3, 1 / 3]])

    def test_known_sigmoid_value(self):
        spec = ModelSpec(kind="logistic", input_dim=2)
        params = np.array([1.0, 0.0, 0.0])  # w=(1,0), b=0
        scores = forward(spec, params, np.array([[2.0, 5.0]]))
        assert scores[0] == pytest.approx(0.8807970779778824, abs=1e-12)

    def test_dimension_mismatch_reports_dims(self):
        with pytest.raises(ShapeError, match=r"\(n, 3\)"):
            forward(LOGISTIC, np.zeros(n_params(LOGISTIC)), np.ones((2, 4)))

    def test_param_length_mismatch(self):
        with pytest.raises(ShapeError, match="expected 4 parameters"):
            forward(LOGISTIC, np.zeros(5), np.ones((2, 3)))

    def test_multiclass_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        spec = ModelSpec(kind="mlp", input_dim=3, hidden_dim=5, output_classes=4)
        params = init_params(spec, rng)
        scores = forward(spec, params, rng.normal(size=(20, 3)))
        np.testing.assert_allclose(scores.sum(axis=1), 1.0, atol=1e-9)
        check_prediction_batch(spec, scores)

    def test_binary_scores_strictly_inside_unit_interval(self):
        spec = ModelSpec(kind="logistic", input_dim=1)
        params = np.array([100.0, 0.0])
        scores = forward(spec, params, np.array([[10.0], [-10.0]]))
        check_prediction_batch(spec, scores)

    def test_determinism(self):
        rng = np.random.default_rng(1)
        params = init_params(MLP, rng)
        X = rng.normal(size=(6, 3))
        a = forward(MLP, params, X)
        b = forward(MLP, params, X)
        np.testing.assert_array_equal(a, b)


class TestInit:
    def test_bounds_respect_fan_in(self):
        rng = np.random.default_rng(2)
        spec = ModelSpec(kind="mlp", input_dim=16, hidden_dim=4)
        params = init_params(spec, rng)
        layer1 = params[: 16 * 4 + 4]
        layer2 = params[16 * 4 + 4:]
        assert np.max(np.abs(layer1)) <= 1 / 4
        assert np.max(np.abs(layer2)) <= 1 / 2

    def test_seeded_reproducibility(self):
        a = init_params(MLP, np.random.default_rng(7))
        b = init_params(MLP, np.random.default_rng(7))
        np.testing.assert_array_equal(a, b)

    def test_spec_validation(self):
        with pytest.raises(ParameterError):
            ModelSpec(kind="mlp", input_dim=3, hidden_dim=0)
        with pytest.raises(ParameterError):
            ModelSpec(kind="conv", input_dim=3)


class TestGradLoss:
    def test_constant_loss_zero_gradient(self):
        rng = np.random.default_rng(3)
        params = init_params(LOGISTIC, rng)
        grad = grad_loss(LOGISTIC, params, ConstantLoss(), rng.normal(size=(5, 3)))
        np.testing.assert_array_equal(grad, np.zeros_like(params))

    def test_cross_entropy_small_batch_matches_fd(self):
        rng = np.random.default_rng(4)
        params = init_params(LOGISTIC, rng)
        X = rng.normal(size=(5, 3))
        labels = np.array([1, -1, 1, 1, -1])
        report = finite_diff_check(LOGISTIC, params, BinaryCrossEntropy(labels), X)
        assert report.max_rel_error <= 1e-5
        assert report.excluded == 0

    def test_non_finite_loss_carries_component(self):
        class ExplodingLoss(ScoreObjective):
            name = "exploding"

            def value_and_grad(self, scores):
                return math.inf, np.zeros_like(scores)

        rng = np.random.default_rng(5)
        params = init_params(LOGISTIC, rng)
        with pytest.raises(NumericError) as err:
            grad_loss(LOGISTIC, params, ExplodingLoss(), rng.normal(size=(4, 3)))
        assert err.value.component == "exploding"


class TestFiniteDiffHarness:
    def test_quadratic_in_scores_is_near_exact(self):
        class ScoreSquares(ScoreObjective):
            name = "score_squares"

            def value_and_grad(self, scores):
                s = np.asarray(scores, dtype=np.float64)
                return float(np.sum(s * s) / 2), s

        rng = np.random.default_rng(6)
        params = init_params(LOGISTIC, rng)
        report = finite_diff_check(LOGISTIC, params, ScoreSquares(),
                                   rng.normal(size=(6, 3)))
        assert report.max_rel_error <= 1e-7

    def test_kink_sample_reports_excluded_coordinates(self):
        # one sample whose score sits exactly on a ccr kink: every
        # coordinate's comparison crosses the subgradient point
        spec = ModelSpec(kind="logistic", input_dim=1)
        params = np.array([0.0, 0.0])  # all scores exactly 0.5
        groups = build_intersection(SensitiveAttributes(
            codes=np.array([[0], [1]]), cardinalities=(2,)))
        surrogate = SurrogateConfig(kind="ccr", tau=0.6, gamma=0.1)  # kink at 0.5
        loss = GroupFairnessLoss("dp", groups, surrogate)
        report = finite_diff_check(spec, params, loss, np.array([[1.0], [-1.0]]))
        assert report.excluded == 2
        assert math.isnan(report.max_rel_error)

    def test_step_validation(self):
        with pytest.raises(ParameterError):
            finite_diff_check(LOGISTIC, np.zeros(4), ConstantLoss(),
                              np.ones((1, 3)), step=0.0)


def _random_group_setup(rng, n):
    codes = np.column_stack([rng.integers(0, 2, size=n), rng.integers(0, 2, size=n)])
    groups = build_intersection(SensitiveAttributes(codes=codes, cardinalities=(2, 2)))
    labels = rng.choice([-1, 1], size=n)
    # ensure every cell has a positive so tpr keeps all four groups
    for g in range(groups.group_count):
        members = np.flatnonzero(groups.masks[g])
        if members.size and not np.any(labels[members] == 1):
            labels[members[0]] = 1
    return groups, labels


class TestGradientFidelityAllLosses:
    """Every loss passes the harness at 20 random points, rel error <= 1e-5."""

    N_POINTS = 20

    def _run(self, spec, loss_factory, rng, kink_margin=1e-6):
        n = 24
        X = rng.normal(size=(n, spec.input_dim))
        groups, labels = _random_group_setup(rng, n)
        loss = loss_factory(groups, labels)
        worst = 0.0
        for _ in range(self.N_POINTS):
            params = init_params(spec, rng)
            report = finite_diff_check(spec, params, loss, X,
                                       step=1e-5, kink_margin=kink_margin)
            if not math.isnan(report.max_rel_error):
                worst = max(worst, report.max_rel_error)
        assert worst <= 1e-5

    def test_task_logistic(self):
        rng = np.random.default_rng(100)
        self._run(LOGISTIC, lambda g, y: BinaryCrossEntropy(y), rng)

    def test_task_mlp(self):
        rng = np.random.default_rng(101)
        self._run(MLP, lambda g, y: BinaryCrossEntropy(y), rng)

    def test_dp_composite(self):
        rng = np.random.default_rng(102)
        self._run(LOGISTIC, lambda g, y: dp_loss(
            g, y, config=FairLossConfig(metric="DP", lam=0.1, beta=0.3)), rng)

    def test_tpr_composite(self):
        rng = np.random.default_rng(103)
        self._run(LOGISTIC, lambda g, y: tpr_loss(g, y), rng)

    def test_pairwise_fairness_nonsmooth(self):
        rng = np.random.default_rng(104)
        self._run(MLP, lambda g, y: GroupFairnessLoss("dp", g, smooth=False), rng,
                  kink_margin=1e-4)

    def test_ccr_fairness(self):
        rng = np.random.default_rng(105)
        self._run(LOGISTIC, lambda g, y: GroupFairnessLoss(
            "dp", g, SurrogateConfig(kind="ccr", tau=0.5, gamma=0.2)), rng,
            kink_margin=1e-3)

    def test_multiclass_ccr_fairness(self):
        rng = np.random.default_rng(106)
        spec = ModelSpec(kind="logistic", input_dim=3, output_classes=3)
        n = 24
        X = rng.normal(size=(n, 3))
        memberships = rng.uniform(0, 1, size=(3, n))
        loss = MulticlassFairnessLoss(memberships)
        worst = 0.0
        for _ in range(self.N_POINTS):
            params = init_params(spec, rng)
            report = finite_diff_check(spec, params, loss, X, step=1e-5)
            worst = max(worst, report.max_rel_error)
        assert worst <= 1e-5

    def test_multiclass_task(self):
        rng = np.random.default_rng(107)
        spec = ModelSpec(kind="mlp", input_dim=3, hidden_dim=4, output_classes=3)
        n = 18
        X = rng.normal(size=(n, 3))
        labels = rng.integers(0, 3, size=n)
        loss = MulticlassCrossEntropy(labels)
        worst = 0.0
        for _ in range(self.N_POINTS):
            params = init_params(spec, rng)
            report = finite_diff_check(spec, params, loss, X, step=1e-5)
            worst = max(worst, report.max_rel_error)
        assert worst <= 1e-5
