"""Ingestion, preprocessing, splits, and synthetic generators.

Independent oracles used here:
  * a Newton-Raphson logistic fitter (for the unconstrained baseline fit
    whose disparity the biased generator must control), and
  * the closed-form minimum-norm point of two vectors (for the
    stationarity values of the quadratic fixture).
"""
import numpy as np
import pytest

from paretofair.data import (
    ColumnSpec,
    Dataset,
    QuadraticObjective,
    SplitSpec,
    TableSchema,
    load_schema,
    load_table,
    prepare_splits,
    preprocess,
    split,
    split_indices,
    synth_biased,
    synth_pl_biobjective,
)
from paretofair.errors import DataError, SchemaError, ValidationError
from paretofair.groups import SensitiveAttributes
from paretofair.moo import stationarity_measure


# --------------------------------------------------------------------------
# Oracles
# --------------------------------------------------------------------------


def fit_logistic_newton(features, labels, iters=40, ridge=1e-9):
    """Independent logistic-regression oracle (Newton on the log-loss)."""
    n, d = features.shape
    design = np.column_stack([features, np.ones(n)])
    w = np.zeros(d + 1)
    target = (labels + 1.0) / 2.0
    for _ in range(iters):
        scores = design @ w
        p = 1.0 / (1.0 + np.exp(-scores))
        grad = design.T @ (p - target) / n + ridge * w
        hess = (design * (p * (1 - p))[:, None]).T @ design / n
        hess += ridge * np.eye(d + 1)
        step = np.linalg.solve(hess, grad)
        w -= step
        if np.abs(step).max() < 1e-12:
            break
    return w


def fit_rates_disparity(features, labels, attrs_codes):
    """Max-min intersectional positive rate of the fitted classifier."""
    w = fit_logistic_newton(features, labels)
    preds = np.column_stack([features, np.ones(len(labels))]) @ w > 0
    gid = 2 * attrs_codes[:, 0] + attrs_codes[:, 1]
    rates = [preds[gid == g].mean() for g in range(4)]
    acc = float((preds == (labels > 0)).mean())
    return max(rates) - min(rates), acc


def min_norm_two_vectors(g1, g2):
    """Closed-form min-norm point on the segment between two vectors."""
    diff = g1 - g2
    denom = diff @ diff
    lam = 0.5 if denom == 0 else float(np.clip(g2 @ (g2 - g1) / denom, 0.0, 1.0))
    return float(np.linalg.norm(lam * g1 + (1 - lam) * g2))


# --------------------------------------------------------------------------
# Schema files
# --------------------------------------------------------------------------

SCHEMA_YAML = """\
name: toy
delimiter: ","
missing: ["", "?"]
columns:
  - {name: age, kind: numeric}
  - {name: job, kind: categorical}
  - {name: sex, kind: sensitive, values: {M: 0, F: 1}}
  - {name: senior, kind: sensitive, cut: 50}
  - {name: outcome, kind: label, positive: "yes"}
"""


@pytest.fixture()
def toy_schema(tmp_path):
    path = tmp_path / "toy.schema.yaml"
    path.write_text(SCHEMA_YAML)
    return load_schema(path)


def write_data(tmp_path, text, name="toy.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


WELL_FORMED = """\
age,job,sex,senior,outcome
30,teacher,M,30,yes
40,nurse,F,60,no
55,clerk,F,55,yes
"""


class TestLoadSchema:
    def test_round_trip_fields(self, toy_schema):
        assert toy_schema.name == "toy"
        assert toy_schema.delimiter == ","
        assert toy_schema.missing == ("", "?")
        assert toy_schema.names == ("age", "job", "sex", "senior", "outcome")
        assert toy_schema.label.positive == "yes"
        assert toy_schema.sensitive[0].values == {"M": 0, "F": 1}
        assert toy_schema.sensitive[1].cut == 50.0

    def test_missing_file(self, tmp_path):
        with pytest.raises(SchemaError, match="cannot read"):
            load_schema(tmp_path / "absent.yaml")

    def test_unknown_kind_rejected(self):
        with pytest.raises(SchemaError, match="unknown kind"):
            ColumnSpec(name="x", kind="mystery")

    def test_sensitive_values_and_cut_conflict(self):
        with pytest.raises(SchemaError, match="not both"):
            ColumnSpec(name="x", kind="sensitive", values={"a": 0}, cut=1.0)

    def test_sensitive_codes_must_be_dense(self):
        with pytest.raises(SchemaError, match="0..1"):
            ColumnSpec(name="x", kind="sensitive", values={"a": 0, "b": 2})

    def test_label_needs_exactly_one_coding(self):
        with pytest.raises(SchemaError, match="exactly one"):
            ColumnSpec(name="y", kind="label")
        with pytest.raises(SchemaError, match="exactly one"):
            ColumnSpec(name="y", kind="label", positive="1", classes=("a", "b"))

    def test_non_label_cannot_take_label_options(self):
        with pytest.raises(SchemaError, match="only apply to the label"):
            ColumnSpec(name="x", kind="numeric", positive="1")

    def test_schema_requires_one_label(self):
        cols = (ColumnSpec(name="a", kind="numeric"),
                ColumnSpec(name="s", kind="sensitive"))
        with pytest.raises(SchemaError, match="exactly one label"):
            TableSchema(name="bad", columns=cols)

    def test_schema_requires_sensitive_column(self):
        cols = (ColumnSpec(name="a", kind="numeric"),
                ColumnSpec(name="y", kind="label", positive="1"))
        with pytest.raises(SchemaError, match="no sensitive column"):
            TableSchema(name="bad", columns=cols)

    def test_duplicate_names_rejected(self):
        cols = (ColumnSpec(name="a", kind="numeric"),
                ColumnSpec(name="a", kind="sensitive"),
                ColumnSpec(name="y", kind="label", positive="1"))
        with pytest.raises(SchemaError, match="duplicate"):
            TableSchema(name="bad", columns=cols)

    def test_unknown_column_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("name: bad\ncolumns:\n"
                        "  - {name: a, kind: numeric, scale: log}\n")
        with pytest.raises(SchemaError, match="unknown keys"):
            load_schema(path)


class TestLoadTable:
    def test_well_formed_file_keeps_all_rows(self, tmp_path, toy_schema):
        raw = load_table(write_data(tmp_path, WELL_FORMED), toy_schema)
        assert raw.n_rows == 3
        assert raw.dropped_lines == ()
        assert raw.columns["age"].tolist() == [30.0, 40.0, 55.0]
        assert raw.columns["job"].tolist() == ["teacher", "nurse", "clerk"]
        assert raw.line_numbers.tolist() == [2, 3, 4]

    def test_missing_label_column_named_in_error(self, tmp_path, toy_schema):
        text = "age,job,sex,senior\n30,teacher,M,30\n"
        with pytest.raises(SchemaError, match="outcome"):
            load_table(write_data(tmp_path, text), toy_schema)

    def test_extra_column_rejected(self, tmp_path, toy_schema):
        text = "age,job,sex,senior,outcome,extra\n30,t,M,30,yes,1\n"
        with pytest.raises(SchemaError, match="extra"):
            load_table(write_data(tmp_path, text), toy_schema)

    def test_empty_numeric_cell_drops_row_and_reports_line(
            self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "30,teacher,M,30,yes\n"
                ",nurse,F,60,no\n"
                "55,clerk,F,55,yes\n")
        raw = load_table(write_data(tmp_path, text), toy_schema)
        assert raw.n_rows == 2
        assert raw.dropped_lines == (3,)

    def test_question_mark_is_missing_marker(self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "30,?,M,30,yes\n"
                "55,clerk,F,55,yes\n")
        raw = load_table(write_data(tmp_path, text), toy_schema)
        assert raw.n_rows == 1
        assert raw.dropped_lines == (2,)

    def test_unparseable_cell_reports_line_number(self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "30,teacher,M,30,yes\n"
                "abc,nurse,F,60,no\n")
        with pytest.raises(DataError, match="line 3.*age.*'abc'"):
            load_table(write_data(tmp_path, text), toy_schema)

    def test_overflowing_number_rejected(self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "1e999,teacher,M,30,yes\n")
        with pytest.raises(DataError, match="line 2.*non-finite"):
            load_table(write_data(tmp_path, text), toy_schema)

    def test_short_row_reports_line_number(self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "30,teacher,M,30,yes\n"
                "40,nurse,F\n")
        with pytest.raises(DataError, match="line 3.*expected 5 fields, got 3"):
            load_table(write_data(tmp_path, text), toy_schema)

    def test_column_order_free(self, tmp_path, toy_schema):
        text = ("outcome,age,senior,sex,job\n"
                "yes,30,30,M,teacher\n")
        raw = load_table(write_data(tmp_path, text), toy_schema)
        assert raw.columns["age"].tolist() == [30.0]
        assert raw.columns["outcome"].tolist() == ["yes"]

    def test_empty_file_rejected(self, tmp_path, toy_schema):
        with pytest.raises(DataError, match="empty"):
            load_table(write_data(tmp_path, ""), toy_schema)


class TestPreprocess:
    def test_numeric_standardized_to_mean_zero(self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "1,a,M,1,yes\n2,a,M,1,yes\n3,a,M,1,yes\n")
        raw = load_table(write_data(tmp_path, text), toy_schema)
        ds = preprocess(raw, toy_schema)
        age = ds.features[:, ds.feature_names.index("age")]
        assert abs(age.mean()) <= 1e-12
        assert abs(age.std() - 1.0) <= 1e-12

    def test_categorical_three_levels_one_hot(self, tmp_path, toy_schema):
        raw = load_table(write_data(tmp_path, WELL_FORMED), toy_schema)
        ds = preprocess(raw, toy_schema)
        onehot = [n for n in ds.feature_names if n.startswith("job=")]
        assert onehot == ["job=clerk", "job=nurse", "job=teacher"]
        block = ds.features[:, [ds.feature_names.index(n) for n in onehot]]
        assert block.sum(axis=1).tolist() == [1.0, 1.0, 1.0]
        assert block[0].tolist() == [0.0, 0.0, 1.0]

    def test_binary_sensitive_codes_and_cardinality(self, tmp_path, toy_schema):
        raw = load_table(write_data(tmp_path, WELL_FORMED), toy_schema)
        ds = preprocess(raw, toy_schema)
        assert ds.attrs.cardinalities == (2, 2)
        assert ds.attrs.codes[:, 0].tolist() == [0, 1, 1]      # M,F,F
        assert ds.attrs.codes[:, 1].tolist() == [0, 1, 1]      # 30,60,55 vs cut 50

    def test_labels_mapped_to_plus_minus_one(self, tmp_path, toy_schema):
        raw = load_table(write_data(tmp_path, WELL_FORMED), toy_schema)
        ds = preprocess(raw, toy_schema)
        assert ds.labels.tolist() == [1.0, -1.0, 1.0]

    def test_multiclass_labels_use_class_indices(self, tmp_path):
        path = tmp_path / "mc.schema.yaml"
        path.write_text(
            "name: mc\ncolumns:\n"
            "  - {name: x, kind: numeric}\n"
            "  - {name: s, kind: sensitive}\n"
            "  - {name: y, kind: label, classes: [low, mid, high]}\n")
        schema = load_schema(path)
        text = "x,s,y\n1,a,mid\n2,b,low\n3,a,high\n"
        raw = load_table(write_data(tmp_path, text, "mc.csv"), schema)
        ds = preprocess(raw, schema)
        assert ds.labels.tolist() == [1, 0, 2]

    def test_unknown_class_reports_line(self, tmp_path):
        path = tmp_path / "mc.schema.yaml"
        path.write_text(
            "name: mc\ncolumns:\n"
            "  - {name: x, kind: numeric}\n"
            "  - {name: s, kind: sensitive}\n"
            "  - {name: y, kind: label, classes: [low, high]}\n")
        schema = load_schema(path)
        text = "x,s,y\n1,a,low\n2,b,medium\n"
        raw = load_table(write_data(tmp_path, text, "mc.csv"), schema)
        with pytest.raises(DataError, match="line 3.*'medium'"):
            preprocess(raw, schema)

    def test_inferred_sensitive_levels_sorted(self, tmp_path):
        path = tmp_path / "inf.schema.yaml"
        path.write_text(
            "name: inf\ncolumns:\n"
            "  - {name: x, kind: numeric}\n"
            "  - {name: s, kind: sensitive}\n"
            "  - {name: y, kind: label, positive: '1'}\n")
        schema = load_schema(path)
        text = "x,s,y\n1,zeta,1\n2,alpha,0\n3,mid,1\n"
        raw = load_table(write_data(tmp_path, text, "inf.csv"), schema)
        ds = preprocess(raw, schema)
        assert ds.attrs.cardinalities == (3,)
        assert ds.attrs.codes[:, 0].tolist() == [2, 0, 1]

    def test_unknown_sensitive_value_reports_line(self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "30,teacher,M,30,yes\n"
                "40,nurse,X,60,no\n")
        raw = load_table(write_data(tmp_path, text), toy_schema)
        with pytest.raises(DataError, match="line 3.*sex.*'X'"):
            preprocess(raw, toy_schema)

    def test_constant_column_warns_and_skips(self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "7,a,M,1,yes\n7,a,F,1,no\n7,b,M,1,yes\n")
        raw = load_table(write_data(tmp_path, text), toy_schema)
        ds = preprocess(raw, toy_schema)
        assert any("age" in w and "skipped" in w for w in ds.warnings)
        assert ds.stats.skipped == ("age",)
        age = ds.features[:, ds.feature_names.index("age")]
        assert age.tolist() == [7.0, 7.0, 7.0]

    def test_fit_rows_statistics_ignore_other_rows(self, tmp_path, toy_schema):
        text = ("age,job,sex,senior,outcome\n"
                "1,a,M,1,yes\n3,a,M,1,yes\n1000,a,M,1,no\n")
        raw = load_table(write_data(tmp_path, text), toy_schema)
        ds = preprocess(raw, toy_schema, fit_rows=np.array([0, 1]))
        assert ds.stats.means[ds.stats.names.index("age")] == 2.0
        assert ds.stats.stds[ds.stats.names.index("age")] == 1.0
        age = ds.features[:, ds.feature_names.index("age")]
        assert age.tolist() == [-1.0, 1.0, 998.0]

    def test_fit_rows_out_of_range(self, tmp_path, toy_schema):
        raw = load_table(write_data(tmp_path, WELL_FORMED), toy_schema)
        with pytest.raises(DataError, match="out of range"):
            preprocess(raw, toy_schema, fit_rows=np.array([0, 5]))


class TestDataset:
    def test_inconsistent_lengths_rejected(self):
        attrs = SensitiveAttributes(codes=np.zeros((3, 1), dtype=int),
                                    cardinalities=(1,))
        with pytest.raises(ValidationError, match="inconsistent"):
            Dataset(features=np.zeros((2, 2)), labels=np.ones(2), attrs=attrs,
                    feature_names=("a", "b"), column_schema=())

    def test_non_finite_features_rejected(self):
        attrs = SensitiveAttributes(codes=np.zeros((2, 1), dtype=int),
                                    cardinalities=(1,))
        with pytest.raises(ValidationError, match="non-finite"):
            Dataset(features=np.array([[1.0], [np.nan]]), labels=np.ones(2),
                    attrs=attrs, feature_names=("a",), column_schema=())

    def test_take_subsets_all_fields(self):
        ds = synth_biased(100, seed=3, bias=0.2)
        sub = ds.take(np.array([5, 1, 7]))
        assert sub.n == 3
        assert np.array_equal(sub.features, ds.features[[5, 1, 7]])
        assert np.array_equal(sub.labels, ds.labels[[5, 1, 7]])
        assert np.array_equal(sub.attrs.codes, ds.attrs.codes[[5, 1, 7]])
        assert sub.attrs.cardinalities == ds.attrs.cardinalities


class TestSplit:
    def test_sizes_70_15_15(self):
        ds = synth_biased(100, seed=0, bias=0.0)
        train, val, test = split(ds, SplitSpec(seed=4))
        assert (train.n, val.n, test.n) == (70, 15, 15)

    def test_floor_sizes_remainder_to_test(self):
        train_idx, val_idx, test_idx = split_indices(103, SplitSpec(seed=1))
        assert (len(train_idx), len(val_idx), len(test_idx)) == (72, 15, 16)

    def test_same_seed_identical_partition(self):
        a = split_indices(100, SplitSpec(seed=11))
        b = split_indices(100, SplitSpec(seed=11))
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_different_seeds_differ(self):
        a = split_indices(100, SplitSpec(seed=11))
        b = split_indices(100, SplitSpec(seed=12))
        assert set(a[0].tolist()) != set(b[0].tolist())

    def test_partition_is_exact(self):
        parts = split_indices(57, SplitSpec(seed=5))
        merged = np.concatenate(parts)
        assert len(merged) == 57
        assert set(merged.tolist()) == set(range(57))

    def test_too_small_rejected(self):
        ds = synth_biased(100, seed=0, bias=0.0).take(np.arange(9))
        with pytest.raises(DataError, match="at least 10"):
            split(ds, SplitSpec(seed=0))

    def test_fractions_must_sum_to_one(self):
        with pytest.raises(ValidationError, match="sum to 1"):
            SplitSpec(train=0.8, val=0.15, test=0.15)

    def test_fraction_range_validated(self):
        with pytest.raises(ValidationError, match="train"):
            SplitSpec(train=0.0, val=0.5, test=0.5)


class TestLeakageGuard:
    def test_train_statistics_reused_for_val_and_test(self, tmp_path, toy_schema):
        rng = np.random.default_rng(0)
        lines = ["age,job,sex,senior,outcome"]
        jobs = ["a", "b", "c"]
        for i in range(60):
            lines.append(f"{rng.normal(40, 12):.6f},{jobs[i % 3]},"
                         f"{'MF'[i % 2]},{rng.integers(20, 80)},"
                         f"{'yes' if rng.random() > 0.5 else 'no'}")
        raw = load_table(write_data(tmp_path, "\n".join(lines) + "\n"),
                         toy_schema)
        spec = SplitSpec(seed=9)
        train, val, test = prepare_splits(raw, toy_schema, spec)

        train_idx, val_idx, test_idx = split_indices(raw.n_rows, spec)
        age_raw = raw.columns["age"]
        mean = age_raw[train_idx].mean()
        std = age_raw[train_idx].std()
        assert train.stats.means[0] == pytest.approx(mean, abs=1e-12)
        assert train.stats.stds[0] == pytest.approx(std, abs=1e-12)

        col = train.feature_names.index("age")
        assert np.allclose(train.features[:, col],
                           (age_raw[train_idx] - mean) / std, atol=1e-12)
        assert np.allclose(val.features[:, col],
                           (age_raw[val_idx] - mean) / std, atol=1e-12)
        assert np.allclose(test.features[:, col],
                           (age_raw[test_idx] - mean) / std, atol=1e-12)
        assert val.stats is train.stats


class TestSynthBiased:
    def test_pure_function_of_inputs(self):
        a = synth_biased(500, seed=42, bias=0.3)
        b = synth_biased(500, seed=42, bias=0.3)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.attrs.codes, b.attrs.codes)

    def test_basic_shape_and_coding(self):
        ds = synth_biased(200, seed=1, bias=0.5)
        assert ds.features.shape == (200, 3)
        assert set(ds.labels.tolist()) == {-1.0, 1.0}
        assert ds.attrs.cardinalities == (2, 2)
        assert ds.attrs.codes.min() == 0 and ds.attrs.codes.max() == 1

    def test_group_counts_at_least_eighth(self):
        for seed in range(10):
            ds = synth_biased(800, seed=seed, bias=0.5)
            gid = 2 * ds.attrs.codes[:, 0] + ds.attrs.codes[:, 1]
            counts = np.bincount(gid, minlength=4)
            assert counts.min() >= 100, (seed, counts.tolist())

    def test_zero_bias_fit_is_fair(self):
        ds = synth_biased(4000, seed=7, bias=0.0)
        ddp, _ = fit_rates_disparity(ds.features, ds.labels, ds.attrs.codes)
        assert ddp <= 0.05

    def test_half_bias_fit_is_unfair(self):
        ds = synth_biased(4000, seed=7, bias=0.5)
        ddp, _ = fit_rates_disparity(ds.features, ds.labels, ds.attrs.codes)
        assert ddp >= 0.15

    def test_disparity_grows_with_bias(self):
        values = []
        for bias in (0.0, 0.5, 1.0):
            ds = synth_biased(20_000, seed=3, bias=bias)
            ddp, _ = fit_rates_disparity(ds.features, ds.labels, ds.attrs.codes)
            values.append(ddp)
        assert values[0] < values[1] < values[2]
        assert values[2] >= 0.45

    def test_fair_model_exists_within_accuracy_budget(self):
        ds = synth_biased(20_000, seed=5, bias=0.5)
        ddp_base, acc_base = fit_rates_disparity(
            ds.features, ds.labels, ds.attrs.codes)
        ddp_fair, acc_fair = fit_rates_disparity(
            ds.features[:, :2], ds.labels, ds.attrs.codes)
        assert ddp_base >= 0.15
        assert ddp_fair <= 0.05
        assert acc_base - acc_fair <= 0.10

    def test_input_validation(self):
        with pytest.raises(ValidationError, match="n >= 100"):
            synth_biased(50, seed=0, bias=0.5)
        with pytest.raises(ValidationError, match="bias"):
            synth_biased(200, seed=0, bias=1.5)


class TestPlBiobjective:
    def test_gradients_exact(self):
        f1, f2 = synth_pl_biobjective()
        rng = np.random.default_rng(0)
        for _ in range(20):
            theta = rng.normal(size=2) * 3
            h = 1e-6
            for f in (f1, f2):
                g = f.grad(theta)
                for j in range(2):
                    e = np.zeros(2)
                    e[j] = h
                    fd = (f.loss(theta + e) - f.loss(theta - e)) / (2 * h)
                    assert abs(fd - g[j]) <= 1e-8

    def test_eval_params_matches_loss_and_grad(self):
        f1, _ = synth_pl_biobjective()
        theta = np.array([0.3, -0.7])
        value, grad = f1.eval_params(theta)
        assert value == f1.loss(theta)
        assert np.array_equal(grad, f1.grad(theta))

    def test_distinct_minimizers(self):
        f1, f2 = synth_pl_biobjective()
        assert f1.loss(f1.center) == 0.0
        assert f2.loss(f2.center) == 0.0
        assert np.linalg.norm(f1.center - f2.center) == 2.0

    def test_midpoint_is_stationary(self):
        f1, f2 = synth_pl_biobjective()
        mid = 0.5 * (f1.center + f2.center)
        g1, g2 = f1.grad(mid), f2.grad(mid)
        assert min_norm_two_vectors(g1, g2) == 0.0
        assert stationarity_measure(np.stack([g1, g2])) <= 1e-12

    def test_whole_segment_is_stationary(self):
        f1, f2 = synth_pl_biobjective()
        for lam in np.linspace(0.05, 0.95, 7):
            point = lam * f1.center + (1 - lam) * f2.center
            g = np.stack([f1.grad(point), f2.grad(point)])
            assert min_norm_two_vectors(g[0], g[1]) <= 1e-15
            assert stationarity_measure(g) <= 1e-10

    def test_off_segment_points_not_stationary(self):
        f1, f2 = synth_pl_biobjective()
        rng = np.random.default_rng(123)
        checked = 0
        while checked < 100:
            point = rng.uniform(-3, 3, size=2)
            on_segment = abs(point[1]) < 1e-3 and abs(point[0]) <= 1.0
            if on_segment:
                continue
            g1, g2 = f1.grad(point), f2.grad(point)
            oracle = min_norm_two_vectors(g1, g2)
            assert oracle > 1e-4, point
            measured = stationarity_measure(np.stack([g1, g2]))
            assert measured == pytest.approx(oracle, rel=1e-6, abs=1e-9)
            checked += 1
