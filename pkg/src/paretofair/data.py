"""Tabular ingestion, preprocessing, deterministic splits, and synthetic data.

The ingestion path is deliberately strict: a schema file declares every
column's name and kind, the header must match it exactly, rows with
missing values are dropped (and reported by line number), and any cell
that is present but unparseable is an error rather than a silent NaN.

Two synthetic generators back the tests: a biased tabular population
whose unfairness is tunable and removable, and a pair of convex
quadratics used as a clean two-objective optimization fixture.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

from .errors import DataError, SchemaError, ValidationError
from .groups import SensitiveAttributes

COLUMN_KINDS = ("numeric", "categorical", "sensitive", "label")

# --------------------------------------------------------------------------
# Schema
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnSpec:
    """One column's name, kind, and (for some kinds) its encoding rule."""

    name: str
    kind: str
    values: Optional[Mapping[str, int]] = None  # sensitive: explicit level codes
    cut: Optional[float] = None                 # sensitive: code = 1 when value > cut
    positive: Optional[str] = None              # label: raw value mapped to +1
    classes: Optional[tuple] = None             # label: ordered multiclass levels

    def __post_init__(self):
        if self.kind not in COLUMN_KINDS:
            raise SchemaError(
                f"column {self.name!r}: unknown kind {self.kind!r}; "
                f"expected one of {COLUMN_KINDS}")
        if self.kind == "sensitive":
            if self.values is not None and self.cut is not None:
                raise SchemaError(
                    f"column {self.name!r}: give either 'values' or 'cut', not both")
            if self.values is not None:
                codes = sorted(set(int(v) for v in self.values.values()))
                if codes != list(range(len(codes))):
                    raise SchemaError(
                        f"column {self.name!r}: value codes must cover exactly "
                        f"0..{len(codes) - 1}, got {codes}")
        elif self.values is not None or self.cut is not None:
            raise SchemaError(
                f"column {self.name!r}: 'values'/'cut' only apply to sensitive columns")
        if self.kind == "label":
            if (self.positive is None) == (self.classes is None):
                raise SchemaError(
                    f"column {self.name!r}: a label needs exactly one of "
                    f"'positive' (binary) or 'classes' (multiclass)")
        elif self.positive is not None or self.classes is not None:
            raise SchemaError(
                f"column {self.name!r}: 'positive'/'classes' only apply to the label")

    @property
    def parses_as_number(self) -> bool:
        return self.kind == "numeric" or (self.kind == "sensitive"
                                          and self.cut is not None)


@dataclass(frozen=True)
class TableSchema:
    """Declared layout of one delimited text file."""

    name: str
    columns: tuple
    delimiter: str = ","
    missing: tuple = ("",)

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate column names in schema {self.name!r}")
        labels = [c for c in self.columns if c.kind == "label"]
        if len(labels) != 1:
            raise SchemaError(
                f"schema {self.name!r} needs exactly one label column, "
                f"found {len(labels)}")
        if not any(c.kind == "sensitive" for c in self.columns):
            raise SchemaError(f"schema {self.name!r} declares no sensitive column")
        if len(self.delimiter) != 1:
            raise SchemaError(
                f"delimiter must be a single character, got {self.delimiter!r}")

    @property
    def names(self) -> tuple:
        return tuple(c.name for c in self.columns)

    @property
    def label(self) -> ColumnSpec:
        return next(c for c in self.columns if c.kind == "label")

    @property
    def sensitive(self) -> tuple:
        return tuple(c for c in self.columns if c.kind == "sensitive")

    @property
    def features(self) -> tuple:
        return tuple(c for c in self.columns if c.kind in ("numeric", "categorical"))


def load_schema(path) -> TableSchema:
    """Read a schema file (YAML mapping) into a TableSchema."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = yaml.safe_load(handle)
    except OSError as exc:
        raise SchemaError(f"cannot read schema file {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise SchemaError(f"cannot parse schema file {path}: {exc}") from exc
    if not isinstance(doc, dict) or "columns" not in doc:
        raise SchemaError(f"schema file {path} must be a mapping with 'columns'")
    columns = []
    for entry in doc["columns"]:
        if not isinstance(entry, dict) or "name" not in entry or "kind" not in entry:
            raise SchemaError(f"schema file {path}: every column needs name and kind")
        known = {"name", "kind", "values", "cut", "positive", "classes"}
        extra = set(entry) - known
        if extra:
            raise SchemaError(
                f"schema file {path}: column {entry['name']!r} has "
                f"unknown keys {sorted(extra)}")
        columns.append(ColumnSpec(
            name=str(entry["name"]),
            kind=str(entry["kind"]),
            values={str(k): int(v) for k, v in entry["values"].items()}
            if entry.get("values") is not None else None,
            cut=float(entry["cut"]) if entry.get("cut") is not None else None,
            positive=str(entry["positive"])
            if entry.get("positive") is not None else None,
            classes=tuple(str(c) for c in entry["classes"])
            if entry.get("classes") is not None else None,
        ))
    return TableSchema(
        name=str(doc.get("name", "unnamed")),
        columns=tuple(columns),
        delimiter=str(doc.get("delimiter", ",")),
        missing=tuple(str(m) for m in doc.get("missing", [""])),
    )


# --------------------------------------------------------------------------
# Raw ingestion
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RawTable:
    """Typed columns straight from disk, before any encoding."""

    schema: TableSchema
    columns: dict                 # name -> float64 array or object(str) array
    n_rows: int
    line_numbers: np.ndarray      # 1-based file line per kept row
    dropped_lines: tuple          # 1-based file lines dropped for missing cells


def load_table(path, schema: TableSchema) -> RawTable:
    """Read a delimited text file whose header must match the schema.

    Rows containing a missing marker are dropped and reported; a
    non-missing cell that fails to parse is an error naming its line.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            reader = csv.reader(handle, delimiter=schema.delimiter)
            rows = [(lineno, [cell.strip() for cell in row])
                    for lineno, row in enumerate(reader, start=1) if row]
    except OSError as exc:
        raise DataError(f"cannot read data file {path}: {exc}") from exc
    if not rows:
        raise DataError(f"data file {path} is empty")

    _, header = rows[0]
    missing_cols = set(schema.names) - set(header)
    if missing_cols:
        raise SchemaError(
            f"data file {path} is missing column(s) "
            f"{sorted(missing_cols)} required by schema {schema.name!r}")
    extra_cols = set(header) - set(schema.names)
    if extra_cols:
        raise SchemaError(
            f"data file {path} has column(s) {sorted(extra_cols)} "
            f"not in schema {schema.name!r}")
    if len(header) != len(schema.names):
        raise SchemaError(f"data file {path} repeats a column name")
    position = {name: header.index(name) for name in schema.names}

    kept, kept_lines, dropped = [], [], []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise DataError(
                f"line {lineno}: expected {len(header)} fields, got {len(row)}")
        if any(cell in schema.missing for cell in row):
            dropped.append(lineno)
            continue
        kept.append(row)
        kept_lines.append(lineno)

    columns = {}
    for spec in schema.columns:
        cells = [row[position[spec.name]] for row in kept]
        if spec.parses_as_number:
            parsed = np.empty(len(cells))
            for i, cell in enumerate(cells):
                try:
                    parsed[i] = float(cell)
                except ValueError:
                    raise DataError(
                        f"line {kept_lines[i]}: column {spec.name!r}: "
                        f"cannot parse {cell!r} as a number") from None
                if not np.isfinite(parsed[i]):
                    raise DataError(
                        f"line {kept_lines[i]}: column {spec.name!r}: "
                        f"non-finite value {cell!r}")
            columns[spec.name] = parsed
        else:
            columns[spec.name] = np.array(cells, dtype=object)
    return RawTable(schema=schema, columns=columns, n_rows=len(kept),
                    line_numbers=np.array(kept_lines, dtype=np.int64),
                    dropped_lines=tuple(dropped))


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Standardization:
    """Per-column affine transform fitted on a designated row subset."""

    names: tuple
    means: np.ndarray
    stds: np.ndarray              # 1.0 for skipped (constant) columns
    skipped: tuple                # names whose standardization was skipped

    def transform(self, name: str, values: np.ndarray) -> np.ndarray:
        i = self.names.index(name)
        return (np.asarray(values, dtype=np.float64) - self.means[i]) / self.stds[i]


@dataclass(frozen=True)
class Dataset:
    """Fully encoded numeric dataset plus its sensitive attributes."""

    features: np.ndarray          # (n, d) float64
    labels: np.ndarray            # (n,) +-1 floats, or class indices
    attrs: SensitiveAttributes
    feature_names: tuple
    column_schema: tuple          # (name, kind) pairs of the source columns
    stats: Optional[Standardization] = None
    warnings: tuple = ()

    def __post_init__(self):
        features = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels)
        if features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got {features.shape}")
        if not (features.shape[0] == labels.shape[0] == self.attrs.n_samples):
            raise ValidationError(
                f"inconsistent sample counts: features {features.shape[0]}, "
                f"labels {labels.shape[0]}, attrs {self.attrs.n_samples}")
        if not np.all(np.isfinite(features)):
            raise ValidationError("features contain non-finite values")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def take(self, indices) -> "Dataset":
        """Row subset sharing the fitted statistics and schema."""
        indices = np.asarray(indices)
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            attrs=SensitiveAttributes(codes=self.attrs.codes[indices],
                                      cardinalities=self.attrs.cardinalities),
            feature_names=self.feature_names,
            column_schema=self.column_schema,
            stats=self.stats,
            warnings=self.warnings,
        )


def preprocess(raw: RawTable, schema: TableSchema,
               fit_rows: Optional[np.ndarray] = None) -> Dataset:
    """Encode a raw table: standardize numerics, one-hot categoricals,
    integer-code sensitive columns, and map labels to +-1 (or class ids).

    Standardization statistics come from `fit_rows` only (default: all
    rows), so fitting on a training subset leaks nothing from the rest.
    """
    if raw.n_rows == 0:
        raise DataError("no rows left to preprocess")
    fit_rows = (np.arange(raw.n_rows) if fit_rows is None
                else np.asarray(fit_rows, dtype=np.int64))
    if fit_rows.size == 0:
        raise DataError("fit_rows must select at least one row")
    if fit_rows.min() < 0 or fit_rows.max() >= raw.n_rows:
        raise DataError(
            f"fit_rows out of range [0, {raw.n_rows}) for this table")

    warnings = []
    blocks, names = [], []
    numeric_names, means, stds, skipped = [], [], [], []
    for spec in schema.features:
        col = raw.columns[spec.name]
        if spec.kind == "numeric":
            mean = float(col[fit_rows].mean())
            std = float(col[fit_rows].std())
            if std == 0.0:
                warnings.append(
                    f"column {spec.name!r} is constant on the fitting rows; "
                    f"standardization skipped")
                skipped.append(spec.name)
                mean, std = 0.0, 1.0
            numeric_names.append(spec.name)
            means.append(mean)
            stds.append(std)
            blocks.append(((col - mean) / std)[:, None])
            names.append(spec.name)
        else:
            levels = sorted(set(col.tolist()))
            for level in levels:
                blocks.append((col == level).astype(np.float64)[:, None])
                names.append(f"{spec.name}={level}")
    if not blocks:
        raise DataError(f"schema {schema.name!r} declares no feature columns")
    features = np.hstack(blocks)

    codes = np.empty((raw.n_rows, len(schema.sensitive)), dtype=np.int64)
    cardinalities = []
    for j, spec in enumerate(schema.sensitive):
        col = raw.columns[spec.name]
        if spec.cut is not None:
            codes[:, j] = (col > spec.cut).astype(np.int64)
            cardinalities.append(2)
        elif spec.values is not None:
            for i, cell in enumerate(col):
                if cell not in spec.values:
                    raise DataError(
                        f"line {raw.line_numbers[i]}: column {spec.name!r}: "
                        f"unexpected value {cell!r}")
                codes[i, j] = spec.values[cell]
            cardinalities.append(max(spec.values.values()) + 1)
        else:
            levels = sorted(set(col.tolist()))
            index = {level: i for i, level in enumerate(levels)}
            codes[:, j] = [index[cell] for cell in col]
            cardinalities.append(len(levels))

    label_spec = schema.label
    col = raw.columns[label_spec.name]
    if label_spec.positive is not None:
        labels = np.where(col == label_spec.positive, 1.0, -1.0)
    else:
        index = {level: i for i, level in enumerate(label_spec.classes)}
        labels = np.empty(raw.n_rows, dtype=np.int64)
        for i, cell in enumerate(col):
            if cell not in index:
                raise DataError(
                    f"line {raw.line_numbers[i]}: column {label_spec.name!r}: "
                    f"unexpected class {cell!r}")
            labels[i] = index[cell]

    return Dataset(
        features=features,
        labels=labels,
        attrs=SensitiveAttributes(codes=codes,
                                  cardinalities=tuple(cardinalities)),
        feature_names=tuple(names),
        column_schema=tuple((c.name, c.kind) for c in schema.columns),
        stats=Standardization(names=tuple(numeric_names),
                              means=np.array(means), stds=np.array(stds),
                              skipped=tuple(skipped)),
        warnings=tuple(warnings),
    )


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Train/validation/test fractions plus the shuffle seed."""

    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        for name, frac in (("train", self.train), ("val", self.val),
                           ("test", self.test)):
            if not 0.0 < frac < 1.0:
                raise ValidationError(
                    f"{name} fraction must be in (0,1), got {frac}")
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise ValidationError(
                f"fractions must sum to 1, got "
                f"{self.train + self.val + self.test}")


def split_indices(n: int, spec: SplitSpec):
    """Deterministic seeded partition of range(n) into three index arrays."""
    if n < 10:
        raise DataError(f"need at least 10 samples to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(np.floor(spec.train * n))
    n_val = int(np.floor(spec.val * n))
    return (order[:n_train], order[n_train:n_train + n_val],
            order[n_train + n_val:])


def split(dataset: Dataset, spec: SplitSpec):
    """Partition an encoded dataset by a seeded shuffle."""
    train_idx, val_idx, test_idx = split_indices(dataset.n, spec)
    return dataset.take(train_idx), dataset.take(val_idx), dataset.take(test_idx)


def prepare_splits(raw: RawTable, schema: TableSchema, spec: SplitSpec):
    """Leakage-safe pipeline: the partition is chosen first, encoding
    statistics are fitted on the training rows only, then all three
    splits are transformed with those same statistics."""
    train_idx, val_idx, test_idx = split_indices(raw.n_rows, spec)
    dataset = preprocess(raw, schema, fit_rows=train_idx)
    return (dataset.take(train_idx), dataset.take(val_idx),
            dataset.take(test_idx))


# --------------------------------------------------------------------------
# Synthetic generators
# --------------------------------------------------------------------------

# Biased-population generator. One latent merit score u drives the
# labels and is visible through three noisy views; the most informative
# view also carries a per-group mean shift proportional to `bias`, so an
# unconstrained fit (which must use that view for accuracy) leaks group
# membership into its scores, while a model ignoring the shifted view is
# blind to the groups in both rates and true-positive rates.
GROUP_TILT = np.array([-1.5, -0.5, 0.5, 1.5])  # per intersectional cell
MERIT_VIEW = 0.55     # weight of u in the two clean feature views
CARRIER_VIEW = 2.0    # weight of u in the group-shifted view
CARRIER_NOISE = 0.4   # independent noise of the shifted view
SHIFT_SCALE = 2.3     # group mean shift per unit bias
LABEL_NOISE = 0.65    # noise on u when thresholding into labels


def synth_biased(n: int, seed: int, bias: float) -> Dataset:
    """Population with two binary sensitive attributes and tunable bias.

    Draw order (fixed; the generator is a pure function of its inputs):
    attribute codes, merit u, view noises e1 e2 e3, label noise z.
    At bias=0 the shifted view carries no group signal and an
    unconstrained fit is already fair; at bias=1 the maximum-likelihood
    fit's intersectional demographic-parity gap exceeds one half.
    """
    if n < 100:
        raise ValidationError(f"synth_biased needs n >= 100, got {n}")
    if not 0.0 <= bias <= 1.0:
        raise ValidationError(f"bias must be in [0,1], got {bias}")
    rng = np.random.default_rng(seed)
    codes = rng.integers(0, 2, size=(n, 2))
    tilt = GROUP_TILT[2 * codes[:, 0] + codes[:, 1]]
    u = rng.standard_normal(n)
    e1 = rng.standard_normal(n)
    e2 = rng.standard_normal(n)
    e3 = rng.standard_normal(n)
    z = rng.standard_normal(n)
    m1 = MERIT_VIEW * u + e1
    m2 = MERIT_VIEW * u + e2
    x3 = SHIFT_SCALE * bias * tilt + CARRIER_VIEW * u + CARRIER_NOISE * e3
    labels = np.where(u + LABEL_NOISE * z > 0, 1.0, -1.0)
    return Dataset(
        features=np.column_stack([m1, m2, x3]),
        labels=labels,
        attrs=SensitiveAttributes(codes=codes, cardinalities=(2, 2)),
        feature_names=("view1", "view2", "carrier"),
        column_schema=(("view1", "numeric"), ("view2", "numeric"),
                       ("carrier", "numeric"), ("attr1", "sensitive"),
                       ("attr2", "sensitive"), ("outcome", "label")),
    )


@dataclass(frozen=True)
class QuadraticObjective:
    """Half squared distance to a center point, defined on parameters."""

    center: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center",
                           np.asarray(self.center, dtype=np.float64))

    def loss(self, params: np.ndarray) -> float:
        diff = np.asarray(params, dtype=np.float64) - self.center
        return float(0.5 * diff @ diff)

    def grad(self, params: np.ndarray) -> np.ndarray:
        return np.asarray(params, dtype=np.float64) - self.center

    def eval_params(self, params: np.ndarray):
        return self.loss(params), self.grad(params)


def synth_pl_biobjective():
    """Two convex quadratics on the plane with distinct minimizers.

    Every point on the segment between the centers is Pareto-stationary
    (the two gradients oppose exactly); everywhere else some convex
    combination of the gradients stays bounded away from zero.
    """
    return (QuadraticObjective(center=np.array([1.0, 0.0])),
            QuadraticObjective(center=np.array([-1.0, 0.0])))
