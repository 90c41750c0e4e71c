"""Run configuration: one YAML file describes a full experiment.

The file names a dataset (on disk with a schema, or a synthetic
population), a model architecture, the objective set (task loss plus
fairness losses in a chosen grouping mode), training hyperparameters,
the split policy, and how many seeded repeats to aggregate.

Every validation failure raises ConfigError with the offending field's
dotted path, so the command line can report it precisely.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .data import (
    Dataset,
    SplitSpec,
    load_schema,
    load_table,
    prepare_splits,
    split,
    synth_biased,
)
from .errors import (
    ConfigError,
    DataError,
    ParameterError,
    ValidationError,
)
from .fairloss import (
    BinaryCrossEntropy,
    FairLossConfig,
    SurrogateConfig,
    dp_loss,
    tpr_loss,
)
from .groups import (
    GroupTable,
    build_intersection,
    marginal_attribute_groups,
)
from .metrics import INTERSECTIONAL, PER_ATTRIBUTE
from .models import ModelSpec
from .optimizer import TrainConfig
from .strategies import SelectorThresholds

DATA_DIR_ENV = "PARETOFAIR_DATA_DIR"

MODES = ("attr1", "attr2", "multi", "intersectional")
FAIRNESS_METRICS = ("dp", "tpr")


@dataclass(frozen=True)
class DatasetConfig:
    """Where samples come from: a schema-described file or a generator."""

    kind: str                        # "file" | "synthetic"
    path: Optional[str] = None       # file only
    schema: Optional[str] = None     # file only
    n: int = 4000                    # synthetic only
    bias: float = 0.5                # synthetic only
    seed: int = 0                    # synthetic only

    def __post_init__(self):
        if self.kind not in ("file", "synthetic"):
            raise ConfigError(f"dataset.kind must be 'file' or 'synthetic', "
                              f"got {self.kind!r}", field="dataset.kind")
        if self.kind == "file" and (self.path is None or self.schema is None):
            raise ConfigError("file datasets need both 'path' and 'schema'",
                              field="dataset.path")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; the input width is taken from the data."""

    kind: str = "logistic"
    hidden_dim: int = 0
    output_classes: int = 2

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp"):
            raise ConfigError(f"model.kind must be 'logistic' or 'mlp', "
                              f"got {self.kind!r}", field="model.kind")
        if self.kind == "mlp" and self.hidden_dim < 1:
            raise ConfigError("mlp needs model.hidden_dim >= 1",
                              field="model.hidden_dim")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Which losses train together and over which group structure."""

    fairness: tuple = ("dp", "tpr")
    mode: str = "intersectional"
    lam: float = 0.1
    beta: float = 0.0
    smooth: bool = True
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"objectives.mode must be one of {MODES}, "
                              f"got {self.mode!r}", field="objectives.mode")
        bad = [m for m in self.fairness if m not in FAIRNESS_METRICS]
        if bad:
            raise ConfigError(f"unknown fairness metric(s) {bad}; expected "
                              f"subset of {FAIRNESS_METRICS}",
                              field="objectives.fairness")


@dataclass(frozen=True)
class RunConfig:
    """Everything one experiment needs, as read from a config file."""

    name: str
    dataset: DatasetConfig
    model: ModelConfig
    objectives: ObjectiveConfig
    train: TrainConfig
    split: SplitSpec
    repeat_count: int = 1
    output_dir: str = "out"

    def __post_init__(self):
        if self.repeat_count < 1:
            raise ConfigError(f"repeat_count must be >= 1, "
                              f"got {self.repeat_count}", field="repeat_count")


def _expect_mapping(doc, where: str) -> dict:
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(doc).__name__}",
                          field=where)
    return dict(doc)


def _known_keys(doc: dict, allowed, where: str):
    extra = set(doc) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) {sorted(extra)} in {where}",
                          field=where)


def _build(cls, doc: dict, where: str, **extra):
    names = {f.name for f in fields(cls)}
    _known_keys(doc, names - set(extra), where)
    try:
        return cls(**{**doc, **extra})
    except ConfigError:
        raise
    except (TypeError, ValueError, ParameterError, ValidationError) as exc:
        raise ConfigError(f"bad {where} section: {exc}", field=where) from exc


def load_run_config(path) -> RunConfig:
    """Parse and validate a YAML run configuration."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = yaml.safe_load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"cannot parse config {path}{line}: {exc}") from exc
    doc = _expect_mapping(doc, "config")
    _known_keys(doc, ("name", "dataset", "model", "objectives", "train",
                      "thresholds", "split", "repeat_count", "output_dir"),
                "config")
    if "dataset" not in doc:
        raise ConfigError("config needs a 'dataset' section", field="dataset")

    dataset = _build(DatasetConfig, _expect_mapping(doc["dataset"], "dataset"),
                     "dataset")
    model = _build(ModelConfig, _expect_mapping(doc.get("model"), "model"),
                   "model")

    objectives_doc = _expect_mapping(doc.get("objectives"), "objectives")
    surrogate_doc = _expect_mapping(objectives_doc.pop("surrogate", None),
                                    "objectives.surrogate")
    surrogate = _build(SurrogateConfig, surrogate_doc, "objectives.surrogate")
    if "fairness" in objectives_doc:
        objectives_doc["fairness"] = tuple(objectives_doc["fairness"])
    objectives = _build(ObjectiveConfig, objectives_doc, "objectives",
                        surrogate=surrogate)

    thresholds = _build(SelectorThresholds,
                        _expect_mapping(doc.get("thresholds"), "thresholds"),
                        "thresholds")
    train_doc = _expect_mapping(doc.get("train"), "train")
    if "loss_spec" in train_doc:
        raise ConfigError("train.loss_spec is built from the objectives "
                          "section and cannot be set directly",
                          field="train.loss_spec")
    if "batch_size" in train_doc and train_doc["batch_size"] is not None:
        train_doc["batch_size"] = int(train_doc["batch_size"])
    if "constraint_box" in train_doc and train_doc["constraint_box"] is not None:
        box = train_doc["constraint_box"]
        if not isinstance(box, (list, tuple)) or len(box) != 2:
            raise ConfigError("train.constraint_box must be a [lo, hi] pair",
                              field="train.constraint_box")
        train_doc["constraint_box"] = (float(box[0]), float(box[1]))
    train = _build(TrainConfig, train_doc, "train",
                   thresholds=thresholds, lam=objectives.lam)

    split_spec = _build(SplitSpec, _expect_mapping(doc.get("split"), "split"),
                        "split")

    try:
        repeat_count = int(doc.get("repeat_count", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"repeat_count must be an integer: {exc}",
                          field="repeat_count") from exc
    return RunConfig(
        name=str(doc.get("name", Path(str(path)).stem)),
        dataset=dataset,
        model=model,
        objectives=objectives,
        train=train,
        split=split_spec,
        repeat_count=repeat_count,
        output_dir=str(doc.get("output_dir", "out")),
    )


# --------------------------------------------------------------------------
# Turning a config into runtime objects
# --------------------------------------------------------------------------


def resolve_data_path(ref: str, config_dir: Optional[Path]) -> Path:
    """Find a dataset file: absolute, next to the config, cwd, or the
    directory named by the data-cache environment variable."""
    candidate = Path(ref)
    if candidate.is_absolute():
        return candidate
    roots = []
    if config_dir is not None:
        roots.append(Path(config_dir))
    roots.append(Path.cwd())
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        roots.append(Path(env))
    for root in roots:
        path = root / candidate
        if path.exists():
            return path
    return (roots[0] if config_dir is not None else Path.cwd()) / candidate


def load_splits(cfg: DatasetConfig, split_spec: SplitSpec,
                config_dir: Optional[Path] = None):
    """Materialize (train, val, test) datasets for a dataset config."""
    if cfg.kind == "synthetic":
        dataset = synth_biased(cfg.n, seed=cfg.seed, bias=cfg.bias)
        return split(dataset, split_spec)
    data_path = resolve_data_path(cfg.path, config_dir)
    schema_path = resolve_data_path(cfg.schema, config_dir)
    if not data_path.exists():
        raise DataError(f"dataset file not found: {data_path} "
                        f"(searched config dir, cwd, and ${DATA_DIR_ENV})")
    schema = load_schema(schema_path)
    raw = load_table(data_path, schema)
    return prepare_splits(raw, schema, split_spec)


def build_model_spec(cfg: ModelConfig, input_dim: int) -> ModelSpec:
    return ModelSpec(kind=cfg.kind, input_dim=input_dim,
                     hidden_dim=cfg.hidden_dim,
                     output_classes=cfg.output_classes)


def fairness_tables(mode: str, dataset: Dataset) -> list[tuple[str, GroupTable]]:
    """Group tables the fairness losses are built over, with name suffixes."""
    attrs = dataset.attrs
    if mode == "intersectional":
        return [("", build_intersection(attrs))]
    if mode == "attr1":
        return [("", marginal_attribute_groups(attrs, 0))]
    if mode == "attr2":
        if attrs.n_attributes < 2:
            raise ConfigError("mode 'attr2' needs at least two sensitive "
                              "attributes", field="objectives.mode")
        return [("", marginal_attribute_groups(attrs, 1))]
    if mode == "multi":
        return [(f"[attr{a + 1}]", marginal_attribute_groups(attrs, a))
                for a in range(attrs.n_attributes)]
    raise ConfigError(f"unknown mode {mode!r}", field="objectives.mode")


def build_objectives(cfg: ObjectiveConfig, dataset: Dataset) -> list:
    """Objective list: the task loss first, then one composite fairness
    loss per (metric, group table) pair of the chosen mode."""
    labels = dataset.labels
    objectives = [BinaryCrossEntropy(labels)]
    for suffix, table in fairness_tables(cfg.mode, dataset):
        for metric in cfg.fairness:
            if metric == "dp":
                loss_cfg = FairLossConfig(metric="DP", lam=cfg.lam,
                                          beta=cfg.beta)
                objective = dp_loss(table, labels, cfg.surrogate, loss_cfg,
                                    smooth=cfg.smooth)
            else:
                loss_cfg = FairLossConfig(metric="TPR", lam=cfg.lam)
                objective = tpr_loss(table, labels, cfg.surrogate, loss_cfg,
                                     smooth=cfg.smooth)
            objective.name = objective.name + suffix
            objectives.append(objective)
    return objectives


def evaluation_table(mode: str, dataset: Dataset) -> tuple[GroupTable, str]:
    """Group table and report tag used when scoring a trained model.

    Single-attribute modes report over that attribute's levels; 'multi'
    and 'intersectional' report over the full intersectional cells (the
    stricter reading for 'multi').
    """
    attrs = dataset.attrs
    if mode == "attr1":
        return marginal_attribute_groups(attrs, 0), PER_ATTRIBUTE
    if mode == "attr2":
        return marginal_attribute_groups(attrs, 1), PER_ATTRIBUTE
    return build_intersection(attrs), INTERSECTIONAL


def per_repeat(config: RunConfig, index: int) -> RunConfig:
    """The i-th repeat shifts every seed by i, keeping all else equal."""
    return replace(
        config,
        dataset=(replace(config.dataset, seed=config.dataset.seed + index)
                 if config.dataset.kind == "synthetic" else config.dataset),
        train=replace(config.train, seed=config.train.seed + index),
        split=replace(config.split, seed=config.split.seed + index),
    )
