"""Command-line front door.

Verbs:
  run            execute a config's seeded repeats; write traces, per-run
                 reports, snapshots, and a mean/std aggregate table
  eval           re-score a saved model snapshot on its test split
  trace-export   turn a trace stream into aligned plot-data series and
                 rendered diagnostic figures (--no-figures for data only)
  datasets fetch download and normalize one of the known public tables

Exit codes: 0 success; 2 unusable config; 3 missing/unreadable data;
4 numeric abort (a pointer to the partial trace is printed); 5 snapshot
missing or inconsistent with the config's model.

Every output file is written to a temporary name and atomically renamed,
so files are either complete or absent. Timing is kept out of exported
series, which makes exports byte-identical for identical config + seed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import urllib.error
import urllib.request
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from .config import (
    DATA_DIR_ENV,
    MODES,
    RunConfig,
    build_model_spec,
    build_objectives,
    evaluation_table,
    load_run_config,
    load_splits,
    per_repeat,
)
from .errors import (
    ConfigError,
    DataError,
    DegenerateGroupError,
    NumericError,
    ParetofairError,
    SchemaError,
)
from .metrics import evaluate, threshold_scores
from .models import ModelSpec, forward, n_params
from .optimizer import train
from .optimizer import _evaluate as evaluate_objective

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_SNAPSHOT = 5


# --------------------------------------------------------------------------
# Atomic file helpers
# --------------------------------------------------------------------------


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def atomic_write_bytes(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def _csv_text(header: list, rows: list) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return out.getvalue()


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------


def select_checkpoint(archive, model: ModelSpec, objectives, features):
    """Archive member with the smallest summed objective value on the
    given (validation) split; ties go to the latest snapshot. Falls back
    to the newest entry when no member is scoreable there."""
    best = None
    for entry in archive.entries:
        try:
            total = sum(evaluate_objective(model, entry.params, obj, features)[0]
                        for obj in objectives)
        except (DegenerateGroupError, NumericError):
            continue
        key = (total, -entry.snapshot_id)
        if best is None or key < best[0]:
            best = (key, entry)
    if best is None:
        entry = max(archive.entries, key=lambda e: e.snapshot_id)
        return entry.params, entry.snapshot_id
    return best[1].params, best[1].snapshot_id


def trace_lines(trace, include_timing: bool = True) -> str:
    return "".join(json.dumps(record, sort_keys=True) + "\n"
                   for record in trace.to_records(include_timing))


def report_csv(record: dict) -> str:
    keys = list(record)
    return _csv_text(keys, [[_cell(record[k]) for k in keys]])


def snapshot_blob(params: np.ndarray, model: ModelSpec, run_cfg: RunConfig,
                  snapshot_id: int) -> bytes:
    buffer = io.BytesIO()
    np.savez(
        buffer,
        params=params,
        model_kind=model.kind,
        input_dim=model.input_dim,
        hidden_dim=model.hidden_dim,
        output_classes=model.output_classes,
        mode=run_cfg.objectives.mode,
        train_seed=run_cfg.train.seed,
        split_seed=run_cfg.split.seed,
        dataset_seed=run_cfg.dataset.seed,
        snapshot_id=snapshot_id,
        config_name=run_cfg.name,
    )
    return buffer.getvalue()


def execute_run(run_cfg: RunConfig, run_dir: Path,
                config_dir: Optional[Path]) -> dict:
    """One seeded training run: train, select, score, persist."""
    train_ds, val_ds, test_ds = load_splits(run_cfg.dataset, run_cfg.split,
                                            config_dir)
    objectives = build_objectives(run_cfg.objectives, train_ds)
    model = build_model_spec(run_cfg.model, train_ds.features.shape[1])
    train_config = replace(run_cfg.train, loss_spec=objectives)

    try:
        result = train(train_config, model, train_ds)
    except NumericError as err:
        partial = getattr(err, "trace", None)
        if partial is not None:
            atomic_write_text(run_dir / "trace.jsonl", trace_lines(partial))
        err.trace_path = str(run_dir / "trace.jsonl")
        raise

    val_objectives = build_objectives(run_cfg.objectives, val_ds)
    params, snapshot_id = select_checkpoint(result.archive, model,
                                            val_objectives, val_ds.features)

    preds = threshold_scores(forward(model, params, test_ds.features))
    table, tag = evaluation_table(run_cfg.objectives.mode, test_ds)
    report = evaluate(preds, test_ds.labels, table, tag)

    atomic_write_text(run_dir / "trace.jsonl", trace_lines(result.trace))
    record = {"seed": run_cfg.train.seed, **report.to_record(),
              "snapshot_id": snapshot_id,
              "termination": result.trace.termination}
    atomic_write_text(run_dir / "report.csv", report_csv(record))
    atomic_write_bytes(run_dir / "model.npz",
                       snapshot_blob(params, model, run_cfg, snapshot_id))
    return record


def aggregate_csv(records: list) -> str:
    """Mean and population standard deviation of every shared numeric
    metric, in first-report order (seed and ids excluded)."""
    skip = {"seed", "snapshot_id"}
    keys = [k for k in records[0]
            if k not in skip and all(isinstance(r.get(k), (int, float))
                                     and not isinstance(r.get(k), bool)
                                     for r in records)]
    rows = []
    for key in keys:
        values = np.array([float(r[key]) for r in records])
        rows.append([key, repr(float(values.mean())),
                     repr(float(values.std())), len(records)])
    return _csv_text(["metric", "mean", "std", "runs"], rows)


def cmd_run(args) -> int:
    config = load_run_config(args.config)
    config_dir = Path(args.config).resolve().parent
    if args.mode:
        config = replace(config,
                         objectives=replace(config.objectives, mode=args.mode))
    if args.seed is not None:
        config = replace(config, train=replace(config.train, seed=args.seed))
    if args.out:
        config = replace(config, output_dir=args.out)

    out_root = Path(config.output_dir)
    records = []
    for i in range(config.repeat_count):
        run_cfg = per_repeat(config, i)
        run_dir = out_root / f"run_{i:03d}"
        try:
            record = execute_run(run_cfg, run_dir, config_dir)
        except NumericError as err:
            pointer = getattr(err, "trace_path", "(no trace written)")
            print(f"numeric abort in repeat {i} "
                  f"(component={err.component}, iteration={err.iteration}): "
                  f"{err}\npartial trace: {pointer}", file=sys.stderr)
            return EXIT_NUMERIC
        records.append(record)
        print(f"run {i}: seed={record['seed']} "
              f"accuracy={record['accuracy']:.4f} ddp={record['ddp']:.4f} "
              f"deo={record['deo']:.4f}")
    atomic_write_text(out_root / "aggregate.csv", aggregate_csv(records))
    print(f"aggregate written: {out_root / 'aggregate.csv'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    config_dir = Path(args.config).resolve().parent
    snapshot_path = Path(args.snapshot)
    if not snapshot_path.exists():
        print(f"snapshot not found: {snapshot_path}", file=sys.stderr)
        return EXIT_SNAPSHOT
    snap = np.load(snapshot_path, allow_pickle=False)
    required = {"params", "model_kind", "input_dim", "hidden_dim",
                "output_classes", "mode", "split_seed", "dataset_seed"}
    missing = required - set(snap.files)
    if missing:
        print(f"snapshot {snapshot_path} lacks field(s) {sorted(missing)}",
              file=sys.stderr)
        return EXIT_SNAPSHOT

    model = ModelSpec(kind=str(snap["model_kind"][()]),
                      input_dim=int(snap["input_dim"]),
                      hidden_dim=int(snap["hidden_dim"]),
                      output_classes=int(snap["output_classes"]))
    params = np.asarray(snap["params"], dtype=np.float64)
    if params.shape != (n_params(model),):
        print(f"snapshot params have shape {params.shape}, model "
              f"{model.kind} expects ({n_params(model)},)", file=sys.stderr)
        return EXIT_SNAPSHOT

    dataset_cfg = config.dataset
    if dataset_cfg.kind == "synthetic":
        dataset_cfg = replace(dataset_cfg, seed=int(snap["dataset_seed"]))
    split_spec = replace(config.split, seed=int(snap["split_seed"]))
    _, _, test_ds = load_splits(dataset_cfg, split_spec, config_dir)
    if test_ds.features.shape[1] != model.input_dim:
        print(f"dataset encodes to {test_ds.features.shape[1]} features but "
              f"the snapshot's model expects {model.input_dim}",
              file=sys.stderr)
        return EXIT_SNAPSHOT

    mode = args.mode or str(snap["mode"][()])
    preds = threshold_scores(forward(model, params, test_ds.features))
    table, tag = evaluation_table(mode, test_ds)
    report = evaluate(preds, test_ds.labels, table, tag)
    out_path = (Path(args.out) if args.out
                else snapshot_path.parent / f"eval_{mode}.csv")
    atomic_write_text(out_path, report_csv(report.to_record()))
    print(f"evaluation written: {out_path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# trace-export
# --------------------------------------------------------------------------

TRACE_KEYS = ("t", "losses", "alpha", "strategy", "combined_norm")


def read_trace_records(path: Path):
    """Parse a trace stream; stop at the first damaged line."""
    records, warning = [], None
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if any(key not in record for key in TRACE_KEYS):
                    raise ValueError("missing trace keys")
            except ValueError:
                warning = (f"trace truncated at line {lineno}; exported "
                           f"{len(records)} complete records")
                break
            records.append(record)
    return records, warning


def render_figures(records, events, out_dir: Path):
    """Render the three diagnostic panels next to the series files.

    The figures are a convenience view of exactly the exported series;
    the delimited files remain the primary (byte-stable) artifacts.
    """
    if not records:
        return []
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [r["t"] for r in records]
    k = len(records[0]["losses"])
    written = []

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.plot(ts, [r["combined_norm"] for r in records], lw=1.2)
    positive = all(r["combined_norm"] > 0 for r in records)
    if positive:
        ax.set_yscale("log")
    for t_ev, name in events:
        ax.axvline(t_ev, color="0.6", ls="--", lw=0.8)
        ax.annotate(name, (t_ev, ax.get_ylim()[1]), fontsize=7,
                    rotation=90, va="top", ha="right")
    ax.set_xlabel("iteration")
    ax.set_ylabel("combined gradient norm")
    fig.tight_layout()
    fig.savefig(out_dir / "grad_norm.png", dpi=120)
    plt.close(fig)
    written.append("grad_norm.png")

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i in range(k):
        ax.plot(ts, [r["losses"][i] for r in records], lw=1.2,
                label=f"loss_{i}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective value")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "losses.png", dpi=120)
    plt.close(fig)
    written.append("losses.png")

    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for i in range(k):
        ax.plot(ts, [r["alpha"][i] for r in records], lw=1.2,
                label=f"alpha_{i}")
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective weight")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "alphas.png", dpi=120)
    plt.close(fig)
    written.append("alphas.png")
    return written


def cmd_trace_export(args) -> int:
    trace_path = Path(args.trace)
    if not trace_path.exists():
        print(f"trace not found: {trace_path}", file=sys.stderr)
        return EXIT_DATA
    records, warning = read_trace_records(trace_path)
    out_dir = Path(args.out)

    k = len(records[0]["losses"]) if records else 0
    norm_rows = [[r["t"], repr(float(r["combined_norm"]))] for r in records]
    loss_rows = [[r["t"], *[repr(float(v)) for v in r["losses"]]]
                 for r in records]
    alpha_rows = [[r["t"], *[repr(float(a)) for a in r["alpha"]]]
                  for r in records]
    events = []
    previous = None
    for r in records:
        if r["strategy"] != previous:
            events.append([r["t"], r["strategy"]])
            previous = r["strategy"]

    atomic_write_text(out_dir / "grad_norm.csv",
                      _csv_text(["t", "combined_norm"], norm_rows))
    atomic_write_text(out_dir / "losses.csv",
                      _csv_text(["t", *[f"loss_{i}" for i in range(k)]],
                                loss_rows))
    atomic_write_text(out_dir / "alphas.csv",
                      _csv_text(["t", *[f"alpha_{i}" for i in range(k)]],
                                alpha_rows))
    atomic_write_text(out_dir / "events.csv",
                      _csv_text(["t", "strategy"], events))
    if not args.no_figures:
        render_figures(records, events, out_dir)
    if warning:
        atomic_write_text(out_dir / "warnings.log", warning + "\n")
        print(warning, file=sys.stderr)
    print(f"exported {len(records)} records to {out_dir}")
    return EXIT_OK


# --------------------------------------------------------------------------
# datasets fetch
# --------------------------------------------------------------------------

GERMAN_COLUMNS = [
    "status", "duration", "credit_history", "purpose", "credit_amount",
    "savings", "employment_since", "installment_rate", "personal_status_sex",
    "other_debtors", "residence_since", "property", "age",
    "other_installments", "housing", "existing_credits", "job",
    "people_liable", "telephone", "foreign_worker", "credit_risk",
]

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num",
    "marital_status", "occupation", "relationship", "race", "sex",
    "capital_gain", "capital_loss", "hours_per_week", "native_country",
    "income",
]

HEART_COLUMNS = [
    "age", "sex", "cp", "trestbps", "chol", "fbs", "restecg", "thalach",
    "exang", "oldpeak", "slope", "ca", "thal", "disease",
]

COMPAS_COLUMNS = [
    "sex", "age", "race", "juv_fel_count", "juv_misd_count",
    "juv_other_count", "priors_count", "c_charge_degree", "two_year_recid",
]


def _rows_to_csv(header: list, rows: list) -> str:
    return _csv_text(header, rows)


def normalize_german(raw: str) -> str:
    """Whitespace-separated 21-field rows -> headered CSV, values verbatim."""
    rows = []
    for line in raw.splitlines():
        parts = line.split()
        if not parts:
            continue
        if len(parts) != len(GERMAN_COLUMNS):
            raise DataError(f"unexpected field count {len(parts)} in source "
                            f"row {line[:60]!r}")
        rows.append(parts)
    return _rows_to_csv(GERMAN_COLUMNS, rows)


def normalize_adult(raw: str) -> str:
    """Comma+space separated rows -> headered CSV with stripped cells."""
    rows = []
    for line in raw.splitlines():
        if not line.strip() or line.startswith("|"):
            continue
        parts = [cell.strip().rstrip(".") for cell in line.split(",")]
        if len(parts) != len(ADULT_COLUMNS):
            continue  # the source ends with a stray non-record line
        rows.append(parts)
    return _rows_to_csv(ADULT_COLUMNS, rows)


def normalize_heart(raw: str) -> str:
    """Numeric-coded rows -> headered CSV with readable sex and a binary
    disease label (source severity 1-4 collapses to 'yes')."""
    rows = []
    for line in raw.splitlines():
        parts = [cell.strip() for cell in line.split(",")]
        if len(parts) != 14:
            continue
        sex = {"1.0": "male", "0.0": "female", "1": "male", "0": "female"}.get(
            parts[1], parts[1])
        disease = "no" if parts[13] in ("0", "0.0") else "yes"
        if parts[13] == "?":
            disease = "?"
        rows.append(parts[:1] + [sex] + parts[2:13] + [disease])
    return _rows_to_csv(HEART_COLUMNS, rows)


def normalize_compas(raw: str) -> str:
    """Select the standard column subset and apply the usual screening
    filter (charge within 30 days, resolved recidivism flag, ordinary
    charge degrees)."""
    reader = csv.DictReader(io.StringIO(raw))
    rows = []
    for rec in reader:
        days = rec.get("days_b_screening_arrest", "")
        try:
            lag = float(days)
        except ValueError:
            continue
        if not -30 <= lag <= 30:
            continue
        if rec.get("is_recid") == "-1":
            continue
        if rec.get("c_charge_degree") not in ("F", "M"):
            continue
        rows.append([rec.get(col, "") for col in COMPAS_COLUMNS])
    return _rows_to_csv(COMPAS_COLUMNS, rows)


FETCHABLE = {
    "german": ("https://archive.ics.uci.edu/ml/machine-learning-databases/"
               "statlog/german/german.data", normalize_german),
    "adult": ("https://archive.ics.uci.edu/ml/machine-learning-databases/"
              "adult/adult.data", normalize_adult),
    "heart": ("https://archive.ics.uci.edu/ml/machine-learning-databases/"
              "heart-disease/processed.cleveland.data", normalize_heart),
    "compas": ("https://raw.githubusercontent.com/propublica/"
               "compas-analysis/master/compas-scores-two-years.csv",
               normalize_compas),
}


def cmd_datasets_fetch(args) -> int:
    url, normalize = FETCHABLE[args.name]
    dest_dir = Path(args.dest or os.environ.get(DATA_DIR_ENV, "datasets"))
    try:
        with urllib.request.urlopen(url, timeout=60) as response:
            raw = response.read().decode("utf-8", errors="replace")
    except (urllib.error.URLError, OSError, TimeoutError) as exc:
        print(f"could not download {args.name} from {url}: {exc}\n"
              f"If this machine is offline, download the file elsewhere, "
              f"run the matching normalize_{args.name} helper, and place "
              f"the result at {dest_dir / (args.name + '.csv')}.",
              file=sys.stderr)
        return EXIT_DATA
    try:
        text = normalize(raw)
    except ParetofairError as exc:
        print(f"downloaded {args.name} did not match the expected layout: "
              f"{exc}", file=sys.stderr)
        return EXIT_DATA
    out_path = dest_dir / f"{args.name}.csv"
    atomic_write_text(out_path, text)
    print(f"wrote {out_path} ({text.count(chr(10)) - 1} rows)")
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paretofair",
        description="Multi-objective fair training experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute a config's seeded repeats")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None,
                     help="override the base training seed")
    run.add_argument("--out", default=None, help="override the output directory")
    run.add_argument("--mode", choices=MODES, default=None,
                     help="override the fairness grouping mode")
    run.set_defaults(handler=cmd_run)

    ev = sub.add_parser("eval", help="re-score a saved model snapshot")
    ev.add_argument("--config", required=True)
    ev.add_argument("--snapshot", required=True)
    ev.add_argument("--mode", choices=MODES, default=None)
    ev.add_argument("--out", default=None)
    ev.set_defaults(handler=cmd_eval)

    tx = sub.add_parser("trace-export",
                        help="emit plot-data series from a trace stream")
    tx.add_argument("--trace", required=True)
    tx.add_argument("--out", required=True)
    tx.add_argument("--no-figures", action="store_true",
                    help="write only the delimited series files")
    tx.set_defaults(handler=cmd_trace_export)

    ds = sub.add_parser("datasets", help="dataset utilities")
    ds_sub = ds.add_subparsers(dest="datasets_command", required=True)
    fetch = ds_sub.add_parser("fetch", help="download and normalize a table")
    fetch.add_argument("--name", required=True, choices=sorted(FETCHABLE))
    fetch.add_argument("--dest", default=None,
                       help=f"target directory (default ${DATA_DIR_ENV} "
                            f"or ./datasets)")
    fetch.set_defaults(handler=cmd_datasets_fetch)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        field_note = f" (field: {exc.field})" if exc.field else ""
        print(f"config error{field_note}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SchemaError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric abort (component={exc.component}, "
              f"iteration={exc.iteration}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
