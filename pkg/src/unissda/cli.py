"""Command-line experiment runner.

Subcommands::

    unissda generate --config exp.json
    unissda run --config exp.json --methods pgpr,s_plus_t --seeds 0,1,2
    unissda diagnose OUT_DIR
    unissda aggregate OUT_DIR

Every number written by this module comes from :mod:`unissda.metrics`;
the runner only moves reports between files.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import serialization
from .datagen import (
    SETTINGS,
    SPLITS,
    SyntheticConfig,
    class_groups,
    default_group_counts,
    make_benchmark,
)
from .exceptions import ConfigError, DataError, NumericalAbort, UniSSDAError
from .metrics import (
    CSV_COLUMNS,
    CSV_SCHEMA_VERSION,
    NUMERIC_FIELDS,
    MetricsReport,
    aggregate_runs,
    evaluate,
)
from .train import METHODS, TrainConfig, TrainHistory, TrainingData, run

log = logging.getLogger("unissda")

OUTPUT_ENV = "UNISSDA_OUTPUT_DIR"
DIAGNOSTIC_COLUMNS = (
    "iteration",
    "private_as_common_rate",
    "target_private_accuracy",
    "predicted_private_fraction",
    "pseudo_label_accuracy",
)
AGGREGATE_SPLIT = "inductive_test"


@dataclass
class ExperimentConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    setting: str = "open_partial"
    # None derives counts from the setting (6/3/3 for open_partial on 12 classes)
    group_counts: dict | None = None
    k_shot: int = 3
    train: TrainConfig = field(default_factory=TrainConfig)
    methods: list = field(default_factory=lambda: list(METHODS))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "results"

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            try:
                self.synthetic = SyntheticConfig(**self.synthetic)
            except TypeError as exc:
                raise ConfigError(f"synthetic: {exc}") from exc
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        if self.setting not in SETTINGS:
            raise ConfigError(f"unknown setting {self.setting!r}; choose from {SETTINGS}")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        self.seeds = [int(s) for s in self.seeds]
        if not self.methods:
            raise ConfigError("methods must be nonempty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {METHODS}")
        if self.k_shot < 0:
            raise ConfigError("k_shot must be nonnegative")

    @property
    def counts(self) -> dict:
        if self.group_counts is None:
            return default_group_counts(self.setting, self.synthetic.num_classes_total)
        return dict(self.group_counts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown experiment config fields: {sorted(unknown)}")
        return cls(**d)


def load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    if os.environ.get(OUTPUT_ENV):
        raw["output_dir"] = os.environ[OUTPUT_ENV]
    # flags win over both the file and the environment
    if getattr(args, "seeds", None):
        raw["seeds"] = _int_list(args.seeds)
    if getattr(args, "methods", None):
        raw["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "setting", None):
        # counts written for another setting would not fit the new one
        if raw.get("setting", "open_partial") != args.setting:
            raw.pop("group_counts", None)
        raw["setting"] = args.setting
    if getattr(args, "out", None):
        raw["output_dir"] = args.out
    return ExperimentConfig.from_dict(raw)


def _int_list(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds expects comma-separated integers, got {text!r}") from exc


# -- datasets ---------------------------------------------------------------

def _data_dir(cfg, seed):
    return Path(cfg.output_dir) / "data" / cfg.setting / f"seed_{seed}"


def build_benchmark(cfg: ExperimentConfig, seed: int):
    synthetic = SyntheticConfig(**{**asdict(cfg.synthetic), "seed": seed})
    return make_benchmark(synthetic, cfg.setting, cfg.counts, k=cfg.k_shot)


def cmd_generate(cfg: ExperimentConfig, dry_run=False) -> dict:
    """Write source/target datasets per seed plus ``manifest.json``."""
    entries = []
    label_space = None
    for seed in cfg.seeds:
        src, trg, label_space = build_benchmark(cfg, seed)
        d = _data_dir(cfg, seed)
        entry = {
            "seed": seed,
            "source": str(d / "source.bin"),
            "target": str(d / "target.bin"),
            "source_digest": src.digest(),
            "target_digest": trg.digest(),
            "split_digests": {s: trg.select(split=s).digest() for s in SPLITS},
        }
        entries.append(entry)
        if not dry_run:
            _mkdir(d)
            _write(serialization.write_binary, src, entry["source"])
            _write(serialization.write_binary, trg, entry["target"])
    groups = class_groups(label_space)
    manifest = {
        "label_space": label_space.to_dict(),
        "groups": groups.as_dict(),
        "group_sizes": {k: len(v) for k, v in groups.as_dict().items()},
        "k_shot": cfg.k_shot,
        "synthetic": asdict(cfg.synthetic),
        "csv_schema_version": CSV_SCHEMA_VERSION,
        "csv_columns": list(CSV_COLUMNS),
        "datasets": entries,
    }
    if dry_run:
        print(json.dumps(manifest, indent=2))
    else:
        path = Path(cfg.output_dir) / "manifest.json"
        _write(lambda text, p: Path(p).write_text(text), json.dumps(manifest, indent=2), path)
    return manifest


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UniSSDAError(f"cannot create {path}: {exc}") from exc


def _write(writer, obj, path):
    try:
        writer(obj, path)
    except OSError as exc:
        raise UniSSDAError(f"cannot write {path}: {exc}") from exc


def _load_or_build(cfg, seed):
    d = _data_dir(cfg, seed)
    src_path, trg_path = d / "source.bin", d / "target.bin"
    src, trg, label_space = build_benchmark(cfg, seed)
    if src_path.exists() and trg_path.exists():
        on_disk = serialization.read_binary(src_path), serialization.read_binary(trg_path)
        if not (on_disk[0].equals(src) and on_disk[1].equals(trg)):
            raise DataError(f"datasets under {d} do not match the config; regenerate them")
    return src, trg, label_space


# -- runs -------------------------------------------------------------------

def grid(cfg: ExperimentConfig) -> list[tuple[str, str, int]]:
    return [(m, cfg.setting, s) for m in cfg.methods for s in cfg.seeds]


def run_dir(cfg, method, seed) -> Path:
    return Path(cfg.output_dir) / "runs" / cfg.setting / method / f"seed_{seed}"


def run_one(cfg: ExperimentConfig, method: str, seed: int) -> str:
    """Train and evaluate one grid cell; returns ``"ok"`` or ``"aborted"``."""
    out = run_dir(cfg, method, seed)
    _mkdir(out)
    src, trg, label_space = _load_or_build(cfg, seed)
    data = TrainingData.from_datasets(src, trg, label_space)
    tcfg = TrainConfig.from_dict({**asdict(cfg.train), "method": method, "seed": seed})
    meta = {"method": method, "setting": cfg.setting, "seed": seed}
    (out / "config.json").write_text(json.dumps(tcfg.to_dict(), indent=2, sort_keys=True))
    for stale in ("reports.jsonl", "aborted.json"):
        (out / stale).unlink(missing_ok=True)
    try:
        model, history, trainer = run(tcfg, data, return_trainer=True)
    except NumericalAbort as exc:
        log.warning("run %s aborted: %s", meta, exc)
        record = {**meta, "error": str(exc), "snapshot": exc.snapshot}
        (out / "aborted.json").write_text(json.dumps(record, sort_keys=True, default=str))
        return "aborted"
    history.to_jsonl(out / "history.jsonl")
    reports = [
        evaluate(model, data.test, data.groups, split_kind="inductive_test", meta=meta),
        evaluate(model, data.unlabeled_dataset(), data.groups,
                 split_kind="transductive_unlabeled_train", meta=meta),
    ]
    with open(out / "reports.jsonl", "w") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
    (out / "model.bin").write_bytes(serialization.params_to_bytes(model.arrays()))
    return "ok"


def _run_cell(args):
    cfg_dict, method, seed = args
    return run_one(ExperimentConfig.from_dict(cfg_dict), method, seed)


def cmd_run(cfg: ExperimentConfig, dry_run=False, jobs=1) -> dict:
    cells = grid(cfg)
    if dry_run:
        print(json.dumps({"config": cfg.to_dict(), "runs": cells}, indent=2))
        return {"runs": cells}
    _mkdir(cfg.output_dir)
    (Path(cfg.output_dir) / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    work = [(cfg.to_dict(), m, s) for m, _, s in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            status = list(pool.map(_run_cell, work))
    else:
        status = [_run_cell(w) for w in work]
    aggregate_dir(cfg.output_dir)
    n_aborted = status.count("aborted")
    if n_aborted == len(status):
        raise NumericalAbort("every run aborted on a non-finite loss", {"runs": len(status)})
    if n_aborted:
        log.warning("%d of %d runs aborted and were excluded from aggregation",
                    n_aborted, len(status))
    return {"runs": cells, "status": status}


# -- aggregation --------------------------------------------------------------

def aggregate_header():
    cols = ["method", "setting", "split_kind", "n_runs", "n_aborted"]
    for name in NUMERIC_FIELDS:
        cols += [f"{name}_mean", f"{name}_std"]
    return cols


def _fmt(v):
    return repr(float(v))


def aggregate_dir(output_dir, split_kind=AGGREGATE_SPLIT) -> Path:
    """Rebuild ``aggregate.csv`` from the per-run report files alone."""
    root = Path(output_dir) / "runs"
    if not root.is_dir():
        raise DataError(f"no runs found under {root}")
    cells = {}
    for path in sorted(root.glob("*/*/seed_*/reports.jsonl")):
        with open(path) as fh:
            for line in fh:
                r = MetricsReport.from_dict(json.loads(line))
                if r.split_kind == split_kind:
                    key = (r.meta["method"], r.meta["setting"])
                    cells.setdefault(key, []).append(r)
    aborted = {}
    for path in sorted(root.glob("*/*/seed_*/aborted.json")):
        rec = json.loads(path.read_text())
        key = (rec["method"], rec["setting"])
        aborted[key] = aborted.get(key, 0) + 1
    out = Path(output_dir) / "aggregate.csv"
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["# csv_schema_version", CSV_SCHEMA_VERSION])
        w.writerow(aggregate_header())
        order = {m: i for i, m in enumerate(METHODS)}
        keys = sorted(set(cells) | set(aborted), key=lambda k: (order.get(k[0], 99), k))
        for key in keys:
            reports = cells.get(key, [])
            row = [key[0], key[1], split_kind, len(reports), aborted.get(key, 0)]
            stats = aggregate_runs(reports) if reports else {}
            for name in NUMERIC_FIELDS:
                s = stats.get(name, {"mean": float("nan"), "std": float("nan")})
                row += [_fmt(s["mean"]), _fmt(s["std"])]
            w.writerow(row)
    return out


def read_aggregate(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# -- diagnostics --------------------------------------------------------------

def cmd_diagnose(output_dir) -> list[Path]:
    """Per-iteration bias curves for every completed run under ``output_dir``."""
    root = Path(output_dir)
    run_dirs = sorted(p.parent for p in root.glob("**/reports.jsonl"))
    if (root / "reports.jsonl").exists():
        run_dirs = [root]
    if not run_dirs:
        raise DataError(f"no completed runs under {root}")
    written = []
    for d in run_dirs:
        hist_path = d / "history.jsonl"
        if not hist_path.exists():
            raise DataError(f"missing training history {hist_path}")
        history = TrainHistory.from_jsonl(hist_path)
        out = d / "diagnostics.csv"
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DIAGNOSTIC_COLUMNS)
            for rec in history.records:
                w.writerow(["" if rec.get(c) is None else rec[c] for c in DIAGNOSTIC_COLUMNS])
        written.append(out)
    return written


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unissda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("generate", "run"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seeds", help="comma-separated seeds")
        p.add_argument("--setting", choices=SETTINGS)
        p.add_argument("--out", help="output directory")
        p.add_argument("--dry-run", action="store_true")
        if name == "run":
            p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
            p.add_argument("--jobs", type=int, default=1)
    for name in ("diagnose", "aggregate"):
        p = sub.add_parser(name)
        p.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "generate":
            cmd_generate(load_config(args), args.dry_run)
        elif args.command == "run":
            cmd_run(load_config(args), args.dry_run, args.jobs)
        elif args.command == "diagnose":
            for path in cmd_diagnose(args.run_dir):
                print(path)
        else:
            print(aggregate_dir(args.run_dir))
    except UniSSDAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
