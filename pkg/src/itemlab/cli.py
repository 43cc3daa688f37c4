"""Command line entry point: ``itemlab <subcommand>``.

Subcommands
    gen-data      write clean train/test CSVs for the blob spec in a config
    inject-noise  corrupt the labels of a dataset CSV per the config noise spec
    train         run one configuration; writes metrics.csv, summary.json,
                  checkpoint.bin and config.txt
    ablate        run arms x seeds from a manifest and tabulate mean +- std
    report        merge metrics CSVs into one long-format series file

Exit codes: 0 success, 1 configuration or input error, 2 runtime failure.
``ITEM_LOG_LEVEL`` (error, info, debug) controls stderr logging.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .config import MODES, ConfigError, config_from_pairs, parse_pairs
from .data import CsvFormatError, NoiseSpec, SpecError, empirical_transition, inject_noise, load_csv, save_csv
from .nn import NonFiniteLossError
from .rng import check_seed
from .trainer import json_safe, build_datasets, fmt, run_item, write_outputs

log = logging.getLogger("itemlab")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
REPORT_COLUMNS = ["run_id", "epoch", "metric", "class", "value"]
ABLATION_COLUMNS = [
    "arm",
    "runs",
    "final_accuracy_mean",
    "final_accuracy_std",
    "best_accuracy_mean",
    "best_accuracy_std",
    "macro_f_mean",
    "macro_f_std",
    "min_class_f_mean",
    "min_class_f_std",
    "imbalance_mean",
    "imbalance_std",
]


class InputError(ValueError):
    """A bad path or file handed to a subcommand."""


def _read_config(path, seed=None, extra=None):
    """Config file plus optional ``--seed`` override; ``extra`` receives non-config keys."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    pairs = parse_pairs(text, str(path))
    if extra is not None:
        for key in [k for k in pairs if k.startswith("ablate.")]:
            extra[key] = pairs.pop(key)
    config = config_from_pairs(pairs)
    if seed is not None:
        try:
            config = replace(config, seed=check_seed(seed))
        except ValueError as exc:
            raise ConfigError("train.seed", str(exc)) from None
    return config


def dataset_hash(dataset):
    """SHA-256 over features, noisy labels and true labels."""
    h = hashlib.sha256()
    for arr in (dataset.features, dataset.noisy_labels, dataset.true_labels):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def cmd_gen_data(args):
    config = _read_config(args.config, args.seed)
    if config.data_source != "blobs":
        raise ConfigError("data.source", "gen-data needs data.source = blobs")
    train, test = build_datasets(replace(config, noise_ratio=0.0))
    os.makedirs(args.out, exist_ok=True)
    save_csv(train, os.path.join(args.out, "train.csv"))
    save_csv(test, os.path.join(args.out, "test.csv"))
    log.info("wrote %d train and %d test rows to %s", len(train), len(test), args.out)
    return EXIT_OK


def cmd_inject_noise(args):
    config = _read_config(args.config, args.seed)
    if not os.path.exists(args.input):
        raise InputError(f"{args.input}: no such file")
    dataset = load_csv(args.input)
    noisy = inject_noise(dataset, NoiseSpec(config.noise_kind, config.noise_ratio, config.seed))
    os.makedirs(args.out, exist_ok=True)
    save_csv(noisy, os.path.join(args.out, "noisy.csv"))
    flipped = noisy.noisy_labels != noisy.true_labels
    stats = {
        "kind": config.noise_kind,
        "ratio": config.noise_ratio,
        "seed": config.seed,
        "rows": len(noisy),
        "realized_rate": float(flipped.mean()),
        "transition": empirical_transition(noisy.true_labels, noisy.noisy_labels, noisy.class_count).tolist(),
    }
    with open(os.path.join(args.out, "noise.json"), "w") as fh:
        json.dump(stats, fh, sort_keys=True, indent=2)
        fh.write("\n")
    log.info("realized noise rate %.4f over %d rows", stats["realized_rate"], len(noisy))
    return EXIT_OK


def cmd_train(args):
    config = _read_config(args.config, args.seed)
    metrics, trainer = run_item(config)
    write_outputs(metrics, trainer, args.out)
    final = metrics.records[-1]
    log.info("final test accuracy %.4f, macro selection F %.4f", final.test_accuracy, final.macro_f)
    return EXIT_OK


@dataclass
class ExperimentManifest:
    """Base config expanded into arms x seeds runs under ``out_dir``."""

    base: object
    arms: tuple
    seeds: tuple
    out_dir: str

    def __post_init__(self):
        if not self.arms:
            raise ConfigError("ablate.arms", "need at least one arm")
        for arm in self.arms:
            if arm not in MODES:
                raise ConfigError("ablate.arms", f"unknown arm {arm!r}; expected one of {MODES}")
        if len(set(self.arms)) != len(self.arms):
            raise ConfigError("ablate.arms", "arms must be unique")
        if not self.seeds:
            raise ConfigError("ablate.seeds", "need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("ablate.seeds", "seeds must be unique")
        for s in self.seeds:
            try:
                check_seed(s)
            except ValueError as exc:
                raise ConfigError("ablate.seeds", str(exc)) from None
        if not self.out_dir:
            raise ConfigError("out", "output directory must be a nonempty path")

    def runs(self):
        """``(run_id, config)`` for every arm and seed, arms outermost."""
        return [
            (f"{arm}-seed{seed}", replace(self.base, mode=arm, seed=seed))
            for arm in self.arms
            for seed in self.seeds
        ]


def load_manifest(path, out_dir, seed=None):
    """A config file with two extra keys, ``ablate.arms`` and ``ablate.seeds``.

    ``--seed`` replaces the seed list with that single seed.
    """
    extra = {}
    base = _read_config(path, extra=extra)
    unknown = set(extra) - {"ablate.arms", "ablate.seeds"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown configuration key")
    arms = tuple(a.strip() for a in extra.get("ablate.arms", "").split(",") if a.strip())
    try:
        seeds = tuple(int(s) for s in extra.get("ablate.seeds", "0").split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError("ablate.seeds", str(exc)) from None
    if seed is not None:
        seeds = (seed,)
    return ExperimentManifest(base, arms, seeds, out_dir)


def _run_one(run_id, config, out_dir):
    train, test = build_datasets(config)
    digest = dataset_hash(train) + ":" + dataset_hash(test)
    metrics, trainer = run_item(config, (train, test))
    write_outputs(metrics, trainer, os.path.join(out_dir, run_id))
    return run_id, digest, metrics.summary()


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def ablation_table(manifest, summaries):
    """Rows of mean and sample std per arm, in manifest arm order."""
    rows = []
    for arm in manifest.arms:
        runs = [summaries[f"{arm}-seed{s}"] for s in manifest.seeds]
        row = {"arm": arm, "runs": len(runs)}
        for name, key in (
            ("final_accuracy", "final_test_accuracy"),
            ("best_accuracy", "best_test_accuracy"),
            ("macro_f", "final_macro_selection_f"),
            ("min_class_f", "final_min_class_selection_f"),
            ("imbalance", "final_imbalance_ratio"),
        ):
            row[f"{name}_mean"], row[f"{name}_std"] = _mean_std([r[key] for r in runs])
        rows.append(row)
    return rows


def cmd_ablate(args):
    manifest = load_manifest(args.manifest, args.out, args.seed)
    os.makedirs(manifest.out_dir, exist_ok=True)
    runs = manifest.runs()
    log.info("ablation: %d arms x %d seeds = %d runs", len(manifest.arms), len(manifest.seeds), len(runs))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_run_one, rid, cfg, manifest.out_dir) for rid, cfg in runs]
            results = [f.result() for f in futures]
    else:
        results = [_run_one(rid, cfg, manifest.out_dir) for rid, cfg in runs]
    summaries = {rid: summary for rid, _, summary in results}
    hashes = {}
    for (rid, cfg), (_, digest, _) in zip(runs, results):
        seen = hashes.setdefault(cfg.seed, digest)
        if seen != digest:
            raise RuntimeError(f"run {rid} saw different data than the other arms of seed {cfg.seed}")
    rows = ablation_table(manifest, summaries)
    with open(os.path.join(manifest.out_dir, "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for row in rows:
            w.writerow([row["arm"], row["runs"]] + [fmt(row[c]) for c in ABLATION_COLUMNS[2:]])
    table = {
        "arms": list(manifest.arms),
        "seeds": list(manifest.seeds),
        "rows": rows,
        "dataset_hashes": {str(s): h for s, h in hashes.items()},
        "runs": {rid: {"final_test_accuracy": s["final_test_accuracy"]} for rid, s in summaries.items()},
    }
    with open(os.path.join(manifest.out_dir, "ablation.json"), "w") as fh:
        json.dump(json_safe(table), fh, sort_keys=True, indent=2, allow_nan=False)
        fh.write("\n")
    for row in rows:
        log.info("%-22s %.4f +- %.4f", row["arm"], row["final_accuracy_mean"], row["final_accuracy_std"])
    return EXIT_OK


# metrics.csv column -> report metric name, split by row kind
_CLASS_SERIES = {
    "selected": "selected_count",
    "precision": "selection_precision",
    "recall": "selection_recall",
    "fscore": "selection_fscore",
    "test_accuracy": "class_accuracy",
}
_SUMMARY_SERIES = {
    "selected": "selected_count",
    "fscore": "macro_selection_fscore",
    "test_accuracy": "test_accuracy",
    "train_loss": "train_loss",
    "imbalance_ratio": "imbalance_ratio",
}


def report_rows(run_id, path):
    """Long-format rows ``(run_id, epoch, metric, class, value)`` from one metrics CSV."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"epoch", "class", *_CLASS_SERIES, *_SUMMARY_SERIES} - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{path}: not a metrics CSV (missing {', '.join(sorted(missing))})")
        for rec in reader:
            series = _SUMMARY_SERIES if rec["class"] == "all" else _CLASS_SERIES
            for column, metric in series.items():
                if rec[column] != "":
                    rows.append((run_id, int(rec["epoch"]), metric, rec["class"], rec[column]))
    return rows


def cmd_report(args):
    seen = {}
    for path in args.metrics:
        if not os.path.isfile(path):
            raise InputError(f"{path}: no such file")
        run_id = os.path.basename(os.path.dirname(os.path.abspath(path)))
        if run_id in seen:
            raise InputError(f"{path}: run id {run_id!r} already used by {seen[run_id]}")
        seen[run_id] = path
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "report.csv")
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for run_id, path in seen.items():
            w.writerows(report_rows(run_id, path))
    log.info("wrote %s", out_path)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors; 2 is reserved for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="itemlab", description="Noisy-label training experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the 64-bit seed")

    p = sub.add_parser("gen-data", help="write clean blob train/test CSVs")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("inject-noise", help="corrupt labels of a dataset CSV")
    p.add_argument("input", help="dataset CSV")
    common(p)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("train", help="run one configuration")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run arms x seeds and tabulate")
    p.add_argument("manifest", help="config file with ablate.arms and ablate.seeds")
    common(p, config=False)
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge metrics CSVs into long format")
    p.add_argument("metrics", nargs="+", help="metrics.csv files; run id is the parent directory name")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging():
    name = os.environ.get("ITEM_LOG_LEVEL", "info").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError("ITEM_LOG_LEVEL", f"expected one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        return args.func(args)
    except (ConfigError, SpecError, CsvFormatError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, FloatingPointError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
