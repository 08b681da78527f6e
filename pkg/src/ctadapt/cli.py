"""Command-line harness: generate | train-base | experiment | report | ingest.

All commands read one JSON config (every tunable has a default, unknown
keys are rejected) plus ``--seed`` / ``--out`` / ``--set key=value``
overrides, validate it completely, and only then touch the filesystem.
Exit codes: 0 success, 2 config/usage error, 3 data error, 4 numeric
error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import struct
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .errors import ConfigError, CtadaptError, DataError
from .imaging import SelectionParams
from .manifest import ingest_directory, load_dataset, save_dataset
from .metrics import Method, build_report, load_report, render_csv, render_table, write_report
from .nncore import Checkpoint, TrainConfig, TrainingStage, load_checkpoint, save_checkpoint
from .online import BaseBundle, OnlineConfig, run_baseline, run_online, write_events
from .pipeline import (
    AggregationMode,
    CascadeModels,
    build_slice_sets,
    pretext_pretrain,
    train_cascade,
)
from .synthgen import ShiftParams, gen_suite

logger = logging.getLogger(__name__)

CASCADE_META_VERSION = 1
CASCADE_META_NAME = "cascade.json"

DEFAULT_CONFIG = {
    "seed": 11,
    "image_side": 32,
    "data_dir": "data",
    "models_dir": "models",
    "reports_dir": "reports",
    "healthy_factor": 5.0,
    "aggregation_mode": "MeanSoftmax",
    "slices_per_patient": [9, 12],
    "lungless_slices_per_patient": 2,
    "counts": None,  # per-set patient counts; None -> generator defaults
    "shifts": None,  # per-set shift overrides; None -> generator defaults
    "selection": {
        "inner_fraction": 0.6,
        "dark_threshold": 0.3,
    },
    # Transfer training profile for slice models A and B (and the online
    # retrains, which must train "the same way").
    "train": {
        "learning_rate": 0.005,
        "momentum": 0.9,
        "epochs": 30,
        "batch_size": 32,
        "max_grad_norm": 2.0,
    },
    # Flip-pretext pretraining profile.
    "pretext": {
        "learning_rate": 0.005,
        "momentum": 0.9,
        "epochs": 15,
        "batch_size": 32,
        "max_grad_norm": 5.0,
    },
    "online": {
        "confidence_threshold": 0.9,
        "quarters": 4,
        "cumulative": True,
        "pseudo_to_validation": False,
    },
}

EXPERIMENTS = {
    "Exp1": (Method.BASELINE, "test1"),
    "Exp2": (Method.BASELINE, "test2"),
    "Exp3": (Method.BASELINE, "test3"),
    "Exp4": (Method.ONLINE, "test1"),
    "Exp5": (Method.ONLINE, "test2"),
    "Exp6": (Method.ONLINE, "test3"),
}


# --- config loading -----------------------------------------------------------


def _merge_config(defaults: dict, user: dict, path: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and defaults[key] is not None:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where} must be an object")
            merged[key] = _merge_config(defaults[key], value, where)
        else:
            merged[key] = value
    return merged


def _parse_set_override(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw  # bare strings are fine: --set aggregation_mode=SliceCount
    return key.strip(), value


def _apply_override(config: dict, key: str, value) -> None:
    parts = key.split(".")
    node = config
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {key}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {key}")
    if isinstance(node[leaf], dict) and not isinstance(value, dict):
        raise ConfigError(f"config key {key} is an object; override its fields instead")
    node[leaf] = value


def load_config(args) -> dict:
    user = {}
    if args.config is not None:
        p = Path(args.config)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {p} must hold a JSON object")
    config = _merge_config(DEFAULT_CONFIG, user)
    for item in args.set or []:
        key, value = _parse_set_override(item)
        _apply_override(config, key, value)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.out is not None:
        base = Path(args.out)
        config["data_dir"] = str(base / "data")
        config["models_dir"] = str(base / "models")
        config["reports_dir"] = str(base / "reports")
    return config


# --- config -> domain values (validates everything up front) ------------------


def _selection(config) -> SelectionParams:
    try:
        return SelectionParams(**config["selection"])
    except (CtadaptError, TypeError) as exc:
        raise ConfigError(f"bad selection params: {exc}") from exc


def _train_cfg(config, which: str, seed: int) -> TrainConfig:
    try:
        return TrainConfig(seed=seed, **config[which])
    except (CtadaptError, TypeError) as exc:
        raise ConfigError(f"bad {which} training params: {exc}") from exc


def _online_cfg(config) -> OnlineConfig:
    try:
        return OnlineConfig(**config["online"])
    except (CtadaptError, TypeError) as exc:
        raise ConfigError(f"bad online params: {exc}") from exc


def _aggregation(config) -> AggregationMode:
    try:
        return AggregationMode(config["aggregation_mode"])
    except ValueError:
        raise ConfigError(
            f"aggregation_mode must be one of "
            f"{[m.value for m in AggregationMode]}, got {config['aggregation_mode']!r}"
        ) from None


_SET_NAMES = ("train", "val", "test1", "test2", "test3")


def _check_set_names(mapping: dict, what: str) -> None:
    for name in mapping:
        if name not in _SET_NAMES:
            raise ConfigError(f"unknown dataset name {name!r} in {what}")


def _shifts(config) -> dict | None:
    if config["shifts"] is None:
        return None
    _check_set_names(config["shifts"], "shifts")
    out = {}
    for name, params in config["shifts"].items():
        try:
            out[name] = ShiftParams(**params)
        except TypeError as exc:
            raise ConfigError(f"bad shift params for {name!r}: {exc}") from exc
    return out


def _counts(config) -> dict | None:
    if config["counts"] is None:
        return None
    _check_set_names(config["counts"], "counts")
    return config["counts"]


def _healthy_factor(config) -> float:
    factor = config["healthy_factor"]
    if not isinstance(factor, (int, float)) or factor <= 0:
        raise ConfigError(f"healthy_factor must be a positive number, got {factor!r}")
    return float(factor)


def validate_config(config) -> None:
    """Construct every domain value once so bad configs fail before any side effect."""
    if not isinstance(config["seed"], int) or isinstance(config["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {config['seed']!r}")
    if not isinstance(config["image_side"], int) or config["image_side"] < 8:
        raise ConfigError(f"image_side must be an integer >= 8, got {config['image_side']!r}")
    spp = config["slices_per_patient"]
    if (
        not isinstance(spp, (list, tuple))
        or len(spp) != 2
        or not all(isinstance(v, int) for v in spp)
        or not (1 <= spp[0] <= spp[1])
    ):
        raise ConfigError(f"slices_per_patient must be [lo, hi] with 1 <= lo <= hi, got {spp!r}")
    if not isinstance(config["lungless_slices_per_patient"], int) or config["lungless_slices_per_patient"] < 0:
        raise ConfigError("lungless_slices_per_patient must be an integer >= 0")
    for key in ("data_dir", "models_dir", "reports_dir"):
        if not isinstance(config[key], str) or not config[key]:
            raise ConfigError(f"{key} must be a non-empty path string")
    _selection(config)
    _train_cfg(config, "train", config["seed"])
    _train_cfg(config, "pretext", config["seed"])
    _online_cfg(config)
    _aggregation(config)
    _healthy_factor(config)
    _shifts(config)
    _counts(config)


# --- commands -----------------------------------------------------------------


def cmd_generate(config) -> int:
    seed = config["seed"]
    shifts = _shifts(config)
    lo, hi = config["slices_per_patient"]
    suite = gen_suite(
        seed,
        image_side=config["image_side"],
        counts=_counts(config),
        shifts=shifts,
        slices_per_patient=(lo, hi),
        lungless_slices_per_patient=config["lungless_slices_per_patient"],
    )
    data_dir = Path(config["data_dir"])
    for name, patients in suite.items():
        manifest_path = save_dataset(patients, data_dir / name)
        logger.info("wrote %s (%d patients)", manifest_path, len(patients))
    print(f"generated suite (seed {seed}) under {data_dir}")
    return 0


def _load_set(config, name: str):
    path = Path(config["data_dir"]) / name
    if not (path / "manifest.json").exists():
        raise DataError(
            f"dataset {name!r} not found under {config['data_dir']} (run generate first)"
        )
    return load_dataset(path)


def _pretext_images(patients, selection):
    from .imaging import select_large_lung_slices

    return [p.slices[i] for p in patients for i in select_large_lung_slices(p.slices, selection)]


def cmd_train_base(config) -> int:
    seed = config["seed"]
    selection = _selection(config)
    pretext_cfg = _train_cfg(config, "pretext", seed)
    transfer_cfg = _train_cfg(config, "train", seed)
    healthy_factor = _healthy_factor(config)
    aggregation = _aggregation(config)

    train_patients = _load_set(config, "train")
    val_patients = _load_set(config, "val")
    train_sets = build_slice_sets(train_patients, selection)
    val_sets = build_slice_sets(val_patients, selection)

    pretext = pretext_pretrain(_pretext_images(train_patients, selection), pretext_cfg)
    cascade = train_cascade(
        pretext,
        (train_sets.a_images, train_sets.a_labels),
        (train_sets.b_images, train_sets.b_labels),
        (val_sets.a_images, val_sets.a_labels),
        (val_sets.b_images, val_sets.b_labels),
        transfer_cfg,
        healthy_factor=healthy_factor,
        aggregation_mode=aggregation,
    )
    logger.info(
        "multipliers: healthy %.6f (target %d), b %.6f (target %d)",
        cascade.mult_healthy,
        cascade.mult_healthy_target,
        cascade.mult_b,
        cascade.mult_b_target,
    )

    models_dir = Path(config["models_dir"])
    models_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(pretext, models_dir / "pretext.ckpt")
    rng_state = struct.pack("<Q", seed % 2**64)
    save_checkpoint(
        Checkpoint(cascade.model_a, TrainingStage.POST_TRANSFER, rng_state),
        models_dir / "model_a.ckpt",
    )
    save_checkpoint(
        Checkpoint(cascade.model_b, TrainingStage.POST_TRANSFER, rng_state),
        models_dir / "model_b.ckpt",
    )
    meta = {
        "format_version": CASCADE_META_VERSION,
        "seed": seed,
        "healthy_factor": cascade.healthy_factor,
        "aggregation_mode": cascade.aggregation_mode.value,
        "mult_healthy": cascade.mult_healthy,
        "mult_healthy_target": cascade.mult_healthy_target,
        "mult_b": cascade.mult_b,
        "mult_b_target": cascade.mult_b_target,
        "pretext_checkpoint": "pretext.ckpt",
        "model_a_checkpoint": "model_a.ckpt",
        "model_b_checkpoint": "model_b.ckpt",
        "pretext_train": dict(config["pretext"]),
        "transfer_train": dict(config["train"]),
    }
    (models_dir / CASCADE_META_NAME).write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n"
    )
    print(f"trained base cascade (seed {seed}) under {models_dir}")
    return 0


def load_cascade(models_dir) -> tuple[CascadeModels, Checkpoint, dict]:
    """Read back the three checkpoints plus metadata written by train-base."""
    models_dir = Path(models_dir)
    meta_path = models_dir / CASCADE_META_NAME
    if not meta_path.exists():
        raise DataError(f"cascade metadata not found: {meta_path} (run train-base first)")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != CASCADE_META_VERSION:
        raise DataError(
            f"unsupported cascade metadata version {meta.get('format_version')!r}"
        )
    pretext = load_checkpoint(models_dir / meta["pretext_checkpoint"])
    model_a = load_checkpoint(models_dir / meta["model_a_checkpoint"]).model
    model_b = load_checkpoint(models_dir / meta["model_b_checkpoint"]).model
    cascade = CascadeModels(
        model_a=model_a,
        model_b=model_b,
        healthy_factor=meta["healthy_factor"],
        mult_healthy=meta["mult_healthy"],
        mult_healthy_target=meta["mult_healthy_target"],
        mult_b=meta["mult_b"],
        mult_b_target=meta["mult_b_target"],
        aggregation_mode=AggregationMode(meta["aggregation_mode"]),
    )
    return cascade, pretext, meta


def cmd_experiment(experiment_id: str, config) -> int:
    if experiment_id not in EXPERIMENTS:
        raise ConfigError(
            f"unknown experiment {experiment_id!r}; expected one of {sorted(EXPERIMENTS)}"
        )
    method, set_name = EXPERIMENTS[experiment_id]
    selection = _selection(config)
    online_cfg = _online_cfg(config)
    transfer_cfg = _train_cfg(config, "train", config["seed"])

    cascade, pretext, _ = load_cascade(config["models_dir"])
    test_patients = _load_set(config, set_name)

    reports_dir = Path(config["reports_dir"])
    reports_dir.mkdir(parents=True, exist_ok=True)

    if method is Method.BASELINE:
        result = run_baseline(test_patients, cascade, selection)
        per_quarter = None
        harvest_counts = None
    else:
        train_patients = _load_set(config, "train")
        val_patients = _load_set(config, "val")
        train_sets = build_slice_sets(train_patients, selection)
        val_sets = build_slice_sets(val_patients, selection)
        bundle = BaseBundle(
            cascade=cascade,
            pretext=pretext,
            train_a=(train_sets.a_images, train_sets.a_labels),
            train_b=(train_sets.b_images, train_sets.b_labels),
            val_a=(val_sets.a_images, val_sets.a_labels),
            val_b=(val_sets.b_images, val_sets.b_labels),
            train_cfg=transfer_cfg,
        )
        online = run_online(test_patients, bundle, online_cfg, selection)
        result = online.result
        per_quarter = [e["accuracy"] for e in online.events]
        harvest_counts = [e["harvested"] for e in online.events]
        write_events(online.events, reports_dir / f"{experiment_id}.events.jsonl")

    report = build_report(
        experiment_id,
        set_name,
        method,
        result.confusion,
        seed=config["seed"],
        per_quarter_accuracy=per_quarter,
        harvest_counts=harvest_counts,
    )
    out_path = reports_dir / f"{experiment_id}.json"
    write_report(report, out_path)
    print(
        f"{experiment_id} [{method.value} on {set_name}]: "
        f"accuracy {report.accuracy:.3f} ({report.correct}/{report.n_patients}) "
        f"-> {out_path}"
    )
    return 0


def cmd_report(paths, config) -> int:
    reports = [load_report(p) for p in paths]
    table = render_table(reports)
    csv_text = render_csv(reports)
    print(table)
    reports_dir = Path(config["reports_dir"])
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "summary.txt").write_text(table + "\n")
    (reports_dir / "summary.csv").write_text(csv_text)
    print(f"wrote {reports_dir / 'summary.txt'} and {reports_dir / 'summary.csv'}")
    return 0


def cmd_ingest(directory, manifest_out) -> int:
    out = ingest_directory(directory, manifest_out)
    print(f"ingested {directory} -> {out}")
    return 0


# --- entry point ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctadapt",
        description="Confidence-based online adaptation of a two-stage CT cascade.",
    )
    parser.add_argument("--version", action="version", version=f"ctadapt {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="base output directory (data/, models/, reports/)")
    common.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one config key (dotted path, JSON value)",
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset suite")
    sub.add_parser("train-base", parents=[common], help="pretext + cascade base training")
    p_exp = sub.add_parser("experiment", parents=[common], help="run one experiment row")
    p_exp.add_argument("experiment_id", metavar="EXP", help="Exp1..Exp6")
    p_rep = sub.add_parser("report", parents=[common], help="aggregate report files")
    p_rep.add_argument("paths", nargs="+", metavar="REPORT", help="report JSON files")
    p_ing = sub.add_parser("ingest", parents=[common], help="scan PGM folders into a manifest")
    p_ing.add_argument("directory", help="directory of per-patient PGM folders")
    p_ing.add_argument("manifest_out", help="output manifest path (file or directory)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
        validate_config(config)
        if args.command == "generate":
            return cmd_generate(config)
        if args.command == "train-base":
            return cmd_train_base(config)
        if args.command == "experiment":
            return cmd_experiment(args.experiment_id, config)
        if args.command == "report":
            return cmd_report(args.paths, config)
        if args.command == "ingest":
            return cmd_ingest(args.directory, args.manifest_out)
        parser.error(f"unknown command {args.command!r}")
    except CtadaptError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
