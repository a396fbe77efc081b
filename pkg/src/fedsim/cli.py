"""Experiment driver.

Commands: generate, run, compare, analyze-cka, entropy-hist. Experiment
settings come from layered sources, later ones winning: built-in defaults,
a named --preset, an INI --config file, dotted per-key flags
(--federation.rounds 50), and finally the short convenience flags
(--seed, --strategy, --p-ds, --rho, --rounds, --alpha).

Every command writes a manifest.json listing emitted files with sha256
digests; `compare` refuses to line up runs whose input datasets differ.
Set FEDSIM_LOG=INFO (or DEBUG) for progress output.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import os
import sys
from copy import deepcopy
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, analysis, nn
from . import rng as streams
from .data import (
    Dataset,
    PartitionSpec,
    concat_datasets,
    dirichlet_partition,
    generate_synthetic,
    load_dataset,
    save_dataset,
    stratified_split,
)
from .errors import ConfigError, FedsimError
from .federation import (
    STRATEGIES,
    FederationConfig,
    pretrain,
    read_reports_csv,
    run_federation,
    write_reports_csv,
)
from .rng import derive_seed
from .selection import STRATEGY_ENTROPY

log = logging.getLogger("fedsim.cli")

# --- configuration schema -------------------------------------------------


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _parse_float_tuple(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(",") if p.strip())


_SCHEMA = {
    "dataset": {
        "kind": str,
        "num_classes": int,
        "samples_per_class": int,
        "feature_dim": int,
        "class_separation": float,
        "source_fraction": float,
        "source_offdomain_per_class": int,
        "test_fraction": float,
        "source_path": str,
        "target_path": str,
    },
    "partition": {
        "alpha": float,
    },
    "federation": {
        "strategy": str,
        "rounds": int,
        "local_epochs": int,
        "num_clients": int,
        "participation_fraction": float,
        "p_ds": float,
        "rho": float,
        "learning_rate": float,
        "momentum": float,
        "prox_mu": float,
        "batch_size": int,
        "pretrain_epochs": int,
        "split_index": int,
        "hidden_sizes": _parse_int_tuple,
        "master_seed": int,
    },
    "analysis": {
        "cka": _parse_bool,
        "entropy_histogram": _parse_bool,
        "selection_dump": _parse_bool,
        "histogram_bins": int,
        "histogram_rhos": _parse_float_tuple,
    },
}

# Desk-size defaults: 10-class blobs, 20 clients, strongly non-IID.
# The pretraining source is the larger share of the pool broadened with
# off-domain blobs, so the frozen features transfer while the head still
# has real work left during the federated rounds.
_DESK_DEFAULT = {
    "dataset": {
        "kind": "synthetic",
        "num_classes": "10",
        "samples_per_class": "250",
        "feature_dim": "32",
        "class_separation": "2.3",
        "source_fraction": "0.6",
        "source_offdomain_per_class": "150",
        "test_fraction": "0.2",
        "source_path": "source.feds",
        "target_path": "target.feds",
    },
    "partition": {"alpha": "0.1"},
    "federation": {
        "strategy": "fedft_eds",
        "rounds": "30",
        "local_epochs": "5",
        "num_clients": "20",
        "participation_fraction": "1.0",
        "p_ds": "0.5",
        "rho": "0.1",
        "learning_rate": "0.1",
        "momentum": "0.5",
        "prox_mu": "0.01",
        "batch_size": "32",
        "pretrain_epochs": "13",
        "split_index": "2",
        "hidden_sizes": "64,64",
        "master_seed": "42",
    },
    "analysis": {
        "cka": "false",
        "entropy_histogram": "false",
        "selection_dump": "false",
        "histogram_bins": "20",
        "histogram_rhos": "1.0,0.5,0.1",
    },
}


def _overlay(base: dict, extra: dict) -> dict:
    for section, keys in extra.items():
        base.setdefault(section, {}).update(keys)
    return base


PRESETS = {
    "desk-default": _DESK_DEFAULT,
    "desk-mild": _overlay(deepcopy(_DESK_DEFAULT), {"partition": {"alpha": "0.5"}}),
}


class ExperimentConfig:
    """Typed view over the layered raw (string) configuration."""

    def __init__(self, raw: dict):
        self.raw = raw
        typed: dict[str, dict] = {}
        for section, keys in raw.items():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            typed[section] = {}
            for key, text in keys.items():
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                parser = _SCHEMA[section][key]
                try:
                    typed[section][key] = parser(text)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {exc}") from exc
        self.dataset = typed["dataset"]
        self.alpha = typed["partition"]["alpha"]
        self.analysis = typed["analysis"]
        self.federation = FederationConfig(**typed["federation"])

    def validate(self) -> None:
        self.federation.validate()
        ds = self.dataset
        if ds["kind"] not in ("synthetic", "files"):
            raise ConfigError(f"dataset.kind must be synthetic or files, got {ds['kind']!r}")
        if ds["kind"] == "synthetic":
            if ds["num_classes"] < 1 or ds["samples_per_class"] < 1 or ds["feature_dim"] < 1:
                raise ConfigError("synthetic dataset counts must be >= 1")
            if ds["class_separation"] < 0.0:
                raise ConfigError("dataset.class_separation must be >= 0")
            if not 0.0 < ds["source_fraction"] < 1.0:
                raise ConfigError("dataset.source_fraction must be in (0, 1)")
            if ds["source_offdomain_per_class"] < 0:
                raise ConfigError("dataset.source_offdomain_per_class must be >= 0")
        if not 0.0 < ds["test_fraction"] < 1.0:
            raise ConfigError("dataset.test_fraction must be in (0, 1)")
        if not self.alpha > 0.0:
            raise ConfigError(f"partition.alpha must be > 0, got {self.alpha}")
        if self.analysis["histogram_bins"] < 2:
            raise ConfigError("analysis.histogram_bins must be >= 2")
        if any(r <= 0.0 for r in self.analysis["histogram_rhos"]):
            raise ConfigError("analysis.histogram_rhos must be positive")

    def snapshot(self) -> dict:
        """JSON-serializable view of the typed configuration."""
        out = {
            "dataset": dict(self.dataset),
            "partition": {"alpha": self.alpha},
            "federation": self.federation.as_dict(),
            "analysis": {
                key: (list(value) if isinstance(value, tuple) else value)
                for key, value in self.analysis.items()
            },
        }
        return out


def _read_ini(path: Path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    return {section: dict(parser.items(section)) for section in parser.sections()}


_CONVENIENCE = {
    "seed": ("federation", "master_seed"),
    "strategy": ("federation", "strategy"),
    "p_ds": ("federation", "p_ds"),
    "rho": ("federation", "rho"),
    "rounds": ("federation", "rounds"),
    "alpha": ("partition", "alpha"),
}


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    raw = deepcopy(_DESK_DEFAULT)
    if getattr(args, "preset", None):
        _overlay(raw, deepcopy(PRESETS[args.preset]))
    if getattr(args, "config", None):
        _overlay(raw, _read_ini(args.config))
    for section, keys in _SCHEMA.items():
        for key in keys:
            value = getattr(args, f"ov__{section}__{key}", None)
            if value is not None:
                raw[section][key] = value
    for flag, (section, key) in _CONVENIENCE.items():
        value = getattr(args, flag, None)
        if value is not None:
            raw[section][key] = str(value)
    config = ExperimentConfig(raw)
    config.validate()
    return config


# --- manifest / hashing ---------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


def write_manifest(
    out_dir: Path,
    command: str,
    config: ExperimentConfig,
    inputs: dict[str, Path],
    outputs: dict[str, Path],
    started: str,
) -> Path:
    manifest = {
        "tool": "fedsim",
        "version": __version__,
        "command": command,
        "master_seed": config.federation.master_seed,
        "config": config.snapshot(),
        "started_utc": started,
        "finished_utc": _utc_now(),
        "inputs": {name: _sha256(path) for name, path in sorted(inputs.items())},
        "outputs": {name: _sha256(path) for name, path in sorted(outputs.items())},
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _resolve(out_dir: Path, path_text: str) -> Path:
    path = Path(path_text)
    return path if path.is_absolute() else out_dir / path


# --- dataset plumbing -----------------------------------------------------


def _build_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Synthesize the (source, target) pair for a run.

    One pool provides the target and the in-domain share of the pretraining
    source (disjoint samples, same class geometry); the source is then
    broadened with blobs drawn at unrelated class positions, standing in for
    a pretraining corpus that covers more than the downstream task.
    """
    ds = config.dataset
    master = config.federation.master_seed
    pool = generate_synthetic(
        num_classes=ds["num_classes"],
        samples_per_class=ds["samples_per_class"],
        feature_dim=ds["feature_dim"],
        class_separation=ds["class_separation"],
        seed=derive_seed(master, streams.DATASET, 0),
    )
    split_seed = derive_seed(master, streams.SPLIT, 0)
    target, source = stratified_split(pool, ds["source_fraction"], split_seed)
    if ds["source_offdomain_per_class"] > 0:
        offdomain = generate_synthetic(
            num_classes=ds["num_classes"],
            samples_per_class=ds["source_offdomain_per_class"],
            feature_dim=ds["feature_dim"],
            class_separation=ds["class_separation"],
            seed=derive_seed(master, streams.DATASET, 1),
        )
        source = concat_datasets([source, offdomain])
    source.name = f"{pool.name}/source"
    target.name = f"{pool.name}/target"
    return source, target


def _load_datasets(config: ExperimentConfig, out_dir: Path) -> tuple[Dataset, Dataset]:
    source_path = _resolve(out_dir, config.dataset["source_path"])
    target_path = _resolve(out_dir, config.dataset["target_path"])
    for path in (source_path, target_path):
        if not path.exists():
            raise ConfigError(
                f"dataset file {path} does not exist (run `fedsim generate` first)"
            )
    return load_dataset(source_path), load_dataset(target_path)


def _prepare_run(config: ExperimentConfig, out_dir: Path):
    """Load datasets, carve the held-out test split, partition the rest."""
    source, target = _load_datasets(config, out_dir)
    master = config.federation.master_seed
    train, test = stratified_split(
        target, config.dataset["test_fraction"], derive_seed(master, streams.SPLIT, 1)
    )
    spec = PartitionSpec(
        num_clients=config.federation.num_clients,
        alpha=config.alpha,
        seed=derive_seed(master, streams.PARTITION),
    )
    partitions = dirichlet_partition(train, spec)
    return source, train, test, partitions


def _fmt(value: float) -> str:
    return repr(float(value))


# --- commands ---------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    config = build_config(args)
    started = _utc_now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.dataset["kind"] != "synthetic":
        raise ConfigError("generate only applies to dataset.kind = synthetic")
    source, target = _build_datasets(config)
    source_path = _resolve(out_dir, config.dataset["source_path"])
    target_path = _resolve(out_dir, config.dataset["target_path"])
    save_dataset(source, source_path)
    save_dataset(target, target_path)
    outputs = {source_path.name: source_path, target_path.name: target_path}
    write_manifest(out_dir, "generate", config, {}, outputs, started)
    print(f"wrote {source_path} ({len(source)} samples) and {target_path} ({len(target)} samples)")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    config = build_config(args)
    started = _utc_now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, train, test, partitions = _prepare_run(config, out_dir)

    captured_models: list[tuple[int, nn.Model]] = []
    client_model_hook = None
    if config.analysis["cka"]:

        def client_model_hook(round_no: int, client_id: int, model: nn.Model) -> None:
            if round_no == 1:
                captured_models.append((client_id, model))

    dump_rows: list[list] = []
    selection_hook = None
    if config.analysis["selection_dump"]:

        def selection_hook(round_no: int, client_id: int, result) -> None:
            chosen = set(int(i) for i in result.selected_indices)
            if result.strategy == STRATEGY_ENTROPY and result.scores is not None:
                for score in result.scores:
                    dump_rows.append(
                        [
                            round_no,
                            client_id,
                            score.sample_index,
                            _fmt(score.entropy),
                            int(score.sample_index in chosen),
                        ]
                    )
            else:
                for idx in partitions[client_id].sample_indices:
                    dump_rows.append(
                        [round_no, client_id, int(idx), "", int(int(idx) in chosen)]
                    )

    reports, final = run_federation(
        config.federation,
        source,
        train,
        partitions,
        test,
        threads=args.threads,
        client_model_hook=client_model_hook,
        selection_hook=selection_hook,
    )

    outputs: dict[str, Path] = {}
    reports_path = out_dir / "reports.csv"
    write_reports_csv(reports, config.federation.strategy, reports_path)
    outputs["reports.csv"] = reports_path
    checkpoint_path = out_dir / "model.ckpt"
    nn.save_model(final.model, checkpoint_path)
    outputs["model.ckpt"] = checkpoint_path

    if config.analysis["selection_dump"]:
        dump_path = out_dir / "selection_dump.csv"
        with open(dump_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["round", "client_id", "sample_index", "entropy", "selected"])
            writer.writerows(dump_rows)
        outputs["selection_dump.csv"] = dump_path

    if config.analysis["cka"] and len(captured_models) >= 2:
        models = [m for _, m in sorted(captured_models, key=lambda item: item[0])]
        ids = [cid for cid, _ in sorted(captured_models, key=lambda item: item[0])]
        for level in analysis.LAYER_LEVELS:
            matrix = analysis.pairwise_cka(models, test, level)
            cka_path = out_dir / f"cka_{level}.csv"
            _write_cka_csv(matrix, ids, cka_path)
            outputs[cka_path.name] = cka_path

    if config.analysis["entropy_histogram"]:
        for rho in config.analysis["histogram_rhos"]:
            counts = analysis.entropy_histogram(
                final.model, train, rho, config.analysis["histogram_bins"]
            )
            edges = analysis.histogram_edges(
                train.num_classes, config.analysis["histogram_bins"]
            )
            hist_path = out_dir / f"entropy_hist_rho{rho:g}.csv"
            _write_histogram_csv(counts, edges, hist_path)
            outputs[hist_path.name] = hist_path

    source_path = _resolve(out_dir, config.dataset["source_path"])
    target_path = _resolve(out_dir, config.dataset["target_path"])
    inputs = {source_path.name: source_path, target_path.name: target_path}
    write_manifest(out_dir, "run", config, inputs, outputs, started)
    best = max((r.test_accuracy for r in reports), default=float("nan"))
    print(
        f"{config.federation.strategy}: {len(reports)} rounds, "
        f"best test accuracy {best:.4f}, outputs in {out_dir}"
    )
    return 0


def _write_cka_csv(matrix: analysis.CkaMatrix, client_ids: list[int], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([str(c) for c in client_ids])
        for row in matrix.values:
            writer.writerow([_fmt(v) for v in row])


def _write_histogram_csv(counts: np.ndarray, edges: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_low", "bin_high", "count"])
        for i, count in enumerate(counts):
            writer.writerow([_fmt(edges[i]), _fmt(edges[i + 1]), int(count)])


def cmd_analyze_cka(args: argparse.Namespace) -> int:
    """Run a single round and report pairwise client-model CKA at each level."""
    config = build_config(args)
    started = _utc_now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, train, test, partitions = _prepare_run(config, out_dir)

    config.federation.rounds = 1
    captured: list[tuple[int, nn.Model]] = []

    def hook(round_no: int, client_id: int, model: nn.Model) -> None:
        captured.append((client_id, model))

    run_federation(
        config.federation,
        source,
        train,
        partitions,
        test,
        threads=args.threads,
        client_model_hook=hook,
    )
    models = [m for _, m in sorted(captured, key=lambda item: item[0])]
    ids = [cid for cid, _ in sorted(captured, key=lambda item: item[0])]
    outputs: dict[str, Path] = {}
    for level in analysis.LAYER_LEVELS:
        matrix = analysis.pairwise_cka(models, test, level)
        path = out_dir / f"cka_{level}.csv"
        _write_cka_csv(matrix, ids, path)
        outputs[path.name] = path
        print(f"{level}: mean off-diagonal CKA {analysis.mean_offdiagonal(matrix):.4f}")
    source_path = _resolve(out_dir, config.dataset["source_path"])
    target_path = _resolve(out_dir, config.dataset["target_path"])
    inputs = {source_path.name: source_path, target_path.name: target_path}
    write_manifest(out_dir, "analyze-cka", config, inputs, outputs, started)
    return 0


def cmd_entropy_hist(args: argparse.Namespace) -> int:
    """Histogram prediction entropies of the pretrained model per temperature."""
    config = build_config(args)
    started = _utc_now()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, train, _test, _partitions = _prepare_run(config, out_dir)
    master = config.federation.master_seed
    model = nn.build_mlp(
        input_dim=train.feature_dim,
        hidden_sizes=config.federation.hidden_sizes,
        num_classes=train.num_classes,
        split_index=config.federation.effective_split_index,
        seed=derive_seed(master, streams.INIT),
    )
    if config.federation.pretrain_epochs > 0:
        model = pretrain(
            model,
            source,
            config.federation.pretrain_epochs,
            config.federation.learning_rate,
            config.federation.momentum,
            config.federation.batch_size,
            seed=derive_seed(master, streams.PRETRAIN),
        )
    rhos = config.analysis["histogram_rhos"]
    if args.hist_rhos:
        rhos = tuple(args.hist_rhos)
    outputs: dict[str, Path] = {}
    for rho in rhos:
        counts = analysis.entropy_histogram(model, train, rho, config.analysis["histogram_bins"])
        edges = analysis.histogram_edges(train.num_classes, config.analysis["histogram_bins"])
        path = out_dir / f"entropy_hist_rho{rho:g}.csv"
        _write_histogram_csv(counts, edges, path)
        outputs[path.name] = path
        low_half = int(counts[: len(counts) // 2].sum())
        print(f"rho={rho:g}: {low_half}/{int(counts.sum())} samples in the lower half")
    source_path = _resolve(out_dir, config.dataset["source_path"])
    target_path = _resolve(out_dir, config.dataset["target_path"])
    inputs = {source_path.name: source_path, target_path.name: target_path}
    write_manifest(out_dir, "entropy-hist", config, inputs, outputs, started)
    return 0


def _load_run_summary(run_dir: Path, threshold: float) -> dict:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"{run_dir} has no manifest.json (not a completed run?)")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    reports = read_reports_csv(run_dir / "reports.csv")
    fed = manifest["config"]["federation"]
    best_acc = max((r.test_accuracy for r in reports), default=float("nan"))
    efficiency = analysis.learning_efficiency(reports) if reports else float("nan")
    rounds_to_threshold = None
    for r in reports:
        if r.test_accuracy >= threshold:
            rounds_to_threshold = r.round
            break
    return {
        "run": run_dir.name,
        "strategy": fed["strategy"],
        "p_ds": fed["p_ds"],
        "f_n": fed["participation_fraction"],
        "best_acc": best_acc,
        "learning_efficiency": efficiency,
        "rounds_to_threshold": rounds_to_threshold,
        "inputs": manifest.get("inputs", {}),
    }


def cmd_compare(args: argparse.Namespace) -> int:
    if len(args.run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    summaries = [_load_run_summary(Path(d), args.threshold) for d in args.run_dirs]
    reference = summaries[0]["inputs"]
    for summary in summaries[1:]:
        if summary["inputs"] != reference:
            raise ConfigError(
                f"run {summary['run']} used different input datasets than "
                f"{summaries[0]['run']}; refusing to compare"
            )
    header = ["run", "strategy", "p_ds", "f_n", "best_acc", "learning_efficiency", "rounds_to_threshold"]
    rows = []
    for s in summaries:
        rows.append(
            [
                s["run"],
                s["strategy"],
                f"{s['p_ds']:g}",
                f"{s['f_n']:g}",
                f"{s['best_acc']:.4f}",
                "nan" if math.isnan(s["learning_efficiency"]) else f"{s['learning_efficiency']:.4f}",
                "" if s["rounds_to_threshold"] is None else str(s["rounds_to_threshold"]),
            ]
        )
    widths = [max(len(header[i]), max(len(r[i]) for r in rows)) for i in range(len(header))]
    print("  ".join(h.ljust(widths[i]) for i, h in enumerate(header)))
    for row in rows:
        display = [cell if cell else "-" for cell in row]
        print("  ".join(display[i].ljust(widths[i]) for i in range(len(display))))
    if args.out_file:
        with open(args.out_file, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
    return 0


# --- argument parsing -------------------------------------------------------


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="INI config file")
    parser.add_argument(
        "--preset", choices=sorted(PRESETS), default=None, help="named base configuration"
    )
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--out", type=Path, default=Path("fedsim-out"), help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="parallel client workers")
    parser.add_argument("--strategy", choices=STRATEGIES, default=None)
    parser.add_argument("--p-ds", dest="p_ds", type=float, default=None)
    parser.add_argument("--rho", type=float, default=None)
    parser.add_argument("--rounds", type=int, default=None)
    parser.add_argument("--alpha", type=float, default=None)
    for section, keys in _SCHEMA.items():
        for key in keys:
            parser.add_argument(
                f"--{section}.{key}",
                dest=f"ov__{section}__{key}",
                default=None,
                metavar="VALUE",
                help=argparse.SUPPRESS,
            )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Desk-scale federated fine-tuning simulator with entropy-based data selection.",
    )
    parser.add_argument("--version", action="version", version=f"fedsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_generate = sub.add_parser("generate", help="write the source/target dataset files")
    _add_config_arguments(p_generate)
    p_generate.set_defaults(func=cmd_generate)

    p_run = sub.add_parser("run", help="run a federation experiment")
    _add_config_arguments(p_run)
    p_run.set_defaults(func=cmd_run)

    p_compare = sub.add_parser("compare", help="summarize completed runs side by side")
    p_compare.add_argument("run_dirs", nargs="+", help="run output directories")
    p_compare.add_argument(
        "--threshold", type=float, default=0.5, help="accuracy for rounds-to-threshold"
    )
    p_compare.add_argument("--out-file", type=Path, default=None, help="also write CSV here")
    p_compare.set_defaults(func=cmd_compare)

    p_cka = sub.add_parser("analyze-cka", help="one round, pairwise client-model CKA")
    _add_config_arguments(p_cka)
    p_cka.set_defaults(func=cmd_analyze_cka)

    p_hist = sub.add_parser("entropy-hist", help="entropy histograms of the pretrained model")
    _add_config_arguments(p_hist)
    p_hist.add_argument(
        "--hist-rho",
        dest="hist_rhos",
        type=float,
        action="append",
        default=None,
        help="temperature to histogram (repeatable)",
    )
    p_hist.set_defaults(func=cmd_entropy_hist)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FEDSIM_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FedsimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
