"""Command line for the offline pipeline and the streaming simulation.

Every subcommand reads its inputs from the config (or the output directory
of earlier stages) and writes its outputs into ``--out-dir``.  Failures exit
with 2 (bad input), 3 (training) or 4 (model file) after printing one line
``error: <reason>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .dataset import generate_synthetic, parse_battery, write_battery
from .errors import (
    ArtifactNotFoundError,
    GridMismatchError,
    InputError,
    ModelFormatError,
    ModelInputError,
    SohTwinError,
    TrainingError,
)
from .importance import GridSpec, write_importance
from .realtime import error_by_step, stream_cycle, write_stream
from .regressor import TrainHistory, load, save
from .warp import read_synced, synchronize_battery, write_synced

EXIT_OK, EXIT_INPUT, EXIT_TRAINING, EXIT_MODEL = 0, 2, 3, 4

MODEL_FILE = "model.bin"
GRID_FILE = "grid.json"
TEST_DIR = "test_battery"


def _atomic_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name("." + path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name("." + path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# Loading inputs and artifacts


def _record_paths(cfg, test=False):
    out = Path(cfg.out_dir)
    if test:
        if cfg.test_cycles is None:
            return None
        return Path(cfg.test_cycles), Path(cfg.test_labels or "")
    cycles = Path(cfg.cycles) if cfg.cycles else out / "cycles.csv"
    labels = Path(cfg.labels) if cfg.labels else out / "labels.csv"
    return cycles, labels


def _load_record(cfg, test=False):
    paths = _record_paths(cfg, test)
    if paths is None:
        return None
    return parse_battery(paths[0], paths[1], None if test else cfg.battery_id, cfg.nominal_capacity)


def _load_synced(cfg, test=False):
    out = Path(cfg.out_dir) / (TEST_DIR if test else "")
    if not (out / "sync_meta.json").is_file():
        raise ArtifactNotFoundError(f"no synchronized data in {out}; run `sync` first")
    return read_synced(out)


def _prepared(cfg):
    record = _load_record(cfg)
    synced = _load_synced(cfg)
    if list(synced.cycle_indices) != list(record.cycle_indices):
        raise InputError("synchronized data does not match the cycles file; rerun `sync`")
    test_record = _load_record(cfg, test=True)
    test_synced = _load_synced(cfg, test=True) if test_record is not None else None
    return record, pipeline.prepare(record, synced, cfg, test_record, test_synced)


def _load_model(cfg):
    path = Path(cfg.out_dir) / MODEL_FILE
    if not path.is_file():
        raise ModelFormatError(f"no model file at {path}; run `train` first")
    params = load(path)
    grid_path = Path(cfg.out_dir) / GRID_FILE
    if grid_path.is_file():
        grid = GridSpec.from_dict(json.loads(grid_path.read_text()))
    else:
        grid = GridSpec.from_dict(params.grid)
    if grid.digest() != params.grid_digest:
        raise GridMismatchError(
            f"model grid {params.grid_digest} differs from {GRID_FILE} grid {grid.digest()}"
        )
    return params, grid


# --------------------------------------------------------------------------
# Subcommands


def cmd_synth(cfg, args):
    record = generate_synthetic(cfg.synthetic, cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_battery(record, out / "cycles.csv", out / "labels.csv")
    print(f"wrote {len(record)} synthetic cycles to {out}")


def cmd_ingest(cfg, args):
    if cfg.cycles is None or cfg.labels is None:
        raise InputError("ingest needs `cycles` and `labels` paths")
    record = _load_record(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_battery(record, out / "cycles.csv", out / "labels.csv")
    lengths = record.lengths
    print(
        f"battery {record.battery_id}: {len(record)} cycles "
        f"({record.cycle_indices[0]}..{record.cycle_indices[-1]}), "
        f"lengths {lengths.min()}..{lengths.max()}"
    )


def _report_sync(tag, synced):
    err = synced.per_cycle_energy_error
    p50, p90, p99 = np.percentile(err, [50, 90, 99])
    print(
        f"{tag}: K_ref={synced.reference_length} cycles={len(synced)} "
        f"converged={int(synced.converged.sum())}/{len(synced)} "
        f"max_iterations={int(synced.iterations.max())} "
        f"energy_error_p50={p50:.4g} p90={p90:.4g} p99={p99:.4g}"
    )


def cmd_sync(cfg, args):
    record = _load_record(cfg)
    synced = pipeline.synchronize(record, cfg)
    write_synced(synced, cfg.out_dir)
    _report_sync("sync", synced)
    test_record = _load_record(cfg, test=True)
    if test_record is not None:
        ref = record.cycle(pipeline.synced_ref_cycle(record, cfg)).samples
        test_synced = synchronize_battery(test_record, None, cfg.edtw, reference=ref)
        write_synced(test_synced, Path(cfg.out_dir) / TEST_DIR)
        _report_sync("sync test battery", test_synced)


def _write_preparation(cfg, prep):
    write_importance(prep.profile, cfg.out_dir)
    _atomic_text(Path(cfg.out_dir) / GRID_FILE, _json(prep.grid.to_dict()))


def cmd_importance(cfg, args):
    _, prep = _prepared(cfg)
    _write_preparation(cfg, prep)
    a, b = prep.interval
    print(
        f"importance: knee_k={prep.profile.knee_index + 1} threshold={prep.profile.threshold:.4f} "
        f"interval_k={a + 1}..{b + 1} K_ID={prep.profile.length}"
    )


def _write_fit(cfg, fit, report_name):
    out = Path(cfg.out_dir)
    prep = fit.prepared
    rows = []
    for name, rec, pred in (("train", prep.train_record, fit.train_pred), ("test", prep.test_record, fit.test_pred)):
        for c, cap, p in zip(rec.cycle_indices, rec.capacities, pred):
            rows.append([int(c), name, repr(float(cap)), repr(float(p))])
    _atomic_csv(out / "predictions.csv", ["cycle", "split", "capacity_ah", "estimate_ah"], rows)
    report = {
        "train_cycles": [int(prep.train_record.cycle_indices[0]), int(prep.train_record.cycle_indices[-1])],
        "test_cycles": [int(prep.test_record.cycle_indices[0]), int(prep.test_record.cycle_indices[-1])],
        "test_source": prep.test_synced.source,
        "train_rmse_percent": fit.train_metrics[0],
        "train_r_squared": fit.train_metrics[1],
        "rmse_percent": fit.test_metrics[0],
        "r_squared": fit.test_metrics[1],
        "K_ID": prep.profile.length,
    }
    if fit.history is not None and fit.history.epochs:
        report["epochs"] = fit.history.epochs
        report["best_epoch"] = fit.history.best_epoch
    _atomic_text(out / report_name, _json(report))
    print(
        f"test rmse_percent={fit.test_metrics[0]:.4f} r_squared={fit.test_metrics[1]:.4f} "
        f"(train rmse_percent={fit.train_metrics[0]:.4f} r_squared={fit.train_metrics[1]:.4f})"
    )


def cmd_train(cfg, args):
    record, prep = _prepared(cfg)
    _write_preparation(cfg, prep)
    fit = pipeline.fit_model(prep, cfg, record.nominal_capacity)
    save(fit.params, Path(cfg.out_dir) / MODEL_FILE)
    h = fit.history
    _atomic_csv(
        Path(cfg.out_dir) / "history.csv",
        ["epoch", "train_rmse", "val_rmse"],
        [[i + 1, repr(t), repr(v)] for i, (t, v) in enumerate(zip(h.train_rmse, h.val_rmse))],
    )
    _write_fit(cfg, fit, "metrics.json")


def cmd_evaluate(cfg, args):
    params, grid = _load_model(cfg)
    record, prep = _prepared(cfg)
    if prep.grid.digest() != params.grid_digest:
        raise GridMismatchError("model was trained on a different grid than the current data gives")
    fit = pipeline.score(prep, params, TrainHistory(), record.nominal_capacity)
    _write_fit(cfg, fit, "evaluation.json")


def _select_cycles(args, prep, source):
    available = source.cycle_indices
    if args.cycle:
        chosen = args.cycle
    elif args.every is not None:
        start = args.start if args.start is not None else int(available[0])
        chosen = [c for c in available if c >= start and (c - start) % args.every == 0]
    else:
        chosen = list(prep.test_record.cycle_indices)
        if args.start is not None:
            chosen = [c for c in chosen if c >= args.start]
    if args.limit is not None:
        chosen = chosen[: args.limit]
    missing = [c for c in chosen if c not in set(int(x) for x in available)]
    if missing:
        raise InputError(f"cycles not in the streamed battery: {missing[:5]}")
    if not chosen:
        raise InputError("no cycles selected for streaming")
    return [int(c) for c in chosen]


def cmd_stream(cfg, args):
    params, grid = _load_model(cfg)
    record, prep = _prepared(cfg)
    session = pipeline.make_session(record, prep.train_record, params, grid, cfg)
    source = _load_record(cfg, test=True) or record
    chosen = _select_cycles(args, prep, source)
    out = Path(cfg.out_dir) / "stream"
    streams, truths = [], []
    for c in chosen:
        est = stream_cycle(source.cycle(c), session)
        truth = source.capacity(c)
        write_stream(est, out / f"cycle_{c}.csv", truth, c)
        streams.append(est)
        truths.append(truth)
        print(f"cycle {c}: {len(est)} steps, final estimate {est[-1].capacity:.4f} Ah, truth {truth:.4f} Ah")
    mae = error_by_step(streams, truths)
    counts = np.zeros(len(mae), dtype=int)
    for est in streams:
        counts[np.flatnonzero(np.isfinite([e.capacity for e in est]))] += 1
    _atomic_csv(
        out / "error_by_step.csv",
        ["k", "mean_abs_error_ah", "n_cycles", "in_important_interval"],
        [[k + 1, repr(float(m)), int(n), int(session.in_interval(k + 1))] for k, (m, n) in enumerate(zip(mae, counts))],
    )


COMMANDS = {
    "ingest": (cmd_ingest, "validate a cycles/labels CSV pair and copy it into the output directory"),
    "synth": (cmd_synth, "generate a synthetic battery"),
    "sync": (cmd_sync, "synchronize every cycle to the reference cycle"),
    "importance": (cmd_importance, "score time importance on the training split and fit the grid"),
    "train": (cmd_train, "importance, encoding, training and held-out evaluation"),
    "evaluate": (cmd_evaluate, "re-evaluate a saved model on the held-out cycles"),
    "stream": (cmd_stream, "simulate real-time estimation sample by sample"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soh-twin", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--seed", type=int, help="seed for synthesis and training (overrides config)")
    parser.add_argument("--out-dir", help="directory for all outputs (overrides config)")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext)
        if name == "stream":
            p.add_argument("--cycle", type=int, action="append", help="cycle index to stream (repeatable)")
            p.add_argument("--every", type=int, help="stream every N-th cycle")
            p.add_argument("--from", dest="start", type=int, help="first cycle to stream")
            p.add_argument("--limit", type=int, help="stream at most this many cycles")
    return parser


def resolve_config(args) -> pipeline.PipelineConfig:
    values = pipeline.read_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.out_dir is not None:
        values["out_dir"] = args.out_dir
    return pipeline.config_from_mapping(values)


def _exit_code(exc: SohTwinError) -> int:
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    if isinstance(exc, (ModelFormatError, ModelInputError)):
        return EXIT_MODEL
    return EXIT_INPUT


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command][0](cfg, args)
    except SohTwinError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {exc.reason}: {msg}", file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
