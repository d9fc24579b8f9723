"""The ``gfm`` command line: dataset pipeline, training, benchmarks, HPO, UQ.

Every subcommand logs JSON lines to stderr, refuses to overwrite an existing
``--out`` unless ``--force`` is passed, and exits 0 on success, 1 on a
domain error (bad input, bad config, failed run), 2 on a usage error.
``GFM_LOG_LEVEL`` sets the default log level and ``GFM_RENDEZVOUS`` the
scratch directory used for multi-process rendezvous files.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from functools import partial

from . import config as config_mod
from .comm import LocalComm, create_thread_comms
from .container import (
    partition_for_readers,
    read_manifest,
    read_payloads,
    write_container,
)
from .ddstore import ChannelFabric, DDStore
from .ensemble import (
    SelectionPolicy,
    build_parity_rows,
    pareto_front,
    select_ensemble,
    split_metrics,
    write_metrics_csv,
    write_parity_csv,
)
from .errors import ConfigError, GFMError, OutputExistsError
from .hpo import (
    ProcessWorkerPool,
    SearchSpace,
    hpo_loop,
    read_history,
    run_trial,
)
from .model import ModelConfig
from .preprocess import (
    export_extxyz,
    filter_by_force_norm,
    fit_reference_energies_by_source,
    generate_synthetic,
    ingest_extxyz,
    realign_energies,
    split_dataset,
    split_records,
)
from .scaling import run_strong_scaling, run_weak_scaling
from .train import TrainConfig, load_checkpoint, train

log = logging.getLogger("gfm")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


class JsonLineFormatter(logging.Formatter):
    """One JSON object per log record; extra ``event`` dicts are inlined."""

    def format(self, record: logging.LogRecord) -> str:
        doc = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "message": record.getMessage(),
        }
        event = getattr(record, "event", None)
        if isinstance(event, dict):
            doc.update(event)
        if record.exc_info and record.exc_info[1] is not None:
            doc["error"] = repr(record.exc_info[1])
        return json.dumps(doc, sort_keys=True, default=str)


def setup_logging(level_name: str) -> None:
    level = getattr(logging, level_name.upper(), None)
    if not isinstance(level, int):
        raise ConfigError(f"unknown log level {level_name!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    for name in ("gfm", "gfmkit"):
        logger = logging.getLogger(name)
        logger.handlers.clear()
        logger.addHandler(handler)
        logger.setLevel(level)
        logger.propagate = False


_DURATION_RE = re.compile(
    r"(?:(\d+(?:\.\d+)?)h)?(?:(\d+(?:\.\d+)?)m)?(?:(\d+(?:\.\d+)?)s)?"
)


def parse_duration(text: str) -> float:
    """Seconds from '90', '45s', '30m', '2h', or compounds like '1h30m'."""
    t = text.strip().lower()
    m = _DURATION_RE.fullmatch(t)
    if m and any(m.groups()):
        hours, minutes, seconds = (float(g) if g else 0.0 for g in m.groups())
        return hours * 3600.0 + minutes * 60.0 + seconds
    try:
        return float(t)
    except ValueError:
        raise ConfigError(
            f"cannot parse duration {text!r}; use seconds or 30m / 2h / 1h30m"
        ) from None


def check_out(path: str, force: bool) -> str:
    if os.path.exists(path) and not force:
        raise OutputExistsError(
            f"refusing to overwrite existing {path}; pass --force to allow"
        )
    return path


def load_config_file(path: str | None) -> dict:
    """Read, validate, and normalize the JSON config (defaults when absent)."""
    if path is None:
        return config_mod.ensure_valid({})
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return config_mod.ensure_valid(doc)


def _event(message: str, **fields) -> None:
    log.info(message, extra={"event": fields})


# --------------------------------------------------------------------------
# Dataset pipeline
# --------------------------------------------------------------------------


def cmd_generate(args, cfg: dict) -> int:
    data = cfg["data"]
    count = args.count if args.count is not None else data["count"]
    seed = args.seed if args.seed is not None else data["seed"]
    check_out(args.out, args.force)
    records = generate_synthetic(
        count,
        n_atoms_range=(data["n_atoms_min"], data["n_atoms_max"]),
        box_length=data["box_length"],
        cutoff_radius=data["cutoff_radius"],
        seed=seed,
    )
    export_extxyz(records, args.out, cutoff_radius=data["cutoff_radius"])
    _event("generated structures", count=len(records), seed=seed, out=args.out)
    return EXIT_OK


def cmd_preprocess(args, cfg: dict) -> int:
    data = cfg["data"]
    check_out(args.out, args.force)
    records = ingest_extxyz(args.input)
    total = len(records)
    if data["realign"] and not args.no_realign:
        tables = fit_reference_energies_by_source(records)
        records = realign_energies(records, tables)
        _event("energies realigned", sources=sorted(tables))
    limit = args.force_limit if args.force_limit is not None else data["force_norm_limit"]
    records, removed = filter_by_force_norm(records, threshold=limit)
    export_extxyz(records, args.out, cutoff_radius=data["cutoff_radius"])
    _event(
        "preprocessing finished",
        read=total,
        removed=removed,
        kept=len(records),
        force_norm_limit=limit,
        out=args.out,
    )
    return EXIT_OK


def cmd_write_container(args, cfg: dict) -> int:
    data = cfg["data"]
    check_out(args.out, args.force)
    records = ingest_extxyz(args.input)
    train_frac = data["train_fraction"]
    val_frac = data["val_fraction"]
    assignment = split_dataset(
        records,
        ratios=(train_frac, val_frac, 1.0 - train_frac - val_frac),
        seed=args.seed if args.seed is not None else data["seed"],
    )
    groups = split_records(records, assignment)
    subfiles = args.subfiles if args.subfiles is not None else data["subfile_count"]
    write_container(groups, subfile_count=subfiles, path=args.out)
    _event(
        "container written",
        out=args.out,
        subfiles=subfiles,
        **{name: len(recs) for name, recs in groups.items()},
    )
    return EXIT_OK


def cmd_bench_io(args, cfg: dict) -> int:
    reader_counts = _parse_int_list(args.readers, "--readers")
    manifest = read_manifest(args.container)
    group = args.group
    count = manifest.group(group).record_count
    if count == 0:
        raise ConfigError(f"group {group!r} is empty in {args.container}")
    total_bytes = int(manifest.group(group).entries["length"].sum())
    points = []
    for readers in reader_counts:
        parts = partition_for_readers(count, readers)
        t0 = time.monotonic()
        if readers == 1:
            chunks = [read_payloads(manifest, group, parts[0], args.container)]
        else:
            with ThreadPoolExecutor(max_workers=readers) as pool:
                chunks = list(
                    pool.map(
                        lambda rng: read_payloads(manifest, group, rng, args.container),
                        parts,
                    )
                )
        seconds = time.monotonic() - t0
        got = sum(len(chunk) for chunk in chunks)
        if got != count:
            raise GFMError(f"bench read {got} records, expected {count}")
        points.append(
            {
                "readers": readers,
                "seconds": seconds,
                "mb_per_s": (total_bytes / 1e6) / seconds if seconds > 0 else 0.0,
            }
        )
        _event("bench-io point", readers=readers, seconds=round(seconds, 4))
    report = {
        "container": args.container,
        "group": group,
        "records": count,
        "total_bytes": total_bytes,
        "points": points,
    }
    _write_json_out(report, args.out, args.force)
    return EXIT_OK


# --------------------------------------------------------------------------
# Training and benchmarks
# --------------------------------------------------------------------------


def _train_one_rank(rank, size, container, fabric, comms, model_cfg, train_cfg,
                    replication):
    store = DDStore(rank, size, replication_factor=replication, fabric=fabric)
    try:
        store.load(container, "trainset")
        store.load(container, "valset")
        return train(model_cfg, store, comms[rank], train_cfg)
    finally:
        store.close()


def cmd_train(args, cfg: dict) -> int:
    check_out(args.out, args.force)
    if args.checkpoint:
        check_out(args.checkpoint, args.force)
    model_cfg = ModelConfig.from_dict(cfg["model"])
    tr = cfg["train"]
    ranks = args.ranks if args.ranks is not None else tr["ranks"]
    epochs = args.epochs if args.epochs is not None else tr["max_epochs"]
    budget = parse_duration(args.budget) if args.budget else tr["wall_clock_budget_s"]
    train_cfg = TrainConfig(
        max_epochs=epochs,
        patience=tr["patience"],
        base_seed=tr["base_seed"],
        optimizer=tr["optimizer"],
        learning_rate=cfg["model"]["learning_rate"],
        wall_clock_budget_s=budget,
        checkpoint_path=args.checkpoint,
    )
    replication = cfg["store"]["replication_factor"]
    t0 = time.monotonic()
    if ranks == 1:
        result = _train_one_rank(0, 1, args.container, None, [LocalComm()],
                                 model_cfg, train_cfg, replication)
    else:
        fabric = ChannelFabric(ranks)
        comms = create_thread_comms(ranks)
        worker = partial(_train_one_rank, size=ranks, container=args.container,
                         fabric=fabric, comms=comms, model_cfg=model_cfg,
                         train_cfg=train_cfg, replication=replication)
        try:
            with ThreadPoolExecutor(max_workers=ranks) as pool:
                results = list(pool.map(worker, range(ranks)))
        finally:
            for comm in comms:
                comm.close()
        result = results[0]
    doc = {
        "model": model_cfg.to_dict(),
        "ranks": ranks,
        "stop_reason": result.stop_reason,
        "epochs_run": result.epochs_run,
        "wall_time_s": time.monotonic() - t0,
        "checkpoint": args.checkpoint,
        "metrics": [m.to_dict() for m in result.metrics],
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _event(
        "training finished",
        ranks=ranks,
        epochs_run=result.epochs_run,
        stop_reason=result.stop_reason,
        final_val_mae=result.metrics[-1].val_mae if result.metrics else None,
        out=args.out,
    )
    return EXIT_OK


def cmd_scale_bench(args, cfg: dict) -> int:
    check_out(args.out, args.force)
    if args.csv:
        check_out(args.csv, args.force)
    rank_counts = _parse_int_list(args.ranks, "--ranks")
    model_cfg = ModelConfig.from_dict(cfg["model"])
    scratch = args.scratch or _scratch_dir()
    common = dict(
        model_config=model_cfg,
        transport=args.transport,
        seed=cfg["train"]["base_seed"],
        oversubscribe=args.oversubscribe,
        scratch_dir=scratch,
    )
    if args.mode == "strong":
        if not args.container:
            raise ConfigError("strong scaling needs --container")
        report = run_strong_scaling(args.container, rank_counts, **common)
    else:
        report = run_weak_scaling(
            rank_counts, samples_per_rank=args.samples_per_rank, **common
        )
    report.write_json(args.out)
    if args.csv:
        report.write_csv(args.csv)
    _event(
        "scaling benchmark finished",
        mode=args.mode,
        transport=args.transport,
        rank_counts=rank_counts,
        out=args.out,
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# HPO, selection, and uncertainty reports
# --------------------------------------------------------------------------


def cmd_hpo(args, cfg: dict) -> int:
    hp = cfg["hpo"]
    trials = args.trials if args.trials is not None else hp["max_trials"]
    workers = args.workers if args.workers is not None else hp["n_workers"]
    fidelity = args.fidelity if args.fidelity is not None else hp["fidelity_epochs"]
    budget = parse_duration(args.budget) if args.budget else hp["budget_s"]
    restart = None
    if os.path.exists(args.out):
        if args.resume:
            restart = read_history(args.out)
            _event("resuming search", previous_trials=len(restart), out=args.out)
        else:
            check_out(args.out, args.force)
            os.remove(args.out)
    if args.space:
        with open(args.space) as fh:
            space = SearchSpace.from_dict(json.load(fh))
    else:
        space = SearchSpace()
    checkpoint_dir = args.checkpoint_dir
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    task = dict(
        container_path=args.container,
        fidelity_epochs=fidelity,
        base_seed=cfg["train"]["base_seed"],
        sample_interval=cfg["telemetry"]["sample_interval_s"],
        checkpoint_dir=checkpoint_dir,
    )
    loop_kwargs = dict(
        n_workers=workers,
        max_trials=trials,
        budget_s=budget,
        seed=hp["seed"],
        warmup=hp["warmup"],
        n_candidates=hp["n_candidates"],
        history_path=args.out,
        restart_history=restart,
    )
    if args.process_workers:
        pool = ProcessWorkerPool(task, n_workers=workers,
                                 scratch_dir=_scratch_dir())
        try:
            completed = hpo_loop(space, pool=pool, **loop_kwargs)
        finally:
            pool.close()
    else:
        runner = partial(_run_hpo_trial, task)
        completed = hpo_loop(space, trial_runner=runner, **loop_kwargs)
    finite = [t.mae for t in completed if t.status == "completed"]
    _event(
        "search finished",
        trials=len(completed),
        best_mae=min(finite) if finite else None,
        failed=sum(1 for t in completed if t.status != "completed"),
        out=args.out,
    )
    return EXIT_OK


def _run_hpo_trial(task: dict, trial_id: int, config: ModelConfig):
    return run_trial(trial_id, config, **task)


def cmd_select_ensemble(args, cfg: dict) -> int:
    check_out(args.out, args.force)
    sel = cfg["selection"]
    policy = SelectionPolicy(
        mae_threshold=args.mae_threshold if args.mae_threshold is not None
        else sel["mae_threshold"],
        band_threshold=args.band_threshold if args.band_threshold is not None
        else sel["band_threshold"],
        band_size=args.band_size if args.band_size is not None
        else sel["band_size"],
    )
    history = read_history(args.history)
    members = select_ensemble(history, policy)
    front = pareto_front(history)
    doc = {
        "policy": {
            "mae_threshold": policy.mae_threshold,
            "band_threshold": policy.band_threshold,
            "band_size": policy.band_size,
        },
        "members": [t.to_dict() for t in members],
        "pareto": [t.to_dict() for t in front],
    }
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _event(
        "ensemble selected",
        history_trials=len(history),
        members=len(members),
        pareto=len(front),
        out=args.out,
    )
    return EXIT_OK


def cmd_uq_report(args, cfg: dict) -> int:
    with open(args.members) as fh:
        doc = json.load(fh)
    member_entries = doc.get("members", [])
    if not member_entries:
        raise ConfigError(f"{args.members} lists no ensemble members")
    checkpoints = []
    for entry in member_entries:
        path = entry.get("checkpoint_path")
        if not path or not os.path.exists(path):
            raise ConfigError(
                f"trial {entry.get('trial_id')} has no checkpoint at {path!r}"
            )
        checkpoints.append(load_checkpoint(path))
    os.makedirs(args.out, exist_ok=True)
    parity_path = os.path.join(args.out, "parity.csv")
    metrics_path = os.path.join(args.out, "metrics.csv")
    check_out(parity_path, args.force)
    check_out(metrics_path, args.force)
    rows = build_parity_rows(
        args.container,
        checkpoints,
        sample=args.sample,
        seed=args.seed,
        force_reduction=cfg["selection"]["force_reduction"],
    )
    metrics = split_metrics(rows)
    write_parity_csv(parity_path, rows)
    write_metrics_csv(metrics_path, metrics)
    _event(
        "uncertainty report written",
        members=len(checkpoints),
        structures=len(rows),
        out=args.out,
        splits={m.split: {"mae": m.mae, "rmse": m.rmse} for m in metrics},
    )
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser and entry point
# --------------------------------------------------------------------------


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{flag} expects comma-separated integers, got {text!r}")
    if not values:
        raise ConfigError(f"{flag} expects at least one integer")
    return values


def _scratch_dir() -> str:
    base = os.environ.get("GFM_RENDEZVOUS")
    if base:
        os.makedirs(base, exist_ok=True)
        return base
    return tempfile.mkdtemp(prefix="gfm-rendezvous-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gfm",
        description="Graph-dataset containers, distributed training, HPO, and "
        "ensemble uncertainty at desk scale.",
    )
    parser.add_argument(
        "--log-level",
        default=os.environ.get("GFM_LOG_LEVEL", "info"),
        help="debug/info/warning/error (default: env GFM_LOG_LEVEL or info)",
    )
    parser.add_argument("--config", help="JSON config file (validated, merged "
                        "over defaults)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        return p

    p = add("generate", cmd_generate, "generate labeled synthetic structures")
    p.add_argument("--out", required=True, help="output extended-XYZ file")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)

    p = add("preprocess", cmd_preprocess,
            "realign energies and drop force outliers")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force-limit", type=float,
                   help="force-norm threshold (default from config)")
    p.add_argument("--no-realign", action="store_true")

    p = add("write-container", cmd_write_container,
            "split structures and seal them into a binary container")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="container directory")
    p.add_argument("--subfiles", type=int)
    p.add_argument("--seed", type=int)

    p = add("bench-io", cmd_bench_io, "time parallel container reads")
    p.add_argument("--container", required=True)
    p.add_argument("--group", default="trainset")
    p.add_argument("--readers", default="1,2,4,8")
    p.add_argument("--out", help="JSON report path (default: stdout)")

    p = add("train", cmd_train, "train one model, optionally data-parallel")
    p.add_argument("--container", required=True)
    p.add_argument("--out", required=True, help="metrics JSON path")
    p.add_argument("--checkpoint", help="model checkpoint path")
    p.add_argument("--ranks", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--budget", help="wall-clock budget (e.g. 30m, 2h)")

    p = add("scale-bench", cmd_scale_bench, "strong/weak scaling benchmark")
    p.add_argument("--mode", choices=("strong", "weak"), required=True)
    p.add_argument("--container", help="required for strong scaling")
    p.add_argument("--ranks", required=True, help="e.g. 1,2,4")
    p.add_argument("--transport", choices=("thread", "process"),
                   default="thread")
    p.add_argument("--samples-per-rank", type=int, default=512)
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--csv", help="per-rank phase-time CSV path")
    p.add_argument("--scratch", help="scratch dir for containers/rendezvous")
    p.add_argument("--oversubscribe", action="store_true",
                   help="allow more ranks than CPUs")

    p = add("hpo", cmd_hpo, "asynchronous hyperparameter search")
    p.add_argument("--container", required=True)
    p.add_argument("--out", required=True, help="JSONL trial history path")
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--fidelity", type=int, help="epochs per trial")
    p.add_argument("--budget", help="wall-clock budget (e.g. 2h)")
    p.add_argument("--space", help="search-space JSON file")
    p.add_argument("--resume", action="store_true",
                   help="warm-start from the existing history file")
    p.add_argument("--process-workers", action="store_true",
                   help="run workers as OS processes instead of threads")
    p.add_argument("--checkpoint-dir", help="directory for per-trial checkpoints")

    p = add("select-ensemble", cmd_select_ensemble,
            "pick ensemble members from a trial history")
    p.add_argument("--history", required=True, help="JSONL trial history")
    p.add_argument("--out", required=True, help="members JSON path")
    p.add_argument("--mae-threshold", type=float)
    p.add_argument("--band-threshold", type=float)
    p.add_argument("--band-size", type=int)

    p = add("uq-report", cmd_uq_report,
            "ensemble parity and uncertainty tables")
    p.add_argument("--container", required=True)
    p.add_argument("--members", required=True, help="members JSON from "
                   "select-ensemble")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--sample", type=int, help="structures per split")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _write_json_out(doc: dict, out: str | None, force: bool) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out:
        check_out(out, force)
        with open(out, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level)
        cfg = load_config_file(args.config)
        return args.handler(args, cfg)
    except GFMError as exc:
        log.error(str(exc))
        return EXIT_ERROR
    except OSError as exc:
        log.error(f"i/o failure: {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
