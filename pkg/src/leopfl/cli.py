"""Command-line experiment runner.

Subcommands: ``topology``, ``sr-train``, ``pfl-train`` and ``report``.
Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import checkpoint, config as cfgmod, experiment as ex, pfl, plotting
from .config import ConfigError, ExperimentConfig
from .constellation import (
    build_walker_star,
    topology_series,
    write_constellation_csv,
    write_degree_csv,
    write_topology_csv,
)
from .sr import SrModel

log = logging.getLogger("leopfl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

SR_COLUMNS = ["round", "loss", "psnr_sr", "psnr_bicubic", "ssim_sr", "ssim_bicubic"]


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def resolve_config(args) -> ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg = cfg.with_out(args.out)
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.experiment.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------- commands


def cmd_topology(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    rounds = cfg.pfl.rounds if args.rounds is None else args.rounds
    sats = build_walker_star(cfg.constellation, cfg.experiment.seed)
    series = topology_series(sats, cfg.constellation, rounds, args.mode or cfg.pfl.topology)
    write_constellation_csv(out / "constellation.csv", sats)
    write_topology_csv(out / "topology.csv", series)
    write_degree_csv(out / "degrees.csv", series)
    log.info("wrote %d satellites, %d rounds to %s", len(sats), rounds, out)
    return EXIT_OK


def _train_sr(cfg: ExperimentConfig, train, test) -> ex.SrRun:
    def report(row):
        log.info("sr round %d loss %.3g psnr %s", row.round, row.loss, row.psnr_sr)

    return ex.run_sr(cfg, train, test, on_round=report)


def write_sr_outputs(out: Path, run: ex.SrRun) -> None:
    with open(out / "sr_metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SR_COLUMNS)
        for row in run.rows:
            w.writerow([_fmt(v) for v in asdict(row).values()])
    checkpoint.save_params(out / "sr_model.ofl", run.model.params)
    last = run.rows[-1]
    _write_json(
        out / "sr_summary.json",
        {
            "cohort": run.cohort_ids,
            "rounds": last.round,
            "psnr_sr": last.psnr_sr,
            "psnr_bicubic": last.psnr_bicubic,
            "ssim_sr": last.ssim_sr,
            "ssim_bicubic": last.ssim_bicubic,
        },
    )


def cmd_sr_train(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(cfg)
    data = ex.load_dataset(cfg)
    train, test = ex.split_dataset(cfg, data)
    run = _train_sr(cfg, train, test)
    write_sr_outputs(out, run)
    last = run.rows[-1]
    log.info("cohort %s; final PSNR %.3f dB (bicubic %.3f)", run.cohort_ids, last.psnr_sr, last.psnr_bicubic)
    return EXIT_OK


def cmd_pfl_train(cfg: ExperimentConfig, args) -> int:
    if args.preprocess:
        cfg = replace(cfg, pfl=replace(cfg.pfl, preprocess=args.preprocess))
    out = _out_dir(cfg)
    data = ex.load_dataset(cfg)
    train, test = ex.split_dataset(cfg, data)
    sr_model = None
    if cfg.pfl.preprocess == "sr":
        if args.sr_model:
            params = checkpoint.load_params(args.sr_model)
            sr_model = SrModel(cfg.sr.hyper(data.images.shape[1]), params, cfg.sr.offset)
        else:
            run = _train_sr(cfg, train, test)
            write_sr_outputs(out, run)
            sr_model = run.model
    setup = ex.pfl_setup(cfg, train, test, cfg.pfl.preprocess, sr_model)

    def report(r, states):
        log.info("pfl round %d mean sparsity %.3f", r, float(np.mean([s.sparsity for s in states])))

    result = ex.run_pfl_experiment(cfg, setup, jobs=args.jobs, on_round=report)
    pfl.write_metrics_csv(out / "metrics.csv", result.metrics)
    pfl.write_prune_log(out / "prune_events.csv", result.prune_log)
    summary = pfl.summarize(result)
    summary.update(seed=cfg.experiment.seed, preprocess=cfg.pfl.preprocess, dense=cfg.pfl.dense)
    _write_json(out / "summary.json", summary)
    models = out / "models"
    models.mkdir(exist_ok=True)
    for st in result.states:
        checkpoint.save_params(models / f"sat{st.sat_id:03d}.ofl", st.params)
        checkpoint.save_mask(models / f"sat{st.sat_id:03d}.mask", st.mask.segments, st.mask.bits)
    cfgmod.save(out / "config.ini", cfg)
    log.info("final mean accuracy %.4f", summary["final_mean_accuracy"])
    return EXIT_OK


# ----------------------------------------------------------------- report


def find_runs(paths) -> list[Path]:
    """Run directories (holding ``metrics.csv``) among or directly under ``paths``."""
    runs = []
    for p in map(Path, paths):
        if not p.is_dir():
            raise FileNotFoundError(f"{p}: no such directory")
        if (p / "metrics.csv").exists():
            runs.append(p)
        else:
            runs.extend(sorted(d for d in p.iterdir() if (d / "metrics.csv").exists()))
    if not runs:
        raise FileNotFoundError("no run directories with metrics.csv found")
    return runs


def _read_metrics(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return [], {}
    cols = [c for c in rows[0] if c not in ("round", "satellite")]
    # seeds pick different participants, so rows align by position within a round
    keys, slot, last = [], 0, None
    for r in rows:
        rnd = int(r["round"])
        slot = slot + 1 if rnd == last else 0
        keys.append((rnd, slot))
        last = rnd
    values = {c: np.array([float(r[c]) for r in rows]) for c in cols}
    return keys, values


def _group_label(run: Path) -> str:
    summary = run / "summary.json"
    if summary.exists():
        info = json.loads(summary.read_text())
        label = info.get("preprocess", "run")
        return f"{label}-dense" if info.get("dense") else label
    return "run"


def aggregate_group(runs: list[Path]):
    """(keys, per-column stacked values) over runs sharing one row layout."""
    keys, first = _read_metrics(runs[0] / "metrics.csv")
    stacks = {c: [v] for c, v in first.items()}
    for run in runs[1:]:
        k, vals = _read_metrics(run / "metrics.csv")
        if k != keys:
            raise ValueError(f"{run}: metrics rows do not line up with {runs[0]}")
        for c in stacks:
            stacks[c].append(vals[c])
    return keys, {c: np.stack(v) for c, v in stacks.items()}


def cmd_report(cfg: ExperimentConfig, args) -> int:
    runs = find_runs(args.runs)
    out = Path(args.out or cfg.experiment.out)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[Path]] = {}
    for run in runs:
        groups.setdefault(_group_label(run), []).append(run)

    width = max(len(m) for m in groups.values())
    per_round: dict[str, dict[str, tuple[np.ndarray, np.ndarray]]] = {}
    rounds_axis = None
    with open(out / "aggregate.csv", "w", newline="") as fh, \
            open(out / "rounds.csv", "w", newline="") as rh:
        w = csv.writer(fh)
        rw = csv.writer(rh)
        header_done = False
        for label in sorted(groups):
            members = groups[label]
            keys, stacks = aggregate_group(members)
            cols = list(stacks)
            if not header_done:
                head = ["group", "round", "slot"]
                for c in cols:
                    head += [f"{c}_mean", f"{c}_std"] + [f"{c}_run{k}" for k in range(width)]
                w.writerow(head)
                rw.writerow(["group", "round", "runs"] + [f"{c}_{s}" for c in cols for s in ("mean", "std")])
                header_done = True
            for i, (r, n) in enumerate(keys):
                row = [label, r, n]
                for c in cols:
                    vals = stacks[c][:, i]
                    pad = [""] * (width - len(vals))
                    row += [_fmt(vals.mean()), _fmt(vals.std())] + [_fmt(v) for v in vals] + pad
                w.writerow(row)
            # satellite mean per run, then mean/std across runs
            round_ids = np.array(sorted({r for r, _ in keys}))
            key_rounds = np.array([r for r, _ in keys])
            per_round[label] = {}
            for r in round_ids:
                sel = key_rounds == r
                row = [label, int(r), len(members)]
                for c in cols:
                    run_means = stacks[c][:, sel].mean(axis=1)
                    row += [_fmt(run_means.mean()), _fmt(run_means.std())]
                rw.writerow(row)
            for c in cols:
                means = np.array([stacks[c][:, key_rounds == r].mean(axis=1) for r in round_ids])
                per_round[label][c] = (means.mean(axis=1), means.std(axis=1))
            rounds_axis = round_ids

    figures = {
        "accuracy": "personalized accuracy",
        "global_accuracy": "global-test accuracy",
        "sparsity": "sparsity",
        "comm_delay_s": "communication delay (s)",
        "comp_delay_s": "computation delay (s)",
        "energy_j": "energy (J)",
    }
    for col, ylabel in figures.items():
        series = {g: per_round[g][col] for g in sorted(per_round) if col in per_round[g]}
        if series:
            plotting.plot_curves(out / f"{col}.png", rounds_axis, series, ylabel)
    log.info("aggregated %d runs in %d group(s) into %s", len(runs), len(groups), out)
    return EXIT_OK


# ------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="leopfl", description="Satellite PFL simulator")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="INI experiment config")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--jobs", type=int, default=1, help="worker threads for local training")
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("topology", parents=[common], help="dump per-round ISL adjacency")
    t.add_argument("--rounds", type=int, default=None)
    t.add_argument("--mode", choices=["ring", "los", "full"], default=None)

    sub.add_parser("sr-train", parents=[common], help="decentralized SR training")

    f = sub.add_parser("pfl-train", parents=[common], help="personalized FL with pruning")
    f.add_argument("--preprocess", choices=["original", "bicubic", "sr"], default=None)
    f.add_argument("--sr-model", type=str, default=None, help="SR checkpoint to reuse")

    r = sub.add_parser("report", parents=[common], help="aggregate run directories")
    r.add_argument("runs", nargs="+", help="run directories or parents of run directories")
    return p


COMMANDS = {
    "topology": cmd_topology,
    "sr-train": cmd_sr_train,
    "pfl-train": cmd_pfl_train,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        if getattr(args, "rounds", None) is not None and args.rounds < 0:
            raise ConfigError("--rounds must be >= 0")
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, ArithmeticError, checkpoint.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
