"""Command line entry point: ``learngene <subcommand> [flags]``.

Exit codes: 0 ok, 1 replay mismatch, 2 config error, 3 NaN abort, 4 checkpoint corruption.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .analysis import (
    ALL_TASKS,
    bootstrap_ci,
    form_probability_trace,
    instinct_probe,
    newborn,
    run_baseline,
    transfer_matrix,
)
from .checkpoint import CheckpointError, list_checkpoints, load_checkpoint, read_checkpoint_body
from .config import CONFIG_ENV_VAR, PROFILES, ConfigError, RunConfig, load_config
from .evolution import EvolutionConfig
from .export import export_metrics
from .ppo import PPOConfig
from .runner import NaNAbort, read_jsonl, replay_verify, run_evolution
from .terrain import Dynamics, TerrainEnv, make_heightfield

EXIT_OK, EXIT_REPLAY, EXIT_CONFIG, EXIT_NAN, EXIT_CHECKPOINT = 0, 1, 2, 3, 4

_TOP_FIELDS = ("hidden_width", "terrain_scale", "output_dir", "checkpoint_every", "workers")


def _config_fields():
    """(name, type) of every scalar RunConfig field, flattened across the nested groups."""
    seen = {}
    for cls in (EvolutionConfig, PPOConfig, Dynamics):
        for f in dataclasses.fields(cls):
            if f.name not in seen:
                seen[f.name] = type(f.default)
    defaults = RunConfig()
    for name in _TOP_FIELDS:
        seen[name] = type(getattr(defaults, name))
    seen.pop("steps_per_episode_max", None)
    return seen


def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help=f"JSON/YAML config file (default: ${CONFIG_ENV_VAR})")
    g.add_argument("--profile", choices=sorted(PROFILES), default=None)
    for name, typ in _config_fields().items():
        g.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, type=typ, default=None, metavar=typ.__name__.upper())


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.profile)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.replace(**overrides)


def _pool_from(path):
    return load_checkpoint(path).pool if path else None


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def cmd_evolve(args) -> int:
    cfg = _resolve_config(args)
    result = run_evolution(cfg, resume=args.resume)
    if cfg.evolution.generations == 0:
        print(json.dumps(cfg.to_dict(), indent=1, sort_keys=True))
    print(f"{result.generations_run} generation(s) run; final checkpoint: {result.final_checkpoint}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _resolve_config(args)
    pool = _pool_from(args.checkpoint)
    rows = []
    for k in range(args.seeds):
        res = run_baseline(args.kind, args.task, args.episodes or cfg.evolution.lt, args.seed + k, cfg, pool,
                           pretrain_multiple=args.pretrain_multiple)
        rows.append(res.curve)
    arr = np.asarray(rows)
    out = Path(args.out) if args.out else None
    lines = ["episode,mean,low,high"]
    for e in range(arr.shape[1] if arr.size else 0):
        m, lo, hi = bootstrap_ci(arr[:, e]) if arr.shape[0] > 1 else (arr[0, e],) * 3
        lines.append(f"{e},{m!r},{lo!r},{hi!r}")
    text = "\n".join(lines) + "\n"
    if out:
        out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_instinct(args) -> int:
    cfg = _resolve_config(args)
    pool = _pool_from(args.checkpoint)
    kind = "learngene" if pool is not None else "scratch"
    dist, cost = [], []
    for k in range(args.seeds):
        seed = args.seed + k
        genome, _ = newborn(cfg, kind, seed, pool)
        env = TerrainEnv(make_heightfield(args.task, seed, cfg.terrain_scale), cfg.dynamics)
        rep = instinct_probe(genome, env, args.steps or cfg.dynamics.t_end)
        dist.append(rep.forward_distance)
        cost.append(rep.control_cost)
    summary = {"kind": kind, "task": args.task, "seeds": args.seeds,
               "forward_distance": dist, "control_cost": cost}
    if args.seeds > 1:
        summary["forward_distance_ci"] = bootstrap_ci(dist)
        summary["control_cost_ci"] = bootstrap_ci(cost)
    _write_json(summary, args.out)
    return EXIT_OK


def cmd_transfer_matrix(args) -> int:
    cfg = _resolve_config(args)
    tm = transfer_matrix(cfg, tasks=args.tasks or ALL_TASKS, agents=args.agents, episodes=args.episodes,
                         eval_episodes=args.eval_episodes, seed=args.seed)
    tm.to_csv(args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_trace(args) -> int:
    paths = list_checkpoints(args.run_dir)
    trace = form_probability_trace(paths)
    lines = [",".join(["generation"] + trace.forms)]
    for g, row in zip(trace.generations, trace.probabilities):
        lines.append(",".join([str(g)] + [repr(row[f]) for f in trace.forms]))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_replay_verify(args) -> int:
    ckpt = Path(args.checkpoint)
    read_checkpoint_body(ckpt)
    events = Path(args.events) if args.events else ckpt.parent.parent / "log" / "events.jsonl"
    report = replay_verify(ckpt, read_jsonl(events), eta=args.eta, beta=args.beta)
    print(report)
    return EXIT_OK if report.passed else EXIT_REPLAY


def cmd_export(args) -> int:
    paths = export_metrics(args.run_dir, args.out)
    for p in paths.values():
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="learngene", description="Evolve and analyse inheritable network layers.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evolve", help="run the generational loop")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_evolve)

    p = sub.add_parser("baseline", help="reward curves of scratch / learngene / pretrain agents")
    _add_config_args(p)
    p.add_argument("--kind", choices=("scratch", "learngene", "pretrain"), default="scratch")
    p.add_argument("--task", default="Step")
    p.add_argument("--episodes", type=int, default=None, help="default: one lifetime (lt)")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", help="pool checkpoint (learngene kind)")
    p.add_argument("--pretrain-multiple", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("instinct", help="probe newborn behaviour with learning off")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="pool checkpoint; omit for random newborns")
    p.add_argument("--task", default="Step")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_instinct)

    p = sub.add_parser("transfer-matrix", help="knowledge transfer rates between tasks")
    _add_config_args(p)
    p.add_argument("--tasks", nargs="+")
    p.add_argument("--agents", type=int, default=3)
    p.add_argument("--episodes", type=int, default=None, help="default: one lifetime")
    p.add_argument("--eval-episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="transfer_matrix.csv")
    p.set_defaults(func=cmd_transfer_matrix)

    p = sub.add_parser("trace", help="form probability per generation")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("replay-verify", help="recompute pool scores from the event log")
    p.add_argument("checkpoint")
    p.add_argument("--events", help="events.jsonl (default: <run>/log/events.jsonl)")
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.set_defaults(func=cmd_replay_verify)

    p = sub.add_parser("export", help="write CSV tables for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NaNAbort as exc:
        print(f"NaN abort: {exc} (diagnostic checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_NAN
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
