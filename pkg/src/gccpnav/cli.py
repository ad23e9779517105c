"""Command-line entry point: ``gccpnav train|eval|trace|plot``.

Config files are YAML trees mirroring :class:`gccpnav.config.RunConfig`::

    seed: 0
    scenarios: [turn_left, go_straight, turn_right]
    gccp: learned            # learned | cv | disabled
    goal_conditioning: true
    max_steps: 600
    eval_flows: 50
    predictor_lr: 0.0001
    schedule: {episodes: 2000, planner_freeze: 500, mask_start: 800, window: 10, ...}
    traffic: {spawn_rate: 0.15, max_vehicles: 10, speed_range: [4.0, 8.0], warmup_steps: 50}
    policy_net: {dim: 128, heads: 4, conv_channels: [8, 16, 16]}
    predictor_net: {dim: 128, heads: 4, conv_channels: [8, 16, 16]}
    ppo: {gamma: 0.99, lam: 0.95, clip: 0.2, entropy_coef: 0.01, minibatch: null, ...}
    actions: {keep: [0.5, 0.0, 0.0]}   # per-step (dx, dy, dheading) overrides

Unknown keys are rejected. Command-line flags override the file, and
``--set key.path=value`` overrides any single leaf.

``eval`` and ``trace`` read ``config.yaml`` from the run directory that owns
the checkpoint (``<run>/checkpoints/x.ckpt``) unless ``--config`` is given,
so network sizes always match the weights.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import config as config_mod
from .config import ConfigError, RunConfig
from .gccp import debug_records
from .roadnet import SCENARIO_IDS
from .sim import write_trajectory_log
from .trainer import Trainer, rolling_success

log = logging.getLogger("gccpnav")

EVAL_SEED_BASE = 1_000_000_000   # keeps eval flows disjoint from training flows


class CliError(Exception):
    pass


# config assembly

def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def build_config(args, default_path: Path | None = None) -> RunConfig:
    overrides = _parse_set(getattr(args, "set", None))
    if args.scenario:
        overrides["scenarios"] = list(args.scenario)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.gccp is not None:
        overrides["gccp"] = args.gccp
    if args.goal_conditioning is not None:
        overrides["goal_conditioning"] = args.goal_conditioning == "on"
    if getattr(args, "episodes", None) is not None:
        overrides["schedule.episodes"] = args.episodes
    path = args.config
    if path is None and default_path is not None and default_path.exists():
        path = default_path
    if path is not None and not Path(path).exists():
        raise CliError(f"config file not found: {path}")
    return config_mod.load(path, overrides)


def _checkpoint(args) -> Path:
    if args.checkpoint is None:
        raise CliError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return path


def _run_config_for(ckpt: Path) -> Path:
    return ckpt.resolve().parent.parent / "config.yaml"


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output dir {out}: {exc.strerror}") from None
    return out


# commands

def cmd_train(args) -> int:
    cfg = build_config(args)
    out = _out_dir(args)
    config_mod.dump(cfg, out / "config.yaml")
    log.info("training %d episodes into %s", cfg.schedule.episodes, out)
    rows = Trainer(cfg, out_dir=out).train()
    ok = sum(r["success"] for r in rows)
    print(f"trained {len(rows)} episodes; success {ok}/{len(rows)}; metrics {out / 'metrics.csv'}")
    return 0


def eval_flow_seeds(cfg: RunConfig) -> list[int]:
    return [EVAL_SEED_BASE + cfg.seed * 100_000 + k for k in range(cfg.eval_flows)]


def evaluate(trainer: Trainer, cfg: RunConfig) -> list[dict]:
    """Greedy rollouts over ``eval_flows`` seeded flows per scenario, masking on unless disabled."""
    records = []
    active = cfg.gccp != "disabled"
    for sc in trainer.scenarios:
        for fs in eval_flow_seeds(cfg):
            res = trainer.run_episode(sc, fs, 0, learn=False, greedy=True, mask_active=active)
            records.append({"scenario": sc.id, "flow_seed": fs, "steps": res.steps, "success": int(res.success),
                            "collision": int(res.collision), "events": "|".join(sorted(res.events))})
    return records


def summarize(records: list[dict], scenarios: list[str]) -> list[dict]:
    rows = []
    for name in list(scenarios) + ["overall"]:
        sel = [r for r in records if name == "overall" or r["scenario"] == name]
        n = len(sel)
        rows.append({"scenario": name, "episodes": n,
                     "success_pct": round(100.0 * sum(r["success"] for r in sel) / n, 2),
                     "collision_pct": round(100.0 * sum(r["collision"] for r in sel) / n, 2)})
    return rows


def format_table(rows: list[dict]) -> str:
    head = f"{'Scenario':<12}{'Success (%)':>13}{'Collision (%)':>15}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['scenario']:<12}{r['success_pct']:>13.1f}{r['collision_pct']:>15.1f}")
    return "\n".join(lines)


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_eval(args) -> int:
    ckpt = _checkpoint(args)
    cfg = build_config(args, _run_config_for(ckpt))
    out = _out_dir(args)
    trainer = Trainer(cfg)
    trainer.load(ckpt)
    records = evaluate(trainer, cfg)
    summary = summarize(records, cfg.scenarios)
    _write_csv(out / "eval_episodes.csv", records)
    _write_csv(out / "eval_summary.csv", summary)
    print(format_table(summary))
    return 0


def trace_records(trainer: Trainer, scenario_id: str, flow_seed: int):
    """Roll out one greedy episode and return (per-window records, final world)."""
    records: list[dict] = []
    active = trainer.cfg.gccp != "disabled"
    sc = next(s for s in trainer.scenarios if s.id == scenario_id)

    def on_window(rec, world):
        w = len([r for r in records if r["kind"] == "choice"])
        extra = {"kind": "subgoal", "window": w, "t": rec.t}
        if rec.mask is not None:
            records.extend(debug_records(rec.mask, rec.subgoals, extra))
        else:
            for i, g in enumerate(rec.subgoals):
                records.append({**extra, "subgoal_index": i, "subgoal": [float(v) for v in g[:3]],
                                "mask": float(rec.mask_entries[i]), "raw_mask": float(rec.mask_entries[i])})
        st = rec.state
        records.append({
            "kind": "choice", "window": w, "t": rec.t, "choice": int(rec.choice),
            "probs": np.round(rec.probs, 8).tolist(),
            "mask": [float(v) for v in rec.mask_entries],
            "fallback": bool(rec.mask is not None and rec.mask.fallback),
            "ego_world": [round(float(v), 6) for v in st.ego_world],
            "neighbours": int(np.sum(st.valid[1:])),
            "subgoal_world": [round(float(v), 6) for v in rec.subgoals_world[rec.choice]],
            "actions": [trainer.planner.actions[a].name for a in rec.actions],
            "poses": np.round(np.asarray(rec.poses), 6).tolist(),
            "reached": bool(rec.reached), "reward": round(rec.reward, 10),
        })

    res = trainer.run_episode(sc, flow_seed, 0, learn=False, greedy=True, mask_active=active, on_window=on_window)
    return records, res, trainer._last_world


def cmd_trace(args) -> int:
    ckpt = _checkpoint(args)
    cfg = build_config(args, _run_config_for(ckpt))
    out = _out_dir(args)
    scenario = args.scenario[0] if args.scenario else cfg.scenarios[0]
    if scenario not in cfg.scenarios:
        cfg.scenarios = [scenario]
    trainer = Trainer(cfg)
    trainer.load(ckpt)
    records, res, world = trace_records(trainer, scenario, cfg.seed)
    with open(out / "trace.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    with open(out / "tracks.jsonl", "w") as fh:
        write_trajectory_log(world, fh)
    outcome = ",".join(sorted(res.events)) or "none"
    print(f"traced {scenario} seed {cfg.seed}: {res.windows} windows, {res.steps} steps, events {outcome}")
    return 0


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    src = Path(args.run)
    out = _out_dir(args) if args.out else src
    made = []
    metrics = src / "metrics.csv"
    if metrics.exists():
        with open(metrics) as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            ep = [int(r["episode"]) for r in rows]
            roll = rolling_success(metrics, window=args.window)
            coll = [int(r["collision"]) for r in rows]
            with open(out / "curves.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["episode", "rolling_success", "collision", "probe_ade"])
                for e, s, c, r in zip(ep, roll, coll, rows):
                    w.writerow([e, repr(round(float(s), 10)), c, r["probe_ade"]])
            fig, axes = plt.subplots(1, 2, figsize=(10, 4))
            axes[0].plot(ep, roll)
            axes[0].set_xlabel("episode")
            axes[0].set_ylabel(f"success rate (rolling {args.window})")
            ade = [(e, float(r["probe_ade"])) for e, r in zip(ep, rows) if r["probe_ade"]]
            if ade:
                axes[1].plot(*zip(*ade))
            axes[1].set_xlabel("episode")
            axes[1].set_ylabel("probe ADE (m)")
            fig.tight_layout()
            fig.savefig(out / "training.png", dpi=100)
            plt.close(fig)
            made.append("training.png")
    trace = src / "trace.jsonl"
    if trace.exists():
        with open(trace) as fh:
            recs = [json.loads(line) for line in fh]
        fig, ax = plt.subplots(figsize=(6, 6))
        for r in recs:
            if r["kind"] == "choice":
                p = np.asarray(r["poses"])
                ax.plot(p[:, 0], p[:, 1], "-", color="tab:blue", lw=1.5)
                ax.plot(*r["subgoal_world"][:2], "*", color="tab:green", ms=8)
        ax.set_aspect("equal")
        ax.set_xlabel("x (m)")
        ax.set_ylabel("y (m)")
        ax.set_title("executed ego path and chosen subgoals")
        fig.tight_layout()
        fig.savefig(out / "trace.png", dpi=100)
        plt.close(fig)
        made.append("trace.png")
    if not made:
        raise CliError(f"nothing to plot in {src}: expected metrics.csv or trace.jsonl")
    print("wrote " + ", ".join(str(out / m) for m in made))
    return 0


# parser

def _common(p: argparse.ArgumentParser, episodes: bool = False) -> None:
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--scenario", action="append", choices=SCENARIO_IDS,
                   help="scenario id (repeat for several; default all three)")
    p.add_argument("--seed", type=int)
    p.add_argument("--gccp", choices=("learned", "cv", "disabled"))
    p.add_argument("--goal-conditioning", choices=("on", "off"))
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config leaf")
    p.add_argument("--out", required=True, help="output directory")
    if episodes:
        p.add_argument("--episodes", type=int)
    else:
        p.add_argument("--checkpoint", help="checkpoint file written by train")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gccpnav", description="Hierarchical RL navigation at unsignalised junctions")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("train", help="train all three networks"), episodes=True)
    _common(sub.add_parser("eval", help="greedy evaluation over seeded flows"))
    _common(sub.add_parser("trace", help="dump one rollout window by window"))
    p = sub.add_parser("plot", help="render figures from a run or trace directory")
    p.add_argument("run", help="directory holding metrics.csv and/or trace.jsonl")
    p.add_argument("--out", help="where to write figures (default: the run directory)")
    p.add_argument("--window", type=int, default=100, help="rolling success window")
    return ap


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "trace": cmd_trace, "plot": cmd_plot}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, ConfigError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
