"""Command line entry point: ``grfflock {train,eval,bench,replay,energy-audit}``.

Every run writes ``manifest.json`` to its output directory before starting
and rewrites it with the end time and status when it finishes.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as config_mod
from .config import ConfigError, RunConfig, replace
from .energy import breakdown_table, decoupled_pairwise_energy, global_energy, local_rewards
from .evaluation import (AGG_COLUMNS, CONTROLLERS, RAW_COLUMNS, flocking_order, make_controller,
                         make_training_evaluator, run_benchmark, run_episode, tracking_distance, write_csv)
from .plotting import plot_benchmark, plot_learning_curve, plot_trajectory
from .policy import CheckpointError
from .trajectory import TrajectoryError, read_jsonl, write_jsonl
from .world import ScenarioInfeasible, init_scenario

log = logging.getLogger("grfflock")

REPLAY_TOLERANCE = 1e-9
ENERGY_COLUMNS = ["step", "t", "robot", "smoothness", "control", "tracking", "obstacle", "brake",
                  "pairwise_mean", "local_exponent", "local_reward"]


def code_version() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    code_version: str
    out_dir: str
    outputs: list[str] = field(default_factory=list)
    started: str = field(default_factory=_now)
    finished: str | None = None
    status: str = "running"

    def write(self) -> None:
        path = Path(self.out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.__dict__, indent=2, default=str) + "\n")

    def finish(self, status: str = "ok") -> None:
        self.finished = _now()
        self.status = status
        self.write()


def parse_seeds(text: str | None, default: list[int]) -> list[int]:
    """``"3"``, ``"0,2,5"`` or a half-open range ``"0:10"``."""
    if text is None:
        return default
    try:
        if ":" in text:
            lo, hi = text.split(":", 1)
            return list(range(int(lo), int(hi)))
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r} (use 3, 0,2,5 or 0:10)", "--seed") from None


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> int:
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=parse_seeds(args.seed, [])[0]))
    if args.dry_run:
        print(config_mod.dumps(cfg), end="")
        return 0
    from .trainer import train

    out = Path(args.out or "runs/train")
    manifest = RunManifest("train", config_mod.to_dict(cfg), [cfg.train.seed], code_version(), str(out))
    manifest.write()
    evaluate = make_training_evaluator(cfg, cfg.train.eval_episodes)
    result = train(cfg, out, evaluate=evaluate)
    fig = plot_learning_curve(result.rows, out / "learning_curve.png")
    manifest.outputs = [str(p) for p in result.checkpoints] + [str(result.curve_path), str(fig)]
    manifest.finish()
    print(f"wrote {len(result.checkpoints)} checkpoints and {result.curve_path}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    seeds = parse_seeds(args.seed, [cfg.scenario.seed])
    name = args.controller or ("learned" if args.checkpoint else "olfati-saber")
    if args.dry_run:
        print(config_mod.dumps(cfg), end="")
        return 0
    out = Path(args.out or "runs/eval")
    manifest = RunManifest("eval", config_mod.to_dict(cfg), seeds, code_version(), str(out))
    manifest.write()
    controller = make_controller(name, cfg.scenario, cfg.baselines, args.checkpoint)
    rows = []
    for seed in seeds:
        res = run_episode(controller, cfg.scenario, seed, cfg.energy, record=True)
        traj = out / f"trajectory_{name}_seed{seed}.jsonl"
        write_jsonl(traj, res.records)
        fig = plot_trajectory(read_jsonl(traj), traj.with_suffix(".png"))
        manifest.outputs += [str(traj), str(fig)]
        rows.append({"controller": name, "n_robots": cfg.scenario.n_robots, "n_obstacles": cfg.scenario.n_obstacles,
                     "seed": seed, "phi_o": res.phi_o, "phi_t": res.phi_t, "phi_s": res.phi_s,
                     "ms_per_decision": res.ms_per_decision})
        print(f"seed {seed}: phi_o={res.phi_o} phi_t={res.phi_t} phi_s={res.phi_s}")
    metrics = write_csv(out / "metrics.csv", rows, RAW_COLUMNS)
    manifest.outputs.append(str(metrics))
    manifest.finish()
    return 0


def cmd_bench(cfg: RunConfig, args) -> int:
    bench = cfg.bench
    controllers = args.controller.split(",") if args.controller else list(bench.controllers)
    seeds = parse_seeds(args.seed, list(bench.seeds))
    checkpoint = args.checkpoint or bench.checkpoint
    cells = [(r, o) for r in bench.n_robots for o in bench.n_obstacles]
    if args.dry_run:
        print(config_mod.dumps(cfg), end="")
        return 0
    out = Path(args.out or "runs/bench")
    manifest = RunManifest("bench", config_mod.to_dict(cfg), seeds, code_version(), str(out))
    manifest.write()
    report = run_benchmark(controllers, cells, seeds, cfg.scenario, None, cfg.baselines, checkpoint)
    raw = write_csv(out / "bench_raw.csv", report.rows, RAW_COLUMNS)
    agg = write_csv(out / "bench_aggregate.csv", report.aggregates, AGG_COLUMNS)
    fig = plot_benchmark(report.aggregates, out / "bench.png")
    manifest.outputs = [str(raw), str(agg), str(fig)]
    manifest.finish("ok" if not report.errors else "partial")
    print(f"{len(report.rows)} episodes, {len(report.errors)} failures; aggregate in {agg}")
    return 0


def replay(path: str | Path):
    """Recompute metric series and per-robot energies from a trajectory log.

    Returns ``(metric_rows, energy_rows, max_mismatch)`` where the mismatch is
    the largest absolute difference against the metrics stored in the log.
    """
    traj = read_jsonl(path)
    energy = traj.energy
    metric_rows, energy_rows = [], []
    worst = 0.0
    for k, rec in enumerate(traj.steps):
        world = traj.world_at(k)
        phi_o, phi_t = flocking_order(world), tracking_distance(world)
        logged = rec.get("metrics") or {}
        for name, value in (("phi_o", phi_o), ("phi_t", phi_t)):
            if name in logged:
                ref = logged[name]
                if (ref is None) != (value is None):
                    worst = float("inf")
                elif ref is not None:
                    worst = max(worst, abs(ref - value))
        metric_rows.append({"step": rec["step"], "t": rec["t"], "phi_o": phi_o, "phi_t": phi_t,
                            "logged_phi_o": logged.get("phi_o"), "logged_phi_t": logged.get("phi_t")})
        accel = traj.accelerations(k)
        rewards = local_rewards(world, accel, energy)
        for i, b in enumerate(breakdown_table(world, accel, energy)):
            energy_rows.append({"step": rec["step"], "t": rec["t"], "robot": i,
                                "smoothness": b.smoothness, "control": b.control, "tracking": b.tracking,
                                "obstacle": b.obstacle, "brake": b.brake, "pairwise_mean": b.pairwise_sum,
                                "local_exponent": -float(np.log(rewards[i])), "local_reward": float(rewards[i])})
    return metric_rows, energy_rows, worst


def cmd_replay(cfg: RunConfig, args) -> int:
    if not args.trajectory:
        raise ConfigError("replay needs a trajectory file", "trajectory")
    src = Path(args.trajectory)
    out = Path(args.out or src.parent)
    metric_rows, energy_rows, worst = replay(src)
    metrics = write_csv(out / f"{src.stem}_replay_metrics.csv", metric_rows, list(metric_rows[0]) if metric_rows else ["step"])
    audit = write_csv(out / f"{src.stem}_energy_audit.csv", energy_rows, ENERGY_COLUMNS)
    print(f"{len(metric_rows)} steps replayed; max metric mismatch {worst:.3g}; wrote {metrics} and {audit}")
    if worst > REPLAY_TOLERANCE:
        print(f"error: recomputed metrics differ from the log by {worst:.3g}", file=sys.stderr)
        return 1
    return 0


def cmd_energy_audit(cfg: RunConfig, args) -> int:
    """Energy terms of a freshly initialised scenario (zero acceleration)."""
    seed = parse_seeds(args.seed, [cfg.scenario.seed])[0]
    if args.dry_run:
        print(config_mod.dumps(cfg), end="")
        return 0
    out = Path(args.out or "runs/energy-audit")
    world = init_scenario(cfg.scenario, seed)
    accel = np.zeros((world.n_robots, 2))
    rewards = local_rewards(world, accel, cfg.energy)
    rows = []
    for i, b in enumerate(breakdown_table(world, accel, cfg.energy)):
        rows.append({"step": 0, "t": world.clock, "robot": i, "smoothness": b.smoothness, "control": b.control,
                     "tracking": b.tracking, "obstacle": b.obstacle, "brake": b.brake,
                     "pairwise_mean": b.pairwise_sum, "local_exponent": -float(np.log(rewards[i])),
                     "local_reward": float(rewards[i])})
    path = write_csv(out / f"energy_audit_seed{seed}.csv", rows, ENERGY_COLUMNS)
    g = global_energy(world, accel, cfg.energy)
    print(f"H_u={g.H_u:.6g} H_p={g.H_p:.6g} H={g.H:.6g} "
          f"H_p_decoupled={decoupled_pairwise_energy(world, cfg.energy):.6g}; wrote {path}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "replay": cmd_replay,
            "energy-audit": cmd_energy_audit}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grfflock", description="Train, evaluate, benchmark and replay multi-robot flocking controllers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file (every field optional)")
        p.add_argument("--seed", help="seed, comma list or start:stop range")
        p.add_argument("--out", help="output directory")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress")
        if name in ("eval", "bench"):
            p.add_argument("--controller", help=f"one of {', '.join(CONTROLLERS)} (bench: comma list)")
            p.add_argument("--checkpoint", help="checkpoint .npz for the learned controller")
        if name == "replay":
            p.add_argument("trajectory", nargs="?", help="trajectory .jsonl written by eval")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    for attr in ("controller", "checkpoint"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    t0 = time.perf_counter()
    try:
        cfg = config_mod.load(args.config)
        code = COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (CheckpointError, TrajectoryError, ScenarioInfeasible, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code
