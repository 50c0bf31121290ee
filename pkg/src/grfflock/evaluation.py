"""Flocking metrics, episode runner and the scenario-matrix benchmark."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .actions import ActionSpace
from .baselines import olfati_saber_controller, tracking_controller
from .config import BaselineConfig, EnergyParams, RunConfig, ScenarioConfig
from .energy import local_rewards
from .policy import CheckpointError, FeatureEncoder, load_checkpoint
from .trainer import Agent, broadcast_dists
from .trajectory import header_record, step_record
from .world import WorldState, adjacency, init_scenario, sense_all, step

log = logging.getLogger(__name__)

CONTROLLERS = ("learned", "olfati-saber", "tracking")
RAW_COLUMNS = ["controller", "n_robots", "n_obstacles", "seed", "phi_o", "phi_t", "phi_s", "ms_per_decision"]
AGG_COLUMNS = ["controller", "n_robots", "n_obstacles", "n_seeds", "n_errors",
               "phi_o_mean", "phi_o_std", "phi_t_mean", "phi_t_std", "phi_s_mean", "phi_s_std",
               "ms_per_decision_mean", "error"]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def flocking_order(world: WorldState) -> float | None:
    """Mean neighbour velocity cosine over robots that never collided.

    Robots at rest, or without a surviving neighbour in range, are left out of
    the outer average.  Returns ``None`` when no robot qualifies.  The value is
    not clamped and can be negative.
    """
    alive = ~world.ever_collided
    adj = adjacency(world) & alive[:, None] & alive[None, :]
    speed = np.linalg.norm(world.vel, axis=1)
    moving = speed > 0
    adj &= moving[:, None] & moving[None, :]
    counts = adj.sum(axis=1)
    ok = alive & moving & (counts > 0)
    if not ok.any():
        return None
    # dot / sqrt(|v_i|^2 |v_j|^2) is exactly 1 for identical velocities
    dots = world.vel @ world.vel.T
    sq = np.diag(dots)
    norm = np.sqrt(np.outer(sq, sq))
    cos = np.divide(dots, norm, out=np.zeros_like(dots), where=norm > 0)
    per_robot = np.where(adj, cos, 0.0).sum(axis=1)[ok] / counts[ok]
    return float(per_robot.mean())


def tracking_distance(world: WorldState) -> float | None:
    alive = ~world.ever_collided
    if not alive.any():
        return None
    return float(np.linalg.norm(world.pos[alive] - world.ref_pos, axis=1).mean())


def success_rate(ever_collided) -> float:
    flags = np.asarray(ever_collided, dtype=bool)
    # one integer division so the result is the correctly rounded fraction
    return float((flags.size - int(flags.sum())) / flags.size) if flags.size else 1.0


@dataclass
class MetricSample:
    t: float
    phi_o: float | None
    phi_t: float | None
    alive_count: int


def metric_sample(world: WorldState) -> MetricSample:
    return MetricSample(world.clock, flocking_order(world), tracking_distance(world),
                        int((~world.ever_collided).sum()))


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------

def load_agent(path: str | Path, scenario: ScenarioConfig) -> Agent:
    """Rebuild an agent from a checkpoint for use in ``scenario``."""
    policies, critics, meta = load_checkpoint(path)
    stored = meta.get("scenario", {})
    for key, value in stored.items():
        if key in ("arena_side", "v_max", "d_in", "d_o_max", "n_sectors") and getattr(scenario, key) != value:
            raise CheckpointError(f"{path}: checkpoint trained with {key}={value}, "
                                  f"scenario has {getattr(scenario, key)}")
    space = ActionSpace(meta["magnitudes"], meta["n_directions"])
    if space.size != meta["n_actions"]:
        raise CheckpointError(f"{path}: action table size {space.size} != {meta['n_actions']}")
    if len(policies) > 1 and len(policies) != scenario.n_robots:
        raise CheckpointError(f"{path}: {len(policies)} per-robot policies for {scenario.n_robots} robots")
    return Agent(policies, critics, FeatureEncoder(scenario), space)


class Controller:
    """Maps a world state to accelerations for every robot.

    ``act`` returns ``(accel, labels, seconds)`` where ``seconds`` holds the
    wall-clock decision time of each robot.
    """
    name = "controller"

    def reset(self, world: WorldState) -> None:
        pass

    def act(self, world: WorldState):
        raise NotImplementedError


class LearnedController(Controller):
    """Greedy (argmax) execution of a trained policy, one forward pass per robot."""
    name = "learned"

    def __init__(self, agent: Agent):
        self.agent = agent
        self.prev = None

    def reset(self, world: WorldState) -> None:
        self.prev = np.tile(self.agent.space.uniform(), (world.n_robots, 1))

    def act(self, world: WorldState):
        agent = self.agent
        n = world.n_robots
        batch = agent.encoder.encode_world(world, self.prev, sense_all(world))
        counts = batch.mask.sum(axis=1)
        probs = np.zeros((n, agent.space.size))
        seconds = np.zeros(n)
        for i in range(n):
            k = max(int(counts[i]), 1)
            one = type(batch)(batch.self_x[i:i + 1], batch.nbr_x[i:i + 1, :k], batch.keys[i:i + 1, :k],
                              batch.mask[i:i + 1, :k])
            net = agent.policies[0 if agent.shared else i]
            t0 = time.perf_counter()
            probs[i] = net.probs(one)[0]
            seconds[i] = time.perf_counter() - t0
        forced = world.frozen
        actions = np.where(forced, agent.space.stop_index, np.argmax(probs, axis=1))
        accel = agent.space.resolve(actions, world.vel, world.ref_vel, world.config.a_max)
        self.prev = broadcast_dists(agent, probs, forced)
        labels = [str(agent.space.spec(int(a))) for a in actions]
        return accel, labels, seconds


class RuleController(Controller):
    def __init__(self, name: str, fn, params):
        self.name = name
        self.fn = fn
        self.params = params

    def act(self, world: WorldState):
        n = world.n_robots
        accel = np.zeros((n, 2))
        seconds = np.zeros(n)
        for i in range(n):
            t0 = time.perf_counter()
            accel[i] = self.fn(world, i, self.params)
            seconds[i] = time.perf_counter() - t0
        return accel, [self.name] * n, seconds


def make_controller(name: str, scenario: ScenarioConfig, baselines: BaselineConfig | None = None,
                    checkpoint: str | Path | None = None) -> Controller:
    baselines = baselines or BaselineConfig()
    if name == "olfati-saber":
        return RuleController(name, olfati_saber_controller, baselines.olfati_saber)
    if name == "tracking":
        return RuleController(name, tracking_controller, baselines.tracking)
    if name == "learned":
        if checkpoint is None:
            raise CheckpointError("the learned controller needs a checkpoint")
        return LearnedController(load_agent(checkpoint, scenario))
    raise ValueError(f"unknown controller {name!r}; choose from {', '.join(CONTROLLERS)}")


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    phi_o: float | None
    phi_t: float | None
    phi_s: float
    mean_local_reward: float
    ms_per_decision: float
    series: list[MetricSample] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    world: WorldState | None = None


def _metrics_dict(world: WorldState) -> dict:
    return {"phi_o": flocking_order(world), "phi_t": tracking_distance(world)}


def run_episode(controller: Controller, scenario: ScenarioConfig, seed: int,
                energy: EnergyParams | None = None, record: bool = False,
                world: WorldState | None = None) -> EpisodeResult:
    """One full episode.  ``ms_per_decision`` is the median over steps of the
    mean per-robot controller time."""
    energy = energy or EnergyParams(d_r=scenario.d_r, d_or=scenario.d_or)
    world = init_scenario(scenario, seed) if world is None else world
    controller.reset(world)
    records: list[dict] = []
    if record:
        records.append(header_record(world, energy, controller.name, seed))
        records.append(step_record(world, None, None, _metrics_dict(world)))
    series = [metric_sample(world)]
    step_ms = []
    rewards = []
    for _ in range(scenario.episode_steps):
        accel, labels, seconds = controller.act(world)
        step_ms.append(1000.0 * float(seconds.mean()))
        world = step(world, accel)
        rewards.append(local_rewards(world, accel, energy).mean())
        series.append(metric_sample(world))
        if record:
            records.append(step_record(world, labels, accel, _metrics_dict(world)))
    return EpisodeResult(
        phi_o=flocking_order(world), phi_t=tracking_distance(world), phi_s=success_rate(world.ever_collided),
        mean_local_reward=float(np.mean(rewards)) if rewards else float("nan"),
        ms_per_decision=float(np.median(step_ms)) if step_ms else float("nan"),
        series=series, records=records, world=world,
    )


def make_training_evaluator(cfg: RunConfig, n_episodes: int = 2, seed_base: int = 10_000):
    """Callback for ``trainer.train``: greedy episodes on held-out seeds."""
    def evaluate(agent: Agent) -> dict:
        ctrl = LearnedController(agent)
        results = [run_episode(ctrl, cfg.scenario, seed_base + k, cfg.energy) for k in range(n_episodes)]
        out = summarize(results)
        out["eval_reward"] = out.pop("mean_local_reward")
        return out
    return evaluate


def summarize(results: list[EpisodeResult]) -> dict:
    def mean(vals):
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else float("nan")
    return {"phi_o": mean(r.phi_o for r in results), "phi_t": mean(r.phi_t for r in results),
            "phi_s": mean(r.phi_s for r in results),
            "mean_local_reward": mean(r.mean_local_reward for r in results)}


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchmarkReport:
    rows: list[dict]
    aggregates: list[dict]
    errors: list[dict]


def _run_cell_seed(args):
    controller, scenario, baselines, checkpoint, energy, seed = args
    try:
        ctrl = make_controller(controller, scenario, baselines, checkpoint)
        res = run_episode(ctrl, scenario, seed, energy)
    except Exception as err:  # recorded per cell, the benchmark keeps going
        return {"error": f"{type(err).__name__}: {err}"}
    return {"phi_o": res.phi_o, "phi_t": res.phi_t, "phi_s": res.phi_s, "ms_per_decision": res.ms_per_decision}


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("GRFFLOCK_THREADS", "1")))
    except ValueError:
        return 1


def _nan_stats(values):
    vals = np.array([v for v in values if v is not None and v == v], dtype=float)
    if not len(vals):
        return float("nan"), float("nan")
    return float(vals.mean()), float(vals.std())


def aggregate_rows(rows: list[dict], errors: list[dict] | None = None) -> list[dict]:
    """Mean and population standard deviation per (controller, n_robots, n_obstacles)."""
    cells: dict[tuple, list[dict]] = {}
    for r in rows:
        cells.setdefault((r["controller"], int(r["n_robots"]), int(r["n_obstacles"])), []).append(r)
    err_cells: dict[tuple, list[dict]] = {}
    for e in errors or []:
        key = (e["controller"], int(e["n_robots"]), int(e["n_obstacles"]))
        err_cells.setdefault(key, []).append(e)
        cells.setdefault(key, [])
    out = []
    for key in sorted(cells):
        group = cells[key]
        agg = {"controller": key[0], "n_robots": key[1], "n_obstacles": key[2], "n_seeds": len(group),
               "n_errors": len(err_cells.get(key, [])),
               "error": err_cells[key][0]["error"] if key in err_cells else ""}
        for m in ("phi_o", "phi_t", "phi_s"):
            agg[f"{m}_mean"], agg[f"{m}_std"] = _nan_stats(_as_float(r[m]) for r in group)
        agg["ms_per_decision_mean"] = _nan_stats(_as_float(r["ms_per_decision"]) for r in group)[0]
        out.append(agg)
    return out


def _as_float(v):
    if v is None or v == "":
        return None
    return float(v)


def run_benchmark(controllers, cells, seeds, scenario: ScenarioConfig, energy: EnergyParams | None = None,
                  baselines: BaselineConfig | None = None, checkpoint: str | Path | None = None,
                  workers: int | None = None) -> BenchmarkReport:
    """Run every controller in every ``(n_robots, n_obstacles)`` cell for every seed."""
    baselines = baselines or BaselineConfig()
    jobs, keys = [], []
    for controller in controllers:
        for n_robots, n_obstacles in cells:
            cell_scn = replace(scenario, n_robots=int(n_robots), n_obstacles=int(n_obstacles), obstacles=None)
            e = energy or EnergyParams(d_r=cell_scn.d_r, d_or=cell_scn.d_or)
            for seed in seeds:
                jobs.append((controller, cell_scn, baselines, checkpoint, e, int(seed)))
                keys.append((controller, int(n_robots), int(n_obstacles), int(seed)))
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell_seed, jobs))
    else:
        results = [_run_cell_seed(j) for j in jobs]
    rows, errors = [], []
    for (controller, n_r, n_o, seed), res in zip(keys, results):
        base = {"controller": controller, "n_robots": n_r, "n_obstacles": n_o, "seed": seed}
        if "error" in res:
            log.warning("%s n_robots=%d n_obstacles=%d seed=%d failed: %s", controller, n_r, n_o, seed, res["error"])
            errors.append({**base, "error": res["error"]})
        else:
            rows.append({**base, **res})
    return BenchmarkReport(rows, aggregate_rows(rows, errors), errors)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: str | Path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: _fmt(r.get(k)) for k in columns})
    return path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
