"""Trajectory logs as JSON Lines.

The first line is a header (scenario, energy coefficients, obstacles); every
following line is one simulation step::

    {"schema_version": 1, "type": "step", "step": k, "t": ...,
     "robots": [{"id", "p", "v", "frozen", "collided", "action", "a"}, ...],
     "reference": {"p_c", "v_c"}, "metrics": {"phi_o", "phi_t"}}

Step 0 is the initial state (no action).  The state in record ``k`` is the
result of applying the accelerations ``a`` listed in that record.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import EnergyParams, ObstacleSpec, ScenarioConfig, _build, to_dict
from .world import WorldState, from_arrays

SCHEMA_VERSION = 1


class TrajectoryError(ValueError):
    pass


def header_record(world: WorldState, energy: EnergyParams, controller: str, seed: int) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "type": "header",
        "controller": controller,
        "seed": int(seed),
        "scenario": to_dict(world.config),
        "energy": to_dict(energy),
        "obstacles": [{"x": float(p[0]), "y": float(p[1]), "radius": float(r)}
                      for p, r in zip(world.obstacle_pos, world.obstacle_radius)],
    }


def step_record(world: WorldState, actions: list[str] | None, accel: np.ndarray | None, metrics: dict) -> dict:
    frozen = world.frozen
    robots = []
    for i in range(world.n_robots):
        robots.append({
            "id": i,
            "p": world.pos[i].tolist(),
            "v": world.vel[i].tolist(),
            "frozen": bool(frozen[i]),
            "collided": bool(world.ever_collided[i]),
            "action": None if actions is None else actions[i],
            "a": None if accel is None else accel[i].tolist(),
        })
    return {
        "schema_version": SCHEMA_VERSION,
        "type": "step",
        "step": world.step_count,
        "t": world.clock,
        "robots": robots,
        "reference": {"p_c": world.ref_pos.tolist(), "v_c": world.ref_vel.tolist()},
        "metrics": metrics,
    }


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


@dataclass
class Trajectory:
    header: dict
    steps: list[dict]

    @property
    def scenario(self) -> ScenarioConfig:
        data = dict(self.header["scenario"])
        obstacles = data.pop("obstacles", None)
        cfg = _build(ScenarioConfig, data, "scenario", {})
        if obstacles is not None:
            cfg = ScenarioConfig(**{**to_dict(cfg), "obstacles": tuple(ObstacleSpec(**o) for o in obstacles)})
        return cfg

    @property
    def energy(self) -> EnergyParams:
        return _build(EnergyParams, self.header["energy"], "energy", {})

    def world_at(self, k: int) -> WorldState:
        rec = self.steps[k]
        robots = rec["robots"]
        obstacles = self.header["obstacles"]
        world = from_arrays(
            self.scenario,
            pos=[r["p"] for r in robots],
            vel=[r["v"] for r in robots],
            ref_pos=rec["reference"]["p_c"],
            ref_vel=rec["reference"]["v_c"],
            obstacle_pos=[[o["x"], o["y"]] for o in obstacles] if obstacles else None,
            obstacle_radius=[o["radius"] for o in obstacles] if obstacles else None,
            clock=rec["t"],
            ever_collided=[r["collided"] for r in robots],
        )
        world.step_count = rec["step"]
        return world

    def accelerations(self, k: int) -> np.ndarray:
        robots = self.steps[k]["robots"]
        return np.array([r["a"] if r["a"] is not None else [0.0, 0.0] for r in robots], dtype=float)


def read_jsonl(path: str | Path) -> Trajectory:
    path = Path(path)
    header = None
    steps: list[dict] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise TrajectoryError(f"{path}:{lineno}: malformed record ({err.msg})") from None
            if not isinstance(rec, dict):
                raise TrajectoryError(f"{path}:{lineno}: record is not an object")
            version = rec.get("schema_version")
            if version != SCHEMA_VERSION:
                raise TrajectoryError(f"{path}:{lineno}: schema_version {version!r} not supported "
                                      f"(expected {SCHEMA_VERSION})")
            kind = rec.get("type")
            if kind == "header":
                if header is not None or steps:
                    raise TrajectoryError(f"{path}:{lineno}: unexpected header")
                header = rec
            elif kind == "step":
                if header is None:
                    raise TrajectoryError(f"{path}:{lineno}: step record before header")
                for key in ("step", "t", "robots", "reference"):
                    if key not in rec:
                        raise TrajectoryError(f"{path}:{lineno}: step record missing {key!r}")
                steps.append(rec)
            else:
                raise TrajectoryError(f"{path}:{lineno}: unknown record type {kind!r}")
    if header is None:
        raise TrajectoryError(f"{path}: no header record")
    return Trajectory(header, steps)
