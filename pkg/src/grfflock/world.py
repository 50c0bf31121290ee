"""Deterministic 2-D flocking world.

Robots are double integrators (position, velocity, commanded acceleration)
moving among static disc obstacles while a flock reference point translates
at constant velocity, reflecting off the arena walls.  All robot quantities
are stored as ``(n, 2)`` / ``(n,)`` arrays; :meth:`WorldState.robot` gives a
per-robot view.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .config import ScenarioConfig

EPS = 1e-12
PLACEMENT_ATTEMPTS = 10_000


class ScenarioInfeasible(RuntimeError):
    """Random placement could not find a non-overlapping configuration."""


@dataclass(frozen=True)
class RobotState:
    id: int
    position: np.ndarray
    velocity: np.ndarray
    frozen_until: float
    ever_collided: bool


@dataclass(frozen=True)
class Obstacle:
    position: np.ndarray
    radius: float


@dataclass(frozen=True)
class FlockReference:
    position: np.ndarray
    velocity: np.ndarray


@dataclass(frozen=True)
class NearestObstacle:
    point: np.ndarray
    velocity: np.ndarray
    distance: float


@dataclass
class WorldState:
    config: ScenarioConfig
    clock: float
    pos: np.ndarray
    vel: np.ndarray
    frozen_until: np.ndarray
    ever_collided: np.ndarray
    # contact flags from the previous step; a freeze triggers on a new contact only
    in_contact: np.ndarray
    obstacle_pos: np.ndarray
    obstacle_radius: np.ndarray
    ref_pos: np.ndarray
    ref_vel: np.ndarray
    rng: np.random.Generator = field(repr=False)
    step_count: int = 0

    @property
    def n_robots(self) -> int:
        return self.pos.shape[0]

    @property
    def frozen(self) -> np.ndarray:
        return self.clock < self.frozen_until - 1e-9

    def robot(self, i: int) -> RobotState:
        return RobotState(
            id=i,
            position=self.pos[i].copy(),
            velocity=self.vel[i].copy(),
            frozen_until=float(self.frozen_until[i]),
            ever_collided=bool(self.ever_collided[i]),
        )

    @property
    def robots(self) -> list[RobotState]:
        return [self.robot(i) for i in range(self.n_robots)]

    @property
    def obstacles(self) -> list[Obstacle]:
        return [Obstacle(self.obstacle_pos[k].copy(), float(self.obstacle_radius[k]))
                for k in range(len(self.obstacle_radius))]

    @property
    def reference(self) -> FlockReference:
        return FlockReference(self.ref_pos.copy(), self.ref_vel.copy())

    def copy(self) -> "WorldState":
        out = copy.copy(self)
        for name in ("pos", "vel", "frozen_until", "ever_collided", "in_contact", "ref_pos", "ref_vel"):
            setattr(out, name, getattr(self, name).copy())
        return out

    def to_dict(self) -> dict:
        """JSON-ready snapshot (the generator state is included verbatim)."""
        return {
            "clock": self.clock,
            "step": self.step_count,
            "pos": self.pos.tolist(),
            "vel": self.vel.tolist(),
            "frozen_until": self.frozen_until.tolist(),
            "ever_collided": self.ever_collided.tolist(),
            "in_contact": self.in_contact.tolist(),
            "obstacle_pos": self.obstacle_pos.tolist(),
            "obstacle_radius": self.obstacle_radius.tolist(),
            "ref_pos": self.ref_pos.tolist(),
            "ref_vel": self.ref_vel.tolist(),
            "rng": self.rng.bit_generator.state,
        }


def _random_velocity(rng: np.random.Generator, vmax: float) -> np.ndarray:
    speed = vmax * math.sqrt(rng.random())
    angle = 2.0 * math.pi * rng.random()
    return np.array([speed * math.cos(angle), speed * math.sin(angle)])


def init_scenario(config: ScenarioConfig, seed: int | None = None) -> WorldState:
    """Random initial state: obstacles, robots and the flock reference.

    Obstacles and robots are placed by rejection sampling inside the arena;
    robots keep clear of obstacles and of each other by ``2 * robot_radius``.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    side = config.arena_side
    r_rob = config.robot_radius

    if config.obstacles is not None:
        obs_pos = np.array([[o.x, o.y] for o in config.obstacles], dtype=float).reshape(-1, 2)
        obs_rad = np.array([o.radius for o in config.obstacles], dtype=float)
    else:
        n_obs = config.n_obstacles
        if config.random_obstacle_count:
            n_obs = int(rng.integers(0, config.n_obstacles + 1))
        obs_pos = np.zeros((n_obs, 2))
        obs_rad = np.zeros(n_obs)
        centre = np.array([side / 2, side / 2])
        for k in range(n_obs):
            for _ in range(PLACEMENT_ATTEMPTS):
                rad = rng.uniform(config.obstacle_radius_min, config.obstacle_radius_max)
                p = rng.uniform(rad, side - rad, size=2)
                # keep the reference start point free
                if np.linalg.norm(p - centre) < rad + 2 * r_rob:
                    continue
                if k and np.any(np.linalg.norm(obs_pos[:k] - p, axis=1) < obs_rad[:k] + rad):
                    continue
                obs_pos[k], obs_rad[k] = p, rad
                break
            else:
                raise ScenarioInfeasible(f"could not place obstacle {k} after {PLACEMENT_ATTEMPTS} attempts")

    n = config.n_robots
    pos = np.zeros((n, 2))
    margin = 2 * r_rob  # clearance beyond contact distance
    for i in range(n):
        for _ in range(PLACEMENT_ATTEMPTS):
            p = rng.uniform(r_rob, side - r_rob, size=2)
            if len(obs_rad) and np.any(np.linalg.norm(obs_pos - p, axis=1) - obs_rad < r_rob + margin):
                continue
            if i and np.any(np.linalg.norm(pos[:i] - p, axis=1) < 2 * r_rob + margin):
                continue
            pos[i] = p
            break
        else:
            raise ScenarioInfeasible(f"could not place robot {i} after {PLACEMENT_ATTEMPTS} attempts")
    vel = np.array([_random_velocity(rng, config.v_c_max) for _ in range(n)]).reshape(n, 2)

    return WorldState(
        config=config,
        clock=0.0,
        pos=pos,
        vel=vel,
        frozen_until=np.zeros(n),
        ever_collided=np.zeros(n, dtype=bool),
        in_contact=np.zeros(n, dtype=bool),
        obstacle_pos=obs_pos,
        obstacle_radius=obs_rad,
        ref_pos=np.array([side / 2, side / 2]),
        ref_vel=_random_velocity(rng, config.v_c_max),
        rng=rng,
    )


def from_arrays(config: ScenarioConfig, pos, vel, ref_pos=(0.0, 0.0), ref_vel=(0.0, 0.0),
                obstacle_pos=None, obstacle_radius=None, clock: float = 0.0,
                frozen_until=None, ever_collided=None) -> WorldState:
    """Hand-built world state (tests, replays)."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    n = pos.shape[0]
    obstacle_pos = np.zeros((0, 2)) if obstacle_pos is None else np.asarray(obstacle_pos, dtype=float).reshape(-1, 2)
    obstacle_radius = np.zeros(0) if obstacle_radius is None else np.asarray(obstacle_radius, dtype=float).reshape(-1)
    return WorldState(
        config=config,
        clock=float(clock),
        pos=pos.copy(),
        vel=np.asarray(vel, dtype=float).reshape(n, 2).copy(),
        frozen_until=np.zeros(n) if frozen_until is None else np.asarray(frozen_until, dtype=float).copy(),
        ever_collided=np.zeros(n, dtype=bool) if ever_collided is None else np.asarray(ever_collided, dtype=bool).copy(),
        in_contact=np.zeros(n, dtype=bool),
        obstacle_pos=obstacle_pos,
        obstacle_radius=obstacle_radius,
        ref_pos=np.asarray(ref_pos, dtype=float).copy(),
        ref_vel=np.asarray(ref_vel, dtype=float).copy(),
        rng=np.random.default_rng(0),
    )


def clip_norm(vectors: np.ndarray, limit: float) -> np.ndarray:
    """Scale rows of ``vectors`` down so that each norm is at most ``limit``."""
    vectors = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(vectors, axis=-1, keepdims=True)
    scale = np.where(norms > limit, limit / np.maximum(norms, EPS), 1.0)
    return vectors * scale


def contacts(world: WorldState) -> np.ndarray:
    """Per-robot contact flags for the current positions."""
    cfg = world.config
    flags = np.zeros(world.n_robots, dtype=bool)
    if len(world.obstacle_radius):
        d = np.linalg.norm(world.pos[:, None, :] - world.obstacle_pos[None, :, :], axis=-1) - world.obstacle_radius
        flags |= np.any(d < cfg.robot_radius, axis=1)
    if world.n_robots > 1:
        dist = pairwise_distances(world.pos)
        np.fill_diagonal(dist, np.inf)
        flags |= np.any(dist < 2 * cfg.robot_radius, axis=1)
    return flags


detect_collisions = contacts


def step(world: WorldState, accelerations) -> WorldState:
    """Advance one explicit Euler step of length ``dt``.

    Frozen robots hold still and ignore their command.  A robot that enters
    contact becomes frozen for ``t_c`` seconds and is marked as collided.
    """
    accel = np.asarray(accelerations, dtype=float)
    if accel.shape != (world.n_robots, 2):
        raise ValueError(f"expected accelerations of shape ({world.n_robots}, 2), got {accel.shape}")
    cfg = world.config
    dt = cfg.dt
    frozen = world.frozen
    out = world.copy()

    moving = ~frozen
    out.pos[moving] = world.pos[moving] + world.vel[moving] * dt
    out.vel[moving] = clip_norm(world.vel[moving] + accel[moving] * dt, cfg.v_max)
    out.vel[frozen] = 0.0
    out.clock = world.clock + dt
    out.step_count = world.step_count + 1

    ref = world.ref_pos + world.ref_vel * dt
    ref_vel = world.ref_vel.copy()
    side = cfg.arena_side
    for ax in range(2):
        if ref[ax] < 0.0:
            ref[ax] = -ref[ax]
            ref_vel[ax] = -ref_vel[ax]
        elif ref[ax] > side:
            ref[ax] = 2 * side - ref[ax]
            ref_vel[ax] = -ref_vel[ax]
    out.ref_pos, out.ref_vel = ref, ref_vel

    touching = contacts(out)
    new = touching & ~world.in_contact & ~out.frozen
    out.vel[new] = 0.0
    out.frozen_until[new] = out.clock + cfg.t_c
    out.ever_collided |= new
    out.in_contact = touching
    return out


def pairwise_distances(pos: np.ndarray) -> np.ndarray:
    diff = pos[:, None, :] - pos[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def adjacency(world: WorldState) -> np.ndarray:
    """Boolean neighbour matrix: ``j`` is a neighbour of ``i`` when within ``d_in``."""
    adj = pairwise_distances(world.pos) <= world.config.d_in
    np.fill_diagonal(adj, False)
    return adj


def neighbors(world: WorldState, i: int) -> list[int]:
    d = np.linalg.norm(world.pos - world.pos[i], axis=1)
    return [j for j in np.flatnonzero(d <= world.config.d_in).tolist() if j != i]


def sector_distances(pos: np.ndarray, obstacle_pos: np.ndarray, obstacle_radius: np.ndarray,
                     n_sectors: int, d_o_max: float) -> np.ndarray:
    """Obstacle clearance per angular sector, shape ``(len(pos), n_sectors)``.

    Sector ``k`` spans azimuths ``[2*pi*k/n, 2*pi*(k+1)/n)``; its value is the
    smallest radius at which the wedge meets an obstacle disc, capped at
    ``d_o_max``.  The wedge/disc intersection is convex, so the closest point is
    either the disc's closest point (when its bearing lies in the wedge) or lies
    on one of the two bounding rays.
    """
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    n = pos.shape[0]
    out = np.full((n, n_sectors), float(d_o_max))
    if len(obstacle_radius) == 0:
        return out
    rel = obstacle_pos[None, :, :] - pos[:, None, :]          # (n, m, 2)
    centre_dist = np.linalg.norm(rel, axis=-1)                # (n, m)
    surface = centre_dist - obstacle_radius[None, :]
    relevant = surface < d_o_max
    if not relevant.any():
        return out

    width = 2.0 * math.pi / n_sectors
    angles = np.arange(n_sectors) * width
    rays = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (s, 2)
    # hit distance along each boundary ray: t = u.c - sqrt((u.c)^2 - |c|^2 + rho^2)
    uc = np.einsum("nmk,sk->nms", rel, rays)
    disc = uc ** 2 - (centre_dist ** 2 - obstacle_radius[None, :] ** 2)[..., None]
    root = np.sqrt(np.maximum(disc, 0.0))
    t_far = uc + root
    t_near = np.maximum(uc - root, 0.0)
    ray_hit = np.where((disc >= 0) & (t_far >= 0), t_near, np.inf)     # (n, m, s)

    bearing = np.mod(np.arctan2(rel[..., 1], rel[..., 0]), 2.0 * math.pi)
    sector_of = np.minimum((bearing // width).astype(int), n_sectors - 1)
    centre_hit = np.full((n, rel.shape[1], n_sectors), np.inf)
    ii, mm = np.nonzero(np.ones_like(surface, dtype=bool))
    centre_hit[ii, mm, sector_of[ii, mm]] = np.maximum(surface[ii, mm], 0.0)

    per_sector = np.minimum(np.minimum(ray_hit, np.roll(ray_hit, -1, axis=2)), centre_hit)
    inside = surface <= 0.0
    per_sector[inside] = 0.0
    per_sector[~relevant] = np.inf
    best = per_sector.min(axis=1)
    return np.minimum(best, d_o_max)


def sense_obstacles(world: WorldState, i: int) -> np.ndarray:
    cfg = world.config
    return sector_distances(world.pos[i:i + 1], world.obstacle_pos, world.obstacle_radius,
                            cfg.n_sectors, cfg.d_o_max)[0]


def sense_all(world: WorldState) -> np.ndarray:
    cfg = world.config
    return sector_distances(world.pos, world.obstacle_pos, world.obstacle_radius,
                            cfg.n_sectors, cfg.d_o_max)


def nearest_obstacles(world: WorldState):
    """Vectorised nearest-obstacle query.

    Returns ``(point, velocity, distance, valid)`` with shapes ``(n, 2)``,
    ``(n, 2)``, ``(n,)``, ``(n,)``.  ``point`` is the closest surface point of
    the closest disc; rows with ``valid == False`` have no obstacle within
    ``d_o_max``.
    """
    n = world.n_robots
    point = np.zeros((n, 2))
    vel = np.zeros((n, 2))
    dist = np.full(n, np.inf)
    valid = np.zeros(n, dtype=bool)
    if len(world.obstacle_radius) == 0:
        return point, vel, dist, valid
    rel = world.pos[:, None, :] - world.obstacle_pos[None, :, :]
    cdist = np.linalg.norm(rel, axis=-1)
    surface = cdist - world.obstacle_radius[None, :]
    k = np.argmin(surface, axis=1)  # first index wins ties
    rows = np.arange(n)
    dist = surface[rows, k]
    c = cdist[rows, k]
    direction = np.where(c[:, None] > EPS, rel[rows, k] / np.maximum(c, EPS)[:, None], np.array([1.0, 0.0]))
    point = world.obstacle_pos[k] + world.obstacle_radius[k][:, None] * direction
    valid = dist <= world.config.d_o_max
    return point, vel, dist, valid


def nearest_obstacle(world: WorldState, i: int) -> NearestObstacle | None:
    point, vel, dist, valid = nearest_obstacles(world)
    if not valid[i]:
        return None
    return NearestObstacle(point[i].copy(), vel[i].copy(), float(dist[i]))


@dataclass(frozen=True)
class ObservationBundle:
    """Local view of one robot.

    ``neighbor_obs`` rows are ``(dx, dy, dvx, dvy)`` relative to the robot,
    aligned with ``neighbor_ids`` (ascending) and ``neighbor_action_dists``.
    """

    robot_id: int
    p_i: np.ndarray
    v_i: np.ndarray
    p_c: np.ndarray
    v_c: np.ndarray
    neighbor_ids: tuple[int, ...]
    neighbor_obs: np.ndarray
    neighbor_action_dists: np.ndarray
    obstacle_sectors: np.ndarray


def observe(world: WorldState, i: int, prev_dists: np.ndarray, sectors: np.ndarray | None = None) -> ObservationBundle:
    """Assemble robot ``i``'s observation.

    ``prev_dists`` holds every robot's action distribution from the previous
    step, shape ``(n, n_actions)``.
    """
    prev_dists = np.asarray(prev_dists, dtype=float)
    if prev_dists.shape[0] != world.n_robots:
        raise ValueError("prev_dists must cover every robot")
    nbrs = neighbors(world, i)
    rel = np.concatenate([world.pos[nbrs] - world.pos[i], world.vel[nbrs] - world.vel[i]], axis=1) \
        if nbrs else np.zeros((0, 4))
    return ObservationBundle(
        robot_id=i,
        p_i=world.pos[i].copy(),
        v_i=world.vel[i].copy(),
        p_c=world.ref_pos.copy(),
        v_c=world.ref_vel.copy(),
        neighbor_ids=tuple(nbrs),
        neighbor_obs=rel,
        neighbor_action_dists=prev_dists[nbrs].reshape(len(nbrs), prev_dists.shape[1]),
        obstacle_sectors=sense_obstacles(world, i) if sectors is None else np.asarray(sectors, dtype=float),
    )
