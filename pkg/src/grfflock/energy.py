"""Flocking energy terms, global reward and credit-assigned local rewards.

Lower energy means a more probable (better) flock configuration; rewards are
``exp(-energy)``.  Scalar helpers follow the term definitions one-to-one and
accept broadcastable arrays; the ``*_world`` style functions evaluate every
robot of a :class:`~grfflock.world.WorldState` at once.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import EnergyParams
from .world import WorldState, adjacency, nearest_obstacles

_TINY = 1e-12


@dataclass(frozen=True)
class EnergyBreakdown:
    smoothness: float
    control: float
    tracking: float
    obstacle: float
    brake: float
    pairwise_sum: float = 0.0

    @property
    def unary(self) -> float:
        return self.smoothness + self.control + self.tracking + self.obstacle + self.brake

    @property
    def total(self) -> float:
        return self.unary + self.pairwise_sum


@dataclass(frozen=True)
class GlobalEnergy:
    H_u: float
    H_p: float
    H: float


def pairwise_position_energy(d_ij, params: EnergyParams):
    """Morse well with depth ``c_p1`` at ``d_r``."""
    return params.c_p1 * (1.0 - np.exp(-params.c_p2 * (np.asarray(d_ij) - params.d_r))) ** 2 - params.c_p1


def pairwise_velocity_energy(p_ji, v_ji, params: EnergyParams):
    """Penalty on closing speed along the line between two robots."""
    p_ji = np.asarray(p_ji, dtype=float)
    v_ji = np.asarray(v_ji, dtype=float)
    sq = np.maximum(np.sum(p_ji * p_ji, axis=-1), _TINY)
    return params.c_v * np.maximum(0.0, -np.sum(v_ji * p_ji, axis=-1) / sq)


def pairwise_energy(p_i, v_i, p_j, v_j, params: EnergyParams):
    p_ji = np.asarray(p_j, dtype=float) - np.asarray(p_i, dtype=float)
    v_ji = np.asarray(v_j, dtype=float) - np.asarray(v_i, dtype=float)
    d = np.linalg.norm(p_ji, axis=-1)
    return pairwise_position_energy(d, params) + pairwise_velocity_energy(p_ji, v_ji, params)


def obstacle_energy(d_oi, params: EnergyParams):
    """Repulsive half of a Morse well; zero beyond the reaction distance."""
    return params.c_o1 * (1.0 - np.exp(-params.c_o2 * np.minimum(0.0, np.asarray(d_oi) - params.d_or))) ** 2


def brake_energy(p_oi, v_oi, params: EnergyParams):
    p_oi = np.asarray(p_oi, dtype=float)
    v_oi = np.asarray(v_oi, dtype=float)
    sq = np.maximum(np.sum(p_oi * p_oi, axis=-1), _TINY)
    return params.c_b * np.maximum(0.0, -np.sum(v_oi * p_oi, axis=-1) / sq)


def unary_energy(p_i, v_i, p_c, v_c, a_i, nearest, params: EnergyParams) -> EnergyBreakdown:
    """Unary terms for one robot.

    ``nearest`` is a :class:`~grfflock.world.NearestObstacle` or ``None``.
    """
    p_i, v_i = np.asarray(p_i, dtype=float), np.asarray(v_i, dtype=float)
    a_i = np.asarray(a_i, dtype=float)
    smooth = params.c_k * float(np.sum((v_i - np.asarray(v_c)) ** 2))
    control = params.c_c * float(np.sum(a_i ** 2))
    tracking = params.c_t1 * (float(np.linalg.norm(p_i - np.asarray(p_c))) - params.c_t2)
    if nearest is None:
        obst = brake = 0.0
    else:
        obst = float(obstacle_energy(nearest.distance, params))
        brake = float(brake_energy(nearest.point - p_i, nearest.velocity - v_i, params))
    return EnergyBreakdown(smooth, control, tracking, obst, brake)


def unary_terms(world: WorldState, accelerations, params: EnergyParams) -> dict[str, np.ndarray]:
    """Per-robot unary terms as arrays of shape ``(n,)``."""
    accel = np.asarray(accelerations, dtype=float).reshape(world.n_robots, 2)
    smooth = params.c_k * np.sum((world.vel - world.ref_vel) ** 2, axis=1)
    control = params.c_c * np.sum(accel ** 2, axis=1)
    tracking = params.c_t1 * (np.linalg.norm(world.pos - world.ref_pos, axis=1) - params.c_t2)
    point, ovel, dist, valid = nearest_obstacles(world)
    obst = np.where(valid, obstacle_energy(np.where(valid, dist, params.d_or), params), 0.0)
    brake = np.where(valid, brake_energy(point - world.pos, ovel - world.vel, params), 0.0)
    return {"smoothness": smooth, "control": control, "tracking": tracking,
            "obstacle": obst, "brake": brake}


def unary_totals(world: WorldState, accelerations, params: EnergyParams) -> np.ndarray:
    terms = unary_terms(world, accelerations, params)
    return terms["smoothness"] + terms["control"] + terms["tracking"] + terms["obstacle"] + terms["brake"]


def pair_matrix(world: WorldState, params: EnergyParams) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise energies for all ordered pairs and the neighbour mask.

    Entries outside the neighbour mask are zero.
    """
    adj = adjacency(world)
    p_ji = world.pos[None, :, :] - world.pos[:, None, :]  # [i, j] = p_j - p_i
    v_ji = world.vel[None, :, :] - world.vel[:, None, :]
    d = np.sqrt(np.sum(p_ji * p_ji, axis=-1))
    psi = pairwise_position_energy(d, params) + pairwise_velocity_energy(p_ji, v_ji, params)
    return np.where(adj, psi, 0.0), adj


def global_energy(world: WorldState, accelerations, params: EnergyParams) -> GlobalEnergy:
    """Unary sum plus the edge-count-normalised pairwise sum."""
    h_u = float(np.sum(unary_totals(world, accelerations, params)))
    psi, adj = pair_matrix(world, params)
    n_edges = int(np.count_nonzero(np.triu(adj, 1)))
    h_p = 0.0
    if n_edges:
        h_p = world.n_robots / n_edges * float(np.sum(np.triu(psi, 1)))
    return GlobalEnergy(h_u, h_p, h_u + h_p)


def global_reward(world: WorldState, accelerations, params: EnergyParams) -> float:
    return float(np.exp(-global_energy(world, accelerations, params).H))


def decoupled_pairwise_terms(world: WorldState, params: EnergyParams) -> tuple[np.ndarray, np.ndarray]:
    """Per-robot neighbour-averaged pairwise energy and neighbour counts."""
    psi, adj = pair_matrix(world, params)
    counts = adj.sum(axis=1)
    mean = np.where(counts > 0, psi.sum(axis=1) / np.maximum(counts, 1), 0.0)
    return mean, counts


def decoupled_pairwise_energy(world: WorldState, params: EnergyParams) -> float:
    return float(np.sum(decoupled_pairwise_terms(world, params)[0]))


def local_reward(unary: float, neighbor_pair_energies, params: EnergyParams,
                 isolation_penalty: float | None = None) -> float:
    """Local reward of one robot from its unary energy and its pair energies."""
    pairs = np.asarray(neighbor_pair_energies, dtype=float).reshape(-1)
    penalty = params.isolation if isolation_penalty is None else isolation_penalty
    pair_term = float(pairs.mean()) if len(pairs) else penalty
    return float(np.exp(-unary - pair_term))


def local_rewards(world: WorldState, accelerations, params: EnergyParams,
                  isolation_penalty: float | None = None) -> np.ndarray:
    """Credit-assigned reward for every robot, shape ``(n,)``."""
    penalty = params.isolation if isolation_penalty is None else isolation_penalty
    mean_pair, counts = decoupled_pairwise_terms(world, params)
    exponent = unary_totals(world, accelerations, params) + mean_pair + np.where(counts > 0, 0.0, penalty)
    return np.exp(-exponent)


def breakdown_table(world: WorldState, accelerations, params: EnergyParams) -> list[EnergyBreakdown]:
    """Per-robot breakdown (pairwise_sum holds the neighbour-averaged pair energy)."""
    terms = unary_terms(world, accelerations, params)
    mean_pair, _ = decoupled_pairwise_terms(world, params)
    return [EnergyBreakdown(float(terms["smoothness"][i]), float(terms["control"][i]),
                            float(terms["tracking"][i]), float(terms["obstacle"][i]),
                            float(terms["brake"][i]), float(mean_pair[i]))
            for i in range(world.n_robots)]
