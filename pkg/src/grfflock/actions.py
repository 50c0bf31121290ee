"""Hybrid action space: a table of discrete accelerations plus two rules.

Action indices follow a fixed order that is also the layout of every action
distribution, the policy output and the checkpoint format::

    0 .. m*l-1   discrete  M_a * (cos theta_b, sin theta_b), index = a*l + b
    m*l          stop rule    a = -v_i
    m*l + 1      follow rule  a = v_c - v_i
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_MAGNITUDES = (0.05, 0.1, 0.2, 0.5)
DEFAULT_DIRECTIONS = 32


def build_action_set(magnitudes=DEFAULT_MAGNITUDES, n_directions: int = DEFAULT_DIRECTIONS) -> np.ndarray:
    """Discrete acceleration table, magnitude-major, shape ``(len(magnitudes)*n_directions, 2)``."""
    if len(magnitudes) == 0 or n_directions < 1:
        raise ValueError("need at least one magnitude and one direction")
    theta = np.arange(n_directions) * (2.0 * math.pi / n_directions)
    unit = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return np.concatenate([m * unit for m in magnitudes], axis=0)


@dataclass(frozen=True)
class ActionSpec:
    kind: str  # "discrete", "stop_rule" or "follow_rule"
    index: int

    def __str__(self) -> str:
        return f"d{self.index}" if self.kind == "discrete" else self.kind


class ActionSpace:
    """Immutable action table with index <-> spec conversion and resolution."""

    def __init__(self, magnitudes=DEFAULT_MAGNITUDES, n_directions: int = DEFAULT_DIRECTIONS):
        self.magnitudes = tuple(float(m) for m in magnitudes)
        self.n_directions = int(n_directions)
        self.table = build_action_set(self.magnitudes, self.n_directions)
        self.table.setflags(write=False)
        self.n_discrete = len(self.table)
        self.stop_index = self.n_discrete
        self.follow_index = self.n_discrete + 1
        self.size = self.n_discrete + 2

    def spec(self, index: int) -> ActionSpec:
        if not 0 <= index < self.size:
            raise ValueError(f"action index {index} outside 0..{self.size - 1}")
        if index == self.stop_index:
            return ActionSpec("stop_rule", index)
        if index == self.follow_index:
            return ActionSpec("follow_rule", index)
        return ActionSpec("discrete", index)

    def resolve(self, indices, velocities, ref_velocity, a_max: float) -> np.ndarray:
        """Accelerations for a batch of robots, each clipped to ``a_max`` in norm."""
        idx = np.asarray(indices, dtype=int).reshape(-1)
        vel = np.asarray(velocities, dtype=float).reshape(-1, 2)
        out = np.zeros((len(idx), 2))
        disc = idx < self.n_discrete
        out[disc] = self.table[idx[disc]]
        stop = idx == self.stop_index
        out[stop] = -vel[stop]
        follow = idx == self.follow_index
        out[follow] = np.asarray(ref_velocity, dtype=float) - vel[follow]
        norms = np.linalg.norm(out, axis=1, keepdims=True)
        return np.where(norms > a_max, out * (a_max / np.maximum(norms, 1e-300)), out)

    def rotate(self, index: int, steps: int = 1) -> int:
        """Index of the discrete action rotated by ``steps * 2*pi/n_directions``."""
        if index >= self.n_discrete:
            return index
        mag, direction = divmod(index, self.n_directions)
        return mag * self.n_directions + (direction + steps) % self.n_directions

    def uniform(self) -> np.ndarray:
        return np.full(self.size, 1.0 / self.size)

    def one_hot(self, index: int) -> np.ndarray:
        out = np.zeros(self.size)
        out[index] = 1.0
        return out


DEFAULT_SPACE = ActionSpace()


def resolve_action(spec: ActionSpec, robot, reference, a_max: float, space: ActionSpace = DEFAULT_SPACE) -> np.ndarray:
    """Acceleration commanded by ``spec`` for one robot."""
    return space.resolve([spec.index], robot.velocity, reference.velocity, a_max)[0]
