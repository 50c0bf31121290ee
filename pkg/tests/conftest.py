import math

import numpy as np
import pytest

from grfflock.config import EnergyParams, ScenarioConfig
from grfflock.world import from_arrays


def make_world(pos, vel=None, ref_pos=(0.0, 0.0), ref_vel=(0.0, 0.0), obstacles=None, **scn):
    """Hand-built world; ``obstacles`` is a list of ``(x, y, radius)``."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    vel = np.zeros_like(pos) if vel is None else vel
    cfg = ScenarioConfig(n_robots=len(pos), n_obstacles=0, **scn)
    opos = orad = None
    if obstacles:
        opos = [o[:2] for o in obstacles]
        orad = [o[2] for o in obstacles]
    return from_arrays(cfg, pos, vel, ref_pos, ref_vel, opos, orad)


def hex_lattice(n_rings: int, spacing: float = 1.0, origin=(7.5, 7.5)) -> np.ndarray:
    """Centred hexagonal patch: 1, 7, 19, 37 points for 0..3 rings."""
    pts = []
    for q in range(-n_rings, n_rings + 1):
        for r in range(-n_rings, n_rings + 1):
            s = -q - r
            if max(abs(q), abs(r), abs(s)) <= n_rings:
                x = spacing * (q + r / 2.0)
                y = spacing * (r * math.sqrt(3) / 2.0)
                pts.append((origin[0] + x, origin[1] + y))
    return np.array(pts)


@pytest.fixture
def params():
    return EnergyParams()


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
