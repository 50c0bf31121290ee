"""Acceptance gate.  Every test prints one PASS/FAIL line and the lines are
repeated in the terminal summary (see conftest.py)."""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from grfflock import config as cfgmod
from grfflock.cli import main
from grfflock.config import EnergyParams, PolicyConfig, ScenarioConfig, replace
from grfflock.energy import (brake_energy, decoupled_pairwise_energy, global_energy, local_rewards,
                             obstacle_energy, pairwise_energy, pairwise_position_energy,
                             pairwise_velocity_energy, unary_energy)
from grfflock.evaluation import (LearnedController, flocking_order, load_agent, make_controller, run_episode,
                                 success_rate, tracking_distance)
from grfflock.policy import ObsBatch, attention_weights
from grfflock.trainer import Agent, compute_gae, train
from grfflock.trajectory import SCHEMA_VERSION, read_jsonl, write_jsonl
from grfflock.world import NearestObstacle

from conftest import hex_lattice, make_world
from gradcheck import max_relative_error, random_problem
from test_energy import oracle_pair, oracle_unary

ROOT = Path(__file__).resolve().parents[1]
RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    line = f"acceptance {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------

def test_01_energy_oracles():
    prm = EnergyParams()
    rng = np.random.default_rng(2024)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(1000):
        p_i, p_j = rng.uniform(0, 15, 2), rng.uniform(0, 15, 2)
        v_i, v_j = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        p_c, v_c = rng.uniform(0, 15, 2), rng.uniform(-0.4, 0.4, 2)
        a_i = rng.uniform(-0.5, 0.5, 2)
        d = math.dist(p_i, p_j)
        d_o = rng.uniform(-0.1, 2.0)
        point = p_i + rng.uniform(-2, 2, 2)
        dx, dy = p_j - p_i
        wx, wy = v_j - v_i
        ox, oy = point - p_i
        checks = [
            (pairwise_position_energy(d, prm), prm.c_p1 * (1 - math.exp(-prm.c_p2 * (d - prm.d_r))) ** 2 - prm.c_p1),
            (pairwise_velocity_energy(p_j - p_i, v_j - v_i, prm),
             prm.c_v * max(0.0, -(wx * dx + wy * dy) / (dx * dx + dy * dy))),
            (pairwise_energy(p_i, v_i, p_j, v_j, prm), oracle_pair(p_i, v_i, p_j, v_j, prm)),
            (obstacle_energy(d_o, prm), prm.c_o1 * (1 - math.exp(-prm.c_o2 * min(0.0, d_o - prm.d_or))) ** 2),
            (brake_energy(point - p_i, -v_i, prm),
             prm.c_b * max(0.0, -(-v_i[0] * ox - v_i[1] * oy) / (ox * ox + oy * oy))),
            (unary_energy(p_i, v_i, p_c, v_c, a_i, NearestObstacle(point, np.zeros(2), d_o), prm).unary,
             oracle_unary(p_i, v_i, p_c, v_c, a_i, (point, (0.0, 0.0), d_o), prm)),
        ]
        worst = max(worst, max(abs(float(a) - b) for a, b in checks))
    elapsed = time.perf_counter() - t0
    at_min = float(pairwise_position_energy(prm.d_r, prm))
    ok = worst <= 1e-12 and abs(at_min + 0.03) <= 1e-15 and elapsed < 1.0
    report(1, ok, f"max |lib - oracle| = {worst:.2e} (<= 1e-12), psi_p(d_r) = {at_min!r}, {elapsed:.2f} s (< 1 s)")


def test_02_lattice_minimiser():
    prm = EnergyParams()
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    worst, all_larger = 0.0, True
    for rings in (1, 2, 3):
        pos = hex_lattice(rings, spacing=prm.d_r)
        n = len(pos)
        vel = np.tile([0.2, -0.1], (n, 1))
        w = make_world(pos, vel)
        h_p = global_energy(w, np.zeros((n, 2)), prm).H_p
        h_hat = decoupled_pairwise_energy(w, prm)
        worst = max(worst, abs(h_p + n * prm.c_p1), abs(h_hat + n * prm.c_p1))
        for _ in range(100):
            wp = make_world(pos + rng.normal(0, 0.05, pos.shape), vel + rng.normal(0, 0.05, vel.shape))
            all_larger &= global_energy(wp, np.zeros((n, 2)), prm).H_p > h_p
            all_larger &= decoupled_pairwise_energy(wp, prm) > h_hat
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and all_larger and elapsed < 5.0
    report(2, ok, f"7/19/37-robot lattices: max |H - (-|V| c_p1)| = {worst:.2e}, "
                  f"300 perturbations strictly larger = {all_larger}, {elapsed:.2f} s (< 5 s)")


def connected_state(rng):
    n = int(rng.integers(2, 13))
    pos = np.zeros((n, 2))
    pos[0] = rng.uniform(5, 10, 2)
    for k in range(1, n):
        # attach each new robot to a random earlier one, inside the sensing range
        ang = rng.uniform(0, 2 * math.pi)
        pos[k] = pos[rng.integers(k)] + rng.uniform(0.3, 1.25) * np.array([math.cos(ang), math.sin(ang)])
    obstacles = [(*rng.uniform(3, 12, 2), rng.uniform(0.2, 0.5)) for _ in range(int(rng.integers(0, 4)))]
    w = make_world(pos, rng.uniform(-1, 1, (n, 2)), ref_pos=rng.uniform(5, 10, 2), ref_vel=rng.uniform(-0.4, 0.4, 2),
                   obstacles=obstacles, arena_side=30.0)
    return w, rng.uniform(-0.5, 0.5, (n, 2))


def test_03_credit_assignment_identity():
    prm = EnergyParams(isolation_penalty=0.0)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        w, a = connected_state(rng)
        lhs = -float(np.sum(np.log(local_rewards(w, a, prm))))
        rhs = global_energy(w, a, prm).H_u + decoupled_pairwise_energy(w, prm)
        worst = max(worst, abs(lhs - rhs))
    report(3, worst <= 1e-10, f"1000 connected states: max |-sum ln r - (H_u + H_p_hat)| = {worst:.2e} (<= 1e-10)")


def test_04_gradient_check():
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = max(max_relative_error(*random_problem(rng), rng, h=1e-4) for _ in range(50))
    elapsed = time.perf_counter() - t0
    report(4, worst < 1e-4 and elapsed < 120, f"50 draws: max relative error {worst:.2e} (< 1e-4), {elapsed:.1f} s (< 120 s)")


def test_05_network_contracts():
    rng = np.random.default_rng(5)
    simplex_err, perm_err, attn_err = 0.0, 0.0, 0.0
    for _ in range(50):
        net, obs, _ = random_problem(rng, batch=6, k=5)
        probs = net.probs(obs)
        simplex_err = max(simplex_err, float(np.abs(probs.sum(axis=1) - 1).max()), float(-min(probs.min(), 0)))
        perm = rng.permutation(5)
        perm_err = max(perm_err, float(np.abs(net.forward(obs)[0] - net.forward(obs.permute_neighbors(perm))[0]).max()))
        q = rng.normal(size=(6, 5, 130)) * 5
        alpha = attention_weights(q, obs.keys, obs.mask)
        has = obs.mask.any(axis=1)
        attn_err = max(attn_err, float(np.abs(alpha[has].sum(axis=1) - 1).max()))
    ok = simplex_err <= 1e-12 and perm_err <= 1e-12 and attn_err <= 1e-6 and probs.shape[1] == 130
    report(5, ok, f"130-simplex err {simplex_err:.1e}, permutation diff {perm_err:.1e}, "
                  f"attention sum err {attn_err:.1e} (<= 1e-6)")


def test_06_gae_oracle():
    rng = np.random.default_rng(6)
    worst = 0.0
    for gamma in (0.9, 0.99, 0.999):
        r, v = rng.normal(size=500), rng.normal(size=500)
        adv, _ = compute_gae(r, v, gamma, 1.0)
        brute = np.array([math.fsum(gamma ** k * r[t + k] for k in range(500 - t)) for t in range(500)])
        worst = max(worst, float(np.abs(adv + v - brute).max()))
    report(6, worst <= 1e-10, f"length 500, lambda 1: max |A + V - G| = {worst:.2e} (<= 1e-10)")


def test_07_eval_determinism(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("scenario: {episode_steps: 60}\n")
    run = cfgmod.load(cfg)
    ckpt = train(replace(run, train=replace(run.train, total_episodes=0)), tmp_path / "init").checkpoints[0]
    same = []
    for controller, extra in (("olfati-saber", []), ("learned", ["--checkpoint", str(ckpt)])):
        for out in ("a", "b"):
            main(["eval", "--config", str(cfg), "--controller", controller, "--seed", "11",
                  "--out", str(tmp_path / out)] + extra)
        name = f"trajectory_{controller}_seed11.jsonl"
        same.append((tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes())
    report(7, all(same), f"two eval runs byte-identical: olfati-saber {same[0]}, learned {same[1]}")


# ---------------------------------------------------------------------------
# desk-scale training

DESK_RUN = Path(os.environ.get("GRFFLOCK_DESK_RUN", ROOT / "runs" / "desk"))
HELD_OUT = range(50_000, 50_010)


@pytest.mark.slow
def test_08_desk_training():
    from grfflock.evaluation import make_training_evaluator
    cfg = cfgmod.load(ROOT / "configs" / "desk.yaml")
    ckpts = sorted((DESK_RUN / "checkpoints").glob("ckpt_*.npz"))
    if not ckpts or int(ckpts[-1].stem.split("_")[1]) < cfg.train.total_episodes:
        # no finished run on disk: train one now (hours on one core)
        ckpts = train(cfg, DESK_RUN, evaluate=make_training_evaluator(cfg, cfg.train.eval_episodes)).checkpoints
    initial, final = ckpts[0], ckpts[-1]
    episodes = int(final.stem.split("_")[1])

    def evaluate(path):
        ctrl = LearnedController(load_agent(path, cfg.scenario))
        return [run_episode(ctrl, cfg.scenario, s, cfg.energy) for s in HELD_OUT]

    before, after = evaluate(initial), evaluate(final)
    r0 = float(np.mean([e.mean_local_reward for e in before]))
    r1 = float(np.mean([e.mean_local_reward for e in after]))
    phi_o = [e.phi_o for e in after if e.phi_o is not None]
    phi_o_mean = float(np.mean(phi_o)) if phi_o else float("nan")
    phi_s = float(np.mean([e.phi_s for e in after]))
    ok = episodes >= 2000 and r1 > r0 and phi_o_mean >= 0.8 and phi_s >= 0.9
    report(8, ok, f"{episodes} episodes, 10 held-out seeds: local reward {r1:.4f} vs untrained {r0:.4f}, "
                  f"phi_o {phi_o_mean:.3f} (>= 0.8, defined in {len(phi_o)}/10), phi_s {phi_s:.3f} (>= 0.9)")


def test_09_per_robot_decision_time():
    agent_cfg = cfgmod.RunConfig()
    times = {}
    for n in (10, 50):
        scn = replace(agent_cfg.scenario, n_robots=n, n_obstacles=n, episode_steps=40)
        agent = Agent.create(replace(agent_cfg, scenario=scn))
        times[n] = run_episode(LearnedController(agent), scn, seed=9).ms_per_decision
    ratio = max(times.values()) / min(times.values())
    report(9, ratio < 3.0, f"median ms/robot/decision: 10 robots {times[10]:.3f}, 50 robots {times[50]:.3f}, "
                           f"ratio {ratio:.2f} (< 3)")


def test_10_metric_sanity(tmp_path):
    rng = np.random.default_rng(10)
    pos = 7.5 + rng.uniform(-1.5, 1.5, (8, 2))
    phi_o = flocking_order(make_world(pos, np.tile([0.3, -0.2], (8, 1))))
    phi_t = tracking_distance(make_world([[4.0, 6.0]], ref_pos=(4.0, 6.0)))

    # constructed logs: k of n robots flagged as collided by the final record
    scn = ScenarioConfig(n_robots=7, n_obstacles=0)
    exact = True
    for k in range(8):
        header = {"schema_version": SCHEMA_VERSION, "type": "header", "controller": "log", "seed": 0,
                  "scenario": cfgmod.to_dict(scn), "energy": cfgmod.to_dict(EnergyParams()), "obstacles": []}
        robots = [{"id": i, "p": [1.0 + 1.5 * i, 2.0], "v": [0.0, 0.0], "frozen": False, "collided": i < k,
                   "action": "stop", "a": [0.0, 0.0]} for i in range(7)]
        step = {"schema_version": SCHEMA_VERSION, "type": "step", "step": 0, "t": 0.0, "robots": robots,
                "reference": {"p_c": [7.5, 7.5], "v_c": [0.0, 0.0]}, "metrics": {}}
        write_jsonl(tmp_path / f"log{k}.jsonl", [header, step])
        world = read_jsonl(tmp_path / f"log{k}.jsonl").world_at(0)
        exact &= success_rate(world.ever_collided) == (7 - k) / 7
    ok = phi_o == 1.0 and phi_t == 0.0 and exact
    report(10, ok, f"phi_o(identical v) = {phi_o!r}, phi_t(at reference) = {phi_t!r}, phi_s exact on 8 logs = {exact}")


def test_11_olfati_saber_baseline():
    scn = ScenarioConfig(n_robots=10, n_obstacles=0)
    ctrl = make_controller("olfati-saber", scn)
    results = [run_episode(ctrl, scn, seed) for seed in range(10)]
    orders = [r.phi_o for r in results]
    collisions = sum(int(round((1 - r.phi_s) * 10)) for r in results)
    ok = all(o is not None and o > 0.95 for o in orders) and collisions == 0
    report(11, ok, f"10 seeds: min final phi_o {min(o if o is not None else -2 for o in orders):.4f} (> 0.95), "
                   f"collisions {collisions} (== 0)")
