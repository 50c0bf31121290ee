import json
import math

import numpy as np
import pytest

from grfflock.cli import main, parse_seeds, replay
from grfflock.config import EnergyParams, ScenarioConfig, to_dict
from grfflock.evaluation import read_csv
from grfflock.trajectory import SCHEMA_VERSION, TrajectoryError, read_jsonl, write_jsonl

SHORT_YAML = """
scenario:
  n_robots: 5
  n_obstacles: 3
  episode_steps: 25
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "short.yaml"
    path.write_text(SHORT_YAML)
    return path


def test_parse_seeds():
    assert parse_seeds("3", [0]) == [3]
    assert parse_seeds("0,2,5", [0]) == [0, 2, 5]
    assert parse_seeds("0:4", [0]) == [0, 1, 2, 3]
    assert parse_seeds(None, [7]) == [7]


def test_dry_run_prints_resolved_config(cfg_file, capsys):
    assert main(["train", "--config", str(cfg_file), "--dry-run"]) == 0
    out = capsys.readouterr().out
    assert "n_robots: 5" in out and "gamma: 0.99" in out


def test_invalid_config_named_field(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("scenario:\n  obstacles:\n    - {x: 1, y: 2}\n")
    assert main(["train", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "scenario.obstacles[0].radius" in err and "line 3" in err


def test_eval_baseline_and_determinism(cfg_file, tmp_path):
    for name in ("a", "b"):
        assert main(["eval", "--config", str(cfg_file), "--controller", "olfati-saber",
                     "--seed", "0,1", "--out", str(tmp_path / name)]) == 0
    rows = read_csv(tmp_path / "a" / "metrics.csv")
    assert [r["seed"] for r in rows] == ["0", "1"]
    for s in (0, 1):
        a = (tmp_path / "a" / f"trajectory_olfati-saber_seed{s}.jsonl").read_bytes()
        b = (tmp_path / "b" / f"trajectory_olfati-saber_seed{s}.jsonl").read_bytes()
        assert a == b
        assert (tmp_path / "a" / f"trajectory_olfati-saber_seed{s}.png").stat().st_size > 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["seeds"] == [0, 1] and manifest["finished"]
    assert manifest["config"]["scenario"]["n_robots"] == 5


def test_eval_unreadable_checkpoint(cfg_file, tmp_path, capsys):
    ckpt = tmp_path / "junk.npz"
    ckpt.write_bytes(b"junk")
    assert main(["eval", "--config", str(cfg_file), "--checkpoint", str(ckpt), "--out", str(tmp_path / "o")]) == 1
    assert "not a readable checkpoint" in capsys.readouterr().err


def test_replay_matches_fresh_eval(cfg_file, tmp_path):
    main(["eval", "--config", str(cfg_file), "--controller", "tracking", "--seed", "4", "--out", str(tmp_path)])
    traj = tmp_path / "trajectory_tracking_seed4.jsonl"
    metric_rows, energy_rows, worst = replay(traj)
    assert worst <= 1e-9 and len(metric_rows) == 26 and len(energy_rows) == 26 * 5
    assert main(["replay", str(traj)]) == 0
    assert (tmp_path / "trajectory_tracking_seed4_energy_audit.csv").exists()


def test_replay_truncated_file(cfg_file, tmp_path, capsys):
    main(["eval", "--config", str(cfg_file), "--seed", "0", "--out", str(tmp_path)])
    traj = tmp_path / "trajectory_olfati-saber_seed0.jsonl"
    lines = traj.read_text().splitlines()
    traj.write_text("\n".join(lines[:5]) + "\n" + lines[5][: len(lines[5]) // 2])
    with pytest.raises(TrajectoryError, match=":6: malformed"):
        read_jsonl(traj)
    assert main(["replay", str(traj)]) == 1
    assert ":6:" in capsys.readouterr().err


def test_replay_schema_mismatch(tmp_path):
    path = tmp_path / "t.jsonl"
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION + 1, "type": "header"}) + "\n")
    with pytest.raises(TrajectoryError, match="schema_version"):
        read_jsonl(path)


def test_replay_hand_built_log_energy_oracle(tmp_path):
    scn = ScenarioConfig(n_robots=2, n_obstacles=0)
    prm = EnergyParams()
    p = [[7.0, 7.5], [7.8, 7.5]]
    v = [[0.3, 0.0], [-0.1, 0.1]]
    a = [[0.1, 0.0], [0.0, -0.2]]
    header = {"schema_version": SCHEMA_VERSION, "type": "header", "controller": "hand", "seed": 0,
              "scenario": to_dict(scn), "energy": to_dict(prm), "obstacles": [{"x": 8.0, "y": 8.3, "radius": 0.4}]}
    step = {"schema_version": SCHEMA_VERSION, "type": "step", "step": 1, "t": 0.1,
            "robots": [{"id": i, "p": p[i], "v": v[i], "frozen": False, "collided": False, "action": "d0", "a": a[i]}
                       for i in range(2)],
            "reference": {"p_c": [7.5, 7.5], "v_c": [0.2, 0.0]}, "metrics": {}}
    path = tmp_path / "hand.jsonl"
    write_jsonl(path, [header, step])
    _, rows, _ = replay(path)

    d = math.dist(p[0], p[1])
    pair = prm.c_p1 * (1 - math.exp(-prm.c_p2 * (d - prm.d_r))) ** 2 - prm.c_p1
    pji = np.subtract(p[1], p[0])
    vji = np.subtract(v[1], v[0])
    pair += prm.c_v * max(0.0, -(vji @ pji) / (pji @ pji))
    for i, row in enumerate(rows):
        smooth = prm.c_k * ((v[i][0] - 0.2) ** 2 + v[i][1] ** 2)
        control = prm.c_c * (a[i][0] ** 2 + a[i][1] ** 2)
        track = prm.c_t1 * (math.dist(p[i], (7.5, 7.5)) - prm.c_t2)
        d_o = math.dist(p[i], (8.0, 8.3)) - 0.4
        obst = prm.c_o1 * (1 - math.exp(-prm.c_o2 * min(0.0, d_o - prm.d_or))) ** 2
        point = np.array([8.0, 8.3]) + 0.4 * (np.array(p[i]) - [8.0, 8.3]) / math.dist(p[i], (8.0, 8.3))
        p_oi = point - p[i]
        brake = prm.c_b * max(0.0, -(-np.array(v[i]) @ p_oi) / (p_oi @ p_oi))
        assert row["smoothness"] == pytest.approx(smooth, abs=1e-15)
        assert row["control"] == pytest.approx(control, abs=1e-15)
        assert row["tracking"] == pytest.approx(track, abs=1e-15)
        assert row["obstacle"] == pytest.approx(obst, abs=1e-15)
        assert row["brake"] == pytest.approx(brake, abs=1e-15)
        assert row["pairwise_mean"] == pytest.approx(pair, abs=1e-15)
        total = smooth + control + track + obst + brake + pair
        assert row["local_reward"] == pytest.approx(math.exp(-total), rel=1e-12)


def test_bench_writes_reports(tmp_path):
    cfg = tmp_path / "b.yaml"
    cfg.write_text("scenario: {episode_steps: 10}\nbench: {n_robots: [4], n_obstacles: [0, 2], seeds: [0, 1],"
                   " controllers: [olfati-saber, tracking]}\n")
    assert main(["bench", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert len(read_csv(tmp_path / "o" / "bench_raw.csv")) == 8
    assert len(read_csv(tmp_path / "o" / "bench_aggregate.csv")) == 4
    assert (tmp_path / "o" / "bench.png").stat().st_size > 0


def test_train_small_run(tmp_path):
    cfg = tmp_path / "t.yaml"
    cfg.write_text("scenario: {n_robots: 3, n_obstacles: 1, episode_steps: 10}\n"
                   "policy: {embed_dim: 4, value_dim: 4, self_dim: 4, head_hidden: [8]}\n"
                   "train: {total_episodes: 2, episodes_per_batch: 1, eval_interval: 1, eval_episodes: 1,"
                   " minibatch_size: 16, epochs_per_batch: 1}\n")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    assert len(list((out / "checkpoints").glob("*.npz"))) == 3
    rows = read_csv(out / "learning_curve.csv")
    assert len(rows) == 2 and rows[-1]["phi_s"] != ""
    assert (out / "learning_curve.png").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [3] and manifest["status"] == "ok"


def test_energy_audit(cfg_file, tmp_path, capsys):
    assert main(["energy-audit", "--config", str(cfg_file), "--seed", "2", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "energy_audit_seed2.csv")
    assert len(rows) == 5 and "H_u=" in capsys.readouterr().out
