"""Decentralised PPO with credit-assigned local rewards.

Every robot contributes its own transitions, rewarded by its local reward,
to one shared policy/critic pair (or to its own copy when parameter sharing
is off).  Advantages come from GAE computed separately for every
(episode, robot) stream.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .actions import ActionSpace, DEFAULT_SPACE
from .config import RunConfig, ScenarioConfig, TrainConfig
from .energy import local_rewards
from .policy import (ActionAttentionNet, FeatureEncoder, ObsBatch, log_softmax, sample_indices,
                     save_checkpoint)
from .world import WorldState, adjacency, init_scenario, sense_all, step

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["batch", "episodes", "mean_reward", "policy_loss", "value_loss", "entropy",
                 "clip_frac", "approx_kl", "phi_o", "phi_t", "phi_s", "eval_reward", "seconds"]


class NonFiniteLoss(FloatingPointError):
    """A PPO minibatch produced a NaN/Inf loss; the batch was rolled back."""


def episode_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([int(base), int(index)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# rollout storage
# ---------------------------------------------------------------------------

@dataclass
class RolloutBuffer:
    n_episodes: int
    n_steps: int
    n_robots: int
    self_x: np.ndarray
    nbr_ptr: np.ndarray
    nbr_x: np.ndarray
    nbr_key: np.ndarray        # row index into key_table
    key_table: np.ndarray      # action distributions broadcast at the previous step
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    forced: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray = field(default=None)  # critic value of the final state, (E, N)

    @property
    def size(self) -> int:
        return len(self.actions)

    @property
    def robot_ids(self) -> np.ndarray:
        return np.tile(np.arange(self.n_robots), self.n_episodes * self.n_steps)

    @property
    def episode_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_episodes), self.n_steps * self.n_robots)

    def grid(self, arr: np.ndarray) -> np.ndarray:
        """View a flat per-sample array as ``(episode, step, robot)``."""
        return arr.reshape(self.n_episodes, self.n_steps, self.n_robots)

    def batch(self, idx: np.ndarray) -> ObsBatch:
        idx = np.asarray(idx)
        start = self.nbr_ptr[idx]
        counts = self.nbr_ptr[idx + 1] - start
        k = max(int(counts.max()) if len(idx) else 0, 1)
        rows = np.repeat(np.arange(len(idx)), counts)
        slot = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        src = np.repeat(start, counts) + slot
        nbr_x = np.zeros((len(idx), k, self.nbr_x.shape[1]))
        keys = np.zeros((len(idx), k, self.key_table.shape[1]))
        mask = np.zeros((len(idx), k), dtype=bool)
        nbr_x[rows, slot] = self.nbr_x[src]
        keys[rows, slot] = self.key_table[self.nbr_key[src]]
        mask[rows, slot] = True
        return ObsBatch(self.self_x[idx], nbr_x, keys, mask)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.self_x, self.nbr_ptr, self.nbr_x, self.nbr_key, self.key_table, self.actions,
                    self.log_probs, self.rewards, self.values, self.forced, self.dones):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class _Collector:
    def __init__(self, n_actions: int, self_dim: int):
        self.n_actions = n_actions
        self.self_x: list[np.ndarray] = []
        self.counts: list[np.ndarray] = []
        self.nbr_x: list[np.ndarray] = []
        self.nbr_key: list[np.ndarray] = []
        self.keys: list[np.ndarray] = []
        self.cols: dict[str, list[np.ndarray]] = {k: [] for k in
                                                  ("actions", "log_probs", "rewards", "values", "forced", "dones")}
        self.key_rows = 0

    def add_indexed(self, batch: ObsBatch, neighbor_ids: np.ndarray, prev_dists: np.ndarray, **cols):
        counts = batch.mask.sum(axis=1)
        self.self_x.append(batch.self_x)
        self.counts.append(counts)
        self.nbr_x.append(batch.nbr_x[batch.mask])
        self.nbr_key.append(self.key_rows + neighbor_ids)
        self.keys.append(prev_dists)
        self.key_rows += len(prev_dists)
        for k, v in cols.items():
            self.cols[k].append(np.asarray(v))

    def finish(self, n_episodes: int, n_steps: int, n_robots: int, last_values) -> RolloutBuffer:
        counts = np.concatenate(self.counts)
        ptr = np.concatenate([[0], np.cumsum(counts)])
        return RolloutBuffer(
            n_episodes=n_episodes, n_steps=n_steps, n_robots=n_robots,
            self_x=np.concatenate(self.self_x),
            nbr_ptr=ptr,
            nbr_x=np.concatenate(self.nbr_x).reshape(-1, 4),
            nbr_key=np.concatenate(self.nbr_key).astype(int),
            key_table=np.concatenate(self.keys),
            actions=np.concatenate(self.cols["actions"]).astype(int),
            log_probs=np.concatenate(self.cols["log_probs"]),
            rewards=np.concatenate(self.cols["rewards"]),
            values=np.concatenate(self.cols["values"]),
            forced=np.concatenate(self.cols["forced"]).astype(bool),
            dones=np.concatenate(self.cols["dones"]).astype(bool),
            last_values=np.asarray(last_values, dtype=float).reshape(n_episodes, n_robots),
        )


class Agent:
    """Policy and critic networks for all robots (one shared pair or one per robot)."""

    def __init__(self, policies: list[ActionAttentionNet], critics: list[ActionAttentionNet],
                 encoder: FeatureEncoder, space: ActionSpace = DEFAULT_SPACE):
        self.policies = policies
        self.critics = critics
        self.encoder = encoder
        self.space = space

    @classmethod
    def create(cls, cfg: RunConfig, space: ActionSpace = DEFAULT_SPACE) -> "Agent":
        encoder = FeatureEncoder(cfg.scenario)
        rng = np.random.default_rng(cfg.policy.init_seed)
        copies = 1 if cfg.policy.shared_parameters else cfg.scenario.n_robots
        policies = [ActionAttentionNet.create(encoder.self_dim, space.size, space.size, cfg.policy, rng)
                    for _ in range(copies)]
        critics = [ActionAttentionNet.create(encoder.self_dim, space.size, 1, cfg.policy, rng,
                                             out_scale=cfg.train.critic_scale) for _ in range(copies)]
        return cls(policies, critics, encoder, space)

    @property
    def shared(self) -> bool:
        return len(self.policies) == 1

    def _per_copy(self, nets, batch: ObsBatch, fn) -> np.ndarray:
        if self.shared:
            return fn(nets[0], batch)
        if len(batch) != len(nets):
            raise ValueError(f"per-robot parameters need {len(nets)} observations, got {len(batch)}")
        return np.concatenate([fn(nets[i], batch.take([i])) for i in range(len(nets))])

    def action_probs(self, batch: ObsBatch) -> np.ndarray:
        return self._per_copy(self.policies, batch, lambda net, b: net.probs(b))

    def values(self, batch: ObsBatch) -> np.ndarray:
        return self._per_copy(self.critics, batch, lambda net, b: net.values(b))

    def checkpoint(self, path: Path, cfg: RunConfig, episodes: int) -> None:
        meta = {
            "n_actions": self.space.size,
            "magnitudes": list(self.space.magnitudes),
            "n_directions": self.space.n_directions,
            "action_order": "discrete[magnitude-major, direction-minor], stop_rule, follow_rule",
            "self_dim": self.encoder.self_dim,
            "episodes": episodes,
            "scenario": {k: getattr(cfg.scenario, k) for k in
                         ("arena_side", "v_max", "d_in", "d_o_max", "n_sectors")},
        }
        save_checkpoint(path, self.policies, self.critics, meta)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def run_policy_step(agent: Agent, world: WorldState, prev_dists: np.ndarray, rng: np.random.Generator | None,
                    deterministic: bool = False):
    """Observe, act and step once for every robot.

    Returns ``(batch, adjacency, probs, actions, log_probs, forced, accel)``.
    Frozen robots are forced onto the stop rule.
    """
    adj = adjacency(world)
    batch = agent.encoder.encode_world(world, prev_dists, sense_all(world), adj)
    probs = agent.action_probs(batch)
    if deterministic:
        actions = np.argmax(probs, axis=1)
    else:
        actions = sample_indices(probs, rng)
    forced = world.frozen
    actions = np.where(forced, agent.space.stop_index, actions)
    logp = np.log(np.maximum(probs[np.arange(len(actions)), actions], 1e-300))
    accel = agent.space.resolve(actions, world.vel, world.ref_vel, world.config.a_max)
    return batch, adj, probs, actions, logp, forced, accel


def broadcast_dists(agent: Agent, probs: np.ndarray, forced: np.ndarray) -> np.ndarray:
    """Distributions neighbours see at the next step; frozen robots announce the stop rule."""
    out = probs.copy()
    if forced.any():
        out[forced] = agent.space.one_hot(agent.space.stop_index)
    return out


def collect_rollouts(make_world: Callable[[int], WorldState], agent: Agent, n_episodes: int,
                     rng: np.random.Generator, energy_params, episode_offset: int = 0,
                     stats: dict | None = None) -> RolloutBuffer:
    """Run ``n_episodes`` full episodes with stochastic actions.

    ``make_world(k)`` builds the initial state of episode ``k``.  Each robot
    logs its local reward evaluated on the post-step state.
    """
    collector = _Collector(agent.space.size, agent.encoder.self_dim)
    last_values = []
    n_steps = n_robots = None
    ep_rewards = []
    for ep in range(n_episodes):
        world = make_world(episode_offset + ep)
        n_robots = world.n_robots
        n_steps = world.config.episode_steps
        prev = np.tile(agent.space.uniform(), (n_robots, 1))
        total = np.zeros(n_robots)
        for t in range(n_steps):
            batch, adj, probs, actions, logp, forced, accel = run_policy_step(agent, world, prev, rng)
            values = agent.values(batch)
            world = step(world, accel)
            rewards = local_rewards(world, accel, energy_params)
            total += rewards
            rows, cols = np.nonzero(adj)
            collector.add_indexed(batch, cols, prev, actions=actions, log_probs=logp, rewards=rewards,
                                  values=values, forced=forced,
                                  dones=np.full(n_robots, t == n_steps - 1))
            prev = broadcast_dists(agent, probs, forced)
        final = agent.encoder.encode_world(world, prev)
        last_values.append(agent.values(final))
        ep_rewards.append(total.mean())
    if stats is not None:
        stats["mean_episode_reward"] = float(np.mean(ep_rewards))
    return collector.finish(n_episodes, n_steps, n_robots, np.concatenate(last_values))


# ---------------------------------------------------------------------------
# advantage estimation
# ---------------------------------------------------------------------------

def compute_gae(rewards, values, gamma: float, lam: float, last_values=None):
    """GAE along axis 0 of ``(T, ...)`` arrays; each trailing index is its own stream.

    ``last_values`` bootstraps the value after the final step (zero when
    omitted).  Returns ``(advantages, returns)`` with ``returns = adv + values``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    next_value = np.zeros(rewards.shape[1:]) if last_values is None else np.asarray(last_values, dtype=float)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[1:])
    for t in range(rewards.shape[0] - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


def buffer_gae(buf: RolloutBuffer, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """Flat per-sample advantages/returns; streams are (episode, robot) pairs."""
    r = buf.grid(buf.rewards).transpose(1, 0, 2)   # (T, E, N)
    v = buf.grid(buf.values).transpose(1, 0, 2)
    last = buf.last_values if cfg.bootstrap == "value" else None
    adv, ret = compute_gae(r, v, cfg.gamma, cfg.gae_lambda, last)
    return adv.transpose(1, 0, 2).reshape(-1), ret.transpose(1, 0, 2).reshape(-1)


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------

def ppo_policy_loss(logits, actions, old_log_probs, advantages, clip_eps: float, entropy_coef: float,
                    weights=None):
    """Clipped surrogate loss with entropy bonus, and its gradient w.r.t. logits.

    ``loss = -mean(min(rho*A, clip(rho)*A)) - c_e * mean(entropy)`` where the
    mean runs over samples with nonzero weight.
    """
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    n = logits.shape[0]
    rows = np.arange(n)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    denom = max(w.sum(), 1e-12)
    logp = logp_all[rows, actions]
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    surr1 = ratio * advantages
    surr2 = clipped * advantages
    use_unclipped = surr1 <= surr2
    entropy = -np.sum(p * logp_all, axis=1)
    loss = -np.sum(w * np.minimum(surr1, surr2)) / denom - entropy_coef * np.sum(w * entropy) / denom

    d_logp = np.where(use_unclipped, -surr1, 0.0) * w / denom
    d_logits = -p * d_logp[:, None]
    d_logits[rows, actions] += d_logp
    # d entropy / d logits = -p * (log p + H)
    d_logits += entropy_coef * (w / denom)[:, None] * p * (logp_all + entropy[:, None])
    stats = {
        "entropy": float(np.sum(w * entropy) / denom),
        "clip_frac": float(np.sum(w * (np.abs(ratio - 1.0) > clip_eps)) / denom),
        "approx_kl": float(np.sum(w * ((ratio - 1.0) - (logp - old_log_probs))) / denom),
    }
    return float(loss), d_logits, stats


def value_loss(values, returns):
    diff = values - returns
    return float(np.mean(diff ** 2)), 2.0 * diff / len(diff)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            self.params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self):
        return self.t, {k: v.copy() for k, v in self.m.items()}, {k: v.copy() for k, v in self.v.items()}

    def restore(self, state) -> None:
        self.t, m, v = state
        for k in self.m:
            self.m[k][...] = m[k]
            self.v[k][...] = v[k]


class SGD:
    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.params, self.lr = params, lr

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            self.params[k] -= self.lr * g

    def state(self):
        return None

    def restore(self, state) -> None:
        pass


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


class PPOTrainer:
    """Holds optimiser state across batches for one :class:`Agent`."""

    def __init__(self, agent: Agent, cfg: TrainConfig, rng: np.random.Generator):
        self.agent = agent
        self.cfg = cfg
        self.rng = rng
        opt = Adam if cfg.optimizer == "adam" else SGD
        self.policy_opts = [opt(net.params, cfg.learning_rate) for net in agent.policies]
        self.critic_opts = [opt(net.params, cfg.learning_rate) for net in agent.critics]

    def update(self, buf: RolloutBuffer) -> dict:
        """Run ``epochs_per_batch`` passes of minibatch updates over ``buf``."""
        cfg = self.cfg
        adv, ret = buffer_gae(buf, cfg)
        if cfg.normalize_advantages:
            usable = ~buf.forced
            ref = adv[usable] if usable.any() else adv
            adv = (adv - ref.mean()) / (ref.std() + 1e-8)
        snapshot = [(net.copy(), opt.state()) for net, opt in
                    zip(self.agent.policies + self.agent.critics, self.policy_opts + self.critic_opts)]
        groups = [np.arange(buf.size)] if self.agent.shared else \
            [np.flatnonzero(buf.robot_ids == r) for r in range(len(self.agent.policies))]
        totals = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_frac": 0.0, "approx_kl": 0.0}
        n_updates = 0
        try:
            for copy_idx, group in enumerate(groups):
                policy, critic = self.agent.policies[copy_idx], self.agent.critics[copy_idx]
                p_opt, c_opt = self.policy_opts[copy_idx], self.critic_opts[copy_idx]
                for _ in range(cfg.epochs_per_batch):
                    order = group[self.rng.permutation(len(group))]
                    for start in range(0, len(order), cfg.minibatch_size):
                        idx = order[start:start + cfg.minibatch_size]
                        batch = buf.batch(idx)
                        logits, cache = policy.forward(batch)
                        loss, d_logits, st = ppo_policy_loss(
                            logits, buf.actions[idx], buf.log_probs[idx], adv[idx], cfg.clip_eps,
                            cfg.entropy_coef, weights=(~buf.forced[idx]).astype(float))
                        values, v_cache = critic.forward(batch)
                        v_loss, d_values = value_loss(values[:, 0], ret[idx])
                        if not (math.isfinite(loss) and math.isfinite(v_loss)):
                            raise NonFiniteLoss(f"non-finite loss (policy={loss}, value={v_loss}) "
                                                f"at minibatch starting {start}")
                        p_opt.step(_clip_grads(policy.backward(cache, d_logits), cfg.max_grad_norm))
                        c_opt.step(_clip_grads(critic.backward(v_cache, d_values[:, None]), cfg.max_grad_norm))
                        totals["policy_loss"] += loss
                        totals["value_loss"] += v_loss
                        for k in ("entropy", "clip_frac", "approx_kl"):
                            totals[k] += st[k]
                        n_updates += 1
        except NonFiniteLoss:
            for (saved, opt_state), net, opt in zip(snapshot, self.agent.policies + self.agent.critics,
                                                    self.policy_opts + self.critic_opts):
                for k in net.params:
                    net.params[k][...] = saved.params[k]
                opt.restore(opt_state)
            raise
        out = {k: v / max(n_updates, 1) for k, v in totals.items()}
        out["updates"] = n_updates
        return out


def ppo_update(agent: Agent, buf: RolloutBuffer, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One-off update with fresh optimiser state (see :class:`PPOTrainer` for training)."""
    return PPOTrainer(agent, cfg, rng).update(buf)


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoints: list[Path]
    curve_path: Path
    rows: list[dict]


def train(cfg: RunConfig, out_dir: str | Path, evaluate: Callable | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Alternate rollout collection and PPO updates, checkpointing as it goes.

    ``evaluate(agent)`` returns ``{"phi_o", "phi_t", "phi_s"}`` and is called
    every ``eval_interval`` episodes and at the end.
    """
    out_dir = Path(out_dir)
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    agent = Agent.create(cfg)
    trainer = PPOTrainer(agent, tc, np.random.default_rng(np.random.SeedSequence([tc.seed, 1])))
    sample_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 2]))

    def make_world(k: int) -> WorldState:
        return init_scenario(cfg.scenario, episode_seed(tc.seed, k))

    checkpoints = []
    path = ckpt_dir / "ckpt_000000.npz"
    agent.checkpoint(path, cfg, 0)
    checkpoints.append(path)

    curve_path = out_dir / "learning_curve.csv"
    rows: list[dict] = []
    episodes = 0
    batch_idx = 0
    next_eval = tc.eval_interval
    with open(curve_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        while episodes < tc.total_episodes:
            t0 = time.perf_counter()
            n_ep = min(tc.episodes_per_batch, tc.total_episodes - episodes)
            stats: dict = {}
            buf = collect_rollouts(make_world, agent, n_ep, sample_rng, cfg.energy,
                                   episode_offset=episodes, stats=stats)
            upd = trainer.update(buf)
            episodes += n_ep
            batch_idx += 1
            row = {"batch": batch_idx, "episodes": episodes, "mean_reward": stats["mean_episode_reward"],
                   **{k: upd[k] for k in ("policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl")},
                   "phi_o": "", "phi_t": "", "phi_s": "", "eval_reward": ""}
            final = episodes >= tc.total_episodes
            if episodes >= next_eval or final:
                if evaluate is not None:
                    row.update(evaluate(agent))
                path = ckpt_dir / f"ckpt_{episodes:06d}.npz"
                agent.checkpoint(path, cfg, episodes)
                checkpoints.append(path)
                while next_eval <= episodes:
                    next_eval += tc.eval_interval
            row["seconds"] = round(time.perf_counter() - t0, 3)
            writer.writerow(row)
            fh.flush()
            rows.append(row)
            log.info("batch %d episodes %d reward %.3f entropy %.3f", batch_idx, episodes,
                     row["mean_reward"], row["entropy"])
            if progress is not None:
                progress(row)
    return TrainResult(checkpoints, curve_path, rows)
