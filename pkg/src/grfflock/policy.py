"""Action-attention policy and critic with hand-written backpropagation.

Each robot embeds every neighbour's relative state into a feature ``e_j``
(linear + ReLU) and derives a query ``q_j`` and a value ``l_j`` from it.  The
neighbour's previous action distribution serves as the key, so the attention
logit is ``q_j . A_j / sqrt(n_actions)``; a softmax over neighbours weights the
values into a context vector ``c_i``.  The robot's own state and obstacle
sectors are embedded into ``e_i``, and an MLP on ``[e_i, c_i]`` produces
action logits (policy) or a scalar (critic).

Everything runs on padded batches: ``B`` observations with up to ``K``
neighbours each, with a mask marking real neighbours.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .actions import ActionSpace, ActionSpec, DEFAULT_SPACE
from .config import PolicyConfig, ScenarioConfig
from .world import ObservationBundle, WorldState, adjacency, sense_all

NEIGHBOR_DIM = 4
CHECKPOINT_FORMAT = "grfflock-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class ObsBatch:
    self_x: np.ndarray   # (B, D_self)
    nbr_x: np.ndarray    # (B, K, 4)
    keys: np.ndarray     # (B, K, n_actions)
    mask: np.ndarray     # (B, K) bool

    def __len__(self) -> int:
        return self.self_x.shape[0]

    def take(self, rows) -> "ObsBatch":
        return ObsBatch(self.self_x[rows], self.nbr_x[rows], self.keys[rows], self.mask[rows])

    def permute_neighbors(self, perm) -> "ObsBatch":
        return ObsBatch(self.self_x, self.nbr_x[:, perm], self.keys[:, perm], self.mask[:, perm])


class FeatureEncoder:
    """Turns raw observations into normalised network inputs.

    Self features: ``(p_i - p_c) / arena_side``, ``v_i / v_max``,
    ``v_c / v_max`` and ``sectors / d_o_max``.  Neighbour features:
    ``dp / d_in`` and ``dv / v_max``.
    """

    def __init__(self, scenario: ScenarioConfig):
        self.arena = scenario.arena_side
        self.v_max = scenario.v_max
        self.d_in = scenario.d_in
        self.d_o_max = scenario.d_o_max
        self.n_sectors = scenario.n_sectors

    @property
    def self_dim(self) -> int:
        return 6 + self.n_sectors

    def self_features(self, p_i, v_i, p_c, v_c, sectors) -> np.ndarray:
        p_i = np.asarray(p_i, dtype=float).reshape(-1, 2)
        n = p_i.shape[0]
        return np.concatenate([
            (p_i - np.asarray(p_c).reshape(-1, 2)) / self.arena,
            np.asarray(v_i, dtype=float).reshape(n, 2) / self.v_max,
            np.broadcast_to(np.asarray(v_c, dtype=float).reshape(-1, 2), (n, 2)) / self.v_max,
            np.asarray(sectors, dtype=float).reshape(n, -1) / self.d_o_max,
        ], axis=1)

    def neighbor_features(self, rel) -> np.ndarray:
        rel = np.asarray(rel, dtype=float)
        scale = np.array([self.d_in, self.d_in, self.v_max, self.v_max])
        return rel / scale

    def encode(self, bundles: list[ObservationBundle], n_actions: int) -> ObsBatch:
        """Pad a list of observation bundles into one batch."""
        b = len(bundles)
        k = max([len(o.neighbor_ids) for o in bundles] + [1])
        self_x = np.concatenate([
            self.self_features(o.p_i, o.v_i, o.p_c, o.v_c, o.obstacle_sectors) for o in bundles
        ], axis=0) if b else np.zeros((0, self.self_dim))
        nbr_x = np.zeros((b, k, NEIGHBOR_DIM))
        keys = np.zeros((b, k, n_actions))
        mask = np.zeros((b, k), dtype=bool)
        for r, o in enumerate(bundles):
            m = len(o.neighbor_ids)
            if m:
                nbr_x[r, :m] = self.neighbor_features(o.neighbor_obs)
                keys[r, :m] = o.neighbor_action_dists
                mask[r, :m] = True
        return ObsBatch(self_x, nbr_x, keys, mask)

    def encode_world(self, world: WorldState, prev_dists: np.ndarray, sectors: np.ndarray | None = None,
                     adj: np.ndarray | None = None) -> ObsBatch:
        """Batch of every robot's observation; neighbours in ascending id order."""
        n = world.n_robots
        adj = adjacency(world) if adj is None else adj
        sectors = sense_all(world) if sectors is None else sectors
        self_x = self.self_features(world.pos, world.vel, world.ref_pos, world.ref_vel, sectors)
        counts = adj.sum(axis=1)
        k = max(int(counts.max()) if n else 0, 1)
        rows, cols = np.nonzero(adj)  # row-major, so cols ascend within each row
        slot = np.arange(len(rows)) - np.repeat(np.cumsum(counts) - counts, counts)
        nbr_x = np.zeros((n, k, NEIGHBOR_DIM))
        keys = np.zeros((n, k, prev_dists.shape[1]))
        mask = np.zeros((n, k), dtype=bool)
        rel = np.concatenate([world.pos[cols] - world.pos[rows], world.vel[cols] - world.vel[rows]], axis=1)
        nbr_x[rows, slot] = self.neighbor_features(rel)
        keys[rows, slot] = prev_dists[cols]
        mask[rows, slot] = True
        return ObsBatch(self_x, nbr_x, keys, mask)


def _relu(x):
    return np.maximum(x, 0.0)


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def attention_weights(queries, keys, mask=None):
    """Softmax over neighbours of ``q_j . A_j / sqrt(dim q)``.

    Accepts ``(K, A)`` or batched ``(B, K, A)`` inputs; masked slots get weight
    zero and rows without any neighbour are all zero.
    """
    queries = np.asarray(queries, dtype=float)
    keys = np.asarray(keys, dtype=float)
    logits = np.sum(queries * keys, axis=-1) / math.sqrt(queries.shape[-1])
    if mask is None:
        mask = np.ones(logits.shape, dtype=bool)
    shifted = np.where(mask, logits, -np.inf)
    top = np.max(shifted, axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(np.where(mask, logits, 0.0) - top), 0.0)
    total = np.sum(e, axis=-1, keepdims=True)
    return np.where(total > 0, e / np.where(total > 0, total, 1.0), 0.0)


def aggregate(alpha, values):
    """Attention-weighted sum ``sum_j alpha_j l_j`` over the neighbour axis."""
    return np.einsum("...k,...kd->...d", np.asarray(alpha, dtype=float), np.asarray(values, dtype=float))


class ActionAttentionNet:
    """Parameters plus batched forward/backward passes.

    ``out_dim`` is the number of actions for a policy and 1 for a critic;
    the critic output is multiplied by ``out_scale``.
    """

    def __init__(self, params: dict[str, np.ndarray], n_actions: int, out_scale: float = 1.0):
        self.params = params
        self.n_actions = n_actions
        self.out_scale = float(out_scale)
        self.n_hidden = sum(1 for k in params if k.startswith("W_h"))

    # -- construction --------------------------------------------------
    @classmethod
    def create(cls, self_dim: int, n_actions: int, out_dim: int, cfg: PolicyConfig,
               rng: np.random.Generator, out_scale: float = 1.0) -> "ActionAttentionNet":
        def he(fan_out, fan_in, gain=2.0):
            return rng.normal(0.0, math.sqrt(gain / fan_in), size=(fan_out, fan_in))

        p = {
            "W_e": he(cfg.embed_dim, NEIGHBOR_DIM), "b_e": np.zeros(cfg.embed_dim),
            "W_q": he(n_actions, cfg.embed_dim, 1.0), "b_q": np.zeros(n_actions),
            "W_l": he(cfg.value_dim, cfg.embed_dim, 1.0), "b_l": np.zeros(cfg.value_dim),
            "W_s": he(cfg.self_dim, self_dim), "b_s": np.zeros(cfg.self_dim),
        }
        width = cfg.self_dim + cfg.value_dim
        for k, h in enumerate(cfg.head_hidden):
            p[f"W_h{k}"] = he(h, width)
            p[f"b_h{k}"] = np.zeros(h)
            width = h
        p["W_out"] = he(out_dim, width, 1.0) * cfg.head_init_scale
        p["b_out"] = np.zeros(out_dim)
        return cls(p, n_actions, out_scale)

    def copy(self) -> "ActionAttentionNet":
        return ActionAttentionNet({k: v.copy() for k, v in self.params.items()}, self.n_actions, self.out_scale)

    # -- pieces ----------------------------------------------------------
    def embed_neighbor(self, o_ij):
        """``(e_j, q_j, l_j)`` for neighbour feature rows ``o_ij`` (..., 4)."""
        p = self.params
        e = _relu(np.asarray(o_ij, dtype=float) @ p["W_e"].T + p["b_e"])
        return e, e @ p["W_q"].T + p["b_q"], e @ p["W_l"].T + p["b_l"]

    # -- batched passes ----------------------------------------------------
    def forward(self, batch: ObsBatch):
        """Raw outputs (logits or scaled values) and the cache for :meth:`backward`."""
        p = self.params
        z_e = batch.nbr_x @ p["W_e"].T + p["b_e"]
        e = _relu(z_e)
        q = e @ p["W_q"].T + p["b_q"]
        l = e @ p["W_l"].T + p["b_l"]
        alpha = attention_weights(q, batch.keys, batch.mask)
        c = aggregate(alpha, l)
        z_s = batch.self_x @ p["W_s"].T + p["b_s"]
        h = np.concatenate([_relu(z_s), c], axis=1)
        hidden_in, hidden_z = [], []
        for k in range(self.n_hidden):
            hidden_in.append(h)
            z = h @ p[f"W_h{k}"].T + p[f"b_h{k}"]
            hidden_z.append(z)
            h = _relu(z)
        out = (h @ p["W_out"].T + p["b_out"]) * self.out_scale
        cache = dict(batch=batch, z_e=z_e, e=e, q=q, l=l, alpha=alpha, z_s=z_s,
                     hidden_in=hidden_in, hidden_z=hidden_z, h_last=h)
        return out, cache

    def backward(self, cache, d_out) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradient w.r.t. the raw outputs."""
        p = self.params
        batch: ObsBatch = cache["batch"]
        g: dict[str, np.ndarray] = {}
        d_out = np.asarray(d_out, dtype=float) * self.out_scale
        h = cache["h_last"]
        g["W_out"] = d_out.T @ h
        g["b_out"] = d_out.sum(axis=0)
        dh = d_out @ p["W_out"]
        for k in reversed(range(self.n_hidden)):
            dz = dh * (cache["hidden_z"][k] > 0)
            g[f"W_h{k}"] = dz.T @ cache["hidden_in"][k]
            g[f"b_h{k}"] = dz.sum(axis=0)
            dh = dz @ p[f"W_h{k}"]
        n_self = p["W_s"].shape[0]
        dz_s = dh[:, :n_self] * (cache["z_s"] > 0)
        dc = dh[:, n_self:]
        g["W_s"] = dz_s.T @ batch.self_x
        g["b_s"] = dz_s.sum(axis=0)

        alpha, l, e = cache["alpha"], cache["l"], cache["e"]
        d_alpha = np.einsum("bd,bkd->bk", dc, l)
        dl = alpha[..., None] * dc[:, None, :]
        d_logit = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
        dq = d_logit[..., None] * batch.keys / math.sqrt(self.n_actions)
        g["W_q"] = np.einsum("bka,bke->ae", dq, e)
        g["b_q"] = dq.sum(axis=(0, 1))
        g["W_l"] = np.einsum("bkd,bke->de", dl, e)
        g["b_l"] = dl.sum(axis=(0, 1))
        de = dq @ p["W_q"] + dl @ p["W_l"]
        dz_e = de * (cache["z_e"] > 0)
        g["W_e"] = np.einsum("bke,bkf->ef", dz_e, batch.nbr_x)
        g["b_e"] = dz_e.sum(axis=(0, 1))
        return g

    def probs(self, batch: ObsBatch) -> np.ndarray:
        return softmax(self.forward(batch)[0])

    def values(self, batch: ObsBatch) -> np.ndarray:
        return self.forward(batch)[0][:, 0]


# ---------------------------------------------------------------------------
# single-observation API
# ---------------------------------------------------------------------------

def policy_forward(obs: ObservationBundle, net: ActionAttentionNet, encoder: FeatureEncoder) -> np.ndarray:
    """Action distribution (length ``n_actions``) for one observation."""
    return net.probs(encoder.encode([obs], net.n_actions))[0]


def value_forward(obs: ObservationBundle, critic: ActionAttentionNet, encoder: FeatureEncoder) -> float:
    return float(critic.values(encoder.encode([obs], critic.n_actions))[0])


def sample_indices(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``probs`` via inverse CDF."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = np.sum(cdf <= u[:, None], axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def sample_action(dist: np.ndarray, rng: np.random.Generator,
                  space: ActionSpace = DEFAULT_SPACE) -> tuple[ActionSpec, float]:
    idx = int(sample_indices(dist, rng)[0])
    return space.spec(idx), float(np.log(dist[idx]))


def neg_log_prob_loss(net: ActionAttentionNet, batch: ObsBatch, actions, weights):
    """``sum_k w_k * (-log pi(a_k | o_k))`` and its parameter gradients."""
    logits, cache = net.forward(batch)
    logp = log_softmax(logits)
    actions = np.asarray(actions, dtype=int)
    weights = np.asarray(weights, dtype=float)
    rows = np.arange(len(actions))
    loss = float(-np.sum(weights * logp[rows, actions]))
    d_logits = np.exp(logp) * weights[:, None]
    d_logits[rows, actions] -= weights
    return loss, net.backward(cache, d_logits)


backprop = neg_log_prob_loss


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, policies: list[ActionAttentionNet], critics: list[ActionAttentionNet],
                    meta: dict) -> None:
    """Write all tensors to ``.npz`` with a JSON metadata record.

    The metadata fixes the format version and the action ordering so a
    checkpoint cannot be silently read with a different action layout.
    """
    arrays = {}
    for role, nets in (("policy", policies), ("critic", critics)):
        for r, net in enumerate(nets):
            for name, value in net.params.items():
                arrays[f"{role}/{r}/{name}"] = value
    header = dict(meta)
    header.update(format=CHECKPOINT_FORMAT, version=CHECKPOINT_VERSION,
                  n_copies=len(policies), critic_scale=critics[0].out_scale,
                  shapes={k: list(v.shape) for k, v in arrays.items()})
    arrays["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[list[ActionAttentionNet], list[ActionAttentionNet], dict]:
    path = Path(path)
    try:
        data = np.load(path, allow_pickle=False)
        meta = json.loads(bytes(data["__meta__"]).decode())
    except (OSError, ValueError, KeyError) as err:
        raise CheckpointError(f"{path}: not a readable checkpoint ({err})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: unknown format {meta.get('format')!r}")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r} "
                              f"(expected {CHECKPOINT_VERSION})")
    n_actions = int(meta["n_actions"])
    nets: dict[str, list[ActionAttentionNet]] = {}
    for role in ("policy", "critic"):
        nets[role] = []
        for r in range(int(meta["n_copies"])):
            prefix = f"{role}/{r}/"
            params = {k[len(prefix):]: np.array(data[k]) for k in data.files if k.startswith(prefix)}
            for k, v in params.items():
                if list(v.shape) != meta["shapes"][prefix + k]:
                    raise CheckpointError(f"{path}: shape mismatch for {prefix + k}")
            scale = meta["critic_scale"] if role == "critic" else 1.0
            nets[role].append(ActionAttentionNet(params, n_actions, scale))
    return nets["policy"], nets["critic"], meta
