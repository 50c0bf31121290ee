"""Finite-difference gradient check of the full clipped-surrogate policy loss."""

import numpy as np

from grfflock.config import PolicyConfig
from grfflock.policy import ActionAttentionNet, ObsBatch, log_softmax
from grfflock.trainer import ppo_policy_loss

SMALL = PolicyConfig(embed_dim=8, value_dim=8, self_dim=8, head_hidden=(16, 16), head_init_scale=1.0)
N_ACTIONS = 130
SELF_DIM = 10


def random_problem(rng: np.random.Generator, batch: int = 5, k: int = 3):
    """Random network, padded observation batch and PPO targets."""
    net = ActionAttentionNet.create(SELF_DIM, N_ACTIONS, N_ACTIONS, SMALL, rng)
    # stronger queries so the attention weights actually move
    net.params["W_q"] *= 20.0
    for name in list(net.params):
        if name.startswith("b_"):
            net.params[name] = rng.normal(0.0, 0.1, size=net.params[name].shape)
    counts = rng.integers(0, k + 1, size=batch)
    counts[0] = k
    counts[-1] = 0
    mask = np.arange(k)[None, :] < counts[:, None]
    keys = rng.dirichlet(np.full(N_ACTIONS, 0.05), size=(batch, k))
    obs = ObsBatch(rng.normal(size=(batch, SELF_DIM)), rng.normal(size=(batch, k, 4)) * mask[..., None],
                   np.where(mask[..., None], keys, 0.0), mask)
    logits, _ = net.forward(obs)
    actions = rng.integers(0, N_ACTIONS, size=batch)
    old = log_softmax(logits)[np.arange(batch), actions] + rng.normal(0.0, 0.3, size=batch)
    adv = rng.normal(size=batch)
    weights = (rng.random(batch) > 0.2).astype(float)
    weights[0] = 1.0
    return net, obs, dict(actions=actions, old_log_probs=old, advantages=adv, clip_eps=0.2,
                          entropy_coef=0.01, weights=weights)


def _signature(net, obs, targets):
    """Which branch every ReLU and every clip operation is on."""
    logits, cache = net.forward(obs)
    logp = log_softmax(logits)[np.arange(len(obs)), targets["actions"]]
    ratio = np.exp(logp - targets["old_log_probs"])
    eps = targets["clip_eps"]
    a = targets["advantages"]
    clipped = np.clip(ratio, 1 - eps, 1 + eps)
    parts = [cache["z_e"][obs.mask] > 0, cache["z_s"] > 0, ratio * a <= clipped * a,
             ratio > 1 + eps, ratio < 1 - eps]
    parts += [z > 0 for z in cache["hidden_z"]]
    return b"".join(np.packbits(p).tobytes() for p in parts)


def loss_and_grads(net, obs, targets):
    logits, cache = net.forward(obs)
    loss, d_logits, _ = ppo_policy_loss(logits, **targets)
    return loss, net.backward(cache, d_logits)


def max_relative_error(net, obs, targets, rng, h: float = 1e-4, per_tensor: int = 12) -> float:
    """Largest per-tensor relative error ``|a - f| / max(|a|, |f|)`` over sampled entries.

    Entries whose +-h perturbation flips a ReLU or clip branch are resampled,
    so the comparison stays away from kinks.
    """
    _, grads = loss_and_grads(net, obs, targets)
    base = _signature(net, obs, targets)
    worst = 0.0
    for name, param in net.params.items():
        analytic, numeric = [], []
        tries = 0
        while len(analytic) < min(per_tensor, param.size) and tries < 20 * per_tensor:
            tries += 1
            idx = tuple(int(rng.integers(s)) for s in param.shape)
            old = param[idx]
            param[idx] = old + h
            sig_p = _signature(net, obs, targets)
            f_plus = loss_and_grads(net, obs, targets)[0]
            param[idx] = old - h
            sig_m = _signature(net, obs, targets)
            f_minus = loss_and_grads(net, obs, targets)[0]
            param[idx] = old
            if sig_p != base or sig_m != base:
                continue
            analytic.append(grads[name][idx])
            numeric.append((f_plus - f_minus) / (2 * h))
        a, f = np.array(analytic), np.array(numeric)
        scale = max(np.linalg.norm(a), np.linalg.norm(f))
        if scale < 1e-9:
            continue
        worst = max(worst, float(np.linalg.norm(a - f) / scale))
    return worst
