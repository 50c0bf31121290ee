"""Rule-based controllers: Olfati-Saber flocking and plain reference tracking.

The flocking controller is the classic three-term design: gradient of a
sigma-norm pair potential with bump-function cutoff plus velocity consensus
among neighbours (alpha term), repulsion from virtual agents projected onto
obstacle discs (beta term), and a linear pull toward the flock reference
(gamma term).
"""

from __future__ import annotations

import math

import numpy as np

from .config import OlfatiSaberParams, TrackingGains
from .world import WorldState, clip_norm


def sigma_norm(z, eps: float):
    z = np.asarray(z, dtype=float)
    return (np.sqrt(1.0 + eps * np.sum(z * z, axis=-1)) - 1.0) / eps


def sigma_grad(z, eps: float):
    """Gradient of the sigma norm, ``z / sqrt(1 + eps |z|^2)``."""
    z = np.asarray(z, dtype=float)
    return z / np.sqrt(1.0 + eps * np.sum(z * z, axis=-1, keepdims=True))


def bump(z, h: float):
    z = np.asarray(z, dtype=float)
    out = np.where(z < h, 1.0, 0.5 * (1.0 + np.cos(math.pi * (z - h) / (1.0 - h))))
    return np.where((z >= 0) & (z <= 1.0), out, 0.0)


def _sigma1(z):
    return z / np.sqrt(1.0 + z * z)


def _phi(z, a: float, b: float):
    c = abs(a - b) / math.sqrt(4.0 * a * b)
    return 0.5 * ((a + b) * _sigma1(z + c) + (a - b))


def phi_alpha(z, p: OlfatiSaberParams):
    r_a = float(sigma_norm(np.array([p.r, 0.0]), p.eps_sigma))
    d_a = float(sigma_norm(np.array([p.d, 0.0]), p.eps_sigma))
    return bump(np.asarray(z) / r_a, p.h_alpha) * _phi(np.asarray(z) - d_a, p.a, p.b)


def phi_beta(z, p: OlfatiSaberParams):
    d_b = float(sigma_norm(np.array([p.beta_ratio * p.d, 0.0]), p.eps_sigma))
    return bump(np.asarray(z) / d_b, p.h_beta) * (_sigma1(np.asarray(z) - d_b) - 1.0)


def olfati_saber_terms(world: WorldState, i: int, params: OlfatiSaberParams) -> dict[str, np.ndarray]:
    """The three acceleration components for robot ``i`` (unclipped)."""
    p = params
    q_i, v_i = world.pos[i], world.vel[i]

    rel = world.pos - q_i
    dist = np.linalg.norm(rel, axis=1)
    nb = (dist < p.r) & (np.arange(world.n_robots) != i)
    alpha = np.zeros(2)
    if nb.any():
        z = sigma_norm(rel[nb], p.eps_sigma)
        n_ij = sigma_grad(rel[nb], p.eps_sigma)
        r_a = float(sigma_norm(np.array([p.r, 0.0]), p.eps_sigma))
        a_ij = bump(z / r_a, p.h_alpha)
        alpha = p.c1_alpha * np.sum(phi_alpha(z, p)[:, None] * n_ij, axis=0) \
            + p.c2_alpha * np.sum(a_ij[:, None] * (world.vel[nb] - v_i), axis=0)

    beta = np.zeros(2)
    if len(world.obstacle_radius):
        d_beta = p.beta_ratio * p.d
        r_beta = 1.2 * d_beta
        off = q_i - world.obstacle_pos
        centre = np.linalg.norm(off, axis=1)
        safe = np.maximum(centre, 1e-9)
        mu = world.obstacle_radius / safe
        a_k = off / safe[:, None]
        q_hat = mu[:, None] * q_i + (1.0 - mu)[:, None] * world.obstacle_pos
        # velocity of the projected point: tangential part of v_i, scaled by mu
        p_hat = mu[:, None] * (v_i - np.sum(a_k * v_i, axis=1, keepdims=True) * a_k)
        rel_b = q_hat - q_i
        near = np.linalg.norm(rel_b, axis=1) < r_beta
        if near.any():
            d_b = float(sigma_norm(np.array([d_beta, 0.0]), p.eps_sigma))
            z = sigma_norm(rel_b[near], p.eps_sigma)
            n_ik = sigma_grad(rel_b[near], p.eps_sigma)
            b_ik = bump(z / d_b, p.h_beta)
            beta = p.c1_beta * np.sum(phi_beta(z, p)[:, None] * n_ik, axis=0) \
                + p.c2_beta * np.sum(b_ik[:, None] * (p_hat[near] - v_i), axis=0)

    gamma = p.c1_gamma * (world.ref_pos - q_i) + p.c2_gamma * (world.ref_vel - v_i)
    return {"alpha": alpha, "beta": beta, "gamma": gamma}


def olfati_saber_controller(world: WorldState, i: int, params: OlfatiSaberParams) -> np.ndarray:
    terms = olfati_saber_terms(world, i, params)
    u = terms["alpha"] + terms["beta"] + terms["gamma"]
    return clip_norm(u, world.config.a_max)


def tracking_controller(world: WorldState, i: int, gains: TrackingGains) -> np.ndarray:
    u = gains.k_p * (world.ref_pos - world.pos[i]) + gains.k_v * (world.ref_vel - world.vel[i])
    return clip_norm(u, world.config.a_max)
