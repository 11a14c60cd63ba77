"""Closed-loop rollouts for evaluation (no gradient tape)."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .dynamics import SimConfig, inv_kin, step


def rollout_seed(run_seed: int, scenario_id: int, rollout_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(run_seed), int(scenario_id), int(rollout_id)])


class RowNoise:
    """Pre-drawn per-row randomness so each rollout's draws are independent of batching."""

    def __init__(self, seeds, steps, mixture_draws=1):
        gens = [np.random.default_rng(s) for s in seeds]
        self.u = np.stack([g.random((steps, mixture_draws)) for g in gens])  # (B, T, m)
        self.eps = np.stack([g.standard_normal((steps, mixture_draws, 2)) for g in gens])  # (B, T, m, 2)

    def at(self, t, j=0):
        return self.u[:, t, j], self.eps[:, t, j]

    def at_all(self, t):
        return self.u[:, t], self.eps[:, t]


def sample_mixture(mix: nn.MixtureOutput, u, eps):
    """Draw one action per row: component by inverse CDF of ``u``, then a Gaussian sample."""
    logits = mix.logits.value
    p = np.exp(logits - logits.max(axis=-1, keepdims=True))
    p /= p.sum(axis=-1, keepdims=True)
    comp = (np.cumsum(p, axis=-1) < u[:, None]).sum(axis=-1)
    comp = np.minimum(comp, p.shape[-1] - 1)
    rows = np.arange(len(comp))
    mu = mix.means.value[rows, comp]
    std = mix.std[rows, comp]
    return mu + std * eps, comp


def mean_action(mix: nn.MixtureOutput):
    """Mean of the most probable component."""
    comp = np.argmax(mix.logits.value, axis=-1)
    rows = np.arange(len(comp))
    return mix.means.value[rows, comp]


def run_policy(params, scene, sim_cfg: SimConfig, seeds, route="heading", mode="sample", actions=None):
    """Reactive closed-loop rollout.

    ``seeds`` gives one SeedSequence per batch row. ``actions`` (B, T-1, 2)
    forces the executed actions instead of querying the policy. Returns a
    dict with realized states, actions, hidden states and scaled features.
    """
    cfg = params.config
    B, T = scene.size, scene.steps
    noise = RowNoise(seeds, T) if mode == "sample" and actions is None else None
    agent = nn.AgentStep(params, scene, cfg, route)
    s = scene.expert_states[:, 0].copy()
    h = nn.zero_hidden(B, cfg)
    states, acts, hid, feats = [s], [], [], []
    for t in range(T - 1):
        h, xs = agent(ad.Var(s), t, h)
        if actions is not None:
            a = actions[:, t]
        else:
            mix = nn.policy_forward(params, h, cfg)
            a = sample_mixture(mix, *noise.at(t))[0] if mode == "sample" else mean_action(mix)
        if sim_cfg.clip_actions:
            a = np.clip(a, -sim_cfg.action_bounds, sim_cfg.action_bounds)
        s = step(s, a, sim_cfg)
        states.append(s)
        acts.append(a)
        hid.append(h.value)
        feats.append(xs.value)
    return {
        "states": np.stack(states, 1), "actions": np.stack(acts, 1),
        "hidden": np.stack(hid, 1), "features": np.stack(feats, 1),
    }


def run_planner(params, scene, sim_cfg: SimConfig, route="heading"):
    """Deterministic closed-loop rollout steering by inverse kinematics towards planned states."""
    cfg = params.config
    B, T = scene.size, scene.steps
    agent = nn.AgentStep(params, scene, cfg, route)
    s = scene.expert_states[:, 0].copy()
    h = nn.zero_hidden(B, cfg)
    states, acts = [s], []
    for t in range(T - 1):
        h, xs = agent(ad.Var(s), t, h)
        d = nn.planner_forward(params, h, xs, s).value
        a = inv_kin(s, s + d, sim_cfg)
        s = step(s, a, sim_cfg)
        states.append(s)
        acts.append(a)
    return {"states": np.stack(states, 1), "actions": np.stack(acts, 1)}
