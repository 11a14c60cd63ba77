"""Test-time model-predictive control with the learned odometry and inverse-state heads."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .dynamics import SimConfig, project_consistent, step
from .metrics import evaluate_trajectory
from .rollout import RowNoise, rollout_seed, sample_mixture

REWARDS = ("neg-dist-to-log", "pos-dist-to-log", "neg-inverse-norm")
REPORT_COLUMNS = ("scenario_id", "N", "k", "H", "reward", "ade", "overlap", "offroad")


@dataclass(frozen=True)
class MpcConfig:
    rollouts: int = 8
    top_k: int = 3
    horizon: int = 10
    reward: str = "neg-dist-to-log"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.top_k <= self.rollouts:
            raise ValueError(f"need 1 <= top_k <= rollouts, got k={self.top_k}, N={self.rollouts}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.reward not in REWARDS:
            raise ValueError(f"unknown reward {self.reward!r}; choose from {REWARDS}")


def parse_grid(text: str):
    """``"N,k,H;N,k,H"`` -> list of (N, k, H) triples."""
    cells = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        vals = [int(v) for v in part.split(",")]
        if len(vals) != 3:
            raise ValueError(f"grid cell {part!r} must be N,k,H")
        cells.append(tuple(vals))
    if not cells:
        raise ValueError("empty grid")
    return cells


@dataclass
class Imagined:
    states: np.ndarray  # (R, H + 1, 5), index 0 is the real current state
    actions: np.ndarray  # (R, H, 2)
    hidden: np.ndarray  # (R, H, hidden) hidden state that chose each action
    features: np.ndarray  # (R, H, F)


def imagine(params, scene, t, s, hidden, sampler, H, sim_cfg=SimConfig(), route="heading", odometry=None,
            project=True):
    """Autoregressively imagine ``H`` steps with the odometry head; the simulator is not stepped.

    ``scene`` rows align with ``s`` (R, 5). ``hidden`` (R, hidden) and ``xs``
    for step 0 are the agent's current values. ``sampler(tau, mix)`` returns
    (R, 2) actions. ``odometry(h, xs, s, a)`` replaces the learned head.
    With ``project`` each imagined state is made consistent (velocity along
    the heading), since the head's lateral-velocity output is not constrained.
    """
    cfg = params.config
    h, xs = hidden
    states, acts, hid, feats = [s], [], [], []
    agent = nn.AgentStep(params, scene, cfg, route)
    for tau in range(H):
        mix = nn.policy_forward(params, h, cfg)
        a = sampler(tau, mix)
        if sim_cfg.clip_actions:
            a = np.clip(a, -sim_cfg.action_bounds, sim_cfg.action_bounds)
        hv, xv = ad._val(h), ad._val(xs)
        if odometry is not None:
            d = odometry(hv, xv, s, a)
        else:
            d = nn.odometry_forward(params, hv, xv, s, a).value
        acts.append(a)
        hid.append(hv)
        feats.append(xv)
        s = s + d
        if project:
            s = project_consistent(s)
        states.append(s)
        if tau + 1 < H:
            h, xs = agent(ad.Var(s), t + tau + 1, h)
    return Imagined(np.stack(states, 1), np.stack(acts, 1), np.stack(hid, 1), np.stack(feats, 1))


def score(im: Imagined, expert_states, t, reward, params=None, inverse=None):
    """Per-row reward of imagined trajectories (higher is better).

    ``expert_states`` is (R, T, 5); imagined step ``tau`` is compared with
    log step ``t + tau`` (clamped to the episode end).
    """
    if reward not in REWARDS:
        raise ValueError(f"unknown reward {reward!r}")
    H = im.actions.shape[1]
    if reward == "neg-inverse-norm":
        R = im.states.shape[0]
        flat = lambda x: x.reshape(R * H, -1)
        s = flat(im.states[:, :H])
        if inverse is not None:
            d = inverse(flat(im.hidden), flat(im.features), s, flat(im.actions))
        else:
            d = nn.inverse_forward(params, flat(im.hidden), flat(im.features), s, flat(im.actions)).value
        return -np.linalg.norm(d, axis=-1).reshape(R, H).sum(axis=1)
    T = expert_states.shape[1]
    idx = np.minimum(t + np.arange(1, H + 1), T - 1)
    log = expert_states[:, idx, :2]
    dist = np.linalg.norm(im.states[:, 1:, :2] - log, axis=-1).sum(axis=1)
    return -dist if reward == "neg-dist-to-log" else dist


def top_k_mean(first_actions, scores, k):
    """Mean of the first actions of the ``k`` best-scoring rollouts (ties -> lower index).

    ``first_actions`` (B, N, 2); ``scores`` (B, N).
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(first_actions, order[..., None], axis=1)
    return picked.mean(axis=1), order


def mpc_step(params, scene, t, s, hidden, cfg: MpcConfig, draws, sim_cfg=SimConfig(), route="heading",
             odometry=None, inverse=None, sampler=None):
    """One MPC decision per batch row.

    ``hidden`` is ``(h, xs)`` for the B real agents; ``draws`` is ``(u, eps)``
    shaped (B, N*H) and (B, N*H, 2). Returns clipped (B, 2) actions.
    """
    N, H, k = cfg.rollouts, cfg.horizon, cfg.top_k
    h, xs = hidden
    B = s.shape[0]
    rep = lambda x: np.repeat(ad._val(x), N, axis=0)
    u, eps = draws
    u = u.reshape(B * N, H)
    eps = eps.reshape(B * N, H, 2)
    if sampler is None:
        sampler = lambda tau, mix: sample_mixture(mix, u[:, tau], eps[:, tau])[0]
    sub = scene.repeat(N)
    im = imagine(params, sub, t, rep(s), (ad.Var(rep(h)), ad.Var(rep(xs))), sampler, H, sim_cfg, route, odometry)
    sc = score(im, sub.expert_states, t, cfg.reward, params, inverse).reshape(B, N)
    a, _ = top_k_mean(im.actions[:, 0].reshape(B, N, 2), sc, k)
    if sim_cfg.clip_actions:
        a = np.clip(a, -sim_cfg.action_bounds, sim_cfg.action_bounds)
    return a


def mpc_rollout(params, scene, cfg: MpcConfig, sim_cfg=SimConfig(), route="heading", scenario_ids=None, **kw):
    """Closed-loop episodes driven by ``mpc_step``; returns realized states (B, T, 5).

    Noise for scenario ``i`` comes from its own seed stream, so results do not
    depend on how scenarios are batched. With N = k = H = 1 the draws coincide
    with those of a single reactive rollout (rollout id 0).
    """
    pcfg = params.config
    B, T = scene.size, scene.steps
    ids = range(B) if scenario_ids is None else scenario_ids
    noise = RowNoise([rollout_seed(cfg.seed, i, 0) for i in ids], T, cfg.rollouts * cfg.horizon)
    agent = nn.AgentStep(params, scene, pcfg, route)
    s = scene.expert_states[:, 0].copy()
    h = nn.zero_hidden(B, pcfg)
    states = [s]
    for t in range(T - 1):
        h, xs = agent(ad.Var(s), t, h)
        a = mpc_step(params, scene, t, s, (h, xs), cfg, noise.at_all(t), sim_cfg, route, **kw)
        s = step(s, a, sim_cfg)
        states.append(s)
    return np.stack(states, 1)


def mpc_eval(params, scenarios, cfg: MpcConfig, sim_cfg=SimConfig(), route="heading", batch=16, report=None,
             scenario_ids=None):
    """Evaluate one (N, k, H) cell on a dataset; returns per-scenario report rows."""
    from .scenario import SceneBatch

    ids = list(range(len(scenarios))) if scenario_ids is None else list(scenario_ids)
    rows = []
    for lo in range(0, len(scenarios), batch):
        chunk = scenarios[lo : lo + batch]
        scene = SceneBatch.from_scenarios(chunk)
        states = mpc_rollout(params, scene, cfg, sim_cfg, route, ids[lo : lo + batch])
        for j, sc in enumerate(chunk):
            ev = evaluate_trajectory(states[j], sc)
            rows.append({
                "scenario_id": ids[lo + j], "N": cfg.rollouts, "k": cfg.top_k, "H": cfg.horizon,
                "reward": cfg.reward, "ade": ev.ade, "overlap": int(ev.overlap), "offroad": int(ev.offroad),
            })
    if report is not None:
        write_report(rows, report)
    return rows


def write_report(rows, path, append=False):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in REPORT_COLUMNS])

