"""Evaluation drivers: reactive (min)ADE reports, imagination error and the inverse-state probe."""
from __future__ import annotations

import csv

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from . import nn
from .dynamics import ACCEL, SimConfig
from .metrics import evaluate_rollouts
from .mpc import imagine
from .rollout import rollout_seed, run_policy
from .scenario import SceneBatch

EVAL_COLUMNS = ("scenario_id", "ade", "overlap", "offroad", "rollouts")


def reactive_eval(params, scenarios, rollouts=1, route="heading", seed=0, sim_cfg=SimConfig(), batch=16,
                  scenario_ids=None, mode="sample", actions=None):
    """Per-scenario ADE (one rollout) or minADE (several) of the reactive policy.

    ``actions`` (S, T-1, 2) replays fixed actions instead of the policy.
    """
    if rollouts < 1:
        raise ValueError("rollouts must be >= 1")
    ids = list(range(len(scenarios))) if scenario_ids is None else list(scenario_ids)
    rows = []
    per = max(1, batch // rollouts)
    for lo in range(0, len(scenarios), per):
        chunk = scenarios[lo : lo + per]
        scene = SceneBatch.from_scenarios(chunk).repeat(rollouts)
        seeds = [rollout_seed(seed, i, k) for i in ids[lo : lo + per] for k in range(rollouts)]
        forced = None if actions is None else np.repeat(actions[lo : lo + per], rollouts, axis=0)
        out = run_policy(params, scene, sim_cfg, seeds, route=route, mode=mode, actions=forced)
        st = out["states"].reshape(len(chunk), rollouts, *out["states"].shape[1:])
        for j, sc in enumerate(chunk):
            ev = evaluate_rollouts(list(st[j]), sc)
            rows.append({"scenario_id": ids[lo + j], "ade": ev.ade, "overlap": int(ev.overlap),
                         "offroad": int(ev.offroad), "rollouts": rollouts})
    return rows


def write_rows(rows, path, columns=EVAL_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def imagination_ade(params, scene, states, actions, horizons, starts, route="heading", sim_cfg=SimConfig(),
                    odometry=None):
    """Open-loop imagination error along recorded rollouts.

    From each start step the recorded actions are replayed through the
    odometry head for ``max(horizons)`` steps; returns ``{h: ADE}`` where ADE
    averages the planar error over the first ``h`` imagined states.
    """
    cfg = params.config
    Hm = max(horizons)
    agent = nn.AgentStep(params, scene, cfg, route)
    h = nn.zero_hidden(scene.size, cfg)
    errs = {hz: [] for hz in horizons}
    free = sim_cfg.replace(clip_actions=False)
    for t in range(max(starts) + 1):
        h, xs = agent(ad.Var(states[:, t]), t, h)
        if t not in starts:
            continue
        sampler = lambda tau, mix, t=t: actions[:, t + tau]
        im = imagine(params, scene, t, states[:, t], (h, xs), sampler, Hm, free, route, odometry)
        d = np.linalg.norm(im.states[:, 1:, :2] - states[:, t + 1 : t + Hm + 1, :2], axis=-1)
        for hz in horizons:
            errs[hz].append(d[:, :hz].mean(axis=1))
    return {hz: float(np.mean(errs[hz])) for hz in horizons}


def over_accelerate(actions, factor=1.2):
    a = np.array(actions, dtype=np.float64)
    a[..., ACCEL] *= factor
    return a


def inverse_probe(params, scene, actions, route="heading", sim_cfg=SimConfig()):
    """Replay ``actions`` and record the inverse-state head's planar displacement norm per step.

    Returns ``(norms, distances)``, both (B, T-1): the predicted displacement
    norm for the action about to be executed, and the realized distance of
    the current state to the log.
    """
    out = run_policy(params, scene, sim_cfg, None, route=route, actions=actions)
    B, T1 = actions.shape[:2]
    s = out["states"][:, :-1].reshape(B * T1, 5)
    d = nn.inverse_forward(params, out["hidden"].reshape(B * T1, -1), out["features"].reshape(B * T1, -1), s,
                           out["actions"].reshape(B * T1, 2)).value
    norms = np.linalg.norm(d[:, :2], axis=-1).reshape(B, T1)
    dist = np.linalg.norm(out["states"][:, :-1, :2] - scene.expert_states[:, :-1, :2], axis=-1)
    return norms, dist


def rank_correlations(a, b):
    """Per-row Spearman correlation (nan where a row is constant)."""
    res = []
    for x, y in zip(a, b):
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            res.append(np.nan)
        else:
            res.append(float(spearmanr(x, y).statistic))
    return np.array(res)
