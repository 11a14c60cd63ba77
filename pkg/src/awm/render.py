"""Trajectory export: CSV of realized / expert / imagined points and a standalone SVG overlay."""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import nn  # noqa: E402
from .dynamics import SimConfig  # noqa: E402
from .mpc import imagine  # noqa: E402
from .rollout import RowNoise, rollout_seed, run_policy, sample_mixture  # noqa: E402
from .scenario import SceneBatch  # noqa: E402
from . import autodiff as ad  # noqa: E402

RENDER_COLUMNS = ("series", "rollout", "start", "step", "x", "y", "yaw")


def trajectory_rows(params, scenario, seed=0, route="heading", every=10, rollouts=4, horizon=10,
                    sim_cfg=SimConfig(), scenario_id=0):
    """Realized rollout, expert log and imagined futures branching off the realized path."""
    scene = SceneBatch.from_scenarios([scenario])
    out = run_policy(params, scene, sim_cfg, [rollout_seed(seed, scenario_id, 0)], route=route)
    real = out["states"][0]
    rows = []
    for t, s in enumerate(scenario.expert.states):
        rows.append(("expert", 0, 0, t, s[0], s[1], s[4]))
    for t, s in enumerate(real):
        rows.append(("realized", 0, 0, t, s[0], s[1], s[4]))
    T = len(real)
    sub = scene.repeat(rollouts)
    noise = RowNoise([rollout_seed(seed, scenario_id, 100 + j) for j in range(rollouts)], T, horizon)
    h = nn.zero_hidden(rollouts, params.config)
    agent = nn.AgentStep(params, sub, params.config, route)
    for t in range(T - 1):
        s = np.repeat(real[t][None], rollouts, axis=0)
        h, xs = agent(ad.Var(s), t, h)
        if t % every or t + horizon >= T:
            continue
        u, eps = noise.at_all(t)
        sampler = lambda tau, mix: sample_mixture(mix, u[:, tau], eps[:, tau])[0]
        im = imagine(params, sub, t, s, (h, xs), sampler, horizon, sim_cfg, route)
        for j in range(rollouts):
            for tau in range(1, horizon + 1):
                st = im.states[j, tau]
                rows.append(("imagined", j, t, t + tau, st[0], st[1], st[4]))
    return rows


def write_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RENDER_COLUMNS)
        for r in rows:
            w.writerow([v if isinstance(v, (int, str)) else repr(float(v)) for v in r])


def write_svg(rows, scenario, path, title=""):
    """Overlay plot; the SVG embeds all glyphs as paths so it has no external references."""
    plt.rcParams["svg.fonttype"] = "path"
    plt.rcParams["svg.hashsalt"] = "awm"
    fig, ax = plt.subplots(figsize=(7, 7))
    for line in scenario.roadgraph.polylines:
        ax.plot(line[:, 0], line[:, 1], color="0.8", lw=8, solid_capstyle="round", zorder=0)
    arr = lambda series: np.array([(r[4], r[5]) for r in rows if r[0] == series])
    ex, re = arr("expert"), arr("realized")
    ax.plot(ex[:, 0], ex[:, 1], "k--", lw=1.5, label="expert")
    ax.plot(re[:, 0], re[:, 1], color="tab:blue", lw=1.5, label="realized")
    im = [r for r in rows if r[0] == "imagined"]
    if im:
        starts = sorted({r[2] for r in im})
        cmap = plt.get_cmap("viridis")
        for i, st in enumerate(starts):
            pts = np.array([(r[4], r[5]) for r in im if r[2] == st])
            ax.scatter(pts[:, 0], pts[:, 1], s=8, color=cmap(i / max(1, len(starts) - 1)), alpha=0.7,
                       label="imagined" if i == 0 else None)
    for a in scenario.others:
        ax.plot(a.positions[:, 0], a.positions[:, 1], color="tab:red", lw=0.8, alpha=0.6)
    ax.set_aspect("equal")
    ax.legend(loc="best")
    ax.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
