"""Finite-difference gradient checks for every primitive and every episode loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses, nn
from .dynamics import SimConfig, make_state, step
from .scenario import SceneBatch, generate_scenario

PRIMITIVE_TOL = 1e-5
EPISODE_TOL = 1e-4
TINY = nn.NetConfig(hidden=4, encoder_hidden=4, head_hidden=4, mixture=2)


@dataclass
class CheckResult:
    name: str
    point: int
    report: ad.GradcheckReport

    @property
    def passed(self):
        return self.report.passed

    def line(self):
        return f"{self.name}[{self.point}] {self.report.summary()}"


def _state(rng, n=3):
    s = np.stack([make_state(*rng.uniform(-5, 5, 2), rng.uniform(1.0, 10.0), rng.uniform(-np.pi, np.pi))
                  for _ in range(n)])
    return s


def _action(rng, n=3):
    return np.stack([rng.uniform(-4.0, 4.0, n), rng.uniform(-0.2, 0.2, n)], axis=-1)


def _project(rng, shape):
    """Random linear functional so every output coordinate contributes to the checked scalar."""
    w = rng.standard_normal(shape)
    return lambda out: ad.total(ad.mul(out, w))


def primitive_cases(rng):
    """(name, fn, point) triples for one random point."""
    cfg = SimConfig()
    s, a = _state(rng), _action(rng)
    s_next = step(s, a, cfg)
    tgt = step(s, _action(rng), cfg)
    B, H, E = 3, 4, 5
    x, h = rng.standard_normal((B, E)), rng.standard_normal((B, H)) * 0.5
    Wx, Wh = rng.standard_normal((E, 3 * H)) * 0.4, rng.standard_normal((H, 3 * H)) * 0.4
    bx, bh = rng.standard_normal(3 * H) * 0.1, rng.standard_normal(3 * H) * 0.1
    logits = rng.standard_normal((B, 4))
    pick = rng.integers(0, 4, B)
    f5, f2 = _project(rng, (B, 5)), _project(rng, (B, 2))
    fh, fb = _project(rng, (B, H)), _project(rng, (B,))
    scene = SceneBatch.from_scenarios([generate_scenario(k, int(rng.integers(1 << 20))) for k in ("arc", "straight", "stop-go")])
    t = int(rng.integers(0, 70))
    s_enc = scene.expert_states[:, t] + np.array([0.3, -0.2, 0.1, 0.1, 0.02]) * rng.standard_normal((3, 5))
    f_enc = _project(rng, (B, nn.NetConfig().feature_dim))
    return [
        ("step", lambda v: f5(ad.sim_step(v["s"], v["a"], cfg)), {"s": s, "a": a}),
        ("inverse_step", lambda v: f5(ad.sim_inverse_step(v["s"], v["a"], cfg)), {"s": s_next, "a": a}),
        ("inv_kin", lambda v: f2(ad.sim_inv_kin(v["s"], v["t"], cfg.replace(clip_actions=False))), {"s": s, "t": tgt}),
        ("gru_cell", lambda v: fh(ad.gru_cell(v["x"], v["h"], v["Wx"], v["Wh"], v["bx"], v["bh"])),
         {"x": x, "h": h, "Wx": Wx, "Wh": Wh, "bx": bx, "bh": bh}),
        ("affine_tanh", lambda v: fh(ad.tanh(ad.affine(v["x"], v["W"], v["b"]))),
         {"x": x, "W": rng.standard_normal((E, H)) * 0.5, "b": rng.standard_normal(H) * 0.1}),
        ("gaussian_nll", lambda v: fb(ad.gaussian_nll(v["t"], v["m"], v["l"])),
         {"t": a, "m": a + 0.3 * rng.standard_normal((B, 2)), "l": 0.3 * rng.standard_normal((B, 2))}),
        ("log_softmax_pick", lambda v: fb(ad.log_softmax_pick(v, pick)), logits),
        ("ego_to_global", lambda v: f5(nn.ego_to_global(v["d"], v["s"])), {"d": rng.standard_normal((B, 5)), "s": s}),
        ("consistent_delta", lambda v: f5(nn.consistent_delta(v["d"], v["s"])),
         {"d": 0.3 * rng.standard_normal((B, 4)), "s": s}),
        ("encode", lambda v: f_enc(nn.encode(scene, v, t, nn.NetConfig(), "waypoint").values), s_enc),
    ]


def _tiny_setup(rng, kinds=("arc", "stop-go")):
    p = nn.init_params(TINY, int(rng.integers(1 << 20)))
    for k in p:
        p[k] = p[k] + 0.1 * rng.standard_normal(p[k].shape)
    scene = SceneBatch.from_scenarios([generate_scenario(k, int(rng.integers(1 << 20))) for k in kinds])
    return p, scene


def episode_cases(rng, steps=3):
    cfg = SimConfig()
    free = cfg.replace(clip_actions=False)
    p, scene = _tiny_setup(rng)
    noise_seed = int(rng.integers(1 << 20))
    wrap = lambda v: nn.ModelParams(TINY, v)

    # transitions from a short policy rollout of the tiny net
    loss, rec = losses.apg_episode(p, scene, cfg, np.random.default_rng(noise_seed), steps=steps + 1)
    tr = losses.Transitions.from_record(rec)
    cases = [
        ("apg_episode", lambda v: losses.apg_episode(wrap(v), scene, cfg, np.random.default_rng(noise_seed),
                                                     steps=steps)[0], dict(p)),
        ("planner_episode", lambda v: losses.planner_episode(wrap(v), scene, free, steps=steps)[0], dict(p)),
        ("inverse_state_loss", lambda v: losses.inverse_state_loss(wrap(v), tr, free), dict(p.head("inv"))),
    ]
    for mode in ("diffsim", "inverse", "regression"):
        cases.append((f"odometry_loss[{mode}]", lambda v, m=mode: losses.odometry_loss(wrap(v), tr, free, m),
                      dict(p.head("odo"))))
    return cases


def run_suite(seed=0, points=10, tol=PRIMITIVE_TOL, episode_tol=EPISODE_TOL, coords_per_case=24):
    """Check every primitive and episode loss at ``points`` random points."""
    rng = np.random.default_rng(seed)
    results = []
    for i in range(points):
        for name, fn, point in primitive_cases(rng):
            results.append(CheckResult(name, i, ad.gradcheck(fn, point, tol=tol)))
        for name, fn, point in episode_cases(rng):
            n = sum(np.size(v) for v in point.values())
            coords = rng.choice(n, min(n, coords_per_case), replace=False)
            results.append(CheckResult(name, i, ad.gradcheck(fn, point, tol=episode_tol, coords=coords)))
    return results
