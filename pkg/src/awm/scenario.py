"""Synthetic driving scenarios: roads, simulator-generated experts, replayed agents.

Experts are produced by a pure-pursuit style controller whose clipped actions
are rolled through :func:`awm.dynamics.step`, so every expert transition is
exactly reachable. Other agents are discs following scripted paths that do
not react to the ego vehicle.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dynamics as dyn

KINDS = ("straight", "arc", "s-curve", "fork", "stop-go")
SCHEMA_VERSION = 1
EPISODE_STEPS = 80
HALF_WIDTH = 3.0
AGENT_RADIUS = 1.0
LEAD_GAP = 12.0
LANE_OFFSET = 4.5
SPACING = 1.0


class DatasetError(Exception):
    pass


@dataclass
class Roadgraph:
    polylines: list
    half_width: float = HALF_WIDTH

    def __post_init__(self):
        self.polylines = [np.asarray(p, dtype=np.float64) for p in self.polylines]
        for p in self.polylines:
            if len(p) < 2:
                raise ValueError("polyline needs at least two points")
            if np.any(np.all(np.diff(p, axis=0) == 0.0, axis=1)):
                raise ValueError("consecutive polyline points must be distinct")

    @property
    def points(self) -> np.ndarray:
        return np.concatenate(self.polylines, axis=0)

    def distance(self, xy) -> np.ndarray:
        """Distance from points ``(..., 2)`` to the nearest segment of any polyline."""
        xy = np.asarray(xy, dtype=np.float64)
        flat = xy.reshape(-1, 2)
        best = np.full(len(flat), np.inf)
        for poly in self.polylines:
            a, b = poly[:-1], poly[1:]
            ab = b - a
            ap = flat[:, None, :] - a[None]
            u = np.clip((ap * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
            proj = a[None] + u[..., None] * ab[None]
            d = np.sqrt(((flat[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)
            best = np.minimum(best, d)
        return best.reshape(xy.shape[:-1])


@dataclass
class ExpertTrajectory:
    states: np.ndarray  # (T, 5)
    actions: np.ndarray  # (T - 1, 2)

    def check(self, cfg: dyn.SimConfig = dyn.SimConfig()):
        """Exact reachability of every expert transition."""
        nxt = dyn.step(self.states[:-1], self.actions, cfg)
        return np.array_equal(nxt, self.states[1:])


@dataclass
class AgentTrack:
    positions: np.ndarray  # (T, 2)
    yaws: np.ndarray  # (T,)
    velocities: np.ndarray  # (T, 2)
    radius: float = AGENT_RADIUS


@dataclass
class Scenario:
    kind: str
    seed: int
    roadgraph: Roadgraph
    expert: ExpertTrajectory
    others: list = field(default_factory=list)
    goal: np.ndarray = None  # (x, y, yaw)
    ego_radius: float = AGENT_RADIUS

    @property
    def steps(self) -> int:
        return len(self.expert.states)


# ---------------------------------------------------------------------------
# paths


class Centerline:
    """Polyline with arc-length parametrisation."""

    def __init__(self, points):
        self.points = np.asarray(points, dtype=np.float64)
        seg = np.diff(self.points, axis=0)
        self.s = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])

    @property
    def length(self):
        return self.s[-1]

    def at(self, s):
        s = np.clip(s, 0.0, self.length)
        x = np.interp(s, self.s, self.points[:, 0])
        y = np.interp(s, self.s, self.points[:, 1])
        return np.stack([x, y], axis=-1)

    def heading(self, s):
        s = np.asarray(np.clip(s, 0.0, self.length))
        i = np.clip(np.searchsorted(self.s, s, side="right") - 1, 0, len(self.s) - 2)
        d = self.points[i + 1] - self.points[i]
        return np.arctan2(d[..., 1], d[..., 0])

    def offset(self, lateral):
        h = np.concatenate([self.heading(self.s[:-1]), [self.heading(self.length)]])
        n = np.stack([-np.sin(h), np.cos(h)], axis=-1)
        return Centerline(self.points + lateral * n)

    def project(self, xy, hint=0, window=40):
        """Arc length of the nearest vertex, searched near ``hint``."""
        lo, hi = max(0, hint - window), min(len(self.points), hint + window)
        d = ((self.points[lo:hi] - xy) ** 2).sum(-1)
        return lo + int(np.argmin(d))


def _integrate(kappas, start, heading, ds=SPACING):
    pts = [np.asarray(start, dtype=np.float64)]
    h = heading
    for k in kappas:
        h_mid = h + 0.5 * k * ds
        pts.append(pts[-1] + ds * np.array([np.cos(h_mid), np.sin(h_mid)]))
        h = h + k * ds
    return np.array(pts), h


def _transform(points, rot, shift):
    c, s = np.cos(rot), np.sin(rot)
    R = np.array([[c, -s], [s, c]])
    return points @ R.T + shift


# ---------------------------------------------------------------------------
# expert controller


def _pure_pursuit(path, profile, v0, cfg, steps):
    """Roll a lookahead-steering, proportional-speed controller through the simulator."""
    start_yaw = float(path.heading(0.0))
    states = [dyn.make_state(path.points[0, 0], path.points[0, 1], v0, start_yaw)]
    actions = []
    hint = 0
    for t in range(steps - 1):
        s = states[-1]
        v = dyn.speed(s)
        hint = path.project(s[:2], hint)
        look = max(4.0, 0.8 * v)
        tgt = path.at(path.s[hint] + look)
        dx, dy = tgt - s[:2]
        c, sn = np.cos(s[dyn.YAW]), np.sin(s[dyn.YAW])
        lx, ly = c * dx + sn * dy, -sn * dx + c * dy
        kappa = 2.0 * ly / (lx * lx + ly * ly)
        accel = np.clip(1.5 * (profile(t) - v), -3.0, 3.0)
        a, _ = dyn.clip_action(np.array([accel, kappa]), cfg)
        actions.append(a)
        states.append(dyn.step(s, a, cfg))
    return ExpertTrajectory(np.array(states), np.array(actions).reshape(-1, 2))


def _progress(expert):
    """Cumulative distance travelled by the expert at each step."""
    d = np.hypot(*np.diff(expert.states[:, :2], axis=0).T)
    return np.concatenate([[0.0], np.cumsum(d)])


def _track_along(path, arclengths, dt):
    pos = path.at(arclengths)
    yaw = path.heading(arclengths)
    vel = np.gradient(pos, dt, axis=0) if len(pos) > 1 else np.zeros_like(pos)
    return AgentTrack(pos, yaw, vel)


# ---------------------------------------------------------------------------
# generation


def generate_scenario(kind: str, seed: int, steps: int = EPISODE_STEPS, cfg: dyn.SimConfig = dyn.SimConfig()) -> Scenario:
    """Deterministic scenario of the given kind."""
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    rng = np.random.default_rng([int(seed), KINDS.index(kind)])
    rot = rng.uniform(-np.pi, np.pi)
    shift = rng.uniform(-50.0, 50.0, size=2)
    v0 = rng.uniform(4.0, 11.0)
    length = int(1.4 * v0 * steps * cfg.dt + LEAD_GAP + 60)
    profile = lambda t: v0  # noqa: E731
    branch_paths = None

    if kind == "straight":
        kappas = np.zeros(length)
    elif kind == "arc":
        lead_in = int(rng.uniform(8, 25))
        k = rng.choice([-1.0, 1.0]) * rng.uniform(0.015, 0.04)
        turn = min(length - lead_in, int(0.9 * np.pi / abs(k)))
        kappas = np.concatenate([np.zeros(lead_in), np.full(turn, k), np.zeros(length - lead_in - turn)])
    elif kind == "s-curve":
        lead_in = int(rng.uniform(5, 20))
        amp = rng.uniform(0.015, 0.035) * rng.choice([-1.0, 1.0])
        period = rng.uniform(50.0, 90.0)
        s = np.arange(length - lead_in)
        kappas = np.concatenate([np.zeros(lead_in), amp * np.sin(2 * np.pi * s / period)])
    elif kind == "stop-go":
        kappas = np.zeros(length)
        v_low = rng.uniform(1.0, 3.0)
        t1 = int(rng.uniform(10, 30))
        t2 = t1 + int(rng.uniform(15, 30))
        profile = lambda t: v_low if t1 <= t < t2 else v0  # noqa: E731
    else:  # fork
        trunk_len = int(rng.uniform(15, 30))
        k = rng.uniform(0.03, 0.05)
        turn = int(rng.uniform(25, 35))
        rest = length - trunk_len
        trunk, h = _integrate(np.zeros(trunk_len), (0.0, 0.0), 0.0)
        branches = []
        for sign in (1.0, -1.0):
            ks = np.concatenate([np.full(turn, sign * k), np.zeros(rest - turn)])
            pts, _ = _integrate(ks, trunk[-1], h)
            branches.append(pts[1:])
        trunk = _transform(trunk, rot, shift)
        branches = [_transform(b, rot, shift) for b in branches]
        choice = int(seed) % 2
        branch_paths = [trunk] + branches
        path = Centerline(np.concatenate([trunk, branches[choice]]))

    if branch_paths is None:
        pts, _ = _integrate(kappas, (0.0, 0.0), 0.0)
        pts = _transform(pts, rot, shift)
        path = Centerline(pts)
        polylines = [pts]
    else:
        polylines = branch_paths

    expert = _pure_pursuit(path, profile, v0, cfg, steps)
    others = []
    if kind != "fork":
        prog = _progress(expert)
        others.append(_track_along(path, prog + LEAD_GAP, cfg.dt))
        side = rng.choice([-1.0, 1.0])
        lane = path.offset(side * LANE_OFFSET)
        v_adj = v0 * rng.uniform(0.7, 1.3)
        s0 = rng.uniform(-10.0, 25.0) + 20.0
        lane_s = s0 + v_adj * cfg.dt * np.arange(steps)
        # reparametrise the offset lane from the start of the main path
        others.append(_track_along(lane, lane_s, cfg.dt))
    goal = expert.states[-1, [dyn.X, dyn.Y, dyn.YAW]].copy()
    return Scenario(kind, int(seed), Roadgraph(polylines), expert, others, goal)


def generate_dataset(kinds, count: int, seed: int = 0) -> list:
    """``count`` scenarios cycling through ``kinds`` with seeds ``seed, seed + 1, ...``."""
    return [generate_scenario(kinds[i % len(kinds)], seed + i) for i in range(count)]


# ---------------------------------------------------------------------------
# batching


@dataclass
class SceneBatch:
    """Padded arrays for a batch of scenarios, consumed by the feature encoder."""

    road_pts: np.ndarray  # (B, P, 2)
    road_valid: np.ndarray  # (B, P)
    others_pos: np.ndarray  # (B, T, A, 2)
    others_vel: np.ndarray  # (B, T, A, 2)
    others_radius: np.ndarray  # (B, A)
    others_valid: np.ndarray  # (B, A)
    goal: np.ndarray  # (B, 3)
    expert_states: np.ndarray  # (B, T, 5)
    expert_actions: np.ndarray  # (B, T - 1, 2)
    half_width: np.ndarray  # (B,)
    ego_radius: np.ndarray  # (B,)

    @property
    def size(self):
        return self.expert_states.shape[0]

    @property
    def steps(self):
        return self.expert_states.shape[1]

    @classmethod
    def from_scenarios(cls, scenarios):
        B = len(scenarios)
        T = max(sc.steps for sc in scenarios)
        if any(sc.steps != T for sc in scenarios):
            raise ValueError("scenarios in a batch must share the episode length")
        P = max(len(sc.roadgraph.points) for sc in scenarios)
        A = max((len(sc.others) for sc in scenarios), default=0)
        road = np.zeros((B, P, 2))
        rvalid = np.zeros((B, P), dtype=bool)
        opos = np.zeros((B, T, A, 2))
        ovel = np.zeros((B, T, A, 2))
        orad = np.zeros((B, A))
        ovalid = np.zeros((B, A), dtype=bool)
        for b, sc in enumerate(scenarios):
            pts = sc.roadgraph.points
            road[b, : len(pts)] = pts
            rvalid[b, : len(pts)] = True
            for j, ag in enumerate(sc.others):
                opos[b, :, j] = ag.positions
                ovel[b, :, j] = ag.velocities
                orad[b, j] = ag.radius
                ovalid[b, j] = True
        return cls(
            road, rvalid, opos, ovel, orad, ovalid,
            np.stack([sc.goal for sc in scenarios]),
            np.stack([sc.expert.states for sc in scenarios]),
            np.stack([sc.expert.actions for sc in scenarios]),
            np.array([sc.roadgraph.half_width for sc in scenarios]),
            np.array([sc.ego_radius for sc in scenarios]),
        )

    def repeat(self, n: int) -> "SceneBatch":
        """Each scenario repeated ``n`` times consecutively (for multi-rollout evaluation)."""
        return SceneBatch(**{k: np.repeat(v, n, axis=0) for k, v in self.__dict__.items()})

    def subset(self, idx) -> "SceneBatch":
        return SceneBatch(**{k: v[idx] for k, v in self.__dict__.items()})


# ---------------------------------------------------------------------------
# persistence


def _enc(arr) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "f64": arr.tobytes().hex()}


def _dec(obj) -> np.ndarray:
    return np.frombuffer(bytes.fromhex(obj["f64"]), dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def scenario_to_record(sc: Scenario) -> dict:
    return {
        "kind": sc.kind,
        "seed": sc.seed,
        "roadgraph": {"polylines": [_enc(p) for p in sc.roadgraph.polylines], "half_width": _enc(sc.roadgraph.half_width)},
        "expert": {"states": _enc(sc.expert.states), "actions": _enc(sc.expert.actions)},
        "others": [
            {"positions": _enc(a.positions), "yaws": _enc(a.yaws), "velocities": _enc(a.velocities), "radius": _enc(a.radius)}
            for a in sc.others
        ],
        "goal": _enc(sc.goal),
        "ego_radius": _enc(sc.ego_radius),
    }


def scenario_from_record(rec: dict) -> Scenario:
    rg = rec["roadgraph"]
    return Scenario(
        kind=rec["kind"],
        seed=int(rec["seed"]),
        roadgraph=Roadgraph([_dec(p) for p in rg["polylines"]], _dec(rg["half_width"]).item()),
        expert=ExpertTrajectory(_dec(rec["expert"]["states"]), _dec(rec["expert"]["actions"])),
        others=[
            AgentTrack(_dec(a["positions"]), _dec(a["yaws"]), _dec(a["velocities"]), _dec(a["radius"]).item())
            for a in rec["others"]
        ],
        goal=_dec(rec["goal"]),
        ego_radius=_dec(rec["ego_radius"]).item(),
    )


def save_dataset(scenarios, path, generator: dict | None = None):
    header = {"format": "awm-scenarios", "schema_version": SCHEMA_VERSION, "count": len(scenarios), "generator": generator or {}}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(scenario_to_record(sc), sort_keys=True) for sc in scenarios]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetError("empty dataset file (missing header)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed header: {exc}") from exc
    if header.get("format") != "awm-scenarios":
        raise DatasetError("not a scenario dataset")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise DatasetError(f"schema version {header.get('schema_version')} is not supported (expected {SCHEMA_VERSION})")
    out = []
    for i, line in enumerate(lines[1:]):
        try:
            out.append(scenario_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed record for scenario {i}: {exc}") from exc
    return out
