"""Agent network: scene features, recurrent core and four independent heads."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .dynamics import VX, VY, YAW, X, Y, wrap_angle

ROUTE_MODES = ("heading", "waypoint", "none")


@dataclass(frozen=True)
class NetConfig:
    road_points: int = 8
    agents: int = 4
    hidden: int = 64
    encoder_hidden: int = 64
    head_hidden: int = 64
    mixture: int = 6

    @property
    def feature_dim(self) -> int:
        return 2 + 2 * self.road_points + 4 * self.agents

    @property
    def head_input(self) -> int:
        return self.hidden + self.feature_dim


# action and delta output scales; raw network outputs live near unit range
ACTION_SCALE = np.array([2.0, 0.05])
DELTA_SCALE = np.array([1.0, 1.0, 1.0, 1.0, 0.1])
# odometry / inverse heads emit (dx, dy, dv, dyaw) in the ego frame
STATE_DELTA_SCALE = np.array([1.0, 1.0, 1.0, 0.1])
# initial mixture means in raw units: spread over curvature so winner-take-all
# has distinct candidates from the first update
INIT_MEAN_FAN = np.array([[0.0, 0.0], [0.0, 0.4], [0.0, -0.4], [0.0, 0.8], [0.0, -0.8], [-0.5, 0.0]])
INIT_LOG_STD = np.log(0.25)


def feature_scale(cfg: NetConfig) -> np.ndarray:
    return np.concatenate(
        [[0.1, 1.0], np.full(2 * cfg.road_points, 0.1), np.tile([0.05, 0.05, 0.2, 0.2], cfg.agents)]
    )


class ModelParams(dict):
    """Named float64 tensors plus the :class:`NetConfig` that fixes their shapes."""

    def __init__(self, config: NetConfig, tensors=None):
        super().__init__(tensors or {})
        self.config = config

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.items()})

    def head(self, prefix: str) -> dict:
        return {k: v for k, v in self.items() if k.startswith(prefix + ".")}

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values()))


HEADS = ("policy", "odo", "plan", "inv")
TRUNK = ("enc", "core")


def expected_shapes(cfg: NetConfig) -> dict:
    H, E, F, D = cfg.hidden, cfg.encoder_hidden, cfg.feature_dim, cfg.head_hidden
    n_pol = cfg.mixture * 5
    shapes = {
        "enc.W1": (F, E), "enc.b1": (E,), "enc.W2": (E, E), "enc.b2": (E,),
        "core.Wx": (E, 3 * H), "core.Wh": (H, 3 * H), "core.bx": (3 * H,), "core.bh": (3 * H,),
        "policy.W1": (H, D), "policy.b1": (D,), "policy.W2": (D, n_pol), "policy.b2": (n_pol,),
    }
    for name, extra, out in (("odo", 2, 4), ("plan", 0, 5), ("inv", 2, 4)):
        shapes.update({
            f"{name}.W1": (cfg.head_input + extra, D), f"{name}.b1": (D,),
            f"{name}.W2": (D, out), f"{name}.b2": (out,),
        })
    return shapes


def init_params(cfg: NetConfig = NetConfig(), seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams(cfg)
    for name, shape in expected_shapes(cfg).items():
        if name.startswith("core.W"):
            p[name] = rng.uniform(-1, 1, shape) / np.sqrt(cfg.hidden)
        elif name.endswith("W1") or name == "enc.W2":
            p[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        else:
            p[name] = np.zeros(shape)
    K = cfg.mixture
    bias = p["policy.b2"]
    fan = np.resize(INIT_MEAN_FAN, (K, 2))
    bias[: 2 * K] = fan.ravel()
    bias[2 * K : 4 * K] = INIT_LOG_STD
    return p


# ---------------------------------------------------------------------------
# scene features


@dataclass
class Features:
    values: ad.Var  # (B, feature_dim)
    road_mask: np.ndarray  # (B, road_points)
    agent_mask: np.ndarray  # (B, agents)


def _select(dist, k):
    """Indices of the k smallest entries per row (ties by index), returned in index order."""
    order = np.argsort(dist, axis=-1, kind="stable")[:, :k]
    if order.shape[1] < k:
        order = np.concatenate([order, np.zeros((order.shape[0], k - order.shape[1]), dtype=int)], axis=1)
    return np.sort(order, axis=-1)


def encode(scene, s, t: int, cfg: NetConfig, route: str = "heading") -> Features:
    """Ego-frame scene features for ego state ``s`` (B, 5) at timestep ``t``.

    Layout: speed, route signal, ``road_points`` nearest roadgraph points
    (x, y), then ``agents`` nearest replayed agents (x, y, vx, vy), all
    rotated into the ego frame. Missing points or agents are zero with a
    zero mask entry. The result is differentiable with respect to ``s``.
    """
    if route not in ROUTE_MODES:
        raise ValueError(f"unknown route conditioning {route!r}")
    sv = ad._val(s)
    B = sv.shape[0]
    x, y, vx, vy, yaw = (sv[:, i] for i in range(5))
    c, sn = np.cos(yaw), np.sin(yaw)
    speed = vx * c + vy * sn
    lat = -vx * sn + vy * c

    # roadgraph
    K = cfg.road_points
    rp, rvalid = scene.road_pts, scene.road_valid
    d2 = (rp[..., 0] - x[:, None]) ** 2 + (rp[..., 1] - y[:, None]) ** 2
    d2 = np.where(rvalid, d2, np.inf)
    ridx = _select(d2, K)
    rmask = np.take_along_axis(rvalid, ridx, axis=1).astype(np.float64)
    sel = np.take_along_axis(rp, ridx[..., None], axis=1)
    rdx = (sel[..., 0] - x[:, None]) * rmask
    rdy = (sel[..., 1] - y[:, None]) * rmask
    rex = c[:, None] * rdx + sn[:, None] * rdy
    rey = -sn[:, None] * rdx + c[:, None] * rdy

    # replayed agents
    M = cfg.agents
    tt = min(t, scene.others_pos.shape[1] - 1)
    op, ov = scene.others_pos[:, tt], scene.others_vel[:, tt]
    ovalid = scene.others_valid
    if op.shape[1] == 0:
        op, ov = np.zeros((B, 1, 2)), np.zeros((B, 1, 2))
        ovalid = np.zeros((B, 1), dtype=bool)
    a2 = (op[..., 0] - x[:, None]) ** 2 + (op[..., 1] - y[:, None]) ** 2
    a2 = np.where(ovalid, a2, np.inf)
    aidx = _select(a2, M)
    amask = np.take_along_axis(ovalid, aidx, axis=1).astype(np.float64)
    ap = np.take_along_axis(op, aidx[..., None], axis=1)
    av = np.take_along_axis(ov, aidx[..., None], axis=1)
    adx = (ap[..., 0] - x[:, None]) * amask
    ady = (ap[..., 1] - y[:, None]) * amask
    avx = (av[..., 0] - vx[:, None]) * amask
    avy = (av[..., 1] - vy[:, None]) * amask
    aex = c[:, None] * adx + sn[:, None] * ady
    aey = -sn[:, None] * adx + c[:, None] * ady
    avex = c[:, None] * avx + sn[:, None] * avy
    avey = -sn[:, None] * avx + c[:, None] * avy

    # route signal
    goal = scene.goal
    if route == "heading":
        rsig = wrap_angle(goal[:, 2] - yaw)
    elif route == "waypoint":
        gdx, gdy = goal[:, 0] - x, goal[:, 1] - y
        rsig = wrap_angle(np.arctan2(gdy, gdx) - yaw)
        r2 = np.maximum(gdx * gdx + gdy * gdy, 1e-12)
    else:
        rsig = np.zeros(B)

    out = np.concatenate(
        [
            speed[:, None],
            rsig[:, None],
            np.stack([rex, rey], axis=-1).reshape(B, 2 * K),
            np.stack([aex, aey, avex, avey], axis=-1).reshape(B, 4 * M),
        ],
        axis=1,
    )

    def vjp(g):
        gs = np.zeros((B, 5))
        g_speed = g[:, 0]
        gs[:, VX] += g_speed * c
        gs[:, VY] += g_speed * sn
        gs[:, YAW] += g_speed * lat
        if route == "heading":
            gs[:, YAW] -= g[:, 1]
        elif route == "waypoint":
            gs[:, X] += g[:, 1] * gdy / r2
            gs[:, Y] -= g[:, 1] * gdx / r2
            gs[:, YAW] -= g[:, 1]
        gr = g[:, 2 : 2 + 2 * K].reshape(B, K, 2) * rmask[..., None]
        gex, gey = gr[..., 0], gr[..., 1]
        gs[:, X] += (-c[:, None] * gex + sn[:, None] * gey).sum(1)
        gs[:, Y] += (-sn[:, None] * gex - c[:, None] * gey).sum(1)
        gs[:, YAW] += (gex * rey - gey * rex).sum(1)
        ga = g[:, 2 + 2 * K :].reshape(B, M, 4) * amask[..., None]
        gpx, gpy, gvx_, gvy_ = ga[..., 0], ga[..., 1], ga[..., 2], ga[..., 3]
        gs[:, X] += (-c[:, None] * gpx + sn[:, None] * gpy).sum(1)
        gs[:, Y] += (-sn[:, None] * gpx - c[:, None] * gpy).sum(1)
        gs[:, VX] += (-c[:, None] * gvx_ + sn[:, None] * gvy_).sum(1)
        gs[:, VY] += (-sn[:, None] * gvx_ - c[:, None] * gvy_).sum(1)
        gs[:, YAW] += (gpx * aey - gpy * aex + gvx_ * avey - gvy_ * avex).sum(1)
        return (gs,)

    values = ad.record("encode", out, (s,), vjp)
    return Features(values, rmask, amask)


# ---------------------------------------------------------------------------
# network pieces


def _mlp(p, prefix, x):
    h = ad.tanh(ad.affine(x, p[prefix + ".W1"], p[prefix + ".b1"]))
    return ad.affine(h, p[prefix + ".W2"], p[prefix + ".b2"])


def trunk_input(p, features, cfg: NetConfig):
    """Scaled features through the two-layer encoder."""
    x = ad.mul(features, feature_scale(cfg))
    h = ad.tanh(ad.affine(x, p["enc.W1"], p["enc.b1"]))
    return ad.tanh(ad.affine(h, p["enc.W2"], p["enc.b2"])), x


def core_step(p, encoded, hidden):
    return ad.gru_cell(encoded, hidden, p["core.Wx"], p["core.Wh"], p["core.bx"], p["core.bh"])


@dataclass
class MixtureOutput:
    means: ad.Var  # (B, K, 2) in action units
    log_std: ad.Var  # (B, K, 2) in action units
    logits: ad.Var  # (B, K)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.value)


def policy_forward(p, hidden, cfg: NetConfig) -> MixtureOutput:
    K = cfg.mixture
    out = _mlp(p, "policy", hidden)
    B = out.shape[0]
    means = ad.mul(ad.reshape(ad.index(out, (slice(None), slice(0, 2 * K))), (B, K, 2)), ACTION_SCALE)
    log_std = ad.add(
        ad.reshape(ad.index(out, (slice(None), slice(2 * K, 4 * K))), (B, K, 2)), np.log(ACTION_SCALE)
    )
    logits = ad.index(out, (slice(None), slice(4 * K, 5 * K)))
    return MixtureOutput(means, log_std, logits)


def ego_to_global(delta, s):
    """Rotate an ego-frame delta (dx, dy, dvx, dvy, dyaw) by the yaw of ``s``."""
    d, sv = ad._val(delta), ad._val(s)
    yaw = sv[..., YAW]
    c, sn = np.cos(yaw), np.sin(yaw)
    out = d.copy()
    out[..., 0] = c * d[..., 0] - sn * d[..., 1]
    out[..., 1] = sn * d[..., 0] + c * d[..., 1]
    out[..., 2] = c * d[..., 2] - sn * d[..., 3]
    out[..., 3] = sn * d[..., 2] + c * d[..., 3]

    def vjp(g):
        gd = g.copy()
        gd[..., 0] = c * g[..., 0] + sn * g[..., 1]
        gd[..., 1] = -sn * g[..., 0] + c * g[..., 1]
        gd[..., 2] = c * g[..., 2] + sn * g[..., 3]
        gd[..., 3] = -sn * g[..., 2] + c * g[..., 3]
        gs = np.zeros_like(sv)
        gs[..., YAW] = (
            g[..., 0] * -out[..., 1] + g[..., 1] * out[..., 0] + g[..., 2] * -out[..., 3] + g[..., 3] * out[..., 2]
        )
        return gd, gs

    return ad.record("ego_to_global", out, (delta, s), vjp)


def consistent_delta(raw, s):
    """Global-frame state delta from ego-frame (dx, dy, dv, dyaw).

    The velocity change is derived from speed and yaw so that ``s + delta``
    is consistent whenever ``s`` is.
    """
    r, sv = ad._val(raw), ad._val(s)
    vx, vy, yaw = sv[..., VX], sv[..., VY], sv[..., YAW]
    c, sn = np.cos(yaw), np.sin(yaw)
    v, lat = vx * c + vy * sn, -vx * sn + vy * c
    dx, dy, dv, dyaw = (r[..., i] for i in range(4))
    v1, yaw1 = v + dv, yaw + dyaw
    c1, s1 = np.cos(yaw1), np.sin(yaw1)
    out = np.stack([c * dx - sn * dy, sn * dx + c * dy, v1 * c1 - vx, v1 * s1 - vy, dyaw], axis=-1)

    def vjp(g):
        gv1 = g[..., 2] * c1 + g[..., 3] * s1
        gy1 = v1 * (g[..., 3] * c1 - g[..., 2] * s1)
        gr = np.stack([
            c * g[..., 0] + sn * g[..., 1], -sn * g[..., 0] + c * g[..., 1], gv1, gy1 + g[..., 4],
        ], axis=-1)
        gs = np.zeros_like(sv)
        gs[..., VX] = gv1 * c - g[..., 2]
        gs[..., VY] = gv1 * sn - g[..., 3]
        gs[..., YAW] = g[..., 1] * out[..., 0] - g[..., 0] * out[..., 1] + gv1 * lat + gy1
        return gr, gs

    return ad.record("consistent_delta", out, (raw, s), vjp)


def _delta_head(p, prefix, head_in, s):
    raw = _mlp(p, prefix, head_in)
    return ego_to_global(ad.mul(raw, DELTA_SCALE), s)


def _state_delta_head(p, prefix, head_in, s):
    raw = _mlp(p, prefix, head_in)
    return consistent_delta(ad.mul(raw, STATE_DELTA_SCALE), s)


def head_input(hidden, scaled_features, action=None):
    parts = [hidden, scaled_features]
    if action is not None:
        parts.append(ad.mul(action, 1.0 / ACTION_SCALE))
    return ad.concat(parts, axis=-1)


def odometry_forward(p, hidden, scaled_features, s, a):
    """Predicted state change from executing ``a`` (global frame)."""
    return _state_delta_head(p, "odo", head_input(hidden, scaled_features, a), s)


def planner_forward(p, hidden, scaled_features, s):
    """Offset from ``s`` to the next state the agent should visit."""
    return _delta_head(p, "plan", head_input(hidden, scaled_features), s)


def inverse_forward(p, hidden, scaled_features, s, a):
    """Displacement from ``s`` to the state in which ``a`` would reach the log."""
    return _state_delta_head(p, "inv", head_input(hidden, scaled_features, a), s)


class AgentStep:
    """Trunk evaluation for one timestep; heads are applied by the caller."""

    def __init__(self, p, scene, cfg: NetConfig, route: str):
        self.p, self.scene, self.cfg, self.route = p, scene, cfg, route

    def __call__(self, s, t, hidden):
        feats = encode(self.scene, s, t, self.cfg, self.route)
        enc, scaled = trunk_input(self.p, feats.values, self.cfg)
        return core_step(self.p, enc, hidden), scaled


def zero_hidden(batch: int, cfg: NetConfig):
    return ad.Var(np.zeros((batch, cfg.hidden)))


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"AWMC"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, path, extra: dict | None = None):
    meta = {
        "hidden": params.config.hidden,
        "feature_length": params.config.feature_dim,
        "mixture": params.config.mixture,
        "config": asdict(params.config),
    }
    if extra:
        meta["extra"] = extra
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(blob)), blob]
    for name, arr in params.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def _read(buf, pos, n, what):
    if pos + n > len(buf):
        raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
    return buf[pos : pos + n], pos + n


def load_checkpoint(path, expect: NetConfig | None = None) -> ModelParams:
    """Read a checkpoint; with ``expect`` every tensor shape is validated against it."""
    buf = Path(path).read_bytes()
    magic, pos = _read(buf, 0, 4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint file (magic {magic!r})")
    raw, pos = _read(buf, pos, 4, "version")
    (version,) = struct.unpack("<I", raw)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    raw, pos = _read(buf, pos, 4, "metadata length")
    (n,) = struct.unpack("<I", raw)
    blob, pos = _read(buf, pos, n, "metadata")
    meta = json.loads(blob.decode("utf-8"))
    cfg = NetConfig(**meta["config"])
    shapes = expected_shapes(expect or cfg)
    params = ModelParams(expect or cfg)
    while pos < len(buf):
        raw, pos = _read(buf, pos, 4, "tensor name length")
        (nl,) = struct.unpack("<I", raw)
        nb, pos = _read(buf, pos, nl, "tensor name")
        name = nb.decode("utf-8")
        raw, pos = _read(buf, pos, 4, f"rank of {name}")
        (ndim,) = struct.unpack("<I", raw)
        raw, pos = _read(buf, pos, 4 * ndim, f"shape of {name}")
        shape = struct.unpack(f"<{ndim}I", raw)
        count = int(np.prod(shape)) if ndim else 1
        raw, pos = _read(buf, pos, 8 * count, f"payload of {name}")
        if name not in shapes:
            raise ShapeMismatchError(f"unexpected tensor {name!r}")
        if tuple(shape) != shapes[name]:
            raise ShapeMismatchError(f"tensor {name!r} has shape {tuple(shape)}, expected {shapes[name]}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    missing = set(shapes) - set(params)
    if missing:
        raise TruncatedCheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return params


def bind(params: ModelParams, tape, prefixes=None) -> ModelParams:
    """Copy of ``params`` whose tensors under ``prefixes`` (all if None) are tape leaves."""
    out = ModelParams(params.config)
    for k, v in params.items():
        if prefixes is None or k.split(".")[0] in prefixes:
            out[k] = tape.leaf(v, k)
        else:
            out[k] = v
    return out
