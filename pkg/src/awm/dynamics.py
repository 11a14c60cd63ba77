"""Invertible kinematic bicycle dynamics with closed-form Jacobians.

States are float64 arrays with trailing dimension 5 laid out as
``(x, y, vx, vy, yaw)``; actions have trailing dimension 2 laid out as
``(accel, curvature)``. Every function broadcasts over leading batch axes.

The update integrates a constant acceleration along a circular arc whose
length is ``v*dt + accel*dt**2/2``. Position advances along the current
heading, the heading turns by ``curvature * arc`` and the velocity vector is
re-aligned with the new heading, so every produced state is consistent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

X, Y, VX, VY, YAW = range(5)
ACCEL, CURVATURE = range(2)
STATE_DIM = 5
ACTION_DIM = 2


class DynamicsError(ValueError):
    """Raised for non-finite states or actions."""


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    clip_actions: bool = True
    arc_epsilon: float = 1e-6
    accel_max: float = 6.0
    curvature_max: float = 0.3

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def action_bounds(self) -> np.ndarray:
        return np.array([self.accel_max, self.curvature_max])

    def replace(self, **kw) -> "SimConfig":
        fields = {**self.__dict__, **kw}
        return SimConfig(**fields)


def make_state(x=0.0, y=0.0, speed=0.0, yaw=0.0) -> np.ndarray:
    """Consistent state with velocity aligned to ``yaw``."""
    return np.array([x, y, speed * np.cos(yaw), speed * np.sin(yaw), yaw], dtype=np.float64)


def speed(s: np.ndarray) -> np.ndarray:
    """Signed speed: projection of the velocity onto the heading."""
    s = np.asarray(s, dtype=np.float64)
    return s[..., VX] * np.cos(s[..., YAW]) + s[..., VY] * np.sin(s[..., YAW])


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))


def is_consistent(s: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    v = speed(s)
    return (np.abs(s[..., VX] - v * np.cos(s[..., YAW])) < tol) & (
        np.abs(s[..., VY] - v * np.sin(s[..., YAW])) < tol
    )


def project_consistent(s: np.ndarray) -> np.ndarray:
    """Drop the velocity component perpendicular to the heading."""
    s = np.array(s, dtype=np.float64)
    v = speed(s)
    s[..., VX] = v * np.cos(s[..., YAW])
    s[..., VY] = v * np.sin(s[..., YAW])
    return s


def _check(name, arr, dim):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape[-1:] != (dim,):
        raise DynamicsError(f"{name} must have trailing dimension {dim}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DynamicsError(f"{name} contains non-finite values")
    return arr


def clip_action(a: np.ndarray, cfg: SimConfig):
    """Clip to the action box. Returns (clipped, slope) with slope 0 on saturated channels."""
    bounds = cfg.action_bounds
    if not cfg.clip_actions:
        return a, np.ones_like(a)
    slope = (np.abs(a) <= bounds).astype(np.float64)
    return np.clip(a, -bounds, bounds), slope


def step(s, a, cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Advance one timestep: Sim(s, a)."""
    s = _check("state", s, STATE_DIM)
    a = _check("action", a, ACTION_DIM)
    a, _ = clip_action(a, cfg)
    return _step(s, a, cfg.dt)


def _step(s, a, dt):
    yaw = s[..., YAW]
    c, sn = np.cos(yaw), np.sin(yaw)
    v = s[..., VX] * c + s[..., VY] * sn
    accel, kappa = a[..., ACCEL], a[..., CURVATURE]
    arc = v * dt + 0.5 * accel * dt * dt
    v_next = v + accel * dt
    yaw_next = yaw + kappa * arc
    out = np.empty(np.broadcast_shapes(s.shape, a.shape[:-1] + (STATE_DIM,)))
    out[..., X] = s[..., X] + arc * c
    out[..., Y] = s[..., Y] + arc * sn
    out[..., VX] = v_next * np.cos(yaw_next)
    out[..., VY] = v_next * np.sin(yaw_next)
    out[..., YAW] = yaw_next
    return out


def inverse_step(s_next, a, cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Recover the predecessor state: Sim^-1(s_next, a).

    Exact inverse of :func:`step` for consistent ``s_next`` and an action
    already inside the clip box (or with clipping disabled).
    """
    s_next = _check("state", s_next, STATE_DIM)
    a = _check("action", a, ACTION_DIM)
    a, _ = clip_action(a, cfg)
    return _inverse_step(s_next, a, cfg.dt)


def _inverse_step(s_next, a, dt):
    yaw_next = s_next[..., YAW]
    v_next = s_next[..., VX] * np.cos(yaw_next) + s_next[..., VY] * np.sin(yaw_next)
    accel, kappa = a[..., ACCEL], a[..., CURVATURE]
    v = v_next - accel * dt
    arc = v * dt + 0.5 * accel * dt * dt
    yaw = yaw_next - kappa * arc
    c, sn = np.cos(yaw), np.sin(yaw)
    out = np.empty(np.broadcast_shapes(s_next.shape, a.shape[:-1] + (STATE_DIM,)))
    out[..., X] = s_next[..., X] - arc * c
    out[..., Y] = s_next[..., Y] - arc * sn
    out[..., VX] = v * c
    out[..., VY] = v * sn
    out[..., YAW] = yaw
    return out


def inv_kin(s, s_target, cfg: SimConfig = SimConfig()) -> np.ndarray:
    """Action that transfers ``s`` to ``s_target`` (exact when reachable)."""
    s = _check("state", s, STATE_DIM)
    s_target = _check("target state", s_target, STATE_DIM)
    a = _inv_kin_raw(s, s_target, cfg)
    return clip_action(a, cfg)[0]


def _inv_kin_raw(s, s_target, cfg):
    dt = cfg.dt
    v = speed(s)
    v_tgt = speed(s_target)
    accel = (v_tgt - v) / dt
    arc = v * dt + 0.5 * accel * dt * dt
    dyaw = wrap_angle(s_target[..., YAW] - s[..., YAW])
    active = np.abs(arc) > cfg.arc_epsilon
    kappa = np.where(active, dyaw / np.where(active, arc, 1.0), 0.0)
    return np.stack([accel, kappa], axis=-1)


# ---------------------------------------------------------------------------
# Vector-Jacobian products


def step_vjp(s, a, cfg: SimConfig, g):
    """Pull back ``g`` (same shape as the output state) through :func:`step`.

    Returns ``(grad_s, grad_a)``. Saturated action channels receive zero.
    """
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    a_c, slope = clip_action(a, cfg)
    dt = cfg.dt
    yaw = s[..., YAW]
    c, sn = np.cos(yaw), np.sin(yaw)
    v = s[..., VX] * c + s[..., VY] * sn
    lat = -s[..., VX] * sn + s[..., VY] * c  # dv/dyaw
    accel, kappa = a_c[..., ACCEL], a_c[..., CURVATURE]
    arc = v * dt + 0.5 * accel * dt * dt
    v_next = v + accel * dt
    yaw_next = yaw + kappa * arc
    cn, snn = np.cos(yaw_next), np.sin(yaw_next)

    gx, gy, gvx, gvy, gyaw = (g[..., i] for i in range(5))
    g_vnext = gvx * cn + gvy * snn
    g_yawnext = gyaw + v_next * (gvy * cn - gvx * snn)
    g_arc = gx * c + gy * sn + g_yawnext * kappa
    g_kappa = g_yawnext * arc
    g_yaw = g_yawnext + arc * (gy * c - gx * sn)
    g_v = g_vnext + g_arc * dt
    g_accel = g_vnext * dt + g_arc * 0.5 * dt * dt
    g_yaw = g_yaw + g_v * lat

    grad_s = np.stack([gx, gy, g_v * c, g_v * sn, g_yaw], axis=-1)
    grad_a = np.stack([g_accel, g_kappa], axis=-1) * slope
    return grad_s, grad_a


def inverse_step_vjp(s_next, a, cfg: SimConfig, g):
    """Pull back ``g`` through :func:`inverse_step`; returns (grad_s_next, grad_a)."""
    s_next = np.asarray(s_next, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    a_c, slope = clip_action(a, cfg)
    dt = cfg.dt
    yaw_next = s_next[..., YAW]
    cn, snn = np.cos(yaw_next), np.sin(yaw_next)
    v_next = s_next[..., VX] * cn + s_next[..., VY] * snn
    lat_next = -s_next[..., VX] * snn + s_next[..., VY] * cn
    accel, kappa = a_c[..., ACCEL], a_c[..., CURVATURE]
    v = v_next - accel * dt
    arc = v * dt + 0.5 * accel * dt * dt
    yaw = yaw_next - kappa * arc
    c, sn = np.cos(yaw), np.sin(yaw)

    gx, gy, gvx, gvy, gyaw = (g[..., i] for i in range(5))
    g_yaw = gyaw + arc * (gx * sn - gy * c) + v * (gvy * c - gvx * sn)
    g_arc = -(gx * c + gy * sn) - g_yaw * kappa
    g_kappa = -g_yaw * arc
    g_v = gvx * c + gvy * sn + g_arc * dt
    g_accel = g_arc * 0.5 * dt * dt - g_v * dt
    g_yawnext = g_yaw + g_v * lat_next

    grad_s = np.stack([gx, gy, g_v * cn, g_v * snn, g_yawnext], axis=-1)
    grad_a = np.stack([g_accel, g_kappa], axis=-1) * slope
    return grad_s, grad_a


def inv_kin_vjp(s, s_target, cfg: SimConfig, g):
    """Pull back ``g`` (action-shaped) through :func:`inv_kin`.

    Returns ``(grad_s, grad_s_target)``. The zero-arc fallback branch and
    saturated output channels contribute zero gradient.
    """
    s = np.asarray(s, dtype=np.float64)
    s_target = np.asarray(s_target, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    dt = cfg.dt
    raw = _inv_kin_raw(s, s_target, cfg)
    _, slope = clip_action(raw, cfg)
    g = g * slope

    yaw, yaw_t = s[..., YAW], s_target[..., YAW]
    c, sn = np.cos(yaw), np.sin(yaw)
    ct, snt = np.cos(yaw_t), np.sin(yaw_t)
    v = s[..., VX] * c + s[..., VY] * sn
    v_t = s_target[..., VX] * ct + s_target[..., VY] * snt
    lat = -s[..., VX] * sn + s[..., VY] * c
    lat_t = -s_target[..., VX] * snt + s_target[..., VY] * ct
    accel = (v_t - v) / dt
    arc = v * dt + 0.5 * accel * dt * dt
    dyaw = wrap_angle(yaw_t - yaw)
    active = np.abs(arc) > cfg.arc_epsilon
    safe_arc = np.where(active, arc, 1.0)

    g_accel, g_kappa = g[..., ACCEL], np.where(active, g[..., CURVATURE], 0.0)
    g_dyaw = g_kappa / safe_arc
    g_arc = -g_kappa * dyaw / (safe_arc * safe_arc)
    # arc = (v + v_t) * dt / 2 after substituting accel
    g_v = -g_accel / dt + g_arc * 0.5 * dt
    g_vt = g_accel / dt + g_arc * 0.5 * dt

    grad_s = np.stack(
        [np.zeros_like(v), np.zeros_like(v), g_v * c, g_v * sn, -g_dyaw + g_v * lat], axis=-1
    )
    grad_t = np.stack(
        [np.zeros_like(v), np.zeros_like(v), g_vt * ct, g_vt * snt, g_dyaw + g_vt * lat_t], axis=-1
    )
    return grad_s, grad_t


def jacobian_from_vjp(vjp, out_dim, *args):
    """Dense Jacobians of an unbatched primitive, assembled row by row from its VJP."""
    rows = [vjp(*args, np.eye(out_dim)[i]) for i in range(out_dim)]
    return tuple(np.stack([r[k] for r in rows]) for k in range(len(rows[0])))
