"""Tape-based reverse-mode differentiation over a fixed set of primitives.

Every primitive computes its forward value with numpy and, when any input is
recorded on a tape, appends one node holding a closure that maps the output
adjoint to the adjoints of its inputs. ``backward`` walks the tape once in
reverse order. Values are batched float64 arrays; a single tape typically
holds a whole batched rollout, so backpropagation through time is just the
reverse sweep over all steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dynamics as dyn


class ShapeError(ValueError):
    """Contract violation: seed or gradient shape does not match its value."""


class Var:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape=None, index=-1):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, node={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)


@dataclass
class TapeNode:
    prim: str
    parents: tuple
    vjp: Callable | None
    name: str | None = None
    shape: tuple = ()


@dataclass
class Tape:
    """Append-only record of a forward pass."""

    nodes: list = field(default_factory=list)
    leaves: dict = field(default_factory=dict)
    boundary: list = field(default_factory=list)

    def leaf(self, value, name=None) -> Var:
        """Register a differentiable input; named leaves appear in the gradients."""
        value = np.asarray(value, dtype=np.float64)
        var = self._append(TapeNode("leaf", (), None, name, value.shape), value)
        if name is not None:
            if name in self.leaves:
                raise ValueError(f"duplicate leaf name {name!r}")
            self.leaves[name] = var.index
        return var

    def params(self, params: dict) -> dict:
        return {k: self.leaf(v, k) for k, v in params.items()}

    def flag_boundary(self, reason: str):
        self.boundary.append(reason)

    def _append(self, node, value):
        self.nodes.append(node)
        return Var(value, self, len(self.nodes) - 1)

    def __len__(self):
        return len(self.nodes)


class GradientAccumulator(dict):
    """Per-name gradient buffers; ``add`` accumulates additively."""

    def add(self, name, grad):
        if name in self:
            if self[name].shape != grad.shape:
                raise ShapeError(f"gradient for {name!r} has shape {grad.shape}, expected {self[name].shape}")
            self[name] = self[name] + grad
        else:
            self[name] = np.array(grad, dtype=np.float64)

    def scaled(self, factor):
        return GradientAccumulator({k: v * factor for k, v in self.items()})

    @classmethod
    def merge(cls, accumulators):
        """Ordered, deterministic reduction of several accumulators."""
        out = cls()
        for acc in accumulators:
            for k in sorted(acc):
                out.add(k, acc[k])
        return out


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var) and x.tape is not None:
            return x.tape
    return None


def record(prim, value, inputs, vjp, name=None) -> Var:
    """Create the output of a primitive; ``vjp(g)`` returns one adjoint per input (None allowed)."""
    tape = _tape_of(*inputs)
    if tape is None:
        return Var(value)
    parents = tuple(x.index if isinstance(x, Var) and x.tape is tape else -1 for x in inputs)
    return tape._append(TapeNode(prim, parents, vjp, name), value)


def backward(tape: Tape, output: Var, seed=None) -> GradientAccumulator:
    """Reverse sweep from ``output``; returns gradients of every named leaf."""
    if output.tape is not tape:
        raise ValueError("output was not recorded on this tape")
    if seed is None:
        if output.value.size != 1:
            raise ShapeError("seed required for non-scalar output")
        seed = np.ones_like(output.value)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.value.shape:
        raise ShapeError(f"seed shape {seed.shape} does not match output shape {output.value.shape}")
    adj = [None] * len(tape.nodes)
    adj[output.index] = seed
    for i in range(output.index, -1, -1):
        g = adj[i]
        if g is None:
            continue
        node = tape.nodes[i]
        if node.vjp is None:
            continue
        grads = node.vjp(g)
        for p, gp in zip(node.parents, grads):
            if p < 0 or gp is None:
                continue
            adj[p] = gp if adj[p] is None else adj[p] + gp
    out = GradientAccumulator()
    for name, i in tape.leaves.items():
        out[name] = adj[i] if adj[i] is not None else np.zeros(tape.nodes[i].shape)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a, b):
    va, vb = _val(a), _val(b)
    return record("add", va + vb, (a, b), lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = _val(a), _val(b)
    return record("sub", va - vb, (a, b), lambda g: (_unbroadcast(g, va.shape), -_unbroadcast(g, vb.shape)))


def mul(a, b):
    va, vb = _val(a), _val(b)
    return record(
        "mul", va * vb, (a, b), lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape))
    )


def total(a, axis=None):
    va = _val(a)
    out = va.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, va.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), va.shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a):
    va = _val(a)
    return record("mean", np.asarray(va.mean()), (a,), lambda g: (np.full(va.shape, g / va.size),))


def sumsq(a, axis=-1):
    """Squared Euclidean norm along ``axis``."""
    va = _val(a)
    return record("sumsq", (va * va).sum(axis=axis), (a,), lambda g: (2.0 * va * np.expand_dims(g, axis),))


def tanh(a):
    y = np.tanh(_val(a))
    return record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-_val(a)))
    return record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    y = np.exp(_val(a))
    return record("exp", y, (a,), lambda g: (g * y,))


def concat(xs, axis=-1):
    vals = [_val(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, tuple(xs), vjp)


def index(a, key):
    va = _val(a)

    def vjp(g):
        out = np.zeros_like(va)
        np.add.at(out, key, g)
        return (out,)

    return record("index", va[key], (a,), vjp)


def reshape(a, shape):
    va = _val(a)
    return record("reshape", va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def take_along(a, idx, axis):
    """``np.take_along_axis`` with an integer index array (no gradient to the index)."""
    va = _val(a)
    out = np.take_along_axis(va, idx, axis=axis)

    def vjp(g):
        res = np.zeros_like(va)
        np.put_along_axis(res, idx, g, axis=axis)
        return (res,)

    return record("take_along", out, (a,), vjp)


def detach(a):
    """Value copy with no gradient path (truncates BPTT)."""
    return Var(np.array(_val(a)))


def clip(a, lo, hi):
    va = _val(a)
    slope = ((va >= lo) & (va <= hi)).astype(np.float64)
    tape = _tape_of(a)
    if tape is not None and np.any((va <= lo) | (va >= hi)):
        tape.flag_boundary("clip saturated")
    return record("clip", np.clip(va, lo, hi), (a,), lambda g: (g * slope,))


# ---------------------------------------------------------------------------
# network primitives


def affine(x, W, b):
    vx, vW, vb = _val(x), _val(W), _val(b)
    out = vx @ vW + vb

    def vjp(g):
        gx = g @ vW.T
        g2 = g.reshape(-1, g.shape[-1])
        x2 = vx.reshape(-1, vx.shape[-1])
        return gx, x2.T @ g2, g2.sum(axis=0)

    return record("affine", out, (x, W, b), vjp)


def gru_cell(x, h, Wx, Wh, bx, bh):
    """Gated recurrent update with reset applied to the recurrent candidate.

    z = sig(x Wz + bz + h Uz + cz), r = sig(x Wr + br + h Ur + cr),
    n = tanh(x Wn + bn + r * (h Un + cn)), h' = (1 - z) * n + z * h.
    Gate blocks are packed in (z, r, n) order along the last axis.
    """
    vx, vh, vWx, vWh, vbx, vbh = (_val(t) for t in (x, h, Wx, Wh, bx, bh))
    H = vh.shape[-1]
    gx = vx @ vWx + vbx
    gh = vh @ vWh + vbh
    z = 1.0 / (1.0 + np.exp(-(gx[..., :H] + gh[..., :H])))
    r = 1.0 / (1.0 + np.exp(-(gx[..., H : 2 * H] + gh[..., H : 2 * H])))
    hn = gh[..., 2 * H :]
    n = np.tanh(gx[..., 2 * H :] + r * hn)
    out = (1.0 - z) * n + z * vh

    def vjp(g):
        dz = g * (vh - n) * z * (1.0 - z)
        dn_pre = g * (1.0 - z) * (1.0 - n * n)
        dr = dn_pre * hn * r * (1.0 - r)
        dgx = np.concatenate([dz, dr, dn_pre], axis=-1)
        dgh = np.concatenate([dz, dr, dn_pre * r], axis=-1)
        dx = dgx @ vWx.T
        dh = dgh @ vWh.T + g * z
        x2 = vx.reshape(-1, vx.shape[-1])
        h2 = vh.reshape(-1, H)
        dgx2 = dgx.reshape(-1, 3 * H)
        dgh2 = dgh.reshape(-1, 3 * H)
        return dx, dh, x2.T @ dgx2, h2.T @ dgh2, dgx2.sum(axis=0), dgh2.sum(axis=0)

    return record("gru_cell", out, (x, h, Wx, Wh, bx, bh), vjp)


def gaussian_nll(target, mean_, log_std):
    """Per-sample negative log-likelihood of a diagonal Gaussian, summed over the last axis."""
    t, m, ls = _val(target), _val(mean_), _val(log_std)
    inv = np.exp(-ls)
    zed = (t - m) * inv
    out = (0.5 * zed * zed + ls + 0.5 * np.log(2.0 * np.pi)).sum(axis=-1)

    def vjp(g):
        ge = g[..., None]
        return ge * zed * inv, -ge * zed * inv, ge * (1.0 - zed * zed)

    return record("gaussian_nll", out, (target, mean_, log_std), vjp)


def log_softmax_pick(logits, idx):
    """``-log softmax(logits)[idx]`` per row; ``idx`` holds one integer per row."""
    v = _val(logits)
    mx = v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(v - mx).sum(axis=-1, keepdims=True)) + mx
    p = np.exp(v - lse)
    picked = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
    out = lse[..., 0] - picked

    def vjp(g):
        onehot = np.zeros_like(v)
        np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
        return (g[..., None] * (p - onehot),)

    return record("log_softmax_pick", out, (logits,), vjp)


# ---------------------------------------------------------------------------
# dynamics primitives


def _flag_dynamics(tape, a_val, cfg, prim):
    if tape is not None and cfg.clip_actions and np.any(np.abs(a_val) >= cfg.action_bounds):
        tape.flag_boundary(f"{prim}: action clip saturated")


def sim_step(s, a, cfg: dyn.SimConfig):
    vs, va = _val(s), _val(a)
    _flag_dynamics(_tape_of(s, a), va, cfg, "step")
    out = dyn.step(vs, va, cfg)
    return record("step", out, (s, a), lambda g: dyn.step_vjp(vs, va, cfg, g))


def sim_inverse_step(s_next, a, cfg: dyn.SimConfig):
    vs, va = _val(s_next), _val(a)
    _flag_dynamics(_tape_of(s_next, a), va, cfg, "inverse_step")
    out = dyn.inverse_step(vs, va, cfg)
    return record("inverse_step", out, (s_next, a), lambda g: dyn.inverse_step_vjp(vs, va, cfg, g))


def sim_inv_kin(s, s_target, cfg: dyn.SimConfig):
    vs, vt = _val(s), _val(s_target)
    out = dyn.inv_kin(vs, vt, cfg)
    tape = _tape_of(s, s_target)
    if tape is not None:
        raw = dyn._inv_kin_raw(vs, vt, cfg)
        if cfg.clip_actions and np.any(np.abs(raw) >= cfg.action_bounds):
            tape.flag_boundary("inv_kin: action clip saturated")
        arc = 0.5 * (dyn.speed(vs) + dyn.speed(vt)) * cfg.dt
        if np.any(np.abs(np.abs(arc) - cfg.arc_epsilon) < 1e-12):
            tape.flag_boundary("inv_kin: zero-arc guard")
    return record("inv_kin", out, (s, s_target), lambda g: dyn.inv_kin_vjp(vs, vt, cfg, g))


# ---------------------------------------------------------------------------
# verification


@dataclass
class GradcheckReport:
    errors: np.ndarray  # (n_outputs, n_coords) relative errors
    coords: list
    tol: float
    excluded: list
    boundary: list
    failure: str | None = None

    @property
    def max_error(self) -> float:
        mask = np.ones(self.errors.shape[-1], dtype=bool)
        for c in self.excluded:
            mask[self.coords.index(c)] = False
        if not mask.any() or self.errors.size == 0:
            return 0.0
        return float(self.errors[:, mask].max())

    @property
    def passed(self) -> bool:
        if self.failure is not None:
            return False
        if self.boundary:
            return True
        return self.max_error < self.tol

    def summary(self) -> str:
        if self.failure:
            return f"FAIL ({self.failure})"
        if self.boundary:
            return f"EXCLUDED (branch boundary: {', '.join(sorted(set(self.boundary)))})"
        state = "pass" if self.passed else "FAIL"
        return f"{state} max_rel_err={self.max_error:.3e} tol={self.tol:.0e} coords={len(self.coords)}"


def _flatten(point):
    if isinstance(point, dict):
        keys = list(point)
        return keys, np.concatenate([np.ravel(point[k]) for k in keys])
    return None, np.ravel(point).astype(np.float64)


def _unflatten(keys, template, flat):
    if keys is None:
        return flat.reshape(np.shape(template))
    out, i = {}, 0
    for k in keys:
        n = np.size(template[k])
        out[k] = flat[i : i + n].reshape(np.shape(template[k]))
        i += n
    return out


def gradcheck(fn, point, h=1e-6, tol=1e-5, coords=None, kink_tol=1e-3) -> GradcheckReport:
    """Compare reverse-mode derivatives of ``fn`` with central differences.

    ``fn(inputs)`` receives a Var (or a dict of Vars when ``point`` is a dict)
    and returns an output Var. Relative error per entry is
    ``|analytic - fd| / max(1, |fd|)``. Coordinates where the one-sided
    differences disagree are treated as kinks and excluded; programs that
    flag a branch boundary on their tape are excluded as a whole.
    """
    keys, x0 = _flatten(point)
    coords = list(range(x0.size)) if coords is None else [int(c) for c in coords]

    def run(flat, tape=None):
        p = _unflatten(keys, point, flat)
        if tape is None:
            inp = {k: Var(np.asarray(v, dtype=np.float64)) for k, v in p.items()} if keys else Var(p)
        else:
            inp = tape.params(p) if keys else tape.leaf(p, "x")
        return fn(inp)

    tape = Tape()
    try:
        out = run(x0, tape)
        y0 = np.array(out.value, dtype=np.float64)
        if not np.all(np.isfinite(y0)):
            raise FloatingPointError("non-finite output at the base point")
        n_out = y0.size
        analytic = np.empty((n_out, x0.size))
        for j in range(n_out):
            seed = np.zeros(n_out)
            seed[j] = 1.0
            grads = backward(tape, out, seed.reshape(y0.shape))
            if keys:
                analytic[j] = np.concatenate([np.ravel(grads[k]) for k in keys])
            else:
                analytic[j] = np.ravel(grads["x"])
    except (FloatingPointError, dyn.DynamicsError) as exc:
        return GradcheckReport(np.zeros((0, 0)), coords, tol, [], [], failure=str(exc))

    errors = np.zeros((n_out, len(coords)))
    excluded = []
    for k, c in enumerate(coords):
        xp, xm = x0.copy(), x0.copy()
        xp[c] += h
        xm[c] -= h
        try:
            yp = np.ravel(run(xp).value)
            ym = np.ravel(run(xm).value)
        except dyn.DynamicsError as exc:
            return GradcheckReport(errors, coords, tol, excluded, [], failure=f"coordinate {c}: {exc}")
        if not (np.all(np.isfinite(yp)) and np.all(np.isfinite(ym))):
            return GradcheckReport(errors, coords, tol, excluded, [], failure=f"non-finite value at coordinate {c}")
        fd = (yp - ym) / (2 * h)
        fwd = (yp - np.ravel(y0)) / h
        bwd = (np.ravel(y0) - ym) / h
        if np.any(np.abs(fwd - bwd) > kink_tol * np.maximum(1.0, np.abs(fd))):
            excluded.append(c)
        errors[:, k] = np.abs(analytic[:, c] - fd) / np.maximum(1.0, np.abs(fd))
    return GradcheckReport(errors, coords, tol, excluded, list(tape.boundary))
