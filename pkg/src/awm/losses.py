"""Training objectives: analytic policy gradients and the three simulator-in-the-loop world-model heads.

All objectives put the simulator inside the differentiated graph:

* policy:      || step(s, pi(s)) - s_log' ||^2, backpropagated through time
* odometry:    || step(s' - d, a) - s' ||^2             (d predicted by the odometry head)
* inverse-sim: || inverse_step(s + d, a) - s ||^2       (alternative odometry form)
* planner:     || step(s, inv_kin(s, s + d)) - s_log' ||^2, rolled out with BPTT
* inverse:     || step(s + d, a) - s_log' ||^2         (d predicted by the inverse-state head)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .dynamics import SimConfig, step

NLL_WEIGHT = 0.01
# channels compared when choosing the winning component: planar position by
# default; "state" also compares velocity and heading, which do see curvature
# after a single step (position does not)
WTA_CHANNELS = {"xy": slice(0, 2), "state": slice(0, 5)}


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, what="loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class RolloutRecord:
    states: np.ndarray  # (B, T, 5) realized
    actions: np.ndarray  # (B, T - 1, 2) executed
    expert: np.ndarray  # (B, T, 5)
    hidden: np.ndarray  # (B, T - 1, H) hidden state used to choose each action
    features: np.ndarray  # (B, T - 1, F) scaled features at each step
    losses: dict = field(default_factory=dict)
    winners: np.ndarray | None = None


# ---------------------------------------------------------------------------
# winner-take-all mixture sampling


def wta_winner(distances: np.ndarray) -> np.ndarray:
    """Index of the smallest distance per row (lowest index on ties)."""
    return np.argmin(distances, axis=-1)


def wta_distances(means, s, s_expert_next, sim_cfg: SimConfig, channels="xy"):
    """Distance from ``step(s, mean_k)`` to the next expert state for each component, (B, K)."""
    sv = ad._val(s)
    nxt = step(np.broadcast_to(sv[:, None, :], means.shape[:-1] + (5,)), means, sim_cfg)
    return np.linalg.norm((nxt - s_expert_next[:, None, :])[..., WTA_CHANNELS[channels]], axis=-1)


def wta_select(mix: nn.MixtureOutput, s, s_expert_next, sim_cfg: SimConfig, noise, channels="xy"):
    """Pick the component whose mean lands closest to the next expert state and sample from it.

    Returns ``(winner_index, action, mean, log_std)``; the action is a
    reparametrised sample ``mean_w + std_w * noise`` so gradients reach only
    the winning component.
    """
    dist = wta_distances(mix.means.value, s, s_expert_next, sim_cfg, channels)
    idx = wta_winner(dist)
    gather = np.broadcast_to(idx[:, None, None], (len(idx), 1, 2))
    mu = ad.reshape(ad.take_along(mix.means, gather, axis=1), (len(idx), 2))
    log_std = ad.reshape(ad.take_along(mix.log_std, gather, axis=1), (len(idx), 2))
    action = ad.add(mu, ad.mul(ad.exp(log_std), noise))
    return idx, action, mu, log_std


# ---------------------------------------------------------------------------
# policy (APG)


def apg_episode(params, scene, sim_cfg: SimConfig, rng, route="heading", steps=None,
                nll_weight=NLL_WEIGHT, truncate=None, policy=None, wta="xy"):
    """Autoregressive policy rollout with the winner-take-all mixture.

    Returns ``(loss, record)`` where ``loss`` is the batch-mean of the summed
    per-step squared state error plus ``nll_weight`` times the negative
    log-likelihood of the inverse-kinematics action under the winner.
    ``truncate`` cuts the gradient path every that many steps; ``wta`` names
    the state channels used to pick the winning component.
    ``policy(t, s, h, xs)`` may replace the policy head with any
    :class:`~awm.nn.MixtureOutput` producer.
    """
    p = params
    cfg = params.config
    B, T = scene.size, steps or scene.steps
    agent = nn.AgentStep(p, scene, cfg, route)
    s = ad.Var(scene.expert_states[:, 0].copy())
    h = nn.zero_hidden(B, cfg)
    state_loss, nll = 0.0, 0.0
    states, actions, hiddens, feats, winners = [s.value], [], [], [], []
    for t in range(T - 1):
        if truncate and t and t % truncate == 0:
            s, h = ad.detach(s), ad.detach(h)
        h, xs = agent(s, t, h)
        mix = policy(t, s, h, xs) if policy is not None else nn.policy_forward(p, h, cfg)
        if not (np.all(np.isfinite(mix.means.value)) and np.all(np.isfinite(mix.log_std.value))):
            raise NonFiniteLoss(t, "policy output")
        target = scene.expert_states[:, t + 1]
        idx, a, mu, log_std = wta_select(mix, s, target, sim_cfg, rng.standard_normal((B, 2)), wta)
        s_next = ad.sim_step(s, a, sim_cfg)
        err = ad.sumsq(ad.sub(s_next, target))
        state_loss = ad.add(state_loss, err)
        if nll_weight:
            a_star = ad.sim_inv_kin(s, target, sim_cfg)
            nll_t = ad.add(ad.gaussian_nll(a_star, mu, log_std), ad.log_softmax_pick(mix.logits, idx))
            nll = ad.add(nll, nll_t)
        if not np.all(np.isfinite(err.value)):
            raise NonFiniteLoss(t)
        hiddens.append(h.value)
        feats.append(xs.value)
        actions.append(np.clip(a.value, -sim_cfg.action_bounds, sim_cfg.action_bounds) if sim_cfg.clip_actions else a.value)
        winners.append(idx)
        states.append(s_next.value)
        s = s_next
    per_episode = ad.add(state_loss, ad.mul(nll, nll_weight)) if nll_weight else state_loss
    loss = ad.mean(per_episode)
    rec = RolloutRecord(
        np.stack(states, 1), np.stack(actions, 1), scene.expert_states[:, :T], np.stack(hiddens, 1),
        np.stack(feats, 1),
        {"state": float(np.mean(ad._val(state_loss))), "nll": float(np.mean(ad._val(nll)))},
        np.stack(winners, 1),
    )
    return loss, rec


# ---------------------------------------------------------------------------
# world-model objectives on collected transitions (kernels take the predicted delta)


def odometry_loss_from_delta(d, s_t, a_t, s_next, sim_cfg):
    """Per-row || step(s' - d, a) - s' ||^2; zero at d = s' - s."""
    return ad.sumsq(ad.sub(ad.sim_step(ad.sub(s_next, d), a_t, sim_cfg), s_next))


def odometry_inverse_loss_from_prediction(s_est, s_t, a_t, sim_cfg):
    """Per-row || inverse_step(s_est, a) - s ||^2; zero at s_est = step(s, a)."""
    return ad.sumsq(ad.sub(ad.sim_inverse_step(s_est, a_t, sim_cfg), s_t))


def delta_regression_loss(d, s_t, s_next):
    """Per-row || d - (s' - s) ||^2: supervised delta regression with no simulator in the graph."""
    return ad.sumsq(ad.sub(d, s_next - s_t))


def inverse_state_loss_from_delta(d, s_t, a_t, s_expert_next, sim_cfg):
    """Per-row || step(s + d, a) - s_log' ||^2; zero at d = inverse_step(s_log', a) - s."""
    return ad.sumsq(ad.sub(ad.sim_step(ad.add(s_t, d), a_t, sim_cfg), s_expert_next))


@dataclass
class Transitions:
    """Flattened policy transitions with the frozen trunk's hidden state and features."""

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    s_expert_next: np.ndarray
    hidden: np.ndarray
    features: np.ndarray

    def __len__(self):
        return len(self.s)

    def take(self, idx) -> "Transitions":
        return Transitions(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    @classmethod
    def from_record(cls, rec: RolloutRecord):
        B, T1 = rec.actions.shape[:2]
        return cls(
            rec.states[:, :-1].reshape(B * T1, 5), rec.actions.reshape(B * T1, 2),
            rec.states[:, 1:].reshape(B * T1, 5), rec.expert[:, 1 : T1 + 1].reshape(B * T1, 5),
            rec.hidden.reshape(B * T1, -1), rec.features.reshape(B * T1, -1),
        )


def odometry_loss(p, tr: Transitions, sim_cfg, mode="diffsim"):
    """Batch-mean odometry loss. ``mode``: ``diffsim`` (forward simulator),
    ``inverse`` (inverse simulator) or ``regression`` (no simulator, ablation)."""
    d = nn.odometry_forward(p, tr.hidden, tr.features, tr.s, tr.a)
    if mode == "diffsim":
        per = odometry_loss_from_delta(d, tr.s, tr.a, tr.s_next, sim_cfg)
    elif mode == "inverse":
        per = odometry_inverse_loss_from_prediction(ad.add(tr.s, d), tr.s, tr.a, sim_cfg)
    elif mode == "regression":
        per = delta_regression_loss(d, tr.s, tr.s_next)
    else:
        raise ValueError(f"unknown odometry mode {mode!r}")
    return ad.mean(per)


def inverse_state_loss(p, tr: Transitions, sim_cfg):
    d = nn.inverse_forward(p, tr.hidden, tr.features, tr.s, tr.a)
    return ad.mean(inverse_state_loss_from_delta(d, tr.s, tr.a, tr.s_expert_next, sim_cfg))


# ---------------------------------------------------------------------------
# planner


def planner_episode(params, scene, sim_cfg: SimConfig, route="heading", planner=None, steps=None, truncate=None):
    """Roll out actions obtained by inverse kinematics towards planned offsets.

    ``params`` is a mapping whose trunk tensors may be plain arrays (frozen)
    and whose planner tensors may be tape leaves. ``planner(t, s, h, xs)``
    overrides the planner head (used to inject an oracle). Training passes a
    ``sim_cfg`` with clipping disabled; evaluation keeps it enabled.
    """
    cfg = params.config
    B, T = scene.size, steps or scene.steps
    agent = nn.AgentStep(params, scene, cfg, route)
    s = ad.Var(scene.expert_states[:, 0].copy())
    h = nn.zero_hidden(B, cfg)
    loss = 0.0
    states, actions = [s.value], []
    for t in range(T - 1):
        if truncate and t and t % truncate == 0:
            s, h = ad.detach(s), ad.detach(h)
        h, xs = agent(s, t, h)
        d = planner(t, s, h, xs) if planner is not None else nn.planner_forward(params, h, xs, s)
        if not np.all(np.isfinite(ad._val(d))):
            raise NonFiniteLoss(t, "planner output")
        a = ad.sim_inv_kin(s, ad.add(s, d), sim_cfg)
        s_next = ad.sim_step(s, a, sim_cfg)
        err = ad.sumsq(ad.sub(s_next, scene.expert_states[:, t + 1]))
        if not np.all(np.isfinite(err.value)):
            raise NonFiniteLoss(t)
        loss = ad.add(loss, err)
        states.append(s_next.value)
        actions.append(a.value)
        s = s_next
    rec = RolloutRecord(np.stack(states, 1), np.stack(actions, 1), scene.expert_states[:, :T],
                        np.zeros((B, 0, 0)), np.zeros((B, 0, 0)), {"plan": float(np.mean(ad._val(loss)))})
    return ad.mean(loss), rec
