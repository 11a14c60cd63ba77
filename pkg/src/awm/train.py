"""Optimizer and the two-phase training schedule (policy first, then world-model heads)."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, nn
from .dynamics import SimConfig
from .metrics import ade_batch
from .rollout import rollout_seed, run_planner, run_policy
from .scenario import SceneBatch

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "policy_loss", "odo_loss", "plan_loss", "inv_loss", "eval_ade")


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    batch_size: int = 16
    apg_epochs: int = 40
    awm_epochs: int = 20
    awm_lr: float | None = None  # heads' learning rate; defaults to ``lr``
    weights: dict = field(default_factory=lambda: {"policy": 1.0, "odo": 1.0, "plan": 1.0, "inv": 1.0})
    seed: int = 0
    route: str = "heading"
    odometry_mode: str = "diffsim"
    transition_batch: int = 512
    collect_rollouts: int = 2
    truncate: int | None = None
    nll_weight: float = losses.NLL_WEIGHT
    wta: str = "xy"

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or (self.awm_lr is not None and self.awm_lr <= 0):
            raise ValueError("learning rate and batch size must be positive")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("loss weights must be non-negative")
        if self.wta not in losses.WTA_CHANNELS:
            raise ValueError(f"wta must be one of {sorted(losses.WTA_CHANNELS)}")


class Adam:
    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def update(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            params[k] = params[k] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def clip_grad_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and norm > max_norm:
        grads = ad.GradientAccumulator({k: g * (max_norm / norm) for k, g in grads.items()})
    return grads, norm


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: nn.ModelParams
    log: list
    diverged: str | None = None


def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def policy_ade(params, scene, sim_cfg, route, seed=0, mode="sample"):
    seeds = [rollout_seed(seed, i, 0) for i in range(scene.size)]
    out = run_policy(params, scene, sim_cfg, seeds, route=route, mode=mode)
    return float(np.mean(ade_batch(out["states"], scene.expert_states)))


def apg_update(params, opt, scene, sim_cfg, cfg: TrainConfig, rng):
    tape = ad.Tape()
    bound = nn.bind(params, tape, ("enc", "core", "policy"))
    loss, rec = losses.apg_episode(bound, scene, sim_cfg, rng, route=cfg.route, truncate=cfg.truncate,
                                   nll_weight=cfg.nll_weight, wta=cfg.wta)
    if not np.isfinite(loss.value):
        raise losses.NonFiniteLoss(-1)
    grads = ad.backward(tape, loss).scaled(cfg.weights.get("policy", 1.0))
    grads, _ = clip_grad_norm(grads, cfg.grad_clip)
    opt.update(params, grads)
    return rec.losses["state"]


def collect_transitions(params, scenes, sim_cfg, route, seed, rollouts=1):
    """Frozen-policy rollouts flattened into per-step transitions."""
    parts = []
    for r in range(rollouts):
        seeds = [rollout_seed(seed, i, 1000 + r) for i in range(scenes.size)]
        out = run_policy(params, scenes, sim_cfg, seeds, route=route)
        rec = losses.RolloutRecord(out["states"], out["actions"], scenes.expert_states, out["hidden"], out["features"])
        parts.append(losses.Transitions.from_record(rec))
    return losses.Transitions(*(np.concatenate([getattr(p, f) for p in parts]) for f in losses.Transitions.__dataclass_fields__))


def awm_update(params, opts, tr, scene, sim_cfg, cfg: TrainConfig, mode=None):
    """One joint step for the odometry, inverse-state and planner heads.

    ``tr`` or ``scene`` may be None to skip the transition or planner heads.
    """
    loss_free = sim_cfg.replace(clip_actions=False)
    out = {}
    w = cfg.weights
    for head, fn in (
        ("odo", lambda p: losses.odometry_loss(p, tr, loss_free, mode or cfg.odometry_mode)),
        ("inv", lambda p: losses.inverse_state_loss(p, tr, loss_free)),
        ("plan", lambda p: losses.planner_episode(p, scene, loss_free, route=cfg.route, truncate=cfg.truncate)[0]),
    ):
        if not w.get(head, 1.0) or (scene if head == "plan" else tr) is None:
            continue
        tape = ad.Tape()
        loss = fn(nn.bind(params, tape, (head,)))
        if not np.isfinite(loss.value):
            raise losses.NonFiniteLoss(-1, f"{head} loss")
        grads = ad.backward(tape, loss).scaled(w.get(head, 1.0))
        grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        opts[head].update(params, grads)
        out[head] = float(loss.value)
    return out


def train(dataset, cfg: TrainConfig = TrainConfig(), sim_cfg: SimConfig = SimConfig(), params=None,
          net_cfg: nn.NetConfig = nn.NetConfig(), heldout=None, log_path=None, checkpoint_dir=None) -> TrainResult:
    """Phase 1: policy by analytic policy gradients. Phase 2: heads on frozen-policy data.

    Returns the trained parameters and one log row per epoch. On a non-finite
    loss training stops and the last good parameters are returned.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = params.copy() if params is not None else nn.init_params(net_cfg, cfg.seed)
    eval_scene = SceneBatch.from_scenarios(heldout or dataset)
    rows = []
    good = params.copy()
    diverged = None
    writer, fh = None, None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    def emit(row):
        rows.append(row)
        if writer:
            writer.writerow([_fmt(row.get(c)) for c in LOG_COLUMNS])
            fh.flush()

    epoch = 0
    try:
        if cfg.weights.get("policy", 1.0) > 0:
            opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            for _ in range(cfg.apg_epochs):
                epoch += 1
                vals = []
                for idx in _batches(len(dataset), cfg.batch_size, rng):
                    scene = SceneBatch.from_scenarios([dataset[i] for i in idx])
                    vals.append(apg_update(params, opt, scene, sim_cfg, cfg, rng))
                good = params.copy()
                emit({"epoch": epoch, "policy_loss": float(np.mean(vals)),
                      "eval_ade": policy_ade(params, eval_scene, sim_cfg, cfg.route, cfg.seed)})
                log.info("apg epoch %d loss %.4f ade %.4f", epoch, rows[-1]["policy_loss"], rows[-1]["eval_ade"])
        heads = [h for h in ("odo", "plan", "inv") if cfg.weights.get(h, 1.0) > 0]
        if heads and cfg.awm_epochs > 0:
            full = SceneBatch.from_scenarios(dataset)
            tr = collect_transitions(params, full, sim_cfg, cfg.route, cfg.seed, cfg.collect_rollouts)
            lr = cfg.awm_lr or cfg.lr
            opts = {h: Adam(lr, cfg.beta1, cfg.beta2, cfg.eps) for h in heads}
            for _ in range(cfg.awm_epochs):
                epoch += 1
                acc = {h: [] for h in heads}
                tidx = rng.permutation(len(tr))
                n_tb = max(1, len(tr) // cfg.transition_batch)
                sbatches = _batches(len(dataset), cfg.batch_size, rng)
                n_steps = max(n_tb, len(sbatches))
                # one pass over the transitions and one over the scenarios per epoch
                for k in range(n_steps):
                    sub = None
                    if k < n_tb:
                        sub = tr.take(tidx[k * cfg.transition_batch : (k + 1) * cfg.transition_batch])
                    scene = None
                    if "plan" in heads and k < len(sbatches):
                        scene = SceneBatch.from_scenarios([dataset[i] for i in sbatches[k]])
                    out = awm_update(params, opts, sub, scene, sim_cfg, cfg)
                    for h, v in out.items():
                        acc[h].append(v)
                good = params.copy()
                row = {"epoch": epoch}
                for h, col in (("odo", "odo_loss"), ("plan", "plan_loss"), ("inv", "inv_loss")):
                    if acc.get(h):
                        row[col] = float(np.mean(acc[h]))
                if "plan" in heads:
                    out = run_planner(params, eval_scene, sim_cfg, cfg.route)
                    row["eval_ade"] = float(np.mean(ade_batch(out["states"], eval_scene.expert_states)))
                emit(row)
                log.info("awm epoch %d %s", epoch, row)
    except losses.NonFiniteLoss as exc:
        diverged = str(exc)
        params = good
        log.warning("training stopped: %s", exc)
    finally:
        if fh:
            fh.close()
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        nn.save_checkpoint(params, Path(checkpoint_dir) / "final.awmc")
    return TrainResult(params, rows, diverged)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
