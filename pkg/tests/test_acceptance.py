"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line with its measurements.

The trained models come from session fixtures in ``conftest.py``; the whole
file takes roughly a quarter of an hour on one CPU core.
"""
import time

import numpy as np
import pytest

from awm import checks, cli, evaluate, losses, mpc, nn, scenario, train
from awm import autodiff as ad
from awm.dynamics import SimConfig, inv_kin, inverse_step, make_state, step
from awm.rollout import rollout_seed, run_planner, run_policy
from awm.metrics import ade_batch

from conftest import APG_RECIPE

pytestmark = pytest.mark.slow


def _check(report, criterion, conditions, detail):
    ok = all(conditions.values())
    failed = [k for k, v in conditions.items() if not v]
    report(criterion, ok, detail + (f" | failed: {', '.join(failed)}" if failed else ""))
    assert ok, failed


# 1 ---------------------------------------------------------------------------


def test_criterion_1_gradcheck_suite(acceptance_report):
    t0 = time.perf_counter()
    results = checks.run_suite(seed=0, points=10, tol=1e-5, episode_tol=1e-4)
    dt = time.perf_counter() - t0
    names = {r.name for r in results}
    worst = max(r.report.max_error for r in results)
    _check(acceptance_report, 1, {
        "all checks pass": all(r.passed for r in results),
        ">= 10 points per case": all(sum(r.name == n for r in results) >= 10 for n in names),
        "runtime < 60 s": dt < 60,
    }, f"{len(results)} checks over {len(names)} cases, max rel err {worst:.2e}, {dt:.1f} s")


# 2 ---------------------------------------------------------------------------


def _pairs(n, seed):
    rng = np.random.default_rng(seed)
    s = np.stack([make_state(*rng.uniform(-100, 100, 2), rng.uniform(0.5, 15), rng.uniform(-np.pi, np.pi))
                  for _ in range(n)])
    a = np.stack([rng.uniform(-6, 6, n), rng.uniform(-0.3, 0.3, n)], axis=-1)
    return s, a


def test_criterion_2_exact_identities(acceptance_report):
    t0 = time.perf_counter()
    free = SimConfig(clip_actions=False)
    s, a = _pairs(1000, 0)
    s_next = step(s, a, free)
    round_trip = np.abs(inverse_step(s_next, a, free) - s).max()
    recovery = np.abs(inv_kin(s, s_next, free) - a).max()

    # every objective evaluated at its analytic minimizer
    s_log = step(s, a * 0.7, free)
    odo_fwd = losses.odometry_loss_from_delta(s_next - s, s, a, s_next, free).value.max()
    odo_inv = losses.odometry_inverse_loss_from_prediction(s_next, s, a, free).value.max()
    inv_state = losses.inverse_state_loss_from_delta(inverse_step(s_log, a, free) - s, s, a, s_log, free).value.max()
    scene = scenario.SceneBatch.from_scenarios(scenario.generate_dataset(["arc", "s-curve", "stop-go"], 3, 5))
    params = nn.init_params(nn.NetConfig(), 0)
    oracle = lambda t, st, h, xs: scene.expert_states[:, t + 1] - ad._val(st)
    plan, _ = losses.planner_episode(params, scene, free, planner=oracle)
    dt = time.perf_counter() - t0
    _check(acceptance_report, 2, {
        "round trip < 1e-9": round_trip < 1e-9,
        "action recovery < 1e-9": recovery < 1e-9,
        "simulator odometry minimum < 1e-18": odo_fwd < 1e-18,
        "inverse-simulator odometry minimum < 1e-18": odo_inv < 1e-18,
        "planner minimum < 1e-18": plan.value < 1e-18,
        "inverse-state minimum < 1e-18": inv_state < 1e-18,
        "runtime < 60 s": dt < 60,
    }, f"round trip {round_trip:.1e}, recovery {recovery:.1e}, minima odo {odo_fwd:.1e} / {odo_inv:.1e}, "
       f"planner {float(plan.value):.1e}, inverse-state {inv_state:.1e}, {dt:.1f} s")


# 3 ---------------------------------------------------------------------------


def test_criterion_3_apg_training(acceptance_report, apg_model, main_train, main_heldout):
    params, train_time = apg_model
    init = nn.init_params(nn.NetConfig(), APG_RECIPE["seed"])
    rows = evaluate.reactive_eval(params, main_train)
    init_rows = evaluate.reactive_eval(init, main_train)
    ade = np.mean([r["ade"] for r in rows])
    ade0 = np.mean([r["ade"] for r in init_rows])
    held = np.mean([r["ade"] for r in evaluate.reactive_eval(params, main_heldout)])
    overlap = np.mean([r["overlap"] for r in rows])
    offroad = np.mean([r["offroad"] for r in rows])
    _check(acceptance_report, 3, {
        "ADE < 0.5 m": ade < 0.5,
        "ADE < 15% of zero-init": ade < 0.15 * ade0,
        "overlap rate 0": overlap == 0,
        "offroad rate 0": offroad == 0,
        "runtime < 15 min": train_time < 900,
    }, f"ADE {ade:.3f} m (init {ade0:.3f}, ratio {ade / ade0:.3f}; held-out {held:.3f}), "
       f"overlap {overlap:.3f}, offroad {offroad:.3f}, training {train_time:.0f} s")


# 4 ---------------------------------------------------------------------------


def test_criterion_4_multimodality(acceptance_report, fork_model, fork_train):
    ks = (1, 4, 16, 32)
    min_ade = {k: np.mean([r["ade"] for r in evaluate.reactive_eval(fork_model, fork_train, k, "none", seed=0)])
               for k in ks}
    seq = [min_ade[k] for k in ks]
    _check(acceptance_report, 4, {
        "non-increasing in K": all(b <= a for a, b in zip(seq, seq[1:])),
        "minADE(32) < 0.6 minADE(1)": min_ade[32] < 0.6 * min_ade[1],
    }, "minADE " + ", ".join(f"K={k}: {v:.3f}" for k, v in min_ade.items()) + f", ratio {min_ade[32] / min_ade[1]:.3f}")


# 5 ---------------------------------------------------------------------------


def test_criterion_5_odometry_horizon_trend(acceptance_report, apg_model, main_train):
    params = apg_model[0]
    scene = scenario.SceneBatch.from_scenarios(main_train)
    rec = run_policy(params, scene, SimConfig(), [rollout_seed(7, i, 0) for i in range(scene.size)])
    horizons, starts = (5, 10, 15), list(range(0, 64, 8))
    res = {"diffsim": [], "regression": []}
    for seed in range(3):
        for mode in res:
            cfg = train.TrainConfig(lr=1e-3, apg_epochs=0, awm_epochs=200, seed=seed, odometry_mode=mode,
                                    weights={"policy": 0.0, "odo": 1.0, "plan": 0.0, "inv": 0.0})
            p = train.train(main_train, cfg, params=params).params
            res[mode].append(evaluate.imagination_ade(p, scene, rec["states"], rec["actions"], horizons, starts))
    med = {m: {h: float(np.median([r[h] for r in runs])) for h in horizons} for m, runs in res.items()}
    d, r = med["diffsim"], med["regression"]
    _check(acceptance_report, 5, {
        "ADE increases with horizon": d[5] < d[10] < d[15],
        "simulator head 15-step ADE <= regression ablation": d[15] <= r[15],
    }, "median imagination ADE simulator-in-loop " + ", ".join(f"H={h}: {v:.4f}" for h, v in d.items())
       + "; regression " + ", ".join(f"H={h}: {v:.4f}" for h, v in r.items()))


# 6 ---------------------------------------------------------------------------


def test_criterion_6_planner_parity(acceptance_report, awm_model, main_heldout):
    scene = scenario.SceneBatch.from_scenarios(main_heldout)
    planner = float(np.mean(ade_batch(run_planner(awm_model, scene, SimConfig())["states"], scene.expert_states)))
    policy = float(np.mean([r["ade"] for r in evaluate.reactive_eval(awm_model, main_heldout)]))
    _check(acceptance_report, 6, {
        "planner ADE <= 1.25 x policy ADE": planner <= 1.25 * policy,
    }, f"held-out planner ADE {planner:.3f} m, policy ADE {policy:.3f} m, ratio {planner / policy:.3f}")


# 7 ---------------------------------------------------------------------------


def test_criterion_7_inverse_state_semantics(acceptance_report, awm_model):
    probe = scenario.SceneBatch.from_scenarios([scenario.generate_scenario("stop-go", 2000 + i) for i in range(32)])
    norms, dist = evaluate.inverse_probe(awm_model, probe, evaluate.over_accelerate(probe.expert_actions))
    rho = evaluate.rank_correlations(norms, dist)
    med = float(np.nanmedian(rho))
    _check(acceptance_report, 7, {
        "median Spearman > 0.8": med > 0.8,
    }, f"median Spearman {med:.3f} over {np.isfinite(rho).sum()} episodes (min {np.nanmin(rho):.3f})")


# 8 ---------------------------------------------------------------------------


def test_criterion_8_mpc(acceptance_report, awm_model, main_heldout):
    t0 = time.perf_counter()
    ade = lambda cfg: float(np.mean([r["ade"] for r in mpc.mpc_eval(awm_model, main_heldout, cfg)]))
    reactive = ade(mpc.MpcConfig(1, 1, 1))
    by_log = ade(mpc.MpcConfig(8, 3, 10, reward="neg-dist-to-log"))
    by_inv = ade(mpc.MpcConfig(8, 3, 10, reward="neg-inverse-norm"))
    dt = time.perf_counter() - t0
    gap = abs(by_inv - by_log) / by_log
    _check(acceptance_report, 8, {
        "MPC ADE <= reactive": by_log <= reactive,
        "inverse-norm scoring within 5% of log scoring": gap <= 0.05,
        "runtime < 10 min": dt < 600,
    }, f"reactive (1,1,1) {reactive:.3f} m, (8,3,10) log-distance {by_log:.3f} m, inverse-norm {by_inv:.3f} m "
       f"(gap {100 * gap:.1f}%), {dt:.0f} s")


# 9 ---------------------------------------------------------------------------


def _run_all(root):
    data, ckpt = root / "data.jsonl", root / "train" / "checkpoints" / "final.awmc"
    assert cli.main(["gen", "--kinds", "straight,arc,fork", "--count", "6", "--seed", "3", "--out", str(data)]) == 0
    assert cli.main(["train", "--data", str(data), "--out", str(root / "train"), "--apg-epochs", "1",
                     "--awm-epochs", "1", "--batch-size", "4", "--seed", "3"]) == 0
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(root / "eval"),
                     "--workers", "1"]) == 0
    assert cli.main(["eval", "--data", str(data), "--ckpt", str(ckpt), "--out", str(root / "multi"),
                     "--rollouts", "4", "--route-conditioning", "none"]) == 0
    assert cli.main(["mpc", "--data", str(data), "--ckpt", str(ckpt), "--out", str(root / "mpc"),
                     "--grid", "1,1,1;4,2,5", "--reward", "neg-inverse-norm"]) == 0
    assert cli.main(["render", "--data", str(data), "--ckpt", str(ckpt), "--out", str(root / "render"),
                     "--scenario-id", "1"]) == 0
    return sorted(p for p in root.rglob("*") if p.suffix in (".csv", ".jsonl", ".svg"))


def test_criterion_9_reproducibility(acceptance_report, tmp_path):
    first = _run_all(tmp_path / "a")
    second = _run_all(tmp_path / "b")
    rel = lambda files, base: [f.relative_to(base) for f in files]
    same_set = rel(first, tmp_path / "a") == rel(second, tmp_path / "b")
    diff = [str(a.relative_to(tmp_path / "a")) for a, b in zip(first, second) if a.read_bytes() != b.read_bytes()]
    _check(acceptance_report, 9, {
        "same report files": same_set,
        "byte-identical reports": same_set and not diff,
    }, f"{len(first)} report files compared" + (f", differing: {diff}" if diff else ", all identical"))
