"""Trainer behaviour measured by actually running it (slow)."""
import numpy as np
import pytest

from awm import losses, nn, scenario, train
from awm.dynamics import SimConfig
from awm.rollout import rollout_seed, run_policy

pytestmark = pytest.mark.slow


def _straight_run(updates, lr):
    scene = scenario.SceneBatch.from_scenarios([scenario.generate_scenario("straight", 0)])
    params = nn.init_params(nn.NetConfig(), 0)
    cfg = train.TrainConfig(lr=lr)
    opt, rng = train.Adam(lr), np.random.default_rng(0)
    return [train.apg_update(params, opt, scene, SimConfig(), cfg, rng) for _ in range(updates)]


def test_apg_loss_decreases_monotonically_over_first_updates():
    loss = _straight_run(50, 1e-3)
    rises = [i for i in range(1, 50) if loss[i] >= loss[i - 1]]
    assert not rises, f"loss rose at updates {rises[:10]}: {np.round(loss[:12], 2)}"


def test_single_scenario_reaches_one_percent_of_initial_loss():
    loss = _straight_run(500, 1e-3)
    assert min(loss) < 0.01 * loss[0], f"best ratio {min(loss) / loss[0]:.4f}"


def test_forward_and_inverse_odometry_heads_agree(apg_model, main_train, main_heldout):
    params = apg_model[0]
    scene = scenario.SceneBatch.from_scenarios(main_heldout[:16])
    out = run_policy(params, scene, SimConfig(), [rollout_seed(7, i, 0) for i in range(scene.size)])
    tr = losses.Transitions.from_record(losses.RolloutRecord(out["states"], out["actions"], scene.expert_states,
                                                             out["hidden"], out["features"]))
    pred = {}
    for mode in ("diffsim", "inverse"):
        cfg = train.TrainConfig(lr=1e-3, apg_epochs=0, awm_epochs=200, seed=0, odometry_mode=mode,
                                weights={"policy": 0.0, "odo": 1.0, "plan": 0.0, "inv": 0.0})
        p = train.train(main_train, cfg, params=params).params
        pred[mode] = tr.s + nn.odometry_forward(p, tr.hidden, tr.features, tr.s, tr.a).value
    gap = np.hypot(*(pred["diffsim"][:, :2] - pred["inverse"][:, :2]).T)
    assert gap.max() < 0.05, f"max next-position gap {gap.max():.4f} m"
