import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from awm import autodiff as ad
from awm import nn
from awm.dynamics import is_consistent, make_state
from awm.scenario import SceneBatch, generate_scenario

CFG = nn.NetConfig()


def test_init_shapes_match_expected():
    p = nn.init_params(CFG, 0)
    assert {k: v.shape for k, v in p.items()} == nn.expected_shapes(CFG)
    assert 20_000 < p.size < 100_000


def test_init_is_seeded():
    a, b, c = nn.init_params(CFG, 3), nn.init_params(CFG, 3), nn.init_params(CFG, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["enc.W1"], c["enc.W1"])


def test_initial_mixture_is_fanned_over_curvature():
    p = nn.init_params(CFG, 0)
    mix = nn.policy_forward(p, np.zeros((1, CFG.hidden)), CFG)
    means = mix.means.value[0]
    assert len(np.unique(means, axis=0)) == CFG.mixture
    assert len(np.unique(means[:, 1])) >= 5
    np.testing.assert_allclose(mix.logits.value, 0.0)


def test_copy_is_deep_and_head_selects_prefix():
    p = nn.init_params(CFG, 0)
    q = p.copy()
    q["enc.b1"][0] = 5.0
    assert p["enc.b1"][0] == 0.0
    assert set(p.head("odo")) == {"odo.W1", "odo.b1", "odo.W2", "odo.b2"}


def test_checkpoint_round_trip(tmp_path):
    p = nn.init_params(CFG, 1)
    path = tmp_path / "m.awmc"
    nn.save_checkpoint(p, path)
    q = nn.load_checkpoint(path, expect=CFG)
    assert q.config == CFG
    assert all(np.array_equal(p[k], q[k]) for k in p)
    nn.save_checkpoint(q, tmp_path / "again.awmc")
    assert path.read_bytes() == (tmp_path / "again.awmc").read_bytes()


def test_checkpoint_errors(tmp_path):
    p = nn.init_params(CFG, 1)
    good = tmp_path / "m.awmc"
    nn.save_checkpoint(p, good)
    raw = good.read_bytes()

    bad = tmp_path / "bad.awmc"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(nn.BadMagicError):
        nn.load_checkpoint(bad)
    bad.write_bytes(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(nn.VersionMismatchError):
        nn.load_checkpoint(bad)
    bad.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(nn.TruncatedCheckpointError):
        nn.load_checkpoint(bad)
    with pytest.raises(nn.ShapeMismatchError):
        nn.load_checkpoint(good, expect=nn.NetConfig(hidden=32))


def test_bind_makes_only_selected_tensors_leaves():
    tape = ad.Tape()
    b = nn.bind(nn.init_params(CFG, 0), tape, ("odo",))
    assert isinstance(b["odo.W1"], ad.Var) and not isinstance(b["enc.W1"], ad.Var)
    assert set(tape.leaves) == {"odo.W1", "odo.b1", "odo.W2", "odo.b2"}


# --- encoder ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def scene():
    return SceneBatch.from_scenarios([generate_scenario("arc", 1), generate_scenario("s-curve", 2)])


def test_encode_shape_and_masks(scene):
    f = nn.encode(scene, scene.expert_states[:, 0], 0, CFG)
    assert f.values.shape == (2, CFG.feature_dim)
    assert f.road_mask.shape == (2, CFG.road_points) and f.road_mask.all()
    assert np.all(np.isfinite(f.values.value))


def test_encode_speed_feature_and_route_modes(scene):
    s = scene.expert_states[:, 10]
    f = nn.encode(scene, s, 10, CFG, "heading").values.value
    np.testing.assert_allclose(f[:, 0], np.hypot(s[:, 2], s[:, 3]), atol=1e-12)
    none = nn.encode(scene, s, 10, CFG, "none").values.value
    np.testing.assert_array_equal(none[:, 1], 0.0)
    np.testing.assert_array_equal(none[:, 2:], f[:, 2:])
    with pytest.raises(ValueError):
        nn.encode(scene, s, 10, CFG, "compass")


@settings(max_examples=30, deadline=None)
@given(dx=st.floats(-20, 20), dy=st.floats(-20, 20), rot=st.floats(-np.pi, np.pi))
def test_encode_is_invariant_to_rigid_motion(dx, dy, rot):
    """Moving the whole scene and the ego together leaves the ego-frame features unchanged."""
    sc = generate_scenario("arc", 4)
    base = SceneBatch.from_scenarios([sc])
    c, s = np.cos(rot), np.sin(rot)
    R = np.array([[c, -s], [s, c]])
    moved = SceneBatch.from_scenarios([sc])
    moved.road_pts = base.road_pts @ R.T + [dx, dy]
    moved.others_pos = base.others_pos @ R.T + [dx, dy]
    moved.others_vel = base.others_vel @ R.T
    moved.goal = base.goal.copy()
    moved.goal[:, :2] = base.goal[:, :2] @ R.T + [dx, dy]
    moved.goal[:, 2] = base.goal[:, 2] + rot
    st0 = base.expert_states[:, 5].copy()
    st1 = st0.copy()
    st1[:, :2] = st0[:, :2] @ R.T + [dx, dy]
    st1[:, 2:4] = st0[:, 2:4] @ R.T
    st1[:, 4] = st0[:, 4] + rot
    f0 = nn.encode(base, st0, 5, CFG).values.value
    f1 = nn.encode(moved, st1, 5, CFG).values.value
    np.testing.assert_allclose(f1, f0, atol=1e-8)


# --- heads -------------------------------------------------------------------------


def test_consistent_delta_keeps_states_consistent():
    rng = np.random.default_rng(0)
    s = np.stack([make_state(0, 0, v, y) for v, y in zip(rng.uniform(0, 10, 50), rng.uniform(-3, 3, 50))])
    d = nn.consistent_delta(rng.standard_normal((50, 4)), s).value
    assert is_consistent(s + d).all()


def test_consistent_delta_zero_raw_is_zero():
    s = make_state(1, 2, 5.0, 0.7)[None]
    np.testing.assert_allclose(nn.consistent_delta(np.zeros((1, 4)), s).value, 0.0, atol=1e-15)


def test_consistent_delta_ego_frame_example():
    # heading north, 1 m forward and +1 m/s: global delta (0, 1), vy grows by 1
    s = make_state(0, 0, 2.0, np.pi / 2)[None]
    d = nn.consistent_delta(np.array([[1.0, 0.0, 1.0, 0.0]]), s).value[0]
    np.testing.assert_allclose(d, [0, 1, 0, 1, 0], atol=1e-12)


def test_head_output_shapes():
    p = nn.init_params(CFG, 0)
    B = 3
    h, xs = np.zeros((B, CFG.hidden)), np.zeros((B, CFG.feature_dim))
    s, a = np.tile(make_state(speed=3.0), (B, 1)), np.zeros((B, 2))
    assert nn.odometry_forward(p, h, xs, s, a).shape == (B, 5)
    assert nn.inverse_forward(p, h, xs, s, a).shape == (B, 5)
    assert nn.planner_forward(p, h, xs, s).shape == (B, 5)
    mix = nn.policy_forward(p, h, CFG)
    assert mix.means.shape == (B, CFG.mixture, 2) and mix.logits.shape == (B, CFG.mixture)
    assert (mix.std > 0).all()


def test_agent_step_advances_hidden(scene):
    p = nn.init_params(CFG, 0)
    agent = nn.AgentStep(p, scene, CFG, "heading")
    h, xs = agent(ad.Var(scene.expert_states[:, 0]), 0, nn.zero_hidden(2, CFG))
    assert h.shape == (2, CFG.hidden) and xs.shape == (2, CFG.feature_dim)
    assert np.abs(h.value).max() > 0
