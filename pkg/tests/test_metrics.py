import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from awm import metrics
from awm.scenario import Roadgraph, generate_scenario


def test_ade_example():
    r = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    e = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    assert metrics.ade(r, e) == pytest.approx(1.0)


def test_ade_uses_only_position():
    r = np.zeros((4, 5))
    e = np.zeros((4, 5))
    e[:, 2:] = 7.0
    assert metrics.ade(r, e) == 0.0


def test_ade_shape_mismatch():
    with pytest.raises(metrics.MetricError):
        metrics.ade(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(metrics.MetricError):
        metrics.ade_batch(np.zeros((2, 3, 2)), np.zeros((2, 4, 2)))


def test_min_ade_picks_lowest_index_on_ties():
    e = np.zeros((3, 2))
    a, b = np.ones((3, 2)), -np.ones((3, 2))
    err, i = metrics.min_ade([a, b, np.zeros((3, 2))], e)
    assert err == 0.0 and i == 2
    assert metrics.min_ade([a, b], e)[1] == 0
    with pytest.raises(metrics.MetricError):
        metrics.min_ade([], e)


traj = arrays(np.float64, (6, 2), elements=st.floats(-50, 50))


@settings(max_examples=100, deadline=None)
@given(a=traj, b=traj, c=traj)
def test_ade_metric_properties(a, b, c):
    assert metrics.ade(a, a) == 0.0
    assert metrics.ade(a, b) == pytest.approx(metrics.ade(b, a))
    assert metrics.ade(a, c) <= metrics.ade(a, b) + metrics.ade(b, c) + 1e-9
    assert metrics.min_ade([a, b], c)[0] <= min(metrics.ade(a, c), metrics.ade(b, c))


@settings(max_examples=50, deadline=None)
@given(rolls=st.lists(traj, min_size=1, max_size=6), e=traj)
def test_min_ade_non_increasing_in_rollouts(rolls, e):
    vals = [metrics.min_ade(rolls[:k], e)[0] for k in range(1, len(rolls) + 1)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_overlap_flag():
    ego = np.array([[0.0, 0.0], [1.0, 0.0]])
    others = np.array([[[5.0, 0.0]], [[2.5, 0.0]]])  # (T, A, 2)
    assert metrics.overlap_flag(ego, others, np.array([1.0]))  # 1.5 < 2
    assert not metrics.overlap_flag(ego, others + [0.6, 0.0], np.array([1.0]))
    assert not metrics.overlap_flag(ego, others, np.array([1.0]), valid=np.array([False]))
    assert not metrics.overlap_flag(ego, np.zeros((2, 0, 2)), np.zeros(0))


def test_offroad_flag():
    rg = Roadgraph([np.array([[0.0, 0.0], [10.0, 0.0]])], half_width=3.0)
    assert not metrics.offroad_flag(np.array([[1.0, 2.9], [5.0, -2.0]]), rg)
    assert metrics.offroad_flag(np.array([[1.0, 3.1]]), rg)


def test_evaluate_rollouts_reports_flags_of_best_rollout():
    sc = generate_scenario("straight", 0)
    good = sc.expert.states
    bad = sc.expert.states.copy()
    bad[:, 1] += 50.0
    ev = metrics.evaluate_rollouts([bad, good], sc)
    assert ev.index == 1 and ev.ade == 0.0 and not ev.offroad
    assert metrics.evaluate_trajectory(bad, sc).offroad


def test_rates():
    evs = [metrics.TrajectoryEval(1.0, True, False), metrics.TrajectoryEval(3.0, False, False)]
    assert metrics.rates(evs) == {"ade": 2.0, "overlap": 0.5, "offroad": 0.0}
    assert np.isnan(metrics.rates([])["ade"])
