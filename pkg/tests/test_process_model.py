import json

import numpy as np
import pytest

from ntfhmm import fixtures
from ntfhmm.process_model import (Activity, ModelValidationError, ProcessModel, RunTimeline,
                                  beta_shapes, enumerate_states, mean_durations,
                                  sample_state_sequence, sample_state_sequences,
                                  simulate_ensemble)


def act(i, avg=10.0, lo=0.0, hi=None, resources=()):
    return Activity(id=i, name=f"a{i}", d_min=lo, d_max=hi if hi is not None else 10 * avg,
                    d_avg=avg, resources=frozenset(resources))


def chain(n, **kw):
    return ProcessModel(activities=[act(i + 1) for i in range(n)],
                        edges={(i + 1, i + 2) for i in range(n - 1)}, **kw)


def test_exponential_mean():
    model = ProcessModel(activities=[act(1, avg=10.0)], duration_mode="exponential")
    tls = simulate_ensemble(model, 10_000, seed=0)
    assert len(tls) == 10_000
    assert 9.8 <= mean_durations(tls)[0] <= 10.2


def test_precedence_in_chain():
    for tl in simulate_ensemble(chain(4), 500, seed=1):
        assert np.all(tl.start[1:] >= tl.end[:-1])
        assert np.all(tl.start < tl.end)


def test_parallel_children_overlap():
    tls = simulate_ensemble(fixtures.concurrent_model(), 2000, seed=2)
    overlap = [max(tl.start[2], tl.start[3]) < min(tl.end[2], tl.end[3]) for tl in tls]
    assert np.mean(overlap) > 0.99


def test_beta_durations_within_bounds():
    model = ProcessModel(activities=[act(1, avg=3.0, lo=1.0, hi=9.0)], duration_mode="beta")
    d = np.array([tl.end[0] - tl.start[0] for tl in simulate_ensemble(model, 20_000, seed=3)])
    assert d.min() >= 1.0 and d.max() <= 9.0
    # mean of (d_min + (d_max - d_min) * Beta(p, q)) is d_avg by construction
    p, q = beta_shapes(model.activities[0])
    assert 1.0 + 8.0 * p / (p + q) == pytest.approx(3.0)
    assert abs(d.mean() - 3.0) < 3 * d.std() / np.sqrt(d.size)


def test_reproducible():
    a = simulate_ensemble(fixtures.concurrent_model(), 50, seed=9)
    b = simulate_ensemble(fixtures.concurrent_model(), 50, seed=9)
    for x, y in zip(a, b):
        assert x.start.tobytes() == y.start.tobytes() and x.end.tobytes() == y.end.tobytes()


def test_validation_errors():
    with pytest.raises(ModelValidationError):
        ProcessModel(activities=[act(1), act(2)], edges={(1, 2), (2, 1)})
    with pytest.raises(ModelValidationError):
        ProcessModel(activities=[act(1)], edges={(1, 5)})
    with pytest.raises(ModelValidationError):
        Activity(id=1, name="x", d_min=5, d_max=10, d_avg=4)
    with pytest.raises(ModelValidationError):
        Activity(id=1, name="x", d_min=0, d_max=0, d_avg=0)
    with pytest.raises(ValueError):
        simulate_ensemble(chain(2), 0)


def test_resource_constraint_serializes_siblings():
    acts = [act(1), act(2, resources={"clerk"}), act(3, resources={"clerk"})]
    model = ProcessModel(activities=acts, edges={(1, 2), (1, 3)}, resource_constrained=True)
    for tl in simulate_ensemble(model, 200, seed=4):
        # tie at the parent's end goes to the lower id
        assert tl.start[1] == tl.end[0]
        assert tl.start[2] == tl.end[1]


def test_state_counts():
    seq = enumerate_states(fixtures.sequential_model(),
                           simulate_ensemble(fixtures.sequential_model(), 200, seed=0))
    assert [sorted(s.members) for s in seq] == [[0], [1], [2]]
    conc = enumerate_states(fixtures.concurrent_model(),
                            simulate_ensemble(fixtures.concurrent_model(), 2000, seed=0))
    assert [sorted(s.members) for s in conc] == [[0], [1], [2, 3], [2], [3]]
    serial = chain(6)
    assert len(enumerate_states(serial, simulate_ensemble(serial, 20, seed=0))) == 6
    assert [s.id for s in conc] == list(range(5))


def test_resource_union():
    acts = [act(1, resources={1}), act(2, resources={2}), act(3, resources={3})]
    model = ProcessModel(activities=acts, edges={(1, 2), (1, 3)})
    states = enumerate_states(model, simulate_ensemble(model, 100, seed=0))
    pair = next(s for s in states if s.members == frozenset({1, 2}))
    assert pair.resource_union == frozenset({2, 3})


def test_sampling_direct_lookup():
    model = chain(2)
    tl = RunTimeline(run_id=0, start=[0.0, 50.0], end=[50.0, 90.0])
    states = enumerate_states(model, [tl])
    seq = sample_state_sequence(model, tl, 20.0, states)
    assert seq.tolist() == [0, 0, 0, 1, 1]


def test_sampling_half_open_boundary():
    model = chain(2)
    tl = RunTimeline(run_id=0, start=[0.0, 40.0], end=[40.0, 90.0])
    seq = sample_state_sequence(model, tl, 20.0, enumerate_states(model, [tl]))
    # t = 40 falls in the second activity
    assert seq.tolist() == [0, 0, 1, 1, 1]


def test_interval_beyond_makespan():
    model = chain(2)
    tl = RunTimeline(run_id=0, start=[0.0, 5.0], end=[5.0, 9.0])
    seq = sample_state_sequence(model, tl, 100.0, enumerate_states(model, [tl]))
    assert seq.tolist() == [0]


def test_concurrent_sampling_has_overlap_state():
    model = fixtures.concurrent_model()
    tls = simulate_ensemble(model, 2000, seed=5)
    states = enumerate_states(model, tls)
    seq = sample_state_sequence(model, tls, 20.0, states)
    assert np.mean(seq == 2) > 0


def test_periodic_stream_wraps():
    model = chain(2, periodic=True)
    tls = [RunTimeline(0, [0.0, 10.0], [10.0, 30.0]), RunTimeline(1, [0.0, 25.0], [25.0, 35.0])]
    seq = sample_state_sequence(model, tls, 10.0, enumerate_states(model, tls))
    # second cycle begins at t = 30
    assert seq.tolist() == [0, 1, 1, 0, 0, 0, 1]


def test_non_periodic_gap_terminates():
    acts = [act(1), act(2)]
    model = ProcessModel(activities=acts, edges={(1, 2)})
    tl = RunTimeline(0, [0.0, 30.0], [10.0, 40.0])  # idle between 10 and 30
    states = enumerate_states(model, [tl])
    assert sample_state_sequences(model, [tl], 5.0, states)[0].tolist() == [0, 0]
    with pytest.raises(ValueError):
        sample_state_sequences(model, [tl], 0.0, states)


def test_json_round_trip(tmp_path):
    model = fixtures.concurrent_model()
    path = tmp_path / "m.json"
    path.write_text(json.dumps(model.to_dict()))
    back = ProcessModel.load(path)
    assert back.edges == model.edges
    assert back.duration_mode == "exponential" and back.periodic
    assert [a.d_avg for a in back.activities] == [86.0, 91.0, 163.0, 100.0]
    np.testing.assert_array_equal(back.emission, model.emission)
