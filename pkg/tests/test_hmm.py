import numpy as np
import pytest

from oracles import brute_likelihood, brute_viterbi_max, expm_taylor
from ntfhmm import fixtures
from ntfhmm.hmm import (DecodingError, Hmm, StructureError, build_rate_matrix,
                        estimate_emission, estimate_reference_hmm, log_likelihood,
                        log_likelihood_batch, path_log_probability, sample_observations,
                        stationary_distribution, transition_matrix, viterbi, viterbi_batch)
from ntfhmm.process_model import (Activity, ProcessModel, enumerate_states,
                                  simulate_ensemble)


def random_hmm(rng, n, k):
    return Hmm(pi=rng.dirichlet(np.ones(n)), T=rng.dirichlet(np.ones(n), size=n),
               E=rng.dirichlet(np.ones(k), size=n))


@pytest.fixture(scope="module")
def sequential():
    model = fixtures.sequential_model()
    tls = simulate_ensemble(model, 10_000, seed=0)
    return model, tls, enumerate_states(model, tls)


def test_sequential_rate_matrix(sequential):
    model, _, states = sequential
    a, b, c = 1 / 86, 1 / 91, 1 / 163
    expected = [[-a, a, 0], [0, -b, b], [c, 0, -c]]
    np.testing.assert_allclose(build_rate_matrix(model, states), expected, atol=1e-15)


def test_single_loop_has_no_exits():
    model = ProcessModel(activities=[Activity(1, "x", 0, 100, 10)], periodic=True,
                         duration_mode="exponential")
    states = enumerate_states(model, simulate_ensemble(model, 3, seed=0))
    np.testing.assert_array_equal(build_rate_matrix(model, states), [[0.0]])


def test_concurrent_overlap_row():
    model = fixtures.concurrent_model()
    states = enumerate_states(model, simulate_ensemble(model, 2000, seed=0))
    Q = build_rate_matrix(model, states)
    np.testing.assert_allclose(Q.sum(axis=1), 0, atol=1e-12)
    assert [sorted(s.members) for s in states][2] == [2, 3]
    row = Q[2]
    assert row[2] == pytest.approx(-1 / 163 - 1 / 100)
    # finishing the 163 h activity leaves the 100 h one running, and vice versa
    assert row[4] == pytest.approx(1 / 163)
    assert row[3] == pytest.approx(1 / 100)
    assert row[0] == row[1] == 0


def test_unknown_reachable_set_rejected():
    model = fixtures.concurrent_model()
    states = enumerate_states(model, simulate_ensemble(model, 2000, seed=0))
    # drop the overlap state {a3, a4}
    kept = [s for s in states if len(s.members) == 1]
    with pytest.raises(StructureError):
        build_rate_matrix(model, kept)


def test_sequential_t20_close_to_table(sequential):
    model, _, states = sequential
    T = transition_matrix(build_rate_matrix(model, states), 20)
    # the printed table is rounded to three decimals
    assert np.abs(T - fixtures.SEQUENTIAL_T20).max() < 1e-3


def test_zero_generator_gives_identity():
    for n in (1, 3, 5):
        np.testing.assert_array_equal(transition_matrix(np.zeros((n, n)), 7.5), np.eye(n))


def test_against_taylor_oracle():
    Q = np.array([[-1.0, 1.0], [0.0, 0.0]])
    P = transition_matrix(Q, np.log(2))
    np.testing.assert_allclose(P, expm_taylor(Q, np.log(2)), atol=1e-14)
    np.testing.assert_allclose(P, [[0.5, 0.5], [0, 1]], atol=1e-14)


def random_generator(rng, n):
    Q = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
    np.fill_diagonal(Q, 0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def test_stochastic_and_semigroup():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = rng.integers(1, 7)
        Q = random_generator(rng, n) * rng.uniform(0.01, 3)
        s, t = rng.uniform(0, 5, 2)
        P = transition_matrix(Q, s + t)
        np.testing.assert_allclose(P.sum(axis=1), 1, atol=1e-9)
        assert P.min() >= 0
        assert np.linalg.norm(P - transition_matrix(Q, s) @ transition_matrix(Q, t)) < 1e-8
        small = 0.5 / max(np.abs(Q).max(), 1e-12)
        np.testing.assert_allclose(transition_matrix(Q, small), expm_taylor(Q, small), atol=1e-13)


def test_transition_matrix_errors():
    with pytest.raises(ValueError):
        transition_matrix(np.array([[np.nan]]), 1.0)
    with pytest.raises(ValueError):
        transition_matrix(np.zeros((2, 2)), -1.0)


def test_reference_hmm(sequential):
    model, tls, states = sequential
    ref = estimate_reference_hmm(model, states, tls, 20.0, emission=fixtures.SEQUENTIAL_EMISSION)
    np.testing.assert_array_equal(ref.pi, [1, 0, 0])
    np.testing.assert_array_equal(ref.E, fixtures.SEQUENTIAL_EMISSION)
    beta = np.array([tl.end - tl.start for tl in tls]).mean(axis=0)
    assert np.all(np.abs(beta / np.array(fixtures.SEQUENTIAL_MEANS) - 1) < 0.02)
    assert ref.dt == 20.0


def test_reference_hmm_unseen_state_warns():
    model = fixtures.sequential_model()
    tls = simulate_ensemble(model, 50, seed=0)
    states = enumerate_states(model, tls)
    from ntfhmm.process_model import SuperActivity
    extra = states + [SuperActivity(id=3, members=frozenset({0, 1}))]
    E = np.vstack([fixtures.SEQUENTIAL_EMISSION, [[0.25] * 4]])
    with pytest.warns(RuntimeWarning, match="never observed"):
        ref = estimate_reference_hmm(model, extra, tls, 20.0, emission=E)
    assert ref.pi[3] == 0


def test_estimate_emission():
    E = estimate_emission([np.array([0, 0, 1, 1])], [np.array([1, 1, 0, 1])], 3, 2)
    np.testing.assert_allclose(E, [[0, 1], [0.5, 0.5], [0.5, 0.5]])


def test_hmm_validation():
    with pytest.raises(ValueError):
        Hmm(pi=[0.5, 0.4], T=np.eye(2), E=np.eye(2))
    with pytest.raises(ValueError):
        Hmm(pi=[1.0], T=np.eye(2), E=np.eye(2))
    h = Hmm(pi=[1, 0], T=np.eye(2), E=np.eye(2))
    with pytest.raises(ValueError):
        h.T[0, 0] = 0.5
    back = Hmm.from_dict(h.to_dict())
    np.testing.assert_array_equal(back.T, h.T)


def test_identity_emission_copies_states():
    rng = np.random.default_rng(1)
    h = Hmm(pi=[0.2, 0.5, 0.3], T=rng.dirichlet(np.ones(3), size=3), E=np.eye(3))
    s, o = sample_observations(h, 500, seed=2)
    np.testing.assert_array_equal(s, o)
    np.testing.assert_array_equal(viterbi(h, o), o)


def test_absorbing_chain():
    h = Hmm(pi=[1, 0, 0], T=np.eye(3), E=np.full((3, 2), 0.5))
    s, _ = sample_observations(h, 300, seed=0)
    assert np.all(s == 0)


def test_sampling_reproducible():
    h = random_hmm(np.random.default_rng(3), 3, 4)
    a = sample_observations(h, 1000, seed=7)
    b = sample_observations(h, 1000, seed=7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_occupancy_matches_stationary():
    T = fixtures.SEQUENTIAL_T20 / fixtures.SEQUENTIAL_T20.sum(axis=1, keepdims=True)
    h = Hmm(pi=[1, 0, 0], T=T, E=fixtures.SEQUENTIAL_EMISSION)
    s, _ = sample_observations(h, 10**6, seed=0)
    occ = np.bincount(s, minlength=3) / s.size
    # power-iteration fixed point, checked independently by an eigenvector
    w, v = np.linalg.eig(T.T)
    stat = np.real(v[:, np.argmin(np.abs(w - 1))])
    stat /= stat.sum()
    np.testing.assert_allclose(stationary_distribution(T), stat, atol=1e-12)
    np.testing.assert_allclose(occ, stat, atol=0.01)


def test_viterbi_single_step():
    h = Hmm(pi=[0.2, 0.8], T=np.eye(2), E=[[0.9, 0.1], [0.3, 0.7]])
    # pi * E[:, 0] = (0.18, 0.24)
    assert viterbi(h, [0]).tolist() == [1]
    assert log_likelihood(h, [0]) == pytest.approx(np.log(0.18 + 0.24), abs=1e-15)


def test_viterbi_ties_go_low():
    h = Hmm(pi=[0.5, 0.5], T=np.full((2, 2), 0.5), E=np.full((2, 2), 0.5))
    assert viterbi(h, [0, 1, 1, 0]).tolist() == [0, 0, 0, 0]


def test_small_instances_match_enumeration():
    rng = np.random.default_rng(42)
    for _ in range(60):
        n, k = rng.integers(1, 4), rng.integers(1, 4)
        h = random_hmm(rng, n, k)
        obs = rng.integers(0, k, rng.integers(1, 7))
        lp = log_likelihood(h, obs)
        assert lp == pytest.approx(np.log(brute_likelihood(h.pi, h.T, h.E, obs)), abs=1e-10)
        best = path_log_probability(h, viterbi(h, obs), obs)
        assert best == pytest.approx(np.log(brute_viterbi_max(h.pi, h.T, h.E, obs)), abs=1e-10)


def test_deterministic_model_likelihood_zero():
    h = Hmm(pi=[1.0], T=[[1.0]], E=[[1.0]])
    assert log_likelihood(h, np.zeros(1000, dtype=int)) == 0.0


def test_impossible_sequence():
    h = Hmm(pi=[1, 0], T=np.eye(2), E=[[1, 0, 0], [0, 1, 0]])
    assert log_likelihood(h, [0, 1]) == -np.inf
    with pytest.raises(DecodingError) as exc:
        viterbi(h, [0, 0, 2])
    assert exc.value.step == 2
    with pytest.raises(ValueError):
        viterbi(h, [0, 3])


def test_batch_matches_single():
    rng = np.random.default_rng(8)
    h = random_hmm(rng, 3, 4)
    obs = rng.integers(0, 4, (5, 40))
    ll = log_likelihood_batch(h, obs)
    paths = viterbi_batch(h, obs)
    for i in range(5):
        assert ll[i] == pytest.approx(log_likelihood(h, obs[i]), abs=1e-12)
        np.testing.assert_array_equal(paths[i], viterbi(h, obs[i]))


def test_long_sequence_no_underflow():
    h = random_hmm(np.random.default_rng(9), 3, 3)
    _, o = sample_observations(h, 50_000, seed=1)
    assert np.isfinite(log_likelihood(h, o))
