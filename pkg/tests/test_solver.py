import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from velopref.experts import ExpertConfig, generate_experts
from velopref.reward import RewardModel, init_model
from velopref.solver import (SVF, ConvergenceError, MaxEntIRL, SoftSolution, TrainConfig,
                             expected_svf, expert_svf, log_likelihood, maxent_gradient,
                             soft_value_iteration, solve_goals, state_distributions, train)
from velopref.trajectories import Trajectory, pad_and_mask, to_trajectory
from velopref.world import Action, SynthConfig, generate_synthetic_world

from conftest import make_world, random_small_world, sample_trips
from oracles import (enumerate_paths_upto, finite_difference_gradient, maxent_path_probabilities,
                     path_total_variation, rollout_visit_enumeration)


def _logsumexp(q):
    m = q.max(axis=-1)
    return m + np.log(np.exp(q - m[:, None]).sum(axis=-1))


# ---------------------------------------------------------------------------
# soft value iteration

def test_single_move_state_is_certain():
    w = make_world(1, 2)
    sol = soft_value_iteration(w, np.array([-40.0, 0.0]), goal=1, gamma=1.0)
    assert sol.policy[0, Action.R] == 1.0
    t = to_trajectory([(0, 0), (0, 1)], w)
    assert log_likelihood([t], [sol]) == 0.0


def _square_symmetries():
    maps = []
    for flip in (False, True):
        for rot in range(4):
            def f(r, c, n, flip=flip, rot=rot):
                if flip:
                    c = n - 1 - c
                for _ in range(rot):
                    r, c = c, n - 1 - r
                return r, c
            maps.append(f)
    return maps


def test_open_3x3_center_goal_symmetry(open3):
    sol = soft_value_iteration(open3, np.full(9, -1.0), goal=open3.state_of(1, 1), gamma=0.99)
    offsets = {a: (dr, dc) for a, (dr, dc) in enumerate(
        [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (0, 0)])}
    inverse = {v: k for k, v in offsets.items()}
    for f in _square_symmetries():
        for s in range(9):
            r, c = open3.cell_of(s)
            r2, c2 = f(r, c, 3)
            for a in range(9):
                dr, dc = offsets[a]
                tr, tc = f(r + dr, c + dc, 3)
                a2 = inverse[(tr - r2, tc - c2)]
                assert sol.policy[s, a] == pytest.approx(sol.policy[open3.state_of(r2, c2), a2], abs=1e-12)
    corner = open3.state_of(0, 0)
    assert sol.policy[corner, Action.R] == pytest.approx(sol.policy[corner, Action.B], abs=1e-15)


def test_chain_matches_enumeration_up_to_length_8():
    w = make_world(1, 4)
    r = np.array([-5.0, -6.0, -5.5, -7.0])
    sol = soft_value_iteration(w, r, goal=3, gamma=1.0, tol=1e-12)
    paths = enumerate_paths_upto(w, r, 0, 3, max_len=8)
    assert path_total_variation(sol.policy, paths) < 1e-6
    probs = maxent_path_probabilities(paths)
    for (acts, states, _), p in list(zip(paths, probs))[:20]:
        t = Trajectory(list(states), list(acts))
        assert np.exp(log_likelihood([t], [sol])) == pytest.approx(p, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), gamma=st.floats(0.5, 0.999))
def test_fixed_point_properties(seed, gamma):
    rng = np.random.default_rng(seed)
    w = random_small_world(rng, max_states=12, max_rows=4)
    r = rng.uniform(-2, 1, w.n_states)
    goal = int(rng.integers(w.n_states))
    sol = soft_value_iteration(w, r, goal, gamma=gamma, tol=1e-10)
    np.testing.assert_allclose(sol.policy.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(sol.policy[~w.valid] == 0)
    assert sol.V[goal] == 0.0 and sol.policy[goal, Action.ST] == 1.0
    np.testing.assert_allclose(_logsumexp(sol.Q), sol.V, atol=1e-12)
    nxt = np.where(w.valid, w.next_state, 0)
    q = np.where(w.valid, r[:, None] + gamma * sol.V[nxt], -np.inf)
    keep = np.arange(w.n_states) != goal
    np.testing.assert_allclose(sol.Q[keep][w.valid[keep]], q[keep][w.valid[keep]], atol=1e-8)
    assert sol.residual < 1e-10


def test_newton_and_plain_iteration_agree():
    rng = np.random.default_rng(3)
    w = random_small_world(rng, max_states=12, max_rows=4)
    r = rng.uniform(-3, 0, w.n_states)
    a = soft_value_iteration(w, r, 0, gamma=0.95, tol=1e-12, method="vi")
    b = soft_value_iteration(w, r, 0, gamma=0.95, tol=1e-12, method="newton")
    np.testing.assert_allclose(a.V, b.V, atol=1e-10)
    assert b.iterations < a.iterations


def test_batched_goals_match_single_solves():
    w = make_world(4, 4, blocked=[(1, 2)])
    r = np.random.default_rng(0).uniform(-2, -0.5, w.n_states)
    many = solve_goals(w, r, [0, 5, 9], gamma=0.99, chunk=2)
    for sol in many:
        single = soft_value_iteration(w, r, sol.goal, gamma=0.99, method="newton")
        np.testing.assert_allclose(sol.V, single.V, atol=1e-9)


def test_non_convergence_reports_residual():
    w = make_world(3, 3)
    with pytest.raises(ConvergenceError) as err:
        soft_value_iteration(w, np.full(9, -1.0), 4, gamma=0.99, max_iter=2)
    assert err.value.residual > 0
    with pytest.raises(ConvergenceError):
        soft_value_iteration(w, np.full(9, 1.0), 4, gamma=1.0, max_iter=500)


def test_invalid_inputs():
    w = make_world(2, 2)
    with pytest.raises(ValueError):
        soft_value_iteration(w, np.array([0.0, np.nan, 0.0, 0.0]), 0)
    with pytest.raises(ValueError):
        soft_value_iteration(w, np.zeros(4), 7)


# ---------------------------------------------------------------------------
# visitation frequencies

def _deterministic_chain_solution(w):
    policy = np.zeros((4, 9))
    policy[:3, Action.R] = 1.0
    policy[3, Action.ST] = 1.0
    return SoftSolution(3, np.zeros(4), np.zeros((4, 9)), policy, 1.0, 0.0, 0)


def test_deterministic_chain_svf():
    w = make_world(1, 4)
    svf = expected_svf(w, _deterministic_chain_solution(w), np.eye(4)[0], horizon=5)
    np.testing.assert_array_equal(svf.visits, [1, 1, 1, 3])


def test_two_by_two_matches_rollout_enumeration():
    w = make_world(2, 2)
    r = np.array([-0.3, -1.1, -0.7, -0.2])
    sol = soft_value_iteration(w, r, goal=3, gamma=0.9)
    svf = expected_svf(w, sol, np.eye(4)[0], horizon=3)
    want = rollout_visit_enumeration(w, sol.policy, 0, 3, goal=3)
    np.testing.assert_allclose(svf.visits, want, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), horizon=st.integers(1, 40))
def test_mass_conservation(seed, horizon):
    rng = np.random.default_rng(seed)
    w = random_small_world(rng, max_states=12, max_rows=4)
    sol = soft_value_iteration(w, rng.uniform(-2, 0, w.n_states), 0, gamma=0.99)
    origin = rng.dirichlet(np.ones(w.n_states))
    D = state_distributions(w, sol, origin, horizon)
    np.testing.assert_allclose(D.sum(axis=1), 1.0, atol=1e-12)
    svf = expected_svf(w, sol, origin, horizon)
    assert np.all(svf.visits >= 0)
    assert svf.visits.sum() == pytest.approx(horizon + 1)


def test_expected_svf_validation():
    w = make_world(1, 4)
    sol = _deterministic_chain_solution(w)
    with pytest.raises(ValueError):
        expected_svf(w, sol, np.full(4, 0.5), 3)
    with pytest.raises(ValueError):
        expected_svf(w, sol, np.eye(4)[0], 0)


def test_expert_svf_counts():
    w = make_world(1, 4)
    t = to_trajectory([(0, 0), (0, 1), (0, 0), (0, 1), (0, 2), (0, 3)], w)
    svf = expert_svf(pad_and_mask([t], w), w)
    np.testing.assert_array_equal(svf.visits, [2, 2, 1, 0])
    twice = expert_svf(pad_and_mask([t, t], w), w)
    np.testing.assert_array_equal(twice.visits, svf.visits)
    short = to_trajectory([(0, 2), (0, 3)], w)
    mixed = expert_svf(pad_and_mask([t, short], w), w)
    np.testing.assert_array_equal(mixed.visits, [1, 1, 1, 0])


def test_padding_is_neutral_for_likelihood():
    w = make_world(2, 4)
    r = np.random.default_rng(1).uniform(-2, -1, w.n_states)
    sols = solve_goals(w, r, [7], gamma=0.99)
    a = to_trajectory([(0, 0), (0, 1), (1, 2), (1, 3)], w)
    b = to_trajectory([(1, 2), (1, 3)], w)
    alone = log_likelihood(pad_and_mask([b], w), sols)
    both = log_likelihood(pad_and_mask([a, b], w), sols)
    assert both == pytest.approx(alone + log_likelihood([a], sols), abs=1e-12)
    assert alone == pytest.approx(log_likelihood([b], sols), abs=1e-12)


def test_log_likelihood_zero_probability_warns():
    w = make_world(1, 3)
    sol = soft_value_iteration(w, np.full(3, -1.0), goal=1, gamma=0.99)
    bad = Trajectory([1, 2, 1], [Action.R, Action.L])   # leaves the absorbing goal
    good = to_trajectory([(0, 0), (0, 1)], w)
    with pytest.warns(UserWarning):
        assert log_likelihood([bad, good], [sol]) == log_likelihood([good], [sol])


# ---------------------------------------------------------------------------
# gradient

def test_matched_frequencies_give_zero_gradient():
    w = make_world(2, 3, d=3)
    m = init_model(0, 3, 4, 2)
    mu = SVF(np.random.default_rng(0).uniform(size=w.n_states), 5)
    assert np.all(maxent_gradient(mu, mu, m, w, lam=0.0).theta == 0)


def _objective_check(world, trips, model, gamma, eps=1e-5):
    cfg = TrainConfig(gamma=gamma, tol=1e-13, horizon=5000, lam=1e-2)
    irl = MaxEntIRL(world, pad_and_mask(trips, world), cfg)
    got = irl.gradient(irl.evaluate(model)).theta
    want = finite_difference_gradient(lambda th: irl.evaluate(model.with_theta(th)).objective,
                                      model.theta, eps)
    return got, want


@pytest.mark.parametrize("gamma", [1.0, 0.9])
def test_linear_gradient_matches_finite_differences(gamma):
    rng = np.random.default_rng(11)
    w = random_small_world(rng, max_states=6, d=3)
    model = RewardModel([rng.normal(0, 0.5, (3, 1))], [np.array([-4.0])])
    trips = sample_trips(w, np.full(w.n_states, -3.0), 4, rng)
    got, want = _objective_check(w, trips, model, gamma)
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-7)


def test_depth_zero_gradient_is_feature_expectation_gap():
    """For a linear reward at gamma = 1 the ascent direction is expert minus expected feature counts."""
    rng = np.random.default_rng(5)
    w = random_small_world(rng, max_states=6, d=3)
    model = RewardModel([rng.normal(0, 0.5, (3, 1))], [np.array([-4.0])])
    trips = sample_trips(w, np.full(w.n_states, -3.0), 3, rng)
    irl = MaxEntIRL(w, pad_and_mask(trips, w), TrainConfig(gamma=1.0, tol=1e-13, lam=0.0))
    state = irl.evaluate(model)
    sols = {s.goal: s for s in state.solutions}
    expected = np.zeros(w.n_states)
    for t in trips:
        v = expected_svf(w, sols[t.destination], np.eye(w.n_states)[t.origin], horizon=3000).visits
        v[t.destination] = 0.0
        expected += v / len(trips)
    gap = irl.mu_expert.visits - expected
    g = irl.gradient(state)
    np.testing.assert_allclose(g.weights[0][:, 0], w.features.T @ gap, atol=1e-10)
    assert g.biases[0][0] == pytest.approx(gap.sum(), abs=1e-10)


# ---------------------------------------------------------------------------
# training

@pytest.fixture(scope="module")
def small_training_problem():
    world, planted = generate_synthetic_world(SynthConfig(rows=6, cols=6, blocked_fraction=0.1,
                                                          feature_dim=3, seed=4))
    train_t, _, _, _ = generate_experts(world, planted, ExpertConfig(n_trips=120, n_od_pairs=12,
                                                                     n_heldout=0, min_od_cells=3,
                                                                     seed=4))
    return world, pad_and_mask(train_t, world)


def test_training_monotone_and_deterministic(small_training_problem):
    world, batch = small_training_problem
    cfg = TrainConfig(epochs=25, width=8, depth=2, learning_rate=0.05, seed=1)
    m1, h1 = train(world, batch, cfg)
    m2, h2 = train(world, batch, cfg)
    ll = h1.log_likelihoods()
    assert len(h1.rows) == 26
    assert np.all(np.diff(ll) >= -1e-6)
    assert ll[-1] > ll[0]
    strip = lambda h: [{k: v for k, v in r.items() if k != "wall_time_ms"} for r in h.rows]
    assert strip(h1) == strip(h2)
    assert np.array_equal(m1.theta, m2.theta)


def test_training_rejects_bad_config(small_training_problem):
    world, batch = small_training_problem
    with pytest.raises(ValueError):
        train(world, batch, TrainConfig(gamma=1.5))
    with pytest.raises(ValueError):
        train(world, batch, TrainConfig(tol=0))
