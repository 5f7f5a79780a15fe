"""MaxEnt deep IRL: goal-conditioned soft value iteration, state visitation frequencies, training."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .reward import (RewardModel, init_model, log_prior, prior_gradient, reward_backward,
                     reward_forward)
from .trajectories import Trajectory, TrajectoryBatch
from .world import Action, World

log = logging.getLogger(__name__)


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=float("nan")):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class TrainingError(RuntimeError):
    pass


@dataclass
class SoftSolution:
    goal: int
    V: np.ndarray          # (S,)
    Q: np.ndarray          # (S, 9), -inf on invalid actions
    policy: np.ndarray     # (S, 9)
    gamma: float
    residual: float
    iterations: int

    def log_policy(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return self.Q - self.V[:, None]


@dataclass
class SVF:
    visits: np.ndarray
    horizon: int
    n_trajectories: int = 1


@dataclass
class TrainConfig:
    gamma: float = 0.99
    horizon: int | None = None      # default 4 * (rows + cols)
    tol: float = 1e-9
    max_vi_iter: int = 100_000
    vi_method: str = "newton"
    epochs: int = 150
    learning_rate: float = 0.01
    lam: float = 1e-4
    seed: int = 0
    width: int = 64
    depth: int = 4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_backtracks: int = 6

    def validate(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.vi_method not in ("newton", "vi"):
            raise ValueError("vi_method must be 'newton' or 'vi'")


# ---------------------------------------------------------------------------
# soft value iteration, batched over goals


def _logsumexp(q: np.ndarray) -> np.ndarray:
    m = q.max(axis=-1)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(under="ignore"):
        return safe + np.log(np.exp(q - safe[..., None]).sum(axis=-1))


def _backup(world: World, rewards: np.ndarray, goals: np.ndarray, gamma: float, V: np.ndarray):
    """One soft Bellman backup for every goal. Returns (Q, V_new)."""
    nxt = np.where(world.valid, world.next_state, 0)
    Q = rewards[None, :, None] + gamma * V[:, nxt]
    Q = np.where(world.valid[None], Q, -np.inf)
    g = np.arange(len(goals))
    Q[g, goals, :] = -np.inf
    Q[g, goals, Action.ST] = 0.0
    return Q, _logsumexp(Q)


def _policy_evaluation(world: World, rewards, goals, gamma, policy):
    """Entropy-regularized value of a fixed stochastic policy, goal value pinned to 0."""
    G, S = policy.shape[:2]
    nxt = np.where(world.valid, world.next_state, 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(policy > 0, policy * np.log(policy), 0.0).sum(axis=-1)
    rhs = rewards[None, :] + ent
    A = np.zeros((G, S, S))
    rows = np.broadcast_to(np.arange(S)[:, None], nxt.shape)
    for g in range(G):
        np.add.at(A[g], (rows, nxt), -gamma * policy[g])
    A[:, np.arange(S), np.arange(S)] += 1.0
    gi = np.arange(G)
    A[gi, goals, :] = 0.0
    A[gi, goals, goals] = 1.0
    rhs[gi, goals] = 0.0
    return np.linalg.solve(A, rhs[..., None])[..., 0]


def solve_goals(world: World, rewards, goals, gamma: float = 0.99, tol: float = 1e-9,
                max_iter: int = 100_000, method: str = "newton", V0=None,
                chunk: int = 32) -> list[SoftSolution]:
    """Soft value iteration for several goals at once.

    ``method="vi"`` iterates the soft Bellman backup until max |dV| < tol.
    ``method="newton"`` alternates soft policy improvement and exact policy
    evaluation (a Newton step on the same fixed point) and finishes with the
    same residual test.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    goals = np.asarray(goals, dtype=np.int64)
    if rewards.shape != (world.n_states,) or not np.all(np.isfinite(rewards)):
        raise ValueError("rewards must be finite with one value per state")
    if np.any((goals < 0) | (goals >= world.n_states)):
        raise ValueError("goal is not a passable state")
    if len(goals) > chunk:
        out = []
        for i in range(0, len(goals), chunk):
            out += solve_goals(world, rewards, goals[i:i + chunk], gamma, tol, max_iter, method,
                               None if V0 is None else V0[i:i + chunk], chunk)
        return out
    G, S = len(goals), world.n_states
    V = np.zeros((G, S)) if V0 is None else np.array(V0, dtype=np.float64)
    V[np.arange(G), goals] = 0.0
    residual = np.inf
    it = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while it < max_iter:
            it += 1
            Q, V_new = _backup(world, rewards, goals, gamma, V)
            res = np.abs(V_new - V).max(axis=1)
            residual = float(res.max())
            if not np.isfinite(residual):
                break
            if residual < tol:
                V = V_new
                break
            if method == "newton":
                policy = np.exp(Q - V_new[..., None])
                V_eval = _policy_evaluation(world, rewards, goals, gamma, policy)
                V = V_eval if np.all(np.isfinite(V_eval)) else V_new
            else:
                V = V_new
    if not residual < tol:
        raise ConvergenceError(f"soft value iteration did not converge in {it} iterations", residual)
    Q, V_fin = _backup(world, rewards, goals, gamma, V)
    policy = np.exp(Q - V_fin[..., None])
    return [SoftSolution(int(goals[g]), V_fin[g], Q[g], policy[g], gamma, float(res[g]), it)
            for g in range(G)]


def soft_value_iteration(world: World, rewards, goal: int, gamma: float = 0.99,
                         tol: float = 1e-9, max_iter: int = 100_000,
                         method: str = "vi") -> SoftSolution:
    return solve_goals(world, rewards, [goal], gamma, tol, max_iter, method)[0]


# ---------------------------------------------------------------------------
# state visitation frequencies


def _propagate(world: World, policy: np.ndarray, D: np.ndarray) -> np.ndarray:
    """One forward step for a stack of distributions D (G, S) under policies (G, S, 9)."""
    G, S = D.shape
    nxt = np.where(world.valid, world.next_state, 0)
    flow = D[..., None] * policy
    idx = (np.arange(G)[:, None, None] * S + nxt[None]).ravel()
    return np.bincount(idx, weights=flow.ravel(), minlength=G * S).reshape(G, S)


def expected_svf(world: World, solution: SoftSolution, origin_dist, horizon: int,
                 discount: float = 1.0) -> SVF:
    """Sum of D_t for t = 0..horizon; the goal absorbs mass and keeps it."""
    D = np.asarray(origin_dist, dtype=np.float64)
    if D.shape != (world.n_states,) or abs(D.sum() - 1.0) > 1e-9 or np.any(D < 0):
        raise ValueError("origin_dist must be a distribution over states")
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    D = D[None]
    total = D.copy()
    w = 1.0
    for _ in range(horizon):
        D = _propagate(world, solution.policy[None], D)
        w *= discount
        total += w * D
    return SVF(total[0], horizon)


def state_distributions(world: World, solution: SoftSolution, origin_dist, horizon: int):
    """D_0..D_horizon as an array (horizon + 1, S)."""
    D = np.asarray(origin_dist, dtype=np.float64)[None]
    out = [D[0]]
    for _ in range(horizon):
        D = _propagate(world, solution.policy[None], D)
        out.append(D[0])
    return np.array(out)


def expert_svf(batch: TrajectoryBatch, world: World) -> SVF:
    """Visits per state over real (unmasked) steps, divided by the number of trajectories."""
    states = batch.states[batch.mask]
    if states.size and (states.min() < 0 or states.max() >= world.n_states):
        raise ValueError("trajectory state outside the world")
    counts = np.bincount(states, minlength=world.n_states).astype(np.float64)
    n = batch.n_trajectories
    return SVF(counts / n, batch.length, n)


def _goal_groups(goals: np.ndarray):
    uniq = np.unique(goals)
    return uniq, {int(g): np.flatnonzero(goals == g) for g in uniq}


def _gradient_occupancy(world: World, solutions: list[SoftSolution], batch: TrajectoryBatch,
                        horizon: int) -> np.ndarray:
    """Expected visits matching the exact gradient of the goal-conditioned log-likelihood.

    With gamma = 1 each trip seeds one unit of mass at its origin. With gamma < 1
    the derivative of the intermediate values adds (1 - gamma) mass at every later
    visited state and the forward pass is discounted. Mass reaching a goal is
    dropped: the goal's reward never enters that goal's likelihood.
    """
    S = world.n_states
    goal_list = np.array([s.goal for s in solutions])
    col = {g: i for i, g in enumerate(goal_list.tolist())}
    gamma = solutions[0].gamma
    seed = np.zeros((len(solutions), S))
    for i in range(batch.n_trajectories):
        k = col[int(batch.goals[i])]
        steps = batch.states[i, batch.mask[i]]
        if steps.size == 0:
            continue
        seed[k, steps[0]] += 1.0
        if gamma < 1.0 and steps.size > 1:
            np.add.at(seed[k], steps[1:], 1.0 - gamma)
    policy = np.stack([s.policy for s in solutions])
    gi = np.arange(len(solutions))
    D = seed
    D[gi, goal_list] = 0.0
    total = D.copy()
    w = 1.0
    for _ in range(horizon):
        D = _propagate(world, policy, D)
        D[gi, goal_list] = 0.0
        w *= gamma
        total += w * D
        if D.sum() * w < 1e-14:
            break
    return total.sum(axis=0) / batch.n_trajectories


def maxent_gradient(expert: SVF, expected: SVF, model: RewardModel, world: World,
                    lam: float) -> RewardModel:
    """Ascent direction: sum_s (mu_D(s) - E[mu](s)) dR(x_s)/dtheta - lam * theta."""
    if expert.visits.shape != expected.visits.shape or expert.visits.shape != (world.n_states,):
        raise ValueError("SVFs must cover the same world")
    upstream = expert.visits - expected.visits
    g = reward_backward(model, world.features, upstream)
    p = prior_gradient(model, lam)
    return g.with_theta(g.theta + p.theta)


def log_likelihood(trajs, solutions) -> float:
    """Sum over trips of sum_t log pi(a_t | s_t) under the solution for the trip's goal.

    ``trajs`` is a sequence of Trajectory or a TrajectoryBatch; ``solutions`` maps
    goal state -> SoftSolution (or is a list of solutions).
    """
    if not isinstance(solutions, dict):
        solutions = {s.goal: s for s in solutions}
    if isinstance(trajs, TrajectoryBatch):
        return _batch_log_likelihood(trajs, solutions)
    total = 0.0
    for traj in trajs:
        sol = solutions[traj.destination]
        lp = 0.0
        for s, a in zip(traj.states[:-1], traj.actions):
            p = sol.policy[s, a]
            if p <= 0.0:
                warnings.warn(f"trip {traj.order_id!r} uses an action with zero policy probability; excluded")
                lp = None
                break
            lp += float(np.log(p))
        if lp is not None:
            total += lp
    return total


def _batch_log_likelihood(batch: TrajectoryBatch, solutions: dict) -> float:
    goals = list(solutions)
    col = {g: i for i, g in enumerate(goals)}
    logpi = np.stack([solutions[g].log_policy() for g in goals])
    k = np.array([col[int(g)] for g in batch.goals])
    rows = np.broadcast_to(k[:, None], batch.states.shape)
    s = np.where(batch.mask, batch.states, 0)
    a = np.where(batch.mask, batch.actions, 0)
    lp = np.where(batch.mask, logpi[rows, s, a], 0.0)
    bad = ~np.isfinite(lp).all(axis=1)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} trips use an action with zero policy probability; excluded")
    return float(lp[~bad].sum())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainState:
    model: RewardModel
    solutions: list[SoftSolution]
    log_likelihood: float
    objective: float


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def log_likelihoods(self) -> np.ndarray:
        return np.array([r["log_likelihood"] for r in self.rows])

    def grad_norms(self) -> np.ndarray:
        return np.array([r["grad_norm"] for r in self.rows])


class MaxEntIRL:
    """Deep MaxEnt IRL trainer over one world and one batch of demonstrations."""

    def __init__(self, world: World, batch: TrajectoryBatch, config: TrainConfig):
        config.validate()
        if batch.n_trajectories == 0:
            raise ValueError("training batch is empty")
        self.world = world
        self.batch = batch
        self.config = config
        self.horizon = config.horizon or 4 * (world.rows + world.cols)
        self.goals, _ = _goal_groups(batch.goals)
        self.mu_expert = expert_svf(batch, world)
        self._V = None

    def evaluate(self, model: RewardModel) -> TrainState:
        c = self.config
        rewards = reward_forward(model, self.world.features)
        if not np.all(np.isfinite(rewards)):
            raise TrainingError("reward model produced non-finite rewards")
        sols = solve_goals(self.world, rewards, self.goals, c.gamma, c.tol, c.max_vi_iter,
                           c.vi_method, V0=self._V)
        ll = log_likelihood(self.batch, sols)
        obj = ll / self.batch.n_trajectories + log_prior(model, c.lam)
        return TrainState(model, sols, ll, obj)

    def gradient(self, state: TrainState) -> RewardModel:
        occ = _gradient_occupancy(self.world, state.solutions, self.batch, self.horizon)
        expected = SVF(occ, self.horizon, self.batch.n_trajectories)
        return maxent_gradient(self.mu_expert, expected, state.model, self.world, self.config.lam)

    def fit(self, model: RewardModel | None = None) -> tuple[RewardModel, History]:
        c = self.config
        if model is None:
            model = init_model(c.seed, self.world.feature_dim, c.width, c.depth)
        state = self.evaluate(model)
        self._V = np.stack([s.V for s in state.solutions])
        m = np.zeros(model.n_params)
        v = np.zeros(model.n_params)
        history = History()
        t0 = time.perf_counter()
        for epoch in range(c.epochs + 1):
            grad = self.gradient(state)
            g = grad.theta
            g_lik = g + c.lam * state.model.theta
            history.rows.append({
                "epoch": epoch,
                "log_likelihood": state.log_likelihood,
                "grad_norm": float(np.linalg.norm(g)),
                "mean_residual": float(np.mean([s.residual for s in state.solutions])),
                "wall_time_ms": (time.perf_counter() - t0) * 1e3,
            })
            log.info("epoch %d ll %.6f |g| %.4e", epoch, state.log_likelihood, history.rows[-1]["grad_norm"])
            if epoch == c.epochs:
                break
            # moments track the likelihood term only; the prior is applied decoupled
            m = c.beta1 * m + (1 - c.beta1) * g_lik
            v = c.beta2 * v + (1 - c.beta2) * g_lik * g_lik
            mh = m / (1 - c.beta1 ** (epoch + 1))
            vh = v / (1 - c.beta2 ** (epoch + 1))
            theta = state.model.theta
            direction = mh / (np.sqrt(vh) + c.eps) - c.lam * theta
            step = c.learning_rate
            for _ in range(c.max_backtracks + 1):
                cand_theta = theta + step * direction
                if not np.all(np.isfinite(cand_theta)):
                    raise TrainingError(f"non-finite parameters at epoch {epoch}")
                try:
                    cand = self.evaluate(state.model.with_theta(cand_theta))
                except ConvergenceError:
                    cand = None
                if (cand is not None and cand.log_likelihood >= state.log_likelihood
                        and cand.objective >= state.objective):
                    state = cand
                    self._V = np.stack([s.V for s in state.solutions])
                    break
                step *= 0.5
        return state.model, history


def train(world: World, batch: TrajectoryBatch, config: TrainConfig,
          model: RewardModel | None = None) -> tuple[RewardModel, History]:
    return MaxEntIRL(world, batch, config).fit(model)


def group_by_goal(trajs: list[Trajectory]) -> dict[int, list[Trajectory]]:
    groups: dict[int, list[Trajectory]] = {}
    for t in trajs:
        groups.setdefault(t.destination, []).append(t)
    return dict(sorted(groups.items()))

