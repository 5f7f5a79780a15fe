"""How the forward-pass horizon cap biases the training gradient when gamma < 1.

For a small random world and a reward near zero (so the soft policy wanders), compare
the analytic gradient at several horizons with central finite differences of the
objective. The error vanishes once the horizon covers the discounted occupancy.

    python scripts/horizon_truncation.py
"""
import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from conftest import random_small_world, sample_trips  # noqa: E402
from oracles import finite_difference_gradient  # noqa: E402
from velopref.reward import RewardModel  # noqa: E402
from velopref.solver import MaxEntIRL, TrainConfig  # noqa: E402
from velopref.trajectories import pad_and_mask  # noqa: E402


def main():
    p = argparse.ArgumentParser(description="gradient error versus horizon cap")
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--bias", type=float, default=-1.0)
    p.add_argument("--seed", type=int, default=1)
    a = p.parse_args()
    rng = np.random.default_rng(a.seed)
    world = random_small_world(rng, max_states=6, d=3)
    model = RewardModel([rng.normal(0, 0.5, (3, 1))], [np.array([a.bias])])
    trips = sample_trips(world, np.full(world.n_states, -3.0), 4, rng)
    batch = pad_and_mask(trips, world)
    print(f"{world.n_states} states, gamma {a.gamma}, default horizon {4 * (world.rows + world.cols)}")
    print(f"{'horizon':>8} {'max rel error':>14}")
    for horizon in (5, 10, 20, 50, 100, 200, 500):
        irl = MaxEntIRL(world, batch, TrainConfig(gamma=a.gamma, tol=1e-13, lam=1e-2, horizon=horizon))
        got = irl.gradient(irl.evaluate(model)).theta
        want = finite_difference_gradient(lambda th: irl.evaluate(model.with_theta(th)).objective,
                                          model.theta, 1e-5)
        rel = np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-7))
        print(f"{horizon:>8} {rel:14.3e}")


if __name__ == "__main__":
    main()
