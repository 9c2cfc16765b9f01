"""Identify the hydraulic joint with a recurrent predictor, train a policy
through it, and compare the policy with PID on a few random moves.

Takes about a minute.

    python3 demos/identify_and_control.py
"""
import numpy as np

from coarsesort.control import (
    canonical_trajectory,
    pid_follow,
    policy_follow,
    random_trajectories,
    train_controller,
    workspace,
)
from coarsesort.plant import RandomWalk, canonical_params, collect_dataset
from coarsesort.sysid import canonical_training_logs, evaluate_predictor, train_predictor


def main():
    params = canonical_params()
    logs = canonical_training_logs(params)
    print(f"training on {len(logs)} chirp segments, {sum(len(l.t) for l in logs)} samples")
    model = train_predictor(logs)
    held_out = collect_dataset(params, RandomWalk(), 120.0, seed=101)
    rep = evaluate_predictor(model, held_out)
    print(f"held-out random walk: max err {rep.max_abs_error:.3f}, rmse {rep.rmse:.4f} rad/s")

    policy = train_controller(model, params)
    _, rmse = pid_follow(params, canonical_trajectory())
    print(f"PID on the trapezoid move: {rmse:.4f} rad rmse")
    for i, traj in enumerate(random_trajectories(5, 12345, workspace(params))):
        _, a = pid_follow(params, traj, seed=i)
        _, b = policy_follow(params, traj, policy, seed=i)
        print(f"move {i}: {traj.pos[0]:+.2f} -> {traj.pos[-1]:+.2f}  PID {a:.4f}  policy {b:.4f}")


if __name__ == "__main__":
    main()
