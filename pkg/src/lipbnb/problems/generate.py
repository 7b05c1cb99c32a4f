"""Regenerate the benchmark weight fixtures.

The controllers imitate LQR policies (a stand-in for an MPC expert; only
the double integrator's is saturated) and the robotic-arm network fits the
two-link forward kinematics.
Training is full-batch Adam with fixed seeds, so reruns on the same platform
reproduce the committed files bit for bit.

    python -m lipbnb.problems.generate [output_dir]
"""
from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
from scipy.linalg import solve_discrete_are

from ..network import NeuralNetwork, dumps_network

DATA_DIR = Path(__file__).parent / "data"
GRAVITY = 9.81
QUAD_DT = 0.1


def train_mlp(x, y, sizes, seed=0, steps=3000, lr=3e-3, weight_decay=1e-5) -> NeuralNetwork:
    """Fit a ReLU MLP by full-batch Adam on mean squared error."""
    rng = np.random.default_rng(seed)
    ws = [rng.normal(size=(o, i)) * np.sqrt(2.0 / i) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(o) for o in sizes[1:]]
    params = ws + bs
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2 = 0.9, 0.999
    n_layers = len(ws)
    for step in range(1, steps + 1):
        acts = [x]
        pre = []
        for k in range(n_layers):
            z = acts[-1] @ ws[k].T + bs[k]
            pre.append(z)
            acts.append(np.maximum(z, 0.0) if k < n_layers - 1 else z)
        grad_out = 2.0 * (acts[-1] - y) / y.size
        gw, gb = [None] * n_layers, [None] * n_layers
        g = grad_out
        for k in reversed(range(n_layers)):
            gw[k] = g.T @ acts[k] + 2.0 * weight_decay * ws[k]
            gb[k] = g.sum(axis=0)
            if k > 0:
                g = (g @ ws[k]) * (pre[k - 1] > 0)
        grads = gw + gb
        rate = lr * (0.1 if step > 0.8 * steps else 1.0)
        for p, gr, mi, vi in zip(params, grads, m, v):
            mi *= b1
            mi += (1 - b1) * gr
            vi *= b2
            vi += (1 - b2) * gr * gr
            p -= rate * (mi / (1 - b1 ** step)) / (np.sqrt(vi / (1 - b2 ** step)) + 1e-8)
    return NeuralNetwork(tuple(ws), tuple(bs), "relu")


def lqr_gain(A, B, Q, R) -> np.ndarray:
    P = solve_discrete_are(A, B, Q, R)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def double_integrator_dynamics():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    B = np.array([[0.5], [1.0]])
    return A, B


def double_integrator_network() -> NeuralNetwork:
    A, B = double_integrator_dynamics()
    K = lqr_gain(A, B, np.eye(2), np.array([[1.0]]))
    rng = np.random.default_rng(11)
    x = rng.uniform([-1.0, -2.0], [4.0, 1.0], size=(4000, 2))
    u = np.clip(-x @ K.T, -1.0, 1.0)
    return train_mlp(x, u, [2, 10, 5, 1], seed=1, steps=4000)


def quadrotor_dynamics(dt=QUAD_DT, g=GRAVITY):
    A = np.eye(6)
    A[:3, 3:] = dt * np.eye(3)
    B = np.zeros((6, 3))
    B[3, 0] = g
    B[4, 1] = -g
    B[5, 2] = 1.0
    B *= dt
    c = np.zeros(6)
    c[5] = -g * dt
    return A, B, c


QUAD_GOAL = np.array([5.5, 4.7, 3.0, 0.0, 0.0, 0.0])


def quadrotor_expert(x):
    """Unsaturated hover LQR; the closed-loop recursion uses the raw network output."""
    A, B, _ = quadrotor_dynamics()
    K = lqr_gain(A, B, np.diag([1.0, 1.0, 1.0, 3.0, 3.0, 3.0]), 0.3 * np.eye(3))
    return GRAVITY * np.array([0.0, 0.0, 1.0]) - (x - QUAD_GOAL) @ K.T


def quadrotor_network() -> NeuralNetwork:
    rng = np.random.default_rng(12)
    x = rng.uniform(
        [4.3, 4.2, 2.6, -0.3, -0.6, -0.6], [6.3, 5.2, 3.4, 1.4, 0.6, 0.6], size=(6000, 6)
    )
    return train_mlp(x, quadrotor_expert(x), [6, 32, 32, 3], seed=2, steps=6000)


ARM_LINKS = (1.0, 1.0)


def arm_kinematics(theta):
    l1, l2 = ARM_LINKS
    t1, t2 = theta[:, 0], theta[:, 1]
    return np.column_stack([
        l1 * np.cos(t1) + l2 * np.cos(t1 + t2),
        l1 * np.sin(t1) + l2 * np.sin(t1 + t2),
    ])


def robotic_arm_network() -> NeuralNetwork:
    rng = np.random.default_rng(13)
    theta = rng.uniform(np.pi / 3, 2 * np.pi / 3, size=(10_000, 2))
    return train_mlp(theta, arm_kinematics(theta), [2, 50, 2], seed=3, steps=3000)


BUILDERS = {
    "double_integrator.json": double_integrator_network,
    "quadrotor.json": quadrotor_network,
    "robotic_arm.json": robotic_arm_network,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0]) if argv else DATA_DIR
    out.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        (out / name).write_text(dumps_network(build()))
        print(f"wrote {out / name}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
