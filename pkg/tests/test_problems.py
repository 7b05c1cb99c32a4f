import json
import math

import numpy as np
import pytest

from lipbnb.bnb import BnbConfig, BnbStatus, minimize
from lipbnb.lipschitz import lipschitz_sdp
from lipbnb.network import dumps_network, forward, load_network
from lipbnb.problems import (
    BENCHMARKS,
    DATA_DIR,
    ClosedLoopProblem,
    MinimizeProblem,
    OpenLoopProblem,
    ProblemError,
    fixture_sanity,
    load_problem,
    parse_problem,
    run_benchmark,
)
from lipbnb.problems import generate


@pytest.mark.parametrize("name", sorted(BENCHMARKS))
def test_fixture_loads_and_is_finite(name):
    spec = BENCHMARKS[name]()
    assert spec.problem_file.exists() and spec.weight_file.exists()
    bound = fixture_sanity(spec)
    assert math.isfinite(bound) and bound > 0
    pb = spec.load()
    assert pb.network.arch == load_network(spec.weight_file).arch


@pytest.mark.parametrize("builder", sorted(generate.BUILDERS))
def test_fixture_regeneration_is_bit_identical(builder):
    fresh = dumps_network(generate.BUILDERS[builder]())
    assert fresh == (DATA_DIR / builder).read_text()


def test_double_integrator_problem():
    pb = BENCHMARKS["double_integrator"]().load()
    assert isinstance(pb, ClosedLoopProblem)
    A, B = generate.double_integrator_dynamics()
    assert np.array_equal(pb.dynamics.A_seq[0], A) and np.array_equal(pb.dynamics.B_seq[0], B)
    assert pb.dynamics.horizon == 5
    assert pb.network.arch == [2, 10, 5, 1]
    assert BENCHMARKS["double_integrator"]().epsilons == (0.1, 0.01, 0.001)


def test_quadrotor_problem():
    pb = BENCHMARKS["quadrotor"]().load()
    box = pb.initial_set.bounds
    np.testing.assert_array_equal(box.lower, [4.69, 4.65, 2.975, 0.9499, -1e-4, -1e-4])
    np.testing.assert_array_equal(box.upper, [4.71, 4.75, 3.025, 0.9501, 1e-4, 1e-4])
    assert pb.dynamics.horizon * pb.dynamics.dt == pytest.approx(1.2, abs=1e-12)
    A, B, c = generate.quadrotor_dynamics()
    assert np.array_equal(pb.dynamics.A_seq[0], A)
    assert np.array_equal(pb.dynamics.B_seq[0], B)
    assert np.array_equal(pb.dynamics.c_seq[0], c)
    assert pb.network.arch == [6, 32, 32, 3]
    assert pb.epsilon == 0.1


def test_quadrotor_dynamics_by_hand():
    A, B, c = generate.quadrotor_dynamics(dt=0.1, g=9.81)
    x = np.array([1.0, 2.0, 3.0, 0.5, -0.5, 0.25])
    u = np.array([0.1, 0.2, 9.81])
    nxt = A @ x + B @ u + c
    expected = [1.05, 1.95, 3.025, 0.5 + 0.1 * 9.81 * 0.1, -0.5 - 0.1 * 9.81 * 0.2, 0.25]
    np.testing.assert_allclose(nxt, expected, rtol=1e-14, atol=1e-14)


def test_robotic_arm_problem():
    pb = BENCHMARKS["robotic_arm"]().load()
    assert isinstance(pb, OpenLoopProblem)
    np.testing.assert_allclose(pb.input_set.lower, [np.pi / 3] * 2, rtol=1e-15)
    np.testing.assert_allclose(pb.input_set.upper, [2 * np.pi / 3] * 2, rtol=1e-15)
    dirs = pb.direction_matrix()
    assert dirs.shape == (60, 2)
    np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, rtol=1e-14)
    np.testing.assert_allclose(np.arctan2(dirs[:, 1], dirs[:, 0]) % (2 * np.pi), 2 * np.pi * np.arange(60) / 60,
                               atol=1e-12)
    pca = pb.direction_matrix({"mode": "pca"})
    assert pca.shape == (4, 2)
    np.testing.assert_allclose(pca[:2], -pca[2:])


def test_robotic_arm_fit_tracks_kinematics():
    pb = BENCHMARKS["robotic_arm"]().load()
    theta = np.random.default_rng(5).uniform(pb.input_set.lower, pb.input_set.upper, size=(2000, 2))
    err = forward(pb.network, theta) - generate.arm_kinematics(theta)
    # the workspace spans about 1.5 per axis; the fit only has to be a plausible stand-in
    assert np.sqrt(np.mean(err ** 2)) < 0.05


def test_double_integrator_expert_is_stabilizing():
    A, B = generate.double_integrator_dynamics()
    K = generate.lqr_gain(A, B, np.eye(2), np.array([[1.0]]))
    assert np.abs(np.linalg.eigvals(A - B @ K)).max() < 1.0


@pytest.mark.parametrize("name,status", [("toy_positive", "VerifiedNonnegative"),
                                         ("toy_crossing", "CounterexampleFound")])
def test_toy_problems(name, status):
    pb = load_problem(DATA_DIR / f"{name}.problem.json")
    assert isinstance(pb, MinimizeProblem) and pb.verify
    res = minimize(pb.objective, pb.input_set, lipschitz_sdp(pb.objective), BnbConfig(pb.epsilon, verify_mode=True))
    assert res.status.value == status


def test_bad_problem_documents(tmp_path):
    base = json.loads((DATA_DIR / "toy_positive.problem.json").read_text())
    with pytest.raises(ProblemError):
        parse_problem({**base, "kind": "bogus"}, DATA_DIR)
    with pytest.raises(ProblemError):
        parse_problem({**base, "input_set": {"lower": [0.0], "upper": [1.0]}}, DATA_DIR)
    with pytest.raises(ProblemError):
        parse_problem({**base, "input_set": {"lower": [1.0, 1.0], "upper": [0.0, 0.0]}}, DATA_DIR)
    bad = tmp_path / "x.problem.json"
    bad.write_text("{")
    with pytest.raises(ProblemError):
        load_problem(bad)
    with pytest.raises(ProblemError):
        load_problem(tmp_path / "missing.json")


def test_double_integrator_benchmark_properties():
    ctx, outcomes = run_benchmark(BENCHMARKS["double_integrator"](), epsilon=0.01)
    assert all(v["passed"] for v in outcomes.values()), outcomes
    assert ctx.reach().num_solves == 20


def test_robotic_arm_benchmark_properties():
    ctx, outcomes = run_benchmark(BENCHMARKS["robotic_arm"]())
    assert all(v["passed"] for v in outcomes.values()), outcomes
    assert all(r.status is BnbStatus.CONVERGED for r in ctx.polytope().results)
