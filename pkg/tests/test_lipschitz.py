import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lipbnb.bnb import Rectangle
from lipbnb.lipschitz import (
    PSD_TOLERANCE,
    LipschitzMethod,
    build_lmi,
    check_lmi_feasible,
    lipschitz_naive,
    lipschitz_sdp,
    min_rho_for_T,
    preactivation_intervals,
    sector_localize,
    spectral_norm,
)
from lipbnb.network import NeuralNetwork, ObjectiveFunction, load_network, random_network
from lipbnb.problems import DATA_DIR
from oracles import difference_quotients


def relu_x1():
    return NeuralNetwork((np.eye(2), np.array([[1.0, 0.0]])), None, "relu")


def max_difference_quotient(obj, lo, hi, n, seed):
    return float(difference_quotients(obj, np.asarray(lo, float), np.asarray(hi, float), n, seed).max())


def test_lmi_shapes_one_hidden_layer():
    net = random_network([2, 3, 1], seed=0)
    lmi = build_lmi(ObjectiveFunction(net, [1.0]))
    assert lmi.A_F.shape == (3, 5)
    np.testing.assert_array_equal(lmi.A_F[:, :2], net.weights[0])
    np.testing.assert_array_equal(lmi.A_F[:, 2:], np.zeros((3, 3)))
    np.testing.assert_array_equal(lmi.B_F, np.hstack([np.zeros((3, 2)), np.eye(3)]))
    np.testing.assert_array_equal(lmi.D_F, np.hstack([np.eye(2), np.zeros((2, 3))]))
    np.testing.assert_array_equal(lmi.C_F, np.concatenate([[0.0, 0.0], net.weights[1][0]]))


def test_lmi_closed_loop_linear_block():
    net = random_network([2, 4, 2], seed=1)
    rot = np.array([[0.0, 1.0], [1.0, 0.0]])
    c = np.array([0.3, -0.7])
    lmi = build_lmi(ObjectiveFunction(net, c, np.eye(2), np.eye(2), rot))
    np.testing.assert_array_equal(lmi.C_F[:2], c @ rot)


def test_lmi_quadrotor_dimensions():
    net = load_network(DATA_DIR / "quadrotor.json")
    lmi = build_lmi(ObjectiveFunction(net, np.ones(3)))
    assert lmi.n_neurons == 64
    assert lmi.A_F.shape == (64, 70)


def test_scalar_identity_chain_threshold():
    # f(x) = x through one identity neuron; the exact constant is 1
    net = NeuralNetwork((np.array([[1.0]]), np.array([[1.0]])), None, "identity")
    lmi = build_lmi(ObjectiveFunction(net, [1.0]))
    delta = 1e-3
    assert any(check_lmi_feasible(lmi, 1.0 + delta, [t])[0] for t in np.logspace(-3, 3, 25))
    assert not any(check_lmi_feasible(lmi, 1.0 - delta, [t])[0] for t in np.logspace(-3, 3, 25))


def test_rho_zero_infeasible():
    net = random_network([2, 3, 1], seed=2)
    lmi = build_lmi(ObjectiveFunction(net, [1.0]))
    assert not check_lmi_feasible(lmi, 0.0, np.ones(3))[0]


def test_output_supported_on_input_block_feasible_without_T():
    # zero final layer, closed loop: C_F lives on the input block only
    net = NeuralNetwork((np.ones((3, 2)), np.zeros((1, 3))), None, "relu")
    obj = ObjectiveFunction(net, [1.0, 2.0], [[1.0, 0.0], [0.0, 1.0]], [[0.0], [0.0]])
    lmi = build_lmi(obj)
    rho = float(np.linalg.norm(obj.linear_row) ** 2) + 1e-6
    assert check_lmi_feasible(lmi, rho, np.zeros(3))[0]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 100.0))
def test_feasibility_monotone_in_rho(seed, factor):
    net = random_network([2, 5, 1], seed=seed)
    lmi = build_lmi(ObjectiveFunction(net, [1.0]))
    t = np.random.default_rng(seed).uniform(0.1, 2.0, size=5)
    rho = min_rho_for_T(lmi, t, 2 * PSD_TOLERANCE)
    if not math.isfinite(rho):
        return
    ok, margin = check_lmi_feasible(lmi, rho * 1.0001 + 1e-7, t)
    assert ok and margin <= -PSD_TOLERANCE
    assert check_lmi_feasible(lmi, rho * factor + 1e-7, t)[0]


def test_naive_examples():
    net = NeuralNetwork((np.eye(3), np.eye(3)), None, "identity")
    assert lipschitz_naive(ObjectiveFunction(net, [1.0, 0.0, 0.0])).bound == pytest.approx(1.0, rel=1e-9)
    net = NeuralNetwork((2 * np.eye(2), 3 * np.eye(2)), None, "relu")
    assert lipschitz_naive(ObjectiveFunction(net, [1.0, 0.0])).bound == pytest.approx(6.0, rel=1e-9)


def test_naive_rotation_invariant():
    net = random_network([2, 6, 1], seed=5)
    theta = 1.1
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    a = lipschitz_naive(ObjectiveFunction(net, [1.0, -1.0], np.eye(2), np.ones((2, 1))))
    b = lipschitz_naive(ObjectiveFunction(net, [1.0, -1.0], np.eye(2), np.ones((2, 1)), rot))
    assert a.bound == pytest.approx(b.bound, rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 6))
def test_spectral_norm_vs_svd(seed, m, n):
    mat = np.random.default_rng(seed).normal(size=(m, n))
    ref = np.linalg.svd(mat, compute_uv=False)[0]
    est = spectral_norm(mat)
    assert est >= ref * (1 - 1e-12)
    assert est == pytest.approx(ref, rel=1e-6)


def test_relu_x1_sdp_bound():
    obj = ObjectiveFunction(relu_x1(), [1.0])
    cert = lipschitz_sdp(obj)
    assert 1.0 <= cert.bound <= 1.0 + 1e-6
    assert max_difference_quotient(obj, [-1.0, -1.0], [1.0, 1.0], 20_000, 0) <= cert.bound


def test_sdp_certificate_fields():
    # a wide random layer, where the LMI is clearly tighter than the norm product
    net = random_network([2, 16, 1], seed=7)
    cert = lipschitz_sdp(ObjectiveFunction(net, [1.0]))
    assert cert.method is LipschitzMethod.SDP
    assert cert.feasibility_margin <= -PSD_TOLERANCE
    assert np.all(cert.T_diag >= 0)
    assert cert.bound == pytest.approx(math.sqrt(cert.rho), rel=1e-15)
    lmi = build_lmi(ObjectiveFunction(net, [1.0]))
    assert check_lmi_feasible(lmi, cert.rho, cert.T_diag)[0]


def test_bisection_fallback_is_sound():
    cert = lipschitz_sdp(ObjectiveFunction(relu_x1(), [1.0]), solver="bisection")
    assert 1.0 <= cert.bound <= 1.0 + 1e-6


@pytest.mark.parametrize("seed", range(4))
def test_identity_chain_is_exact(seed):
    rng = np.random.default_rng(seed)
    sizes = [3, 5, 4, 2]
    ws = [rng.normal(size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    net = NeuralNetwork(tuple(ws), None, "identity")
    c = rng.normal(size=2)
    exact = np.linalg.norm(c @ ws[2] @ ws[1] @ ws[0])
    cert = lipschitz_sdp(ObjectiveFunction(net, c))
    assert cert.bound >= exact * (1 - 1e-12)
    assert cert.bound == pytest.approx(exact, rel=1e-6)


def test_zero_final_layer_only_linear_term():
    net = NeuralNetwork((np.ones((4, 2)), np.zeros((1, 4))), None, "relu")
    obj = ObjectiveFunction(net, [1.0, 0.5], [[1.0, 1.0], [0.0, 1.0]], [[0.5], [1.0]])
    cert = lipschitz_sdp(obj)
    assert cert.bound <= np.linalg.norm(obj.linear_row) + 1e-9


def test_sdp_never_above_naive():
    for seed in range(6):
        net = random_network([2, 8, 8, 1], seed=seed)
        obj = ObjectiveFunction(net, [1.0])
        assert lipschitz_sdp(obj).bound <= lipschitz_naive(obj).bound * (1 + 1e-6)


def test_scaling_direction_doubles_bound():
    net = random_network([2, 6, 6, 1], seed=9)
    one = ObjectiveFunction(net, [1.0])
    two = ObjectiveFunction(net, [2.0])
    assert lipschitz_naive(two).bound == pytest.approx(2 * lipschitz_naive(one).bound, rel=1e-12)
    assert lipschitz_sdp(two).bound == pytest.approx(2 * lipschitz_sdp(one).bound, rel=1e-6)


def test_localized_not_worse_than_global():
    for seed in range(4):
        net = random_network([2, 10, 6, 1], seed=seed)
        obj = ObjectiveFunction(net, [1.0])
        box = Rectangle([0.0, 0.0], [0.5, 0.5])
        glob = lipschitz_sdp(obj).bound
        loc = lipschitz_sdp(obj, preactivation_intervals(net, box)).bound
        assert loc <= glob * (1 + 1e-6)


def test_localized_certificate_sound_on_its_box():
    net = random_network([2, 12, 8, 1], seed=11)
    obj = ObjectiveFunction(net, [1.0])
    lo, hi = np.array([-0.5, 0.2]), np.array([0.3, 0.9])
    cert = lipschitz_sdp(obj, preactivation_intervals(net, (lo, hi)))
    assert max_difference_quotient(obj, lo, hi, 100_000, 0) <= cert.bound + 1e-9


def test_interval_examples():
    net = NeuralNetwork((np.eye(2), np.ones((1, 2))), None, "relu")
    b = preactivation_intervals(net, ([-1.0, -1.0], [1.0, 1.0]))
    np.testing.assert_array_equal(b.lower, [-1.0, -1.0])
    np.testing.assert_array_equal(b.upper, [1.0, 1.0])
    net = NeuralNetwork((np.array([[1.0, 1.0]]), np.ones((1, 1))), None, "relu")
    b = preactivation_intervals(net, Rectangle([0.0, 0.0], [1.0, 1.0]))
    np.testing.assert_array_equal(b.lower, [0.0])
    np.testing.assert_array_equal(b.upper, [2.0])


def test_intervals_contain_sampled_preactivations():
    net = random_network([2, 10, 1], seed=3)
    lo, hi = np.array([-1.0, 0.0]), np.array([0.5, 2.0])
    b = preactivation_intervals(net, (lo, hi))
    x = np.random.default_rng(0).uniform(lo, hi, size=(100_000, 2))
    z = x @ net.weights[0].T + net.biases[0]
    assert np.all(z >= b.lower - 1e-12) and np.all(z <= b.upper + 1e-12)


def test_intervals_with_rotation_contain_samples():
    net = random_network([2, 8, 6, 1], seed=4)
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    lo, hi = np.array([0.0, -1.0]), np.array([1.0, 0.5])
    b = preactivation_intervals(net, (lo, hi), rot)
    y = np.random.default_rng(1).uniform(lo, hi, size=(20_000, 2))
    z1 = (y @ rot.T) @ net.weights[0].T + net.biases[0]
    z2 = np.maximum(z1, 0) @ net.weights[1].T + net.biases[1]
    z = np.hstack([z1, z2])
    assert np.all(z >= b.lower - 1e-12) and np.all(z <= b.upper + 1e-12)


def test_sector_localize_examples():
    from lipbnb.lipschitz import PreactivationBounds

    b = PreactivationBounds(np.array([0.5, -2.0, -1.0]), np.array([2.0, -0.5, 1.0]), (3,))
    alpha, beta = sector_localize(b)
    np.testing.assert_array_equal(alpha, [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(beta, [1.0, 0.0, 1.0])
    with pytest.raises(NotImplementedError):
        sector_localize(b, "tanh")


@pytest.mark.parametrize("act", ["tanh", "sigmoid"])
def test_smooth_activations_sound(act):
    net = random_network([2, 8, 1], activation=act, seed=2, scale=2.0)
    obj = ObjectiveFunction(net, [1.0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cert = lipschitz_sdp(obj)
    assert max_difference_quotient(obj, [-2.0, -2.0], [2.0, 2.0], 50_000, 3) <= cert.bound + 1e-9
