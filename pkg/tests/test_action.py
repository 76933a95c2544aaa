import numpy as np
import pytest

from strongdamp.action import (ControlSignal, DiscretePath,
                               SingularSigmaError, control_cost,
                               controlled_skeleton, path_action,
                               path_action_alt, segment_costs,
                               segment_costs_grad)
from strongdamp.errors import ConfigError
from strongdamp.fields import load_preset, load_problem


P1 = load_preset("p1")
P2 = load_preset("p2")


def line_path(a, b, N, T=1.0):
    pts = np.linspace(a, b, N + 1)[:, None]
    return DiscretePath(T=T, points=pts)


def test_path_validation():
    with pytest.raises(ConfigError):
        DiscretePath(T=0.0, points=np.zeros((3, 1)))
    with pytest.raises(ConfigError):
        DiscretePath(T=1.0, points=np.zeros(3))
    with pytest.raises(ConfigError):
        ControlSignal(T=1.0, values=np.zeros((1, 1)))


def test_control_energy_budget():
    t = np.linspace(0, 1, 65)
    vals = np.sin(2 * np.pi * t)
    u = ControlSignal(T=1.0, values=vals)
    assert control_cost(u) == pytest.approx(0.25, rel=1e-3)
    with pytest.raises(ConfigError):
        ControlSignal(T=1.0, values=vals, gamma=0.1)


def test_constant_speed_segment_value():
    """For b = -q, alpha = sigma = 1 the integrand is |f' + f|^2 / 2 and a
    straight run from 0 to 1 in time T has the explicit midpoint value."""
    T, N = 2.0, 400
    f = line_path(0.0, 1.0, N, T)
    mids = 0.5 * (f.points[:-1, 0] + f.points[1:, 0])
    expect = 0.5 * np.sum((1.0 / T + mids) ** 2) * (T / N)
    assert path_action(P1, f).total == pytest.approx(expect, rel=1e-12)


def test_standard_and_alt_agree_for_unit_friction():
    # with alpha = sigma = 1 both quadratic forms coincide identically
    f = line_path(-0.3, 0.9, 50)
    np.testing.assert_allclose(path_action(P1, f).total,
                               path_action_alt(P1, f).total, rtol=1e-14)


def test_driftfree_mode_closed_form():
    f = line_path(0.0, 1.0, 16, T=2.0)
    seg = segment_costs(P1, f, "driftfree")
    # 0.5 * int |f'|^2 for a straight line: 0.5 * T * (1/T)^2
    assert np.sum(seg) == pytest.approx(0.25, rel=1e-12)
    with pytest.raises(ConfigError):
        segment_costs(P1, f, "bogus")


def test_rest_path_costs_nothing():
    pts = np.tile(P2.O, (20, 1))
    f = DiscretePath(T=1.0, points=pts)
    assert path_action(P2, f).total == pytest.approx(0.0, abs=1e-15)


def test_singular_sigma_raises():
    p = load_problem({
        "d": 1, "r": 1, "b": ["-q1"], "sigma": [["q1"]], "alpha": "1",
        "alpha0": 1.0, "O": [0.0], "box": [[-2.0, 2.0]],
    })
    # segment midpoint lands exactly on the zero of sigma
    f = DiscretePath(T=1.0, points=np.array([[-0.1], [0.1], [0.3]]))
    with pytest.raises(SingularSigmaError):
        path_action(p, f)
    # an ill-conditioned rectangular sigma trips the condition bound
    p2 = load_problem({
        "d": 2, "r": 2, "b": ["-q1", "-q2"],
        "sigma": [["1", "0"], ["0", "1e-12"]], "alpha": "1",
        "alpha0": 1.0, "O": [0.0, 0.0], "box": [[-2.0, 2.0], [-2.0, 2.0]],
    })
    f2 = DiscretePath(T=1.0, points=np.array([[0.0, 0.0], [0.5, 0.5]]))
    with pytest.raises(SingularSigmaError):
        path_action(p2, f2)


def test_segment_gradients_match_fd():
    rng = np.random.default_rng(3)
    pts = np.cumsum(rng.normal(0, 0.1, size=(7, 1)), axis=0)
    f = DiscretePath(T=0.7, points=pts)
    for mode in ("standard", "alt", "driftfree"):
        cost, g_left, g_right = segment_costs_grad(P2, f, mode)
        np.testing.assert_allclose(cost, segment_costs(P2, f, mode),
                                   rtol=1e-12)
        step = 1e-6
        for k in range(f.N):
            for (grad, node) in ((g_left, k), (g_right, k + 1)):
                fp = pts.copy()
                fp[node, 0] += step
                fm = pts.copy()
                fm[node, 0] -= step
                num = (segment_costs(P2, DiscretePath(T=0.7, points=fp),
                                     mode)[k]
                       - segment_costs(P2, DiscretePath(T=0.7, points=fm),
                                       mode)[k]) / (2 * step)
                assert grad[k, 0] == pytest.approx(num, rel=1e-5, abs=1e-8)


def test_control_identity_on_skeleton():
    """Driving the skeleton with u and measuring the action of the result
    recovers half the control energy (the control is cost-optimal for its
    own trajectory)."""
    t = np.linspace(0, 1.5, 1025)
    u = ControlSignal(T=1.5, values=0.3 * np.sin(2.0 * t) - 0.1)
    f = controlled_skeleton(P2, u, P2.O)
    assert path_action(P2, f).total == pytest.approx(control_cost(u),
                                                     abs=2e-4)


def test_skeleton_at_zero_control_stays_at_rest():
    u = ControlSignal(T=1.0, values=np.zeros(33))
    f = controlled_skeleton(P2, u, P2.O)
    assert np.max(np.abs(f.points - P2.O)) < 1e-12
