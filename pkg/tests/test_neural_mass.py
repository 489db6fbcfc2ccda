import math

import numpy as np
import pytest

from supdirect import neural_mass as nm
from supdirect.integrate import FunctionField, rk4_step
from supdirect.neural_mass import ObserverGains, observer_field, output, plant_field, sigmoid

E0, V0, R = 2.5, 6.0, 0.56
A_, B_ = 100.0, 50.0
C1, C2, C3, C4 = 135.0, 108.0, 33.75, 33.75


def S(v):
    return 2 * E0 / (1 + math.exp(R * (V0 - v)))


def hand_matrices(p1, p2):
    A = np.array([
        [0, 1, 0, 0, 0, 0],
        [-A_**2, -2 * A_, 0, 0, 0, 0],
        [0, 0, 0, 1, 0, 0],
        [0, 0, -A_**2, -2 * A_, 0, 0],
        [0, 0, 0, 0, 0, 1],
        [0, 0, 0, 0, -B_**2, -2 * B_],
    ], dtype=float)
    G = np.array([[0, 0], [0, 0], [0, 0], [p1 * A_ * C2, 0], [0, 0], [0, p2 * B_ * C4]])
    B = np.array([[0, 0], [p1 * A_, 0], [0, 0], [0, p1 * A_], [0, 0], [0, 0]])
    H = np.array([[C1, 0, 0, 0, 0, 0], [C3, 0, 0, 0, 0, 0]])
    C = np.array([0, 0, 1, 0, -1, 0], dtype=float)
    return A, G, B, H, C


def hand_plant(x, p, u):
    A, G, B, H, C = hand_matrices(*p)
    y = C @ x
    v = H @ x
    return A @ x + G @ np.array([S(v[0]), S(v[1])]) + B @ np.array([S(y), u])


class TestSigmoid:
    def test_midpoint(self):
        assert sigmoid(6.0) == 2.5

    def test_saturation(self):
        assert sigmoid(100.0) > 4.999
        assert sigmoid(-100.0) > 0

    def test_max_slope(self):
        h = 1e-5
        slope = (sigmoid(V0 + h) - sigmoid(V0 - h)) / (2 * h)
        assert slope == pytest.approx(E0 * R / 2, rel=1e-8)
        vs = np.linspace(-20, 30, 2001)
        assert np.max(np.gradient(sigmoid(vs), vs)) <= 0.7 + 1e-6


class TestPlant:
    def test_origin_against_hand_assembly(self):
        x = np.zeros(6)
        got = plant_field(x, (5.0, 25.0), 0.0)
        s0 = 5 / (1 + math.exp(3.36))
        assert S(0.0) == pytest.approx(s0, rel=1e-15)
        np.testing.assert_allclose(got, hand_plant(x, (5.0, 25.0), 0.0), rtol=1e-14)
        assert got[1] == pytest.approx(5 * 100 * s0)
        assert got[3] == pytest.approx(5 * 100 * 108 * s0)
        assert got[5] == pytest.approx(25 * 50 * 33.75 * s0)

    def test_random_states_against_hand_assembly(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            x = rng.normal(scale=[0.1, 5, 20, 500, 20, 500])
            p = (rng.uniform(2, 8), rng.uniform(22, 28))
            u = rng.uniform(0, 300)
            np.testing.assert_allclose(plant_field(x, p, u), hand_plant(x, p, u), rtol=1e-12, atol=1e-9)

    def test_system_matrices_match_hand(self):
        for got, want in zip(nm.system_matrices((3.0, 24.0)), hand_matrices(3.0, 24.0)):
            np.testing.assert_array_equal(got, np.asarray(want).reshape(got.shape))

    def test_companion_rows(self):
        x = np.arange(1.0, 7.0)
        d = plant_field(x, (4.0, 23.0), 1.0)
        assert (d[0], d[2], d[4]) == (x[1], x[3], x[5])

    def test_output(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        assert output(x) == 3.0 - 5.0

    def test_batched_equals_rowwise(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(4, 6))
        P = rng.uniform([2, 22], [8, 28], size=(4, 2))
        batch = plant_field(X, P, 3.0)
        for i in range(4):
            np.testing.assert_array_equal(batch[i], plant_field(X[i], P[i], 3.0))

    def test_input_param_override(self):
        consts = nm.NeuralMassConstants(input_param=1)
        d = plant_field(np.zeros(6), (2.0, 25.0), 10.0, consts) - plant_field(np.zeros(6), (2.0, 25.0), 0.0, consts)
        assert d[3] == pytest.approx(25.0 * 100 * 10.0)


class TestObserver:
    def test_matched_state_equals_plant(self):
        rng = np.random.default_rng(2)
        gains = ObserverGains(L=tuple(rng.normal(size=6)), K=(0.3, -0.2))
        x = rng.normal(size=6)
        y = output(x)
        np.testing.assert_array_equal(observer_field(x, (5.0, 25.0), 7.0, y, gains), plant_field(x, (5.0, 25.0), 7.0))

    def test_zero_gains_structure(self):
        rng = np.random.default_rng(3)
        xh = rng.normal(size=6)
        y, u, p = 1.7, 120.0, (6.0, 27.0)
        A, G, B, H, C = hand_matrices(*p)
        v = H @ xh
        want = A @ xh + G @ np.array([S(v[0]), S(v[1])]) + B @ np.array([S(y), u])
        np.testing.assert_allclose(observer_field(xh, p, u, y), want, rtol=1e-12, atol=1e-9)

    def test_gains_enter_as_injection(self):
        rng = np.random.default_rng(4)
        xh = rng.normal(size=6)
        y, u, p = 0.4, 50.0, (3.0, 23.0)
        L = rng.normal(size=6)
        K = (0.5, -1.5)
        A, G, B, H, C = hand_matrices(*p)
        e = y - C @ xh
        v = H @ xh + np.array(K) * e
        want = A @ xh + G @ np.array([S(v[0]), S(v[1])]) + B @ np.array([S(y), u]) + L * e
        got = observer_field(xh, p, u, y, ObserverGains(L=tuple(L), K=K))
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-9)

    def test_gain_validation(self):
        with pytest.raises(ValueError):
            ObserverGains(L=(0.0,) * 5)
        with pytest.raises(ValueError):
            ObserverGains(K=(float("nan"), 0.0))


def test_matched_contraction_with_default_gains():
    rng = np.random.default_rng(5)
    p = np.array([5.6, 25.9])
    model = nm.NeuralMassModel()

    def stacked(Z, t, u):
        y = output(Z[0])
        return np.vstack([plant_field(Z[0], p, u), model.observer(Z[1], p, u, y)])

    fld = FunctionField(stacked, 6)
    u = lambda t: 220.0 + 100.0 * math.sin(7.3 * t)
    Z = np.vstack([[0.1, 0.0, 20.0, 0.0, 15.0, 0.0], rng.normal(scale=[0.1, 5, 20, 200, 20, 200])])
    e0 = np.max(np.abs(Z[1] - Z[0]))
    dt = 1e-3
    errs = []
    for i in range(round(nm.DEFAULT_SETTLE_TIME / dt)):
        Z = rk4_step(fld, Z, i * dt, dt, u)
        errs.append(np.max(np.abs(Z[1] - Z[0])))
    assert errs[-1] < 1e-3 * e0
    # monotone envelope after the initial transient
    tail = np.array(errs[300:])
    assert np.all(np.maximum.accumulate(tail[::-1])[::-1] <= tail[0] + 1e-12)
