import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import fd_derivative
from hbarlab.errors import ConfigError, UnsupportedOrderError
from hbarlab.phasespace import (Configuration, GaussianBump, GaussianMixture,
                                GaussianPotential, GridFunction, GridSpec, TanhWindow,
                                ZeroPotential, default_bank, load_snapshot,
                                mean_field_force, mean_field_forces,
                                potential_derivative, save_snapshot)


class TestPotential:
    def test_second_derivative_at_zero(self, phi):
        # symbolic oracle: d2/dx2 exp(-x^2/2) = (x^2 - 1) exp(-x^2/2)
        import sympy as sp

        x = sp.symbols("x")
        expr = sp.diff(sp.exp(-x**2 / 2), x, 2)
        assert float(expr.subs(x, 0)) == -1.0
        assert potential_derivative(phi, (2,), np.zeros((1,))) == pytest.approx(-1.0, abs=1e-14)

    def test_odd_derivative_vanishes_at_origin(self, phi):
        assert potential_derivative(phi, (1,), np.zeros((1,))) == 0.0

    def test_even_symmetry(self, phi, rng):
        x = rng.normal(size=(100, 1)) * 2.0
        assert np.allclose(phi.value(x), phi.value(-x), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("order", [1, 2, 3, 4, 5, 6])
    def test_derivatives_match_finite_differences(self, phi, rng, order):
        x = rng.normal(size=(1000, 1)) * 1.5
        exact = phi.derivative((order,), x)
        approx = fd_derivative(lambda z: phi.value(z), x, (order,))
        scale = np.abs(exact).max()
        assert np.abs(exact - approx).max() < 1e-6 * max(scale, 1.0)

    def test_derivative_bounds_hold_on_random_points(self, phi, rng):
        x = rng.normal(size=(1000, 1)) * 3.0
        for order in range(phi.max_order + 1):
            bound = phi.derivative_bound(order)
            vals = phi.derivative((order,), x)
            assert np.abs(vals).max() <= bound * (1 + 1e-12)

    def test_order_above_maximum_rejected(self, phi):
        with pytest.raises(UnsupportedOrderError):
            potential_derivative(phi, (7,), np.zeros((1,)))

    def test_multidimensional_factorization(self, rng):
        phi3 = GaussianPotential(d=3)
        x = rng.normal(size=(50, 3))
        exact = phi3.derivative((1, 2, 0), x)
        approx = fd_derivative(lambda z: phi3.value(z), x, (1, 2, 0))
        assert np.abs(exact - approx).max() < 1e-6

    def test_zero_potential(self):
        z = ZeroPotential(d=1)
        assert z.value(np.ones((4, 1))).max() == 0.0
        assert z.derivative_bound(3) == 0.0


class TestForces:
    def test_single_particle_feels_nothing(self, phi):
        cfg = Configuration(np.array([[0.3]]), np.array([[0.1]]))
        assert np.all(mean_field_force(cfg, phi, 0) == 0.0)

    def test_action_reaction(self, phi):
        cfg = Configuration(np.array([[0.0], [0.7]]), np.zeros((2, 1)))
        f0 = mean_field_force(cfg, phi, 0)
        f1 = mean_field_force(cfg, phi, 1)
        assert np.allclose(f0, -f1, atol=1e-16)

    def test_three_on_a_line_hand_sum(self, phi):
        # direct scalar-sum oracle; grad phi = -x exp(-x^2/2)
        xs = [-1.0, 0.2, 0.9]
        cfg = Configuration(np.array(xs)[:, None], np.zeros((3, 1)))
        for i in range(3):
            expected = -(1.0 / 3.0) * sum(
                -(xs[i] - xs[j]) * np.exp(-((xs[i] - xs[j]) ** 2) / 2.0)
                for j in range(3) if j != i)
            assert mean_field_force(cfg, phi, i)[0] == pytest.approx(expected, rel=1e-13)

    def test_total_force_vanishes(self, phi, gstd, rng):
        pts = gstd.sample(257, rng)
        cfg = Configuration.from_points(pts)
        total = mean_field_forces(cfg, phi).sum(axis=0)
        assert np.abs(total).max() < 1e-12

    def test_force_bound(self, phi, gstd, rng):
        cfg = Configuration.from_points(gstd.sample(64, rng) * 2)
        forces = mean_field_forces(cfg, phi)
        assert np.abs(forces).max() <= phi.derivative_bound(1)

    def test_index_bounds(self, phi):
        cfg = Configuration(np.zeros((2, 1)), np.zeros((2, 1)))
        with pytest.raises(IndexError):
            mean_field_force(cfg, phi, 5)


class TestMixture:
    def test_normalization_enforced(self):
        with pytest.raises(ConfigError):
            GaussianMixture(np.array([0.5]), np.zeros((1, 2)), np.ones((1, 2)))

    def test_derivatives_match_finite_differences(self, rng):
        g = GaussianMixture(np.array([0.6, 0.4]),
                            np.array([[0.0, 0.0], [1.0, -0.5]]),
                            np.array([[1.0, 1.0], [0.5, 1.5]]))
        z = rng.normal(size=(200, 2))
        for alpha in [(1, 0), (0, 2), (2, 1), (1, 3)]:
            exact = g.derivative(alpha, z)
            approx = fd_derivative(lambda w: g.value(w), z, alpha)
            assert np.abs(exact - approx).max() < 1e-7

    def test_smoothing_adds_variance(self, gstd):
        sm = gstd.smoothed(0.3)
        assert np.allclose(sm.variances, 1.15)

    def test_sampling_moments(self, gstd):
        rng = np.random.Generator(np.random.Philox(key=4))
        pts = gstd.sample(200_000, rng)
        assert np.abs(pts.mean(axis=0)).max() < 4.0 / np.sqrt(200_000)


class TestGrid:
    def test_minimum_nodes(self):
        with pytest.raises(ConfigError):
            GridSpec(-1, 1, -1, 1, 4, 16)

    def test_mass_quadrature(self, gstd, spec256):
        f = gstd.on_grid(spec256)
        # rectangle rule equals the trapezoidal rule for decayed tails
        xs, vs = spec256.xs, spec256.vs
        trap = np.trapezoid(np.trapezoid(f.values, vs, axis=1), xs)
        assert abs(f.mass() - 1.0) < 1e-6
        assert abs(trap - f.mass()) < 1e-9

    def test_value_shape_checked(self, spec256):
        with pytest.raises(ConfigError):
            GridFunction(spec256, np.zeros((3, 3)))

    def test_snapshot_roundtrip(self, gstd, spec256, tmp_path):
        f = gstd.on_grid(spec256)
        path = tmp_path / "state.grid"
        save_snapshot(path, f, 0.75)
        loaded, t = load_snapshot(path)
        assert t == 0.75
        assert loaded.spec == spec256
        assert np.array_equal(loaded.values, f.values)


class TestBankFunctions:
    def test_default_bank_composition(self, bank):
        assert len(bank) == 16
        assert sum(isinstance(u, GaussianBump) for u in bank) == 12
        assert sum(isinstance(u, TanhWindow) for u in bank) == 4

    def test_bounds_on_random_points(self, bank, rng):
        z = rng.normal(size=(10_000, 2)) * 3.0
        for u in bank:
            assert np.abs(u.value(z)).max() <= u.bound(0) * (1 + 1e-12)
            for alpha in [(1, 0), (0, 1), (2, 0), (1, 1)]:
                vals = u.derivative(alpha, z)
                assert np.abs(vals).max() <= u.bound(sum(alpha)) * (1 + 1e-9)

    def test_derivatives_match_finite_differences(self, bank, rng):
        z = rng.normal(size=(300, 2)) * 1.5
        for u in bank:
            for alpha in [(1, 0), (0, 1), (2, 0), (0, 2), (1, 1)]:
                exact = u.derivative(alpha, z)
                approx = fd_derivative(lambda w: u.value(w), z, alpha)
                scale = max(np.abs(exact).max(), 1.0)
                assert np.abs(exact - approx).max() < 1e-6 * scale

    def test_fourth_order_available(self, bank, rng):
        z = rng.normal(size=(10, 2))
        for u in bank:
            u.derivative((2, 2), z)
            u.derivative((4, 0), z)
            with pytest.raises(UnsupportedOrderError):
                u.derivative((3, 2), z)

    def test_window_is_coordinate_near_origin(self):
        w = TanhWindow(2, axis=0, scale=4.0)
        z = np.array([[0.05, 3.0]])
        assert w.value(z)[0] == pytest.approx(0.05, abs=1e-5)


@settings(max_examples=25, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(1, 4))
def test_potential_spherical_symmetry_property(x, y, scale):
    phi = GaussianPotential(d=1, sigma=scale)
    a = phi.value(np.array([[x]]))
    b = phi.value(np.array([[-x]]))
    assert a == b


def test_configuration_validation():
    with pytest.raises(ConfigError):
        Configuration(np.array([[np.nan]]), np.array([[0.0]]))
    with pytest.raises(ConfigError):
        Configuration(np.zeros((0, 1)), np.zeros((0, 1)))
