import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_w1
from hbarlab.errors import CapacityError, ConfigError
from hbarlab.phasespace import Configuration, GaussianMixture, GridSpec
from hbarlab import metrics, nbody
from hbarlab.metrics import (PointCloud, dobrushin_fit, grid_vs_cloud_distance,
                             quantize_grid, sliced_wasserstein, wasserstein_bounded)
from hbarlab.harness import sample_typical


class TestExactSolver:
    def test_identity(self, rng):
        p = PointCloud(rng.normal(size=(10, 2)))
        assert wasserstein_bounded(p, p) == 0.0

    def test_two_singletons(self):
        p = PointCloud(np.array([[0.0, 0.0]]))
        q = PointCloud(np.array([[0.3, 0.4]]))
        assert wasserstein_bounded(p, q) == pytest.approx(0.5, abs=1e-15)

    def test_clamp_never_exceeded(self, rng):
        p = PointCloud(rng.normal(size=(20, 2)))
        q = PointCloud(rng.normal(size=(20, 2)) + 50.0)
        assert wasserstein_bounded(p, q) == pytest.approx(1.0, abs=1e-12)

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_equals_brute_force_assignment(self, n, rng):
        for _ in range(4):
            p = PointCloud(rng.normal(size=(n, 2)))
            q = PointCloud(rng.normal(size=(n, 2)))
            exact = wasserstein_bounded(p, q)
            assert exact == pytest.approx(brute_force_w1(p.points, q.points),
                                          abs=1e-12)

    def test_four_point_uniform_clouds(self, rng):
        p = PointCloud(rng.uniform(-1, 1, size=(4, 2)))
        q = PointCloud(rng.uniform(-1, 1, size=(4, 2)))
        assert wasserstein_bounded(p, q) == pytest.approx(
            brute_force_w1(p.points, q.points), abs=1e-12)

    def test_weighted_transport_lp(self):
        p = PointCloud(np.array([[0.0], [1.0]]), np.array([0.7, 0.3]))
        q = PointCloud(np.array([[0.0], [1.0]]), np.array([0.3, 0.7]))
        assert wasserstein_bounded(p, q) == pytest.approx(0.4, abs=1e-9)

    def test_metric_axioms_on_random_triples(self, rng):
        for _ in range(10):
            a = PointCloud(rng.normal(size=(8, 2)))
            b = PointCloud(rng.normal(size=(8, 2)))
            c = PointCloud(rng.normal(size=(8, 2)))
            ab = wasserstein_bounded(a, b)
            assert ab == pytest.approx(wasserstein_bounded(b, a), abs=1e-12)
            assert wasserstein_bounded(a, c) <= ab + wasserstein_bounded(b, c) + 1e-10

    def test_cap_enforced(self, rng):
        p = PointCloud(rng.normal(size=(40, 2)))
        q = PointCloud(rng.normal(size=(40, 2)))
        with pytest.raises(CapacityError):
            wasserstein_bounded(p, q, cap=32)

    def test_translation_distance(self, rng):
        # offset small against the point spacing, where the translation
        # coupling is optimal even for the concave clamped cost
        pts = rng.normal(size=(64, 2))
        q = PointCloud(pts + np.array([0.02, 0.0]))
        assert wasserstein_bounded(PointCloud(pts), q) == pytest.approx(0.02, abs=1e-12)


class TestSliced:
    def test_identity(self, rng):
        p = PointCloud(rng.normal(size=(30, 2)))
        assert sliced_wasserstein(p, p, 8, seed=0) == 0.0

    def test_deterministic_given_seed(self, rng):
        p = PointCloud(rng.normal(size=(30, 2)))
        q = PointCloud(rng.normal(size=(30, 2)))
        a = sliced_wasserstein(p, q, 16, seed=5)
        b = sliced_wasserstein(p, q, 16, seed=5)
        assert a == b

    def test_one_dimension_single_slice_is_exact(self, rng):
        # displacements well below the spacing: the sorted coupling is optimal
        base = np.linspace(0.0, 4.0, 20) + rng.uniform(-0.02, 0.02, size=20)
        other = base + rng.uniform(0.01, 0.05, size=20)
        p, q = PointCloud(base[:, None]), PointCloud(other[:, None])
        assert sliced_wasserstein(p, q, 1, seed=0) == pytest.approx(
            wasserstein_bounded(p, q), abs=1e-12)

    def test_rank_correlation_with_exact(self):
        from scipy.stats import spearmanr

        rng = np.random.default_rng(7)
        exact, sliced = [], []
        for _ in range(100):
            n = int(rng.integers(16, 65))
            sep = rng.uniform(0.0, 1.2)
            theta = rng.uniform(0, 2 * np.pi)
            off = sep * np.array([np.cos(theta), np.sin(theta)])
            p = PointCloud(rng.normal(size=(n, 2)) * 0.6)
            q = PointCloud(rng.normal(size=(n, 2)) * 0.6 + off)
            exact.append(wasserstein_bounded(p, q))
            sliced.append(sliced_wasserstein(p, q, 64, seed=11))
        assert spearmanr(exact, sliced).statistic > 0.95

    def test_weighted_quantile_path(self):
        p = PointCloud(np.array([[0.0], [2.0]]), np.array([0.75, 0.25]))
        q = PointCloud(np.array([[0.5]]), np.array([1.0]))
        # quantile coupling: 0.75 mass moves 0.5, 0.25 mass clamps at 1
        expected = 0.75 * 0.5 + 0.25 * 1.0
        assert sliced_wasserstein(p, q, 1, seed=0) == pytest.approx(expected, abs=1e-12)


class TestGridCloud:
    def test_sampled_cloud_close_in_testbank_metric(self, gstd, bank, spec256):
        f = gstd.on_grid(spec256)
        cfg = sample_typical(gstd, 10_000, 3)
        cloud = PointCloud.from_configuration(cfg)
        dist = grid_vs_cloud_distance(f, cloud, mode="testbank", bank=bank)
        # Monte-Carlo error scale for the worst bank member
        ses = []
        for u in bank:
            vals = u.value(cloud.points)
            ses.append(vals.std(ddof=1) / np.sqrt(cloud.n))
        assert dist < 4.0 * max(ses)

    def test_quantization_self_distance_zero(self, gstd):
        spec = GridSpec(-6.0, 6.0, -6.0, 6.0, 16, 16)
        f = gstd.on_grid(spec)
        assert grid_vs_cloud_distance(f, quantize_grid(f),
                                      mode="wasserstein-via-quantization") == 0.0

    def test_translation_sensitivity_lower_bound(self, gstd, bank, spec256):
        # gradient bound oracle: shifting the density moves the steepest
        # bank observable by at least ~delta * |<du, f>|
        delta = 0.05
        f = gstd.on_grid(spec256)
        shifted = GaussianMixture(gstd.weights, gstd.means + np.array([delta, 0.0]),
                                  gstd.variances)
        cloud = quantize_grid(shifted.on_grid(GridSpec(-6, 6, -6, 6, 24, 24)))
        zg = spec256.zgrid()
        grads = [abs(float((u.derivative((1, 0), zg) * f.values).sum() * spec256.cell))
                 for u in bank]
        dist = grid_vs_cloud_distance(f, cloud, mode="testbank", bank=bank)
        assert dist >= 0.5 * delta * max(grads)

    def test_unknown_mode(self, gstd, spec256):
        f = gstd.on_grid(spec256)
        with pytest.raises(ConfigError):
            grid_vs_cloud_distance(f, quantize_grid(f), mode="nope")

    def test_quantization_requires_nonnegative(self, gstd, spec256):
        f = gstd.on_grid(spec256)
        f.values[10, 10] = -1.0
        with pytest.raises(ConfigError):
            quantize_grid(f)


class TestDobrushin:
    def _pair_traj(self, phi, gstd, n, seed, delta, times, dt=1e-2):
        base = sample_typical(gstd, n, seed)
        pert = Configuration(base.x, base.v + delta)
        out = []
        for t in times:
            a = nbody.integrate_flow(base, phi, t, dt).final.config
            b = nbody.integrate_flow(pert, phi, t, dt).final.config
            out.append((PointCloud.from_configuration(a),
                        PointCloud.from_configuration(b)))
        return out

    def test_free_flow_velocity_offset_closed_form(self, phi0, gstd):
        times = [0.0, 0.5, 1.0]
        delta = 0.1
        traj = self._pair_traj(phi0, gstd, 64, 1, delta, times)
        ws = [wasserstein_bounded(a, b) for a, b in traj]
        for t, w in zip(times, ws):
            assert w == pytest.approx(min(delta * np.sqrt(1 + t**2), 1.0), abs=1e-10)
        fit = dobrushin_fit([traj], times)
        assert 0 < fit.rate < 0.5

    def test_constant_offset_gives_zero_rate(self, phi0, gstd):
        times = [0.0, 0.5, 1.0]
        base = sample_typical(gstd, 32, 2)
        pert = Configuration(base.x + 0.2, base.v)
        traj = []
        for t in times:
            a = nbody.integrate_flow(base, phi0, t, 1e-2).final.config
            b = nbody.integrate_flow(pert, phi0, t, 1e-2).final.config
            traj.append((PointCloud.from_configuration(a),
                         PointCloud.from_configuration(b)))
        fit = dobrushin_fit([traj], times)
        assert abs(fit.rate) < 1e-10

    def test_degenerate_pair_excluded(self, gstd):
        cloud = PointCloud.from_configuration(sample_typical(gstd, 16, 0))
        traj = [(cloud, cloud)] * 3
        fit = dobrushin_fit([traj], [0.0, 0.5, 1.0])
        assert fit.excluded == [0]
        assert fit.violations == []

    def test_interacting_rate_stable_under_doubling(self, phi, gstd):
        times = [0.0, 0.5, 1.0]
        rates = {}
        for n in (128, 256):
            trajs = [self._pair_traj(phi, gstd, n, seed, 0.1, times)
                     for seed in range(3)]
            rates[n] = dobrushin_fit(trajs, times).rate
        assert abs(rates[256] / rates[128] - 1.0) < 0.2


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_cloud_weights_validated(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 2))
    PointCloud(pts)  # uniform default always valid
    with pytest.raises(ConfigError):
        PointCloud(pts, np.full(n, 1.0))  # does not sum to one unless n == 1


def test_cloud_weight_sum_edge():
    PointCloud(np.zeros((1, 2)), np.array([1.0]))
