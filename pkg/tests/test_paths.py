import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rsmp.benchmarks import get_benchmark, scalar_spec
from rsmp.model import ConstantPolicy, FiniteControlSet, ModelEvaluationError, SpikeConfig
from rsmp.paths import (
    BLOCK_SIZE,
    TimeGrid,
    TrajectoryEnsemble,
    gamma_from_coefficients,
    generate_noise,
    simulate_forward,
    simulate_x1,
    simulate_x2,
)
from rsmp.variation import make_spike_control


class TestTimeGrid:
    def test_nodes(self):
        g = TimeGrid(2.0, 8)
        assert g.dt == 0.25
        assert g.t[-1] == 2.0
        assert g.node(0.75) == 3

    def test_rejects_off_grid_time(self):
        with pytest.raises(ValueError):
            TimeGrid(1.0, 8).node(0.1)

    @pytest.mark.parametrize("T,M", [(0.0, 4), (1.0, 0), (1.0, 2.5)])
    def test_invalid(self, T, M):
        with pytest.raises(ValueError):
            TimeGrid(T, M)


class TestNoise:
    def test_deterministic(self):
        g = TimeGrid(1.0, 16)
        a, b = generate_noise(g, 500, 7), generate_noise(g, 500, 7)
        np.testing.assert_array_equal(a.dW, b.dW)
        assert not np.array_equal(a.dW, generate_noise(g, 500, 8).dW)

    @given(st.integers(1, 3 * BLOCK_SIZE), st.integers(0, 2**32))
    def test_prefix_invariance(self, n, seed):
        g = TimeGrid(1.0, 4)
        big = generate_noise(g, 3 * BLOCK_SIZE, seed)
        small = generate_noise(g, n, seed)
        np.testing.assert_array_equal(small.dW, big.dW[:, :n])

    def test_moments(self):
        g = TimeGrid(1.0, 32)
        nz = generate_noise(g, 20000, 1)
        z = nz.dW / np.sqrt(g.dt)
        assert abs(z.mean()) < 4 / np.sqrt(z.size)
        assert abs(z.var() - 1) < 4 * np.sqrt(2 / z.size)

    def test_read_only(self):
        nz = generate_noise(TimeGrid(1.0, 4), 10, 1)
        with pytest.raises(ValueError):
            nz.dW[0, 0] = 1.0

    def test_brownian_motion(self):
        nz = generate_noise(TimeGrid(1.0, 4), 10, 1)
        np.testing.assert_allclose(nz.W(4), nz.dW.sum(axis=0))
        np.testing.assert_array_equal(nz.W(0), 0.0)

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            generate_noise(TimeGrid(1.0, 4), 0, 1)
        with pytest.raises(ValueError):
            generate_noise(TimeGrid(1.0, 4), 5, -1)


class TestEnsemble:
    def test_shape_checks(self):
        g = TimeGrid(1.0, 4)
        with pytest.raises(ValueError):
            TrajectoryEnsemble(g, np.zeros((3, 2, 1)), "x")
        e = TrajectoryEnsemble(g, np.zeros((5, 2, 1)), "x")
        assert e.N == 2 and e.n_nodes == 5 and e.shape == (1,)
        with pytest.raises(ValueError):
            e.values[0, 0, 0] = 1.0


class TestForward:
    def test_additive_noise_is_brownian(self):
        spec = get_benchmark("linear").spec()
        nz = generate_noise(TimeGrid(1.0, 32), 100, 2)
        x = simulate_forward(spec, get_benchmark("linear").base_policy(), nz)
        np.testing.assert_allclose(x.values[-1, :, 0], nz.W(32), atol=1e-14)

    def test_non_finite_path_reported(self):
        spec = get_benchmark("quadratic").spec()
        bad = dataclasses.replace(spec, b=lambda t, x, u: 1e200 * x**2 + 1e200)
        nz = generate_noise(TimeGrid(1.0, 8), 4, 1)
        with pytest.warns(RuntimeWarning), pytest.raises(ModelEvaluationError, match="path 0 at step"):
            simulate_forward(bad, get_benchmark("quadratic").base_policy(), nz)


class TestVariations:
    def setup_method(self):
        self.bench = get_benchmark("example")
        self.spec = self.bench.spec()
        self.grid = TimeGrid(1.0, 64)
        self.noise = generate_noise(self.grid, 300, 4)
        self.base = simulate_forward(self.spec, self.bench.base_policy(), self.noise)
        self.spike = SpikeConfig(0.25, 0.125, [1.0])

    def test_example_x1_is_exact(self):
        # b = 0 and sigma = u: x_eps - xbar = int_E dW = x1, and x2 = 0
        pol = make_spike_control(self.bench.base_policy(), self.spike)
        xe = simulate_forward(self.spec, pol, self.noise)
        x1 = simulate_x1(self.spec, self.base, self.spike, self.noise)
        x2 = simulate_x2(self.spec, self.base, x1, self.spike, self.noise)
        np.testing.assert_array_equal(x1.values, xe.values - self.base.values)
        np.testing.assert_array_equal(x2.values, 0.0)

    def test_flip_negates(self):
        a = simulate_x1(self.spec, self.base, self.spike, self.noise)
        b = simulate_x1(self.spec, self.base, self.spike, self.noise, flip_delta_sigma=True)
        np.testing.assert_array_equal(a.values, -b.values)

    def test_noise_mismatch_rejected(self):
        other = generate_noise(self.grid, 200, 4)
        with pytest.raises(ValueError):
            simulate_x1(self.spec, self.base, self.spike, other)

    def test_quadratic_second_order_remainder_small(self):
        bench = get_benchmark("quadratic")
        spec = bench.spec()
        base = simulate_forward(spec, bench.base_policy(), self.noise)
        res = []
        for eps in (1 / 8, 1 / 32):
            sp = SpikeConfig(0.25, eps, [1.0])
            xe = simulate_forward(spec, make_spike_control(bench.base_policy(), sp), self.noise)
            x1 = simulate_x1(spec, base, sp, self.noise)
            x2 = simulate_x2(spec, base, x1, sp, self.noise)
            r = xe.values - base.values - x1.values - x2.values
            res.append(np.mean(np.max(r[..., 0] ** 2, axis=0)))
        # o(eps^2) in mean square: quartering eps must shrink it by well over 16
        assert res[1] < res[0] / 16

    def test_pure_drift_spike(self):
        # b = x^2 + u, sigma = 0: x1 vanishes and x2 carries the whole first-order effect
        zero = lambda t, x, u: 0.0 * x
        spec = scalar_spec(
            "drift", T=1.0, x0=0.5, b=lambda t, x, u: x**2 + u, b_x=lambda t, x, u: 2 * x,
            b_xx=lambda t, x, u: 2.0 + 0 * x, sigma=zero, sigma_x=zero, sigma_xx=zero,
            f=lambda t, x, y, z, u: 0 * x, f_grad=lambda t, x, y, z, u: (0.0, 0.0, 0.0),
            f_hess=lambda t, x, y, z, u: ((0.0,) * 3,) * 3, phi=lambda x: x, phi_x=lambda x: 1.0 + 0 * x,
            phi_xx=lambda x: 0 * x, control_set=FiniteControlSet([[0.0], [1.0]]))
        base_policy = ConstantPolicy([0.0])
        base = simulate_forward(spec, base_policy, self.noise)
        res = []
        for eps in (1 / 8, 1 / 16, 1 / 32):
            sp = SpikeConfig(0.25, eps, [1.0])
            xe = simulate_forward(spec, make_spike_control(base_policy, sp), self.noise)
            x1 = simulate_x1(spec, base, sp, self.noise)
            x2 = simulate_x2(spec, base, x1, sp, self.noise)
            np.testing.assert_array_equal(x1.values, 0.0)
            r = xe.values - base.values - x2.values
            res.append(np.mean(np.max(r[..., 0] ** 2, axis=0)))
        slope = np.polyfit(np.log([1 / 8, 1 / 16, 1 / 32]), np.log(res), 1)[0]
        assert slope > 2.1


class TestGamma:
    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0.1, 3.0))
    def test_constant_coefficients_closed_form(self, fy, fz, g0):
        g = TimeGrid(1.0, 16)
        nz = generate_noise(g, 50, 9)
        gam = gamma_from_coefficients(np.full((16, 50), fy), np.full((16, 50), fz), nz.dW, g0, g.dt)
        exact = g0 * np.exp((fy - 0.5 * fz**2) * g.t[:, None] + fz * np.vstack([np.zeros(50), np.cumsum(nz.dW, 0)]))
        np.testing.assert_allclose(gam, exact, rtol=1e-12)
        assert np.all(gam > 0)

    def test_requires_dt(self):
        with pytest.raises(ValueError):
            gamma_from_coefficients(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
