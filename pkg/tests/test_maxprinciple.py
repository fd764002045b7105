import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rsmp.adjoint import solve_constrained_adjoints
from rsmp.benchmarks import example_spec, quadratic_spec, scaled_constraint, terminal_mean_constraint
from rsmp.maxprinciple import (
    ConstraintMultipliers,
    check_constrained_mp,
    check_convex_corollary,
    check_mp,
    constrained_hamiltonian,
    hamiltonian,
    hamiltonian_terms,
    stream_check_mp,
)
from rsmp.paths import simulate_gamma

from conftest import solve_small


def _point(spec, u, ref_u=0.0, x=0.0, y=0.0, z=0.0, p=1.0, q=0.0, P=0.0):
    return hamiltonian(spec, 0.3, np.array([x]), y, z, np.array([u]), np.array([p]), np.array([q]),
                       np.array([[P]]), np.array([x]), np.array([ref_u]))


class TestHamiltonian:
    def test_example_values(self):
        spec = example_spec()
        assert _point(spec, 1.0) == pytest.approx(0.75)
        assert _point(spec, 0.0) == 0.0

    def test_curvature_term_isolated(self):
        spec = example_spec()
        # p = 0 leaves z untouched; the P term adds 1/2 P (u - ref)^2
        assert _point(spec, 1.0, p=0.0, P=2.0) - _point(spec, 1.0, p=0.0) == pytest.approx(1.0)

    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
           st.floats(-1, 1), st.floats(0, 1))
    def test_terms_sum(self, x, z, p, q, P, y, u):
        spec = quadratic_spec()
        args = (0.2, np.array([[x]]), np.array([y]), np.array([z]), np.array([[u]]), np.array([[p]]),
                np.array([[q]]), np.array([[[P]]]), np.array([[x]]), np.array([[0.3]]))
        terms = hamiltonian_terms(spec, *args)
        assert hamiltonian(spec, *args)[0] == pytest.approx(sum(v[0] for v in terms.values()), abs=1e-12)

    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(0, 1))
    def test_curvature_vanishes_at_reference_control(self, x, z, u):
        spec = quadratic_spec()
        h = _point(spec, u, ref_u=u, x=x, z=z, p=0.7, q=-0.2, P=0.4)
        assert h == pytest.approx(_point(spec, u, ref_u=u, x=x, z=z, p=0.7, q=-0.2, P=0.0), abs=1e-12)

    def test_constrained_reduces_to_scaled(self, rng):
        spec = quadratic_spec()
        N = 50
        x, y, z = rng.normal(size=(N, 1)), rng.normal(size=N), rng.normal(size=N)
        p, q, P = rng.normal(size=(N, 1)), rng.normal(size=(N, 1)), rng.normal(size=(N, 1, 1))
        g = rng.uniform(0.5, 2.0, size=N)
        u, ref = np.array([1.0]), np.array([0.0])
        zero, zeroP = np.zeros((N, 1)), np.zeros((N, 1, 1))
        hc = constrained_hamiltonian(spec, 0.1, (x, y, z), u, (x, ref), (zero, zero, zeroP, p, q, P), g)
        # gamma H with the P term weighted by gamma as well
        h = hamiltonian(spec, 0.1, x, y, z, u, p, q, P, x, np.broadcast_to(ref, (N, 1)))
        np.testing.assert_allclose(hc, g * h, rtol=1e-12, atol=1e-12)


class TestCheckMP:
    def test_example_holds(self, example_small):
        s = example_small
        rep = check_mp(s.spec, s.solution, s.adjoints)
        assert rep.ok
        b = int(np.flatnonzero(rep.controls[:, 0] == 1.0)[0])
        np.testing.assert_allclose(rep.mean[:, b], 0.75, atol=1e-9)
        np.testing.assert_allclose(rep.first_order_mean[:, b], -0.25, atol=1e-9)
        assert np.all(rep.first_order_violation()[:, b])

    def test_stream_matches_stored(self, quadratic_small):
        s = quadratic_small
        a = check_mp(s.spec, s.solution, s.adjoints, node_stride=4)
        b = stream_check_mp(s.spec, s.forward, s.noise, node_stride=4)
        np.testing.assert_allclose(a.mean, b.mean, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(a.se, b.se, rtol=1e-8, atol=1e-12)
        assert a.violated == b.violated

    def test_box_violation(self):
        s = solve_small("example_box", N=300, M=16)
        rep = check_mp(s.spec, s.solution, s.adjoints)
        assert rep.violated
        bad = rep.violating_controls()[:, 0]
        assert bad.min() > 0.0 and bad.max() < 0.5
        assert rep.worst_mean["u"] == [pytest.approx(0.29)]
        assert rep.worst_mean["value"] == pytest.approx(0.29**3 - 0.25 * 0.29, abs=1e-9)

    def test_report_outputs(self, example_small):
        s = example_small
        rep = check_mp(s.spec, s.solution, s.adjoints, node_stride=8, keep_cells=True)
        d = json.loads(rep.to_json())
        assert d["violated"] is False and d["n_nodes"] == 8
        assert len(rep.to_csv().splitlines()) == 1 + 8 * 2
        assert rep.cells.shape == (8, s.forward.N, 2)
        with pytest.raises(ValueError):
            check_mp(s.spec, s.solution, s.adjoints, node_stride=8).cells_csv()

    def test_grid_checks(self, example_small):
        s = example_small
        with pytest.raises(ValueError):
            check_mp(s.spec, s.solution, s.adjoints, control_grid=np.empty((0, 1)))
        with pytest.raises(ValueError):
            check_mp(s.spec, s.solution, s.adjoints, control_grid=[[0.0, 1.0]])
        with pytest.raises(ValueError):
            check_mp(s.spec, s.solution, s.adjoints, node_stride=0)


class TestConvexCorollary:
    def test_example_gradient(self, example_small):
        s = example_small
        rep = check_convex_corollary(s.spec, s.solution, s.adjoints)
        b = int(np.flatnonzero(rep.controls[:, 0] == 1.0)[0])
        np.testing.assert_allclose(rep.mean[:, b], -0.25, atol=1e-9)
        assert rep.violated

    def test_requires_u_derivatives(self, example_small):
        s = example_small
        spec = s.spec.__class__(**{**s.spec.__dict__, "b_u": None})
        with pytest.raises(ValueError):
            check_convex_corollary(spec, s.solution, s.adjoints)


class TestMultipliers:
    def test_circle(self):
        pts = ConstraintMultipliers.circle(720)
        assert len(pts) == 720
        assert all(abs(m.lam**2 + m.mu**2 - 1) <= 1e-12 for m in pts)
        assert (pts[0].lam, pts[0].mu) == (1.0, 0.0)

    def test_invariant(self):
        with pytest.raises(ValueError):
            ConstraintMultipliers(1.0, 0.1)
        with pytest.raises(ValueError):
            ConstraintMultipliers.circle(0)


def _constrained(s, **kw):
    gamma = simulate_gamma(s.spec, s.solution, s.noise)
    return check_constrained_mp(s.spec, s.solution, s.adjoints, gamma, s.noise, **kw), gamma


class TestConstrained:
    def test_vacuous_reduces_to_unconstrained(self, vacuous_small):
        s = vacuous_small
        res, gamma = _constrained(s, keep_cells=True, node_stride=4)
        assert (res.multipliers.lam, res.multipliers.mu) == (1.0, 0.0)
        plain = check_mp(s.spec, s.solution, s.adjoints, keep_cells=True, node_stride=4)
        g = gamma.values[plain.nodes].reshape(len(plain.nodes), -1, 1)
        np.testing.assert_allclose(res.report.cells, g * plain.cells, atol=1e-10)
        np.testing.assert_array_equal(res.report.violation, plain.violation)
        assert res.feasible and res.ok

    def test_cost_level_multipliers(self):
        s = solve_small("example_costlevel", N=500, M=16)
        res, _ = _constrained(s)
        assert res.multipliers.lam == pytest.approx(math.sqrt(0.5), abs=1e-12)
        assert res.multipliers.mu == pytest.approx(math.sqrt(0.5), abs=1e-12)
        flipped = s.spec.with_constraint(scaled_constraint(s.spec.constraint, -1.0))
        res2 = check_constrained_mp(flipped, s.solution, s.adjoints, simulate_gamma(flipped, s.solution, s.noise),
                                    s.noise)
        assert res2.multipliers.lam == pytest.approx(res.multipliers.lam, abs=1e-12)
        assert res2.multipliers.mu == pytest.approx(-res.multipliers.mu, abs=1e-12)
        assert len(res.summary_lines()) >= 3
        assert json.loads(res.to_json())["feasible"] is True

    def test_mu_linearity(self, quadratic_small):
        s = quadratic_small
        spec = s.spec.with_constraint(terminal_mean_constraint(0.5))
        one = solve_constrained_adjoints(spec, s.solution, 1.0, s.noise)
        two = solve_constrained_adjoints(spec, s.solution, 2.5, s.noise)
        for a, b in zip(one, two):
            np.testing.assert_allclose(b.values, 2.5 * a.values, rtol=1e-10, atol=1e-12)

    def test_infeasible_warns(self, quadratic_small):
        s = quadratic_small
        spec = s.spec.with_constraint(terminal_mean_constraint(5.0))
        gamma = simulate_gamma(spec, s.solution, s.noise)
        with pytest.warns(RuntimeWarning):
            res = check_constrained_mp(spec, s.solution, s.adjoints, gamma, s.noise, node_stride=16,
                                       circle_points=8)
        assert not res.feasible

    def test_requires_constraint(self, example_small):
        s = example_small
        with pytest.raises(ValueError):
            _constrained(s)
