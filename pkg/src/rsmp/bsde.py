"""Backward Euler with least-squares regression for the cost BSDE and the linear variational BSDEs.

Scheme at step i (t_i -> t_{i+1}):

    z_i = E[y_{i+1} dW_i | F_i] / dt
    y_i = E[y_{i+1} | F_i] + g(t_i, y_i, z_i) dt      (implicit in y_i)

Conditional expectations come from :class:`~rsmp.regression.NodeRegression`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import CoeffBundle, ModelSpec, SpikeConfig, eval_coeffs
from .paths import NoiseEnsemble, TrajectoryEnsemble
from .regression import (
    NodeDiagnostics,
    NodeRegression,
    RegressionBasis,
    implicit_step,
    state_features,
    variational_features,
)


@dataclass(frozen=True)
class BsdeSolution:
    """(y, z) on the grid; y has M + 1 nodes, z has M (left-point) nodes.

    ``y0`` is the node-0 estimate and ``y0_se`` the Monte Carlo standard error of
    the pathwise representation terminal + sum(driver * dt).
    """

    forward: TrajectoryEnsemble
    y: TrajectoryEnsemble
    z: TrajectoryEnsemble
    basis: RegressionBasis
    y0: float
    y0_se: float
    diagnostics: list = field(default_factory=list, repr=False, compare=False)
    label: str = "y"


def _u(policy_grid, i, N):
    return np.broadcast_to(policy_grid[i], (N, policy_grid.shape[1]))


def base_bundle(spec: ModelSpec, sol: BsdeSolution, i: int, u_grid: Optional[np.ndarray] = None) -> CoeffBundle:
    """Coefficients along the base solution (x, y, z, u) at node i < M."""
    fwd = sol.forward
    if u_grid is None:
        u_grid = fwd.policy.on_grid(fwd.grid)
    return eval_coeffs(spec, fwd.grid.t[i], fwd.values[i], _u(u_grid, i, fwd.N),
                       sol.y.values[i], sol.z.values[i])


def spike_forcing(spec: ModelSpec, t: float, xb, yb, zb, ub, u, p, q, P) -> np.ndarray:
    """<p, db> + <q, ds> + 1/2 <P ds, ds> + f(t, xb, yb, zb + <p, ds>, u) - f(t, xb, yb, zb, ub).

    All arguments are batched over paths; ``ds``/``db`` are the coefficient jumps
    at xb when ub is replaced by u.
    """
    N = xb.shape[0]
    uu = np.broadcast_to(u, (N, spec.k))
    db = spec.b(t, xb, uu) - spec.b(t, xb, ub)
    ds = spec.sigma(t, xb, uu) - spec.sigma(t, xb, ub)
    pds = np.einsum("pi,pi->p", p, ds)
    quad = 0.5 * np.einsum("pi,pij,pj->p", ds, P, ds)
    return (np.einsum("pi,pi->p", p, db) + np.einsum("pi,pi->p", q, ds) + quad
            + spec.f(t, xb, yb, zb + pds, uu) - spec.f(t, xb, yb, zb, ub))


def mc_mean_se(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    se = float(samples.std(ddof=1) / np.sqrt(n)) if n > 1 else float("inf")
    return float(samples.mean()), se


def backward_solve(grid, dW, features: Callable, terminal: np.ndarray, step: Callable,
                   basis: RegressionBasis):
    """Generic sweep. ``step(i, E, Z)`` returns (y_i, driver_i) with the shapes of the target.

    Returns (y, z, eta, diagnostics) where eta = terminal + sum_i driver_i dt per path.
    """
    M, dt = grid.M, grid.dt
    Y = np.asarray(terminal, dtype=float)
    y = np.empty((M + 1,) + Y.shape)
    z = np.empty((M,) + Y.shape)
    y[M] = Y
    eta = Y.copy()
    diags = []
    for i in range(M - 1, -1, -1):
        nr = NodeRegression(features(i), dW[i], dt, basis, i)
        diags.append(nr.diagnostics)
        E, Z = nr.project(Y)
        Y, drv = step(i, E, Z)
        y[i] = Y
        z[i] = Z
        eta += drv * dt
    diags.reverse()
    return y, z, eta, diags


def _solution(forward, y, z, eta, diags, basis, label, seed, policy):
    g = forward.grid
    _, se = mc_mean_se(eta)
    # the regression value at node 0 is the estimator; eta only supplies the error bar
    y0 = float(np.mean(y[0]))
    zlabel = "z" + label[1:] if label.startswith("y") else label + "_z"
    return BsdeSolution(
        forward,
        TrajectoryEnsemble(g, y, label, seed, policy),
        TrajectoryEnsemble(g, z, zlabel, seed, policy),
        basis, y0, se, diags, label,
    )


def solve_bsde(spec: ModelSpec, forward: TrajectoryEnsemble, noise: NoiseEnsemble,
               basis: RegressionBasis = RegressionBasis(), policy=None, label: str = "y") -> BsdeSolution:
    """Cost BSDE y(t) = phi(x(T)) + int_t^T f(s, x, y, z, u) ds - int_t^T z dW along ``forward``."""
    policy = policy or forward.policy
    g, N, n = noise.grid, noise.N, spec.n
    if forward.grid != g or forward.N != N:
        raise ValueError("forward ensemble and noise do not match")
    u = policy.on_grid(g)
    x = forward.values

    def step(i, E, Z):
        t, xi, ui = g.t[i], x[i], _u(u, i, N)
        y = implicit_step(E, lambda yy: spec.f(t, xi, yy, Z, ui), g.dt, basis, i,
                          g_y=lambda yy: spec.Df(t, xi, yy, Z, ui)[:, n])
        return y, spec.f(t, xi, y, Z, ui)

    y, z, eta, diags = backward_solve(
        g, noise.dW, lambda i: state_features(x[i], basis.degree), spec.phi(x[g.M]), step, basis
    )
    return _solution(forward, y, z, eta, diags, basis, label, noise.seed, policy)


def linear_scalar_step(E, Z, f_y, f_z, forcing, dt):
    """y = E + (f_y y + f_z Z + forcing) dt solved exactly; returns (y, driver)."""
    y = (E + (f_z * Z + forcing) * dt) / (1.0 - f_y * dt)
    return y, f_y * y + f_z * Z + forcing


def _spike_rows(spec, sol, spike, i, u_grid, adjoints):
    fwd = sol.forward
    t, N = fwd.grid.t[i], fwd.N
    return spike_forcing(spec, t, fwd.values[i], sol.y.values[i], sol.z.values[i], _u(u_grid, i, N),
                         spike.u, adjoints.p.values[i], adjoints.q.values[i], adjoints.P.values[i])


def solve_variational_bsde(spec: ModelSpec, base_solution: BsdeSolution, adjoints, spike: SpikeConfig,
                           x1: TrajectoryEnsemble, noise: NoiseEnsemble,
                           basis: RegressionBasis = RegressionBasis(),
                           x2: Optional[TrajectoryEnsemble] = None) -> BsdeSolution:
    """(y_hat, z_hat): driver f_y y + f_z z + spike forcing * I_E, zero terminal value."""
    fwd = base_solution.forward
    g, N = noise.grid, noise.N
    ind = spike.indicator(g)
    u_grid = fwd.policy.on_grid(g)
    xb = fwd.values

    def step(i, E, Z):
        c = base_bundle(spec, base_solution, i, u_grid)
        forcing = _spike_rows(spec, base_solution, spike, i, u_grid, adjoints) if ind[i] else 0.0
        return linear_scalar_step(E, Z, c.f_y, c.f_z, forcing, g.dt)

    def feats(i):
        return variational_features(xb[i], x1.values[i], None if x2 is None else x2.values[i], basis.degree)

    y, z, eta, diags = backward_solve(g, noise.dW, feats, np.zeros(N), step, basis)
    return _solution(fwd, y, z, eta, diags, basis, "y_hat", noise.seed, fwd.policy)


def hat_y0_via_gamma(spec: ModelSpec, base_solution: BsdeSolution, adjoints, gamma: TrajectoryEnsemble,
                     spike: SpikeConfig) -> tuple[float, float]:
    """E[int_0^T gamma(s) (spike forcing)(s) I_E(s) ds] with its standard error."""
    fwd = base_solution.forward
    g = fwd.grid
    ind = spike.indicator(g)
    u_grid = fwd.policy.on_grid(g)
    acc = np.zeros(fwd.N)
    for i in np.flatnonzero(ind[:-1]):
        acc += gamma.values[i].reshape(fwd.N) * _spike_rows(spec, base_solution, spike, i, u_grid, adjoints) * g.dt
    return mc_mean_se(acc)


def _dot(a, b):
    return np.einsum("pi,pi->p", a, b)


def solve_first_expansion(spec: ModelSpec, base_solution: BsdeSolution, x1: TrajectoryEnsemble,
                          spike: SpikeConfig, noise: NoiseEnsemble,
                          basis: RegressionBasis = RegressionBasis(), adjoints=None) -> BsdeSolution:
    """(y1~, z1~): driver <f_x, x1> + f_y y + f_z z, terminal <phi_x(xbar(T)), x1(T)>."""
    fwd = base_solution.forward
    g = noise.grid
    u_grid = fwd.policy.on_grid(g)
    xb = fwd.values

    def step(i, E, Z):
        c = base_bundle(spec, base_solution, i, u_grid)
        return linear_scalar_step(E, Z, c.f_y, c.f_z, _dot(c.f_x, x1.values[i]), g.dt)

    terminal = _dot(spec.phi_x(xb[g.M]), x1.values[g.M])
    y, z, eta, diags = backward_solve(
        g, noise.dW, lambda i: variational_features(xb[i], x1.values[i], None, basis.degree),
        terminal, step, basis,
    )
    return _solution(fwd, y, z, eta, diags, basis, "y1_tilde", noise.seed, fwd.policy)


def second_expansion_forcing(spec, c: CoeffBundle, t, xb, yb, zb, ub, u, p, x1, x2, y1t, z1t, on_spike):
    """Driver terms of the second expansion that do not involve (y2~, z2~)."""
    v = np.concatenate([x1, y1t[:, None], z1t[:, None]], axis=1)
    out = _dot(c.f_x, x2) + 0.5 * np.einsum("pi,pij,pj->p", v, c.D2f, v)
    if on_spike:
        N = xb.shape[0]
        uu = np.broadcast_to(u, (N, spec.k))
        ds = spec.sigma(t, xb, uu) - spec.sigma(t, xb, ub)
        pds = _dot(p, ds)
        n = spec.n
        out = out + (spec.f(t, xb, yb, zb + pds, uu) - spec.f(t, xb, yb, zb, ub)
                     - c.f_z * pds - 0.5 * c.D2f[:, n + 1, n + 1] * pds**2)
    return out


def solve_second_expansion(spec: ModelSpec, base_solution: BsdeSolution, x1: TrajectoryEnsemble,
                           x2: TrajectoryEnsemble, spike: SpikeConfig, adjoints, first: BsdeSolution,
                           noise: NoiseEnsemble, basis: RegressionBasis = RegressionBasis()) -> BsdeSolution:
    """(y2~, z2~): driver <f_x, x2> + f_y y + f_z z + 1/2 v D2f v^T with v = (x1, y1~, z1~),
    plus [f(zbar + <p, ds>, u) - f - f_z <p, ds> - 1/2 f_zz <p, ds>^2] I_E;
    terminal <phi_x, x2(T)> + 1/2 <phi_xx x1(T), x1(T)>.
    """
    fwd = base_solution.forward
    g, N = noise.grid, noise.N
    ind = spike.indicator(g)
    u_grid = fwd.policy.on_grid(g)
    xb = fwd.values

    def step(i, E, Z):
        c = base_bundle(spec, base_solution, i, u_grid)
        forcing = second_expansion_forcing(
            spec, c, g.t[i], xb[i], base_solution.y.values[i], base_solution.z.values[i],
            _u(u_grid, i, N), spike.u, adjoints.p.values[i], x1.values[i], x2.values[i],
            first.y.values[i], first.z.values[i], ind[i],
        )
        return linear_scalar_step(E, Z, c.f_y, c.f_z, forcing, g.dt)

    x1T, xbT = x1.values[g.M], xb[g.M]
    terminal = _dot(spec.phi_x(xbT), x2.values[g.M]) + 0.5 * np.einsum(
        "pi,pij,pj->p", x1T, spec.phi_xx(xbT), x1T)
    y, z, eta, diags = backward_solve(
        g, noise.dW, lambda i: variational_features(xb[i], x1.values[i], x2.values[i], basis.degree),
        terminal, step, basis,
    )
    return _solution(fwd, y, z, eta, diags, basis, "y2_tilde", noise.seed, fwd.policy)
