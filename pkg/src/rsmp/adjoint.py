"""First- and second-order adjoint processes and their state-constrained counterparts.

All four equations are linear BSDEs along the base solution. The unknown at each
step is obtained from the exact linear solve of y = E + (A y + c) dt, where the
martingale-integrand part of c uses the regression estimate at the same node.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bsde import BsdeSolution, _u, base_bundle, mc_mean_se
from .model import CoeffBundle, ModelSpec, eval_coeffs
from .paths import NoiseEnsemble, TrajectoryEnsemble
from .regression import NodeRegression, RegressionBasis, implicit_step, state_features


@dataclass(frozen=True)
class AdjointProcesses:
    """p, P have M + 1 nodes; q, Q have M. p0, q0, P0, Q0 are set for constrained problems."""

    p: TrajectoryEnsemble
    q: TrajectoryEnsemble
    P: TrajectoryEnsemble
    Q: TrajectoryEnsemble
    p0: Optional[TrajectoryEnsemble] = None
    q0: Optional[TrajectoryEnsemble] = None
    P0: Optional[TrajectoryEnsemble] = None
    Q0: Optional[TrajectoryEnsemble] = None

    def asymmetry(self) -> float:
        P = self.P.values
        return float(np.max(np.abs(P - np.swapaxes(P, -1, -2))))


# -- drivers -----------------------------------------------------------------


def hess_contract(H, v):
    """sum_i v^i H^i for per-component Hessians H[p, i, j, l]: returns (N, n, n)."""
    return np.einsum("pi,pijl->pjl", v, H)


def mT_vec(A, v):
    """A^T v, batched."""
    return np.einsum("pji,pj->pi", A, v)


def p_linear(c: CoeffBundle, q):
    """p driver written as A p + const:

    f_y p + (f_z sigma_x^T + b_x^T) p + f_z q + sigma_x^T q + f_x
    """
    n = c.b_x.shape[-1]
    K = c.f_z[:, None, None] * c.sigma_x + c.b_x
    A = c.f_y[:, None, None] * np.eye(n) + np.swapaxes(K, -1, -2)
    const = c.f_z[:, None] * q + mT_vec(c.sigma_x, q) + c.f_x
    return A, const


def p_driver(c: CoeffBundle, p, q):
    A, const = p_linear(c, q)
    return np.einsum("pij,pj->pi", A, p) + const


def bordered_hessian(c: CoeffBundle, p, q):
    """[I, p, sigma_x^T p + q] D2f [I, p, sigma_x^T p + q]^T, shape (N, n, n)."""
    N, n = p.shape
    B = np.empty((N, n, n + 2))
    B[:, :, :n] = np.eye(n)
    B[:, :, n] = p
    B[:, :, n + 1] = mT_vec(c.sigma_x, p) + q
    return np.einsum("pia,pab,pjb->pij", B, c.D2f, B)


def P_driver_terms(c: CoeffBundle, p, q, P, Q) -> dict:
    """The P-equation driver, term by term in the order of its definition."""
    K = c.f_z[:, None, None] * c.sigma_x + c.b_x
    sx = c.sigma_x
    sxT = np.swapaxes(sx, -1, -2)
    return {
        "f_y P": c.f_y[:, None, None] * P,
        "K^T P": np.swapaxes(K, -1, -2) @ P,
        "P K": P @ K,
        "sigma_x^T P sigma_x": sxT @ P @ sx,
        "f_z Q": c.f_z[:, None, None] * Q,
        "sigma_x^T Q": sxT @ Q,
        "Q sigma_x": Q @ sx,
        "b_xx^T p": hess_contract(c.b_xx, p),
        "sigma_xx^T (f_z p + q)": hess_contract(c.sigma_xx, c.f_z[:, None] * p + q),
        "B D2f B^T": bordered_hessian(c, p, q),
    }


def P_driver(c: CoeffBundle, p, q, P, Q):
    return sum(P_driver_terms(c, p, q, P, Q).values())


def _matrix_operator(f_y, K, sx):
    """Matrix of P -> f_y P + K^T P + P K + sx^T P sx on row-major vec(P): (N, n^2, n^2)."""
    N, n, _ = K.shape
    E = np.eye(n * n).reshape(n * n, n, n)
    KT = np.swapaxes(K, -1, -2)
    sxT = np.swapaxes(sx, -1, -2)
    out = (np.einsum("pij,bjk->pbik", KT, E) + np.einsum("bij,pjk->pbik", E, K)
           + np.einsum("pij,bjk,pkl->pbil", sxT, E, sx))
    if f_y is not None:
        out = out + f_y[:, None, None, None] * E[None]
    return np.swapaxes(out.reshape(N, n * n, n * n), 1, 2)


def P_linear(c: CoeffBundle, p, q, Q):
    K = c.f_z[:, None, None] * c.sigma_x + c.b_x
    L = _matrix_operator(c.f_y, K, c.sigma_x)
    # every term not involving P, i.e. the driver evaluated at P = 0
    return L, P_driver(c, p, q, np.zeros_like(Q), Q)


def p0_linear(c: CoeffBundle, q0):
    """Constrained first-order driver b_x^T p0 + sigma_x^T q0."""
    return np.swapaxes(c.b_x, -1, -2), mT_vec(c.sigma_x, q0)


def P0_driver_terms(c: CoeffBundle, p0, q0, P0, Q0) -> dict:
    sx = c.sigma_x
    sxT = np.swapaxes(sx, -1, -2)
    return {
        "b_x^T P0": np.swapaxes(c.b_x, -1, -2) @ P0,
        "P0 b_x": P0 @ c.b_x,
        "sigma_x^T P0 sigma_x": sxT @ P0 @ sx,
        "sigma_x^T Q0": sxT @ Q0,
        "Q0 sigma_x": Q0 @ sx,
        "b_xx^T p0": hess_contract(c.b_xx, p0),
        "sigma_xx^T q0": hess_contract(c.sigma_xx, q0),
    }


def P0_linear(c: CoeffBundle, p0, q0, Q0):
    L = _matrix_operator(None, c.b_x, c.sigma_x)
    return L, sum(P0_driver_terms(c, p0, q0, np.zeros_like(Q0), Q0).values())


def linear_vector_step(E, A, const, dt):
    """Solve y = E + (A y + const) dt for y of shape (N, m); A is (N, m, m)."""
    m = E.shape[1]
    rhs = E + const * dt
    if m == 1:
        return rhs / (1.0 - A[:, 0, 0] * dt)[:, None]
    lhs = np.eye(m) - A * dt
    return np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]


# -- solvers -----------------------------------------------------------------


def _check(base_solution, noise):
    fwd = base_solution.forward
    if fwd.grid != noise.grid or fwd.N != noise.N:
        raise ValueError("base solution and noise do not match")


def _ens(g, arr, label, seed, policy):
    return TrajectoryEnsemble(g, arr, label, seed, policy)


def solve_p_q(spec: ModelSpec, base_solution: BsdeSolution, noise: NoiseEnsemble,
              basis: RegressionBasis = RegressionBasis(), terminal_scale: float = 1.0):
    """First-order adjoint (p, q) with p(T) = phi_x(xbar(T)). Returns (p, q) ensembles."""
    _check(base_solution, noise)
    fwd = base_solution.forward
    g, N, n = noise.grid, noise.N, spec.n
    u_grid = fwd.policy.on_grid(g)
    xb = fwd.values
    p = np.empty((g.M + 1, N, n))
    q = np.empty((g.M, N, n))
    p[g.M] = terminal_scale * spec.phi_x(xb[g.M])
    for i in range(g.M - 1, -1, -1):
        nr = NodeRegression(state_features(xb[i], basis.degree), noise.dW[i], g.dt, basis, i)
        E, Z = nr.project(p[i + 1])
        c = base_bundle(spec, base_solution, i, u_grid)
        A, const = p_linear(c, Z)
        p[i] = linear_vector_step(E, A, const, g.dt)
        q[i] = Z
    return (_ens(g, p, "p", noise.seed, fwd.policy), _ens(g, q, "q", noise.seed, fwd.policy))


def _matrix_step(nr, Pnext, L_fn, dt, symmetrize):
    N, n, _ = Pnext.shape
    E, Z = nr.project(Pnext.reshape(N, n * n))
    Qm = Z.reshape(N, n, n)
    L, const = L_fn(Qm)
    Pi = linear_vector_step(E, L, const.reshape(N, n * n), dt).reshape(N, n, n)
    if symmetrize:
        Pi = 0.5 * (Pi + np.swapaxes(Pi, -1, -2))
    return Pi, Qm


def solve_P_Q(spec: ModelSpec, base_solution: BsdeSolution, pq, noise: NoiseEnsemble,
              basis: RegressionBasis = RegressionBasis(), symmetrize: bool = False,
              terminal_scale: float = 1.0):
    """Second-order adjoint (P, Q) with P(T) = phi_xx(xbar(T)). ``pq`` is the (p, q) pair."""
    _check(base_solution, noise)
    p, q = pq
    fwd = base_solution.forward
    g, N, n = noise.grid, noise.N, spec.n
    u_grid = fwd.policy.on_grid(g)
    xb = fwd.values
    P = np.empty((g.M + 1, N, n, n))
    Q = np.empty((g.M, N, n, n))
    P[g.M] = terminal_scale * spec.phi_xx(xb[g.M])
    for i in range(g.M - 1, -1, -1):
        nr = NodeRegression(state_features(xb[i], basis.degree), noise.dW[i], g.dt, basis, i)
        c = base_bundle(spec, base_solution, i, u_grid)
        P[i], Q[i] = _matrix_step(nr, P[i + 1], lambda Qm: P_linear(c, p.values[i], q.values[i], Qm),
                                  g.dt, symmetrize)
    return (_ens(g, P, "P", noise.seed, fwd.policy), _ens(g, Q, "Q", noise.seed, fwd.policy))


def solve_adjoints(spec, base_solution, noise, basis=RegressionBasis(), symmetrize=False) -> AdjointProcesses:
    p, q = solve_p_q(spec, base_solution, noise, basis)
    P, Q = solve_P_Q(spec, base_solution, (p, q), noise, basis, symmetrize)
    return AdjointProcesses(p, q, P, Q)


def solve_constrained_adjoints(spec: ModelSpec, base_solution: BsdeSolution, mu: float,
                               noise: NoiseEnsemble, basis: RegressionBasis = RegressionBasis()):
    """(p0, q0, P0, Q0) with terminals mu varphi_x(xbar(T), ybar(0)) and mu varphi_xx(...)."""
    if spec.constraint is None:
        raise ValueError(f"spec {spec.name!r} has no state constraint")
    _check(base_solution, noise)
    con = spec.constraint
    fwd = base_solution.forward
    g, N, n = noise.grid, noise.N, spec.n
    u_grid = fwd.policy.on_grid(g)
    xb = fwd.values
    y0 = np.full(N, base_solution.y0)
    p0 = np.empty((g.M + 1, N, n))
    q0 = np.empty((g.M, N, n))
    P0 = np.empty((g.M + 1, N, n, n))
    Q0 = np.empty((g.M, N, n, n))
    p0[g.M] = mu * con.varphi_x(xb[g.M], y0)
    P0[g.M] = mu * con.varphi_xx(xb[g.M], y0)
    for i in range(g.M - 1, -1, -1):
        nr = NodeRegression(state_features(xb[i], basis.degree), noise.dW[i], g.dt, basis, i)
        c = eval_coeffs(spec, g.t[i], xb[i], _u(u_grid, i, N))
        E, Z = nr.project(p0[i + 1])
        A, const = p0_linear(c, Z)
        p0[i] = linear_vector_step(E, A, const, g.dt)
        q0[i] = Z
        P0[i], Q0[i] = _matrix_step(nr, P0[i + 1], lambda Qm: P0_linear(c, p0[i], q0[i], Qm), g.dt, False)
    pol, s = fwd.policy, noise.seed
    return (_ens(g, p0, "p0", s, pol), _ens(g, q0, "q0", s, pol),
            _ens(g, P0, "P0", s, pol), _ens(g, Q0, "Q0", s, pol))


def constraint_value(spec: ModelSpec, base_solution: BsdeSolution) -> tuple[float, float]:
    """E[varphi(xbar(T), ybar(0))] with its standard error (feasibility of the candidate)."""
    fwd = base_solution.forward
    xT = fwd.values[fwd.grid.M]
    return mc_mean_se(spec.constraint.varphi(xT, np.full(fwd.N, base_solution.y0)))


def expected_varphi_y(spec: ModelSpec, base_solution: BsdeSolution) -> float:
    fwd = base_solution.forward
    xT = fwd.values[fwd.grid.M]
    return float(np.mean(spec.constraint.varphi_y(xT, np.full(fwd.N, base_solution.y0))))


# -- streaming ---------------------------------------------------------------


@dataclass
class BaseNode:
    """Base quantities at one node of a backward sweep (nothing else is kept)."""

    i: int
    t: float
    y: np.ndarray
    z: np.ndarray
    p: np.ndarray
    q: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    coeffs: CoeffBundle


def stream_base(spec: ModelSpec, grid, dW, xb, ub, basis: RegressionBasis = RegressionBasis()):
    """Backward sweep for (ybar, zbar, p, q, P, Q) sharing one regression per node.

    Yields :class:`BaseNode` for i = M - 1, ..., 0 and keeps O(N) memory. ``xb`` is
    the (M + 1, N, n) base state and ``ub`` the (M + 1, k) control on the grid.
    """
    M, dt, N, n = grid.M, grid.dt, xb.shape[1], spec.n
    yb = spec.phi(xb[M])
    p = spec.phi_x(xb[M])
    P = spec.phi_xx(xb[M])
    for i in range(M - 1, -1, -1):
        t, xi = grid.t[i], xb[i]
        u = np.broadcast_to(ub[i], (N, spec.k))
        nr = NodeRegression(state_features(xi, basis.degree), dW[i], dt, basis, i)
        E, Z = nr.project(np.column_stack([yb, p, P.reshape(N, n * n)]))
        zb = Z[:, 0]
        yb = implicit_step(E[:, 0], lambda yy: spec.f(t, xi, yy, zb, u), dt, basis, i,
                           g_y=lambda yy: spec.Df(t, xi, yy, zb, u)[:, n])
        c = eval_coeffs(spec, t, xi, u, yb, zb)
        q = Z[:, 1:1 + n]
        A, const = p_linear(c, q)
        p = linear_vector_step(E[:, 1:1 + n], A, const, dt)
        Qm = Z[:, 1 + n:].reshape(N, n, n)
        L, constP = P_linear(c, p, q, Qm)
        P = linear_vector_step(E[:, 1 + n:], L, constP.reshape(N, n * n), dt).reshape(N, n, n)
        yield BaseNode(i, t, yb, zb, p, q, P, Qm, c)
