"""Brownian noise and forward Euler schemes for the state, its variations and the exponential adjoint."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ControlPolicy, ModelEvaluationError, ModelSpec, SpikeConfig

# Paths are generated in fixed-size blocks, each with its own child seed, so the
# increments of a path never depend on how the ensemble is partitioned.
BLOCK_SIZE = 8192

# spawn-key offsets for independent random streams derived from one seed
STREAM_NOISE = 0
STREAM_VALIDATION = 1


@dataclass(frozen=True)
class TimeGrid:
    T: float
    M: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("T must be positive")
        if int(self.M) != self.M or self.M < 1:
            raise ValueError("M must be a positive integer")

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.dt

    def node(self, time: float) -> int:
        """Index of the node at ``time``; raises if ``time`` is not a node."""
        a = time / self.dt
        i = int(round(a))
        if abs(a - i) > 1e-8 or not 0 <= i <= self.M:
            raise ValueError(f"time {time} is not a grid node (dt={self.dt})")
        return i


@dataclass(frozen=True)
class NoiseEnsemble:
    """Brownian increments dW[i, path] over [t_i, t_{i+1})."""

    grid: TimeGrid
    N: int
    seed: int
    dW: np.ndarray = field(repr=False)

    def W(self, i: int) -> np.ndarray:
        """Brownian motion at node i on every path."""
        if i == 0:
            return np.zeros(self.N)
        return self.dW[:i].sum(axis=0)


def _block_normals(M, start, stop, seed, block):
    ss = np.random.SeedSequence(seed, spawn_key=(STREAM_NOISE, block))
    rng = np.random.Generator(np.random.PCG64(ss))
    full = rng.standard_normal((M, BLOCK_SIZE))
    return full[:, start:stop]


def generate_noise(grid: TimeGrid, N: int, seed: int) -> NoiseEnsemble:
    """N paths of increments ~ Normal(0, dt), deterministic in (grid, N, seed).

    Path j is drawn from block j // BLOCK_SIZE, so the first N paths of a larger
    ensemble with the same seed are identical to a smaller one.
    """
    if int(N) != N or N < 1:
        raise ValueError("N must be a positive integer")
    if not 0 <= int(seed) < 2**64:
        raise ValueError("seed must be a non-negative 64-bit integer")
    dW = np.empty((grid.M, N))
    scale = np.sqrt(grid.dt)
    for block, lo in enumerate(range(0, N, BLOCK_SIZE)):
        hi = min(N, lo + BLOCK_SIZE)
        dW[:, lo:hi] = _block_normals(grid.M, 0, hi - lo, int(seed), block)
    dW *= scale
    dW.setflags(write=False)
    return NoiseEnsemble(grid, int(N), int(seed), dW)


@dataclass(frozen=True)
class TrajectoryEnsemble:
    """Per-node, per-path values of a process: ``values[i, path, ...]``.

    ``values`` has n_nodes = M + 1 for states and M for quantities defined on
    steps (z-type processes, which are left-point values).
    """

    grid: TimeGrid
    values: np.ndarray = field(repr=False)
    label: str
    seed: int = 0
    policy: Optional[ControlPolicy] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        v = self.values
        if v.ndim < 2:
            raise ValueError("values need shape (n_nodes, N, ...)")
        if v.shape[0] not in (self.grid.M, self.grid.M + 1):
            raise ValueError(f"expected {self.grid.M + 1} or {self.grid.M} nodes, got {v.shape[0]}")
        if v.flags.writeable:
            v.setflags(write=False)

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple:
        return self.values.shape[2:]

    def at(self, i: int) -> np.ndarray:
        return self.values[i]

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=1)


def _finite_or_raise(arr, label, step):
    if np.all(np.isfinite(arr)):
        return
    bad = np.argwhere(~np.isfinite(arr.reshape(arr.shape[0], -1)))[0][0]
    raise ModelEvaluationError(f"{label} became non-finite on path {bad} at step {step}")


def _u_batch(u_row, N):
    return np.broadcast_to(u_row, (N, u_row.size))


def _alloc(out, shape):
    if out is None:
        return np.empty(shape)
    if out.shape != shape:
        raise ValueError(f"output buffer has shape {out.shape}, expected {shape}")
    return out


def simulate_forward(spec: ModelSpec, policy: ControlPolicy, noise: NoiseEnsemble,
                     label: str = "x", out: Optional[np.ndarray] = None) -> TrajectoryEnsemble:
    """Euler-Maruyama: x_{i+1} = x_i + b(t_i, x_i, u_i) dt + sigma(t_i, x_i, u_i) dW_i."""
    g, N = noise.grid, noise.N
    if policy.k != spec.k:
        raise ValueError("policy dimension does not match spec.k")
    u = policy.on_grid(g)
    x = _alloc(out, (g.M + 1, N, spec.n))
    x[0] = spec.x0
    dt = g.dt
    for i in range(g.M):
        ui = _u_batch(u[i], N)
        t = g.t[i]
        x[i + 1] = x[i] + spec.b(t, x[i], ui) * dt + spec.sigma(t, x[i], ui) * noise.dW[i][:, None]
        _finite_or_raise(x[i + 1], label, i)
    return TrajectoryEnsemble(g, x, label, noise.seed, policy)


def _check_same_noise(base: TrajectoryEnsemble, noise: NoiseEnsemble):
    if base.grid != noise.grid or base.N != noise.N:
        raise ValueError("base trajectory and noise ensemble do not match")


def simulate_x1(spec: ModelSpec, base: TrajectoryEnsemble, spike: SpikeConfig, noise: NoiseEnsemble,
                flip_delta_sigma: bool = False, out: Optional[np.ndarray] = None) -> TrajectoryEnsemble:
    """First-order variation: dx1 = b_x x1 dt + (sigma_x x1 + delta_sigma I_E) dW, x1(0) = 0.

    ``flip_delta_sigma`` negates the spike forcing; it exists only for fault injection.
    """
    _check_same_noise(base, noise)
    g, N, n = noise.grid, noise.N, spec.n
    ind = spike.indicator(g)
    ubar = base.policy.on_grid(g)
    sign = -1.0 if flip_delta_sigma else 1.0
    x1 = _alloc(out, (g.M + 1, N, n))
    x1[0] = 0.0
    dt = g.dt
    for i in range(g.M):
        t, xb = g.t[i], base.values[i]
        ub = _u_batch(ubar[i], N)
        drift = np.einsum("pij,pj->pi", spec.b_x(t, xb, ub), x1[i])
        diff = np.einsum("pij,pj->pi", spec.sigma_x(t, xb, ub), x1[i])
        if ind[i]:
            us = _u_batch(spike.u, N)
            diff = diff + sign * (spec.sigma(t, xb, us) - spec.sigma(t, xb, ub))
        x1[i + 1] = x1[i] + drift * dt + diff * noise.dW[i][:, None]
        _finite_or_raise(x1[i + 1], "x1", i)
    return TrajectoryEnsemble(g, x1, "x1", noise.seed, base.policy)


def hessian_form(H, v, w=None):
    """Per-component bilinear form: out[p, i] = sum_jl H[p, i, j, l] v[p, j] w[p, l]."""
    w = v if w is None else w
    return np.einsum("pijl,pj,pl->pi", H, v, w)


def simulate_x2(spec: ModelSpec, base: TrajectoryEnsemble, x1: TrajectoryEnsemble, spike: SpikeConfig,
                noise: NoiseEnsemble, out: Optional[np.ndarray] = None) -> TrajectoryEnsemble:
    """Second-order variation, x2(0) = 0:

    dx2 = (b_x x2 + delta_b I_E + 1/2 b_xx x1 x1) dt
          + (sigma_x x2 + delta_sigma_x x1 I_E + 1/2 sigma_xx x1 x1) dW
    """
    _check_same_noise(base, noise)
    g, N, n = noise.grid, noise.N, spec.n
    ind = spike.indicator(g)
    ubar = base.policy.on_grid(g)
    x2 = _alloc(out, (g.M + 1, N, n))
    x2[0] = 0.0
    dt = g.dt
    for i in range(g.M):
        t, xb, v1, v2 = g.t[i], base.values[i], x1.values[i], x2[i]
        ub = _u_batch(ubar[i], N)
        drift = (np.einsum("pij,pj->pi", spec.b_x(t, xb, ub), v2)
                 + 0.5 * hessian_form(spec.b_xx(t, xb, ub), v1))
        diff = (np.einsum("pij,pj->pi", spec.sigma_x(t, xb, ub), v2)
                + 0.5 * hessian_form(spec.sigma_xx(t, xb, ub), v1))
        if ind[i]:
            us = _u_batch(spike.u, N)
            drift = drift + spec.b(t, xb, us) - spec.b(t, xb, ub)
            dsx = spec.sigma_x(t, xb, us) - spec.sigma_x(t, xb, ub)
            diff = diff + np.einsum("pij,pj->pi", dsx, v1)
        x2[i + 1] = v2 + drift * dt + diff * noise.dW[i][:, None]
        _finite_or_raise(x2[i + 1], "x2", i)
    return TrajectoryEnsemble(g, x2, "x2", noise.seed, base.policy)


def gamma_from_coefficients(f_y: np.ndarray, f_z: np.ndarray, dW: np.ndarray, gamma0: float = 1.0,
                            dt: Optional[float] = None, out: Optional[np.ndarray] = None) -> np.ndarray:
    """Log-space scheme gamma_{i+1} = gamma_i exp((f_y - f_z^2 / 2) dt + f_z dW_i).

    ``f_y`` and ``f_z`` have shape (M, N) (left-point values); returns (M + 1, N).
    """
    M, N = dW.shape
    if dt is None:
        raise ValueError("dt is required")
    g = _alloc(out, (M + 1, N))
    g[0] = 0.0
    # cumulative log-increments, built in place to keep one (M + 1, N) buffer
    np.multiply(f_z, dW, out=g[1:])
    g[1:] += (f_y - 0.5 * f_z**2) * dt
    np.cumsum(g, axis=0, out=g)
    np.exp(g, out=g)
    g *= gamma0
    return g


def simulate_gamma(spec: ModelSpec, base_solution, noise: NoiseEnsemble, gamma0: float = 1.0,
                   allow_nonpositive: bool = False) -> TrajectoryEnsemble:
    """dgamma = f_y gamma dt + f_z gamma dW along the base solution (x, y, z, u).

    ``base_solution`` needs ``forward``, ``y`` and ``z`` ensembles. gamma0 must be
    positive unless ``allow_nonpositive`` is set (the constrained problem uses
    gamma(0) = lambda + mu E[varphi_y], which can have any sign).
    """
    if gamma0 <= 0 and not allow_nonpositive:
        raise ValueError("gamma(0) must be positive for the unconstrained problem")
    fwd = base_solution.forward
    _check_same_noise(fwd, noise)
    g, N, n = noise.grid, noise.N, spec.n
    u = fwd.policy.on_grid(g)
    fy = np.empty((g.M, N))
    fz = np.empty((g.M, N))
    for i in range(g.M):
        Df = spec.Df(g.t[i], fwd.values[i], base_solution.y.values[i], base_solution.z.values[i],
                     _u_batch(u[i], N))
        fy[i], fz[i] = Df[:, n], Df[:, n + 1]
    gam = gamma_from_coefficients(fy, fz, noise.dW, gamma0, g.dt)
    return TrajectoryEnsemble(g, gam[:, :, None], "gamma", noise.seed, fwd.policy)
