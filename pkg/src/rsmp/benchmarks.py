"""Built-in control systems, selectable by name."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import (
    BoxControlSet,
    ConstantPolicy,
    ControlPolicy,
    FiniteControlSet,
    ModelSpec,
    StateConstraint,
)


def _col(a, N):
    return np.broadcast_to(np.asarray(a, dtype=float), (N,))


def scalar_spec(name, *, T, x0, b, b_x, b_xx, sigma, sigma_x, sigma_xx, f, f_grad, f_hess,
                phi, phi_x, phi_xx, control_set, b_u=None, sigma_u=None, f_u=None,
                region=None, description="") -> ModelSpec:
    """Lift scalar (n = k = 1) coefficient functions to the batched ModelSpec layout.

    Scalar functions receive x, u (and y, z) as 1-d arrays. ``f_grad`` returns
    (f_x, f_y, f_z) and ``f_hess`` a 3x3 nested sequence in the order (x, y, z).
    """

    def lift_xu(fn, shape):
        def wrapped(t, x, u):
            N = x.shape[0]
            return _col(fn(t, x[:, 0], u[:, 0]), N).reshape((N,) + shape).copy()
        return wrapped

    def lift_f(t, x, y, z, u):
        return _col(f(t, x[:, 0], y, z, u[:, 0]), x.shape[0]).copy()

    def lift_Df(t, x, y, z, u):
        out = np.empty((x.shape[0], 3))
        for j, g in enumerate(f_grad(t, x[:, 0], y, z, u[:, 0])):
            out[:, j] = g
        return out

    def lift_D2f(t, x, y, z, u):
        H = f_hess(t, x[:, 0], y, z, u[:, 0])
        out = np.empty((x.shape[0], 3, 3))
        for i in range(3):
            for j in range(3):
                out[:, i, j] = H[i][j]
        return out

    def lift_phi(fn, shape):
        def wrapped(x):
            N = x.shape[0]
            return _col(fn(x[:, 0]), N).reshape((N,) + shape).copy()
        return wrapped

    def lift_fu(t, x, y, z, u):
        N = x.shape[0]
        return _col(f_u(t, x[:, 0], y, z, u[:, 0]), N).reshape(N, 1).copy()

    return ModelSpec(
        name=name, n=1, k=1, T=T, x0=np.array([x0], dtype=float),
        b=lift_xu(b, (1,)), sigma=lift_xu(sigma, (1,)),
        b_x=lift_xu(b_x, (1, 1)), sigma_x=lift_xu(sigma_x, (1, 1)),
        b_xx=lift_xu(b_xx, (1, 1, 1)), sigma_xx=lift_xu(sigma_xx, (1, 1, 1)),
        f=lift_f, Df=lift_Df, D2f=lift_D2f,
        phi=lift_phi(phi, ()), phi_x=lift_phi(phi_x, (1,)), phi_xx=lift_phi(phi_xx, (1, 1)),
        control_set=control_set,
        b_u=None if b_u is None else lift_xu(b_u, (1, 1)),
        sigma_u=None if sigma_u is None else lift_xu(sigma_u, (1, 1)),
        f_u=None if f_u is None else lift_fu,
        region=region or {}, description=description,
    )


def _zero(*args):
    return 0.0


def _one(*args):
    return 1.0


def smooth_clamp(z, radius):
    """C2 clamp: identity on |z| <= radius, radius + tanh(|z| - radius) beyond. Returns (c, c', c'')."""
    a = np.abs(z)
    out = a > radius
    th = np.tanh(np.where(out, a - radius, 0.0))
    sech2 = 1.0 - th**2
    c = np.where(out, np.sign(z) * (radius + th), z)
    c1 = np.where(out, sech2, 1.0)
    c2 = np.where(out, -2.0 * np.sign(z) * th * sech2, 0.0)
    return c, c1, c2


# -- the cubic-driver example ----------------------------------------------


def _cubic(w):
    return w**3 - 0.25 * w, 3 * w**2 - 0.25, 6 * w


def example_spec(control_set=None, clamp_radius: Optional[float] = None, name="example") -> ModelSpec:
    """b = 0, sigma = u, x0 = 0, phi(x) = x, f = z^3 - 0.25 z, U = {0, 1}.

    With ``clamp_radius`` the driver becomes f(c(z)) for the smooth clamp c, which
    keeps f_zz bounded without changing anything on |z| <= radius.
    """

    def fz_parts(z):
        if clamp_radius is None:
            return _cubic(z)
        c, c1, c2 = smooth_clamp(z, clamp_radius)
        g, g1, g2 = _cubic(c)
        return g, g1 * c1, g2 * c1**2 + g1 * c2

    def f(t, x, y, z, u):
        return fz_parts(z)[0]

    def f_grad(t, x, y, z, u):
        return 0.0, 0.0, fz_parts(z)[1]

    def f_hess(t, x, y, z, u):
        return ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, fz_parts(z)[2]))

    return scalar_spec(
        name, T=1.0, x0=0.0,
        b=_zero, b_x=_zero, b_xx=_zero,
        sigma=lambda t, x, u: u, sigma_x=_zero, sigma_xx=_zero,
        f=f, f_grad=f_grad, f_hess=f_hess,
        phi=lambda x: x, phi_x=_one, phi_xx=_zero,
        control_set=control_set or FiniteControlSet([[0.0], [1.0]]),
        b_u=_zero, sigma_u=_one, f_u=_zero,
        region={"x_low": -1.0, "x_high": 1.0, "y_range": (-1.0, 1.0), "z_range": (-1.0, 1.0)},
        description="cubic driver f(z) = z^3 - 0.25 z with sigma = u",
    )


def linear_spec(alpha=0.1, beta=0.3, T=1.0, x0=0.0) -> ModelSpec:
    """b = 0, sigma = 1, phi(x) = x, f = alpha y + beta z. y(0) = exp(alpha T)(x0 + beta T)."""
    return scalar_spec(
        "linear", T=T, x0=x0,
        b=_zero, b_x=_zero, b_xx=_zero,
        sigma=_one, sigma_x=_zero, sigma_xx=_zero,
        f=lambda t, x, y, z, u: alpha * y + beta * z,
        f_grad=lambda t, x, y, z, u: (0.0, alpha, beta),
        f_hess=lambda t, x, y, z, u: ((0.0,) * 3,) * 3,
        phi=lambda x: x, phi_x=_one, phi_xx=_zero,
        control_set=FiniteControlSet([[0.0]]),
        b_u=_zero, sigma_u=_zero, f_u=_zero,
        region={"x_low": -2.0, "x_high": 2.0},
        description=f"linear driver f = {alpha} y + {beta} z, additive noise",
    )


def classical_spec() -> ModelSpec:
    """Driver independent of (y, z): y(0) = E[phi(x(T)) + int f dt]."""
    return scalar_spec(
        "classical", T=1.0, x0=0.2,
        b=lambda t, x, u: 0.5 * (u - x), b_x=lambda t, x, u: -0.5, b_xx=_zero,
        sigma=lambda t, x, u: 0.4 + 0.1 * np.cos(x),
        sigma_x=lambda t, x, u: -0.1 * np.sin(x),
        sigma_xx=lambda t, x, u: -0.1 * np.cos(x),
        f=lambda t, x, y, z, u: np.cos(x) + 0.5 * u,
        f_grad=lambda t, x, y, z, u: (-np.sin(x), 0.0, 0.0),
        f_hess=lambda t, x, y, z, u: ((-np.cos(x), 0.0, 0.0), (0.0,) * 3, (0.0,) * 3),
        phi=np.sin, phi_x=np.cos, phi_xx=lambda x: -np.sin(x),
        control_set=FiniteControlSet([[0.0], [1.0]]),
        b_u=lambda t, x, u: 0.5, sigma_u=_zero, f_u=lambda t, x, y, z, u: 0.5,
        region={"x_low": -2.0, "x_high": 2.0},
        description="mean-reverting state, running cost independent of (y, z)",
    )


def quadratic_spec() -> ModelSpec:
    """Quadratic drift with a control-driven diffusion, so x1 and x2 are both nontrivial."""
    return scalar_spec(
        "quadratic", T=1.0, x0=0.5,
        b=lambda t, x, u: 0.5 * u - 0.4 * x + 0.3 * x**2,
        b_x=lambda t, x, u: -0.4 + 0.6 * x,
        b_xx=lambda t, x, u: 0.6,
        sigma=lambda t, x, u: u * (0.6 + 0.2 * np.sin(x)),
        sigma_x=lambda t, x, u: 0.2 * u * np.cos(x),
        sigma_xx=lambda t, x, u: -0.2 * u * np.sin(x),
        f=lambda t, x, y, z, u: 0.3 * np.sin(x) - 0.2 * y + 0.5 * z + 0.4 * z**2 + 0.1 * x * z + 0.2 * u,
        f_grad=lambda t, x, y, z, u: (0.3 * np.cos(x) + 0.1 * z, -0.2, 0.5 + 0.8 * z + 0.1 * x),
        f_hess=lambda t, x, y, z, u: ((-0.3 * np.sin(x), 0.0, 0.1), (0.0, 0.0, 0.0), (0.1, 0.0, 0.8)),
        phi=lambda x: 0.5 * x**2 + 0.2 * x, phi_x=lambda x: x + 0.2, phi_xx=_one,
        control_set=FiniteControlSet([[0.0], [1.0]]),
        b_u=lambda t, x, u: 0.5, sigma_u=lambda t, x, u: 0.6 + 0.2 * np.sin(x),
        f_u=lambda t, x, y, z, u: 0.2,
        region={"x_low": -1.0, "x_high": 2.0, "y_range": (-1.0, 1.0), "z_range": (-1.0, 1.0)},
        description="quadratic drift, sin-modulated diffusion, quadratic-in-z driver",
    )


def vacuous_constraint() -> StateConstraint:
    """varphi == 0: every control is feasible."""

    def zero(x, y0):
        return np.zeros(x.shape[0])

    return StateConstraint(
        varphi=zero,
        varphi_x=lambda x, y0: np.zeros_like(x),
        varphi_xx=lambda x, y0: np.zeros((x.shape[0], x.shape[1], x.shape[1])),
        varphi_y=zero,
    )


def cost_level_constraint(level: float, sign: float = 1.0) -> StateConstraint:
    """varphi(x, y0) = sign * (y0 - level)."""
    return StateConstraint(
        varphi=lambda x, y0: sign * (np.broadcast_to(y0, (x.shape[0],)) - level),
        varphi_x=lambda x, y0: np.zeros_like(x),
        varphi_xx=lambda x, y0: np.zeros((x.shape[0], x.shape[1], x.shape[1])),
        varphi_y=lambda x, y0: np.full(x.shape[0], float(sign)),
    )


def terminal_mean_constraint(level: float = 0.0, sign: float = 1.0) -> StateConstraint:
    """varphi(x, y0) = sign * (x_1 - level), a constraint on the mean terminal state."""
    return StateConstraint(
        varphi=lambda x, y0: sign * (x[:, 0] - level),
        varphi_x=lambda x, y0: np.concatenate(
            [np.full((x.shape[0], 1), float(sign)), np.zeros((x.shape[0], x.shape[1] - 1))], axis=1),
        varphi_xx=lambda x, y0: np.zeros((x.shape[0], x.shape[1], x.shape[1])),
        varphi_y=lambda x, y0: np.zeros(x.shape[0]),
    )


def scaled_constraint(con: StateConstraint, factor: float) -> StateConstraint:
    """factor * varphi with all derivatives scaled alike (factor = -1 flips the sign)."""
    return StateConstraint(
        varphi=lambda x, y0: factor * con.varphi(x, y0),
        varphi_x=lambda x, y0: factor * con.varphi_x(x, y0),
        varphi_xx=lambda x, y0: factor * con.varphi_xx(x, y0),
        varphi_y=lambda x, y0: factor * con.varphi_y(x, y0),
    )


# -- registry ----------------------------------------------------------------


@dataclass(frozen=True)
class Benchmark:
    name: str
    build: Callable[[], ModelSpec]
    base_control: tuple
    spike_control: tuple
    summary: str

    def spec(self) -> ModelSpec:
        return self.build()

    def base_policy(self) -> ControlPolicy:
        return ConstantPolicy(self.base_control)


BENCHMARKS = {
    b.name: b
    for b in [
        Benchmark("example", example_spec, (0.0,), (1.0,),
                  "cubic driver, U = {0, 1}, candidate u = 0"),
        Benchmark("example_box",
                  lambda: example_spec(BoxControlSet([0.0], [1.0], 0.01), name="example_box"),
                  (0.0,), (1.0,), "cubic driver, U = [0, 1] gridded at 0.01"),
        Benchmark("example_clamped", lambda: example_spec(clamp_radius=5.0, name="example_clamped"),
                  (0.0,), (1.0,), "cubic driver with a smooth clamp beyond |z| = 5"),
        Benchmark("example_vacuous",
                  lambda: example_spec(name="example_vacuous").with_constraint(vacuous_constraint()),
                  (0.0,), (1.0,), "cubic driver with a vacuous terminal constraint"),
        Benchmark("example_costlevel",
                  lambda: example_spec(name="example_costlevel").with_constraint(
                      cost_level_constraint(0.0)),
                  (0.0,), (1.0,), "cubic driver with constraint y(0) = 0"),
        Benchmark("linear", linear_spec, (0.0,), (0.0,),
                  "f = 0.1 y + 0.3 z with closed-form y(0)"),
        Benchmark("classical", classical_spec, (0.0,), (1.0,),
                  "driver independent of (y, z)"),
        Benchmark("quadratic", quadratic_spec, (0.0,), (1.0,),
                  "quadratic drift with nontrivial second-order variation"),
    ]
}


def get_benchmark(name: str) -> Benchmark:
    try:
        return BENCHMARKS[name]
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; available: {sorted(BENCHMARKS)}") from None
