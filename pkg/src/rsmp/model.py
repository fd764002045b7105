"""Control-system description: coefficients, derivatives, control sets and policies.

All coefficient callables are batched along a leading path axis:

    b(t, x, u)        x: (N, n), u: (N, k)  ->  (N, n)
    sigma(t, x, u)                          ->  (N, n)          (scalar Brownian motion)
    b_x, sigma_x                            ->  (N, n, n)       [i, j] = d b^i / d x_j
    b_xx, sigma_xx                          ->  (N, n, n, n)    [i, j, l] = d2 b^i / d x_j d x_l
    f(t, x, y, z, u)  y, z: (N,)            ->  (N,)
    Df                                      ->  (N, n + 2)      gradient in (x, y, z)
    D2f                                     ->  (N, n + 2, n + 2)
    phi(x) -> (N,), phi_x -> (N, n), phi_xx -> (N, n, n)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class ModelEvaluationError(ValueError):
    """A coefficient function returned a non-finite value."""


@dataclass(frozen=True)
class StateConstraint:
    """Terminal constraint E[varphi(x(T), y(0))] = 0 and its derivatives."""

    varphi: Callable
    varphi_x: Callable
    varphi_xx: Callable
    varphi_y: Callable


class FiniteControlSet:
    def __init__(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ValueError("control set needs at least one point")
        self.points = pts
        self.points.setflags(write=False)

    @property
    def k(self) -> int:
        return self.points.shape[1]

    def grid(self) -> np.ndarray:
        return self.points

    def contains(self, u, atol=1e-12) -> bool:
        u = np.asarray(u, dtype=float).reshape(-1)
        return bool(np.any(np.all(np.abs(self.points - u) <= atol, axis=1)))

    def sample(self, rng, size):
        return self.points[rng.integers(0, len(self.points), size=size)]

    def describe(self) -> dict:
        return {"kind": "finite", "points": self.points.tolist()}


class BoxControlSet:
    """Axis-aligned box; ``step`` sets the resolution of the enumeration grid.

    Grid minima only bound the true minimum over the box.
    """

    def __init__(self, low, high, step):
        self.low = np.atleast_1d(np.asarray(low, dtype=float))
        self.high = np.atleast_1d(np.asarray(high, dtype=float))
        if self.low.shape != self.high.shape or np.any(self.high < self.low):
            raise ValueError("invalid box bounds")
        if step <= 0:
            raise ValueError("grid step must be positive")
        self.step = float(step)

    @property
    def k(self) -> int:
        return self.low.size

    def grid(self) -> np.ndarray:
        axes = []
        for lo, hi in zip(self.low, self.high):
            m = int(round((hi - lo) / self.step))
            axes.append(np.linspace(lo, hi, m + 1))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.reshape(-1) for a in mesh], axis=1)

    def contains(self, u, atol=1e-12) -> bool:
        u = np.asarray(u, dtype=float).reshape(-1)
        return bool(np.all(u >= self.low - atol) and np.all(u <= self.high + atol))

    def sample(self, rng, size):
        return rng.uniform(self.low, self.high, size=(size, self.k))

    def describe(self) -> dict:
        return {"kind": "box", "low": self.low.tolist(), "high": self.high.tolist(), "step": self.step}


@dataclass(frozen=True)
class ModelSpec:
    name: str
    n: int
    k: int
    T: float
    x0: np.ndarray
    b: Callable
    sigma: Callable
    b_x: Callable
    sigma_x: Callable
    b_xx: Callable
    sigma_xx: Callable
    f: Callable
    Df: Callable
    D2f: Callable
    phi: Callable
    phi_x: Callable
    phi_xx: Callable
    control_set: object
    constraint: Optional[StateConstraint] = None
    # u-derivatives, only needed for the convex-domain first-order condition
    b_u: Optional[Callable] = None
    sigma_u: Optional[Callable] = None
    f_u: Optional[Callable] = None
    # working region sampled by validate_derivatives: x box, y and z ranges
    region: dict = field(default_factory=dict)
    description: str = ""

    def __post_init__(self):
        if self.n < 1 or self.k < 1:
            raise ValueError("state and control dimensions must be positive")
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        x0 = np.asarray(self.x0, dtype=float).reshape(-1)
        if x0.size != self.n:
            raise ValueError(f"x0 has length {x0.size}, expected {self.n}")
        object.__setattr__(self, "x0", x0)
        if getattr(self.control_set, "k", self.k) != self.k:
            raise ValueError("control set dimension does not match k")

    def with_constraint(self, constraint: Optional[StateConstraint], name=None) -> "ModelSpec":
        from dataclasses import replace

        return replace(self, constraint=constraint, name=name or self.name)


# -- policies ---------------------------------------------------------------


@dataclass(frozen=True)
class SpikeConfig:
    """Spike interval [s, s + eps) carrying the replacement control u."""

    s: float
    eps: float
    u: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", np.atleast_1d(np.asarray(self.u, dtype=float)))
        if self.eps < 0 or self.s < 0:
            raise ValueError("spike start and width must be non-negative")

    def node_range(self, grid) -> tuple[int, int]:
        """Node indices [i0, i1) covered by the spike; rejects misaligned intervals."""
        if self.s + self.eps > grid.T * (1 + 1e-12):
            raise ValueError(f"spike [{self.s}, {self.s + self.eps}] leaves [0, {grid.T}]")
        a, m = self.s / grid.dt, self.eps / grid.dt
        i0, w = int(round(a)), int(round(m))
        if abs(a - i0) > 1e-8 or abs(m - w) > 1e-8:
            raise ValueError(
                f"spike s={self.s}, eps={self.eps} is not aligned with dt={grid.dt}"
            )
        return i0, i0 + w

    def indicator(self, grid) -> np.ndarray:
        i0, i1 = self.node_range(grid)
        ind = np.zeros(grid.M + 1, dtype=bool)
        ind[i0:i1] = True
        return ind


class ControlPolicy:
    """Open-loop deterministic control t -> U."""

    k: int

    def __call__(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def on_grid(self, grid) -> np.ndarray:
        """Control values at every node, shape (M + 1, k)."""
        return np.stack([self(t) for t in grid.t])


class ConstantPolicy(ControlPolicy):
    def __init__(self, value):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        self.value.setflags(write=False)
        self.k = self.value.size

    def __call__(self, t):
        return self.value.copy()

    def on_grid(self, grid):
        return np.tile(self.value, (grid.M + 1, 1))

    def __repr__(self):
        return f"ConstantPolicy({self.value.tolist()})"


class FunctionPolicy(ControlPolicy):
    def __init__(self, fn, k):
        self.fn = fn
        self.k = k

    def __call__(self, t):
        return np.atleast_1d(np.asarray(self.fn(t), dtype=float)).reshape(self.k)


class SpikePolicy(ControlPolicy):
    """``base`` off the spike interval, the constant ``spike.u`` on it (left-closed)."""

    def __init__(self, base: ControlPolicy, spike: SpikeConfig):
        if spike.u.size != base.k:
            raise ValueError("spike control has the wrong dimension")
        self.base = base
        self.spike = spike
        self.k = base.k

    def __call__(self, t):
        s, e = self.spike.s, self.spike.s + self.spike.eps
        tol = 1e-12 * max(1.0, abs(e))
        if s - tol <= t < e - tol:
            return self.spike.u.copy()
        return self.base(t)

    def on_grid(self, grid):
        vals = np.array(self.base.on_grid(grid), dtype=float)
        vals[self.spike.indicator(grid)] = self.spike.u
        return vals


# -- evaluation -------------------------------------------------------------


def _check_finite(name, value, t, x, u, y=None, z=None):
    value = np.asarray(value)
    if np.all(np.isfinite(value)):
        return value
    bad = np.argwhere(~np.isfinite(value.reshape(value.shape[0], -1)))[0][0]
    point = {"t": float(t), "x": np.asarray(x)[bad].tolist()}
    if u is not None:
        point["u"] = np.asarray(u)[bad].tolist()
    if y is not None:
        point["y"] = float(np.asarray(y)[bad])
        point["z"] = float(np.asarray(z)[bad])
    raise ModelEvaluationError(f"{name} is not finite at {point}")


@dataclass(frozen=True)
class CoeffBundle:
    b: np.ndarray
    sigma: np.ndarray
    b_x: np.ndarray
    sigma_x: np.ndarray
    b_xx: np.ndarray
    sigma_xx: np.ndarray
    f: Optional[np.ndarray] = None
    f_x: Optional[np.ndarray] = None
    f_y: Optional[np.ndarray] = None
    f_z: Optional[np.ndarray] = None
    D2f: Optional[np.ndarray] = None


def _as_batch(spec, x, u, y=None, z=None):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != spec.n:
        raise ValueError(f"state has dimension {x.shape[-1]}, expected {spec.n}")
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape[-1] != spec.k:
        raise ValueError(f"control has dimension {u.shape[-1]}, expected {spec.k}")
    N = x.shape[0]
    u = np.broadcast_to(u if u.ndim == 2 else u.reshape(1, -1), (N, spec.k))
    if y is not None:
        y = np.broadcast_to(np.asarray(y, dtype=float).reshape(-1), (N,))
        z = np.broadcast_to(np.asarray(z, dtype=float).reshape(-1), (N,))
    return single, x, u, y, z


def eval_coeffs(spec: ModelSpec, t, x, u, y=None, z=None) -> CoeffBundle:
    """Evaluate b, sigma and their x-derivatives, plus f and its derivatives when (y, z) are given.

    ``x`` may be a single state (n,) or a batch (N, n); the bundle mirrors the input.
    """
    if not -1e-12 <= t <= spec.T * (1 + 1e-12):
        raise ValueError(f"t={t} outside [0, {spec.T}]")
    single, x, u, y, z = _as_batch(spec, x, u, y, z)
    out = {}
    for name in ("b", "sigma", "b_x", "sigma_x", "b_xx", "sigma_xx"):
        out[name] = _check_finite(name, getattr(spec, name)(t, x, u), t, x, u)
    if y is not None:
        fv = _check_finite("f", spec.f(t, x, y, z, u), t, x, u, y, z)
        Df = _check_finite("Df", spec.Df(t, x, y, z, u), t, x, u, y, z)
        out["f"] = fv
        out["f_x"] = Df[:, : spec.n]
        out["f_y"] = Df[:, spec.n]
        out["f_z"] = Df[:, spec.n + 1]
        out["D2f"] = _check_finite("D2f", spec.D2f(t, x, y, z, u), t, x, u, y, z)
    if single:
        out = {k: v[0] for k, v in out.items()}
    return CoeffBundle(**out)


def delta_coeffs(spec: ModelSpec, t, xbar, ubar, u):
    """(delta b, delta sigma, delta sigma_x): coefficient jumps when ubar is replaced by u at xbar."""
    _, x, ub, _, _ = _as_batch(spec, xbar, ubar)
    _, _, uu, _, _ = _as_batch(spec, xbar, u)
    db = spec.b(t, x, uu) - spec.b(t, x, ub)
    ds = spec.sigma(t, x, uu) - spec.sigma(t, x, ub)
    dsx = spec.sigma_x(t, x, uu) - spec.sigma_x(t, x, ub)
    return db, ds, dsx


# -- derivative validation --------------------------------------------------


@dataclass
class DerivativeCheck:
    name: str
    max_discrepancy: float
    passed: bool
    worst_point: dict


@dataclass
class ValidationReport:
    spec_name: str
    tol: float
    n_samples: int
    checks: list
    symmetry: dict

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and all(v == 0.0 for v in self.symmetry.values())

    def failures(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "spec": self.spec_name,
            "tol": self.tol,
            "n_samples": self.n_samples,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "max_discrepancy": c.max_discrepancy, "passed": c.passed,
                 "worst_point": c.worst_point}
                for c in self.checks
            ],
            "symmetry": self.symmetry,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _fd_jacobian(fn, base, h, axis_len):
    """Central differences of fn along the last axis of ``base``; derivative axis appended last."""
    cols = []
    for j in range(axis_len):
        step = np.zeros_like(base)
        step[:, j] = h[:, j]
        diff = fn(base + step) - fn(base - step)
        hj = h[:, j].reshape((-1,) + (1,) * (diff.ndim - 1))
        cols.append(diff / (2 * hj))
    return np.stack(cols, axis=-1)


def _discrepancy(supplied, fd):
    supplied = np.asarray(supplied, dtype=float).reshape(fd.shape)
    err = np.abs(supplied - fd) / np.maximum(1.0, np.abs(fd))
    per_point = err.reshape(err.shape[0], -1).max(axis=1)
    return per_point


def validate_derivatives(spec: ModelSpec, n_samples: int = 200, tol: float = 1e-4,
                         region: Optional[dict] = None, seed: int = 0) -> ValidationReport:
    """Compare supplied derivatives with central finite differences on a sampled region.

    Discrepancy is |supplied - fd| / max(1, |fd|), maximised over entries and points.
    First derivatives are checked against the base functions and second derivatives
    against the supplied first derivatives. The step is 1e-5 * max(1, |coordinate|).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    region = {**spec.region, **(region or {})}
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    n, N = spec.n, n_samples
    x_lo = np.broadcast_to(np.asarray(region.get("x_low", -1.0), dtype=float), (n,))
    x_hi = np.broadcast_to(np.asarray(region.get("x_high", 1.0), dtype=float), (n,))
    # times drawn from a small set so evaluations can be batched per time value
    t = rng.choice(np.linspace(0.0, spec.T, 9), size=N)
    t_groups = [(tv, np.flatnonzero(t == tv)) for tv in np.unique(t)]
    x = rng.uniform(x_lo, x_hi, size=(N, n))
    u = spec.control_set.sample(rng, N)
    y = rng.uniform(*region.get("y_range", (-1.0, 1.0)), size=N)
    z = rng.uniform(*region.get("z_range", (-1.0, 1.0)), size=N)

    def per_t(fn):
        def wrapped(*args):
            out = None
            for tv, idx in t_groups:
                vals = np.asarray(fn(tv, *[a[idx] for a in args]), dtype=float)
                if out is None:
                    out = np.empty((N,) + vals.shape[1:])
                out[idx] = vals
            return out
        return wrapped

    def check_point(name, fn, *args):
        out = per_t(fn)(*args)
        if not np.all(np.isfinite(out)):
            bad = int(np.argwhere(~np.isfinite(out.reshape(N, -1)))[0][0])
            raise ModelEvaluationError(
                f"{name} is not finite at t={t[bad]}, x={x[bad].tolist()}, u={u[bad].tolist()}"
            )
        return out

    checks = []

    def record(name, per_point):
        worst = int(np.argmax(per_point))
        d = float(per_point[worst])
        checks.append(DerivativeCheck(
            name, d, bool(d <= tol),
            {"t": float(t[worst]), "x": x[worst].tolist(), "u": u[worst].tolist(),
             "y": float(y[worst]), "z": float(z[worst])},
        ))

    hx = 1e-5 * np.maximum(1.0, np.abs(x))
    for base_name in ("b", "sigma"):
        base = getattr(spec, base_name)
        d1 = getattr(spec, base_name + "_x")
        d2 = getattr(spec, base_name + "_xx")
        check_point(base_name, base, x, u)
        fd1 = _fd_jacobian(lambda xx: per_t(base)(xx, u), x, hx, n)
        record(base_name + "_x", _discrepancy(check_point(base_name + "_x", d1, x, u), fd1))
        fd2 = _fd_jacobian(lambda xx: per_t(d1)(xx, u), x, hx, n)
        record(base_name + "_xx", _discrepancy(check_point(base_name + "_xx", d2, x, u), fd2))

    xyz = np.column_stack([x, y, z])
    hxyz = 1e-5 * np.maximum(1.0, np.abs(xyz))

    def split(fn):
        return lambda w: per_t(fn)(w[:, :n], w[:, n], w[:, n + 1], u)

    check_point("f", spec.f, x, y, z, u)
    fd = _fd_jacobian(split(spec.f), xyz, hxyz, n + 2)
    Df = check_point("Df", spec.Df, x, y, z, u)
    record("Df", _discrepancy(Df, fd))
    fd = _fd_jacobian(split(spec.Df), xyz, hxyz, n + 2)
    D2f = check_point("D2f", spec.D2f, x, y, z, u)
    record("D2f", _discrepancy(D2f, fd))

    phi_x = spec.phi_x(x)
    record("phi_x", _discrepancy(phi_x, _fd_jacobian(spec.phi, x, hx, n)))
    phi_xx = spec.phi_xx(x)
    record("phi_xx", _discrepancy(phi_xx, _fd_jacobian(spec.phi_x, x, hx, n)))

    symmetry = {
        "phi_xx": float(np.max(np.abs(phi_xx - np.swapaxes(phi_xx, -1, -2)))),
        "D2f": float(np.max(np.abs(D2f - np.swapaxes(D2f, -1, -2)))),
    }

    c = spec.constraint
    if c is not None:
        xy = np.column_stack([x, y])
        hxy = 1e-5 * np.maximum(1.0, np.abs(xy))
        fd = _fd_jacobian(lambda w: c.varphi(w[:, :n], w[:, n]), xy, hxy, n + 1)
        record("varphi_x", _discrepancy(c.varphi_x(x, y), fd[:, :n]))
        record("varphi_y", _discrepancy(c.varphi_y(x, y), fd[:, n]))
        vxx = c.varphi_xx(x, y)
        record("varphi_xx", _discrepancy(vxx, _fd_jacobian(lambda w: c.varphi_x(w, y), x, hx, n)))
        symmetry["varphi_xx"] = float(np.max(np.abs(vxx - np.swapaxes(vxx, -1, -2))))

    if spec.b_u is not None:
        hu = 1e-5 * np.maximum(1.0, np.abs(u))
        for name, base in (("b_u", spec.b), ("sigma_u", spec.sigma)):
            fd = _fd_jacobian(lambda uu: per_t(base)(x, uu), u, hu, spec.k)
            record(name, _discrepancy(check_point(name, getattr(spec, name), x, u), fd))
        fd = _fd_jacobian(lambda uu: per_t(spec.f)(x, y, z, uu), u, hu, spec.k)
        record("f_u", _discrepancy(check_point("f_u", spec.f_u, x, y, z, u), fd))

    return ValidationReport(spec.name, tol, N, checks, symmetry)
