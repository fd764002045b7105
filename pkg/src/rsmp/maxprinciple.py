"""Hamiltonian, maximum-principle checks and the state-constrained multiplier scan.

The inequality is checked on the (node, path, control) grid. A cell (node, u)
counts as a violation when the path average of Delta H is below -max(tol, 3 SE),
so a single unlucky path never decides the verdict; the pathwise minimum is
reported alongside.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .adjoint import (
    AdjointProcesses,
    constraint_value,
    expected_varphi_y,
    solve_constrained_adjoints,
    stream_base,
)
from .bsde import BsdeSolution
from .model import ControlPolicy, ModelSpec
from .paths import NoiseEnsemble, TrajectoryEnsemble
from .regression import RegressionBasis

DEFAULT_CIRCLE_POINTS = 720


def _batch(a, N, width):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and width is not None:
        return np.broadcast_to(a, (N, width))
    return a


def hamiltonian_terms(spec: ModelSpec, t, x, y, z, u, p, q, P, ref_x, ref_u) -> dict:
    """The four summands of H, batched over paths (x is (N, n), y and z are (N,))."""
    N = x.shape[0]
    u = _batch(u, N, spec.k)
    ref_u = _batch(ref_u, N, spec.k)
    b = spec.b(t, x, u)
    s = spec.sigma(t, x, u)
    ds = s - spec.sigma(t, ref_x, ref_u)
    pds = np.einsum("pi,pi->p", p, ds)
    return {
        "drift": np.einsum("pi,pi->p", p, b),
        "diffusion": np.einsum("pi,pi->p", q, s),
        "curvature": 0.5 * np.einsum("pi,pij,pj->p", ds, P, ds),
        "cost": spec.f(t, x, y, z + pds, u),
    }


def hamiltonian(spec: ModelSpec, t, x, y, z, u, p, q, P, ref_x, ref_u):
    """<p, b> + <q, sigma> + 1/2 <P ds, ds> + f(t, x, y, z + <p, ds>, u), ds = sigma(x, u) - sigma(ref).

    Accepts one point (x of shape (n,)) or a batch (x of shape (N, n)).
    """
    single = np.ndim(x) == 1
    if single:
        x, ref_x = np.atleast_2d(x), np.atleast_2d(ref_x)
        y, z = np.atleast_1d(y), np.atleast_1d(z)
        p, q = np.atleast_2d(p), np.atleast_2d(q)
        P = np.asarray(P, dtype=float)[None]
        u, ref_u = np.atleast_2d(u), np.atleast_2d(ref_u)
    terms = hamiltonian_terms(spec, t, x, y, z, u, p, q, P, ref_x, ref_u)
    H = terms["drift"] + terms["diffusion"] + terms["curvature"] + terms["cost"]
    return float(H[0]) if single else H


def constrained_hamiltonian(spec: ModelSpec, t, state, u, ref, adjoints, gamma):
    """<p0 + g p, b> + <q0 + g q, sigma> + 1/2 <(P0 + g P) ds, ds> + g f(t, x, y, z + <p, ds>, u).

    ``state`` is (x, y, z), ``ref`` is (ref_x, ref_u), ``adjoints`` is
    (p0, q0, P0, p, q, P) and ``gamma`` has shape (N,).
    """
    x, y, z = state
    ref_x, ref_u = ref
    p0, q0, P0, p, q, P = adjoints
    N = x.shape[0]
    u = _batch(u, N, spec.k)
    ref_u = _batch(ref_u, N, spec.k)
    g = np.asarray(gamma, dtype=float).reshape(N)
    b = spec.b(t, x, u)
    s = spec.sigma(t, x, u)
    ds = s - spec.sigma(t, ref_x, ref_u)
    pds = np.einsum("pi,pi->p", p, ds)
    Pc = P0 + g[:, None, None] * P
    return (np.einsum("pi,pi->p", p0 + g[:, None] * p, b)
            + np.einsum("pi,pi->p", q0 + g[:, None] * q, s)
            + 0.5 * np.einsum("pi,pij,pj->p", ds, Pc, ds)
            + g * spec.f(t, x, y, z + pds, u))


def first_order_column(spec: ModelSpec, t, x, u, ref_u, p, f_z):
    """f_z <p, sigma(x, u) - sigma(x, ref_u)>, the weaker first-order comparison quantity."""
    N = x.shape[0]
    ds = spec.sigma(t, x, _batch(u, N, spec.k)) - spec.sigma(t, x, _batch(ref_u, N, spec.k))
    return f_z * np.einsum("pi,pi->p", p, ds)


# -- reports -----------------------------------------------------------------


def _check_grid(spec: ModelSpec, control_grid):
    if control_grid is None:
        control_grid = spec.control_set.grid()
    grid = np.atleast_2d(np.asarray(control_grid, dtype=float))
    if grid.size == 0:
        raise ValueError("control grid is empty")
    if grid.shape[1] != spec.k:
        raise ValueError(f"control grid has {grid.shape[1]} components, spec has k={spec.k}")
    return grid


def _threshold(tol, se):
    return np.maximum(tol, 3.0 * se)


@dataclass
class MPReport:
    """Summary of a maximum-principle check on the (node, path, control) grid.

    ``mean``, ``se`` and ``minimum`` have shape (n_nodes, n_controls). ``cells``
    holds every Delta H value (n_nodes, N, n_controls) when it was requested.
    """

    kind: str
    spec_name: str
    nodes: np.ndarray
    times: np.ndarray
    controls: np.ndarray
    ubar: np.ndarray
    N: int
    tol: float
    mean: np.ndarray
    se: np.ndarray
    minimum: np.ndarray
    violation: np.ndarray
    fraction_below_tol: float
    worst_cell: dict
    worst_mean: dict
    first_order_mean: Optional[np.ndarray] = None
    first_order_se: Optional[np.ndarray] = None
    cells: Optional[np.ndarray] = field(default=None, repr=False)
    extra: dict = field(default_factory=dict)

    @property
    def violated(self) -> bool:
        return bool(np.any(self.violation))

    @property
    def ok(self) -> bool:
        return not self.violated

    def violating_controls(self) -> np.ndarray:
        """Controls violating at some node, in grid order."""
        return self.controls[np.any(self.violation, axis=0)]

    def first_order_violation(self) -> np.ndarray:
        if self.first_order_mean is None:
            raise ValueError("report has no first-order column")
        return self.first_order_mean < -_threshold(self.tol, self.first_order_se)

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "spec": self.spec_name,
            "N": self.N,
            "n_nodes": int(self.nodes.size),
            "controls": self.controls.tolist(),
            "tol": self.tol,
            "violated": self.violated,
            "n_violating_cells": int(np.sum(self.violation)),
            "violating_controls": self.violating_controls().tolist(),
            "fraction_below_tol": self.fraction_below_tol,
            "worst_cell": self.worst_cell,
            "worst_mean": self.worst_mean,
        }
        if self.first_order_mean is not None:
            fo = self.first_order_violation()
            out["first_order"] = {
                "violated": bool(np.any(fo)),
                "n_violating_cells": int(np.sum(fo)),
                "min_mean": float(np.min(self.first_order_mean)),
                "mean_by_control": np.mean(self.first_order_mean, axis=0).tolist(),
            }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        """One row per (node, control) with the path statistics."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        ucols = [f"u{j}" for j in range(self.controls.shape[1])]
        head = ["node", "t", *ucols, "mean", "se", "min", "violation"]
        if self.first_order_mean is not None:
            head += ["first_order_mean", "first_order_se"]
        w.writerow(head)
        for a, node in enumerate(self.nodes):
            for b, u in enumerate(self.controls):
                row = [int(node), repr(float(self.times[a])), *(repr(float(v)) for v in u),
                       repr(float(self.mean[a, b])), repr(float(self.se[a, b])),
                       repr(float(self.minimum[a, b])), int(self.violation[a, b])]
                if self.first_order_mean is not None:
                    row += [repr(float(self.first_order_mean[a, b])), repr(float(self.first_order_se[a, b]))]
                w.writerow(row)
        return buf.getvalue()

    def cells_csv(self) -> str:
        """Every (node, path, control) value; only available when cells were kept."""
        if self.cells is None:
            raise ValueError("cells were not kept; rerun with keep_cells=True")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "path", "control_index", "delta_h"])
        for a, node in enumerate(self.nodes):
            for path in range(self.N):
                for b in range(self.controls.shape[0]):
                    w.writerow([int(node), path, b, repr(float(self.cells[a, path, b]))])
        return buf.getvalue()

    def summary_lines(self) -> list:
        wc, wm = self.worst_cell, self.worst_mean
        lines = [
            f"{self.kind} check on {self.spec_name}: {'VIOLATED' if self.violated else 'no violation'}",
            f"  worst cell  {wc['value']:.6g} at t={wc['t']:.6g} path={wc['path']} u={wc['u']}",
            f"  worst mean  {wm['value']:.6g} (se {wm['se']:.3g}) at t={wm['t']:.6g} u={wm['u']}",
            f"  fraction of (t, path) cells with min_u below -tol: {self.fraction_below_tol:.6g}",
        ]
        if self.first_order_mean is not None:
            fo = self.first_order_violation()
            lines.append(f"  first-order condition: {'VIOLATED' if np.any(fo) else 'holds'}"
                         f" (min mean {np.min(self.first_order_mean):.6g})")
        return lines


class _GridAccumulator:
    """Collects per-node Delta H values into MPReport statistics."""

    def __init__(self, nodes, times, controls, N, tol, keep_cells, with_first_order):
        nn, nu = len(nodes), controls.shape[0]
        self.nodes = np.asarray(nodes, dtype=int)
        self.times = np.asarray(times, dtype=float)
        self.controls = controls
        self.N, self.tol = N, tol
        self.row = {int(i): a for a, i in enumerate(self.nodes)}
        self.mean = np.zeros((nn, nu))
        self.se = np.zeros((nn, nu))
        self.minimum = np.zeros((nn, nu))
        self.fo_mean = np.zeros((nn, nu)) if with_first_order else None
        self.fo_se = np.zeros((nn, nu)) if with_first_order else None
        self.ubar = np.zeros((nn, controls.shape[1]))
        self.cells = np.empty((nn, N, nu)) if keep_cells else None
        self.below = 0
        self.worst = (math.inf, 0, 0, 0)

    @staticmethod
    def _stats(v):
        se = v.std(axis=0, ddof=1) / np.sqrt(v.shape[0]) if v.shape[0] > 1 else np.full(v.shape[1], np.inf)
        return v.mean(axis=0), se

    def add(self, node, ubar_row, values, first=None):
        a = self.row[int(node)]
        self.ubar[a] = ubar_row
        self.mean[a], self.se[a] = self._stats(values)
        self.minimum[a] = values.min(axis=0)
        if first is not None:
            self.fo_mean[a], self.fo_se[a] = self._stats(first)
        if self.cells is not None:
            self.cells[a] = values
        per_path = values.min(axis=1)
        self.below += int(np.sum(per_path < -self.tol))
        j = int(np.argmin(values))
        path, b = divmod(j, values.shape[1])
        if values[path, b] < self.worst[0]:
            self.worst = (float(values[path, b]), a, path, b)

    def report(self, kind, spec_name, extra=None) -> MPReport:
        violation = self.mean < -_threshold(self.tol, self.se)
        val, a, path, b = self.worst
        worst_cell = {"value": val, "node": int(self.nodes[a]), "t": float(self.times[a]), "path": int(path),
                      "u": self.controls[b].tolist()}
        a2, b2 = np.unravel_index(int(np.argmin(self.mean)), self.mean.shape)
        worst_mean = {"value": float(self.mean[a2, b2]), "se": float(self.se[a2, b2]),
                      "node": int(self.nodes[a2]), "t": float(self.times[a2]), "u": self.controls[b2].tolist()}
        return MPReport(
            kind, spec_name, self.nodes, self.times, self.controls, self.ubar, self.N, self.tol,
            self.mean, self.se, self.minimum, violation, self.below / (self.N * len(self.nodes)),
            worst_cell, worst_mean, self.fo_mean, self.fo_se, self.cells, dict(extra or {}),
        )


def _node_list(M, node_stride):
    if int(node_stride) != node_stride or node_stride < 1:
        raise ValueError("node_stride must be a positive integer")
    return list(range(0, M, int(node_stride)))


def _delta_h_node(spec, t, xb, yb, zb, ub_row, p, q, P, f_z, controls):
    """Delta H (N, n_controls) and the first-order column at one node."""
    N = xb.shape[0]
    ub = np.broadcast_to(ub_row, (N, spec.k))
    H0 = hamiltonian(spec, t, xb, yb, zb, ub, p, q, P, xb, ub)
    dH = np.empty((N, controls.shape[0]))
    fo = np.empty((N, controls.shape[0]))
    for b, u in enumerate(controls):
        dH[:, b] = hamiltonian(spec, t, xb, yb, zb, u, p, q, P, xb, ub) - H0
        fo[:, b] = first_order_column(spec, t, xb, u, ub, p, f_z)
    return dH, fo


def check_mp(spec: ModelSpec, base_solution: BsdeSolution, adjoints: AdjointProcesses,
             control_grid=None, tol: float = 1e-8, node_stride: int = 1,
             keep_cells: bool = False) -> MPReport:
    """Delta H(u) = H(u) - H(ubar(t)) over nodes 0..M-1, all paths and the control grid."""
    controls = _check_grid(spec, control_grid)
    fwd = base_solution.forward
    g = fwd.grid
    ug = fwd.policy.on_grid(g)
    nodes = _node_list(g.M, node_stride)
    acc = _GridAccumulator(nodes, g.t[nodes], controls, fwd.N, tol, keep_cells, True)
    for i in nodes:
        xb, yb, zb = fwd.values[i], base_solution.y.values[i], base_solution.z.values[i]
        ub = np.broadcast_to(ug[i], (fwd.N, spec.k))
        f_z = spec.Df(g.t[i], xb, yb, zb, ub)[:, spec.n + 1]
        dH, fo = _delta_h_node(spec, g.t[i], xb, yb, zb, ug[i], adjoints.p.values[i],
                               adjoints.q.values[i], adjoints.P.values[i], f_z, controls)
        acc.add(i, ug[i], dH, fo)
    return acc.report("hamiltonian", spec.name)


def stream_check_mp(spec: ModelSpec, forward: TrajectoryEnsemble, noise: NoiseEnsemble,
                    basis: RegressionBasis = RegressionBasis(), control_grid=None, tol: float = 1e-8,
                    node_stride: int = 1) -> MPReport:
    """Same report as :func:`check_mp`, computed during one backward sweep without storing (y, z, p, q, P)."""
    controls = _check_grid(spec, control_grid)
    g = forward.grid
    if g != noise.grid or forward.N != noise.N:
        raise ValueError("forward ensemble and noise do not match")
    ug = forward.policy.on_grid(g)
    nodes = _node_list(g.M, node_stride)
    keep = set(nodes)
    acc = _GridAccumulator(nodes, g.t[nodes], controls, forward.N, tol, False, True)
    for node in stream_base(spec, g, noise.dW, forward.values, ug, basis):
        if node.i not in keep:
            continue
        dH, fo = _delta_h_node(spec, node.t, forward.values[node.i], node.y, node.z, ug[node.i],
                               node.p, node.q, node.P, node.coeffs.f_z, controls)
        acc.add(node.i, ug[node.i], dH, fo)
    return acc.report("hamiltonian", spec.name)


def check_convex_corollary(spec: ModelSpec, base_solution: BsdeSolution, adjoints: AdjointProcesses,
                           control_grid=None, tol: float = 1e-8, node_stride: int = 1) -> MPReport:
    """<b_u^T p + sigma_u^T q + f_z sigma_u^T p + f_u, u - ubar(t)> over the control grid."""
    if spec.b_u is None or spec.sigma_u is None or spec.f_u is None:
        raise ValueError(f"spec {spec.name!r} does not provide b_u, sigma_u and f_u")
    controls = _check_grid(spec, control_grid)
    fwd = base_solution.forward
    g, N = fwd.grid, fwd.N
    ug = fwd.policy.on_grid(g)
    nodes = _node_list(g.M, node_stride)
    acc = _GridAccumulator(nodes, g.t[nodes], controls, N, tol, False, False)
    for i in nodes:
        t, xb, yb, zb = g.t[i], fwd.values[i], base_solution.y.values[i], base_solution.z.values[i]
        ub = np.broadcast_to(ug[i], (N, spec.k))
        p, q = adjoints.p.values[i], adjoints.q.values[i]
        f_z = spec.Df(t, xb, yb, zb, ub)[:, spec.n + 1]
        su = spec.sigma_u(t, xb, ub)
        grad = (np.einsum("pij,pi->pj", spec.b_u(t, xb, ub), p) + np.einsum("pij,pi->pj", su, q)
                + f_z[:, None] * np.einsum("pij,pi->pj", su, p) + spec.f_u(t, xb, yb, zb, ub))
        acc.add(i, ug[i], grad @ (controls - ug[i]).T)
    return acc.report("convex", spec.name)


# -- state constraint --------------------------------------------------------


@dataclass(frozen=True)
class ConstraintMultipliers:
    """(lambda, mu) on the unit circle; ``resolution`` is the number of circle points scanned."""

    lam: float
    mu: float
    resolution: int = DEFAULT_CIRCLE_POINTS

    def __post_init__(self):
        if abs(self.lam**2 + self.mu**2 - 1.0) > 1e-12:
            raise ValueError("multipliers must satisfy lambda^2 + mu^2 = 1")

    @classmethod
    def circle(cls, n: int = DEFAULT_CIRCLE_POINTS) -> list:
        if n < 1:
            raise ValueError("circle grid needs at least one point")
        th = 2.0 * np.pi * np.arange(n) / n
        return [cls(float(np.cos(a)), float(np.sin(a)), n) for a in th]

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "mu": self.mu, "resolution": self.resolution}


@dataclass
class ConstrainedReport:
    """Best multipliers of the circle scan and the check at those multipliers."""

    multipliers: ConstraintMultipliers
    worst_by_angle: np.ndarray
    report: MPReport
    constraint_value: float
    constraint_se: float
    feasible: bool
    expected_varphi_y: float

    @property
    def ok(self) -> bool:
        return self.report.ok

    def certifying(self) -> np.ndarray:
        """Indices of circle points whose worst mean Delta H is >= 0 (up to tolerance)."""
        return np.flatnonzero(self.worst_by_angle >= -self.report.tol)

    def to_dict(self) -> dict:
        return {
            "multipliers": self.multipliers.to_dict(),
            "best_worst_mean": float(np.max(self.worst_by_angle)),
            "n_certifying_angles": int(self.certifying().size),
            "constraint_value": self.constraint_value,
            "constraint_se": self.constraint_se,
            "feasible": self.feasible,
            "expected_varphi_y": self.expected_varphi_y,
            "report": self.report.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary_lines(self) -> list:
        m = self.multipliers
        lines = [f"best multipliers lambda={m.lam:.6f} mu={m.mu:.6f} "
                 f"(worst mean {np.max(self.worst_by_angle):.6g})",
                 f"constraint E[varphi] = {self.constraint_value:.6g} (se {self.constraint_se:.3g})"
                 + ("" if self.feasible else "  INFEASIBLE")]
        return lines + self.report.summary_lines()


def _unit_parts(spec, base_solution, gamma_unit, unit, controls, nodes):
    """Per (node, u) path means of A = gamma Delta H and of C = <p0, db> + <q0, ds> + 1/2 <P0 ds, ds>.

    These give the mean of the constrained Delta H at (lambda, mu) as
    lambda A + mu (E[varphi_y] A + C).
    """
    fwd = base_solution.forward
    g, N = fwd.grid, fwd.N
    ug = fwd.policy.on_grid(g)
    p0, q0, P0 = unit[:3]
    zero = np.zeros((N, spec.n))
    zeroP = np.zeros((N, spec.n, spec.n))
    A = np.zeros((len(nodes), controls.shape[0]))
    C = np.zeros_like(A)
    skip = np.zeros_like(A, dtype=bool)
    for a, i in enumerate(nodes):
        t, xb, yb, zb = g.t[i], fwd.values[i], base_solution.y.values[i], base_solution.z.values[i]
        ub = np.broadcast_to(ug[i], (N, spec.k))
        gam = gamma_unit.values[i].reshape(N)
        p, q, P = (unit[3].values[i], unit[4].values[i], unit[5].values[i])
        H0 = hamiltonian(spec, t, xb, yb, zb, ub, p, q, P, xb, ub)
        ones = np.ones(N)
        c0 = constrained_hamiltonian(spec, t, (xb, yb, zb), ub, (xb, ub),
                                     (p0.values[i], q0.values[i], P0.values[i], zero, zero, zeroP), 0.0 * ones)
        for b, u in enumerate(controls):
            skip[a, b] = np.array_equal(u, ug[i])
            dH = hamiltonian(spec, t, xb, yb, zb, u, p, q, P, xb, ub) - H0
            A[a, b] = np.mean(gam * dH)
            cu = constrained_hamiltonian(spec, t, (xb, yb, zb), u, (xb, ub),
                                         (p0.values[i], q0.values[i], P0.values[i], zero, zero, zeroP),
                                         0.0 * ones)
            C[a, b] = np.mean(cu - c0)
    return A, C, skip


def check_constrained_mp(spec: ModelSpec, base_solution: BsdeSolution, adjoints: AdjointProcesses,
                         gamma_unit: TrajectoryEnsemble, noise: NoiseEnsemble,
                         basis: RegressionBasis = RegressionBasis(), circle_points: int = DEFAULT_CIRCLE_POINTS,
                         control_grid=None, tol: float = 1e-8, node_stride: int = 1,
                         keep_cells: bool = False) -> ConstrainedReport:
    """Scan (lambda, mu) on the unit circle and check the constrained inequality at the best point.

    ``gamma_unit`` solves the gamma equation with gamma(0) = 1; the constrained
    gamma is (lambda + mu E[varphi_y]) gamma_unit, and (p0, q0, P0) are solved once
    with mu = 1 and scaled. The score of an angle is the smallest path mean of the
    constrained Delta H over nodes and controls u != ubar(t); the best angle
    maximizes it, ties going to the first angle (theta = 0, i.e. lambda = 1).
    """
    if spec.constraint is None:
        raise ValueError(f"spec {spec.name!r} has no state constraint")
    controls = _check_grid(spec, control_grid)
    cv, cse = constraint_value(spec, base_solution)
    feasible = abs(cv) <= max(3.0 * cse, tol)
    if not feasible:
        warnings.warn(f"candidate is infeasible: E[varphi] = {cv:.3g} (se {cse:.3g})", RuntimeWarning,
                      stacklevel=2)
    ephi_y = expected_varphi_y(spec, base_solution)
    p0u, q0u, P0u, _ = solve_constrained_adjoints(spec, base_solution, 1.0, noise, basis)
    fwd = base_solution.forward
    g, N = fwd.grid, fwd.N
    nodes = _node_list(g.M, node_stride)
    unit = (p0u, q0u, P0u, adjoints.p, adjoints.q, adjoints.P)
    A, C, skip = _unit_parts(spec, base_solution, gamma_unit, unit, controls, nodes)
    B = ephi_y * A + C
    circle = ConstraintMultipliers.circle(circle_points)
    lam = np.array([m.lam for m in circle])
    mu = np.array([m.mu for m in circle])
    Aa, Bb = A[~skip], B[~skip]
    if Aa.size:
        worst = np.min(lam[:, None] * Aa[None, :] + mu[:, None] * Bb[None, :], axis=1)
    else:
        worst = np.zeros(circle_points)
    best = circle[int(np.argmax(worst))]

    # direct evaluation at the chosen multipliers
    gamma0 = best.lam + best.mu * ephi_y
    ug = fwd.policy.on_grid(g)
    acc = _GridAccumulator(nodes, g.t[nodes], controls, N, tol, keep_cells, True)
    for i in nodes:
        t, xb, yb, zb = g.t[i], fwd.values[i], base_solution.y.values[i], base_solution.z.values[i]
        ub = np.broadcast_to(ug[i], (N, spec.k))
        gam = gamma0 * gamma_unit.values[i].reshape(N)
        adj = (best.mu * p0u.values[i], best.mu * q0u.values[i], best.mu * P0u.values[i],
               adjoints.p.values[i], adjoints.q.values[i], adjoints.P.values[i])
        f_z = spec.Df(t, xb, yb, zb, ub)[:, spec.n + 1]
        Hc0 = constrained_hamiltonian(spec, t, (xb, yb, zb), ub, (xb, ub), adj, gam)
        dH = np.empty((N, controls.shape[0]))
        fo = np.empty_like(dH)
        for b, u in enumerate(controls):
            dH[:, b] = constrained_hamiltonian(spec, t, (xb, yb, zb), u, (xb, ub), adj, gam) - Hc0
            fo[:, b] = gam * first_order_column(spec, t, xb, u, ub, adj[3], f_z)
        acc.add(i, ug[i], dH, fo)
    extra = {"lambda": best.lam, "mu": best.mu, "gamma0": gamma0}
    report = acc.report("constrained", spec.name, extra)
    return ConstrainedReport(best, worst, report, cv, cse, feasible, ephi_y)
