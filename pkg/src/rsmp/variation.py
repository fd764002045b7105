"""Spike variations, reconstruction of the expansion terms and empirical order studies."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .adjoint import hess_contract, mT_vec, stream_base
from .bsde import linear_scalar_step, mc_mean_se, second_expansion_forcing, spike_forcing
from .model import ControlPolicy, ModelSpec, SpikeConfig, SpikePolicy, eval_coeffs
from .paths import (
    NoiseEnsemble,
    TimeGrid,
    TrajectoryEnsemble,
    gamma_from_coefficients,
    generate_noise,
    simulate_forward,
    simulate_x1,
    simulate_x2,
)
from .regression import (
    NodeRegression,
    RegressionBasis,
    implicit_step,
    state_features,
    variational_features,
)


def make_spike_control(base: ControlPolicy, spike: SpikeConfig, control_set=None) -> ControlPolicy:
    """u^eps: ``base`` off [s, s + eps) and the constant ``spike.u`` on it."""
    if control_set is not None and not control_set.contains(spike.u):
        raise ValueError(f"spike control {spike.u.tolist()} is not in the control set")
    return SpikePolicy(base, spike)


# -- pathwise reconstructions -------------------------------------------------


def _dot(a, b):
    return np.einsum("pi,pi->p", a, b)


def _quad(A, v):
    return np.einsum("pi,pij,pj->p", v, A, v)


def delta_sigma_terms(spec, t, xb, ub, u):
    """(delta_sigma, delta_sigma_x) at xb for ub -> u, batched."""
    N = xb.shape[0]
    uu = np.broadcast_to(u, (N, spec.k))
    ds = spec.sigma(t, xb, uu) - spec.sigma(t, xb, ub)
    dsx = spec.sigma_x(t, xb, uu) - spec.sigma_x(t, xb, ub)
    return ds, dsx


def y1z1_node(sigma_x, p, q, x1, ds, on_spike):
    """y1 = <p, x1>, z1 = <p, ds> I_E + <sigma_x^T p + q, x1>."""
    y1 = _dot(p, x1)
    z1 = _dot(mT_vec(sigma_x, p) + q, x1)
    if on_spike:
        z1 = z1 + _dot(p, ds)
    return y1, z1


def y2z2_node(sigma_x, sigma_xx, p, q, P, Q, x1, x2, ds, dsx, y_hat, z_hat, on_spike):
    """Second-order terms:

    y2 = <p, x2> + 1/2 <P x1, x1> + y_hat
    z2 = <sigma_x^T p + q, x2> + <ds_x^T p + 1/2 P ds + 1/2 P^T ds, x1> I_E
         + 1/2 <[sigma_xx^T p + P sigma_x + sigma_x^T P + Q] x1, x1> + z_hat
    """
    y2 = _dot(p, x2) + 0.5 * _quad(P, x1) + y_hat
    sxT = np.swapaxes(sigma_x, -1, -2)
    K = hess_contract(sigma_xx, p) + P @ sigma_x + sxT @ P + Q
    z2 = _dot(mT_vec(sigma_x, p) + q, x2) + 0.5 * _quad(K, x1) + z_hat
    if on_spike:
        PT = np.swapaxes(P, -1, -2)
        v = mT_vec(dsx, p) + 0.5 * np.einsum("pij,pj->pi", P, ds) + 0.5 * np.einsum("pij,pj->pi", PT, ds)
        z2 = z2 + _dot(v, x1)
    return y2, z2


def _scalar_values(ens):
    v = ens.values
    return v.reshape(v.shape[0], v.shape[1])


def reconstruct_y1z1(spec: ModelSpec, pq, x1: TrajectoryEnsemble, spike: SpikeConfig, base_solution):
    """Pathwise (y1, z1) from the first-order adjoint and x1."""
    p, q = pq
    fwd = base_solution.forward
    g, N = fwd.grid, fwd.N
    ind = spike.indicator(g)
    ubar = fwd.policy.on_grid(g)
    y1 = np.empty((g.M + 1, N))
    z1 = np.empty((g.M, N))
    for i in range(g.M + 1):
        y1[i] = _dot(p.values[i], x1.values[i])
        if i == g.M:
            break
        t, xb = g.t[i], fwd.values[i]
        ub = np.broadcast_to(ubar[i], (N, spec.k))
        ds, _ = delta_sigma_terms(spec, t, xb, ub, spike.u)
        _, z1[i] = y1z1_node(spec.sigma_x(t, xb, ub), p.values[i], q.values[i], x1.values[i], ds, ind[i])
    pol = fwd.policy
    return (TrajectoryEnsemble(g, y1, "y1", fwd.seed, pol), TrajectoryEnsemble(g, z1, "z1", fwd.seed, pol))


def reconstruct_y2z2(spec: ModelSpec, pq, PQ, x1: TrajectoryEnsemble, x2: TrajectoryEnsemble, hat,
                     spike: SpikeConfig, base_solution):
    """Pathwise (y2, z2); ``hat`` is the (y_hat, z_hat) solution."""
    p, q = pq
    P, Q = PQ
    fwd = base_solution.forward
    g, N = fwd.grid, fwd.N
    ind = spike.indicator(g)
    ubar = fwd.policy.on_grid(g)
    yh, zh = _scalar_values(hat.y), _scalar_values(hat.z)
    y2 = np.empty((g.M + 1, N))
    z2 = np.empty((g.M, N))
    for i in range(g.M + 1):
        if i == g.M:
            y2[i] = _dot(p.values[i], x2.values[i]) + 0.5 * _quad(P.values[i], x1.values[i]) + yh[i]
            break
        t, xb = g.t[i], fwd.values[i]
        ub = np.broadcast_to(ubar[i], (N, spec.k))
        ds, dsx = delta_sigma_terms(spec, t, xb, ub, spike.u)
        y2[i], z2[i] = y2z2_node(spec.sigma_x(t, xb, ub), spec.sigma_xx(t, xb, ub), p.values[i], q.values[i],
                                 P.values[i], Q.values[i], x1.values[i], x2.values[i], ds, dsx,
                                 yh[i], zh[i], ind[i])
    pol = fwd.policy
    return (TrajectoryEnsemble(g, y2, "y2", fwd.seed, pol), TrajectoryEnsemble(g, z2, "z2", fwd.seed, pol))


# -- slope fitting ----------------------------------------------------------


@dataclass(frozen=True)
class OrderFit:
    slope: float
    intercept: float
    se: float
    ci_low: float
    ci_high: float


def estimate_order(pairs: Sequence[tuple], level: float = 0.95) -> OrderFit:
    """OLS of log(residual) on log(eps) with a t-based confidence interval for the slope."""
    pairs = list(pairs)
    if len(pairs) < 3:
        raise ValueError("need at least three (eps, residual) points")
    eps = np.array([float(e) for e, _ in pairs])
    res = np.array([float(r) for _, r in pairs])
    if np.any(res <= 0) or np.any(eps <= 0):
        raise ValueError("eps and residuals must be positive")
    fit = stats.linregress(np.log(eps), np.log(res))
    dof = len(pairs) - 2
    se = float(fit.stderr)
    half = float(stats.t.ppf(0.5 + level / 2, dof)) * se
    return OrderFit(float(fit.slope), float(fit.intercept), se, float(fit.slope) - half, float(fit.slope) + half)


# -- order study --------------------------------------------------------------

ZERO_RESIDUAL = 1e-20
MAX_RELATIVE_SE = 0.25
# standard errors from fewer paths are themselves too noisy to support a verdict
MIN_PATHS = 100


@dataclass
class EstimateResult:
    label: str
    claim: str
    threshold: float
    eps: list
    residual: list
    se: list
    slope: Optional[float] = None
    slope_se: Optional[float] = None
    ci: Optional[tuple] = None
    verdict: str = "inconclusive"
    note: str = ""
    n_paths: Optional[int] = None

    def judge(self):
        r = np.array(self.residual)
        s = np.array(self.se)
        if self.n_paths is not None and self.n_paths < MIN_PATHS:
            self.verdict, self.note = "inconclusive", f"fewer than {MIN_PATHS} paths"
            return self
        if np.all(r <= ZERO_RESIDUAL):
            self.verdict, self.note = "inconclusive", "identically zero"
            return self
        if np.any(r <= 0) or np.any(s >= r):
            self.verdict, self.note = "inconclusive", "Monte Carlo error dominates"
            return self
        fit = estimate_order(zip(self.eps, self.residual))
        self.slope, self.slope_se, self.ci = fit.slope, fit.se, (fit.ci_low, fit.ci_high)
        if np.max(s / r) > MAX_RELATIVE_SE:
            self.verdict, self.note = "inconclusive", f"relative standard error above {MAX_RELATIVE_SE}"
            return self
        self.verdict = "pass" if fit.slope >= self.threshold else "fail"
        return self


def estimate_table(beta: float = 1.0, vbs_beta: float = 2.0) -> dict:
    """Label -> (claim, threshold): 0.1 below integer orders for O(.), 0.1 above for o(.)."""
    return {
        "est1": (f"O(eps^{beta:g})", beta - 0.1),
        "est2": (f"O(eps^{beta:g})", beta - 0.1),
        "est3": (f"O(eps^{2 * beta:g})", 2 * beta - 0.1),
        "est4": (f"O(eps^{2 * beta:g})", 2 * beta - 0.1),
        "est5": (f"o(eps^{2 * beta:g})", 2 * beta + 0.1),
        "est6": ("o(eps)", 1.1),
        "vbs1": ("O(eps^2)", 1.9),
        "vbs2": (f"o(eps^{vbs_beta / 2:g})", vbs_beta / 2 + 0.1),
        "vbs3": ("O(eps^2)", 1.9),
        "vbs4": ("o(eps^2)", 2.1),
        "veq123": ("o(eps^2)", 2.1),
        "equivalence": ("o(eps^2)", 2.1),
        "equivalence_full": ("o(eps^2)", 2.1),
    }


@dataclass
class CrossEstimate:
    eps: float
    bsde: float
    bsde_se: float
    gamma: float
    gamma_se: float

    @property
    def combined_se(self) -> float:
        return math.hypot(self.bsde_se, self.gamma_se)

    @property
    def agree(self) -> bool:
        return abs(self.bsde - self.gamma) <= 3 * self.combined_se


@dataclass
class OrderReport:
    spec_name: str
    config: dict
    estimates: dict
    cross: list = field(default_factory=list)
    y0: Optional[float] = None
    y0_se: Optional[float] = None

    def conclusive_failures(self) -> list:
        return [k for k, e in self.estimates.items() if e.verdict == "fail"]

    @property
    def ok(self) -> bool:
        return not self.conclusive_failures()

    def to_dict(self) -> dict:
        return {
            "spec": self.spec_name,
            "config": self.config,
            "y0": self.y0,
            "y0_se": self.y0_se,
            "estimates": {k: asdict(v) for k, v in self.estimates.items()},
            "cross_estimator": [dict(asdict(c), combined_se=c.combined_se, agree=c.agree) for c in self.cross],
            "ok": self.ok,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimate", "eps", "residual", "se"])
        for k, e in self.estimates.items():
            for a, r, s in zip(e.eps, e.residual, e.se):
                w.writerow([k, repr(float(a)), repr(float(r)), repr(float(s))])
        return buf.getvalue()

    def summary_lines(self) -> list:
        lines = []
        for k, e in self.estimates.items():
            slope = "n/a" if e.slope is None else f"{e.slope:.3f}"
            extra = f" ({e.note})" if e.note else ""
            lines.append(f"{k:17s} slope={slope:>7s} threshold={e.threshold:.2f} {e.verdict}{extra}")
        return lines


class _Acc:
    """Per-path running sup and time integral for one residual family."""

    def __init__(self, N):
        self.sup = np.zeros(N)
        self.integral = np.zeros(N)

    def sup_update(self, v):
        np.maximum(self.sup, v, out=self.sup)

    def add(self, v, dt):
        self.integral += v * dt


def _norm_sq(v):
    return np.einsum("pi,pi->p", v, v) if v.ndim == 2 else v * v


@dataclass
class _Forward:
    xb: np.ndarray
    xe: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    ue: np.ndarray
    ub: np.ndarray
    ind: np.ndarray


def _base_sweep(spec, grid, dW, xb, ub, basis, gamma_out):
    """Base cost BSDE only; fills ``gamma_out`` with gamma (gamma(0) = 1) and returns (y0, se)."""
    M, dt, N, n = grid.M, grid.dt, xb.shape[1], spec.n
    Y = spec.phi(xb[M])
    eta = Y.copy()
    gamma_out[0] = 0.0
    for i in range(M - 1, -1, -1):
        t, xi = grid.t[i], xb[i]
        u = np.broadcast_to(ub[i], (N, spec.k))
        nr = NodeRegression(state_features(xi, basis.degree), dW[i], dt, basis, i)
        E, Z = nr.project(Y)
        Y = implicit_step(E, lambda yy: spec.f(t, xi, yy, Z, u), dt, basis, i,
                          g_y=lambda yy: spec.Df(t, xi, yy, Z, u)[:, n])
        Df = spec.Df(t, xi, Y, Z, u)
        fy, fz = Df[:, n], Df[:, n + 1]
        gamma_out[i + 1] = (fy - 0.5 * fz * fz) * dt + fz * dW[i]
        eta += spec.f(t, xi, Y, Z, u) * dt
    np.cumsum(gamma_out, axis=0, out=gamma_out)
    np.exp(gamma_out, out=gamma_out)
    return float(np.mean(Y)), mc_mean_se(eta)[1]


def _forward_residuals(spec, fw: _Forward, beta):
    """Per-path values of the state estimates (est1-est5) and the est6 integrand."""
    M = fw.xb.shape[0] - 1
    N = fw.xb.shape[1]
    sups = {k: np.zeros(N) for k in ("est1", "est2", "est3", "est4", "est5")}
    for i in range(M + 1):
        d = fw.xe[i] - fw.xb[i]
        r4 = d - fw.x1[i]
        r5 = r4 - fw.x2[i]
        for k, v in (("est1", d), ("est2", fw.x1[i]), ("est3", fw.x2[i]), ("est4", r4), ("est5", r5)):
            np.maximum(sups[k], _norm_sq(v) ** beta, out=sups[k])
    xbT, x1T, x2T = fw.xb[M], fw.x1[M], fw.x2[M]
    e6 = (spec.phi(fw.xe[M]) - spec.phi(xbT) - _dot(spec.phi_x(xbT), x1T + x2T)
          - 0.5 * _quad(spec.phi_xx(xbT), x1T))
    return sups, e6


def _lockstep_sweep(spec, grid, dW, fw: _Forward, gamma, spike_u, basis, vbs_beta):
    """One backward sweep advancing the base, perturbed and variational BSDEs together.

    Only per-path residual accumulators are kept; no backward ensemble is stored.
    """
    M, dt, N, n = grid.M, grid.dt, fw.xb.shape[1], spec.n
    xb, xe, x1, x2 = fw.xb, fw.xe, fw.x1, fw.x2
    xbT, x1T, x2T = xb[M], x1[M], x2[M]
    # terminal values
    yb = spec.phi(xbT)
    p = spec.phi_x(xbT)
    P = spec.phi_xx(xbT)
    ye = spec.phi(xe[M])
    yh = np.zeros(N)
    y1t = _dot(spec.phi_x(xbT), x1T)
    y2t = _dot(spec.phi_x(xbT), x2T) + 0.5 * _quad(spec.phi_xx(xbT), x1T)
    eta_hat = np.zeros(N)
    gamma_hat = np.zeros(N)

    acc = {k: _Acc(N) for k in ("dY", "hat", "vbs4", "eq")}

    def y_residuals(yb, ye, p, P, yh, y1t, y2t, xb_i, x1_i, x2_i):
        y1 = _dot(p, x1_i)
        y2 = _dot(p, x2_i) + 0.5 * _quad(P, x1_i) + yh
        dY = ye - y1 - (y2 - yh) - yb          # ybar^eps - ybar
        acc["dY"].sup_update(np.abs(dY))
        acc["hat"].sup_update(np.abs(yh))
        acc["vbs4"].sup_update(np.abs(dY - yh))
        acc["eq"].sup_update(np.abs(y1 + y2 - y1t - y2t))

    y_residuals(yb, ye, p, P, yh, y1t, y2t, xbT, x1T, x2T)

    for node in stream_base(spec, grid, dW, xb, fw.ub, basis):
        i, t, c = node.i, node.t, node.coeffs
        yb, zb, p, q, P, Qm = node.y, node.z, node.p, node.q, node.P, node.Q
        ub = np.broadcast_to(fw.ub[i], (N, spec.k))
        ue = np.broadcast_to(fw.ue[i], (N, spec.k))
        on = bool(fw.ind[i])

        # perturbed cost BSDE
        nr = NodeRegression(state_features(xe[i], basis.degree), dW[i], dt, basis, i)
        Ee, ze = nr.project(ye)
        ye = implicit_step(Ee, lambda yy: spec.f(t, xe[i], yy, ze, ue), dt, basis, i,
                           g_y=lambda yy: spec.Df(t, xe[i], yy, ze, ue)[:, n])

        # variational group: y_hat, y1~, y2~
        nr = NodeRegression(variational_features(xb[i], x1[i], x2[i], basis.degree), dW[i], dt, basis, i)
        Ev, Zv = nr.project(np.column_stack([yh, y1t, y2t]))
        zh, z1t, z2t = Zv[:, 0], Zv[:, 1], Zv[:, 2]
        forcing = spike_forcing(spec, t, xb[i], yb, zb, ub, spike_u, p, q, P) if on else 0.0
        yh, drv = linear_scalar_step(Ev[:, 0], zh, c.f_y, c.f_z, forcing, dt)
        eta_hat += drv * dt
        if on:
            gamma_hat += gamma[i] * forcing * dt
        y1t, _ = linear_scalar_step(Ev[:, 1], z1t, c.f_y, c.f_z, _dot(c.f_x, x1[i]), dt)
        f2 = second_expansion_forcing(spec, c, t, xb[i], yb, zb, ub, spike_u, p, x1[i], x2[i], y1t, z1t, on)
        y2t, _ = linear_scalar_step(Ev[:, 2], z2t, c.f_y, c.f_z, f2, dt)

        # residuals at node i
        y_residuals(yb, ye, p, P, yh, y1t, y2t, xb[i], x1[i], x2[i])
        ds, dsx = delta_sigma_terms(spec, t, xb[i], ub, spike_u)
        _, z1 = y1z1_node(c.sigma_x, p, q, x1[i], ds, on)
        _, z2 = y2z2_node(c.sigma_x, c.sigma_xx, p, q, P, Qm, x1[i], x2[i], ds, dsx, yh, zh, on)
        dZ = ze - zb - (z1 + z2 - zh)               # zbar^eps - zbar
        acc["dY"].add(dZ * dZ, dt)
        acc["hat"].add(zh * zh, dt)
        acc["vbs4"].add((dZ - zh) ** 2, dt)
        acc["eq"].add((z1 + z2 - z1t - z2t) ** 2, dt)

    a = acc
    per_path = {
        "vbs1": a["dY"].sup**2 + a["dY"].integral,
        "vbs2": a["dY"].sup**vbs_beta + a["dY"].integral ** (vbs_beta / 2),
        "vbs3": a["hat"].sup**2 + a["hat"].integral,
        "vbs4": a["vbs4"].sup**2 + a["vbs4"].integral,
        "veq123": a["vbs4"].sup**2,
        "equivalence": a["eq"].sup**2,
        "equivalence_full": a["eq"].sup**2 + a["eq"].integral,
    }
    hat0 = float(np.mean(yh))
    cross = (hat0, mc_mean_se(eta_hat)[1], *mc_mean_se(gamma_hat))
    return per_path, cross


def run_order_study(spec: ModelSpec, base_policy: ControlPolicy, spike_u, s: float,
                    eps_ladder: Sequence[float], N: int, M: int, seed: int,
                    basis: RegressionBasis = RegressionBasis(), beta: float = 1.0, vbs_beta: float = 2.0,
                    flip_delta_sigma: bool = False, workers: int = 1, progress=None) -> OrderReport:
    """Residuals of all expansion estimates over an eps-ladder on common noise, with fitted slopes.

    Every ladder point reuses the same NoiseEnsemble (common random numbers). Each
    point needs three extra (M + 1, N, n) state buffers, so ``workers`` > 1 trades
    memory for wall time.
    """
    grid = TimeGrid(spec.T, M)
    ladder = [float(e) for e in eps_ladder]
    if len(ladder) < 3:
        raise ValueError("eps ladder needs at least three points")
    if any(b >= a for a, b in zip(ladder, ladder[1:])):
        raise ValueError("eps ladder must be strictly decreasing")
    spike_u = np.atleast_1d(np.asarray(spike_u, dtype=float))
    spikes = [SpikeConfig(s, e, spike_u) for e in ladder]
    for sp in spikes:
        if sp.eps <= 0:
            raise ValueError("eps values must be positive")
        sp.node_range(grid)
    if not spec.control_set.contains(spike_u):
        raise ValueError(f"spike control {spike_u.tolist()} is not in the control set")

    noise = generate_noise(grid, N, seed)
    base = simulate_forward(spec, base_policy, noise, label="xbar")
    ub = base_policy.on_grid(grid)
    gamma = np.empty((M + 1, N))
    y0, y0_se = _base_sweep(spec, grid, noise.dW, base.values, ub, basis, gamma)

    def one_point(k):
        sp = spikes[k]
        pol = make_spike_control(base_policy, sp)
        xe = simulate_forward(spec, pol, noise, label="x_eps")
        x1 = simulate_x1(spec, base, sp, noise, flip_delta_sigma=flip_delta_sigma)
        x2 = simulate_x2(spec, base, x1, sp, noise)
        fw = _Forward(base.values, xe.values, x1.values, x2.values, pol.on_grid(grid), ub, sp.indicator(grid))
        sups, e6 = _forward_residuals(spec, fw, beta)
        per_path, cross = _lockstep_sweep(spec, grid, noise.dW, fw, gamma, spike_u, basis, vbs_beta)
        out = {}
        for key, v in {**sups, **per_path}.items():
            out[key] = mc_mean_se(v)
        m6, s6 = mc_mean_se(e6)
        out["est6"] = (abs(m6), s6)
        if progress is not None:
            progress(f"eps={sp.eps:g} done")
        return out, CrossEstimate(sp.eps, *cross)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(one_point, range(len(spikes))))
    else:
        results = [one_point(k) for k in range(len(spikes))]

    table = estimate_table(beta, vbs_beta)
    estimates = {}
    for label, (claim, thr) in table.items():
        res = [r[0][label][0] for r in results]
        ses = [r[0][label][1] for r in results]
        estimates[label] = EstimateResult(label, claim, thr, ladder, res, ses, n_paths=N).judge()
    config = {
        "spec": spec.name, "base_control": ub[0].tolist(), "spike_u": spike_u.tolist(), "s": s,
        "eps_ladder": ladder, "N": N, "M": M, "seed": seed, "beta": beta, "vbs_beta": vbs_beta,
        "basis": basis.describe(), "flip_delta_sigma": flip_delta_sigma,
    }
    return OrderReport(spec.name, config, estimates, [r[1] for r in results], y0, y0_se)
