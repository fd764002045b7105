"""Least-squares conditional expectations for the backward sweeps.

At step i a target Y_{i+1} is regressed jointly on

    [Phi, Phi * h1, Phi * h2],   h1 = dW / sqrt(dt),   h2 = (dW^2 - dt) / (sqrt(2) dt)

where Phi are polynomial features of the node-i state. Since h1 and h2 are
orthonormal, mean zero and independent of Phi, the first block estimates
E[Y | F_i] and the second estimates E[Y h1 | F_i], which gives
z_i = E[Y dW | F_i] / dt. The extra blocks also act as control variates, and the
fit is exact whenever Y is a polynomial of degree <= 2 in dW with coefficients
in span(Phi).
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class RegressionError(RuntimeError):
    pass


class FixedPointError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial feature map of total degree ``degree`` on standardized state coordinates.

    ``ridge`` is a relative eigenvalue cutoff for the normal equations.
    ``min_paths_per_feature`` guards the design size: when the design would have
    more than N / min_paths_per_feature columns the node falls back to constant
    features.
    """

    degree: int = 3
    ridge: float = 1e-8
    min_paths_per_feature: int = 10
    max_iter: int = 5
    tol: float = 1e-12

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if not 0 <= self.ridge < 1:
            raise ValueError("ridge must lie in [0, 1)")
        if self.max_iter < 1 or self.tol <= 0:
            raise ValueError("fixed-point settings must be positive")

    def describe(self) -> dict:
        return {"degree": self.degree, "ridge": self.ridge,
                "min_paths_per_feature": self.min_paths_per_feature,
                "max_iter": self.max_iter, "tol": self.tol}


def standardize(cols: np.ndarray) -> np.ndarray:
    """Centre and scale each column; columns with (relative) zero spread are removed."""
    if cols.shape[1] == 0:
        return cols
    mean = cols.mean(axis=0)
    sd = cols.std(axis=0)
    keep = sd > 1e-12 * (1.0 + np.abs(mean))
    return (cols[:, keep] - mean[keep]) / sd[keep]


def scale_only(cols: np.ndarray) -> np.ndarray:
    """Scale columns by their RMS without centring (keeps zero at zero); drops null columns."""
    if cols.shape[1] == 0:
        return cols
    rms = np.sqrt(np.mean(cols**2, axis=0))
    keep = rms > 1e-300
    return cols[:, keep] / rms[keep]


def monomials(z: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= ``degree`` in the columns of z, constant first."""
    N, d = z.shape
    feats = [np.ones(N)]
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), deg):
            col = z[:, combo[0]].copy()
            for j in combo[1:]:
                col *= z[:, j]
            feats.append(col)
    return np.column_stack(feats)


def state_features(x: np.ndarray, degree: int) -> np.ndarray:
    return monomials(standardize(np.asarray(x).reshape(x.shape[0], -1)), degree)


def variational_features(xbar: np.ndarray, x1: np.ndarray, x2: Optional[np.ndarray], degree: int) -> np.ndarray:
    """psi_D(xbar), psi_{D-1}(xbar) x1_j, psi_{D-2}(xbar) x1_j x1_l and psi_{D-1}(xbar) x2_j.

    The base state is standardized; x1 and x2 are only rescaled so that the
    features vanish with the variation.
    """
    N = xbar.shape[0]
    zb = standardize(xbar.reshape(N, -1))
    blocks = [monomials(zb, degree)]
    v1 = scale_only(x1.reshape(N, -1))
    if degree >= 1 and v1.shape[1]:
        low = monomials(zb, degree - 1)
        blocks.append((low[:, :, None] * v1[:, None, :]).reshape(N, -1))
        if degree >= 2:
            low2 = monomials(zb, degree - 2)
            pairs = [v1[:, j] * v1[:, l] for j, l in
                     itertools.combinations_with_replacement(range(v1.shape[1]), 2)]
            quad = np.column_stack(pairs)
            blocks.append((low2[:, :, None] * quad[:, None, :]).reshape(N, -1))
    if x2 is not None and degree >= 1:
        v2 = scale_only(x2.reshape(N, -1))
        if v2.shape[1]:
            low = monomials(zb, degree - 1)
            blocks.append((low[:, :, None] * v2[:, None, :]).reshape(N, -1))
    return np.column_stack(blocks)


@dataclass
class NodeDiagnostics:
    node: int
    n_columns: int
    n_truncated: int
    condition: float
    fallback: bool = False


class NodeRegression:
    """Factorized joint regression at one node; ``project`` may be called for many targets.

    Columns are scaled to unit RMS through the Gram diagonal, columns that vanish
    on every path are dropped, and eigenvalues below ``ridge`` times the largest
    are truncated.
    """

    def __init__(self, phi: np.ndarray, dW: np.ndarray, dt: float, basis: RegressionBasis, node: int = -1):
        N = phi.shape[0]
        fallback = False
        if 3 * phi.shape[1] * basis.min_paths_per_feature > N and phi.shape[1] > 1:
            warnings.warn(
                f"node {node}: {3 * phi.shape[1]} design columns for {N} paths; using constant features",
                RuntimeWarning, stacklevel=2,
            )
            phi = np.ones((N, 1))
            fallback = True
        p = phi.shape[1]
        sq = np.sqrt(dt)
        h1 = dW / sq
        h2 = (dW * dW - dt) / (np.sqrt(2.0) * dt)
        X = np.empty((N, 3 * p))
        X[:, :p] = phi
        np.multiply(phi, h1[:, None], out=X[:, p:2 * p])
        np.multiply(phi, h2[:, None], out=X[:, 2 * p:])
        G = X.T @ X / N
        d = np.sqrt(np.diag(G))
        keep = d > 1e-150
        idx = np.flatnonzero(keep)
        scale = 1.0 / d[idx]
        Gs = G[np.ix_(idx, idx)] * scale[:, None] * scale[None, :]
        w, V = np.linalg.eigh(Gs)
        if not np.all(np.isfinite(w)) or w[-1] <= 0:
            raise RegressionError(f"node {node}: degenerate design matrix")
        ok = w > max(basis.ridge, 1e-15) * w[-1]
        # pseudo-inverse of the unscaled Gram restricted to the kept columns
        Vs = V[:, ok] * scale[:, None]
        self._Vs = Vs
        self._winv = 1.0 / w[ok]
        self._idx = idx
        self.p = p
        self.X = X
        self.phi = phi
        self.N = N
        self.sqdt = sq
        self.diagnostics = NodeDiagnostics(
            node, int(idx.size), int(np.sum(~ok)), float(w[-1] / w[ok][0]), fallback
        )

    def _solve(self, rhs_full):
        rhs = rhs_full[self._idx]
        C = np.zeros_like(rhs_full)
        C[self._idx] = self._Vs @ (self._winv[:, None] * (self._Vs.T @ rhs))
        return C

    def coefficients(self, Y: np.ndarray) -> np.ndarray:
        X, N = self.X, self.N
        C = self._solve(X.T @ Y / N)
        # one refinement step against rounding in the normal equations
        R = Y - X @ C
        C += self._solve(X.T @ R / N)
        return C

    def project(self, Y: np.ndarray):
        """(E[Y | F_i], E[Y dW | F_i] / dt) for targets Y of shape (N,) or (N, m)."""
        Y = np.asarray(Y, dtype=float)
        flat = Y.reshape(self.N, -1)
        C = self.coefficients(flat)
        p = self.p
        E = self.phi @ C[:p]
        Z = self.phi @ C[p:2 * p] / self.sqdt
        return E.reshape(Y.shape), Z.reshape(Y.shape)


def implicit_step(E: np.ndarray, g, dt: float, basis: RegressionBasis, node: int = -1,
                  g_y=None) -> np.ndarray:
    """Solve y = E + g(y) dt by iteration started at y = E.

    Without ``g_y`` this is plain fixed-point iteration, which contracts when
    |g_y| dt < 1. With the derivative it uses the Newton map
    y <- y - (y - E - g(y) dt) / (1 - g_y(y) dt), exact in one step for drivers
    linear in y.
    """
    y = E
    for _ in range(basis.max_iter):
        if g_y is None:
            y_new = E + g(y) * dt
        else:
            y_new = y - (y - E - g(y) * dt) / (1.0 - g_y(y) * dt)
        if not np.all(np.isfinite(y_new)):
            raise FixedPointError(f"node {node}: non-finite iterate in the implicit step")
        change = float(np.max(np.abs(y_new - y))) if y_new.size else 0.0
        y = y_new
        scale = max(1.0, float(np.max(np.abs(y)))) if y.size else 1.0
        if change <= basis.tol * scale:
            return y
    raise FixedPointError(f"node {node}: implicit step did not converge in {basis.max_iter} iterations")
