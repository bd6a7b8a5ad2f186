"""Gaussian quadrature for expectations of the form E_x int f(x, z) Dz."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss

from .errors import ConfigurationError, NumericError

MAX_ORDER = 200


@dataclass(frozen=True, eq=False)
class Quadrature:
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights < 0):
            raise ConfigurationError("quadrature weights must be nonnegative")

    def __len__(self):
        return len(self.nodes)

    def integrate(self, f):
        return float(np.dot(self.weights, f(self.nodes)))


def gauss_hermite(order):
    """Probabilists' Gauss-Hermite rule normalized so the weights sum to 1."""
    order = int(order)
    if order < 1:
        raise ConfigurationError("quadrature order must be >= 1")
    if order > MAX_ORDER:
        raise ConfigurationError(f"Gauss-Hermite order {order} exceeds the stable limit {MAX_ORDER}")
    z, w = hermegauss(order)
    return Quadrature(z, w / math.sqrt(2 * math.pi))


def expect_xz(f, prior, quad):
    """sum_x p(x) sum_i w_i f(x, z_i) over the prior's quadrature atoms."""
    xv, px = prior.nodes()
    X, Z = np.meshgrid(xv, quad.nodes, indexing="ij")
    vals = np.broadcast_to(np.asarray(f(X, Z), dtype=float), X.shape)
    bad = ~np.isfinite(vals)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise NumericError(f"non-finite integrand at x={X[i, j]!r}, z={Z[i, j]!r}")
    return float(px @ vals @ quad.weights)


# --------------------------------------------------------------------------
# Breakpoint-aware rule: composite Gauss-Legendre on [-T, T] with extra panel
# edges wherever the integrand has a kink or jump.

_PANEL_CACHE = {}


def _legendre(m):
    if m not in _PANEL_CACHE:
        _PANEL_CACHE[m] = leggauss(m)
    return _PANEL_CACHE[m]


@dataclass(frozen=True)
class PanelRule:
    half_width: float = 10.0
    panels: int = 8
    nodes_per_panel: int = 16

    def rows(self, breaks):
        """Per-row rules for int . Dz.

        ``breaks`` has shape (rows, b) and holds z-locations where the
        integrand is non-smooth (NaN for unused slots).  Returns ``(Z, W)``,
        both (rows, (panels + b) * nodes_per_panel), each row of W summing to 1.
        """
        breaks = np.atleast_2d(np.asarray(breaks, dtype=float))
        T = self.half_width
        nrow = breaks.shape[0]
        base = np.broadcast_to(np.linspace(-T, T, self.panels + 1), (nrow, self.panels + 1))
        extra = np.where(np.isfinite(breaks), np.clip(breaks, -T, T), T)
        edges = np.sort(np.concatenate([base, extra], axis=1), axis=1)
        lo, hi = edges[:, :-1], edges[:, 1:]
        xi, wi = _legendre(self.nodes_per_panel)
        mid = (lo + hi)[..., None] / 2
        half = (hi - lo)[..., None] / 2
        Z = (mid + half * xi).reshape(nrow, -1)
        W = (half * wi).reshape(nrow, -1) * np.exp(-Z * Z / 2) / math.sqrt(2 * math.pi)
        W /= W.sum(axis=1, keepdims=True)
        return Z, W


def z_rule(x, scale, utility, lam_s, rule, spread=()):
    """Rows of (z, weight) for y = x + scale * z, one row per prior atom x.

    ``rule`` is a PanelRule (kinks of the scalar MAP map become panel edges) or
    a Quadrature applied uniformly to every row.  ``spread`` adds edges at
    kink +- offset (y units), for integrands whose kinks were smoothed by an
    inner integral.
    """
    x = np.asarray(x, dtype=float)
    if isinstance(rule, Quadrature):
        Z = np.broadcast_to(rule.nodes, (x.size, len(rule)))
        W = np.broadcast_to(rule.weights, (x.size, len(rule)))
        return Z, W
    yb = np.asarray(utility.breakpoints(lam_s), dtype=float)
    if yb.size and len(spread):
        off = np.concatenate([[0.0], np.asarray(spread, dtype=float), -np.asarray(spread, dtype=float)])
        yb = (yb[:, None] + off).ravel()
    if yb.size == 0 or scale <= 0:
        breaks = np.full((x.size, 1), np.nan)
    else:
        breaks = (yb[None, :] - x[:, None]) / scale
    return rule.rows(breaks)
