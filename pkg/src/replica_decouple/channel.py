"""Executable decoupled scalar channels (RS: one Gaussian tap, 1RSB: two taps)."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError
from .quadrature import gauss_hermite
from .scalar import scalar_map

TABLE_MIN = 256  # samples sharing one x value before the z1 law is tabulated over z0


class DecoupledChannel:
    """x -> y = x + sqrt(lam0_s) z0 [+ sqrt(lam1_s) z1] -> g_map(y; lam_s, u).

    With ``lam1_s > 0`` and a tilt exponent ``mu``, z1 given (x, z0) has
    density proportional to Lambda~(x, z0, z1) pi(z1); it is handled on a
    uniform z1 grid of ``z1_points`` nodes over [-z1_span, z1_span].
    """

    def __init__(self, prior, utility, lam0_s, lam_s, lam1_s=0.0, mu=None,
                 z0_order=61, z1_points=801, z1_span=9.0):
        self.prior = prior
        self.utility = utility
        self.lam0_s = float(lam0_s)
        self.lam_s = float(lam_s)
        self.lam1_s = float(lam1_s)
        self.mu = mu
        self.z0 = gauss_hermite(z0_order)
        self.z1 = np.linspace(-z1_span, z1_span, z1_points)
        if self.lam1_s > 0 and mu is None:
            raise ConfigurationError("a two-tap channel needs the tilt exponent mu")
        self._z0_grid = np.linspace(-z1_span, z1_span, 1441)
        self._tables = {}

    @property
    def two_tap(self):
        return self.lam1_s > 0

    def describe(self):
        return {"lambda0_s": self.lam0_s, "lambda1_s": self.lam1_s, "lambda_s": self.lam_s,
                "mu": self.mu, "prior": self.prior.to_dict(), "utility": self.utility.to_dict()}

    def estimate(self, y):
        return scalar_map(y, self.lam_s, self.utility)

    # -- tilted law of z1 ------------------------------------------------------

    def _log_tilt(self, x, z0):
        """log Lambda~ on the z1 grid, shape (..., z1_points)."""
        y = (np.asarray(x)[..., None] + math.sqrt(self.lam0_s) * np.asarray(z0)[..., None]
             + math.sqrt(self.lam1_s) * self.z1)
        g = self.estimate(y)
        x = np.asarray(x)[..., None]
        return -self.mu * (((y - g) ** 2 - (y - x) ** 2) / (2 * self.lam_s) + self.utility(g))

    def _z1_cdf(self, x, z0):
        """Normalized tilted CDF of z1 on the grid (trapezoid rule)."""
        logd = self._log_tilt(x, z0) - self.z1 ** 2 / 2
        logd -= logd.max(axis=-1, keepdims=True)
        d = np.exp(logd)
        cum = np.concatenate([np.zeros(d.shape[:-1] + (1,)),
                              np.cumsum((d[..., 1:] + d[..., :-1]) / 2, axis=-1)], axis=-1)
        return cum / cum[..., -1:]

    def tilted_z1_moments(self, x, z0):
        logd = self._log_tilt(x, z0) - self.z1 ** 2 / 2
        d = np.exp(logd - logd.max(axis=-1, keepdims=True))
        d /= d.sum(axis=-1, keepdims=True)
        return d @ self.z1, d @ self.z1 ** 2

    # -- sampling --------------------------------------------------------------

    def _invert(self, cdf, u):
        """Row-wise inverse of tabulated z1 CDFs at levels u."""
        idx = (cdf < u[:, None]).sum(axis=1)
        idx = np.clip(idx, 1, self.z1.size - 1)
        rows = np.arange(cdf.shape[0])
        c0, c1 = cdf[rows, idx - 1], cdf[rows, idx]
        frac = np.where(c1 > c0, (u - c0) / np.where(c1 > c0, c1 - c0, 1), 0.5)
        return self.z1[idx - 1] + frac * (self.z1[idx] - self.z1[idx - 1])

    def _z1_table(self, v):
        """Tilted z1 CDFs for x = v on a fixed z0 grid (cached)."""
        if v not in self._tables:
            self._tables[v] = self._z1_cdf(np.full(self._z0_grid.size, v), self._z0_grid)
        return self._tables[v]

    def sample_noise(self, x, rng):
        x = np.asarray(x, dtype=float)
        z0 = rng.standard_normal(x.shape)
        if not self.two_tap:
            return z0, np.zeros_like(x)
        u = rng.random(x.shape)
        z1 = np.empty_like(x)
        flat_x, flat_z0, flat_u, out = x.ravel(), z0.ravel(), u.ravel(), z1.reshape(-1)
        vals, inv, counts = np.unique(flat_x, return_inverse=True, return_counts=True)
        tabled = counts[inv] >= TABLE_MIN
        for i in np.flatnonzero(counts >= TABLE_MIN):
            # repeated x (prior atoms): interpolate between tabulated z0 rows
            m = inv == i
            table = self._z1_table(float(vals[i]))
            pos = np.interp(flat_z0[m], self._z0_grid, np.arange(self._z0_grid.size))
            lo = np.minimum(pos.astype(int), self._z0_grid.size - 2)
            w = pos - lo
            res = np.empty(m.sum())
            for s in range(0, res.size, 4096):
                sl = slice(s, s + 4096)
                um = flat_u[m][sl]
                a = self._invert(table[lo[sl]], um)
                b = self._invert(table[lo[sl] + 1], um)
                res[sl] = (1 - w[sl]) * a + w[sl] * b
            out[m] = res
        rest = np.flatnonzero(~tabled)
        for s in range(0, rest.size, 4096):
            sl = rest[s:s + 4096]
            out[sl] = self._invert(self._z1_cdf(flat_x[sl], flat_z0[sl]), flat_u[sl])
        return z0, z1

    def sample_given(self, x, rng):
        x = np.asarray(x, dtype=float)
        z0, z1 = self.sample_noise(x, rng)
        y = x + math.sqrt(self.lam0_s) * z0 + math.sqrt(self.lam1_s) * z1
        return self.estimate(y)

    def sample(self, size, rng):
        x = self.prior.sample(size, rng)
        return x, self.sample_given(x, rng)

    # -- conditional CDFs ------------------------------------------------------

    def conditional_cdf(self, v, t, strict=False):
        """P(xhat <= t | x = v), or P(xhat < t | x = v) when ``strict``."""
        t = np.asarray(t, dtype=float)
        ys = self.utility.level_sup(t, self.lam_s, strict)
        s0 = math.sqrt(self.lam0_s)
        if not self.two_tap:
            if s0 == 0:
                return (ys >= v).astype(float)
            return ndtr((ys - v) / s0)
        s1 = math.sqrt(self.lam1_s)
        cdf = self._z1_cdf(np.full(len(self.z0), float(v)), self.z0.nodes)
        out = np.zeros(t.shape)
        for w, z0, row in zip(self.z0.weights, self.z0.nodes, cdf):
            c = (ys - v - s0 * z0) / s1
            out += w * np.interp(c, self.z1, row, left=0.0, right=1.0)
        return out

    def mixture_cdf(self, xs, t, strict=False):
        """Average of conditional CDFs over the conditioning values ``xs``."""
        xs = np.asarray(xs, dtype=float)
        t = np.asarray(t, dtype=float)
        if not self.two_tap:
            ys = self.utility.level_sup(t, self.lam_s, strict)
            s0 = math.sqrt(self.lam0_s)
            if s0 == 0:
                return np.mean(ys[None, :] >= xs[:, None], axis=0)
            out = np.zeros(t.shape)
            for s in range(0, xs.size, 256):
                out += ndtr((ys[None, :] - xs[s:s + 256, None]) / s0).sum(axis=0)
            return out / xs.size
        return np.mean([self.conditional_cdf(v, t, strict) for v in xs], axis=0)
