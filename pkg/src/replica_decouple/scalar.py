"""Separable utilities u(.) and the scalar MAP estimator

    g_map(y; lam_s, u) = argmin_v (y - v)^2 / (2 lam_s) + u(v).

Each utility supplies its prox (vectorized), the y-locations where the prox
is not smooth (used as quadrature panel edges), and the generalized inverse
``level_sup(t, lam_s, strict)`` = sup{y : g(y) <= t} (or ``< t``), which turns
a Gaussian CDF into the CDF of g(y).  The prox of any utility is
nondecreasing in y, so these level sets are half-lines.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import ConfigurationError, DomainError


def soft_threshold(y, t):
    return np.sign(y) * np.maximum(np.abs(y) - t, 0.0)


def _soft_level_sup(t, theta, strict):
    t = np.asarray(t, dtype=float)
    upper = (t > 0) if strict else (t >= 0)
    return np.where(upper, t + theta, t - theta)


@dataclass(frozen=True)
class Quadratic:
    """u(v) = alpha v^2 / 2; alpha = 0 is the zero utility (g = identity)."""

    alpha: float = 1.0
    kind: str = field(default="quadratic", init=False, repr=False)
    convex = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("quadratic weight must be nonnegative")

    def __call__(self, v):
        return 0.5 * self.alpha * np.square(v)

    def prox(self, y, lam):
        return np.asarray(y, dtype=float) / (1 + self.alpha * lam)

    def breakpoints(self, lam):
        return ()

    def level_sup(self, t, lam, strict=False):
        return np.asarray(t, dtype=float) * (1 + self.alpha * lam)

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha}


def zero_utility():
    return Quadratic(0.0)


@dataclass(frozen=True)
class L1:
    alpha: float = 1.0
    kind: str = field(default="l1", init=False, repr=False)
    convex = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigurationError("l1 weight must be nonnegative")

    def __call__(self, v):
        return self.alpha * np.abs(v)

    def prox(self, y, lam):
        return soft_threshold(np.asarray(y, dtype=float), self.alpha * lam)

    def breakpoints(self, lam):
        t = self.alpha * lam
        return (-t, t) if t > 0 else ()

    def level_sup(self, t, lam, strict=False):
        return _soft_level_sup(t, self.alpha * lam, strict)

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha}


@dataclass(frozen=True)
class ElasticNet:
    """u(v) = alpha1 |v| + alpha2 v^2 / 2."""

    alpha1: float = 1.0
    alpha2: float = 1.0
    kind: str = field(default="elastic-net", init=False, repr=False)
    convex = True

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigurationError("elastic-net weights must be nonnegative")

    def __call__(self, v):
        return self.alpha1 * np.abs(v) + 0.5 * self.alpha2 * np.square(v)

    def prox(self, y, lam):
        return soft_threshold(np.asarray(y, dtype=float), self.alpha1 * lam) / (1 + self.alpha2 * lam)

    def breakpoints(self, lam):
        t = self.alpha1 * lam
        return (-t, t) if t > 0 else ()

    def level_sup(self, t, lam, strict=False):
        return _soft_level_sup(np.asarray(t, dtype=float) * (1 + self.alpha2 * lam), self.alpha1 * lam, strict)

    def to_dict(self):
        return {"kind": self.kind, "alpha1": self.alpha1, "alpha2": self.alpha2}


@dataclass(frozen=True)
class DiscreteSupport:
    """u(v) = cost(v) on a finite support, +inf elsewhere.

    Ties in the argmin go to the atom of smaller magnitude, then the smaller
    value.
    """

    values: tuple
    costs: tuple
    kind: str = field(default="discrete-support", init=False, repr=False)
    convex = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        c = np.asarray(self.costs, dtype=float)
        if v.ndim != 1 or v.shape != c.shape or v.size == 0:
            raise ConfigurationError("values and costs must be equal-length 1-d lists")
        if np.any(c < 0):
            raise ConfigurationError("costs must be nonnegative")
        if np.unique(v).size != v.size:
            raise ConfigurationError("support values must be distinct")
        order = np.lexsort((v, np.abs(v)))
        object.__setattr__(self, "values", tuple(float(a) for a in v[order]))
        object.__setattr__(self, "costs", tuple(float(a) for a in c[order]))

    @classmethod
    def from_atoms(cls, atoms):
        v, c = zip(*atoms)
        return cls(tuple(v), tuple(c))

    def _arrays(self):
        return np.asarray(self.values), np.asarray(self.costs)

    def __call__(self, v):
        vals, costs = self._arrays()
        v = np.asarray(v, dtype=float)
        hit = v[..., None] == vals
        return np.where(hit.any(axis=-1), (hit * costs).sum(axis=-1), np.inf)

    def prox(self, y, lam):
        vals, costs = self._arrays()
        y = np.asarray(y, dtype=float)
        obj = (y[..., None] - vals) ** 2 / (2 * lam) + costs
        return vals[np.argmin(obj, axis=-1)]

    def breakpoints(self, lam):
        vals, costs = self._arrays()
        i, j = np.triu_indices(vals.size, 1)
        # (y - v_i)^2/2lam + c_i = (y - v_j)^2/2lam + c_j
        return tuple((vals[i] + vals[j]) / 2 + lam * (costs[j] - costs[i]) / (vals[j] - vals[i]))

    def level_sup(self, t, lam, strict=False):
        vals, costs = self._arrays()
        order = np.argsort(vals)
        sv, sc = vals[order], costs[order]
        edges = np.full(sv.size, np.inf)
        for k in range(sv.size - 1):
            edges[k] = _region_edge(sv[:k + 1], sc[:k + 1], sv[k + 1:], sc[k + 1:], lam)
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(sv, t, side="left" if strict else "right") - 1
        return np.where(idx < 0, -np.inf, edges[np.clip(idx, 0, sv.size - 1)])

    def to_dict(self):
        return {"kind": self.kind, "values": list(self.values), "costs": list(self.costs)}


def _region_edge(v_lo, c_lo, v_hi, c_hi, lam):
    """Root of min_lo cost(y) - min_hi cost(y), which is increasing in y."""
    def gap(y):
        return (np.min((y - v_lo) ** 2 / (2 * lam) + c_lo)
                - np.min((y - v_hi) ** 2 / (2 * lam) + c_hi))
    lo, hi = v_lo.max(), v_hi.min()
    while gap(lo) > 0:
        lo -= 2 * (hi - lo) + 1
    while gap(hi) < 0:
        hi += 2 * (hi - lo) + 1
    return optimize.brentq(gap, lo, hi, xtol=1e-15, rtol=1e-15)


class Custom:
    """Arbitrary pointwise utility minimized over a bracket [lo, hi].

    The prox is a dense grid scan followed by vectorized golden-section
    refinement in the best cell, so nonconvex utilities get the global
    minimizer up to grid resolution.
    """

    kind = "custom"

    def __init__(self, func, bracket=None, grid=2001, convex=False, iters=60):
        if bracket is None:
            raise ConfigurationError("custom utility needs a search bracket")
        lo, hi = map(float, bracket)
        if not hi > lo:
            raise ConfigurationError("bracket must satisfy lo < hi")
        self.func = func
        self.bracket = (lo, hi)
        self.grid = int(grid)
        self.convex = bool(convex)
        self.iters = int(iters)

    def __call__(self, v):
        return self.func(np.asarray(v, dtype=float))

    def _objective(self, y, v, lam):
        return (y - v) ** 2 / (2 * lam) + self.func(v)

    def prox(self, y, lam):
        y = np.asarray(y, dtype=float)
        flat = y.ravel()
        out = np.empty_like(flat)
        lo, hi = self.bracket
        grid = np.linspace(lo, hi, self.grid)
        h = grid[1] - grid[0]
        invphi = (np.sqrt(5) - 1) / 2
        for start in range(0, flat.size, 2048):
            yc = flat[start:start + 2048, None]
            obj = self._objective(yc, grid[None, :], lam)
            k = np.argmin(obj, axis=1)
            a = np.maximum(grid[k] - h, lo)
            b = np.minimum(grid[k] + h, hi)
            yc = yc[:, 0]
            c = b - invphi * (b - a)
            d = a + invphi * (b - a)
            fc, fd = self._objective(yc, c, lam), self._objective(yc, d, lam)
            for _ in range(self.iters):
                left = fc < fd
                b = np.where(left, d, b)
                a = np.where(left, a, c)
                c_new = b - invphi * (b - a)
                d_new = a + invphi * (b - a)
                c, d = c_new, d_new
                fc, fd = self._objective(yc, c, lam), self._objective(yc, d, lam)
            out[start:start + 2048] = (a + b) / 2
        return out.reshape(y.shape)

    def breakpoints(self, lam):
        return ()

    def level_sup(self, t, lam, strict=False):
        return level_sup_bisect(self, t, lam, strict)

    def to_dict(self):
        raise ConfigurationError("custom utilities carry a callable and are not serializable")


def level_sup_bisect(util, t, lam, strict=False, span=None, iters=80):
    """Generic sup{y : g(y) <= t} (or < t) by bisection on the monotone prox."""
    t = np.asarray(t, dtype=float)
    if span is None:
        span = 50.0 + 10 * np.max(np.abs(t), initial=0.0)
    below = (lambda y: util.prox(y, lam) < t) if strict else (lambda y: util.prox(y, lam) <= t)
    lo = np.full(t.shape, -span)
    hi = np.full(t.shape, span)
    all_in, none_in = below(hi), ~below(lo)
    for _ in range(iters):
        mid = (lo + hi) / 2
        ok = below(mid)
        lo = np.where(ok, mid, lo)
        hi = np.where(ok, hi, mid)
    out = (lo + hi) / 2
    return np.where(all_in, np.inf, np.where(none_in, -np.inf, out))


def scalar_map(y, lam_s, utility):
    """Scalar MAP estimate argmin_v (y - v)^2 / (2 lam_s) + u(v)."""
    if not lam_s > 0:
        raise DomainError(f"scalar MAP needs lam_s > 0, got {lam_s}")
    return utility.prox(y, lam_s)


_UTILS = {"quadratic": Quadratic, "l1": L1, "elastic-net": ElasticNet,
          "discrete-support": DiscreteSupport}


def utility_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "zero":
        return zero_utility()
    if kind not in _UTILS:
        raise ConfigurationError(f"unknown utility kind {kind!r}")
    try:
        if kind == "discrete-support":
            if "atoms" in d:
                return DiscreteSupport.from_atoms(d["atoms"])
            return DiscreteSupport(tuple(d["values"]), tuple(d["costs"]))
        return _UTILS[kind](**d)
    except (TypeError, KeyError) as exc:
        raise ConfigurationError(f"bad parameters for utility {kind}: {exc}") from None
