"""Asymptotic spectral laws of J = A^T A and their Stieltjes / R-transforms.

Conventions
-----------
``stieltjes(law, s) = E[1 / (t - s)]`` for real ``s`` below the support, which
is positive and increasing in ``s``.  The R-transform is the usual free
cumulant generating function, ``R(w) = kappa_1 + kappa_2 w + ...``, so that
``R(0)`` is the mean eigenvalue and the Marchenko-Pastur law with aspect ratio
``r = n/k`` has ``R(w) = 1 / (1 - r w)``.  For ``w < 0`` the two are linked by

    stieltjes(law, R(w) + 1/w) = -w.

Only real ``w <= 0`` is supported; that is the range every fixed-point solver
in this package evaluates.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .errors import ConfigurationError, DomainError, NumericError

# below these |w| the R-transform and its slope come from the cumulant series
_SERIES_CUTOFF = 1e-9
_DERIVATIVE_SERIES_CUTOFF = 1e-6


@dataclass(frozen=True)
class MarchenkoPastur:
    """Limit law of A^T A with A (k x n) i.i.d. N(0, 1/k) and r = n/k."""

    r: float
    kind: str = field(default="marchenko-pastur", init=False, repr=False)

    def __post_init__(self):
        if not self.r > 0:
            raise ConfigurationError(f"aspect ratio must be positive, got {self.r}")

    @property
    def mean(self):
        return 1.0

    @property
    def support_min(self):
        return 0.0 if self.r >= 1 else (1 - math.sqrt(self.r)) ** 2

    @property
    def zero_mass(self):
        return max(0.0, 1 - 1 / self.r)

    def moments(self, order):
        # E t^m = sum_j N(m, j) r^(j-1) with Narayana numbers
        out = []
        for m in range(1, order + 1):
            out.append(sum(math.comb(m, j) * math.comb(m, j - 1) / m * self.r ** (j - 1)
                           for j in range(1, m + 1)))
        return np.array(out)

    def _edges(self):
        return (1 - math.sqrt(self.r)) ** 2, (1 + math.sqrt(self.r)) ** 2

    def _continuous_cdf_table(self, size=20001):
        # x = m + h cos(phi) removes the square-root edges and the 1/x pole at r = 1
        lo, hi = self._edges()
        m, h = (lo + hi) / 2, (hi - lo) / 2
        phi = np.linspace(math.pi, 0.0, size)
        x = m + h * np.cos(phi)
        integrand = h * h * np.sin(phi) ** 2 / (2 * math.pi * self.r * np.maximum(x, 1e-300))
        if self.r == 1:
            integrand[0] = 2 * h / (2 * math.pi)  # limit at x = 0
        cum = integrate.cumulative_trapezoid(integrand, -phi, initial=0.0)
        cum *= (1 - self.zero_mass) / cum[-1]
        return x, cum

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        grid, cum = self._continuous_cdf_table()
        out = np.interp(x, grid, cum, left=0.0, right=1 - self.zero_mass)
        return out + np.where(x >= 0, self.zero_mass, 0.0)

    def sample(self, size, rng):
        """I.i.d. draws from the law (inverse CDF on a fine grid)."""
        u = rng.random(size)
        grid, cum = self._continuous_cdf_table()
        v = np.interp(u - self.zero_mass, cum, grid)
        return np.where(u < self.zero_mass, 0.0, v)

    def to_dict(self):
        return {"kind": self.kind, "r": self.r}


@dataclass(frozen=True)
class ScaledProjector:
    """Mass 1 - 1/r at zero and 1/r at c (e.g. row-orthogonal A scaled by sqrt(c))."""

    r: float
    c: float = 1.0
    kind: str = field(default="scaled-projector", init=False, repr=False)

    def __post_init__(self):
        if not self.r >= 1:
            raise ConfigurationError(f"scaled projector needs r >= 1, got {self.r}")
        if not self.c > 0:
            raise ConfigurationError(f"eigenvalue scale must be positive, got {self.c}")

    @property
    def mean(self):
        return self.c / self.r

    @property
    def support_min(self):
        return 0.0 if self.r > 1 else self.c

    @property
    def zero_mass(self):
        return 1 - 1 / self.r

    def moments(self, order):
        return np.array([self.c ** m / self.r for m in range(1, order + 1)])

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x >= 0, self.zero_mass, 0.0) + np.where(x >= self.c, 1 / self.r, 0.0)

    def sample(self, size, rng):
        return np.where(rng.random(size) < self.zero_mass, 0.0, self.c)

    def to_dict(self):
        return {"kind": self.kind, "r": self.r, "c": self.c}


@dataclass(frozen=True)
class Empirical:
    """Uniform law on a finite list of nonnegative eigenvalues."""

    eigenvalues: tuple
    kind: str = field(default="empirical", init=False, repr=False)

    def __post_init__(self):
        ev = np.asarray(self.eigenvalues, dtype=float).ravel()
        if ev.size == 0:
            raise ConfigurationError("empirical law needs at least one eigenvalue")
        if not np.all(np.isfinite(ev)):
            raise ConfigurationError("eigenvalues must be finite")
        # roundoff from eigvalsh can leave tiny negative values
        if ev.min() < -1e-8 * max(1.0, ev.max()):
            raise ConfigurationError("empirical law has negative eigenvalues")
        object.__setattr__(self, "eigenvalues", tuple(np.sort(np.clip(ev, 0, None))))

    @property
    def values(self):
        return np.asarray(self.eigenvalues)

    @property
    def mean(self):
        return float(np.mean(self.values))

    @property
    def support_min(self):
        return float(self.values[0])

    @property
    def zero_mass(self):
        return float(np.mean(self.values == 0))

    def moments(self, order):
        return np.array([np.mean(self.values ** m) for m in range(1, order + 1)])

    def cdf(self, x):
        return np.searchsorted(self.values, np.asarray(x, dtype=float), side="right") / len(self.values)

    def sample(self, size, rng):
        return rng.choice(self.values, size=size, replace=True)

    def to_dict(self):
        return {"kind": self.kind, "eigenvalues": list(self.eigenvalues)}

    @classmethod
    def from_file(cls, path):
        """One eigenvalue per line; blank lines and '#' comments are skipped."""
        return cls(tuple(np.loadtxt(path, comments="#", ndmin=1)))

    def to_file(self, path):
        np.savetxt(path, self.values, fmt="%.17g")


SpectralLaw = MarchenkoPastur | ScaledProjector | Empirical

_LAWS = {"marchenko-pastur": MarchenkoPastur, "scaled-projector": ScaledProjector,
         "empirical": Empirical}


def law_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _LAWS:
        raise ConfigurationError(f"unknown spectral law kind {kind!r}")
    if kind == "empirical":
        if "path" in d:
            return Empirical.from_file(d["path"])
        return Empirical(tuple(d["eigenvalues"]))
    try:
        return _LAWS[kind](**d)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for {kind}: {exc}") from None


def law_to_json(law):
    return json.dumps(law.to_dict())


def law_from_json(text):
    return law_from_dict(json.loads(text))


def _free_cumulants(law):
    m1, m2, m3 = law.moments(3)
    return m1, m2 - m1 ** 2, m3 - 3 * m2 * m1 + 2 * m1 ** 3


# --------------------------------------------------------------------------
# Stieltjes transform

def stieltjes(law, s):
    """E[(t - s)^-1] for real s strictly below the support."""
    s = float(s)
    if not s < law.support_min:
        raise DomainError(f"s={s} is not below the support (min {law.support_min})")
    if isinstance(law, MarchenkoPastur):
        r = law.r
        if s == 0:
            return 1 / (1 - r)
        # positive root of r s g^2 + (s - 1 + r) g + 1 = 0, cancellation-free form
        b = s - 1 + r
        sq = math.sqrt(b * b - 4 * r * s)
        return 2 / (sq - b) if b <= 0 else (-b - sq) / (2 * r * s)
    if isinstance(law, ScaledProjector):
        g = 1 / (law.c - s) / law.r
        if law.zero_mass > 0:
            g += law.zero_mass / (-s)
        return g
    return float(np.mean(1.0 / (law.values - s)))


def stieltjes_derivative(law, s):
    """d/ds E[(t - s)^-1] = E[(t - s)^-2]."""
    s = float(s)
    if not s < law.support_min:
        raise DomainError(f"s={s} is not below the support (min {law.support_min})")
    if isinstance(law, MarchenkoPastur):
        g = stieltjes(law, s)
        r = law.r
        # implicit differentiation of r s g^2 + (s - 1 + r) g + 1 = 0
        return -(r * g * g + g) / (2 * r * s * g + s - 1 + r)
    if isinstance(law, ScaledProjector):
        out = 1 / (law.c - s) ** 2 / law.r
        if law.zero_mass > 0:
            out += law.zero_mass / s ** 2
        return out
    return float(np.mean(1.0 / (law.values - s) ** 2))


# --------------------------------------------------------------------------
# R-transform

@dataclass(frozen=True)
class RTransform:
    """R-transform of a spectral law on w <= 0.

    Closed forms are used for Marchenko-Pastur and the scaled projector; the
    empirical law is inverted numerically (bracketed root of G(s) = -w).
    """

    law: SpectralLaw
    xtol: float = 1e-15
    expand: float = 2.0

    def _inverse_stieltjes(self, g):
        """Unique s below the support with stieltjes(s) = g > 0."""
        law = self.law
        if isinstance(law, ScaledProjector):
            a, c = law.zero_mass, law.c
            if a == 0:
                return c - 1 / g
            # negative root of g s^2 + (1 - g c) s - a c = 0
            b = 1 - g * c
            sq = math.sqrt(b * b + 4 * g * a * c)
            return (-b - sq) / (2 * g) if b >= 0 else -2 * a * c / (sq - b)
        ev = law.values
        smin = law.support_min
        f = lambda s: float(np.mean(1.0 / (ev - s))) - g
        # G(s) >= (1/N) / (min - s) next to the bottom eigenvalue
        hi = smin - min(1.0, 0.5 / (len(ev) * g))
        width = 1.0
        lo = smin - width
        for _ in range(200):
            if f(lo) < 0:
                break
            width *= self.expand
            lo = smin - width
        else:
            raise NumericError(f"could not bracket G(s) = {g} below {smin}")
        if f(hi) <= 0:
            raise NumericError(f"upper bracket failed for G(s) = {g}: G({hi}) = {f(hi) + g}")
        return optimize.brentq(f, lo, hi, xtol=self.xtol * max(1.0, abs(lo)), rtol=1e-15, maxiter=500)

    def __call__(self, w):
        return r_transform(self, w)

    def derivative(self, w):
        return r_derivative(self, w)

    def integral(self, a, b, lam):
        return r_integral(self, a, b, lam)


def _atoms(law):
    if isinstance(law, ScaledProjector):
        if law.zero_mass == 0:
            return np.array([law.c]), np.array([1.0])
        return np.array([0.0, law.c]), np.array([law.zero_mass, 1 / law.r])
    v = law.values
    return v, np.full(v.size, 1.0 / v.size)


def r_transform(rt, w):
    w = float(w)
    if w > 0:
        raise DomainError(f"R-transform only supported for w <= 0, got {w}")
    law = rt.law
    if isinstance(law, MarchenkoPastur):
        return 1.0 / (1.0 - law.r * w)
    if w == 0:
        return law.mean
    if abs(w) < _SERIES_CUTOFF:
        k1, k2, k3 = _free_cumulants(law)
        return k1 + k2 * w + k3 * w * w
    t, p = _atoms(law)
    inv = 1.0 / (t - rt._inverse_stieltjes(-w))
    # s + 1/G(s) without the cancellation between s and 1/G(s)
    return float(np.dot(p, t * inv) / np.dot(p, inv))


def r_derivative(rt, w):
    """dR/dw = 1/w^2 - 1/G'(s), evaluated as Var(1/u) / (E[1/u]^2 E[1/u^2]) with u = t - s."""
    w = float(w)
    if w > 0:
        raise DomainError(f"R-transform only supported for w <= 0, got {w}")
    law = rt.law
    if isinstance(law, MarchenkoPastur):
        return law.r / (1.0 - law.r * w) ** 2
    if abs(w) < _DERIVATIVE_SERIES_CUTOFF:
        _, k2, k3 = _free_cumulants(law)
        return k2 + 2 * k3 * w
    t, p = _atoms(law)
    inv = 1.0 / (t - rt._inverse_stieltjes(-w))
    m1 = np.dot(p, inv)
    var = np.dot(p, (inv - m1) ** 2)
    return float(var / (m1 * m1 * np.dot(p, inv * inv)))


def r_integral(rt, a, b, lam):
    """Integral of R(-w / lam) dw over [a, b]."""
    a, b, lam = float(a), float(b), float(lam)
    if not (0 <= a <= b) or not lam > 0:
        raise DomainError(f"need 0 <= a <= b and lam > 0, got a={a}, b={b}, lam={lam}")
    if a == b:
        return 0.0
    law = rt.law
    if isinstance(law, MarchenkoPastur):
        r = law.r
        return lam / r * (math.log1p(r * b / lam) - math.log1p(r * a / lam))
    val, err = integrate.quad(lambda w: r_transform(rt, -w / lam), a, b, epsabs=1e-13, epsrel=1e-12, limit=200)
    return val


def r_derivative_fd(rt, w, h=1e-3):
    """Richardson-extrapolated difference quotient; one-sided at w = 0."""
    f = rt.__call__
    if w > -2 * h:
        d1 = (3 * f(w) - 4 * f(w - h) + f(w - 2 * h)) / (2 * h)
        d2 = (3 * f(w) - 4 * f(w - h / 2) + f(w - h)) / h
    else:
        d1 = (f(w + h) - f(w - h)) / (2 * h)
        d2 = (f(w + h / 2) - f(w - h / 2)) / h
    return (4 * d2 - d1) / 3
