"""Source priors p_x.

Every prior exposes a discrete quadrature representation through ``nodes()``
(atoms for discrete laws, Gauss rules for continuous parts), a sampler, and its
true point masses (used when conditioning on x).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special

from .errors import ConfigurationError
from .quadrature import gauss_hermite


@dataclass(frozen=True)
class GaussianPrior:
    mean: float = 0.0
    variance: float = 1.0
    order: int = 61
    kind: str = field(default="gaussian", init=False, repr=False)

    def __post_init__(self):
        if not self.variance > 0:
            raise ConfigurationError("Gaussian prior needs positive variance")

    def nodes(self):
        q = gauss_hermite(self.order)
        return self.mean + math.sqrt(self.variance) * q.nodes, q.weights

    def point_masses(self):
        return np.empty(0), np.empty(0)

    def sample(self, size, rng):
        return self.mean + math.sqrt(self.variance) * rng.standard_normal(size)

    @property
    def second_moment(self):
        return self.variance + self.mean ** 2

    def moment(self, ell):
        x, p = self.nodes()
        return float(p @ x ** ell)

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean, "variance": self.variance, "order": self.order}


@dataclass(frozen=True)
class DiscretePrior:
    values: tuple
    probs: tuple
    kind: str = field(default="discrete", init=False, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        p = np.asarray(self.probs, dtype=float)
        if v.shape != p.shape or v.ndim != 1 or v.size == 0:
            raise ConfigurationError("values and probs must be equal-length 1-d lists")
        if np.any(p < 0) or abs(p.sum() - 1) > 1e-12:
            raise ConfigurationError(f"probabilities must be nonnegative and sum to 1 (sum={p.sum()!r})")
        if not p @ v ** 2 > 0:
            raise ConfigurationError("discrete prior has zero second moment")
        object.__setattr__(self, "values", tuple(float(a) for a in v))
        object.__setattr__(self, "probs", tuple(float(a) for a in p))

    def nodes(self):
        return np.asarray(self.values), np.asarray(self.probs)

    def point_masses(self):
        return self.nodes()

    def sample(self, size, rng):
        v, p = self.nodes()
        return v[rng.choice(v.size, size=size, p=p)]

    @property
    def second_moment(self):
        v, p = self.nodes()
        return float(p @ v ** 2)

    def moment(self, ell):
        v, p = self.nodes()
        return float(p @ v ** ell)

    def to_dict(self):
        return {"kind": self.kind, "values": list(self.values), "probs": list(self.probs)}


@dataclass(frozen=True)
class BernoulliGaussian:
    """x = 0 with probability 1 - sparsity, otherwise N(0, variance)."""

    sparsity: float
    variance: float = 1.0
    order: int = 61
    kind: str = field(default="bernoulli-gaussian", init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.sparsity <= 1 or not self.variance > 0:
            raise ConfigurationError("need 0 < sparsity <= 1 and variance > 0")

    def nodes(self):
        q = gauss_hermite(self.order)
        x = np.concatenate([[0.0], math.sqrt(self.variance) * q.nodes])
        p = np.concatenate([[1 - self.sparsity], self.sparsity * q.weights])
        return x, p

    def point_masses(self):
        if self.sparsity == 1:
            return np.empty(0), np.empty(0)
        return np.array([0.0]), np.array([1 - self.sparsity])

    def sample(self, size, rng):
        active = rng.random(size) < self.sparsity
        return np.where(active, math.sqrt(self.variance) * rng.standard_normal(size), 0.0)

    @property
    def second_moment(self):
        return self.sparsity * self.variance

    def moment(self, ell):
        if ell == 0:
            return 1.0
        return self.sparsity * (0.0 if ell % 2 else self.variance ** (ell // 2) * special.factorial2(ell - 1))

    def to_dict(self):
        return {"kind": self.kind, "sparsity": self.sparsity, "variance": self.variance, "order": self.order}


class ContinuousPrior:
    """Density known up to normalization through its log, on a finite window.

    Expectations use Gauss-Legendre nodes on ``support`` weighted by the
    normalized density; sampling inverts a tabulated CDF.
    """

    kind = "continuous"

    def __init__(self, logpdf, support, order=201):
        lo, hi = map(float, support)
        if not hi > lo:
            raise ConfigurationError("continuous prior needs a nonempty support window")
        self.logpdf = logpdf
        self.support = (lo, hi)
        self.order = int(order)
        xi, wi = leggauss(self.order)
        x = (lo + hi) / 2 + (hi - lo) / 2 * xi
        lw = np.log(wi * (hi - lo) / 2) + logpdf(x)
        w = np.exp(lw - lw.max())
        self._x, self._w = x, w / w.sum()
        grid = np.linspace(lo, hi, 20001)
        dens = np.exp(logpdf(grid) - logpdf(grid).max())
        cdf = np.concatenate([[0.0], np.cumsum((dens[1:] + dens[:-1]) / 2)])
        self._grid, self._cdf = grid, cdf / cdf[-1]

    def nodes(self):
        return self._x, self._w

    def point_masses(self):
        return np.empty(0), np.empty(0)

    def sample(self, size, rng):
        return np.interp(rng.random(size), self._cdf, self._grid)

    @property
    def second_moment(self):
        return float(self._w @ self._x ** 2)

    def moment(self, ell):
        return float(self._w @ self._x ** ell)

    def to_dict(self):
        raise ConfigurationError("generic continuous priors carry a callable and are not serializable")


class LaplacePrior(ContinuousPrior):
    kind = "laplace"

    def __init__(self, scale=1.0, order=61):
        self.scale = float(scale)
        if not self.scale > 0:
            raise ConfigurationError("Laplace scale must be positive")
        # two windows so the kink at 0 is a panel edge
        super().__init__(lambda x: -np.abs(x) / self.scale, (-40 * self.scale, 40 * self.scale), order)
        xi, wi = leggauss(self.order)
        half = 40 * self.scale
        x = np.concatenate([-half / 2 * (1 + xi), half / 2 * (1 + xi)])
        w = np.concatenate([wi, wi]) * half / 2 * np.exp(-np.abs(x) / self.scale) / (2 * self.scale)
        self._x, self._w = x, w / w.sum()

    def sample(self, size, rng):
        return rng.laplace(0.0, self.scale, size)

    def __reduce__(self):
        # the log-density is a closure; rebuild from parameters instead
        return (LaplacePrior, (self.scale, self.order))

    def to_dict(self):
        return {"kind": self.kind, "scale": self.scale, "order": self.order}


_PRIORS = {"gaussian": GaussianPrior, "discrete": DiscretePrior,
           "bernoulli-gaussian": BernoulliGaussian, "laplace": LaplacePrior}


def prior_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind not in _PRIORS:
        raise ConfigurationError(f"unknown prior kind {kind!r}")
    try:
        if kind == "discrete":
            return DiscretePrior(tuple(d["values"]), tuple(d["probs"]))
        return _PRIORS[kind](**d)
    except (TypeError, KeyError) as exc:
        raise ConfigurationError(f"bad parameters for prior {kind}: {exc}") from None
