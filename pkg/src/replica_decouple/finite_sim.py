"""Finite-size Monte Carlo of y = A x + z and the vector MAP estimator

    xhat = argmin_v ||y - A v||^2 / (2 lam) + sum_i u(v_i).
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, NumericError
from .priors import prior_from_dict
from .scalar import DiscreteSupport, utility_from_dict
from .spectral import law_from_dict

log = logging.getLogger(__name__)

WORKERS_ENV = "REPLICA_DECOUPLE_WORKERS"


def haar_orthogonal(n, rng):
    """Haar-distributed n x n orthogonal matrix (QR with R's diagonal made positive)."""
    Z = rng.standard_normal((n, n))
    Q, R = np.linalg.qr(Z)
    d = np.sign(np.diag(R))
    d[d == 0] = 1.0
    return Q * d


# -- ensembles -----------------------------------------------------------------

@dataclass(frozen=True)
class IidGaussian:
    """Entries N(0, 1/k)."""

    kind: str = field(default="iid-gaussian", init=False)

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class HaarSpectral:
    """A = V Sigma U^T with U, V Haar and the eigenvalues of A^T A drawn from ``law``."""

    law: object
    eigenvalues: str = "iid"  # or "quantile"
    kind: str = field(default="haar-spectral", init=False)

    def __post_init__(self):
        if self.eigenvalues not in ("iid", "quantile"):
            raise ConfigurationError(f"eigenvalue mode must be 'iid' or 'quantile', got {self.eigenvalues!r}")

    def to_dict(self):
        return {"kind": self.kind, "law": self.law.to_dict(), "eigenvalues": self.eigenvalues}


def ensemble_from_dict(d):
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "iid-gaussian":
        if d:
            raise ConfigurationError(f"unexpected keys for iid-gaussian ensemble: {sorted(d)}")
        return IidGaussian()
    if kind == "haar-spectral":
        extra = set(d) - {"law", "eigenvalues"}
        if extra or "law" not in d:
            raise ConfigurationError("haar-spectral ensemble needs 'law' and optionally 'eigenvalues'")
        return HaarSpectral(law_from_dict(d["law"]), d.get("eigenvalues", "iid"))
    raise ConfigurationError(f"unknown ensemble kind {kind!r}")


def check_rank(ensemble, n, k):
    """n > k forces n - k zero eigenvalues of A^T A; the law must carry that mass."""
    if n < 1 or k < 1:
        raise ConfigurationError("need n, k >= 1")
    if isinstance(ensemble, HaarSpectral) and n > k:
        need = 1 - k / n
        if ensemble.law.zero_mass < need - 1e-12:
            raise ConfigurationError(
                f"law has mass {ensemble.law.zero_mass:.6g} at 0 but n={n} > k={k} needs >= {need:.6g}")


def _sample_nonzero(law, size, rng):
    out = np.empty(0)
    while out.size < size:
        draw = law.sample(max(2 * (size - out.size), 16), rng)
        out = np.concatenate([out, draw[draw > 0]])
    return out[:size]


def _quantiles(law, probs):
    probs = np.asarray(probs, dtype=float)
    hi = 1.0
    while law.cdf(np.array([hi]))[0] < 1 - 1e-12:
        hi *= 2
    lo = np.zeros_like(probs)
    hi = np.full_like(probs, hi)
    for _ in range(80):
        mid = (lo + hi) / 2
        below = law.cdf(mid) < probs
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return hi


def _spectrum(ensemble, n, k, rng):
    """Eigenvalues of A^T A that may be nonzero (min(n, k) of them)."""
    law = ensemble.law
    m = min(n, k)
    if ensemble.eigenvalues == "quantile":
        # quantiles of the law restricted to the eligible block
        shift = max(0, n - k) / n
        probs = shift + (np.arange(m) + 0.5) / n
        return _quantiles(law, probs)
    if n <= k:
        return law.sample(m, rng)
    extra_zero = (law.zero_mass * n - (n - k)) / k
    zero = rng.random(m) < extra_zero
    return np.where(zero, 0.0, _sample_nonzero(law, m, rng))


def sample_matrix(ensemble, n, k, rng):
    """k x n sensing matrix."""
    check_rank(ensemble, n, k)
    if isinstance(ensemble, IidGaussian):
        return rng.standard_normal((k, n)) / math.sqrt(k)
    d = _spectrum(ensemble, n, k, rng)
    U = haar_orthogonal(n, rng)
    V = haar_orthogonal(k, rng)
    m = d.size
    # V Sigma U^T with Sigma = [diag(sqrt d), 0]
    return (V[:, :m] * np.sqrt(d)) @ U[:, :m].T


# -- vector MAP ----------------------------------------------------------------

@dataclass(frozen=True)
class VectorSolverOptions:
    max_iter: int = 20000
    obj_tol: float = 1e-10
    residual_tol: float = 1e-10  # 1e-8 in the residual leaves ~1e-8/(lam alpha) in x
    exhaustive_max_n: int = 20
    check_ridge: bool = True

    def to_dict(self):
        return asdict(self)


@dataclass
class MapResult:
    x: np.ndarray
    objective: float
    iterations: int
    converged: bool
    residual: float


def map_objective(A, y, lam, utility, v):
    r = y - A @ v
    return float(r @ r / (2 * lam) + np.sum(utility(v)))


def prox_residual(A, y, lam, utility, v, step=None):
    """sup-norm of the prox-gradient map (v - prox(v - s grad)) / s, in units of the lam-scaled objective."""
    if step is None:
        step = 1 / max(np.linalg.norm(A, 2) ** 2, 1e-300)
    grad = A.T @ (A @ v - y)
    w = utility.prox(v - step * grad, lam * step)
    return float(np.max(np.abs(v - w)) / step) if v.size else 0.0


def ridge_normal_equations(A, y, lam, alpha):
    n = A.shape[1]
    return np.linalg.solve(A.T @ A + lam * alpha * np.eye(n), A.T @ y)


def _fista(A, y, lam, utility, opts, x0=None):
    """Accelerated proximal gradient on ||y - Av||^2/2 + lam u(v) with
    backtracking and gradient-based adaptive restart."""
    n = A.shape[1]
    L = np.linalg.norm(A, 2) ** 2
    L = max(L, 1e-12)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    z = x.copy()
    t = 1.0

    def smooth(v):
        r = A @ v - y
        return 0.5 * float(r @ r), A.T @ r

    def total(v):
        return smooth(v)[0] + lam * float(np.sum(utility(v)))

    F = total(x)
    it = 0
    for it in range(1, opts.max_iter + 1):
        fz, gz = smooth(z)
        while True:
            s = 1 / L
            x_new = utility.prox(z - s * gz, lam * s)
            d = x_new - z
            f_new = smooth(x_new)[0]
            if f_new <= fz + gz @ d + 0.5 * L * (d @ d) + 1e-12 * abs(fz):
                break
            L *= 2
        F_new = f_new + lam * float(np.sum(utility(x_new)))
        if F_new > F:
            # monotone safeguard: restart from x with a plain proximal step
            t, z = 1.0, x.copy()
            fz, gz = smooth(z)
            x_new = utility.prox(z - gz / L, lam / L)
            F_new = total(x_new)
        t_new = (1 + math.sqrt(1 + 4 * t * t)) / 2
        if (z - x_new) @ (x_new - x) > 0:
            t_new, z = 1.0, x_new.copy()
        else:
            z = x_new + (t - 1) / t_new * (x_new - x)
        decrease = (F - F_new) / max(abs(F_new), 1e-300)
        x, F, t = x_new, F_new, t_new
        if decrease < opts.obj_tol and it > 1:
            res = prox_residual(A, y, lam, utility, x, 1 / L)
            if res < opts.residual_tol:
                return MapResult(x, F / lam, it, True, res)
    res = prox_residual(A, y, lam, utility, x, 1 / L)
    return MapResult(x, F / lam, it, False, res)


def _exhaustive(A, y, lam, utility, chunk=1 << 14):
    vals, costs = utility._arrays()
    n = A.shape[1]
    best, best_obj = None, math.inf
    combos = itertools.product(range(vals.size), repeat=n)
    while True:
        block = np.array(list(itertools.islice(combos, chunk)), dtype=int)
        if block.size == 0:
            break
        V = vals[block]
        R = y[None, :] - V @ A.T
        obj = np.einsum("ij,ij->i", R, R) / (2 * lam) + costs[block].sum(axis=1)
        i = int(np.argmin(obj))
        if obj[i] < best_obj:
            best, best_obj = V[i].copy(), float(obj[i])
    return MapResult(best, best_obj, int(vals.size) ** n, True, 0.0)


def vector_map_solve(A, y, lam, utility, opts=None, x0=None):
    opts = opts or VectorSolverOptions()
    if not lam > 0:
        raise ConfigurationError("vector MAP needs lam > 0")
    if isinstance(utility, DiscreteSupport):
        n = A.shape[1]
        if n > opts.exhaustive_max_n:
            raise ConfigurationError(
                f"exhaustive discrete-support search is capped at n={opts.exhaustive_max_n}, got n={n}")
        return _exhaustive(A, y, lam, utility)
    if not getattr(utility, "convex", False):
        raise ConfigurationError(f"vector MAP supports convex separable utilities only, got {utility.kind}")
    out = _fista(A, y, lam, utility, opts, x0)
    if opts.check_ridge and getattr(utility, "kind", "") == "quadratic" and utility.alpha > 0:
        direct = ridge_normal_equations(A, y, lam, utility.alpha)
        gap = float(np.max(np.abs(direct - out.x)))
        if gap > 1e-6:
            log.warning("proximal and normal-equation ridge solutions differ by %.3g", gap)
    if not out.converged:
        log.warning("vector MAP hit the iteration cap (residual %.3g)", out.residual)
    return out


# -- trials --------------------------------------------------------------------

@dataclass(frozen=True)
class TrialConfig:
    n: int
    k: int
    prior: object
    utility: object
    lam: float
    lam0: float
    ensemble: object = IidGaussian()
    solver: VectorSolverOptions = VectorSolverOptions()
    trials: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.k < 1 or self.trials < 1:
            raise ConfigurationError("need n, k, trials >= 1")
        if not self.lam > 0 or self.lam0 < 0:
            raise ConfigurationError("need lam > 0 and lam0 >= 0")
        check_rank(self.ensemble, self.n, self.k)

    @property
    def r(self):
        return self.n / self.k

    def to_dict(self):
        return {"n": self.n, "k": self.k, "prior": self.prior.to_dict(), "utility": self.utility.to_dict(),
                "lambda": self.lam, "lambda0": self.lam0, "ensemble": self.ensemble.to_dict(),
                "solver": self.solver.to_dict(), "trials": self.trials, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(n=int(d["n"]), k=int(d["k"]), prior=prior_from_dict(d["prior"]),
                   utility=utility_from_dict(d["utility"]), lam=float(d["lambda"]),
                   lam0=float(d["lambda0"]), ensemble=ensemble_from_dict(d["ensemble"]),
                   solver=VectorSolverOptions(**d.get("solver", {})), trials=int(d["trials"]),
                   seed=int(d["seed"]))


@dataclass
class TrialResult:
    trial: int
    x: np.ndarray
    xhat: np.ndarray
    wall_time: float
    iterations: int
    objective: float
    converged: bool
    residual: float

    def meta(self):
        return {"trial": self.trial, "wall_time": self.wall_time, "iterations": self.iterations,
                "objective": self.objective, "converged": self.converged, "residual": self.residual}


def trial_rng(seed, trial):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trial)]))


def run_trial(config, trial):
    rng = trial_rng(config.seed, trial)
    t0 = time.perf_counter()
    try:
        A = sample_matrix(config.ensemble, config.n, config.k, rng)
        x = config.prior.sample(config.n, rng)
        y = A @ x + math.sqrt(config.lam0) * rng.standard_normal(config.k)
        out = vector_map_solve(A, y, config.lam, config.utility, config.solver)
    except (NumericError, ConfigurationError, np.linalg.LinAlgError) as exc:
        raise type(exc)(f"trial {trial}: {exc}") from exc
    return TrialResult(trial, x, out.x, time.perf_counter() - t0, out.iterations, out.objective,
                       out.converged, out.residual)


def _run_one(args):
    return run_trial(*args)


def resolve_workers(workers=None):
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {env!r}") from None
    workers = 1 if workers is None else int(workers)
    if workers < 1:
        raise ConfigurationError("worker count must be >= 1")
    return workers


def run_trials(config, workers=None, trials=None):
    """Independent seeded trials; results are ordered by trial index whatever the worker count."""
    workers = resolve_workers(workers)
    idx = range(config.trials) if trials is None else trials
    jobs = [(config, t) for t in idx]
    if workers == 1 or len(jobs) <= 1:
        return [run_trial(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs))


# -- CSV + sidecar -------------------------------------------------------------

def config_hash(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def write_pairs_csv(results, config, path):
    """Write (trial, j, x, xhat) rows and a JSON sidecar; returns the sidecar dict."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trial", "j", "x", "xhat"])
        for res in results:
            for j, (a, b) in enumerate(zip(res.x, res.xhat)):
                w.writerow([res.trial, j, repr(float(a)), repr(float(b))])
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    cfg = config.to_dict()
    side = {"config": cfg, "config_hash": config_hash(cfg), "seed": config.seed,
            "rows": sum(len(r.x) for r in results), "sha256": digest,
            "trials": [r.meta() for r in results]}
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True))
    return side


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".json")


def read_pairs_csv(path, check=True):
    """Returns (trial, j, x, xhat) arrays and the sidecar; refuses files that do not match their sidecar."""
    path = Path(path)
    try:
        side = json.loads(sidecar_path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read the sidecar of {path}: {exc}") from None
    if not path.exists():
        raise ConfigurationError(f"samples file {path} does not exist")
    if check and hashlib.sha256(path.read_bytes()).hexdigest() != side["sha256"]:
        raise ConfigurationError(f"{path} does not match the hash recorded in its sidecar")
    data = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=float, ndmin=2)
    trial, j = data[:, 0].astype(int), data[:, 1].astype(int)
    return trial, j, data[:, 2], data[:, 3], side
