"""Replica-symmetric decoupled channel.

The scalar system is y = x + sqrt(lam0_s) z followed by g = g_map(y; lam_s, u),
with (chi, q) solving

    lam_s  = lam / R(-chi/lam)
    lam0_s = R(-chi/lam)^-2 d/dchi{ (lam0 chi - lam q) R(-chi/lam) }   (q fixed)
    q      = E (g - x)^2
    sqrt(lam0_s) chi = lam_s E (g - x) z.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import optimize

from .errors import ConfigurationError, DomainError, NumericError
from .priors import prior_from_dict
from .quadrature import PanelRule, gauss_hermite, z_rule
from .scalar import scalar_map, utility_from_dict

log = logging.getLogger(__name__)

LAM0_FLOOR = 1e-12


@dataclass(frozen=True)
class SolverOptions:
    damping: float = 0.5
    tol: float = 1e-9
    max_iter: int = 5000
    init: tuple | None = None
    quadrature: str = "panels"  # or "gauss-hermite"
    order: int = 61
    panel_nodes: int = 16
    polish: bool = True

    def rule(self):
        if self.quadrature == "gauss-hermite":
            return gauss_hermite(self.order)
        if self.quadrature == "panels":
            return PanelRule(nodes_per_panel=self.panel_nodes)
        raise ConfigurationError(f"unknown quadrature {self.quadrature!r}")

    def to_dict(self):
        d = asdict(self)
        d["init"] = list(self.init) if self.init is not None else None
        return d


def rs_effective_params(chi, q, lam, lam0, rt):
    """(lam0_s, lam_s) for given order parameters."""
    if chi < 0 or q < 0:
        raise DomainError(f"need chi, q >= 0, got chi={chi}, q={q}")
    w = -chi / lam
    R = rt(w)
    if not R > 0:
        raise DomainError(f"R(-chi/lam) = {R} <= 0 at chi={chi}")
    dR = rt.derivative(w)
    # product rule, with d/dchi R(-chi/lam) = -R'/lam
    lam0_s = (lam0 * R - (lam0 * chi - lam * q) * dR / lam) / R ** 2
    return lam0_s, lam / R


def scalar_grid(prior, utility, lam0_s, lam_s, rule):
    """Quadrature grid of y = x + sqrt(lam0_s) z; returns X, Z, P (joint weights), G."""
    x, px = prior.nodes()
    sigma = math.sqrt(max(lam0_s, LAM0_FLOOR))
    Z, W = z_rule(x, sigma, utility, lam_s, rule)
    X = x[:, None]
    G = scalar_map(X + sigma * Z, lam_s, utility)
    return X, Z, px[:, None] * W, G


@dataclass
class RsSolution:
    chi: float
    q: float
    lam0_s: float
    lam_s: float
    residual: float
    iterations: int
    converged: bool
    prior: object = field(repr=False)
    utility: object = field(repr=False)
    lam: float = field(repr=False)
    lam0: float = field(repr=False)
    rt: object = field(repr=False)
    options: SolverOptions = field(repr=False, default_factory=SolverOptions)
    defects: dict = field(default_factory=dict)
    lam0_s_clamped: bool = False

    def grid(self):
        return scalar_grid(self.prior, self.utility, self.lam0_s, self.lam_s, self.options.rule())

    def moment(self, k, ell):
        return rs_joint_moment(self, k, ell)

    def channel(self):
        return rs_predicted_channel(self)

    def config_dict(self):
        return {"prior": self.prior.to_dict(), "utility": self.utility.to_dict(),
                "lambda": self.lam, "lambda0": self.lam0, "law": self.rt.law.to_dict(),
                "options": self.options.to_dict()}

    def to_dict(self):
        d = {"ansatz": "rs", "chi": self.chi, "q": self.q, "lambda0_s": self.lam0_s,
             "lambda_s": self.lam_s, "residual": self.residual, "iterations": self.iterations,
             "converged": self.converged, "defects": self.defects,
             "lambda0_s_clamped": self.lam0_s_clamped, "config": self.config_dict()}
        d["id"] = solution_id(d)
        return d


def solver_options_from_dict(d):
    d = dict(d)
    if d.get("init") is not None:
        d["init"] = tuple(d["init"])
    try:
        return SolverOptions(**d)
    except TypeError as exc:
        raise ConfigurationError(f"bad solver options: {exc}") from None


def model_from_config(cfg):
    """(prior, utility, lam, lam0, RTransform) from a config echo."""
    from .spectral import RTransform, law_from_dict
    return (prior_from_dict(cfg["prior"]), utility_from_dict(cfg["utility"]), float(cfg["lambda"]),
            float(cfg["lambda0"]), RTransform(law_from_dict(cfg["law"])))


def rs_solution_from_dict(d):
    """Rebuild a solution from its JSON form; the stored id must match the content."""
    cfg = d["config"]
    prior, utility, lam, lam0, rt = model_from_config(cfg)
    sol = RsSolution(chi=d["chi"], q=d["q"], lam0_s=d["lambda0_s"], lam_s=d["lambda_s"], residual=d["residual"],
                     iterations=d["iterations"], converged=d["converged"], prior=prior, utility=utility,
                     lam=lam, lam0=lam0, rt=rt, options=solver_options_from_dict(cfg["options"]),
                     defects=d["defects"], lam0_s_clamped=d["lambda0_s_clamped"])
    if "id" in d and sol.to_dict()["id"] != d["id"]:
        raise ConfigurationError("solution content does not match its identifier")
    return sol


def solution_id(d):
    body = {k: v for k, v in d.items() if k != "id"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def _rs_map(state, prior, utility, lam, lam0, rt, rule):
    chi, q = state
    lam0_s, lam_s = rs_effective_params(chi, q, lam, lam0, rt)
    clamped = lam0_s < LAM0_FLOOR
    X, Z, P, G = scalar_grid(prior, utility, lam0_s, lam_s, rule)
    sigma = math.sqrt(max(lam0_s, LAM0_FLOOR))
    err = G - X
    q_new = float(np.sum(P * err * err))
    ez = float(np.sum(P * err * Z))
    chi_new = lam_s * ez / sigma
    if not (math.isfinite(q_new) and math.isfinite(chi_new)):
        raise NumericError(f"non-finite update at chi={chi}, q={q}")
    defects = {"q": float(abs(q - q_new)), "chi": float(abs(sigma * chi - lam_s * ez))}
    return (chi_new, q_new), defects, (lam0_s, lam_s, clamped)


def rs_solve(prior, utility, lam, lam0, rt, opts=None):
    """Damped fixed-point iteration on (chi, q), polished by a 2-d root finder."""
    opts = opts or SolverOptions()
    if not lam > 0 or lam0 < 0:
        raise DomainError(f"need lam > 0 and lam0 >= 0, got {lam}, {lam0}")
    rule = opts.rule()
    cap = 1e6 * (1 + prior.second_moment)
    state = tuple(opts.init) if opts.init is not None else (float(lam), float(prior.second_moment))
    damping = opts.damping
    prev = math.inf
    best = None
    it = 0
    for it in range(1, opts.max_iter + 1):
        new, defects, _ = _rs_map(state, prior, utility, lam, lam0, rt, rule)
        res = max(defects.values())
        if best is None or res < best[1]:
            best = (state, res)
        if res <= opts.tol:
            break
        if opts.polish and res < 1e-3:
            polished = _polish(state, prior, utility, lam, lam0, rt, rule, opts.tol)
            if polished is not None:
                state = polished
                continue
        # gentle adaptation: the residual is not monotone during the transient
        if res > prev:
            damping = max(damping * 0.7, 0.02)
        else:
            damping = min(opts.damping, damping * 1.1)
        prev = res
        state = tuple(max(0.0, (1 - damping) * s + damping * n) for s, n in zip(state, new))
        if not all(map(math.isfinite, state)) or state[1] > cap:
            raise NumericError(f"RS iteration diverged at chi={state[0]}, q={state[1]}")
        if state[0] > cap * max(lam, 1.0):
            raise NumericError(f"chi diverges (chi={state[0]:.3g}, q={state[1]:.6g}): no finite RS fixed point")
    state, _ = best
    _, defects, (lam0_s, lam_s, clamped) = _rs_map(state, prior, utility, lam, lam0, rt, rule)
    res = max(defects.values())
    if clamped:
        log.info("lam0_s below floor at the final state (noiseless limit)")
    sol = RsSolution(chi=float(state[0]), q=float(state[1]), lam0_s=float(max(lam0_s, 0.0)),
                     lam_s=float(lam_s), residual=float(res), iterations=it, converged=bool(res <= opts.tol), prior=prior, utility=utility,
                     lam=lam, lam0=lam0, rt=rt, options=opts, defects=defects,
                     lam0_s_clamped=bool(clamped))
    if not sol.converged:
        log.warning("RS solver did not converge: residual %.3g after %d iterations", res, it)
    return sol


def _polish(state, prior, utility, lam, lam0, rt, rule, tol):
    def f(s):
        s = np.maximum(s, 0.0)
        new, _, _ = _rs_map(tuple(s), prior, utility, lam, lam0, rt, rule)
        return np.asarray(s) - np.asarray(new)

    try:
        out = optimize.root(f, np.asarray(state), method="hybr", options={"xtol": 1e-14})
    except (DomainError, NumericError):
        return None
    if not np.all(np.isfinite(out.x)) or np.any(out.x < 0):
        return None
    _, defects, _ = _rs_map(tuple(out.x), prior, utility, lam, lam0, rt, rule)
    _, old, _ = _rs_map(state, prior, utility, lam, lam0, rt, rule)
    if max(defects.values()) < max(old.values()):
        return tuple(float(v) for v in out.x)
    return None


def uniqueness_check(prior, utility, lam, lam0, rt, opts=None, dampings=(0.3, 0.5, 1.0), inits=None, tol=1e-7):
    """Re-solve from several dampings and starting points; returns the spread of (chi, q).

    A spread above ``tol`` is logged as possible RS instability (several fixed
    points), which is expected for nonconvex utilities.
    """
    opts = opts or SolverOptions()
    inits = inits or [(float(lam), float(prior.second_moment)), (0.1 * lam, 0.01 * prior.second_moment)]
    states = []
    for d in dampings:
        for init in inits:
            o = SolverOptions(**{**opts.to_dict(), "damping": d, "init": tuple(init)})
            try:
                sol = rs_solve(prior, utility, lam, lam0, rt, o)
            except NumericError:
                continue
            if sol.converged:
                states.append((sol.chi, sol.q))
    if not states:
        raise NumericError("no converged RS solution from any starting point")
    arr = np.asarray(states)
    spread = float(np.max(arr.max(axis=0) - arr.min(axis=0)))
    if spread > tol:
        log.warning("RS solutions differ by %.3g across dampings/initializations: possible RS instability", spread)
    return spread, states


def rs_joint_moment(sol, k, ell):
    """E int g^k x^ell Dz at the solution."""
    X, Z, P, G = sol.grid()
    return float(np.sum(P * G ** k * X ** ell))


def rs_predicted_channel(sol):
    from .channel import DecoupledChannel
    return DecoupledChannel(sol.prior, sol.utility, sol.lam0_s, sol.lam_s)


def convergence_diagnostic(prior, utility, lam, lam0, rt, opts=None):
    """Change in (chi, q) when the quadrature is refined (order doubled)."""
    opts = opts or SolverOptions()
    a = rs_solve(prior, utility, lam, lam0, rt, opts)
    if opts.quadrature == "gauss-hermite":
        fine = SolverOptions(**{**opts.to_dict(), "init": (a.chi, a.q), "order": min(2 * opts.order, 200)})
    else:
        fine = SolverOptions(**{**opts.to_dict(), "init": (a.chi, a.q), "panel_nodes": 2 * opts.panel_nodes})
    b = rs_solve(prior, utility, lam, lam0, rt, fine)
    # the refined solve may stop at once; its residual at the coarse state still bounds the shift
    _, defects, _ = _rs_map((a.chi, a.q), prior, utility, lam, lam0, rt, fine.rule())
    delta = max(abs(a.chi - b.chi), abs(a.q - b.q), max(defects.values()))
    log.info("quadrature refinement changes the RS solution by %.3g", delta)
    return delta
