"""One-step replica-symmetry-breaking decoupled channel.

Scalar system: y = x + sqrt(lam0_s) z0 + sqrt(lam1_s) z1, xhat = g_map(y; lam_s, u),
where z1 given (x, z0) is tilted by

    Lambda~ = exp(-mu { [(y - g)^2 - (y - x)^2] / (2 lam_s) + u(g) }).

With rho = chi + mu p the coefficients are

    lam_s  = lam / R(-chi/lam)
    lam1_s = R(-chi/lam)^-2 [R(-chi/lam) - R(-rho/lam)] lam / mu
    lam0_s = R(-chi/lam)^-2 d/drho{ (lam0 rho - lam q + lam p) R(-rho/lam) }   (q, p fixed)

and (chi, p, q, mu) solve

    q          = E (g - x)^2
    chi + mu p = lam_s / sqrt(lam0_s) E (g - x) z0
    chi + mu q = lam_s / sqrt(lam1_s) E (g - x) z1
    mu/(2 lam_s) [mu lam1_s/lam_s (q - p) + p] - 1/(2 lam) int_chi^rho R(-w/lam) dw = E log Lambda

with expectations under p(x) pi(z0) Lambda pi(z1).  p = 0 gives lam1_s = 0 and
reduces everything to the replica-symmetric system.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import optimize
from scipy.special import logsumexp

from .errors import ConfigurationError, DomainError, NumericError
from .quadrature import PanelRule, gauss_hermite, z_rule
from .rs import LAM0_FLOOR, SolverOptions, rs_solve, solution_id
from .scalar import scalar_map

log = logging.getLogger(__name__)

LAM1_COLLAPSE = 1e-12

COLLAPSED = "collapsed to RS"
NO_ROOT = "no 1RSB root - RS returned"
SOLVED = "1rsb"


@dataclass(frozen=True)
class OneRsbState:
    chi: float
    p: float
    q: float
    mu: float

    def __post_init__(self):
        for name in ("chi", "p", "q", "mu"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.chi < 0 or self.p < 0 or self.q < 0 or not self.mu > 0:
            raise DomainError(f"invalid 1RSB state {self}")
        if not all(map(math.isfinite, (self.chi, self.p, self.q, self.mu))):
            raise DomainError(f"non-finite 1RSB state {self}")

    @property
    def rho(self):
        return self.chi + self.mu * self.p


@dataclass(frozen=True)
class OneRsbOptions:
    rs: SolverOptions = SolverOptions()
    z1_quadrature: str = "panels"  # or "gauss-hermite"
    z1_order: int = 61
    z1_panel_nodes: int = 8
    tol: float = 1e-7
    inner_tol: float = 1e-10
    damping: float = 1.0
    max_inner: int = 2000
    stall: int = 50
    mu_min: float = 1e-3
    mu_max: float = 50.0
    mu_scan: int = 24
    p_init: float = 0.5
    identity_tol: float = 1e-6

    def z1_rule(self):
        if self.z1_quadrature == "gauss-hermite":
            return gauss_hermite(self.z1_order)
        if self.z1_quadrature == "panels":
            return PanelRule(nodes_per_panel=self.z1_panel_nodes)
        raise ConfigurationError(f"unknown z1 quadrature {self.z1_quadrature!r}")

    def to_dict(self):
        d = asdict(self)
        d["rs"] = self.rs.to_dict()
        return d


def onersb_effective_params(state, lam, lam0, rt):
    """(lam0_s, lam1_s, lam_s) for a 1RSB state."""
    R_chi = rt(-state.chi / lam)
    if not R_chi > 0:
        raise DomainError(f"R(-chi/lam) = {R_chi} <= 0")
    rho = state.rho
    R_rho = rt(-rho / lam)
    if not R_rho > 0:
        raise DomainError(f"R(-rho/lam) = {R_rho} <= 0")
    dR_rho = rt.derivative(-rho / lam)
    lam0_s = (lam0 * R_rho - (lam0 * rho - lam * state.q + lam * state.p) * dR_rho / lam) / R_chi ** 2
    lam1_s = (R_chi - R_rho) * lam / state.mu / R_chi ** 2 if state.p > 0 else 0.0
    return lam0_s, lam1_s, lam / R_chi


def tilt_log_factor(x, z0, z1, lam0_s, lam1_s, lam_s, mu, utility):
    """log Lambda~ at (x, z0, z1)."""
    if not lam_s > 0 or not mu > 0:
        raise DomainError("need lam_s > 0 and mu > 0")
    y = x + math.sqrt(lam0_s) * z0 + math.sqrt(lam1_s) * z1
    g = scalar_map(y, lam_s, utility)
    return -mu * (((y - g) ** 2 - (y - x) ** 2) / (2 * lam_s) + utility(g))


@dataclass(eq=False)
class TiltedGrid:
    """Discretized joint law p(x) pi(z0) [Lambda pi(z1)].

    Arrays broadcast over (x, z0, z1).  ``P0`` holds p(x) w(z0), ``W1`` the
    per-(x, z0) normalized tilted z1 weights and ``w1`` the raw z1 weights.
    z1 nodes may differ between rows (kink-aware panels) or be shared.
    """

    X: np.ndarray
    Z0: np.ndarray
    Z1: np.ndarray
    P0: np.ndarray
    W1: np.ndarray
    w1: np.ndarray
    G: np.ndarray
    log_lambda: np.ndarray
    sigma0: float
    sigma1: float

    def expect(self, f):
        return float(np.sum(self.P0[..., None] * self.W1 * f))

    def e_log_lambda(self):
        return self.expect(self.log_lambda)

    def row_sums(self):
        return self.W1.sum(axis=-1)

    @property
    def shared_z1(self):
        return bool(np.all(self.Z1 == self.Z1[:1, :1]))


def build_tilted_grid(state, coeffs, prior, utility, z0_rule, z1_rule):
    lam0_s, lam1_s, lam_s = coeffs
    x, px = prior.nodes()
    s0 = math.sqrt(max(lam0_s, LAM0_FLOOR))
    s1 = math.sqrt(max(lam1_s, 0.0))
    # after integrating z1 a kink in y is smeared over a width ~ s1
    spread = (s1, 3 * s1) if 0 < s1 < s0 else ()
    Z0, W0 = z_rule(x, s0, utility, lam_s, z0_rule, spread)
    nx, n0 = Z0.shape
    base = x[:, None] + s0 * Z0
    Z1, w1 = z_rule(base.ravel(), s1, utility, lam_s, z1_rule)
    Z1 = np.asarray(Z1).reshape(nx, n0, -1)
    w1 = np.asarray(w1).reshape(nx, n0, -1)
    X = x[:, None, None]
    Y = base[..., None] + s1 * Z1
    G = scalar_map(Y, lam_s, utility)
    if s1 == 0:
        log_tilt = np.zeros(Y.shape)
    else:
        log_tilt = -state.mu * (((Y - G) ** 2 - (Y - X) ** 2) / (2 * lam_s) + utility(G))
    with np.errstate(divide="ignore"):
        logw = np.log(w1)
    lse = logsumexp(log_tilt + logw, axis=-1, keepdims=True)
    if not np.all(np.isfinite(lse)):
        i = np.argwhere(~np.isfinite(lse[..., 0]))[0]
        raise NumericError(f"tilt row is entirely -inf at x={x[i[0]]}, z0={Z0[i[0], i[1]]}")
    log_lambda = log_tilt - lse
    W1 = np.exp(log_lambda + logw)
    return TiltedGrid(X=X, Z0=Z0[..., None], Z1=Z1, P0=px[:, None] * W0, W1=W1, w1=w1, G=G,
                      log_lambda=log_lambda, sigma0=s0, sigma1=s1)


def mu_rhs_direct(grid):
    """I(z1; x, z0) + D_KL(p_z1 || pi) from the discretized joint law.

    Needs z1 nodes shared by all rows so that the z1 marginal lives on one grid.
    """
    if not grid.shared_z1:
        raise ValueError("mu_rhs_direct needs a z1 rule shared by all (x, z0) rows")
    joint = grid.P0[..., None] * grid.W1
    pz1 = joint.sum(axis=(0, 1))
    w1 = grid.w1[0, 0]
    nz = joint > 0
    ratio = np.where(nz, grid.W1 / np.where(pz1 > 0, pz1, 1.0)[None, None, :], 1.0)
    mutual = float(np.sum(np.where(nz, joint * np.log(ratio), 0.0)))
    pos = pz1 > 0
    kl = float(np.sum(pz1[pos] * np.log(pz1[pos] / w1[pos])))
    return mutual + kl


def mu_lhs(state, coeffs, lam, rt):
    _, lam1_s, lam_s = coeffs
    mu, p, q = state.mu, state.p, state.q
    first = mu / (2 * lam_s) * (mu * lam1_s / lam_s * (q - p) + p)
    return first - rt.integral(state.chi, state.rho, lam) / (2 * lam)


@dataclass
class OneRsbSolution:
    state: OneRsbState
    lam0_s: float
    lam1_s: float
    lam_s: float
    defects: dict
    converged: bool
    status: str
    prior: object = field(repr=False)
    utility: object = field(repr=False)
    lam: float = field(repr=False)
    lam0: float = field(repr=False)
    rt: object = field(repr=False)
    options: OneRsbOptions = field(repr=False, default_factory=OneRsbOptions)
    rs: object = field(repr=False, default=None)
    identity_gap: float = 0.0
    scan: list = field(repr=False, default_factory=list)

    @property
    def collapsed(self):
        return self.status != SOLVED

    def grid(self):
        coeffs = (self.lam0_s, self.lam1_s, self.lam_s)
        return build_tilted_grid(self.state, coeffs, self.prior, self.utility,
                                 self.options.rs.rule(), self.options.z1_rule())

    def moment(self, k, ell):
        return onersb_joint_moment(self, k, ell)

    def channel(self):
        return onersb_predicted_channel(self)

    def config_dict(self):
        return {"prior": self.prior.to_dict(), "utility": self.utility.to_dict(),
                "lambda": self.lam, "lambda0": self.lam0, "law": self.rt.law.to_dict(),
                "options": self.options.to_dict()}

    @classmethod
    def from_dict(cls, d):
        """Rebuild from the JSON form; the stored id must match the content."""
        from .rs import model_from_config, solver_options_from_dict
        cfg = d["config"]
        prior, utility, lam, lam0, rt = model_from_config(cfg)
        o = dict(cfg["options"])
        o["rs"] = solver_options_from_dict(o["rs"])
        try:
            opts = OneRsbOptions(**o)
        except TypeError as exc:
            raise ConfigurationError(f"bad 1RSB options: {exc}") from None
        sol = cls(state=OneRsbState(d["chi"], d["p"], d["q"], d["mu"]), lam0_s=d["lambda0_s"],
                  lam1_s=d["lambda1_s"], lam_s=d["lambda_s"], defects=d["defects"], converged=d["converged"],
                  status=d["status"], prior=prior, utility=utility, lam=lam, lam0=lam0, rt=rt, options=opts,
                  identity_gap=d["identity_gap"], scan=d["mu_scan"])
        if "id" in d and sol.to_dict()["id"] != d["id"]:
            raise ConfigurationError("solution content does not match its identifier")
        return sol

    def to_dict(self):
        s = self.state
        d = {"ansatz": "1rsb", "status": self.status, "chi": s.chi, "p": s.p, "q": s.q, "mu": s.mu,
             "rho": s.rho, "lambda0_s": self.lam0_s, "lambda1_s": self.lam1_s, "lambda_s": self.lam_s,
             "defects": self.defects, "converged": self.converged,
             "identity_gap": self.identity_gap,
             "mu_scan": self.scan, "config": self.config_dict()}
        d["id"] = solution_id(d)
        return d


class _Inner:
    """Fixed-mu solver for (chi, p, q)."""

    def __init__(self, prior, utility, lam, lam0, rt, opts, rs=None):
        self.prior, self.utility, self.lam, self.lam0, self.rt = prior, utility, lam, lam0, rt
        self.rs = rs
        self.opts = opts
        self.z0_rule = opts.rs.rule()
        self.z1 = opts.z1_rule()
        self.z1_shared = gauss_hermite(opts.z1_order)
        self.identity_gap = 0.0
        self._gains = {}

    def evaluate(self, state, force_rs=False, full=False):
        coeffs = onersb_effective_params(state, self.lam, self.lam0, self.rt)
        lam0_s, lam1_s, lam_s = coeffs
        grid = build_tilted_grid(state, coeffs, self.prior, self.utility, self.z0_rule, self.z1)
        err = grid.G - grid.X
        q_new = grid.expect(err * err)
        a = lam_s / grid.sigma0 * grid.expect(err * grid.Z0)
        out = {"coeffs": coeffs, "grid": grid, "q_new": q_new, "a": a, "mu_eq": 0.0}
        d = {"q": abs(state.q - q_new), "z0": abs(state.rho - a)}
        if lam1_s >= LAM1_COLLAPSE and not force_rs:
            b = lam_s / grid.sigma1 * grid.expect(err * grid.Z1)
            out["b"] = b
            d["z1"] = abs(state.chi + state.mu * state.q - b)
            if full:
                out["mu_eq"] = self.mu_defect(state, coeffs, grid)
        else:
            # lam1_s -> 0 limit of the z1 equation coincides with the z0 one
            d["z1"] = d["z0"]
        out["defects"] = d
        return out

    def mu_defect(self, state, coeffs, grid):
        """Defect of the mu equation; also checks E log Lambda against I + D_KL on this grid."""
        lhs = mu_lhs(state, coeffs, self.lam, self.rt)
        elog = grid.e_log_lambda()
        if not grid.shared_z1:
            grid = build_tilted_grid(state, coeffs, self.prior, self.utility, self.z0_rule, self.z1_shared)
        direct = mu_rhs_direct(grid)
        gap = abs(direct - grid.e_log_lambda())
        self.identity_gap = max(self.identity_gap, gap)
        if gap > self.opts.identity_tol:
            raise NumericError(f"I + D_KL = {direct} differs from E log Lambda = {grid.e_log_lambda()} "
                               f"by {gap:.3g}")
        return lhs - elog

    def step(self, state, ev):
        mu = state.mu
        q = ev["q_new"]
        if "b" not in ev:
            return OneRsbState(max(ev["a"], 0.0), 0.0, q, mu)
        chi = max(ev["b"] - mu * q, 0.0)
        p = max((ev["a"] - chi) / mu, 0.0)
        return OneRsbState(chi, p, q, mu)

    def solve(self, state, force_rs=False):
        """Returns (state, evaluation, collapsed, converged).

        Near p = 0 the map is linear in p, so geometric decay of p is
        extrapolated (Aitken) and a vanishing limit is declared a collapse,
        after which the iteration continues on (chi, q) with p = 0.
        """
        opts = self.opts
        collapsed = force_rs
        damping, prev, best, mark = opts.damping, math.inf, math.inf, math.inf
        ps, clamp = [], []
        for it in range(opts.max_inner):
            if collapsed and state.p != 0:
                state = OneRsbState(state.chi, 0.0, state.q, state.mu)
            ev = self.evaluate(state, collapsed)
            if not collapsed and ev["coeffs"][1] < LAM1_COLLAPSE:
                # p = 0 is exactly the RS system, whose solution is known
                collapsed = True
                if self.rs is not None:
                    state = OneRsbState(self.rs.chi, 0.0, self.rs.q, state.mu)
                damping, prev, best, mark, ps = opts.damping, math.inf, math.inf, math.inf, []
                continue
            res = max(ev["defects"].values())
            if res <= opts.inner_tol and (collapsed or not self._drifting(ps, state.p)):
                return state, self.evaluate(state, collapsed, full=True), collapsed, True
            best = min(best, res)
            if it % opts.stall == opts.stall - 1:
                if best > 0.5 * mark:
                    break
                mark = best
            if res > prev:
                damping = max(damping / 2, 0.05)
                ps = []
            prev = res
            if "b" in ev and ev["b"] < state.mu * ev["q_new"]:
                # chi pinned at its bound: a stationary point of the clamped map, not of the equations
                clamp.append(ev["defects"]["z1"])
                if len(clamp) >= 10 and clamp[-1] > 0.9 * clamp[-10]:
                    break
            else:
                clamp = []
            new = self.step(state, ev)
            vec = (1 - damping) * np.array([state.chi, state.p, state.q]) + damping * np.array([new.chi, new.p, new.q])
            if not np.all(np.isfinite(vec)):
                raise NumericError(f"1RSB inner iteration diverged at {state}")
            ps.append(vec[1])
            if not collapsed and self._attracted_to_rs(ps, vec[2], state.mu):
                collapsed = True
                state = OneRsbState(self.rs.chi, 0.0, self.rs.q, state.mu)
                damping, prev, best, mark, ps = opts.damping, math.inf, math.inf, math.inf, []
                continue
            limit = _aitken(ps)
            if limit is not None:
                ps = []
                vec[1] = limit if limit > AITKEN_ZERO * max(vec[2], 1e-300) else 0.0
            state = OneRsbState(*vec, state.mu)
        log.info("1RSB inner loop stopped without converging at mu=%g (residual %.3g)", state.mu, prev)
        return state, self.evaluate(state, collapsed, full=True), collapsed, False

    def rs_stability(self, mu):
        """Largest real part of the eigenvalues of the undamped inner map's Jacobian at the
        embedded RS point (p -> 0+), by finite differences on (chi, p, q).

        Below 1, the damped iteration (small enough damping) is locally attracted to RS.
        """
        if mu not in self._gains:
            base = np.array([self.rs.chi, 1e-5 * max(self.rs.q, 1e-12), self.rs.q])

            def F(v):
                state = OneRsbState(*v, mu)
                ev = self.evaluate(state)
                if "b" not in ev:
                    return None
                new = self.step(state, ev)
                return np.array([new.chi, new.p, new.q])

            f0 = F(base)
            if f0 is None:
                self._gains[mu] = 0.0
            else:
                J = np.empty((3, 3))
                for j in range(3):
                    h = 0.5 * base[1] if j == 1 else 1e-6 * max(base[j], 1e-8)
                    v = base.copy()
                    v[j] += h
                    fj = F(v)
                    if fj is None:
                        return math.inf
                    J[:, j] = (fj - f0) / h
                self._gains[mu] = float(np.max(np.linalg.eigvals(J).real))
        return self._gains[mu]

    def _attracted_to_rs(self, ps, q, mu, run=6):
        # small p, decaying at a steady geometric rate, toward an RS point that is linearly stable
        if self.rs is None or len(ps) < run + 1:
            return False
        tail = np.asarray(ps[-run - 1:])
        if np.any(tail <= 0) or tail[-1] > 0.1 * q or tail[-1] > 0.7 * tail[0]:
            return False
        ratios = tail[1:] / tail[:-1]
        if np.any(ratios >= 0.98) or np.ptp(ratios) > 0.05:
            return False
        return self.rs_stability(mu) < 1

    @staticmethod
    def _drifting(ps, p):
        # p still moving geometrically even though the defects are small
        return len(ps) >= 2 and p > 0 and abs(ps[-1] - ps[-2]) > 1e-9 * p


AITKEN_ZERO = 1e-9


def _aitken(ps):
    """Extrapolated limit of a geometrically converging sequence, or None."""
    if len(ps) < 4:
        return None
    d1, d2, d3 = ps[-3] - ps[-4], ps[-2] - ps[-3], ps[-1] - ps[-2]
    if d1 == 0 or d2 == 0:
        return None
    r1, r2 = d2 / d1, d3 / d2
    if not (0 < r2 < 1 and abs(r1 - r2) < 1e-3 * max(1.0, abs(r2))):
        return None
    return ps[-1] + d3 * r2 / (1 - r2)


def _embed_rs(rs, mu, inner):
    state = OneRsbState(rs.chi, 0.0, rs.q, mu)
    ev = inner.evaluate(state, force_rs=True)
    return state, ev


def onersb_solve(prior, utility, lam, lam0, rt, opts=None, rs=None, force_rs=False):
    """Nested 1RSB solve: inner fixed point for fixed mu, outer root search on the mu equation."""
    opts = opts or OneRsbOptions()
    rs = rs or rs_solve(prior, utility, lam, lam0, rt, opts.rs)
    inner = _Inner(prior, utility, lam, lam0, rt, opts, rs)

    def finish(state, ev, status, scan):
        lam0_s, lam1_s, lam_s = map(float, ev["coeffs"])
        defects = {k: float(v) for k, v in ev["defects"].items()}
        defects["mu"] = float(abs(ev["mu_eq"]))
        return OneRsbSolution(state=state, lam0_s=max(lam0_s, 0.0), lam1_s=lam1_s, lam_s=lam_s,
                              defects=defects, converged=bool(max(defects.values()) <= opts.tol),
                              status=status, prior=prior, utility=utility, lam=lam, lam0=lam0,
                              rt=rt, options=opts, rs=rs, identity_gap=inner.identity_gap, scan=scan)

    if force_rs:
        state, ev, _, _ = inner.solve(OneRsbState(rs.chi, 0.0, rs.q, 1.0), force_rs=True)
        return finish(state, ev, COLLAPSED, [])

    start = OneRsbState(rs.chi, opts.p_init * max(rs.q, 1e-3), rs.q, opts.mu_min)
    scan = []
    solved = {}
    warm = None
    for mu in np.geomspace(opts.mu_min, opts.mu_max, opts.mu_scan):
        seed = warm if warm is not None else start
        state, ev, collapsed, ok = inner.solve(OneRsbState(seed.chi, seed.p, seed.q, float(mu)))
        usable = ok and not collapsed
        entry = {"mu": float(mu), "collapsed": bool(collapsed), "converged": bool(ok), "p": float(state.p),
                 "mu_defect": float(ev["mu_eq"]) if usable else None}
        scan.append(entry)
        if usable:
            solved[float(mu)] = state
            warm = state
        else:
            warm = None
    mus = [e["mu"] for e in scan if e["mu_defect"] is not None]
    vals = {e["mu"]: e["mu_defect"] for e in scan if e["mu_defect"] is not None}
    brackets = [(a, b) for a, b in zip(mus, mus[1:])
                if vals[a] * vals[b] <= 0 and _adjacent(scan, a, b)]
    if not brackets:
        # inner solves that failed to converge carry no evidence either way
        status = COLLAPSED if not mus else NO_ROOT
        if mus:
            log.info("1RSB: no sign change of the mu equation on [%g, %g]", opts.mu_min, opts.mu_max)
        state, ev = _embed_rs(rs, 1.0, inner)
        return finish(state, ev, status, scan)

    a, b = brackets[0]
    cache = {}

    def defect(mu):
        near = min(solved, key=lambda m: abs(math.log(m / mu)))
        seed = solved[near]
        state, ev, collapsed, ok = inner.solve(OneRsbState(seed.chi, seed.p, seed.q, float(mu)))
        if collapsed or not ok:
            raise NumericError(f"inner solve {'collapsed' if collapsed else 'failed'} inside the mu bracket at mu={mu}")
        cache[mu] = (state, ev)
        solved[float(mu)] = state
        return ev["mu_eq"]

    mu_star = optimize.brentq(defect, a, b, xtol=1e-13, rtol=1e-13, maxiter=200)
    if mu_star not in cache:
        defect(mu_star)
    state, ev = cache[mu_star]
    return finish(state, ev, SOLVED, scan)


def _adjacent(scan, a, b):
    mus = [e["mu"] for e in scan]
    return mus.index(b) == mus.index(a) + 1


def onersb_defects(sol, opts=None):
    """All four defects at a solution's state, optionally on a different (e.g. refined) grid."""
    inner = _Inner(sol.prior, sol.utility, sol.lam, sol.lam0, sol.rt, opts or sol.options, sol.rs)
    ev = inner.evaluate(sol.state, force_rs=sol.collapsed, full=True)
    d = {k: float(v) for k, v in ev["defects"].items()}
    d["mu"] = float(abs(ev["mu_eq"]))
    return d


def onersb_joint_moment(sol, k, ell):
    """E int g^k x^ell dF(z1) Dz0 at the solution."""
    grid = sol.grid()
    return grid.expect(grid.G ** k * grid.X ** ell)


def onersb_predicted_channel(sol, **kwargs):
    from .channel import DecoupledChannel
    if sol.lam1_s < LAM1_COLLAPSE:
        return DecoupledChannel(sol.prior, sol.utility, sol.lam0_s, sol.lam_s)
    return DecoupledChannel(sol.prior, sol.utility, sol.lam0_s, sol.lam_s,
                            lam1_s=sol.lam1_s, mu=sol.state.mu, **kwargs)
