"""Monte Carlo pairs (x_j, xhat_j) against the replica-predicted scalar channel."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigurationError

log = logging.getLogger(__name__)

MIN_BIN = 100


@dataclass(eq=False)
class JointSampleSet:
    trial: np.ndarray
    j: np.ndarray
    x: np.ndarray
    xhat: np.ndarray

    def __post_init__(self):
        self.trial = np.asarray(self.trial, dtype=int)
        self.j = np.asarray(self.j, dtype=int)
        self.x = np.asarray(self.x, dtype=float)
        self.xhat = np.asarray(self.xhat, dtype=float)
        if self.x.size == 0:
            raise ValueError("empty sample set")
        if not (self.trial.shape == self.j.shape == self.x.shape == self.xhat.shape):
            raise ValueError("trial, j, x, xhat must have equal lengths")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.xhat))):
            raise ValueError("sample set contains non-finite values")

    @classmethod
    def from_results(cls, results):
        trial = np.concatenate([np.full(len(r.x), r.trial) for r in results])
        j = np.concatenate([np.arange(len(r.x)) for r in results])
        return cls(trial, j, np.concatenate([r.x for r in results]), np.concatenate([r.xhat for r in results]))

    @classmethod
    def from_csv(cls, path, check=True):
        from .finite_sim import read_pairs_csv
        trial, j, x, xhat, side = read_pairs_csv(path, check)
        out = cls(trial, j, x, xhat)
        out.sidecar = side
        return out

    def __len__(self):
        return self.x.size

    @property
    def n(self):
        return int(self.j.max()) + 1

    @property
    def trials(self):
        return np.unique(self.trial)


# -- moments -------------------------------------------------------------------

def _batch_mean(samples, values):
    """Mean and batch-means standard error with batches = trials."""
    ids, inv = np.unique(samples.trial, return_inverse=True)
    est = float(np.mean(values))
    if ids.size < 2:
        se = float(np.std(values, ddof=1) / math.sqrt(values.size)) if values.size > 1 else math.nan
        return est, se, max(values.size - 1, 1)
    sums = np.bincount(inv, weights=values)
    counts = np.bincount(inv)
    means = sums / counts
    return est, float(np.std(means, ddof=1) / math.sqrt(ids.size)), ids.size - 1


def empirical_moment(samples, k, ell):
    """(estimate, standard error) of E xhat^k x^ell."""
    if len(samples) == 0:
        raise ValueError("empty sample set")
    if k == 0 and ell == 0:
        return 1.0, 0.0
    est, se, _ = _batch_mean(samples, samples.xhat ** k * samples.x ** ell)
    return est, se


def confidence_interval(est, se, dof, level=0.95):
    h = stats.t.ppf(0.5 + level / 2, dof) * se
    return est - h, est + h


def empirical_mse(samples, level=0.95):
    err = (samples.xhat - samples.x) ** 2
    est, se, dof = _batch_mean(samples, err)
    lo, hi = confidence_interval(est, se, dof, level)
    return {"estimate": est, "se": se, "ci": [lo, hi]}


# -- conditioning groups ---------------------------------------------------------

@dataclass
class Group:
    label: str
    mask: np.ndarray
    atom: float | None = None
    lo: float | None = None
    hi: float | None = None


def conditioning_groups(samples, atoms=(), bins=8):
    """Atoms of the prior are conditioned on exactly; the rest of x goes into quantile bins."""
    x = samples.x
    groups = []
    rest = np.ones(x.size, dtype=bool)
    for a in atoms:
        m = x == a
        rest &= ~m
        groups.append(Group(f"x={a:g}", m, atom=float(a)))
    if rest.sum() and bins > 0:
        edges = np.quantile(x[rest], np.linspace(0, 1, bins + 1))
        which = np.clip(np.searchsorted(edges[1:-1], x, side="right"), 0, bins - 1)
        for b in range(bins):
            groups.append(Group(f"bin{b}[{edges[b]:.4g},{edges[b + 1]:.4g}]", rest & (which == b),
                                lo=float(edges[b]), hi=float(edges[b + 1])))
    return groups


def _predicted_cdf(channel, group, xs, t, strict=False):
    if group.atom is not None:
        return channel.conditional_cdf(group.atom, t, strict)
    return channel.mixture_cdf(xs, t, strict)


def sup_distance(values, cdf, cdf_left):
    """Kolmogorov distance between the empirical law of ``values`` and a CDF
    given at the sorted unique values (right-continuous and left limits)."""
    v = np.sort(values)
    t, counts = np.unique(v, return_counts=True)
    N = v.size
    upper = np.cumsum(counts) / N
    lower = upper - counts / N
    return float(max(np.max(np.abs(upper - cdf(t))), np.max(np.abs(lower - cdf_left(t)))))


def _group_distance(channel, group, xs, xhat):
    return sup_distance(xhat, lambda t: _predicted_cdf(channel, group, xs, t),
                        lambda t: _predicted_cdf(channel, group, xs, t, strict=True))


def conditional_cdf_distance(samples, channel, atoms=(), bins=8, level=0.01, null_reps=200, seed=0,
                             groups=None):
    """Per conditioning value: sup distance, asymptotic KS p-value and a null-calibrated threshold.

    The threshold is the (1 - level) quantile of the same distance computed on
    data drawn from ``channel`` at the observed x values.
    """
    groups = groups if groups is not None else conditioning_groups(samples, atoms, bins)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    out = []
    for g in groups:
        xs = samples.x[g.mask]
        xh = samples.xhat[g.mask]
        row = {"group": g.label, "atom": g.atom, "lo": g.lo, "hi": g.hi, "count": int(xs.size)}
        if xs.size < MIN_BIN:
            row.update(flagged=True, distance=None, p_value=None, threshold=None, passed=None)
            out.append(row)
            continue
        d = _group_distance(channel, g, xs, xh)
        null = np.array([_group_distance(channel, g, xs, channel.sample_given(xs, rng)) for _ in range(null_reps)])
        thr = float(np.quantile(null, 1 - level))
        row.update(flagged=False, distance=d, p_value=float(stats.kstwo.sf(d, xs.size)),
                   null_p_value=float((1 + np.sum(null >= d)) / (1 + null_reps)),
                   threshold=thr, passed=bool(d <= thr))
        out.append(row)
    return out


def cdf_curves(samples, channel, groups, points=200):
    """Rows (group, t, empirical, predicted) for plotting."""
    rows = []
    for g in groups:
        xs, xh = samples.x[g.mask], samples.xhat[g.mask]
        if xs.size < MIN_BIN:
            continue
        lo, hi = np.quantile(xh, [0.001, 0.999])
        pad = 0.05 * (hi - lo + 1e-12)
        t = np.linspace(lo - pad, hi + pad, points)
        emp = np.searchsorted(np.sort(xh), t, side="right") / xh.size
        pred = _predicted_cdf(channel, g, xs, t)
        rows.extend((g.label, float(a), float(b), float(c)) for a, b, c in zip(t, emp, pred))
    return rows


# -- index homogeneity -----------------------------------------------------------

def index_homogeneity(samples, G=4, atoms=(), bins=4, min_group=20):
    """Pairwise two-sample KS of xhat between G contiguous index blocks, within x groups.

    Returns the largest distance and the Bonferroni-adjusted smallest p-value.
    """
    if G < 2:
        raise ValueError("need at least two index groups")
    n = samples.n
    if n < G:
        raise ValueError(f"n={n} cannot be split into {G} index groups")
    block = samples.j * G // n
    tests = []
    for g in conditioning_groups(samples, atoms, bins):
        parts = [samples.xhat[g.mask & (block == b)] for b in range(G)]
        if min(p.size for p in parts) < min_group:
            continue
        for a, b in combinations(range(G), 2):
            res = stats.ks_2samp(parts[a], parts[b])
            tests.append((g.label, a, b, float(res.statistic), float(res.pvalue)))
    if not tests:
        raise ValueError(f"insufficient samples: no x group has >= {min_group} samples in every index block")
    m = len(tests)
    pmin = min(t[4] for t in tests)
    return {"statistic": max(t[3] for t in tests), "p_value": min(1.0, pmin * m), "tests": m,
            "groups": G, "details": [dict(zip(("group", "a", "b", "distance", "p"), t)) for t in tests]}


# -- report ----------------------------------------------------------------------

@dataclass
class ComparisonReport:
    solution_id: str
    ansatz: str
    predicted_q: float
    mse: dict
    moments: list
    cdf: list
    homogeneity: dict
    criteria: dict
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.criteria.values())

    def to_dict(self):
        d = asdict(self)
        d["passed"] = self.passed
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d.pop("passed", None)
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def rows(self):
        """Flat (criterion, predicted, empirical, ci_lo, ci_hi, pass) rows."""
        out = [("mse", self.predicted_q, self.mse["estimate"], *self.mse["ci"], self.mse["passed"])]
        for m in self.moments:
            out.append((f"M[{m['k']},{m['l']}]", m["predicted"], m["estimate"], *m["ci_joint"], m["passed"]))
        for c in self.cdf:
            if not c["flagged"]:
                out.append((f"cdf {c['group']}", c["threshold"], c["distance"], 0.0, c["threshold"], c["passed"]))
        h = self.homogeneity
        if h:
            out.append(("index homogeneity", 0.01, h["p_value"], 0.01, 1.0, h["passed"]))
        return out

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json())
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["criterion", "predicted", "empirical", "ci_lo", "ci_hi", "pass"])
            for r in self.rows():
                w.writerow([r[0], *(repr(float(v)) for v in r[1:5]), bool(r[5])])


def _digest(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def check_consistency(sample_config, solution_config):
    """Refuse to compare samples and predictions built from different models."""
    for key in ("prior", "utility"):
        if _digest(sample_config[key]) != _digest(solution_config[key]):
            raise ConfigurationError(f"{key} differs between the samples and the prediction")
    for key in ("lambda", "lambda0"):
        if not math.isclose(sample_config[key], solution_config[key], rel_tol=1e-12, abs_tol=0):
            raise ConfigurationError(f"{key} differs between the samples and the prediction")
    ens = sample_config["ensemble"]
    law = solution_config["law"]
    if ens["kind"] == "iid-gaussian":
        r = sample_config["n"] / sample_config["k"]
        if law.get("kind") != "marchenko-pastur" or not math.isclose(law["r"], r, rel_tol=1e-12):
            raise ConfigurationError(f"i.i.d. Gaussian samples with n/k={r:g} need a Marchenko-Pastur law with that r")
    elif _digest(ens["law"]) != _digest(law):
        raise ConfigurationError("spectral law differs between the samples and the prediction")


def build_report(samples, solution, channel=None, atoms=None, bins=8, groups_G=4, moment_order=4,
                 check_order=3, level=0.95, cdf_level=0.01, null_reps=200, seed=0, sample_config=None):
    """All comparison statistics with pass/fail per criterion."""
    sol = solution.to_dict()
    if sample_config is not None:
        check_consistency(sample_config, sol["config"])
    channel = channel or solution.channel()
    if atoms is None:
        atoms = tuple(solution.prior.point_masses()[0])
    q = float(sol["q"])
    mse = empirical_mse(samples, level)
    mse["passed"] = bool(mse["ci"][0] <= q <= mse["ci"][1])
    _, _, dof = _batch_mean(samples, samples.x)
    # pass/fail uses simultaneous (Bonferroni) intervals over the checked moments;
    # "ci" is the marginal interval at ``level``
    n_checked = (check_order + 1) * (check_order + 2) // 2 - 1
    joint_level = 1 - (1 - level) / max(n_checked, 1)
    moments = []
    for tot in range(1, moment_order + 1):
        for k in range(tot + 1):
            ell = tot - k
            est, se = empirical_moment(samples, k, ell)
            lo, hi = confidence_interval(est, se, dof, level)
            jlo, jhi = confidence_interval(est, se, dof, joint_level)
            pred = float(solution.moment(k, ell))
            slack = 1e-9 * (1 + abs(est))  # rounding room for exact moments (zero-width CI)
            moments.append({"k": k, "l": ell, "estimate": est, "se": se, "ci": [lo, hi], "ci_joint": [jlo, jhi],
                            "predicted": pred, "passed": bool(jlo - slack <= pred <= jhi + slack),
                            "checked": tot <= check_order})
    cdf = conditional_cdf_distance(samples, channel, atoms, bins, cdf_level, null_reps, seed)
    try:
        hom = index_homogeneity(samples, groups_G, atoms, bins=min(bins, 4))
        hom["passed"] = bool(hom["p_value"] >= 0.01)
        hom.pop("details")
    except ValueError as exc:
        log.warning("index homogeneity not testable: %s", exc)
        hom = {}
    criteria = {"mse": mse["passed"],
                "moments": all(m["passed"] for m in moments if m["checked"]),
                "cdf": all(c["passed"] for c in cdf if not c["flagged"]),
                "index_homogeneity": bool(hom.get("passed", True))}
    return ComparisonReport(solution_id=sol["id"], ansatz=sol["ansatz"], predicted_q=q, mse=mse,
                            moments=moments, cdf=cdf, homogeneity=hom, criteria=criteria,
                            config_hash=_digest(sample_config) if sample_config is not None else "",
                            extra={"pairs": len(samples), "trials": int(samples.trials.size)})
