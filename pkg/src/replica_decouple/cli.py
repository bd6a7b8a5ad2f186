"""Command line: replica-decouple {predict,simulate,verify,sweep}."""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config, parse_config
from .errors import ConfigurationError, DomainError, NumericError
from .finite_sim import config_hash, resolve_workers, run_trials, write_pairs_csv
from .onersb import OneRsbSolution, onersb_solve
from .rs import rs_solution_from_dict, rs_solve
from .spectral import RTransform
from .verify import JointSampleSet, build_report, cdf_curves, check_consistency, conditioning_groups

log = logging.getLogger("replica_decouple")

EXIT_PASS, EXIT_FAIL, EXIT_NONCONVERGED, EXIT_CONFIG = 0, 2, 3, 4
FILES = {"rs": "rs.json", "1rsb": "onersb.json"}


class NonConvergence(Exception):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


def _ansatzes(a):
    return ["rs", "1rsb"] if a == "both" else [a]


def _dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- predict -----------------------------------------------------------------------

def conditioning_values(prior, count=5):
    """Atoms of the prior, or weighted quantiles of its quadrature nodes for a continuous law."""
    atoms, probs = prior.point_masses()
    vals = [float(a) for a in atoms]
    if 1 - float(np.sum(probs)) > 1e-12:
        xv, px = prior.nodes()
        order = np.argsort(xv)
        cum = np.cumsum(px[order]) / px.sum()
        for p in np.linspace(0, 1, count + 2)[1:-1]:
            v = float(xv[order][min(np.searchsorted(cum, p), len(xv) - 1)])
            if all(abs(v - a) > 1e-9 for a in vals):
                vals.append(v)
    return sorted(vals)


def prediction_document(sol, cfg, points=201):
    """Solution plus moment table and conditional CDF grids, ready for JSON."""
    d = sol.to_dict()
    moments = [{"k": k, "l": tot - k, "value": float(sol.moment(k, tot - k))}
               for tot in range(1, 5) for k in range(tot + 1)]
    ch = sol.channel()
    width = 5 * math.sqrt(ch.lam0_s + ch.lam1_s) + 1e-3
    grids = []
    for v in conditioning_values(sol.prior):
        t = np.linspace(v - width, v + width, points)
        grids.append({"x": v, "t": t.tolist(), "cdf": ch.conditional_cdf(v, t).tolist()})
    resolved = cfg.resolved()
    return {"solution": d, "moments": moments, "cdf_grid": grids, "channel": ch.describe(),
            "config": resolved, "config_hash": config_hash(resolved), "version": __version__,
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}


def solve(cfg, ansatz):
    """Solutions keyed by ansatz; raises NonConvergence with diagnostics."""
    rt = RTransform(cfg.law())
    try:
        rs = rs_solve(cfg.prior, cfg.utility, cfg.lam, cfg.lam0, rt, cfg.rs_options)
    except NumericError as exc:
        raise NonConvergence(f"RS solver failed: {exc}", {"stage": "rs"}) from None
    if not rs.converged:
        raise NonConvergence(f"RS solver residual {rs.residual:.3g} above tol {cfg.rs_options.tol:g}",
                             {"stage": "rs", "partial": rs.to_dict()})
    out = {}
    if ansatz in ("rs", "both"):
        out["rs"] = rs
    if ansatz in ("1rsb", "both"):
        try:
            sol = onersb_solve(cfg.prior, cfg.utility, cfg.lam, cfg.lam0, rt, cfg.onersb_options, rs=rs)
        except NumericError as exc:
            raise NonConvergence(f"1RSB solver failed: {exc}", {"stage": "1rsb", "rs": rs.to_dict()}) from None
        if not sol.converged:
            raise NonConvergence(f"1RSB defects {sol.defects} above tol {cfg.onersb_options.tol:g}",
                                 {"stage": "1rsb", "partial": sol.to_dict()})
        out["1rsb"] = sol
    return out


def cmd_predict(cfg, args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sols = solve(cfg, args.ansatz)
    from .plotting import plot_predicted_cdfs
    for name, sol in sols.items():
        doc = prediction_document(sol, cfg)
        _dump(doc, out / FILES[name])
        curves = {f"x = {g['x']:.4g}": (g["t"], g["cdf"]) for g in doc["cdf_grid"]}
        label = sol.status if name == "1rsb" else "rs"
        plot_predicted_cdfs(curves, out / f"{Path(FILES[name]).stem}_cdf.png", title=f"predicted channel ({label})")
        log.info("%s: %s", name, {k: doc["solution"][k] for k in ("chi", "q", "lambda0_s", "lambda_s")})
        if name == "1rsb":
            log.info("1rsb status: %s", sol.status)
    return EXIT_PASS


# -- simulate ----------------------------------------------------------------------

def cmd_simulate(cfg, args):
    tc = cfg.trial_config()
    results = run_trials(tc, args.workers)
    path = Path(args.samples) if args.samples else Path(args.out) / "samples.csv"
    side = write_pairs_csv(results, tc, path)
    bad = [r.trial for r in results if not r.converged]
    if bad:
        log.warning("vector MAP solver stopped before tolerance in trials %s", bad)
    log.info("wrote %d rows to %s (config hash %s)", side["rows"], path, side["config_hash"][:12])
    return EXIT_PASS


# -- verify ------------------------------------------------------------------------

def load_solution(path):
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read predictions {path}: {exc}") from None
    d = doc.get("solution", doc)
    if d.get("ansatz") == "rs":
        return rs_solution_from_dict(d)
    if d.get("ansatz") == "1rsb":
        return OneRsbSolution.from_dict(d)
    raise ConfigurationError(f"{path} does not hold a solution")


def cmd_verify(cfg, args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred_dir = Path(args.predictions) if args.predictions else out
    samples_path = Path(args.samples) if args.samples else out / "samples.csv"
    samples = JointSampleSet.from_csv(samples_path, check=True)
    sample_cfg = samples.sidecar["config"]
    if cfg.n is not None:
        # the current config must describe the same model as the sample file
        check_consistency(sample_cfg, {**cfg.trial_config().to_dict(), "law": cfg.law().to_dict()})
    v = cfg.verify
    from .plotting import plot_cdf_curves, plot_moments
    status = EXIT_PASS
    for name in _ansatzes(args.ansatz):
        sol = load_solution(pred_dir / FILES[name])
        report = build_report(samples, sol, bins=v["bins"], groups_G=v["groups"], moment_order=v["moment_order"],
                              check_order=v["check_order"], level=v["level"], cdf_level=v["cdf_level"],
                              null_reps=v["null_reps"], seed=cfg.seed, sample_config=sample_cfg)
        report.extra.update({"samples_sha256": samples.sidecar["sha256"], "samples": str(samples_path)})
        stem = f"report_{name}"
        report.write(out, stem)
        atoms = tuple(sol.prior.point_masses()[0])
        rows = cdf_curves(samples, sol.channel(), conditioning_groups(samples, atoms, v["bins"]))
        with open(out / f"cdf_curves_{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "t", "empirical", "predicted"])
            w.writerows((g, repr(t), repr(e), repr(p)) for g, t, e, p in rows)
        plot_cdf_curves(rows, out / f"cdf_curves_{name}.png", title=f"conditional CDFs ({name})")
        plot_moments(report.moments, out / f"moments_{name}.png")
        for crit, ok in report.criteria.items():
            log.info("%s %-18s %s", name, crit, "pass" if ok else "FAIL")
        if not report.passed:
            status = EXIT_FAIL
    return status


# -- sweep -------------------------------------------------------------------------

SUMMARY = ["parameter", "value", "ansatz", "status", "chi", "p", "q", "mu", "lambda0_s", "lambda1_s", "lambda_s",
           "max_defect", "converged", "id"]


def _sweep_point(raw, param, value, ansatz):
    cfg = sweep_config(raw, param, value)
    try:
        sols = solve(cfg, ansatz)
    except NonConvergence as exc:
        return {"error": str(exc), "diagnostics": exc.diagnostics}
    return {name: prediction_document(sol, cfg) for name, sol in sols.items()}


def sweep_config(raw, param, value):
    raw = json.loads(json.dumps(raw))
    raw.pop("sweep", None)
    if param == "r":
        raw.pop("n", None)
        raw.pop("k", None)
        law = raw.get("ensemble", {}).get("law")
        if law is not None and "r" in law:
            law["r"] = value
    raw[param] = value
    return parse_config(raw)


def _summary_row(param, value, name, doc):
    s = doc["solution"]
    defects = s.get("defects", {})
    return {"parameter": param, "value": value, "ansatz": name, "status": s.get("status", "rs"),
            "chi": s["chi"], "p": s.get("p", 0.0), "q": s["q"], "mu": s.get("mu", ""),
            "lambda0_s": s["lambda0_s"], "lambda1_s": s.get("lambda1_s", 0.0), "lambda_s": s["lambda_s"],
            "max_defect": max(defects.values()) if defects else s.get("residual", 0.0),
            "converged": s["converged"], "id": s["id"]}


def cmd_sweep(cfg, args):
    if not cfg.sweep:
        raise ConfigurationError("the sweep subcommand needs a 'sweep' block in the config")
    param, values = cfg.sweep["parameter"], cfg.sweep["values"]
    out = Path(args.out) / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    raw = dict(cfg.raw, seed=cfg.seed)
    for v in values:
        sweep_config(raw, param, v)  # fail fast on invalid points
    workers = resolve_workers(args.workers)
    jobs = [(raw, param, v, args.ansatz) for v in values]
    if workers == 1:
        docs = [_sweep_point(*j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            docs = list(pool.map(_sweep_star, jobs))
    rows, failed = [], []
    for i, (v, doc) in enumerate(zip(values, docs)):
        if "error" in doc:
            failed.append({"value": v, "error": doc["error"], "diagnostics": doc["diagnostics"]})
            continue
        for name, d in doc.items():
            _dump(d, out / f"{Path(FILES[name]).stem}_{param}_{i:03d}.json")
            rows.append(_summary_row(param, v, name, d))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    from .plotting import plot_sweep
    series = {}
    for name in _ansatzes(args.ansatz):
        by_v = {r["value"]: r for r in rows if r["ansatz"] == name}
        series[f"q ({name})"] = [by_v[v]["q"] if v in by_v else None for v in values]
        series[f"lambda0_s ({name})"] = [by_v[v]["lambda0_s"] if v in by_v else None for v in values]
    plot_sweep(param, values, series, out / "summary.png")
    if failed:
        _dump({"stage": "sweep", "failures": failed}, Path(args.out) / "diagnostics.json")
        log.error("%d of %d sweep points did not converge", len(failed), len(values))
        return EXIT_NONCONVERGED
    return EXIT_PASS


def _sweep_star(job):
    return _sweep_point(*job)


# -- entry point -------------------------------------------------------------------

COMMANDS = {"predict": cmd_predict, "simulate": cmd_simulate, "verify": cmd_verify, "sweep": cmd_sweep}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, default=None, metavar="N", help="override the config seed")
    common.add_argument("--out", default=None, metavar="DIR", help="output directory (default: config 'output')")
    common.add_argument("--workers", type=int, default=None, metavar="N",
                        help="worker processes (fallback: $REPLICA_DECOUPLE_WORKERS, then 1)")
    common.add_argument("--ansatz", choices=["rs", "1rsb", "both"], default=None,
                        help="which replica solution(s) to compute or check")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="replica-decouple",
                                description="Replica-predicted decoupled scalar channels for MAP estimation, "
                                            "checked against Monte Carlo.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("predict", parents=[common], help="solve the RS / 1RSB fixed points")
    s = sub.add_parser("simulate", parents=[common], help="Monte Carlo trials of the vector MAP estimator")
    s.add_argument("--samples", default=None, metavar="PATH", help="samples CSV (default: OUT/samples.csv)")
    v = sub.add_parser("verify", parents=[common], help="compare samples with predictions")
    v.add_argument("--samples", default=None, metavar="PATH", help="samples CSV (default: OUT/samples.csv)")
    v.add_argument("--predictions", default=None, metavar="DIR", help="directory with rs.json / onersb.json "
                                                                       "(default: OUT)")
    sub.add_parser("sweep", parents=[common], help="predictions over a parameter grid")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, seed=args.seed)
        args.out = args.out or cfg.output
        args.ansatz = args.ansatz or cfg.ansatz
        args.workers = resolve_workers(args.workers)
        return COMMANDS[args.command](cfg, args)
    except NonConvergence as exc:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        _dump({"error": str(exc), **exc.diagnostics}, Path(args.out) / "diagnostics.json")
        log.error("%s (diagnostics in %s)", exc, Path(args.out) / "diagnostics.json")
        return EXIT_NONCONVERGED
    except (ConfigurationError, DomainError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except NumericError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
