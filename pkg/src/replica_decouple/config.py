"""Experiment configuration: strict JSON, validated against a schema that rejects unknown keys."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .errors import ConfigurationError
from .finite_sim import IidGaussian, TrialConfig, VectorSolverOptions, ensemble_from_dict
from .onersb import OneRsbOptions
from .priors import prior_from_dict
from .rs import solver_options_from_dict
from .scalar import utility_from_dict
from .spectral import MarchenkoPastur

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_numlist = {"type": "array", "items": _num, "minItems": 1}


def _obj(kind, props, required=()):
    p = {"kind": {"const": kind}, **props}
    return {"type": "object", "properties": p, "required": ["kind", *required], "additionalProperties": False}


PRIOR = {"oneOf": [
    _obj("gaussian", {"mean": _num, "variance": _pos, "order": _int1}),
    _obj("discrete", {"values": _numlist, "probs": _numlist}, ["values", "probs"]),
    _obj("bernoulli-gaussian", {"sparsity": _pos, "variance": _pos, "order": _int1}, ["sparsity"]),
    _obj("laplace", {"scale": _pos, "order": _int1}),
]}

UTILITY = {"oneOf": [
    _obj("zero", {}),
    _obj("quadratic", {"alpha": _nonneg}),
    _obj("l1", {"alpha": _nonneg}),
    _obj("elastic-net", {"alpha1": _nonneg, "alpha2": _nonneg}),
    _obj("discrete-support", {"values": _numlist, "costs": _numlist}, ["values", "costs"]),
]}

LAW = {"oneOf": [
    _obj("marchenko-pastur", {"r": _pos}, ["r"]),
    _obj("scaled-projector", {"r": {"type": "number", "minimum": 1}, "c": _pos}, ["r", "c"]),
    _obj("empirical", {"eigenvalues": _numlist, "path": {"type": "string"}}),
]}

ENSEMBLE = {"oneOf": [
    _obj("iid-gaussian", {}),
    _obj("haar-spectral", {"law": LAW, "eigenvalues": {"enum": ["iid", "quantile"]}}, ["law"]),
]}

RS_OPTIONS = {"type": "object", "additionalProperties": False, "properties": {
    "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1}, "tol": _pos, "max_iter": _int1,
    "init": {"type": "array", "items": _nonneg, "minItems": 2, "maxItems": 2},
    "quadrature": {"enum": ["panels", "gauss-hermite"]}, "order": {"type": "integer", "minimum": 1, "maximum": 200},
    "panel_nodes": _int1, "polish": {"type": "boolean"}}}

ONERSB_OPTIONS = {"type": "object", "additionalProperties": False, "properties": {
    "z1_quadrature": {"enum": ["panels", "gauss-hermite"]},
    "z1_order": {"type": "integer", "minimum": 1, "maximum": 200}, "z1_panel_nodes": _int1,
    "tol": _pos, "inner_tol": _pos, "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "max_inner": _int1, "stall": _int1, "mu_min": _pos, "mu_max": _pos, "mu_scan": {"type": "integer", "minimum": 2},
    "p_init": _pos, "identity_tol": _pos}}

VECTOR_OPTIONS = {"type": "object", "additionalProperties": False, "properties": {
    "max_iter": _int1, "obj_tol": _pos, "residual_tol": _pos, "exhaustive_max_n": _int1,
    "check_ridge": {"type": "boolean"}}}

VERIFY_OPTIONS = {"type": "object", "additionalProperties": False, "properties": {
    "bins": {"type": "integer", "minimum": 0}, "groups": {"type": "integer", "minimum": 2},
    "null_reps": {"type": "integer", "minimum": 10}, "level": {"type": "number", "exclusiveMinimum": 0,
                                                                "exclusiveMaximum": 1},
    "cdf_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    "moment_order": {"type": "integer", "minimum": 1, "maximum": 8},
    "check_order": {"type": "integer", "minimum": 1, "maximum": 8}}}

SWEEP = {"type": "object", "additionalProperties": False, "required": ["parameter", "values"], "properties": {
    "parameter": {"enum": ["lambda", "lambda0", "r"]}, "values": {"type": "array", "items": _pos, "minItems": 1}}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["prior", "utility", "lambda", "lambda0"],
    "properties": {
        "mode": {"enum": ["predict", "simulate", "verify", "sweep"]},
        "prior": PRIOR, "utility": UTILITY, "lambda": _pos, "lambda0": _nonneg,
        "ensemble": ENSEMBLE, "n": _int1, "k": _int1, "r": _pos,
        "ansatz": {"enum": ["rs", "1rsb", "both"]},
        "solver": {"type": "object", "additionalProperties": False,
                   "properties": {"rs": RS_OPTIONS, "onersb": ONERSB_OPTIONS}},
        "vector_solver": VECTOR_OPTIONS, "verify": VERIFY_OPTIONS, "sweep": SWEEP,
        "trials": _int1, "seed": {"type": "integer", "minimum": 0}, "output": {"type": "string"},
    },
}

VERIFY_DEFAULTS = {"bins": 8, "groups": 4, "null_reps": 200, "level": 0.95, "cdf_level": 0.01,
                   "moment_order": 4, "check_order": 3}


@dataclass
class ExperimentConfig:
    raw: dict
    prior: object
    utility: object
    lam: float
    lam0: float
    ensemble: object
    n: int | None
    k: int | None
    r: float | None
    ansatz: str = "rs"
    rs_options: object = None
    onersb_options: object = None
    vector_options: object = None
    verify: dict = field(default_factory=dict)
    sweep: dict | None = None
    trials: int = 50
    seed: int = 0
    output: str = "out"

    def law(self):
        if isinstance(self.ensemble, IidGaussian):
            if self.r is None:
                raise ConfigurationError("the i.i.d. Gaussian ensemble needs r or (n, k) to fix the spectral law")
            return MarchenkoPastur(self.r)
        return self.ensemble.law

    def trial_config(self):
        if self.n is None or self.k is None:
            raise ConfigurationError("simulation needs n and k (or n and r)")
        return TrialConfig(n=self.n, k=self.k, prior=self.prior, utility=self.utility, lam=self.lam,
                           lam0=self.lam0, ensemble=self.ensemble, solver=self.vector_options,
                           trials=self.trials, seed=self.seed)

    def resolved(self):
        """The config with defaults and derived sizes filled in."""
        d = copy.deepcopy(self.raw)
        d.update({"n": self.n, "k": self.k, "r": self.r, "ansatz": self.ansatz, "trials": self.trials,
                  "seed": self.seed, "output": self.output, "verify": self.verify,
                  "ensemble": self.ensemble.to_dict()})
        return {k: v for k, v in d.items() if v is not None}


def parse_config(raw, seed=None):
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(map(str, exc.absolute_path)) or "<root>"
        raise ConfigurationError(f"config error at {where}: {exc.message}") from None
    prior = prior_from_dict(raw["prior"])
    utility = utility_from_dict(raw["utility"])
    ensemble = ensemble_from_dict(raw.get("ensemble", {"kind": "iid-gaussian"}))
    n, k, r = raw.get("n"), raw.get("k"), raw.get("r")
    if n is not None and k is None and r is not None:
        k = round(n / r)
        if k < 1 or not math.isclose(n / k, r, rel_tol=1e-9):
            raise ConfigurationError(f"n={n} and r={r} do not give an integer k")
    if n is not None and k is not None:
        if r is not None and not math.isclose(n / k, r, rel_tol=1e-9):
            raise ConfigurationError(f"r={r} is inconsistent with n/k={n}/{k}")
        r = n / k
    if not isinstance(ensemble, IidGaussian) and r is not None and hasattr(ensemble.law, "r"):
        if not math.isclose(ensemble.law.r, r, rel_tol=1e-9):
            raise ConfigurationError(f"ensemble law has r={ensemble.law.r} but the sizes give r={r}")
    solver = raw.get("solver", {})
    rs_opts = solver_options_from_dict(solver.get("rs", {}))
    try:
        onersb_opts = OneRsbOptions(rs=rs_opts, **solver.get("onersb", {}))
        vec = VectorSolverOptions(**raw.get("vector_solver", {}))
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    if onersb_opts.mu_min >= onersb_opts.mu_max:
        raise ConfigurationError("need mu_min < mu_max")
    cfg = ExperimentConfig(raw=copy.deepcopy(raw), prior=prior, utility=utility, lam=float(raw["lambda"]),
                           lam0=float(raw["lambda0"]), ensemble=ensemble, n=n, k=k,
                           r=float(r) if r is not None else None, ansatz=raw.get("ansatz", "rs"),
                           rs_options=rs_opts, onersb_options=onersb_opts, vector_options=vec,
                           verify={**VERIFY_DEFAULTS, **raw.get("verify", {})}, sweep=raw.get("sweep"),
                           trials=raw.get("trials", 50), seed=raw.get("seed", 0) if seed is None else seed,
                           output=raw.get("output", "out"))
    if cfg.n is not None:
        cfg.trial_config()  # rank check for the ensemble
    return cfg


def load_config(path, seed=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text, object_pairs_hook=_no_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from None
    return parse_config(raw, seed)


def _no_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigurationError(f"duplicate key {k!r} in config")
        out[k] = v
    return out
