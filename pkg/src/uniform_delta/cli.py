"""``uniform-delta`` command line.

Exit codes: 0 ok, 2 configuration error, 3 domain error, 4 a study's
expectation (or a divergence preset) failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import re
import sys
from pathlib import Path
from typing import Callable, Optional

import jsonschema
import numpy as np

from . import exprlang
from .applications import (MODELS, WeakIVScenario, get_model, mindist_delta_scan, mindist_estimate,
                           mindist_slope, mineq_limit_study)
from .errors import DomainError, UniformDeltaError
from .funcspace import BUILTINS, PhiMap, builtin
from .montecarlo import (FAMILIES, ParamSeq, SimConfig, ci_study, cmt_counterexample, mvnormal_mean_family,
                         normal_mean_family, sequence_study)
from .remainder import (DIVERGENCE_PRESETS, Axis, DivergenceCertificate, GridSpec,
                        check_divergence, divergence_preset, envelope, scan)
from .report import atomic_write, config_hash, field_csv, heatmap_svg, write_csv, write_json

log = logging.getLogger("uniform_delta")

EXIT_OK, EXIT_CONFIG, EXIT_DOMAIN, EXIT_ASSERT = 0, 2, 3, 4
DEFAULT_SEED = 20240101


class ConfigError(UniformDeltaError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


# -- small parsers ------------------------------------------------------------


def parse_range(text: str) -> list:
    """'lo:hi' or 'lo:hi,lo:hi' -> [(lo, hi), ...]."""
    out = []
    for part in text.split(","):
        try:
            lo, hi = part.split(":")
            out.append((float(lo), float(hi)))
        except ValueError:
            raise ConfigError(f"bad range {part!r}; expected lo:hi") from None
    return out


def parse_int_list(text: str) -> list:
    try:
        vals = [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad integer list {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise ConfigError(f"need positive integers, got {text!r}")
    return vals


def rule(src, pointer: str = "") -> Callable[[float], float]:
    """Compile an expression in ``n`` (e.g. '1/n^0.5') into n -> float."""
    if isinstance(src, (int, float)):
        value = float(src)
        return lambda n: value
    try:
        tree = exprlang.parse(re.sub(r"\bn\b", "t1", str(src)))
    except exprlang.ExprSyntaxError as exc:
        raise ConfigError(f"bad rule {src!r}: {exc}", pointer) from None
    bad = exprlang.variables(tree) - {1}
    if bad:
        raise ConfigError(f"rule {src!r} may only use n", pointer)
    return lambda n: float(exprlang.evaluate(tree, [[float(n)]])[0])


def resolve_phi(name: Optional[str] = None, expr=None, model: Optional[str] = None, pointer: str = "") -> PhiMap:
    if (name is None) == (expr is None):
        raise ConfigError("give exactly one of a built-in name or an expression", pointer)
    if expr is not None:
        try:
            return exprlang.compile_phi([expr] if isinstance(expr, str) else list(expr))
        except UniformDeltaError as exc:
            raise ConfigError(str(exc), pointer) from None
    if name not in BUILTINS:
        raise ConfigError(f"unknown built-in {name!r}; choose from {', '.join(BUILTINS)}", pointer)
    if name == "mindist":
        return builtin(name, model=model or "parabola")
    return builtin(name)


def grid_from_ranges(ranges, count: int, spacing: str, dim: int) -> GridSpec:
    if len(ranges) == 1 and dim > 1:
        ranges = ranges * dim
    if len(ranges) != dim:
        raise ConfigError(f"expected {dim} range(s), got {len(ranges)}")
    try:
        return GridSpec(tuple(Axis(lo, hi, count, spacing) for lo, hi in ranges))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- schema -------------------------------------------------------------------

_POS_INTS = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}
_PHI = {"phi": {"type": "string"}, "expr": {"oneOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}]},
        "model": {"enum": sorted(MODELS)}}
_RULE = {"oneOf": [{"type": "string"}, {"type": "number"}]}
_EXPECT = {
    "type": "object",
    "properties": {k: {"type": "number"} for k in ("ks_min", "ks_max", "distance_min", "distance_max")}
    | {"coverage_in": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
    "additionalProperties": False,
}
_FAMILY = {
    "type": "object",
    "properties": {
        "name": {"enum": sorted(FAMILIES) + ["mvnormal-mean", "weak-iv"]},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "cov": {"type": "array"},
        "beta": {"type": "number"}, "rho": {"type": "number", "minimum": -1, "maximum": 1},
        "gaussian_shortcut": {"type": "boolean"},
    },
    "required": ["name"],
    "additionalProperties": False,
}

STUDY_SCHEMAS = {
    "scan": {"properties": _PHI | {"t_range": {"type": "string"}, "m_range": {"type": "string"},
                                  "grid": {"type": "integer", "minimum": 2},
                                  "spacing": {"enum": ["linear", "log"]}, "vmax": {"type": "number"}},
             "required": ["t_range", "m_range", "grid"]},
    "envelope": {"properties": _PHI | {"box": {"type": "string"},
                                      "eps": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                                              "minItems": 1},
                                      "samples": {"type": "integer", "minimum": 1}},
                 "required": ["box", "eps"]},
    "diverge": {"properties": _PHI | {"preset": {"enum": list(DIVERGENCE_PRESETS)}, "n_list": _POS_INTS,
                                     "r": _RULE, "eps": _RULE, "m": {"type": "array", "items": _RULE},
                                     "A": {"type": "array", "items": {"type": "array", "items": {"type": "number"}},
                                           "minItems": 2, "maxItems": 2},
                                     "grid_per_axis": {"type": "integer", "minimum": 1}, "margin": _RULE},
                "required": ["n_list"]},
    "sequence": {"properties": _PHI | {"preset": {"type": "string"}, "family": _FAMILY,
                                      "theta": {"type": "array", "items": _RULE}, "n_list": _POS_INTS,
                                      "reps": {"type": "integer", "minimum": 2}, "r": _RULE,
                                      "n_boot": {"type": "integer", "minimum": 0}, "expect": _EXPECT}},
    "coverage": {"properties": _PHI | {"preset": {"type": "string"}, "family": _FAMILY,
                                      "theta": {"type": "array", "items": _RULE}, "n_list": _POS_INTS,
                                      "reps": {"type": "integer", "minimum": 2}, "r": _RULE,
                                      "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                                      "expect": _EXPECT}},
    "mineq": {"properties": {"n_list": _POS_INTS, "reps": {"type": "integer", "minimum": 2},
                             "drift": {"enum": ["inv_sqrt_n", "inv_n"]}, "expect": _EXPECT}},
    "mindist": {"properties": {"model": {"enum": sorted(MODELS)}, "x_range": {"type": "string"},
                               "x_grid": {"type": "integer", "minimum": 2}, "t_range": {"type": "string"},
                               "t_grid": {"type": "integer", "minimum": 2},
                               "tube": {"type": "number", "exclusiveMinimum": 0},
                               "points": {"type": "array", "items": {"type": "array", "items": {"type": "number"},
                                                                      "minItems": 2, "maxItems": 2}}}},
    "cmt-demo": {"properties": {"n_list": _POS_INTS, "theta": _RULE}},
}

for _kind, _schema in STUDY_SCHEMAS.items():
    _schema["type"] = "object"
    _schema["properties"] = dict(_schema["properties"], kind={"const": _kind}, label={"type": "string"},
                                 seed={"type": "integer", "minimum": 0})
    _schema["additionalProperties"] = False

RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "master_seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "studies": {"type": "array", "items": {"type": "object", "required": ["kind"],
                                               "properties": {"kind": {"enum": sorted(STUDY_SCHEMAS)}}},
                    "minItems": 1},
    },
    "required": ["studies"],
    "additionalProperties": False,
}


def _pointer(path) -> str:
    return "/" + "/".join(str(p) for p in path) if path else "/"


def validate_config(doc) -> dict:
    """Validate the whole document (every study) before anything runs."""
    try:
        jsonschema.validate(doc, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(exc.message, _pointer(exc.absolute_path)) from None
    for i, study in enumerate(doc["studies"]):
        try:
            jsonschema.validate(study, STUDY_SCHEMAS[study["kind"]])
        except jsonschema.ValidationError as exc:
            raise ConfigError(exc.message, _pointer(["studies", i, *exc.absolute_path])) from None
        base = f"/studies/{i}"
        kind = study["kind"]
        if kind in ("scan", "envelope") and ("phi" in study) == ("expr" in study):
            raise ConfigError("give exactly one of phi or expr", base)
        if kind in ("sequence", "coverage") and "preset" not in study:
            for key in ("family", "theta", "n_list"):
                if key not in study:
                    raise ConfigError(f"'{key}' is required without a preset", base)
            if ("phi" in study) == ("expr" in study):
                raise ConfigError("give exactly one of phi or expr", base)
        if kind in ("sequence", "coverage") and "preset" in study:
            presets = SEQUENCE_PRESETS if kind == "sequence" else COVERAGE_PRESETS
            if study["preset"] not in presets:
                raise ConfigError(f"unknown preset {study['preset']!r}", base + "/preset")
        if kind == "diverge" and "preset" not in study:
            for key in ("r", "eps", "m", "A"):
                if key not in study:
                    raise ConfigError(f"'{key}' is required without a preset", base)
        if kind in ("scan", "envelope", "diverge", "sequence", "coverage") and ("phi" in study or "expr" in study):
            which = "expr" if "expr" in study else "phi"
            resolve_phi(study.get("phi"), study.get("expr"), study.get("model"), f"{base}/{which}")
        for key in ("theta", "m"):
            for j, src in enumerate(study.get(key, []) if isinstance(study.get(key), list) else []):
                rule(src, f"{base}/{key}/{j}")
        for key in ("r", "eps", "margin"):
            if key in study and not (key == "eps" and kind == "envelope"):
                rule(study[key], f"{base}/{key}")
    return doc


def load_config(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return validate_config(doc)


# -- presets ------------------------------------------------------------------

SEQUENCE_PRESETS = {
    "reciprocal-fixed": {"phi": "reciprocal", "family": {"name": "normal-mean"}, "theta": [1.0],
                         "n_list": [100, 1000, 10000]},
    "reciprocal-drift": {"phi": "reciprocal", "family": {"name": "normal-mean"}, "theta": ["1/n^0.5 + 1/n"],
                         "n_list": [100, 1000, 10000], "expect": {"distance_min": 0.05}},
    "square-drift": {"phi": "square", "family": {"name": "normal-mean"}, "theta": ["1/n"],
                     "n_list": [100, 1000, 10000], "expect": {"distance_min": 0.05}},
    "absval-drift": {"phi": "absval", "family": {"name": "normal-mean"}, "theta": ["1/n"],
                     "n_list": [100, 1000, 10000], "expect": {"distance_min": 0.05}},
    "sqrt-chi2-drift": {"phi": "sqrt", "family": {"name": "chi2-mean"}, "theta": ["1/n"],
                        "n_list": [10000], "expect": {"ks_min": 0.2}},
    "sqrt-chi2-fixed": {"phi": "sqrt", "family": {"name": "chi2-mean"}, "theta": [1.0],
                        "n_list": [10000], "expect": {"ks_max": 0.03}},
    "iv-drift": {"phi": "iv_ratio", "family": {"name": "mvnormal-mean", "cov": [[1, 0], [0, 1]]},
                 "theta": ["1 + 1/(2*n^0.5)", "1/n^0.5"], "n_list": [100, 1000, 10000],
                 "expect": {"distance_min": 0.05}},
}

COVERAGE_PRESETS = {
    "reciprocal-fixed": {"phi": "reciprocal", "family": {"name": "normal-mean"}, "theta": [1.0],
                         "n_list": [10000], "expect": {"coverage_in": [0.94, 0.96]}},
    "reciprocal-drift": {"phi": "reciprocal", "family": {"name": "normal-mean"}, "theta": ["1/n^0.5"],
                         "n_list": [10000], "expect": {"coverage_in": [0.8046, 0.8246]}},
    "affine-fixed": {"expr": "2*t1 + 1", "family": {"name": "normal-mean"}, "theta": [0.3],
                     "n_list": [50, 1000], "expect": {"coverage_in": [0.94, 0.96]}},
}


def _family(spec: dict):
    name = spec["name"]
    if name == "normal-mean":
        return normal_mean_family(spec.get("sigma", 1.0))
    if name == "mvnormal-mean":
        return mvnormal_mean_family(spec.get("cov", [[1.0, 0.0], [0.0, 1.0]]))
    if name == "weak-iv":
        scen = WeakIVScenario(beta=spec.get("beta", 1.0), rho=spec.get("rho", 0.5))
        return scen.family(gaussian_shortcut=spec.get("gaussian_shortcut", True))
    return FAMILIES[name]()


def _expand(study: dict, presets: dict) -> dict:
    if "preset" not in study:
        return dict(study)
    merged = dict(presets[study["preset"]])
    merged.update({k: v for k, v in study.items() if k != "preset"})
    merged["label"] = study.get("label", study["preset"])
    return merged


def _seq(study: dict) -> ParamSeq:
    fam = _family(study["family"])
    rules = [rule(src) for src in study["theta"]]
    return ParamSeq(fam, lambda n: np.array([r(n) for r in rules]), study.get("label", ""))


def _sim(study: dict, seed: int) -> SimConfig:
    return SimConfig(master_seed=seed, reps=study.get("reps", 100_000), n_list=tuple(study["n_list"]),
                     r_rule=rule(study.get("r", "n^0.5")), n_boot=study.get("n_boot", 200))


def _check_expect(expect: dict, value_of: dict, n: int) -> list:
    """One record per expectation.  A satisfied lower bound on a distance is the
    non-convergence signal, so it is also marked as a raised flag."""
    checks = []
    for key, bound in sorted(expect.items()):
        if key == "coverage_in":
            v = value_of.get("coverage")
            ok = v is not None and bound[0] <= v <= bound[1]
            checks.append({"n": n, "check": key, "bound": list(bound), "value": v, "passed": ok, "flag": False})
            continue
        metric, side = key.rsplit("_", 1)
        v = value_of.get(metric)
        ok = v is not None and (v >= bound if side == "min" else v <= bound)
        checks.append({"n": n, "check": key, "bound": bound, "value": v, "passed": bool(ok),
                       "flag": bool(ok and side == "min")})
    return checks


def _verdict(checks: list, errors: list = ()) -> tuple:
    failures = list(errors) + [f"n={c['n']}: {c['check']} {c['bound']} violated by {c['value']}"
                               for c in checks if not c["passed"]]
    flags = [f"n={c['n']}: non-convergence, {c['check'].rsplit('_', 1)[0]} = {c['value']:.4g} >= {c['bound']}"
             for c in checks if c["flag"]]
    return failures, flags


# -- study runners ------------------------------------------------------------


class StudyResult:
    def __init__(self, status: int = EXIT_OK, files: Optional[list] = None, messages: Optional[list] = None):
        self.status = status
        self.files = files or []
        self.messages = messages or []


def _stem(index: int, kind: str, study: dict) -> str:
    label = re.sub(r"[^A-Za-z0-9_.-]+", "-", study.get("label") or study.get("preset") or "").strip("-")
    return f"{index:02d}_{kind}" + (f"_{label}" if label else "")


def run_scan(study: dict, out: Path, stem: str, stamp: dict) -> StudyResult:
    phi = resolve_phi(study.get("phi"), study.get("expr"), study.get("model"))
    spacing = study.get("spacing", "linear")
    tg = grid_from_ranges(parse_range(study["t_range"]), study["grid"], spacing, phi.d_in)
    mg = grid_from_ranges(parse_range(study["m_range"]), study["grid"], spacing, phi.d_in)
    field = scan(phi, tg, mg)
    files = [atomic_write(out / f"{stem}.csv", field_csv(field)),
             atomic_write(out / f"{stem}.svg", heatmap_svg(field, "Delta(t, m)", study.get("vmax")))]
    counts = {label: int(np.count_nonzero(field.mask == code)) for code, label in
              [(0, "valid"), (1, "outside_domain"), (2, "degenerate")]}
    files.append(write_json(out / f"{stem}.json", dict(stamp, phi=phi.name, max_delta=field.max(), cells=counts)))
    if counts["valid"] == 0 and counts["outside_domain"] > 0:
        return StudyResult(EXIT_DOMAIN, files, ["scan window lies outside the domain"])
    return StudyResult(EXIT_OK, files)


def run_envelope(study: dict, out: Path, stem: str, stamp: dict, seed: int) -> StudyResult:
    phi = resolve_phi(study.get("phi"), study.get("expr"), study.get("model"))
    ranges = parse_range(study["box"])
    if len(ranges) == 1 and phi.d_in > 1:
        ranges = ranges * phi.d_in
    box = ([r[0] for r in ranges], [r[1] for r in ranges])
    env = envelope(phi, box, study["eps"], study.get("samples", 20000), seed)
    files = [write_csv(out / f"{stem}.csv", ["eps", "delta_hat"], env.pairs()),
             write_json(out / f"{stem}.json", dict(stamp, phi=phi.name, eps=env.eps, delta_hat=env.delta_hat,
                                                   meta=env.meta))]
    return StudyResult(EXIT_OK, files)


def _custom_certificate(study: dict) -> DivergenceCertificate:
    phi = resolve_phi(study.get("phi"), study.get("expr"), study.get("model"))
    m_rules = [rule(s) for s in study["m"]]
    margin = rule(study["margin"]) if "margin" in study else None
    try:
        return DivergenceCertificate(phi, rule(study["r"]), rule(study["eps"]),
                                     lambda n: np.array([r(n) for r in m_rules]),
                                     (tuple(study["A"][0]), tuple(study["A"][1])), tuple(study["n_list"]),
                                     study.get("grid_per_axis", 17), margin, study.get("label", "custom"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def run_diverge(study: dict, out: Path, stem: str, stamp: dict) -> StudyResult:
    if "preset" in study:
        cert = divergence_preset(study["preset"], study["n_list"], study.get("grid_per_axis", 17))
    else:
        cert = _custom_certificate(study)
    verdicts = check_divergence(cert)
    rows = [v.as_dict() for v in verdicts]
    failed = [v for v in verdicts if not v.holds or v.margin_holds is False]
    msgs = [f"n={v.n}: {v.reason or 'margin not met'}" for v in failed]
    files = [write_json(out / f"{stem}.json", dict(stamp, phi=cert.phi.name, label=cert.label, verdicts=rows,
                                                   failures=msgs)),
             write_csv(out / f"{stem}.csv", ["n", "eps_prime", "min_delta", "holds", "margin", "margin_holds"],
                       [[v.n, v.eps_prime, v.min_delta, v.holds, v.margin, v.margin_holds] for v in verdicts])]
    return StudyResult(EXIT_ASSERT if failed else EXIT_OK, files, msgs)


def run_sequence(study: dict, out: Path, stem: str, stamp: dict, seed: int) -> StudyResult:
    study = _expand(study, SEQUENCE_PRESETS)
    phi = resolve_phi(study.get("phi"), study.get("expr"), study.get("model"))
    rows = sequence_study(phi, _seq(study), _sim(study, seed))
    checks, errors = [], []
    for r in rows:
        if r.error:
            errors.append(f"n={r.n}: {r.error}")
            continue
        checks += _check_expect(study.get("expect", {}), {"ks": r.ks.value, "distance": r.distance.value}, r.n)
    failures, flags = _verdict(checks, errors)
    files = [write_json(out / f"{stem}.json", dict(stamp, phi=phi.name, label=study.get("label", ""),
                                                   expect=study.get("expect", {}), rows=[r.as_dict() for r in rows],
                                                   checks=checks, flags=flags, failures=failures)),
             write_csv(out / f"{stem}.csv", ["n", "distance_metric", "distance", "distance_stderr", "ks",
                                             "ks_stderr", "rejected"],
                       [[r.n, r.distance.metric if r.distance else "", r.distance.value if r.distance else math.nan,
                         r.distance.mc_stderr if r.distance else math.nan, r.ks.value if r.ks else math.nan,
                         r.ks.mc_stderr if r.ks else math.nan, r.rejected] for r in rows])]
    return StudyResult(EXIT_ASSERT if failures else EXIT_OK, files, failures + flags)


def run_coverage(study: dict, out: Path, stem: str, stamp: dict, seed: int) -> StudyResult:
    study = _expand(study, COVERAGE_PRESETS)
    phi = resolve_phi(study.get("phi"), study.get("expr"), study.get("model"))
    reports = ci_study(phi, _seq(study), _sim(study, seed), study.get("alpha", 0.05))
    checks = []
    for rep in reports:
        checks += _check_expect(study.get("expect", {}), {"coverage": rep.coverage}, rep.meta["n"])
    failures, flags = _verdict(checks)
    files = [write_json(out / f"{stem}.json", dict(stamp, phi=phi.name, label=study.get("label", ""),
                                                   expect=study.get("expect", {}),
                                                   reports=[r.as_dict() for r in reports], checks=checks, flags=flags,
                                                   failures=failures)),
             write_csv(out / f"{stem}.csv", ["n", "coverage", "stderr", "band_lo", "band_hi", "rejected"],
                       [[r.meta["n"], r.coverage, r.stderr, r.band[0], r.band[1], r.meta["rejected"]]
                        for r in reports])]
    return StudyResult(EXIT_ASSERT if failures else EXIT_OK, files, failures + flags)


def run_mineq(study: dict, out: Path, stem: str, stamp: dict, seed: int) -> StudyResult:
    res = mineq_limit_study(study.get("n_list", [10000]), study.get("reps", 100_000), seed,
                            study.get("drift", "inv_sqrt_n"))
    checks = []
    for row in res["rows"]:
        checks += _check_expect(study.get("expect", {}), {"ks": row["ks_rem2"]["value"]}, row["n"])
    failures, flags = _verdict(checks)
    files = [write_json(out / f"{stem}.json", dict(stamp, result=res, checks=checks, flags=flags,
                                                   failures=failures)),
             write_csv(out / f"{stem}.csv", ["n", "m2", "ks_rem2", "ks_rem1", "fixed_p_nonzero"],
                       [[r["n"], r["m2"], r["ks_rem2"]["value"], r["ks_rem1"]["value"], r["fixed_m2_1_p_nonzero"]]
                        for r in res["rows"]])]
    return StudyResult(EXIT_ASSERT if failures else EXIT_OK, files, failures + flags)


def run_mindist(study: dict, out: Path, stem: str, stamp: dict) -> StudyResult:
    model = get_model(study.get("model", "parabola"))
    files = []
    if "points" in study:
        rows = []
        for t in study["points"]:
            est = mindist_estimate(model, t)
            try:
                slope = mindist_slope(model, t, est.x_hat).tolist()
            except UniformDeltaError as exc:
                slope = str(exc)
            rows.append({"t": t, "x_hat": est.x_hat, "e_min": est.e_min, "at_boundary": est.at_boundary,
                         "slope": slope})
        files.append(write_json(out / f"{stem}_points.json", dict(stamp, model=model.name, points=rows)))
    xr = parse_range(study.get("x_range", "-0.5:0.5"))[0]
    xg = GridSpec((Axis(xr[0], xr[1], study.get("x_grid", 21)),))
    tg = grid_from_ranges(parse_range(study.get("t_range", "-1:1")), study.get("t_grid", 25), "linear", 2)
    field = mindist_delta_scan(model, xg, tg, study.get("tube", 0.5))
    files.append(atomic_write(out / f"{stem}.csv", field_csv(field)))
    files.append(atomic_write(out / f"{stem}.svg", heatmap_svg(field, f"Delta for {field.name}")))
    files.append(write_json(out / f"{stem}.json", dict(stamp, model=model.name, curvature=model.curvature,
                                                       max_delta=field.max(),
                                                       valid_cells=int(field.valid.sum()))))
    return StudyResult(EXIT_OK, files)


def run_cmt(study: dict, out: Path, stem: str, stamp: dict) -> StudyResult:
    theta = rule(study["theta"]) if "theta" in study else None
    rows = cmt_counterexample(study.get("n_list", [10, 1000, 10**6]), theta)
    files = [write_json(out / f"{stem}.json", dict(stamp, rows=[r.as_dict() for r in rows])),
             write_csv(out / f"{stem}.csv", ["n", "theta", "psi_x", "psi_y", "gap"],
                       [[r.n, r.theta, r.psi_x, r.psi_y, r.gap] for r in rows])]
    return StudyResult(EXIT_OK, files)


def run_study(index: int, study: dict, out: Path, master_seed: int, chash: str) -> StudyResult:
    kind = study["kind"]
    seed = int(study.get("seed", master_seed))
    stem = _stem(index, kind, study)
    stamp = {"kind": kind, "config_hash": chash, "seed": seed, "study": study}
    if kind == "scan":
        return run_scan(study, out, stem, stamp)
    if kind == "envelope":
        return run_envelope(study, out, stem, stamp, seed)
    if kind == "diverge":
        return run_diverge(study, out, stem, stamp)
    if kind == "sequence":
        return run_sequence(study, out, stem, stamp, seed)
    if kind == "coverage":
        return run_coverage(study, out, stem, stamp, seed)
    if kind == "mineq":
        return run_mineq(study, out, stem, stamp, seed)
    if kind == "mindist":
        return run_mindist(study, out, stem, stamp)
    return run_cmt(study, out, stem, stamp)


def run_config(doc: dict, output_dir: Optional[str] = None, only_kind: Optional[str] = None) -> int:
    doc = validate_config(doc)
    out = Path(output_dir or doc.get("output_dir", "uniform_delta_out"))
    seed = int(doc.get("master_seed", DEFAULT_SEED))
    # where results land does not change them
    chash = config_hash({k: v for k, v in doc.items() if k != "output_dir"})
    worst = EXIT_OK
    for i, study in enumerate(doc["studies"]):
        if only_kind and study["kind"] != only_kind:
            continue
        try:
            res = run_study(i, study, out, seed, chash)
        except ConfigError as exc:
            res = StudyResult(EXIT_CONFIG, messages=[f"/studies/{i}: {exc}"])
        except DomainError as exc:
            res = StudyResult(EXIT_DOMAIN, messages=[str(exc)])
        except UniformDeltaError as exc:
            res = StudyResult(EXIT_DOMAIN, messages=[f"{type(exc).__name__}: {exc}"])
        for f in res.files:
            print(f)
        for msg in res.messages:
            log.warning("study %d (%s): %s", i, study["kind"], msg)
        worst = max(worst, res.status)
    return worst


# -- argparse -----------------------------------------------------------------


def _add_phi(p):
    p.add_argument("--phi", choices=BUILTINS, help="built-in map")
    p.add_argument("--expr", action="append", help="expression component in t1, t2, ... (repeatable)")
    p.add_argument("--model", choices=sorted(MODELS), help="curve for --phi mindist")


def _common(p):
    p.add_argument("--out", default="uniform_delta_out", help="output directory")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniform-delta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="tabulate Delta(t, m) on a grid; writes CSV + SVG heatmap")
    _add_phi(p)
    p.add_argument("--t-range", required=True)
    p.add_argument("--m-range", required=True)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--spacing", choices=["linear", "log"], default="linear")
    p.add_argument("--vmax", type=float)
    _common(p)

    p = sub.add_parser("envelope", help="sampled uniform envelope of Delta over a box of m")
    _add_phi(p)
    p.add_argument("--box", required=True)
    p.add_argument("--eps", required=True, help="comma-separated decreasing radii")
    p.add_argument("--samples", type=int, default=20000)
    _common(p)

    p = sub.add_parser("diverge", help="check a divergence certificate on a lattice")
    p.add_argument("--preset", help=f"one of {', '.join(DIVERGENCE_PRESETS)}")
    p.add_argument("--config")
    p.add_argument("--n", default="100,10000,1000000")
    p.add_argument("--grid-per-axis", type=int, default=17)
    _common(p)

    for kind in ("sequence", "coverage", "mineq", "mindist", "cmt-demo"):
        p = sub.add_parser(kind, help=f"run {kind} studies from a config file or a preset")
        p.add_argument("--config")
        if kind in ("sequence", "coverage"):
            p.add_argument("--preset")
            p.add_argument("--reps", type=int)
        if kind == "cmt-demo":
            p.add_argument("--n", default="10,1000,1000000")
        _common(p)

    p = sub.add_parser("run", help="run every study in a config file")
    p.add_argument("config")
    p.add_argument("--out")
    return parser


def _flag_study(args) -> dict:
    study = {"kind": args.command}
    if args.command in ("scan", "envelope"):
        if args.phi:
            study["phi"] = args.phi
        if args.expr:
            study["expr"] = args.expr if len(args.expr) > 1 else args.expr[0]
        if args.model:
            study["model"] = args.model
    if args.command == "scan":
        study.update(t_range=args.t_range, m_range=args.m_range, grid=args.grid, spacing=args.spacing)
        if args.vmax is not None:
            study["vmax"] = args.vmax
    elif args.command == "envelope":
        study.update(box=args.box, eps=[float(e) for e in args.eps.split(",")], samples=args.samples)
    elif args.command == "diverge":
        study.update(preset=args.preset, n_list=parse_int_list(args.n), grid_per_axis=args.grid_per_axis)
    elif args.command in ("sequence", "coverage"):
        study["preset"] = args.preset
        if args.reps:
            study["reps"] = args.reps
    elif args.command == "cmt-demo":
        study["n_list"] = parse_int_list(args.n)
    return study


_VALUE_FLAGS = ("--t-range", "--m-range", "--box", "--eps", "--n", "--expr")


def _glue_values(argv: list) -> list:
    """Let '--t-range -1:1' through: argparse would read '-1:1' as an option."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in _VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(_glue_values(list(sys.argv[1:] if argv is None else argv)))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            return run_config(load_config(args.config), args.out)
        if getattr(args, "config", None):
            doc = load_config(args.config)
            return run_config(doc, args.out, only_kind=args.command)
        if args.command == "diverge" and args.preset not in DIVERGENCE_PRESETS:
            raise ConfigError(f"unknown preset {args.preset!r}; choose from {', '.join(DIVERGENCE_PRESETS)}")
        if args.command in ("sequence", "coverage"):
            presets = SEQUENCE_PRESETS if args.command == "sequence" else COVERAGE_PRESETS
            if args.preset not in presets:
                raise ConfigError(f"unknown preset {args.preset!r}; choose from {', '.join(presets)}")
        if args.command in ("mineq", "mindist"):
            study = {"kind": args.command}
        else:
            study = {k: v for k, v in _flag_study(args).items() if v is not None}
        doc = {"master_seed": args.seed, "output_dir": args.out, "studies": [study]}
        return run_config(doc)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
