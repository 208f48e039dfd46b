"""Command line front end: identity suites, flow runs and reports.

Subcommands
-----------
``check-identities``
    Pointwise form identities, Gauduchon checks, discrete Demailly and
    curvature relations, degree invariance.  Exit 0 iff every row passes.
``flow``
    Integrate the heat flow for each ``--config`` and write a CSV, a JSON
    sidecar echoing the fully defaulted configuration, and checkpoints.
``report``
    Summaries, Richardson orders for dt-halving pairs and SVG line charts.

Exit codes: 0 ok, 1 configuration or input error, 2 identity failure,
3 flow abort, 4 monotonicity violation.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import bundle as bd
from . import flow as fl
from . import forms as fm
from . import stability as st
from .grid import (Grid, MetricError, SINE_PROFILE, band_limited_field, flat_metric, gauduchon_family,
                   ncomp, negative_control_metric, poisson_profile, save_field)

log = logging.getLogger("donaldson_lab")

EXIT_OK, EXIT_CONFIG, EXIT_IDENTITY, EXIT_ABORT, EXIT_MONOTONE = 0, 1, 2, 3, 4
SCHEMA_VERSION = 1
CSV_MAGIC = "# donaldson_lab flow csv v1"

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": None,
    "seed": 0,
    "grid": {"shape": [16, 16, 8, 8]},
    "metric": {"family": "gauduchon", "eps": 0.2, "profile": "sine", "rho": 0.1, "delta": 0.3},
    "bundle": {
        "degrees": [1, -1],
        "a": {"kind": "split", "strength": 0.1, "rho": 0, "amplitude": 0.1, "band": 1},
        "h": {"kind": "random", "amplitude": 0.3, "band": 2, "axes": [0, 1]},
    },
    "flow": {"dt": 1e-3, "T": 1.0, "cfl": 0.2, "scheme": "rk4", "sample_every": 10,
             "rebase": True, "rebase_threshold": 4.0, "max_halvings": 8},
    "monitor": {
        "hym_pairs": [[a, n] for a, n in fl.DEFAULT_HYM_PAIRS],
        "p_list": [1, 2, "inf"],
        "mono_rtol": 1e-8,
        "stop_on_violation": True,
        "residuals": False,
        "transport": False,
        "psi_p": 2.0,
    },
    "filtration": None,
    "output": {"dir": "runs", "checkpoint_every": 0, "checkpoint_final": True},
    "identities": {"N": 16, "n_random": 200, "n_ibp": 20, "n_degree": 10, "spectral_N": [16, 32], "band": 3,
                   "tol_pointwise": 1e-12, "tol_gauduchon": 1e-11, "tol_volume": 1e-10, "tol_ibp": 1e-10,
                   "tol_spectral": 1e-8, "min_decay": 100.0, "tol_degree": 1e-9},
}

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer"}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj({
    "schema_version": {"const": SCHEMA_VERSION},
    "name": {"type": ["string", "null"]},
    "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
    "grid": _obj({"shape": {"type": "array", "items": {"type": "integer", "minimum": 8, "multipleOf": 2},
                            "minItems": 4, "maxItems": 4}}),
    "metric": _obj({"family": {"enum": ["flat", "gauduchon", "negative-control"]},
                    "eps": {"type": "number", "minimum": 0},
                    "profile": {"enum": ["sine", "poisson"]},
                    "rho": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "delta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1}}),
    "bundle": _obj({
        "degrees": {"type": "array", "items": _INT, "minItems": 1, "maxItems": 3},
        "a": _obj({"kind": {"enum": ["split", "extension", "gauge"]}, "strength": _NUM,
                   "rho": _INT, "amplitude": _NUM, "band": {"type": "integer", "minimum": 0}}),
        "h": _obj({"kind": {"enum": ["identity", "random"]}, "amplitude": {"type": "number", "minimum": 0},
                   "band": {"type": "integer", "minimum": 0},
                   "axes": {"type": "array", "items": {"enum": [0, 1, 2, 3]}, "minItems": 1}}),
    }),
    "flow": _obj({"dt": _POS, "T": {"type": "number", "minimum": 0}, "cfl": _POS,
                  "scheme": {"enum": ["rk4", "euler"]}, "sample_every": {"type": "integer", "minimum": 1},
                  "rebase": {"type": "boolean"}, "rebase_threshold": {"type": "number", "exclusiveMinimum": 1},
                  "max_halvings": {"type": "integer", "minimum": 0}}),
    "monitor": _obj({
        "hym_pairs": {"type": "array", "items": {"type": "array", "items": [{"type": "number", "minimum": 1}, _NUM],
                                                  "minItems": 2, "maxItems": 2}},
        "p_list": {"type": "array", "items": {"enum": [1, 2, "inf"]}},
        "mono_rtol": {"type": "number", "minimum": 0},
        "stop_on_violation": {"type": "boolean"},
        "residuals": {"type": "boolean"},
        "transport": {"type": "boolean"},
        "psi_p": {"anyOf": [{"type": "number", "minimum": 1}, {"const": "inf"}]},
    }),
    "filtration": {"anyOf": [{"type": "null"}, _obj({
        "blocks": {"type": "array", "minItems": 1,
                   "items": {"type": "array", "items": [{"type": "integer", "minimum": 1}, _NUM],
                             "minItems": 2, "maxItems": 2}}}, required=["blocks"])]},
    "output": _obj({"dir": {"type": "string"}, "checkpoint_every": {"type": "integer", "minimum": 0},
                    "checkpoint_final": {"type": "boolean"}}),
    "identities": _obj({**{k: _NUM for k in DEFAULTS["identities"]},
                        "N": {"type": "integer", "minimum": 8, "multipleOf": 2},
                        "spectral_N": {"type": "array", "items": {"type": "integer", "minimum": 8, "multipleOf": 2},
                                       "minItems": 1}}),
    "result": {"type": "object"},
})


class ConfigError(ValueError):
    """Invalid configuration; the message carries the source location."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_of(text: str, path) -> int | None:
    """Best-effort line number of the key addressed by ``path`` in JSON source text."""
    pos, found = 0, None
    for key in path:
        if not isinstance(key, str):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(key)).search(text, pos)
        if m is None:
            break
        pos, found = m.end(), m.start()
    return None if found is None else text.count("\n", 0, found) + 1


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse, validate and default a JSON run configuration."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: configuration must be a JSON object")
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        e = errors[0]
        path = list(e.absolute_path)
        if e.validator == "additionalProperties":
            extra = re.findall(r"'([^']+)'", e.message)
            path = path + extra[:1]
        line = _line_of(text, path)
        where = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{source}:{line or 1}: {where}: {e.message}")
    if "schema_version" not in raw:
        raise ConfigError(f"{source}:1: schema_version is required")
    raw.pop("result", None)
    cfg = _merge(DEFAULTS, raw)
    if cfg["name"] is None:
        cfg["name"] = Path(source).stem if source != "<config>" else "run"
    _check_semantics(cfg, text, source)
    return cfg


def _check_semantics(cfg: dict, text: str, source: str) -> None:
    def fail(path, msg):
        raise ConfigError(f"{source}:{_line_of(text, path) or 1}: {'.'.join(path)}: {msg}")

    b = cfg["bundle"]
    if b["a"]["kind"] == "extension":
        deg = b["degrees"]
        if len(deg) != 2 or deg[0] <= 0 or deg[1] != -deg[0]:
            fail(["bundle", "degrees"], "extension bundles need degrees [d, -d] with d > 0")
    f = cfg["filtration"]
    if f is not None:
        if sum(r for r, _ in f["blocks"]) != len(b["degrees"]):
            fail(["filtration", "blocks"], "block ranks must add up to the bundle rank")
        try:
            st.hn_type(f["blocks"])
        except st.StabilityError as exc:
            fail(["filtration", "blocks"], str(exc))
    if cfg["monitor"]["transport"] and cfg["flow"]["rebase"]:
        log.info("transport monitoring disables rebasing")
        cfg["flow"]["rebase"] = False


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}:0: cannot read configuration: {exc.strerror}") from None
    return parse_config(text, path)


# ---------------------------------------------------------------------------
# object construction
# ---------------------------------------------------------------------------

def build_metric(cfg: dict, grid: Grid):
    mc = cfg["metric"]
    profile = SINE_PROFILE if mc["profile"] == "sine" else poisson_profile(mc["rho"])
    if mc["family"] == "flat" or (mc["family"] == "gauduchon" and mc["eps"] == 0):
        return flat_metric(grid)
    if mc["family"] == "gauduchon":
        return gauduchon_family(mc["eps"], grid, profile)
    return negative_control_metric(mc["eps"], grid, mc["delta"], profile)


def build_bundle(cfg: dict, grid: Grid, rng) -> bd.BundleState:
    bc = cfg["bundle"]
    deg = tuple(bc["degrees"])
    hc, ac = bc["h"], bc["a"]
    h = None
    if hc["kind"] == "random":
        h = bd.random_metric(grid, deg, rng, hc["amplitude"], axes=tuple(hc["axes"]), band=hc["band"])
    if ac["kind"] == "split":
        b = bd.split_bundle(grid, deg, h)
    elif ac["kind"] == "extension":
        b = bd.extension_bundle(grid, deg[0], ac["strength"], ac["rho"])
        if h is not None:
            b = b.with_h(h)
    else:
        w = bd.random_gauge(grid, deg, rng, ac["amplitude"], axes=tuple(hc["axes"]), band=ac["band"])
        b = bd.gauge_integrable_bundle(grid, deg, w, h)
    return b


def build_filtration(cfg: dict, m) -> st.FiltrationSpec | None:
    f = cfg["filtration"]
    if f is None:
        return None
    unit = bd.degree_unit(m)
    return st.FiltrationSpec([(r, s * unit) for r, s in f["blocks"]])


def hym_floor(cfg: dict, m, filt: st.FiltrationSpec | None, mu: float) -> float:
    """Lower bound of ``HYM_{2,0}``: the declared type, else the semistable type."""
    if filt is not None:
        return st.hym_of_type(filt.type.mu, 2.0, 0.0)
    return st.hym_of_type([mu] * len(cfg["bundle"]["degrees"]), 2.0, 0.0)


def _p_value(p):
    return math.inf if p == "inf" else float(p)


# ---------------------------------------------------------------------------
# identity suite
# ---------------------------------------------------------------------------

@dataclass
class IdentityRow:
    name: str
    residual: float
    threshold: float
    passed: bool
    note: str = ""


def _random_form(n: int, k: int, rng, real: bool = False) -> fm.PointForm:
    return fm.PointForm.random(n, rng, degrees=[k], real=real)


def pointwise_suite(rng, n_random: int = 200, tol: float = 1e-12) -> list[IdentityRow]:
    """Scaled residuals ``|lhs - rhs| / (1 + |inputs|)`` of the pointwise identities."""
    worst = {"surface": 0.0, "general": 0.0, "star": 0.0, "vanishing": 0.0}
    for _ in range(n_random):
        m = fm.PointMetric.random(2, rng)
        a = _random_form(2, 2, rng)
        dw = _random_form(2, 3, rng, real=True)
        lhs = fm.torsion_adjoint(a, m, fm.TorsionData(dw))
        lam = complex(fm.contract_Lambda(a, m).coeffs[0])
        dstar = -1.0 * fm.hodge_star(dw, m)
        rhs = -lam * dstar
        scale = 1 + a.coefficient_norm() + dw.coefficient_norm()
        worst["surface"] = max(worst["surface"], (lhs - rhs).coefficient_norm() / scale)
    for n in (2, 3):
        for _ in range(n_random):
            m = fm.PointMetric.random(n, rng)
            a = _random_form(n, 2, rng)
            dw = _random_form(n, 3, rng, real=True)
            t = fm.TorsionData.from_d_omega(dw, m)
            r = fm.torsion_adjoint(a, m, t) - fm.general_torsion_formula(a, m, t)
            worst["general"] = max(worst["general"], r.coefficient_norm() / (1 + a.coefficient_norm() + dw.coefficient_norm()))
    for n in (1, 2, 3):
        for k in range(n + 1):
            for j in range(n - k + 1):
                for _ in range(5):
                    m = fm.PointMetric.random(n, rng)
                    a = fm.primitive_projection(_random_form(n, k, rng), m)
                    r = fm.star_primitive_identity_check(a, j, m)
                    worst["star"] = max(worst["star"], r / (1 + a.coefficient_norm()))
    for _ in range(n_random):
        m = fm.PointMetric.random(3, rng)
        a = _random_form(3, 2, rng)
        t = fm.TorsionData.from_d_omega(fm.PointForm.zero(3), m)
        out = fm.general_torsion_formula(a, m, t)
        out2 = fm.torsion_adjoint(a, m, t)
        worst["vanishing"] = max(worst["vanishing"], (out.coefficient_norm() + out2.coefficient_norm()) / (1 + a.coefficient_norm()))
    names = {"surface": "surface torsion identity (n=2)", "general": "general torsion formula (n=2,3)",
             "star": "star of L^j on primitive forms", "vanishing": "torsion vanishing, n=3 balanced case"}
    return [IdentityRow(names[k], v, tol, v <= tol) for k, v in worst.items()]


def gauduchon_suite(cfg: dict, rng) -> list[IdentityRow]:
    ic = cfg["identities"]
    grid = Grid.uniform(int(ic["N"]))
    m = build_metric(cfg, grid)
    rows = [IdentityRow("del dbar omega", m.gauduchon_residual(), ic["tol_gauduchon"],
                        m.gauduchon_residual() <= ic["tol_gauduchon"])]
    vol_err = abs(m.total_volume() - 2 * np.pi)
    rows.append(IdentityRow("volume - 2 pi", vol_err, ic["tol_volume"], vol_err <= ic["tol_volume"]))
    worst = 0.0
    for _ in range(int(ic["n_ibp"])):
        f = band_limited_field(grid, rng, 3)
        worst = max(worst, m.gauduchon_ibp_check(f))
    rows.append(IdentityRow("del* omega perpendicular to dbar f", worst, ic["tol_ibp"], worst <= ic["tol_ibp"]))
    eps = cfg["metric"]["eps"]
    if eps > 0:
        dw = m.l2_norm(m.d_omega, 3)
        rows.append(IdentityRow("|d omega| >= 0.05 eps (non-Kahler)", dw, 0.05 * eps, dw >= 0.05 * eps,
                                "lower bound"))
    return rows


def demailly_series(cfg: dict, Ns, rng_seed: int, band: int = 3, degrees=(1, 2, 3)) -> list[float]:
    """Max over degrees of the Demailly residual for the same band-limited data at each N."""
    out = []
    for N in Ns:
        grid = Grid.uniform(N)
        m = build_metric(cfg, grid)
        worst = 0.0
        for k in degrees:
            rng = np.random.default_rng(rng_seed + k)
            a = band_limited_field(grid, rng, band, extra_shape=(ncomp(k),))
            worst = max(worst, m.demailly_residual(a, k))
        out.append(worst)
    return out


def curvature_relation_series(cfg: dict, Ns, rng_seed: int, degrees=(1, -1), amplitude: float = 0.05,
                              band: int = 1, axes=(0, 1, 2)) -> list[float]:
    """Curvature relation residual for one smooth integrable connection at each N."""
    out = []
    for N in Ns:
        grid = Grid.uniform(N)
        m = build_metric(cfg, grid)
        rng = np.random.default_rng(rng_seed)
        w = bd.random_gauge(grid, degrees, rng, amplitude, axes=axes, band=band)
        rng_h = np.random.default_rng(rng_seed + 1)
        h = bd.random_metric(grid, degrees, rng_h, amplitude, axes=axes, band=band)
        b = bd.gauge_integrable_bundle(grid, degrees, w, h)
        D = bd.chern_connection(b, grid)
        out.append(bd.curvature_relation_residual(D, grid, m))
    return out


def spectral_row(name: str, series, Ns, tol: float, min_decay: float) -> IdentityRow:
    fine = series[-1]
    decay = series[0] / fine if fine > 0 else math.inf
    ok = fine <= tol and (len(series) < 2 or decay >= min_decay or series[0] <= tol * 1e-3)
    note = " ".join(f"N={N}:{r:.2e}" for N, r in zip(Ns, series))
    return IdentityRow(name, fine, tol, ok, note)


def degree_invariance(cfg: dict, rng, n_metrics: int = 10) -> tuple[float, float]:
    """``(max |deg(h) - deg(1)|, distance of deg/unit to an integer)`` over random metrics.

    The bundle follows the configured a-recipe; metrics vary along all four axes.
    """
    grid = Grid.uniform(int(cfg["identities"]["N"]))
    m = build_metric(cfg, grid)
    deg = tuple(cfg["bundle"]["degrees"])
    ident = copy.deepcopy(cfg)
    ident["bundle"]["h"]["kind"] = "identity"
    b0 = build_bundle(ident, grid, rng)
    d0 = bd.degree(b0, grid, m)
    drift = 0.0
    for _ in range(n_metrics):
        h = bd.random_metric(grid, deg, rng, 0.3, axes=(0, 1, 2, 3), band=2)
        drift = max(drift, abs(bd.degree(b0.with_h(h), grid, m) - d0))
    ratio = d0 / bd.degree_unit(m)
    return drift, abs(ratio - round(ratio))


def identity_suite(cfg: dict) -> list[IdentityRow]:
    ic = cfg["identities"]
    seed = int(cfg["seed"])
    rng = np.random.default_rng(seed)
    rows = pointwise_suite(rng, int(ic["n_random"]), ic["tol_pointwise"])
    rows += gauduchon_suite(cfg, rng)
    Ns = [int(n) for n in ic["spectral_N"]]
    rows.append(spectral_row("Demailly commutation relation", demailly_series(cfg, Ns, seed, int(ic["band"])), Ns,
                             ic["tol_spectral"], ic["min_decay"]))
    rows.append(spectral_row("curvature relation", curvature_relation_series(cfg, Ns, seed), Ns,
                             ic["tol_spectral"], ic["min_decay"]))
    drift, frac = degree_invariance(cfg, rng, int(ic["n_degree"]))
    rows.append(IdentityRow("degree invariance under h", drift, ic["tol_degree"], drift <= ic["tol_degree"]))
    rows.append(IdentityRow("degree / unit is an integer", frac, ic["tol_degree"], frac <= ic["tol_degree"]))
    return rows


def format_rows(rows) -> str:
    width = max(len(r.name) for r in rows)
    lines = [f"{'identity':<{width}}  {'residual':>10}  {'threshold':>10}  result"]
    for r in rows:
        lines.append(f"{r.name:<{width}}  {r.residual:10.3e}  {r.threshold:10.3e}  {'PASS' if r.passed else 'FAIL'}"
                     + (f"  {r.note}" if r.note else ""))
    return "\n".join(lines)


def cmd_check_identities(cfg: dict) -> int:
    rows = identity_suite(cfg)
    print(f"[{cfg['name']}] metric={cfg['metric']['family']} eps={cfg['metric']['eps']}")
    print(format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_IDENTITY


# ---------------------------------------------------------------------------
# flow runs
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    return "nan" if v is None else f"{float(v):.17g}"


def _checkpoint(out: Path, name: str, s: fl.FlowState, tag: str) -> list[str]:
    meta = {"t": s.t, "step": s.steps, "degrees": list(s.bundle.degrees), "mu": s.mu,
            "logdet_offset": s.logdet_offset}
    paths = []
    for field_name, arr in (("h", s.bundle.h), ("a", s.bundle.a)):
        p = out / f"{name}_{field_name}_{tag}.bin"
        save_field(p, arr, {**meta, "field": field_name})
        paths.append(p.name)
    return paths


def run_config(cfg: dict) -> dict:
    """Run one flow configuration; returns the sidecar ``result`` section."""
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    name = cfg["name"]
    rng = np.random.default_rng(int(cfg["seed"]))
    grid = Grid(tuple(cfg["grid"]["shape"]))
    m = build_metric(cfg, grid)
    b = build_bundle(cfg, grid, rng)
    s = fl.FlowState.initial(b, grid, m)
    filt = build_filtration(cfg, m)
    floor = hym_floor(cfg, m, filt, s.mu)
    fc, mc = cfg["flow"], cfg["monitor"]
    fcfg = fl.FlowConfig(dt=fc["dt"], T=fc["T"], cfl=fc["cfl"], scheme=fc["scheme"], sample_every=fc["sample_every"],
                         hym_pairs=tuple((float(a), float(n)) for a, n in mc["hym_pairs"]),
                         p_list=tuple(_p_value(p) for p in mc["p_list"]), rebase=fc["rebase"],
                         rebase_threshold=fc["rebase_threshold"], max_halvings=fc["max_halvings"],
                         mono_rtol=mc["mono_rtol"], psi_p=_p_value(mc["psi_p"]))
    p_fields = {1.0: "lf_l1", 2.0: "lf_l2", math.inf: "lf_linf"}
    mono_fields = tuple(p_fields[p] for p in fcfg.p_list) + ("f_l2_sq",)
    result = {"status": "ok", "exit_code": EXIT_OK, "mu": s.mu, "degree_unit": bd.degree_unit(m),
              "hym_floor": floor, "first_violation": None, "violations": 0, "checkpoints": []}

    tstate = {}
    if mc["transport"]:
        tstate["tr"] = fl.GaugeTransport.start(s)
        tstate["D"] = tstate["tr"].connection(s)
        tstate["res"], tstate["integ"] = math.nan, math.nan

    def on_step(prev, cur):
        if mc["transport"]:
            tr1 = tstate["tr"].step(prev, cur)
            D1 = tr1.connection(cur)
            tstate["res"] = fl.connection_flow_residual(tstate["D"].A, tstate["D"], D1.A, cur.t - prev.t, grid, m)
            tstate["integ"] = bd.connection_integrability_residual(D1, grid, m)
            tstate["tr"], tstate["D"] = tr1, D1

    history = []
    ck_every = cfg["output"]["checkpoint_every"]

    def on_sample(sample, state):
        sample.extra["hym_gap"] = sample.hym_value(2.0, 0.0) - floor if (2.0, 0.0) in sample.hym else math.nan
        if mc["transport"]:
            sample.extra["transport_res"] = tstate["res"]
            sample.extra["transport_integ"] = tstate["integ"]
        if history:
            viol = fl.monotonicity_violations([history[-1], sample], mono_fields, True, fcfg.mono_rtol)
            if viol:
                result["violations"] += len(viol)
                if result["first_violation"] is None:
                    t, field_name, inc = viol[0]
                    result["first_violation"] = {"t": t, "field": field_name, "increase": inc}
                    log.error("%s: monotonicity violated at t=%.6g (%s grew by %.3e)", name, t, field_name, inc)
                if mc["stop_on_violation"]:
                    history.append(sample)
                    raise fl.StopRun(f"monotonicity violation at t={viol[0][0]:.6g}")
        history.append(sample)
        if ck_every and len(history) % ck_every == 0:
            result["checkpoints"] += _checkpoint(out, name, state, f"s{state.steps:08d}")

    final = None
    try:
        run = fl.run_flow(s, fcfg, filt, on_sample=on_sample, residuals=mc["residuals"], on_step=on_step)
        final = run.state
        result["trlogh_drift"] = run.extra["trlogh_drift"]
        result["halvings"] = run.extra["halvings"]
    except fl.FlowAbort as exc:
        log.error("%s: flow aborted: %s", name, exc)
        result.update(status="abort", exit_code=EXIT_ABORT, message=str(exc))
    if result["first_violation"] is not None and result["exit_code"] == EXIT_OK:
        result.update(status="monotonicity_violation", exit_code=EXIT_MONOTONE)
    if final is not None and cfg["output"]["checkpoint_final"]:
        result["checkpoints"] += _checkpoint(out, name, final, "final")
    if history:
        result["final"] = dict(zip(history[-1].columns(), map(float, history[-1].row())))
    write_csv(out / f"{name}.csv", history, cfg)
    sidecar = {**cfg, "result": result}
    (out / f"{name}.json").write_text(json.dumps(sidecar, indent=2, default=_json_default) + "\n")
    return result


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


def write_csv(path: Path, history, cfg: dict) -> None:
    cols = history[0].columns() if history else ["t"]
    with open(path, "w", newline="") as fh:
        fh.write(f"{CSV_MAGIC}; name={cfg['name']}; columns: {', '.join(cols)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for smp in history:
            w.writerow([_fmt(v) for v in smp.row()])


def _run_one(cfg: dict) -> int:
    t0 = time.perf_counter()
    result = run_config(cfg)
    log.info("%s: %s in %.1f s", cfg["name"], result["status"], time.perf_counter() - t0)
    fv = result["first_violation"]
    msg = f"{cfg['name']}: {result['status']}"
    if fv is not None:
        msg += f" (first violation t={fv['t']:.6g} in {fv['field']})"
    print(msg)
    return result["exit_code"]


def cmd_flow(configs: list[dict], jobs: int = 1) -> int:
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            codes = list(ex.map(_run_one, configs))
    else:
        codes = [_run_one(c) for c in configs]
    return max(codes, default=EXIT_OK)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

RESIDUAL_COLUMNS = ("energy_res", "bochner_res", "transport_res")


class InputError(ValueError):
    pass


def read_csv(path) -> tuple[list[str], np.ndarray]:
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#") and ln.strip()]
    except OSError as exc:
        raise InputError(f"{path}: cannot read: {exc.strerror}") from None
    if len(lines) < 2:
        raise InputError(f"{path}: no samples")
    rows = list(csv.reader(lines))
    cols = rows[0]
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]])
    except ValueError as exc:
        raise InputError(f"{path}: malformed row: {exc}") from None
    if data.shape[1] != len(cols):
        raise InputError(f"{path}: column count mismatch")
    return cols, data


def _sidecar(path: Path) -> dict:
    side = path.with_suffix(".json")
    if side.exists():
        try:
            return json.loads(side.read_text())
        except json.JSONDecodeError:
            log.warning("%s: unreadable sidecar ignored", side)
    return {}


def monotone_verdict(cols, data, rtol: float = 1e-8) -> tuple[bool, float | None]:
    names = [c for c in cols if c in fl.MONOTONE_FIELDS or c.startswith("hym_a")]
    first = None
    for c in names:
        x = data[:, cols.index(c)]
        bad = np.nonzero(x[1:] > x[:-1] + rtol * (1 + np.abs(x[:-1])))[0]
        if bad.size:
            t = data[bad[0] + 1, 0]
            first = t if first is None else min(first, t)
    return first is None, first


def richardson(a: tuple, b: tuple, column: str) -> dict | None:
    """Ratio and order of ``column`` between a coarse run ``a`` and a run ``b`` with half the step.

    Compared at the last sample time common to both runs with finite values.
    """
    (ca, da), (cb, db) = a, b
    if column not in ca or column not in cb:
        return None
    ta = {round(t, 9): i for i, t in enumerate(da[:, 0])}
    common = [(ta[round(t, 9)], j) for j, t in enumerate(db[:, 0]) if round(t, 9) in ta]
    xa, xb = da[:, ca.index(column)], db[:, cb.index(column)]
    common = [(i, j) for i, j in common if np.isfinite(xa[i]) and np.isfinite(xb[j]) and xb[j] > 0 and da[i, 0] > 0]
    if not common:
        return None
    i, j = common[-1]
    ratio = xa[i] / xb[j]
    return {"column": column, "t": float(da[i, 0]), "ratio": float(ratio), "order": float(np.log2(ratio))}


def _plot(path: Path, cols, data, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    t = data[:, 0]
    for c in ("lf_l2", "f_l2_sq", "hym_gap", "he_residual", "psi_residual"):
        if c in cols:
            y = np.abs(data[:, cols.index(c)])
            if np.any(y > 0):
                ax.semilogy(t, np.where(y > 0, y, np.nan), label=c)
    ax.set_xlabel("t")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_report(paths, out_dir: str | None = None) -> int:
    if not paths:
        print("report: no CSV files given", file=sys.stderr)
        return EXIT_CONFIG
    runs = []
    for p in paths:
        p = Path(p)
        try:
            cols, data = read_csv(p)
        except InputError as exc:
            print(f"report: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        runs.append((p, cols, data, _sidecar(p)))
    out = Path(out_dir) if out_dir else runs[0][0].parent
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{'run':<24} {'t_final':>9} {'lf_l2':>11} {'hym_gap':>11} {'gap/gap0':>10} {'monotone':>9}"]
    for p, cols, data, side in runs:
        ok, first = monotone_verdict(cols, data)
        gap = data[:, cols.index("hym_gap")] if "hym_gap" in cols else None
        rel = gap[-1] / gap[0] if gap is not None and gap[0] != 0 else math.nan
        lines.append(f"{p.stem:<24} {data[-1, 0]:9.4g} {data[-1, cols.index('lf_l2')]:11.4e} "
                     f"{(gap[-1] if gap is not None else math.nan):11.4e} {rel:10.3e} "
                     f"{'yes' if ok else f'no@{first:.4g}':>9}")
        _plot(out / f"{p.stem}.svg", cols, data, p.stem)
    pairs = []
    for pa, ca, da, sa in runs:
        for pb, cb, db, sb in runs:
            dta, dtb = sa.get("flow", {}).get("dt"), sb.get("flow", {}).get("dt")
            if not dta or not dtb or not math.isclose(dta, 2 * dtb, rel_tol=1e-12):
                continue
            for c in RESIDUAL_COLUMNS:
                r = richardson((ca, da), (cb, db), c)
                if r is not None:
                    pairs.append((pa.stem, pb.stem, r))
    if pairs:
        lines.append("")
        lines.append(f"{'coarse':<20} {'fine':<20} {'column':<14} {'t':>8} {'ratio':>8} {'order':>7}")
        for a, b, r in pairs:
            lines.append(f"{a:<20} {b:<20} {r['column']:<14} {r['t']:8.4g} {r['ratio']:8.3f} {r['order']:7.3f}")
    text = "\n".join(lines)
    print(text)
    (out / "summary.txt").write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="donaldson-lab", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, configs=True):
        if configs:
            p.add_argument("--config", action="append", default=[], metavar="PATH",
                           help="JSON run configuration (repeatable); defaults apply when omitted")
            p.add_argument("--seed", type=int, default=None, metavar="U64", help="override the configured seed")
        p.add_argument("--jobs", type=int, default=1, metavar="N", help="independent configurations run in parallel")
        p.add_argument("--out", default=None, metavar="DIR", help="output directory")

    common(sub.add_parser("check-identities", help="run the identity suites"))
    common(sub.add_parser("flow", help="integrate the heat flow"))
    rp = sub.add_parser("report", help="summarise flow CSVs")
    rp.add_argument("csv", nargs="*", help="CSV files written by the flow subcommand")
    common(rp, configs=False)
    return ap


def _configs(args) -> list[dict]:
    cfgs = [load_config(p) for p in args.config] if args.config else [parse_config('{"schema_version": 1}')]
    for c in cfgs:
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            c["seed"] = args.seed
        if args.out is not None:
            c["output"]["dir"] = args.out
    return cfgs


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        return cmd_report(args.csv, args.out)
    try:
        cfgs = _configs(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "check-identities":
            return max(cmd_check_identities(c) for c in cfgs)
        return cmd_flow(cfgs, args.jobs)
    except (MetricError, bd.BundleError, st.StabilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
