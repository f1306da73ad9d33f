"""Command-line front end: model files, command dispatch and JSON/CSV output.

Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .apps import BilateralMarket, DefaultableClaim, ExpMarket, invest_bilateral, price_defaultable_claim
from .decompose import extract_policy, solve_ordered, solve_two_unordered
from .density import (
    DensityFamily,
    exponential_pmf,
    independent_product,
    pmf_density,
    poisson_density,
)
from .model import (
    TWO_NAMES,
    ControlProblemSpec,
    ControlSet,
    FiniteTree,
    GOptionalTuple,
    MarkSpace,
    MonteCarloRegression,
    NumericalError,
    RegimeSpec,
    StateGrid,
    TimeGrid,
    ordered_layout,
)
from .oracle import BudgetExceeded, DiscreteModel, compare
from .projection import expectation_functional, project_optional_backward
from .sim import simulate_paths

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUT_ENV = "GDECOMP_OUT"
COMMANDS = ("project", "expect", "value", "verify-oracle", "price-claim", "invest-bilateral", "simulate")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class ModelError(ValueError):
    """Model file failed validation."""


# ---------------------------------------------------------------------------
# schema

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

_FORM = {
    "oneOf": [
        _NUM,
        {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "form": {"enum": ["affine", "table", "utility"]},
                **{k: _NUM for k in ("const", "x", "a", "ax", "a2", "t", "theta", "e", "ae", "p")},
                "values": {"type": "array", "items": _NUM, "minItems": 1},
                "kind": {"enum": ["exp", "power", "log"]},
            },
        },
    ]
}

_TFORM = {
    "oneOf": [
        _NUM,
        {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _NUM for k in ("const", "t", "theta", "e", "w")},
        },
    ]
}

_CONTROLS = {
    "oneOf": [
        {"type": "object", "additionalProperties": False, "required": ["finite"],
         "properties": {"finite": {"type": "array", "minItems": 1, "items": {"oneOf": [_NUM, _PAIR]}}}},
        {"type": "object", "additionalProperties": False, "required": ["interval"], "properties": {"interval": _PAIR}},
        {"type": "object", "additionalProperties": False, "required": ["box"],
         "properties": {"box": {"type": "array", "items": _PAIR, "minItems": 2, "maxItems": 2}}},
        {"type": "object", "additionalProperties": False, "required": ["unconstrained"],
         "properties": {"unconstrained": {"type": "integer", "minimum": 1, "maximum": 2}}},
    ]
}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


SCHEMA = _obj(
    {
        "schema_version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "grid": _obj({"T": {"type": "number", "exclusiveMinimum": 0}, "N": {"type": "integer", "minimum": 1}},
                     ["T", "N"]),
        "marks": _obj({"points": {"type": "array", "minItems": 1, "items": {"oneOf": [_NUM, {"type": "array", "items": _NUM}]}},
                       "weights": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                       "pmf": {"type": "boolean"}}, ["points", "weights"]),
        "backend": _obj({"kind": {"enum": ["trivial", "binomial", "branching", "mc_regression"]},
                         "dims": {"type": "integer", "minimum": 1, "maximum": 2},
                         "probs": {"type": "array", "items": _NUM, "minItems": 1},
                         "increments": {"type": "array", "items": _NUM, "minItems": 1},
                         "paths": {"type": "integer", "minimum": 1},
                         "degree": {"type": "integer", "minimum": 0},
                         "seed": {"type": "integer", "minimum": 0}}, ["kind"]),
        "density": _obj({"builder": {"enum": ["poisson", "pmf_entries", "independent", "tables"]},
                         "rule": {"enum": ["pmf", "left", "trapezoid", "gregory"]},
                         "layout": {"enum": ["ordered", "two_names"]},
                         "n": {"type": "integer", "minimum": 1, "maximum": 3},
                         "rate": {"type": "number", "exclusiveMinimum": 0},
                         "rates": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                         "entries": {"type": "array", "minItems": 1, "items": _obj(
                             {"theta": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                              "marks": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                              "mass": {"type": "number", "minimum": 0}}, ["theta", "mass"])},
                         "tables": {"type": "array"}}, ["builder"]),
        "problem": _obj({"x0": _NUM,
                         "state_grid": _obj({"lo": _NUM, "hi": _NUM, "size": {"type": "integer", "minimum": 1}},
                                            ["lo", "hi", "size"]),
                         "time_rule": {"enum": ["left", "trapezoid"]},
                         "tol": {"type": "number", "exclusiveMinimum": 0},
                         "signed_gains": {"type": "boolean"},
                         "regimes": {"type": "object", "additionalProperties": _obj(
                             {"drift": _FORM, "vol": _FORM, "running_gain": _FORM, "terminal_gain": _FORM,
                              "controls": _CONTROLS})},
                         "jumps": {"type": "object", "additionalProperties": _FORM}},
                        ["state_grid", "regimes"]),
        "expect": _obj({"Y": {"type": "object", "additionalProperties": _TFORM},
                        "Z": {"type": "object", "additionalProperties": _TFORM},
                        "time_rule": {"enum": ["left", "trapezoid"]},
                        "predictable": {"type": "boolean"}}),
        "project": _obj({"Y": {"type": "object", "additionalProperties": _TFORM},
                         "t": {"type": "number", "minimum": 0},
                         "predictable": {"type": "boolean"}}, ["t"]),
        "pricing": _obj({"p": {"type": "number", "exclusiveMinimum": 0},
                         **{k: _NUM for k in ("b0", "sigma0", "b1", "sigma1", "H0")},
                         "H1": _TFORM, "A0": _CONTROLS, "A1": _CONTROLS,
                         "scheme": {"enum": ["exp", "value", "discrete"]},
                         "form": {"enum": ["derived", "printed"]}}, ["p", "A0"]),
        "bilateral": _obj({"p": _NUM, "b0": _PAIR, "sigma0": _PAIR,
                           **{k: _NUM for k in ("b21", "sigma21", "b12", "sigma12", "e21", "e12")},
                           "x": {"type": "number", "exclusiveMinimum": 0},
                           "A0": _CONTROLS, "A11": _CONTROLS, "A12": _CONTROLS}, ["p", "A0", "A11", "A12"]),
        "simulate": _obj({"paths": {"type": "integer", "minimum": 1},
                          "noise": {"enum": ["auto", "tree", "gaussian"]},
                          "policy": {"enum": ["optimal", "first"]}}),
    },
    ["grid", "density"],
)

_SECTION_DEFAULTS = {
    "marks": {"points": [0.0], "weights": [1.0], "pmf": True},
    "backend": {"kind": "trivial", "dims": 1},
}


@dataclass(frozen=True)
class ModelFile:
    """Validated, normalized model file (one dict per section)."""

    schema_version: int
    seed: int
    grid: dict
    marks: dict
    backend: dict
    density: dict
    problem: dict | None = None
    expect: dict | None = None
    project: dict | None = None
    pricing: dict | None = None
    bilateral: dict | None = None
    simulate: dict | None = None

    def to_dict(self) -> dict:
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelFile":
        doc = normalize(doc)
        return cls(**{f.name: doc.get(f.name) for f in fields(cls)})


def first_violation(doc) -> str | None:
    """First schema violation (by path) or None."""
    v = jsonschema.Draft202012Validator(SCHEMA)
    errs = sorted(v.iter_errors(doc), key=lambda e: (len(e.absolute_path), [str(p) for p in e.absolute_path]))
    if not errs:
        return None
    e = errs[0]
    where = "/".join(str(p) for p in e.absolute_path) or "<root>"
    return f"{where}: {e.message}"


def normalize(doc: dict) -> dict:
    """Schema check plus defaults; raises ModelError."""
    if not isinstance(doc, dict):
        raise ModelError("<root>: model file must be a mapping")
    bad = first_violation(doc)
    if bad:
        raise ModelError(bad)
    out = copy.deepcopy(doc)
    out.setdefault("schema_version", SCHEMA_VERSION)
    out.setdefault("seed", 0)
    for k, d in _SECTION_DEFAULTS.items():
        sec = out.setdefault(k, {})
        for kk, vv in d.items():
            sec.setdefault(kk, copy.deepcopy(vv))
    den = out["density"]
    den.setdefault("rule", "gregory" if den["builder"] == "poisson" else "pmf")
    den.setdefault("layout", "ordered")
    den.setdefault("n", 2 if den["layout"] == "two_names" else 1)
    if "problem" in out:
        pr = out["problem"]
        pr.setdefault("x0", 0.0)
        pr.setdefault("time_rule", "left")
        pr.setdefault("tol", 1e-8)
        pr.setdefault("signed_gains", False)
        pr.setdefault("jumps", {})
    if "expect" in out:
        ex = out["expect"]
        ex.setdefault("Y", {})
        ex.setdefault("Z", {})
        ex.setdefault("time_rule", "left")
        ex.setdefault("predictable", False)
    if "project" in out:
        out["project"].setdefault("Y", {})
        out["project"].setdefault("predictable", False)
    if "pricing" in out:
        pc = out["pricing"]
        for k, v in (("b0", 0.0), ("sigma0", 1.0), ("b1", 0.0), ("sigma1", 1.0), ("H0", 0.0), ("H1", 0.0),
                     ("scheme", "exp"), ("form", "derived")):
            pc.setdefault(k, v)
        pc.setdefault("A1", copy.deepcopy(pc["A0"]))
    if "bilateral" in out:
        bl = out["bilateral"]
        for k, v in (("b0", [0.0, 0.0]), ("sigma0", [1.0, 1.0]), ("b21", 0.0), ("sigma21", 1.0), ("b12", 0.0),
                     ("sigma12", 1.0), ("e21", 0.0), ("e12", 0.0), ("x", 1.0)):
            bl.setdefault(k, v)
    if "simulate" in out:
        sm = out["simulate"]
        sm.setdefault("paths", 1000)
        sm.setdefault("noise", "auto")
        sm.setdefault("policy", "optimal")
    return out


def load_model(path) -> ModelFile:
    """Read a YAML or JSON model file and validate it."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ModelError(f"<root>: cannot parse model file: {exc}") from exc
    return ModelFile.from_dict(doc)


def dump_model(model: ModelFile, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(model.to_dict(), fh, sort_keys=True)


# ---------------------------------------------------------------------------
# builders


def _f(form: dict, k: str) -> float:
    return float(form.get(k, 0.0))


def utility(kind: str, p: float):
    if kind == "exp":
        return lambda x: -np.exp(-p * np.asarray(x, dtype=float))
    if kind == "power":
        return lambda x: np.asarray(x, dtype=float) ** p / p
    return lambda x: np.log(np.asarray(x, dtype=float))


def coef_form(form, grid: TimeGrid):
    """Callable (t, x, a, thetas, marks) for a coefficient or gain form."""
    if not isinstance(form, dict):
        c = float(form)
        return lambda t, x, a, th, mk: c + 0.0 * np.asarray(x, dtype=float)
    kind = form.get("form", "affine")
    if kind == "table":
        vals = np.asarray(form["values"], dtype=float)
        return lambda t, x, a, th, mk: vals[min(int(round(t / grid.dt)), len(vals) - 1)] + 0.0 * np.asarray(x)
    if kind == "utility":
        U = utility(form.get("kind", "exp"), _f(form, "p") or 1.0)
        return lambda t, x, a, th, mk: U(x)
    c, kx, ka, kax, ka2, kt, kth, ke = (_f(form, k) for k in ("const", "x", "a", "ax", "a2", "t", "theta", "e"))

    def fn(t, x, a, th, mk):
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        out = c + kx * x + ka * a + kax * a * x + ka2 * a * a + kt * t
        if kth:
            out = out + kth * sum(np.asarray(v, dtype=float) for v in th)
        if ke:
            out = out + ke * sum(np.asarray(v, dtype=float) for v in mk)
        return out

    return fn


def jump_form(form, grid: TimeGrid):
    """Callable (t, x, a, e): const + x*x + a*a + e*e + ae*a*e (+ ax, t terms)."""
    if not isinstance(form, dict):
        c = float(form)
        return lambda t, x, a, e: c + 0.0 * np.asarray(x, dtype=float)
    c, kx, ka, ke, kae, kax, kt = (_f(form, k) for k in ("const", "x", "a", "e", "ae", "ax", "t"))

    def fn(t, x, a, e):
        x, a, e = (np.asarray(v, dtype=float) for v in (x, a, e))
        return c + kx * x + ka * a + ke * e + kae * a * e + kax * a * x + kt * t

    return fn


def terminal_form(form, grid: TimeGrid):
    f = coef_form(form, grid)
    return lambda x, th, mk: f(grid.T, x, 0.0, th, mk)


def tuple_form(form):
    """G-optional component: const + t*t + theta*sum(thetas) + e*sum(marks) + w*W."""
    if not isinstance(form, dict):
        return float(form)
    c, kt, kth, ke, kw = (_f(form, k) for k in ("const", "t", "theta", "e", "w"))

    def fn(ctx):
        out = c + kt * ctx.t
        if kth:
            with np.errstate(invalid="ignore"):
                out = out + kth * sum(np.where(np.isfinite(v), v, 0.0) for v in ctx.thetas)
        if ke:
            out = out + ke * sum(np.asarray(v, dtype=float) for v in ctx.marks)
        if kw:
            out = out + kw * np.asarray(ctx.state)[..., 0]
        return out

    return fn


def control_set(d: dict) -> ControlSet:
    if "finite" in d:
        return ControlSet.finite(d["finite"])
    if "interval" in d:
        return ControlSet.interval(*d["interval"])
    if "box" in d:
        return ControlSet.box(d["box"][0], d["box"][1])
    return ControlSet.unconstrained(int(d["unconstrained"]))


def build_grid(m: ModelFile) -> TimeGrid:
    return TimeGrid(float(m.grid["T"]), int(m.grid["N"]))


def build_marks(m: ModelFile) -> MarkSpace:
    mk = m.marks
    return MarkSpace(tuple(mk["points"]), tuple(mk["weights"]), bool(mk.get("pmf", True)))


def build_backend(m: ModelFile, grid: TimeGrid):
    b = m.backend
    kind, dims = b["kind"], int(b.get("dims", 1))
    if kind == "trivial":
        return FiniteTree.trivial(grid.N, dims)
    if kind == "binomial":
        return FiniteTree.binomial(grid, dims)
    if kind == "branching":
        if "probs" not in b or "increments" not in b:
            raise ModelError("backend: branching trees need probs and increments")
        if len(b["probs"]) != len(b["increments"]):
            raise ModelError("backend: probs and increments differ in length")
        return FiniteTree.from_branching(grid.N, b["probs"], b["increments"])
    return MonteCarloRegression(grid, int(b.get("paths", 10_000)), int(b.get("degree", 2)),
                                int(b.get("seed", m.seed)), dims)


def build_layout(m: ModelFile):
    d = m.density
    if d["layout"] == "two_names":
        if d.get("n", 2) != 2:
            raise ModelError("density: two_names layout has n = 2")
        return TWO_NAMES
    return ordered_layout(int(d["n"]))


def build_density(m: ModelFile, grid: TimeGrid | None = None, backend=None) -> DensityFamily:
    grid = grid or build_grid(m)
    marks = build_marks(m)
    backend = backend if backend is not None else build_backend(m, grid)
    d = m.density
    lay = build_layout(m)
    n = lay.n
    rule = d["rule"]
    b = d["builder"]
    nN = backend.size(grid.N)
    if b == "poisson":
        if "rate" not in d:
            raise ModelError("density: poisson builder needs rate")
        if lay != ordered_layout(n):
            raise ModelError("density: poisson builder is ordered")
        fam = poisson_density(float(d["rate"]), n, grid, marks, rule=rule)
        if nN != 1:
            gT = np.broadcast_to(fam.gamma(grid.N), (nN,) + fam.gamma(grid.N).shape[1:]).copy()
            fam = DensityFamily(grid, marks, lay, rule, backend, gamma_T=gT, label="poisson")
        return fam
    if b == "independent":
        rates = d.get("rates")
        if not rates or len(rates) != n:
            raise ModelError("density: independent builder needs one rate per name")
        facs = []
        t = grid.nodes
        for r in rates:
            if rule == "pmf":
                phi = exponential_pmf(grid, float(r))
            else:
                phi = np.zeros(grid.N + 2)
                phi[: grid.N + 1] = r * np.exp(-r * t)
                phi[-1] = math.exp(-r * grid.T)
            facs.append((phi, np.ones(marks.M)))
        fam = independent_product(grid, marks, facs, rule, backend)
        if lay != fam.layout:
            fam = DensityFamily(grid, marks, lay, rule, backend, gamma_T=fam.gamma(grid.N), label="independent")
        return fam
    if b == "pmf_entries":
        if rule != "pmf":
            raise ModelError("density: pmf_entries needs the pmf rule")
        arr = np.zeros((grid.N + 2, marks.M) * n)
        for ent in d["entries"]:
            th = ent["theta"]
            mk = ent.get("marks", [0] * n)
            if len(th) != n or len(mk) != n:
                raise ModelError("density: entry length differs from n")
            if any(v > grid.N + 1 for v in th) or any(v >= marks.M for v in mk):
                raise ModelError("density: entry index out of range")
            arr[tuple(v for pair in zip(th, mk) for v in pair)] += float(ent["mass"])
        masses = np.broadcast_to(arr, (nN,) + arr.shape).copy()
        return pmf_density(grid, marks, masses, lay, backend)
    tables = np.asarray(d.get("tables"), dtype=float)
    expect = (nN,) + (grid.N + 2, marks.M) * n
    if tables.shape != expect:
        raise ModelError(f"density: tables shape {tables.shape} != {expect}")
    if rule == "pmf":
        return pmf_density(grid, marks, tables, lay, backend)
    return DensityFamily(grid, marks, lay, rule, backend, gamma_T=tables, label="tables")


def build_problem(m: ModelFile, grid: TimeGrid, lay) -> tuple[ControlProblemSpec, StateGrid]:
    if m.problem is None:
        raise ModelError("problem: section required for this command")
    p = m.problem
    labels = set(lay.labels())
    if set(p["regimes"]) != labels:
        raise ModelError(f"problem/regimes: labels {sorted(p['regimes'])} != {sorted(labels)}")
    regs = {}
    for lab, r in p["regimes"].items():
        regs[lab] = RegimeSpec(
            drift=coef_form(r.get("drift", 0.0), grid),
            vol=coef_form(r.get("vol", 0.0), grid),
            running_gain=coef_form(r.get("running_gain", 0.0), grid),
            terminal_gain=terminal_form(r.get("terminal_gain", 0.0), grid),
            controls=control_set(r.get("controls", {"finite": [0.0]})),
        )
    jl = set(lay.jump_labels())
    extra = set(p["jumps"]) - jl
    if extra:
        raise ModelError(f"problem/jumps: unknown jump labels {sorted(extra)}")
    jumps = {lab: jump_form(p["jumps"].get(lab, {"x": 1.0}), grid) for lab in jl}
    sgd = p["state_grid"]
    sg = StateGrid(float(sgd["lo"]), float(sgd["hi"]), int(sgd["size"]))
    spec = ControlProblemSpec(grid, lay, regs, jumps, float(p["x0"]), bool(p["signed_gains"]))
    return spec, sg


def build_tuple(block: dict, lay, predictable: bool = False) -> GOptionalTuple:
    comps = {lab: tuple_form(block.get(lab, 0.0)) for lab in lay.labels()}
    extra = set(block) - set(lay.labels())
    if extra:
        raise ModelError(f"unknown regime labels {sorted(extra)}")
    return GOptionalTuple(comps, predictable)


# ---------------------------------------------------------------------------
# commands


class Context:
    """Resolved model plus flag overrides."""

    def __init__(self, model: ModelFile, args):
        self.model = model
        self.args = args
        self.seed = args.seed if args.seed is not None else model.seed
        g = build_grid(model)
        if args.grid_N is not None:
            if model.density["builder"] in ("pmf_entries", "tables"):
                raise ModelError("--grid-N: explicit density tables are tied to the file's grid")
            g = TimeGrid(g.T, int(args.grid_N))
        self.grid = g
        mdl = model
        if args.seed is not None and model.backend["kind"] == "mc_regression":
            be = dict(model.backend, seed=self.seed)
            mdl = ModelFile.from_dict(dict(model.to_dict(), backend=be))
        self.backend = build_backend(mdl, g)
        self.family = build_density(mdl, g, self.backend)
        bad = self.family.validate()
        if bad:
            raise ModelError("density: " + bad[0])

    def echo(self) -> dict:
        cfg = self.model.to_dict()
        # thread count is left out: outputs must not depend on it
        cfg["resolved"] = {"seed": self.seed, "grid_N": self.grid.N, "tolerance": self.args.tolerance}
        return cfg


def cmd_project(ctx: Context):
    m = ctx.model
    if m.project is None:
        raise ModelError("project: section required")
    Y = build_tuple(m.project["Y"], ctx.family.layout, m.project["predictable"])
    res = project_optional_backward(Y, ctx.family, float(m.project["t"]))
    out = {"t": res.t, "level": res.level, "projection": res.value.tolist()}
    rows = [["node", "projection"]] + [[j, float(v)] for j, v in enumerate(res.value)]
    return out, {"projection.csv": rows}


def cmd_expect(ctx: Context):
    m = ctx.model
    if m.expect is None:
        raise ModelError("expect: section required")
    lay = ctx.family.layout
    Y = build_tuple(m.expect["Y"], lay, m.expect["predictable"])
    Z = build_tuple(m.expect["Z"], lay)
    led = expectation_functional(Y, Z, ctx.family, time_rule=m.expect["time_rule"])
    rows = [["level", "node", "layer0"]]
    for i, arr in enumerate(led.layers[lay.label(())]):
        for j, v in enumerate(np.asarray(arr).reshape(-1)):
            rows.append([i, j, float(v)])
    return {"J0": led.J0, "time_rule": led.time_rule}, {"layer0.csv": rows}


def _solve(ctx: Context):
    spec, sg = build_problem(ctx.model, ctx.grid, ctx.family.layout)
    solver = solve_ordered if ctx.family.ordered else solve_two_unordered
    tol = ctx.args.tolerance if ctx.args.tolerance is not None else ctx.model.problem["tol"]
    vf = solver(spec, ctx.family, state_grid=sg, time_rule=ctx.model.problem["time_rule"], tol=tol)
    return spec, sg, vf


def cmd_value(ctx: Context):
    spec, sg, vf = _solve(ctx)
    rows = [["x", "V0"]] + [[float(x), float(v)] for x, v in zip(sg.nodes, vf.V0)]
    out = {"v0": vf.v0, "x0": spec.x0, "clamped": int(vf.clamped)}
    return out, {"value.csv": rows}


def cmd_verify(ctx: Context):
    spec, sg = build_problem(ctx.model, ctx.grid, ctx.family.layout)
    tol = ctx.args.tolerance if ctx.args.tolerance is not None else 1e-10
    rep = compare(DiscreteModel(spec, ctx.family, sg), tol=tol)
    if rep.flags:
        raise ModelError("; ".join(rep.flags))
    return rep.to_dict(), {}


def cmd_price(ctx: Context):
    pc = ctx.model.pricing
    if pc is None:
        raise ModelError("pricing: section required")
    h1 = pc["H1"]
    if isinstance(h1, dict):
        c, kt, ke = _f(h1, "const"), _f(h1, "theta"), _f(h1, "e")
        H1 = lambda st, t, e: c + kt * t + ke * e  # noqa: E731
    else:
        H1 = float(h1)
    mk = ExpMarket(pc["b0"], pc["sigma0"], pc["b1"], pc["sigma1"])
    res = price_defaultable_claim(mk, DefaultableClaim(float(pc["H0"]), H1), ctx.family, float(pc["p"]),
                                  control_set(pc["A0"]), control_set(pc["A1"]), pc["scheme"], pc["form"])
    return res.to_dict(), {}


def cmd_bilateral(ctx: Context):
    bl = ctx.model.bilateral
    if bl is None:
        raise ModelError("bilateral: section required")
    mk = BilateralMarket(tuple(bl["b0"]), tuple(bl["sigma0"]), bl["b21"], bl["sigma21"], bl["b12"], bl["sigma12"],
                         bl["e21"], bl["e12"])
    res = invest_bilateral(mk, ctx.family, float(bl["p"]), control_set(bl["A0"]), control_set(bl["A11"]),
                           control_set(bl["A12"]), float(bl["x"]))
    return res.to_dict(), {}


def cmd_simulate(ctx: Context):
    sm = ctx.model.simulate or normalize({"grid": ctx.model.grid, "density": ctx.model.density,
                                          "simulate": {}})["simulate"]
    spec, sg = build_problem(ctx.model, ctx.grid, ctx.family.layout)
    policy = None
    if sm["policy"] == "optimal":
        _, _, vf = _solve(ctx)
        policy = extract_policy(vf)
    pb = simulate_paths(spec, ctx.family, int(sm["paths"]), ctx.seed, policy, sm["noise"],
                        ctx.model.problem["time_rule"], threads=max(1, ctx.args.threads or 1))
    g = pb.gains
    out = {"paths": pb.n_paths, "mean_gain": float(g.mean()),
           "std_error": float(g.std(ddof=1) / math.sqrt(len(g))) if len(g) > 1 else 0.0}
    return out, {"paths.csv": pb}


HANDLERS = {
    "project": cmd_project,
    "expect": cmd_expect,
    "value": cmd_value,
    "verify-oracle": cmd_verify,
    "price-claim": cmd_price,
    "invest-bilateral": cmd_bilateral,
    "simulate": cmd_simulate,
}


# ---------------------------------------------------------------------------
# output


def _all_finite(obj) -> bool:
    if isinstance(obj, float):
        return math.isfinite(obj)
    if isinstance(obj, dict):
        return all(_all_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(_all_finite(v) for v in obj)
    return True


def _write_outputs(out_dir: Path, command: str, payload: dict, tables: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    name = command.replace("-", "_")
    with open(out_dir / f"{name}.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    for fname, rows in tables.items():
        if hasattr(rows, "to_csv"):
            rows.to_csv(out_dir / fname)
            continue
        with open(out_dir / fname, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            for r in rows:
                wr.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _figures(out_dir: Path, command: str, result: dict, tables: dict):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if command == "value":
        rows = tables["value.csv"][1:]
        ax.plot([r[0] for r in rows], [r[1] for r in rows])
        ax.set_xlabel("x")
        ax.set_ylabel("V0(x)")
    elif command == "simulate":
        pb = tables["paths.csv"]
        for p in range(min(pb.n_paths, 50)):
            ax.plot(pb.grid.nodes, pb.states[p], lw=0.7)
        ax.set_xlabel("t")
        ax.set_ylabel("state")
    elif command in ("project", "expect"):
        key = "projection.csv" if command == "project" else "layer0.csv"
        rows = tables[key][1:]
        ax.plot([r[-1] for r in rows], marker=".")
        ax.set_ylabel(key[:-4])
    else:
        keys = [k for k, v in sorted(result.items()) if isinstance(v, (int, float)) and not isinstance(v, bool)]
        ax.bar(keys, [result[k] for k in keys])
        ax.tick_params(axis="x", rotation=30)
    ax.set_title(command)
    fig.tight_layout()
    fig.savefig(out_dir / f"{command.replace('-', '_')}.png", dpi=120)
    plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gdecomp", description="Regime decomposition of control problems with defaults.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("model", help="model file (YAML or JSON)")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./out)")
    p.add_argument("--seed", type=int, default=None, help="seed override")
    p.add_argument("--grid-N", dest="grid_N", type=int, default=None, help="time-step override")
    p.add_argument("--tolerance", type=float, default=None, help="solver / oracle tolerance")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    return p


def run(argv=None) -> int:
    """Parse arguments, run one command, write outputs; returns the exit code."""
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out or os.environ.get(OUT_ENV) or "out")
    try:
        model = load_model(args.model)
        ctx = Context(model, args)
        result, tables = HANDLERS[args.command](ctx)
        if not _all_finite(result):
            raise NumericalError("non-finite value in the result")
        payload = {"schema_version": SCHEMA_VERSION, "command": args.command, "config": ctx.echo(), **result}
        _write_outputs(out_dir, args.command, payload, tables)
        if args.figures:
            _figures(out_dir, args.command, result, tables)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, BudgetExceeded) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ModelError, ValueError, KeyError, TypeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
