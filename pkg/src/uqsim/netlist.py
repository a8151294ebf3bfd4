"""SPICE-subset netlist parser and modified-nodal-analysis assembly.

Grammar (line oriented; `*` starts a comment line; blank lines ignored)::

    element   = name node node [value] {key "=" value-or-variation}
    name      = letter {letter | digit | "_"}     first letter picks the kind
    kinds     = R C L V I D M    (M takes three nodes: drain gate source)
    value     = number [suffix]                    suffix: f p n u m k meg g
    variation = ["relative:"] family "(" number {"," number} ")"
    family    = gauss | gaussian | uniform | gamma | beta
    directive = ".op" | ".tran" step stop | ".end"

`variation=` attaches to the element's principal parameter (r, c, l, dc, or
is for diodes); `variation.<param>=` names the parameter explicitly.
Relative variations multiply the nominal value; absolute ones replace it.
Diagnostics use the format "file:line:col: message".

Elaboration builds a StochasticDae by full modified nodal analysis: one
unknown per non-ground node plus one branch current per voltage source and
per inductor.  Capacitor charges and inductor fluxes go to q, resistive and
nonlinear currents to f, and source values enter through B u(t).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .polychaos import Distribution
from .models import StochasticDae, shockley_current, mosfet_current

__all__ = [
    "NetlistError",
    "Element",
    "Variation",
    "Analysis",
    "Netlist",
    "parse_netlist",
    "print_netlist",
    "elaborate",
]

GROUND = "0"

_SUFFIX = {"f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6,
           "m": 1e-3, "k": 1e3, "meg": 1e6, "g": 1e9}

_NUMBER_RE = re.compile(
    r"([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)(meg|f|p|n|u|m|k|g)?",
    re.IGNORECASE)

_NAME_RE = re.compile(r"[A-Za-z][A-Za-z0-9_]*")
_NODE_RE = re.compile(r"[A-Za-z0-9_]+")

# principal parameter per kind, positional value requirement, allowed keys
_KIND_INFO = {
    "R": ("r", True, ()),
    "C": ("c", True, ()),
    "L": ("l", True, ()),
    "V": ("dc", True, ()),
    "I": ("dc", True, ()),
    "D": ("is", False, ("is", "nvt")),
    "M": ("kp", False, ("kp", "vth", "lam")),
}

_KIND_DEFAULTS = {
    "D": {"is": 1e-9, "nvt": 0.02585},
    "M": {"lam": 0.0},
}

_FAMILIES = ("gauss", "gaussian", "uniform", "gamma", "beta")


class NetlistError(ValueError):
    """Parse or elaboration failure; message is 'file:line:col: reason'."""


@dataclass(frozen=True)
class Element:
    kind: str
    name: str
    nodes: tuple[str, ...]
    params: dict
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Variation:
    element: str
    param: str
    distribution: Distribution
    mode: str  # "absolute" | "relative"


@dataclass(frozen=True)
class Analysis:
    kind: str
    args: tuple = ()


@dataclass(frozen=True)
class Netlist:
    elements: tuple
    variations: tuple
    analyses: tuple


def _parse_value(token: str, where: Callable[[], str]) -> float:
    m = _NUMBER_RE.fullmatch(token)
    if m is None:
        raise NetlistError(where() + f" invalid number '{token}'")
    v = float(m.group(1))
    if m.group(2):
        v *= _SUFFIX[m.group(2).lower()]
    return v


def _parse_variation(value: str, where: Callable[[], str]):
    mode = "absolute"
    body = value
    if body.startswith("relative:"):
        mode = "relative"
        body = body[len("relative:"):]
    m = re.fullmatch(r"([A-Za-z]+)\(([^()]*)\)", body)
    if m is None or m.group(1).lower() not in _FAMILIES:
        raise NetlistError(
            where() + f" malformed variation '{value}' (expected "
            "[relative:]family(args) with family one of "
            + ", ".join(_FAMILIES) + ")")
    family = m.group(1).lower()
    args = [_parse_value(a.strip(), where)
            for a in m.group(2).split(",") if a.strip()]

    def need(k):
        if len(args) != k:
            raise NetlistError(
                where() + f" {family} takes {k} arguments, got {len(args)}")

    if family in ("gauss", "gaussian"):
        need(2)
        dist = Distribution.gaussian(args[0], args[1])
    elif family == "uniform":
        need(2)
        dist = Distribution.uniform(args[0], args[1])
    elif family == "gamma":
        need(1)
        dist = Distribution.gamma(args[0])
    else:
        need(2)
        dist = Distribution.beta(args[0], args[1])
    return dist, mode


def parse_netlist(text: str, filename: str = "<netlist>") -> Netlist:
    elements: list[Element] = []
    variations: list[Variation] = []
    analyses: list[Analysis] = []
    seen_names: dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip()
        if not line.strip() or line.lstrip().startswith("*"):
            continue
        # token list with 1-based column positions
        tokens = [(m.start() + 1, m.group())
                  for m in re.finditer(r"\S+", line)]

        def at(col):
            return f"{filename}:{lineno}:{col}:"

        first_col, first = tokens[0]
        if first.startswith("."):
            d = first.lower()
            if d == ".op":
                analyses.append(Analysis("op"))
            elif d == ".tran":
                if len(tokens) != 3:
                    raise NetlistError(
                        at(first_col) + " .tran needs two arguments: "
                        "step stop")
                step = _parse_value(tokens[1][1], lambda c=tokens[1][0]: at(c))
                stop = _parse_value(tokens[2][1], lambda c=tokens[2][0]: at(c))
                analyses.append(Analysis("tran", (step, stop)))
            elif d == ".end":
                break
            else:
                raise NetlistError(at(first_col) + f" unknown directive '{first}'")
            continue

        if not _NAME_RE.fullmatch(first):
            raise NetlistError(at(first_col) + f" invalid element name '{first}'")
        kind = first[0].upper()
        if kind not in _KIND_INFO:
            raise NetlistError(
                at(first_col) + f" unknown element kind '{first[0]}' "
                "(supported: R C L V I D M)")
        if first in seen_names:
            raise NetlistError(
                at(first_col) + f" duplicate element name '{first}' "
                f"(first defined on line {seen_names[first]})")
        seen_names[first] = lineno

        principal, takes_value, extra_keys = _KIND_INFO[kind]
        n_nodes = 3 if kind == "M" else 2
        pos = 1
        nodes = []
        for _ in range(n_nodes):
            if pos >= len(tokens) or "=" in tokens[pos][1]:
                raise NetlistError(
                    at(len(line) + 1) + f" {first}: expected {n_nodes} node "
                    f"names, got {len(nodes)}")
            col, tok = tokens[pos]
            if not _NODE_RE.fullmatch(tok):
                raise NetlistError(at(col) + f" invalid node name '{tok}'")
            nodes.append(tok)
            pos += 1

        params = dict(_KIND_DEFAULTS.get(kind, {}))
        if takes_value:
            if pos >= len(tokens) or "=" in tokens[pos][1]:
                raise NetlistError(
                    at(len(line) + 1) + f" {first}: expected a value "
                    f"(token {pos + 1})")
            col, tok = tokens[pos]
            params[principal] = _parse_value(tok, lambda c=col: at(c))
            pos += 1

        for col, tok in tokens[pos:]:
            if "=" not in tok:
                raise NetlistError(
                    at(col) + f" expected key=value, got '{tok}'")
            key, _, value = tok.partition("=")
            key = key.lower()
            if key == "variation" or key.startswith("variation."):
                param = key.partition(".")[2] or principal
                dist, mode = _parse_variation(value, lambda c=col: at(c))
                variations.append(Variation(first, param, dist, mode))
            elif key in extra_keys:
                params[key] = _parse_value(value, lambda c=col: at(c))
            else:
                raise NetlistError(
                    at(col) + f" unknown parameter '{key}' for element "
                    f"kind {kind}")

        if kind == "M":
            missing = [k for k in ("kp", "vth") if k not in params]
            if missing:
                raise NetlistError(
                    at(len(line) + 1) + f" {first}: missing required "
                    f"parameter(s) {', '.join(missing)}")
        elements.append(Element(kind, first, tuple(nodes), params,
                                lineno, first_col))

    # cross checks: variations reference real parameters, ground exists,
    # no node is touched by a single terminal only
    by_name = {e.name: e for e in elements}
    for var in variations:
        elem = by_name.get(var.element)
        if elem is None:
            raise NetlistError(
                f"{filename}:0:0: variation references unknown element "
                f"'{var.element}'")
        if var.param not in elem.params:
            raise NetlistError(
                f"{filename}:{elem.line}:{elem.col}: variation references "
                f"unknown parameter '{var.param}' of {elem.name}")

    if elements:
        touched: dict[str, list] = {}
        for e in elements:
            for nd in e.nodes:
                touched.setdefault(nd, []).append(e)
        if GROUND not in touched:
            raise NetlistError(
                f"{filename}:1:1: no ground node '{GROUND}' in the circuit")
        for nd, elems in sorted(touched.items()):
            # a single-terminal node is dangling unless its one element ties
            # it straight to ground (a trivial but complete branch)
            if nd != GROUND and len(elems) == 1 and GROUND not in elems[0].nodes:
                e = elems[0]
                raise NetlistError(
                    f"{filename}:{e.line}:{e.col}: dangling node '{nd}' "
                    f"(only {e.name} touches it)")

    return Netlist(tuple(elements), tuple(variations), tuple(analyses))


def _format_number(v: float) -> str:
    return repr(float(v))


def _format_distribution(dist: Distribution) -> str:
    names = {"gaussian": "gauss", "uniform": "uniform",
             "gamma": "gamma", "beta": "beta"}
    args = ",".join(_format_number(p) for p in dist.params)
    return f"{names[dist.kind]}({args})"


def print_netlist(nl: Netlist) -> str:
    """Canonical text form; parsing it back gives an equal Netlist."""
    vars_by_element: dict[str, list] = {}
    for v in nl.variations:
        vars_by_element.setdefault(v.element, []).append(v)
    lines = []
    for e in nl.elements:
        principal, takes_value, extra_keys = _KIND_INFO[e.kind]
        parts = [e.name, *e.nodes]
        if takes_value:
            parts.append(_format_number(e.params[principal]))
        for k in extra_keys:
            if k in e.params:
                parts.append(f"{k}={_format_number(e.params[k])}")
        for v in vars_by_element.get(e.name, ()):
            key = ("variation" if v.param == principal
                   else f"variation.{v.param}")
            prefix = "relative:" if v.mode == "relative" else ""
            parts.append(f"{key}={prefix}{_format_distribution(v.distribution)}")
        lines.append(" ".join(parts))
    for a in nl.analyses:
        if a.kind == "op":
            lines.append(".op")
        else:
            lines.append(".tran " + " ".join(_format_number(x)
                                             for x in a.args))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# modified nodal analysis


def _connectivity_check(nl: Netlist):
    """Union-find from ground; every node must reach it through elements."""
    parent: dict[str, str] = {}

    def find(x):
        parent.setdefault(x, x)
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    for e in nl.elements:
        for nd in e.nodes[1:]:
            union(e.nodes[0], nd)
    root = find(GROUND)
    floating = sorted(nd for nd in parent
                      if nd != GROUND and find(nd) != root)
    if floating:
        raise NetlistError(
            "floating subnetwork: node(s) "
            + ", ".join(floating)
            + f" have no path to ground '{GROUND}'; the structure is "
            "singular")


def elaborate(nl: Netlist) -> StochasticDae:
    """Assemble the stochastic DAE by full modified nodal analysis."""
    _connectivity_check(nl)

    node_index: dict[str, int] = {}
    for e in nl.elements:
        for nd in e.nodes:
            if nd != GROUND and nd not in node_index:
                node_index[nd] = len(node_index)
    n_nodes = len(node_index)

    branch_index: dict[str, int] = {}
    for e in nl.elements:
        if e.kind in ("V", "L"):
            branch_index[e.name] = n_nodes + len(branch_index)
    n = n_nodes + len(branch_index)

    labels = tuple(f"v({nd})" for nd in node_index) + tuple(
        f"i({name})" for name in branch_index)

    # per-element resolved-parameter plan: (mode, variation index) per param
    var_plan: dict[tuple[str, str], tuple[str, int]] = {}
    for k, v in enumerate(nl.variations):
        if (v.element, v.param) in var_plan:
            raise NetlistError(
                f"parameter '{v.param}' of {v.element} carries two "
                "variation annotations")
        var_plan[(v.element, v.param)] = (v.mode, k)
    d = len(nl.variations)
    distributions = tuple(v.distribution for v in nl.variations)

    def resolved(e: Element, xi) -> dict:
        params = dict(e.params)
        for pname in e.params:
            plan = var_plan.get((e.name, pname))
            if plan is not None:
                mode, k = plan
                params[pname] = (params[pname] * xi[k] if mode == "relative"
                                 else float(xi[k]))
        return params

    v_sources = [e for e in nl.elements if e.kind == "V"]
    i_sources = [e for e in nl.elements if e.kind == "I"]
    m_inputs = len(v_sources) + len(i_sources)

    def idx(node: str) -> int:
        return -1 if node == GROUND else node_index[node]

    B = np.zeros((n, m_inputs))
    u_values = np.empty(m_inputs)
    for j, e in enumerate(v_sources):
        B[branch_index[e.name], j] = 1.0
        u_values[j] = e.params["dc"]
    for j, e in enumerate(i_sources, start=len(v_sources)):
        a, b = idx(e.nodes[0]), idx(e.nodes[1])
        if a >= 0:
            B[a, j] = -1.0
        if b >= 0:
            B[b, j] = 1.0
        u_values[j] = e.params["dc"]
    u_values.setflags(write=False)

    # source values can vary; fold varied sources through f instead of u
    varied_sources = [e.name for e in v_sources + i_sources
                      if (e.name, "dc") in var_plan]
    if varied_sources:
        raise NetlistError(
            "variations on source values are not supported (element(s) "
            + ", ".join(varied_sources) + "); vary passive parameters")

    def add(vec, k, val):
        if k >= 0:
            vec[k] += val

    def q(x, xi):
        out = np.zeros(n)
        for e in nl.elements:
            if e.kind == "C":
                p = resolved(e, xi)
                a, b = idx(e.nodes[0]), idx(e.nodes[1])
                va = x[a] if a >= 0 else 0.0
                vb = x[b] if b >= 0 else 0.0
                qc = p["c"] * (va - vb)
                add(out, a, qc)
                add(out, b, -qc)
            elif e.kind == "L":
                p = resolved(e, xi)
                out[branch_index[e.name]] += p["l"] * x[branch_index[e.name]]
        return out

    def dq_dx(x, xi):
        out = np.zeros((n, n))
        for e in nl.elements:
            if e.kind == "C":
                p = resolved(e, xi)
                a, b = idx(e.nodes[0]), idx(e.nodes[1])
                c = p["c"]
                for r, s, val in ((a, a, c), (a, b, -c), (b, a, -c), (b, b, c)):
                    if r >= 0 and s >= 0:
                        out[r, s] += val
            elif e.kind == "L":
                k = branch_index[e.name]
                out[k, k] += resolved(e, xi)["l"]
        return out

    def f(x, xi, t):
        out = np.zeros(n)
        for e in nl.elements:
            a = idx(e.nodes[0])
            b = idx(e.nodes[1]) if len(e.nodes) > 1 else -1
            va = x[a] if a >= 0 else 0.0
            vb = x[b] if b >= 0 else 0.0
            if e.kind == "R":
                g = 1.0 / resolved(e, xi)["r"]
                add(out, a, g * (va - vb))
                add(out, b, -g * (va - vb))
            elif e.kind == "V":
                k = branch_index[e.name]
                add(out, a, x[k])
                add(out, b, -x[k])
                out[k] += va - vb
            elif e.kind == "L":
                k = branch_index[e.name]
                add(out, a, x[k])
                add(out, b, -x[k])
                out[k] -= va - vb
            elif e.kind == "D":
                p = resolved(e, xi)
                i_d, _ = shockley_current(va - vb, p["is"], p["nvt"])
                add(out, a, i_d)
                add(out, b, -i_d)
            elif e.kind == "M":
                p = resolved(e, xi)
                dn, gn, sn = (idx(nd) for nd in e.nodes)
                vd = x[dn] if dn >= 0 else 0.0
                vg = x[gn] if gn >= 0 else 0.0
                vs = x[sn] if sn >= 0 else 0.0
                i_ds, _, _ = mosfet_current(vg - vs, vd - vs,
                                            p["kp"], p["vth"], p["lam"])
                add(out, dn, i_ds)
                add(out, sn, -i_ds)
        return out

    def df_dx(x, xi, t):
        out = np.zeros((n, n))

        def stamp2(a, b, g):
            for r, s, val in ((a, a, g), (a, b, -g), (b, a, -g), (b, b, g)):
                if r >= 0 and s >= 0:
                    out[r, s] += val

        for e in nl.elements:
            a = idx(e.nodes[0])
            b = idx(e.nodes[1]) if len(e.nodes) > 1 else -1
            if e.kind == "R":
                stamp2(a, b, 1.0 / resolved(e, xi)["r"])
            elif e.kind in ("V", "L"):
                k = branch_index[e.name]
                sgn = 1.0 if e.kind == "V" else -1.0
                if a >= 0:
                    out[a, k] += 1.0
                    out[k, a] += sgn
                if b >= 0:
                    out[b, k] -= 1.0
                    out[k, b] -= sgn
            elif e.kind == "D":
                p = resolved(e, xi)
                va = x[a] if a >= 0 else 0.0
                vb = x[b] if b >= 0 else 0.0
                _, g = shockley_current(va - vb, p["is"], p["nvt"])
                stamp2(a, b, g)
            elif e.kind == "M":
                p = resolved(e, xi)
                dn, gn, sn = (idx(nd) for nd in e.nodes)
                vd = x[dn] if dn >= 0 else 0.0
                vg = x[gn] if gn >= 0 else 0.0
                vs = x[sn] if sn >= 0 else 0.0
                _, gm, gds = mosfet_current(vg - vs, vd - vs,
                                            p["kp"], p["vth"], p["lam"])
                for r in (dn, sn):
                    if r < 0:
                        continue
                    sgn = 1.0 if r == dn else -1.0
                    if dn >= 0:
                        out[r, dn] += sgn * gds
                    if gn >= 0:
                        out[r, gn] += sgn * gm
                    if sn >= 0:
                        out[r, sn] += sgn * (-gm - gds)
        return out

    return StochasticDae(
        n=n, d=d, distributions=distributions,
        q=q, f=f, B=B, u=lambda t: u_values,
        dq_dx=dq_dx, df_dx=df_dx,
        x0_guess=np.zeros(n), labels=labels)
