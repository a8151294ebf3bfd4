"""Adaptive anchored decomposition with global sensitivity indices.

A d-variable function g is split into terms g_s indexed by coordinate
subsets s: the complement coordinates are frozen at a deterministic
anchor point, each restricted function is projected onto a low-order
gPC expansion, and lower-order terms are subtracted so that every g_s
vanishes whenever one of its own coordinates sits at the anchor.  A
variance screen decides, level by level, which subsets are worth
expanding further; screened-out subsets keep their computed term but
block all of their supersets.  The surviving terms are assembled into
one sparse d-variable expansion, from which main and total sensitivity
indices are read off coefficient-wise.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .polychaos import (Distribution, GpcExpansion, MultiIndexSet, OrthoBasis,
                        total_degree_index_set)
from .stsolver import (CONDITION_CAP, SolverError, recover_coefficients,
                       select_testing_points, standard_bases)

__all__ = [
    "AnchorPoint",
    "AnovaTerm",
    "AnovaDecomposition",
    "cdf_transform",
    "anchor_point",
    "anchored_subterm",
    "compose_term",
    "adaptive_anova",
    "sample_count",
    "sensitivities",
    "decomposition_report",
    "sensitivity_csv",
]


@dataclass(frozen=True)
class AnchorPoint:
    """Deterministic freeze point, stored in both coordinate systems.

    q[k] is the quantile p_unit[k] of marginal k, so the anchor is
    well-defined for every supported family and always carries positive
    density when the marginal does.
    """

    q: np.ndarray
    p_unit: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        p = np.asarray(self.p_unit, dtype=float)
        q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p_unit", p)
        if q.shape != p.shape:
            raise ValueError("q and p_unit must have matching shapes")


@dataclass(frozen=True)
class AnovaTerm:
    subset: tuple          # sorted coordinate indices
    expansion: GpcExpansion  # scalar expansion in the |subset| variables
    variance: float
    theta: float | None = None   # variance share at screening time


@dataclass(frozen=True)
class AnovaDecomposition:
    g0: float
    terms: tuple             # every computed AnovaTerm, in computation order
    active: dict             # level -> subsets that passed the screen
    pruned: tuple            # subsets whose supersets were blocked
    beta: float              # accumulated variance over all computed terms
    m: int
    sigma: float
    order: int
    anchor: AnchorPoint
    n_by_level: tuple        # computed subsets per level 1..m
    n_evaluations: int       # unique model evaluations spent


def cdf_transform(dist: Distribution):
    """(to_param, to_unit) maps between [0,1] quantiles and the support.

    Requires a strictly positive density on the support interior;
    otherwise the quantile map is not invertible there.
    """
    lo, hi = dist.effective_interval()
    if dist.kind == "custom":
        probe = np.linspace(lo, hi, 2001)[1:-1]
        if np.any(np.asarray(dist.density(probe)) <= 0.0):
            raise ValueError(
                "the transform needs a strictly positive density on the "
                "support interior; this density touches zero inside it")

    def to_param(u):
        return dist.inv_cdf(u)

    def to_unit(x):
        return dist.cdf(x)

    return to_param, to_unit


def anchor_point(distributions: Sequence[Distribution],
                 p_unit=0.5) -> AnchorPoint:
    """Anchor at given per-coordinate quantiles (scalar broadcasts)."""
    d = len(distributions)
    p = np.broadcast_to(np.asarray(p_unit, dtype=float), (d,)).copy()
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("anchor quantiles must lie strictly inside (0, 1)")
    q = np.empty(d)
    for k, dist in enumerate(distributions):
        to_param, _ = cdf_transform(dist)
        q[k] = float(to_param(p[k]))
        if float(dist.density(q[k])) <= 0.0:
            raise ValueError(
                f"anchor coordinate {k} falls where the density vanishes")
    return AnchorPoint(q=q, p_unit=p)


# ---------------------------------------------------------------------------
# anchored terms


def _project_restriction(g: Callable, subset: tuple, anchor: AnchorPoint,
                         bases: Sequence[OrthoBasis], order: int,
                         condition_cap: float, evaluate) -> GpcExpansion:
    """Project g with the complement of `subset` frozen at the anchor."""
    sub_bases = tuple(bases[k] for k in subset)
    idx = total_degree_index_set(len(subset), order)
    try:
        tps = select_testing_points(sub_bases, idx, condition_cap)
    except (ValueError, SolverError) as err:
        raise SolverError(f"subset {subset}: {err}") from err
    points = np.tile(anchor.q, (tps.n_points, 1))
    points[:, list(subset)] = np.atleast_2d(tps.points.reshape(tps.n_points,
                                                               -1))
    values = np.array([evaluate(pt) for pt in points], dtype=float)
    try:
        return recover_coefficients(values.reshape(-1, 1), tps, idx,
                                    sub_bases)
    except SolverError as err:
        raise SolverError(f"subset {subset}: {err}") from err


def anchored_subterm(g: Callable, subset, anchor: AnchorPoint,
                     distributions: Sequence[Distribution], order: int,
                     condition_cap: float = CONDITION_CAP) -> GpcExpansion:
    """Expansion of g restricted to `subset`, the rest frozen at the anchor.

    subset () returns the zero-variable expansion holding g(anchor).
    """
    subset = tuple(sorted(int(k) for k in subset))
    if subset == ():
        idx = total_degree_index_set(0, 0)
        value = float(g(np.asarray(anchor.q, dtype=float)))
        return GpcExpansion(idx, np.array([[value]]), ())
    bases = standard_bases(tuple(distributions), order)
    return _project_restriction(g, subset, anchor, bases, order,
                                condition_cap, lambda pt: float(g(pt)))


def compose_term(subset, ghat: GpcExpansion, g0: float,
                 lower_terms: Mapping[tuple, AnovaTerm],
                 pruned=()) -> AnovaTerm:
    """Subtract every strict-subset term from the restricted expansion.

    Terms listed in `pruned` are taken as exactly zero.  A strict subset
    that is neither present nor pruned is an internal invariant
    violation: levels must be composed in order.
    """
    subset = tuple(sorted(int(k) for k in subset))
    pruned = set(tuple(p) for p in pruned)
    coeffs = ghat.scalar_coefficients().astype(float).copy()
    idx = ghat.index_set
    coeffs[idx.position((0,) * len(subset))] -= g0
    for size in range(1, len(subset)):
        for t in itertools.combinations(subset, size):
            if t in pruned:
                continue
            term = lower_terms.get(t)
            if term is None:
                raise RuntimeError(
                    f"internal invariant violation: subset {t} of {subset} "
                    "was neither computed nor pruned")
            positions = [subset.index(k) for k in t]
            for alpha, c in zip(term.expansion.index_set.indices,
                                term.expansion.scalar_coefficients()):
                embedded = [0] * len(subset)
                for pos, a in zip(positions, alpha):
                    embedded[pos] = int(a)
                coeffs[idx.position(embedded)] -= float(c)
    variance = float(np.sum(coeffs[1:] ** 2))
    exp = GpcExpansion(idx, coeffs.reshape(-1, 1), ghat.bases)
    return AnovaTerm(subset=subset, expansion=exp, variance=variance)


# ---------------------------------------------------------------------------
# the adaptive decomposition


def adaptive_anova(g: Callable, distributions: Sequence[Distribution],
                   m: int, sigma: float, order: int,
                   anchor: AnchorPoint | None = None,
                   condition_cap: float = CONDITION_CAP
                   ) -> tuple[AnovaDecomposition, GpcExpansion]:
    """Level-wise anchored decomposition with a variance screen.

    Levels k = 1..m: every size-k subset whose size-(k-1) subsets all
    passed the screen is projected and composed; beta accumulates the
    term variances; after the level, subsets with variance share
    theta = Var(g_s)/beta below sigma stop producing supersets.  All
    computed terms enter the assembled expansion regardless of the
    screen.  Returns the decomposition record and the sparse d-variable
    expansion.
    """
    distributions = tuple(distributions)
    d = len(distributions)
    if not 1 <= m <= d:
        raise ValueError(f"effective dimension m={m} must lie in 1..{d}")
    if sigma < 0.0:
        raise ValueError("the screen threshold sigma must be nonnegative")
    if anchor is None:
        anchor = anchor_point(distributions, 0.5)
    for k, dist in enumerate(distributions):
        if float(dist.density(float(anchor.q[k]))) <= 0.0:
            raise ValueError(
                f"anchor coordinate {k} falls where the density vanishes")
    bases = standard_bases(distributions, order)

    cache: dict[bytes, float] = {}

    def evaluate(point: np.ndarray) -> float:
        key = point.tobytes()
        if key not in cache:
            cache[key] = float(g(point))
        return cache[key]

    g0 = evaluate(np.asarray(anchor.q, dtype=float))
    computed: dict[tuple, AnovaTerm] = {}
    all_terms: list[AnovaTerm] = []
    pruned: list[tuple] = []
    active: dict[int, list] = {}
    beta = 0.0
    n_by_level = []

    for level in range(1, m + 1):
        if level == 1:
            candidates = [(k,) for k in range(d)]
        else:
            pool = sorted({k for s in active[level - 1] for k in s})
            prev = set(active[level - 1])
            candidates = [
                s for s in itertools.combinations(pool, level)
                if all(t in prev
                       for t in itertools.combinations(s, level - 1))
            ]
        n_by_level.append(len(candidates))
        level_terms = []
        for subset in candidates:
            ghat = _project_restriction(g, subset, anchor, bases, order,
                                        condition_cap, evaluate)
            term = compose_term(subset, ghat, g0, computed, pruned)
            computed[subset] = term
            level_terms.append(term)
            beta += term.variance
        active[level] = []
        for term in level_terms:
            theta = term.variance / beta if beta > 0.0 else 0.0
            term = replace(term, theta=theta)
            computed[term.subset] = term
            all_terms.append(term)
            if theta < sigma:
                pruned.append(term.subset)
            else:
                active[level].append(term.subset)

    decomp = AnovaDecomposition(
        g0=g0, terms=tuple(all_terms), active=active, pruned=tuple(pruned),
        beta=beta, m=m, sigma=sigma, order=order, anchor=anchor,
        n_by_level=tuple(n_by_level), n_evaluations=len(cache))
    return decomp, _assemble(decomp, d, bases)


def _assemble(decomp: AnovaDecomposition, d: int,
              bases: Sequence[OrthoBasis]) -> GpcExpansion:
    """Sum all computed terms into one sparse d-variable expansion."""
    accum: dict[tuple, float] = {(0,) * d: decomp.g0}
    for term in decomp.terms:
        subset = term.subset
        for alpha, c in zip(term.expansion.index_set.indices,
                            term.expansion.scalar_coefficients()):
            key = [0] * d
            for pos, a in zip(subset, alpha):
                key[pos] = int(a)
            key = tuple(key)
            accum[key] = accum.get(key, 0.0) + float(c)
    rows = sorted(accum, key=lambda a: (sum(a), a))
    idx = MultiIndexSet.explicit(np.array(rows, dtype=np.int64), d)
    coeffs = np.array([[accum[a]] for a in rows])
    return GpcExpansion(idx, coeffs, tuple(bases))


def sample_count(n_by_level: Sequence[int], order: int) -> int:
    """Total model evaluations: 1 + sum_k n_k * C(k + order, order)."""
    total = 1
    for k, n_k in enumerate(n_by_level, start=1):
        total += int(n_k) * math.comb(k + order, order)
    return total


# ---------------------------------------------------------------------------
# sensitivity indices


def sensitivities(exp: GpcExpansion) -> tuple[np.ndarray, np.ndarray]:
    """Main and total variance shares per input, from the coefficients.

    S[k] sums squared coefficients whose index involves coordinate k
    alone; T[k] sums those involving k at all.  Both divide by the total
    variance.
    """
    coeffs = exp.scalar_coefficients()
    indices = exp.index_set.indices
    d = exp.index_set.dimension
    nonconst = indices.sum(axis=1) > 0
    variance = float(np.sum(coeffs[nonconst] ** 2))
    if variance <= 0.0:
        raise ValueError("sensitivities are undefined for a zero-variance "
                         "expansion")
    S = np.zeros(d)
    T = np.zeros(d)
    sq = coeffs ** 2
    for k in range(d):
        involves = indices[:, k] > 0
        T[k] = np.sum(sq[involves]) / variance
        only_k = involves & (indices.sum(axis=1) == indices[:, k])
        S[k] = np.sum(sq[only_k]) / variance
    return S, T


def decomposition_report(decomp: AnovaDecomposition,
                         exp: GpcExpansion) -> dict:
    """JSON-ready summary: anchor constant, terms, S/T, sample count."""
    _, var = exp.mean_variance()
    if float(var[0]) > 0.0:
        S, T = sensitivities(exp)
    else:
        # a constant response has no variance to attribute
        d = exp.index_set.dimension
        S = T = np.zeros(d)
    return {
        "g0": decomp.g0,
        "terms": [
            {"s": list(t.subset), "variance": t.variance, "theta": t.theta}
            for t in decomp.terms
        ],
        "S": [float(v) for v in S],
        "T": [float(v) for v in T],
        "N_samples": decomp.n_evaluations,
    }


def sensitivity_csv(S: np.ndarray, T: np.ndarray,
                    labels: Sequence[str] | None = None) -> str:
    if labels is None:
        labels = [f"x{k}" for k in range(len(S))]
    lines = ["input,main_sensitivity,total_sensitivity"]
    for name, s, t in zip(labels, S, T):
        lines.append(f"{name},{float(s)!r},{float(t)!r}")
    return "\n".join(lines) + "\n"


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"
