"""Hierarchical uncertainty propagation through intermediate variables.

Each subsystem's scalar gPC surrogate y_i = f_i(xi_i) is compressed into a
normalized variable zeta_i = (y_i - a_i)/b_i with zero mean and unit
variance.  The density of zeta_i is represented either by the pushforward
of a Gauss rule in the block's own parameter space (exact moments, no
explicit density needed) or by a monotone piecewise-cubic CDF fitted to
samples.  A custom orthonormal basis and Gauss rule are then built for
zeta_i with the Stieltjes procedure, and the system level treats the
zeta_i as fresh independent inputs for the stochastic testing solver.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

from .models import StochasticDae, algebraic_model
from .polychaos import (Distribution, GpcExpansion, MultiIndexSet, OrthoBasis,
                        QuadratureRule, golub_welsch, make_standard_basis,
                        stieltjes_basis, tensor_quadrature,
                        total_degree_index_set)
from .stsolver import (SolverOptions, integrate_transient,
                       select_testing_points, solve_dc)

__all__ = [
    "Surrogate",
    "IntermediateDensity",
    "normalize_surrogate",
    "extract_block_surrogate",
    "density_by_quadrature",
    "density_by_sampling",
    "build_intermediate_basis",
    "propagate_dc",
    "propagate_transient",
    "demo_system",
]

DEFAULT_ZETA_DEGREE = 14   # pushforward rules resolve moments to this degree
SAMPLING_MIN = 10_000
SAMPLING_DEFAULT = 100_000
CDF_KNOTS = 51
# quantile levels reserved for tail resolution on top of the uniform bulk
_TAIL_LEVELS = (0.0005, 0.001, 0.002, 0.005, 0.01)


@dataclass(frozen=True)
class Surrogate:
    """Scalar block output y = f(xi) with its normalization.

    zeta holds the expansion of (y - a)/b; by orthonormal coefficient
    arithmetic it has exactly zero mean and unit variance.
    """

    expansion: GpcExpansion
    a: float
    b: float
    zeta: GpcExpansion

    @property
    def distributions(self) -> tuple:
        return tuple(b.distribution for b in self.expansion.bases)

    @property
    def dimension(self) -> int:
        return self.expansion.dimension


def normalize_surrogate(expansion: GpcExpansion) -> Surrogate:
    """a = mean, b = stddev from coefficients; rejects zero variance."""
    if expansion.n_outputs != 1:
        raise ValueError("block surrogates must be scalar; select one output")
    coeffs = expansion.scalar_coefficients()
    mean, var = expansion.mean_variance()
    a = float(mean[0])
    b = float(np.sqrt(var[0]))
    if b == 0.0:
        raise ValueError(
            "surrogate variance is zero; a deterministic block needs no "
            "intermediate variable")
    zcoeffs = coeffs / b
    zcoeffs[0] = 0.0
    zeta = GpcExpansion(expansion.index_set, zcoeffs.reshape(-1, 1),
                        expansion.bases)
    return Surrogate(expansion=expansion, a=a, b=b, zeta=zeta)


def extract_block_surrogate(model: StochasticDae, order: int,
                            output: int | str = 0,
                            options: SolverOptions = SolverOptions()
                            ) -> Surrogate:
    """Solve a block's DC problem and normalize one output as zeta."""
    from .stsolver import standard_bases

    bases = standard_bases(model, order)
    idx = total_degree_index_set(model.d, order)
    tps = select_testing_points(bases, idx)
    exp = solve_dc(model, tps, bases, idx, options)
    if isinstance(output, str):
        if model.labels is None or output not in model.labels:
            raise ValueError(f"model has no output labeled '{output}'")
        output = model.labels.index(output)
    scalar = GpcExpansion(exp.index_set,
                          exp.coefficients[:, output].reshape(-1, 1),
                          exp.bases)
    return normalize_surrogate(scalar)


# ---------------------------------------------------------------------------
# density representations


@dataclass(frozen=True)
class IntermediateDensity:
    """Density of one intermediate variable zeta.

    kind 'quadrature': atoms is the pushforward of a Gauss rule in the
    block's parameter space; moments of zeta up to exact_degree are exact
    sums over the atoms and no explicit density is ever needed.  kind
    'sampled': cdf is a monotone piecewise-cubic interpolant of the
    empirical CDF; the density is its derivative.
    """

    kind: str                # "quadrature" | "sampled"
    support: tuple
    atoms: tuple | None = None        # (points, weights)
    cdf: object | None = None         # PchipInterpolator
    exact_degree: int | None = None   # quadrature kind only

    @cached_property
    def _pdf(self):
        if self.kind == "sampled":
            return self.cdf.derivative()
        # smooth stand-in for plotting/validation: monotone fit of the
        # atom CDF (moment integrals never use this); the half-atom mass
        # beyond the outermost atoms gets one atom-spacing of room
        pts, wts = self.atoms
        order = np.argsort(pts)
        pts, wts = pts[order], wts[order]
        cum = np.cumsum(wts) - 0.5 * wts
        knots, first = np.unique(pts, return_index=True)
        lo, hi = self.support
        pad = (hi - lo) / max(len(knots), 2)
        xs = np.concatenate([[lo - pad], knots, [hi + pad]])
        ys = np.concatenate([[0.0], cum[first], [1.0]])
        return PchipInterpolator(xs, ys).derivative()

    def density(self, z) -> np.ndarray:
        """Density evaluation over the interpolant's own span."""
        z = np.asarray(z, dtype=float)
        pdf = self._pdf
        lo, hi = float(pdf.x[0]), float(pdf.x[-1])
        return np.where((z >= lo) & (z <= hi), pdf(np.clip(z, lo, hi)), 0.0)

    def moment_rule(self, degree: int) -> QuadratureRule:
        """Probability-measure rule exact for zeta-polynomials to `degree`."""
        if self.kind == "quadrature":
            if degree > self.exact_degree:
                raise ValueError(
                    f"pushforward rule resolves moments to degree "
                    f"{self.exact_degree} but degree {degree} is required; "
                    "rebuild the density with a larger rule")
            pts, wts = self.atoms
            return QuadratureRule(pts, wts, 1,
                                  exact_degree=self.exact_degree)
        # integrate the piecewise-quadratic density segment by segment;
        # node count chosen so polynomial * density is integrated exactly
        knots = np.asarray(self.cdf.x)
        n_seg = int(np.ceil((degree + 3) / 2)) + 1
        gl_x, gl_w = np.polynomial.legendre.leggauss(n_seg)
        pdf = self.cdf.derivative()
        pts, wts = [], []
        for a, b in zip(knots[:-1], knots[1:]):
            mid, half = 0.5 * (a + b), 0.5 * (b - a)
            x = mid + half * gl_x
            w = half * gl_w * pdf(x)
            pts.append(x)
            wts.append(w)
        pts = np.concatenate(pts)
        wts = np.concatenate(wts)
        keep = wts > 0
        pts, wts = pts[keep], wts[keep]
        total = wts.sum()
        if abs(total - 1.0) > 1e-6:
            raise ValueError(
                f"fitted density integrates to {total:.8f}, not 1")
        return QuadratureRule(pts, wts / total, 1, exact_degree=degree)

    def as_distribution(self) -> Distribution:
        pdf = self._pdf
        return Distribution.custom(
            self.density, (float(pdf.x[0]), float(pdf.x[-1])),
            validate=False)


def _oversampled_rule(dists: Sequence[Distribution], nodes: int
                      ) -> QuadratureRule:
    rules = []
    for dist in dists:
        if dist.kind == "custom":
            basis = stieltjes_basis(dist, nodes - 1)
        else:
            basis = make_standard_basis(dist, nodes - 1)
        rules.append(golub_welsch(basis, nodes))
    return tensor_quadrature(rules)


def density_by_quadrature(s: Surrogate,
                          rule: QuadratureRule | None = None,
                          max_degree: int = DEFAULT_ZETA_DEGREE
                          ) -> IntermediateDensity:
    """Pushforward of a parameter-space Gauss rule through zeta(xi).

    The rule must resolve zeta-moments up to max_degree: a zeta-polynomial
    of degree D composes with the degree-p surrogate to a degree D*p
    integrand, so each dimension gets ceil((D*p + 1)/2) Gauss nodes when
    the rule is built here.
    """
    p_surr = max(1, s.zeta.index_set.total_order)
    if rule is None:
        nodes = int(np.ceil((max_degree * p_surr + 1) / 2))
        rule = _oversampled_rule(s.distributions, nodes)
        exact = max_degree
    else:
        if rule.exact_degree is None:
            raise ValueError("the supplied rule must declare exact_degree")
        exact = rule.exact_degree // p_surr
    values = s.zeta.eval_many(rule.points).ravel()
    return IntermediateDensity(
        kind="quadrature",
        support=(float(values.min()), float(values.max())),
        atoms=(values, rule.weights),
        exact_degree=int(exact))


def density_by_sampling(s: Surrogate, n_samples: int = SAMPLING_DEFAULT,
                        seed: int = 0, knots: int = CDF_KNOTS
                        ) -> IntermediateDensity:
    """Monotone piecewise-cubic CDF fit over surrogate samples.

    Knot levels are deterministic: a uniform bulk grid plus refined tail
    levels (an equiprobable-only grid smears the outer percentiles over
    the whole tail span and inflates the variance).  One binomial pass
    over the interior knot positions damps quantile noise, which would
    otherwise dominate the density error near the mode.  Samples beyond
    three interquartile ranges outside the quartiles are treated as
    outliers and dropped, so heavy-tailed surrogates lose tail mass; the
    quadrature route has no such truncation.
    """
    from .montecarlo import sample_parameters

    if n_samples < SAMPLING_MIN:
        raise ValueError(
            f"need at least {SAMPLING_MIN} samples for a stable CDF fit")
    if any(d is None for d in s.distributions):
        raise ValueError("sampling route needs the block input "
                         "distributions; use the quadrature route")
    xis = sample_parameters(s.distributions, n_samples, seed)
    z = s.zeta.eval_many(xis).ravel()
    z_min, z_max = float(z.min()), float(z.max())
    if z_max - z_min <= 1e-14:
        raise ValueError("degenerate samples: the surrogate is constant")
    q1, q3 = np.quantile(z, [0.25, 0.75])
    iqr = q3 - q1
    lo = max(z_min, float(q1 - 3 * iqr))
    hi = min(z_max, float(q3 + 3 * iqr))
    z = z[(z >= lo) & (z <= hi)]

    bulk_n = max(9, knots - 2 * len(_TAIL_LEVELS) - 2)
    grid = np.array(sorted(set(
        [0.0, 1.0] + list(_TAIL_LEVELS) + [1.0 - t for t in _TAIL_LEVELS]
        + list(np.linspace(0.025, 0.975, bulk_n)))))
    xs = np.quantile(z, grid)
    xs[1:-1] = 0.25 * xs[:-2] + 0.5 * xs[1:-1] + 0.25 * xs[2:]
    xs = np.maximum.accumulate(xs)
    xs[0], xs[-1] = lo, hi
    xs, first = np.unique(xs, return_index=True)
    ys = grid[first].copy()
    ys[0], ys[-1] = 0.0, 1.0
    if len(xs) < 4:
        raise ValueError("degenerate samples: too few distinct quantiles")
    cdf = PchipInterpolator(xs, ys)
    return IntermediateDensity(kind="sampled", support=(lo, hi), cdf=cdf)


def build_intermediate_basis(dens: IntermediateDensity, order: int
                             ) -> tuple[OrthoBasis, QuadratureRule]:
    """Custom orthonormal basis and (order+1)-point Gauss rule for zeta."""
    integrator = dens.moment_rule(2 * order + 2)
    basis = stieltjes_basis(dens.as_distribution(), order,
                            integrator=integrator)
    return basis, golub_welsch(basis, order + 1)


# ---------------------------------------------------------------------------
# system-level propagation


def propagate_dc(model: StochasticDae, bases: Sequence[OrthoBasis],
                 order: int, options: SolverOptions = SolverOptions()
                 ) -> GpcExpansion:
    """Stochastic testing DC with the intermediate-variable bases."""
    idx = total_degree_index_set(model.d, order)
    tps = select_testing_points(bases, idx, options.condition_cap)
    return solve_dc(model, tps, bases, idx, options)


def propagate_transient(model: StochasticDae, bases: Sequence[OrthoBasis],
                        order: int, t_span, x0: GpcExpansion | None = None,
                        options: SolverOptions = SolverOptions()):
    idx = total_degree_index_set(model.d, order)
    tps = select_testing_points(bases, idx, options.condition_cap)
    return integrate_transient(model, tps, bases, idx, t_span, x0=x0,
                               options=options)


def demo_system(name: str, densities: Sequence[IntermediateDensity],
                **params) -> StochasticDae:
    """Registered system-level models taking intermediate inputs.

    'sum': y = zeta_1 + ... + zeta_q (algebraic).
    'rc_zeta': one-state RC charging circuit whose time constant is
    tau0 * (1 + spread * zeta_1); single block only.
    """
    dists = tuple(d.as_distribution() for d in densities)
    key = name.replace("-", "_")
    if key == "sum":
        q = len(dists)
        return algebraic_model(lambda z: [float(np.sum(z))], dists, 1,
                               labels=("sum",))
    if key == "rc_zeta":
        if len(dists) != 1:
            raise ValueError("rc_zeta takes exactly one intermediate input")
        r0 = params.get("r", 1e3)
        c0 = params.get("c", 1e-6)
        vin = params.get("vin", 1.0)
        spread = params.get("spread", 0.1)

        def f(x, z, t):
            return np.array([(x[0] - vin) / (r0 * (1.0 + spread * z[0]))])

        def df_dx(x, z, t):
            return np.array([[1.0 / (r0 * (1.0 + spread * z[0]))]])

        return StochasticDae(
            n=1, d=1, distributions=dists,
            q=lambda x, z: c0 * np.asarray(x, dtype=float),
            f=f, B=np.zeros((1, 0)), u=lambda t: np.zeros(0),
            dq_dx=lambda x, z: np.array([[c0]]), df_dx=df_dx,
            x0_guess=np.array([vin]), labels=("v_out",))
    raise KeyError(f"no demo system named '{name}'")
