"""Orthonormal polynomial families, Gauss quadrature and chaos expansions.

Each random input is an independent scalar with marginal density rho.  The
monic orthogonal family of rho obeys the three-term recurrence

    pi_{j+1}(x) = (x - gamma_j) pi_j(x) - kappa_j pi_{j-1}(x),
    pi_{-1} = 0,  pi_0 = 1,

with gamma_j = <x pi_j, pi_j> / <pi_j, pi_j> and
kappa_{j+1} = <pi_{j+1}, pi_{j+1}> / <pi_j, pi_j>, kappa_0 = 1.  The
normalized members phi_j = pi_j / sqrt(kappa_0 * ... * kappa_j) are
orthonormal under rho.  Gauss rules come from the eigen-decomposition of the
symmetric tridiagonal matrix of the recurrence; the multivariate basis is a
tensor product over a graded-lexicographic total-degree index set.

All value types here are immutable; operations are pure functions.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special
from scipy.linalg import eigh_tridiagonal

__all__ = [
    "Distribution",
    "OrthoBasis",
    "QuadratureRule",
    "MultiIndexSet",
    "GpcExpansion",
    "DegenerateMeasureError",
    "UnsupportedFamilyError",
    "make_standard_basis",
    "stieltjes_basis",
    "discrete_stieltjes",
    "golub_welsch",
    "total_degree_index_set",
    "eval_multivariate_basis",
    "tensor_quadrature",
    "gpc_eval",
    "gpc_mean_variance",
    "expansion_to_json",
    "expansion_from_json",
]

# Measures whose kappa_j falls below this floor cannot support an orthonormal
# family of that degree in double precision (inputs are expected at roughly
# unit scale; standardize wildly scaled parameters before building a basis).
KAPPA_FLOOR = 1e-20

# Tensor-product quadrature is refused above this dimension by default.
TENSOR_DIMENSION_CAP = 8

_JSON_SCHEMA = "gpc-expansion/1"


class DegenerateMeasureError(ValueError):
    """The measure cannot support an orthonormal family at some degree."""

    def __init__(self, degree: int, kappa: float):
        self.degree = degree
        self.kappa = kappa
        super().__init__(
            f"kappa_{degree} = {kappa:.3e} is at or below the numeric floor "
            f"{KAPPA_FLOOR:.0e}: the measure is numerically degenerate at "
            f"degree {degree}"
        )


class UnsupportedFamilyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# distributions


@dataclass(frozen=True)
class Distribution:
    """Scalar marginal distribution of one random input.

    Named kinds: "gaussian", "uniform", "gamma", "beta".  "custom" wraps a
    black-box density on a support interval; the density must be strictly
    positive on the interior of the support and integrate to one.
    """

    kind: str
    params: tuple[float, ...]
    support: tuple[float, float]
    density_fn: Callable[[np.ndarray], np.ndarray] | None = None

    # -- constructors -------------------------------------------------------

    @staticmethod
    def gaussian(mean: float, stddev: float) -> "Distribution":
        if stddev <= 0.0:
            raise ValueError(f"gaussian stddev must be positive, got {stddev}")
        return Distribution("gaussian", (float(mean), float(stddev)),
                            (-math.inf, math.inf))

    @staticmethod
    def uniform(lo: float, hi: float) -> "Distribution":
        if not hi > lo:
            raise ValueError(f"uniform requires lo < hi, got [{lo}, {hi}]")
        return Distribution("uniform", (float(lo), float(hi)),
                            (float(lo), float(hi)))

    @staticmethod
    def gamma(shape: float) -> "Distribution":
        if shape <= 0.0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        return Distribution("gamma", (float(shape),), (0.0, math.inf))

    @staticmethod
    def beta(a: float, b: float) -> "Distribution":
        if a <= 0.0 or b <= 0.0:
            raise ValueError(f"beta parameters must be positive, got ({a}, {b})")
        return Distribution("beta", (float(a), float(b)), (0.0, 1.0))

    @staticmethod
    def custom(density: Callable, support: tuple[float, float],
               validate: bool = True) -> "Distribution":
        lo, hi = float(support[0]), float(support[1])
        if not hi > lo:
            raise ValueError(f"support must be a nonempty interval, got [{lo}, {hi}]")
        dist = Distribution("custom", (), (lo, hi), density)
        if validate:
            dist._validate_custom()
        return dist

    # -- density / moments ---------------------------------------------------

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            mu, sig = self.params
            return np.exp(-0.5 * ((x - mu) / sig) ** 2) / (sig * math.sqrt(2 * math.pi))
        if self.kind == "uniform":
            lo, hi = self.params
            inside = (x >= lo) & (x <= hi)
            return np.where(inside, 1.0 / (hi - lo), 0.0)
        if self.kind == "gamma":
            (k,) = self.params
            scalar = x.ndim == 0
            xx = np.atleast_1d(x)
            out = np.zeros_like(xx)
            pos = xx > 0
            out[pos] = np.exp((k - 1) * np.log(xx[pos]) - xx[pos]
                              - special.gammaln(k))
            return out[0] if scalar else out
        if self.kind == "beta":
            a, b = self.params
            scalar = x.ndim == 0
            xx = np.atleast_1d(x)
            out = np.zeros_like(xx)
            inside = (xx > 0) & (xx < 1)
            lb = special.gammaln(a) + special.gammaln(b) - special.gammaln(a + b)
            out[inside] = np.exp((a - 1) * np.log(xx[inside])
                                 + (b - 1) * np.log1p(-xx[inside]) - lb)
            return out[0] if scalar else out
        return np.asarray(self.density_fn(x), dtype=float)

    def mean(self) -> float:
        if self.kind == "gaussian":
            return self.params[0]
        if self.kind == "uniform":
            return 0.5 * (self.params[0] + self.params[1])
        if self.kind == "gamma":
            return self.params[0]
        if self.kind == "beta":
            a, b = self.params
            return a / (a + b)
        return self._custom_moments[0]

    def stddev(self) -> float:
        if self.kind == "gaussian":
            return self.params[1]
        if self.kind == "uniform":
            lo, hi = self.params
            return (hi - lo) / math.sqrt(12.0)
        if self.kind == "gamma":
            return math.sqrt(self.params[0])
        if self.kind == "beta":
            a, b = self.params
            return math.sqrt(a * b / ((a + b) ** 2 * (a + b + 1)))
        return self._custom_moments[1]

    # -- cdf and inverse -----------------------------------------------------

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            mu, sig = self.params
            return special.ndtr((x - mu) / sig)
        if self.kind == "uniform":
            lo, hi = self.params
            return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
        if self.kind == "gamma":
            (k,) = self.params
            return special.gammainc(k, np.maximum(x, 0.0))
        if self.kind == "beta":
            a, b = self.params
            return special.betainc(a, b, np.clip(x, 0.0, 1.0))
        return self._custom_cdf_eval(x)

    def inv_cdf(self, u) -> np.ndarray:
        """Quantile function; maps (0, 1) onto the support interior."""
        u = np.asarray(u, dtype=float)
        if np.any((u < 0.0) | (u > 1.0)):
            raise ValueError("quantile argument must lie in [0, 1]")
        if self.kind == "gaussian":
            mu, sig = self.params
            return mu + sig * special.ndtri(u)
        if self.kind == "uniform":
            lo, hi = self.params
            return lo + (hi - lo) * u
        if self.kind == "gamma":
            (k,) = self.params
            return special.gammaincinv(k, u)
        if self.kind == "beta":
            a, b = self.params
            return special.betaincinv(a, b, u)
        return self._custom_inv_cdf_eval(u)

    def median(self) -> float:
        return float(self.inv_cdf(0.5))

    # -- numerics for custom densities --------------------------------------

    def effective_interval(self) -> tuple[float, float]:
        """Finite interval carrying the measure's mass, for quadrature.

        Gaussian supports truncate at +-12 standard deviations (the excluded
        mass is ~1e-33, negligible against every tolerance here).  The slower
        gamma tail instead uses a far quantile with headroom, and custom
        unbounded densities keep the window found by the mass scan.
        """
        lo, hi = self.support
        if math.isfinite(lo) and math.isfinite(hi):
            return lo, hi
        if self.kind == "gaussian":
            mu, sig = self.params
            return mu - 12.0 * sig, mu + 12.0 * sig
        if self.kind == "gamma":
            (k,) = self.params
            far = float(special.gammaincinv(k, 1.0 - 1e-16))
            return 0.0, 1.5 * far + 10.0
        self._custom_moments  # materialize the scan
        a, b = self._custom_window
        return a, b

    @cached_property
    def _custom_moments(self) -> tuple[float, float]:
        # window-scan: grow a window until the captured mass stabilizes, then
        # compute mean/stddev on it; the converged window is kept for later
        # quadrature over this density
        lo, hi = self.support
        if math.isfinite(lo) and math.isfinite(hi):
            a, b = lo, hi
            x, w = _panel_rule(a, b, 64)
        else:
            c = 0.0
            if math.isfinite(lo):
                c = lo + 1.0
            elif math.isfinite(hi):
                c = hi - 1.0
            width, mass_prev = 1.0, -1.0
            for _ in range(60):
                a = c - width if not math.isfinite(lo) else lo
                b = c + width if not math.isfinite(hi) else hi
                x, w = _panel_rule(a, b, 64)
                mass = float(np.sum(w * self.density(x)))
                if mass > 0 and abs(mass - mass_prev) < 1e-13:
                    break
                mass_prev = mass
                width *= 2.0
        object.__setattr__(self, "_custom_window", (float(a), float(b)))
        rho = self.density(x)
        mass = float(np.sum(w * rho))
        m = float(np.sum(w * rho * x)) / mass
        var = float(np.sum(w * rho * (x - m) ** 2)) / mass
        return m, math.sqrt(max(var, 0.0))

    @cached_property
    def _custom_cdf_table(self):
        from scipy.interpolate import PchipInterpolator

        a, b = self.effective_interval()
        cuts = _panel_cuts(a, b, 512)
        gx, gw = np.polynomial.legendre.leggauss(24)
        masses = np.empty(len(cuts) - 1)
        for i, (lo, hi) in enumerate(zip(cuts[:-1], cuts[1:])):
            h = 0.5 * (hi - lo)
            masses[i] = h * float(np.sum(gw * self.density(0.5 * (lo + hi) + h * gx)))
        vals = np.concatenate(([0.0], np.cumsum(masses)))
        vals = np.maximum.accumulate(vals) / vals[-1]
        return PchipInterpolator(cuts, vals), a, b

    def _custom_cdf_eval(self, x):
        interp, a, b = self._custom_cdf_table
        x = np.asarray(x, dtype=float)
        return np.clip(interp(np.clip(x, a, b)), 0.0, 1.0)

    def _custom_inv_cdf_eval(self, u):
        from scipy.optimize import brentq

        interp, a, b = self._custom_cdf_table
        scalar = np.ndim(u) == 0
        uu = np.atleast_1d(np.asarray(u, dtype=float))
        out = np.empty_like(uu)
        for i, ui in enumerate(uu):
            if ui <= 0.0:
                out[i] = a
            elif ui >= 1.0:
                out[i] = b
            else:
                out[i] = brentq(lambda t: float(interp(t)) - ui, a, b,
                                xtol=1e-14, rtol=8.9e-16)
        return out[0] if scalar else out

    def _validate_custom(self) -> None:
        a, b = self.effective_interval()
        # positivity probe on the interior (hypothesis behind the quantile
        # transform and the Stieltjes construction)
        probes = a + (b - a) * (np.arange(1, 402) / 402.0)
        vals = np.asarray(self.density(probes), dtype=float)
        if np.any(vals <= 0.0) or not np.all(np.isfinite(vals)):
            bad = probes[~(np.isfinite(vals) & (vals > 0.0))][0]
            raise ValueError(
                f"custom density must be strictly positive and finite on the "
                f"interior of its support; rho({bad:.6g}) violates this")
        x, w = _panel_rule(a, b, 256)
        mass = float(np.sum(w * self.density(x)))
        if abs(mass - 1.0) > 1e-8:
            raise ValueError(
                f"custom density integrates to {mass:.10f}, expected 1 within 1e-8")


def _panel_cuts(a: float, b: float, panels: int) -> np.ndarray:
    """Panel breakpoints on [a, b]: uniform, with the two boundary panels
    subdivided geometrically toward the endpoints so integrable endpoint
    singularities converge too."""
    edges = np.linspace(a, b, panels + 1)
    left = [edges[0] + (edges[1] - edges[0]) * 0.25 ** k for k in range(6, 0, -1)]
    right = [edges[-1] - (edges[-1] - edges[-2]) * 0.25 ** k for k in range(1, 7)]
    if panels == 1:
        return np.concatenate(([edges[0]], left, right, [edges[-1]]))
    return np.concatenate(([edges[0]], left, edges[1:-1], right, [edges[-1]]))


def _panel_rule(a: float, b: float, panels: int,
                pts: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on [a, b] over the graded panel cuts."""
    cuts = _panel_cuts(a, b, panels)
    gx, gw = np.polynomial.legendre.leggauss(pts)
    xs, ws = [], []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        h = 0.5 * (hi - lo)
        xs.append(0.5 * (lo + hi) + h * gx)
        ws.append(h * gw)
    return np.concatenate(xs), np.concatenate(ws)


# ---------------------------------------------------------------------------
# orthonormal bases


@dataclass(frozen=True)
class OrthoBasis:
    """Recurrence data of one orthonormal univariate family.

    gamma and kappa both hold order+1 entries (gamma_0..gamma_p and
    kappa_0..kappa_p with kappa_0 = 1); the extra gamma_p beyond the
    evaluation recurrence is what the (order+1)-point Gauss rule needs.
    norms[j] = sqrt(kappa_0 * ... * kappa_j).
    """

    gamma: np.ndarray
    kappa: np.ndarray
    norms: np.ndarray
    order: int
    distribution: Distribution | None

    def __post_init__(self):
        for name in ("gamma", "kappa", "norms"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(self.gamma) != self.order + 1 or len(self.kappa) != self.order + 1:
            raise ValueError("recurrence arrays must hold order+1 entries")
        if self.kappa[0] != 1.0:
            raise ValueError("kappa_0 must equal 1")

    def eval_table(self, x) -> np.ndarray:
        """Values phi_j(x) for j = 0..order; shape (..., order+1)."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape + (self.order + 1,))
        pim1 = np.zeros_like(x)
        pi = np.ones_like(x)
        out[..., 0] = pi / self.norms[0]
        for j in range(self.order):
            pinext = (x - self.gamma[j]) * pi - self.kappa[j] * pim1
            pim1, pi = pi, pinext
            out[..., j + 1] = pi / self.norms[j + 1]
        return out

    def eval_one(self, j: int, x) -> np.ndarray:
        if not 0 <= j <= self.order:
            raise ValueError(f"degree {j} outside basis order {self.order}")
        return self.eval_table(x)[..., j]


def _basis_from_monic(gamma: np.ndarray, kappa: np.ndarray, order: int,
                      dist: Distribution | None) -> OrthoBasis:
    kappa = np.asarray(kappa, dtype=float)
    floor_hits = np.nonzero(kappa[1:] <= KAPPA_FLOOR)[0]
    if floor_hits.size:
        j = int(floor_hits[0]) + 1
        raise DegenerateMeasureError(j, float(kappa[j]))
    norms = np.sqrt(np.cumprod(kappa))
    return OrthoBasis(np.asarray(gamma, dtype=float), kappa, norms, order, dist)


def make_standard_basis(dist: Distribution, order: int) -> OrthoBasis:
    """Closed-form recurrence for the named families, shifted and scaled.

    gaussian -> Hermite, uniform -> Legendre, gamma -> Laguerre,
    beta -> Jacobi.  Custom densities are rejected; use stieltjes_basis.
    """
    if order < 0:
        raise ValueError("order must be nonnegative")
    m = order + 1  # recurrence entries gamma_0..gamma_p, kappa_0..kappa_p
    j = np.arange(m, dtype=float)
    if dist.kind == "gaussian":
        mu, sig = dist.params
        gamma = np.full(m, mu)
        kappa = np.where(j == 0, 1.0, j * sig * sig)
    elif dist.kind == "uniform":
        lo, hi = dist.params
        c, h = 0.5 * (lo + hi), 0.5 * (hi - lo)
        gamma = np.full(m, c)
        with np.errstate(divide="ignore", invalid="ignore"):
            kappa = h * h * j * j / (4.0 * j * j - 1.0)
        kappa[0] = 1.0
    elif dist.kind == "gamma":
        (k,) = dist.params
        gamma = 2.0 * j + k
        kappa = j * (j + k - 1.0)
        kappa[0] = 1.0
    elif dist.kind == "beta":
        a, b = dist.params
        gamma, kappa = _jacobi_monic_01(a, b, m)
    else:
        raise UnsupportedFamilyError(
            f"no closed-form recurrence for kind '{dist.kind}'; "
            "use stieltjes_basis")
    return _basis_from_monic(gamma, kappa, order, dist)


def _jacobi_monic_01(a: float, b: float, m: int):
    """Monic recurrence for the beta(a, b) weight on [0, 1].

    Jacobi parameters on [-1, 1] are A = b-1, B = a-1; the affine map to
    [0, 1] shifts gamma and scales kappa by 1/4.
    """
    A, B = b - 1.0, a - 1.0
    gamma_t = np.empty(m)
    kappa_t = np.empty(m)
    kappa_t[0] = 1.0
    for n in range(m):
        s = 2.0 * n + A + B
        if n == 0:
            gamma_t[0] = (B - A) / (A + B + 2.0)
        else:
            gamma_t[n] = (B * B - A * A) / (s * (s + 2.0))
        if n == 1:
            # the generic formula has a removable 0/0 at A+B = -1
            kappa_t[1] = 4.0 * (1 + A) * (1 + B) / ((2 + A + B) ** 2 * (3 + A + B))
        elif n >= 2:
            kappa_t[n] = (4.0 * n * (n + A) * (n + B) * (n + A + B)
                          / (s * s * (s + 1.0) * (s - 1.0)))
    return 0.5 * (gamma_t + 1.0), np.where(np.arange(m) == 0, 1.0, kappa_t / 4.0)


def discrete_stieltjes(points: np.ndarray, weights: np.ndarray,
                       order: int) -> tuple[np.ndarray, np.ndarray]:
    """Monic recurrence coefficients of a discrete measure sum w_i d(x_i).

    Returns (gamma_0..gamma_p, kappa_0..kappa_p).  Raises
    DegenerateMeasureError when some kappa_j falls to the numeric floor,
    naming the failing degree.
    """
    x = np.asarray(points, dtype=float)
    w = np.asarray(weights, dtype=float)
    gamma = np.empty(order + 1)
    kappa = np.empty(order + 1)
    kappa[0] = 1.0
    pim1 = np.zeros_like(x)
    pi = np.ones_like(x)
    s_cur = float(np.sum(w))
    for j in range(order + 1):
        gamma[j] = float(np.sum(w * x * pi * pi)) / s_cur
        if j == order:
            break
        pinext = (x - gamma[j]) * pi - (kappa[j] if j > 0 else 0.0) * pim1
        s_next = float(np.sum(w * pinext * pinext))
        kappa[j + 1] = s_next / s_cur
        if not kappa[j + 1] > KAPPA_FLOOR:
            raise DegenerateMeasureError(j + 1, kappa[j + 1])
        pim1, pi = pi, pinext
        s_cur = s_next
    return gamma, kappa


def stieltjes_basis(dist: Distribution, order: int,
                    integrator: "QuadratureRule | None" = None) -> OrthoBasis:
    """Orthonormal basis for an arbitrary density via the Stieltjes procedure.

    The moment integrals are evaluated with an adaptive composite Gauss rule
    (panel count doubled until gamma and kappa move by less than 1e-10), or
    with the supplied integrator, a quadrature rule representing the
    probability measure itself (weights sum to one, density folded in) that
    resolves polynomials of degree >= 2*order + 2.
    """
    if order < 0:
        raise ValueError("order must be nonnegative")
    if integrator is not None:
        if integrator.exact_degree is not None and \
                integrator.exact_degree < 2 * order + 2:
            raise ValueError(
                f"integrator resolves degree {integrator.exact_degree} but the "
                f"order-{order} construction needs {2 * order + 2}")
        gamma, kappa = discrete_stieltjes(integrator.points, integrator.weights,
                                          order)
        return _basis_from_monic(gamma, kappa, order, dist)

    a, b = dist.effective_interval()
    prev = None
    panels = 8
    while panels <= 4096:
        x, w = _panel_rule(a, b, panels)
        rho = np.asarray(dist.density(x), dtype=float)
        gamma, kappa = discrete_stieltjes(x, w * rho, order)
        if prev is not None:
            dg = np.max(np.abs(gamma - prev[0]) / np.maximum(1.0, np.abs(gamma)))
            dk = np.max(np.abs(kappa - prev[1]) / np.maximum(1.0, np.abs(kappa)))
            if max(dg, dk) < 1e-10:
                return _basis_from_monic(gamma, kappa, order, dist)
        prev = (gamma, kappa)
        panels *= 2
    raise RuntimeError(
        "stieltjes recurrence did not stabilize to 1e-10; the density may be "
        "too irregular for the composite Gauss integrator")


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a positive quadrature rule with unit mass.

    points has shape (npts,) for dimension 1 and (npts, d) otherwise.
    exact_degree is the per-axis polynomial exactness (None if unknown).
    """

    points: np.ndarray
    weights: np.ndarray
    dimension: int
    exact_degree: int | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        if np.any(w <= 0.0):
            raise ValueError("quadrature weights must be strictly positive")
        if abs(float(np.sum(w)) - 1.0) > 1e-10:
            raise ValueError(
                f"quadrature weights sum to {float(np.sum(w)):.15f}, "
                "expected 1 within 1e-10")

    def __len__(self) -> int:
        return len(self.weights)


def golub_welsch(basis: OrthoBasis, n: int) -> QuadratureRule:
    """n-point Gauss rule from the basis recurrence (Jacobi-matrix route).

    The symmetric tridiagonal matrix has diagonal gamma_0..gamma_{n-1} and
    off-diagonal sqrt(kappa_1)..sqrt(kappa_{n-1}); its eigenvalues are the
    nodes and the squared first eigenvector components the weights.
    """
    if n < 1:
        raise ValueError("rule size must be at least 1")
    if n > basis.order + 1:
        raise ValueError(
            f"{n}-point rule needs recurrence depth {n} but the basis holds "
            f"order {basis.order} (max {basis.order + 1} points)")
    diag = basis.gamma[:n]
    off = np.sqrt(basis.kappa[1:n])
    try:
        vals, vecs = eigh_tridiagonal(diag, off)
    except Exception as exc:  # pragma: no cover - LAPACK failure is exotic
        raise RuntimeError(f"Gauss-rule eigensolver failed: {exc}") from exc
    w = vecs[0, :] ** 2
    return QuadratureRule(vals, w, 1, exact_degree=2 * n - 1)


def tensor_quadrature(rules: Sequence[QuadratureRule],
                      cap: int = TENSOR_DIMENSION_CAP) -> QuadratureRule:
    """Tensor product of univariate rules; refuses above the dimension cap."""
    d = len(rules)
    if d == 0:
        raise ValueError("need at least one rule")
    if d > cap:
        raise ValueError(
            f"tensor grid in {d} dimensions exceeds the cap of {cap}; use the "
            "anchored decomposition in the anova module for high-dimensional "
            "problems")
    for r in rules:
        if r.dimension != 1:
            raise ValueError("tensor factors must be univariate rules")
    grids = np.meshgrid(*[r.points for r in rules], indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=-1)
    w = np.ones(1)
    for r in rules:
        w = np.multiply.outer(w, r.weights).reshape(-1)
    degs = [r.exact_degree for r in rules]
    exact = None if any(g is None for g in degs) else min(degs)
    return QuadratureRule(pts, w, d, exact_degree=exact)


# ---------------------------------------------------------------------------
# multi-index sets


@dataclass(frozen=True)
class MultiIndexSet:
    """Ordered set of d-dimensional multi-indices."""

    dimension: int
    total_order: int
    indices: np.ndarray  # (K, d) integer array

    def __post_init__(self):
        arr = np.asarray(self.indices, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[1] != self.dimension:
            raise ValueError("indices must form a (K, d) array")
        arr.setflags(write=False)
        object.__setattr__(self, "indices", arr)

    def __len__(self) -> int:
        return self.indices.shape[0]

    @cached_property
    def _position(self) -> dict:
        return {tuple(int(v) for v in row): k
                for k, row in enumerate(self.indices)}

    def position(self, alpha: Sequence[int]) -> int:
        return self._position[tuple(int(v) for v in alpha)]

    def __contains__(self, alpha) -> bool:
        return tuple(int(v) for v in alpha) in self._position

    @staticmethod
    def explicit(indices, dimension: int) -> "MultiIndexSet":
        arr = np.asarray(indices, dtype=np.int64).reshape(-1, dimension)
        order = int(arr.sum(axis=1).max()) if arr.size else 0
        return MultiIndexSet(dimension, order, arr)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def total_degree_index_set(dimension: int, order: int) -> MultiIndexSet:
    """All alpha with |alpha|_1 <= order, graded-lexicographic.

    Indices are sorted by total degree, then ascending lexicographically
    within each degree level.  Size is C(order + dimension, dimension).
    """
    if dimension < 0:
        raise ValueError("dimension must be nonnegative")
    if order < 0:
        raise ValueError("order must be nonnegative")
    if dimension == 0:
        # deterministic degenerate case: the single empty index
        return MultiIndexSet(0, 0, np.zeros((1, 0), dtype=np.int64))
    count = math.comb(order + dimension, dimension)
    if count > 2**31 - 1:
        raise OverflowError(
            f"index set of size {count} exceeds the 32-bit bound; a dense "
            "total-degree basis this large is not representable")
    rows = []
    for g in range(order + 1):
        rows.extend(_compositions(g, dimension))
    idx = MultiIndexSet(dimension, order, np.array(rows, dtype=np.int64))
    assert len(idx) == count
    return idx


def eval_multivariate_basis(index_set: MultiIndexSet,
                            bases: Sequence[OrthoBasis],
                            point: np.ndarray) -> np.ndarray:
    """Vector of the K multivariate basis values H_alpha(point)."""
    point = np.asarray(point, dtype=float)
    if point.shape != (index_set.dimension,):
        raise ValueError(
            f"point must have shape ({index_set.dimension},), got {point.shape}")
    return _basis_matrix(index_set, bases, point[None, :])[0]


def _basis_matrix(index_set: MultiIndexSet, bases: Sequence[OrthoBasis],
                  points: np.ndarray) -> np.ndarray:
    """(N, K) matrix of basis values at N points."""
    if len(bases) != index_set.dimension:
        raise ValueError("one univariate basis per dimension is required")
    out = np.ones((points.shape[0], len(index_set)))
    for k, basis in enumerate(bases):
        maxdeg = int(index_set.indices[:, k].max()) if len(index_set) else 0
        if maxdeg > basis.order:
            raise ValueError(
                f"index set uses degree {maxdeg} in dimension {k} but the "
                f"basis there has order {basis.order}")
        table = basis.eval_table(points[:, k])
        out *= table[:, index_set.indices[:, k]]
    return out


# ---------------------------------------------------------------------------
# expansions


@dataclass(frozen=True)
class GpcExpansion:
    """Spectral expansion x(xi) = sum_alpha c_alpha H_alpha(xi).

    coefficients has shape (K, n): one length-n coefficient vector per
    multi-index, n being the number of simultaneously expanded outputs.
    """

    index_set: MultiIndexSet
    coefficients: np.ndarray
    bases: tuple[OrthoBasis, ...]

    def __post_init__(self):
        arr = np.asarray(self.coefficients, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.shape[0] != len(self.index_set):
            raise ValueError(
                f"coefficient count {arr.shape[0]} does not match the "
                f"index set size {len(self.index_set)}")
        arr.setflags(write=False)
        object.__setattr__(self, "coefficients", arr)
        object.__setattr__(self, "bases", tuple(self.bases))
        if len(self.bases) != self.index_set.dimension:
            raise ValueError("one basis per dimension is required")

    @property
    def dimension(self) -> int:
        return self.index_set.dimension

    @property
    def n_outputs(self) -> int:
        return self.coefficients.shape[1]

    def eval(self, point, check_support: bool = True) -> np.ndarray:
        return gpc_eval(self, point, check_support)

    def eval_many(self, points: np.ndarray) -> np.ndarray:
        """(N, n) values at N points; no support checking."""
        points = np.asarray(points, dtype=float).reshape(-1, self.dimension)
        return _basis_matrix(self.index_set, self.bases, points) @ self.coefficients

    def mean_variance(self) -> tuple[np.ndarray, np.ndarray]:
        return gpc_mean_variance(self)

    def scalar_coefficients(self) -> np.ndarray:
        if self.n_outputs != 1:
            raise ValueError("expansion holds more than one output")
        return self.coefficients[:, 0]


def gpc_eval(expansion: GpcExpansion, point, check_support: bool = True
             ) -> np.ndarray:
    """Evaluate the expansion at one parameter point.

    Points outside a marginal's support are legal (polynomial extrapolation)
    but trigger a RuntimeWarning when check_support is set.
    """
    point = np.asarray(point, dtype=float)
    if check_support:
        for k, basis in enumerate(expansion.bases):
            dist = basis.distribution
            if dist is None:
                continue
            lo, hi = dist.support
            if not lo <= point[k] <= hi:
                warnings.warn(
                    f"evaluation point {point[k]:.6g} lies outside the "
                    f"support of input {k}; extrapolating", RuntimeWarning,
                    stacklevel=2)
    H = eval_multivariate_basis(expansion.index_set, expansion.bases, point)
    return H @ expansion.coefficients


def gpc_mean_variance(expansion: GpcExpansion) -> tuple[np.ndarray, np.ndarray]:
    """Mean and variance per output, read off the orthonormal coefficients."""
    c = expansion.coefficients
    zero = tuple([0] * expansion.dimension)
    if zero in expansion.index_set:
        k0 = expansion.index_set.position(zero)
        mean = c[k0].copy()
    else:
        k0 = -1
        mean = np.zeros(c.shape[1])
    mask = np.ones(c.shape[0], dtype=bool)
    if k0 >= 0:
        mask[k0] = False
    var = np.sum(c[mask] ** 2, axis=0)
    return mean, var


# ---------------------------------------------------------------------------
# serialization


def _family_dict(basis: OrthoBasis) -> dict:
    dist = basis.distribution
    entry: dict = {"order": basis.order,
                   "gamma": [float(v) for v in basis.gamma],
                   "kappa": [float(v) for v in basis.kappa]}
    if dist is None or dist.kind == "custom":
        entry["kind"] = "custom"
        return entry
    entry["kind"] = dist.kind
    names = {"gaussian": ("mean", "stddev"), "uniform": ("lo", "hi"),
             "gamma": ("shape",), "beta": ("a", "b")}[dist.kind]
    for name, value in zip(names, dist.params):
        entry[name] = float(value)
    return entry


def _family_from_dict(entry: dict) -> OrthoBasis:
    kind = entry["kind"]
    if kind == "gaussian":
        dist = Distribution.gaussian(entry["mean"], entry["stddev"])
    elif kind == "uniform":
        dist = Distribution.uniform(entry["lo"], entry["hi"])
    elif kind == "gamma":
        dist = Distribution.gamma(entry["shape"])
    elif kind == "beta":
        dist = Distribution.beta(entry["a"], entry["b"])
    elif kind == "custom":
        dist = None
    else:
        raise UnsupportedFamilyError(f"unknown family kind '{kind}'")
    kappa = np.asarray(entry["kappa"], dtype=float)
    return OrthoBasis(np.asarray(entry["gamma"], dtype=float), kappa,
                      np.sqrt(np.cumprod(kappa)), int(entry["order"]), dist)


def expansion_to_json(expansion: GpcExpansion) -> str:
    """Serialize to the documented JSON schema; binary64 exact round-trip."""
    doc = {
        "schema": _JSON_SCHEMA,
        "dimension": expansion.dimension,
        "order": expansion.index_set.total_order,
        "families": [_family_dict(b) for b in expansion.bases],
        "indices": [[int(v) for v in row] for row in expansion.index_set.indices],
        "coefficients": [[float(v) for v in row] for row in expansion.coefficients],
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def expansion_from_json(text: str) -> GpcExpansion:
    doc = json.loads(text)
    if doc.get("schema") != _JSON_SCHEMA:
        raise ValueError(f"unrecognized expansion schema {doc.get('schema')!r}")
    d = int(doc["dimension"])
    idx = MultiIndexSet.explicit(np.asarray(doc["indices"], dtype=np.int64), d)
    bases = tuple(_family_from_dict(e) for e in doc["families"])
    coeffs = np.asarray(doc["coefficients"], dtype=float)
    return GpcExpansion(idx, coeffs, bases)
