"""Stochastic testing solver.

The spectral expansion x(t, xi) = sum_k xhat_k(t) Phi_k(xi) is determined by
collocating the model at K testing points: candidates are the nodes of the
tensor Gauss grid (order p+1 per dimension), and the K points with the
largest tensor weights that keep the collocation matrix V[j, k] =
Phi_k(xi_j) well conditioned are kept.  Because V is square and invertible,
every Newton iteration and every implicit time step decouples into K
independent n-by-n solves in point space; coefficients are recovered as
V^-1 X whenever an expansion is needed.

Time integration is trapezoidal with a backward-Euler startup step, one
shared adaptive step sequence for all testing points, local error estimated
from a polynomial predictor, and error-per-unit-step acceptance.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .models import StochasticDae
from .polychaos import (GpcExpansion, MultiIndexSet, OrthoBasis,
                        expansion_to_json, golub_welsch, tensor_quadrature,
                        total_degree_index_set, _basis_matrix)

__all__ = [
    "SolverError",
    "SolverOptions",
    "TestingPointSet",
    "StSolution",
    "select_testing_points",
    "newton_dc",
    "solve_dc",
    "solve_dc_monolithic",
    "recover_coefficients",
    "integrate_transient",
    "integrate_deterministic",
    "standard_bases",
]

CONDITION_CAP = 1e8
RECOVERY_RESIDUAL_CAP = 1e-12


class SolverError(RuntimeError):
    """Newton divergence or step-size underflow; carries diagnostics."""

    def __init__(self, message: str, residual: float | None = None,
                 time: float | None = None):
        super().__init__(message)
        self.residual = residual
        self.time = time


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and caps shared by the DC and transient drivers."""

    dc_tol_scale: float = 1e-9        # Newton residual tol = scale * n
    newton_max_iter: int = 50
    newton_max_damping: int = 8
    condition_cap: float = CONDITION_CAP
    lte_tol: float = 1e-6             # transient error per unit time
    min_step_fraction: float = 1e-12  # of the span; underflow below this
    max_step_fraction: float = 0.1
    accepts_before_double: int = 5
    fixed_step: float | None = None   # disables step control when set
    threads: int = 1

    def dc_tol(self, n: int) -> float:
        return self.dc_tol_scale * n


def standard_bases(model_or_dists, order: int) -> tuple[OrthoBasis, ...]:
    """Orthonormal basis per random input, from its distribution."""
    from .polychaos import make_standard_basis, stieltjes_basis

    dists = getattr(model_or_dists, "distributions", model_or_dists)
    bases = []
    for dist in dists:
        if dist.kind == "custom":
            bases.append(stieltjes_basis(dist, order))
        else:
            bases.append(make_standard_basis(dist, order))
    return tuple(bases)


@dataclass(frozen=True)
class TestingPointSet:
    """K selected points, the collocation matrix V, and its condition."""

    points: np.ndarray   # (K, d)
    V: np.ndarray        # (K, K), V[j, k] = Phi_k(points[j])
    condition: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        V = np.asarray(self.V, dtype=float)
        pts.setflags(write=False)
        V.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "V", V)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def select_testing_points(bases: Sequence[OrthoBasis], idx: MultiIndexSet,
                          condition_cap: float = CONDITION_CAP
                          ) -> TestingPointSet:
    """Greedy selection of K tensor-Gauss nodes by descending weight.

    A candidate is kept only if it raises the rank of the partial
    collocation matrix and keeps its condition number at or below the cap.
    Ties in weight are broken by ascending lexicographic point order so the
    selection is deterministic.
    """
    K = len(idx)
    d = idx.dimension
    if d == 0:
        return TestingPointSet(np.zeros((1, 0)), np.ones((1, 1)), 1.0)
    if len(bases) != d:
        raise ValueError("need one basis per dimension")
    order = idx.total_order
    rules = [golub_welsch(b, order + 1) for b in bases]
    grid = tensor_quadrature(rules)

    pts = grid.points
    keys = tuple(pts[:, k] for k in reversed(range(d))) + (-grid.weights,)
    candidate_order = np.lexsort(keys)

    Phi = _basis_matrix(idx, tuple(bases), pts)  # (N, K)

    chosen: list[int] = []
    ortho = np.zeros((0, K))  # orthonormal row-space basis of V so far
    V_rows = np.zeros((0, K))
    for cand in candidate_order:
        if len(chosen) == K:
            break
        row = Phi[cand]
        resid = row - ortho.T @ (ortho @ row)
        if np.linalg.norm(resid) <= 1e-12 * max(1.0, np.linalg.norm(row)):
            continue  # would not raise the rank
        trial = np.vstack([V_rows, row])
        s = np.linalg.svd(trial, compute_uv=False)
        if s[0] / s[-1] > condition_cap:
            continue
        V_rows = trial
        chosen.append(int(cand))
        ortho = np.vstack([ortho, resid / np.linalg.norm(resid)])
    if len(chosen) < K:
        raise SolverError(
            f"only {len(chosen)} of {K} testing points satisfy the rank and "
            f"condition-{condition_cap:g} screens")
    s = np.linalg.svd(V_rows, compute_uv=False)
    return TestingPointSet(pts[chosen], V_rows, float(s[0] / s[-1]))


# ---------------------------------------------------------------------------
# deterministic primitives (also used by the Monte Carlo driver)


def _damped_newton(residual: Callable, jacobian: Callable, x0: np.ndarray,
                   tol: float, max_iter: int, max_damping: int):
    """Newton with residual-norm damping; returns (x, final norm) or raises."""
    x = np.array(x0, dtype=float)
    r = residual(x)
    rnorm = np.linalg.norm(r)
    for _ in range(max_iter):
        if rnorm <= tol:
            return x, rnorm
        try:
            step = np.linalg.solve(jacobian(x), -r)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular Jacobian in Newton iteration: {exc}",
                              residual=float(rnorm)) from None
        lam = 1.0
        for _ in range(max_damping):
            xn = x + lam * step
            rn = residual(xn)
            rn_norm = np.linalg.norm(rn)
            if rn_norm < rnorm:
                break
            lam *= 0.5
        else:
            xn = x + lam * step
            rn = residual(xn)
            rn_norm = np.linalg.norm(rn)
        x, r, rnorm = xn, rn, rn_norm
    if rnorm <= tol:
        return x, rnorm
    raise SolverError(
        f"Newton did not converge in {max_iter} iterations "
        f"(residual {rnorm:.3e}, tol {tol:.3e})", residual=float(rnorm))


def newton_dc(model: StochasticDae, xi: np.ndarray,
              x0: np.ndarray | None = None, t: float = 0.0,
              options: SolverOptions = SolverOptions()) -> np.ndarray:
    """DC operating point at one parameter sample: f(x, xi, t) = B u(t)."""
    rhs = model.B @ model.u(t)
    start = model.initial_guess() if x0 is None else np.asarray(x0, float)
    x, _ = _damped_newton(
        lambda y: model.f(y, xi, t) - rhs,
        lambda y: model.jac_f(y, xi, t),
        start, options.dc_tol(model.n),
        options.newton_max_iter, options.newton_max_damping)
    return x


def _map_points(fn: Callable, items, threads: int):
    """Index-stable map, optionally on a thread pool."""
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def recover_coefficients(values: np.ndarray, tps: TestingPointSet,
                         idx: MultiIndexSet,
                         bases: Sequence[OrthoBasis]) -> GpcExpansion:
    """Solve V xhat = values with one refinement pass; checks the residual."""
    X = np.asarray(values, dtype=float).reshape(tps.n_points, -1)
    coeffs = np.linalg.solve(tps.V, X)
    coeffs += np.linalg.solve(tps.V, X - tps.V @ coeffs)  # refinement
    rel = (np.linalg.norm(tps.V @ coeffs - X)
           / max(np.linalg.norm(X), 1e-300))
    if rel > RECOVERY_RESIDUAL_CAP:
        raise SolverError(
            f"coefficient recovery residual {rel:.3e} exceeds "
            f"{RECOVERY_RESIDUAL_CAP:g}; V may be ill conditioned")
    return GpcExpansion(idx, coeffs, tuple(bases))


def solve_dc(model: StochasticDae, tps: TestingPointSet,
             bases: Sequence[OrthoBasis], idx: MultiIndexSet,
             options: SolverOptions = SolverOptions()) -> GpcExpansion:
    """Decoupled stochastic DC: K independent Newton solves, then V^-1."""
    nominal = newton_dc(model, model.nominal_parameters(), options=options)

    def solve_point(j):
        return newton_dc(model, tps.points[j], x0=nominal, options=options)

    X = np.array(_map_points(solve_point, range(tps.n_points),
                             options.threads))
    return recover_coefficients(X, tps, idx, tuple(bases))


def solve_dc_monolithic(model: StochasticDae, tps: TestingPointSet,
                        bases: Sequence[OrthoBasis], idx: MultiIndexSet,
                        options: SolverOptions = SolverOptions()
                        ) -> GpcExpansion:
    """Reference implementation: one coupled Newton on all nK unknowns.

    The unknown is the stacked coefficient matrix C (K, n); the residual
    stacks the model equations at every testing point evaluated at
    x_j = V[j] C.  Exists to validate the decoupled route on small cases.
    """
    K, n = tps.n_points, model.n
    V = tps.V
    t = 0.0
    rhs = model.B @ model.u(t)

    def unpack(z):
        return z.reshape(K, n)

    def residual(z):
        C = unpack(z)
        X = V @ C
        return np.concatenate([
            model.f(X[j], tps.points[j], t) - rhs for j in range(K)])

    def jacobian(z):
        C = unpack(z)
        X = V @ C
        J = np.zeros((K * n, K * n))
        for j in range(K):
            Jf = model.jac_f(X[j], tps.points[j], t)
            for k in range(K):
                J[j * n:(j + 1) * n, k * n:(k + 1) * n] = V[j, k] * Jf
        return J

    nominal = newton_dc(model, model.nominal_parameters(), options=options)
    C0 = np.zeros((K, n))
    C0 += np.linalg.solve(V, np.tile(nominal, (K, 1)))
    z, _ = _damped_newton(residual, jacobian, C0.ravel(),
                          options.dc_tol(model.n) * np.sqrt(K),
                          options.newton_max_iter, options.newton_max_damping)
    return GpcExpansion(idx, unpack(z).copy(), tuple(bases))


# ---------------------------------------------------------------------------
# transient integration


@dataclass(frozen=True)
class StSolution:
    """Transient result: expansion series on a shared time grid."""

    index_set: MultiIndexSet
    bases: tuple
    times: np.ndarray
    expansions: tuple            # one GpcExpansion per time point
    step_log: tuple              # (t_start, h, accepted, lte_estimate)
    n_point_solves: int
    labels: tuple | None = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("time points must be strictly increasing")
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    def final(self) -> GpcExpansion:
        return self.expansions[-1]

    def mean_std_table(self) -> np.ndarray:
        """(T, 1 + 2*n) array: t, then mean and std per output."""
        rows = []
        for t, exp in zip(self.times, self.expansions):
            mean, var = exp.mean_variance()
            rows.append(np.concatenate([[t], mean,
                                        np.sqrt(np.maximum(var, 0.0))]))
        out = np.array(rows)
        n = (out.shape[1] - 1) // 2
        return np.concatenate(
            [out[:, :1], out[:, 1:1 + n], out[:, 1 + n:]], axis=1)

    def to_csv(self) -> str:
        n = self.expansions[0].n_outputs
        labels = self.labels or tuple(f"x{i}" for i in range(n))
        header = ["t"] + [f"mean_{l}" for l in labels] + [
            f"std_{l}" for l in labels]
        lines = [",".join(header)]
        for row in self.mean_std_table():
            lines.append(",".join(repr(float(v)) for v in row))
        return "\n".join(lines) + "\n"

    def expansions_json(self) -> str:
        import json

        docs = [expansion_to_json(e) for e in self.expansions]
        return json.dumps({
            "schema": "st-solution/1",
            "times": [float(t) for t in self.times],
            "expansions": [json.loads(d) for d in docs],
        }, indent=1, sort_keys=True)


class _PointIntegrator:
    """One testing point's implicit stepper sharing the driver's steps."""

    def __init__(self, model, xi, x0, options):
        self.model = model
        self.xi = np.asarray(xi, dtype=float)
        self.x = np.array(x0, dtype=float)
        self.options = options
        self.history: list[tuple[float, np.ndarray]] = []
        self.n_solves = 0

    def _implicit_solve(self, t_new, h, theta, q_old, f_old_term):
        """Solve (q(x) - q_old)/h + theta*g(x,t_new) + (1-theta)*g_old = 0.

        Dividing by h keeps the residual on the scale of f itself, so the
        Newton tolerance stays meaningful for small steps.
        """
        model = self.model
        rhs_new = model.B @ model.u(t_new)

        def residual(y):
            g_new = model.f(y, self.xi, t_new) - rhs_new
            return ((model.q(y, self.xi) - q_old) / h
                    + theta * g_new + (1.0 - theta) * f_old_term)

        def jacobian(y):
            return (model.jac_q(y, self.xi) / h
                    + theta * model.jac_f(y, self.xi, t_new))

        opt = self.options
        x_new, _ = _damped_newton(residual, jacobian, self.x,
                                  opt.dc_tol(model.n), opt.newton_max_iter,
                                  opt.newton_max_damping)
        self.n_solves += 1
        return x_new

    def attempt(self, t, h):
        """Try one step; returns (x_new, lte_estimate); does not commit."""
        model = self.model
        q_old = model.q(self.x, self.xi)
        t_new = t + h
        if len(self.history) < 1:
            # backward Euler startup: damps any inconsistent algebraic part
            x_new = self._implicit_solve(t_new, h, 1.0, q_old, 0.0)
            return x_new, 0.0
        g_old = (model.f(self.x, self.xi, t) - model.B @ model.u(t))
        x_new = self._implicit_solve(t_new, h, 0.5, q_old, g_old)

        # predictor through past states; its mismatch with the corrector
        # estimates the local truncation error
        past = self.history[-2:] + [(t, self.x)]
        x_pred = _extrapolate(past, t_new)
        c_corr = h ** 3 / 12.0
        c_pred = abs(np.prod([t_new - tp for tp, _ in past])) / 6.0
        if len(past) < 3:
            c_pred = max(c_pred, h ** 2)
        lte = (np.max(np.abs(x_new - x_pred))
               * c_corr / (c_pred + c_corr))
        return x_new, lte

    def commit(self, t, h, x_new):
        self.history.append((t, self.x.copy()))
        if len(self.history) > 3:
            self.history.pop(0)
        self.x = x_new


def _extrapolate(past: list, t_new: float) -> np.ndarray:
    """Newton divided-difference polynomial through past (t, x) pairs."""
    ts = [p[0] for p in past]
    coeffs = [np.array(p[1], dtype=float) for p in past]
    # in-place divided differences
    for level in range(1, len(ts)):
        for i in range(len(ts) - 1, level - 1, -1):
            coeffs[i] = (coeffs[i] - coeffs[i - 1]) / (ts[i] - ts[i - level])
    out = coeffs[-1].copy()
    for i in range(len(ts) - 2, -1, -1):
        out = out * (t_new - ts[i]) + coeffs[i]
    return out


def _integrate_points(model, points, X0, t_span, options):
    """Shared-step integration of one stepper per parameter point.

    Returns (times, states per time (list of (K, n)), step log, solves).
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError("t_span must satisfy t1 > t0")
    span = t1 - t0
    steppers = [_PointIntegrator(model, xi, x0, options)
                for xi, x0 in zip(points, X0)]

    fixed = options.fixed_step
    h = fixed if fixed is not None else span * min(
        options.max_step_fraction, 1e-3)
    min_step = span * options.min_step_fraction
    times = [t0]
    states = [np.array(X0, dtype=float)]
    log = []
    t = t0
    streak = 0
    while t < t1 - 1e-14 * span:
        if fixed is None and h < min_step:
            raise SolverError(
                f"step size underflow at t = {t:.6e} (h = {h:.3e})",
                time=t)
        h_step = min(h, t1 - t)  # clip only at the end of the span

        def attempt_one(stepper):
            return stepper.attempt(t, h_step)

        results = _map_points(attempt_one, steppers, options.threads)
        lte = max(r[1] for r in results)
        target = options.lte_tol * h_step / span  # error per unit time
        if fixed is None and lte > target:
            log.append((t, h_step, False, lte))
            h = 0.5 * h_step
            streak = 0
            continue
        log.append((t, h_step, True, lte))
        for stepper, (x_new, _) in zip(steppers, results):
            stepper.commit(t, h_step, x_new)
        t += h_step
        times.append(t)
        states.append(np.array([s.x for s in steppers]))
        if fixed is None:
            streak += 1
            if streak >= options.accepts_before_double:
                h = min(2.0 * h, span * options.max_step_fraction)
                streak = 0
    solves = sum(s.n_solves for s in steppers)
    return np.array(times), states, tuple(log), solves


def integrate_transient(model: StochasticDae, tps: TestingPointSet,
                        bases: Sequence[OrthoBasis], idx: MultiIndexSet,
                        t_span, x0: GpcExpansion | None = None,
                        options: SolverOptions = SolverOptions()
                        ) -> StSolution:
    """Integrate the stochastic DAE; one shared step sequence for all points."""
    if x0 is None:
        x0 = solve_dc(model, tps, bases, idx, options)
    X0 = tps.V @ np.asarray(x0.coefficients)
    times, states, log, solves = _integrate_points(
        model, tps.points, X0, t_span, options)
    expansions = tuple(recover_coefficients(X, tps, idx, tuple(bases))
                       for X in states)
    return StSolution(index_set=idx, bases=tuple(bases), times=times,
                      expansions=expansions, step_log=log,
                      n_point_solves=solves, labels=model.labels)


def integrate_deterministic(model: StochasticDae, xi: np.ndarray,
                            t_span, x0: np.ndarray,
                            options: SolverOptions = SolverOptions()):
    """Single-sample transient; returns (times, states (T, n), solves)."""
    times, states, _, solves = _integrate_points(
        model, [np.asarray(xi, dtype=float)], [np.asarray(x0, dtype=float)],
        t_span, options)
    return times, np.array([s[0] for s in states]), solves
