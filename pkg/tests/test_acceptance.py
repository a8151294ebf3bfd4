"""Acceptance gate: ten end-to-end criteria, one verdict line each."""

import math
import time

import numpy as np
import pytest

from uqsim import anova, hier
from uqsim.models import builtin_model
from uqsim.montecarlo import run_mc
from uqsim.polychaos import (Distribution, GpcExpansion, golub_welsch,
                             make_standard_basis, stieltjes_basis,
                             total_degree_index_set)
from uqsim.stsolver import (SolverOptions, integrate_transient,
                            recover_coefficients, select_testing_points,
                            solve_dc, solve_dc_monolithic, standard_bases)
from uqsim.montecarlo import integrate_deterministic, sample_parameters


def verdict(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {n}: {detail}"


def test_criterion_01_basis_counts():
    t0 = time.perf_counter()
    counts = {(3, 4): len(total_degree_index_set(4, 3)),
              (3, 3): len(total_degree_index_set(3, 3)),
              (3, 2): len(total_degree_index_set(2, 3))}
    elapsed = time.perf_counter() - t0
    ok = (counts == {(3, 4): 35, (3, 3): 20, (3, 2): 10}) and elapsed < 1.0
    verdict(1, ok, f"K(3,4)={counts[(3, 4)]}, K(3,3)={counts[(3, 3)]}, "
            f"K(3,2)={counts[(3, 2)]} in {elapsed:.3f}s")


def test_criterion_02_anova_combinatorics():
    t0 = time.perf_counter()
    d, p = 53, 3
    full_levels = [math.comb(d, k) for k in (1, 2, 3)]
    full_terms = 1 + sum(full_levels)
    full_n = anova.sample_count(full_levels, p)
    adaptive_n = anova.sample_count([53, 36, 0], p)

    # live adaptive run engineered to reach the published screen outcome
    strong = list(range(9))
    weak = list(range(9, 53))
    pairs = [(i, j) for i in strong for j in strong if i < j]

    def g(x):
        out = sum(x[i] for i in strong) + 0.01 * sum(x[i] for i in weak)
        return out + 0.05 * sum(x[i] * x[j] for i, j in pairs)

    decomp, _ = anova.adaptive_anova(g, (Distribution.gaussian(0, 1),) * d,
                                     m=3, sigma=1e-3, order=p)
    elapsed = time.perf_counter() - t0
    ok = (full_terms == 24858 and full_n == 482513
          and adaptive_n == 573 and decomp.n_by_level == (53, 36, 0)
          and 1 + len(decomp.terms) == 90
          and decomp.n_evaluations == 573 and elapsed < 1.0)
    verdict(2, ok, f"full m=3: {full_terms} terms / {full_n} samples; "
            f"adaptive: {1 + len(decomp.terms)} terms / "
            f"{decomp.n_evaluations} samples, levels {decomp.n_by_level} "
            f"in {elapsed:.3f}s")


def test_criterion_03_quadrature_orthonormality():
    t0 = time.perf_counter()
    families = {
        "gaussian": Distribution.gaussian(0.0, 1.0),
        "uniform": Distribution.uniform(-1.0, 1.0),
        "gamma": Distribution.gamma(2.5),
        "beta": Distribution.beta(2.0, 3.0),
        "custom": Distribution.custom(lambda x: 1.0 - np.abs(x),
                                      (-1.0, 1.0)),
    }
    worst_exact, worst_ortho = 0.0, 0.0
    for dist in families.values():
        if dist.kind == "custom":
            basis = stieltjes_basis(dist, 12)
        else:
            basis = make_standard_basis(dist, 12)
        ref = golub_welsch(basis, 13)
        ref_moments = [float(ref.weights @ ref.points ** j)
                       for j in range(20)]
        # scale by the absolute-moment magnitude so signed moments near
        # zero are judged against the cancellation scale, not zero
        scales = [float(ref.weights @ np.abs(ref.points) ** j)
                  for j in range(20)]
        for n in range(1, 11):
            rule = golub_welsch(basis, n)
            for j in range(2 * n):
                got = float(rule.weights @ rule.points ** j)
                rel = abs(got - ref_moments[j]) / max(1.0, scales[j])
                worst_exact = max(worst_exact, rel)
        check = golub_welsch(basis, 13)
        table = basis.eval_table(check.points)
        gram = table.T @ (check.weights[:, None] * table)
        worst_ortho = max(worst_ortho,
                          float(np.max(np.abs(gram - np.eye(13)))))
    elapsed = time.perf_counter() - t0
    ok = worst_exact < 1e-9 and worst_ortho < 1e-9 and elapsed < 10.0
    verdict(3, ok, f"5 families, n<=10: exactness {worst_exact:.2e}, "
            f"orthonormality {worst_ortho:.2e} in {elapsed:.2f}s")


def test_criterion_04_decoupling_equivalence():
    t0 = time.perf_counter()
    model = builtin_model("diode_rectifier")      # 2 nodes, d=2 nonlinear
    bases = standard_bases(model, 2)
    idx = total_degree_index_set(model.d, 2)
    tps = select_testing_points(bases, idx)
    tight = SolverOptions(dc_tol_scale=1e-13)
    decoupled = solve_dc(model, tps, bases, idx, tight)
    monolithic = solve_dc_monolithic(model, tps, bases, idx, tight)
    gap = float(np.max(np.abs(decoupled.coefficients
                              - monolithic.coefficients)))
    elapsed = time.perf_counter() - t0
    ok = gap < 1e-9
    verdict(4, ok, f"decoupled vs monolithic Newton, d=2 p=2: "
            f"max coefficient gap {gap:.2e} in {elapsed:.3f}s")


def test_criterion_05_spectral_vs_mc_diode():
    t0 = time.perf_counter()
    model = builtin_model("diode_rectifier")
    bases = standard_bases(model, 3)
    idx = total_degree_index_set(model.d, 3)
    tps = select_testing_points(bases, idx)
    exp = solve_dc(model, tps, bases, idx)
    st_mean, st_var = exp.mean_variance()
    st_std = np.sqrt(np.maximum(st_var, 0.0))

    mc = run_mc(model, "dc", 100_000, seed=3)
    mc_std = np.sqrt(np.maximum(mc.variance, 0.0))
    worst = 0.0
    for j in range(model.n):
        if mc.stderr[j] > 0:
            worst = max(worst, abs(st_mean[j] - mc.mean[j]) / mc.stderr[j])
        if mc.stderr_std[j] > 0:
            worst = max(worst,
                        abs(st_std[j] - mc_std[j]) / mc.stderr_std[j])
    ratio = mc.n_samples / tps.n_points
    elapsed = time.perf_counter() - t0
    ok = (tps.n_points == 10 and worst <= 3.0 and ratio >= 1000.0
          and elapsed < 120.0)
    verdict(5, ok, f"K={tps.n_points} solves vs {mc.n_samples} MC solves "
            f"({ratio:.0f}x fewer): worst moment gap "
            f"{worst:.2f} standard errors in {elapsed:.1f}s")


def test_criterion_06_hierarchical_vs_flat():
    t0 = time.perf_counter()
    # block y = xi + 0.3 xi^2 - 0.3 drives tau = tau0 (1 + 0.1 zeta)
    gauss = Distribution.gaussian(0.0, 1.0)
    basis1 = make_standard_basis(gauss, 2)
    idx1 = total_degree_index_set(1, 2)
    block = GpcExpansion(idx1, np.array([[0.0], [1.0],
                                         [0.3 * np.sqrt(2.0)]]), (basis1,))
    s = hier.normalize_surrogate(block)
    dens = hier.density_by_quadrature(s)
    basis, _ = hier.build_intermediate_basis(dens, 3)
    system = hier.demo_system("rc_zeta", [dens], r=1e3, c=1e-6, vin=1.0,
                              spread=0.1)
    idx = total_degree_index_set(1, 3)
    x0 = GpcExpansion(idx, np.zeros((len(idx), 1)), (basis,))
    sol = hier.propagate_transient(system, (basis,), 3, (0.0, 1e-3), x0=x0,
                                   options=SolverOptions(lte_tol=1e-7))
    mean, var = sol.final().mean_variance()
    h_mean, h_std = float(mean[0]), float(np.sqrt(var[0]))

    rng = np.random.Generator(np.random.PCG64(42))
    xi = rng.standard_normal(100_000)
    zeta = (xi + 0.3 * xi ** 2 - 0.3) / np.sqrt(1.18)
    v = 1.0 - np.exp(-1.0 / (1.0 + 0.1 * zeta))
    gap_mean = abs(h_mean - v.mean()) / abs(v.mean())
    gap_std = abs(h_std - v.std(ddof=1)) / v.std(ddof=1)
    elapsed = time.perf_counter() - t0
    ok = gap_mean < 0.01 and gap_std < 0.01 and elapsed < 120.0
    verdict(6, ok, f"two-level vs flat MC (1e5): mean gap "
            f"{gap_mean:.2e}, std gap {gap_std:.2e} relative "
            f"in {elapsed:.1f}s")


def test_criterion_07_anchored_anova_exactness():
    t0 = time.perf_counter()
    dists = (Distribution.gaussian(0.0, 1.0),
             Distribution.uniform(-1.0, 1.0), Distribution.beta(2.0, 3.0))
    anchor = anova.anchor_point(dists, 0.5)

    def g(x):
        return 2.0 + x[0] - x[1] * x[2] + x[0] * x[1] * x[2] + x[2] ** 2

    decomp, exp = anova.adaptive_anova(g, dists, m=3, sigma=0.0, order=3,
                                       anchor=anchor)
    probes = sample_parameters(dists, 100, seed=11)
    telescope = float(np.max(np.abs(exp.eval_many(probes).ravel()
                                    - np.array([g(p) for p in probes]))))

    vanish = 0.0
    for term in decomp.terms:
        pts = sample_parameters(tuple(dists[k] for k in term.subset), 20,
                                seed=7)
        for slot, k in enumerate(term.subset):
            frozen = pts.copy()
            frozen[:, slot] = anchor.q[k]
            vals = term.expansion.eval_many(frozen).ravel()
            vanish = max(vanish, float(np.max(np.abs(vals))))

    bases = standard_bases(dists, 3)
    idx = total_degree_index_set(3, 3)
    tps = select_testing_points(bases, idx)
    vals = np.array([g(p) for p in tps.points]).reshape(-1, 1)
    direct = recover_coefficients(vals, tps, idx, bases)
    by_alpha = {tuple(a): float(c) for a, c in
                zip(idx.indices, direct.scalar_coefficients())}
    projection = 0.0
    for alpha, c in zip(exp.index_set.indices, exp.scalar_coefficients()):
        projection = max(projection,
                         abs(float(c) - by_alpha.pop(tuple(alpha))))
    for leftover in by_alpha.values():
        projection = max(projection, abs(leftover))
    elapsed = time.perf_counter() - t0
    ok = (telescope < 1e-8 and vanish < 1e-8 and projection < 1e-8
          and elapsed < 30.0)
    verdict(7, ok, f"telescoping {telescope:.2e}, vanishing-at-anchor "
            f"{vanish:.2e}, full-vs-direct {projection:.2e} "
            f"in {elapsed:.2f}s")


def test_criterion_08_ishigami_sensitivities():
    t0 = time.perf_counter()
    a, b = 7.0, 0.1

    def g(x):
        return (np.sin(x[0]) + a * np.sin(x[1]) ** 2
                + b * x[2] ** 4 * np.sin(x[0]))

    v1 = 0.5 * (1.0 + b * np.pi ** 4 / 5.0) ** 2
    v2 = a ** 2 / 8.0
    v13 = 8.0 * b ** 2 * np.pi ** 8 / 225.0
    total = v1 + v2 + v13
    S_ref = np.array([v1 / total, v2 / total, 0.0])
    T3_ref = v13 / total

    dists = (Distribution.uniform(-np.pi, np.pi),) * 3
    anchor = anova.anchor_point(dists, 0.75)
    _, exp = anova.adaptive_anova(g, dists, m=3, sigma=1e-4, order=9,
                                  anchor=anchor)
    S, T = anova.sensitivities(exp)
    gaps = [abs(float(S[k]) - S_ref[k]) for k in range(3)]
    gaps.append(abs(float(T[2]) - T3_ref))
    elapsed = time.perf_counter() - t0
    ok = max(gaps) < 0.02 and elapsed < 60.0
    verdict(8, ok, f"S=({float(S[0]):.4f}, {float(S[1]):.4f}, "
            f"{float(S[2]):.4f}), T3={float(T[2]):.4f}; worst gap "
            f"{max(gaps):.4f} vs analytic in {elapsed:.2f}s")


def test_criterion_09_transient_integrator_order():
    t0 = time.perf_counter()
    model = builtin_model("rc_lowpass")
    x0 = np.array([1.0, 0.0, -1e-3])
    hs = [1e-3 / 2 ** k for k in range(3, 9)]
    errs = []
    for h in hs:
        _, states, _ = integrate_deterministic(
            model, np.array([1.0]), (0.0, 1e-3), x0,
            SolverOptions(fixed_step=h))
        errs.append(abs(states[-1][1] - (1.0 - np.exp(-1.0))))
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    elapsed = time.perf_counter() - t0
    ok = abs(slope - 2.0) < 0.1 and elapsed < 30.0
    verdict(9, ok, f"log-log error-vs-step slope {slope:.3f} on the "
            f"linear RC model in {elapsed:.2f}s")


def test_criterion_10_golub_welsch_closed_forms():
    t0 = time.perf_counter()
    gauss = make_standard_basis(Distribution.gaussian(0.0, 1.0), 4)
    unif = make_standard_basis(Distribution.uniform(-1.0, 1.0), 4)
    worst = 0.0

    def compare(rule, points, weights):
        nonlocal worst
        worst = max(worst,
                    float(np.max(np.abs(rule.points - np.array(points)))),
                    float(np.max(np.abs(rule.weights
                                        - np.array(weights)))))

    compare(golub_welsch(gauss, 2), [-1.0, 1.0], [0.5, 0.5])
    r3 = math.sqrt(3.0)
    compare(golub_welsch(gauss, 3), [-r3, 0.0, r3],
            [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0])
    compare(golub_welsch(unif, 2), [-1.0 / r3, 1.0 / r3], [0.5, 0.5])
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10
    verdict(10, ok, f"Hermite n=2,3 and Legendre n=2 nodes/weights "
            f"within {worst:.2e} of closed forms in {elapsed:.3f}s")
