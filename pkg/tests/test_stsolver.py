"""Stochastic testing solver: selection, decoupled DC, transient stepping."""

import json

import numpy as np
import pytest
from scipy.integrate import quad

from uqsim import models, netlist
from uqsim.models import algebraic_model, builtin_model
from uqsim.polychaos import (Distribution, GpcExpansion, golub_welsch,
                             make_standard_basis, tensor_quadrature,
                             total_degree_index_set)
from uqsim.stsolver import (SolverError, SolverOptions, integrate_deterministic,
                            integrate_transient, newton_dc,
                            recover_coefficients, select_testing_points,
                            solve_dc, solve_dc_monolithic, standard_bases)

HERMITE = Distribution.gaussian(0.0, 1.0)

DIVIDER_VARIED = ("V1 1 0 1\nR1 1 2 1k\n"
                  "R2 2 0 1k variation=relative:uniform(0.9,1.1)\n")

NONLINEAR_2NODE = ("V1 1 0 1\nR1 1 2 1k variation=relative:uniform(0.9,1.1)\n"
                   "D1 2 0 variation.is=uniform(5e-10,2e-9)\n")


def setup_problem(model, order):
    bases = standard_bases(model, order)
    idx = total_degree_index_set(model.d, order)
    tps = select_testing_points(bases, idx)
    return bases, idx, tps


class TestSelection:
    def test_d1_p1_hermite_two_points(self):
        basis = make_standard_basis(HERMITE, 1)
        idx = total_degree_index_set(1, 1)
        tps = select_testing_points([basis], idx)
        assert np.allclose(tps.points.ravel(), [-1.0, 1.0], atol=1e-12)
        assert np.allclose(tps.V, [[1.0, -1.0], [1.0, 1.0]], atol=1e-12)
        assert tps.condition < 1.01

    def test_d2_p3_selects_10_of_16(self):
        basis = make_standard_basis(HERMITE, 3)
        idx = total_degree_index_set(2, 3)
        tps = select_testing_points([basis, basis], idx)
        assert tps.n_points == 10
        # independent full-rank check
        assert abs(np.linalg.det(tps.V)) > 1e-12
        assert np.isfinite(tps.condition)
        # subset of the 4x4 tensor grid
        grid = tensor_quadrature([golub_welsch(basis, 4)] * 2).points
        for pt in tps.points:
            assert np.min(np.linalg.norm(grid - pt, axis=1)) < 1e-12

    def test_d4_p3_selects_35_of_256(self):
        basis = make_standard_basis(HERMITE, 3)
        idx = total_degree_index_set(4, 3)
        tps = select_testing_points([basis] * 4, idx)
        assert tps.n_points == 35
        assert tps.condition <= 1e8

    def test_condition_cap_enforced(self):
        basis = make_standard_basis(HERMITE, 3)
        idx = total_degree_index_set(2, 3)
        with pytest.raises(SolverError, match=r"only \d+ of 10"):
            select_testing_points([basis, basis], idx, condition_cap=1.5)

    def test_selection_is_deterministic(self):
        basis = make_standard_basis(Distribution.uniform(-1, 1), 2)
        idx = total_degree_index_set(3, 2)
        a = select_testing_points([basis] * 3, idx)
        b = select_testing_points([basis] * 3, idx)
        assert np.array_equal(a.points, b.points)


class TestSolveDc:
    def test_divider_mean_matches_integral(self):
        dae = netlist.elaborate(netlist.parse_netlist(DIVIDER_VARIED))
        bases, idx, tps = setup_problem(dae, 2)
        exp = solve_dc(dae, tps, bases, idx)
        mean, _ = exp.mean_variance()
        exact = quad(lambda r: r / (1 + r), 0.9, 1.1)[0] / 0.2
        # the K=3 collocation mean equals the 3-point Gauss quadrature of
        # r/(1+r), whose truncation error on this interval is ~1.8e-10
        assert abs(mean[1] - exact) < 5e-10

    def test_d0_reduces_to_deterministic(self):
        dae = netlist.elaborate(
            netlist.parse_netlist("V1 1 0 1\nR1 1 2 1k\nR2 2 0 1k\n"))
        bases, idx, tps = setup_problem(dae, 2)
        assert tps.n_points == 1
        exp = solve_dc(dae, tps, bases, idx)
        mean, var = exp.mean_variance()
        assert np.allclose(mean, [1.0, 0.5, -5e-4], atol=1e-9)
        assert np.max(var) == 0.0

    def test_diode_rectifier_matches_mc(self):
        from uqsim.montecarlo import run_mc

        dae = builtin_model("diode_rectifier")
        bases, idx, tps = setup_problem(dae, 3)
        exp = solve_dc(dae, tps, bases, idx)
        mean, var = exp.mean_variance()
        mc = run_mc(dae, "dc", n=20000, seed=11)
        out = 1  # rectified node voltage
        assert abs(mean[out] - mc.mean[out]) < 3 * mc.stderr[out]
        assert abs(np.sqrt(var[out]) - mc.std[out]) < 3 * mc.stderr_std[out]

    def test_polynomial_solution_recovered_exactly(self):
        # manufactured map whose components have total degree <= p
        dists = (Distribution.gaussian(0, 1), Distribution.uniform(-1, 1))

        def poly(xi):
            return np.array([0.3 + 0.5 * xi[0] - 0.2 * xi[0] * xi[1],
                             1.0 + 0.1 * xi[1] ** 2])

        dae = algebraic_model(poly, dists, n_outputs=2)
        bases, idx, tps = setup_problem(dae, 2)
        exp = solve_dc(dae, tps, bases, idx)
        rng = np.random.default_rng(5)
        for _ in range(20):
            xi = np.array([rng.normal(), rng.uniform(-1, 1)])
            assert np.allclose(exp.eval(xi), poly(xi), atol=1e-8)

    def test_newton_divergence_reports_residual(self):
        dists = (Distribution.uniform(0.5, 1.5),)
        # x^2 + xi = 0 has no real solution for xi > 0
        bad = models.StochasticDae(
            n=1, d=1, distributions=dists,
            q=lambda x, xi: np.zeros(1),
            f=lambda x, xi, t: np.array([x[0] ** 2 + xi[0]]),
            B=np.zeros((1, 0)), u=lambda t: np.zeros(0))
        with pytest.raises(SolverError) as err:
            newton_dc(bad, np.array([1.0]))
        assert err.value.residual is not None and err.value.residual > 0


class TestDecouplingEquivalence:
    def test_nonlinear_two_node_identical(self):
        dae = netlist.elaborate(netlist.parse_netlist(NONLINEAR_2NODE))
        bases, idx, tps = setup_problem(dae, 2)
        tight = SolverOptions(dc_tol_scale=1e-13)
        dec = solve_dc(dae, tps, bases, idx, tight)
        mono = solve_dc_monolithic(dae, tps, bases, idx, tight)
        assert np.max(np.abs(dec.coefficients - mono.coefficients)) < 1e-9


class TestRecovery:
    def test_round_trip(self):
        basis = make_standard_basis(HERMITE, 3)
        idx = total_degree_index_set(2, 3)
        tps = select_testing_points([basis, basis], idx)
        rng = np.random.default_rng(9)
        coeffs = rng.normal(size=(len(idx), 2))
        values = tps.V @ coeffs
        rec = recover_coefficients(values, tps, idx, (basis, basis))
        assert np.max(np.abs(rec.coefficients - coeffs)) < 1e-10

    def test_constant_values(self):
        basis = make_standard_basis(HERMITE, 2)
        idx = total_degree_index_set(1, 2)
        tps = select_testing_points([basis], idx)
        rec = recover_coefficients(np.full((3, 1), 4.2), tps, idx, (basis,))
        assert abs(rec.coefficients[0, 0] - 4.2) < 1e-12
        assert np.max(np.abs(rec.coefficients[1:])) < 1e-12

    def test_aliasing_of_overdegree_polynomial(self):
        # degree-(p+1) data cannot be represented: the interpolant drops the
        # top component (which vanishes at the Gauss nodes), leaving a
        # nonzero residual away from the nodes; in one dimension collocation
        # at all p+1 nodes coincides with quadrature projection, so the mean
        # still matches it
        p = 3
        basis_p = make_standard_basis(HERMITE, p)
        idx = total_degree_index_set(1, p)
        tps = select_testing_points([basis_p], idx)
        values = (tps.points[:, 0] ** 4).reshape(-1, 1)
        rec = recover_coefficients(values, tps, idx, (basis_p,))
        rule = golub_welsch(basis_p, p + 1)
        projected_mean = float(rule.weights @ rule.points.ravel() ** 4)
        assert abs(projected_mean - 3.0) < 1e-10  # E[xi^4], rule is exact
        assert abs(rec.coefficients[0, 0] - projected_mean) < 1e-8
        # aliasing residual at a non-node point
        assert abs(rec.eval(np.array([0.5]))[0] - 0.5 ** 4) > 1e-2


class TestTransient:
    def rc_setup(self, order=3):
        dae = builtin_model("rc_lowpass")
        bases, idx, tps = setup_problem(dae, order)
        # consistent start: source on, capacitor empty, branch current -1/R
        X0 = np.array([[1.0, 0.0, -1.0 / (1e3 * pt[0])] for pt in tps.points])
        x0 = recover_coefficients(X0, tps, idx, bases)
        return dae, bases, idx, tps, x0

    def test_rc_mean_matches_quadrature_of_closed_form(self):
        dae, bases, idx, tps, x0 = self.rc_setup()
        tol = 1e-6
        sol = integrate_transient(dae, tps, bases, idx, (0.0, 1e-3), x0=x0,
                                  options=SolverOptions(lte_tol=tol))
        mean, _ = sol.final().mean_variance()
        exact = quad(lambda r: 1 - np.exp(-1e-3 / (1e3 * r * 1e-6)),
                     0.9, 1.1)[0] / 0.2
        assert abs(mean[1] - exact) < 2 * tol

    def test_zero_input_stays_zero(self):
        dae = builtin_model("rc_lowpass", vin=0.0)
        bases, idx, tps = setup_problem(dae, 2)
        zero = GpcExpansion(idx, np.zeros((len(idx), dae.n)), bases)
        sol = integrate_transient(dae, tps, bases, idx, (0.0, 1e-3), x0=zero)
        for exp in sol.expansions:
            assert np.max(np.abs(exp.coefficients)) < 1e-12

    def test_default_start_is_dc(self):
        dae, bases, idx, tps, _ = self.rc_setup(order=2)
        sol = integrate_transient(dae, tps, bases, idx, (0.0, 1e-4))
        mean, _ = sol.final().mean_variance()
        # already at the charged operating point, nothing moves
        assert abs(mean[1] - 1.0) < 1e-6

    def test_times_increasing_and_log_recorded(self):
        dae, bases, idx, tps, x0 = self.rc_setup()
        sol = integrate_transient(dae, tps, bases, idx, (0.0, 1e-3), x0=x0)
        assert np.all(np.diff(sol.times) > 0)
        assert sol.times[0] == 0.0
        assert sol.times[-1] == pytest.approx(1e-3, rel=1e-12)
        accepted = [s for s in sol.step_log if s[2]]
        assert len(accepted) == len(sol.times) - 1
        assert sol.n_point_solves >= tps.n_points * len(accepted)

    def test_second_order_convergence(self):
        dae = builtin_model("rc_lowpass")
        x0 = np.array([1.0, 0.0, -1e-3])
        errs = []
        hs = [1e-3 / 2 ** k for k in range(3, 9)]
        for h in hs:
            _, states, _ = integrate_deterministic(
                dae, np.array([1.0]), (0.0, 1e-3), x0,
                SolverOptions(fixed_step=h))
            errs.append(abs(states[-1][1] - (1 - np.exp(-1.0))))
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert abs(slope - 2.0) < 0.1

    def test_step_underflow_raises_with_time(self):
        dae, bases, idx, tps, x0 = self.rc_setup(order=2)
        with pytest.raises(SolverError, match="underflow at t") as err:
            integrate_transient(dae, tps, bases, idx, (0.0, 1e-3), x0=x0,
                                options=SolverOptions(lte_tol=0.0))
        assert err.value.time is not None

    def test_plate_actuator_matches_mc(self):
        from uqsim.montecarlo import run_mc

        dae = builtin_model("plate_actuator", voltage=1.0)
        bases, idx, tps = setup_problem(dae, 2)
        # fixed shared step so the discretization bias cancels in the
        # comparison and only the stochastic approximation is tested
        opts = SolverOptions(fixed_step=0.05)
        start = dae.initial_guess()
        x0 = GpcExpansion(
            idx, np.outer(np.eye(len(idx))[0], start), bases)
        sol = integrate_transient(dae, tps, bases, idx, (0.0, 1.0), x0=x0,
                                  options=opts)
        mean, var = sol.final().mean_variance()
        mc = run_mc(dae, "transient", n=2000, seed=3, t_end=1.0,
                    options=opts, x0=start)
        assert abs(mean[0] - mc.mean[0]) < 3 * mc.stderr[0]
        assert abs(np.sqrt(var[0]) - mc.std[0]) < 3 * mc.stderr_std[0]


class TestSolutionExport:
    def test_csv_and_json_schema(self):
        dae = builtin_model("rc_lowpass")
        bases, idx, tps = setup_problem(dae, 2)
        X0 = np.array([[1.0, 0.0, -1.0 / (1e3 * pt[0])] for pt in tps.points])
        x0 = recover_coefficients(X0, tps, idx, bases)
        sol = integrate_transient(dae, tps, bases, idx, (0.0, 2e-4), x0=x0)
        csv = sol.to_csv()
        header = csv.splitlines()[0].split(",")
        assert header[0] == "t"
        assert "mean_v(2)" in header and "std_v(2)" in header
        assert len(csv.splitlines()) == len(sol.times) + 1
        doc = json.loads(sol.expansions_json())
        assert doc["schema"] == "st-solution/1"
        assert len(doc["expansions"]) == len(sol.times)
        assert doc["times"] == [float(t) for t in sol.times]
