"""Shared helpers for the test suite.

dc_newton is a deliberately independent damped Newton iteration used as an
oracle; the package's own solvers must agree with it, so it must not import
from uqsim.stsolver.
"""

import numpy as np


def dc_newton(dae, xi, x0=None, t=0.0, tol=1e-12, max_iter=80):
    """Solve f(x, xi, t) = B u(t) by damped Newton; raises on stagnation."""
    x = dae.initial_guess() if x0 is None else np.array(x0, dtype=float)
    rhs = dae.B @ dae.u(t)
    for _ in range(max_iter):
        r = dae.f(x, xi, t) - rhs
        step = np.linalg.solve(dae.jac_f(x, xi, t), -r)
        lam = 1.0
        rnorm = np.linalg.norm(r)
        while lam > 1e-4:
            rn = np.linalg.norm(dae.f(x + lam * step, xi, t) - rhs)
            if rn <= (1.0 - 0.25 * lam) * rnorm + 1e-300:
                break
            lam *= 0.5
        x = x + lam * step
        if np.linalg.norm(lam * step) <= tol * (1.0 + np.linalg.norm(x)):
            return x
    raise RuntimeError("oracle Newton did not converge")
