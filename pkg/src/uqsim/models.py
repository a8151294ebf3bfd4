"""Model containers: stochastic DAEs, second-order mechanical form, builtins.

A stochastic DAE is

    d q(x, xi) / dt + f(x, xi, t) = B u(t),

with state x in R^n and d independent random inputs xi.  Circuits assembled
by modified nodal analysis put charges and fluxes in q and resistive/source
terms in f (their f never looks at t); converted second-order models carry
their input drive inside f because forces may depend on the input
nonlinearly.  Second-order mechanical models are

    M(z, xi) z'' + D(z, xi) z' + f(z, u(t), xi) = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .polychaos import Distribution

__all__ = [
    "StochasticDae",
    "SecondOrderModel",
    "SingularMassError",
    "UnknownModelError",
    "second_order_to_first",
    "algebraic_model",
    "builtin_model",
    "builtin_second_order",
    "shockley_current",
    "mosfet_current",
    "BUILTIN_MODELS",
]

FD_STEP = 1e-7  # central-difference step scale for fallback Jacobians


class SingularMassError(ValueError):
    pass


class UnknownModelError(KeyError):
    pass


def _fd_jacobian(fn: Callable[[np.ndarray], np.ndarray],
                 x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(fn(x), dtype=float)
    J = np.empty((f0.size, x.size))
    for i in range(x.size):
        h = max(FD_STEP, FD_STEP * abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (np.asarray(fn(xp)) - np.asarray(fn(xm))) / (2.0 * h)
    return J


@dataclass(frozen=True)
class StochasticDae:
    """Differential-algebraic model with random parameters.

    q(x, xi) -> n-vector of charges/fluxes; f(x, xi, t) -> n-vector of
    resistive/source terms; B is the n-by-m incidence of the linear inputs
    u(t) -> m-vector.  Jacobians are optional; central finite differences
    with step max(1e-7, 1e-7|x_i|) stand in when they are missing.
    """

    n: int
    d: int
    distributions: tuple
    q: Callable
    f: Callable
    B: np.ndarray
    u: Callable
    dq_dx: Callable | None = None
    df_dx: Callable | None = None
    x0_guess: np.ndarray | None = None
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float).reshape(self.n, -1)
        B.setflags(write=False)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "distributions", tuple(self.distributions))
        if len(self.distributions) != self.d:
            raise ValueError("need one distribution entry per random input")

    def jac_q(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        if self.dq_dx is not None:
            return np.asarray(self.dq_dx(x, xi), dtype=float)
        return _fd_jacobian(lambda y: self.q(y, xi), x)

    def jac_f(self, x: np.ndarray, xi: np.ndarray, t: float) -> np.ndarray:
        if self.df_dx is not None:
            return np.asarray(self.df_dx(x, xi, t), dtype=float)
        return _fd_jacobian(lambda y: self.f(y, xi, t), x)

    def nominal_parameters(self) -> np.ndarray:
        """Mean of each input; the deterministic reference point."""
        out = np.empty(self.d)
        for k, dist in enumerate(self.distributions):
            if dist is None:
                out[k] = 0.0
            else:
                out[k] = dist.mean()
        return out

    def initial_guess(self) -> np.ndarray:
        if self.x0_guess is not None:
            return np.array(self.x0_guess, dtype=float)
        return np.zeros(self.n)


@dataclass(frozen=True)
class SecondOrderModel:
    """M(z, xi) z'' + D(z, xi) z' + force(z, u, xi) = 0."""

    n: int
    mass: Callable
    damping: Callable
    force: Callable
    distributions: tuple
    u: Callable
    z0: np.ndarray
    v0: np.ndarray
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "distributions", tuple(self.distributions))
        object.__setattr__(self, "z0", np.asarray(self.z0, dtype=float))
        object.__setattr__(self, "v0", np.asarray(self.v0, dtype=float))


def second_order_to_first(model: SecondOrderModel) -> StochasticDae:
    """Rewrite as a first-order DAE on the stacked state x = (z, z').

    q is the identity, so the residual dx/dt + f(x, xi, t) = 0 reproduces the
    second-order balance exactly: the z-rows give z' = v and the v-rows give
    M v' + D v + force = 0 after multiplying through by M.
    """
    n = model.n
    xi_nom = np.array([d.mean() if d is not None else 0.0
                       for d in model.distributions])
    m0 = np.asarray(model.mass(model.z0, xi_nom), dtype=float)
    if m0.shape != (n, n):
        raise ValueError(f"mass matrix must be {n}x{n}, got {m0.shape}")
    sv = np.linalg.svd(m0, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1.0):
        raise SingularMassError(
            "mass matrix is singular at the initial state; the model cannot "
            "be rewritten in first-order form")

    def q(x, xi):
        return np.array(x, dtype=float)

    def dq_dx(x, xi):
        return np.eye(2 * n)

    def f(x, xi, t):
        z, v = x[:n], x[n:]
        M = np.asarray(model.mass(z, xi), dtype=float)
        accel_rhs = (np.asarray(model.damping(z, xi), dtype=float) @ v
                     + np.asarray(model.force(z, model.u(t), xi), dtype=float))
        return np.concatenate([-v, np.linalg.solve(M, accel_rhs)])

    labels = None
    if model.labels is not None:
        labels = tuple(model.labels) + tuple(f"d{l}/dt" for l in model.labels)
    return StochasticDae(
        n=2 * n, d=len(model.distributions),
        distributions=model.distributions,
        q=q, f=f, B=np.zeros((2 * n, 0)), u=lambda t: np.zeros(0),
        dq_dx=dq_dx, df_dx=None,
        x0_guess=np.concatenate([model.z0, model.v0]),
        labels=labels)


def algebraic_model(fn: Callable, distributions: Sequence,
                    n_outputs: int, labels=None) -> StochasticDae:
    """Wrap a parameter-to-output map as a purely algebraic DAE x = fn(xi)."""
    def f(x, xi, t):
        return x - np.asarray(fn(xi), dtype=float).reshape(n_outputs)

    def df_dx(x, xi, t):
        return np.eye(n_outputs)

    return StochasticDae(
        n=n_outputs, d=len(distributions), distributions=tuple(distributions),
        q=lambda x, xi: np.zeros(n_outputs),
        f=f, B=np.zeros((n_outputs, 0)), u=lambda t: np.zeros(0),
        dq_dx=lambda x, xi: np.zeros((n_outputs, n_outputs)),
        df_dx=df_dx, labels=tuple(labels) if labels else None)


# ---------------------------------------------------------------------------
# device equations shared with the netlist stamps


def shockley_current(v: float, i_s: float, n_vt: float):
    """Diode current and small-signal conductance.

    Exponential up to 40 thermal voltages, then a C1 linear continuation so
    Newton iterates cannot overflow.
    """
    knee = 40.0 * n_vt
    if v <= knee:
        e = math.exp(v / n_vt)
        return i_s * (e - 1.0), i_s * e / n_vt
    ek = math.exp(40.0)
    g = i_s * ek / n_vt
    return i_s * (ek - 1.0) + g * (v - knee), g


def mosfet_current(vgs: float, vds: float, kp: float, vth: float, lam: float):
    """Symmetric square-law drain current and (gm, gds).

    Cutoff below vth, quadratic triode/saturation above, channel-length
    modulation lam; drain and source roles swap for vds < 0.
    """
    if vds < 0.0:
        i, gm, gds = mosfet_current(vgs - vds, -vds, kp, vth, lam)
        # d(-i(vgd, -vds))/dvgs etc. via the chain rule
        return -i, -gm, gm + gds
    vov = vgs - vth
    if vov <= 0.0:
        return 0.0, 0.0, 0.0
    cl = 1.0 + lam * vds
    if vds >= vov:  # saturation
        i0 = 0.5 * kp * vov * vov
        return i0 * cl, kp * vov * cl, i0 * lam
    i0 = kp * (vov * vds - 0.5 * vds * vds)
    gm = kp * vds * cl
    gds = kp * (vov - vds) * cl + i0 * lam
    return i0 * cl, gm, gds


# ---------------------------------------------------------------------------
# builtin benchmark models


def _rc_lowpass(r: float = 1e3, c: float = 1e-6, vin: float = 1.0,
                rel: float = 0.1) -> StochasticDae:
    from . import netlist

    text = (f"V1 1 0 {vin!r}\n"
            f"R1 1 2 {r!r} variation=relative:uniform({1 - rel!r},{1 + rel!r})\n"
            f"C1 2 0 {c!r}\n")
    return netlist.elaborate(netlist.parse_netlist(text, "rc_lowpass"))


def _diode_rectifier(vin: float = 1.0, r: float = 1e3, i_s: float = 1e-9,
                     n_vt: float = 0.02585, sigma_is: float = 0.2,
                     rel_r: float = 0.1) -> StochasticDae:
    """Driven diode with a resistive load; x = (v_in, v_out, i_src).

    Random inputs: xi_0 ~ N(0,1) scales the saturation current as
    i_s * exp(sigma_is * xi_0); xi_1 ~ U(1-rel_r, 1+rel_r) multiplies the
    load resistance.
    """
    dists = (Distribution.gaussian(0.0, 1.0),
             Distribution.uniform(1.0 - rel_r, 1.0 + rel_r))

    def resolve(xi):
        return i_s * math.exp(sigma_is * xi[0]), r * xi[1]

    def f(x, xi, t):
        isat, rload = resolve(xi)
        i_d, _ = shockley_current(x[0] - x[1], isat, n_vt)
        return np.array([i_d + x[2], -i_d + x[1] / rload, x[0]])

    def df_dx(x, xi, t):
        isat, rload = resolve(xi)
        _, g = shockley_current(x[0] - x[1], isat, n_vt)
        return np.array([[g, -g, 1.0],
                         [-g, g + 1.0 / rload, 0.0],
                         [1.0, 0.0, 0.0]])

    n = 3
    return StochasticDae(
        n=n, d=2, distributions=dists,
        q=lambda x, xi: np.zeros(n),
        f=f, B=np.array([[0.0], [0.0], [1.0]]), u=lambda t: np.array([vin]),
        dq_dx=lambda x, xi: np.zeros((n, n)), df_dx=df_dx,
        x0_guess=np.array([vin, 0.4, -1e-4]),
        labels=("v(1)", "v(2)", "i(V1)"))


def _plate_actuator(voltage: float = 1.0, damping: float = 0.6,
                    force_const: float = 0.02, k_sigma: float = 0.05,
                    gap_sigma: float = 0.05) -> SecondOrderModel:
    """Normalized parallel-plate electrostatic actuator, one mechanical DOF.

    z'' + b z' + k(xi_0) z = c V^2 / (gap(xi_1) - z)^2 with unit nominal
    mass, stiffness and gap; spring constant and gap carry Gaussian
    variations.  u(t) is the (constant) applied voltage.
    """
    dists = (Distribution.gaussian(0.0, 1.0), Distribution.gaussian(0.0, 1.0))

    def force(z, u, xi):
        k = 1.0 + k_sigma * xi[0]
        gap = 1.0 + gap_sigma * xi[1]
        v = u[0]
        return np.array([k * z[0] - force_const * v * v / (gap - z[0]) ** 2])

    return SecondOrderModel(
        n=1,
        mass=lambda z, xi: np.array([[1.0]]),
        damping=lambda z, xi: np.array([[damping]]),
        force=force,
        distributions=dists,
        u=lambda t: np.array([voltage]),
        z0=np.zeros(1), v0=np.zeros(1),
        labels=("z",))


_OPAMP_LIKE_NETLIST = """\
* three-stage square-law amplifier, nine varied parameters
VDD vdd 0 5
VIN in 0 1.1
M1 d1 in 0 kp=2m vth=0.7 lam=0.05 variation.vth=gauss(0.7,0.02) variation.kp=relative:uniform(0.9,1.1)
R1 vdd d1 3k variation=relative:uniform(0.95,1.05)
M2 d2 d1 s2 kp=2m vth=0.7 lam=0.05 variation.vth=gauss(0.7,0.02) variation.kp=relative:uniform(0.9,1.1)
RS s2 0 2k
R2 vdd d2 1k variation=relative:uniform(0.95,1.05)
M3 vdd d2 out kp=2m vth=0.7 lam=0.05 variation.vth=gauss(0.7,0.02) variation.kp=relative:uniform(0.9,1.1)
R3 out 0 1.8k variation=relative:uniform(0.95,1.05)
"""


def _opamp_like() -> StochasticDae:
    from . import netlist

    return netlist.elaborate(netlist.parse_netlist(_OPAMP_LIKE_NETLIST,
                                                   "opamp_like"))


BUILTIN_MODELS = {
    "rc_lowpass": _rc_lowpass,
    "diode_rectifier": _diode_rectifier,
    "plate_actuator": None,  # second-order; converted on request
    "opamp_like": _opamp_like,
}


def builtin_second_order(name: str, **params) -> SecondOrderModel:
    if name.replace("-", "_") != "plate_actuator":
        raise UnknownModelError(
            f"no builtin second-order model named '{name}'")
    return _plate_actuator(**params)


def builtin_model(name: str, **params) -> StochasticDae:
    """Benchmark registry; second-order entries are converted on the fly."""
    key = name.replace("-", "_")
    if key == "plate_actuator":
        return second_order_to_first(_plate_actuator(**params))
    try:
        factory = BUILTIN_MODELS[key]
    except KeyError:
        raise UnknownModelError(
            f"no builtin model named '{name}'; available: "
            f"{', '.join(sorted(BUILTIN_MODELS))}") from None
    return factory(**params)
