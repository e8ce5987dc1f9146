"""Quantitative checks on flow trajectories.

Covers the energy dissipation identity, Shi-type derivative ratios, the
localised heat-kernel energies Z(t) and Psi(R) with their almost-monotonicity
inequalities, and an empirical epsilon-regularity probe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .grid import DIM, GridSpec, MetricField, integrate_scalar, pairwise_sum
from .tensor import (
    covariant_derivative,
    energy,
    field_norm2,
    grad_norm2,
    sup_derivative_norm,
    tension,
)


@dataclass
class DiagnosticsRecord:
    t: float
    E: float
    e_max: float
    A_max: float
    B_max: float
    tension_linf: float
    tension_l2sq: float = 0.0
    dt: float = 0.0
    dissipation_lhs: float = float("nan")
    dissipation_rhs: float = float("nan")
    Z: float | None = None
    shi_m2: float | None = None


@dataclass
class Trajectory:
    """Fields J at increasing times on one metric."""

    metric: MetricField
    times: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    _dens: dict = field(default_factory=dict, repr=False)

    def append(self, t: float, J: np.ndarray) -> None:
        if self.times and t <= self.times[-1]:
            raise ValueError("trajectory times must increase")
        self.times.append(float(t))
        self.fields.append(np.array(J, dtype=np.float64, copy=True))

    def density(self, k: int) -> np.ndarray:
        """|nabla J|^2 at sample k (cached)."""
        if k not in self._dens:
            self._dens[k] = grad_norm2(covariant_derivative(self.fields[k], self.metric), self.metric)
        return self._dens[k]

    def __len__(self):
        return len(self.times)


# -- dissipation ---------------------------------------------------------------


def dissipation_factor_oracle(J: np.ndarray, metric: MetricField, eps: float = 1e-6) -> float:
    """kappa from a symmetric difference of E along the tension direction.

    E(J + s T) is expanded about s = 0 with no time integrator involved:
    kappa = -(E(J + eps T) - E(J - eps T)) / (2 eps int |T|^2).
    """
    T = tension(J, metric)
    t2 = integrate_scalar(field_norm2(T, metric), metric)
    if t2 == 0:
        raise ValueError("tension vanishes; kappa is undetermined")
    dE = energy(J + eps * T, metric) - energy(J - eps * T, metric)
    return float(-dE / (2.0 * eps * t2))


def dissipation_check(records, kappa: float = 2.0):
    """(lhs, rhs, residual) per record: dE/dt by centred differences."""
    if len(records) < 3:
        raise ValueError("need at least three records")
    t = np.array([r.t for r in records])
    E = np.array([r.E for r in records])
    lhs = np.gradient(E, t, edge_order=2)
    rhs = np.array([-kappa * r.tension_l2sq for r in records])
    return lhs, rhs, lhs - rhs


# -- weights -------------------------------------------------------------------


def weight_f(t, T0):
    tau = np.asarray(T0 - np.asarray(t, dtype=float))
    if np.any(tau <= 0):
        raise ValueError("weight_f needs t < T0")
    lg = np.log(tau)
    return -tau * lg**2 + 2.0 * tau * lg - 3.0 * tau


def weight_ftilde(R):
    R = np.asarray(R, dtype=float)
    if np.any(R <= 0):
        raise ValueError("weight_ftilde needs R > 0")
    lg = np.log(R)
    return -4.0 * R**2 * lg**2 + 4.0 * R**2 * lg - 3.0 * R**2


# -- localised energies -----------------------------------------------------------


@dataclass
class MonotonicityProbe:
    center: tuple
    T0: float
    rho_cut: float
    N_weight: float = math.e**2
    fitted_C: float | None = None

    def __post_init__(self):
        self.center = tuple(float(c) for c in self.center)
        if len(self.center) != DIM:
            raise ValueError("probe center needs four coordinates")
        if not self.T0 > 0:
            raise ValueError("T0 must be positive")
        if not self.rho_cut > 0:
            raise ValueError("rho_cut must be positive")
        if not self.N_weight > 1:
            raise ValueError("N_weight must exceed 1")

    def validate(self, grid: GridSpec) -> None:
        for a in grid.active_axes:
            if self.rho_cut > grid.lengths[a] / 4 + 1e-12:
                raise ValueError("rho_cut must not exceed L/4 on resolved axes")


def cutoff(s, rho):
    """C^2 radial bump: 1 on [0, rho/2], 0 beyond rho, quintic in between."""
    x = np.clip((np.asarray(s, dtype=float) - 0.5 * rho) / (0.5 * rho), 0.0, 1.0)
    return 1.0 - x**3 * (10.0 - 15.0 * x + 6.0 * x * x)


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(160)


def _thin_weight(s2: np.ndarray, tau: float, rho: float, k: int) -> np.ndarray:
    """Integral of G phi^2 over the k thin directions, as a function of s^2.

    Fields are constant along thin axes, so those directions are integrated
    against the kernel by Gauss-Legendre quadrature in the radial variable q.
    """
    qmax = min(rho, 14.0 * math.sqrt(tau))
    q = 0.5 * qmax * (_GL_NODES + 1.0)
    w = 0.5 * qmax * _GL_WEIGHTS
    surf = {1: 2.0 * np.ones_like(q), 2: 2.0 * np.pi * q, 3: 4.0 * np.pi * q * q}[k]
    r = np.sqrt(s2[..., None] + q * q)
    vals = np.exp(-(s2[..., None] + q * q) / (4.0 * tau)) * cutoff(r, rho) ** 2 * surf * w
    return vals.sum(axis=-1) / (4.0 * np.pi * tau) ** (DIM / 2)


def kernel_weights(grid: GridSpec, probe: MonotonicityProbe, t: float) -> np.ndarray:
    """G phi^2 times the coordinate cell measure, per grid point."""
    tau = probe.T0 - t
    if not tau > 0:
        raise ValueError("kernel needs t < T0")
    X = grid.displacement(probe.center)
    s2 = np.broadcast_to(sum(x * x for x in X), grid.shape)
    thin = grid.thin_axes
    cell = float(np.prod([grid.spacing[a] for a in grid.active_axes]))
    if not thin:
        G = np.exp(-s2 / (4.0 * tau)) / (4.0 * np.pi * tau) ** (DIM / 2)
        return G * cutoff(np.sqrt(s2), probe.rho_cut) ** 2 * cell
    return _thin_weight(np.ascontiguousarray(s2), tau, probe.rho_cut, len(thin)) * cell


def heat_weighted_energy(traj: Trajectory, k: int, probe: MonotonicityProbe) -> float:
    """Integral of |nabla J|^2 G phi^2 sqrt|g| dx at sample k."""
    grid = traj.metric.grid
    w = kernel_weights(grid, probe, traj.times[k])
    f = traj.density(k) * w
    if not traj.metric.is_flat:
        f = f * traj.metric.sqrt_det
    return pairwise_sum(f)


def monotonicity_Z(traj: Trajectory, probe: MonotonicityProbe) -> np.ndarray:
    """Z(t_k) = (T0 - t_k) * heat-weighted energy, for every sample."""
    probe.validate(traj.metric.grid)
    out = []
    for k, t in enumerate(traj.times):
        if t >= probe.T0:
            raise ValueError(f"sample time {t} is not before T0 = {probe.T0}")
        out.append((probe.T0 - t) * heat_weighted_energy(traj, k, probe))
    return np.array(out)


def monotonicity_Psi(traj: Trajectory, probe: MonotonicityProbe, R: float) -> float:
    """Time integral of the heat-weighted energy over [T0 - 4R^2, T0 - R^2]."""
    probe.validate(traj.metric.grid)
    if not 0 < R <= min(math.sqrt(probe.T0) / 2.0, 1.0) + 1e-12:
        raise ValueError("need 0 < R <= min(sqrt(T0)/2, 1)")
    a, b = probe.T0 - 4 * R * R, probe.T0 - R * R
    t = np.array(traj.times)
    slack = 1e-9 * max(1.0, abs(probe.T0))
    if t.size < 2 or t[0] > a + slack or t[-1] < b - slack:
        raise ValueError(f"samples do not cover the window [{a:.6g}, {b:.6g}]")
    # samples bracketing the window, then linear interpolation onto its ends
    lo = max(int(np.searchsorted(t, a, side="right")) - 1, 0)
    hi = min(int(np.searchsorted(t, b, side="left")), t.size - 1)
    ks = list(range(lo, hi + 1))
    tt = t[ks]
    vv = np.array([heat_weighted_energy(traj, k, probe) for k in ks])
    grid_t = np.concatenate([[a], tt[(tt > a) & (tt < b)], [b]])
    vals = np.interp(grid_t, tt, vv)
    return float(np.trapezoid(vals, grid_t))


# -- monotonicity inequalities --------------------------------------------------------


@dataclass
class InequalityReport:
    fitted_C: float
    train_pairs: int
    heldout_pairs: int
    violations: int
    worst_margin: float


def _slack(probe: MonotonicityProbe, E0: float, slack: bool) -> float:
    if not slack:
        return 0.0
    Nw = probe.N_weight
    return Nw ** (DIM / 2) * (E0 + math.sqrt(E0)) + 1.0 / math.log(Nw) ** 2


def _min_C(lhs, base, df, lin):
    """Smallest C >= 0 with lhs <= exp(C df) base + C lin (df, lin >= 0)."""
    if lhs <= base:
        return 0.0

    def gap(C):
        return math.exp(min(C * df, 700.0)) * base + C * lin - lhs

    hi = 1.0
    while gap(hi) < 0:
        hi *= 2.0
        if hi > 1e12:
            return float("inf")
    return brentq(gap, 0.0, hi, xtol=1e-14, rtol=1e-12)


def _fit_and_verify(pairs) -> InequalityReport:
    """pairs: (lhs, base, df, lin); even-indexed pairs train, odd verify."""
    train = pairs[0::2]
    held = pairs[1::2]
    C = max((_min_C(*p) for p in train), default=0.0)
    margins = []
    viol = 0
    for lhs, base, df, lin in held:
        rhs = math.exp(min(C * df, 700.0)) * base + C * lin
        m = rhs - lhs
        margins.append(m)
        if m < -1e-12 * max(1.0, abs(lhs)):
            viol += 1
    worst = min(margins) if margins else float("inf")
    return InequalityReport(C, len(train), len(held), viol, worst)


def check_monotonicity_inequality(times, Z, probe: MonotonicityProbe, E0: float,
                                  slack: bool = True) -> InequalityReport:
    """Fit the uniform C in the Z inequality on half the pairs, test the rest."""
    t = np.asarray(times, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("sample times must increase")
    lo = probe.T0 - min(probe.T0, 1.0)
    sel = (t > lo) & (t < probe.T0)
    if sel.sum() < 10:
        raise ValueError("need at least 10 samples inside the admissible time range")
    t, Z = t[sel], Z[sel]
    f = weight_f(t, probe.T0)
    s = _slack(probe, E0, slack)
    pairs = [
        (Z[j], Z[i], f[j] - f[i], s * (t[j] - t[i]))
        for i in range(len(t)) for j in range(i + 1, len(t))
    ]
    rep = _fit_and_verify(pairs)
    probe.fitted_C = rep.fitted_C
    return rep


def check_psi_inequality(R_values, Psi_values, probe: MonotonicityProbe, E0: float,
                         slack: bool = True) -> InequalityReport:
    """The analogous fit for Psi(R2) against Psi(R1), R2 < R1."""
    R = np.asarray(R_values, dtype=float)
    P = np.asarray(Psi_values, dtype=float)
    order = np.argsort(-R)
    R, P = R[order], P[order]
    if np.any(np.diff(R) >= 0):
        raise ValueError("R values must be distinct")
    ft = weight_ftilde(R)
    s = _slack(probe, E0, slack)
    pairs = [
        (P[j], P[i], ft[j] - ft[i], s * (R[i] - R[j]))
        for i in range(len(R)) for j in range(i + 1, len(R))
    ]
    return _fit_and_verify(pairs)


# -- Shi ratios and epsilon-regularity ---------------------------------------------------


def shi_ratio(traj: Trajectory, m: int) -> np.ndarray:
    """sup |nabla^m J| * t^((m-1)/2) at every sample with t > 0."""
    if m not in (2, 3):
        raise ValueError("m must be 2 or 3")
    out = []
    for t, J in zip(traj.times, traj.fields):
        if t <= 0:
            continue
        out.append(sup_derivative_norm(J, traj.metric, m) * t ** ((m - 1) / 2))
    return np.array(out)


@dataclass
class EpsRegReport:
    R: float
    sigma: float
    Psi: float
    hypothesis_met: bool
    sup_grad2: float | None
    c: float | None
    c_normalized: float | None


def epsilon_regularity_probe(traj: Trajectory, probe: MonotonicityProbe, R: float,
                             sigma: float, eps0: float) -> EpsRegReport:
    """Psi(R) and, when below eps0, the empirical c on the cylinder P_{sigma R}.

    ``c`` is sup |nabla J|^2 (sigma R)^2 as stated.  ``c_normalized`` divides
    that sup by the kernel-averaged density Psi(R) / (3 R^2) (the window has
    length 3 R^2 and the kernel unit mass), so it is comparable across R.
    """
    psi = monotonicity_Psi(traj, probe, R)
    if not psi < eps0:
        return EpsRegReport(R, sigma, psi, False, None, None, None)
    r = sigma * R
    grid = traj.metric.grid
    X = grid.displacement(probe.center)
    ball = np.broadcast_to(np.sqrt(sum(x * x for x in X)) <= r + 1e-12, grid.shape)
    t = np.array(traj.times)
    ks = np.nonzero((t >= probe.T0 - r * r - 1e-12) & (t <= probe.T0 + 1e-12))[0]
    if ks.size == 0:
        raise ValueError("no samples inside the parabolic cylinder")
    sup = max(float(traj.density(int(k))[ball].max()) for k in ks)
    c = sup * r * r
    cn = sup * 3.0 * R * R / psi if psi > 0 else 0.0
    return EpsRegReport(R, sigma, psi, True, sup, c, cn)
