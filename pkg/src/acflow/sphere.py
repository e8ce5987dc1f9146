"""Flat-torus correspondence between compatible structures and maps to S^2.

On flat R^4 the compatible structures of one orientation are u_1 I_1 +
u_2 I_2 + u_3 I_3 with (I_a) left multiplication by unit quaternions and u a
unit vector.  The classical harmonic map heat flow of u is kept here as an
independent oracle for the tensor flow.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NonFinite, ReconstructionFailure
from .grid import GridSpec, MetricField, build_flat_metric, pairwise_sum
from .tensor import covariant_derivative, grad_norm2, partial


def _left_mult(q) -> np.ndarray:
    """Matrix of x -> q x on quaternions with basis (1, i, j, k)."""
    a, b, c, d = q
    return np.array(
        [
            [a, -b, -c, -d],
            [b, a, -d, c],
            [c, d, a, -b],
            [d, -c, b, a],
        ],
        dtype=np.float64,
    )


# I1 = L_j, I2 = L_k, I3 = L_i so that I1 I2 = I3 and I3 is the standard structure
BASIS = np.stack([_left_mult((0, 0, 1, 0)), _left_mult((0, 0, 0, 1)), _left_mult((0, 1, 0, 0))])
BASIS.setflags(write=False)

UNIT_TOL = 1e-10


def check_unit(u: np.ndarray, tol: float = UNIT_TOL) -> None:
    dev = np.abs(np.linalg.norm(u, axis=-1) - 1.0)
    if not np.all(dev <= tol):
        raise ValueError(f"field is not unit length (max deviation {np.nanmax(dev):.3g})")


def j_from_u(u: np.ndarray) -> np.ndarray:
    check_unit(u)
    return np.einsum("...a,aij->...ij", u, BASIS)


def u_from_j(J: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Coefficients u_a = -tr(J I_a)/4, checking J lies in the span."""
    u = -0.25 * np.einsum("...ij,aji->...a", J, BASIS)
    resid = np.abs(J - np.einsum("...a,aij->...ij", u, BASIS)).max(axis=(-2, -1))
    worst = float(resid.max())
    if not worst < tol:
        idx = np.unravel_index(int(np.argmax(resid)), resid.shape)
        raise ReconstructionFailure(worst, tuple(int(i) for i in idx))
    return u


# -- flat S^2 flow ---------------------------------------------------------------


def sphere_gradients(u: np.ndarray, grid: GridSpec):
    """Per-axis first differences of u on the resolved axes."""
    return [(p, partial(u, p, grid.spacing[p])) for p in grid.active_axes]


def sphere_rhs(u: np.ndarray, grid: GridSpec):
    """Delta u + |Du|^2 u with the same composite stencil as the tensor flow."""
    lap = np.zeros_like(u)
    g2 = np.zeros(u.shape[:-1])
    for p, du in sphere_gradients(u, grid):
        lap += partial(du, p, grid.spacing[p])
        g2 += np.einsum("...a,...a->...", du, du)
    return lap + g2[..., None] * u, g2


def sphere_energy(u: np.ndarray, grid: GridSpec) -> float:
    """Dirichlet energy of u without the 1/2."""
    g2 = sum(np.einsum("...a,...a->...", du, du) for _, du in sphere_gradients(u, grid))
    return pairwise_sum(g2) * grid.cell_volume


def harmonic_map_flow_step(u: np.ndarray, dt: float, grid: GridSpec) -> np.ndarray:
    """One classical RK4 step followed by pointwise renormalisation."""
    k1, _ = sphere_rhs(u, grid)
    k2, _ = sphere_rhs(u + 0.5 * dt * k1, grid)
    k3, _ = sphere_rhs(u + 0.5 * dt * k2, grid)
    k4, _ = sphere_rhs(u + dt * k3, grid)
    v = u + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    with np.errstate(over="ignore", invalid="ignore"):
        nv = np.linalg.norm(v, axis=-1, keepdims=True)
    if not (np.isfinite(v).all() and np.isfinite(nv).all() and (nv > 0).all()):
        raise NonFinite("non-finite value in sphere flow step")
    return v / nv


# -- oracles -------------------------------------------------------------------


def reduction_factor_oracle(samples, grid: GridSpec, spread_tol: float = 1e-6) -> float:
    """Measure lambda = |nabla J_u|^2 / |nabla u|^2 over sample fields."""
    if len(samples) < 3:
        raise ValueError("need at least three sample fields")
    metric = build_flat_metric(grid)
    ratios = []
    for u in samples:
        gj = grad_norm2(covariant_derivative(j_from_u(u), metric), metric)
        gu = sum(np.einsum("...a,...a->...", du, du) for _, du in sphere_gradients(u, grid))
        mask = gu > 1e-8
        ratios.append(gj[mask] / gu[mask])
    r = np.concatenate(ratios)
    lam = float(r.mean())
    spread = float((r.max() - r.min()) / lam)
    if spread >= spread_tol:
        raise ValueError(f"reduction factor not constant (relative spread {spread:.3g})")
    return lam


@dataclass
class CrossReport:
    """Distances at sampled times plus the sup over every step."""

    times: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    dt: float = 0.0
    steps: int = 0
    tol: float = 1e-5
    sup_distance: float = 0.0

    @property
    def max_distance(self) -> float:
        return max([self.sup_distance] + self.distances)

    @property
    def passed(self) -> bool:
        return self.max_distance < self.tol


def cross_validate(J0: np.ndarray, t_end: float, ctrl, metric: MetricField,
                   samples: int = 10, tol: float = 1e-5) -> CrossReport:
    """Run the tensor flow and the S^2 flow side by side with equal steps.

    The step count is the smallest integer giving dt no larger than the
    control's step, so both flows land exactly on t_end.  The distance is
    measured after every step; ``samples`` only thins the stored series.
    """
    from .flow import FlowState, cfl_dt, step

    if not metric.is_flat:
        raise ValueError("cross validation needs the flat metric")
    grid = metric.grid
    dt_max = cfl_dt(grid, metric, ctrl)
    n = max(1, int(np.ceil(t_end / dt_max - 1e-12))) if t_end > 0 else 0
    dt = t_end / n if n else 0.0
    fixed = replace(ctrl, dt_override=dt if n else None)
    stride = max(1, n // samples) if n else 1

    state = FlowState(J=np.array(J0, dtype=np.float64))
    u = u_from_j(state.J)
    rep = CrossReport(dt=dt, steps=n, tol=tol)
    rep.times.append(0.0)
    rep.distances.append(0.0)
    for k in range(1, n + 1):
        state = step(state, fixed, metric)
        u = harmonic_map_flow_step(u, dt, grid)
        d = float(np.abs(u_from_j(state.J) - u).max())
        rep.sup_distance = max(rep.sup_distance, d)
        if k % stride == 0 or k == n:
            rep.times.append(k * dt)
            rep.distances.append(d)
    return rep


def cross_order_study(J0: np.ndarray, t_end: float, ctrl, metric: MetricField, refinements: int = 2):
    """Max distance at dt, dt/2, ... and the observed orders between levels."""
    from .flow import cfl_dt

    dt0 = cfl_dt(metric.grid, metric, ctrl)
    dists = []
    for lev in range(refinements + 1):
        c = replace(ctrl, dt_override=dt0 / 2 ** lev)
        dists.append(cross_validate(J0, t_end, c, metric).max_distance)
    orders = [float(np.log2(a / b)) if a > 0 and b > 0 else float("inf") for a, b in zip(dists, dists[1:])]
    return dists, orders
