"""Periodic grids on the 4-torus, metrics on them, and quadrature.

Arrays on the grid have shape ``grid.shape + tail``.  An axis with a single
point is *thin*: every field is constant along it, derivatives along it
vanish, and quadrature multiplies by its full length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

DIM = 4


@dataclass(frozen=True)
class GridSpec:
    points: tuple[int, ...]
    lengths: tuple[float, ...]

    def __post_init__(self):
        pts = tuple(int(n) for n in self.points)
        lens = tuple(float(x) for x in self.lengths)
        if len(pts) != DIM or len(lens) != DIM:
            raise ValueError(f"grid must have {DIM} axes")
        for a, (n, ell) in enumerate(zip(pts, lens)):
            if ell <= 0:
                raise ValueError(f"length on axis {a} must be positive")
            if n != 1 and (n < 8 or n % 2):
                raise ValueError(f"axis {a}: need an even point count >= 8 (or 1 for a thin axis), got {n}")
        if all(n == 1 for n in pts):
            raise ValueError("at least one axis must be resolved")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "lengths", lens)

    @classmethod
    def uniform(cls, n: int, length: float = 1.0, thin_axes: Sequence[int] = ()) -> "GridSpec":
        pts = tuple(1 if a in thin_axes else n for a in range(DIM))
        return cls(pts, (float(length),) * DIM)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.points

    @property
    def dim(self) -> int:
        return DIM

    @property
    def thin_axes(self) -> tuple[int, ...]:
        return tuple(a for a, n in enumerate(self.points) if n == 1)

    @property
    def active_axes(self) -> tuple[int, ...]:
        return tuple(a for a, n in enumerate(self.points) if n > 1)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple(ell / n for ell, n in zip(self.lengths, self.points))

    @property
    def h_min(self) -> float:
        return min(self.spacing[a] for a in self.active_axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    @property
    def size(self) -> int:
        return int(np.prod(self.points))

    def axis_coords(self, a: int) -> np.ndarray:
        return np.arange(self.points[a]) * self.spacing[a]

    def coords(self) -> list[np.ndarray]:
        """Broadcastable coordinate arrays, one per axis."""
        out = []
        for a in range(DIM):
            shp = [1] * DIM
            shp[a] = self.points[a]
            out.append(self.axis_coords(a).reshape(shp))
        return out

    def displacement(self, x0: Sequence[float]) -> list[np.ndarray]:
        """Nearest-image displacement x - x0 per axis (zero on thin axes)."""
        out = []
        for a, c in enumerate(self.coords()):
            if a in self.thin_axes:
                out.append(np.zeros_like(c))
                continue
            ell = self.lengths[a]
            out.append((c - x0[a] + 0.5 * ell) % ell - 0.5 * ell)
        return out


def pairwise_sum(values) -> float:
    """Sum by a balanced binary tree over the C-ordered flattened array.

    Level by level, element 2k is added to element 2k+1 (odd tails are padded
    with an exact zero), so the result does not depend on how the caller
    might schedule the work.
    """
    a = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    while a.size > 1:
        if a.size % 2:
            a = np.append(a, 0.0)
        a = a[0::2] + a[1::2]
    return float(a[0])


# -- metrics -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MetricField:
    """Metric coefficients on a grid with their derived quantities.

    ``g[..., i, j]`` is g_ij, ``gamma[..., k, i, j]`` is Gamma^k_ij and
    ``riemann[..., i, j, k, l]`` is R_ij^k_l, the curvature with
    [nabla_i, nabla_j] V^k = R_ij^k_l V^l.  The flat metric stores nothing
    and hands out read-only broadcast views.
    """

    grid: GridSpec
    tag: str = "flat"
    amplitude: float = 0.0
    seed: int = 0
    _g: np.ndarray | None = field(default=None, repr=False)
    _dg: np.ndarray | None = field(default=None, repr=False)
    _ddg: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_flat(self) -> bool:
        return self.tag == "flat"

    def _const(self, tail_value: np.ndarray) -> np.ndarray:
        return np.broadcast_to(tail_value, self.grid.shape + tail_value.shape)

    @cached_property
    def g(self) -> np.ndarray:
        if self.is_flat:
            return self._const(np.eye(DIM))
        return self._g

    @cached_property
    def g_inv(self) -> np.ndarray:
        if self.is_flat:
            return self.g
        return np.linalg.inv(self._g)

    @cached_property
    def sqrt_det(self) -> np.ndarray:
        if self.is_flat:
            return self._const(np.array(1.0))
        return np.sqrt(np.linalg.det(self._g))

    @cached_property
    def sqrt_g(self) -> np.ndarray:
        """Symmetric square root of g (maps coordinate to orthonormal frames)."""
        if self.is_flat:
            return self.g
        w, v = np.linalg.eigh(self._g)
        return np.einsum("...ik,...k,...jk->...ij", v, np.sqrt(w), v)

    @cached_property
    def inv_sqrt_g(self) -> np.ndarray:
        if self.is_flat:
            return self.g
        w, v = np.linalg.eigh(self._g)
        return np.einsum("...ik,...k,...jk->...ij", v, 1.0 / np.sqrt(w), v)

    @cached_property
    def gamma(self) -> np.ndarray:
        if self.is_flat:
            return self._const(np.zeros((DIM,) * 3))
        dg = self._dg  # [..., m, i, j] = d_m g_ij
        # lower-index Christoffel [l, i, j] = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
        low = 0.5 * (
            np.einsum("...ijl->...lij", dg)
            + np.einsum("...jil->...lij", dg)
            - dg
        )
        return np.einsum("...kl,...lij->...kij", self.g_inv, low)

    @cached_property
    def dgamma(self) -> np.ndarray:
        """Analytic first derivatives, ``dgamma[..., m, k, i, j]`` = d_m Gamma^k_ij."""
        if self.is_flat:
            return self._const(np.zeros((DIM,) * 4))
        dg, ddg, ginv = self._dg, self._ddg, self.g_inv
        low = 0.5 * (
            np.einsum("...ijl->...lij", dg)
            + np.einsum("...jil->...lij", dg)
            - dg
        )
        # ddg[..., m, n, i, j] = d_m d_n g_ij
        dlow = 0.5 * (
            np.einsum("...mijl->...mlij", ddg)
            + np.einsum("...mjil->...mlij", ddg)
            - ddg
        )
        dginv = -np.einsum("...ka,...mab,...bl->...mkl", ginv, dg, ginv)
        return (
            np.einsum("...mkl,...lij->...mkij", dginv, low)
            + np.einsum("...kl,...mlij->...mkij", ginv, dlow)
        )

    @cached_property
    def riemann(self) -> np.ndarray:
        if self.is_flat:
            return self._const(np.zeros((DIM,) * 4))
        G, dG = self.gamma, self.dgamma
        # R_ij^k_l = d_i G^k_jl - d_j G^k_il + G^k_ia G^a_jl - G^k_ja G^a_il
        term = np.einsum("...ikjl->...ijkl", dG)
        quad = np.einsum("...kia,...ajl->...ijkl", G, G)
        return term - np.swapaxes(term, -4, -3) + quad - np.swapaxes(quad, -4, -3)

    @cached_property
    def ginv_max_eig(self) -> float:
        if self.is_flat:
            return 1.0
        return float(1.0 / np.linalg.eigvalsh(self._g)[..., 0].min())

    @property
    def dg(self) -> np.ndarray:
        if self.is_flat:
            return self._const(np.zeros((DIM,) * 3))
        return self._dg


def build_flat_metric(grid: GridSpec) -> MetricField:
    return MetricField(grid, "flat")


_PERTURB_MODES = 3


def _perturbation_modes(grid: GridSpec, seed: int):
    """Per-entry trig modes drawn from ``seed``.

    Each mode is ``(i, j, coef, axes, phases)`` contributing
    coef * prod_a cos(k_a x_a - phase_a) to s_ij (and s_ji).
    """
    rng = np.random.default_rng(seed)
    axes = grid.active_axes
    modes = []
    for i in range(DIM):
        for j in range(i, DIM):
            coefs = rng.uniform(-1.0, 1.0, _PERTURB_MODES)
            # |s_ij| <= 1/4 keeps the spectral norm of s below 1
            coefs *= 0.25 / max(np.abs(coefs).sum(), 1e-12)
            for c in coefs:
                if len(axes) >= 2:
                    pair = tuple(rng.choice(axes, 2, replace=False))
                else:
                    pair = (axes[0],)
                phases = tuple(float(rng.integers(0, 2)) * 0.5 * np.pi for _ in pair)
                modes.append((i, j, float(c), pair, phases))
    return modes


def build_perturbed_metric(grid: GridSpec, amplitude: float, seed: int) -> MetricField:
    """g = identity + amplitude * s with s a seeded low-frequency trig series.

    First and second metric derivatives are differentiated analytically, so
    Christoffel symbols and curvature carry no discretization error.
    """
    if not 0.0 <= amplitude < 0.2:
        raise ValueError(f"amplitude must lie in [0, 0.2), got {amplitude}")
    if amplitude == 0.0:
        return build_flat_metric(grid)

    shape = grid.shape
    X = grid.coords()
    k = [2 * np.pi / ell for ell in grid.lengths]
    s = np.zeros(shape + (DIM, DIM))
    ds = np.zeros(shape + (DIM, DIM, DIM))
    dds = np.zeros(shape + (DIM, DIM, DIM, DIM))
    for i, j, c, pair, phases in _perturbation_modes(grid, seed):
        val = [np.cos(k[a] * X[a] - ph) for a, ph in zip(pair, phases)]
        der = [-k[a] * np.sin(k[a] * X[a] - ph) for a, ph in zip(pair, phases)]
        sec = [-k[a] ** 2 * v for a, v in zip(pair, val)]
        if len(pair) == 1:
            (a,) = pair
            f, fd, fdd = (np.broadcast_to(q, shape) for q in (val[0], der[0], sec[0]))
            grads = {a: fd}
            hess = {(a, a): fdd}
        else:
            a, b = pair
            f = np.broadcast_to(val[0] * val[1], shape)
            grads = {a: der[0] * val[1], b: val[0] * der[1]}
            hess = {(a, a): sec[0] * val[1], (b, b): val[0] * sec[1], (a, b): der[0] * der[1]}
            hess[(b, a)] = hess[(a, b)]
        for (p, q) in ((i, j), (j, i)) if i != j else ((i, j),):
            s[..., p, q] += c * f
            for m, v in grads.items():
                ds[..., m, p, q] += c * v
            for (m, n), v in hess.items():
                dds[..., m, n, p, q] += c * v

    g = np.eye(DIM) + amplitude * s
    lam_min = np.linalg.eigvalsh(g)[..., 0].min()
    if lam_min <= 0.5:
        raise ValueError(f"perturbed metric too degenerate (min eigenvalue {lam_min:.3g})")
    for arr in (g, ds, dds):
        arr.setflags(write=False)
    return MetricField(
        grid, "perturbed", float(amplitude), int(seed),
        _g=g, _dg=amplitude * ds, _ddg=amplitude * dds,
    )


def integrate_scalar(f, metric: MetricField) -> float:
    """Periodic trapezoid rule: sum of f * sqrt|g| * cell volume."""
    grid = metric.grid
    f = np.broadcast_to(np.asarray(f, dtype=np.float64), grid.shape)
    if metric.is_flat:
        return pairwise_sum(f) * grid.cell_volume
    return pairwise_sum(f * metric.sqrt_det) * grid.cell_volume
