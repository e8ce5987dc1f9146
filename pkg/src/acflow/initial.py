"""Initial data: the standard structure, small perturbations, and the bubble.

The bubble is a map T^4 -> S^2 that is constant outside a ball and, inside,
collapses the ball onto S^4 and applies eta o (suspension of eta), eta the
Hopf map.  That composite represents the nonzero class of pi_4(S^2).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from itertools import product

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .grid import DIM, GridSpec, MetricField
from .sphere import BASIS, j_from_u, u_from_j
from .tensor import project_compatible

J0 = BASIS[2].copy()
J0.setflags(write=False)
U0 = np.array([0.0, 0.0, 1.0])

SPHERE_TOL = 1e-10
MIN_CELLS = 4


def kahler_standard(grid: GridSpec) -> np.ndarray:
    """e1 -> e2, e2 -> -e1, e3 -> e4, e4 -> -e3 at every point."""
    return np.broadcast_to(J0, grid.shape + (DIM, DIM)).copy()


def hopf(z1, z2) -> np.ndarray:
    z1, z2 = np.asarray(z1, dtype=complex), np.asarray(z2, dtype=complex)
    n2 = np.abs(z1) ** 2 + np.abs(z2) ** 2
    if not np.all(np.abs(n2 - 1.0) <= SPHERE_TOL):
        raise ValueError("hopf: input is not on the unit 3-sphere")
    w = z1 * np.conj(z2)
    return np.stack([2.0 * w.real, 2.0 * w.imag, np.abs(z1) ** 2 - np.abs(z2) ** 2], axis=-1)


def _step_profile(t):
    """C-infinity step, 0 for t <= 0 and 1 for t >= 1."""
    t = np.clip(t, 0.0, 1.0)

    def psi(s):
        return np.where(s > 0, np.exp(-1.0 / np.maximum(s, 1e-300)), 0.0)

    a, b = psi(t), psi(1.0 - t)
    return a / (a + b)


@lru_cache(maxsize=16)
def _ramp_table(width: float, samples: int = 20001):
    t = np.linspace(0.0, 1.0, samples)
    bump = _step_profile(t / width) * _step_profile((1.0 - t) / width)
    c = cumulative_trapezoid(bump, t, initial=0.0)
    return t, c / c[-1]


def ramp(t, width: float) -> np.ndarray:
    """Monotone reparametrisation of [0, 1], flat to all orders at both ends.

    It is the normalised integral of a bump that rises over ``width``.
    """
    if not 0.0 < width <= 0.5:
        raise ValueError("smoothing width must lie in (0, 0.5]")
    tt, cc = _ramp_table(float(width))
    return np.interp(np.clip(t, 0.0, 1.0), tt, cc)


def pi4_generator(x: np.ndarray, smoothing_width: float = 0.15) -> np.ndarray:
    """eta o S(eta) on unit vectors of R^5 (last axis), both poles to U0."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 5 or not np.all(np.abs(np.linalg.norm(x, axis=-1) - 1.0) <= SPHERE_TOL):
        raise ValueError("pi4_generator: input is not on the unit 4-sphere")
    lat = np.arccos(np.clip(x[..., 0], -1.0, 1.0)) / np.pi
    r = ramp(lat, smoothing_width)
    a = np.pi * r
    y = x[..., 1:]
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    om = np.where(ny > 0, y / np.where(ny > 0, ny, 1.0), np.array([1.0, 0.0, 0.0, 0.0]))
    eta = hopf(om[..., 0] + 1j * om[..., 1], om[..., 2] + 1j * om[..., 3])
    # suspension: latitude a on S^3 subset C^2 with equator direction eta
    s = np.where((r == 0.0) | (r == 1.0), 0.0, np.sin(a))  # exact at the poles
    z1 = np.cos(a) + 1j * s * eta[..., 0]
    z2 = s * (eta[..., 1] + 1j * eta[..., 2])
    return hopf(z1, z2)


@dataclass(frozen=True)
class BubbleSpec:
    center: tuple
    r0: float
    r: float | None = None
    smoothing_width: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.r is None:
            object.__setattr__(self, "r", float(self.r0))
        if len(self.center) != DIM:
            raise ValueError("bubble center needs four coordinates")
        if not self.r0 > 0:
            raise ValueError("r0 must be positive")
        if not 0 < self.r <= self.r0:
            raise ValueError("need 0 < r <= r0")
        if not 0 < self.smoothing_width <= 0.5:
            raise ValueError("smoothing_width must lie in (0, 0.5]")

    def validate(self, grid: GridSpec) -> None:
        if grid.thin_axes:
            raise ValueError("bubble data needs all four axes resolved")
        if not 2 * self.r0 < min(grid.lengths):
            raise ValueError("bubble does not fit: need 2 r0 < min L")


def bubble_map(grid: GridSpec, spec: BubbleSpec) -> np.ndarray:
    """S^2-valued bubble of radius ``spec.r`` about ``spec.center``."""
    spec.validate(grid)
    X = grid.displacement(spec.center)
    d = np.sqrt(sum(x * x for x in X))
    rho = d / spec.r
    inside = rho < 1.0
    u = np.broadcast_to(U0, grid.shape + (3,)).copy()
    dx = np.stack([np.broadcast_to(x, grid.shape)[inside] for x in X], axis=-1)
    dd = d[inside][:, None]
    om = np.where(dd > 0, dx / np.where(dd > 0, dd, 1.0), np.array([1.0, 0.0, 0.0, 0.0]))
    # collapse B_r -> S^4: centre to the north pole, boundary sphere to the south pole
    alpha = np.pi * rho[inside][:, None]
    x5 = np.concatenate([np.cos(alpha), np.sin(alpha) * om], axis=-1)
    x5 /= np.linalg.norm(x5, axis=-1, keepdims=True)
    u[inside] = pi4_generator(x5, spec.smoothing_width)
    return u


def rescale_bubble(grid: GridSpec, spec: BubbleSpec, r: float) -> np.ndarray:
    """J_r(x) = J(x r0 / r), by re-evaluating the bubble at radius r."""
    if r > spec.r0:
        raise ValueError("rescaled radius exceeds r0")
    floor = MIN_CELLS * grid.h_min
    if r < floor:
        raise ValueError(f"radius {r:.4g} below the resolvability floor {floor:.4g} ({MIN_CELLS} cells)")
    return bubble_map(grid, replace(spec, r=float(r)))


def bubble_structure(grid: GridSpec, spec: BubbleSpec) -> np.ndarray:
    return j_from_u(bubble_map(grid, spec))


# -- random perturbations ----------------------------------------------------------


def _wave_vectors(active):
    """Nonzero integer vectors in {-1,0,1} on the active axes, one per +-pair."""
    out = []
    for k in product((-1, 0, 1), repeat=len(active)):
        if any(k) and k[next(i for i, c in enumerate(k) if c)] > 0:
            full = [0] * DIM
            for a, c in zip(active, k):
                full[a] = c
            out.append(tuple(full))
    return out


def band_limited_field(grid: GridSpec, seed: int, components: int) -> np.ndarray:
    """Seeded sum of the lowest Fourier modes with sup norm at most 1.

    The coefficients depend only on the seed and the resolved axes, so grids
    of different resolution sample the same continuum field.
    """
    rng = np.random.default_rng(seed)
    X = grid.coords()
    ks = _wave_vectors(grid.active_axes)
    coef = rng.standard_normal((len(ks), 2, components))
    scale = np.abs(coef).sum(axis=(0, 1)).max()
    out = np.zeros(grid.shape + (components,))
    for k, c in zip(ks, coef):
        phase = sum(2 * np.pi * k[a] * X[a] / grid.lengths[a] for a in range(DIM) if k[a])
        out += np.cos(phase)[..., None] * c[0] + np.sin(phase)[..., None] * c[1]
    return out / scale


def random_perturbation(base: np.ndarray, amplitude: float, seed: int, metric: MetricField) -> np.ndarray:
    """Compatible structure near ``base`` at distance of order ``amplitude``."""
    if not 0.0 <= amplitude < 0.3:
        raise ValueError("amplitude must lie in [0, 0.3)")
    if amplitude == 0.0:
        return np.array(base, dtype=np.float64, copy=True)
    grid = metric.grid
    if metric.is_flat:
        u = u_from_j(base)
        v = band_limited_field(grid, seed, 3)
        v -= np.einsum("...a,...a->...", v, u)[..., None] * u
        w = u + amplitude * v
        return j_from_u(w / np.linalg.norm(w, axis=-1, keepdims=True))
    S = band_limited_field(grid, seed, DIM * DIM).reshape(grid.shape + (DIM, DIM))
    return project_compatible(base + amplitude * S, metric)
