"""Differential operators on endomorphism fields J[..., beta, alpha] = J_alpha^beta.

Partial derivatives use the fourth-order centred periodic stencil.  The rough
Laplacian is assembled as the exact discrete adjoint of the covariant
gradient, so  sum <Lap J, S> dv = -sum <nabla J, nabla S> dv  holds to
round-off on the grid for any metric.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from ._kernels import flat_tension
from .grid import DIM, MetricField, integrate_scalar

TOL_COMPAT = 1e-8
TOL_ID = 1e-6


class ProjectionError(ValueError):
    """The antisymmetric part of J is singular somewhere on the grid."""


def partial(f: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Fourth-order centred derivative along grid ``axis`` (periodic).

    Written as differences of shifted copies so a constant field gives an
    exact zero and the operator is exactly antisymmetric.
    """
    d1 = np.roll(f, -1, axis) - np.roll(f, 1, axis)
    d2 = np.roll(f, -2, axis) - np.roll(f, 2, axis)
    return (8.0 * d1 - d2) / (12.0 * h)


def _gamma_mat(metric: MetricField, p: int) -> np.ndarray:
    # (Gamma_p)[beta, l] = Gamma^beta_{l p}
    return metric.gamma[..., :, :, p]


def covariant_derivative(J: np.ndarray, metric: MetricField) -> np.ndarray:
    """nabla J as an array [..., k, beta, alpha] = nabla_k J_alpha^beta."""
    return tensor_derivative(J, metric, 0)


def tensor_derivative(T: np.ndarray, metric: MetricField, n_form: int) -> np.ndarray:
    """Covariant derivative of T[..., q_1..q_n, beta, alpha].

    The new derivative index is placed first after the grid axes.
    """
    grid = metric.grid
    nd = len(grid.shape)
    out = np.zeros(grid.shape + (DIM,) + T.shape[nd:])
    lead = (slice(None),) * nd
    for p in grid.active_axes:
        out[lead + (p,)] = partial(T, p, grid.spacing[p])
    if metric.is_flat:
        return out
    pad = (1,) * n_form
    for p in range(DIM):
        Gp = _gamma_mat(metric, p).reshape(grid.shape + pad + (DIM, DIM))
        acc = Gp @ T - T @ Gp
        for slot in range(n_form):
            # - Gamma^m_{q p} T_{..m..}
            Tm = np.moveaxis(T, nd + slot, -1)
            Gq = Gp.reshape(grid.shape + (1,) * (n_form + 1) + (DIM, DIM))
            corr = (Tm[..., None, :] @ Gq)[..., 0, :]
            acc -= np.moveaxis(corr, -1, nd + slot)
        out[lead + (p,)] += acc
    return out


def endo_inner(A: np.ndarray, B: np.ndarray, metric: MetricField) -> np.ndarray:
    """Pointwise <A, B> = g_{bc} g^{ad} A^b_a B^c_d."""
    if metric.is_flat:
        return np.einsum("...ij,...ij->...", A, B)
    gA = metric.g @ A @ metric.g_inv
    return np.einsum("...ij,...ij->...", gA, B)


def _weighted_grad(dJ: np.ndarray, metric: MetricField) -> np.ndarray:
    """W_p = sqrt|g| g^{pq} g nabla_q J g^{-1}; the dual of nabla J."""
    if metric.is_flat:
        return dJ
    g, gi = metric.g[..., None, :, :], metric.g_inv[..., None, :, :]
    low = g @ dJ @ gi
    return metric.sqrt_det[..., None, None, None] * np.einsum("...pq,...qij->...pij", metric.g_inv, low)


def grad_norm2(dJ: np.ndarray, metric: MetricField) -> np.ndarray:
    """|nabla J|^2 with all indices contracted through g."""
    if metric.is_flat:
        return np.einsum("...pij,...pij->...", dJ, dJ)
    W = _weighted_grad(dJ, metric)
    return np.einsum("...pij,...pij->...", W, dJ) / metric.sqrt_det


def _laplacian_from_grad(dJ: np.ndarray, metric: MetricField) -> np.ndarray:
    grid = metric.grid
    W = _weighted_grad(dJ, metric)
    F = np.zeros(dJ.shape[:-3] + (DIM, DIM))
    for p in grid.active_axes:
        F -= partial(W[..., p, :, :], p, grid.spacing[p])
    if metric.is_flat:
        return -F
    for p in range(DIM):
        GpT = np.swapaxes(_gamma_mat(metric, p), -1, -2)
        F += GpT @ W[..., p, :, :] - W[..., p, :, :] @ GpT
    return -(metric.g_inv @ F @ metric.g) / metric.sqrt_det[..., None, None]


def rough_laplacian(J: np.ndarray, metric: MetricField) -> np.ndarray:
    return _laplacian_from_grad(covariant_derivative(J, metric), metric)


def _nonlinear_from_grad(J: np.ndarray, dJ: np.ndarray, metric: MetricField) -> np.ndarray:
    # (J nabla_p J nabla_p J)^k_j = g^{pq} J_j^a nabla_p J_a^b nabla_q J_b^k
    if metric.is_flat:
        sq = np.zeros_like(J)
        for p in metric.grid.active_axes:
            sq += dJ[..., p, :, :] @ dJ[..., p, :, :]
        return sq @ J
    raised = np.einsum("...pq,...qij->...pij", metric.g_inv, dJ)
    sq = np.einsum("...pij,...pjk->...ik", raised, dJ)
    return sq @ J


def nonlinear_term(J: np.ndarray, metric: MetricField) -> np.ndarray:
    return _nonlinear_from_grad(J, covariant_derivative(J, metric), metric)


def tension(J: np.ndarray, metric: MetricField) -> np.ndarray:
    """Lap J - J nabla_p J nabla_p J; vanishes exactly at harmonic J."""
    return tension_and_density(J, metric)[0]


def tension_and_density(J: np.ndarray, metric: MetricField):
    """Tension and the energy density 1/2 |nabla J|^2 from one gradient pass.

    The flat metric goes through a fused compiled kernel with the same
    stencil arithmetic.
    """
    if metric.is_flat:
        return flat_tension(J, metric.grid)
    dJ = covariant_derivative(J, metric)
    T = _laplacian_from_grad(dJ, metric) - _nonlinear_from_grad(J, dJ, metric)
    return T, 0.5 * grad_norm2(dJ, metric)


def energy_density(J: np.ndarray, metric: MetricField) -> np.ndarray:
    return 0.5 * grad_norm2(covariant_derivative(J, metric), metric)


def energy(J: np.ndarray, metric: MetricField) -> float:
    """E(J) = integral of |nabla J|^2 (no factor 1/2)."""
    return integrate_scalar(grad_norm2(covariant_derivative(J, metric), metric), metric)


def field_norm2(T: np.ndarray, metric: MetricField) -> np.ndarray:
    return endo_inner(T, T, metric)


def constraint_residuals(J: np.ndarray, metric: MetricField):
    """Sup (max entry) and L2 norms of A = g(J., J.) - g and B = J^2 + id."""
    eye = np.eye(DIM)
    B = J @ J + eye
    if metric.is_flat:
        A = np.swapaxes(J, -1, -2) @ J - eye
    else:
        A = np.swapaxes(J, -1, -2) @ metric.g @ J - metric.g
    a2 = np.einsum("...ij,...ij->...", A, A)
    b2 = np.einsum("...ij,...ij->...", B, B)
    return (
        float(np.abs(A).max()),
        float(np.abs(B).max()),
        float(np.sqrt(integrate_scalar(a2, metric))),
        float(np.sqrt(integrate_scalar(b2, metric))),
    )


def anticommutator(J: np.ndarray, dJ: np.ndarray) -> np.ndarray:
    """J nabla_k J + nabla_k J J, zero for exactly compatible J."""
    Jb = J[..., None, :, :]
    return Jb @ dJ + dJ @ Jb


def _workers() -> int:
    raw = os.environ.get("ACFLOW_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _polar_antisym(Jhat: np.ndarray, offset: int, grid_shape) -> np.ndarray:
    K = 0.5 * (Jhat - np.swapaxes(Jhat, -1, -2))
    w, V = np.linalg.eigh(np.swapaxes(K, -1, -2) @ K)
    bad = w[:, 0] <= 1e-24 * np.maximum(w[:, -1], 1e-300)
    if bad.any() or not np.isfinite(w).all():
        idx = int(np.argmax(bad | ~np.isfinite(w).all(axis=-1))) + offset
        raise ProjectionError(f"antisymmetric part singular at grid point {tuple(int(i) for i in np.unravel_index(idx, grid_shape))}")
    inv_sqrt = np.einsum("...ik,...k,...jk->...ij", V, 1.0 / np.sqrt(w), V)
    return K @ inv_sqrt


def project_compatible(J: np.ndarray, metric: MetricField) -> np.ndarray:
    """Retract a field onto compatible almost complex structures.

    In a g-orthonormal frame the field is made antisymmetric and replaced by
    its orthogonal polar factor, which squares to -id.
    """
    grid = metric.grid
    if metric.is_flat:
        Jhat = J
    else:
        Jhat = metric.sqrt_g @ J @ metric.inv_sqrt_g
    flat = np.ascontiguousarray(Jhat).reshape(-1, DIM, DIM)
    n = flat.shape[0]
    workers = _workers()
    if workers == 1 or n < 4096:
        U = _polar_antisym(flat, 0, grid.shape)
    else:
        bounds = np.linspace(0, n, workers + 1).astype(int)
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(lambda ab: _polar_antisym(flat[ab[0]:ab[1]], ab[0], grid.shape),
                                zip(bounds[:-1], bounds[1:])))
        U = np.concatenate(parts)
    U = U.reshape(J.shape)
    if not metric.is_flat:
        U = metric.inv_sqrt_g @ U @ metric.sqrt_g
    # points that already satisfy both constraints exactly are left bitwise alone
    exact = _exactly_compatible(J, metric)
    if exact.any():
        U[exact] = J[exact]
    return U


def _exactly_compatible(J: np.ndarray, metric: MetricField) -> np.ndarray:
    eye = np.eye(DIM)
    B = J @ J + eye
    A = np.swapaxes(J, -1, -2) @ metric.g @ J - metric.g
    return ~(B.any(axis=(-2, -1)) | A.any(axis=(-2, -1)))


def commutator_curvature_term(J: np.ndarray, metric: MetricField) -> np.ndarray:
    """[nabla_i, nabla_j] J as [..., i, j, beta, alpha] from the curvature."""
    grid = metric.grid
    if metric.is_flat:
        return np.zeros(grid.shape + (DIM, DIM) + (DIM, DIM))
    Rm = metric.riemann  # [..., i, j, k, l]
    Jb = J[..., None, None, :, :]
    return Rm @ Jb - Jb @ Rm


def second_derivative(J: np.ndarray, metric: MetricField) -> np.ndarray:
    """nabla^2 J as [..., p, q, beta, alpha] = nabla_p nabla_q J."""
    return tensor_derivative(covariant_derivative(J, metric), metric, 1)


def sup_derivative_norm(J: np.ndarray, metric: MetricField, m: int) -> float:
    """sup over the grid of |nabla^m J| (metric norm on every index)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    grid = metric.grid
    if metric.is_flat:
        # accumulate |D_{p1}..D_{pm} J|^2 one index chain at a time
        acc = np.zeros(grid.shape)
        axes = grid.active_axes

        def walk(F, depth):
            nonlocal acc
            if depth == m:
                acc += np.einsum("...ij,...ij->...", F, F)
                return
            for p in axes:
                walk(partial(F, p, grid.spacing[p]), depth + 1)

        walk(J, 0)
        return float(np.sqrt(acc.max()))
    T = covariant_derivative(J, metric)
    for k in range(1, m):
        T = tensor_derivative(T, metric, k)
    nd = len(grid.shape)
    low = metric.g.reshape(grid.shape + (1,) * m + (DIM, DIM)) @ T @ metric.g_inv.reshape(
        grid.shape + (1,) * m + (DIM, DIM)
    )
    gi = metric.g_inv.reshape(grid.shape + (1,) * (m + 1) + (DIM, DIM))
    raised = T
    for slot in range(m):
        moved = np.moveaxis(raised, nd + slot, -1)
        raised = np.moveaxis((gi @ moved[..., None])[..., 0], -1, nd + slot)
    n2 = np.einsum("...k,...k->...", low.reshape(grid.shape + (-1,)), raised.reshape(grid.shape + (-1,)))
    return float(np.sqrt(np.maximum(n2, 0).max()))


def orthogonality_residuals(J: np.ndarray, metric: MetricField):
    """Scaled residuals of the two orthogonality pairings of a compatible J.

    Pointwise: sup |<nabla_i J, J nabla_p J nabla_p J>| / (1 + |nabla J|^3).
    Integrated: |int <tension, J nabla_p J nabla_p J>| / (E^(3/2) (1 + ||Lap J||)).
    """
    dJ = covariant_derivative(J, metric)
    N = _nonlinear_from_grad(J, dJ, metric)
    if metric.is_flat:
        pair = np.einsum("...pij,...ij->...p", dJ, N)
        p2 = np.einsum("...p,...p->...", pair, pair)
    else:
        gN = metric.g @ N @ metric.g_inv
        pair = np.einsum("...pij,...ij->...p", dJ, gN)
        p2 = np.einsum("...pq,...p,...q->...", metric.g_inv, pair, pair)
    gn = np.sqrt(grad_norm2(dJ, metric))
    first = float((np.sqrt(np.maximum(p2, 0.0)) / (1.0 + gn**3)).max())
    lap = _laplacian_from_grad(dJ, metric)
    E = integrate_scalar(gn * gn, metric)
    if E == 0.0:
        return first, 0.0
    lap_l2 = np.sqrt(integrate_scalar(field_norm2(lap, metric), metric))
    second = abs(integrate_scalar(endo_inner(lap - N, N, metric), metric)) / (E**1.5 * (1.0 + lap_l2))
    return first, float(second)
