"""Explicit time stepping of dJ/dt = Lap J - J nabla_p J nabla_p J.

Steps are forward Euler or classical RK4 on the unconstrained field, with a
periodic retraction onto compatible structures.  ``run`` adds the stopping
rules and the doubling-time bookkeeping for the energy density maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .diagnostics import DiagnosticsRecord
from .errors import ConstraintBlowup, NonFinite
from .grid import DIM, GridSpec, MetricField, integrate_scalar
from .tensor import (
    constraint_residuals,
    field_norm2,
    project_compatible,
    tension_and_density,
)

DRIFT_LIMIT = 0.1
WINDOW_TOL = 0.05
KAPPA = 2.0  # dE/dt = -KAPPA * int |tension|^2 for E = int |nabla J|^2

TIME_LIMIT = "TIME_LIMIT"
KAHLER_LIMIT = "KAHLER_LIMIT"
BLOWUP_CANDIDATE = "BLOWUP_CANDIDATE"


@dataclass
class StepControl:
    scheme: str = "rk4"
    cfl_safety: float = 0.5
    dt_override: float | None = None
    project_every: int = 10
    t_end: float = 0.0
    stop_tension_tol: float = 1e-6
    blowup_e_factor: float = 10.0
    delta_lemma32: float = 0.1

    def __post_init__(self):
        if self.scheme not in ("euler", "rk4"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 < self.cfl_safety <= 1:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.dt_override is not None and not self.dt_override > 0:
            raise ValueError("dt_override must be positive")
        if int(self.project_every) != self.project_every or self.project_every < 0:
            raise ValueError("project_every must be a nonnegative integer")
        if self.t_end < 0:
            raise ValueError("t_end must be nonnegative")
        if not self.stop_tension_tol > 0:
            raise ValueError("stop_tension_tol must be positive")
        if not self.blowup_e_factor > 1:
            raise ValueError("blowup_e_factor must exceed 1")
        if not self.delta_lemma32 > 0:
            raise ValueError("delta_lemma32 must be positive")


@dataclass
class FlowState:
    J: np.ndarray
    t: float = 0.0
    step_index: int = 0
    last_dt: float = 0.0
    projections_applied: int = 0


def cfl_dt(grid: GridSpec, metric: MetricField, ctrl: StepControl) -> float:
    """cfl_safety * h^2 / (2 n lambda_max(g^-1)), or the override."""
    if ctrl.dt_override is not None:
        return float(ctrl.dt_override)
    return ctrl.cfl_safety * grid.h_min ** 2 / (2 * DIM * metric.ginv_max_eig)


def _rhs(J, metric):
    return tension_and_density(J, metric)[0]


def step(state: FlowState, ctrl: StepControl, metric: MetricField, k1: np.ndarray | None = None) -> FlowState:
    """Advance one step; ``k1`` may carry the tension already evaluated at J."""
    dt = cfl_dt(metric.grid, metric, ctrl)
    J = state.J
    # overflow is reported as NonFinite below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        if k1 is None:
            k1 = _rhs(J, metric)
        if ctrl.scheme == "euler":
            Jn = J + dt * k1
        else:
            k2 = _rhs(J + 0.5 * dt * k1, metric)
            k3 = _rhs(J + 0.5 * dt * k2, metric)
            k4 = _rhs(J + dt * k3, metric)
            Jn = J + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.isfinite(Jn).all():
        raise NonFinite(f"non-finite field after step {state.step_index + 1} at t={state.t + dt:.6g}")
    idx = state.step_index + 1
    nproj = state.projections_applied
    if ctrl.project_every and idx % ctrl.project_every == 0:
        a, b, _, _ = constraint_residuals(Jn, metric)
        if max(a, b) > DRIFT_LIMIT:
            raise ConstraintBlowup(f"constraint drift {max(a, b):.3g} before projection at step {idx}")
        Jn = project_compatible(Jn, metric)
        nproj += 1
    return FlowState(Jn, state.t + dt, idx, dt, nproj)


def existence_window(e_bar0: float, delta: float = 0.1):
    """Guaranteed horizon delta*arctan(1/(2 e0)) and the bound 2 e0 + 1/e0."""
    if not e_bar0 > 0:
        raise ValueError("e_bar0 must be positive")
    return delta * math.atan(1.0 / (2.0 * e_bar0)), 2.0 * e_bar0 + 1.0 / e_bar0


@dataclass
class WindowEntry:
    t0: float
    e_bar0: float
    window: float | None
    bound: float | None
    e_max_seen: float
    violated: bool = False


@dataclass
class RunResult:
    verdict: str
    reason: str
    records: list
    windows: list
    final: FlowState
    t_signal: float | None = None
    error: str | None = None
    nonfinite: bool = False


class _DoublingMonitor:
    def __init__(self, delta: float):
        self.delta = delta
        self.history: list[WindowEntry] = []

    def _open(self, t, e):
        if e > 0:
            w, b = existence_window(e, self.delta)
        else:
            w, b = None, None
        self.history.append(WindowEntry(t, e, w, b, e))

    def update(self, t: float, e: float) -> bool:
        """Feed one sample; True when the doubling bound is violated."""
        if not self.history:
            self._open(t, e)
            return False
        cur = self.history[-1]
        if cur.window is None:
            if e > 0:
                self._open(t, e)
            return False
        if t > cur.t0 + cur.window:
            self._open(t, e)
            return False
        cur.e_max_seen = max(cur.e_max_seen, e)
        if e > cur.bound * (1.0 + WINDOW_TOL):
            cur.violated = True
            return True
        return False


def measure(state: FlowState, metric: MetricField, dt: float):
    """One record and the tension at the current state."""
    T, e = tension_and_density(state.J, metric)
    a, b, _, _ = constraint_residuals(state.J, metric)
    t2 = field_norm2(T, metric)
    rec = DiagnosticsRecord(
        t=state.t,
        E=2.0 * integrate_scalar(e, metric),
        e_max=float(e.max()),
        A_max=a,
        B_max=b,
        tension_linf=float(np.sqrt(t2.max())),
        tension_l2sq=integrate_scalar(t2, metric),
        dt=dt,
    )
    return rec, T


def fill_dissipation(records: list, kappa: float = KAPPA) -> None:
    """Centred differences of E(t) against -kappa int |tension|^2."""
    for r in records:
        r.dissipation_rhs = -kappa * r.tension_l2sq
    if len(records) < 3:
        return
    t = np.array([r.t for r in records])
    E = np.array([r.E for r in records])
    if np.any(np.diff(t) <= 0):
        return
    dE = np.gradient(E, t, edge_order=2)
    for r, d in zip(records, dE):
        r.dissipation_lhs = float(d)


def run(J0: np.ndarray, metric: MetricField, ctrl: StepControl, record_every: int = 1,
        snapshot_every: int = 0, on_snapshot: Callable[[FlowState], None] | None = None,
        max_steps: int | None = None) -> RunResult:
    """Integrate to ``ctrl.t_end`` or until a stopping rule fires.

    The final step is shortened so the run lands on t_end exactly.
    """
    state = FlowState(J=np.array(J0, dtype=np.float64))
    dt_nom = cfl_dt(metric.grid, metric, ctrl)
    mon = _DoublingMonitor(ctrl.delta_lemma32)
    records: list[DiagnosticsRecord] = []

    def snap(s):
        if on_snapshot is not None:
            on_snapshot(s)

    snap(state)
    rec, T = measure(state, metric, dt_nom)
    records.append(rec)
    mon.update(rec.t, rec.e_max)
    e0 = rec.e_max
    verdict, reason, t_signal, err, nonfinite = TIME_LIMIT, "t_end reached", None, None, False

    def converged(r):
        return r.tension_linf < ctrl.stop_tension_tol and r.e_max < ctrl.stop_tension_tol

    if converged(rec) and ctrl.t_end > 0:
        verdict, reason = KAHLER_LIMIT, "tension and energy density below tolerance"
    else:
        n = 0
        while state.t < ctrl.t_end * (1 - 1e-12):
            if max_steps is not None and n >= max_steps:
                reason = "step limit reached"
                break
            dt = min(dt_nom, ctrl.t_end - state.t)
            c = ctrl if dt == dt_nom else replace(ctrl, dt_override=dt)
            try:
                state = step(state, c, metric, k1=T)
            except NonFinite as exc:
                verdict, reason, t_signal, err, nonfinite = BLOWUP_CANDIDATE, "non-finite field", state.t, str(exc), True
                break
            except ConstraintBlowup as exc:
                verdict, reason, t_signal, err = BLOWUP_CANDIDATE, "constraint drift", state.t, str(exc)
                break
            n += 1
            last = state.t >= ctrl.t_end * (1 - 1e-12)
            rec_now = n % record_every == 0 or last
            rec, T = measure(state, metric, dt)
            if rec_now:
                records.append(rec)
            if snapshot_every and (n % snapshot_every == 0 or last):
                snap(state)
            if mon.update(rec.t, rec.e_max):
                if not rec_now:
                    records.append(rec)
                verdict, reason, t_signal = BLOWUP_CANDIDATE, "doubling bound violated", rec.t
                break
            if e0 > 0 and rec.e_max > ctrl.blowup_e_factor * e0:
                if not rec_now:
                    records.append(rec)
                verdict, reason, t_signal = BLOWUP_CANDIDATE, "energy density runaway", rec.t
                break
            if converged(rec):
                if not rec_now:
                    records.append(rec)
                verdict, reason = KAHLER_LIMIT, "tension and energy density below tolerance"
                break
    fill_dissipation(records)
    return RunResult(verdict, reason, records, mon.history, state, t_signal, err, nonfinite)


def calibrate_delta(records: list, J_series: list, metric: MetricField) -> float:
    """delta = 1/C with C = sup (d_t e - Lap e) / (e^2 + 1) over a probe run.

    ``J_series`` holds fields at the record times; d_t e is a centred
    difference and Lap the flat-grid scalar Laplacian.
    """
    from .tensor import energy_density, partial

    if len(J_series) < 3:
        raise ValueError("need at least three fields")
    grid = metric.grid
    es = [energy_density(J, metric) for J in J_series]
    ts = [r.t for r in records]
    C = 0.0
    for k in range(1, len(es) - 1):
        dte = (es[k + 1] - es[k - 1]) / (ts[k + 1] - ts[k - 1])
        lap = sum(partial(partial(es[k], p, grid.spacing[p]), p, grid.spacing[p]) for p in grid.active_axes)
        C = max(C, float(((dte - lap) / (es[k] ** 2 + 1.0)).max()))
    return 1.0 / C if C > 0 else float("inf")
