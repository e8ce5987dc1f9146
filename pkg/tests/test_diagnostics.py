import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from acflow.diagnostics import (
    DiagnosticsRecord,
    MonotonicityProbe,
    Trajectory,
    check_monotonicity_inequality,
    check_psi_inequality,
    cutoff,
    dissipation_check,
    dissipation_factor_oracle,
    epsilon_regularity_probe,
    monotonicity_Psi,
    monotonicity_Z,
    shi_ratio,
    weight_f,
    weight_ftilde,
)
from acflow.flow import StepControl, run
from acflow.grid import GridSpec, build_flat_metric
from acflow.initial import kahler_standard
from acflow.sphere import j_from_u

from conftest import great_circle, smooth_compatible

CENTER = (0.5, 0.5, 0.5, 0.5)


@pytest.fixture(scope="module")
def thin_metric():
    return build_flat_metric(GridSpec((16, 16, 1, 1), (1.0,) * 4))


def _constant_traj(metric, times):
    traj = Trajectory(metric)
    for t in times:
        traj.append(t, kahler_standard(metric.grid))
    return traj


def test_weight_closed_forms():
    assert weight_f(0.0, 1.0) == -3.0
    assert weight_ftilde(1.0) == -3.0
    # exact values at rational points from a 50-digit evaluation
    import mpmath

    mpmath.mp.dps = 50
    for tau in (0.5, 0.25, 0.125, 0.75):
        lg = mpmath.log(mpmath.mpf(tau))
        exact = -tau * lg**2 + 2 * tau * lg - 3 * tau
        assert abs(weight_f(1.0 - tau, 1.0) - float(exact)) < 1e-14
    for R in (0.5, 0.25, 0.125):
        lg = mpmath.log(mpmath.mpf(R))
        exact = -4 * R**2 * lg**2 + 4 * R**2 * lg - 3 * R**2
        assert abs(weight_ftilde(R) - float(exact)) < 1e-14


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99))
def test_weight_f_derivative(t):
    h = 1e-6
    d = (weight_f(t + h, 1.0) - weight_f(t - h, 1.0)) / (2 * h)
    assert d == pytest.approx(math.log(1 - t) ** 2 + 1, rel=1e-6)
    assert d >= 1 - 1e-6


def test_weight_domains():
    with pytest.raises(ValueError):
        weight_f(1.0, 1.0)
    with pytest.raises(ValueError):
        weight_ftilde(0.0)


def test_cutoff_shape():
    s = np.linspace(0, 0.3, 3001)
    phi = cutoff(s, 0.2)
    assert np.all(phi[s <= 0.1] == 1.0) and np.all(phi[s >= 0.2] == 0.0)
    assert np.all(np.diff(phi) <= 1e-15)
    h = 1e-6
    for edge in (0.1, 0.2):
        assert abs(cutoff(edge + h, 0.2) - cutoff(edge - h, 0.2)) / (2 * h) < 1e-4


def test_probe_validation(thin_metric):
    with pytest.raises(ValueError):
        MonotonicityProbe(CENTER, 0.0, 0.2)
    with pytest.raises(ValueError):
        MonotonicityProbe(CENTER, 0.1, 0.2, N_weight=1.0)
    with pytest.raises(ValueError):
        MonotonicityProbe(CENTER, 0.1, 0.3).validate(thin_metric.grid)


def test_constant_field_gives_zero(thin_metric):
    traj = _constant_traj(thin_metric, np.append(np.linspace(0, 0.04, 11), 0.049))
    probe = MonotonicityProbe(CENTER, 0.05, 0.25)
    assert not np.any(monotonicity_Z(traj, probe))
    assert monotonicity_Psi(traj, probe, 0.1) == 0.0
    rep = check_monotonicity_inequality(traj.times, monotonicity_Z(traj, probe), probe, 0.0)
    assert rep.fitted_C == 0.0 and rep.violations == 0
    rep = check_monotonicity_inequality(traj.times, monotonicity_Z(traj, probe), probe, 0.0, slack=False)
    assert rep.fitted_C == 0.0 and rep.violations == 0 and rep.worst_margin == 0.0
    eps = epsilon_regularity_probe(traj, probe, 0.1, 0.5, 1.0)
    assert eps.hypothesis_met and eps.Psi == 0.0 and eps.c == 0.0


@pytest.mark.parametrize("shape", [(16, 16, 1, 1), (16, 16, 16, 16)])
def test_one_mode_Z_matches_radial_quadrature(shape):
    """Z/(T0 - t) over the constant density equals the kernel mass of phi^2."""
    g = GridSpec(shape, (1.0,) * 4)
    m = build_flat_metric(g)
    J = j_from_u(great_circle(g))
    traj = Trajectory(m)
    for t in (0.0, 0.005, 0.01, 0.015):
        traj.append(t, J)
    probe = MonotonicityProbe(CENTER, 0.02, 0.25)
    Z = monotonicity_Z(traj, probe)
    c = traj.density(0).mean()
    for t, z in zip(traj.times, Z):
        tau = probe.T0 - t

        def radial(s):
            return math.exp(-s * s / (4 * tau)) / (4 * math.pi * tau) ** 2 * cutoff(s, 0.25) ** 2 * 2 * math.pi**2 * s**3

        mass = quad(radial, 0, 0.25, epsabs=1e-14, limit=200)[0]
        assert z / (tau * c) == pytest.approx(mass, rel=1e-2)


def test_Z_nonnegative_and_time_checks(thin_metric):
    traj = Trajectory(thin_metric)
    for k, t in enumerate((0.0, 0.01, 0.02)):
        traj.append(t, smooth_compatible(thin_metric, 0.2, k))
    assert np.all(monotonicity_Z(traj, MonotonicityProbe(CENTER, 0.05, 0.25)) >= 0)
    with pytest.raises(ValueError):
        monotonicity_Z(traj, MonotonicityProbe(CENTER, 0.02, 0.25))
    with pytest.raises(ValueError):
        traj.append(0.01, traj.fields[0])


def test_psi_coverage_and_radius_checks(thin_metric):
    traj = _constant_traj(thin_metric, [0.0, 0.01, 0.02])
    probe = MonotonicityProbe(CENTER, 0.05, 0.25)
    with pytest.raises(ValueError):
        monotonicity_Psi(traj, probe, 0.1)  # window [0.01, 0.04] not covered
    with pytest.raises(ValueError):
        monotonicity_Psi(traj, probe, 0.2)  # exceeds sqrt(T0)/2


def test_psi_for_constant_density(thin_metric):
    g = thin_metric.grid
    J = j_from_u(great_circle(g))
    traj = Trajectory(thin_metric)
    for t in np.linspace(0, 0.045, 46):
        traj.append(t, J)
    probe = MonotonicityProbe(CENTER, 0.05, 0.25)
    Z = monotonicity_Z(traj, probe)
    R = 0.1
    psi = monotonicity_Psi(traj, probe, R)
    # trapezoid of Z/(T0 - t) on the same samples
    t = np.array(traj.times)
    sel = (t >= probe.T0 - 4 * R * R - 1e-12) & (t <= probe.T0 - R * R + 1e-12)
    assert psi == pytest.approx(np.trapezoid(Z[sel] / (probe.T0 - t[sel]), t[sel]), rel=1e-12)
    assert psi > 0


def test_monotonicity_input_checks():
    probe = MonotonicityProbe(CENTER, 1.0, 0.25)
    with pytest.raises(ValueError):
        check_monotonicity_inequality([0.0, 0.2, 0.1] + list(np.linspace(0.3, 0.9, 10)), np.zeros(13), probe, 1.0)
    with pytest.raises(ValueError):
        check_monotonicity_inequality(np.linspace(0.1, 0.5, 5), np.zeros(5), probe, 1.0)


def test_slack_monotone_in_N():
    """A larger N only adds slack, so the fitted constant can only shrink."""
    t = np.linspace(0.05, 0.9, 20)
    Z = 1.0 + 0.3 * np.sin(7 * t)  # deliberately non-monotone
    Cs = []
    for Nw in (math.e, math.e**2, 20.0, 100.0):
        probe = MonotonicityProbe(CENTER, 1.0, 0.25, N_weight=Nw)
        rep = check_monotonicity_inequality(t, Z, probe, 0.5)
        Cs.append(rep.fitted_C)
    assert all(b <= a for a, b in zip(Cs, Cs[1:]))


def test_psi_inequality_fit():
    probe = MonotonicityProbe(CENTER, 1.0, 0.25)
    R = [0.4, 0.3, 0.2, 0.1]
    rep = check_psi_inequality(R, [1.0, 0.8, 0.7, 0.5], probe, 0.1)
    assert rep.fitted_C == 0.0 and rep.violations == 0
    with pytest.raises(ValueError):
        check_psi_inequality([0.2, 0.2], [1.0, 1.0], probe, 0.1)


def test_kappa_oracle_is_two(thin_metric, pert8):
    # the grid pairing of tension and nonlinear term is O(h^4), not zero
    for m, J in [(thin_metric, smooth_compatible(thin_metric, 0.2, 1)), (pert8, smooth_compatible(pert8, 0.2, 1))]:
        assert dissipation_factor_oracle(J, m) == pytest.approx(2.0, rel=1e-3)
    fine = build_flat_metric(GridSpec((32, 32, 1, 1), (1.0,) * 4))
    errs = [abs(dissipation_factor_oracle(smooth_compatible(m, 0.2, 1), m) - 2) for m in (thin_metric, fine)]
    assert errs[1] < errs[0] / 8
    with pytest.raises(ValueError):
        dissipation_factor_oracle(kahler_standard(thin_metric.grid), thin_metric)


def test_dissipation_identity_along_run(thin_metric):
    J = smooth_compatible(thin_metric, 0.2, 3)
    res = run(J, thin_metric, StepControl(t_end=0.01))
    lhs, rhs, resid = dissipation_check(res.records[:-1])
    inner = slice(2, -2)
    assert np.max(np.abs(resid[inner]) / np.abs(rhs[inner])) < 1e-3


def test_dissipation_stationary(flat8):
    recs = [DiagnosticsRecord(t, 0.0, 0.0, 0.0, 0.0, 0.0) for t in (0.0, 0.1, 0.2)]
    lhs, rhs, _ = dissipation_check(recs)
    assert not np.any(lhs) and not np.any(rhs)
    with pytest.raises(ValueError):
        dissipation_check(recs[:2])


def test_shi_ratio(thin_metric):
    traj = _constant_traj(thin_metric, [0.0, 0.1, 0.2])
    assert np.array_equal(shi_ratio(traj, 2), np.zeros(2))
    with pytest.raises(ValueError):
        shi_ratio(traj, 4)
    J = j_from_u(great_circle(thin_metric.grid))
    traj = Trajectory(thin_metric, [0.25], [J])
    # one-mode circle: |nabla^2 J| = 2 k^2
    assert shi_ratio(traj, 2)[0] == pytest.approx(2 * (2 * math.pi) ** 2 * 0.5, rel=1e-2)


def test_epsilon_probe_reports(thin_metric):
    J = j_from_u(great_circle(thin_metric.grid))
    traj = Trajectory(thin_metric)
    for t in np.linspace(0, 0.05, 51):
        traj.append(t, J)
    probe = MonotonicityProbe(CENTER, 0.05, 0.25)
    hi = epsilon_regularity_probe(traj, probe, 0.1, 0.5, 1e-6)
    assert not hi.hypothesis_met and hi.c is None
    lo = epsilon_regularity_probe(traj, probe, 0.1, 0.5, 1e6)
    d = traj.density(0).max()
    assert lo.c == pytest.approx(d * 0.05**2, rel=1e-12)
    # constant density: the sup over the cylinder is the kernel average
    assert lo.c_normalized == pytest.approx(1.0 / (lo.Psi / (3 * 0.01 * d)), rel=1e-12)
