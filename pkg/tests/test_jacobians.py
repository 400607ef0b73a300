import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from billiards.geometry import Domain, annulus, disk, ellipse, graph_arc, polar_cos3, sandbox
from billiards.jacobians import (
    RTOL,
    BothCoefficientsTiny,
    Exclusions,
    GrazingAtBounce,
    PreconditionFailed,
    SpecularBasis,
    backward_position,
    bounce_frame,
    bounce_jacobian,
    chain_determinant,
    change_of_variable_check,
    cov_sweep,
    critical_coefficients,
    critical_times,
    det_check,
    fd_jacobian,
    first_bounce_jacobian_global,
    transition_data,
    transversality_product,
)
from billiards.trajectory import PhasePoint, TraceOptions, trace_cycles

ANNULUS_PHASE = dict(t=0.0, x=[0.55, 0.2, -0.35], v=[0.4, 0.3, 0.7], s=-0.4)


def chain_cycle(dom, x, v, k):
    cyc = trace_cycles(dom, PhasePoint(x, v), TraceOptions(bounce_cap=k))
    assert len(cyc.events) == k
    return cyc


# -- fd oracle ------------------------------------------------------------------


def test_fd_jacobian_on_polynomial_map():
    f = lambda z: np.array([z[0] ** 3 * z[1], math.sin(z[1])])  # noqa: E731
    J = fd_jacobian(f, [1.3, 0.4], [1e-6, 1e-6])
    exact = np.array([[3 * 1.3**2 * 0.4, 1.3**3], [0.0, math.cos(0.4)]])
    assert np.allclose(J, exact, rtol=1e-9, atol=1e-9)


# -- per-bounce derivatives ---------------------------------------------------------


def test_corpus_covers_four_scenes(corpus):
    from collections import Counter

    assert len(corpus) == 100
    assert Counter(e.scene for e in corpus) == {"disk": 25, "annulus": 25, "ellipse": 25, "polar": 25}


def test_corpus_derivatives_match_finite_differences(corpus):
    worst = 0.0
    for e in corpus:
        worst = max(worst, bounce_jacobian(e.domain, e.cycle, e.k).max_residual)
        worst = max(worst, first_bounce_jacobian_global(e.domain, e.phase).max_residual)
    assert worst < RTOL


def test_diameter_orbit_flight_time_is_stationary():
    cyc = chain_cycle(disk(), [0.0, 0.0], [1.0, 0.0], 3)
    rep = bounce_jacobian(disk(), cyc, 1)
    a, f = rep.entry("dflight/dx1")
    assert abs(a) < 1e-14
    assert abs(f) < 1e-9


def test_random_annulus_orbit_residual():
    dom = annulus()
    cyc = chain_cycle(dom, [0.5, 0.4], [0.9, -0.3], 4)
    for k in (1, 2, 3):
        assert bounce_jacobian(dom, cyc, k).max_residual < 1e-5


def test_ellipse_flight_time_velocity_derivatives():
    dom = Domain(ellipse(2.0, 1.0))
    cyc = chain_cycle(dom, [0.3, 0.2], [0.6, 0.9], 3)
    rep = bounce_jacobian(dom, cyc, 1)
    for name in ("dflight/dv1", "dflight/dv3"):
        a, f = rep.entry(name)
        assert abs(a - f) <= 1e-5 * max(abs(a), 1e-4)


def test_speed_independent_of_launch_position(corpus):
    for e in corpus[:20]:
        rep = first_bounce_jacobian_global(e.domain, e.phase)
        assert rep.entry("dspeed/dx1")[0] == 0.0
        assert rep.entry("dspeed/dx3")[0] == 0.0


def test_center_of_disk_exit_time_velocity_derivative():
    v = 1.7
    rep = first_bounce_jacobian_global(disk(), PhasePoint([0.0, 0.0], [v, 0.0]))
    tb = 1.0 / v
    a, f = rep.entry("dtb/dv1")
    assert a == pytest.approx(-tb / v, rel=1e-12)
    assert f == pytest.approx(-tb / v, rel=1e-6)


def test_flat_boundary_exit_time_gradient():
    dom = sandbox(graph_arc([0.0, 0.0], -5.0, 5.0))
    v = np.array([0.3, -0.4])
    rep = first_bounce_jacobian_global(dom, PhasePoint([0.2, 0.5], [0.3, 0.4]))
    n = np.array([0.0, -1.0])
    vel = np.array([0.3, 0.4])
    # plane crossing time x3 / v3 differentiated in closed form
    assert rep.entry("dtb/dx1")[0] == pytest.approx(n[0] / float(n @ vel), abs=1e-15)
    assert rep.entry("dtb/dx3")[0] == pytest.approx(n[1] / float(n @ vel), rel=1e-12)
    assert rep.entry("dtb/dx3")[0] == pytest.approx(1 / 0.4, rel=1e-12)
    assert v[0] == 0.3


def test_grazing_bounce_rejected():
    dom = annulus()
    cyc = trace_cycles(dom, PhasePoint([0.5, 0.3], [1.0, 0.0]), TraceOptions(bounce_cap=3))
    assert cyc.events[0].incidence < 1e-9
    with pytest.raises(GrazingAtBounce):
        bounce_frame(dom, cyc, 1)


# -- determinants ---------------------------------------------------------------------


def test_disk_formula_determinant_is_one():
    cyc = chain_cycle(disk(), [0.2, -0.3], [0.4, 0.8], 3)
    d = det_check(disk(), cyc, 1)
    assert d.formula == pytest.approx(1.0, abs=1e-14)
    assert abs(d.analytic) == pytest.approx(1.0, abs=1e-12)


def test_annulus_three_way_determinant():
    dom = annulus()
    cyc = chain_cycle(dom, [0.5, 0.4], [0.9, -0.3], 4)
    for k in (1, 2, 3):
        d = det_check(dom, cyc, k)
        assert d.analytic_vs_formula < 1e-8
        assert d.analytic_vs_fd < 1e-6


def test_corpus_determinant_identities(corpus):
    for e in corpus:
        d = det_check(e.domain, e.cycle, e.k)
        assert d.analytic_vs_formula < 1e-8
        assert d.analytic_vs_fd < 1e-6


@pytest.mark.parametrize("name", ["disk", "annulus", "ellipse", "polar"])
def test_chain_determinant_is_metric_ratio(name, scenes):
    dom = scenes[name]
    cyc = chain_cycle(dom, [0.1, 0.35], [0.7, -0.45], 5)
    c = chain_determinant(dom, cyc, 5)
    assert c.analytic == pytest.approx(c.fd, rel=1e-6)
    assert c.analytic == pytest.approx(c.corrected_closed_form, rel=1e-10)
    assert c.formula_product == pytest.approx(c.formula_telescoped, rel=1e-10)


@pytest.mark.parametrize("name", ["disk", "annulus", "ellipse", "polar"])
def test_formula_product_telescopes_to_stated_closed_form(name, scenes):
    # invariant as stated: product of per-bounce formula determinants equals
    # sqrt(g11^1)/sqrt(g11^k) * |v3^k|^2 / |v3^1|^2 to 1e-10
    dom = scenes[name]
    cyc = chain_cycle(dom, [0.1, 0.35], [0.7, -0.45], 5)
    c = chain_determinant(dom, cyc, 5)
    assert abs(c.formula_product - c.stated_closed_form) < 1e-10


# -- specular basis and transition matrix --------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_specular_basis_orthonormal(a, b):
    assume(math.hypot(a, b) > 1e-3)
    B = SpecularBasis.of([a, b])
    M = np.column_stack([B.e0, B.eperp])
    assert np.allclose(M.T @ M, np.eye(2), atol=1e-14)


def test_transition_entries_identities(corpus):
    for e in corpus[:40]:
        ph = e.cycle.origin
        td = transition_data(e.domain, ph, e.cycle, e.k)
        fr = td.frame
        S = td.matrix
        assert abs(S.S1) == pytest.approx(fr.sqrt_g11 * abs(fr.v3) / fr.speed, rel=1e-10)
        assert abs(S.S3) == pytest.approx(fr.speed / abs(fr.v3), rel=1e-10)
        assert abs(S.det) == pytest.approx(abs(S.S1 * S.S3), rel=1e-15)


def test_flat_boundary_kills_second_transition_entry():
    dom = sandbox(graph_arc([0.0, 0.0], -5.0, 5.0))
    ph = PhasePoint([0.2, 0.5], [0.3, 0.4])
    cyc = trace_cycles(dom, ph, TraceOptions(bounce_cap=1))
    td = transition_data(dom, ph, cyc, 1)
    assert td.matrix.S2 == 0.0


# -- critical times -------------------------------------------------------------------------


def test_critical_time_examples():
    ct = critical_coefficients(1.0, -0.5)
    assert ct.phi1 == 0.5
    assert ct.indicator
    off = critical_coefficients(0.1, 1.0)
    assert not off.indicator and off.phi2 == 0.0
    with pytest.raises(BothCoefficientsTiny):
        critical_coefficients(1e-10, -1e-10)


@settings(max_examples=200, deadline=None)
@given(
    b=st.floats(-3, 3),
    c=st.floats(-3, 3),
    delta=st.floats(1e-3, 0.5),
    s=st.floats(-1, 1),
)
def test_critical_time_lower_bounds(b, c, delta, s):
    assume(abs(b) > 1e-6 or abs(c) > 1e-6)
    ct = critical_coefficients(b, c, delta_star=delta)
    val = abs(float(ct.value(s)))
    if b != 0 and abs(s - ct.phi1) > delta:
        assert val >= ct.bound_first() * (1 - 1e-12)
    if abs(s - ct.phi2) > delta and (ct.indicator or True):
        if ct.indicator and abs(s - ct.phi1) > delta:
            assert val >= min(ct.bound_first(), ct.bound_second()) * (1 - 1e-12)
        if not ct.indicator:
            assert val >= ct.bound_second() * (1 - 1e-12)


def test_critical_times_from_scene():
    dom = annulus()
    ph = PhasePoint([0.5, 0.1], [0.5, -0.6], 0.0)
    ct = critical_times(dom, ph, 1, 0.05)
    assert ct.psi1 == pytest.approx(ph.t - ct.phi1)


# -- transversality ----------------------------------------------------------------------------


def test_free_flight_transversality_closed_form():
    ph = PhasePoint([0.5, 0.0], [0.3, 0.5], 0.0)
    sp = math.hypot(0.3, 0.5)
    for s in (-0.1, -0.3):
        tr = transversality_product(annulus(), ph, s)
        assert tr.k == 0
        # X(s) = x - (t - s) |v| (h1, h3); columns d/d|v| and d/dh1 in the specular frame
        h1, h3 = 0.3 / sp, 0.5 / sp
        d_speed = -(0 - s) * np.array([h1, h3])
        d_h1 = -(0 - s) * sp * np.array([1.0, -h1 / h3])
        E = np.array([[h1, h3], [h3, -h1]])
        expect = np.linalg.det(E @ np.column_stack([d_speed, d_h1]))
        assert tr.analytic == pytest.approx(expect, rel=1e-12)
        assert tr.fd == pytest.approx(expect, rel=1e-6)


def test_transversality_vanishes_linearly_at_start():
    ph = PhasePoint([0.5, 0.0], [0.3, 0.5], 0.0)
    vals = [transversality_product(annulus(), ph, -h).analytic for h in (1e-2, 1e-3)]
    # free flight is quadratic in (t - s), so it vanishes at least linearly
    assert abs(vals[1]) < abs(vals[0]) / 10


@pytest.mark.parametrize("s", [-1.2, -1.9, -2.6, -3.3])
def test_transversality_analytic_matches_fd(s):
    ph = PhasePoint([0.55, -0.35], [0.4, 0.7], 0.0)
    tr = transversality_product(annulus(), ph, s)
    assert tr.k >= 1
    assert tr.relative_error < 1e-5


def test_transversality_sign_change_near_psi():
    dom = annulus()
    ph = PhasePoint([0.55, -0.35], [0.4, 0.7], 0.0)
    cyc = trace_cycles(dom, ph, TraceOptions(bounce_cap=4))
    found = 0
    for k in range(1, 4):
        ct = critical_times(dom, ph, k, 0.05, cycle=cyc)
        lo, hi = cyc.event(k + 1).time, cyc.event(k).time
        psi = ct.psi1
        if not lo + 0.02 < psi < hi - 0.02:
            continue
        a = transversality_product(dom, ph, psi - 0.01).analytic
        b = transversality_product(dom, ph, psi + 0.01).analytic
        assert a * b < 0
        found += 1
    assert found >= 1


# -- change of variables ---------------------------------------------------------------


def test_axial_factor():
    p = ANNULUS_PHASE
    dom = annulus()
    y = backward_position(dom, PhasePoint(p["x"], p["v"], p["t"]), p["s"])
    u = np.array([0.3, 0.2, 0.6])
    sp = -1.0
    h = 1e-6

    def x2(w2):
        return backward_position(dom, PhasePoint(y, [u[0], w2, u[2]], p["s"]), sp)[1]

    d = (x2(u[1] + h) - x2(u[1] - h)) / (2 * h)
    assert d == pytest.approx(-(p["s"] - sp), rel=1e-8)


def test_admissible_change_of_variable():
    p = ANNULUS_PHASE
    r = change_of_variable_check(annulus(), p["t"], p["x"], p["v"], p["s"], [0.3, 0.2, 0.6], -2.0)
    assert r.violations == ()
    assert abs(r.det_fd) > 1e-8
    assert r.relative_error < 1e-5
    assert r.passed(1e-8)


def test_preconditions_reported_and_raised():
    p = ANNULUS_PHASE
    r = change_of_variable_check(annulus(), p["t"], p["x"], p["v"], p["s"], [0.3, 0.2, 0.6], p["s"] - 0.001)
    assert "time_separation" in r.violations
    assert not r.passed(1e-8)
    with pytest.raises(PreconditionFailed):
        change_of_variable_check(
            annulus(), p["t"], p["x"], p["v"], p["s"], [0.3, 0.2, 0.01], -0.9, raise_on_violation=True
        )


def test_sweep_psi_windows_fail_and_admissible_agree():
    p = ANNULUS_PHASE
    rng = np.random.default_rng(3)
    us = []
    while len(us) < 4:
        u = rng.uniform(-1, 1, 3)
        if u[2] > 0.2:
            us.append(u)
    res = cov_sweep(annulus(), p["t"], p["x"], p["v"], p["s"], us, exclusions=Exclusions())
    adm = [r for r in res if r.result is not None and not r.result.violations and not r.at_psi]
    assert len(adm) >= 20
    assert all(r.result.relative_error < 1e-5 for r in adm)
    assert all(abs(r.result.det_fd) > 1e-8 for r in adm)
    for r in res:
        if r.at_psi and r.result is not None:
            assert not r.result.passed(1e-8)
