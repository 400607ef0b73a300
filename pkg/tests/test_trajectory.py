import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from billiards.geometry import Domain, annulus, decompose_boundary, disk, graph_arc, polar_cos3, sandbox
from billiards.trajectory import (
    BounceCapExceeded,
    GrazingClass,
    PhasePoint,
    Termination,
    TraceOptions,
    bounce_count,
    classify_grazing,
    cycle_rows,
    first_exit,
    grazing_margin,
    lift_cylinder,
    position_at,
    reflect,
    trace_cycles,
)
from oracles import bounce_count_oracle, scene_walls

FWD = TraceOptions(direction="forward")


def test_first_exit_from_center():
    hit = first_exit(disk(), [0.0, 0.0], [1.0, 0.0])
    assert hit.s == pytest.approx(1.0, abs=1e-14)
    assert hit.point == pytest.approx([1.0, 0.0], abs=1e-14)


def test_first_exit_across_diameter():
    dom = disk()
    hit = first_exit(dom, [1.0, 0.0], [-1.0, 0.0], launch=(0, 0.0))
    assert hit.s == pytest.approx(2.0, abs=1e-14)
    assert hit.point == pytest.approx([-1.0, 0.0], abs=1e-14)


def test_parabola_ray_hits_vertex():
    dom = sandbox(graph_arc([0.0, 0.0, 0.5], -3.0, 3.0))
    d = -np.array([1.0, 1.0]) / math.sqrt(2)
    hit = first_exit(dom, [1.0, 1.0], d)
    assert hit.point == pytest.approx([0.0, 0.0], abs=1e-12)
    assert hit.s == pytest.approx(math.sqrt(2), abs=1e-12)
    # 45 degree collision angle
    n = dom.curves[0].normal(hit.tau)
    assert abs(float(n @ d)) == pytest.approx(math.sqrt(0.5), abs=1e-12)


def test_reflect_examples():
    assert reflect([1.0, -1.0, 0.0], [0.0, -1.0, 0.0]) == pytest.approx([1.0, 1.0, 0.0])
    assert reflect([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]) == pytest.approx([1.0, 0.0, 0.0])
    assert reflect([-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]) == pytest.approx([1.0, 0.0, 0.0])
    # a cross-section normal leaves the axial component alone
    assert reflect([0.3, 0.7, -0.2], [0.0, 1.0])[1] == 0.7
    with pytest.raises(ValueError):
        reflect([1.0, 0.0], [0.0, 2.0])


def test_disk_orbit_rotates_by_quarter_turns():
    cyc = trace_cycles(disk(), PhasePoint([1.0, 0.0], [-1.0, 1.0]), TraceOptions(direction="forward", bounce_cap=8))
    expect = [(0, 1), (-1, 0), (0, -1), (1, 0)] * 2
    got = [e.position for e in cyc.events]
    assert np.allclose(got, expect, atol=1e-12)
    assert cyc.termination is Termination.BOUNCE_CAP


def test_annulus_radial_period_two():
    cyc = trace_cycles(annulus(), PhasePoint([1.0, 0.0], [-1.0, 0.0]), TraceOptions(direction="forward", bounce_cap=6))
    pts = [e.position for e in cyc.events]
    assert np.allclose(pts, [(0.3, 0), (1, 0)] * 3, atol=1e-13)


def test_tangent_start_stops_immediately():
    cyc = trace_cycles(disk(), PhasePoint([1.0, 0.0], [0.0, 1.0]), FWD)
    assert cyc.termination is Termination.CONVEX_GRAZING_STOP
    assert cyc.events == []


def test_backward_times_decrease_and_events_valid():
    dom = Domain(polar_cos3(0.3))
    cyc = trace_cycles(dom, PhasePoint([0.1, 0.2], [0.3, -0.7], 5.0), TraceOptions(bounce_cap=200))
    times = [cyc.origin.t] + [e.time for e in cyc.events]
    assert all(a > b for a, b in zip(times, times[1:]))
    for e in cyc.events:
        c = dom.curves[e.curve_id]
        assert np.linalg.norm(c.point(e.tau) - e.position) < 1e-10
        assert np.linalg.norm(e.post) == pytest.approx(np.linalg.norm(e.pre), rel=1e-12)
        n3 = np.array([e.normal[0], 0.0, e.normal[1]])
        assert np.allclose(e.post, e.pre - 2 * float(n3 @ e.pre) * n3, atol=1e-12)


def test_bounce_count_zero_length():
    assert bounce_count(disk(), PhasePoint([0.2, 0.1], [0.3, 0.4]), 0.0) == 1


def test_bounce_count_diameter_orbit():
    assert bounce_count(disk(), PhasePoint([1.0, 0.0], [1.0, 0.0]), 10.0) == 6
    chords = [2.0] * 20
    assert next(k for k in range(1, 21) if sum(chords[:k]) > 10) == 6


def test_bounce_count_annulus_radial():
    assert bounce_count(annulus(), PhasePoint([1.0, 0.0], [1.0, 0.0]), 2.0) == 3


def test_bounce_count_cap_is_reported():
    with pytest.raises(BounceCapExceeded):
        bounce_count(disk(), PhasePoint([0.0, 0.0], [1.0, 0.0]), 100.0, TraceOptions(bounce_cap=3))


@pytest.mark.parametrize("name", ["disk", "annulus", "ellipse", "polar"])
def test_bounce_count_matches_implicit_resimulation(name, scenes, rng):
    dom = scenes[name]
    walls = scene_walls(name)
    lo, hi = dom.bounding_box
    n = 0
    while n < 40:
        x = 0.95 * (lo + (hi - lo) * rng.random(2))
        if not dom.contains(x, closed=False):
            continue
        a = rng.uniform(0, 2 * math.pi)
        v = rng.uniform(0.5, 2.0) * np.array([math.cos(a), math.sin(a)])
        L = rng.uniform(0.0, 12.0)
        assert bounce_count(dom, PhasePoint(x, v), L) == bounce_count_oracle(walls, x, v, L)
        n += 1


def test_lift_cylinder():
    ph = PhasePoint([0.0, 0.5, 0.0], [1.0, 1.0, 0.0], 1.0)
    assert lift_cylinder(ph, 0.25, 1.0) == pytest.approx(0.75)
    still = PhasePoint([0.0, 0.4, 0.0], [1.0, 0.0, 0.0], 1.0)
    assert lift_cylinder(still, -3.0) == pytest.approx(0.4)


def test_axial_velocity_untouched_by_bounces():
    cyc = trace_cycles(annulus(), PhasePoint([0.5, 0.1, 0.2], [0.3, -0.8, 0.5]), TraceOptions(bounce_cap=500))
    assert all(e.post[1] == -0.8 for e in cyc.events)


def test_classify_annulus_inner_tangent_is_concave():
    dom = annulus()
    # ray along y = 0.3 touches the hole at (0, 0.3)
    cyc = trace_cycles(dom, PhasePoint([-0.5, 0.3], [1.0, 0.0]), TraceOptions(direction="forward", bounce_cap=2))
    e = cyc.events[0]
    assert e.position == pytest.approx([0.0, 0.3], abs=1e-9)
    assert e.grazing_class is GrazingClass.CONCAVE
    # concave grazing continues straight
    assert cyc.events[1].position == pytest.approx([math.sqrt(1 - 0.09), 0.3], abs=1e-9)


def test_classify_inflection_tangent_launch():
    dom = Domain(polar_cos3(0.3))
    dec = decompose_boundary(dom)
    c = dom.outer
    seen = set()
    for tau, tag in dec.curves[0].inflections:
        for sign in (1, -1):
            cyc = trace_cycles(dom, PhasePoint(c.point(tau), sign * c.tangent(tau)), TraceOptions(direction="forward", bounce_cap=3))
            ahead_concave = (sign > 0) == (tag == "I+")
            if ahead_concave:
                assert cyc.termination is not Termination.INWARD_INFLECTION_TRAP
            else:
                assert cyc.termination is Termination.INWARD_INFLECTION_TRAP
            seen.add(cyc.termination)
    assert Termination.INWARD_INFLECTION_TRAP in seen


def test_classify_grazing_event_helper():
    dom = disk()
    dec = decompose_boundary(dom)
    cyc = trace_cycles(dom, PhasePoint([0.0, 0.0], [1.0, 0.0]), TraceOptions(direction="forward", bounce_cap=1))
    assert classify_grazing(cyc.events[0], dec, TraceOptions(), dom, "forward") is GrazingClass.NON_GRAZING


def test_grazing_margin_disk():
    dom = disk()
    cyc = trace_cycles(dom, PhasePoint([0.0, 0.0], [0.0, 2.0]), TraceOptions(bounce_cap=5))
    inc, dist = grazing_margin(cyc, decompose_boundary(dom), dom)
    assert inc == pytest.approx(2.0)
    assert dist == math.inf
    th = 0.4
    v = np.array([-math.sin(th), math.cos(th)])
    cyc = trace_cycles(dom, PhasePoint([1.0, 0.0], v), TraceOptions(direction="forward", bounce_cap=30))
    incs = [e.incidence for e in cyc.events]
    assert min(incs) == pytest.approx(math.sin(th), abs=1e-12)


def test_speed_conserved_over_many_bounces():
    dom = Domain(polar_cos3(0.3))
    cyc = trace_cycles(dom, PhasePoint([0.1, 0.05, 0.0], [0.6, 0.2, -0.5]), TraceOptions(bounce_cap=10000))
    assert len(cyc.events) == 10000
    sp = np.array([np.linalg.norm(e.post) for e in cyc.events])
    assert np.max(np.abs(sp - np.linalg.norm([0.6, 0.2, -0.5]))) < 1e-12


def test_chord_midpoints_inside(scenes, rng):
    for name in ("annulus", "polar"):
        dom = scenes[name]
        lo, hi = dom.bounding_box
        for _ in range(500):
            x = 0.95 * (lo + (hi - lo) * rng.random(2))
            if not dom.contains(x, closed=False):
                continue
            a = rng.uniform(0, 2 * math.pi)
            cyc = trace_cycles(dom, PhasePoint(x, [math.cos(a), math.sin(a)]), TraceOptions(bounce_cap=8))
            pts = np.array(cyc.points())
            mids = 0.5 * (pts[1:] + pts[:-1])
            assert np.all(dom.contains(mids, closed=True))


@settings(max_examples=30, deadline=None)
@given(
    r=st.floats(0.0, 0.9),
    phi=st.floats(0, 2 * math.pi),
    ang=st.floats(0, 2 * math.pi),
)
def test_circle_incidence_constant(r, phi, ang):
    x = r * np.array([math.cos(phi), math.sin(phi)])
    cyc = trace_cycles(disk(), PhasePoint(x, [math.cos(ang), math.sin(ang)]), TraceOptions(bounce_cap=50))
    inc = np.array([e.incidence for e in cyc.events])
    assert np.ptp(inc) < 1e-10


@pytest.mark.parametrize("name", ["annulus", "ellipse", "polar"])
def test_time_reversibility(name, scenes, rng):
    dom = scenes[name]
    lo, hi = dom.bounding_box
    checked = 0
    while checked < 20:
        x = 0.9 * (lo + (hi - lo) * rng.random(2))
        if not dom.contains(x, closed=False):
            continue
        a = rng.uniform(0, 2 * math.pi)
        v = np.array([math.cos(a), 0.0, math.sin(a)])
        ph = PhasePoint([x[0], 0.0, x[1]], v, 3.0)
        cyc = trace_cycles(dom, ph, TraceOptions(bounce_cap=5))
        if any(e.incidence < 1e-3 for e in cyc.events):
            continue
        e = cyc.events[-1]
        back = PhasePoint([e.position[0], 0.0, e.position[1]], e.pre, e.time)
        fwd = trace_cycles(dom, back, TraceOptions(direction="forward", horizon_time=ph.t - e.time))
        assert fwd.termination is Termination.HORIZON_TIME
        assert np.linalg.norm(fwd.end.xs - ph.xs) < 1e-8
        assert np.linalg.norm(fwd.end.v - ph.v) < 1e-8
        checked += 1


def test_local_continuity():
    dom = Domain(polar_cos3(0.3))
    x, v = np.array([0.1, -0.2]), np.array([0.8, 0.6])
    opts = TraceOptions(bounce_cap=6)
    base = trace_cycles(dom, PhasePoint(x, v), opts)
    assert min(e.incidence for e in base.events) > 1e-2
    ratios = []
    for d in (1e-6, 1e-7, 1e-8):
        pert = trace_cycles(dom, PhasePoint(x + d, v - d), opts)
        dev = max(
            max(np.linalg.norm(a.position - b.position), np.linalg.norm(a.post - b.post))
            for a, b in zip(base.events, pert.events)
        )
        ratios.append(dev / d)
    # O(delta): the constant does not blow up as delta shrinks
    assert max(ratios) < 1e4
    assert max(ratios) / min(ratios) < 2


def test_inflection_chord_growth_near_flat_end():
    arc = graph_arc([1 / 12, -4 / 12, 6 / 12, -4 / 12, 1 / 12], 0.0, 1.0)
    dom = sandbox(arc)
    runs = 0
    for s0 in np.linspace(0.0, 0.6, 7):
        for ang in (0.005, 0.02, 0.05):
            v = math.cos(ang) * arc.tangent(s0) - math.sin(ang) * arc.normal(s0)
            cyc = trace_cycles(dom, PhasePoint(arc.point(s0), v), TraceOptions(direction="forward", bounce_cap=500))
            pts = np.array([cyc.origin.xs] + [e.position for e in cyc.events])
            if len(cyc.events) < 5:
                continue
            runs += 1
            ch = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            assert np.all(ch[:-1] <= ch[1:] + 1e-12)
    assert runs >= 8


def test_position_at_and_rows():
    dom = disk()
    ph = PhasePoint([0.0, 0.25, 0.0], [1.0, 0.5, 0.0], 4.0)
    cyc = trace_cycles(dom, ph, TraceOptions(horizon_time=3.5))
    x, v, k = position_at(cyc, 2.5)
    assert k == 1
    # backward: at t = 3 we hit (-1, 0), then travel along +x again back in time
    assert x == pytest.approx([-0.5, 0.0])
    rows = list(cycle_rows(cyc, 1.0))
    assert [r["k"] for r in rows] == [1, 2]
    assert rows[0]["x2"] == pytest.approx((0.25 - 1.0 * 0.5) % 1.0)
    assert set(rows[0]) == {"k", "t", "x1", "x2", "x3", "v1", "v2", "v3", "incidence", "class", "curve_id", "tau"}


def test_options_validation():
    with pytest.raises(ValueError):
        TraceOptions(bounce_cap=0)
    with pytest.raises(ValueError):
        TraceOptions(eps_grazing=0.0)
    with pytest.raises(ValueError):
        trace_cycles(disk(), PhasePoint([0, 0], [5.0, 0]), TraceOptions(speed_band=(0.1, 2.0)))
