"""Specular cycles: ray/boundary intersection, reflection and bounce bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import brentq

from .geometry import (
    AnalyticCurve,
    BoundaryDecomposition,
    Domain,
    default_decomposition,
    locate_on_boundary,
)


class TraceError(RuntimeError):
    pass


class NoIntersection(TraceError):
    pass


class TangencyAmbiguous(TraceError):
    pass


class BounceCapExceeded(TraceError):
    pass


class AmbiguousLocation(TraceError):
    pass


class GrazingClass(str, Enum):
    NON_GRAZING = "NonGrazing"
    CONCAVE = "Concave"
    CONVEX = "Convex"
    INFLECTION_OUTWARD = "InflectionOutward"
    INFLECTION_INWARD = "InflectionInward"


class Termination(str, Enum):
    HORIZON_TIME = "HorizonTime"
    HORIZON_LENGTH = "HorizonLength"
    CONVEX_GRAZING_STOP = "ConvexGrazingStop"
    INWARD_INFLECTION_TRAP = "InwardInflectionTrap"
    BOUNCE_CAP = "BounceCap"
    SOLVER_FAILURE = "SolverFailure"
    ESCAPED = "Escaped"  # sandbox only: the ray leaves every open arc
    STOPPED = "Stopped"  # caller-supplied stop rule fired


@dataclass(frozen=True)
class TraceOptions:
    direction: str = "backward"
    horizon_time: float | None = None
    horizon_length: float | None = None
    eps_grazing: float = 1e-10
    bounce_cap: int = 1_000_000
    speed_band: tuple[float, float] | None = None
    launch_tau_window: float = 1e-7
    s_floor_rel: float = 1e-9
    inflection_window: float = 1e-6
    tangency_tol_rel: float = 1e-12
    analytic_circles: bool = True
    escape_length: float = 10.0

    def __post_init__(self):
        if self.direction not in ("backward", "forward"):
            raise ValueError("direction must be 'backward' or 'forward'")
        for name in ("eps_grazing", "launch_tau_window", "s_floor_rel", "inflection_window"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.bounce_cap < 1:
            raise ValueError("bounce cap must be at least 1")

    @property
    def sign(self) -> float:
        return -1.0 if self.direction == "backward" else 1.0


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if x.shape == (2,):
            x = np.array([x[0], 0.0, x[1]])
        if v.shape == (2,):
            v = np.array([v[0], 0.0, v[1]])
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "t", float(self.t))

    @property
    def xs(self) -> np.ndarray:
        """Cross-section position (x1, x3)."""
        return self.x[[0, 2]]

    @property
    def vs(self) -> np.ndarray:
        return self.v[[0, 2]]


@dataclass(frozen=True)
class BounceEvent:
    index: int
    time: float
    position: np.ndarray
    curve_id: int
    tau: float
    pre: np.ndarray
    post: np.ndarray
    incidence: float
    grazing_class: GrazingClass
    tangent: np.ndarray
    normal: np.ndarray
    chord: float
    path_length: float


@dataclass
class SpecularCycle:
    origin: PhasePoint
    events: list[BounceEvent]
    termination: Termination
    total_length: float
    direction: str
    end: PhasePoint | None = None
    message: str = ""

    def points(self, include_end: bool = True) -> list[np.ndarray]:
        """x^0, x^1, ..., plus the end point when the trace stopped mid-flight."""
        pts = [self.origin.xs] + [e.position for e in self.events]
        if include_end and self.end is not None:
            if np.linalg.norm(self.end.xs - pts[-1]) > 0:
                pts.append(self.end.xs)
        return pts

    def chords(self) -> list[float]:
        return [e.chord for e in self.events]

    def velocity_before(self, k: int) -> np.ndarray:
        """Velocity carried on the segment ending at bounce k (k >= 1)."""
        return self.origin.v if k == 1 else self.events[k - 2].post

    def event(self, k: int) -> BounceEvent:
        """Bounce k in the 1-based numbering x^1, x^2, ..."""
        if k < 1 or k > len(self.events):
            raise IndexError(f"bounce {k} not present (cycle has {len(self.events)})")
        return self.events[k - 1]


@dataclass(frozen=True)
class Hit:
    s: float
    point: np.ndarray
    curve_id: int
    tau: float
    tangency: bool
    residual: float


# -- intersection -----------------------------------------------------------


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _circle_roots(curve: AnalyticCurve, x, d, tan_tol):
    c, r = curve.circle
    C, S = curve.cos_coeffs[0], curve.sin_coeffs[0]
    w = x - c
    A = float(d @ d)
    B = 2.0 * float(d @ w)
    Cq = float(w @ w) - r * r
    # distance from center to the line decides crossing vs tangency
    perp = abs(_cross2(d, w)) / math.sqrt(A)
    out = []
    if abs(perp - r) <= tan_tol:
        s = -B / (2 * A)
        out.append((s, True))
    elif perp < r:
        disc = B * B - 4 * A * Cq
        sq = math.sqrt(max(disc, 0.0))
        q = -0.5 * (B + math.copysign(sq, B))
        if q != 0:
            out.append((q / A, False))
            out.append((Cq / q, False))
        else:
            out.append((0.0, False))
    roots = []
    for s, tang in out:
        p = x + s * d - c
        tau = math.atan2(float(p @ S), float(p @ C)) % (2 * math.pi)
        roots.append((s, tau, tang))
    return roots


def _polish(curve: AnalyticCurve, rel, d, tau: float, iters: int = 3) -> float:
    for _ in range(iters):
        h = _cross2(d, rel(tau))
        hp = _cross2(d, curve.derivative(tau, 1))
        if hp == 0:
            break
        step = float(h / hp)
        if not math.isfinite(step) or abs(step) > 1e-6:
            break
        tau -= step
        if step == 0:
            break
    return tau


def _sampled_roots(curve: AnalyticCurve, x, d, tan_tol, tau0=None):
    tau, P, D1 = curve.polyline
    dn = math.sqrt(float(d @ d))
    if tau0 is None:

        def rel(t):
            return curve.point(t) - x

        R = P - x
    else:
        # launch curve: measure from the launch point without cancellation
        off = curve.point(tau0) - x

        def rel(t):
            return curve.chord(t, tau0) + off

        R = rel(tau)
    h = _cross2(d, R) / dn
    hp = _cross2(d, D1) / dn
    s_s = (R @ d) / (dn * dn)
    n = len(tau)
    closed = curve.closed
    if closed:
        idx = np.arange(n)
        nxt = (idx + 1) % n
    else:
        idx = np.arange(n - 1)
        nxt = idx + 1
    sh = np.sign(h)
    shp = np.sign(hp)
    cand = (sh[idx] != sh[nxt]) | (shp[idx] != shp[nxt]) | (h[idx] == 0)
    cells = idx[cand]
    if len(cells) == 0:
        return []

    def hf(t):
        return float(_cross2(d, rel(t))) / dn

    def hpf(t):
        return float(_cross2(d, curve.derivative(t, 1))) / dn

    roots = []
    for i in cells:
        a = tau[i]
        b = tau[nxt[i]] if (nxt[i] != 0 or not closed) else tau[0] + 2 * math.pi
        if max(s_s[i], s_s[nxt[i]]) < -2 * (b - a) * np.max(np.abs(D1)) / dn:
            continue
        ha, hb = h[i], h[nxt[i]]
        pieces = [(a, b, ha, hb)]
        if shp[i] != shp[nxt[i]] and hp[i] != 0 and hp[nxt[i]] != 0:
            tstar = brentq(hpf, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            hstar = hf(tstar)
            if abs(hstar) <= tan_tol:
                roots.append((tstar, True))
                continue
            pieces = [(a, tstar, ha, hstar), (tstar, b, hstar, hb)]
        for lo, hi, hlo, hhi in pieces:
            if hlo == 0:
                roots.append((lo, False))
                continue
            if np.sign(hlo) == np.sign(hhi) or hhi == 0:
                continue
            r = brentq(hf, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
            roots.append((r, False))
    out = []
    for t, tang in roots:
        if not tang:
            t = _polish(curve, rel, d, t)
        if not closed and not (curve.tau_range[0] <= t <= curve.tau_range[1]):
            continue
        s = float(rel(t) @ d) / (dn * dn)
        out.append((s, curve.wrap(t), tang))
    return out


def first_exit(
    domain: Domain,
    x,
    v,
    opts: TraceOptions | None = None,
    launch: tuple[int, float] | None = None,
) -> Hit | None:
    """Smallest positive flight time s with x + s v on the boundary.

    ``launch`` names the boundary point the ray leaves from; that point is
    excluded by a parameter window and a minimum flight time.
    """
    opts = opts or TraceOptions()
    x = np.asarray(x, dtype=float)
    d = np.asarray(v, dtype=float)
    speed = math.sqrt(float(d @ d))
    if speed == 0:
        raise ValueError("velocity must be nonzero")
    diam = domain.diameter
    s_floor = opts.s_floor_rel * diam / speed
    tan_tol = opts.tangency_tol_rel * diam
    best: Hit | None = None
    for cid, curve in enumerate(domain.curves):
        if curve.circle is not None and opts.analytic_circles:
            roots = _circle_roots(curve, x, d, tan_tol)
        else:
            tau0 = launch[1] if launch is not None and launch[0] == cid else None
            roots = _sampled_roots(curve, x, d, tan_tol, tau0)
        for s, tau, tang in roots:
            if s <= s_floor:
                continue
            if launch is not None and launch[0] == cid:
                if curve.tau_distance(tau, launch[1]) <= opts.launch_tau_window:
                    continue
            if best is None or s < best.s:
                p = curve.point(tau)
                res = float(np.linalg.norm(x + s * d - p))
                best = Hit(s, p, cid, tau, tang, res)
    if best is not None and best.residual > max(1e-11 * diam, 1e-9 * best.s * speed):
        raise TangencyAmbiguous(f"intersection residual {best.residual:.3g} too large")
    return best


def reflect(v, n) -> np.ndarray:
    """Specular reflection v - 2 (n.v) n; a 2-vector normal acts on (v1, v3)."""
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    if abs(float(n @ n) - 1.0) > 2e-12:
        raise ValueError("normal must be a unit vector")
    if v.shape == (3,) and n.shape == (2,):
        vs = v[[0, 2]]
        vs = vs - 2.0 * float(n @ vs) * n
        return np.array([vs[0], v[1], vs[1]])
    return v - 2.0 * float(n @ v) * n


# -- grazing classification --------------------------------------------------


def classify_grazing_at(
    domain: Domain,
    decomp: BoundaryDecomposition,
    curve_id: int,
    tau: float,
    travel,
    incidence: float,
    speed: float,
    opts: TraceOptions,
) -> GrazingClass:
    if incidence > opts.eps_grazing * speed:
        return GrazingClass.NON_GRAZING
    cd = decomp.curves[curve_id]
    near = cd.nearest_inflection(tau)
    if near is not None:
        t_i, tag, dist = near
        if dist <= opts.inflection_window:
            T = domain.curves[curve_id].tangent(tau)
            forward = float(np.dot(travel, T)) > 0
            ahead_concave = forward if tag == "I+" else not forward
            return GrazingClass.INFLECTION_OUTWARD if ahead_concave else GrazingClass.INFLECTION_INWARD
        if dist <= 10 * opts.inflection_window:
            raise AmbiguousLocation(f"grazing at tau={tau} within tolerance of an inflection point")
    if cd.region(tau) == "concave":
        return GrazingClass.CONCAVE
    return GrazingClass.CONVEX


def classify_grazing(
    event: BounceEvent,
    decomp: BoundaryDecomposition,
    opts: TraceOptions,
    domain: Domain,
    direction: str = "backward",
) -> GrazingClass:
    travel = (-1.0 if direction == "backward" else 1.0) * event.pre[[0, 2]]
    speed = float(np.linalg.norm(event.pre[[0, 2]]))
    return classify_grazing_at(
        domain, decomp, event.curve_id, event.tau, travel, event.incidence, speed, opts
    )


_STOP = {
    GrazingClass.CONVEX: Termination.CONVEX_GRAZING_STOP,
    GrazingClass.INFLECTION_INWARD: Termination.INWARD_INFLECTION_TRAP,
}


# -- tracing -------------------------------------------------------------------


def trace_cycles(
    domain: Domain,
    phase: PhasePoint,
    opts: TraceOptions | None = None,
    stop: Callable[[list[BounceEvent], float], bool] | None = None,
    decomp: BoundaryDecomposition | None = None,
) -> SpecularCycle:
    """Follow the specular trajectory until a horizon, a stop rule or the cap."""
    opts = opts or TraceOptions()
    sign = opts.sign
    vs = phase.vs.copy()
    speed = float(np.linalg.norm(vs))
    if speed == 0:
        raise ValueError("cross-section velocity must be nonzero")
    if opts.speed_band is not None:
        lo, hi = opts.speed_band
        slack = 1e-12 * hi
        if not lo - slack <= speed <= hi + slack:
            raise ValueError(f"speed {speed} outside admissible band [{lo}, {hi}]")
    decomp = decomp or default_decomposition(domain)
    x = phase.xs.copy()
    v3 = phase.v.copy()
    t = phase.t
    events: list[BounceEvent] = []
    total = 0.0
    launch = None if domain.sandbox and not _on_sandbox(domain, x) else locate_on_boundary(domain, x)
    if launch is None and not domain.sandbox and not domain.contains(x):
        raise ValueError(f"phase position {x} lies outside the closed cross section")

    def finish(term, end_x=None, end_t=None, msg=""):
        end = None
        if end_x is not None:
            end = PhasePoint(_lift3(phase, end_x, end_t, domain.axial_period), v3.copy(), end_t)
        return SpecularCycle(phase, events, term, total, opts.direction, end, msg)

    if launch is not None:
        cid, tau = launch
        n = domain.curves[cid].normal(tau)
        travel = sign * vs
        inc = abs(float(n @ vs))
        cls = classify_grazing_at(domain, decomp, cid, tau, travel, inc, speed, opts)
        if cls in _STOP:
            return finish(_STOP[cls], x, t, "grazing at the launch point")
        if cls is GrazingClass.NON_GRAZING and float(n @ travel) > 0:
            raise TraceError("launch direction points out of the domain (exit time is zero)")

    while True:
        d = sign * vs
        try:
            hit = first_exit(domain, x, d, opts, launch)
        except TraceError as exc:
            return finish(Termination.SOLVER_FAILURE, x, t, str(exc))
        remaining_t = math.inf if opts.horizon_time is None else opts.horizon_time - abs(t - phase.t)
        remaining_l = math.inf if opts.horizon_length is None else opts.horizon_length - total
        if hit is None:
            if not domain.sandbox:
                return finish(Termination.SOLVER_FAILURE, x, t, "no boundary intersection")
            fly = min(remaining_l, opts.escape_length, remaining_t * speed) / speed
            total += fly * speed
            return finish(Termination.ESCAPED, x + fly * d, t + sign * fly)
        if hit.s > remaining_t:
            total += remaining_t * speed
            return finish(Termination.HORIZON_TIME, x + remaining_t * d, t + sign * remaining_t)
        if hit.s * speed > remaining_l:
            fly = remaining_l / speed
            total += remaining_l
            return finish(Termination.HORIZON_LENGTH, x + fly * d, t + sign * fly)
        curve = domain.curves[hit.curve_id]
        T = curve.tangent(hit.tau)
        n = curve.normal(hit.tau)
        pre = v3.copy()
        inc = abs(float(n @ vs))
        if hit.tangency:
            inc = min(inc, opts.eps_grazing * speed * 0.5)
        cls = classify_grazing_at(domain, decomp, hit.curve_id, hit.tau, d, inc, speed, opts)
        if cls is GrazingClass.NON_GRAZING:
            post = reflect(pre, n)
        else:
            post = pre.copy()
        chord = hit.s * speed
        total += chord
        t = t + sign * hit.s
        ev = BounceEvent(
            len(events) + 1, t, hit.point, hit.curve_id, hit.tau, pre, post, inc, cls, T, n, chord, total
        )
        events.append(ev)
        x = hit.point
        v3 = post
        vs = post[[0, 2]]
        launch = (hit.curve_id, hit.tau)
        if cls in _STOP:
            return finish(_STOP[cls], x, t)
        if stop is not None and stop(events, total):
            return finish(Termination.STOPPED, x, t)
        if len(events) >= opts.bounce_cap:
            return finish(Termination.BOUNCE_CAP, x, t)


def _on_sandbox(domain: Domain, x) -> bool:
    return locate_on_boundary(domain, x) is not None


def _lift3(phase: PhasePoint, xs, t_end, H: float) -> np.ndarray:
    x2 = (phase.x[1] - (phase.t - t_end) * phase.v[1]) % H
    return np.array([xs[0], x2, xs[1]])


def lift_cylinder(phase: PhasePoint, s: float, H: float = 1.0) -> float:
    """Axial coordinate X2(s) = (x2 - (t - s) v2) mod H; V2 stays v2."""
    return float((phase.x[1] - (phase.t - s) * phase.v[1]) % H)


def position_at(cycle: SpecularCycle, s: float) -> tuple[np.ndarray, np.ndarray, int]:
    """Cross-section X(s), V(s) and the index k of the segment (t^{k+1}, t^k)."""
    sign = -1.0 if cycle.direction == "backward" else 1.0
    t0 = cycle.origin.t
    if sign * (s - t0) < 0:
        raise ValueError("time lies on the wrong side of the origin")
    x = cycle.origin.xs
    v = cycle.origin.vs
    tk = t0
    for k, e in enumerate(cycle.events):
        if sign * (s - e.time) <= 0:
            return x + (s - tk) * v, v, k
        x, v, tk = e.position, e.post[[0, 2]], e.time
    if cycle.end is not None and sign * (s - cycle.end.t) > 1e-12 * max(1.0, abs(s)):
        raise ValueError("time lies beyond the traced horizon")
    return x + (s - tk) * v, v, len(cycle.events)


def bounce_count(
    domain: Domain, phase: PhasePoint, L: float, opts: TraceOptions | None = None
) -> int:
    """Smallest k whose cumulative chord length exceeds L (or the trapping index)."""
    opts = opts or TraceOptions()
    opts = replace(opts, horizon_time=None, horizon_length=None)
    cyc = trace_cycles(domain, phase, opts, stop=lambda ev, tot: tot > L)
    if cyc.termination is Termination.STOPPED:
        return len(cyc.events)
    if cyc.termination is Termination.INWARD_INFLECTION_TRAP:
        return len(cyc.events)
    if cyc.termination is Termination.BOUNCE_CAP:
        raise BounceCapExceeded(f"no decision within {opts.bounce_cap} bounces")
    raise TraceError(f"bounce count undefined: trace ended with {cyc.termination.value}")


def grazing_margin(
    cycle: SpecularCycle, decomp: BoundaryDecomposition, domain: Domain
) -> tuple[float, float]:
    """(min incidence |v.n|, min over bounces of dist(x^k, inflections) + |n.v|)."""
    if not cycle.events:
        raise ValueError("cycle has no bounces")
    infl = [
        domain.curves[cid].point(t)
        for cid, cd in enumerate(decomp.curves)
        for t, _ in cd.inflections
    ]
    min_inc = min(e.incidence for e in cycle.events)
    if not infl:
        return min_inc, math.inf
    pts = np.array(infl)
    dmin = min(
        float(np.min(np.linalg.norm(pts - e.position, axis=1))) + e.incidence for e in cycle.events
    )
    return min_inc, dmin


def cycle_rows(cycle: SpecularCycle, H: float = 1.0) -> Iterable[dict]:
    """CSV rows: k,t,x1,x2,x3,v1,v2,v3,incidence,class,curve_id,tau."""
    o = cycle.origin
    for e in cycle.events:
        x2 = lift_cylinder(o, e.time, H)
        yield {
            "k": e.index,
            "t": e.time,
            "x1": e.position[0],
            "x2": x2,
            "x3": e.position[1],
            "v1": e.post[0],
            "v2": e.post[1],
            "v3": e.post[2],
            "incidence": e.incidence,
            "class": e.grazing_class.value,
            "curve_id": e.curve_id,
            "tau": e.tau,
        }
