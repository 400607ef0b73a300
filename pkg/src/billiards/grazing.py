"""Grazing families, sticky-point detection and the inflection ray atlas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
import sympy as sp

from .geometry import BoundaryDecomposition, Domain, graph_arc, sandbox, TWO_PI
from .trajectory import (
    GrazingClass,
    PhasePoint,
    SpecularCycle,
    Termination,
    TraceError,
    TraceOptions,
    trace_cycles,
)


class GrazingError(ValueError):
    pass


class EmptyInterval(GrazingError):
    pass


class AllTrapped(GrazingError):
    pass


class InsufficientBounces(GrazingError):
    pass


class DegenerateFamily(GrazingError):
    pass


class StepFailure(GrazingError):
    pass


class InconsistentInitialCondition(GrazingError):
    pass


_IMMEDIATE_STOPS = (Termination.CONVEX_GRAZING_STOP, Termination.INWARD_INFLECTION_TRAP)


@dataclass
class GrazingFamily:
    curve_id: int | None
    interval: tuple[float, float] | None
    taus: np.ndarray
    cycles: list[SpecularCycle]
    sign: int = 1
    speed: float = 1.0

    def __len__(self):
        return len(self.cycles)


def shrink_interval(a: float, b: float, margin: float = 0.01) -> tuple[float, float]:
    """Pull both ends of [a, b] inward by margin * (b - a)."""
    w = b - a
    if w >= TWO_PI - 1e-12:
        return a, b
    return a + margin * w, b - margin * w


def trace_grazing_family(
    domain: Domain,
    decomp: BoundaryDecomposition,
    curve_id: int,
    interval: tuple[float, float],
    grid_size: int,
    speed: float = 1.0,
    sign: int = 1,
    horizon: float = 10.0,
    margin: float = 0.01,
    opts: TraceOptions | None = None,
) -> GrazingFamily:
    """Forward cycles launched tangentially from a uniform grid on a concave interval."""
    if grid_size < 1:
        raise EmptyInterval("grid_size must be positive")
    a, b = interval
    if not b > a:
        raise EmptyInterval(f"interval [{a}, {b}] is empty")
    known = [iv for iv in decomp.curves[curve_id].concave]
    if not any(abs(a - p) < 1e-9 and abs(b - q) < 1e-9 for p, q in known):
        raise GrazingError(f"[{a}, {b}] is not a concave interval of curve {curve_id}")
    lo, hi = shrink_interval(a, b, margin)
    full = (b - a) >= TWO_PI - 1e-12
    taus = np.linspace(lo, hi, grid_size, endpoint=not full)
    curve = domain.curves[curve_id]
    opts = opts or TraceOptions(direction="forward", horizon_length=horizon)
    cycles = []
    for t in taus:
        x = curve.point(t)
        v = sign * speed * curve.tangent(t)
        cycles.append(trace_cycles(domain, PhasePoint(x, v), opts, decomp=decomp))
    if all(not c.events and c.termination in _IMMEDIATE_STOPS for c in cycles):
        raise AllTrapped("every launch terminated at its source")
    return GrazingFamily(curve_id, (a, b), taus, cycles, sign, speed)


def family_from_launches(
    domain: Domain,
    points,
    directions,
    speed: float = 1.0,
    horizon: float = 10.0,
    params=None,
) -> GrazingFamily:
    """Family of forward cycles from explicit launch points and tangent directions."""
    points = np.asarray(points, dtype=float)
    directions = np.asarray(directions, dtype=float)
    unit = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    opts = TraceOptions(direction="forward", horizon_length=horizon)
    cycles = [trace_cycles(domain, PhasePoint(p, speed * u), opts) for p, u in zip(points, unit)]
    taus = np.arange(len(points), dtype=float) if params is None else np.asarray(params, float)
    return GrazingFamily(None, None, taus, cycles, 1, speed)


# -- sticky detection ----------------------------------------------------------


class Verdict(str, Enum):
    STICKY = "Sticky"
    ISOLATED = "Isolated"
    DEGENERATE = "Degenerate"


@dataclass(frozen=True)
class StickyReport:
    k: int
    point: np.ndarray
    max_residual: float
    verdict: Verdict
    condition: float
    family_size: int

    def row(self) -> dict:
        return {
            "k": self.k,
            "x1": self.point[0],
            "x3": self.point[1],
            "residual": self.max_residual,
            "verdict": self.verdict.value,
            "condition": self.condition,
        }


def point_segment_distance(x, p, q) -> float:
    x, p, q = (np.asarray(a, dtype=float) for a in (x, p, q))
    d = q - p
    L2 = float(d @ d)
    if L2 == 0:
        return float(np.linalg.norm(x - p))
    t = min(1.0, max(0.0, float((x - p) @ d) / L2))
    return float(np.linalg.norm(x - (p + t * d)))


def concurrent_point(segments) -> tuple[np.ndarray, float, float]:
    """Least-squares point for lines through segments; returns (point, max residual, cond)."""
    segs = [(np.asarray(p, float), np.asarray(q, float)) for p, q in segments]
    A = np.zeros((2, 2))
    rhs = np.zeros(2)
    for p, q in segs:
        u = q - p
        n = np.array([u[1], -u[0]]) / np.linalg.norm(u)
        A += np.outer(n, n)
        rhs += n * float(n @ p)
    cond = float(np.linalg.cond(A))
    if not math.isfinite(cond) or cond > 1e8:
        return np.full(2, np.nan), math.inf, cond
    x = np.linalg.solve(A, rhs)
    res = max(point_segment_distance(x, p, q) for p, q in segs)
    return x, res, cond


def _scene_scale(family: GrazingFamily) -> float:
    pts = np.array([p for c in family.cycles for p in c.points()])
    span = pts.max(axis=0) - pts.min(axis=0)
    return float(np.linalg.norm(span))


def detect_sticky(family: GrazingFamily, k: int = 1, sticky_tol: float | None = None) -> StickyReport:
    if len(family) < 2:
        raise DegenerateFamily("a family needs at least two launches")
    if k < 1:
        raise ValueError("bounce index starts at 1")
    segments = []
    for i, c in enumerate(family.cycles):
        pts = c.points()
        if len(pts) < k + 2:
            raise InsufficientBounces(f"launch {i} has only {len(pts) - 1} chords")
        if any(e.grazing_class is not GrazingClass.NON_GRAZING for e in c.events[:k]):
            raise InsufficientBounces(f"launch {i} grazes before bounce {k}")
        segments.append((pts[k], pts[k + 1]))
    if sticky_tol is None:
        sticky_tol = 1e-6 * _scene_scale(family)
    x, res, cond = concurrent_point(segments)
    if not math.isfinite(res):
        return StickyReport(k, x, res, Verdict.DEGENERATE, cond, len(family))
    verdict = Verdict.STICKY if res < sticky_tol else Verdict.ISOLATED
    return StickyReport(k, x, res, verdict, cond, len(family))


# -- reflected-ray envelope over the parabola y = x^2/2 ---------------------------


@lru_cache(maxsize=1)
def _envelope_functions():
    d = sp.symbols("delta", real=True)
    root = sp.sqrt(1 + d**2)
    ds = (1 + d) - sp.sqrt((1 + d) ** 2 - 2 * d)
    L = ((1 + d) * (1 + ds**2) - 2 * root) / (1 + ds**2 + 2 * ds * root)
    c = -L * ds + ds**2 / 2
    Lp = sp.diff(L, d)
    X = -sp.diff(c, d) / Lp
    Xp = sp.diff(X, d)
    f = lambda e: sp.lambdify(d, e, "numpy")  # noqa: E731
    return {
        "delta_star": f(ds),
        "L": f(L),
        "Lp": f(Lp),
        "intercept": f(c),
        "X": f(X),
        "Xp": f(Xp),
    }


def delta_star(delta):
    """Bounce abscissa on y = x^2/2 of the ray through (1, 1) with slope 1 + delta."""
    delta = np.asarray(delta, dtype=float)
    return (1 + delta) - np.sqrt((1 + delta) ** 2 - 2 * delta)


def reflected_slope(delta):
    return np.asarray(_envelope_functions()["L"](np.asarray(delta, float)), dtype=float)


@dataclass(frozen=True)
class StickyExample:
    delta: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    slope: np.ndarray
    slope_derivative: np.ndarray
    domain: Domain
    target: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0]))

    @property
    def arc(self) -> np.ndarray:
        return np.column_stack([self.X, self.Y])

    @property
    def directions(self) -> np.ndarray:
        d = np.column_stack([np.ones_like(self.slope), self.slope])
        return d / np.linalg.norm(d, axis=1, keepdims=True)


def _rk4(f, y0: np.ndarray, grid: np.ndarray) -> np.ndarray:
    out = np.empty((len(grid), len(y0)))
    out[0] = y0
    y = y0.copy()
    for i in range(len(grid) - 1):
        t, h = grid[i], grid[i + 1] - grid[i]
        k1 = f(t, y)
        k2 = f(t + h / 2, y + h / 2 * k1)
        k3 = f(t + h / 2, y + h / 2 * k2)
        k4 = f(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = y
    return out


def envelope_start() -> tuple[float, float]:
    """(X(0), Y(0)) forced by tangency to the whole family of reflected rays."""
    x0 = float(_envelope_functions()["X"](0.0))
    return x0, -x0


def build_sticky_example(
    delta_max: float = 0.05,
    samples: int = 200,
    x0: float | None = None,
    arc_halfwidth: float = 3.0,
    H: float = 1.0,
) -> StickyExample:
    """Arc tangent to every reflected ray, so tangent launches refocus at (1, 1).

    The arc is integrated with RK4 from X' and Y' = L X'. Tangency pins the
    starting abscissa, so an explicit ``x0`` must agree with it.
    """
    if not 0 < delta_max < 1:
        raise ValueError("delta_max must lie in (0, 1)")
    if samples < 2:
        raise ValueError("need at least two samples")
    fn = _envelope_functions()
    X0, Y0 = envelope_start()
    if x0 is not None:
        if not x0 < 0:
            raise ValueError("X(0) must be negative")
        if abs(x0 - X0) > 1e-12 * max(1.0, abs(X0)):
            raise InconsistentInitialCondition(
                f"X(0)={x0} is incompatible with tangency to the reflected rays, which forces X(0)={X0:.17g}"
            )
    grid = np.linspace(0.0, delta_max, samples)
    Lp = np.asarray(fn["Lp"](grid), dtype=float)
    if not np.all(Lp > 0):
        bad = grid[np.argmax(~(Lp > 0))]
        raise StepFailure(f"slope derivative lost positivity at delta={bad}")

    def rhs(t, y):
        xp = float(fn["Xp"](t))
        return np.array([xp, float(fn["L"](t)) * xp])

    XY = _rk4(rhs, np.array([X0, Y0]), grid)
    parabola = graph_arc([0.0, 0.0, 0.5], -arc_halfwidth, arc_halfwidth)
    return StickyExample(
        grid,
        XY[:, 0],
        XY[:, 1],
        np.asarray(fn["L"](grid), dtype=float),
        Lp,
        sandbox(parabola, H=H),
    )


def sticky_family(example: StickyExample, horizon: float = 10.0) -> GrazingFamily:
    return family_from_launches(
        example.domain, example.arc, example.directions, horizon=horizon, params=example.delta
    )


# -- inflection atlas --------------------------------------------------------


@dataclass(frozen=True)
class AtlasLaunch:
    curve_id: int
    tau: float
    tag: str
    sign: int
    point: np.ndarray
    velocity: np.ndarray
    termination: Termination


@dataclass(frozen=True)
class AtlasSegment:
    start: np.ndarray
    end: np.ndarray
    direction: np.ndarray
    launch: int


@dataclass
class InflectionAtlas:
    launches: list[AtlasLaunch]
    segments: list[AtlasSegment]

    def __bool__(self):
        return bool(self.launches)

    def distance(self, x) -> float:
        if not self.segments:
            return math.inf
        return min(point_segment_distance(x, s.start, s.end) for s in self.segments)

    def contains(self, x, clearance: float) -> bool:
        return self.distance(x) <= clearance

    def rows(self):
        for i, s in enumerate(self.segments):
            yield {
                "segment": i,
                "launch": s.launch,
                "x1_start": s.start[0],
                "x3_start": s.start[1],
                "x1_end": s.end[0],
                "x3_end": s.end[1],
                "v1": s.direction[0],
                "v3": s.direction[1],
            }


def inflection_ray_atlas(
    domain: Domain,
    decomp: BoundaryDecomposition,
    speed_band: tuple[float, float] = (1.0, 1.0),
    length_horizon: float = 10.0,
) -> InflectionAtlas:
    speed = speed_band[1]
    opts = TraceOptions(horizon_length=length_horizon, speed_band=speed_band)
    launches, segments = [], []
    for cid, cd in enumerate(decomp.curves):
        curve = domain.curves[cid]
        for tau, tag in cd.inflections:
            x = curve.point(tau)
            for sign in (-1, 1):
                v = sign * speed * curve.tangent(tau)
                cyc = trace_cycles(domain, PhasePoint(x, v), opts, decomp=decomp)
                li = len(launches)
                launches.append(AtlasLaunch(cid, tau, tag, sign, x, v, cyc.termination))
                pts = cyc.points()
                vels = [cyc.origin.vs] + [e.post[[0, 2]] for e in cyc.events]
                for j in range(len(pts) - 1):
                    segments.append(AtlasSegment(pts[j], pts[j + 1], vels[j], li))
    return InflectionAtlas(launches, segments)


# -- excluded directions -------------------------------------------------------


@dataclass(frozen=True)
class DirectionSample:
    angles: np.ndarray
    flagged: np.ndarray
    valid: np.ndarray
    fraction: float
    measure: float

    @property
    def bad_directions(self) -> np.ndarray:
        return self.angles[self.flagged]


def _signature(cyc: SpecularCycle, K: int):
    ids = tuple(e.curve_id for e in cyc.events[:K])
    pts = np.array([e.position for e in cyc.events[:K]]) if cyc.events else np.zeros((0, 2))
    grazed = any(e.grazing_class is GrazingClass.CONCAVE for e in cyc.events[:K])
    return ids, pts, grazed


def sample_excluded_directions(
    domain: Domain,
    decomp: BoundaryDecomposition,
    x,
    n_directions: int,
    K: int,
    horizon: float | None = None,
    speed_band: tuple[float, float] = (1.0, 1.0),
    jump_tol: float = 0.25,
) -> DirectionSample:
    """Flag grid directions whose K-bounce backward cycle grazes within one grid cell.

    Direction i is flagged when its own cycle grazes a concave arc, or when the
    bounce combinatorics (or a bounce point, by more than jump_tol * diam)
    change between i and i + 1: a smooth boundary only breaks the bounce map
    at a concave tangency, so the cell then contains a grazing direction.
    """
    x = np.asarray(x, dtype=float)
    angles = TWO_PI * np.arange(n_directions) / n_directions
    opts = TraceOptions(horizon_length=horizon, bounce_cap=K)
    sigs = []
    for th in angles:
        v = np.array([math.cos(th), math.sin(th)])
        try:
            cyc = trace_cycles(domain, PhasePoint(x, v), opts, decomp=decomp)
        except TraceError:
            # from a boundary point, outward directions have no backward cycle
            sigs.append(None)
            continue
        if len(cyc.events) < K and cyc.termination is not Termination.BOUNCE_CAP:
            sigs.append(None if not cyc.events else _signature(cyc, K))
        else:
            sigs.append(_signature(cyc, K))
    valid = np.array([s is not None for s in sigs])
    flagged = np.zeros(n_directions, dtype=bool)
    tol = jump_tol * domain.diameter
    for i in range(n_directions):
        a, b = sigs[i], sigs[(i + 1) % n_directions]
        if a is None:
            continue
        if a[2]:
            flagged[i] = True
            continue
        if b is None:
            continue
        if a[0] != b[0] or (len(a[1]) and float(np.max(np.linalg.norm(a[1] - b[1], axis=1))) > tol):
            flagged[i] = True
    frac = float(np.count_nonzero(flagged)) / n_directions
    lo, hi = speed_band
    area = math.pi * (hi**2 - lo**2) if hi > lo else TWO_PI * hi
    return DirectionSample(angles, flagged, valid, frac, frac * area)
