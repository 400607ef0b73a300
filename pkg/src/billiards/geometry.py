"""Planar boundary curves, cross sections and tubular charts.

Closed curves are truncated Fourier series

    alpha(tau) = a0 + sum_m cos_m * cos(m tau) + sin_m * sin(m tau),

which keeps every derivative exact. Open arcs are polynomial graphs
alpha(tau) = (tau, p(tau)) used for sandbox scenes. Points are stored as
(x1, x3) pairs, i.e. the cross-section coordinates of the cylinder.

Sign conventions: the outward normal is n = (a3', -a1') / |a'|, the outer
curve runs counterclockwise and holes run clockwise, so n always points out
of the domain. Signed curvature is negative on convex arcs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Sequence

import numpy as np
from numpy.polynomial import Polynomial
from scipy.optimize import brentq

TWO_PI = 2.0 * math.pi
REGULARITY_FLOOR = 1e-12


class GeometryError(ValueError):
    """Base class for invalid geometric input."""


class DegenerateParametrization(GeometryError):
    pass


class UnresolvedZero(GeometryError):
    pass


class FlatArc(GeometryError):
    pass


class ReachExceeded(GeometryError):
    pass


class InvalidDomain(GeometryError):
    pass


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


@dataclass(frozen=True, eq=False)
class AnalyticCurve:
    """Closed Fourier curve or open polynomial-graph arc."""

    a0: np.ndarray
    cos_coeffs: np.ndarray
    sin_coeffs: np.ndarray
    orientation: Literal["ccw", "cw"] = "ccw"
    kind: Literal["closed", "open"] = "closed"
    tau_range: tuple[float, float] = (0.0, TWO_PI)
    graph: Polynomial | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "a0", np.asarray(self.a0, dtype=float).reshape(2))
        c = np.asarray(self.cos_coeffs, dtype=float).reshape(-1, 2)
        s = np.asarray(self.sin_coeffs, dtype=float).reshape(-1, 2)
        if c.shape != s.shape:
            raise GeometryError("cos and sin coefficient lists must have equal length")
        object.__setattr__(self, "cos_coeffs", c)
        object.__setattr__(self, "sin_coeffs", s)
        if self.kind == "open":
            if self.graph is None:
                raise GeometryError("open arcs need a polynomial graph")
            lo, hi = self.tau_range
            if not hi > lo:
                raise GeometryError("open arc needs tau_lo < tau_hi")
        else:
            if len(c) == 0:
                raise GeometryError("closed curve needs at least one harmonic")
            speed = np.linalg.norm(self.derivative(self.samples(), 1), axis=-1)
            if speed.min() <= REGULARITY_FLOOR:
                raise DegenerateParametrization("curve speed vanishes somewhere")
            area = self.signed_area()
            declared = 1.0 if self.orientation == "ccw" else -1.0
            if area * declared <= 0:
                raise GeometryError(
                    f"declared orientation {self.orientation} disagrees with signed area {area:.6g}"
                )

    # -- evaluation -------------------------------------------------------

    @property
    def harmonics(self) -> int:
        return len(self.cos_coeffs)

    @property
    def closed(self) -> bool:
        return self.kind == "closed"

    def derivative(self, tau, order: int = 0) -> np.ndarray:
        """k-th derivative of alpha; accepts scalars or arrays of tau."""
        tau = np.asarray(tau, dtype=float)
        if self.kind == "open":
            x = np.zeros_like(tau)
            if order == 0:
                x = tau.copy()
            elif order == 1:
                x = np.ones_like(tau)
            p = self.graph.deriv(order) if order else self.graph
            return np.stack([x, p(tau)], axis=-1)
        m = np.arange(1, self.harmonics + 1, dtype=float)
        phase = np.multiply.outer(tau, m) + order * (math.pi / 2)
        scale = m**order
        out = np.cos(phase) * scale @ self.cos_coeffs + np.sin(phase) * scale @ self.sin_coeffs
        if order == 0:
            out = out + self.a0
        return out

    def point(self, tau):
        return self.derivative(tau, 0)

    def chord(self, tau, tau0: float) -> np.ndarray:
        """alpha(tau) - alpha(tau0) without cancellation for tau near tau0."""
        tau = np.asarray(tau, dtype=float)
        h = tau - tau0
        if self.kind == "open":
            # divided difference of the polynomial, sum_j c_j sum_i tau^i tau0^(j-1-i)
            c = self.graph.coef
            q = np.zeros_like(tau)
            for j in range(1, len(c)):
                for i in range(j):
                    q = q + c[j] * tau**i * tau0 ** (j - 1 - i)
            return np.stack([h, h * q], axis=-1)
        m = np.arange(1, self.harmonics + 1, dtype=float)
        half = np.sin(np.multiply.outer(h, m) / 2)
        mid = np.multiply.outer(tau + tau0, m) / 2
        # cos a - cos b = -2 sin((a+b)/2) sin((a-b)/2), sin a - sin b = 2 cos((a+b)/2) sin((a-b)/2)
        return (-2 * np.sin(mid) * half) @ self.cos_coeffs + (2 * np.cos(mid) * half) @ self.sin_coeffs

    def speed(self, tau):
        return np.linalg.norm(self.derivative(tau, 1), axis=-1)

    def tangent(self, tau):
        d = self.derivative(tau, 1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def normal(self, tau):
        """Outward unit normal (a3', -a1') / |a'|."""
        t = self.tangent(tau)
        return np.stack([t[..., 1], -t[..., 0]], axis=-1)

    def curvature(self, tau):
        d1 = self.derivative(tau, 1)
        d2 = self.derivative(tau, 2)
        sp = np.linalg.norm(d1, axis=-1)
        return (d2[..., 0] * d1[..., 1] - d1[..., 0] * d2[..., 1]) / sp**3

    def curvature_derivative(self, tau):
        """d kappa / d tau."""
        d1 = self.derivative(tau, 1)
        d2 = self.derivative(tau, 2)
        d3 = self.derivative(tau, 3)
        sp = np.linalg.norm(d1, axis=-1)
        num = d2[..., 0] * d1[..., 1] - d1[..., 0] * d2[..., 1]
        dnum = d3[..., 0] * d1[..., 1] - d1[..., 0] * d3[..., 1]
        dsp = np.sum(d1 * d2, axis=-1) / sp
        return dnum / sp**3 - 3.0 * num * dsp / sp**4

    # -- sampling ---------------------------------------------------------

    @property
    def sample_count(self) -> int:
        return max(1024, 64 * max(self.harmonics, 1))

    def samples(self, n: int | None = None) -> np.ndarray:
        n = n or self.sample_count
        lo, hi = self.tau_range
        if self.closed:
            return np.linspace(0.0, TWO_PI, n, endpoint=False)
        return np.linspace(lo, hi, n)

    @cached_property
    def polyline(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(tau, points, first derivatives) on the default sample grid."""
        tau = self.samples()
        return tau, self.point(tau), self.derivative(tau, 1)

    def signed_area(self) -> float:
        _, p, _ = self.polyline
        q = np.roll(p, -1, axis=0)
        return 0.5 * float(np.sum(_cross(p, q)))

    def wrap(self, tau: float) -> float:
        return tau % TWO_PI if self.closed else tau

    def tau_distance(self, a: float, b: float) -> float:
        d = abs(a - b)
        if self.closed:
            d = d % TWO_PI
            d = min(d, TWO_PI - d)
        return d

    @cached_property
    def circle(self) -> tuple[np.ndarray, float] | None:
        """(center, radius) if the curve is an exact circle, else None."""
        if not self.closed or self.harmonics != 1:
            return None
        (ca, cb), (sa, sb) = self.cos_coeffs[0], self.sin_coeffs[0]
        r = math.hypot(ca, cb)
        if r == 0:
            return None
        if abs(ca * sa + cb * sb) > 1e-15 * r * r or abs(math.hypot(sa, sb) - r) > 1e-15 * r:
            return None
        return self.a0.copy(), r

    @cached_property
    def max_abs_curvature(self) -> float:
        return float(np.max(np.abs(self.curvature(self.samples()))))

    def scaled(self, factor: float) -> "AnalyticCurve":
        graph = None
        if self.graph is not None:
            # y = p(x) scaled by f becomes y = f p(x / f)
            graph = factor * self.graph(Polynomial([0.0, 1.0 / factor]))
        lo, hi = self.tau_range
        rng = (lo * factor, hi * factor) if self.kind == "open" else self.tau_range
        return AnalyticCurve(
            self.a0 * factor,
            self.cos_coeffs * factor,
            self.sin_coeffs * factor,
            self.orientation,
            self.kind,
            rng,
            graph,
            self.name,
        )


@dataclass(frozen=True, eq=False)
class Domain:
    """Cross section: outer curve minus holes, extruded with axial period H."""

    outer: AnalyticCurve | None
    holes: tuple[AnalyticCurve, ...] = ()
    axial_period: float = 1.0
    sandbox: bool = False
    arcs: tuple[AnalyticCurve, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "holes", tuple(self.holes))
        object.__setattr__(self, "arcs", tuple(self.arcs))
        if not self.axial_period > 0:
            raise InvalidDomain("axial period H must be positive")
        if self.sandbox:
            if not self.curves:
                raise InvalidDomain("sandbox needs at least one curve")
            return
        if self.outer is None:
            raise InvalidDomain("closed domain needs an outer curve")
        if self.outer.orientation != "ccw":
            raise InvalidDomain("outer curve must be counterclockwise")
        outer_poly = self.outer.polyline[1]
        for i, h in enumerate(self.holes):
            if h.orientation != "cw":
                raise InvalidDomain(f"hole {i} must be clockwise")
            pts = h.polyline[1]
            if not np.all(_winding(outer_poly, pts) != 0):
                raise InvalidDomain(f"hole {i} is not strictly inside the outer curve")
            if _min_distance(outer_poly, pts) <= 0:
                raise InvalidDomain(f"hole {i} touches the outer curve")
            for j, other in enumerate(self.holes[:i]):
                q = other.polyline[1]
                if np.any(_winding(q, pts) != 0) or np.any(_winding(pts, q) != 0):
                    raise InvalidDomain(f"holes {j} and {i} overlap")

    @property
    def curves(self) -> tuple[AnalyticCurve, ...]:
        head = (self.outer,) if self.outer is not None else ()
        return head + self.holes + self.arcs

    @cached_property
    def diameter(self) -> float:
        pts = np.concatenate([c.polyline[1] for c in self.curves])
        return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))

    @cached_property
    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        pts = np.concatenate([c.polyline[1] for c in self.curves])
        return pts.min(axis=0), pts.max(axis=0)

    def contains(self, x, closed: bool = True) -> np.ndarray | bool:
        """Winding-number membership test on the sampled boundary."""
        if self.sandbox:
            raise InvalidDomain("membership is undefined for sandbox scenes")
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        inside = _winding(self.outer.polyline[1], pts) != 0
        for h in self.holes:
            inside &= _winding(h.polyline[1], pts) == 0
        if closed:
            tol = 1e-9 * self.diameter
            near = np.zeros(len(pts), dtype=bool)
            for c in self.curves:
                near |= _distance_to_polyline(c.polyline[1], pts) <= max(tol, _chord_sag(c))
            inside |= near
        return bool(inside[0]) if single else inside

    def scaled(self, factor: float) -> "Domain":
        return Domain(
            self.outer.scaled(factor) if self.outer is not None else None,
            tuple(h.scaled(factor) for h in self.holes),
            self.axial_period * factor,
            self.sandbox,
            tuple(a.scaled(factor) for a in self.arcs),
        )


def _chord_sag(curve: AnalyticCurve) -> float:
    tau, pts, _ = curve.polyline
    step = float(np.max(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    return 0.125 * step * step * curve.max_abs_curvature + 1e-12


def _winding(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Winding number of a closed polyline around each point."""
    a = poly[None, :, :] - pts[:, None, :]
    b = np.roll(a, -1, axis=1)
    ang = np.arctan2(_cross(a, b), np.sum(a * b, axis=-1))
    return np.rint(ang.sum(axis=1) / TWO_PI).astype(int)


def _distance_to_polyline(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    ap = pts[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(ap * ab, axis=-1) / np.sum(ab * ab, axis=-1), 0.0, 1.0)
    d = ap - t[..., None] * ab
    return np.sqrt(np.min(np.sum(d * d, axis=-1), axis=1))


def _min_distance(p: np.ndarray, q: np.ndarray) -> float:
    d = p[:, None, :] - q[None, :, :]
    return float(np.sqrt(np.min(np.sum(d * d, axis=-1))))


# -- builders -------------------------------------------------------------


def circle(radius: float = 1.0, center=(0.0, 0.0), orientation: str = "ccw") -> AnalyticCurve:
    sgn = 1.0 if orientation == "ccw" else -1.0
    return AnalyticCurve(
        np.asarray(center, dtype=float),
        [[radius, 0.0]],
        [[0.0, sgn * radius]],
        orientation,
        name=f"circle(r={radius:g})",
    )


def ellipse(a: float, b: float, center=(0.0, 0.0)) -> AnalyticCurve:
    return AnalyticCurve(np.asarray(center, float), [[a, 0.0]], [[0.0, b]], "ccw", name=f"ellipse({a:g},{b:g})")


def polar_cos3(amplitude: float = 0.3) -> AnalyticCurve:
    """r(theta) = 1 + amplitude cos(3 theta), written as an exact Fourier series."""
    h = 0.5 * amplitude
    cos_c = [[1.0, 0.0], [h, 0.0], [0.0, 0.0], [h, 0.0]]
    sin_c = [[0.0, 1.0], [0.0, -h], [0.0, 0.0], [0.0, h]]
    return AnalyticCurve(np.zeros(2), cos_c, sin_c, "ccw", name=f"polar_cos3({amplitude:g})")


def graph_arc(coeffs: Sequence[float], lo: float, hi: float) -> AnalyticCurve:
    """Open arc y = p(x) for x in [lo, hi]; the domain side is above the graph."""
    return AnalyticCurve(
        np.zeros(2),
        np.zeros((0, 2)),
        np.zeros((0, 2)),
        "ccw",
        "open",
        (float(lo), float(hi)),
        Polynomial(np.asarray(coeffs, dtype=float)),
        name="graph",
    )


def disk(radius: float = 1.0, H: float = 1.0) -> Domain:
    return Domain(circle(radius), (), H)


def annulus(r_out: float = 1.0, r_in: float = 0.3, H: float = 1.0) -> Domain:
    if not 0 < r_in < r_out:
        raise InvalidDomain("annulus needs 0 < r_in < r_out")
    return Domain(circle(r_out), (circle(r_in, orientation="cw"),), H)


def sandbox(*arcs: AnalyticCurve, H: float = 1.0) -> Domain:
    return Domain(None, (), H, True, tuple(arcs))


def curve_of(domain: Domain, curve_id: int) -> AnalyticCurve:
    return domain.curves[curve_id]


def curvature(curve: AnalyticCurve, tau: float) -> float:
    """Signed curvature (a1'' a3' - a1' a3'') / |a'|^3 at a single parameter."""
    if curve.speed(tau) <= REGULARITY_FLOOR:
        raise DegenerateParametrization(f"|alpha'| vanishes at tau={tau}")
    return float(curve.curvature(tau))


# -- boundary decomposition -----------------------------------------------


@dataclass(frozen=True)
class CurveDecomposition:
    concave: tuple[tuple[float, float], ...]
    convex: tuple[tuple[float, float], ...]
    inflections: tuple[tuple[float, str], ...]
    closed: bool
    span: tuple[float, float]

    def _within(self, tau: float, a: float, b: float) -> bool:
        if self.closed:
            return (tau - a) % TWO_PI <= (b - a)
        return a <= tau <= b

    def region(self, tau: float) -> str:
        """'concave' or 'convex' for the interval containing tau."""
        for a, b in self.concave:
            if self._within(tau, a, b):
                return "concave"
        return "convex"

    def nearest_inflection(self, tau: float) -> tuple[float, str, float] | None:
        best = None
        for t, tag in self.inflections:
            d = abs(tau - t)
            if self.closed:
                d = d % TWO_PI
                d = min(d, TWO_PI - d)
            if best is None or d < best[2]:
                best = (t, tag, d)
        return best


@dataclass(frozen=True)
class BoundaryDecomposition:
    curves: tuple[CurveDecomposition, ...]
    kappa_tol: float

    @property
    def inflection_count(self) -> int:
        return sum(len(c.inflections) for c in self.curves)

    @property
    def concave_intervals(self) -> list[tuple[int, float, float]]:
        return [(i, a, b) for i, c in enumerate(self.curves) for a, b in c.concave]


def _sign_change_roots(f, tau: np.ndarray, vals: np.ndarray, closed: bool, span) -> list[tuple[float, int]]:
    """Roots of f where the sampled sign flips; returns (tau, direction of flip)."""
    n = len(tau)
    sgn = np.sign(vals)
    roots = []
    last = n if closed else n - 1
    for i in range(last):
        j = (i + 1) % n
        a, b = tau[i], tau[j] if j else (tau[0] + TWO_PI if closed else tau[j])
        sa, sb = sgn[i], sgn[j]
        if sa == 0:
            prev = sgn[i - 1] if (closed or i > 0) else 0
            if prev != 0 and sb != 0 and prev != sb:
                roots.append((float(a % TWO_PI if closed else a), int(sb)))
            continue
        if sb == 0 or sa == sb:
            continue
        r = brentq(f, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
        if abs(b - a) > 0 and not (a <= r <= b):
            raise UnresolvedZero(f"bisection left the bracket [{a}, {b}]")
        roots.append((float(r % TWO_PI if closed else r), int(sb)))
    return sorted(roots)


def decompose_boundary(domain: Domain, kappa_tol: float = 1e-10) -> BoundaryDecomposition:
    """Split every boundary curve into concave/convex intervals and inflections."""
    if not kappa_tol > 0:
        raise GeometryError("kappa_tol must be positive")
    out = []
    for curve in domain.curves:
        tau = curve.samples()
        kap = curve.curvature(tau)
        flat = np.abs(kap) < kappa_tol
        if curve.closed and np.count_nonzero(flat) > 0.25 * len(tau):
            raise FlatArc(f"curvature vanishes on an interval of {curve.name or 'curve'}")
        roots = _sign_change_roots(curve.curvature, tau, kap, curve.closed, curve.tau_range)
        for r, _ in roots:
            if abs(curve.curvature(r)) > max(kappa_tol, 1e-9 * curve.max_abs_curvature):
                raise UnresolvedZero(f"curvature zero at tau={r} not resolved")
        infl = tuple((r, "I+" if d > 0 else "I-") for r, d in roots)
        lo, hi = curve.tau_range
        concave, convex = [], []
        if curve.closed:
            if not roots:
                full = (0.0, TWO_PI)
                (concave if np.median(kap) > 0 else convex).append(full)
            else:
                rs = [r for r, _ in roots]
                for i, (r, d) in enumerate(roots):
                    nxt = rs[(i + 1) % len(rs)]
                    if nxt <= r:
                        nxt += TWO_PI
                    (concave if d > 0 else convex).append((r, nxt))
        else:
            cuts = [lo] + [r for r, _ in roots] + [hi]
            for a, b in zip(cuts[:-1], cuts[1:]):
                mid = curve.curvature(0.5 * (a + b))
                (concave if mid > 0 else convex).append((a, b))
        out.append(
            CurveDecomposition(tuple(concave), tuple(convex), infl, curve.closed, curve.tau_range)
        )
    return BoundaryDecomposition(tuple(out), kappa_tol)


# -- local charts ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LocalChart:
    """Tubular coordinates eta(x1, x3) = alpha(tau_p + x1) + x3 n(tau_p + x1)."""

    curve: AnalyticCurve
    tau_p: float
    radius: float
    arc_halfwidth: float = 0.25

    @property
    def anchor(self) -> np.ndarray:
        return self.curve.point(self.tau_p)

    def eta(self, x1, x3):
        t = self.tau_p + np.asarray(x1, dtype=float)
        return self.curve.point(t) + np.asarray(x3, dtype=float)[..., None] * self.curve.normal(t)

    def d1_eta(self, x1, x3):
        t = self.tau_p + np.asarray(x1, dtype=float)
        fac = 1.0 - self.curve.curvature(t) * x3
        return self.curve.derivative(t, 1) * np.asarray(fac)[..., None]

    def d3_eta(self, x1, x3=0.0):
        return self.curve.normal(self.tau_p + np.asarray(x1, dtype=float))

    def metric(self, x1, x3):
        """(g11, g13, g33) at chart coordinates."""
        e1 = self.d1_eta(x1, x3)
        e3 = self.d3_eta(x1, x3)
        return np.sum(e1 * e1, -1), np.sum(e1 * e3, -1), np.sum(e3 * e3, -1)

    def metric_derivatives(self, x1, x3):
        """(d1 g11, d3 g11); g33 is constant and g13 vanishes."""
        t = self.tau_p + x1
        a = self.curve.speed(t)
        da = float(np.dot(self.curve.derivative(t, 1), self.curve.derivative(t, 2))) / a
        k = self.curve.curvature(t)
        dk = self.curve.curvature_derivative(t)
        fac = 1.0 - k * x3
        d1 = 2 * a * da * fac**2 - 2 * a * a * fac * dk * x3
        d3 = -2 * a * a * k * fac
        return float(d1), float(d3)

    def christoffel(self, x1: float, x3: float) -> np.ndarray:
        """Gamma[r, i, j] for indices (0 -> 1, 1 -> 3) from the diagonal-metric formula."""
        g11, _, g33 = self.metric(x1, x3)
        d1g11, d3g11 = self.metric_derivatives(x1, x3)
        # all derivatives of g33 vanish, so only g11 terms contribute
        dg = np.zeros((2, 2, 2))  # dg[k, i, j] = d_k g_ij
        dg[0, 0, 0] = d1g11
        dg[1, 0, 0] = d3g11
        ginv = np.array([1.0 / g11, 1.0 / g33])
        gam = np.zeros((2, 2, 2))
        for r in range(2):
            for i in range(2):
                for j in range(2):
                    gam[r, i, j] = 0.5 * ginv[r] * (dg[i, j, r] + dg[j, i, r] - dg[r, i, j])
        return gam

    def frame(self, x1=0.0):
        """Unit tangent and outward normal at the foot point."""
        t = self.tau_p + x1
        return self.curve.tangent(t), self.curve.normal(t)

    def velocity_components(self, x1, v):
        """Rotate a Euclidean cross-section velocity into (tangential, normal) parts."""
        T, n = self.frame(x1)
        return float(np.dot(T, v)), float(np.dot(n, v))

    def coordinates(self, x, tol: float = 1e-14, maxiter: int = 50) -> tuple[float, float]:
        """Inverse chart by Newton on the foot-point equation (x - alpha).alpha' = 0."""
        x = np.asarray(x, dtype=float)
        c = self.curve
        t = self.tau_p
        for _ in range(maxiter):
            d = x - c.point(t)
            d1 = c.derivative(t, 1)
            d2 = c.derivative(t, 2)
            f = float(np.dot(d, d1))
            fp = float(np.dot(d, d2) - np.dot(d1, d1))
            step = f / fp
            t -= step
            if abs(step) < tol * (1 + abs(t)):
                break
        x3 = float(np.dot(x - c.point(t), c.normal(t)))
        return float(t - self.tau_p), x3


def chart(domain: Domain, p, radius: float, curve_id: int | None = None, arc_halfwidth: float = 0.25) -> LocalChart:
    """Chart anchored at boundary point p (given as a point or as (curve_id, tau))."""
    if curve_id is not None:
        tau_p = float(p)
        curve = domain.curves[curve_id]
    else:
        hit = locate_on_boundary(domain, p)
        if hit is None:
            raise GeometryError("chart anchor is not on the boundary")
        curve_id, tau_p = hit
        curve = domain.curves[curve_id]
    lo = tau_p - arc_halfwidth
    hi = tau_p + arc_halfwidth
    kmax = float(np.max(np.abs(curve.curvature(np.linspace(lo, hi, 257)))))
    reach = 0.5 / kmax if kmax > 0 else math.inf
    if radius > reach * (1 + 1e-9):
        raise ReachExceeded(f"radius {radius} exceeds reach bound {reach:.6g}")
    return LocalChart(curve, tau_p, radius, arc_halfwidth)


def project_to_curve(curve: AnalyticCurve, x) -> tuple[float, float]:
    """Nearest parameter and distance from x to the curve."""
    x = np.asarray(x, dtype=float)
    tau, pts, _ = curve.polyline
    i = int(np.argmin(np.sum((pts - x) ** 2, axis=1)))
    t = float(tau[i])
    for _ in range(60):
        d = x - curve.point(t)
        d1 = curve.derivative(t, 1)
        d2 = curve.derivative(t, 2)
        f = float(np.dot(d, d1))
        fp = float(np.dot(d, d2) - np.dot(d1, d1))
        if fp == 0:
            break
        step = f / fp
        t -= step
        if not curve.closed:
            t = min(max(t, curve.tau_range[0]), curve.tau_range[1])
        if abs(step) < 1e-15 * (1 + abs(t)):
            break
    t = curve.wrap(t)
    return t, float(np.linalg.norm(x - curve.point(t)))


def locate_on_boundary(domain: Domain, x, tol: float | None = None) -> tuple[int, float] | None:
    """(curve id, tau) if x lies on the boundary within tol, else None."""
    tol = 1e-9 * domain.diameter if tol is None else tol
    best = None
    for cid, c in enumerate(domain.curves):
        t, d = project_to_curve(c, x)
        if d <= tol and (best is None or d < best[2]):
            best = (cid, t, d)
    return None if best is None else (best[0], best[1])


_DECOMP_CACHE: dict[int, tuple[Domain, BoundaryDecomposition]] = {}


def default_decomposition(domain: Domain) -> BoundaryDecomposition:
    """Decomposition with the default tolerance, memoized per domain object."""
    hit = _DECOMP_CACHE.get(id(domain))
    if hit is None or hit[0] is not domain:
        hit = (domain, decompose_boundary(domain))
        _DECOMP_CACHE[id(domain)] = hit
    return hit[1]
