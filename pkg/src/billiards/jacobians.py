"""Bounce-map derivatives in boundary charts, determinant identities and transversality.

All derivatives follow the backward cycle: bounce k sits at time t^k, the
velocity v^k is the post-reflection velocity there, and x^{k+1} = x^k - (t^k - t^{k+1}) v^k.
Chart velocity components are taken with the outward normal, so the normal
component of every post-reflection velocity is positive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Domain, LocalChart, TWO_PI
from .trajectory import (
    GrazingClass,
    PhasePoint,
    SpecularCycle,
    Termination,
    TraceError,
    TraceOptions,
    first_exit,
    position_at,
    reflect,
    trace_cycles,
)

RTOL = 1e-5
ATOL = 1e-9
FD_STEP = 1e-6


class JacobianError(ValueError):
    pass


class GrazingAtBounce(JacobianError):
    pass


class ChartFailure(JacobianError):
    pass


class CombinatoricsChanged(JacobianError):
    """A finite-difference perturbation hit a different boundary piece."""


class HypothesisViolated(JacobianError):
    pass


class BothCoefficientsTiny(JacobianError):
    pass


class PreconditionFailed(JacobianError):
    def __init__(self, violations):
        super().__init__("violated: " + ", ".join(violations))
        self.violations = list(violations)


class GrazingOnPath(JacobianError):
    pass


# -- bounce data -------------------------------------------------------------


@dataclass(frozen=True)
class BounceFrame:
    """Chart data at one bounce, anchored at the bounce point itself."""

    curve_id: int
    tau: float
    time: float
    point: np.ndarray
    a: float
    T: np.ndarray
    n: np.ndarray
    kappa: float
    v: np.ndarray
    chart: LocalChart

    @property
    def v1(self) -> float:
        return float(self.T @ self.v)

    @property
    def v3(self) -> float:
        return float(self.n @ self.v)

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.v))

    @property
    def sqrt_g11(self) -> float:
        return math.sqrt(float(self.chart.metric(0.0, 0.0)[0]))

    def frame_derivatives(self):
        """d/dx1 of the unit tangent and outward normal, from the chart's Christoffel symbols."""
        gam = self.chart.christoffel(0.0, 0.0)
        rg = self.sqrt_g11
        dT = gam[1, 0, 0] / rg * self.n
        dn = gam[0, 0, 1] * rg * self.T
        return dT, dn

    def dv_dx1(self, v=None) -> np.ndarray:
        """Rate of the Euclidean velocity when the chart components are held fixed."""
        dT, dn = self.frame_derivatives()
        v = self.v if v is None else v
        return float(self.T @ v) * dT + float(self.n @ v) * dn


def bounce_frame(domain: Domain, cycle: SpecularCycle, k: int, min_incidence: float = 1e-6) -> BounceFrame:
    e = cycle.event(k)
    if e.grazing_class is not GrazingClass.NON_GRAZING:
        raise GrazingAtBounce(f"bounce {k} is {e.grazing_class.value}")
    curve = domain.curves[e.curve_id]
    v = e.post[[0, 2]]
    n = curve.normal(e.tau)
    if float(n @ v) <= min_incidence * float(np.linalg.norm(v)):
        raise GrazingAtBounce(f"bounce {k} incidence {float(n @ v):.3g} below floor")
    try:
        ch = LocalChart(curve, e.tau, 0.0)
    except Exception as exc:  # pragma: no cover - LocalChart only stores data
        raise ChartFailure(str(exc)) from exc
    return BounceFrame(
        e.curve_id,
        e.tau,
        e.time,
        curve.point(e.tau),
        float(curve.speed(e.tau)),
        curve.tangent(e.tau),
        n,
        float(curve.curvature(e.tau)),
        v,
        ch,
    )


# -- analytic derivative formulas ----------------------------------------------------

BOUNCE_INPUTS = ("x1", "v1", "v3")
BOUNCE_OUTPUTS = ("flight", "x1", "v1", "v3")
GLOBAL_INPUTS = ("x1", "x3", "v1", "v3")
GLOBAL_OUTPUTS = ("tb", "x1", "v1", "v3", "speed")


def _landing(W: np.ndarray, dv: np.ndarray, nxt: BounceFrame, v: np.ndarray):
    """Derivatives at the next bounce given the launch-point variation W and velocity variation dv."""
    T1, n1 = nxt.T, nxt.n
    v1, v3 = float(T1 @ v), -float(n1 @ v)
    dflight = -float(n1 @ W) / v3
    dtau = float((T1 + (v1 / v3) * n1) @ W) / nxt.a
    dT, dn = nxt.frame_derivatives()
    dvel1 = float(T1 @ dv) + dtau * float(dT @ v)
    dvel3 = -float(n1 @ dv) - dtau * float(dn @ v)
    return dflight, dtau, dvel1, dvel3


def bounce_matrix(cur: BounceFrame, nxt: BounceFrame) -> np.ndarray:
    """4x3 matrix d(flight, x1', v1', v3') / d(x1, v1, v3) across one bounce."""
    flight = cur.time - nxt.time
    v = cur.v
    cols = []
    # position variation along the boundary, carrying the rotated velocity with it
    dv = cur.dv_dx1()
    cols.append(_landing(cur.a * cur.T - flight * dv, dv, nxt, v))
    for e in (cur.T, cur.n):
        cols.append(_landing(-flight * e, e, nxt, v))
    return np.array(cols).T


def first_bounce_matrix(phase: PhasePoint, first: BounceFrame) -> np.ndarray:
    """5x4 matrix d(t_b, x1, v1, v3, |v|) / d(x1, x3, v1, v3) for the first backward bounce."""
    v = phase.vs
    tb = phase.t - first.time
    T, n = first.T, first.n
    v1, v3 = float(T @ v), -float(n @ v)
    dT, dn = first.frame_derivatives()
    out = np.zeros((5, 4))
    for j in range(2):
        e = np.zeros(2)
        e[j] = 1.0
        # position column, then velocity column
        for col, W, dv in ((j, e, np.zeros(2)), (2 + j, -tb * e, e)):
            dtb = -float(n @ W) / v3
            dtau = float((T + (v1 / v3) * n) @ W) / first.a
            out[0, col] = dtb
            out[1, col] = dtau
            out[2, col] = float(T @ dv) + dtau * float(dT @ v)
            out[3, col] = -float(n @ dv) - dtau * float(dn @ v)
            out[4, col] = 0.0 if col < 2 else float(v[j]) / float(np.linalg.norm(v))
    return out


def formula_determinant(cur: BounceFrame, nxt: BounceFrame) -> float:
    return (cur.sqrt_g11 / nxt.sqrt_g11) * abs(cur.v3) / abs(nxt.v3)


# -- finite differences -------------------------------------------------------


def fd_jacobian(f, z0, steps) -> np.ndarray:
    """Central differences with one Richardson extrapolation.

    Works in the dtype of ``z0``; the bounce oracles pass longdouble so that
    rounding in the perturbed landings stays far below the step.
    """
    z0 = np.asarray(z0)
    if z0.dtype.kind != "f":
        z0 = z0.astype(float)
    cols = []
    for i, h in enumerate(steps):
        h = z0.dtype.type(h)
        e = np.zeros_like(z0)

        def D(hh):
            e[:] = 0.0
            e[i] = hh
            return (np.asarray(f(z0 + e)) - np.asarray(f(z0 - e))) / (2 * hh)

        # pairing h with 2h keeps the rounding noise near that of D(h) alone
        d1 = D(h)
        d2 = D(2 * h)
        cols.append((4 * d1 - d2) / 3)
    return np.column_stack(cols).astype(float)


LD = np.longdouble
LD_PI = LD("3.14159265358979323846264338327950288")


def _ld_curve(curve, tau, order: int = 0) -> np.ndarray:
    """Curve derivative in extended precision (oracle use only)."""
    tau = LD(tau)
    if curve.kind == "open":
        poly = curve.graph.deriv(order) if order else curve.graph
        y = LD(0)
        for c in poly.coef[::-1]:
            y = y * tau + LD(c)
        x = tau if order == 0 else (LD(1) if order == 1 else LD(0))
        return np.array([x, y], dtype=LD)
    m = np.arange(1, curve.harmonics + 1).astype(LD)
    ph = tau * m + LD(order) * LD_PI / 2
    out = (np.cos(ph) * m**order) @ curve.cos_coeffs.astype(LD) + (np.sin(ph) * m**order) @ curve.sin_coeffs.astype(LD)
    if order == 0:
        out = out + curve.a0.astype(LD)
    return out


def _ld_frame(curve, tau):
    d = _ld_curve(curve, tau, 1)
    T = d / np.sqrt(d @ d)
    return T, np.array([T[1], -T[0]], dtype=LD)


def _ld_refine(curve, x, d, s, tau, iters: int = 4):
    """Newton on x + s d = alpha(tau) in extended precision."""
    s, tau = LD(s), LD(tau)
    for _ in range(iters):
        r = x + s * d - _ld_curve(curve, tau)
        a1 = _ld_curve(curve, tau, 1)
        # columns d and -alpha'
        det = d[0] * (-a1[1]) - d[1] * (-a1[0])
        ds = (r[0] * (-a1[1]) - r[1] * (-a1[0])) / det
        dt = (d[0] * r[1] - d[1] * r[0]) / det
        s, tau = s - ds, tau - dt
    return s, tau


def _tau_offset(domain: Domain, cid: int, tau: float, ref: float) -> float:
    d = tau - ref
    if domain.curves[cid].closed:
        d = (d + math.pi) % TWO_PI - math.pi
    return d


def _exit_opts() -> TraceOptions:
    return TraceOptions()


def _advance(domain: Domain, cid: int, tau: float, v: np.ndarray, expect: BounceFrame, opts):
    """Backward flight from alpha_cid(tau) with velocity v to the bounce near `expect`."""
    curve = domain.curves[cid]
    p = curve.point(tau)
    try:
        hit = first_exit(domain, p, -v, opts, launch=(cid, tau))
    except TraceError as exc:
        raise CombinatoricsChanged(str(exc)) from exc
    if hit is None or hit.curve_id != expect.curve_id:
        raise CombinatoricsChanged("perturbed flight lands on another boundary piece")
    off = _tau_offset(domain, hit.curve_id, hit.tau, expect.tau)
    if abs(off) > 1e-2:
        raise CombinatoricsChanged(f"perturbed landing moved by {off:.3g} in tau")
    c1 = domain.curves[hit.curve_id]
    n1 = c1.normal(hit.tau)
    if -float(n1 @ v) <= 1e-9 * float(np.linalg.norm(v)):
        raise CombinatoricsChanged("perturbed flight grazes")
    return hit, off, c1.tangent(hit.tau), n1


def _single_bounce_map(domain: Domain, cur: BounceFrame, nxt: BounceFrame, opts=None):
    opts = opts or _exit_opts()
    curve = domain.curves[cur.curve_id]

    def f(z):
        x1, v1, v3 = z
        tau = LD(cur.tau) + x1
        T, n = _ld_frame(curve, tau)
        v = v1 * T + v3 * n
        hit, _, _, _ = _advance(domain, cur.curve_id, float(tau), v.astype(float), nxt, opts)
        c1 = domain.curves[hit.curve_id]
        fl, t1 = _ld_refine(c1, _ld_curve(curve, tau), -v, hit.s, hit.tau)
        T1, n1 = _ld_frame(c1, t1)
        off = t1 - LD(nxt.tau)
        if c1.closed:
            off = (off + LD_PI) % (2 * LD_PI) - LD_PI
        return np.array([fl, off, T1 @ v, -(n1 @ v)], dtype=LD)

    return f


def _global_first_map(domain: Domain, first: BounceFrame, opts=None):
    opts = opts or _exit_opts()

    def f(z):
        x = z[:2]
        v = z[2:]
        try:
            hit = first_exit(domain, x.astype(float), -v.astype(float), opts)
        except TraceError as exc:
            raise CombinatoricsChanged(str(exc)) from exc
        if hit is None or hit.curve_id != first.curve_id:
            raise CombinatoricsChanged("perturbed phase lands on another boundary piece")
        if abs(_tau_offset(domain, hit.curve_id, hit.tau, first.tau)) > 1e-2:
            raise CombinatoricsChanged("perturbed first bounce moved too far")
        c = domain.curves[hit.curve_id]
        tb, tau = _ld_refine(c, x, -v, hit.s, hit.tau)
        T, n = _ld_frame(c, tau)
        off = tau - LD(first.tau)
        if c.closed:
            off = (off + LD_PI) % (2 * LD_PI) - LD_PI
        post = v - 2 * (v @ n) * n
        return np.array([tb, off, T @ post, n @ post, np.sqrt(post @ post)], dtype=LD)

    return f


# -- reports -------------------------------------------------------------------


def _residual(a, b) -> np.ndarray:
    """|a - b| scaled so that values below RTOL mean |a - b| < max(RTOL |a|, ATOL)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.abs(a), ATOL / RTOL)


@dataclass
class JacobianReport:
    k: int
    names: list[str]
    analytic: np.ndarray
    fd: np.ndarray
    det_analytic: float = math.nan
    det_formula: float = math.nan
    det_fd: float = math.nan

    @property
    def residuals(self) -> np.ndarray:
        return _residual(self.analytic, self.fd)

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residuals))

    def passed(self, rtol: float = RTOL) -> bool:
        return self.max_residual < rtol

    def entry(self, name: str) -> tuple[float, float]:
        i = self.names.index(name)
        return float(self.analytic[i]), float(self.fd[i])

    def rows(self):
        for name, a, f, r in zip(self.names, self.analytic, self.fd, self.residuals):
            yield {"k": self.k, "name": name, "analytic": a, "fd": f, "residual": r}


def _names(outs, ins):
    return [f"d{o}/d{i}" for o in outs for i in ins]


def bounce_jacobian(domain: Domain, cycle: SpecularCycle, k: int, step: float = FD_STEP) -> JacobianReport:
    """Derivatives of (flight time, x1, v1, v3) at bounce k+1 with respect to the chart data at bounce k."""
    cur = bounce_frame(domain, cycle, k)
    nxt = bounce_frame(domain, cycle, k + 1)
    A = bounce_matrix(cur, nxt)
    f = _single_bounce_map(domain, cur, nxt)
    z0 = np.array([0.0, cur.v1, cur.v3], dtype=LD)
    F = fd_jacobian(f, z0, [step, step * cur.speed, step * cur.speed])
    det_a = float(np.linalg.det(A[1:]))
    det_f = float(np.linalg.det(F[1:]))
    return JacobianReport(
        k,
        _names(BOUNCE_OUTPUTS, BOUNCE_INPUTS),
        A.ravel(),
        F.ravel(),
        det_a,
        formula_determinant(cur, nxt),
        det_f,
    )


def first_bounce_jacobian_global(domain: Domain, phase: PhasePoint, step: float = FD_STEP) -> JacobianReport:
    """Derivatives of (t_b, x1, v1, v3, |v|) at the first backward bounce in Euclidean (x, v)."""
    cyc = trace_cycles(domain, phase, TraceOptions(bounce_cap=1))
    if not cyc.events:
        raise GrazingAtBounce(f"no first bounce ({cyc.termination.value})")
    first = bounce_frame(domain, cyc, 1)
    A = first_bounce_matrix(phase, first)
    f = _global_first_map(domain, first)
    z0 = np.concatenate([phase.xs, phase.vs]).astype(LD)
    sp = float(np.linalg.norm(phase.vs))
    F = fd_jacobian(f, z0, [step, step, step * sp, step * sp])
    return JacobianReport(0, _names(GLOBAL_OUTPUTS, GLOBAL_INPUTS), A.ravel(), F.ravel())


@dataclass(frozen=True)
class DetCheck:
    analytic: float
    formula: float
    fd: float

    @property
    def analytic_vs_formula(self) -> float:
        return abs(abs(self.analytic) - self.formula)

    @property
    def analytic_vs_fd(self) -> float:
        return abs(abs(self.analytic) - abs(self.fd))


def det_check(domain: Domain, cycle: SpecularCycle, k: int, step: float = FD_STEP) -> DetCheck:
    rep = bounce_jacobian(domain, cycle, k, step)
    return DetCheck(rep.det_analytic, rep.det_formula, rep.det_fd)


# -- chains over several bounces ----------------------------------------------------


def _to_hat(fr: BounceFrame) -> np.ndarray:
    """d(x1, v1, v3) / d(x1, v1hat, |v|) at a bounce."""
    s = fr.speed
    h1, h3 = fr.v1 / s, fr.v3 / s
    return np.array([[1, 0, 0], [0, s, h1], [0, -s * h1 / h3, h3]], dtype=float)


def _from_hat(fr: BounceFrame) -> np.ndarray:
    """d(x1, v1hat, |v|) / d(x1, v1, v3) at a bounce."""
    s = fr.speed
    v1, v3 = fr.v1, fr.v3
    return np.array([[1, 0, 0], [0, v3 * v3 / s**3, -v1 * v3 / s**3], [0, v1 / s, v3 / s]], dtype=float)


@dataclass(frozen=True)
class ChainDeterminant:
    k: int
    analytic: float
    fd: float
    corrected_closed_form: float
    stated_closed_form: float
    stated_telescoped: float
    formula_product: float
    formula_telescoped: float


def chain_determinant(domain: Domain, cycle: SpecularCycle, k: int, step: float = FD_STEP) -> ChainDeterminant:
    """|det| of (x1, v1hat, |v|) at bounce 1 -> bounce k, four ways."""
    if k < 2:
        raise ValueError("a chain needs at least two bounces")
    frames = [bounce_frame(domain, cycle, i) for i in range(1, k + 1)]
    J = np.eye(3)
    for cur, nxt in zip(frames[:-1], frames[1:]):
        P = bounce_matrix(cur, nxt)[1:]
        J = _from_hat(nxt) @ P @ _to_hat(cur) @ J
    opts = _exit_opts()

    def f(z):
        x1, h1, s = z
        fr = frames[0]
        c = domain.curves[fr.curve_id]
        tau = fr.tau + x1
        v = s * (h1 * c.tangent(tau) + math.sqrt(1 - h1 * h1) * c.normal(tau))
        cid = fr.curve_id
        for nxt in frames[1:]:
            hit, off, T1, n1 = _advance(domain, cid, tau, v, nxt, opts)
            v = reflect(v, n1)
            cid, tau = hit.curve_id, hit.tau
        last = frames[-1]
        sp = float(np.linalg.norm(v))
        c = domain.curves[cid]
        return np.array(
            [_tau_offset(domain, cid, tau, last.tau), float(c.tangent(tau) @ v) / sp, sp]
        )

    f0 = frames[0]
    F = fd_jacobian(f, [0.0, f0.v1 / f0.speed, f0.speed], [step, step, step * f0.speed])
    g = [fr.sqrt_g11 for fr in frames]
    w = [abs(fr.v3) for fr in frames]
    stated_tel = 1.0
    formula_prod = 1.0
    for i in range(k - 1):
        stated_tel *= (g[i] / g[i + 1]) * (w[i + 1] / w[i]) ** 2
        formula_prod *= (g[i] / g[i + 1]) * (w[i] / w[i + 1])
    return ChainDeterminant(
        k,
        abs(float(np.linalg.det(J))),
        abs(float(np.linalg.det(F))),
        g[0] / g[-1],
        (g[0] / g[-1]) * w[-1] ** 2 / w[0] ** 2,
        stated_tel,
        formula_prod,
        (g[0] / g[-1]) * w[0] / w[-1],
    )


def chain_sensitivities(domain: Domain, phase: PhasePoint, cycle: SpecularCycle, k: int):
    """Frames 1..k and d(x1^k, v1^k, v3^k) / d(v1, v3) of the initial Euclidean velocity."""
    frames = [bounce_frame(domain, cycle, i) for i in range(1, k + 1)]
    G = first_bounce_matrix(phase, frames[0])[1:4, 2:4]
    for cur, nxt in zip(frames[:-1], frames[1:]):
        G = bounce_matrix(cur, nxt)[1:] @ G
    return frames, G


# -- specular basis and transition matrix -----------------------------------------


@dataclass(frozen=True)
class SpecularBasis:
    e0: np.ndarray
    eperp: np.ndarray

    @classmethod
    def of(cls, v) -> "SpecularBasis":
        v = np.asarray(v, dtype=float)
        s = float(np.linalg.norm(v))
        return cls(v / s, np.array([v[1], -v[0]]) / s)


@dataclass(frozen=True)
class TransitionMatrix:
    S1: float
    S2: float
    S3: float
    k: int

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.S1, 0.0], [self.S2, self.S3]])

    @property
    def det(self) -> float:
        return self.S1 * self.S3


@dataclass(frozen=True)
class TransitionData:
    basis: SpecularBasis
    matrix: TransitionMatrix
    R1: float
    R2: float
    hypotheses: dict
    rho_floor: float
    frame: BounceFrame

    @property
    def nondegenerate(self) -> bool:
        return max(abs(self.R1), abs(self.R2)) > self.rho_floor


def transition_matrix(fr: BounceFrame, k: int = 0) -> tuple[SpecularBasis, TransitionMatrix]:
    basis = SpecularBasis.of(fr.v)
    s = fr.speed
    h1, h3 = fr.v1 / s, fr.v3 / s
    S1 = float((fr.a * fr.T) @ basis.eperp)
    S2 = float(fr.dv_dx1(fr.v / s) @ basis.eperp)
    S3 = float((fr.T - fr.n * (h1 / h3)) @ basis.eperp)
    return basis, TransitionMatrix(S1, S2, S3, k)


def _check_hypotheses(phase: PhasePoint, frames, N: float, delta2: float) -> dict:
    v = phase.vs
    s = float(np.linalg.norm(v))
    return {
        "speed_band": 1.0 / N <= s <= N,
        "normal_speed": abs(float(v[1])) >= 1.0 / N,
        "non_grazing": all(abs(fr.v3) > delta2 for fr in frames),
        "first_tangent_alignment": abs(float(frames[0].T[0])) > 1.0 / N,
    }


def transition_data(
    domain: Domain,
    phase: PhasePoint,
    cycle: SpecularCycle,
    k: int,
    rho_floor: float = 1e-8,
    N: float = 10.0,
    delta2: float = 1e-2,
    strict: bool = False,
) -> TransitionData:
    frames, G = chain_sensitivities(domain, phase, cycle, k)
    hyp = _check_hypotheses(phase, frames, N, delta2)
    if strict and not all(hyp.values()):
        raise HypothesisViolated(", ".join(n for n, ok in hyp.items() if not ok))
    fr = frames[-1]
    basis, S = transition_matrix(fr, k)
    v = phase.vs
    s = float(np.linalg.norm(v))
    h1, h3 = v[0] / s, v[1] / s
    dv = s * np.array([1.0, -h1 / h3])  # d(v1, v3) / d v1hat at fixed speed
    d = G @ dv
    dx1, dhat1 = d[0], d[1] / fr.speed
    R = S.matrix @ np.array([dx1, dhat1])
    return TransitionData(basis, S, float(R[0]), float(R[1]), hyp, rho_floor, fr)


# -- critical times and the transversality product --------------------------------------


@dataclass(frozen=True)
class CriticalTimes:
    """Zeros of the affine map s~ -> b s~ + c, with s~ = t - s."""

    t: float
    b: float
    c: float
    delta_star: float
    k: int = 0

    @property
    def phi1(self) -> float:
        return -self.c / self.b if self.b != 0 else math.inf

    @property
    def indicator(self) -> bool:
        return abs(self.b) > abs(self.c) / 4

    @property
    def phi2(self) -> float:
        return self.phi1 if self.indicator else 0.0

    @property
    def psi1(self) -> float:
        return self.t - self.phi1

    @property
    def psi2(self) -> float:
        return self.t - self.phi2

    def value(self, s_tilde):
        return self.b * np.asarray(s_tilde) + self.c

    def bound_first(self, delta: float | None = None) -> float:
        """Lower bound of |b s~ + c| whenever |s~ - phi1| > delta."""
        delta = self.delta_star if delta is None else delta
        return abs(self.b) * delta

    def bound_second(self, delta: float | None = None) -> float:
        """Lower bound for |s~| <= 1 and |s~ - phi2| > delta."""
        delta = self.delta_star if delta is None else delta
        if self.indicator:
            return min(abs(self.c) / 2, abs(self.c) / 4 * delta)
        return abs(self.c) / 2


def critical_coefficients(b: float, c: float, t: float = 0.0, delta_star: float = 0.0, floor: float = 1e-8, k: int = 0) -> CriticalTimes:
    if abs(b) < floor and abs(c) < floor:
        raise BothCoefficientsTiny(f"|b|={abs(b):.3g} and |c|={abs(c):.3g} both below {floor}")
    return CriticalTimes(t, b, c, delta_star, k)


def _backward_cycle(domain: Domain, phase: PhasePoint, s_target: float, extra: int = 1, cap: int = 100_000):
    """Backward cycle traced until `extra` bounces beyond time s_target."""

    def stop(events, total):
        past = [e for e in events if e.time < s_target]
        return len(past) >= extra

    cyc = trace_cycles(domain, phase, TraceOptions(bounce_cap=cap), stop=stop)
    if cyc.termination is Termination.SOLVER_FAILURE:
        raise JacobianError(cyc.message)
    if cyc.termination is not Termination.STOPPED:
        raise GrazingOnPath(f"trace ended with {cyc.termination.value} before time {s_target}")
    return cyc


def segment_index(cycle: SpecularCycle, s: float) -> int:
    """k with s in (t^{k+1}, t^k], t^0 being the origin time."""
    k = 0
    for e in cycle.events:
        if e.time >= s:
            k += 1
        else:
            break
    return k


def critical_times(domain: Domain, phase: PhasePoint, k: int, delta_star: float, floor: float = 1e-8, cycle=None) -> CriticalTimes:
    if k < 1:
        raise ValueError("critical times are defined from the first bounce on")
    cycle = cycle or trace_cycles(domain, phase, TraceOptions(bounce_cap=k + 1))
    td = transition_data(domain, phase, cycle, k)
    sp = float(np.linalg.norm(phase.vs))
    tk = cycle.event(k).time
    b = sp * td.R2
    c = -td.R1 + (tk - phase.t) * sp * td.R2
    return critical_coefficients(b, c, phase.t, delta_star, floor, k)


@dataclass(frozen=True)
class Transversality:
    s: float
    k: int
    analytic: float
    fd: float

    @property
    def relative_error(self) -> float:
        return abs(self.analytic - self.fd) / max(abs(self.analytic), ATOL / RTOL)


def _position_at_time(domain: Domain, phase: PhasePoint, s: float, ids: tuple) -> np.ndarray:
    cyc = trace_cycles(domain, phase, TraceOptions(horizon_time=phase.t - s))
    got = tuple(e.curve_id for e in cyc.events)
    if cyc.termination is not Termination.HORIZON_TIME or got != ids:
        raise CombinatoricsChanged("perturbed trajectory changed its bounce sequence")
    if any(e.grazing_class is not GrazingClass.NON_GRAZING for e in cyc.events):
        raise CombinatoricsChanged("perturbed trajectory grazes")
    return cyc.end.xs


def analytic_transversality(domain: Domain, phase: PhasePoint, s: float, cycle: SpecularCycle) -> tuple[float, int]:
    t = phase.t
    k = segment_index(cycle, s)
    v = phase.vs
    sp = float(np.linalg.norm(v))
    if k == 0:
        return (t - s) ** 2 * sp / (v[1] / sp), 0
    td = transition_data(domain, phase, cycle, k)
    tk = cycle.event(k).time
    return -(t - s) * (td.R1 - (tk - s) * sp * td.R2), k


def transversality_product(domain: Domain, phase: PhasePoint, s: float, step: float = FD_STEP) -> Transversality:
    """Specular-frame determinant of (d/d|v|, d/d v1hat) of the backward position at time s."""
    if not s < phase.t:
        raise ValueError("s must precede the phase time")
    cycle = _backward_cycle(domain, phase, s)
    k = segment_index(cycle, s)
    if any(e.grazing_class is not GrazingClass.NON_GRAZING for e in cycle.events[: k + 1]):
        raise GrazingAtBounce("grazing bounce before time s")
    tp, _ = analytic_transversality(domain, phase, s, cycle)
    ids = tuple(e.curve_id for e in cycle.events[:k])
    v = phase.vs
    sp = float(np.linalg.norm(v))
    sign3 = 1.0 if v[1] >= 0 else -1.0

    def f(z):
        speed, h1 = z
        vel = speed * np.array([h1, sign3 * math.sqrt(1 - h1 * h1)])
        return _position_at_time(domain, PhasePoint(phase.xs, vel, phase.t), s, ids)

    F = fd_jacobian(f, [sp, v[0] / sp], [step * sp, step])
    vk = cycle.origin.vs if k == 0 else cycle.event(k).post[[0, 2]]
    basis = SpecularBasis.of(vk)
    E = np.column_stack([basis.e0, basis.eperp])
    tp_fd = float(np.linalg.det(E.T @ F))
    return Transversality(s, k, float(tp), tp_fd)


# -- change of variables u -> X(s') ------------------------------------------------


@dataclass(frozen=True)
class Exclusions:
    N: float = 10.0
    delta2: float = 1e-2
    sticky_points: tuple = ()
    sticky_radius: float = 0.0
    psi_halfwidth: float = 0.05
    eps_floor: float = 1e-8


@dataclass(frozen=True)
class CovCheck:
    det_fd: float
    det_analytic: float
    transversality: float
    k: int
    violations: tuple[str, ...]
    psi: tuple[float, ...]

    @property
    def relative_error(self) -> float:
        return abs(self.det_fd - self.det_analytic) / max(abs(self.det_analytic), ATOL / RTOL)

    def passed(self, eps_floor: float) -> bool:
        return not self.violations and abs(self.det_fd) > eps_floor


def backward_position(domain: Domain, phase: PhasePoint, s: float) -> np.ndarray:
    """3-position X(s; t, x, v) with the axial coordinate left unwrapped."""
    cyc = trace_cycles(domain, phase, TraceOptions(horizon_time=phase.t - s))
    if cyc.termination is not Termination.HORIZON_TIME:
        raise GrazingOnPath(f"trace ended with {cyc.termination.value}")
    xs = cyc.end.xs
    x2 = phase.x[1] - (phase.t - s) * phase.v[1]
    return np.array([xs[0], x2, xs[1]])


def change_of_variable_check(
    domain: Domain,
    t: float,
    x,
    v,
    s: float,
    u,
    s_prime: float,
    exclusions: Exclusions | None = None,
    step: float = FD_STEP,
    raise_on_violation: bool = False,
) -> CovCheck:
    """det of d X(s'; s, X(s; t, x, v), u) / du against -(s - s') * product * u3 / |u|^2."""
    ex = exclusions or Exclusions()
    y = backward_position(domain, PhasePoint(x, v, t), s)
    u = np.asarray(u, dtype=float)
    ucs = u[[0, 2]]
    usp = float(np.linalg.norm(ucs))
    uphase = PhasePoint(y, u, s)
    cyc = _backward_cycle(domain, uphase, s_prime)
    k = segment_index(cyc, s_prime)
    if any(e.grazing_class is not GrazingClass.NON_GRAZING for e in cyc.events[: k + 1]):
        raise GrazingOnPath("the u-trajectory grazes before s'")

    violations = []
    if not u[2] >= 1.0 / ex.N:
        violations.append("normal_speed")
    if not 1.0 / ex.N <= usp <= ex.N:
        violations.append("speed_band")
    if cyc.events and abs(float(domain.curves[cyc.events[0].curve_id].tangent(cyc.events[0].tau)[0])) <= 1.0 / ex.N:
        violations.append("first_tangent_alignment")
    for p in ex.sticky_points:
        if np.linalg.norm(y[[0, 2]] - np.asarray(p, float)) < ex.sticky_radius:
            violations.append("sticky_ball")
            break
    if abs(s - s_prime) < ex.delta2:
        violations.append("time_separation")
    t_hi = s if k == 0 else cyc.event(k).time
    t_lo = cyc.event(k + 1).time
    if not (t_lo + 1.0 / ex.N <= s_prime <= t_hi - (1.0 / ex.N if k > 0 else 0.0)):
        violations.append("bounce_window")
    psis: tuple[float, ...] = ()
    if k >= 1:
        try:
            ct = critical_times(domain, uphase, k, ex.psi_halfwidth, cycle=cyc)
            psis = (ct.psi1, ct.psi2) if ct.indicator else (ct.psi1,)
        except BothCoefficientsTiny:
            violations.append("critical_coefficients")
        if any(abs(s_prime - p) <= ex.psi_halfwidth for p in psis):
            violations.append("psi_window")
    if raise_on_violation and violations:
        raise PreconditionFailed(violations)

    tp, _ = analytic_transversality(domain, uphase, s_prime, cyc)
    det_a = -(s - s_prime) * tp * u[2] / usp**2
    ids = tuple(e.curve_id for e in cyc.events[:k])

    def f(w):
        ph = PhasePoint(y, w, s)
        xs = _position_at_time(domain, ph, s_prime, ids)
        return np.array([xs[0], y[1] - (s - s_prime) * w[1], xs[1]])

    F = fd_jacobian(f, u, [step * usp, step * max(abs(u[1]), usp), step * usp])
    return CovCheck(float(np.linalg.det(F)), float(det_a), float(tp), k, tuple(violations), psis)


# -- verification corpus ------------------------------------------------------------


@dataclass(frozen=True)
class CorpusEntry:
    scene: str
    domain: Domain
    cycle: SpecularCycle
    k: int
    phase: PhasePoint  # a point on the flight that ends at bounce k


def corpus_scenes() -> dict[str, Domain]:
    from .geometry import annulus, disk, ellipse, polar_cos3

    return {
        "disk": disk(),
        "annulus": annulus(1.0, 0.3),
        "ellipse": Domain(ellipse(2.0, 1.0)),
        "polar": Domain(polar_cos3(0.3)),
    }


def _random_interior(domain: Domain, rng) -> np.ndarray:
    lo, hi = domain.bounding_box
    while True:
        p = 0.95 * (lo + (hi - lo) * rng.random(2))
        if domain.contains(p, closed=False):
            return p


def jacobian_corpus(size: int = 100, seed: int = 20240611, min_ratio: float = 0.05) -> list[CorpusEntry]:
    """Seeded non-grazing bounces spread evenly over the four reference scenes."""
    rng = np.random.default_rng(seed)
    scenes = corpus_scenes()
    names = list(scenes)
    out: list[CorpusEntry] = []
    i = 0
    while len(out) < size:
        name = names[i % len(names)]
        dom = scenes[name]
        x = _random_interior(dom, rng)
        ang = rng.uniform(0, TWO_PI)
        speed = rng.uniform(0.5, 2.0)
        v = speed * np.array([math.cos(ang), math.sin(ang)])
        try:
            cyc = trace_cycles(dom, PhasePoint(x, v, 0.0), TraceOptions(bounce_cap=6))
        except TraceError:
            continue
        ev = cyc.events
        ok = len(ev) >= 3 and all(
            e.grazing_class is GrazingClass.NON_GRAZING and e.incidence > min_ratio * speed for e in ev[:3]
        )
        if not ok:
            continue
        k = int(rng.integers(1, 3))
        prev = cyc.origin.xs if k == 1 else ev[k - 2].position
        vel = cyc.origin.vs if k == 1 else ev[k - 2].post[[0, 2]]
        tprev = cyc.origin.t if k == 1 else ev[k - 2].time
        mid_t = 0.5 * (tprev + ev[k - 1].time)
        mid = prev - (tprev - mid_t) * vel
        out.append(CorpusEntry(name, dom, cyc, k, PhasePoint(mid, vel, mid_t)))
        i += 1
    return out


@dataclass(frozen=True)
class CovSample:
    u: tuple[float, float, float]
    s_prime: float
    at_psi: bool
    result: CovCheck | None
    error: str = ""


def cov_sweep(
    domain: Domain,
    t: float,
    x,
    v,
    s: float,
    us,
    per_segment: int = 6,
    segments: int = 2,
    exclusions: Exclusions | None = None,
) -> list[CovSample]:
    """Change-of-variable checks over a grid of s' per flight segment, plus every in-segment psi."""
    ex = exclusions or Exclusions()
    y = backward_position(domain, PhasePoint(x, v, t), s)
    out = []
    for u in us:
        u = tuple(float(c) for c in u)
        ph = PhasePoint(y, np.array(u), s)
        cyc = trace_cycles(domain, ph, TraceOptions(bounce_cap=segments + 1))
        times = [s] + [e.time for e in cyc.events]
        for k in range(min(segments, len(times) - 1)):
            hi, lo = times[k], times[k + 1]
            grid = list(np.linspace(lo, hi, per_segment + 2)[1:-1])
            psis = []
            if k >= 1:
                try:
                    ct = critical_times(domain, ph, k, ex.psi_halfwidth, cycle=cyc)
                    psis = [p for p in {ct.psi1, ct.psi2} if lo < p < hi and p != s]
                except BothCoefficientsTiny:
                    pass
            for sp, flag in [(g, False) for g in grid] + [(p, True) for p in psis]:
                try:
                    r = change_of_variable_check(domain, t, x, v, s, u, float(sp), ex)
                    out.append(CovSample(u, float(sp), flag, r))
                except JacobianError as exc:
                    out.append(CovSample(u, float(sp), flag, None, str(exc)))
    return out
