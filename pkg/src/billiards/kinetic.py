"""Particle transport with specular walls, conservation bookkeeping and two toy kinetic solvers."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Domain, locate_on_boundary
from .trajectory import PhasePoint, Termination, TraceOptions, position_at, reflect, trace_cycles

AXIS = np.array([0.0, 1.0, 0.0])


class KineticError(ValueError):
    pass


class TraceFailure(KineticError):
    pass


class NonContraction(UserWarning):
    pass


def _map(fn, items, threads: int = 1):
    """Order-preserving map; the result never depends on the thread count."""
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# -- ensembles -------------------------------------------------------------------


@dataclass
class ParticleEnsemble:
    x: np.ndarray  # (n, 3)
    v: np.ndarray  # (n, 3)
    weights: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        self.x = np.array(self.x, dtype=float).reshape(-1, 3)
        self.v = np.array(self.v, dtype=float).reshape(-1, 3)
        self.weights = np.array(self.weights, dtype=float).reshape(-1)
        n = len(self.x)
        if n == 0:
            raise KineticError("ensemble needs at least one particle")
        if len(self.v) != n or len(self.weights) != n:
            raise KineticError("positions, velocities and weights must have equal length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise KineticError("weights must be finite and nonnegative")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def particles(self) -> list[PhasePoint]:
        return [PhasePoint(x, v) for x, v in zip(self.x, self.v)]

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.x.copy(), self.v.copy(), self.weights.copy(), self.seed)

    def rows(self):
        for x, v, w in zip(self.x, self.v, self.weights):
            yield {"x1": x[0], "x2": x[1], "x3": x[2], "v1": v[0], "v2": v[1], "v3": v[2], "w": w}


def maxwellian_ensemble(
    domain: Domain,
    count: int,
    seed: int = 0,
    speed_band: tuple[float, float] = (0.1, 10.0),
) -> ParticleEnsemble:
    """Uniform positions, velocities from exp(-|v|^2/2) with the cross-section speed kept in the band.

    Each particle draws from its own generator spawned from ``seed``.
    """
    lo, hi = domain.bounding_box
    H = domain.axial_period
    band_lo, band_hi = speed_band
    xs = np.empty((count, 3))
    vs = np.empty((count, 3))
    for i, ss in enumerate(np.random.SeedSequence(seed).spawn(count)):
        rng = np.random.default_rng(ss)
        while True:
            p = lo + (hi - lo) * rng.random(2)
            if domain.contains(p, closed=False) and locate_on_boundary(domain, p) is None:
                break
        while True:
            v = rng.standard_normal(3)
            if band_lo <= math.hypot(v[0], v[2]) <= band_hi:
                break
        xs[i] = (p[0], H * rng.random(), p[1])
        vs[i] = v
    return ParticleEnsemble(xs, vs, np.ones(count), seed)


# -- conservation -----------------------------------------------------------------


def axis_symmetry_test(domain: Domain, tol: float = 1e-8, samples: int = 720):
    """Center x0 with (x - x0) x axis . n ~ 0 on every boundary sample, or None.

    The center is a least-squares fit; the returned residual is the max over samples.
    """
    if domain.sandbox:
        raise KineticError("axis symmetry needs a closed domain")
    tau = np.linspace(0, 2 * math.pi, samples, endpoint=False)
    pts, nrm = [], []
    for c in domain.curves:
        pts.append(c.point(tau))
        nrm.append(c.normal(tau))
    P = np.concatenate(pts)
    N = np.concatenate(nrm)
    # a x n (2D cross) with a = p - x0 is linear in x0
    rhs = P[:, 0] * N[:, 1] - P[:, 1] * N[:, 0]
    A = np.column_stack([N[:, 1], -N[:, 0]])
    x0, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    resid = float(np.max(np.abs(rhs - A @ x0)))
    if resid < tol * max(domain.diameter, 1.0):
        return x0, AXIS.copy(), resid
    return None


def angular_momentum(x: np.ndarray, v: np.ndarray, w: np.ndarray, center) -> tuple[float, float]:
    """Total of w (x - x0) x axis . v and the total of its absolute contributions."""
    a1 = x[:, 0] - center[0]
    a3 = x[:, 2] - center[1]
    per = w * (a1 * v[:, 2] - a3 * v[:, 0])
    return float(per.sum()), float(np.abs(per).sum())


@dataclass
class ConservationReport:
    mass: tuple[float, float]
    energy: tuple[float, float]
    angular: tuple[float, float] | None
    drifts: dict
    axis: tuple | None
    axis_source: str
    quarantine: list[int] = field(default_factory=list)
    bounces: tuple[int, int] = (0, 0)

    def rows(self):
        for name in ("mass", "energy", "angular"):
            pair = getattr(self, name)
            if pair is None:
                continue
            yield {"quantity": name, "initial": pair[0], "final": pair[1], "relative_drift": self.drifts[name]}


def _moments(ens: ParticleEnsemble, center):
    m = float(ens.weights.sum())
    e = float((ens.weights * 0.5 * np.sum(ens.v * ens.v, axis=1)).sum())
    ang = angular_momentum(ens.x, ens.v, ens.weights, center) if center is not None else None
    return m, e, ang


# -- transport ----------------------------------------------------------------------


def _circle_walls(domain: Domain):
    walls = []
    for i, c in enumerate(domain.curves):
        circ = c.circle
        if circ is None:
            return None
        walls.append((circ[0], circ[1], i == 0 and domain.outer is not None))
    return walls


def _circle_hits(x, v, walls, eps):
    """Flight time to the next wall and the wall index, for all rows at once."""
    best = np.full(len(x), np.inf)
    which = np.full(len(x), -1)
    a = np.sum(v * v, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _circle_hits_inner(x, v, walls, eps, a, best, which)


def _circle_hits_inner(x, v, walls, eps, a, best, which):
    for idx, (c, r, outer) in enumerate(walls):
        d = x - c
        b = np.sum(d * v, axis=1)
        cc = np.sum(d * d, axis=1) - r * r
        disc = np.maximum(b * b - a * cc, 0.0)
        sq = np.sqrt(disc)
        if outer:
            # far root of the circle around us, written without cancellation
            s = np.where(b <= 0, (-b + sq) / a, -cc / (b + sq))
        else:
            hit = (b < 0) & (b * b - a * cc > 0)
            s = np.where(hit, cc / np.where(hit, -b + sq, 1.0), np.inf)
        s = np.where(s > eps, s, np.inf)
        take = s < best
        best = np.where(take, s, best)
        which = np.where(take, idx, which)
    return best, which


def _transport_circles(domain, ens, walls, duration, bounces):
    x = ens.x[:, [0, 2]].copy()
    v = ens.v[:, [0, 2]].copy()
    n = len(x)
    rem = np.full(n, np.inf if duration is None else float(duration))
    count = np.zeros(n, dtype=np.int64)
    elapsed = np.zeros(n)
    target = np.iinfo(np.int64).max if bounces is None else int(bounces)
    active = np.ones(n, dtype=bool)
    eps = 1e-9 * domain.diameter / np.maximum(np.linalg.norm(v, axis=1), 1e-300)
    while active.any():
        idx = np.nonzero(active)[0]
        s, w = _circle_hits(x[idx], v[idx], walls, eps[idx])
        if np.any(w < 0):
            raise TraceFailure("particle left the circular domain")
        fly = np.minimum(s, rem[idx])
        xi = x[idx] + fly[:, None] * v[idx]
        hit = s <= rem[idx]
        rem[idx] = rem[idx] - fly
        elapsed[idx] += fly
        if hit.any():
            h = idx[hit]
            centers = np.array([walls[k][0] for k in w[hit]])
            radii = np.array([walls[k][1] for k in w[hit]])
            d = xi[hit] - centers
            nrm = d / np.linalg.norm(d, axis=1, keepdims=True)
            xi[hit] = centers + radii[:, None] * nrm
            vh = v[h]
            v[h] = vh - 2 * np.sum(vh * nrm, axis=1)[:, None] * nrm
            count[h] += 1
        x[idx] = xi
        active[idx] = (count[idx] < target) & (rem[idx] > 0)
    return x, v, count, elapsed


def _transport_one(domain, x3, v3, duration, bounces):
    ph = PhasePoint(x3, v3, 0.0)
    opts = TraceOptions(
        direction="forward",
        horizon_time=duration,
        bounce_cap=bounces if bounces is not None else 10**9,
    )
    cyc = trace_cycles(domain, ph, opts)
    if cyc.termination not in (Termination.HORIZON_TIME, Termination.BOUNCE_CAP):
        return None, len(cyc.events), 0.0
    end = cyc.end if cyc.end is not None else None
    if end is None:
        last = cyc.events[-1]
        xs, vs, t = last.position, last.post[[0, 2]], last.time
    else:
        xs, vs, t = end.xs, end.vs, end.t
    return (xs, vs), len(cyc.events), t


def transport_ensemble(
    domain: Domain,
    ensemble: ParticleEnsemble,
    duration: float | None = None,
    bounces: int | None = None,
    axis=None,
    fast: bool = True,
    threads: int = 1,
    speed_band: tuple[float, float] | None = None,
) -> tuple[ParticleEnsemble, ConservationReport]:
    """Event-driven specular transport for a fixed time, or for a fixed number of bounces per particle.

    ``axis`` supplies a center to evaluate the angular functional on scenes
    where the symmetry test fails (a control run); otherwise the detected
    axis is used and the angular entry is omitted when there is none.
    """
    if (duration is None) == (bounces is None):
        raise KineticError("give exactly one of duration and bounces")
    cs = np.hypot(ensemble.v[:, 0], ensemble.v[:, 2])
    if speed_band is not None:
        lo, hi = speed_band
        if np.any(cs < lo) or np.any(cs > hi):
            raise KineticError("particle speeds outside the trace band")
    if np.any(cs == 0):
        raise KineticError("every particle needs a nonzero cross-section speed")
    found = axis_symmetry_test(domain)
    if axis is not None:
        center, source = np.asarray(axis, dtype=float), "supplied"
    elif found is not None:
        center, source = found[0], "detected"
    else:
        center, source = None, "none"
    before = _moments(ensemble, center)
    out = ensemble.copy()
    walls = _circle_walls(domain) if fast else None
    quarantine: list[int] = []
    if walls is not None:
        xs, vs, count, dt = _transport_circles(domain, ensemble, walls, duration, bounces)
        out.x[:, 0], out.x[:, 2] = xs[:, 0], xs[:, 1]
        out.v[:, 0], out.v[:, 2] = vs[:, 0], vs[:, 1]
        out.x[:, 1] = (ensemble.x[:, 1] + dt * ensemble.v[:, 1]) % domain.axial_period
        counts = count
    else:
        res = _map(
            lambda i: _transport_one(domain, ensemble.x[i], ensemble.v[i], duration, bounces),
            range(len(ensemble)),
            threads,
        )
        counts = np.zeros(len(ensemble), dtype=np.int64)
        for i, (state, nb, t) in enumerate(res):
            counts[i] = nb
            if state is None:
                quarantine.append(i)
                continue
            out.x[i, 0], out.x[i, 2] = state[0]
            out.v[i, 0], out.v[i, 2] = state[1]
            out.x[i, 1] = (ensemble.x[i, 1] + t * ensemble.v[i, 1]) % domain.axial_period
    after = _moments(out, center)
    drifts = {
        "mass": abs(after[0] - before[0]) / before[0],
        "energy": abs(after[1] - before[1]) / before[1],
    }
    ang = None
    if center is not None:
        ang = (before[2][0], after[2][0])
        drifts["angular"] = abs(after[2][0] - before[2][0]) / max(before[2][1], 1e-300)
    rep = ConservationReport(
        (before[0], after[0]),
        (before[1], after[1]),
        ang,
        drifts,
        None if center is None else (tuple(center), tuple(AXIS)),
        source,
        quarantine,
        (int(counts.min()), int(counts.max())),
    )
    return out, rep


# -- kinetic grid ------------------------------------------------------------------


@dataclass
class KineticGrid:
    """Tensor grid over the bounding box (inside nodes only) times directions and speeds."""

    domain: Domain
    nx: int = 8
    ny: int = 8
    n_dir: int = 8
    n_speed: int = 2
    speed_band: tuple[float, float] = (0.5, 1.0)
    nu0: float = 1.0
    n_cut: float = 0.0

    def __post_init__(self):
        if min(self.nx, self.ny, self.n_dir, self.n_speed) < 2:
            raise KineticError("every grid axis needs at least 2 points")
        if self.nu0 < 0:
            raise KineticError("relaxation rate must be nonnegative")
        lo, hi = self.domain.bounding_box
        self.xs = np.linspace(lo[0], hi[0], self.nx)
        self.ys = np.linspace(lo[1], hi[1], self.ny)
        X, Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        inside = np.asarray(self.domain.contains(pts, closed=False)).reshape(self.nx, self.ny)
        for i in range(self.nx):
            for j in range(self.ny):
                if inside[i, j] and locate_on_boundary(self.domain, pts[i * self.ny + j]) is not None:
                    inside[i, j] = False
        self.inside = inside
        self.nodes = [(i, j) for i in range(self.nx) for j in range(self.ny) if inside[i, j]]
        self.angles = 2 * math.pi * np.arange(self.n_dir) / self.n_dir
        self.speeds = np.linspace(self.speed_band[0], self.speed_band[1], self.n_speed)

    def point(self, node) -> np.ndarray:
        i, j = node
        return np.array([self.xs[i], self.ys[j]])

    def velocity(self, l: int, k: int) -> np.ndarray:
        return self.speeds[k] * np.array([math.cos(self.angles[l]), math.sin(self.angles[l])])

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.nx, self.ny, self.n_dir, self.n_speed

    def gain_weights(self) -> np.ndarray:
        """Quadrature over |u| <= n_cut: periodic trapezoid in angle, trapezoid in speed with the polar weight."""
        w = np.zeros(self.n_speed)
        sp = self.speeds
        for k in range(self.n_speed - 1):
            a, b = sp[k], sp[k + 1]
            if b > self.n_cut + 1e-15:
                continue
            h = b - a
            w[k] += 0.5 * h * a
            w[k + 1] += 0.5 * h * b
        return w * (2 * math.pi / self.n_dir)


@dataclass
class DecayCurve:
    times: np.ndarray
    sup: np.ndarray
    flagged: list
    values: dict = field(default_factory=dict)

    def rows(self):
        for t, s in zip(self.times, self.sup):
            yield {"t": t, "sup": s}


def _backward_state(domain: Domain, x, v, t: float, s: float):
    """Cross-section (X(s), V(s)) of the backward characteristic from (t, x, v)."""
    if t == s:
        return np.asarray(x, float), np.asarray(v, float)
    cyc = trace_cycles(domain, PhasePoint(x, v, t), TraceOptions(horizon_time=t - s))
    if cyc.termination is not Termination.HORIZON_TIME:
        raise TraceFailure(cyc.termination.value)
    return cyc.end.xs, cyc.end.vs


def relaxation_decay(
    grid: KineticGrid,
    f0: Callable,
    times,
    threads: int = 1,
) -> DecayCurve:
    """f(t) = exp(-nu0 t) f0(X(0), V(0)) on the grid; sup-norm at each requested time."""
    if not grid.nu0 > 0:
        raise KineticError("relaxation needs a positive rate")
    dom = grid.domain
    times = np.asarray(times, dtype=float)
    jobs = [(t, n, l, k) for t in times for n in grid.nodes for l in range(grid.n_dir) for k in range(grid.n_speed)]

    def one(job):
        t, node, l, k = job
        try:
            X, V = _backward_state(dom, grid.point(node), grid.velocity(l, k), t, 0.0)
        except TraceFailure:
            return None
        return math.exp(-grid.nu0 * t) * f0(X, V)

    vals = _map(one, jobs, threads)
    sup = np.zeros(len(times))
    flagged = []
    values = {}
    for job, val in zip(jobs, vals):
        ti = int(np.searchsorted(times, job[0]))
        if val is None:
            flagged.append(job)
            continue
        values[job] = val
        sup[ti] = max(sup[ti], abs(val))
    return DecayCurve(times, sup, flagged, values)


def characteristic_value(domain: Domain, f0: Callable, nu0: float, t: float, x, v) -> float:
    """Single-node evaluation through the full cycle and position lookup."""
    if t == 0:
        return f0(np.asarray(x, float), np.asarray(v, float))
    cyc = trace_cycles(domain, PhasePoint(x, v, t), TraceOptions(horizon_length=t * float(np.linalg.norm(v)) * (1 + 1e-9) + 1e-12))
    X, V, _ = position_at(cyc, 0.0)
    return math.exp(-nu0 * t) * f0(X, V)


# -- Duhamel iteration ---------------------------------------------------------------


class _NodeInterpolator:
    """Bilinear interpolation of a node field, outside nodes filled from the nearest inside node."""

    def __init__(self, grid: KineticGrid):
        self.grid = grid
        ins = np.array(grid.nodes)
        self.fill = {}
        for i in range(grid.nx):
            for j in range(grid.ny):
                if not grid.inside[i, j]:
                    d = (grid.xs[ins[:, 0]] - grid.xs[i]) ** 2 + (grid.ys[ins[:, 1]] - grid.ys[j]) ** 2
                    self.fill[(i, j)] = tuple(ins[int(np.argmin(d))])

    def extend(self, field_in: np.ndarray) -> np.ndarray:
        out = field_in.copy()
        for node, src in self.fill.items():
            out[node] = field_in[src]
        return out

    def __call__(self, full: np.ndarray, p) -> float:
        g = self.grid
        fx = np.clip((p[0] - g.xs[0]) / (g.xs[1] - g.xs[0]), 0, g.nx - 1 - 1e-12)
        fy = np.clip((p[1] - g.ys[0]) / (g.ys[1] - g.ys[0]), 0, g.ny - 1 - 1e-12)
        i, j = int(fx), int(fy)
        a, b = fx - i, fy - j
        return float(
            (1 - a) * (1 - b) * full[i, j]
            + a * (1 - b) * full[i + 1, j]
            + (1 - a) * b * full[i, j + 1]
            + a * b * full[i + 1, j + 1]
        )


@dataclass
class DuhamelResult:
    times: np.ndarray
    f: np.ndarray  # (n_time, nx, ny, n_dir, n_speed), zero off the domain
    residuals: list[float]
    iterates: list[np.ndarray]

    @property
    def ratios(self) -> list[float]:
        r = self.residuals
        return [r[i + 1] / r[i] for i in range(len(r) - 1) if r[i] > 0]

    def rows(self):
        for m, r in enumerate(self.residuals, start=1):
            yield {"iteration": m, "residual": r}


def duhamel_gain_iteration(
    grid: KineticGrid,
    f0: Callable,
    t_final: float,
    iterations: int,
    n_time: int = 11,
    threads: int = 1,
) -> DuhamelResult:
    """Picard iterates of f = e^{-t} f0(X(0), V(0)) + int_0^t e^{-(t-s)} int_{|u|<=N} f(s, X(s), u) du ds, from f = 0."""
    if iterations < 1:
        raise KineticError("need at least one iteration")
    dom = grid.domain
    times = np.linspace(0.0, t_final, n_time)
    wts = grid.gain_weights()
    interp = _NodeInterpolator(grid)
    shape = (n_time,) + grid.shape

    # characteristics from every (s_j, node, u) back to each earlier grid time
    jobs = [(j, n, l, k) for j in range(n_time) for n in grid.nodes for l in range(grid.n_dir) for k in range(grid.n_speed)]

    def chars(job):
        j, node, l, k = job
        x, v = grid.point(node), grid.velocity(l, k)
        if j == 0:
            return [(x, v)]
        cyc = trace_cycles(dom, PhasePoint(x, v, times[j]), TraceOptions(horizon_time=times[j]))
        if cyc.termination is not Termination.HORIZON_TIME:
            raise TraceFailure(f"characteristic from node {node} ended with {cyc.termination.value}")
        return [position_at(cyc, times[q])[:2] for q in range(j + 1)]

    paths = dict(zip(jobs, _map(chars, jobs, threads)))
    free = np.zeros(shape)
    for job, path in paths.items():
        j, (a, b), l, k = job
        X0, V0 = path[0]
        free[j, a, b, l, k] = math.exp(-times[j]) * f0(X0, V0)

    f = np.zeros(shape)
    residuals: list[float] = []
    iterates = []
    for _ in range(iterations):
        gain = np.einsum("tijlk,k->tij", f, wts)
        gain = np.stack([interp.extend(g) for g in gain])
        new = free.copy()
        for job, path in paths.items():
            j, (a, b), l, k = job
            if j == 0:
                continue
            h = times[1] - times[0]
            acc = 0.0
            for q in range(j + 1):
                wq = h * (0.5 if q in (0, j) else 1.0)
                acc += wq * math.exp(-(times[j] - times[q])) * interp(gain[q], path[q][0])
            new[j, a, b, l, k] += acc
        residuals.append(float(np.max(np.abs(new - f))))
        f = new
        iterates.append(f.copy())
    r = residuals
    if any(r[i + 1] >= r[i] for i in range(len(r) - 1) if r[i] > 0):
        warnings.warn("Picard residuals failed to decrease", NonContraction, stacklevel=2)
    return DuhamelResult(times, f, residuals, iterates)


def upwind_oracle(grid: KineticGrid, f0: Callable, t_final: float, cfl: float = 0.2) -> np.ndarray:
    """Explicit first-order upwind solution of f_t + v.grad f = -f + gain, specular ghosts at the wall."""
    dom = grid.domain
    hx = grid.xs[1] - grid.xs[0]
    hy = grid.ys[1] - grid.ys[0]
    vmax = grid.speeds.max()
    dt0 = cfl * min(hx, hy) / vmax
    steps = max(1, math.ceil(t_final / dt0))
    dt = t_final / steps
    wts = grid.gain_weights()
    nd = grid.n_dir
    f = np.zeros(grid.shape)
    for (i, j) in grid.nodes:
        for l in range(nd):
            for k in range(grid.n_speed):
                f[i, j, l, k] = f0(grid.point((i, j)), grid.velocity(l, k))

    # reflected direction index (fractional) for each outside-neighbour situation
    from .geometry import project_to_curve

    def reflected_angle(node, l):
        p = grid.point(node)
        best = None
        for c in dom.curves:
            tau, dist = project_to_curve(c, p)
            if best is None or dist < best[1]:
                best = (c.normal(tau), dist)
        u = np.array([math.cos(grid.angles[l]), math.sin(grid.angles[l])])
        r = reflect(u, best[0])
        return (math.atan2(r[1], r[0]) % (2 * math.pi)) / (2 * math.pi / nd)

    ghost = {}
    for node in grid.nodes:
        for l in range(nd):
            ghost[(node, l)] = reflected_angle(node, l)

    def angle_interp(vals_l, frac):
        lo = int(math.floor(frac)) % nd
        a = frac - math.floor(frac)
        return (1 - a) * vals_l[lo] + a * vals_l[(lo + 1) % nd]

    for _ in range(steps):
        new = f.copy()
        gain = np.einsum("ijlk,k->ij", f, wts)
        for (i, j) in grid.nodes:
            for l in range(nd):
                for k in range(grid.n_speed):
                    v = grid.velocity(l, k)
                    fc = f[i, j, l, k]

                    def up(di, dj):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < grid.nx and 0 <= jj < grid.ny and grid.inside[ii, jj]:
                            return f[ii, jj, l, k]
                        return angle_interp(f[i, j, :, k], ghost[((i, j), l)])

                    dx = (fc - up(-1, 0)) / hx if v[0] > 0 else (up(1, 0) - fc) / hx
                    dy = (fc - up(0, -1)) / hy if v[1] > 0 else (up(0, 1) - fc) / hy
                    new[i, j, l, k] = fc - dt * (v[0] * dx + v[1] * dy) - dt * fc + dt * gain[i, j]
        f = new
    return f


def near_maxwellian(eps: float, scale: float = 1.0) -> Callable:
    """mu(v) (1 + eps (x1 / scale + v2 / |v|)): a small perturbation of the Maxwellian."""

    def f0(x, v):
        sp = math.hypot(v[0], v[1])
        return math.exp(-0.5 * sp * sp) * (1.0 + eps * (x[0] / scale + v[1] / sp))

    return f0


def oracle_mismatch(grid: KineticGrid, f: np.ndarray, oracle: np.ndarray) -> float:
    """sup |f - oracle| / sup |oracle| over inside nodes."""
    m = grid.inside
    return float(np.max(np.abs(f - oracle)[m]) / np.max(np.abs(oracle)[m]))
