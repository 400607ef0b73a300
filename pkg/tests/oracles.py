"""Independent re-simulations used as test oracles.

Boundaries are written as implicit functions F(x) = 0 (F < 0 inside the
outer curve), not as the library's Fourier parametrizations, and ray hits are
found by quadratics or by bracketing along the ray.
"""

import math

import numpy as np
from scipy.optimize import brentq


class Conic:
    """Ellipse (x - c)^2 / a^2 + (y - c)^2 / b^2 = 1; hole=True flips the inside."""

    def __init__(self, a, b, center=(0.0, 0.0), hole=False):
        self.a, self.b = a, b
        self.c = np.asarray(center, float)
        self.hole = hole

    def hits(self, x, d):
        p = x - self.c
        A = d[0] ** 2 / self.a**2 + d[1] ** 2 / self.b**2
        B = 2 * (p[0] * d[0] / self.a**2 + p[1] * d[1] / self.b**2)
        C = p[0] ** 2 / self.a**2 + p[1] ** 2 / self.b**2 - 1
        disc = B * B - 4 * A * C
        if disc < 0:
            return []
        r = math.sqrt(disc)
        q = -0.5 * (B + math.copysign(r, B))
        roots = [q / A, C / q] if q != 0 else [-B / (2 * A)]
        return sorted(roots)

    def normal(self, p):
        q = p - self.c
        g = np.array([q[0] / self.a**2, q[1] / self.b**2])
        g /= np.linalg.norm(g)
        return -g if self.hole else g


class PolarCos3:
    """r(theta) = 1 + eps cos(3 theta) as F = |x| - r(atan2(x))."""

    def __init__(self, eps=0.3, step=2e-4):
        self.eps, self.step = eps, step

    def F(self, p):
        p = np.atleast_2d(p)
        th = np.arctan2(p[:, 1], p[:, 0])
        return np.hypot(p[:, 0], p[:, 1]) - 1 - self.eps * np.cos(3 * th)

    def hits(self, x, d):
        sp = float(np.linalg.norm(d))
        smax = 2.7 / sp
        s = np.arange(0.0, smax, self.step / sp)
        vals = self.F(x + np.outer(s, d))
        idx = np.nonzero((vals[:-1] < 0) & (vals[1:] >= 0))[0]
        f = lambda t: float(self.F(x + t * d)[0])  # noqa: E731
        return [brentq(f, s[i], s[i + 1], xtol=1e-15, rtol=1e-15) for i in idx]

    def normal(self, p):
        h = 1e-7
        g = np.array(
            [
                (self.F(p + [h, 0]) - self.F(p - [h, 0]))[0],
                (self.F(p + [0, h]) - self.F(p - [0, h]))[0],
            ]
        )
        return g / np.linalg.norm(g)


def bounce_count_oracle(walls, x, v, L, s_floor=1e-9, cap=100000):
    """Smallest k whose summed chord lengths exceed L, tracing backward in time."""
    x = np.asarray(x, float)
    d = -np.asarray(v, float)
    total = 0.0
    for k in range(1, cap + 1):
        best, wall = math.inf, None
        for w in walls:
            for s in w.hits(x, d):
                if s > s_floor and s < best:
                    best, wall = s, w
        if wall is None:
            raise RuntimeError("ray left the domain")
        p = x + best * d
        total += best * float(np.linalg.norm(d))
        if total > L:
            return k
        n = wall.normal(p)
        d = d - 2 * float(n @ d) * n
        x = p
    raise RuntimeError("cap reached")


def scene_walls(name):
    if name == "disk":
        return [Conic(1.0, 1.0)]
    if name == "annulus":
        return [Conic(1.0, 1.0), Conic(0.3, 0.3, hole=True)]
    if name == "ellipse":
        return [Conic(2.0, 1.0)]
    if name == "polar":
        return [PolarCos3(0.3)]
    raise KeyError(name)
