"""Command-line front end: scene files, subcommands, CSV/SVG output and run manifests."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import (
    AnalyticCurve,
    Domain,
    GeometryError,
    annulus,
    circle,
    decompose_boundary,
    ellipse,
    graph_arc,
    polar_cos3,
    sandbox,
)
from .trajectory import PhasePoint, TraceOptions, bounce_count, cycle_rows, trace_cycles

EXIT_OK, EXIT_ERROR, EXIT_CHECK = 0, 1, 2


class ParseError(ValueError):
    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {msg}")
        self.line = line
        self.column = column


class ValidationError(ValueError):
    pass


# -- scene files -------------------------------------------------------------------

SECTIONS = {
    "domain": {
        "type", "radius", "r_out", "r_in", "amplitude", "a", "b", "center", "a0", "H",
        "orientation", "arcs", "ranges",
    },
    "trace": {
        "direction", "x", "v", "t", "horizon_time", "horizon_length", "eps_grazing",
        "bounce_cap", "speed_band", "seed",
    },
    "tolerances": {"rtol", "sticky_tol", "delta2", "N", "psi_halfwidth", "eps_floor", "rho_floor"},
}
FOURIER_KEY = re.compile(r"^(cos|sin)(\d+)$")
NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"


def _parse_value(text: str, line: int, col: int):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ParseError("unterminated vector", line, col)
        inner = text[1:-1].strip()
        if inner.startswith("["):
            # list of vectors: [[..], [..]]
            parts = re.findall(r"\[[^\[\]]*\]", inner)
            if "".join(parts).replace(" ", "") == "" or re.sub(r"\[[^\[\]]*\]|[\s,]", "", inner):
                raise ParseError("malformed nested vector", line, col)
            return [_parse_value(p, line, col) for p in parts]
        if not inner:
            return []
        out = []
        for item in inner.split(","):
            item = item.strip()
            if not re.fullmatch(NUMBER, item):
                raise ParseError(f"not a decimal: {item!r}", line, col + text.find(item))
            out.append(float(item))
        return out
    if re.fullmatch(NUMBER, text):
        return float(text)
    if re.fullmatch(r"[A-Za-z_][\w\-]*", text):
        return text
    raise ParseError(f"cannot read value {text!r}", line, col)


@dataclass
class SceneConfig:
    domain: Domain
    values: dict
    text: str = ""
    path: str = ""

    def section(self, name: str) -> dict:
        return self.values.get(name, {})

    @property
    def seed(self) -> int:
        return int(self.section("trace").get("seed", 0))

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def trace_options(self, **over) -> TraceOptions:
        tr = self.section("trace")
        kw = {}
        for key in ("direction", "horizon_time", "horizon_length", "eps_grazing"):
            if key in tr:
                kw[key] = tr[key]
        if "bounce_cap" in tr:
            kw["bounce_cap"] = int(tr["bounce_cap"])
        if "speed_band" in tr:
            kw["speed_band"] = tuple(tr["speed_band"])
        kw.update({k: v for k, v in over.items() if v is not None})
        return TraceOptions(**kw)

    def phase(self) -> PhasePoint:
        tr = self.section("trace")
        if "x" not in tr or "v" not in tr:
            raise ValidationError("[trace] needs x and v for this command")
        return PhasePoint(np.array(tr["x"]), np.array(tr["v"]), float(tr.get("t", 0.0)))


def parse_scene_text(text: str, path: str = "<scene>") -> SceneConfig:
    values: dict[str, dict] = {}
    current = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        if not body.strip():
            continue
        col = len(body) - len(body.lstrip()) + 1
        stripped = body.strip()
        if stripped.startswith("["):
            m = re.fullmatch(r"\[(\w+)\]", stripped)
            if not m:
                raise ParseError("malformed section header", ln, col)
            current = m.group(1)
            if current not in SECTIONS:
                raise ParseError(f"unknown section [{current}]", ln, col + 1)
            values.setdefault(current, {})
            continue
        if current is None:
            raise ParseError("key outside of any section", ln, col)
        if "=" not in stripped:
            raise ParseError("expected key = value", ln, col)
        key, val = stripped.split("=", 1)
        key = key.strip()
        allowed = SECTIONS[current]
        if key not in allowed and not (current == "domain" and FOURIER_KEY.match(key)):
            raise ParseError(f"unknown key {key!r} in [{current}]", ln, col)
        eq = body.index("=")
        vcol = eq + 2 + len(val) - len(val.lstrip())
        values[current][key] = _parse_value(val, ln, vcol)
    if "domain" not in values:
        raise ParseError("missing [domain] section", 1, 1)
    return SceneConfig(build_domain(values["domain"]), values, text, path)


def parse_scene(path) -> SceneConfig:
    p = Path(path)
    return parse_scene_text(p.read_text(), str(p))


def _fourier_curve(d: dict) -> AnalyticCurve:
    harm = sorted({int(FOURIER_KEY.match(k).group(2)) for k in d if FOURIER_KEY.match(k)})
    if not harm or harm != list(range(1, len(harm) + 1)):
        raise ValidationError("fourier coefficients must be given as cos1, sin1, ... without gaps")
    cos, sin = [], []
    for m in harm:
        c, s = d.get(f"cos{m}", [0.0, 0.0]), d.get(f"sin{m}", [0.0, 0.0])
        if len(c) != 2 or len(s) != 2:
            raise ValidationError(f"harmonic {m} needs two-component coefficients")
        cos.append(c)
        sin.append(s)
    return AnalyticCurve(np.array(d.get("a0", [0.0, 0.0])), np.array(cos), np.array(sin), d.get("orientation", "ccw"))


def build_domain(d: dict) -> Domain:
    kind = d.get("type")
    H = float(d.get("H", 1.0))
    try:
        if kind == "disk":
            return Domain(circle(float(d.get("radius", 1.0)), tuple(d.get("center", (0.0, 0.0)))), axial_period=H)
        if kind == "annulus":
            ro, ri = float(d.get("r_out", 1.0)), float(d.get("r_in", 0.3))
            if not 0 < ri < ro:
                raise ValidationError(f"annulus needs 0 < r_in < r_out (got r_in={ri}, r_out={ro})")
            return annulus(ro, ri, H)
        if kind == "polar-cos3":
            return Domain(polar_cos3(float(d.get("amplitude", 0.3))), axial_period=H)
        if kind == "ellipse":
            return Domain(ellipse(float(d.get("a", 2.0)), float(d.get("b", 1.0))), axial_period=H)
        if kind == "fourier":
            return Domain(_fourier_curve(d), axial_period=H)
        if kind == "sandbox":
            arcs, ranges = d.get("arcs"), d.get("ranges")
            if not arcs or ranges is None or len(arcs) != len(ranges):
                raise ValidationError("sandbox needs arcs and ranges of equal length")
            return sandbox(*(graph_arc(c, r[0], r[1]) for c, r in zip(arcs, ranges)), H=H)
    except GeometryError as exc:
        raise ValidationError(str(exc)) from exc
    raise ValidationError(f"unknown domain type {kind!r}")


# -- output ----------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, rows, columns=None) -> Path:
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])
    return path


CLASS_COLORS = {
    "NonGrazing": "#1f77b4",
    "Concave": "#d62728",
    "Convex": "#2ca02c",
    "InflectionOutward": "#ff7f0e",
    "InflectionInward": "#9467bd",
}


def write_svg(path: Path, domain: Domain, cycles=(), points=(), size: int = 1024) -> Path:
    lo, hi = domain.bounding_box
    pts_all = [np.asarray(p) for c in cycles for p in c.points()] + [np.asarray(p) for p in points]
    if pts_all:
        P = np.array(pts_all)
        lo, hi = np.minimum(lo, P.min(0)), np.maximum(hi, P.max(0))
    span = float(max(hi - lo)) or 1.0
    pad = 0.05 * span
    scale = size / (span + 2 * pad)

    def xy(p):
        return (p[0] - lo[0] + pad) * scale, size - (p[1] - lo[1] + pad) * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}" width="{size}" height="{size}">']
    for c in domain.curves:
        poly = c.polyline[1]
        d = " ".join(f"{x:.3f},{y:.3f}" for x, y in map(xy, poly))
        tag = "polygon" if c.closed else "polyline"
        out.append(f'<{tag} points="{d}" fill="none" stroke="black" stroke-width="2"/>')
    for cyc in cycles:
        pts = cyc.points()
        d = " ".join(f"{x:.3f},{y:.3f}" for x, y in map(xy, pts))
        out.append(f'<polyline points="{d}" fill="none" stroke="#888" stroke-width="1"/>')
        for e in cyc.events:
            x, y = xy(e.position)
            col = CLASS_COLORS.get(e.grazing_class.value, "#000")
            out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="3" fill="{col}"/>')
    for p in points:
        x, y = xy(p)
        out.append(f'<circle cx="{x:.3f}" cy="{y:.3f}" r="6" fill="none" stroke="#e377c2" stroke-width="2"/>')
    out.append("</svg>")
    Path(path).write_text("\n".join(out) + "\n")
    return Path(path)


@dataclass
class Run:
    command: str
    out: Path
    options: dict
    scene: SceneConfig | None
    outputs: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.perf_counter)

    def csv(self, name: str, rows, columns=None) -> Path:
        p = write_csv(self.out / name, rows, columns)
        self.outputs.append(name)
        return p

    def svg(self, name: str, *args, **kw) -> Path:
        p = write_svg(self.out / name, *args, **kw)
        self.outputs.append(name)
        return p

    def manifest(self, status: int) -> dict:
        m = {
            "command": self.command,
            "scene_hash": self.scene.digest if self.scene else None,
            "options": self.options,
            "version": __version__,
            "status": status,
            "wall_time": time.perf_counter() - self.started,
            "outputs": self.outputs,
        }
        (self.out / "manifest.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        return m


# -- subcommands ------------------------------------------------------------------------


def _need_scene(run: Run) -> SceneConfig:
    if run.scene is None:
        raise ValidationError(f"{run.command} needs --scene")
    return run.scene


def _opts(run: Run, **extra) -> TraceOptions:
    a = run.options
    kw = {k: a.get(k) for k in ("horizon_time", "horizon_length", "eps_grazing", "bounce_cap")}
    kw.update(extra)
    opts = _need_scene(run).trace_options(**kw)
    # explicit None in extra clears a horizon the scene may set
    clear = {k: None for k, v in extra.items() if v is None}
    return replace(opts, **clear) if clear else opts


def cmd_classify(run: Run) -> int:
    sc = _need_scene(run)
    dec = decompose_boundary(sc.domain)
    rows = []
    for cid, cd in enumerate(dec.curves):
        for a, b in cd.concave:
            rows.append({"curve_id": cid, "kind": "concave", "tau_start": a, "tau_end": b, "tag": ""})
        for a, b in cd.convex:
            rows.append({"curve_id": cid, "kind": "convex", "tau_start": a, "tau_end": b, "tag": ""})
        for t, tag in cd.inflections:
            rows.append({"curve_id": cid, "kind": "inflection", "tau_start": t, "tau_end": t, "tag": tag})
    run.csv("classify.csv", rows, ["curve_id", "kind", "tau_start", "tau_end", "tag"])
    return EXIT_OK


def cmd_trace(run: Run) -> int:
    sc = _need_scene(run)
    opts = _opts(run)
    if opts.horizon_time is None and opts.horizon_length is None and "bounce_cap" not in sc.section("trace") and run.options.get("bounce_cap") is None:
        opts = _opts(run, bounce_cap=100)
    cyc = trace_cycles(sc.domain, sc.phase(), opts)
    cols = ["k", "t", "x1", "x2", "x3", "v1", "v2", "v3", "incidence", "class", "curve_id", "tau"]
    run.csv("trace.csv", cycle_rows(cyc, sc.domain.axial_period), cols)
    run.csv("trace_summary.csv", [{"termination": cyc.termination.value, "bounces": len(cyc.events), "length": cyc.total_length}])
    if run.options.get("svg"):
        run.svg("trace.svg", sc.domain, [cyc])
    return EXIT_OK


def _grid(run: Run, default=(8, 8)) -> tuple[int, int]:
    g = run.options.get("grid")
    if not g:
        return default
    m = re.fullmatch(r"(\d+)x(\d+)", g)
    if not m:
        raise ValidationError(f"--grid must look like NxM, got {g!r}")
    return int(m.group(1)), int(m.group(2))


def cmd_count(run: Run) -> int:
    sc = _need_scene(run)
    L = run.options.get("horizon_length") or sc.section("trace").get("horizon_length", 10.0)
    n, m = _grid(run)
    dom = sc.domain
    lo, hi = dom.bounding_box
    xs = np.linspace(lo[0], hi[0], n + 2)[1:-1]
    ys = np.linspace(lo[1], hi[1], n + 2)[1:-1]
    opts = _opts(run, horizon_length=None)
    jobs = []
    for x in xs:
        for y in ys:
            p = np.array([x, y])
            if dom.sandbox or not dom.contains(p, closed=False):
                continue
            for j in range(m):
                th = 2 * math.pi * j / m
                jobs.append((p, np.array([math.cos(th), math.sin(th)])))

    def one(job):
        p, v = job
        try:
            return bounce_count(dom, PhasePoint(p, v), L, opts), ""
        except Exception as exc:  # reported per row
            return -1, type(exc).__name__

    from .kinetic import _map

    res = _map(one, jobs, run.options["threads"])
    rows = [
        {"x1": p[0], "x3": p[1], "v1": v[0], "v3": v[1], "L": L, "count": c, "error": e}
        for (p, v), (c, e) in zip(jobs, res)
    ]
    run.csv("count.csv", rows, ["x1", "x3", "v1", "v3", "L", "count", "error"])
    return EXIT_OK


def cmd_sticky(run: Run) -> int:
    from .grazing import Verdict, build_sticky_example, detect_sticky, sticky_family

    a = run.options
    ex = build_sticky_example(a.get("delta_max", 0.05), a.get("samples", 200), a.get("x0"))
    if a["action"] == "build":
        rows = [
            {"delta": d, "X": x, "Y": y, "slope": s, "slope_derivative": sp}
            for d, x, y, s, sp in zip(ex.delta, ex.X, ex.Y, ex.slope, ex.slope_derivative)
        ]
        run.csv("sticky_arc.csv", rows, ["delta", "X", "Y", "slope", "slope_derivative"])
        return EXIT_OK
    fam = sticky_family(ex)
    rep = detect_sticky(fam, 1)
    run.csv("sticky_report.csv", [rep.row()], ["k", "x1", "x3", "residual", "verdict", "condition"])
    if a.get("svg"):
        run.svg("sticky.svg", ex.domain, fam.cycles, [rep.point])
    return EXIT_OK if rep.verdict is Verdict.STICKY else EXIT_CHECK


def cmd_atlas(run: Run) -> int:
    from .grazing import inflection_ray_atlas

    sc = _need_scene(run)
    L = run.options.get("horizon_length") or 10.0
    atlas = inflection_ray_atlas(sc.domain, decompose_boundary(sc.domain), length_horizon=L)
    cols = ["segment", "launch", "x1_start", "x3_start", "x1_end", "x3_end", "v1", "v3"]
    run.csv("atlas.csv", atlas.rows(), cols)
    return EXIT_OK


def _corpus(run: Run):
    from .jacobians import CorpusEntry, jacobian_corpus

    sc = run.scene
    size = run.options.get("count") or 100
    corpus = jacobian_corpus(size, seed=run.options["seed"] or 20240611)
    if sc is None:
        return corpus
    # same sampling, restricted to the scene's own domain
    from .jacobians import _random_interior

    rng = np.random.default_rng(run.options["seed"] or 20240611)
    out = []
    dom = sc.domain
    while len(out) < size:
        x = _random_interior(dom, rng)
        ang = rng.uniform(0, 2 * math.pi)
        sp = rng.uniform(0.5, 2.0)
        v = sp * np.array([math.cos(ang), math.sin(ang)])
        try:
            cyc = trace_cycles(dom, PhasePoint(x, v), TraceOptions(bounce_cap=6))
        except Exception:
            continue
        ev = cyc.events
        if len(ev) < 3 or any(e.grazing_class.value != "NonGrazing" or e.incidence <= 0.05 * sp for e in ev[:3]):
            continue
        k = int(rng.integers(1, 3))
        prev = cyc.origin.xs if k == 1 else ev[k - 2].position
        vel = cyc.origin.vs if k == 1 else ev[k - 2].post[[0, 2]]
        tprev = cyc.origin.t if k == 1 else ev[k - 2].time
        mid_t = 0.5 * (tprev + ev[k - 1].time)
        out.append(CorpusEntry("scene", dom, cyc, k, PhasePoint(prev - (tprev - mid_t) * vel, vel, mid_t)))
    return out


def cmd_jacobian(run: Run) -> int:
    from .jacobians import RTOL, bounce_jacobian, chain_determinant, first_bounce_jacobian_global

    action = run.options["action"]
    corpus = _corpus(run)
    ok = True
    if action == "check":
        rows = []
        for i, e in enumerate(corpus):
            for rep, tag in ((bounce_jacobian(e.domain, e.cycle, e.k), "bounce"), (first_bounce_jacobian_global(e.domain, e.phase), "first")):
                ok &= rep.passed(RTOL)
                for r in rep.rows():
                    rows.append({"entry": i, "scene": e.scene, "block": tag, **r})
        run.csv("jacobian_check.csv", rows, ["entry", "scene", "block", "k", "name", "analytic", "fd", "residual"])
    elif action == "det":
        rows = []
        for i, e in enumerate(corpus):
            rep = bounce_jacobian(e.domain, e.cycle, e.k)
            a, f, d = abs(rep.det_analytic), rep.det_formula, abs(rep.det_fd)
            good = abs(a - f) < 1e-8 and abs(a - d) < 1e-6
            ok &= good
            rows.append({"entry": i, "scene": e.scene, "k": e.k, "analytic": a, "formula": f, "fd": d, "pass": good})
        run.csv("jacobian_det.csv", rows, ["entry", "scene", "k", "analytic", "formula", "fd", "pass"])
    else:
        rows = []
        k = run.options.get("bounce_cap") or 4
        for i, e in enumerate(corpus):
            cyc = trace_cycles(e.domain, e.cycle.origin, TraceOptions(bounce_cap=k))
            if len(cyc.events) < k or any(ev.grazing_class.value != "NonGrazing" for ev in cyc.events):
                continue
            try:
                c = chain_determinant(e.domain, cyc, k)
            except Exception as exc:
                rows.append({"entry": i, "scene": e.scene, "k": k, "error": type(exc).__name__})
                continue
            good = abs(c.analytic - c.fd) < 1e-6 and abs(c.analytic - c.stated_closed_form) < 1e-10
            ok &= good
            rows.append({
                "entry": i, "scene": e.scene, "k": k, "analytic": c.analytic, "fd": c.fd,
                "closed_form": c.stated_closed_form, "corrected_closed_form": c.corrected_closed_form,
                "pass": good, "error": "",
            })
        cols = ["entry", "scene", "k", "analytic", "fd", "closed_form", "corrected_closed_form", "pass", "error"]
        run.csv("jacobian_chain.csv", rows, cols)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_cov(run: Run) -> int:
    from .jacobians import Exclusions, cov_sweep

    sc = _need_scene(run)
    tol = sc.section("tolerances")
    ex = Exclusions(
        N=tol.get("N", 10.0),
        delta2=tol.get("delta2", 1e-2),
        psi_halfwidth=tol.get("psi_halfwidth", 0.05),
        eps_floor=tol.get("eps_floor", 1e-8),
    )
    ph = sc.phase()
    rng = np.random.default_rng(run.options["seed"])
    n_u = run.options.get("count") or 8
    us = []
    while len(us) < n_u:
        u = rng.uniform(-1, 1, 3)
        if u[2] >= 2.0 / ex.N and 1.0 / ex.N <= math.hypot(u[0], u[2]):
            us.append(u)
    s = float(sc.section("trace").get("t", 0.0)) - 0.4
    res = cov_sweep(sc.domain, ph.t, ph.x, ph.v, s, us, exclusions=ex)
    ok = True
    rows = []
    for r in res:
        c = r.result
        if c is None:
            rows.append({"u1": r.u[0], "u2": r.u[1], "u3": r.u[2], "s_prime": r.s_prime, "at_psi": r.at_psi, "error": r.error})
            continue
        admissible = not c.violations
        flag = c.passed(ex.eps_floor)
        if admissible and not r.at_psi:
            ok &= c.relative_error < 1e-5 and flag
        if r.at_psi:
            ok &= not flag
        rows.append({
            "u1": r.u[0], "u2": r.u[1], "u3": r.u[2], "s_prime": r.s_prime, "k": c.k, "at_psi": r.at_psi,
            "det_fd": c.det_fd, "det_analytic": c.det_analytic, "relative_error": c.relative_error,
            "violations": ";".join(c.violations), "pass": flag, "error": "",
        })
    cols = ["u1", "u2", "u3", "s_prime", "k", "at_psi", "det_fd", "det_analytic", "relative_error", "violations", "pass", "error"]
    run.csv("cov_check.csv", rows, cols)
    return EXIT_OK if ok else EXIT_CHECK


def cmd_kinetic(run: Run) -> int:
    from . import kinetic as kin

    sc = _need_scene(run)
    dom = sc.domain
    a = run.options
    action = a["action"]
    if action == "conserve":
        n = a.get("count") or 1000
        bounces = a.get("bounce_cap") or 1000
        ens = kin.maxwellian_ensemble(dom, n, a["seed"])
        end, rep = kin.transport_ensemble(dom, ens, bounces=bounces, threads=a["threads"])
        run.csv("conservation.csv", rep.rows(), ["quantity", "initial", "final", "relative_drift"])
        run.csv("ensemble.csv", end.rows(), ["x1", "x2", "x3", "v1", "v2", "v3", "w"])
        good = rep.drifts["mass"] == 0 and rep.drifts["energy"] < 1e-12
        if rep.angular is not None:
            good &= rep.drifts["angular"] < 1e-9
        return EXIT_OK if good else EXIT_CHECK
    n, m = _grid(run)
    grid = kin.KineticGrid(dom, n, n, m, 2, (1.5, 1.51), 1.0, 1.51)
    T = a.get("horizon_time") or 0.3
    if action == "decay":
        curve = kin.relaxation_decay(grid, lambda x, v: 1.0, np.linspace(0, T, 6), a["threads"])
        run.csv("decay.csv", curve.rows(), ["t", "sup"])
        good = all(abs(s - math.exp(-grid.nu0 * t)) <= 1e-12 for t, s in zip(curve.times, curve.sup))
        return EXIT_OK if good else EXIT_CHECK
    f0 = kin.near_maxwellian(0.005, float(np.max(np.abs(dom.bounding_box))))
    res = kin.duhamel_gain_iteration(grid, f0, T, 4, threads=a["threads"])
    oracle = kin.upwind_oracle(grid, f0, T)
    err = kin.oracle_mismatch(grid, res.iterates[1][-1], oracle)
    run.csv("duhamel.csv", res.rows(), ["iteration", "residual"])
    run.csv("duhamel_oracle.csv", [{"iterate": 2, "relative_error": err}], ["iterate", "relative_error"])
    return EXIT_OK if err <= 1e-2 else EXIT_CHECK


COMMANDS = {
    "classify": cmd_classify,
    "trace": cmd_trace,
    "count": cmd_count,
    "sticky": cmd_sticky,
    "atlas": cmd_atlas,
    "jacobian": cmd_jacobian,
    "cov-check": cmd_cov,
    "kinetic": cmd_kinetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scene", type=Path)
    common.add_argument("--out", type=Path, default=Path("out"))
    common.add_argument("--seed", type=int)
    hz = common.add_mutually_exclusive_group()
    hz.add_argument("--horizon-time", type=float)
    hz.add_argument("--horizon-length", type=float)
    common.add_argument("--eps-grazing", type=float)
    common.add_argument("--bounce-cap", type=int)
    common.add_argument("--grid")
    common.add_argument("--threads", type=int)
    common.add_argument("--count", type=int, help="corpus, sample or ensemble size")
    common.add_argument("--svg", action="store_true")

    p = argparse.ArgumentParser(prog="billiards", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("classify", "trace", "count", "atlas", "cov-check"):
        sub.add_parser(name, parents=[common])
    st = sub.add_parser("sticky", parents=[common])
    st.add_argument("action", choices=["build", "detect"])
    st.add_argument("--x0", type=float)
    st.add_argument("--delta-max", type=float, default=0.05)
    st.add_argument("--samples", type=int, default=200)
    jc = sub.add_parser("jacobian", parents=[common])
    jc.add_argument("action", choices=["check", "det", "chain"])
    kn = sub.add_parser("kinetic", parents=[common])
    kn.add_argument("action", choices=["conserve", "decay", "duhamel"])
    return p


def _threads(arg) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("BILLIARD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"BILLIARD_THREADS must be an integer, got {env!r}") from None
    return 1


def _error_code(exc: BaseException) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", type(exc).__name__).upper()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()}
    try:
        opts["threads"] = _threads(args.threads)
        scene = parse_scene(args.scene) if args.scene else None
        if opts["seed"] is None:
            opts["seed"] = scene.seed if scene else 0
        args.out.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, args.out, opts, scene)
        status = COMMANDS[args.command](run)
        run.manifest(status)
        return status
    except Exception as exc:
        print(f"error[{_error_code(exc)}]: {exc}", file=sys.stderr)
        return EXIT_ERROR
