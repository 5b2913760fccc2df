"""Numerical integration on full cells, cut cells and boundary segments.

Full cells carry tensor Gauss-Legendre rules. Cut cells are integrated by
fanning the material region from its centroid into slices with one (possibly
curved) outer side; the curved sides interpolate the trimming curve with a
degree-q polynomial, so slice integrals are exact for the interpolated
geometry and the only error is the interpolation error of the curve, which
is driven below ``split_tol`` by bisecting curve sections. Cells whose
topology the fan cannot resolve (several curve pieces, folded slices,
enclosed loops) are integrated by recursive 2x2 subdivision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .trimming import CellClass, CellInfo, TrimmedDomain, TrimmingError


@dataclass
class CellQuadrature:
    """Parametric rule on the material part of one cell."""

    points: np.ndarray            # (n, 2)
    weights: np.ndarray           # (n,), strictly positive
    tag: str                      # 'full' or 'cut'
    subcells: list = field(default_factory=list)  # triangles for export
    q: int | None = None          # tensor order of a full rule

    @property
    def total(self) -> float:
        return float(self.weights.sum())


@dataclass
class BoundarySegmentQuadrature:
    """Rule along a piece of the material boundary (parametric metric)."""

    points: np.ndarray            # (n, 2)
    weights: np.ndarray           # (n,) parametric arc-length weights
    tangents: np.ndarray          # (n, 2) unit parametric tangents
    normals: np.ndarray           # (n, 2) unit outward parametric normals
    on_trim_curve: bool = False

    @property
    def total(self) -> float:
        return float(self.weights.sum())


_GAUSS_CACHE: dict = {}


def gauss_rule(q: int):
    """Gauss-Legendre nodes/weights on [0, 1]."""
    if q < 1:
        raise ValueError("need at least one quadrature point")
    if q not in _GAUSS_CACHE:
        x, w = np.polynomial.legendre.leggauss(q)
        _GAUSS_CACHE[q] = (0.5 * (x + 1.0), 0.5 * w)
    return _GAUSS_CACHE[q]


def full_cell_rule(rect, q: int) -> CellQuadrature:
    """Tensor Gauss rule on a parametric rectangle, exact to degree 2q-1."""
    x0, x1, y0, y1 = rect
    gx, gw = gauss_rule(q)
    xs = x0 + gx * (x1 - x0)
    ys = y0 + gx * (y1 - y0)
    X, Y = np.meshgrid(xs, ys)
    W = np.outer(gw, gw) * (x1 - x0) * (y1 - y0)
    return CellQuadrature(
        points=np.column_stack([X.ravel(), Y.ravel()]),
        weights=W.ravel(),
        tag="full",
        q=q,
    )


def _section_monotone_split(curve, t0: float, t1: float, axis: int):
    """Split a curve section at interior extrema of one coordinate."""
    ts = np.linspace(t0, t1, 33)
    dx = curve.ders(ts, 1)[1][:, axis]
    cuts = [t0]
    for i in range(len(ts) - 1):
        if dx[i] * dx[i + 1] < 0:
            a, b, fa = ts[i], ts[i + 1], dx[i]
            for _ in range(60):
                m = 0.5 * (a + b)
                fm = curve.ders([m], 1)[1][0, axis]
                if fa * fm <= 0:
                    b = m
                else:
                    a, fa = m, fm
            cuts.append(0.5 * (a + b))
    cuts.append(t1)
    return [(a, b) for a, b in zip(cuts[:-1], cuts[1:]) if b - a > 1e-13]


class _Bound:
    """One bound of a material strip: a cell edge or a curve section.

    ``coord_at`` returns the off-axis coordinate as a function of the sweep
    coordinate. Curve bounds invert the monotone sweep coordinate with a
    cached lookup table followed by Newton polishing.
    """

    _TABLE = 257

    def __init__(self, kind, data, axis: int):
        self.kind = kind  # 'const' or 'curve'
        self.data = data
        self.axis = axis
        if kind == "curve":
            curve, ta, tb = data
            ts = np.linspace(ta, tb, self._TABLE)
            pts = curve.point(ts)
            sweep = pts[:, axis]
            if sweep[-1] < sweep[0]:
                ts, sweep = ts[::-1], sweep[::-1]
            self._ts = ts
            self._sweep = sweep

    def coord_at(self, xs):
        xs = np.asarray(xs, float)
        if self.kind == "const":
            return np.full(len(xs), self.data)
        curve, ta, tb = self.data
        a = self.axis
        idx = np.clip(np.searchsorted(self._sweep, xs) - 1, 0, self._TABLE - 2)
        t0, t1 = self._ts[idx], self._ts[idx + 1]
        s0, s1 = self._sweep[idx], self._sweep[idx + 1]
        frac = np.where(np.abs(s1 - s0) > 1e-300, (xs - s0) / (s1 - s0), 0.5)
        t = t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0)
        lo, hi = (min(ta, tb), max(ta, tb))
        for _ in range(4):
            pos, der = curve.ders(t, 1)[:2]
            slope = der[:, a]
            step = np.where(np.abs(slope) > 1e-300, (pos[:, a] - xs) / slope, 0.0)
            t = np.clip(t - step, lo, hi)
        return curve.point(t)[:, 1 - a]


def _cell_sections(td, rect, info):
    """In-cell boundary curve sections (loop idx, curve idx, t0, t1)."""
    sections = []
    if info.chains:
        for chain in info.chains:
            for piece in chain.pieces:
                if piece[0] == "curve":
                    sections.append(piece[1:])
    else:
        # enclosed loop(s): every curve whose samples lie inside the cell
        for li, loop in enumerate(td.loops):
            inside = all(
                np.all(c.samples()[1][:, 0] >= rect[0] - 1e-12)
                and np.all(c.samples()[1][:, 0] <= rect[1] + 1e-12)
                and np.all(c.samples()[1][:, 1] >= rect[2] - 1e-12)
                and np.all(c.samples()[1][:, 1] <= rect[3] + 1e-12)
                for c in loop.curves
            )
            if inside:
                for ci, c in enumerate(loop.curves):
                    sections.append((li, ci, c.domain[0], c.domain[1]))
    return sections


def cut_cell_rule(td: TrimmedDomain, rect, q: int, info: CellInfo | None = None,
                  max_subdiv: int = 4, adapt_depth: int = 16) -> CellQuadrature:
    """Material-region rule on a cut cell.

    The material is decomposed into sweep-direction graph strips
    {a <= s <= b, low(s) <= o <= up(s)} after splitting the trimming-curve
    pieces at their sweep-coordinate extrema; the bounds are evaluated
    exactly at the Gauss abscissae and strip columns are bisected until the
    Gauss area estimate converges (``adapt_depth`` levels). Cells whose curve
    pieces run tangential to both axes are resolved by 2x2 subdivision
    (``max_subdiv`` levels, then an error asking for mesh refinement).
    """
    if info is None:
        info = td.classify_rect(rect)
    pts, wts, quads = _cut_cell_recursive(td, rect, q, info, max_subdiv, adapt_depth)
    if len(pts) == 0:
        return CellQuadrature(np.zeros((0, 2)), np.zeros(0), "cut")
    return CellQuadrature(np.vstack(pts), np.concatenate(wts), "cut", subcells=quads)


def _cut_cell_recursive(td, rect, q, info, depth, adapt_depth):
    if info.cls is CellClass.INTERIOR:
        r = full_cell_rule(rect, q)
        return [r.points], [r.weights], []
    if info.cls is CellClass.EXTERIOR:
        return [], [], []
    try:
        return _strip_rule(td, rect, q, info, adapt_depth)
    except TrimmingError:
        if depth <= 0:
            raise
    x0, x1, y0, y1 = rect
    xm, ym = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    pts, wts, quads = [], [], []
    for sub in [(x0, xm, y0, ym), (xm, x1, y0, ym), (x0, xm, ym, y1), (xm, x1, ym, y1)]:
        sinfo = td.classify_rect(sub)
        p, w, t = _cut_cell_recursive(td, sub, q, sinfo, depth - 1, adapt_depth)
        pts += p
        wts += w
        quads += t
    return pts, wts, quads


def _sweep_axis(td, rect, sections) -> int:
    """Sweep coordinate whose direction the curve pieces never run along.

    Sweeping over axis a needs |tangent[a]| bounded away from zero; raises
    when both directions degenerate (the cell is then subdivided).
    """
    score = [1.0, 1.0]
    for li, ci, t0, t1 in sections:
        curve = td.loops[li].curves[ci]
        ts = np.linspace(t0, t1, 33)
        der = curve.ders(ts, 1)[1]
        mag = np.linalg.norm(der, axis=1)
        mag[mag == 0.0] = 1.0
        for a in range(2):
            score[a] = min(score[a], float(np.min(np.abs(der[:, a]) / mag)))
    axis = int(np.argmax(score))
    if score[axis] < 0.05:
        raise TrimmingError("curve pieces tangential to both axes")
    return axis


def _strip_rule(td, rect, q, info, adapt_depth=16):
    sections = _cell_sections(td, rect, info)
    if not sections:
        raise TrimmingError("cut cell without boundary sections")
    axis = _sweep_axis(td, rect, sections)
    o = 1 - axis
    s0, s1 = (rect[0], rect[1]) if axis == 0 else (rect[2], rect[3])
    v0, v1 = (rect[2], rect[3]) if axis == 0 else (rect[0], rect[1])
    monos = []
    breaks = {s0, s1}
    for li, ci, t0, t1 in sections:
        curve = td.loops[li].curves[ci]
        for a, b in _section_monotone_split(curve, t0, t1, axis):
            pa, pb = curve.point([a])[0], curve.point([b])[0]
            breaks.add(min(max(pa[axis], s0), s1))
            breaks.add(min(max(pb[axis], s0), s1))
            if abs(pb[axis] - pa[axis]) > 1e-12:
                monos.append((curve, a, b, min(pa[axis], pb[axis]),
                              max(pa[axis], pb[axis])))
    xs = sorted(breaks)
    merged = [xs[0]]
    for v in xs[1:]:
        if v - merged[-1] > 1e-12:
            merged.append(v)

    def make_point(svals, ovals):
        pt = np.empty((len(svals), 2))
        pt[:, axis] = svals
        pt[:, o] = ovals
        return pt

    gx, gw = gauss_rule(q)
    gv, gwv = gauss_rule(q)

    def strip_height(lo_b, up_b, sg):
        olo = np.clip(lo_b.coord_at(sg), v0, v1)
        oup = np.clip(up_b.coord_at(sg), v0, v1)
        return olo, np.maximum(oup - olo, 0.0)

    def emit(lo_b, up_b, a, b, out_pts, out_wts, depth):
        """Adaptive composite Gauss over [a, b] of the strip column."""
        sg = a + gx * (b - a)
        olo, h = strip_height(lo_b, up_b, sg)
        area = float(np.sum(gw * (b - a) * h))
        if depth > 0:
            m = 0.5 * (a + b)
            a2 = 0.0
            for aa, bb in ((a, m), (m, b)):
                sg2 = aa + gx * (bb - aa)
                _, h2 = strip_height(lo_b, up_b, sg2)
                a2 += float(np.sum(gw * (bb - aa) * h2))
            if abs(area - a2) > 1e-14 + 1e-13 * (b - a):
                emit(lo_b, up_b, a, m, out_pts, out_wts, depth - 1)
                emit(lo_b, up_b, m, b, out_pts, out_wts, depth - 1)
                return
        for v, wv in zip(gv, gwv):
            p = make_point(sg, olo + v * h)
            w = gw * wv * (b - a) * h
            mask = w > 0
            out_pts.append(p[mask])
            out_wts.append(w[mask])

    pts_all, wts_all, quads = [], [], []
    for a, b in zip(merged[:-1], merged[1:]):
        sm = 0.5 * (a + b)
        bounds = [_Bound("const", v0, axis), _Bound("const", v1, axis)]
        for curve, ta, tb, slo, shi in monos:
            if slo - 1e-12 <= a and b <= shi + 1e-12:
                bounds.append(_Bound("curve", (curve, ta, tb), axis))
        om = np.array([float(np.clip(bd.coord_at([sm])[0], v0, v1)) for bd in bounds])
        order = np.argsort(om, kind="stable")
        for k in range(len(order) - 1):
            lo_b, up_b = bounds[order[k]], bounds[order[k + 1]]
            olo_m, oup_m = om[order[k]], om[order[k + 1]]
            if oup_m - olo_m < 1e-13:
                continue
            mid = make_point([sm], [0.5 * (olo_m + oup_m)])[0]
            if not td.point_in_material(mid[0], mid[1]):
                continue
            emit(lo_b, up_b, a, b, pts_all, wts_all, depth=adapt_depth)
            ca = float(np.clip(lo_b.coord_at([a])[0], v0, v1))
            cb = float(np.clip(lo_b.coord_at([b])[0], v0, v1))
            da = float(np.clip(up_b.coord_at([a])[0], v0, v1))
            db = float(np.clip(up_b.coord_at([b])[0], v0, v1))
            quads.append(make_point([a, b, b, a], [ca, cb, db, da]))
    return pts_all, wts_all, quads


# ----------------------------------------------------------------------
# boundary rules

_EDGE_NORMALS = {0: (0.0, -1.0), 1: (1.0, 0.0), 2: (0.0, 1.0), 3: (-1.0, 0.0)}
_EDGE_TANGENTS = {0: (1.0, 0.0), 1: (0.0, 1.0), 2: (-1.0, 0.0), 3: (0.0, -1.0)}


def background_edge_rule(td: TrimmedDomain, edge: int, lo: float, hi: float,
                         q: int, fixed: float | None = None) -> BoundarySegmentQuadrature:
    """Rule on the material part of a background-edge interval.

    ``edge`` follows the cell convention (0 bottom, 1 right, 2 top, 3 left);
    the interval [lo, hi] runs along the edge coordinate, ``fixed`` is the
    other coordinate (defaults to the unit-square boundary). Results are
    cached on the domain.
    """
    cache = getattr(td, "_edge_rule_cache", None)
    if cache is None:
        cache = td._edge_rule_cache = {}
    key = (edge, round(lo, 13), round(hi, 13), q, fixed)
    hit = cache.get(key)
    if hit is not None:
        return hit
    rule = _background_edge_rule(td, edge, lo, hi, q, fixed)
    cache[key] = rule
    return rule


def _background_edge_rule(td, edge, lo, hi, q, fixed):
    axis = 0 if edge in (0, 2) else 1
    if fixed is None:
        fixed = {0: 0.0, 1: 1.0, 2: 1.0, 3: 0.0}[edge]
    cuts = [lo, hi]
    for loop in td.loops:
        for ci, curve in enumerate(loop.curves):
            for t, pt, _ in _edge_line_crossings(curve, 1 - axis, fixed, lo, hi):
                cuts.append(float(pt[axis]))
    cuts = sorted(set(round(float(c), 12) for c in np.clip(cuts, lo, hi)))
    gx, gw = gauss_rule(q)
    pts, wts = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a < 1e-13:
            continue
        mid = [0.0, 0.0]
        mid[axis] = 0.5 * (a + b)
        mid[1 - axis] = fixed + (1e-9 if fixed < 0.5 else -1e-9)
        if not td.point_in_material(mid[0], mid[1]):
            continue
        s = a + gx * (b - a)
        p = np.empty((q, 2))
        p[:, axis] = s
        p[:, 1 - axis] = fixed
        pts.append(p)
        wts.append(gw * (b - a))
    if not pts:
        z = np.zeros((0, 2))
        return BoundarySegmentQuadrature(z, np.zeros(0), z.copy(), z.copy())
    pts = np.vstack(pts)
    n = len(pts)
    tang = np.tile(_EDGE_TANGENTS[edge], (n, 1))
    norm = np.tile(_EDGE_NORMALS[edge], (n, 1))
    return BoundarySegmentQuadrature(pts, np.concatenate(wts), tang, norm)


def _edge_line_crossings(curve, fixed_axis, cval, blo, bhi):
    """Curve crossings of the line {coord[fixed_axis] = cval}.

    Only crossings whose running coordinate lies in [blo, bhi] are returned.
    """
    from .trimming import _bisect_root

    ts, pts = curve.samples()
    f = pts[:, fixed_axis] - cval
    cand = []
    for i in np.nonzero(f[:-1] * f[1:] < 0)[0]:
        cand.append(_bisect_root(curve, fixed_axis, cval, ts[i], ts[i + 1]))
    for i in np.nonzero(np.abs(f) < 1e-13)[0]:
        cand.append(float(ts[i]))
    hits = []
    for t in cand:
        pt = curve.point([t])[0]
        if blo - 1e-12 <= pt[1 - fixed_axis] <= bhi + 1e-12:
            hits.append((t, pt, None))
    return hits


def curve_section_rule(curve, t0: float, t1: float, q: int) -> BoundarySegmentQuadrature:
    """Composite Gauss rule along one curve section (parametric arc length).

    Normals point out of the material (tangent rotated by -90 degrees).
    """
    span = max(curve.domain[1] - curve.domain[0], 1e-300)
    nsub = max(1, int(np.ceil(8 * (t1 - t0) / span)))
    edges = np.linspace(t0, t1, nsub + 1)
    gx, gw = gauss_rule(q)
    pts, wts, tg = [], [], []
    for a, b in zip(edges[:-1], edges[1:]):
        ts = a + gx * (b - a)
        pos, der = curve.ders(ts, 1)[:2]
        speed = np.linalg.norm(der, axis=1)
        pts.append(pos)
        wts.append(gw * (b - a) * speed)
        tg.append(der / speed[:, None])
    pts = np.vstack(pts)
    tg = np.vstack(tg)
    normals = np.column_stack([tg[:, 1], -tg[:, 0]])
    return BoundarySegmentQuadrature(pts, np.concatenate(wts), tg, normals,
                                     on_trim_curve=True)


def trim_curve_rule(td: TrimmedDomain, info: CellInfo, q: int) -> BoundarySegmentQuadrature:
    """Rule along the trimming-curve pieces of one cut cell."""
    parts = []
    for chain in info.chains:
        for piece in chain.pieces:
            if piece[0] == "curve":
                _, li, ci, t0, t1 = piece
                parts.append(curve_section_rule(td.loops[li].curves[ci], t0, t1, q))
    if not parts:
        z = np.zeros((0, 2))
        return BoundarySegmentQuadrature(z, np.zeros(0), z.copy(), z.copy(),
                                         on_trim_curve=True)
    return BoundarySegmentQuadrature(
        np.vstack([p.points for p in parts]),
        np.concatenate([p.weights for p in parts]),
        np.vstack([p.tangents for p in parts]),
        np.vstack([p.normals for p in parts]),
        on_trim_curve=True,
    )


def cell_rule(td: TrimmedDomain, info: CellInfo, rect, q_full: int,
              q_cut: int) -> CellQuadrature:
    """Dispatch to the full or cut rule according to the classification."""
    if info.cls is CellClass.INTERIOR:
        return full_cell_rule(rect, q_full)
    if info.cls is CellClass.EXTERIOR:
        return CellQuadrature(np.zeros((0, 2)), np.zeros(0), "full")
    return cut_cell_rule(td, rect, q_cut, info=info)


def build_mesh_rules(h, trimmed_sets, td: TrimmedDomain, q_full: int, q_cut: int):
    """Quadrature rules for every material active cell of a hierarchy.

    Rules are cached on the domain: cell rects are determined by (level,
    cell id) alone, so cells surviving a refinement reuse their rule.
    """
    cache = getattr(td, "_cell_rule_cache", None)
    if cache is None:
        cache = td._cell_rule_cache = {}
    rules = {}
    for (l, c) in trimmed_sets.cells:
        key = (l, c, q_full, q_cut)
        hit = cache.get(key)
        if hit is None:
            info = trimmed_sets.classes[(l, c)]
            hit = cell_rule(td, info, h.cell_rect(l, c), q_full, q_cut)
            cache[key] = hit
        rules[(l, c)] = hit
    return rules
