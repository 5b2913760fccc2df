"""Trimmed-domain representation and cell classification.

Trimming loops live in the parametric unit square. Each loop is a closed
chain of (possibly rational) spline curves; the retained material lies to
the LEFT of the traversal direction. Holes are therefore clockwise loops and
material islands counterclockwise ones. Loops may leave the unit square;
only their intersection with it matters.

Cell classification is geometric: a cell with no boundary crossings is
Interior or Exterior by a point test, a crossed cell is Cut and carries the
resolved material boundary chains used by the cut-cell quadrature. Children
of Interior/Exterior cells inherit the parent class, which keeps the
classification level-consistent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .bspline import KnotVector

SNAP_TOL = 1e-10          # crossings this close to a corner are snapped
POINT_TOL = 1e-12         # crossing points resolved to this accuracy
AREA_EPS = 1e-8           # material fraction below which a cut cell is Exterior


class TrimmingError(ValueError):
    """Raised for invalid loops or unresolvable cut topology."""


class CellClass(Enum):
    INTERIOR = "interior"
    EXTERIOR = "exterior"
    CUT = "cut"


class ParamCurve:
    """Open (rational) spline curve in the 2D parametric plane."""

    def __init__(self, degree: int, knots, control_points, weights=None):
        self.kv = KnotVector(np.asarray(knots, float), degree)
        self.control = np.asarray(control_points, dtype=float)
        if self.control.shape != (self.kv.nbasis, 2):
            raise TrimmingError(f"expected {self.kv.nbasis} 2D control points")
        self.weights = None
        if weights is not None:
            self.weights = np.asarray(weights, dtype=float)
            if self.weights.shape != (self.kv.nbasis,) or np.any(self.weights <= 0):
                raise TrimmingError("weights must be positive, one per control point")

    @property
    def domain(self):
        return self.kv.domain

    def point(self, ts):
        return self.ders(ts, 0)[0]

    def ders(self, ts, k: int):
        """Positions and derivatives up to order k, each of shape (n, 2)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        spans, d = self.kv.eval_ders(ts, min(k, self.kv.p))
        p = self.kv.p
        idx = spans[:, None] - p + np.arange(p + 1)[None, :]
        P = self.control[idx]
        if self.weights is None:
            out = [np.einsum("nl,nld->nd", d[:, j, :], P) for j in range(d.shape[1])]
        else:
            w = self.weights[idx]
            Pw = P * w[:, :, None]
            A = [np.einsum("nl,nld->nd", d[:, j, :], Pw) for j in range(d.shape[1])]
            W = [np.einsum("nl,nl->n", d[:, j, :], w) for j in range(d.shape[1])]
            out = [A[0] / W[0][:, None]]
            if len(A) > 1:
                out.append((A[1] - out[0] * W[1][:, None]) / W[0][:, None])
            if len(A) > 2:
                out.append(
                    (A[2] - 2 * out[1] * W[1][:, None] - out[0] * W[2][:, None])
                    / W[0][:, None]
                )
        while len(out) < k + 1:
            out.append(np.zeros_like(out[0]))
        return out

    def tangent(self, t: float) -> np.ndarray:
        d = self.ders([t], 1)[1][0]
        n = np.linalg.norm(d)
        if n < 1e-14:
            raise TrimmingError("vanishing curve tangent")
        return d / n

    def sample_count(self) -> int:
        return max(64, 8 * self.kv.ncells)

    def samples(self):
        """Cached dense parameter/point samples used for bracketing."""
        if not hasattr(self, "_samples"):
            lo, hi = self.domain
            ts = np.linspace(lo, hi, self.sample_count() + 1)
            self._samples = (ts, self.point(ts))
        return self._samples


def line_curve(p0, p1) -> ParamCurve:
    return ParamCurve(1, [0.0, 0.0, 1.0, 1.0], [p0, p1])


def quarter_arc(center, r: float, a0_deg: float, a1_deg: float) -> ParamCurve:
    """Exact 90-degree rational arc from angle a0 to a1 (degrees)."""
    a0, a1 = np.radians(a0_deg), np.radians(a1_deg)
    if not np.isclose(abs(a1 - a0), np.pi / 2):
        raise TrimmingError("quarter_arc spans exactly 90 degrees")
    c = np.asarray(center, float)
    P0 = c + r * np.array([np.cos(a0), np.sin(a0)])
    P1 = c + r * np.array([np.cos(a1), np.sin(a1)])
    am = 0.5 * (a0 + a1)
    M = c + (r / np.cos((a1 - a0) / 2)) * np.array([np.cos(am), np.sin(am)])
    w = np.array([1.0, np.sqrt(2) / 2, 1.0])
    return ParamCurve(2, [0, 0, 0, 1, 1, 1], [P0, M, P1], w)


class TrimmingLoop:
    """Closed, simple chain of curves with material on the left."""

    def __init__(self, curves: list[ParamCurve]):
        if not curves:
            raise TrimmingError("empty loop")
        self.curves = list(curves)
        for a, b in zip(self.curves, self.curves[1:] + self.curves[:1]):
            pa = a.point([a.domain[1]])[0]
            pb = b.point([b.domain[0]])[0]
            if np.linalg.norm(pa - pb) > 1e-12:
                raise TrimmingError("loop is not closed to 1e-12")
        self._check_simple()

    def _check_simple(self):
        segs = []
        for ci, curve in enumerate(self.curves):
            _, pts = curve.samples()
            for i in range(len(pts) - 1):
                segs.append((ci, i, pts[i], pts[i + 1]))
        P0 = np.array([s[2] for s in segs])
        P1 = np.array([s[3] for s in segs])
        n = len(segs)
        # coarse sweep: bounding-box prefilter, then exact segment test
        lo = np.minimum(P0, P1)
        hi = np.maximum(P0, P1)
        for i in range(n):
            overlap = np.nonzero(
                np.all(lo[i + 2:] <= hi[i] + 1e-14, axis=1)
                & np.all(hi[i + 2:] >= lo[i] - 1e-14, axis=1)
            )[0]
            for off in overlap:
                j = i + 2 + off
                if i == 0 and j == n - 1:
                    continue  # closing adjacency
                if _segments_cross(P0[i], P1[i], P0[j], P1[j]):
                    raise TrimmingError("loop self-intersects at sample resolution")

    def arc_position(self, curve_idx: int, t: float) -> float:
        lo, hi = self.curves[curve_idx].domain
        return curve_idx + (t - lo) / (hi - lo)

    def point_at_arc(self, a: float) -> np.ndarray:
        n = len(self.curves)
        a = a % n
        ci = min(int(a), n - 1)
        lo, hi = self.curves[ci].domain
        return self.curves[ci].point([lo + (a - ci) * (hi - lo)])[0]

    def sections_between(self, a0: float, a1: float):
        """Per-curve parameter intervals covering the loop from a0 to a1.

        The walk follows increasing arc position, wrapping around the loop.
        Yields (curve_idx, t_start, t_end).
        """
        n = len(self.curves)
        if a1 <= a0:
            a1 += n
        a = a0
        while a < a1 - 1e-13:
            ci = int(np.floor(a % n + 1e-13)) % n
            seg_end = min(np.floor(a + 1e-13) + 1.0, a1)
            lo, hi = self.curves[ci].domain
            t0 = lo + (a % n - ci) * (hi - lo)
            t1 = lo + (min(seg_end - np.floor(a + 1e-13), 1.0)) * (hi - lo)
            if t1 > t0 + 1e-14:
                yield ci, t0, t1
            a = seg_end


def _cross2(a, b) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


def _segments_cross(a0, a1, b0, b1) -> bool:
    """Proper crossing or touching of two segments (used for validation)."""
    d1 = _cross2(a1 - a0, b0 - a0)
    d2 = _cross2(a1 - a0, b1 - a0)
    d3 = _cross2(b1 - b0, a0 - b0)
    d4 = _cross2(b1 - b0, a1 - b0)
    if (d1 * d2 < -1e-26) and (d3 * d4 < -1e-26):
        return True
    # touching: an endpoint of one segment lies on the other
    for p, q0, q1 in ((b0, a0, a1), (b1, a0, a1), (a0, b0, b1), (a1, b0, b1)):
        d = q1 - q0
        L2 = float(d @ d)
        if L2 < 1e-28:
            continue
        s = float((p - q0) @ d) / L2
        if -1e-9 < s < 1 + 1e-9:
            if np.linalg.norm(p - (q0 + s * d)) < 1e-12:
                return True
    return False


@dataclass
class Crossing:
    """Point where a loop crosses a cell boundary."""

    loop: int
    curve: int
    t: float
    point: np.ndarray
    edge: int        # 0 bottom, 1 right, 2 top, 3 left (CCW)
    s: float         # CCW perimeter coordinate
    arc: float       # position along the loop


@dataclass
class BoundaryChain:
    """CCW boundary of one connected material component of a cut cell.

    pieces: ('seg', p0, p1) for straight cell-boundary bits and
    ('curve', loop_idx, curve_idx, t0, t1) for trimming-curve sections.
    """

    pieces: list
    area: float


@dataclass
class CellInfo:
    cls: CellClass
    crossings: list = field(default_factory=list)
    chains: list = field(default_factory=list)
    material_fraction: float = 1.0


class TrimmedDomain:
    """Unit-square background minus the regions delimited by the loops."""

    def __init__(self, loops: list[TrimmingLoop] | None = None):
        self.loops = list(loops or [])
        self._check_disjoint()
        self._cache: dict = {}
        self._hier_cache: dict = {}

    @property
    def trivial(self) -> bool:
        return not self.loops

    def _check_disjoint(self):
        segs = []
        for loop in self.loops:
            loop_segs = []
            for c in loop.curves:
                _, pts = c.samples()
                loop_segs.append((pts[:-1], pts[1:]))
            segs.append((np.vstack([s[0] for s in loop_segs]),
                         np.vstack([s[1] for s in loop_segs])))
        for i in range(len(segs)):
            for j in range(i + 1, len(segs)):
                A0, A1 = segs[i]
                B0, B1 = segs[j]
                lo_a, hi_a = np.minimum(A0, A1), np.maximum(A0, A1)
                lo_b, hi_b = np.minimum(B0, B1), np.maximum(B0, B1)
                for k in range(len(A0)):
                    cand = np.nonzero(
                        np.all(lo_b <= hi_a[k] + 1e-12, axis=1)
                        & np.all(hi_b >= lo_a[k] - 1e-12, axis=1)
                    )[0]
                    for m in cand:
                        if _segments_cross(A0[k], A1[k], B0[m], B1[m]):
                            raise TrimmingError("trimming loops must be pairwise disjoint")

    # ------------------------------------------------------------------
    # point membership

    def _segment_index(self):
        """Concatenated polyline segments of all loops, for point queries."""
        if not hasattr(self, "_segidx"):
            P0, P1, who = [], [], []
            for li, loop in enumerate(self.loops):
                for ci, curve in enumerate(loop.curves):
                    ts, pts = curve.samples()
                    P0.append(pts[:-1])
                    P1.append(pts[1:])
                    who.extend((li, ci, k) for k in range(len(ts) - 1))
            P0 = np.vstack(P0)
            P1 = np.vstack(P1)
            D = P1 - P0
            L2 = np.maximum(np.einsum("ij,ij->i", D, D), 1e-300)
            seg_max = float(np.sqrt(L2.max()))
            self._segidx = (P0, D, L2, who, seg_max)
        return self._segidx

    def point_in_material(self, x: float, y: float) -> bool:
        """Is the point retained, i.e. left of the nearest boundary point."""
        if self.trivial:
            return True
        P = np.array([x, y])
        P0, D, L2, who, seg_max = self._segment_index()
        s = np.clip(np.einsum("ij,ij->i", D, P[None, :] - P0) / L2, 0.0, 1.0)
        foot = P0 + s[:, None] * D
        d2 = np.einsum("ij,ij->i", foot - P, foot - P)
        k = int(np.argmin(d2))
        li, ci, seg = who[k]
        dist = float(np.sqrt(d2[k]))
        if dist > 4.0 * seg_max and 1e-12 < s[k] < 1.0 - 1e-12:
            # far from the boundary: the polyline segment decides the side
            return _cross2(D[k], P - foot[k]) >= 0.0
        loop = self.loops[li]
        curve = loop.curves[ci]
        ts, pts = curve.samples()
        t = _project_to_curve(curve, P, ts[max(seg - 1, 0)],
                              ts[min(seg + 2, len(ts) - 1)])
        lo, hi = curve.domain
        at_start = t - lo < 1e-9 * (hi - lo)
        at_end = hi - t < 1e-9 * (hi - lo)
        if not (at_start or at_end):
            tang = curve.tangent(t)
            return _cross2(tang, P - curve.point([t])[0]) >= 0.0
        # closest point is a curve junction: combine the two adjacent tangents
        n = len(loop.curves)
        if at_start:
            prev = loop.curves[(ci - 1) % n]
            t_in, t_out = prev.tangent(prev.domain[1]), curve.tangent(lo)
            X = curve.point([lo])[0]
        else:
            nxt = loop.curves[(ci + 1) % n]
            t_in, t_out = curve.tangent(hi), nxt.tangent(nxt.domain[0])
            X = curve.point([hi])[0]
        v = P - X
        left_in = _cross2(t_in, v) >= 0.0
        left_out = _cross2(t_out, v) >= 0.0
        turn = _cross2(t_in, t_out)
        return (left_in and left_out) if turn > 0 else (left_in or left_out)

    # ------------------------------------------------------------------
    # crossings

    def _loop_rect_crossings(self, rect) -> list[Crossing]:
        x0, x1, y0, y1 = rect
        found = []
        for li, loop in enumerate(self.loops):
            for ci, curve in enumerate(loop.curves):
                for t, pt, edge in _curve_rect_crossings(curve, rect):
                    found.append(
                        Crossing(
                            loop=li, curve=ci, t=t, point=pt, edge=edge,
                            s=_perimeter_coord(pt, edge, rect),
                            arc=loop.arc_position(ci, t),
                        )
                    )
        # snap to corners and deduplicate coincident crossings
        corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
        for c in found:
            d = np.linalg.norm(corners - c.point, axis=1)
            k = int(np.argmin(d))
            if d[k] < SNAP_TOL:
                c.point = corners[k].copy()
                c.s = _perimeter_coord(c.point, c.edge, rect)
        found.sort(key=lambda c: (c.loop, c.arc))
        dedup: list[Crossing] = []
        for c in found:
            if dedup and dedup[-1].loop == c.loop and (
                np.linalg.norm(dedup[-1].point - c.point) < 10 * SNAP_TOL
                and _cyclic_close(dedup[-1].arc, c.arc, len(self.loops[c.loop].curves))
            ):
                continue
            dedup.append(c)
        # wrap-around duplicate (first and last crossing of one loop)
        if len(dedup) >= 2:
            first, last = dedup[0], dedup[-1]
            if first.loop == last.loop and last is not first and (
                np.linalg.norm(first.point - last.point) < 10 * SNAP_TOL
                and _cyclic_close(first.arc, last.arc, len(self.loops[first.loop].curves))
            ):
                dedup.pop()
        # keep only transversal crossings: the loop must be strictly inside
        # the open cell on exactly one side (corner grazes are dropped); the
        # probe distance stays below the arc gap to the nearest crossing
        kept = []
        for c in dedup:
            loop = self.loops[c.loop]
            ncur = len(loop.curves)
            gap = ncur  # cyclic arc distance to the nearest other crossing
            for o in dedup:
                if o is c or o.loop != c.loop:
                    continue
                d = abs(o.arc - c.arc) % ncur
                gap = min(gap, d, ncur - d)
            delta = min(1e-4, max(gap / 8.0, 1e-9))
            pin = _strictly_in_rect(loop.point_at_arc(c.arc - delta), rect, margin=1e-12)
            pout = _strictly_in_rect(loop.point_at_arc(c.arc + delta), rect, margin=1e-12)
            if pin != pout:
                kept.append(c)
        return kept

    # ------------------------------------------------------------------
    # classification

    def classify_rect(self, rect) -> CellInfo:
        """Classify an arbitrary parametric rectangle."""
        key = tuple(round(v, 13) for v in rect)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._classify(rect)
            self._cache[key] = hit
        return hit

    def _classify(self, rect) -> CellInfo:
        x0, x1, y0, y1 = rect
        if self.trivial:
            return CellInfo(CellClass.INTERIOR)
        crossings = self._loop_rect_crossings(rect)
        if not crossings:
            if self._loop_point_strictly_inside(rect):
                # a whole loop sits inside this cell; quadrature subdivides
                return CellInfo(CellClass.CUT, crossings=[], chains=[],
                                material_fraction=0.5)
            inside = self.point_in_material(0.5 * (x0 + x1), 0.5 * (y0 + y1))
            return CellInfo(CellClass.INTERIOR if inside else CellClass.EXTERIOR)
        try:
            chains = self._build_chains(rect, crossings)
        except TrimmingError as exc:
            raise TrimmingError(f"unresolvable topology in cell {rect}: {exc}") from exc
        area = sum(ch.area for ch in chains)
        frac = area / ((x1 - x0) * (y1 - y0))
        if frac < AREA_EPS:
            return CellInfo(CellClass.EXTERIOR, crossings=crossings,
                            material_fraction=0.0)
        if frac > 1.0 - AREA_EPS:
            return CellInfo(CellClass.INTERIOR, crossings=crossings,
                            material_fraction=1.0)
        return CellInfo(CellClass.CUT, crossings=crossings, chains=chains,
                        material_fraction=frac)

    def _loop_point_strictly_inside(self, rect) -> bool:
        x0, x1, y0, y1 = rect
        pad = 1e-12
        for loop in self.loops:
            for curve in loop.curves:
                _, pts = curve.samples()
                inside = (
                    (pts[:, 0] > x0 + pad) & (pts[:, 0] < x1 - pad)
                    & (pts[:, 1] > y0 + pad) & (pts[:, 1] < y1 - pad)
                )
                if np.any(inside):
                    return True
        return False

    def _build_chains(self, rect, crossings) -> list[BoundaryChain]:
        # group crossings per loop, ordered along the loop; the section
        # between consecutive crossings is inside the cell iff its midpoint is
        per_loop: dict[int, list[Crossing]] = {}
        for c in crossings:
            per_loop.setdefault(c.loop, []).append(c)
        pieces = []  # (entry Crossing, exit Crossing)
        for li, cs in per_loop.items():
            if len(cs) % 2 != 0:
                raise TrimmingError(f"odd number of loop crossings ({len(cs)})")
            loop = self.loops[li]
            n = len(cs)
            for i in range(n):
                a, b = cs[i], cs[(i + 1) % n]
                mid = self._section_midpoint(loop, a.arc, b.arc)
                if _point_in_rect(mid, rect, tol=-1e-12):
                    pieces.append((a, b))
        if not pieces:
            raise TrimmingError("crossings found but no interior curve piece")
        x0, x1, y0, y1 = rect
        perim = 2 * ((x1 - x0) + (y1 - y0))
        unused = list(pieces)
        chains = []
        guard = 0
        while unused:
            entry0, cur_exit = unused.pop(0)
            chain_pieces = [("curvepiece", entry0, cur_exit)]
            while True:
                guard += 1
                if guard > 10000:
                    raise TrimmingError("chain walk did not terminate")
                nxt = _next_crossing_ccw(crossings, cur_exit.s, perim)
                boundary = _boundary_walk(cur_exit.point, nxt.point,
                                           cur_exit.s, nxt.s, rect)
                chain_pieces.extend(boundary)
                if abs((nxt.s - entry0.s) % perim) < 1e-11 or nxt is entry0:
                    break
                hit = None
                for k, (a, b) in enumerate(unused):
                    if a is nxt:
                        hit = k
                        break
                if hit is None:
                    raise TrimmingError("boundary walk reached a non-entry crossing")
                a, b = unused.pop(hit)
                chain_pieces.append(("curvepiece", a, b))
                cur_exit = b
            chains.append(self._finalize_chain(chain_pieces))
        for ch in chains:
            if ch.area < -1e-12:
                raise TrimmingError("negatively oriented material chain")
        return [ch for ch in chains if ch.area > 0]

    def _section_midpoint(self, loop, a0, a1):
        n = len(loop.curves)
        if a1 <= a0:
            a1 += n
        return loop.point_at_arc(0.5 * (a0 + a1))

    def _finalize_chain(self, raw_pieces) -> BoundaryChain:
        pieces = []
        poly = []
        for item in raw_pieces:
            if item[0] == "curvepiece":
                a, b = item[1], item[2]
                loop = self.loops[a.loop]
                for ci, t0, t1 in loop.sections_between(a.arc, b.arc):
                    pieces.append(("curve", a.loop, ci, t0, t1))
                    ts = np.linspace(t0, t1, 33)
                    poly.extend(loop.curves[ci].point(ts)[:-1])
            else:
                _, p0, p1 = item
                pieces.append(("seg", np.asarray(p0, float), np.asarray(p1, float)))
                poly.append(np.asarray(p0, float))
        poly = np.array(poly)
        area = _shoelace(poly)
        return BoundaryChain(pieces=pieces, area=area)

    # ------------------------------------------------------------------
    # hierarchy integration

    def classify_hierarchy_cell(self, h, level: int, cell: int) -> CellInfo:
        """Classify a hierarchy cell, inheriting Interior/Exterior from parents."""
        key = (id(h.levels[level]), level, cell)
        hit = self._hier_cache.get(key)
        if hit is not None:
            return hit
        if level > 0:
            parent = self.classify_hierarchy_cell(h, level - 1, h.parent(level, cell))
            if parent.cls is not CellClass.CUT:
                info = CellInfo(parent.cls, material_fraction=parent.material_fraction)
                self._hier_cache[key] = info
                return info
        info = self.classify_rect(h.cell_rect(level, cell))
        self._hier_cache[key] = info
        return info


def _point_in_rect(p, rect, tol=0.0) -> bool:
    x0, x1, y0, y1 = rect
    return (x0 - tol <= p[0] <= x1 + tol) and (y0 - tol <= p[1] <= y1 + tol)


def _strictly_in_rect(p, rect, margin=0.0) -> bool:
    x0, x1, y0, y1 = rect
    return (x0 + margin < p[0] < x1 - margin) and (y0 + margin < p[1] < y1 - margin)


def _cyclic_close(a, b, period, tol=1e-6) -> bool:
    d = abs(a - b) % period
    return d < tol or period - d < tol


def _shoelace(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _perimeter_coord(pt, edge, rect) -> float:
    x0, x1, y0, y1 = rect
    w, h = x1 - x0, y1 - y0
    if edge == 0:
        return pt[0] - x0
    if edge == 1:
        return w + (pt[1] - y0)
    if edge == 2:
        return w + h + (x1 - pt[0])
    return 2 * w + h + (y1 - pt[1])


def _corner_positions(rect):
    x0, x1, y0, y1 = rect
    w, h = x1 - x0, y1 - y0
    return [
        (0.0, np.array([x0, y0])),
        (w, np.array([x1, y0])),
        (w + h, np.array([x1, y1])),
        (2 * w + h, np.array([x0, y1])),
    ]


def _next_crossing_ccw(crossings, s, perim):
    best, best_ds = None, None
    for c in crossings:
        ds = (c.s - s) % perim
        if ds < 1e-11:
            continue
        if best is None or ds < best_ds:
            best, best_ds = c, ds
    if best is None:
        raise TrimmingError("no next crossing on cell boundary")
    return best


def _boundary_walk(p_from, p_to, s_from, s_to, rect):
    """Straight pieces along the cell boundary CCW from s_from to s_to."""
    perim = 2 * ((rect[1] - rect[0]) + (rect[3] - rect[2]))
    ds = (s_to - s_from) % perim
    corners = _corner_positions(rect)
    stops = []
    for sc, pc in corners:
        d = (sc - s_from) % perim
        if 1e-11 < d < ds - 1e-11:
            stops.append((d, pc))
    stops.sort(key=lambda q: q[0])
    pieces = []
    cur = np.asarray(p_from, float)
    for _, pc in stops:
        pieces.append(("seg", cur, pc))
        cur = pc
    pieces.append(("seg", cur, np.asarray(p_to, float)))
    return [p for p in pieces if np.linalg.norm(p[2] - p[1]) > 1e-13]


def _project_to_curve(curve, P, t_lo, t_hi) -> float:
    """Parameter of the locally nearest curve point (batched grid refinement)."""
    lo, hi = curve.domain
    a = max(lo, t_lo)
    b = min(hi, t_hi)
    for _ in range(6):
        ts = np.linspace(a, b, 17)
        pts = curve.point(ts)
        k = int(np.argmin(np.einsum("ij,ij->i", pts - P, pts - P)))
        a2 = ts[max(k - 1, 0)]
        b2 = ts[min(k + 1, 16)]
        a, b = a2, b2
    return 0.5 * (a + b)


def _curve_rect_crossings(curve: ParamCurve, rect):
    """(t, point, edge) for every crossing of the curve with the cell boundary."""
    x0, x1, y0, y1 = rect
    ts, pts = curve.samples()
    if (
        pts[:, 0].max() < x0 - 1e-13 or pts[:, 0].min() > x1 + 1e-13
        or pts[:, 1].max() < y0 - 1e-13 or pts[:, 1].min() > y1 + 1e-13
    ):
        return []
    out = []
    edges = [
        (1, y0, (x0, x1), 0),  # bottom: axis 1 equals y0
        (0, x1, (y0, y1), 1),  # right
        (1, y1, (x0, x1), 2),  # top
        (0, x0, (y0, y1), 3),  # left
    ]
    for axis, cval, (blo, bhi), edge in edges:
        f = pts[:, axis] - cval
        sign_change = np.nonzero(f[:-1] * f[1:] < 0)[0]
        roots = []
        for i in sign_change:
            roots.append(_bisect_root(curve, axis, cval, ts[i], ts[i + 1]))
        # samples landing exactly on the line
        on_line = np.nonzero(np.abs(f) < 1e-13)[0]
        for i in on_line:
            roots.append(float(ts[i]))
        for t in roots:
            pt = curve.point([t])[0]
            other = pt[1 - axis]
            if blo - SNAP_TOL <= other <= bhi + SNAP_TOL:
                pt[axis] = cval
                out.append((t, pt, edge))
    # deduplicate roots that resolved twice (corner hits register on two
    # edges, samples exactly on a line register twice per bracket)
    out.sort(key=lambda r: r[0])
    dedup = []
    for t, pt, edge in out:
        if dedup and abs(t - dedup[-1][0]) < 1e-11 and np.linalg.norm(pt - dedup[-1][1]) < 10 * SNAP_TOL:
            continue
        dedup.append((t, pt, edge))
    return dedup


def _bisect_root(curve, axis, cval, t0, t1) -> float:
    f0 = curve.point([t0])[0][axis] - cval
    for _ in range(60):
        tm = 0.5 * (t0 + t1)
        fm = curve.point([tm])[0][axis] - cval
        if abs(fm) < 1e-14 or (t1 - t0) < 1e-15:
            return tm
        if f0 * fm <= 0:
            t1 = tm
        else:
            t0, f0 = tm, fm
    return 0.5 * (t0 + t1)


def curve_cell_intersections(curve: ParamCurve, rect):
    """Crossings of one curve with a cell boundary, sorted by parameter.

    Returns a list of (t, edge_id, point) with points resolved to 1e-12.
    """
    return [(t, edge, pt) for t, pt, edge in _curve_rect_crossings(curve, rect)]


# ----------------------------------------------------------------------
# trimming-aware activation and ghost cells


@dataclass
class TrimmedActiveSets:
    """Active sets filtered to positive-measure material support."""

    functions: list          # [(level, func id)] level-major lexicographic
    cells: list              # [(level, cell id)] material active cells
    classes: dict            # (level, cell) -> CellInfo for active cells


def active_with_trimming(h, td: TrimmedDomain) -> TrimmedActiveSets:
    """Drop zero-measure cells and functions from the hierarchy's active sets."""
    cells = []
    classes = {}
    for l, c in h.cell_order():
        info = td.classify_hierarchy_cell(h, l, c)
        if info.cls is not CellClass.EXTERIOR:
            cells.append((l, c))
            classes[(l, c)] = info
    functions = []
    for l in range(h.nlevels):
        space = h.levels[l]
        for f in sorted(h.active_funcs[l]):
            ax, bx, ay, by = space.support_cell_rect(f)
            keep = False
            for cj in range(ay, by + 1):
                for ci in range(ax, bx + 1):
                    info = td.classify_hierarchy_cell(h, l, space.cell_flat(ci, cj))
                    if info.cls is not CellClass.EXTERIOR:
                        keep = True
                        break
                if keep:
                    break
            if keep:
                functions.append((l, f))
    return TrimmedActiveSets(functions=functions, cells=cells, classes=classes)


def ghost_cell_closure(h, td: TrimmedDomain, marked) -> set:
    """Add the exterior (ghost) cells required to keep the basis independent.

    For every marked material cell Q and every active function b whose
    support contains Q, the still-active exterior cells of b's own level
    inside supp(b) are marked. Refining those once is exactly what the
    deactivation test needs (supp(b) contained in the next subdomain checks
    level-of-b cells only); finer exterior descendants are irrelevant.
    """
    out = set((l, c) for l, c in marked)
    if td.trivial:
        return out
    for l, c in list(out):
        info = td.classify_hierarchy_cell(h, l, c)
        if info.cls is CellClass.EXTERIOR:
            continue
        for lf in range(l + 1):
            anc = h.ancestor(l, c, lf) if lf < l else c
            space = h.levels[lf]
            for f in space.funcs_on_cell(anc):
                if int(f) not in h.active_funcs[lf]:
                    continue
                ax, bx, ay, by = space.support_cell_rect(int(f))
                for cj in range(ay, by + 1):
                    for ci in range(ax, bx + 1):
                        cc = space.cell_flat(ci, cj)
                        if cc not in h.active_cells[lf] or (lf, cc) in out:
                            continue
                        if td.classify_hierarchy_cell(h, lf, cc).cls is CellClass.EXTERIOR:
                            out.add((lf, cc))
    return out


# ----------------------------------------------------------------------
# loop factories for the benchmark geometries


def circle_hole_loop(cx: float, cy: float, r: float) -> TrimmingLoop:
    """Clockwise circle: the disk is trimmed away, material outside."""
    arcs = [
        quarter_arc((cx, cy), r, 90, 0),
        quarter_arc((cx, cy), r, 0, -90),
        quarter_arc((cx, cy), r, -90, -180),
        quarter_arc((cx, cy), r, -180, -270),
    ]
    return TrimmingLoop(arcs)


def ellipse_hole_loop(cx: float, cy: float, rx: float, ry: float) -> TrimmingLoop:
    """Clockwise ellipse hole (exact rational arcs, scaled circle)."""
    arcs = []
    for a0, a1 in [(90, 0), (0, -90), (-90, -180), (-180, -270)]:
        arc = quarter_arc((0.0, 0.0), 1.0, a0, a1)
        ctrl = arc.control * np.array([rx, ry]) + np.array([cx, cy])
        arcs.append(ParamCurve(2, [0, 0, 0, 1, 1, 1], ctrl, arc.weights))
    return TrimmingLoop(arcs)


def strip_above_loop(ycut: float, pad: float = 0.1) -> TrimmingLoop:
    """Trim away the strip y > ycut of the unit square (clockwise loop)."""
    return TrimmingLoop([
        line_curve([1 + pad, ycut], [-pad, ycut]),
        line_curve([-pad, ycut], [-pad, 1 + pad]),
        line_curve([-pad, 1 + pad], [1 + pad, 1 + pad]),
        line_curve([1 + pad, 1 + pad], [1 + pad, ycut]),
    ])


def corner_disk_loop(r: float, pad: float = 0.1) -> TrimmingLoop:
    """Trim a quarter disk of radius r at the parametric origin."""
    return TrimmingLoop([
        quarter_arc((0.0, 0.0), r, 90, 0),
        line_curve([r, 0.0], [r, -pad]),
        line_curve([r, -pad], [-pad, -pad]),
        line_curve([-pad, -pad], [-pad, r]),
        line_curve([-pad, r], [0.0, r]),
    ])
