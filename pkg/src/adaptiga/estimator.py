"""Bubble a-posteriori error estimator and the adaptive refinement loop.

The estimator solves, element by element, a residual problem on bubble
functions: degree p+1 Bernstein tensor products on the reference element
that vanish on the element boundary (value only for second-order problems,
value and normal derivative for fourth-order ones). Because every bubble
lives on a single element the global residual system is block diagonal and
the element solves are embarrassingly parallel. Elements with an edge on an
inhomogeneous-Neumann background edge get the additional edge bubbles that
are nonzero there.

The element indicator is eta_Q = C_a ||e_h||_E(Q), integrated over the
material part of the element only.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .assembly import (
    SolutionField,
    _cell_basis,
    _edge_pushforward,
    _geometry_data,
    solve_problem,
)
from .bspline import bernstein_ders
from .physics import BasisTable, EDGE_NAMES, ProblemSpec
from .quadrature import background_edge_rule, build_mesh_rules, trim_curve_rule
from .trimming import CellClass, active_with_trimming, ghost_cell_closure

log = logging.getLogger(__name__)


class EstimatorError(ValueError):
    pass


@dataclass
class BubbleSpace:
    """Reference-element bubble construction for one polynomial degree."""

    p: int
    problem_order: int    # 2 or 4

    def __post_init__(self):
        if self.problem_order not in (2, 4):
            raise EstimatorError("problem order must be 2 or 4")
        if self.problem_order == 2 and self.p < 2:
            raise EstimatorError("second-order bubbles need p >= 2")
        if self.problem_order == 4 and self.p < 3:
            raise EstimatorError("fourth-order bubbles need p >= 3")
        d = self.p + 1
        if self.problem_order == 2:
            self.interior = list(range(1, d))          # vanish at 0 and 1
        else:
            self.interior = list(range(2, d - 1))      # + vanishing derivative

    @property
    def degree(self) -> int:
        return self.p + 1

    def count_per_component(self) -> int:
        return len(self.interior) ** 2

    def indices_for_cell(self, neumann_edges=()):
        """(i, j) tensor indices; Neumann element edges add their boundary index."""
        d = self.degree
        ix = list(self.interior)
        iy = list(self.interior)
        if self.problem_order == 2:
            if 3 in neumann_edges:
                ix = [0] + ix
            if 1 in neumann_edges:
                ix = ix + [d]
            if 0 in neumann_edges:
                iy = [0] + iy
            if 2 in neumann_edges:
                iy = iy + [d]
        return [(i, j) for j in iy for i in ix]

    def tables_full(self, q: int, rect, indices, order: int):
        """Cached bubble tables on a tensor Gauss rule (dyadic cell sizes)."""
        from .quadrature import gauss_rule

        x0, x1, y0, y1 = rect
        key = (q, tuple(indices), order, round(x1 - x0, 14), round(y1 - y0, 14))
        cache = getattr(self, "_full_tables", None)
        if cache is None:
            cache = self._full_tables = {}
        hit = cache.get(key)
        if hit is None:
            gx, _ = gauss_rule(q)
            X, Y = np.meshgrid(gx, gx)
            pts = np.column_stack([x0 + X.ravel() * (x1 - x0),
                                   y0 + Y.ravel() * (y1 - y0)])
            hit = self.tables(pts, rect, indices, order)
            cache[key] = hit
        return hit

    def tables(self, pts, rect, indices, order: int):
        """BasisTable of the selected bubbles at parametric points."""
        x0, x1, y0, y1 = rect
        hx, hy = x1 - x0, y1 - y0
        u = (np.asarray(pts)[:, 0] - x0) / hx
        v = (np.asarray(pts)[:, 1] - y0) / hy
        k = 2 if order >= 2 else 1
        bu = bernstein_ders(self.degree, u, k)
        bv = bernstein_ders(self.degree, v, k)
        n = len(u)
        nb = len(indices)
        N = np.empty((n, nb))
        dNx = np.empty((n, nb))
        dNy = np.empty((n, nb))
        d2 = [np.empty((n, nb)) for _ in range(3)] if order >= 2 else None
        for col, (i, j) in enumerate(indices):
            N[:, col] = bu[:, 0, i] * bv[:, 0, j]
            dNx[:, col] = bu[:, 1, i] / hx * bv[:, 0, j]
            dNy[:, col] = bu[:, 0, i] * bv[:, 1, j] / hy
            if order >= 2:
                d2[0][:, col] = bu[:, 2, i] / hx**2 * bv[:, 0, j]
                d2[1][:, col] = bu[:, 0, i] * bv[:, 2, j] / hy**2
                d2[2][:, col] = bu[:, 1, i] / hx * bv[:, 1, j] / hy
        return BasisTable(N=N, dN=(dNx, dNy), d2N=tuple(d2) if d2 else None)


def build_bubbles(p: int, problem_order: int) -> BubbleSpace:
    return BubbleSpace(p=p, problem_order=problem_order)


@dataclass
class ErrorIndicators:
    """Per-element indicators and their root-sum-square total."""

    eta: dict                 # (level, cell) -> eta_Q >= 0
    C_a: float

    @property
    def total(self) -> float:
        return float(np.sqrt(sum(v * v for v in self.eta.values())))

    def max(self) -> float:
        return max(self.eta.values(), default=0.0)


def _cell_neumann_edges(spec, rect):
    out = []
    for name in spec.neumann:
        e = EDGE_NAMES[name]
        x0, x1, y0, y1 = rect
        on = {0: abs(y0) < 1e-13, 1: abs(x1 - 1) < 1e-13,
              2: abs(y1 - 1) < 1e-13, 3: abs(x0) < 1e-13}[e]
        if on:
            out.append(e)
    return out


def element_residual_blocks(field: SolutionField, spec: ProblemSpec, h, ts,
                            rules, bubbles: BubbleSpace,
                            q_edge: int | None = None, ctx=None):
    """Yield ((level, cell), K_bubble, residual) for every material cell.

    The global bubble residual system is exactly the block-diagonal matrix
    of these blocks, one per element.
    """
    from .assembly import MeshContext

    kernel = spec.kernel()
    order = 2 if spec.kind == "shell" else 1
    if q_edge is None:
        q_edge = bubbles.degree + 1
    if ctx is None:
        ctx = MeshContext(spec, h, ts, rules, field.dofmap)
    for (l, c) in ts.cells:
        rule = rules[(l, c)]
        if rule.weights.size == 0:
            yield (l, c), None, None
            continue
        rect = h.cell_rect(l, c)
        idx = bubbles.indices_for_cell(_cell_neumann_edges(spec, rect))
        if rule.tag == "full" and rule.q is not None:
            bub = bubbles.tables_full(rule.q, rect, idx, order)
        else:
            bub = bubbles.tables(rule.points, rect, idx, order)
        _, geo = ctx.geo(l, c)
        K_bb = kernel.stiffness(bub, bub, geo, rule.weights)
        funcs, uh_basis = ctx.basis(l, c, order)
        loc = field.local_coeffs(l, c, funcs)
        K_cross = kernel.stiffness(bub, uh_basis, geo, rule.weights)
        r = -K_cross @ loc
        if spec.body_load is not None:
            if spec.kind == "shell":
                r += kernel.body_load(bub, geo, rule.weights, spec.body_load,
                                      ctx.phys_x(l, c))
            else:
                r += kernel.body_load(bub, geo, rule.weights, spec.body_load)
        r += _bubble_boundary_terms(spec, h, ts, l, c, bubbles, idx, kernel, q_edge)
        r += _bubble_point_loads(spec, h, l, c, bubbles, idx, rect)
        yield (l, c), K_bb, r


def estimate(field: SolutionField, spec: ProblemSpec, h, ts, rules,
             bubbles: BubbleSpace, C_a: float = 3.0,
             q_edge: int | None = None, ctx=None) -> ErrorIndicators:
    """Per-element bubble residual solves; returns eta_Q per material cell."""
    eta = {}
    for key, K_bb, r in element_residual_blocks(field, spec, h, ts, rules,
                                                bubbles, q_edge, ctx=ctx):
        if K_bb is None:
            eta[key] = 0.0
            continue
        z, *_ = np.linalg.lstsq(K_bb, r, rcond=1e-14)
        if not np.isfinite(z).all():
            log.warning("singular bubble block on cell %s", key)
            z = np.zeros_like(r)
        e2 = float(z @ r)
        eta[key] = C_a * float(np.sqrt(max(e2, 0.0)))
    return ErrorIndicators(eta=eta, C_a=C_a)


def _bubble_boundary_terms(spec, h, ts, l, c, bubbles, idx, kernel, q):
    rect = h.cell_rect(l, c)
    nc = kernel.ncomp
    nb = len(idx)
    out = np.zeros(nc * nb)
    td = spec.trimming
    for name, g in spec.neumann.items():
        e = EDGE_NAMES[name]
        edges_here = _cell_neumann_edges(spec, rect)
        if e not in edges_here:
            continue
        axis = 0 if e in (0, 2) else 1
        lo, hi = (rect[0], rect[1]) if axis == 0 else (rect[2], rect[3])
        br = background_edge_rule(td, e, lo, hi, q)
        if br.weights.size == 0:
            continue
        bub = bubbles.tables(br.points, rect, idx, 1)
        x, w_phys, _ = _edge_pushforward(spec, br)
        out += kernel.edge_load(bub, x, w_phys, lambda _: g(x))
    if spec.trimmed_neumann is not None:
        info = ts.classes[(l, c)]
        if info.cls is CellClass.CUT:
            cr = trim_curve_rule(td, info, q)
            if cr.weights.size:
                bub = bubbles.tables(cr.points, rect, idx, 1)
                x, w_phys, nrm = _edge_pushforward(spec, cr)
                g = spec.trimmed_neumann
                out += kernel.edge_load(bub, x, w_phys, lambda _: g(x, nrm))
    return out


def _bubble_point_loads(spec, h, l, c, bubbles, idx, rect):
    nc = spec.ncomp
    nb = len(idx)
    out = np.zeros(nc * nb)
    x0, x1, y0, y1 = rect
    for (pt, vec) in spec.point_loads:
        if not (x0 <= pt[0] <= x1 and y0 <= pt[1] <= y1):
            continue
        lc, cc = h.active_cell_containing(pt[0], pt[1])
        if (lc, cc) != (l, c):
            continue
        bub = bubbles.tables(np.array([pt]), rect, idx, 1)
        for comp in range(nc):
            out[comp * nb: (comp + 1) * nb] += vec[comp] * bub.N[0]
    return out


def mark(indicators: ErrorIndicators, gamma: float,
         zero_tol: float = 1e-14) -> list:
    """Maximum strategy: cells with eta_Q > gamma * max eta_Q."""
    if not 0.0 < gamma < 1.0:
        raise EstimatorError("marking parameter gamma must be in (0, 1)")
    m = indicators.max()
    if m <= zero_tol:
        return []
    return sorted(k for k, v in indicators.eta.items() if v > gamma * m)


# ----------------------------------------------------------------------
# adaptive loop


@dataclass
class AdaptParams:
    gamma: float = 0.5
    C_a: float = 3.0
    admissibility: int | None = None   # default: p (2nd order), p-1 (4th)
    max_iterations: int = 30
    eta_rel_tol: float = 0.0
    max_dofs: int = 50_000
    quad_full: int | None = None
    quad_cut: int | None = None
    solver: str = "direct"
    uniform: bool = False


@dataclass
class AdaptState:
    hierarchy: object
    field: SolutionField
    indicators: ErrorIndicators | None
    history: list = field(default_factory=list)


HISTORY_COLUMNS = ("iter", "ndof", "nelems", "error_norm", "eta_total",
                   "marked_count", "levels")


def adapt_loop(spec: ProblemSpec, h0, params: AdaptParams,
               error_fn=None, csv_path=None, callback=None) -> AdaptState:
    """Solve -> estimate -> mark -> close -> refine until a stop criterion.

    Args:
        spec: problem definition.
        h0: initial LevelHierarchy.
        params: loop controls.
        error_fn: optional (field, rules) -> float reference error.
        csv_path: optional file to stream history rows to.
        callback: optional hook called with (iteration, state dict).
    """
    p = max(h0.levels[0].degrees)
    problem_order = 4 if spec.kind == "shell" else 2
    m_class = params.admissibility
    if m_class is None:
        m_class = max(2, p if problem_order == 2 else p - 1)
    q_full = params.quad_full or (p + 1)
    q_cut = params.quad_cut or (p + 2)
    bubbles = build_bubbles(p, problem_order)
    td = spec.trimming
    h = h0
    history = []
    writer = None
    fh = None
    if csv_path is not None:
        fh = open(csv_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
    eta0 = None
    field = None
    indicators = None
    try:
        for it in range(params.max_iterations):
            ts = active_with_trimming(h, td)
            rules = build_mesh_rules(h, ts, td, q_full, q_cut)
            from .assembly import DofMap, MeshContext

            dofmap = DofMap(functions=list(ts.functions), ncomp=spec.ncomp)
            ctx = MeshContext(spec, h, ts, rules, dofmap)
            field = solve_problem(spec, h, ts, rules, method=params.solver, ctx=ctx)
            indicators = estimate(field, spec, h, ts, rules, bubbles,
                                  C_a=params.C_a, ctx=ctx)
            eta_total = indicators.total
            if eta0 is None:
                eta0 = eta_total
            err = float("nan")
            if error_fn is not None:
                err = float(error_fn(field, rules, ctx))
            if params.uniform:
                marked = list(ts.cells)
            else:
                marked = mark(indicators, params.gamma)
            row = {
                "iter": it,
                "ndof": field.dofmap.ndof,
                "nelems": len(ts.cells),
                "error_norm": err,
                "eta_total": eta_total,
                "marked_count": len(marked),
                "levels": h.deepest + 1,
            }
            history.append(row)
            if writer is not None:
                writer.writerow([row[k] for k in HISTORY_COLUMNS])
                fh.flush()
            if callback is not None:
                callback(it, row)
            if not marked:
                break
            if params.eta_rel_tol > 0 and eta_total <= params.eta_rel_tol * eta0:
                break
            if field.dofmap.ndof >= params.max_dofs:
                break
            if it == params.max_iterations - 1:
                break
            closed = _close_marked(h, td, marked, m_class)
            h = h.refine_cells(closed)
    finally:
        if fh is not None:
            fh.close()
    return AdaptState(hierarchy=h, field=field, indicators=indicators,
                      history=history)


def _close_marked(h, td, marked, m_class):
    """Admissibility and ghost-cell closures iterated to a fixed point.

    Admissibility neighborhoods are seeded from material cells only: ghost
    (exterior) cells are refined for linear independence but never act on
    material cells, so letting them cascade their own neighborhoods would
    needlessly refine the trimmed-away region.
    """
    if td.trivial:
        material = None
    else:
        def material(l, c):
            return td.classify_hierarchy_cell(h, l, c).cls is not CellClass.EXTERIOR

    cur = set(marked)
    for _ in range(50):
        after_adm = h.admissibility_closure(cur, m_class, expand=material)
        after_ghost = ghost_cell_closure(h, td, after_adm)
        if after_ghost == cur:
            return cur
        cur = after_ghost
    raise EstimatorError("closure did not reach a fixed point")
