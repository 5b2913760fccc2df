"""Hierarchical and truncated hierarchical B-spline bases over dyadic levels.

A hierarchy stores nested tensor spline spaces (each obtained from the
previous by inserting every span midpoint), the set of refined cells per
level, and the derived active cell / active function sets. The refined cells
of level l constitute the subdomain of level l+1; everything is tracked with
integer cell indices, so activation and truncation decisions are exact.

Evaluation and assembly go through per-cell extraction matrices: on an active
cell of level L the (possibly truncated) active functions of all levels are
expressed in the local tensor basis of level L.
"""

from __future__ import annotations

import numpy as np

from .bspline import SplineError, TensorSplineSpace, two_scale_matrix


class HierarchyError(ValueError):
    """Raised for invalid refinement requests."""


class LevelHierarchy:
    """Nested dyadic spline levels with active-set bookkeeping.

    Instances are immutable: :meth:`refine_cells` returns a new hierarchy.
    Read access (evaluation, extraction) is safe from multiple threads.
    """

    def __init__(self, base: TensorSplineSpace, depth: int = 1, max_depth: int = 20,
                 _state=None):
        if depth < 1:
            raise HierarchyError("depth must be >= 1")
        self.max_depth = max_depth
        if _state is None:
            self.levels = [base]
            for _ in range(depth - 1):
                self.levels.append(self.levels[-1].refine_dyadic())
            # refined[l]: level-l cells whose children exist (= subdomain of level l+1)
            self.refined = [set() for _ in self.levels]
            self.active_cells = [set() for _ in self.levels]
            self.active_cells[0] = set(range(base.ncells_total))
            self.active_funcs = [set() for _ in self.levels]
            self.active_funcs[0] = set(range(base.dim))
            # covered[l]: level-l functions with support inside the level-l subdomain
            self.covered_funcs = [set() for _ in self.levels]
            self.covered_funcs[0] = set(range(base.dim))
        else:
            self.levels, self.refined, self.active_cells, self.active_funcs, \
                self.covered_funcs = _state
        self._twoscale_1d = {}
        self._extraction_cache = {}

    # ------------------------------------------------------------------
    # basic queries

    @property
    def nlevels(self) -> int:
        return len(self.levels)

    @property
    def deepest(self) -> int:
        """Index of the deepest level holding active cells."""
        for l in range(self.nlevels - 1, -1, -1):
            if self.active_cells[l]:
                return l
        return 0

    def ndofs(self) -> int:
        return sum(len(a) for a in self.active_funcs)

    def ncells_active(self) -> int:
        return sum(len(a) for a in self.active_cells)

    def function_order(self):
        """Active functions as (level, flat id), level-major lexicographic."""
        out = []
        for l in range(self.nlevels):
            out.extend((l, f) for f in sorted(self.active_funcs[l]))
        return out

    def cell_order(self):
        """Active cells as (level, flat id), level-major lexicographic."""
        out = []
        for l in range(self.nlevels):
            out.extend((l, c) for c in sorted(self.active_cells[l]))
        return out

    def cell_rect(self, level: int, cell: int):
        return self.levels[level].cell_rect(cell)

    def children(self, level: int, cell: int):
        """The four level-(level+1) children of a cell."""
        space = self.levels[level]
        fine = self.levels[level + 1]
        ci, cj = space.cell_multi(cell)
        return [
            fine.cell_flat(2 * ci + a, 2 * cj + b) for b in (0, 1) for a in (0, 1)
        ]

    def parent(self, level: int, cell: int) -> int:
        space = self.levels[level]
        coarse = self.levels[level - 1]
        ci, cj = space.cell_multi(cell)
        return coarse.cell_flat(ci // 2, cj // 2)

    def ancestor(self, level: int, cell: int, coarse_level: int) -> int:
        """Ancestor cell index at a coarser level."""
        space = self.levels[level]
        ci, cj = space.cell_multi(cell)
        shift = level - coarse_level
        return self.levels[coarse_level].cell_flat(ci >> shift, cj >> shift)

    def cells_in_rect(self, level: int, rect, target_level: int):
        """Level ``target_level`` cells fully contained in a level cell-rect.

        ``rect`` is an inclusive index range (ax, bx, ay, by) of level
        ``level`` cells. Containment is exact integer arithmetic.
        """
        ax, bx, ay, by = rect
        if target_level >= level:
            shift = target_level - level
            rx = range(ax << shift, (bx + 1) << shift)
            ry = range(ay << shift, (by + 1) << shift)
        else:
            # a coarser cell is inside iff all its descendants are
            w = 1 << (level - target_level)
            rx = range((ax + w - 1) // w, (bx + 1) // w)
            ry = range((ay + w - 1) // w, (by + 1) // w)
        space = self.levels[target_level]
        nx, ny = space.ncells
        for cj in ry:
            if not 0 <= cj < ny:
                continue
            for ci in rx:
                if 0 <= ci < nx:
                    yield space.cell_flat(ci, cj)

    # ------------------------------------------------------------------
    # refinement

    def refine_cells(self, marked) -> "LevelHierarchy":
        """Refine marked active cells and return the updated hierarchy.

        Args:
            marked: iterable of (level, flat cell id); all must be active.
        """
        by_level = {}
        for l, c in marked:
            by_level.setdefault(l, set()).add(c)
        for l, cells in by_level.items():
            bad = cells - self.active_cells[l]
            if bad:
                raise HierarchyError(f"cells {sorted(bad)} of level {l} are not active")
        levels = list(self.levels)
        refined = [set(s) for s in self.refined]
        active_cells = [set(s) for s in self.active_cells]
        need_depth = max(by_level, default=-1) + 2
        if need_depth > self.max_depth:
            raise HierarchyError(f"maximum hierarchy depth {self.max_depth} exceeded")
        while len(levels) < need_depth:
            levels.append(levels[-1].refine_dyadic())
            refined.append(set())
            active_cells.append(set())
        new = LevelHierarchy(
            levels[0], max_depth=self.max_depth,
            _state=(levels, refined, active_cells, [set() for _ in levels],
                    [set() for _ in levels]),
        )
        for l in sorted(by_level):
            for c in by_level[l]:
                active_cells[l].discard(c)
                refined[l].add(c)
                active_cells[l + 1].update(new.children(l, c))
        new._recompute_active_funcs()
        return new

    def _recompute_active_funcs(self):
        for l, space in enumerate(self.levels):
            candidates = set()
            relevant = self.active_cells[l] | self.refined[l]
            for c in relevant:
                candidates.update(space.funcs_on_cell(c))
            covered = set()
            active = set()
            for f in candidates:
                ax, bx, ay, by = space.support_cell_rect(f)
                cells = [space.cell_flat(ci, cj)
                         for cj in range(ay, by + 1) for ci in range(ax, bx + 1)]
                if l == 0:
                    is_covered = True
                else:
                    prev = self.refined[l - 1]
                    is_covered = all(self.parent(l, c) in prev for c in cells)
                if not is_covered:
                    continue
                covered.add(f)
                if not all(c in self.refined[l] for c in cells):
                    active.add(f)
            self.covered_funcs[l] = covered
            self.active_funcs[l] = active

    # ------------------------------------------------------------------
    # two-scale blocks and extraction

    def _twoscale(self, level: int, axis: int):
        """1D two-scale matrix from level to level+1 along an axis.

        Cached on the coarse knot vector: level spaces are shared across
        refinements, so the matrices are computed once per level ever.
        """
        kv_c = self.levels[level].kvs[axis]
        kv_f = self.levels[level + 1].kvs[axis]
        cache = getattr(kv_c, "_twoscale_cache", None)
        if cache is None:
            cache = kv_c._twoscale_cache = {}
        key = id(kv_f)
        if key not in cache:
            cache[key] = two_scale_matrix(kv_c, kv_f)
        return cache[key]

    def _local_twoscale_block(self, level: int, cell: int, child: int) -> np.ndarray:
        """Dense two-scale block between the local bases of cell and child."""
        space = self.levels[level]
        fine = self.levels[level + 1]
        ci, cj = space.cell_multi(cell)
        di, dj = fine.cell_multi(child)
        fx_c = space.kvs[0].funcs_on_cell(ci)
        fy_c = space.kvs[1].funcs_on_cell(cj)
        fx_f = fine.kvs[0].funcs_on_cell(di)
        fy_f = fine.kvs[1].funcs_on_cell(dj)
        Cx = self._twoscale(level, 0)[fx_c[0]: fx_c[-1] + 1, fx_f[0]: fx_f[-1] + 1].toarray()
        Cy = self._twoscale(level, 1)[fy_c[0]: fy_c[-1] + 1, fy_f[0]: fy_f[-1] + 1].toarray()
        return np.kron(Cy, Cx)

    def cell_extraction(self, level: int, cell: int, truncated: bool = True):
        """Extraction operator of an active cell.

        Returns (funcs, M) with funcs a list of (lvl, flat id) of the active
        functions acting on the cell and M of shape (len(funcs), nloc) their
        coefficients in the local tensor basis of ``level``. With
        ``truncated`` the coefficients follow the truncation rule: on every
        push to a finer level, components of functions whose support lies in
        that level's subdomain are zeroed.
        """
        key = (level, cell, truncated)
        hit = self._extraction_cache.get(key)
        if hit is not None:
            return hit
        space0 = self.levels[0]
        nloc = (space0.degrees[0] + 1) * (space0.degrees[1] + 1)
        funcs: list[tuple[int, int]] = []
        M = np.zeros((0, nloc))
        chain = [self.ancestor(level, cell, l) for l in range(level)] + [cell]
        for l in range(level + 1):
            J = self.levels[l].funcs_on_cell(chain[l])
            if l > 0:
                S = self._local_twoscale_block(l - 1, chain[l - 1], chain[l])
                M = M @ S
                if truncated and M.shape[0]:
                    cov = self.covered_funcs[l]
                    mask = np.fromiter((int(j) in cov for j in J), bool, count=nloc)
                    M[:, mask] = 0.0
            act = self.active_funcs[l]
            local_active = [idx for idx, j in enumerate(J) if int(j) in act]
            if local_active:
                rows = np.zeros((len(local_active), nloc))
                rows[np.arange(len(local_active)), local_active] = 1.0
                M = np.vstack([M, rows])
                funcs.extend((l, int(J[idx])) for idx in local_active)
        self._extraction_cache[key] = (funcs, M)
        return funcs, M

    # ------------------------------------------------------------------
    # point evaluation

    def active_cell_containing(self, x: float, y: float):
        """(level, cell) of the active cell containing a parametric point."""
        for l in range(self.nlevels):
            c = self.levels[l].cell_containing(x, y)
            if c in self.active_cells[l]:
                return l, c
            if c not in self.refined[l]:
                raise HierarchyError(f"point ({x}, {y}) not in any active cell")
        raise HierarchyError(f"point ({x}, {y}) not in any active cell")

    def eval_basis(self, pts: np.ndarray, level: int, cell: int, k: int = 1,
                   truncated: bool = True):
        """Active-basis values/derivatives at points inside a given cell.

        Returns (funcs, data) where data maps (kx, ky) -> (npts, nfuncs)
        arrays of parametric derivatives of the (truncated) active functions.
        """
        funcs, M = self.cell_extraction(level, cell, truncated)
        _, bdata = self.levels[level].eval_ders(np.atleast_2d(pts), k)
        out = {key: val @ M.T for key, val in bdata.items()}
        return funcs, out

    def eval_thb(self, xi, k: int = 0, truncated: bool = True):
        """All active functions with nonzero (truncated) value at a point.

        Returns a list of ((level, id), value, {derivs}) tuples.
        """
        x, y = float(xi[0]), float(xi[1])
        l, c = self.active_cell_containing(x, y)
        funcs, data = self.eval_basis(np.array([[x, y]]), l, c, k=k, truncated=truncated)
        out = []
        for idx, f in enumerate(funcs):
            ders = {key: float(val[0, idx]) for key, val in data.items()}
            out.append((f, ders[(0, 0)], ders))
        return out

    def truncate(self, level: int, func: int):
        """Truncated two-scale representation of an active function.

        Returns a dict level -> sparse coefficient dict; entry ``level``
        is the unit vector on the function itself, deeper entries hold the
        pushed representation with covered-function components zeroed.
        """
        if func not in self.active_funcs[level]:
            raise HierarchyError("function is not active")
        reps = {level: {func: 1.0}}
        cur = {func: 1.0}
        for m in range(level + 1, self.nlevels):
            if not (self.active_cells[m] or self.refined[m]):
                break
            Cx = self._twoscale(m - 1, 0)
            Cy = self._twoscale(m - 1, 1)
            coarse = self.levels[m - 1]
            nxt: dict[int, float] = {}
            nx_fine = self.levels[m].nfuncs[0]
            for f, v in cur.items():
                i, j = coarse.func_multi(f)
                rx = Cx.getrow(i)
                ry = Cy.getrow(j)
                for jj, vy in zip(ry.indices, ry.data):
                    base = jj * nx_fine
                    for ii, vx in zip(rx.indices, rx.data):
                        g = base + ii
                        nxt[g] = nxt.get(g, 0.0) + v * vy * vx
            cov = self.covered_funcs[m]
            cur = {g: v for g, v in nxt.items() if g not in cov and abs(v) > 1e-300}
            reps[m] = dict(cur)
        return reps

    # ------------------------------------------------------------------
    # admissibility

    def support_extension(self, level: int, cell: int, ext_level: int):
        """Support extension of a cell w.r.t. a coarser level, as a cell rect.

        Union of supports of level ``ext_level`` functions whose support
        contains the ancestor of the cell; returned as an inclusive index
        range (ax, bx, ay, by) of level ``ext_level`` cells.
        """
        space = self.levels[ext_level]
        anc = self.ancestor(level, cell, ext_level) if ext_level < level else cell
        ai, aj = space.cell_multi(anc)
        lo = [None, None]
        hi = [None, None]
        for axis, a in ((0, ai), (1, aj)):
            kv = space.kvs[axis]
            s = kv._span_of_cell[a]
            first, last = None, None
            for f in range(s - kv.p, s + 1):
                if f < 0 or f >= kv.nbasis:
                    continue
                c0, c1 = kv.support_cells(f)
                first = c0 if first is None else min(first, c0)
                last = c1 if last is None else max(last, c1)
            lo[axis], hi[axis] = first, last
        return lo[0], hi[0], lo[1], hi[1]

    def admissibility_closure(self, marked, m: int, expand=None):
        """Enlarge a marked set so refining it keeps class-m admissibility.

        Recursive neighbor marking: marking a level-l cell marks the active
        cells of level l-m+1 overlapping the support extension taken at level
        l-m+2. The optional ``expand`` predicate restricts which cells seed
        neighborhoods (trimmed meshes pass a material test so that ghost
        cells are refined but do not cascade through the exterior).
        """
        if m < 2:
            raise HierarchyError("admissibility class must be >= 2")
        result = set()
        stack = [(l, c) for (l, c) in marked]
        seen = set(stack)
        while stack:
            l, c = stack.pop()
            result.add((l, c))
            if expand is not None and not expand(l, c):
                continue
            k = l - m + 2
            if k <= 0:
                continue
            ax, bx, ay, by = self.support_extension(l, c, k)
            space_k = self.levels[k]
            parents = set()
            for cj in range(ay, by + 1):
                for ci in range(ax, bx + 1):
                    parents.add(self.levels[k - 1].cell_flat(ci // 2, cj // 2))
            for pc in parents:
                if pc in self.active_cells[k - 1] and (k - 1, pc) not in seen:
                    seen.add((k - 1, pc))
                    stack.append((k - 1, pc))
        return result

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict:
        base = self.levels[0]
        return {
            "degrees": [base.kvs[0].p, base.kvs[1].p],
            "knots": [base.kvs[0].knots.tolist(), base.kvs[1].knots.tolist()],
            "max_depth": self.max_depth,
            "refined_cells": [sorted(s) for s in self.refined],
            "active_cells": [sorted(s) for s in self.active_cells],
            "active_functions": [sorted(s) for s in self.active_funcs],
        }

    @classmethod
    def from_dict(cls, data: dict, base: TensorSplineSpace | None = None) -> "LevelHierarchy":
        from .bspline import KnotVector

        if base is None:
            base = TensorSplineSpace(
                KnotVector(data["knots"][0], data["degrees"][0]),
                KnotVector(data["knots"][1], data["degrees"][1]),
            )
        h = cls(base, depth=1, max_depth=data.get("max_depth", 20))
        for l, cells in enumerate(data["refined_cells"]):
            if cells:
                h = h.refine_cells([(l, c) for c in cells])
        for l, cells in enumerate(data["active_cells"]):
            if set(cells) != (h.active_cells[l] if l < h.nlevels else set()):
                raise HierarchyError("serialized active cells are inconsistent")
        for l, funcs in enumerate(data["active_functions"]):
            if set(funcs) != (h.active_funcs[l] if l < h.nlevels else set()):
                raise HierarchyError("serialized active functions are inconsistent")
        return h


def build_hierarchy(base: TensorSplineSpace, depth: int = 1, max_depth: int = 20) -> LevelHierarchy:
    """Fresh hierarchy: level 0 fully active, finer levels empty."""
    return LevelHierarchy(base, depth=depth, max_depth=max_depth)
