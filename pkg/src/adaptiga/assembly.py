"""Global assembly on the trimmed hierarchical mesh, constraints and solve.

Element contributions are accumulated over the material active cells; cut
cells integrate with their material sub-rules only. Dirichlet data is imposed
strongly through an L2 projection of the trace onto the edge-active
functions, eliminated symmetrically. The solve applies symmetric diagonal
scaling (a Jacobi preconditioner in disguise) before a sparse direct
factorization or conjugate gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .physics import BasisTable, EDGE_NAMES, ProblemSpec, shell_geometry
from .quadrature import background_edge_rule, gauss_rule, trim_curve_rule
from .trimming import CellClass


class AssemblyError(RuntimeError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass
class DofMap:
    """Active functions (level-major, lexicographic) times components."""

    functions: list
    ncomp: int

    def __post_init__(self):
        self.index = {f: i for i, f in enumerate(self.functions)}
        self.ndof = len(self.functions) * self.ncomp

    def dof(self, level: int, func: int, comp: int = 0) -> int:
        return self.index[(level, func)] * self.ncomp + comp


@dataclass
class LinearSystem:
    K: sp.csr_matrix
    rhs: np.ndarray
    dofmap: DofMap
    fixed: dict          # dof -> prescribed value


@dataclass
class SolutionField:
    """Coefficients over the trimmed THB basis, with evaluation helpers."""

    spec: ProblemSpec
    hierarchy: object
    trimmed: object
    dofmap: DofMap
    coeffs: np.ndarray

    def local_coeffs(self, level: int, cell: int, funcs):
        """Component-major local coefficient vector for a cell's functions."""
        nc = self.dofmap.ncomp
        out = np.zeros(nc * len(funcs))
        for k, f in enumerate(funcs):
            idx = self.dofmap.index.get(f)
            if idx is None:
                continue
            for c in range(nc):
                out[c * len(funcs) + k] = self.coeffs[idx * nc + c]
        return out

    def evaluate(self, params):
        """Solution components at parametric points, shape (n, ncomp)."""
        params = np.atleast_2d(np.asarray(params, float))
        nc = self.dofmap.ncomp
        out = np.zeros((len(params), nc))
        for grp, pts, idx in _group_by_cell(self.hierarchy, params):
            level, cell = grp
            funcs, data = self.hierarchy.eval_basis(pts, level, cell, k=0)
            loc = self.local_coeffs(level, cell, funcs)
            nf = len(funcs)
            for c in range(nc):
                out[idx, c] = data[(0, 0)] @ loc[c * nf: (c + 1) * nf]
        return out


def _group_by_cell(h, params):
    """Group parametric points by the active cell containing them."""
    buckets = {}
    for i, (x, y) in enumerate(params):
        key = h.active_cell_containing(min(max(x, 0.0), 1.0), min(max(y, 0.0), 1.0))
        buckets.setdefault(key, []).append(i)
    for key, idx in buckets.items():
        yield key, params[idx], np.array(idx)


def _extraction_rows(h, level, cell, dofmap):
    """Extraction rows restricted to dof-mapped functions.

    Functions filtered away by trimming must not act on material cells;
    their rows are checked to vanish and dropped.
    """
    funcs, M = h.cell_extraction(level, cell)
    keep, Mkeep = [], []
    for row, f in enumerate(funcs):
        if f in dofmap.index:
            keep.append(f)
            Mkeep.append(M[row])
        elif np.max(np.abs(M[row])) > 1e-12:
            raise AssemblyError(f"trim-filtered function {f} acts on material cell")
    return keep, np.array(Mkeep)


def _basis_from_bdata(bdata, M, order):
    N = bdata[(0, 0)] @ M.T
    dN = (bdata[(1, 0)] @ M.T, bdata[(0, 1)] @ M.T)
    d2N = None
    if order >= 2:
        d2N = (bdata[(2, 0)] @ M.T, bdata[(0, 2)] @ M.T, bdata[(1, 1)] @ M.T)
    return BasisTable(N=N, dN=dN, d2N=d2N)


def _cell_basis(h, level, cell, pts, order, dofmap):
    """BasisTable of the dof-mapped active functions on one cell."""
    keep, M = _extraction_rows(h, level, cell, dofmap)
    _, bdata = h.levels[level].eval_ders(pts, order)
    return keep, _basis_from_bdata(bdata, M, order)


def _full_cell_bdata(space, ci, cj, q, order):
    """Tensor basis tables on a full Gauss rule from cached 1D tables."""
    tx = space.kvs[0].gauss_table(q, order)[ci]   # (q, k+1, px+1)
    ty = space.kvs[1].gauss_table(q, order)[cj]
    n = q * q
    bdata = {}
    for kx in range(order + 1):
        for ky in range(order + 1 - kx):
            arr = np.einsum("yj,xi->yxji", ty[:, ky, :], tx[:, kx, :])
            bdata[(kx, ky)] = arr.reshape(n, -1)
    return bdata


class MeshContext:
    """Shared per-iteration cache of basis tables and geometry data.

    Assembly, error estimation and norm evaluation all integrate over the
    same cell rules, so the tables are computed once per (cell, order).
    """

    def __init__(self, spec, h, ts, rules, dofmap):
        self.spec = spec
        self.h = h
        self.ts = ts
        self.rules = rules
        self.dofmap = dofmap
        self.kernel = spec.kernel()
        self._basis = {}
        # geometry data only depends on (level, cell, rule order), so it
        # survives refinement; keep it on the spec
        if not hasattr(spec, "_geo_cache"):
            spec._geo_cache = {}
        self._geo = spec._geo_cache

    def basis(self, l, c, order):
        key = (l, c, order)
        hit = self._basis.get(key)
        if hit is None:
            rule = self.rules[(l, c)]
            keep, M = _extraction_rows(self.h, l, c, self.dofmap)
            if rule.tag == "full" and rule.q is not None:
                space = self.h.levels[l]
                ci, cj = space.cell_multi(c)
                bdata = _full_cell_bdata(space, ci, cj, rule.q, order)
            else:
                _, bdata = self.h.levels[l].eval_ders(rule.points, order)
            hit = (keep, _basis_from_bdata(bdata, M, order))
            self._basis[key] = hit
        return hit

    def geo(self, l, c):
        key = (l, c, self.spec.kind, len(self.rules[(l, c)].weights))
        hit = self._geo.get(key)
        if hit is None:
            hit = _geometry_data(self.spec, self.rules[(l, c)].points, self.kernel)
            self._geo[key] = hit
        return hit

    def phys_x(self, l, c):
        out, _ = self.geo(l, c)
        return out["x"]


def _geometry_data(spec, pts, kernel):
    order = 2 if spec.kind == "shell" else 1
    out = spec.geometry.evaluate(pts, order=order)
    if spec.kind == "shell":
        sg = shell_geometry(out, spec.material)
        return out, sg
    out["det"] = spec.geometry.jacobian_det(out["jac"])
    return out, out


def _edge_pushforward(spec, br):
    """Physical positions, arc weights and outward normals of an edge rule."""
    out = spec.geometry.evaluate(br.points, order=1)
    jac = out["jac"]
    tang_phys = np.einsum("pij,pj->pi", jac, br.tangents)
    ds = np.linalg.norm(tang_phys, axis=1)
    w_phys = br.weights * ds
    if spec.geometry.d == 2:
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        nx = (jac[:, 1, 1] * br.normals[:, 0] - jac[:, 1, 0] * br.normals[:, 1]) / det
        ny = (-jac[:, 0, 1] * br.normals[:, 0] + jac[:, 0, 0] * br.normals[:, 1]) / det
        nrm = np.stack([nx, ny], axis=1)
        nrm /= np.linalg.norm(nrm, axis=1)[:, None]
    else:
        nrm = None
    return out["x"], w_phys, nrm


def _scatter(K_rows, K_cols, K_vals, rhs, K_el, f_el, gdofs):
    n = len(gdofs)
    gi = np.repeat(gdofs, n)
    gj = np.tile(gdofs, n)
    K_rows.append(gi)
    K_cols.append(gj)
    K_vals.append(K_el.ravel())
    if f_el is not None:
        np.add.at(rhs, gdofs, f_el)


def assemble(spec: ProblemSpec, h, ts, rules, quad_boundary: int | None = None,
             ctx: MeshContext | None = None) -> LinearSystem:
    """Assemble the stiffness matrix and load vector.

    Args:
        spec: problem definition.
        h: LevelHierarchy.
        ts: TrimmedActiveSets from active_with_trimming.
        rules: dict (level, cell) -> CellQuadrature.
        quad_boundary: points for edge rules (default max degree + 2).
        ctx: optional shared MeshContext (created if absent).
    """
    kernel = spec.kernel()
    nc = kernel.ncomp
    if ctx is None:
        dofmap = DofMap(functions=list(ts.functions), ncomp=nc)
        ctx = MeshContext(spec, h, ts, rules, dofmap)
    dofmap = ctx.dofmap
    rhs = np.zeros(dofmap.ndof)
    K_rows, K_cols, K_vals = [], [], []
    if quad_boundary is None:
        quad_boundary = max(h.levels[0].degrees) + 2
    order = 2 if spec.kind == "shell" else 1

    for (l, c) in ts.cells:
        rule = rules[(l, c)]
        if rule.weights.size == 0:
            continue
        funcs, basis = ctx.basis(l, c, order)
        nf = len(funcs)
        gdofs = np.array([dofmap.dof(lv, f, cc) for cc in range(nc) for (lv, f) in funcs])
        _, geo = ctx.geo(l, c)
        K_el = kernel.stiffness(basis, basis, geo, rule.weights)
        f_el = None
        if spec.body_load is not None:
            if spec.kind == "shell":
                f_el = kernel.body_load(basis, geo, rule.weights, spec.body_load,
                                        ctx.phys_x(l, c))
            else:
                f_el = kernel.body_load(basis, geo, rule.weights, spec.body_load)
        _scatter(K_rows, K_cols, K_vals, rhs, K_el, f_el, gdofs)

    _assemble_neumann(spec, h, ts, dofmap, rhs, quad_boundary)
    _assemble_point_loads(spec, h, dofmap, rhs)

    K = sp.coo_matrix(
        (np.concatenate(K_vals), (np.concatenate(K_rows), np.concatenate(K_cols))),
        shape=(dofmap.ndof, dofmap.ndof),
    ).tocsr()
    return LinearSystem(K=K, rhs=rhs, dofmap=dofmap, fixed={})


def _boundary_cells(h, ts, edge: int):
    """Material active cells with an edge on the given background edge."""
    out = []
    for (l, c) in ts.cells:
        x0, x1, y0, y1 = h.cell_rect(l, c)
        on = {0: abs(y0) < 1e-13, 1: abs(x1 - 1) < 1e-13,
              2: abs(y1 - 1) < 1e-13, 3: abs(x0) < 1e-13}[edge]
        if on:
            out.append((l, c))
    return out


def _assemble_neumann(spec, h, ts, dofmap, rhs, q):
    kernel = spec.kernel()
    nc = kernel.ncomp
    td = spec.trimming
    for edge_name, g in spec.neumann.items():
        edge = EDGE_NAMES[edge_name]
        axis = 0 if edge in (0, 2) else 1
        for (l, c) in _boundary_cells(h, ts, edge):
            rect = h.cell_rect(l, c)
            lo, hi = (rect[0], rect[1]) if axis == 0 else (rect[2], rect[3])
            br = background_edge_rule(td, edge, lo, hi, q)
            if br.weights.size == 0:
                continue
            _add_edge_load(spec, h, dofmap, rhs, l, c, br, g, kernel)
    if spec.trimmed_neumann is not None:
        for (l, c) in ts.cells:
            info = ts.classes[(l, c)]
            if info.cls is not CellClass.CUT:
                continue
            cr = trim_curve_rule(td, info, q)
            if cr.weights.size == 0:
                continue
            _add_edge_load(spec, h, dofmap, rhs, l, c, cr, spec.trimmed_neumann,
                           kernel, with_normal=True)


def _add_edge_load(spec, h, dofmap, rhs, l, c, br, g, kernel, with_normal=False):
    funcs, basis = _cell_basis(h, l, c, br.points, 1, dofmap)
    x, w_phys, nrm = _edge_pushforward(spec, br)
    nc = kernel.ncomp
    if with_normal:
        data = lambda geo: g(x, nrm)
    else:
        data = lambda geo: g(x)
    f_el = kernel.edge_load(basis, x, w_phys, data)
    gdofs = np.array([dofmap.dof(lv, f, cc) for cc in range(nc) for (lv, f) in funcs])
    np.add.at(rhs, gdofs, f_el)


def _assemble_point_loads(spec, h, dofmap, rhs):
    nc = spec.ncomp
    for (pt, vec) in spec.point_loads:
        l, c = h.active_cell_containing(pt[0], pt[1])
        funcs, data = h.eval_basis(np.array([pt]), l, c, k=0)
        for k, f in enumerate(funcs):
            if f not in dofmap.index:
                continue
            for cc in range(nc):
                rhs[dofmap.dof(f[0], f[1], cc)] += vec[cc] * data[(0, 0)][0, k]


def impose_dirichlet(system: LinearSystem, spec: ProblemSpec, h, ts,
                     q: int | None = None) -> LinearSystem:
    """Fix boundary coefficients via an L2 trace projection per edge."""
    if q is None:
        q = max(h.levels[0].degrees) + 2
    dofmap = system.dofmap
    nc = dofmap.ncomp
    td = spec.trimming
    fixed = dict(system.fixed)
    for edge_name, (value_fn, mask) in spec.dirichlet.items():
        edge = EDGE_NAMES[edge_name]
        axis = 0 if edge in (0, 2) else 1
        pieces = []
        for (l, c) in _boundary_cells(h, ts, edge):
            rect = h.cell_rect(l, c)
            lo, hi = (rect[0], rect[1]) if axis == 0 else (rect[2], rect[3])
            br = background_edge_rule(td, edge, lo, hi, q)
            if br.weights.size == 0:
                continue
            funcs, basis = _cell_basis(h, l, c, br.points, 1, dofmap)
            x, w_phys, _ = _edge_pushforward(spec, br)
            pieces.append((funcs, basis.N, w_phys, x))
        if not pieces:
            continue
        maxvals: dict = {}
        for funcs, N, _, _ in pieces:
            for k, f in enumerate(funcs):
                maxvals[f] = max(maxvals.get(f, 0.0), float(np.max(np.abs(N[:, k]))))
        active = sorted(f for f, v in maxvals.items() if v > 1e-12)
        if not active:
            continue
        col = {f: i for i, f in enumerate(active)}
        n = len(active)
        Mmat = np.zeros((n, n))
        bvec = np.zeros((n, nc))
        for funcs, N, w, x in pieces:
            cols = [col.get(f) for f in funcs]
            vals = np.asarray(value_fn(x), dtype=float)
            if vals.ndim == 1:
                vals = vals[:, None]
            for a, fa in enumerate(funcs):
                ia = cols[a]
                if ia is None:
                    continue
                wNa = w * N[:, a]
                for b, fb in enumerate(funcs):
                    ib = cols[b]
                    if ib is not None:
                        Mmat[ia, ib] += wNa @ N[:, b]
                for ccomp in range(nc):
                    if mask[ccomp]:
                        bvec[ia, ccomp] += wNa @ vals[:, min(ccomp, vals.shape[1] - 1)]
        coef, *_ = np.linalg.lstsq(Mmat, bvec, rcond=1e-12)
        for f, i in col.items():
            for ccomp in range(nc):
                if mask[ccomp]:
                    fixed[dofmap.dof(f[0], f[1], ccomp)] = coef[i, ccomp]
    return LinearSystem(K=system.K, rhs=system.rhs, dofmap=dofmap, fixed=fixed)


def scale_and_solve(system: LinearSystem, method: str = "direct",
                    cg_tol: float = 1e-12) -> np.ndarray:
    """Solve the constrained system with symmetric diagonal scaling.

    Returns the full coefficient vector including the fixed dofs.
    """
    n = system.dofmap.ndof
    fixed_idx = np.array(sorted(system.fixed), dtype=int)
    fixed_val = np.array([system.fixed[i] for i in fixed_idx])
    free = np.setdiff1d(np.arange(n), fixed_idx)
    K = system.K
    b = system.rhs[free]
    if fixed_idx.size:
        b = b - K[free][:, fixed_idx] @ fixed_val
    Kff = K[free][:, free].tocsc()
    d = np.asarray(Kff.diagonal())
    if np.any(d <= 0):
        raise SolverError("non-positive diagonal entry; system not SPD")
    s = 1.0 / np.sqrt(d)
    S = sp.diags(s)
    Ks = (S @ Kff @ S).tocsc()
    bs = s * b
    if method == "direct":
        try:
            lu = spla.splu(Ks)
            ys = lu.solve(bs)
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
    elif method == "cg":
        ys, info = spla.cg(Ks, bs, rtol=cg_tol, maxiter=10 * len(bs))
        if info != 0:
            raise SolverError(f"CG did not converge (info={info})")
    else:
        raise ValueError(f"unknown solver {method!r}")
    u = np.zeros(n)
    u[free] = s * ys
    if fixed_idx.size:
        u[fixed_idx] = fixed_val
    return u


def solve_problem(spec: ProblemSpec, h, ts, rules, method: str = "direct",
                  ctx: MeshContext | None = None) -> SolutionField:
    system = assemble(spec, h, ts, rules, ctx=ctx)
    system = impose_dirichlet(system, spec, h, ts)
    coeffs = scale_and_solve(system, method=method)
    return SolutionField(spec=spec, hierarchy=h, trimmed=ts, dofmap=system.dofmap,
                         coeffs=coeffs)


# ----------------------------------------------------------------------
# norms


def energy_norm_error(field: SolutionField, reference, rules,
                      ctx: MeshContext | None = None) -> float:
    """Energy norm of (reference - field) over the material region.

    ``reference`` is an exact-solution object (with gradient / stress data)
    or None (gives the energy norm of the field itself).
    """
    spec = field.spec
    kernel = spec.kernel()
    if ctx is None:
        ctx = MeshContext(spec, field.hierarchy, field.trimmed, rules, field.dofmap)
    total = 0.0
    order = 2 if spec.kind == "shell" else 1
    for (l, c) in field.trimmed.cells:
        rule = rules[(l, c)]
        if rule.weights.size == 0:
            continue
        funcs, basis = ctx.basis(l, c, order)
        loc = field.local_coeffs(l, c, funcs)
        _, geo = ctx.geo(l, c)
        wd = rule.weights * (geo["det"] if spec.kind != "shell" else geo.jdet)
        if spec.kind == "poisson":
            gx, gy = _field_gradient(basis, geo, loc)
            if reference is not None:
                gex = reference.gradient(ctx.phys_x(l, c))
                gx = gx - gex[:, 0]
                gy = gy - gex[:, 1]
            total += np.sum(wd * (gx**2 + gy**2))
        elif spec.kind == "elasticity":
            B = kernel._bmatrix(basis, geo)
            strain = np.einsum("pij,j->pi", B, loc)
            if reference is not None:
                gex = reference.gradient(ctx.phys_x(l, c))
                sex = np.stack([gex[:, 0, 0], gex[:, 1, 1],
                                gex[:, 0, 1] + gex[:, 1, 0]], axis=1)
                strain = strain - sex
            total += np.sum(wd * np.einsum("pi,ij,pj->p", strain, kernel.D, strain))
        else:
            eps, kap, nres, mres = kernel.strain_stress(basis, geo, loc)
            if reference is not None:
                raise ValueError("shell errors use shell_energy_error against a field")
            total += np.sum(wd * (np.einsum("pi,pi->p", eps, nres)
                                  + np.einsum("pi,pi->p", kap, mres)))
    return float(np.sqrt(max(total, 0.0)))


def _field_gradient(basis, geo, loc):
    from .physics import physical_gradients

    gx, gy = physical_gradients(basis, geo["jac"])
    return gx @ loc, gy @ loc


def h1_norm_error(field: SolutionField, reference, rules,
                  ctx: MeshContext | None = None) -> float:
    """Full H1 error against an exact solution (Poisson only)."""
    spec = field.spec
    if ctx is None:
        ctx = MeshContext(spec, field.hierarchy, field.trimmed, rules, field.dofmap)
    total = 0.0
    for (l, c) in field.trimmed.cells:
        rule = rules[(l, c)]
        if rule.weights.size == 0:
            continue
        funcs, basis = ctx.basis(l, c, 1)
        loc = field.local_coeffs(l, c, funcs)
        _, geo = ctx.geo(l, c)
        wd = rule.weights * geo["det"]
        gx, gy = _field_gradient(basis, geo, loc)
        vals = basis.N @ loc
        x = ctx.phys_x(l, c)
        gex = reference.gradient(x)
        vex = reference.value(x)
        total += np.sum(wd * ((gx - gex[:, 0]) ** 2 + (gy - gex[:, 1]) ** 2
                              + (vals - vex) ** 2))
    return float(np.sqrt(total))


def shell_strains_at(field: SolutionField, params):
    """Membrane and bending strain rows of a shell field at parametric points."""
    spec = field.spec
    kernel = spec.kernel()
    params = np.atleast_2d(params)
    eps = np.zeros((len(params), 3))
    kap = np.zeros((len(params), 3))
    for (grp, pts, idx) in _group_by_cell(field.hierarchy, params):
        l, c = grp
        funcs, basis = _cell_basis(field.hierarchy, l, c, pts, 2, field.dofmap)
        loc = field.local_coeffs(l, c, funcs)
        out = spec.geometry.evaluate(pts, order=2)
        sg = shell_geometry(out, spec.material)
        e, k, _, _ = kernel.strain_stress(basis, sg, loc)
        eps[idx] = e
        kap[idx] = k
    return eps, kap


def shell_energy_error(field: SolutionField, reference: SolutionField,
                       reference_rules) -> float:
    """Energy norm of (reference - field) over the reference mesh rules.

    Both fields are evaluated pointwise at the reference rule points, so the
    meshes need not match (dyadic hierarchies keep the integrand piecewise
    smooth per reference cell).
    """
    spec = reference.spec
    t = spec.material.thickness
    total = 0.0
    rules_iter = reference_rules.values() if hasattr(reference_rules, "values") \
        else reference_rules
    for rule in rules_iter:
        if rule.weights.size == 0:
            continue
        pts = rule.points
        out = spec.geometry.evaluate(pts, order=2)
        sg = shell_geometry(out, spec.material)
        e1, k1 = shell_strains_at(field, pts)
        e2, k2 = shell_strains_at(reference, pts)
        de, dk = e2 - e1, k2 - k1
        wd = rule.weights * sg.jdet
        total += np.sum(wd * t * np.einsum("pi,pij,pj->p", de, sg.Dmat, de))
        total += np.sum(wd * t**3 / 12 * np.einsum("pi,pij,pj->p", dk, sg.Dmat, dk))
    return float(np.sqrt(max(total, 0.0)))
