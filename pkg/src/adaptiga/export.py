"""Result export: legacy VTK meshes, CSV tables, matrix dumps, geometry IO.

Cut cells are exported through their quadrature sub-element decomposition,
full cells as single quads. Vertex data carries the solution components
(plus a von Mises field for elasticity and shells); cell data carries the
hierarchy level, the error indicator and the cut classification.
"""

from __future__ import annotations

import json

import numpy as np

from .bspline import GeometryMap, KnotVector, TensorSplineSpace
from .physics import shell_geometry
from .trimming import CellClass, ParamCurve, TrimmedDomain, TrimmingLoop


def geometry_to_dict(geo: GeometryMap, td: TrimmedDomain | None = None) -> dict:
    out = {
        "degree": [geo.space.kvs[0].p, geo.space.kvs[1].p],
        "knots": [geo.space.kvs[0].knots.tolist(), geo.space.kvs[1].knots.tolist()],
        "control_points": geo.control_points.tolist(),
        "dimension": geo.d,
    }
    if geo.weights is not None:
        out["weights"] = geo.weights.tolist()
    if td is not None and not td.trivial:
        loops = []
        for loop in td.loops:
            curves = []
            for c in loop.curves:
                entry = {
                    "degree": c.kv.p,
                    "knots": c.kv.knots.tolist(),
                    "control_points": c.control.tolist(),
                }
                if c.weights is not None:
                    entry["weights"] = c.weights.tolist()
                curves.append(entry)
            loops.append({"curves": curves})
        out["trimming_loops"] = loops
    return out


def geometry_from_dict(data: dict):
    """Load a geometry map (and trimming loops) from the JSON schema.

    Knot vectors are normalized to [0, 1]; trimming curves are expected in
    the normalized parametric square with material to the left.
    """
    kvs = [KnotVector(np.asarray(k, float), p).normalized()
           for k, p in zip(data["knots"], data["degree"])]
    space = TensorSplineSpace(kvs[0], kvs[1])
    geo = GeometryMap(space, np.asarray(data["control_points"], float),
                      np.asarray(data["weights"], float) if "weights" in data else None)
    loops = []
    for loop in data.get("trimming_loops", []):
        curves = [
            ParamCurve(c["degree"], c["knots"], c["control_points"],
                       c.get("weights"))
            for c in loop["curves"]
        ]
        loops.append(TrimmingLoop(curves))
    return geo, TrimmedDomain(loops)


def save_geometry(path, geo: GeometryMap, td: TrimmedDomain | None = None):
    with open(path, "w") as fh:
        json.dump(geometry_to_dict(geo, td), fh, indent=1)


def load_geometry(path):
    with open(path) as fh:
        return geometry_from_dict(json.load(fh))


def dump_matrix_coo(path, K, rhs=None):
    """Coordinate text format: header, then 'i j value' lines."""
    K = K.tocoo()
    with open(path, "w") as fh:
        fh.write(f"% symmetric sparse matrix {K.shape[0]} x {K.shape[1]} nnz {K.nnz}\n")
        for i, j, v in zip(K.row, K.col, K.data):
            fh.write(f"{i} {j} {v:.17g}\n")
        if rhs is not None:
            fh.write(f"% rhs {len(rhs)}\n")
            for v in rhs:
                fh.write(f"{v:.17g}\n")


def quadrature_points_csv(path, rules):
    """Debug dump of all quadrature points and weights."""
    with open(path, "w") as fh:
        fh.write("level,cell,x,y,weight\n")
        for (l, c), rule in sorted(rules.items()):
            for (x, y), w in zip(rule.points, rule.weights):
                fh.write(f"{l},{c},{x:.16g},{y:.16g},{w:.16g}\n")


def _von_mises(spec, field, params):
    """Pointwise von Mises stress for elasticity / shell solutions."""
    from .assembly import MeshContext, _cell_basis, _group_by_cell

    params = np.atleast_2d(params)
    out = np.zeros(len(params))
    kernel = spec.kernel()
    for (grp, pts, idx) in _group_by_cell(field.hierarchy, params):
        l, c = grp
        if spec.kind == "elasticity":
            funcs, basis = _cell_basis(field.hierarchy, l, c, pts, 1, field.dofmap)
            loc = field.local_coeffs(l, c, funcs)
            geo_out = spec.geometry.evaluate(pts, order=1)
            geo_out["det"] = spec.geometry.jacobian_det(geo_out["jac"])
            sig = kernel.stress(basis, geo_out, loc)
            sxx, syy, sxy = sig[:, 0], sig[:, 1], sig[:, 2]
            szz = spec.material.nu * (sxx + syy) if not spec.material.plane_stress \
                else np.zeros_like(sxx)
            out[idx] = np.sqrt(
                0.5 * ((sxx - syy) ** 2 + (syy - szz) ** 2 + (szz - sxx) ** 2)
                + 3 * sxy**2
            )
        else:
            funcs, basis = _cell_basis(field.hierarchy, l, c, pts, 2, field.dofmap)
            loc = field.local_coeffs(l, c, funcs)
            geo_out = spec.geometry.evaluate(pts, order=2)
            sg = shell_geometry(geo_out, spec.material)
            eps, kap, nres, mres = kernel.strain_stress(basis, sg, loc)
            t = spec.material.thickness
            # outer-fiber physical stress in the contravariant frame
            stress = nres / t + 6.0 * mres / t**2
            # convert the contravariant components to an orthonormal frame
            a1, a2 = sg.a1, sg.a2
            e1 = a1 / np.linalg.norm(a1, axis=1)[:, None]
            e2t = a2 - np.einsum("pi,pi->p", a2, e1)[:, None] * e1
            e2 = e2t / np.linalg.norm(e2t, axis=1)[:, None]
            g = np.stack([
                np.stack([np.einsum("pi,pi->p", a1, e1),
                          np.einsum("pi,pi->p", a1, e2)], axis=1),
                np.stack([np.einsum("pi,pi->p", a2, e1),
                          np.einsum("pi,pi->p", a2, e2)], axis=1),
            ], axis=1)  # (p, alpha, k): a_alpha . e_k
            S = np.zeros((len(pts), 2, 2))
            S[:, 0, 0] = stress[:, 0]
            S[:, 1, 1] = stress[:, 1]
            S[:, 0, 1] = S[:, 1, 0] = stress[:, 2]
            phys = np.einsum("pak,pab,pbl->pkl", g, S, g)
            sxx, syy, sxy = phys[:, 0, 0], phys[:, 1, 1], phys[:, 0, 1]
            out[idx] = np.sqrt(sxx**2 - sxx * syy + syy**2 + 3 * sxy**2)
    return out


def export_vtk(path, field, indicators=None):
    """Legacy ASCII VTK unstructured grid of the trimmed hierarchical mesh."""
    spec = field.spec
    h = field.hierarchy
    ts = field.trimmed
    verts = []
    cells = []
    cell_types = []
    cell_level = []
    cell_eta = []
    cell_cut = []
    eta = indicators.eta if indicators is not None else {}
    from .quadrature import build_mesh_rules

    rules = getattr(field, "_export_rules", None)
    for (l, c) in ts.cells:
        info = ts.classes[(l, c)]
        x0, x1, y0, y1 = h.cell_rect(l, c)
        if info.cls is CellClass.CUT:
            from .quadrature import cut_cell_rule

            rule = cut_cell_rule(spec.trimming, (x0, x1, y0, y1), 2, info=info)
            polys = [q for q in rule.subcells if len(q) >= 3]
        else:
            polys = [np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])]
        for poly in polys:
            start = len(verts)
            verts.extend(poly.tolist())
            cells.append([start + k for k in range(len(poly))])
            cell_types.append(9 if len(poly) == 4 else 5 if len(poly) == 3 else 7)
            cell_level.append(l)
            cell_eta.append(eta.get((l, c), 0.0))
            cell_cut.append({CellClass.INTERIOR: 0, CellClass.CUT: 1,
                             CellClass.EXTERIOR: 2}[info.cls])
    verts = np.array(verts)
    phys = spec.geometry.evaluate(verts, order=0)["x"]
    if phys.shape[1] == 2:
        phys = np.column_stack([phys, np.zeros(len(phys))])
    sol = field.evaluate(verts)
    vm = None
    if spec.kind in ("elasticity", "shell"):
        vm = _von_mises(spec, field, verts)
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nadaptiga export\nASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(phys)} double\n")
        for pnt in phys:
            fh.write(f"{pnt[0]:.12g} {pnt[1]:.12g} {pnt[2]:.12g}\n")
        total = sum(len(cc) + 1 for cc in cells)
        fh.write(f"CELLS {len(cells)} {total}\n")
        for cc in cells:
            fh.write(" ".join(str(v) for v in [len(cc)] + cc) + "\n")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        for t in cell_types:
            fh.write(f"{t}\n")
        fh.write(f"POINT_DATA {len(phys)}\n")
        nc = sol.shape[1]
        if nc == 1:
            fh.write("SCALARS solution double 1\nLOOKUP_TABLE default\n")
            for v in sol[:, 0]:
                fh.write(f"{v:.12g}\n")
        else:
            fh.write(f"VECTORS solution double\n")
            for row in sol:
                v = list(row) + [0.0] * (3 - nc)
                fh.write(f"{v[0]:.12g} {v[1]:.12g} {v[2]:.12g}\n")
        if vm is not None:
            fh.write("SCALARS von_mises double 1\nLOOKUP_TABLE default\n")
            for v in vm:
                fh.write(f"{v:.12g}\n")
        fh.write(f"CELL_DATA {len(cells)}\n")
        fh.write("SCALARS level int 1\nLOOKUP_TABLE default\n")
        for v in cell_level:
            fh.write(f"{v}\n")
        fh.write("SCALARS eta double 1\nLOOKUP_TABLE default\n")
        for v in cell_eta:
            fh.write(f"{v:.12g}\n")
        fh.write("SCALARS cut int 1\nLOOKUP_TABLE default\n")
        for v in cell_cut:
            fh.write(f"{v}\n")
    return path
