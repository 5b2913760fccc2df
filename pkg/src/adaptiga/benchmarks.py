"""Benchmark problem definitions and reference-solution machinery.

The four study problems: the singular Poisson problem on a trimmed strip,
the elastic plate with a circular hole (Kirsch solution), and two trimmed
Scordelis-Lo roof variants (elliptic hole under self-weight; four holes
under a central point load). Hole centers and radii for the shell cases are
configuration defaults, so shell acceptance compares adaptive against
uniform runs on the same geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assembly import energy_norm_error, shell_energy_error, solve_problem
from .bspline import GeometryMap, KnotVector, TensorSplineSpace, identity_map, scaling_map
from .hierarchy import build_hierarchy
from .physics import (
    MaterialParams,
    PlateWithHoleExact,
    PolyPoissonExact,
    ProblemSpec,
    SinePoissonExact,
    SingularPoissonExact,
)
from .quadrature import build_mesh_rules
from .trimming import (
    TrimmedDomain,
    active_with_trimming,
    circle_hole_loop,
    corner_disk_loop,
    ellipse_hole_loop,
    strip_above_loop,
)


def uniform_square_space(n: int, p: int) -> TensorSplineSpace:
    kv = KnotVector(np.concatenate([[0.0] * p, np.linspace(0, 1, n + 1), [1.0] * p]), p)
    return TensorSplineSpace(kv, kv)


def cylinder_map(radius: float = 25.0, length: float = 50.0,
                 half_angle_deg: float = 40.0) -> GeometryMap:
    """Exact rational cylinder segment: xi runs along the arc, eta axially.

    The crown sits at the top (z = radius); x spans the width, y the axis.
    """
    a = np.radians(half_angle_deg)
    kx = KnotVector([0, 0, 0, 1, 1, 1], 2)
    ky = KnotVector([0, 0, 1, 1], 1)
    space = TensorSplineSpace(kx, ky)
    angs = [np.pi / 2 + a, np.pi / 2, np.pi / 2 - a]
    p0 = radius * np.array([np.cos(angs[0]), np.sin(angs[0])])
    p2 = radius * np.array([np.cos(angs[2]), np.sin(angs[2])])
    pm = radius / np.cos(a) * np.array([np.cos(angs[1]), np.sin(angs[1])])
    arc = np.array([p0, pm, p2])
    w = np.array([1.0, np.cos(a), 1.0])
    pts, wts = [], []
    for y in (0.0, length):
        for (x, z), wi in zip(arc, w):
            pts.append([x, y, z])
            wts.append(wi)
    return GeometryMap(space, np.array(pts), np.array(wts))


SCORDELIS = dict(radius=25.0, length=50.0, half_angle_deg=40.0,
                 E=4.32e8, nu=0.0, thickness=0.25, f_z=-90.0)


@dataclass
class Benchmark:
    """A ready-to-run problem with its error metric and defaults."""

    name: str
    spec: ProblemSpec
    base_n: int
    gamma: float = 0.5
    error_fn: object = None        # (field, rules, ctx=None) -> float
    point_metric: object = None    # (field) -> float, for displacement studies
    exact = None


def singular_poisson(p: int, base_n: int = 8, eps: float = 1e-5,
                     alpha: float = 2.4) -> Benchmark:
    """Trimmed strip [0,1] x [0, 0.75+eps], exact u = x^a y^a."""
    exact = SingularPoissonExact(alpha)
    td = TrimmedDomain([strip_above_loop(0.75 + eps)])

    def g_right(x):
        return exact.gradient(x)[:, 0]

    def g_trim(x, n):
        g = exact.gradient(x)
        return g[:, 0] * n[:, 0] + g[:, 1] * n[:, 1]

    spec = ProblemSpec(
        "poisson", identity_map(), td,
        dirichlet={"left": (exact.value, (True,)),
                   "bottom": (exact.value, (True,))},
        neumann={"right": g_right},
        trimmed_neumann=g_trim,
        body_load=exact.source,
        exact=exact,
    )

    def err(field, rules, ctx=None):
        return energy_norm_error(field, exact, rules, ctx)

    b = Benchmark(name="singular_poisson", spec=spec, base_n=base_n, error_fn=err)
    b.exact = exact
    return b


def plate_with_hole(p: int, base_n: int = 4, L: float = 4.0, R: float = 1.0,
                    T_x: float = 10.0, E: float = 1e5, nu: float = 0.3) -> Benchmark:
    """Quarter plate [0,L]^2 with a quarter hole of radius R at the corner."""
    mat = MaterialParams(E=E, nu=nu)
    exact = PlateWithHoleExact(mat, T_x=T_x, R=R)
    td = TrimmedDomain([corner_disk_loop(R / L)])
    geo = scaling_map(L, L)
    zero = lambda x: np.zeros((len(np.atleast_2d(x)), 2))

    def t_right(x):
        n = np.tile([1.0, 0.0], (len(x), 1))
        return exact.traction(x, n)

    def t_top(x):
        n = np.tile([0.0, 1.0], (len(x), 1))
        return exact.traction(x, n)

    spec = ProblemSpec(
        "elasticity", geo, td, material=mat,
        dirichlet={"left": (zero, (True, False)),    # symmetry: u_x = 0
                   "bottom": (zero, (False, True))},  # symmetry: u_y = 0
        neumann={"right": t_right, "top": t_top},
        exact=exact,
    )

    def err(field, rules, ctx=None):
        return energy_norm_error(field, exact, rules, ctx)

    b = Benchmark(name="plate_with_hole", spec=spec, base_n=base_n,
                  gamma=0.55, error_fn=err)
    b.exact = exact
    return b


def _scordelis_spec(td: TrimmedDomain, point_loads=None, self_weight=True) -> ProblemSpec:
    mat = MaterialParams(E=SCORDELIS["E"], nu=SCORDELIS["nu"],
                         thickness=SCORDELIS["thickness"])
    geo = cylinder_map(SCORDELIS["radius"], SCORDELIS["length"],
                       SCORDELIS["half_angle_deg"])
    zero = lambda x: np.zeros((len(np.atleast_2d(x)), 3))
    body = None
    if self_weight:
        fz = SCORDELIS["f_z"]
        body = lambda x: np.column_stack(
            [np.zeros(len(x)), np.zeros(len(x)), np.full(len(x), fz)]
        )
    return ProblemSpec(
        "shell", geo, td, material=mat,
        # rigid diaphragms on the curved ends (eta = 0, 1): u_x = u_z = 0
        dirichlet={"bottom": (zero, (True, False, True)),
                   "top": (zero, (True, False, True))},
        body_load=body,
        point_loads=point_loads or [],
    )


def scordelis_untrimmed(p: int, base_n: int = 4) -> Benchmark:
    spec = _scordelis_spec(TrimmedDomain([]))
    b = Benchmark(name="scordelis_untrimmed", spec=spec, base_n=base_n)
    # classical midside sag: vertical displacement at the free-edge midpoint
    b.point_metric = lambda field: float(field.evaluate([[1.0, 0.5]])[0, 2])
    return b


def scordelis_hole(p: int, base_n: int = 4, center=(0.5, 0.5),
                   rx: float = 0.18, ry: float = 0.12) -> Benchmark:
    td = TrimmedDomain([ellipse_hole_loop(center[0], center[1], rx, ry)])
    spec = _scordelis_spec(td)
    b = Benchmark(name="scordelis_hole", spec=spec, base_n=base_n)
    b.point_metric = lambda field: float(field.evaluate([[1.0, 0.5]])[0, 2])
    return b


SCORDELIS_4HOLES = [
    ((0.27, 0.3), 0.08),
    ((0.73, 0.3), 0.08),
    ((0.27, 0.7), 0.08),
    ((0.73, 0.7), 0.08),
]


def scordelis_4holes_pointload(p: int, base_n: int = 4,
                               load: float = -1e5) -> Benchmark:
    loops = [circle_hole_loop(c[0], c[1], r) for c, r in SCORDELIS_4HOLES]
    td = TrimmedDomain(loops)
    spec = _scordelis_spec(td, point_loads=[((0.5, 0.5), (0.0, 0.0, load))],
                           self_weight=False)
    b = Benchmark(name="scordelis_4holes_pointload", spec=spec, base_n=base_n)
    b.point_metric = lambda field: float(field.evaluate([[0.5, 0.5]])[0, 2])
    return b


def manufactured_poisson(p: int, base_n: int = 4) -> Benchmark:
    exact = SinePoissonExact()
    td = TrimmedDomain([])
    spec = ProblemSpec(
        "poisson", identity_map(), td,
        dirichlet={e: (exact.value, (True,))
                   for e in ("bottom", "right", "top", "left")},
        body_load=exact.source, exact=exact,
    )

    def err(field, rules, ctx=None):
        return energy_norm_error(field, exact, rules, ctx)

    b = Benchmark(name="manufactured_poisson", spec=spec, base_n=base_n, error_fn=err)
    b.exact = exact
    return b


def manufactured_poisson_linear(p: int, base_n: int = 3) -> Benchmark:
    exact = PolyPoissonExact()
    td = TrimmedDomain([])
    spec = ProblemSpec(
        "poisson", identity_map(), td,
        dirichlet={e: (exact.value, (True,))
                   for e in ("bottom", "right", "top", "left")},
        body_load=exact.source, exact=exact,
    )

    def err(field, rules, ctx=None):
        return energy_norm_error(field, exact, rules, ctx)

    b = Benchmark(name="manufactured_poisson_linear", spec=spec, base_n=base_n,
                  error_fn=err)
    b.exact = exact
    return b


REGISTRY = {
    "singular_poisson": singular_poisson,
    "plate_with_hole": plate_with_hole,
    "scordelis_untrimmed": scordelis_untrimmed,
    "scordelis_hole": scordelis_hole,
    "scordelis_4holes_pointload": scordelis_4holes_pointload,
    "manufactured_poisson": manufactured_poisson,
    "manufactured_poisson_linear": manufactured_poisson_linear,
}


def make_benchmark(name: str, p: int, **kwargs) -> Benchmark:
    if name not in REGISTRY:
        raise KeyError(f"unknown benchmark {name!r}; known: {sorted(REGISTRY)}")
    return REGISTRY[name](p, **kwargs)


# ----------------------------------------------------------------------
# shell reference solutions (computed in-tool on uniform meshes)


def solve_uniform(bench: Benchmark, p: int, n: int, method: str = "direct"):
    """Solve a benchmark on a uniform n x n mesh of degree p."""
    h = build_hierarchy(uniform_square_space(n, p))
    ts = active_with_trimming(h, bench.spec.trimming)
    rules = build_mesh_rules(h, ts, bench.spec.trimming, p + 1, p + 2)
    field = solve_problem(bench.spec, h, ts, rules, method=method)
    return field, h, ts, rules


def shell_reference(bench: Benchmark, p: int, n_ref: int, sanity: bool = True):
    """Uniform reference field for shell energy-error studies.

    With ``sanity`` a Richardson-style check compares the point metric at
    n_ref/2 and n_ref; the pair is returned for reporting.
    """
    field, h, ts, rules = solve_uniform(bench, p, n_ref)
    check = None
    if sanity and bench.point_metric is not None:
        coarse, *_ = solve_uniform(bench, p, n_ref // 2)
        check = (bench.point_metric(coarse), bench.point_metric(field))
    return field, rules, check


def shell_error_against(reference_field, reference_rules):
    """Error functional: energy norm of (reference - field) on the ref mesh."""
    def err(field, rules, ctx=None):
        return shell_energy_error(field, reference_field, reference_rules)
    return err
