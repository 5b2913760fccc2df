import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from adaptiga.assembly import solve_problem
from adaptiga.bspline import KnotVector, TensorSplineSpace, identity_map
from adaptiga.estimator import (
    AdaptParams,
    ErrorIndicators,
    EstimatorError,
    adapt_loop,
    build_bubbles,
    element_residual_blocks,
    estimate,
    mark,
)
from adaptiga.hierarchy import build_hierarchy
from adaptiga.physics import PolyPoissonExact, ProblemSpec, SinePoissonExact
from adaptiga.quadrature import build_mesh_rules
from adaptiga.trimming import TrimmedDomain, active_with_trimming, circle_hole_loop

RNG = np.random.default_rng(515)


def uniform_space(n, p):
    kv = KnotVector(np.concatenate([[0.0] * p, np.linspace(0, 1, n + 1), [1.0] * p]), p)
    return TensorSplineSpace(kv, kv)


def dirichlet_all(fn):
    return {e: (fn, (True,)) for e in ("bottom", "right", "top", "left")}


def poisson_setup(n, p, exact, td=None):
    td = td or TrimmedDomain([])
    h = build_hierarchy(uniform_space(n, p))
    ts = active_with_trimming(h, td)
    rules = build_mesh_rules(h, ts, td, p + 1, p + 2)
    spec = ProblemSpec("poisson", identity_map(), td,
                       dirichlet=dirichlet_all(exact.value),
                       body_load=exact.source)
    return spec, h, ts, rules


class TestBubbleSpace:
    def test_counts_second_order(self):
        b = build_bubbles(2, 2)
        assert b.count_per_component() == 4  # p^2

    def test_counts_fourth_order(self):
        b = build_bubbles(3, 4)
        assert b.count_per_component() == 1  # (p-2)^2

    def test_too_small_degree_rejected(self):
        with pytest.raises(EstimatorError):
            build_bubbles(2, 4)

    @pytest.mark.parametrize("order,p", [(2, 2), (2, 3), (4, 3), (4, 4)])
    def test_boundary_traces_vanish(self, order, p):
        b = build_bubbles(p, order)
        idx = b.indices_for_cell()
        s = np.linspace(0, 1, 25)
        edge_pts = np.vstack([
            np.column_stack([s, np.zeros_like(s)]),
            np.column_stack([s, np.ones_like(s)]),
            np.column_stack([np.zeros_like(s), s]),
            np.column_stack([np.ones_like(s), s]),
        ])
        tab = b.tables(edge_pts, (0, 1, 0, 1), idx, order=2)
        assert np.max(np.abs(tab.N)) < 1e-14
        if order == 4:
            # normal derivatives vanish too
            bottom = slice(0, 25)
            top = slice(25, 50)
            left = slice(50, 75)
            right = slice(75, 100)
            assert np.max(np.abs(tab.dN[1][bottom])) < 1e-13
            assert np.max(np.abs(tab.dN[1][top])) < 1e-13
            assert np.max(np.abs(tab.dN[0][left])) < 1e-13
            assert np.max(np.abs(tab.dN[0][right])) < 1e-13

    def test_neumann_edge_adds_edge_bubbles(self):
        b = build_bubbles(2, 2)
        plain = b.indices_for_cell()
        enriched = b.indices_for_cell(neumann_edges=[1])
        assert len(enriched) == len(plain) + len(b.interior)
        s = np.linspace(0, 1, 20)
        pts = np.column_stack([np.ones_like(s), s])  # right edge
        tab = b.tables(pts, (0, 1, 0, 1), enriched, order=1)
        assert np.max(np.abs(tab.N)) > 0.1  # nonzero on the Neumann edge


class TestEstimate:
    def test_exact_solution_gives_zero_eta(self):
        exact = PolyPoissonExact()
        spec, h, ts, rules = poisson_setup(3, 2, exact)
        field = solve_problem(spec, h, ts, rules)
        bubbles = build_bubbles(2, 2)
        ind = estimate(field, spec, h, ts, rules, bubbles)
        assert ind.total < 1e-11

    def test_global_block_solve_equals_elementwise(self):
        exact = SinePoissonExact()
        td = TrimmedDomain([circle_hole_loop(0.5, 0.5, 0.25)])
        spec, h, ts, rules = poisson_setup(4, 2, exact, td=td)

        def g_curve(x, n):
            g = exact.gradient(x)
            return g[:, 0] * n[:, 0] + g[:, 1] * n[:, 1]

        spec.trimmed_neumann = g_curve
        field = solve_problem(spec, h, ts, rules)
        bubbles = build_bubbles(2, 2)
        blocks = [
            (key, K, r)
            for key, K, r in element_residual_blocks(field, spec, h, ts, rules, bubbles)
            if K is not None
        ]
        Kg = sp.block_diag([K for _, K, _ in blocks], format="csc")
        rg = np.concatenate([r for _, _, r in blocks])
        zg = spla.spsolve(Kg, rg)
        off = 0
        ind = estimate(field, spec, h, ts, rules, bubbles)
        for key, K, r in blocks:
            n = len(r)
            e2 = float(zg[off: off + n] @ r)
            eta_global = 3.0 * np.sqrt(max(e2, 0.0))
            assert abs(eta_global - ind.eta[key]) < 1e-12 * max(1.0, ind.max())
            off += n

    def test_scaling_covariance(self):
        exact = SinePoissonExact()
        spec, h, ts, rules = poisson_setup(3, 2, exact)
        field = solve_problem(spec, h, ts, rules)
        bubbles = build_bubbles(2, 2)
        ind1 = estimate(field, spec, h, ts, rules, bubbles)
        s = 3.7
        spec2 = ProblemSpec("poisson", spec.geometry, spec.trimming,
                            dirichlet=dirichlet_all(lambda x: s * exact.value(x)),
                            body_load=lambda x: s * exact.source(x))
        field2 = solve_problem(spec2, h, ts, rules)
        ind2 = estimate(field2, spec2, h, ts, rules, bubbles)
        for key in ind1.eta:
            assert abs(ind2.eta[key] - s * ind1.eta[key]) < 1e-9 * (1 + s * ind1.max())


class TestMarking:
    def _ind(self, values):
        return ErrorIndicators(eta={(0, i): v for i, v in enumerate(values)}, C_a=3.0)

    def test_example(self):
        marked = mark(self._ind([1.0, 0.6, 0.4]), gamma=0.5)
        assert marked == [(0, 0), (0, 1)]

    def test_gamma_to_one_keeps_argmax(self):
        marked = mark(self._ind([1.0, 0.6, 0.4]), gamma=0.999)
        assert marked == [(0, 0)]

    def test_monotone_in_gamma(self):
        vals = RNG.uniform(0, 1, 30).tolist()
        prev = None
        for g in (0.2, 0.4, 0.6, 0.8):
            cur = set(mark(self._ind(vals), gamma=g))
            if prev is not None:
                assert cur <= prev
            prev = cur

    def test_all_zero_signals_convergence(self):
        assert mark(self._ind([0.0, 0.0]), gamma=0.5) == []

    def test_bad_gamma(self):
        with pytest.raises(EstimatorError):
            mark(self._ind([1.0]), gamma=1.5)


class TestAdaptLoop:
    def test_exact_in_space_terminates_immediately(self):
        exact = PolyPoissonExact()
        td = TrimmedDomain([])
        h = build_hierarchy(uniform_space(3, 2))
        spec = ProblemSpec("poisson", identity_map(), td,
                           dirichlet=dirichlet_all(exact.value),
                           body_load=exact.source)
        state = adapt_loop(spec, h, AdaptParams(max_iterations=5))
        assert len(state.history) == 1
        assert state.history[0]["eta_total"] < 1e-11

    def test_history_schema_and_growth(self, tmp_path):
        exact = SinePoissonExact()
        td = TrimmedDomain([])
        h = build_hierarchy(uniform_space(3, 2))
        spec = ProblemSpec("poisson", identity_map(), td,
                           dirichlet=dirichlet_all(exact.value),
                           body_load=exact.source)
        csv_path = tmp_path / "hist.csv"
        state = adapt_loop(spec, h, AdaptParams(max_iterations=3),
                           csv_path=str(csv_path))
        assert len(state.history) == 3
        dofs = [r["ndof"] for r in state.history]
        assert dofs[-1] > dofs[0]
        lines = csv_path.read_text().strip().splitlines()
        assert lines[0] == "iter,ndof,nelems,error_norm,eta_total,marked_count,levels"
        assert len(lines) == 4

    def test_meshes_stay_admissible(self):
        from test_hierarchy import check_admissible

        exact = SinePoissonExact()
        td = TrimmedDomain([])
        h = build_hierarchy(uniform_space(4, 2))
        spec = ProblemSpec("poisson", identity_map(), td,
                           dirichlet=dirichlet_all(exact.value),
                           body_load=exact.source)
        state = adapt_loop(spec, h, AdaptParams(max_iterations=4, gamma=0.3))
        assert check_admissible(state.hierarchy, 2)

    def test_uniform_mode_quadruples_elements(self):
        exact = SinePoissonExact()
        td = TrimmedDomain([])
        h = build_hierarchy(uniform_space(2, 2))
        spec = ProblemSpec("poisson", identity_map(), td,
                           dirichlet=dirichlet_all(exact.value),
                           body_load=exact.source)
        state = adapt_loop(spec, h, AdaptParams(max_iterations=3, uniform=True))
        elems = [r["nelems"] for r in state.history]
        assert elems == [4, 16, 64]
