import numpy as np
import pytest

from adaptiga.quadrature import (
    background_edge_rule,
    cell_rule,
    curve_section_rule,
    cut_cell_rule,
    full_cell_rule,
    gauss_rule,
    trim_curve_rule,
)
from adaptiga.trimming import (
    CellClass,
    TrimmedDomain,
    TrimmingLoop,
    circle_hole_loop,
    corner_disk_loop,
    line_curve,
    quarter_arc,
    strip_above_loop,
)


def grid_rules(td, n, q_full, q_cut):
    rules = []
    for i in range(n):
        for j in range(n):
            rect = (i / n, (i + 1) / n, j / n, (j + 1) / n)
            info = td.classify_rect(rect)
            rules.append((rect, info, cell_rule(td, info, rect, q_full, q_cut)))
    return rules


def material_area(td, n, q_full=3, q_cut=5):
    return sum(r.total for _, _, r in grid_rules(td, n, q_full, q_cut))


def chord_corner_loop():
    """Cut the corner triangle with legs 0.5 off the unit square."""
    return TrimmingLoop([
        line_curve([0.0, 0.5], [0.5, 0.0]),
        line_curve([0.5, 0.0], [0.5, -0.2]),
        line_curve([0.5, -0.2], [-0.2, -0.2]),
        line_curve([-0.2, -0.2], [-0.2, 0.5]),
        line_curve([-0.2, 0.5], [0.0, 0.5]),
    ])


class TestFullCell:
    def test_single_point_rule(self):
        r = full_cell_rule((0.0, 1.0, 0.0, 1.0), 1)
        np.testing.assert_allclose(r.points, [[0.5, 0.5]])
        np.testing.assert_allclose(r.weights, [1.0])

    def test_gauss_exactness_cubics(self):
        r = full_cell_rule((0.0, 1.0, 0.0, 1.0), 2)
        val = np.sum(r.weights * r.points[:, 0] ** 3 * r.points[:, 1] ** 3)
        assert abs(val - 1.0 / 16.0) < 1e-15

    def test_weights_sum_to_area(self):
        r = full_cell_rule((0.25, 0.5, 0.5, 1.0), 4)
        assert abs(r.total - 0.125) < 1e-15


class TestCutCell:
    def test_straight_chord_corner_exact(self):
        td = TrimmedDomain([chord_corner_loop()])
        info = td.classify_rect((0.0, 1.0, 0.0, 1.0))
        assert info.cls is CellClass.CUT
        r = cut_cell_rule(td, (0.0, 1.0, 0.0, 1.0), 3, info=info)
        assert np.all(r.weights > 0)
        assert abs(r.total - (1.0 - 0.125)) < 1e-14

    def test_centered_disk_area(self):
        td = TrimmedDomain([circle_hole_loop(0.5, 0.5, 0.25)])
        exact = 1.0 - np.pi / 16.0
        area = material_area(td, 8, q_full=3, q_cut=5)
        assert abs(area - exact) / exact < 1e-10

    def test_corner_quarter_disk_area(self):
        # plate-with-hole parametric layout; scaled by 16 this is the
        # physical [0,4]^2 plate minus a quarter disk of radius 1
        td = TrimmedDomain([corner_disk_loop(0.25)])
        exact = 1.0 - np.pi * 0.25**2 / 4.0
        area = material_area(td, 8, q_full=3, q_cut=5)
        assert abs(area - exact) / exact < 1e-10
        phys = 16.0 * area
        assert abs(phys - (16.0 - np.pi / 4.0)) / 16.0 < 1e-10

    def test_sliver_strip_area(self):
        eps = 1e-5
        td = TrimmedDomain([strip_above_loop(0.75 + eps)])
        area = material_area(td, 4, q_full=3, q_cut=4)
        assert abs(area - (0.75 + eps)) < 1e-12

    @pytest.mark.parametrize("q", [1, 2])
    def test_area_error_order_at_least_2q(self, q):
        td = TrimmedDomain([circle_hole_loop(0.5, 0.5, 0.25)])
        exact = 1.0 - np.pi / 16.0
        errs = []
        ns = [2, 4, 8, 16]
        for n in ns:
            total = 0.0
            for i in range(n):
                for j in range(n):
                    rect = (i / n, (i + 1) / n, j / n, (j + 1) / n)
                    info = td.classify_rect(rect)
                    if info.cls is CellClass.INTERIOR:
                        total += (1 / n) ** 2
                    elif info.cls is CellClass.CUT:
                        r = cut_cell_rule(td, rect, q, info=info,
                                          adapt_depth=0)
                        total += r.total
            errs.append(abs(total - exact))
        rates = [np.log2(errs[k] / errs[k + 1]) for k in range(len(errs) - 1)]
        assert max(rates) >= 2 * q - 0.3

    def test_enclosed_loop_is_subdivided(self):
        td = TrimmedDomain([circle_hole_loop(0.5, 0.5, 0.2)])
        info = td.classify_rect((0.0, 1.0, 0.0, 1.0))
        assert info.cls is CellClass.CUT
        r = cut_cell_rule(td, (0.0, 1.0, 0.0, 1.0), 4, info=info)
        assert abs(r.total - (1.0 - np.pi * 0.04)) / 1.0 < 1e-8


class TestBoundary:
    def test_bottom_edge_normals(self):
        td = TrimmedDomain([])
        r = background_edge_rule(td, 0, 0.0, 1.0, 3)
        np.testing.assert_allclose(r.normals, np.tile([0.0, -1.0], (3, 1)))
        assert abs(r.total - 1.0) < 1e-14

    def test_circle_normals_point_to_center(self):
        td = TrimmedDomain([circle_hole_loop(0.5, 0.5, 0.25)])
        info = td.classify_rect((0.25, 0.5, 0.25, 0.5))
        r = trim_curve_rule(td, info, 4)
        for p, n in zip(r.points, r.normals):
            to_center = np.array([0.5, 0.5]) - p
            to_center /= np.linalg.norm(to_center)
            np.testing.assert_allclose(n, to_center, atol=1e-9)

    def test_quarter_circle_arc_length(self):
        arc = quarter_arc((0.0, 0.0), 1.0, 90, 0)
        r = curve_section_rule(arc, 0.0, 1.0, 10)
        assert abs(r.total - np.pi / 2) < 1e-12

    def test_edge_rule_clips_trimmed_part(self):
        eps = 1e-5
        td = TrimmedDomain([strip_above_loop(0.75 + eps)])
        r = background_edge_rule(td, 1, 0.0, 1.0, 4)  # right edge
        assert abs(r.total - (0.75 + eps)) < 1e-12

    def test_edge_rule_skips_hole_under_corner_disk(self):
        td = TrimmedDomain([corner_disk_loop(0.25)])
        r = background_edge_rule(td, 0, 0.0, 1.0, 4)  # bottom edge
        assert abs(r.total - 0.75) < 1e-12
        left = background_edge_rule(td, 3, 0.0, 1.0, 4)
        assert abs(left.total - 0.75) < 1e-12


class TestDivergenceTheorem:
    @pytest.mark.parametrize("loop_factory", [
        lambda: circle_hole_loop(0.5, 0.5, 0.25),
        lambda: corner_disk_loop(0.25),
        lambda: strip_above_loop(0.75 + 1e-5),
    ])
    def test_polynomial_field(self, loop_factory):
        td = TrimmedDomain([loop_factory()])
        n = 8

        def v(x, y):
            return np.stack([x**2 * y + y, x + y**3], axis=-1)

        def div_v(x, y):
            return 2 * x * y + 3 * y**2

        vol = 0.0
        for rect, info, r in grid_rules(td, n, 4, 6):
            if len(r.weights):
                vol += np.sum(r.weights * div_v(r.points[:, 0], r.points[:, 1]))
        flux = 0.0
        for edge in range(4):
            br = background_edge_rule(td, edge, 0.0, 1.0, 6)
            if len(br.weights):
                vals = v(br.points[:, 0], br.points[:, 1])
                flux += np.sum(br.weights * np.sum(vals * br.normals, axis=1))
        for i in range(n):
            for j in range(n):
                rect = (i / n, (i + 1) / n, j / n, (j + 1) / n)
                info = td.classify_rect(rect)
                if info.cls is CellClass.CUT:
                    cr = trim_curve_rule(td, info, 6)
                    if len(cr.weights):
                        vals = v(cr.points[:, 0], cr.points[:, 1])
                        flux += np.sum(cr.weights * np.sum(vals * cr.normals, axis=1))
        assert abs(vol - flux) / max(abs(vol), 1.0) < 1e-8
