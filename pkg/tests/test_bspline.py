import numpy as np
import pytest

from adaptiga.bspline import (
    GeometryMap,
    KnotVector,
    SplineError,
    TensorSplineSpace,
    bernstein_ders,
    identity_map,
    scaling_map,
    two_scale_matrix,
)

RNG = np.random.default_rng(20240817)


def quarter_annulus(r_in=1.0, r_out=2.0):
    """Exact quarter annulus via a rational quadratic x linear map.

    The arc runs from (0, r) to (r, 0) so that (arc, radial) is positively
    oriented.
    """
    kx = KnotVector([0, 0, 0, 1, 1, 1], 2)
    ky = KnotVector([0, 0, 1, 1], 1)
    space = TensorSplineSpace(kx, ky)
    arc = np.array([[0.0, 1.0], [1.0, 1.0], [1.0, 0.0]])
    pts = np.vstack([arc * r_in, arc * r_out])
    w = np.array([1.0, np.sqrt(2) / 2, 1.0] * 2)
    return GeometryMap(space, pts, w)


class TestKnotVector:
    def test_find_span_bernstein(self):
        kv = KnotVector([0, 0, 0, 1, 1, 1], 2)
        assert kv.find_span(0.5) == 2
        assert kv.find_span(1.0) == 2  # right-end convention

    def test_find_span_interior(self):
        kv = KnotVector([0, 0, 1, 2, 2], 1)
        assert kv.find_span(1.5) == 2

    def test_find_span_out_of_range(self):
        kv = KnotVector([0, 0, 0, 1, 1, 1], 2)
        with pytest.raises(SplineError):
            kv.find_span(1.5)

    def test_bernstein_values_at_midpoint(self):
        kv = KnotVector([0, 0, 0, 1, 1, 1], 2)
        _, ders = kv.eval_ders([0.5], 1)
        np.testing.assert_allclose(ders[0, 0], [0.25, 0.5, 0.25], atol=1e-15)
        np.testing.assert_allclose(ders[0, 1], [-1.0, 0.0, 1.0], atol=1e-14)

    def test_interior_knot_values(self):
        # hand Cox-de Boor at t=1 on [0,0,0,1,2,2,2]: N = (0, 1/2, 1/2, 0)
        kv = KnotVector([0, 0, 0, 1, 2, 2, 2], 2)
        spans, ders = kv.eval_ders([1.0], 0)
        assert spans[0] == 3
        np.testing.assert_allclose(ders[0, 0], [0.5, 0.5, 0.0], atol=1e-15)

    @pytest.mark.parametrize("p", [1, 2, 3, 4])
    def test_partition_of_unity(self, p):
        kv = KnotVector(
            np.concatenate([[0.0] * p, np.linspace(0, 1, 8), [1.0] * p]), p
        )
        ts = RNG.uniform(0, 1, 200)
        _, ders = kv.eval_ders(ts, min(2, p))
        np.testing.assert_allclose(ders[:, 0, :].sum(axis=1), 1.0, atol=1e-13)
        np.testing.assert_allclose(ders[:, 1, :].sum(axis=1), 0.0, atol=1e-11)

    @pytest.mark.parametrize("p", [2, 3, 4])
    def test_derivatives_match_finite_differences(self, p):
        kv = KnotVector(
            np.concatenate([[0.0] * p, np.linspace(0, 1, 6), [1.0] * p]), p
        )
        ts = RNG.uniform(0.05, 0.95, 100)
        h = 1e-6
        _, d0 = kv.eval_ders(ts, 1)
        sp_m, dm = kv.eval_ders(ts - h, 0)
        sp_p, dp = kv.eval_ders(ts + h, 0)
        # compare only where the span does not change across the stencil
        same = sp_m == sp_p
        fd = (dp[same, 0] - dm[same, 0]) / (2 * h)
        scale = np.abs(d0[same, 1]) + 1.0
        np.testing.assert_allclose(d0[same, 1] / scale, fd / scale, atol=2e-6)

    def test_support_cells(self):
        kv = KnotVector([0, 0, 0, 1, 2, 3, 4, 4, 4], 2)
        assert kv.support_cells(0) == (0, 0)
        assert kv.support_cells(2) == (0, 2)
        assert kv.support_cells(5) == (3, 3)

    def test_multiplicity_cap(self):
        with pytest.raises(SplineError):
            KnotVector([0, 0, 1, 1, 1, 2, 2], 1)


class TestTwoScale:
    def test_linear_hat_subdivision(self):
        coarse = KnotVector([0, 0, 1, 1], 1)
        fine = KnotVector([0, 0, 0.5, 1, 1], 1)
        C = two_scale_matrix(coarse, fine).toarray()
        np.testing.assert_allclose(C[0], [1.0, 0.5, 0.0], atol=1e-15)

    def test_bezier_midpoint_subdivision(self):
        # Boehm insertion of one midpoint: B0 = 1*f0 + 0.5*f1 (verified by
        # the exactness test below, which reproduces B0 at random points)
        coarse = KnotVector([0, 0, 0, 1, 1, 1], 2)
        fine = KnotVector([0, 0, 0, 0.5, 1, 1, 1], 2)
        C = two_scale_matrix(coarse, fine).toarray()
        np.testing.assert_allclose(C[0], [1.0, 0.5, 0.0, 0.0], atol=1e-15)

    def test_identity_when_equal(self):
        kv = KnotVector([0, 0, 0, 0.3, 1, 1, 1], 2)
        C = two_scale_matrix(kv, kv).toarray()
        np.testing.assert_allclose(C, np.eye(kv.nbasis), atol=1e-15)

    def test_rejects_non_nested(self):
        coarse = KnotVector([0, 0, 0.5, 1, 1], 1)
        fine = KnotVector([0, 0, 0.3, 1, 1], 1)
        with pytest.raises(SplineError):
            two_scale_matrix(coarse, fine)

    @pytest.mark.parametrize("p", [1, 2, 3])
    def test_exactness_at_random_parameters(self, p):
        kv = KnotVector(
            np.concatenate([[0.0] * p, np.linspace(0, 1, 5), [1.0] * p]), p
        )
        fine = kv.refine_dyadic()
        C = two_scale_matrix(kv, fine).toarray()
        assert np.all(C >= -1e-14)
        np.testing.assert_allclose(C.sum(axis=0), 1.0, atol=1e-13)
        ts = RNG.uniform(0, 1, 50)
        for t in ts:
            sc, dc = kv.eval_ders([t], 0)
            sf, df = fine.eval_ders([t], 0)
            bc = np.zeros(kv.nbasis)
            bc[sc[0] - p: sc[0] + 1] = dc[0, 0]
            bf = np.zeros(fine.nbasis)
            bf[sf[0] - p: sf[0] + 1] = df[0, 0]
            np.testing.assert_allclose(bc, C @ bf, atol=1e-12)

    def test_composition_over_two_levels(self):
        p = 3
        kv0 = KnotVector(np.concatenate([[0.0] * p, np.linspace(0, 1, 4), [1.0] * p]), p)
        kv1 = kv0.refine_dyadic()
        kv2 = kv1.refine_dyadic()
        C01 = two_scale_matrix(kv0, kv1)
        C12 = two_scale_matrix(kv1, kv2)
        C02 = two_scale_matrix(kv0, kv2)
        err = np.abs((C01 @ C12 - C02).toarray()).max()
        assert err < 1e-13


class TestGeometryMap:
    def test_identity_map(self):
        geo = identity_map()
        out = geo.evaluate(np.array([[0.3, 0.7]]), order=1)
        np.testing.assert_allclose(out["x"][0], [0.3, 0.7], atol=1e-15)
        np.testing.assert_allclose(out["jac"][0], np.eye(2), atol=1e-14)

    def test_scaling_map(self):
        geo = scaling_map(4.0, 4.0)
        pts = RNG.uniform(0, 1, (20, 2))
        out = geo.evaluate(pts, order=1)
        np.testing.assert_allclose(out["jac"], np.broadcast_to(4 * np.eye(2), (20, 2, 2)), atol=1e-13)

    def test_corner_interpolation(self):
        geo = quarter_annulus()
        out = geo.evaluate(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), order=0)
        np.testing.assert_allclose(
            out["x"], [[0, 1], [1, 0], [0, 2], [2, 0]], atol=1e-14
        )

    def test_rational_arc_radius(self):
        geo = quarter_annulus(r_in=1.0)
        xs = RNG.uniform(0, 1, 100)
        out = geo.evaluate(np.column_stack([xs, np.zeros(100)]), order=0)
        r = np.linalg.norm(out["x"], axis=1)
        np.testing.assert_allclose(r, 1.0, atol=1e-13)
        mid = geo.evaluate(np.array([[0.5, 0.0]]), order=0)
        assert abs(np.linalg.norm(mid["x"][0]) - 1.0) < 1e-14

    def test_rational_derivatives_match_fd(self):
        geo = quarter_annulus()
        pts = RNG.uniform(0.05, 0.95, (100, 2))
        h = 1e-6
        out = geo.evaluate(pts, order=2)
        for axis in range(2):
            dp = np.zeros_like(pts)
            dp[:, axis] = h
            xp = geo.evaluate(pts + dp, order=1)
            xm = geo.evaluate(pts - dp, order=1)
            fd = (xp["x"] - xm["x"]) / (2 * h)
            np.testing.assert_allclose(out["jac"][:, :, axis], fd, rtol=2e-6, atol=1e-8)
            fd_jac = (xp["jac"] - xm["jac"]) / (2 * h)
            # second derivative slots: (xi xi, eta eta, xi eta)
            np.testing.assert_allclose(out["sec"][:, :, axis], fd_jac[:, :, axis], rtol=1e-5, atol=1e-6)
        fd_mixed = None
        xp = geo.evaluate(pts + [h, 0.0], order=1)
        xm = geo.evaluate(pts - [h, 0.0], order=1)
        fd_mixed = (xp["jac"][:, :, 1] - xm["jac"][:, :, 1]) / (2 * h)
        np.testing.assert_allclose(out["sec"][:, :, 2], fd_mixed, rtol=1e-5, atol=1e-6)

    def test_jacobian_det_positive(self):
        geo = quarter_annulus()
        pts = RNG.uniform(0.1, 0.9, (50, 2))
        out = geo.evaluate(pts, order=1)
        det = geo.jacobian_det(out["jac"])
        assert np.all(det > 0)


class TestBernstein:
    def test_values_sum_to_one(self):
        ts = RNG.uniform(0, 1, 40)
        ders = bernstein_ders(4, ts, 2)
        np.testing.assert_allclose(ders[:, 0, :].sum(axis=1), 1.0, atol=1e-13)

    def test_cubic_interior_vanish_at_ends(self):
        ders = bernstein_ders(3, np.array([0.0, 1.0]), 1)
        # interior functions 1, 2 vanish at both ends
        np.testing.assert_allclose(ders[:, 0, 1:3], 0.0, atol=1e-15)
