"""Univariate and tensor-product B-spline spaces, refinement and geometry maps.

Everything here is plain Cox-de Boor machinery: open knot vectors, basis
evaluation with derivatives, the two-scale (knot insertion) relation between
nested spaces, and (rational) geometry maps with first and second derivatives.
All objects are immutable after construction and safe to share between
threads.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


class SplineError(ValueError):
    """Raised for invalid spline data or out-of-domain evaluation."""


class KnotVector:
    """Open knot vector of a given degree.

    Attributes:
        p: polynomial degree.
        knots: non-decreasing knot array, first/last knot repeated p+1 times.
        breakpoints: unique knot values (the 1D mesh).
    """

    def __init__(self, knots, p: int):
        knots = np.asarray(knots, dtype=float)
        if p < 0:
            raise SplineError("degree must be non-negative")
        if knots.ndim != 1 or knots.size < 2 * (p + 1):
            raise SplineError("need at least 2*(p+1) knots")
        if np.any(np.diff(knots) < 0.0):
            raise SplineError("knots must be non-decreasing")
        if not (np.allclose(knots[: p + 1], knots[0]) and np.allclose(knots[-p - 1:], knots[-1])):
            raise SplineError("knot vector must be open (end knots repeated p+1 times)")
        self.p = int(p)
        self.knots = knots
        self.knots.flags.writeable = False
        self.breakpoints, counts = np.unique(knots, return_counts=True)
        self.breakpoints.flags.writeable = False
        if np.any(counts[1:-1] > p + 1):
            raise SplineError("interior knot multiplicity exceeds p+1")
        self.nbasis = knots.size - p - 1
        self.ncells = self.breakpoints.size - 1
        # span index of the first knot equal to each breakpoint's right end;
        # cell j lives on knot span span_of_cell[j]
        self._span_of_cell = np.searchsorted(knots, self.breakpoints[:-1], side="right") - 1
        self._span_of_cell.flags.writeable = False
        # map knot value -> breakpoint index for support queries
        self._bp_index = {round(float(b), 14): j for j, b in enumerate(self.breakpoints)}

    def __repr__(self):
        return f"KnotVector(p={self.p}, n={self.nbasis}, cells={self.ncells})"

    def __eq__(self, other):
        return (
            isinstance(other, KnotVector)
            and self.p == other.p
            and self.knots.size == other.knots.size
            and np.allclose(self.knots, other.knots, atol=1e-14)
        )

    @property
    def domain(self):
        return float(self.knots[0]), float(self.knots[-1])

    def cell_bounds(self, j: int):
        """Parametric interval of cell ``j``."""
        return float(self.breakpoints[j]), float(self.breakpoints[j + 1])

    def find_span(self, t: float) -> int:
        """Knot span index i with knots[i] <= t < knots[i+1].

        The right end of the domain maps to the last nonzero span.
        """
        return int(self.find_spans(np.array([t]))[0])

    def find_spans(self, ts: np.ndarray) -> np.ndarray:
        ts = np.asarray(ts, dtype=float)
        lo, hi = self.domain
        if np.any(ts < lo - 1e-12) or np.any(ts > hi + 1e-12):
            raise SplineError(f"parameter outside [{lo}, {hi}]")
        spans = np.searchsorted(self.knots, np.clip(ts, lo, hi), side="right") - 1
        return np.clip(spans, self.p, self.knots.size - self.p - 2)

    def greville(self) -> np.ndarray:
        """Greville abscissae (control point parameters)."""
        p = self.p
        if p == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        return np.array([self.knots[i + 1: i + p + 1].mean() for i in range(self.nbasis)])

    def support_cells(self, i: int) -> tuple[int, int]:
        """Inclusive range (first, last) of cells in the support of function i."""
        a = self._bp_index[round(float(self.knots[i]), 14)]
        b = self._bp_index[round(float(self.knots[i + self.p + 1]), 14)]
        return a, b - 1

    def funcs_on_cell(self, j: int) -> np.ndarray:
        """Indices of the p+1 functions that are nonzero on cell j."""
        s = self._span_of_cell[j]
        return np.arange(s - self.p, s + 1)

    def eval_ders(self, ts, k: int):
        """Evaluate nonzero basis functions and derivatives at many points.

        Args:
            ts: evaluation parameters, shape (n,).
            k: highest derivative order, 0 <= k <= p.

        Returns:
            (spans, ders): spans has shape (n,), ders has shape (n, k+1, p+1)
            with ders[:, 0] the basis values of functions span-p .. span.
        """
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        p = self.p
        if k > p:
            raise SplineError("derivative order exceeds degree")
        U = self.knots
        spans = self.find_spans(ts)
        n = ts.size
        ndu = np.zeros((n, p + 1, p + 1))
        ndu[:, 0, 0] = 1.0
        left = np.zeros((n, p + 1))
        right = np.zeros((n, p + 1))
        for j in range(1, p + 1):
            left[:, j] = ts - U[spans + 1 - j]
            right[:, j] = U[spans + j] - ts
            saved = np.zeros(n)
            for r in range(j):
                ndu[:, j, r] = right[:, r + 1] + left[:, j - r]
                temp = ndu[:, r, j - 1] / ndu[:, j, r]
                ndu[:, r, j] = saved + right[:, r + 1] * temp
                saved = left[:, j - r] * temp
            ndu[:, j, j] = saved
        ders = np.zeros((n, k + 1, p + 1))
        ders[:, 0, :] = ndu[:, :, p]
        if k == 0:
            return spans, ders
        a = np.zeros((n, 2, p + 1))
        for r in range(p + 1):
            a[:] = 0.0
            a[:, 0, 0] = 1.0
            s1, s2 = 0, 1
            for kk in range(1, k + 1):
                d = np.zeros(n)
                rk = r - kk
                pk = p - kk
                if r >= kk:
                    a[:, s2, 0] = a[:, s1, 0] / ndu[:, pk + 1, rk]
                    d = a[:, s2, 0] * ndu[:, rk, pk]
                j1 = 1 if rk >= -1 else -rk
                j2 = kk - 1 if r - 1 <= pk else p - r
                for j in range(j1, j2 + 1):
                    a[:, s2, j] = (a[:, s1, j] - a[:, s1, j - 1]) / ndu[:, pk + 1, rk + j]
                    d += a[:, s2, j] * ndu[:, rk + j, pk]
                if r <= pk:
                    a[:, s2, kk] = -a[:, s1, kk - 1] / ndu[:, pk + 1, r]
                    d += a[:, s2, kk] * ndu[:, r, pk]
                ders[:, kk, r] = d
                s1, s2 = s2, s1
        fac = float(p)
        for kk in range(1, k + 1):
            ders[:, kk, :] *= fac
            fac *= p - kk
        return spans, ders

    def normalized(self) -> "KnotVector":
        """Affinely rescale the knots to [0, 1]."""
        lo, hi = self.domain
        if hi <= lo:
            raise SplineError("degenerate knot range")
        return KnotVector((self.knots - lo) / (hi - lo), self.p)

    def refine_dyadic(self) -> "KnotVector":
        """Insert the midpoint of every nonzero knot span once (cached)."""
        if not hasattr(self, "_dyadic_child"):
            mids = 0.5 * (self.breakpoints[:-1] + self.breakpoints[1:])
            self._dyadic_child = KnotVector(
                np.sort(np.concatenate([self.knots, mids])), self.p
            )
        return self._dyadic_child

    def gauss_table(self, q: int, k: int):
        """Per-cell basis tables at Gauss points, cached.

        Returns an array of shape (ncells, q, k+1, p+1): for cell j, the
        values/derivatives of its p+1 nonzero functions at the q Gauss
        points of the cell.
        """
        key = (q, k)
        cache = getattr(self, "_gauss_tables", None)
        if cache is None:
            cache = self._gauss_tables = {}
        hit = cache.get(key)
        if hit is None:
            from .quadrature import gauss_rule

            gx, _ = gauss_rule(q)
            a = self.breakpoints[:-1]
            b = self.breakpoints[1:]
            pts = (a[:, None] + gx[None, :] * (b - a)[:, None]).ravel()
            _, ders = self.eval_ders(pts, min(k, self.p))
            tab = ders.reshape(self.ncells, q, -1, self.p + 1)
            if tab.shape[2] < k + 1:
                pad = np.zeros((self.ncells, q, k + 1, self.p + 1))
                pad[:, :, : tab.shape[2]] = tab
                tab = pad
            tab.flags.writeable = False
            cache[key] = tab
            hit = tab
        return hit


def two_scale_matrix(coarse: KnotVector, fine: KnotVector) -> sp.csr_matrix:
    """Refinement matrix C with b_coarse(t) = C @ b_fine(t).

    Row i holds the nonnegative coefficients expanding coarse function i in
    the fine basis; every column sums to one (partition of unity). Requires
    ``fine`` to be a knot refinement of ``coarse`` at equal degree. Uses the
    Oslo (discrete B-spline) recursion, linear in the fine dimension.
    """
    if coarse.p != fine.p:
        raise SplineError("two-scale relation requires equal degrees")
    if _knot_multiset_difference(fine.knots, coarse.knots) is None:
        raise SplineError("fine knot vector does not contain the coarse one")
    p = coarse.p
    tau = coarse.knots
    t = fine.knots
    nf = fine.nbasis
    rows, cols, vals = [], [], []
    spans = np.clip(np.searchsorted(tau, t[:nf], side="right") - 1, p, coarse.nbasis - 1)
    for i in range(nf):
        mu = int(spans[i])
        alpha = np.zeros(p + 1)
        alpha[0] = 1.0
        for k in range(1, p + 1):
            nxt = np.zeros(p + 1)
            for r in range(k + 1):
                j = mu - k + r
                acc = 0.0
                if r >= 1:
                    d = tau[j + k] - tau[j]
                    if d > 0:
                        acc += (t[i + k] - tau[j]) / d * alpha[r - 1]
                if r <= k - 1:
                    d = tau[j + k + 1] - tau[j + 1]
                    if d > 0:
                        acc += (tau[j + k + 1] - t[i + k]) / d * alpha[r]
                nxt[r] = acc
            alpha = nxt
        for r in range(p + 1):
            j = mu - p + r
            if 0 <= j < coarse.nbasis and alpha[r] != 0.0:
                rows.append(j)
                cols.append(i)
                vals.append(alpha[r])
    C = sp.csr_matrix((vals, (rows, cols)), shape=(coarse.nbasis, nf))
    C.eliminate_zeros()
    return C


def _knot_multiset_difference(fine, coarse):
    """Knots of ``fine`` not in ``coarse`` (with multiplicity), or None."""
    out = []
    i = 0
    for u in fine:
        if i < coarse.size and abs(u - coarse[i]) <= 1e-12:
            i += 1
        else:
            out.append(float(u))
    return out if i == coarse.size else None


class TensorSplineSpace:
    """Tensor product of two univariate B-spline spaces on [0,1]^2.

    Flat indices follow the geometry JSON convention: the xi index runs
    fastest, i.e. func (i, j) -> j * nx + i and cell (ci, cj) -> cj * ncx + ci.
    """

    def __init__(self, kv_x: KnotVector, kv_y: KnotVector):
        self.kvs = (kv_x, kv_y)
        self.nfuncs = (kv_x.nbasis, kv_y.nbasis)
        self.ncells = (kv_x.ncells, kv_y.ncells)
        self.dim = kv_x.nbasis * kv_y.nbasis
        self.ncells_total = kv_x.ncells * kv_y.ncells

    def __repr__(self):
        return f"TensorSplineSpace(p={self.degrees}, cells={self.ncells})"

    @property
    def degrees(self):
        return self.kvs[0].p, self.kvs[1].p

    def func_multi(self, f: int) -> tuple[int, int]:
        nx = self.nfuncs[0]
        return f % nx, f // nx

    def func_flat(self, i: int, j: int) -> int:
        return j * self.nfuncs[0] + i

    def cell_multi(self, c: int) -> tuple[int, int]:
        ncx = self.ncells[0]
        return c % ncx, c // ncx

    def cell_flat(self, ci: int, cj: int) -> int:
        return cj * self.ncells[0] + ci

    def cell_rect(self, c: int):
        """Parametric rectangle (x0, x1, y0, y1) of flat cell c."""
        ci, cj = self.cell_multi(c)
        x0, x1 = self.kvs[0].cell_bounds(ci)
        y0, y1 = self.kvs[1].cell_bounds(cj)
        return x0, x1, y0, y1

    def support_cell_rect(self, f: int):
        """Inclusive cell index ranges (ax, bx, ay, by) of the support of f."""
        i, j = self.func_multi(f)
        ax, bx = self.kvs[0].support_cells(i)
        ay, by = self.kvs[1].support_cells(j)
        return ax, bx, ay, by

    def funcs_on_cell(self, c: int) -> np.ndarray:
        """Flat ids of the (px+1)*(py+1) functions nonzero on cell c."""
        ci, cj = self.cell_multi(c)
        fx = self.kvs[0].funcs_on_cell(ci)
        fy = self.kvs[1].funcs_on_cell(cj)
        return (fy[:, None] * self.nfuncs[0] + fx[None, :]).ravel()

    def cell_containing(self, x: float, y: float) -> int:
        cx = int(np.searchsorted(self.kvs[0].breakpoints, x, side="right") - 1)
        cy = int(np.searchsorted(self.kvs[1].breakpoints, y, side="right") - 1)
        cx = min(max(cx, 0), self.ncells[0] - 1)
        cy = min(max(cy, 0), self.ncells[1] - 1)
        return self.cell_flat(cx, cy)

    def refine_dyadic(self) -> "TensorSplineSpace":
        if not hasattr(self, "_dyadic_child"):
            self._dyadic_child = TensorSplineSpace(
                self.kvs[0].refine_dyadic(), self.kvs[1].refine_dyadic()
            )
        return self._dyadic_child

    def eval_ders(self, pts: np.ndarray, k: int):
        """Tensor basis values/derivatives at points.

        Args:
            pts: (n, 2) parametric points.
            k: derivative order (0, 1 or 2).

        Returns:
            (funcs, data): funcs is an (n, nloc) int array of flat function
            ids; data is a dict with key (kx, ky) -> (n, nloc) arrays of
            parametric partial derivatives d^(kx+ky) B / dxi^kx deta^ky for
            all kx+ky <= k. nloc = (px+1)*(py+1), eta-major like funcs_on_cell.
        """
        pts = np.asarray(pts, dtype=float)
        kvx, kvy = self.kvs
        sx, dx = kvx.eval_ders(pts[:, 0], min(k, kvx.p))
        sy, dy = kvy.eval_ders(pts[:, 1], min(k, kvy.p))
        fx = sx[:, None] - kvx.p + np.arange(kvx.p + 1)[None, :]
        fy = sy[:, None] - kvy.p + np.arange(kvy.p + 1)[None, :]
        funcs = fy[:, :, None] * self.nfuncs[0] + fx[:, None, :]
        funcs = funcs.reshape(pts.shape[0], -1)
        data = {}
        for kx in range(k + 1):
            for ky in range(k + 1 - kx):
                vx = dx[:, kx, :] if kx <= kvx.p else np.zeros_like(dx[:, 0, :])
                vy = dy[:, ky, :] if ky <= kvy.p else np.zeros_like(dy[:, 0, :])
                data[(kx, ky)] = (vy[:, :, None] * vx[:, None, :]).reshape(pts.shape[0], -1)
        return funcs, data


class GeometryError(ValueError):
    """Raised for degenerate geometry (singular Jacobian, bad weights)."""


class GeometryMap:
    """(Rational) spline map F from [0,1]^2 to R^d, d = 2 or 3.

    Control points are stored row-major with the xi index fastest. Weights,
    when given, must be strictly positive; derivatives of rational maps use
    the quotient rule on the weighted form.
    """

    def __init__(self, space: TensorSplineSpace, control_points, weights=None):
        control_points = np.asarray(control_points, dtype=float)
        if control_points.ndim != 2 or control_points.shape[0] != space.dim:
            raise GeometryError(f"expected {space.dim} control points")
        if control_points.shape[1] not in (2, 3):
            raise GeometryError("physical dimension must be 2 or 3")
        self.space = space
        self.control_points = control_points
        self.weights = None
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            if weights.shape != (space.dim,):
                raise GeometryError("one weight per control point required")
            if np.any(weights <= 0.0):
                raise GeometryError("weights must be strictly positive")
            self.weights = weights

    @property
    def d(self) -> int:
        return self.control_points.shape[1]

    @property
    def rational(self) -> bool:
        return self.weights is not None

    def evaluate(self, pts, order: int = 1):
        """Map points and derivatives.

        Args:
            pts: (n, 2) parametric points.
            order: 0 (positions), 1 (+ Jacobian) or 2 (+ second derivatives).

        Returns:
            dict with 'x' (n, d); for order >= 1 'jac' (n, d, 2); for
            order 2 'sec' (n, d, 3) ordered (xi xi, eta eta, xi eta).
        """
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        funcs, bdata = self.space.eval_ders(pts, order)
        P = self.control_points[funcs]  # (n, nloc, d)
        if self.rational:
            w = self.weights[funcs]  # (n, nloc)
            Pw = P * w[:, :, None]

            def comb(key):
                num = np.einsum("nl,nld->nd", bdata[key], Pw)
                den = np.einsum("nl,nl->n", bdata[key], w)
                return num, den

            A0, W0 = comb((0, 0))
            x = A0 / W0[:, None]
            out = {"x": x}
            if order >= 1:
                jac = np.empty((pts.shape[0], self.d, 2))
                AW1 = []
                for a, key in enumerate([(1, 0), (0, 1)]):
                    A1, W1 = comb(key)
                    AW1.append((A1, W1))
                    jac[:, :, a] = (A1 - x * W1[:, None]) / W0[:, None]
                out["jac"] = jac
            if order >= 2:
                sec = np.empty((pts.shape[0], self.d, 3))
                keys = [((2, 0), 0, 0), ((0, 2), 1, 1), ((1, 1), 0, 1)]
                for slot, (key, a, b) in enumerate(keys):
                    A2, W2 = comb(key)
                    sec[:, :, slot] = (
                        A2
                        - jac[:, :, a] * AW1[b][1][:, None]
                        - jac[:, :, b] * AW1[a][1][:, None]
                        - x * W2[:, None]
                    ) / W0[:, None]
                out["sec"] = sec
            return out
        out = {"x": np.einsum("nl,nld->nd", bdata[(0, 0)], P)}
        if order >= 1:
            jac = np.empty((pts.shape[0], self.d, 2))
            jac[:, :, 0] = np.einsum("nl,nld->nd", bdata[(1, 0)], P)
            jac[:, :, 1] = np.einsum("nl,nld->nd", bdata[(0, 1)], P)
            out["jac"] = jac
        if order >= 2:
            sec = np.empty((pts.shape[0], self.d, 3))
            for slot, key in enumerate([(2, 0), (0, 2), (1, 1)]):
                sec[:, :, slot] = np.einsum("nl,nld->nd", bdata[key], P)
            out["sec"] = sec
        return out

    def jacobian_det(self, jac: np.ndarray) -> np.ndarray:
        """Area measure of the map: 2D determinant or 3D surface measure."""
        if self.d == 2:
            det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
            if np.any(det <= 0.0):
                raise GeometryError("singular or inverted Jacobian")
            return det
        cross = np.cross(jac[:, :, 0], jac[:, :, 1])
        j = np.linalg.norm(cross, axis=1)
        if np.any(j <= 0.0):
            raise GeometryError("degenerate surface metric")
        return j


def identity_map(n: int = 1, d: int = 2) -> GeometryMap:
    """Identity map of the unit square on a bilinear n x n space."""
    kv = KnotVector(np.concatenate([[0.0], np.linspace(0, 1, n + 1), [1.0]]), 1)
    space = TensorSplineSpace(kv, kv)
    gx = kv.greville()
    pts = np.array([[x, y] for y in gx for x in gx])
    if d == 3:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    return GeometryMap(space, pts)


def scaling_map(lx: float, ly: float) -> GeometryMap:
    """Map of the unit square onto [0, lx] x [0, ly]."""
    kv = KnotVector([0.0, 0.0, 1.0, 1.0], 1)
    space = TensorSplineSpace(kv, kv)
    pts = np.array([[0, 0], [lx, 0], [0, ly], [lx, ly]], dtype=float)
    return GeometryMap(space, pts)


_BERNSTEIN_KV: dict = {}


def bernstein_ders(degree: int, ts, k: int):
    """Bernstein basis of given degree on [0,1] with derivatives.

    Returns an array of shape (n, k+1, degree+1) holding values and the first
    k derivatives of all degree+1 Bernstein polynomials.
    """
    kv = _BERNSTEIN_KV.get(degree)
    if kv is None:
        kv = KnotVector([0.0] * (degree + 1) + [1.0] * (degree + 1), degree)
        _BERNSTEIN_KV[degree] = kv
    _, ders = kv.eval_ders(ts, min(k, degree))
    if k > degree:
        pad = np.zeros((ders.shape[0], k + 1, degree + 1))
        pad[:, : degree + 1, :] = ders
        return pad
    return ders
