"""Problem definitions: Poisson, plane-strain elasticity, Kirchhoff-Love shell.

Each kernel turns basis tables and geometry data at quadrature points into
element matrices and load vectors; the same kernels serve the global
assembly and the per-element bubble systems of the error estimator. Exact
solutions for the benchmark problems live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bspline import GeometryMap
from .trimming import TrimmedDomain

EDGE_NAMES = {"bottom": 0, "right": 1, "top": 2, "left": 3}


@dataclass
class MaterialParams:
    """Isotropic material; thickness only matters for shells."""

    E: float
    nu: float
    thickness: float = 1.0
    plane_stress: bool = False

    def __post_init__(self):
        if self.E <= 0:
            raise ValueError("Young's modulus must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError("Poisson ratio must be in [0, 0.5)")
        if self.thickness <= 0:
            raise ValueError("thickness must be positive")

    @property
    def mu(self) -> float:
        return self.E / (2.0 * (1.0 + self.nu))

    @property
    def kolosov(self) -> float:
        """Plane-strain Kolosov constant 3 - 4 nu."""
        return 3.0 - 4.0 * self.nu

    def plane_matrix(self) -> np.ndarray:
        """Voigt material matrix for [e_xx, e_yy, 2 e_xy]."""
        E, nu = self.E, self.nu
        if self.plane_stress:
            c = E / (1 - nu * nu)
            return c * np.array([[1, nu, 0], [nu, 1, 0], [0, 0, (1 - nu) / 2]])
        lam = E * nu / ((1 + nu) * (1 - 2 * nu))
        mu = self.mu
        return np.array([
            [lam + 2 * mu, lam, 0],
            [lam, lam + 2 * mu, 0],
            [0, 0, mu],
        ])


@dataclass
class BasisTable:
    """Values and parametric derivatives of scalar basis functions.

    Arrays are (npts, nfuncs); second derivatives are ordered
    (xi xi, eta eta, xi eta) and may be None for second-order problems.
    """

    N: np.ndarray
    dN: tuple | None = None          # (N_xi, N_eta)
    d2N: tuple | None = None         # (N_xixi, N_etaeta, N_xieta)


def physical_gradients(basis: BasisTable, jac: np.ndarray):
    """Push parametric gradients through a 2D geometry map."""
    det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
    gx = (jac[:, 1, 1, None] * basis.dN[0] - jac[:, 1, 0, None] * basis.dN[1]) / det[:, None]
    gy = (-jac[:, 0, 1, None] * basis.dN[0] + jac[:, 0, 0, None] * basis.dN[1]) / det[:, None]
    return gx, gy


class PoissonKernel:
    """Laplace operator: stiffness grad v . grad u, load f v."""

    ncomp = 1
    order = 2

    def __init__(self, material=None):
        self.material = material

    def stiffness(self, test: BasisTable, trial: BasisTable, geo, w):
        tx, ty = physical_gradients(test, geo["jac"])
        ux, uy = (tx, ty) if trial is test else physical_gradients(trial, geo["jac"])
        wd = w * geo["det"]
        return (tx * wd[:, None]).T @ ux + (ty * wd[:, None]).T @ uy

    def body_load(self, test: BasisTable, geo, w, f):
        vals = np.asarray(f(geo["x"]), dtype=float)
        return test.N.T @ (w * geo["det"] * vals)

    def edge_load(self, test: BasisTable, edge_geo, w_phys, g):
        vals = np.asarray(g(edge_geo), dtype=float)
        return test.N.T @ (w_phys * vals)

    def solution_ncomp(self):
        return 1


class ElasticityKernel:
    """Plane-strain (or plane-stress) small-deformation elasticity.

    Local dofs are component-major: dof = c * nfuncs + i.
    """

    ncomp = 2
    order = 2

    def __init__(self, material: MaterialParams):
        self.material = material
        self.D = material.plane_matrix()

    def _bmatrix(self, basis: BasisTable, geo):
        gx, gy = physical_gradients(basis, geo["jac"])
        npts, nf = gx.shape
        B = np.zeros((npts, 3, 2 * nf))
        B[:, 0, :nf] = gx
        B[:, 1, nf:] = gy
        B[:, 2, :nf] = gy
        B[:, 2, nf:] = gx
        return B

    def stiffness(self, test: BasisTable, trial: BasisTable, geo, w):
        Bt = self._bmatrix(test, geo)
        Bu = Bt if trial is test else self._bmatrix(trial, geo)
        wd = w * geo["det"]
        K = np.einsum("pia,ij,pjb,p->ab", Bt, self.D, Bu, wd, optimize=True)
        return K

    def body_load(self, test: BasisTable, geo, w, f):
        vals = np.asarray(f(geo["x"]), dtype=float)
        wd = w * geo["det"]
        nf = test.N.shape[1]
        out = np.empty(2 * nf)
        out[:nf] = test.N.T @ (wd * vals[:, 0])
        out[nf:] = test.N.T @ (wd * vals[:, 1])
        return out

    def edge_load(self, test: BasisTable, edge_geo, w_phys, g):
        vals = np.asarray(g(edge_geo), dtype=float)
        nf = test.N.shape[1]
        out = np.empty(2 * nf)
        out[:nf] = test.N.T @ (w_phys * vals[:, 0])
        out[nf:] = test.N.T @ (w_phys * vals[:, 1])
        return out

    def stress(self, basis: BasisTable, geo, coeffs):
        """Voigt stress at the table's points for local dof coefficients."""
        B = self._bmatrix(basis, geo)
        strain = np.einsum("pij,j->pi", B, coeffs)
        return strain @ self.D.T


@dataclass
class ShellGeometry:
    """Surface data at quadrature points for the Kirchhoff-Love kernel."""

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    jdet: np.ndarray           # |a1 x a2|
    sec: np.ndarray            # (npts, 3, 3): F_, (11, 22, 12)
    Dmat: np.ndarray           # (npts, 3, 3) contravariant material matrix


def shell_geometry(geo_out, material: MaterialParams) -> ShellGeometry:
    a1 = geo_out["jac"][:, :, 0]
    a2 = geo_out["jac"][:, :, 1]
    a3t = np.cross(a1, a2)
    j = np.linalg.norm(a3t, axis=1)
    if np.any(j <= 0):
        raise ValueError("degenerate surface metric")
    a3 = a3t / j[:, None]
    a11 = np.einsum("pi,pi->p", a1, a1)
    a22 = np.einsum("pi,pi->p", a2, a2)
    a12 = np.einsum("pi,pi->p", a1, a2)
    det = a11 * a22 - a12 * a12
    con11 = a22 / det
    con22 = a11 / det
    con12 = -a12 / det
    E, nu = material.E, material.nu
    c1 = E * nu / (1 - nu * nu)
    c2 = E / (2 * (1 + nu))
    n = len(j)
    D = np.empty((n, 3, 3))
    D[:, 0, 0] = (c1 + 2 * c2) * con11 * con11
    D[:, 1, 1] = (c1 + 2 * c2) * con22 * con22
    D[:, 0, 1] = D[:, 1, 0] = c1 * con11 * con22 + 2 * c2 * con12 * con12
    D[:, 0, 2] = D[:, 2, 0] = (c1 + 2 * c2) * con11 * con12
    D[:, 1, 2] = D[:, 2, 1] = (c1 + 2 * c2) * con22 * con12
    D[:, 2, 2] = c1 * con12 * con12 + c2 * (con11 * con22 + con12 * con12)
    sec = np.transpose(geo_out["sec"], (0, 2, 1))  # (npts, slot, 3)
    return ShellGeometry(a1=a1, a2=a2, a3=a3, jdet=j, sec=sec, Dmat=D)


class ShellKernel:
    """Linearized Kirchhoff-Love shell: membrane + bending energy.

    Local dofs are component-major over the three displacement components.
    """

    ncomp = 3
    order = 4

    def __init__(self, material: MaterialParams):
        self.material = material

    def _strain_matrices(self, basis: BasisTable, sg: ShellGeometry):
        d1, d2 = basis.dN
        npts, nf = d1.shape
        Bm = np.zeros((npts, 3, 3 * nf))
        Bb = np.zeros((npts, 3, 3 * nf))
        # cross-product helper vectors: rows c of (e_c x a2) and (a1 x e_c)
        a1, a2, a3 = sg.a1, sg.a2, sg.a3
        e_x_a2 = np.stack([
            np.stack([np.zeros(npts), -a2[:, 2], a2[:, 1]], axis=1),
            np.stack([a2[:, 2], np.zeros(npts), -a2[:, 0]], axis=1),
            np.stack([-a2[:, 1], a2[:, 0], np.zeros(npts)], axis=1),
        ], axis=1)  # (npts, c, 3)
        a1_x_e = np.stack([
            np.stack([np.zeros(npts), a1[:, 2], -a1[:, 1]], axis=1),
            np.stack([-a1[:, 2], np.zeros(npts), a1[:, 0]], axis=1),
            np.stack([a1[:, 1], -a1[:, 0], np.zeros(npts)], axis=1),
        ], axis=1)
        # project out the normal component and scale by 1/j
        def proj(v):
            return (v - np.einsum("pcj,pj->pc", v, a3)[:, :, None] * a3[:, None, :]) \
                / sg.jdet[:, None, None]

        P1 = proj(e_x_a2)   # (npts, c, 3): P(e_c x a2)/j
        P2 = proj(a1_x_e)
        for c in range(3):
            cols = slice(c * nf, (c + 1) * nf)
            Bm[:, 0, cols] = a1[:, c, None] * d1
            Bm[:, 1, cols] = a2[:, c, None] * d2
            Bm[:, 2, cols] = a1[:, c, None] * d2 + a2[:, c, None] * d1
        dd = basis.d2N
        for slot in range(3):
            Fab = sg.sec[:, slot, :]             # (npts, 3)
            w1 = np.einsum("pcj,pj->pc", P1, Fab)
            w2 = np.einsum("pcj,pj->pc", P2, Fab)
            for c in range(3):
                cols = slice(c * nf, (c + 1) * nf)
                row = -(dd[slot] * sg.a3[:, c, None]
                        + d1 * w1[:, c, None] + d2 * w2[:, c, None])
                scale = 2.0 if slot == 2 else 1.0
                Bb[:, slot, cols] = scale * row
        return Bm, Bb

    def stiffness(self, test: BasisTable, trial: BasisTable, sg: ShellGeometry, w):
        Bm_t, Bb_t = self._strain_matrices(test, sg)
        if trial is test:
            Bm_u, Bb_u = Bm_t, Bb_t
        else:
            Bm_u, Bb_u = self._strain_matrices(trial, sg)
        t = self.material.thickness
        wd = w * sg.jdet
        K = np.einsum("pia,pij,pjb,p->ab", Bm_t, sg.Dmat, Bm_u, wd * t, optimize=True)
        K += np.einsum("pia,pij,pjb,p->ab", Bb_t, sg.Dmat, Bb_u, wd * t**3 / 12.0,
                       optimize=True)
        return K

    def body_load(self, test: BasisTable, sg: ShellGeometry, w, f, x):
        vals = np.asarray(f(x), dtype=float)
        wd = w * sg.jdet
        nf = test.N.shape[1]
        out = np.empty(3 * nf)
        for c in range(3):
            out[c * nf: (c + 1) * nf] = test.N.T @ (wd * vals[:, c])
        return out

    def strain_stress(self, basis: BasisTable, sg: ShellGeometry, coeffs):
        """Membrane/bending strains and stress resultants at the points."""
        Bm, Bb = self._strain_matrices(basis, sg)
        eps = np.einsum("pij,j->pi", Bm, coeffs)
        kap = np.einsum("pij,j->pi", Bb, coeffs)
        t = self.material.thickness
        n_res = t * np.einsum("pij,pj->pi", sg.Dmat, eps)
        m_res = t**3 / 12.0 * np.einsum("pij,pj->pi", sg.Dmat, kap)
        return eps, kap, n_res, m_res


# ----------------------------------------------------------------------
# problem specification


class ProblemSpec:
    """A boundary value problem on a trimmed spline domain.

    Boundary conditions live on the four background edges ('bottom',
    'right', 'top', 'left'): ``dirichlet`` maps an edge name to
    (value function, component mask), ``neumann`` maps an edge name to the
    flux / traction function of the physical position. ``trimmed_neumann``
    holds data on the trimmed boundary itself ((x, n) -> value), None means
    the natural homogeneous condition.
    """

    def __init__(self, kind, geometry, trimming, material=None, dirichlet=None,
                 neumann=None, trimmed_neumann=None, body_load=None,
                 point_loads=None, exact=None):
        if kind not in ("poisson", "elasticity", "shell"):
            raise ValueError(f"unknown problem kind {kind!r}")
        for edge in (dirichlet or {}):
            if edge not in EDGE_NAMES:
                raise ValueError(f"Dirichlet data only on background edges, got {edge!r}")
        for edge in (neumann or {}):
            if edge not in EDGE_NAMES:
                raise ValueError(f"Neumann data only on background edges, got {edge!r}")
        self.kind = kind
        self.geometry = geometry
        self.trimming = trimming
        self.material = material
        self.dirichlet = dict(dirichlet or {})
        self.neumann = dict(neumann or {})
        self.trimmed_neumann = trimmed_neumann
        self.body_load = body_load
        self.point_loads = list(point_loads or [])
        self.exact = exact
        if kind == "shell" and geometry.d != 3:
            raise ValueError("shell problems need a surface map into R^3")
        if kind != "shell" and geometry.d != 2:
            raise ValueError("planar problems need a 2D geometry map")
        if kind in ("elasticity", "shell") and material is None:
            raise ValueError("material parameters required")

    def kernel(self):
        if self.kind == "poisson":
            return PoissonKernel(self.material)
        if self.kind == "elasticity":
            return ElasticityKernel(self.material)
        return ShellKernel(self.material)

    @property
    def ncomp(self) -> int:
        return {"poisson": 1, "elasticity": 2, "shell": 3}[self.kind]


# ----------------------------------------------------------------------
# exact solutions


class SingularPoissonExact:
    """u = x^alpha y^alpha; in H^2 but not H^3 for alpha = 2.4."""

    def __init__(self, alpha: float = 2.4):
        if alpha <= 2.0:
            raise ValueError("alpha must exceed 2 for a classical source term")
        self.alpha = alpha

    def value(self, x):
        x = np.atleast_2d(x)
        return x[:, 0] ** self.alpha * x[:, 1] ** self.alpha

    def gradient(self, x):
        x = np.atleast_2d(x)
        a = self.alpha
        gx = a * np.power(x[:, 0], a - 1) * np.power(x[:, 1], a)
        gy = a * np.power(x[:, 0], a) * np.power(x[:, 1], a - 1)
        return np.stack([gx, gy], axis=1)

    def source(self, x):
        x = np.atleast_2d(x)
        a = self.alpha
        return -a * (a - 1) * (
            np.power(x[:, 0], a - 2) * np.power(x[:, 1], a)
            + np.power(x[:, 0], a) * np.power(x[:, 1], a - 2)
        )


class PlateWithHoleExact:
    """Kirsch solution: infinite plate, circular hole, traction T_x at infinity.

    Plane strain displacement in the Kolosov form; stresses from the
    classical polar formulas.
    """

    def __init__(self, material: MaterialParams, T_x: float = 10.0, R: float = 1.0):
        self.mat = material
        self.T = T_x
        self.R = R

    def _polar(self, x):
        x = np.atleast_2d(x)
        r = np.hypot(x[:, 0], x[:, 1])
        if np.any(r < 1e-12):
            raise ValueError("evaluation at the hole center")
        th = np.arctan2(x[:, 1], x[:, 0])
        return r, th

    def value(self, x):
        r, th = self._polar(x)
        T, R, mu, k = self.T, self.R, self.mat.mu, self.mat.kolosov
        f = T * R / (8 * mu)
        ux = f * ((r / R) * (k + 1) * np.cos(th)
                  + 2 * (R / r) * ((1 + k) * np.cos(th) + np.cos(3 * th))
                  - 2 * (R**3 / r**3) * np.cos(3 * th))
        uy = f * ((r / R) * (k - 3) * np.sin(th)
                  + 2 * (R / r) * ((1 - k) * np.sin(th) + np.sin(3 * th))
                  - 2 * (R**3 / r**3) * np.sin(3 * th))
        return np.stack([ux, uy], axis=1)

    def gradient(self, x):
        """Displacement gradient du_i/dx_j, shape (n, 2, 2)."""
        r, th = self._polar(x)
        T, R, mu, k = self.T, self.R, self.mat.mu, self.mat.kolosov
        f = T * R / (8 * mu)
        c, s = np.cos(th), np.sin(th)
        c3, s3 = np.cos(3 * th), np.sin(3 * th)
        dux_dr = f * ((k + 1) * c / R - 2 * R / r**2 * ((1 + k) * c + c3)
                      + 6 * R**3 / r**4 * c3)
        dux_dth = f * (-(r / R) * (k + 1) * s
                       + 2 * (R / r) * (-(1 + k) * s - 3 * s3)
                       + 6 * (R**3 / r**3) * s3)
        duy_dr = f * ((k - 3) * s / R - 2 * R / r**2 * ((1 - k) * s + s3)
                      + 6 * R**3 / r**4 * s3)
        duy_dth = f * ((r / R) * (k - 3) * c
                       + 2 * (R / r) * ((1 - k) * c + 3 * c3)
                       - 6 * (R**3 / r**3) * c3)
        out = np.empty((len(r), 2, 2))
        out[:, 0, 0] = dux_dr * c - dux_dth * s / r
        out[:, 0, 1] = dux_dr * s + dux_dth * c / r
        out[:, 1, 0] = duy_dr * c - duy_dth * s / r
        out[:, 1, 1] = duy_dr * s + duy_dth * c / r
        return out

    def stress(self, x):
        """Cartesian stress rows [s_xx, s_yy, s_xy]."""
        r, th = self._polar(x)
        T, R = self.T, self.R
        q = (R / r) ** 2
        c2, s2 = np.cos(2 * th), np.sin(2 * th)
        srr = T / 2 * (1 - q) + T / 2 * (1 - 4 * q + 3 * q * q) * c2
        stt = T / 2 * (1 + q) - T / 2 * (1 + 3 * q * q) * c2
        srt = -T / 2 * (1 + 2 * q - 3 * q * q) * s2
        c, s = np.cos(th), np.sin(th)
        sxx = srr * c * c + stt * s * s - 2 * srt * s * c
        syy = srr * s * s + stt * c * c + 2 * srt * s * c
        sxy = (srr - stt) * s * c + srt * (c * c - s * s)
        return np.stack([sxx, syy, sxy], axis=1)

    def traction(self, x, n):
        """Traction sigma . n at points with outward normals."""
        sig = self.stress(x)
        tx = sig[:, 0] * n[:, 0] + sig[:, 2] * n[:, 1]
        ty = sig[:, 2] * n[:, 0] + sig[:, 1] * n[:, 1]
        return np.stack([tx, ty], axis=1)


class PolyPoissonExact:
    """Linear field, reproduced exactly by any space with p >= 1."""

    def __init__(self, a=1.0, b=2.0, c=3.0):
        self.coef = (a, b, c)

    def value(self, x):
        x = np.atleast_2d(x)
        a, b, c = self.coef
        return a + b * x[:, 0] + c * x[:, 1]

    def gradient(self, x):
        x = np.atleast_2d(x)
        b, c = self.coef[1:]
        return np.column_stack([np.full(len(x), b), np.full(len(x), c)])

    def source(self, x):
        x = np.atleast_2d(x)
        return np.zeros(len(x))


class SinePoissonExact:
    """u = sin(pi x) sin(pi y), homogeneous on the unit square boundary."""

    def value(self, x):
        x = np.atleast_2d(x)
        return np.sin(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])

    def gradient(self, x):
        x = np.atleast_2d(x)
        gx = np.pi * np.cos(np.pi * x[:, 0]) * np.sin(np.pi * x[:, 1])
        gy = np.pi * np.sin(np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1])
        return np.stack([gx, gy], axis=1)

    def source(self, x):
        return 2 * np.pi**2 * self.value(x)
