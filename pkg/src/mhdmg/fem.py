"""Mixed finite element spaces and assembly for the 2D incompressible
viscoresistive MHD system with a solenoidal Lagrange multiplier.

Spaces: vector P2 velocity, lowest-order (first-family) Nedelec magnetic
field, P1 pressure, P1 multiplier.  Unknown ordering in the flat coefficient
vector is (u, B, p, r).  In 2D the curl of a vector field is the scalar
scurl(B) = dB2/dx - dB1/dy and the curl of a scalar w is (dw/dy, -dw/dx).

The Newton system carries the block structure

    [ F   Z   Bdᵀ  0  ] [du]   [-R_u]
    [ Y   D   0   Cgᵀ ] [dB] = [-R_B]
    [ Bd  0   0    0  ] [dp]   [-R_p]
    [ 0   Cg  0    0  ] [dr]   [-R_r]

with Bd = -∫ q div(u) and Cg = -∫ grad(s)·B, so the constraint rows are the
negated divergence/solenoidal forms and the gradient blocks are exact
transposes of the constraint blocks.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .mesh import BoundaryTag, Mesh

_revision = itertools.count()

BOUNDARY_ALL = frozenset({BoundaryTag.LEFT, BoundaryTag.RIGHT,
                          BoundaryTag.BOTTOM, BoundaryTag.TOP})
BOUNDARY_WALLS = frozenset({BoundaryTag.BOTTOM, BoundaryTag.TOP})


# -- quadrature --------------------------------------------------------------

def triangle_rule(n: int = 4):
    """Conical-product rule on the reference triangle, exact to degree 2n-1.

    Returns barycentric coordinates (nq, 3) and weights summing to 1/2.
    """
    xj, wj = roots_jacobi(n, 1.0, 0.0)
    x = 0.5 * (xj + 1.0)
    wx = wj / 4.0
    tl, wl = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (tl + 1.0)
    wt = wl / 2.0
    xi = np.repeat(x, n)
    eta = (t[None, :] * (1.0 - x)[:, None]).ravel()
    w = (wx[:, None] * wt[None, :]).ravel()
    bary = np.column_stack([1.0 - xi - eta, xi, eta])
    return bary, w


def edge_rule(n: int = 6):
    """Gauss-Legendre on [0, 1]; weights sum to 1."""
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (t + 1.0), 0.5 * w


# -- reference bases ---------------------------------------------------------

def p1_values(bary):
    return np.asarray(bary, dtype=float)


def p2_values(bary):
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                            4 * l1 * l2, 4 * l0 * l2, 4 * l0 * l1])


def p2_dlambda(bary):
    """Derivatives of the six P2 functions w.r.t. the barycentric coords."""
    nq = len(bary)
    d = np.zeros((nq, 6, 3))
    for i in range(3):
        d[:, i, i] = 4 * bary[:, i] - 1
    d[:, 3, 1] = 4 * bary[:, 2]
    d[:, 3, 2] = 4 * bary[:, 1]
    d[:, 4, 0] = 4 * bary[:, 2]
    d[:, 4, 2] = 4 * bary[:, 0]
    d[:, 5, 0] = 4 * bary[:, 1]
    d[:, 5, 1] = 4 * bary[:, 0]
    return d


# -- layout and state --------------------------------------------------------

@dataclass(frozen=True)
class SpaceLayout:
    """Block offsets of the concatenated (u, B, p, r) unknown vector."""

    n_vc: int
    n_ec: int

    @property
    def n_u(self):
        return 2 * (self.n_vc + self.n_ec)

    @property
    def n_B(self):
        return self.n_ec

    @property
    def n_p(self):
        return self.n_vc

    @property
    def n_r(self):
        return self.n_vc

    @property
    def n_total(self):
        return self.n_u + self.n_B + self.n_p + self.n_r

    @property
    def off_u(self):
        return 0

    @property
    def off_B(self):
        return self.n_u

    @property
    def off_p(self):
        return self.n_u + self.n_B

    @property
    def off_r(self):
        return self.n_u + self.n_B + self.n_p

    def split(self, x):
        x = np.asarray(x)
        return (x[..., :self.off_B], x[..., self.off_B:self.off_p],
                x[..., self.off_p:self.off_r], x[..., self.off_r:])


class StateVector:
    """Flat coefficient vector with layout-aware block views."""

    def __init__(self, layout: SpaceLayout, data=None):
        self.layout = layout
        self.data = np.zeros(layout.n_total) if data is None else np.asarray(data, dtype=float)
        if self.data.shape != (layout.n_total,):
            raise ValueError("state length does not match layout")

    @property
    def u(self):
        return self.data[:self.layout.off_B]

    @property
    def B(self):
        return self.data[self.layout.off_B:self.layout.off_p]

    @property
    def p(self):
        return self.data[self.layout.off_p:self.layout.off_r]

    @property
    def r(self):
        return self.data[self.layout.off_r:]

    def copy(self):
        return StateVector(self.layout, self.data.copy())


def as_array(state) -> np.ndarray:
    return state.data if isinstance(state, StateVector) else np.asarray(state, dtype=float)


# -- boundary conditions ------------------------------------------------------

@dataclass
class BcSet:
    """Dirichlet data: global dof ids with prescribed values, plus optional
    single-vertex pins for the pressure and the multiplier."""

    dofs: np.ndarray
    values: np.ndarray
    pinned_pressure: Optional[tuple[int, float]] = None   # (raw vertex id, value)
    pinned_multiplier: Optional[tuple[int, float]] = None

    def __post_init__(self):
        self.dofs = np.asarray(self.dofs, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=float)
        if len(np.unique(self.dofs)) != len(self.dofs):
            raise ValueError("duplicate Dirichlet dof")

    def all_constrained(self, disc: "Discretization"):
        lay = disc.layout
        ids = [self.dofs]
        vals = [self.values]
        if self.pinned_pressure is not None:
            vid, val = self.pinned_pressure
            ids.append([lay.off_p + disc.mesh.vertex_class[vid]])
            vals.append([val])
        if self.pinned_multiplier is not None:
            vid, val = self.pinned_multiplier
            ids.append([lay.off_r + disc.mesh.vertex_class[vid]])
            vals.append([val])
        ids = np.concatenate([np.asarray(i, dtype=np.int64) for i in ids])
        vals = np.concatenate([np.asarray(v, dtype=float) for v in vals])
        if len(np.unique(ids)) != len(ids):
            raise ValueError("pinned dof collides with a Dirichlet dof")
        if len(ids) and (ids.min() < 0 or ids.max() >= lay.n_total):
            raise ValueError("constraint on nonexistent dof")
        return ids, vals

    def free_mask(self, disc: "Discretization"):
        ids, _ = self.all_constrained(disc)
        mask = np.ones(disc.layout.n_total, dtype=bool)
        mask[ids] = False
        return mask


def empty_bcs() -> BcSet:
    return BcSet(np.zeros(0, dtype=np.int64), np.zeros(0))


# -- discretization -----------------------------------------------------------

class Discretization:
    """Per-mesh tabulations, geometry and dof maps shared by all assemblies."""

    def __init__(self, mesh: Mesh, quad_n: int = 4):
        self.mesh = mesh
        self.layout = SpaceLayout(mesh.n_vertex_classes, mesh.n_edge_classes)

        bary, w = triangle_rule(quad_n)
        self.quad_bary = bary
        self.quad_w = w
        nq = len(w)

        cells = mesh.cells
        v = mesh.vertices
        p0 = v[cells[:, 0]]
        d1 = v[cells[:, 1]] - p0
        d2 = v[cells[:, 2]] - p0
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        self.detJ = det
        # physical gradients of the barycentric coordinates
        gl = np.empty((len(cells), 3, 2))
        gl[:, 1, 0] = d2[:, 1] / det
        gl[:, 1, 1] = -d2[:, 0] / det
        gl[:, 2, 0] = -d1[:, 1] / det
        gl[:, 2, 1] = d1[:, 0] / det
        gl[:, 0] = -gl[:, 1] - gl[:, 2]
        self.grad_lambda = gl

        self.W = w[None, :] * det[:, None]            # (nc, nq) measure
        self.V1 = p1_values(bary)                     # (nq, 3)
        self.V2 = p2_values(bary)                     # (nq, 6)
        dP2 = p2_dlambda(bary)                        # (nq, 6, 3)
        self.G2 = np.einsum("qli,cid->cqld", dP2, gl)  # (nc, nq, 6, 2)
        self.G1 = gl                                   # (nc, 3, 2), constant in q

        # Nedelec: local edge k opposite vertex k, endpoints (k+1)%3, (k+2)%3;
        # tail is the endpoint with the lower raw vertex id (canonical)
        loc_a = np.array([1, 2, 0])
        loc_b = np.array([2, 0, 1])
        ga = cells[:, loc_a]
        gb = cells[:, loc_b]
        swap = ga > gb
        lo = np.where(swap, loc_b[None, :], loc_a[None, :])
        hi = np.where(swap, loc_a[None, :], loc_b[None, :])
        nc = len(cells)
        rows = np.arange(nc)[:, None]
        gl_lo = gl[rows, lo]                          # (nc, 3, 2)
        gl_hi = gl[rows, hi]
        # N_k(q) = lam_lo(q) grad(lam_hi) - lam_hi(q) grad(lam_lo)
        lam_at = bary.T                               # (3, nq)
        lam_lo_cq = lam_at[lo]                        # (nc, 3, nq)
        lam_hi_cq = lam_at[hi]
        self.VN = (lam_lo_cq[..., None] * gl_hi[:, :, None, :]
                   - lam_hi_cq[..., None] * gl_lo[:, :, None, :]).transpose(0, 2, 1, 3)
        # (nc, nq, 3, 2)
        self.CN = 2.0 * (gl_lo[:, :, 0] * gl_hi[:, :, 1]
                         - gl_lo[:, :, 1] * gl_hi[:, :, 0])   # (nc, 3)

        # dof maps
        vcl = mesh.vertex_class
        ecl = mesh.edge_class
        n_vc = mesh.n_vertex_classes
        self.cell_p2 = np.concatenate([vcl[cells], n_vc + ecl[mesh.cell_edges]], axis=1)
        cu = np.empty((nc, 12), dtype=np.int64)
        cu[:, 0::2] = 2 * self.cell_p2
        cu[:, 1::2] = 2 * self.cell_p2 + 1
        self.cell_u = cu
        self.cell_B = self.layout.off_B + ecl[mesh.cell_edges]
        self.cell_p = self.layout.off_p + vcl[cells]
        self.cell_r = self.layout.off_r + vcl[cells]

        # node coordinates / tags per class (representatives)
        self.vclass_coords = v[mesh.class_vertex]
        rep_edges = mesh.edges[mesh.class_edge]
        self.eclass_mid = 0.5 * (v[rep_edges[:, 0]] + v[rep_edges[:, 1]])
        self.p2_coords = np.vstack([self.vclass_coords, self.eclass_mid])
        self.vclass_tag = mesh.vertex_tag[mesh.class_vertex]
        self.eclass_tag = mesh.edge_tag[mesh.class_edge]
        self.p2_tag = np.concatenate([self.vclass_tag, self.eclass_tag])

        self._scatter_cache: dict = {}

    # COO scatter index arrays, cached per (test dofs, trial dofs) pair
    def _scatter(self, key, rows_cellwise, cols_cellwise):
        if key not in self._scatter_cache:
            nt = rows_cellwise.shape[1]
            nr = cols_cellwise.shape[1]
            r = np.broadcast_to(rows_cellwise[:, :, None],
                                (len(rows_cellwise), nt, nr)).ravel()
            c = np.broadcast_to(cols_cellwise[:, None, :],
                                (len(cols_cellwise), nt, nr)).ravel()
            self._scatter_cache[key] = (r, c)
        return self._scatter_cache[key]


# -- physics configuration -----------------------------------------------------

@dataclass
class PhysicsConfig:
    """Steady or transient coefficients of the MHD forms.

    sigma scales the time-derivative mass terms, theta scales the dynamic
    spatial terms (viscous, convection, Lorentz, curl-curl, induction);
    pressure/multiplier gradients, constraints and forcing are always
    assembled at full weight.  `history` is an optional vector added to the
    residual (time-stepping history contributions).  With dyn_only=True only
    the theta-scaled dynamic terms are assembled (used to build history).
    """

    re: float
    re_m: float
    f: Optional[Callable] = None
    g: Optional[Callable] = None
    sigma: float = 0.0
    theta: float = 1.0
    history: Optional[np.ndarray] = None
    dyn_only: bool = False


# -- block system ---------------------------------------------------------------

@dataclass
class BlockSystem:
    """Sparse blocks of the Newton matrix plus bookkeeping."""

    F: sp.csr_matrix
    Z: sp.csr_matrix
    Y: sp.csr_matrix
    D: sp.csr_matrix
    B_div: sp.csr_matrix
    C_grad: sp.csr_matrix
    layout: SpaceLayout
    rhs: Optional[np.ndarray] = None
    bc: Optional[BcSet] = None
    eliminated: Optional[np.ndarray] = None   # global ids with unit diagonal
    revision: int = field(default_factory=lambda: next(_revision))
    _mono: Optional[sp.csr_matrix] = None

    def monolithic(self) -> sp.csr_matrix:
        """Assembled monolithic operator of the block structure."""
        if self._mono is None:
            lay = self.layout
            zpp = sp.csr_matrix((lay.n_p, lay.n_p))
            zrr = sp.csr_matrix((lay.n_r, lay.n_r))
            A = sp.bmat([
                [self.F, self.Z, self.B_div.T, None],
                [self.Y, self.D, None, self.C_grad.T],
                [self.B_div, None, zpp, None],
                [None, self.C_grad, None, zrr],
            ], format="csr")
            if self.eliminated is not None and len(self.eliminated):
                ind = np.zeros(lay.n_total)
                ind[self.eliminated] = 1.0
                A = (A + sp.diags(ind)).tocsr()
            A.sort_indices()
            self._mono = A
        return self._mono

    def matvec(self, x):
        return self.monolithic() @ x


def _zero_rows(A: sp.csr_matrix, keep: np.ndarray) -> sp.csr_matrix:
    A = A.tocsr(copy=True)
    counts = np.diff(A.indptr)
    A.data *= np.repeat(keep, counts)
    A.eliminate_zeros()
    return A


def _zero_cols(A: sp.csr_matrix, keep: np.ndarray) -> sp.csr_matrix:
    A = A.tocsr(copy=True)
    A.data *= keep[A.indices]
    A.eliminate_zeros()
    return A


def apply_bcs(system: BlockSystem, bc: BcSet, disc: Discretization) -> BlockSystem:
    """Symmetric Dirichlet elimination with unit diagonals and RHS lifting."""
    lay = system.layout
    ids, vals = bc.all_constrained(disc)
    free = np.ones(lay.n_total, dtype=bool)
    free[ids] = False
    fu, fB, fp, fr = lay.split(free.astype(float))

    rhs = system.rhs
    if rhs is not None:
        rhs = rhs.copy()
        if np.any(vals != 0.0):
            g = np.zeros(lay.n_total)
            g[ids] = vals
            rhs -= system.monolithic() @ g
        rhs[ids] = vals

    out = BlockSystem(
        F=_zero_cols(_zero_rows(system.F, fu), fu),
        Z=_zero_cols(_zero_rows(system.Z, fu), fB),
        Y=_zero_cols(_zero_rows(system.Y, fB), fu),
        D=_zero_cols(_zero_rows(system.D, fB), fB),
        B_div=_zero_cols(_zero_rows(system.B_div, fp), fu),
        C_grad=_zero_cols(_zero_rows(system.C_grad, fr), fB),
        layout=lay, rhs=rhs, bc=bc, eliminated=ids,
    )
    return out


# -- assembly -------------------------------------------------------------------

def _fields_at_qp(disc: Discretization, x: np.ndarray):
    """Evaluate the state at quadrature points, cellwise."""
    u_loc = x[disc.cell_u]                      # (nc, 12)
    ul = u_loc.reshape(len(u_loc), 6, 2)        # (nc, 6, 2)
    u_q = np.einsum("ql,cld->cqd", disc.V2, ul)
    grad_u = np.einsum("cqle,cld->cqde", disc.G2, ul)   # d component, e deriv
    B_loc = x[disc.cell_B]
    B_q = np.einsum("cqkd,ck->cqd", disc.VN, B_loc)
    w_q = np.einsum("ck,ck->c", disc.CN, B_loc)          # cellwise-constant curl
    p_loc = x[disc.cell_p]
    p_q = np.einsum("ql,cl->cq", disc.V1, p_loc)
    r_loc = x[disc.cell_r]
    grad_r = np.einsum("cld,cl->cd", disc.G1, r_loc)     # constant per cell
    return ul, u_q, grad_u, B_q, w_q, p_q, grad_r


def _qp_coords(disc: Discretization):
    return np.einsum("qi,cid->cqd", disc.quad_bary, disc.mesh.vertices[disc.mesh.cells])


def assemble_residual(disc: Discretization, state, cfg: PhysicsConfig,
                      bc: Optional[BcSet] = None) -> np.ndarray:
    """Nonlinear block residual; Dirichlet/pinned rows are zeroed when a
    BcSet is supplied."""
    x = as_array(state)
    lay = disc.layout
    if x.shape != (lay.n_total,):
        raise ValueError("state length does not match layout")
    _, u_q, grad_u, B_q, w_q, p_q, grad_r = _fields_at_qp(disc, x)
    W = disc.W
    th = cfg.theta
    nc, nq = W.shape

    conv = np.einsum("cqe,cqde->cqd", u_q, grad_u)
    lorentz = np.empty_like(u_q)                 # -(curl B) x B = (w B2, -w B1)
    lorentz[..., 0] = w_q[:, None] * B_q[..., 1]
    lorentz[..., 1] = -w_q[:, None] * B_q[..., 0]
    vec_u = th * (conv + lorentz)
    eps = 0.5 * (grad_u + grad_u.transpose(0, 1, 3, 2))
    tens_u = (th * 2.0 / cfg.re) * eps
    s_q = u_q[..., 0] * B_q[..., 1] - u_q[..., 1] * B_q[..., 0]
    scal_B = th * (w_q[:, None] / cfg.re_m - s_q)
    vec_B = np.zeros_like(B_q)

    if not cfg.dyn_only:
        if cfg.sigma != 0.0:
            vec_u = vec_u + cfg.sigma * u_q
            vec_B = vec_B + cfg.sigma * B_q
        tens_u[..., 0, 0] -= p_q
        tens_u[..., 1, 1] -= p_q
        vec_B = vec_B - grad_r[:, None, :]
        if cfg.f is not None:
            vec_u = vec_u - cfg.f(_qp_coords(disc))
        if cfg.g is not None:
            vec_B = vec_B - cfg.g(_qp_coords(disc))

    r_u_el = (np.einsum("cq,cqd,ql->cld", W, vec_u, disc.V2)
              + np.einsum("cq,cqde,cqle->cld", W, tens_u, disc.G2)).reshape(nc, 12)
    r_B_el = (np.einsum("cq,cq,ck->ck", W, scal_B, disc.CN)
              + np.einsum("cq,cqd,cqkd->ck", W, vec_B, disc.VN))

    R = np.zeros(lay.n_total)
    np.add.at(R, disc.cell_u, r_u_el)
    np.add.at(R, disc.cell_B, r_B_el)

    if not cfg.dyn_only:
        div_u = grad_u[..., 0, 0] + grad_u[..., 1, 1]
        r_p_el = -np.einsum("cq,cq,ql->cl", W, div_u, disc.V1)
        r_r_el = -np.einsum("cq,cqd,cld->cl", W, B_q, disc.G1)
        np.add.at(R, disc.cell_p, r_p_el)
        np.add.at(R, disc.cell_r, r_r_el)
        if cfg.history is not None:
            R += cfg.history

    if bc is not None:
        ids, _ = bc.all_constrained(disc)
        R[ids] = 0.0
    return R


def assemble_jacobian(disc: Discretization, state, cfg: PhysicsConfig,
                      chunk: int = 8192) -> BlockSystem:
    """Newton linearization about `state` (no boundary conditions applied)."""
    x = as_array(state)
    lay = disc.layout
    W = disc.W
    nc, nq = W.shape
    th = cfg.theta
    _, u_q, grad_u, B_q, w_q, _, _ = _fields_at_qp(disc, x)

    dataF = np.empty((nc, 12, 12))
    dataZ = np.empty((nc, 12, 3))
    dataY = np.empty((nc, 3, 12))
    dataD = np.empty((nc, 3, 3))
    dataBd = np.empty((nc, 3, 12))
    dataCg = np.empty((nc, 3, 3))

    for s in range(0, nc, chunk):
        e = min(s + chunk, nc)
        Wc = W[s:e]
        G2 = disc.G2[s:e]
        VN = disc.VN[s:e]
        CN = disc.CN[s:e]
        uq = u_q[s:e]
        gu = grad_u[s:e]
        Bq = B_q[s:e]
        wq = w_q[s:e]

        # F: (2/Re)*eps:eps + full convection linearization + optional mass
        lap = np.einsum("cq,cqle,cqme->clm", Wc, G2, G2)
        cross = np.einsum("cq,cqlb,cqma->clmab", Wc, G2, G2)
        conv1 = np.einsum("cq,cqe,cqme,ql->clm", Wc, uq, G2, disc.V2)
        conv2 = np.einsum("cq,ql,qm,cqab->clmab", Wc, disc.V2, disc.V2, gu)
        Fel = np.zeros((e - s, 6, 6, 2, 2))
        nu = th * 2.0 / cfg.re
        Fel[..., 0, 0] = 0.5 * nu * lap + th * conv1
        Fel[..., 1, 1] = 0.5 * nu * lap + th * conv1
        Fel += 0.5 * nu * cross
        Fel += th * conv2
        if cfg.sigma != 0.0:
            m2 = np.einsum("cq,ql,qm->clm", Wc, disc.V2, disc.V2)
            Fel[..., 0, 0] += cfg.sigma * m2
            Fel[..., 1, 1] += cfg.sigma * m2
        dataF[s:e] = Fel.transpose(0, 1, 3, 2, 4).reshape(e - s, 12, 12)

        # Z = d/dB of the momentum Lorentz term
        rotB = np.empty_like(Bq)                       # (-B2, B1)
        rotB[..., 0] = -Bq[..., 1]
        rotB[..., 1] = Bq[..., 0]
        rotN = np.empty_like(VN)                       # (-N2, N1)
        rotN[..., 0] = -VN[..., 1]
        rotN[..., 1] = VN[..., 0]
        wq_b = np.broadcast_to(wq[:, None], Wc.shape)
        Zel = -th * (np.einsum("cq,ck,cqa,ql->clak", Wc, CN, rotB, disc.V2)
                     + np.einsum("cq,cq,cqka,ql->clak", Wc, wq_b, rotN, disc.V2))
        dataZ[s:e] = Zel.reshape(e - s, 12, 3)

        # Y = d/du of the induction term -(u x B, scurl c)
        sB = np.empty_like(Bq)                         # (B2, -B1)
        sB[..., 0] = Bq[..., 1]
        sB[..., 1] = -Bq[..., 0]
        Yel = -th * np.einsum("cq,qm,cqb,ck->ckmb", Wc, disc.V2, sB, CN)
        dataY[s:e] = Yel.reshape(e - s, 3, 12)

        # D = curl-curl + d/dB of the induction term + optional mass
        Del = (th / cfg.re_m) * np.einsum("cq,cj,ck->ckj", Wc, CN, CN)
        uxN = (uq[..., 0, None] * VN[..., 1] - uq[..., 1, None] * VN[..., 0])
        Del -= th * np.einsum("cq,cqj,ck->ckj", Wc, uxN, CN)
        if cfg.sigma != 0.0:
            Del += cfg.sigma * np.einsum("cq,cqjd,cqkd->ckj", Wc, VN, VN)
        dataD[s:e] = Del

        # constraint blocks
        Bd = -np.einsum("cq,qi,cqmb->cimb", Wc, disc.V1, G2)
        dataBd[s:e] = Bd.reshape(e - s, 3, 12)
        dataCg[s:e] = -np.einsum("cq,cid,cqjd->cij", Wc, disc.G1, VN)

    def scatter(key, rows, cols, data, shape):
        r, c = disc._scatter(key, rows, cols)
        return sp.coo_matrix((data.ravel(), (r, c)), shape=shape).tocsr()

    off_B, off_p, off_r = lay.off_B, lay.off_p, lay.off_r
    F = scatter("F", disc.cell_u, disc.cell_u, dataF, (lay.n_u, lay.n_u))
    Z = scatter("Z", disc.cell_u, disc.cell_B - off_B, dataZ, (lay.n_u, lay.n_B))
    Y = scatter("Y", disc.cell_B - off_B, disc.cell_u, dataY, (lay.n_B, lay.n_u))
    D = scatter("D", disc.cell_B - off_B, disc.cell_B - off_B, dataD, (lay.n_B, lay.n_B))
    Bd = scatter("Bd", disc.cell_p - off_p, disc.cell_u, dataBd, (lay.n_p, lay.n_u))
    Cg = scatter("Cg", disc.cell_r - off_r, disc.cell_B - off_B, dataCg, (lay.n_r, lay.n_B))
    return BlockSystem(F=F, Z=Z, Y=Y, D=D, B_div=Bd, C_grad=Cg, layout=lay)


# -- auxiliary matrices ----------------------------------------------------------

def assemble_nedelec_mass(disc: Discretization) -> sp.csr_matrix:
    lay = disc.layout
    data = np.einsum("cq,cqjd,cqkd->ckj", disc.W, disc.VN, disc.VN)
    r, c = disc._scatter("MN", disc.cell_B - lay.off_B, disc.cell_B - lay.off_B)
    return sp.coo_matrix((data.ravel(), (r, c)), shape=(lay.n_B, lay.n_B)).tocsr()


def assemble_velocity_mass(disc: Discretization) -> sp.csr_matrix:
    lay = disc.layout
    m2 = np.einsum("cq,ql,qm->clm", disc.W, disc.V2, disc.V2)
    nc = len(m2)
    data = np.zeros((nc, 6, 2, 6, 2))
    data[:, :, 0, :, 0] = m2
    data[:, :, 1, :, 1] = m2
    r, c = disc._scatter("Mu", disc.cell_u, disc.cell_u)
    return sp.coo_matrix((data.reshape(nc, 12, 12).ravel(), (r, c)),
                         shape=(lay.n_u, lay.n_u)).tocsr()


def assemble_p1_mass(disc: Discretization) -> sp.csr_matrix:
    n = disc.layout.n_p
    data = np.einsum("cq,ql,qm->clm", disc.W, disc.V1, disc.V1)
    lay = disc.layout
    r, c = disc._scatter("M1", disc.cell_p - lay.off_p, disc.cell_p - lay.off_p)
    return sp.coo_matrix((data.ravel(), (r, c)), shape=(n, n)).tocsr()


def project_to_p1(disc: Discretization, source) -> np.ndarray:
    """L2 projection onto continuous P1; source is a callable on physical
    points or a per-cell array (constant per cell)."""
    from scipy.sparse.linalg import splu
    if callable(source):
        vals = source(_qp_coords(disc))
    else:
        vals = np.broadcast_to(np.asarray(source, dtype=float)[:, None], disc.W.shape)
    b_el = np.einsum("cq,cq,ql->cl", disc.W, vals, disc.V1)
    b = np.zeros(disc.layout.n_p)
    np.add.at(b, disc.cell_p - disc.layout.off_p, b_el)
    M = assemble_p1_mass(disc).tocsc()
    return splu(M).solve(b)


# -- interpolation and Dirichlet data ----------------------------------------------

def edge_moments(mesh: Mesh, edge_ids, func, n: int = 6) -> np.ndarray:
    """Tangential moments of a vector field over raw edges, canonical
    (low-id to high-id) orientation."""
    t, w = edge_rule(n)
    e = mesh.edges[np.asarray(edge_ids, dtype=np.int64)]
    va = mesh.vertices[e[:, 0]]
    dv = mesh.vertices[e[:, 1]] - va
    pts = va[:, None, :] + t[None, :, None] * dv[:, None, :]
    vals = func(pts)
    return np.einsum("k,ekd,ed->e", w, vals, dv)


def interpolate_fields(disc: Discretization, u=None, B=None, p=None,
                       r=None) -> np.ndarray:
    """Finite element interpolant of analytic fields as a flat state."""
    lay = disc.layout
    x = np.zeros(lay.n_total)
    if u is not None:
        vals = u(disc.p2_coords)
        x[0:lay.n_u:2] = vals[:, 0]
        x[1:lay.n_u:2] = vals[:, 1]
    if B is not None:
        x[lay.off_B:lay.off_p] = edge_moments(disc.mesh, disc.mesh.class_edge, B)
    if p is not None:
        x[lay.off_p:lay.off_r] = p(disc.vclass_coords)
    if r is not None:
        x[lay.off_r:] = r(disc.vclass_coords)
    return x


def dirichlet_bcs(disc: Discretization, u=None, B=None, r=None,
                  tags=BOUNDARY_ALL, pinned_pressure=None,
                  pinned_multiplier=None) -> BcSet:
    """Dirichlet set on the tagged boundary: nodal values for u and r,
    tangential edge moments for B."""
    lay = disc.layout
    tag_ids = {int(t) for t in tags}
    dofs = []
    vals = []
    if u is not None:
        nodes = np.flatnonzero(np.isin(disc.p2_tag, list(tag_ids)))
        uv = u(disc.p2_coords[nodes])
        dofs.append(2 * nodes)
        vals.append(uv[:, 0])
        dofs.append(2 * nodes + 1)
        vals.append(uv[:, 1])
    if B is not None:
        ecls = np.flatnonzero(np.isin(disc.eclass_tag, list(tag_ids)))
        mom = edge_moments(disc.mesh, disc.mesh.class_edge[ecls], B)
        dofs.append(lay.off_B + ecls)
        vals.append(mom)
    if r is not None:
        vcls = np.flatnonzero(np.isin(disc.vclass_tag, list(tag_ids)))
        dofs.append(lay.off_r + vcls)
        vals.append(r(disc.vclass_coords[vcls]))
    dofs = (np.concatenate(dofs) if dofs else np.zeros(0, dtype=np.int64))
    vals = (np.concatenate(vals) if vals else np.zeros(0))
    return BcSet(dofs, vals, pinned_pressure=pinned_pressure,
                 pinned_multiplier=pinned_multiplier)


def lift_state(disc: Discretization, bc: BcSet) -> np.ndarray:
    """Zero state lifted by the Dirichlet/pinned values."""
    x = np.zeros(disc.layout.n_total)
    ids, vals = bc.all_constrained(disc)
    x[ids] = vals
    return x


# -- basis evaluation (diagnostics / tests) -----------------------------------------

def eval_basis(disc: Discretization, space: str, cell: int, bary) -> dict:
    """Physical-space basis tabulation on one cell at barycentric points."""
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    gl = disc.grad_lambda[cell]
    if space == "p1":
        return {"values": p1_values(bary), "grads": np.broadcast_to(gl, (len(bary), 3, 2))}
    if space == "p2":
        vals = p2_values(bary)
        grads = np.einsum("qli,id->qld", p2_dlambda(bary), gl)
        return {"values": vals, "grads": grads}
    if space == "nedelec":
        cells = disc.mesh.cells
        loc_a = np.array([1, 2, 0])
        loc_b = np.array([2, 0, 1])
        ga, gb = cells[cell, loc_a], cells[cell, loc_b]
        vals = np.empty((len(bary), 3, 2))
        curls = np.empty(3)
        for k in range(3):
            lo, hi = (loc_a[k], loc_b[k]) if ga[k] < gb[k] else (loc_b[k], loc_a[k])
            vals[:, k, :] = (bary[:, lo, None] * gl[hi] - bary[:, hi, None] * gl[lo])
            curls[k] = 2.0 * (gl[lo, 0] * gl[hi, 1] - gl[lo, 1] * gl[hi, 0])
        return {"values": vals, "curls": curls}
    raise ValueError(f"unknown space {space!r}")
