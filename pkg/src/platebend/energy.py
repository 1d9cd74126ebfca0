"""Discrete plate energies, their first variations, and metric defects.

The deformation y: Omega -> R^3 is a vector DG field (3, n_dofs).  Its
elastic state is measured by the strain m = (grad y)^T grad y - g
against a target metric g and by the reconstructed Hessian against a
spontaneous curvature Z.  This module evaluates

  * the stretching energy (mu/4) int |ghat m ghat|^2
                        + (lambda/8) int tr(ghat m ghat)^2,
    its simplified variant (1/2) int |m|^2, and their linearized first
    variations 2 int grad v . Q grad w (componentwise, Q frozen at the
    linearization point);
  * the bending energy built from the boundary-corrected reconstructed
    Hessian, as a value, a sparse bilinear form, and the data-coupling
    linear term;
  * the jump/boundary stabilization S_h with its matrix and data
    vector;
  * the external forcing functional;
  * the cubic bilayer coupling N_h (barycenter quadrature against the
    cell-averaged Hessian) with its trilinear first variation;
  * the two metric defects (cellwise-average and barycenter-pointwise).

Matrices returned here are scalar (one deformation component); the
forms are identical across components, so vector solves reuse one
factorization.  Data terms differ per component and are returned as
(3, n_dofs) vectors.  Throughout, quadratic energies relate to their
assembled forms by E(y) = 1/2 y^T A y - d^T y + const so that the
first variation in direction w is w^T (A y - d).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dgspace import DGSpace
from .errors import ConfigError
from .hessian import DiscreteHessianOperator, LiftingBlocks, boundary_lifting, project_p0


@dataclass(frozen=True)
class MaterialParams:
    """Lame constants and plate thickness; the cubic coupling factor
    alpha is always derived, never set."""

    mu: float
    lam: float
    s: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigError("material: mu must be positive")
        if self.lam < 0:
            raise ConfigError("material: lambda must be nonnegative")
        if self.s < 0:
            raise ConfigError("material: thickness s must be nonnegative")

    @property
    def alpha(self) -> float:
        return self.mu * (self.mu + self.lam) / (3.0 * (2.0 * self.mu + self.lam))

    @property
    def bend_norm_factor(self) -> float:
        return self.mu / 12.0

    @property
    def bend_trace_factor(self) -> float:
        return self.mu * self.lam / (12.0 * (2.0 * self.mu + self.lam))


def inv_sqrt_spd2(M: np.ndarray) -> np.ndarray:
    """Closed-form inverse square root of symmetric positive definite
    2x2 matrices, batched over leading axes."""
    M = np.asarray(M, dtype=np.float64)
    a = M[..., 0, 0]
    b = M[..., 0, 1]
    c = M[..., 1, 1]
    if np.abs(M[..., 1, 0] - b).max(initial=0.0) > 1e-12 * max(1.0, np.abs(M).max(initial=0.0)):
        raise ConfigError("inv_sqrt_spd2: matrix is not symmetric")
    det = a * c - b * b
    if np.any(det <= 0.0) or np.any(a <= 0.0):
        raise ConfigError("inv_sqrt_spd2: matrix is not positive definite")
    s = np.sqrt(det)
    t = np.sqrt(a + c + 2.0 * s)
    out = np.empty_like(M)
    out[..., 0, 0] = c + s
    out[..., 0, 1] = -b
    out[..., 1, 0] = -b
    out[..., 1, 1] = a + s
    return out / (s * t)[..., None, None]


class MetricField:
    """Target metric cached at the cell quadrature points.

    g, ginv, ghat are (nc, nq, 2, 2) with ghat the symmetric positive
    definite inverse square root; the generating callable is kept for
    evaluation elsewhere (edges, checks).
    """

    def __init__(self, space: DGSpace, fn):
        self.fn = fn
        g = np.asarray(fn(space.qp), dtype=np.float64)
        if g.shape != (space.n_cells, space.quad.n_points, 2, 2):
            raise ConfigError(
                f"metric callable returned shape {g.shape}, expected "
                f"{(space.n_cells, space.quad.n_points, 2, 2)}"
            )
        if np.abs(g - np.swapaxes(g, -1, -2)).max() > 1e-12 * max(1.0, np.abs(g).max()):
            raise ConfigError("metric is not symmetric at a quadrature point")
        self.g = g
        self.ghat = inv_sqrt_spd2(g)
        self.ginv = self.ghat @ self.ghat
        check = self.ghat @ g @ self.ghat
        err = np.abs(check - np.eye(2)).max()
        if err > 1e-12:
            raise ConfigError(f"metric inverse square root check failed ({err:.2e})")

    @classmethod
    def identity(cls, space: DGSpace) -> "MetricField":
        def fn(x):
            return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

        return cls(space, fn)


class CurvatureField:
    """Spontaneous curvature: one symmetric 2x2 tensor per cell."""

    def __init__(self, space: DGSpace, Z: np.ndarray):
        Z = np.asarray(Z, dtype=np.float64)
        if Z.shape == (2, 2):
            Z = np.broadcast_to(Z, (space.n_cells, 2, 2)).copy()
        if Z.shape != (space.n_cells, 2, 2):
            raise ConfigError(f"curvature field shape {Z.shape} does not match mesh")
        if np.abs(Z - np.swapaxes(Z, -1, -2)).max() > 1e-12 * max(1.0, np.abs(Z).max()):
            raise ConfigError("curvature tensor must be symmetric")
        self.Z = Z
        self._area = space.area

    @classmethod
    def from_regions(cls, space: DGSpace, table: dict[int, np.ndarray]) -> "CurvatureField":
        regions = space.mesh.cell_regions
        Z = np.zeros((space.n_cells, 2, 2))
        for c in range(space.n_cells):
            r = int(regions[c])
            if r not in table:
                raise ConfigError(f"no curvature tensor given for mesh region {r}")
            Z[c] = np.asarray(table[r], dtype=np.float64)
        return cls(space, Z)

    def norm2_integral(self) -> float:
        """int |Z|^2, exact for the piecewise constant field."""
        return float(np.einsum("c,cab,cab->", self._area, self.Z, self.Z))


@dataclass(frozen=True)
class PenaltyParams:
    gamma0: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 10.0

    def __post_init__(self):
        if min(self.gamma0, self.gamma1, self.gamma2) <= 0:
            raise ConfigError("stabilization parameters must be positive")


class ForceField:
    """External force density f(x, t) -> R^3."""

    def __init__(self, fn):
        self.fn = fn

    def sample(self, space: DGSpace, t: float = 0.0) -> np.ndarray:
        f = np.asarray(self.fn(space.qp, t), dtype=np.float64)
        if f.shape != (space.n_cells, space.quad.n_points, 3):
            raise ConfigError(f"force callable returned shape {f.shape}")
        if not np.isfinite(f).all():
            raise ConfigError("force is not finite at a quadrature point")
        return f


@dataclass
class BoundarySample:
    """Boundary data evaluated on the mesh at a fixed time.

    phi_d/grad_d sit on the dirichlet edges (ordered like
    mesh.labels.dirichlet), phi_m on the mixed edges, points on the
    pointwise-constraint vertices.  lifting is the tensor quad field
    subtracted from reconstructed Hessians; it is None exactly when
    there are no dirichlet/mixed edges.
    """

    phi_d: np.ndarray
    grad_d: np.ndarray
    phi_m: np.ndarray
    points: np.ndarray
    lifting: np.ndarray | None

    def delta(self, older: "BoundarySample") -> "BoundarySample":
        """Increment sample (self minus older); liftings subtract because
        the lifting is linear in the data."""
        lift = None
        if self.lifting is not None:
            lift = self.lifting - older.lifting
        return BoundarySample(
            phi_d=self.phi_d - older.phi_d,
            grad_d=self.grad_d - older.grad_d,
            phi_m=self.phi_m - older.phi_m,
            points=self.points - older.points,
            lifting=lift,
        )


class BoundaryData:
    """Prescribed deformation values/gradients, possibly time-dependent.

    phi(x, t) -> (..., 3) on dirichlet+mixed edges; grad_phi(x, t) ->
    (..., 3, 2) on dirichlet edges; point_values(x, t) -> (n, 3) at the
    pointwise-constraint vertices.
    """

    def __init__(self, phi=None, grad_phi=None, point_values=None):
        self.phi = phi
        self.grad_phi = grad_phi
        self.point_values = point_values

    def sample(self, space: DGSpace, blocks: LiftingBlocks, t: float = 0.0) -> BoundarySample:
        labels = space.mesh.labels
        nqe = space.traces.w.shape[1]
        nd, nm, npt = len(labels.dirichlet), len(labels.mixed), len(labels.point_bc)
        if nd and (self.phi is None or self.grad_phi is None):
            raise ConfigError("dirichlet edges require phi and grad_phi data")
        if nm and self.phi is None:
            raise ConfigError("mixed edges require phi data")
        if npt and self.point_values is None:
            raise ConfigError("pointwise constraints require point_values data")

        phi_d = np.zeros((nd, 3, nqe))
        grad_d = np.zeros((nd, 3, 2, nqe))
        phi_m = np.zeros((nm, 3, nqe))
        points = np.zeros((npt, 3))
        if nd:
            pts = space.traces.qp[labels.dirichlet]
            phi_d = np.moveaxis(np.asarray(self.phi(pts, t)), -1, 1)
            grad_d = np.moveaxis(np.asarray(self.grad_phi(pts, t)), (-2, -1), (1, 2))
        if nm:
            pts = space.traces.qp[labels.mixed]
            phi_m = np.moveaxis(np.asarray(self.phi(pts, t)), -1, 1)
        if npt:
            pts = space.mesh.vertices[labels.point_bc]
            points = np.asarray(self.point_values(pts, t), dtype=np.float64).reshape(npt, 3)

        lifting = None
        if nd or nm:
            lifting = boundary_lifting(
                space,
                blocks,
                phi_dirichlet=phi_d if nd else None,
                grad_dirichlet=grad_d if nd else None,
                phi_mixed=phi_m if nm else None,
            )
        return BoundarySample(phi_d, grad_d, phi_m, points, lifting)


def dirichlet_compatibility_gap(space: DGSpace, sample: BoundarySample, metric_fn) -> float:
    """max |Phi^T Phi - g| over dirichlet edge quadrature points."""
    labels = space.mesh.labels
    if len(labels.dirichlet) == 0:
        return 0.0
    pts = space.traces.qp[labels.dirichlet]
    g = np.asarray(metric_fn(pts))
    Phi = np.moveaxis(sample.grad_d, (1, 2), (-2, -1))  # (nd, nqe, 3, 2)
    first = np.einsum("...ma,...mb->...ab", Phi, Phi)
    return float(np.abs(first - g).max())


# -- stretching ---------------------------------------------------------


def strain_tensor(
    space: DGSpace,
    y: np.ndarray,
    metric: MetricField,
    grads: np.ndarray | None = None,
) -> np.ndarray:
    """m = (grad y)^T grad y - g at the quadrature points: (nc, nq, 2, 2).

    Callers holding grads_at_qp(y) already may pass it to skip the
    evaluation.
    """
    if grads is None:
        grads = space.grads_at_qp(y)  # (3, nc, nq, 2)
    return np.einsum("mcqa,mcqb->cqab", grads, grads, optimize=True) - metric.g


def stretching_energy(
    space: DGSpace,
    y: np.ndarray,
    metric: MetricField,
    mat: MaterialParams,
    grads: np.ndarray | None = None,
) -> float:
    m = strain_tensor(space, y, metric, grads)
    mh = metric.ghat @ m @ metric.ghat
    frob = np.einsum("cqab,cqab->cq", mh, mh)
    tr = np.trace(mh, axis1=-2, axis2=-1)
    return float(
        np.sum(space.detJw * (0.25 * mat.mu * frob + 0.125 * mat.lam * tr**2))
    )


def simplified_stretching(
    space: DGSpace,
    y: np.ndarray,
    metric: MetricField,
    grads: np.ndarray | None = None,
) -> float:
    m = strain_tensor(space, y, metric, grads)
    return 0.5 * float(np.sum(space.detJw * np.einsum("cqab,cqab->cq", m, m)))


def stretching_q_field(
    space: DGSpace,
    y_base: np.ndarray,
    metric: MetricField,
    mat: MaterialParams,
    grads: np.ndarray | None = None,
) -> np.ndarray:
    """Q with delta E^S(y_base; v, w) = 2 sum_m int grad v_m . Q grad w_m."""
    m = strain_tensor(space, y_base, metric, grads)
    tr = np.einsum("cqab,cqab->cq", m, metric.ginv)
    return 0.5 * mat.mu * (metric.ginv @ m @ metric.ginv) + 0.25 * mat.lam * tr[
        ..., None, None
    ] * metric.ginv


def simplified_q_field(
    space: DGSpace,
    y_base: np.ndarray,
    metric: MetricField,
    grads: np.ndarray | None = None,
) -> np.ndarray:
    """Q for the simplified stretching flow: the strain itself."""
    return strain_tensor(space, y_base, metric, grads)


def grad_form_value(space: DGSpace, Q: np.ndarray, v: np.ndarray, w: np.ndarray) -> float:
    """2 sum_m int grad v_m . Q grad w_m for vector fields v, w."""
    gv = space.grads_at_qp(v)
    gw = space.grads_at_qp(w)
    return 2.0 * float(np.einsum("cq,mcqa,cqab,mcqb->", space.detJw, gv, Q, gw))


def stretching_first_variation(
    space: DGSpace,
    y_base: np.ndarray,
    v: np.ndarray,
    w: np.ndarray,
    metric: MetricField,
    mat: MaterialParams,
) -> float:
    return grad_form_value(space, stretching_q_field(space, y_base, metric, mat), v, w)


def simplified_first_variation(
    space: DGSpace, y_base: np.ndarray, v: np.ndarray, w: np.ndarray, metric: MetricField
) -> float:
    return grad_form_value(space, simplified_q_field(space, y_base, metric), v, w)


def cell_block_matrix(space: DGSpace, blocks: np.ndarray) -> sp.csr_matrix:
    """Assemble per-cell (nloc x nloc) blocks into a block-diagonal
    scalar sparse matrix.  Row c*nloc+l holds the nloc entries of
    blocks[c, l] at columns c*nloc+m in ascending order, so the raveled
    blocks are already canonical CSR data."""
    nc, nloc = space.n_cells, space.nloc
    indptr = np.arange(space.n_dofs + 1, dtype=np.int32) * nloc
    indices = (
        np.arange(nc, dtype=np.int32)[:, None, None] * nloc
        + np.arange(nloc, dtype=np.int32)[None, None, :]
    )
    indices = np.broadcast_to(indices, (nc, nloc, nloc)).ravel()
    return sp.csr_matrix(
        (np.ascontiguousarray(blocks, dtype=np.float64).ravel(), indices, indptr),
        shape=(space.n_dofs, space.n_dofs),
    )


def grad_form_matrix(space: DGSpace, Q: np.ndarray) -> sp.csr_matrix:
    """Scalar matrix of 2 int grad v . Q grad w (block diagonal per cell).

    blocks[c, l, m] = 2 sum_q detJw[c, q] dN[c, q, l, :] Q[c, q] dN[c, q, m, :],
    contracted through batched matmuls (this sits on the hot path of the
    unconstrained flows).
    """
    nc, nloc = space.n_cells, space.nloc
    W = (2.0 * space.detJw)[..., None, None] * Q  # (nc, nq, 2, 2)
    T = space.dN @ W  # (nc, nq, nloc, 2)
    Tf = np.ascontiguousarray(T.transpose(0, 2, 1, 3)).reshape(nc, nloc, -1)
    Df = np.ascontiguousarray(space.dN.transpose(0, 2, 1, 3)).reshape(nc, nloc, -1)
    blocks = Tf @ Df.swapaxes(1, 2)
    return cell_block_matrix(space, blocks)


def mass_matrix(space: DGSpace) -> sp.csr_matrix:
    """Scalar L2 mass matrix (block diagonal per cell)."""
    blocks = np.einsum("cq,ql,qm->clm", space.detJw, space.N, space.N)
    return cell_block_matrix(space, blocks)


def broken_hessian_gram(space: DGSpace) -> sp.csr_matrix:
    """Scalar matrix of int D2v : D2w over cells (no liftings)."""
    blocks = np.einsum(
        "cq,cqlab,cqmab->clm", space.detJw, space.d2N, space.d2N, optimize=True
    )
    return cell_block_matrix(space, blocks)


# -- bending ------------------------------------------------------------


def bending_energy(
    space: DGSpace, H: np.ndarray, metric: MetricField, mat: MaterialParams
) -> float:
    """Energy of a boundary-corrected Hessian field H (3, nc, nq, 2, 2)."""
    Hh = np.einsum("cqab,mcqbd,cqde->mcqae", metric.ghat, H, metric.ghat, optimize=True)
    frob = np.einsum("mcqab,mcqab->cq", Hh, Hh)
    tr = np.einsum("mcqaa->cq", Hh)
    tr2 = np.einsum("mcqaa,mcqbb->cq", Hh, Hh)
    return float(
        np.sum(space.detJw * (mat.bend_norm_factor * frob + mat.bend_trace_factor * tr2))
    )


def _bending_weight_blocks(space: DGSpace, metric: MetricField, mat: MaterialParams) -> np.ndarray:
    """Per-quadrature-point 4x4 blocks of the bending bilinear form
    (including the quadrature weight and the variation factor 2)."""
    gi = metric.ginv
    W1 = np.einsum("cqki,cqjl->cqijkl", gi, gi)
    W2 = np.einsum("cqij,cqkl->cqijkl", gi, gi)
    W = 2.0 * mat.bend_norm_factor * W1 + 2.0 * mat.bend_trace_factor * W2
    W = W * space.detJw[..., None, None, None, None]
    nc, nq = space.n_cells, space.quad.n_points
    return W.reshape(nc, nq, 4, 4)


def bending_matrix(
    space: DGSpace,
    op: DiscreteHessianOperator,
    metric: MetricField,
    mat: MaterialParams,
) -> sp.csr_matrix:
    """Scalar matrix of delta E^B(v, w) = beta(H_h v, H_h w)."""
    W = _bending_weight_blocks(space, metric, mat).reshape(-1, 4, 4)
    nblk = W.shape[0]
    base = np.arange(nblk)[:, None, None] * 4
    rows = base + np.arange(4)[None, :, None]
    cols = base + np.arange(4)[None, None, :]
    Wmat = sp.coo_matrix(
        (W.ravel(), (np.broadcast_to(rows, W.shape).ravel(), np.broadcast_to(cols, W.shape).ravel())),
        shape=(nblk * 4, nblk * 4),
    ).tocsr()
    return (op.matrix.T @ (Wmat @ op.matrix)).tocsr()


def bending_data_vector(
    space: DGSpace,
    op: DiscreteHessianOperator,
    metric: MetricField,
    mat: MaterialParams,
    lifting: np.ndarray,
) -> np.ndarray:
    """(3, ndof) vector d with d_m . w = beta(L_m, H_h w)."""
    W = _bending_weight_blocks(space, metric, mat)
    nc, nq = space.n_cells, space.quad.n_points
    WL = np.einsum("cqij,mcqj->mcqi", W, lifting.reshape(3, nc, nq, 4))
    return (op.matrix.T @ WL.reshape(3, -1).T).T


def bending_first_variation(
    space: DGSpace,
    op: DiscreteHessianOperator,
    y: np.ndarray,
    w: np.ndarray,
    metric: MetricField,
    mat: MaterialParams,
    lifting: np.ndarray | None = None,
) -> float:
    """delta E^B at y in direction w, evaluated from Hessian fields."""
    Hy = op.apply(y)
    if lifting is not None:
        Hy = Hy - lifting
    Hw = op.apply(w)
    gi = metric.ginv
    term1 = np.einsum("cqka,mcqab,cqbl,mcqkl,cq->", gi, Hy, gi, Hw, space.detJw, optimize=True)
    term2 = np.einsum(
        "mcqab,cqab,mcqkl,cqkl,cq->", Hy, gi, Hw, gi, space.detJw, optimize=True
    )
    return float(2.0 * mat.bend_norm_factor * term1 + 2.0 * mat.bend_trace_factor * term2)


# -- stabilization ------------------------------------------------------


def _edge_block(space: DGSpace, e: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature matrix of int_e jump(v) jump(w) (or gradient jumps)
    over the stacked coefficients of the adjacent cells.

    Returns (cells, block) with block ((s*nloc) x (s*nloc)), s the
    number of sides.
    """
    topo = space.mesh.topology
    w = space.traces.w[e]
    boundary = topo.cells[e, 1] < 0
    if kind == "value":
        tabs = [space.traces.val[e, 0]]
        if not boundary:
            tabs.append(-space.traces.val[e, 1])
        J = np.hstack(tabs)  # (nqe, s*nloc)
        block = J.T @ (J * w[:, None])
    else:
        blocks = []
        for a in range(2):
            tabs = [space.traces.grad[e, 0, :, :, a]]
            if not boundary:
                tabs.append(-space.traces.grad[e, 1, :, :, a])
            J = np.hstack(tabs)
            blocks.append(J.T @ (J * w[:, None]))
        block = blocks[0] + blocks[1]
    cells = topo.cells[e, :1] if boundary else topo.cells[e]
    return cells, block


def edge_penalty_matrix(
    space: DGSpace, edges: np.ndarray, weights: np.ndarray, kind: str = "value"
) -> sp.csr_matrix:
    """sum_e weight_e int_e jump(v) jump(w) as a scalar sparse matrix."""
    nloc = space.nloc
    rows, cols, vals = [], [], []
    for e, we in zip(edges, weights):
        cells, block = _edge_block(space, int(e), kind)
        dofs = (cells[:, None] * nloc + np.arange(nloc)[None, :]).ravel()
        rows.append(np.repeat(dofs, len(dofs)))
        cols.append(np.tile(dofs, len(dofs)))
        vals.append((we * block).ravel())
    if not rows:
        return sp.csr_matrix((space.n_dofs, space.n_dofs))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.n_dofs, space.n_dofs),
    ).tocsr()


def edge_data_vector(
    space: DGSpace, edges: np.ndarray, weights: np.ndarray, data: np.ndarray, kind: str = "value"
) -> np.ndarray:
    """(3, ndof) vector of sum_e weight_e int_e data . (trace of w).

    data is (ne, 3, nqe) for values or (ne, 3, 2, nqe) for gradients;
    edges must be boundary edges.
    """
    nloc = space.nloc
    out = np.zeros((3, space.n_dofs))
    for i, (e, we) in enumerate(zip(edges, weights)):
        e = int(e)
        c = int(space.mesh.topology.cells[e, 0])
        w = space.traces.w[e]
        sl = slice(c * nloc, (c + 1) * nloc)
        if kind == "value":
            V = space.traces.val[e, 0]  # (nqe, nloc)
            out[:, sl] += we * np.einsum("q,mq,ql->ml", w, data[i], V)
        else:
            G = space.traces.grad[e, 0]  # (nqe, nloc, 2)
            out[:, sl] += we * np.einsum("q,maq,qla->ml", w, data[i], G)
    return out


def vertex_average_matrix(space: DGSpace) -> sp.csr_matrix:
    """Sparse (n_points x ndof) map to trace-averaged values at the
    pointwise-constraint vertices."""
    mesh = space.mesh
    k = space.k
    corner_nodes = [0, k, (k + 1) ** 2 - 1, k * (k + 1)]
    rows, cols, vals = [], [], []
    for i, v in enumerate(mesh.labels.point_bc):
        cells = mesh.vertex_cells[int(v)]
        wgt = 1.0 / len(cells)
        for c in cells:
            corner = int(np.flatnonzero(mesh.cells[c] == v)[0])
            rows.append(i)
            cols.append(c * space.nloc + corner_nodes[corner])
            vals.append(wgt)
    return sp.coo_matrix(
        (vals, (rows, cols)), shape=(len(mesh.labels.point_bc), space.n_dofs)
    ).tocsr()


def stabilization_matrix(space: DGSpace, pen: PenaltyParams) -> sp.csr_matrix:
    """Scalar matrix S with S_h(y) = 1/2 y^T S y - d^T y + const."""
    mesh = space.mesh
    topo = mesh.topology
    h = space.sizes.h_edge
    interior = topo.interior_ids
    val_edges = np.concatenate([interior, mesh.labels.dirichlet, mesh.labels.mixed])
    grad_interior = np.setdiff1d(interior, mesh.creases.edges)
    grad_edges = np.concatenate([grad_interior, mesh.labels.dirichlet])
    S = pen.gamma0 * edge_penalty_matrix(space, val_edges, h[val_edges] ** -3, "value")
    S = S + pen.gamma1 * edge_penalty_matrix(space, grad_edges, h[grad_edges] ** -1, "grad")
    if len(mesh.labels.point_bc):
        P = vertex_average_matrix(space)
        w = space.sizes.h_point**-2
        S = S + pen.gamma2 * (P.T @ sp.diags(w) @ P)
    return S.tocsr()


def stabilization_data_vector(
    space: DGSpace, pen: PenaltyParams, sample: BoundarySample
) -> np.ndarray:
    """(3, ndof) vector d of the data part of the stabilization."""
    mesh = space.mesh
    h = space.sizes.h_edge
    d = np.zeros((3, space.n_dofs))
    dm = np.concatenate([mesh.labels.dirichlet, mesh.labels.mixed]).astype(np.int64)
    if len(dm):
        data = np.concatenate([sample.phi_d, sample.phi_m], axis=0)
        d += pen.gamma0 * edge_data_vector(space, dm, h[dm] ** -3, data, "value")
    de = mesh.labels.dirichlet
    if len(de):
        d += pen.gamma1 * edge_data_vector(space, de, h[de] ** -1, sample.grad_d, "grad")
    if len(mesh.labels.point_bc):
        P = vertex_average_matrix(space)
        w = space.sizes.h_point**-2
        d += pen.gamma2 * (P.T @ (w[:, None] * sample.points)).T
    return d


def stabilization_constant(space: DGSpace, pen: PenaltyParams, sample: BoundarySample) -> float:
    """Data-only term completing S_h(y) = 1/2 y S y - d y + const."""
    mesh = space.mesh
    h = space.sizes.h_edge
    total = 0.0
    dm = np.concatenate([mesh.labels.dirichlet, mesh.labels.mixed]).astype(np.int64)
    if len(dm):
        data = np.concatenate([sample.phi_d, sample.phi_m], axis=0)
        wq = space.traces.w[dm]
        total += 0.5 * pen.gamma0 * float(
            np.einsum("e,emq,emq,eq->", h[dm] ** -3, data, data, wq)
        )
    de = mesh.labels.dirichlet
    if len(de):
        wq = space.traces.w[de]
        total += 0.5 * pen.gamma1 * float(
            np.einsum("e,emaq,emaq,eq->", h[de] ** -1, sample.grad_d, sample.grad_d, wq)
        )
    if len(mesh.labels.point_bc):
        w = space.sizes.h_point**-2
        total += 0.5 * pen.gamma2 * float(np.sum(w[:, None] * sample.points**2))
    return total


def stabilization(
    space: DGSpace, y: np.ndarray, pen: PenaltyParams, sample: BoundarySample | None = None
) -> float:
    """Direct evaluation of S_h(y) from traces (independent of the
    matrix assembly; used as its oracle)."""
    mesh = space.mesh
    topo = mesh.topology
    h = space.sizes.h_edge
    total = 0.0

    interior = topo.interior_ids
    if len(interior):
        jumps = space.jump_values(y, interior)  # (3, ne, nqe)
        wq = space.traces.w[interior]
        total += 0.5 * pen.gamma0 * float(
            np.einsum("e,meq,meq,eq->", h[interior] ** -3, jumps, jumps, wq)
        )
    grad_interior = np.setdiff1d(interior, mesh.creases.edges)
    if len(grad_interior):
        jg = space.jump_grads(y, grad_interior)  # (3, ne, nqe, 2)
        wq = space.traces.w[grad_interior]
        total += 0.5 * pen.gamma1 * float(
            np.einsum("e,meqa,meqa,eq->", h[grad_interior] ** -1, jg, jg, wq)
        )

    dm = np.concatenate([mesh.labels.dirichlet, mesh.labels.mixed]).astype(np.int64)
    if len(dm):
        tr = np.stack([space.trace_values(y[m], 0, dm) for m in range(3)])  # (3, ne, nqe)
        if sample is not None:
            tr = tr - np.moveaxis(
                np.concatenate([sample.phi_d, sample.phi_m], axis=0), 1, 0
            )
        wq = space.traces.w[dm]
        total += 0.5 * pen.gamma0 * float(np.einsum("e,meq,meq,eq->", h[dm] ** -3, tr, tr, wq))
    de = mesh.labels.dirichlet
    if len(de):
        tg = np.stack([space.trace_grads(y[m], 0, de) for m in range(3)])
        tg = np.moveaxis(tg, -1, -2)  # (3, nd, 2, nqe)
        if sample is not None:
            tg = tg - np.moveaxis(sample.grad_d, 1, 0)
        wq = space.traces.w[de]
        total += 0.5 * pen.gamma1 * float(
            np.einsum("e,meaq,meaq,eq->", h[de] ** -1, tg, tg, wq)
        )
    pts = mesh.labels.point_bc
    if len(pts):
        vals = space.vertex_values(y, pts)  # (3, npts)
        if sample is not None:
            vals = vals - sample.points.T
        w = space.sizes.h_point**-2
        total += 0.5 * pen.gamma2 * float(np.sum(w[None, :] * vals**2))
    return total


# -- forcing ------------------------------------------------------------


def forcing(space: DGSpace, y: np.ndarray, f_qp: np.ndarray) -> float:
    """F(y) = int f . y with f sampled at the quadrature points."""
    vals = space.values_at_qp(y)  # (3, nc, nq)
    return float(np.einsum("cq,mcq,cqm->", space.detJw, vals, f_qp))


def force_vector(space: DGSpace, f_qp: np.ndarray) -> np.ndarray:
    """(3, ndof) vector of int f . w."""
    cellvec = np.einsum("cq,cqm,ql->mcl", space.detJw, f_qp, space.N)
    return cellvec.reshape(3, -1)


# -- cubic bilayer term -------------------------------------------------


def cubic_term(
    space: DGSpace,
    op: DiscreteHessianOperator,
    y: np.ndarray,
    curvature: CurvatureField,
    alpha: float,
    lifting: np.ndarray | None = None,
) -> float:
    """N_h(y): barycenter quadrature of Hbar_ij . (d1 y x d2 y) Z_ij."""
    H = op.apply(y)
    if lifting is not None:
        H = H - lifting
    Hbar = project_p0(space, H)  # (3, nc, 2, 2)
    gc = space.grads_at_centers(y)  # (3, nc, 2)
    cross = np.cross(gc[:, :, 0], gc[:, :, 1], axis=0)  # (3, nc)
    return alpha * float(
        np.einsum("c,mcij,mc,cij->", space.area, Hbar, cross, curvature.Z)
    )


def cubic_first_variation(
    space: DGSpace,
    op: DiscreteHessianOperator,
    y: np.ndarray,
    w: np.ndarray,
    curvature: CurvatureField,
    alpha: float,
    lifting: np.ndarray | None = None,
) -> float:
    """N_h(y; w): the three-slot linearization of the cubic term."""
    H = op.apply(y)
    if lifting is not None:
        H = H - lifting
    Hbar = project_p0(space, H)
    Hbar_w = project_p0(space, op.apply(w))
    gy = space.grads_at_centers(y)
    gw = space.grads_at_centers(w)
    cross_yy = np.cross(gy[:, :, 0], gy[:, :, 1], axis=0)
    cross_wy = np.cross(gw[:, :, 0], gy[:, :, 1], axis=0)
    cross_yw = np.cross(gy[:, :, 0], gw[:, :, 1], axis=0)
    t1 = np.einsum("c,mcij,mc,cij->", space.area, Hbar_w, cross_yy, curvature.Z)
    t2 = np.einsum("c,mcij,mc,cij->", space.area, Hbar, cross_wy, curvature.Z)
    t3 = np.einsum("c,mcij,mc,cij->", space.area, Hbar, cross_yw, curvature.Z)
    return alpha * float(t1 + t2 + t3)


def cubic_rhs_vector(
    space: DGSpace,
    op: DiscreteHessianOperator,
    y: np.ndarray,
    curvature: CurvatureField,
    alpha: float,
    lifting: np.ndarray | None = None,
) -> np.ndarray:
    """(3, ndof) vector of w -> N_h(y; w) for the explicit flow step."""
    H = op.apply(y)
    if lifting is not None:
        H = H - lifting
    Hbar = project_p0(space, H)
    gy = space.grads_at_centers(y)  # (3, nc, 2)
    t1, t2 = gy[:, :, 0], gy[:, :, 1]
    cross = np.cross(t1, t2, axis=0)
    AZ = alpha * space.area[:, None, None] * curvature.Z  # (nc, 2, 2)

    out = np.zeros((3, space.n_dofs))
    # Hessian slot: for component m the weight tensor is AZ * cross_m.
    G1 = AZ[None] * cross[:, :, None, None]  # (3, nc, 2, 2)
    out += (op.p0_matrix.T @ G1.reshape(3, -1).T).T

    # Gradient slots: (d1 w x d2 y) . V = d1 w . (d2 y x V) and
    # (d1 y x d2 w) . V = d2 w . (V x d1 y), with V_m = (Hbar_m : AZ).
    V = np.einsum("mcij,cij->mc", Hbar, AZ)  # (3, nc)
    c1 = np.cross(t2, V, axis=0)  # (3, nc) weight of d1 w
    c2 = np.cross(V, t1, axis=0)  # weight of d2 w
    cellvec = np.einsum("mc,cl->mcl", c1, space.dN_center[:, :, 0])
    cellvec += np.einsum("mc,cl->mcl", c2, space.dN_center[:, :, 1])
    out += cellvec.reshape(3, -1)
    return out


# -- totals and defects --------------------------------------------------


def preasymptotic_total(e_stretch: float, e_bend: float, stab: float, force: float, s: float) -> float:
    return e_stretch + s * s * (e_bend + stab - force)


def prestrain_total(e_bend: float, stab: float, force: float) -> float:
    return e_bend + stab - force


def bilayer_total(
    e_bend: float, stab: float, force: float, cubic: float, const: float = 0.0
) -> float:
    return e_bend + stab - force - cubic + const


def defect_aver(
    space: DGSpace,
    y: np.ndarray,
    metric: MetricField,
    grads: np.ndarray | None = None,
) -> float:
    """Sum over cells of the Frobenius norm of the cell-integrated strain."""
    m = strain_tensor(space, y, metric, grads)
    cellints = np.einsum("cq,cqab->cab", space.detJw, m)
    return float(np.sqrt(np.einsum("cab,cab->c", cellints, cellints)).sum())


def defect_bary(space: DGSpace, y: np.ndarray) -> float:
    """Max over cells of |(grad y)^T grad y - I2| at the barycenter."""
    gc = space.grads_at_centers(y)
    m = np.einsum("mca,mcb->cab", gc, gc) - np.eye(2)
    return float(np.sqrt(np.einsum("cab,cab->c", m, m)).max())


def stretching_cell_integrals(
    space: DGSpace, y: np.ndarray, metric: MetricField, mat: MaterialParams
) -> np.ndarray:
    """Per-cell stretching energy (nc,); sums to stretching_energy."""
    m = strain_tensor(space, y, metric)
    mh = metric.ghat @ m @ metric.ghat
    frob = np.einsum("cqab,cqab->cq", mh, mh)
    tr = np.trace(mh, axis1=-2, axis2=-1)
    return np.einsum(
        "cq,cq->c", space.detJw, 0.25 * mat.mu * frob + 0.125 * mat.lam * tr**2
    )


def defect_cell_values(
    space: DGSpace, y: np.ndarray, metric: MetricField, kind: str
) -> np.ndarray:
    """Per-cell defect (nc,): the Frobenius norm of the cell-integrated
    strain ('aver') or of the flat-metric strain at the barycenter
    ('bary')."""
    if kind == "bary":
        gc = space.grads_at_centers(y)
        m = np.einsum("mca,mcb->cab", gc, gc) - np.eye(2)
        return np.sqrt(np.einsum("cab,cab->c", m, m))
    m = strain_tensor(space, y, metric)
    cellints = np.einsum("cq,cqab->cab", space.detJw, m)
    return np.sqrt(np.einsum("cab,cab->c", cellints, cellints))
