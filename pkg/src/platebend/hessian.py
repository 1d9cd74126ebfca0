"""Reconstructed Hessians built from edge lifting operators.

The broken Hessian of a DG field misses the distributional curvature
carried by jumps.  Two lifting operators put it back: for an edge e and
edge data phi, r_e(phi) and b_e(phi) are the tensor fields supported on
the cells adjacent to e defined by

    (r_e(phi), tau)_Omega = (avg(tau) n_e, phi)_e        for all tau,
    (b_e(phi), tau)_Omega = (avg(div tau) . n_e, phi)_e  for all tau,

with tau running over the full (unsymmetrized) degree-k tensor space.
The reconstructed Hessian of a scalar field v is

    H(v) = D2_h v - sum_{e in grad set} r_e(jump(grad v))
                  + sum_{e in val set}  b_e(jump(v)),

where crease edges are excluded from the gradient set only.  Boundary
data enters through the same liftings: the fixed field
L(Phi, phi) = -sum_D r_e(Phi) + sum_{D+M} b_e(phi) is subtracted from
H(v) so that a deformation matching its boundary data exactly has the
plain Hessian.

Everything here works with values at the cell quadrature points: a
"tensor quad field" is an array (..., n_cells, nq, 2, 2).  On affine
cells this representation is exact; on bilinearly mapped cells it is
the natural one, since the broken Hessian of a mapped polynomial is not
itself a polynomial.  The operator is materialized as a sparse matrix
from scalar coefficients to quad-point tensor values.  Lifted tensors
are not symmetrized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dgspace import DGSpace


@dataclass(frozen=True)
class LiftingBlocks:
    """Per-edge solves mapping edge-quadrature data to lifted values.

    R[e, L] (nq, nqe) maps edge data to values of the value-moment
    lifting on side L's cell quadrature points; K[e, L, j] does the same
    with the test derivative in direction j (used by the divergence
    lifting).  Side factors (1/2 on interior edges, 1 on boundary) are
    not included here; callers apply them together with normals.
    """

    R: np.ndarray
    K: np.ndarray


def assemble_liftings(space: DGSpace) -> LiftingBlocks:
    topo = space.mesh.topology
    ne = topo.n_edges
    nq = space.quad.n_points
    nqe = space.traces.w.shape[1]
    R = np.zeros((ne, 2, nq, nqe))
    K = np.zeros((ne, 2, 2, nq, nqe))
    for e in range(ne):
        sides = (0, 1) if topo.cells[e, 1] >= 0 else (0,)
        w = space.traces.w[e]
        for L in sides:
            c = int(topo.cells[e, L])
            P = space.N @ space.mass_inv[c]
            Vl = space.traces.val[e, L]
            Gl = space.traces.grad[e, L]
            R[e, L] = P @ (Vl.T * w)
            for j in range(2):
                K[e, L, j] = P @ (Gl[:, :, j].T * w)
    return LiftingBlocks(R=R, K=K)


class DiscreteHessianOperator:
    """Sparse map from scalar DG coefficients to Hessian values.

    The matrix has one row per (cell, quadrature point, tensor entry)
    in the layout ((c * nq + q) * 2 + i) * 2 + j.  apply() reshapes the
    product into a tensor quad field and handles vector fields
    componentwise.
    """

    def __init__(self, space: DGSpace, matrix: sp.csr_matrix):
        self.space = space
        self.matrix = matrix
        self._p0 = None

    def apply(self, u: np.ndarray) -> np.ndarray:
        space = self.space
        shape = (space.n_cells, space.quad.n_points, 2, 2)
        if u.ndim == 1:
            return (self.matrix @ u).reshape(shape)
        out = self.matrix @ u.T
        return np.ascontiguousarray(out.T).reshape(u.shape[:-1] + shape)

    @property
    def p0_matrix(self) -> sp.csr_matrix:
        """Sparse map from coefficients to per-cell average Hessians."""
        if self._p0 is None:
            space = self.space
            nc, nq = space.n_cells, space.quad.n_points
            w = (space.detJw / space.area[:, None]).ravel()
            rows = np.repeat(np.arange(nc * 4), nq)
            qcols = (
                (np.arange(nc)[:, None, None] * nq + np.arange(nq)[None, None, :]) * 4
                + np.arange(4)[None, :, None]
            ).ravel()
            vals = np.broadcast_to(
                w.reshape(nc, 1, nq), (nc, 4, nq)
            ).ravel()
            P = sp.coo_matrix(
                (vals, (rows, qcols)), shape=(nc * 4, nc * nq * 4)
            ).tocsr()
            self._p0 = (P @ self.matrix).tocsr()
        return self._p0


def discrete_hessian(space: DGSpace, blocks: LiftingBlocks) -> DiscreteHessianOperator:
    """Assemble the reconstructed-Hessian operator for the mesh's active sets."""
    topo = space.mesh.topology
    nc = space.n_cells
    nq = space.quad.n_points
    nloc = space.nloc

    rows_parts: list[np.ndarray] = []
    cols_parts: list[np.ndarray] = []
    vals_parts: list[np.ndarray] = []

    # Broken Hessian: block diagonal over cells.
    qrow = (np.arange(nc)[:, None, None] * nq + np.arange(nq)[None, :, None]) * 4 + np.arange(4)[
        None, None, :
    ]  # (nc, nq, 4)
    rows_vol = np.broadcast_to(qrow[..., None], (nc, nq, 4, nloc))
    cols_vol = np.broadcast_to(
        (np.arange(nc)[:, None, None, None] * nloc + np.arange(nloc)[None, None, None, :]),
        (nc, nq, 4, nloc),
    )
    vals_vol = space.d2N.transpose(0, 1, 3, 4, 2).reshape(nc, nq, 4, nloc)
    rows_parts.append(rows_vol.ravel())
    cols_parts.append(cols_vol.ravel())
    vals_parts.append(np.ascontiguousarray(vals_vol).ravel())

    in_val = np.zeros(topo.n_edges, dtype=bool)
    in_val[space.active.val] = True
    in_grad = np.zeros(topo.n_edges, dtype=bool)
    in_grad[space.active.grad] = True

    arangeq = np.arange(nq)
    for e in np.flatnonzero(in_val | in_grad):
        boundary = topo.cells[e, 1] < 0
        sides = (0,) if boundary else (0, 1)
        s_fac = 1.0 if boundary else 0.5
        nrm = topo.normals[e]
        for L in sides:
            cL = int(topo.cells[e, L])
            row_base = (cL * nq + arangeq)[:, None, None] * 4 + np.array(
                [[0, 1], [2, 3]]
            ).reshape(1, 2, 2)
            for S in sides:
                cS = int(topo.cells[e, S])
                sgn = 1.0 if S == 0 else -1.0
                blk = np.zeros((nq, 2, 2, nloc))
                if in_val[e]:
                    VS = space.traces.val[e, S]
                    for j in range(2):
                        KV = blocks.K[e, L, j] @ VS
                        for i in range(2):
                            blk[:, i, j, :] += (nrm[i] * s_fac * sgn) * KV
                if in_grad[e]:
                    GS = space.traces.grad[e, S]
                    for i in range(2):
                        RG = blocks.R[e, L] @ GS[:, :, i]
                        for j in range(2):
                            blk[:, i, j, :] -= (nrm[j] * s_fac * sgn) * RG
                rows = np.broadcast_to(row_base[..., None], (nq, 2, 2, nloc))
                cols = np.broadcast_to(
                    cS * nloc + np.arange(nloc)[None, None, None, :], (nq, 2, 2, nloc)
                )
                rows_parts.append(rows.reshape(-1))
                cols_parts.append(cols.reshape(-1))
                vals_parts.append(blk.reshape(-1))

    mat = sp.coo_matrix(
        (
            np.concatenate(vals_parts),
            (np.concatenate(rows_parts), np.concatenate(cols_parts)),
        ),
        shape=(nc * nq * 4, space.n_dofs),
    ).tocsr()
    mat.sum_duplicates()
    mat.data[np.abs(mat.data) < 1e-14] = 0.0
    mat.eliminate_zeros()
    return DiscreteHessianOperator(space, mat)


def boundary_lifting(
    space: DGSpace,
    blocks: LiftingBlocks,
    phi_dirichlet: np.ndarray | None = None,
    grad_dirichlet: np.ndarray | None = None,
    phi_mixed: np.ndarray | None = None,
) -> np.ndarray:
    """Lifting of boundary data as a (3, nc, nq, 2, 2) tensor quad field.

    phi_dirichlet: (n_D, 3, nqe) values of the prescribed deformation at
    the quadrature points of the dirichlet edges (ordered as
    mesh.labels.dirichlet); grad_dirichlet: (n_D, 3, 2, nqe) prescribed
    gradients there; phi_mixed: (n_M, 3, nqe) for the mixed edges.
    """
    topo = space.mesh.topology
    L = np.zeros((3, space.n_cells, space.quad.n_points, 2, 2))
    d_edges = space.mesh.labels.dirichlet
    m_edges = space.mesh.labels.mixed
    if len(d_edges) and (phi_dirichlet is None or grad_dirichlet is None):
        raise ValueError("dirichlet edges require phi and gradient data")
    if len(m_edges) and phi_mixed is None:
        raise ValueError("mixed edges require phi data")

    for idx, e in enumerate(d_edges):
        c = int(topo.cells[e, 0])
        nrm = topo.normals[e]
        for m in range(3):
            for j in range(2):
                Kphi = blocks.K[e, 0, j] @ phi_dirichlet[idx, m]
                for i in range(2):
                    L[m, c, :, i, j] += nrm[i] * Kphi
            for i in range(2):
                Rg = blocks.R[e, 0] @ grad_dirichlet[idx, m, i]
                for j in range(2):
                    L[m, c, :, i, j] -= nrm[j] * Rg
    for idx, e in enumerate(m_edges):
        c = int(topo.cells[e, 0])
        nrm = topo.normals[e]
        for m in range(3):
            for j in range(2):
                Kphi = blocks.K[e, 0, j] @ phi_mixed[idx, m]
                for i in range(2):
                    L[m, c, :, i, j] += nrm[i] * Kphi
    return L


def hessian_with_bc(
    op: DiscreteHessianOperator, u: np.ndarray, lifting: np.ndarray | None = None
) -> np.ndarray:
    """Reconstructed Hessian with boundary data subtracted."""
    H = op.apply(u)
    if lifting is not None:
        H = H - lifting
    return H


def project_p0(space: DGSpace, field: np.ndarray) -> np.ndarray:
    """Cell averages of a tensor quad field: (..., nc, nq, 2, 2) -> (..., nc, 2, 2)."""
    return np.einsum("...cqij,cq->...cij", field, space.detJw) / space.area[
        :, None, None
    ]
