"""Broken tensor-product polynomial spaces on quadrilateral meshes.

Each cell carries the full tensor-product Lagrange basis of degree k on
Gauss-Lobatto nodes of the reference unit square, mapped bilinearly.
Fields are plain coefficient vectors: scalar fields have shape (ndof,)
with cell-major layout, vector fields (3, ndof).  No continuity is
imposed; inter-element coupling happens only through edge terms.

The space precomputes, once per mesh: basis values and physical first
and second derivatives at the cell quadrature points (the chain rule
keeps the curvature of the bilinear map on non-affine cells), per-cell
mass matrix inverses (needed by lifting operators), and traces of basis
values and gradients at the edge quadrature points from both sides of
every edge.  Edge trace reference coordinates are recovered with a
Newton inversion of the bilinear map, which handles hanging sub-edges
(where the coarse side sees only part of its edge) with no special
casing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MeshError
from .mesh import ActiveEdgeSets, Mesh, MeshSizes, classify_active_sets, compute_sizes

_REF_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def gauss_legendre_01(q: int) -> tuple[np.ndarray, np.ndarray]:
    """q-point Gauss-Legendre rule on [0, 1]."""
    t, w = np.polynomial.legendre.leggauss(q)
    return 0.5 * (t + 1.0), 0.5 * w


def gauss_lobatto_01(m: int) -> np.ndarray:
    """m Gauss-Lobatto nodes on [0, 1] (endpoints included), m >= 2."""
    if m < 2:
        raise ValueError("need at least two nodes")
    if m == 2:
        interior = np.empty(0)
    else:
        pk = np.zeros(m)
        pk[m - 1] = 1.0
        interior = np.polynomial.legendre.legroots(np.polynomial.legendre.legder(pk))
    t = np.concatenate([[-1.0], np.sort(interior), [1.0]])
    return 0.5 * (t + 1.0)


def lagrange_tables(nodes: np.ndarray, x: np.ndarray):
    """Values and first/second derivatives of the Lagrange basis.

    Returns (val, d1, d2), each of shape (len(x), len(nodes)).
    """
    m = len(nodes)
    V = np.vander(nodes, m, increasing=True)
    C = np.linalg.inv(V)  # C[j, i]: coefficient of x^j in basis i
    powers = np.arange(m)
    X = np.vander(np.asarray(x, dtype=float), m, increasing=True)
    val = X @ C
    D1 = np.zeros((m, m))
    D1[:-1] = C[1:] * powers[1:, None]
    d1 = X @ D1
    D2 = np.zeros((m, m))
    if m > 2:
        D2[:-2] = C[2:] * (powers[2:] * (powers[2:] - 1))[:, None]
    d2 = X @ D2
    return val, d1, d2


@dataclass(frozen=True)
class QuadratureRule:
    """Tensor Gauss rule on the reference unit square."""

    points_1d: np.ndarray
    weights_1d: np.ndarray
    points: np.ndarray
    weights: np.ndarray

    @property
    def n_points(self) -> int:
        return len(self.weights)


def tensor_quadrature(q: int) -> QuadratureRule:
    x, w = gauss_legendre_01(q)
    XI, ETA = np.meshgrid(x, x, indexing="ij")
    pts = np.column_stack([XI.ravel(), ETA.ravel()])
    W = np.outer(w, w).ravel()
    return QuadratureRule(points_1d=x, weights_1d=w, points=pts, weights=W)


@dataclass(frozen=True)
class TraceCache:
    """Edge-quadrature traces of the basis from both sides of each edge.

    Side 0 is the minus cell (normal points away from it), side 1 the
    plus cell; boundary edges carry zeros on side 1.  w includes the
    edge length scaling, so sum(w[e]) is the edge length.
    """

    qp: np.ndarray      # (ne, nqe, 2) physical points
    w: np.ndarray       # (ne, nqe)
    val: np.ndarray     # (ne, 2, nqe, nloc)
    grad: np.ndarray    # (ne, 2, nqe, nloc, 2)
    has_plus: np.ndarray  # (ne,) bool


class DGSpace:
    """Degree-k broken space with precomputed assembly tables."""

    def __init__(self, mesh: Mesh, k: int = 2, quad_points: int | None = None):
        if k < 2:
            raise MeshError("polynomial degree must be at least 2")
        self.mesh = mesh
        self.k = k
        self.nloc_1d = k + 1
        self.nloc = (k + 1) ** 2
        self.n_cells = mesh.n_cells
        self.n_dofs = self.nloc * mesh.n_cells
        q = quad_points if quad_points is not None else k + 2
        self.quad = tensor_quadrature(q)
        self.sizes: MeshSizes = compute_sizes(mesh)
        self.active: ActiveEdgeSets = classify_active_sets(mesh)

        self.nodes_1d = gauss_lobatto_01(k + 1)
        IX, IY = np.meshgrid(self.nodes_1d, self.nodes_1d, indexing="xy")
        # local index a = iy * (k+1) + ix
        self.node_ref = np.column_stack([IX.ravel(), IY.ravel()])

        # Bilinear geometry coefficients per cell:
        # F(xi, eta) = v0 + A xi + B eta + C xi eta
        corners = mesh.vertices[mesh.cells]  # (nc, 4, 2)
        self._v0 = corners[:, 0]
        self._A = corners[:, 1] - corners[:, 0]
        self._B = corners[:, 3] - corners[:, 0]
        self._C = corners[:, 0] - corners[:, 1] + corners[:, 2] - corners[:, 3]

        # Reference tables at the cell quadrature points.
        self._tab_qp = self._reference_tables(self.quad.points)
        N, _, _ = self._tab_qp
        self.N = N
        self.qp = self.map_points(np.arange(self.n_cells)[:, None], self.quad.points[None, :, :])
        dN, d2N, detJ = self._physical_derivatives(
            np.arange(self.n_cells), self.quad.points
        )
        self.dN = dN
        self.d2N = d2N
        if np.any(detJ <= 0):
            c = int(np.argwhere(detJ <= 0)[0][0])
            raise MeshError(f"cell {c} has a nonpositive Jacobian at a quadrature point")
        self.detJw = detJ * self.quad.weights[None, :]
        self.area = self.detJw.sum(axis=1)

        # Nodal coordinates (interpolation points).
        self.node_phys = self.map_points(
            np.arange(self.n_cells)[:, None], self.node_ref[None, :, :]
        )

        # Cell centers (image of the reference center) and gradients there.
        center = np.array([[0.5, 0.5]])
        self.center = self.map_points(np.arange(self.n_cells)[:, None], center[None, :, :])[:, 0]
        dNc, _, detc = self._physical_derivatives(np.arange(self.n_cells), center)
        self.dN_center = dNc[:, 0]
        self.detJ_center = detc[:, 0]

        # Mass matrices and inverses (block-diagonal over cells).
        M = np.einsum("cq,ql,qm->clm", self.detJw, N, N, optimize=True)
        self.mass = M
        self.mass_inv = np.linalg.inv(M)

        self.traces = self._build_traces()

    # -- geometry -----------------------------------------------------------

    def map_points(self, cells, ref):
        """F_T(ref) for broadcastable cell indices and (..., 2) ref points."""
        xi = ref[..., 0:1]
        eta = ref[..., 1:2]
        return (
            self._v0[cells]
            + self._A[cells] * xi
            + self._B[cells] * eta
            + self._C[cells] * (xi * eta)
        )

    def jacobians(self, cells, ref):
        """DF_T at ref points: (..., 2, 2) with J[..., i, a] = dF_i/dxi_a."""
        xi = ref[..., 0:1]
        eta = ref[..., 1:2]
        Fxi = self._A[cells] + self._C[cells] * eta
        Feta = self._B[cells] + self._C[cells] * xi
        return np.stack([Fxi, Feta], axis=-1)

    def inverse_map(self, cells, pts, tol: float = 1e-13, maxit: int = 30):
        """Reference coordinates of physical points inside given cells."""
        cells = np.asarray(cells)
        pts = np.asarray(pts, dtype=float)
        ref = np.full(pts.shape, 0.5)
        scale = np.maximum(np.linalg.norm(self._A[cells], axis=-1),
                           np.linalg.norm(self._B[cells], axis=-1))
        for _ in range(maxit):
            r = pts - self.map_points(cells, ref)
            if np.all(np.linalg.norm(r, axis=-1) <= tol * scale):
                break
            J = self.jacobians(cells, ref)
            det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
            dxi = (J[..., 1, 1] * r[..., 0] - J[..., 0, 1] * r[..., 1]) / det
            deta = (-J[..., 1, 0] * r[..., 0] + J[..., 0, 0] * r[..., 1]) / det
            ref = ref + np.stack([dxi, deta], axis=-1)
        else:
            raise MeshError("inverse bilinear map did not converge")
        return ref

    def _reference_tables(self, ref):
        """Basis values / reference derivatives at (m, 2) reference points."""
        vx, dx, d2x = lagrange_tables(self.nodes_1d, ref[:, 0])
        vy, dy, d2y = lagrange_tables(self.nodes_1d, ref[:, 1])
        n1 = self.nloc_1d
        m = len(ref)
        N = np.zeros((m, self.nloc))
        dN = np.zeros((m, self.nloc, 2))
        d2N = np.zeros((m, self.nloc, 3))  # (xi xi, xi eta, eta eta)
        for iy in range(n1):
            for ix in range(n1):
                a = iy * n1 + ix
                N[:, a] = vx[:, ix] * vy[:, iy]
                dN[:, a, 0] = dx[:, ix] * vy[:, iy]
                dN[:, a, 1] = vx[:, ix] * dy[:, iy]
                d2N[:, a, 0] = d2x[:, ix] * vy[:, iy]
                d2N[:, a, 1] = dx[:, ix] * dy[:, iy]
                d2N[:, a, 2] = vx[:, ix] * d2y[:, iy]
        return N, dN, d2N

    def _physical_derivatives(self, cells, ref):
        """Physical gradients and Hessians of all basis functions.

        cells: (nc,) indices; ref: (m, 2) shared reference points.
        Returns dN (nc, m, nloc, 2), d2N (nc, m, nloc, 2, 2), detJ (nc, m).
        """
        _, dN_ref, d2N_ref = self._reference_tables(ref)
        J = self.jacobians(cells[:, None], ref[None, :, :])  # (nc, m, 2, 2)
        detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
        Jinv = np.empty_like(J)
        Jinv[..., 0, 0] = J[..., 1, 1] / detJ
        Jinv[..., 0, 1] = -J[..., 0, 1] / detJ
        Jinv[..., 1, 0] = -J[..., 1, 0] / detJ
        Jinv[..., 1, 1] = J[..., 0, 0] / detJ
        # grad_x N = Jinv^T grad_ref N with Jinv[a, i] = dxi_a / dx_i
        dN = np.einsum("cmap,mla->cmlp", Jinv, dN_ref, optimize=True)
        # Hessian chain rule: only the mixed reference second derivative of
        # the bilinear map is nonzero (d2F/dxi deta = C).
        H = np.zeros(dN.shape[:3] + (2, 2))
        H[..., 0, 0] = d2N_ref[None, :, :, 0]
        H[..., 0, 1] = d2N_ref[None, :, :, 1]
        H[..., 1, 0] = d2N_ref[None, :, :, 1]
        H[..., 1, 1] = d2N_ref[None, :, :, 2]
        mixed_correction = np.einsum(
            "cmla,ca->cml", dN, self._C[cells], optimize=True
        )
        H[..., 0, 1] -= mixed_correction
        H[..., 1, 0] -= mixed_correction
        d2N = np.einsum("cmap,cmlab,cmbq->cmlpq", Jinv, H, Jinv, optimize=True)
        return dN, d2N, detJ

    def _build_traces(self) -> TraceCache:
        topo = self.mesh.topology
        ne = topo.n_edges
        t1d, w1d = gauss_legendre_01(len(self.quad.points_1d))
        nqe = len(t1d)
        va = self.mesh.vertices[topo.vertices[:, 0]]
        vb = self.mesh.vertices[topo.vertices[:, 1]]
        qp = va[:, None, :] + t1d[None, :, None] * (vb - va)[:, None, :]
        length = np.linalg.norm(vb - va, axis=1)
        w = w1d[None, :] * length[:, None]

        val = np.zeros((ne, 2, nqe, self.nloc))
        grad = np.zeros((ne, 2, nqe, self.nloc, 2))
        has_plus = topo.cells[:, 1] >= 0
        for side in (0, 1):
            ids = np.flatnonzero(has_plus) if side == 1 else np.arange(ne)
            if len(ids) == 0:
                continue
            cells = topo.cells[ids, side]
            ref = self.inverse_map(cells[:, None], qp[ids])
            # clip tiny excursions outside the closed cell from roundoff
            ref = np.clip(ref, 0.0, 1.0)
            for j, (e, c) in enumerate(zip(ids, cells)):
                N, dN_ref, _ = self._reference_tables(ref[j])
                J = self.jacobians(np.full(nqe, c)[:, None], ref[j][:, None, :])[:, 0]
                detJ = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
                Jinv = np.empty_like(J)
                Jinv[:, 0, 0] = J[:, 1, 1] / detJ
                Jinv[:, 0, 1] = -J[:, 0, 1] / detJ
                Jinv[:, 1, 0] = -J[:, 1, 0] / detJ
                Jinv[:, 1, 1] = J[:, 0, 0] / detJ
                val[e, side] = N
                grad[e, side] = np.einsum("qap,qla->qlp", Jinv, dN_ref)
        return TraceCache(qp=qp, w=w, val=val, grad=grad, has_plus=has_plus)

    # -- fields -------------------------------------------------------------

    def cell_coeffs(self, u: np.ndarray) -> np.ndarray:
        """Reshape (..., ndof) coefficients to (..., nc, nloc)."""
        return u.reshape(u.shape[:-1] + (self.n_cells, self.nloc))

    def interpolate(self, fn) -> np.ndarray:
        """Nodal interpolant of fn(points) (scalar or 3-vector valued)."""
        pts = self.node_phys.reshape(-1, 2)
        vals = np.asarray(fn(pts), dtype=float)
        if vals.ndim == 1:
            return vals.copy()
        if vals.shape == (len(pts), 3):
            return np.ascontiguousarray(vals.T)
        raise ValueError("interpolated function must return (n,) or (n, 3) values")

    def values_at_qp(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("ql,...cl->...cq", self.N, self.cell_coeffs(u))

    def grads_at_qp(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("cqla,...cl->...cqa", self.dN, self.cell_coeffs(u))

    def hessians_at_qp(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("cqlab,...cl->...cqab", self.d2N, self.cell_coeffs(u))

    def grads_at_centers(self, u: np.ndarray) -> np.ndarray:
        return np.einsum("cla,...cl->...ca", self.dN_center, self.cell_coeffs(u))

    def eval_cells(self, u: np.ndarray, cells: np.ndarray, ref: np.ndarray) -> np.ndarray:
        """Field values at shared reference points inside given cells."""
        N, _, _ = self._reference_tables(ref)
        uc = self.cell_coeffs(u)[..., cells, :]
        return np.einsum("ql,...cl->...cq", N, uc)

    def trace_values(self, u: np.ndarray, side: int, edges=None) -> np.ndarray:
        topo = self.mesh.topology
        if edges is None:
            edges = np.arange(topo.n_edges)
        cells = topo.cells[edges, side]
        uc = self.cell_coeffs(u)[..., np.maximum(cells, 0), :]
        out = np.einsum("eql,...el->...eq", self.traces.val[edges, side], uc)
        if side == 1:
            out = np.where(
                self.traces.has_plus[edges][..., None], out, 0.0
            )
        return out

    def trace_grads(self, u: np.ndarray, side: int, edges=None) -> np.ndarray:
        topo = self.mesh.topology
        if edges is None:
            edges = np.arange(topo.n_edges)
        cells = topo.cells[edges, side]
        uc = self.cell_coeffs(u)[..., np.maximum(cells, 0), :]
        out = np.einsum("eqla,...el->...eqa", self.traces.grad[edges, side], uc)
        if side == 1:
            out = np.where(self.traces.has_plus[edges][..., None, None], out, 0.0)
        return out

    def jump_values(self, u: np.ndarray, edges=None) -> np.ndarray:
        """Value jump minus-minus-plus at edge quadrature points.

        On boundary edges the jump equals the trace.
        """
        return self.trace_values(u, 0, edges) - self.trace_values(u, 1, edges)

    def avg_values(self, u: np.ndarray, edges=None) -> np.ndarray:
        topo = self.mesh.topology
        if edges is None:
            edges = np.arange(topo.n_edges)
        vm = self.trace_values(u, 0, edges)
        vp = self.trace_values(u, 1, edges)
        half = np.where(self.traces.has_plus[edges], 0.5, 1.0)
        return half[:, None] * (vm + vp)

    def jump_grads(self, u: np.ndarray, edges=None) -> np.ndarray:
        return self.trace_grads(u, 0, edges) - self.trace_grads(u, 1, edges)

    def vertex_values(self, u: np.ndarray, vertex_ids) -> np.ndarray:
        """Field values at mesh vertices, averaging the adjacent-cell traces."""
        out = []
        for v in np.atleast_1d(vertex_ids):
            cells = self.mesh.vertex_cells[int(v)]
            vals = []
            for c in cells:
                corner = int(np.flatnonzero(self.mesh.cells[c] == v)[0])
                ref = _REF_CORNERS[corner][None, :]
                vals.append(self.eval_cells(u, np.array([c]), ref)[..., 0, 0])
            out.append(np.mean(vals, axis=0))
        return np.stack(out, axis=-1)


def build_space(mesh: Mesh, k: int = 2, quad_points: int | None = None) -> DGSpace:
    return DGSpace(mesh, k=k, quad_points=quad_points)
