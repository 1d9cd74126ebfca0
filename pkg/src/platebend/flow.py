"""Discrete gradient flows for the plate energies.

One flow step solves a linear(ized) system in the mesh-dependent inner
product

  (v, w) = sigma (v, w)_L2 + int D2v : D2w
           + sum h^-1 |grad-jump|^2 + sum h^-3 |value-jump|^2
           + sum h_i^-2 v(x_i) w(x_i),

with sigma = 1 only when no dirichlet/mixed edges exist (otherwise the
form is already definite).  Three flavors are provided:

  * unconstrained linearized steps for the thickness-weighted
    (preasymptotic) energy and for the simplified stretching energy of
    the metric preprocessing, where the stretching block is frozen at
    the current base point so each step is a single symmetric solve
    (one factorization serves all three deformation components);
  * constrained steps for the pure bending energies, where increments
    are forced into the linearized metric tangent space (cellwise
    averages or barycenter values) through per-cell symmetric 2x2
    Lagrange multipliers, giving a saddle-point solve; the cubic
    bilayer term is treated explicitly on the right-hand side;
  * a one-shot biharmonic solve producing initial deformations from
    boundary data (optionally incremental data, optionally a fictitious
    force to break planarity).

Nesterov-style acceleration (t_1 = 1, t_{n+1} = sqrt(t_n^2 + 1/4) + 1/2,
eta_{n+1} = (t_{n+1} - 1) / t_{n+2}) is available for the unconstrained
flows; steps then linearize at the extrapolated point.

Flows stop when the energy decrement per unit pseudo-time drops below
tol (the preprocessing flow also stops when the metric defect reaches
its target) and record one log row per step.  Linear systems are solved
by sparse LU with iterative refinement to a normwise backward error of
1e-10; between steps of a flow the factorization is reused as long as
refinement still converges, since the matrices drift slowly.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import energy as en
from .dgspace import DGSpace
from .errors import ConfigError, SolverError
from .hessian import DiscreteHessianOperator

_RESIDUAL_TOL = 1e-10


# -- inner product -------------------------------------------------------


@dataclass(frozen=True)
class GramOperator:
    """Scalar matrix of the flow inner product, applied componentwise."""

    matrix: sp.csr_matrix
    sigma: int

    def inner(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(np.sum(u * (self.matrix @ v.T).T))

    def norm2(self, v: np.ndarray) -> float:
        return self.inner(v, v)

    def norm(self, v: np.ndarray) -> float:
        return math.sqrt(max(self.norm2(v), 0.0))


def assemble_gram(space: DGSpace) -> GramOperator:
    mesh = space.mesh
    h = space.sizes.h_edge
    val = space.active.val
    grad = space.active.grad
    G = en.broken_hessian_gram(space)
    if len(val):
        G = G + en.edge_penalty_matrix(space, val, h[val] ** -3, "value")
    if len(grad):
        G = G + en.edge_penalty_matrix(space, grad, h[grad] ** -1, "grad")
    if len(mesh.labels.point_bc):
        P = en.vertex_average_matrix(space)
        G = G + P.T @ sp.diags(space.sizes.h_point**-2) @ P
    sigma = 0 if (len(mesh.labels.dirichlet) + len(mesh.labels.mixed)) else 1
    if sigma:
        G = G + en.mass_matrix(space)
    return GramOperator(matrix=G.tocsr(), sigma=sigma)


# -- linear solves -------------------------------------------------------


def _as_columns(b: np.ndarray) -> tuple[np.ndarray, bool]:
    if b.ndim == 1:
        return b[:, None], True
    return b, False


def _inf_norm(A: sp.spmatrix) -> float:
    return float(np.max(np.abs(A).sum(axis=1))) if A.nnz else 0.0


def _backward_error(r: np.ndarray, anorm: float, x: np.ndarray, b: np.ndarray) -> float:
    # Normwise backward error |r| / (|A| |x| + |b|) per column; the plain
    # |r|/|b| ratio is not achievable here because smooth iterates cancel
    # the h^-3 jump rows, leaving |b| orders below |A| |x|.
    xnorm = np.linalg.norm(x, axis=0)
    bnorm = np.linalg.norm(b, axis=0)
    rnorm = np.linalg.norm(r, axis=0)
    return float(np.max(rnorm / np.maximum(anorm * xnorm + bnorm, 1e-300)))


class LaggedSolver:
    """LU solver for a sequence of slowly drifting sparse systems.

    The factorization of an earlier matrix is kept as long as iterative
    refinement against the current matrix still reaches the residual
    tolerance; otherwise the current matrix is refactorized.
    """

    def __init__(self, tol: float = _RESIDUAL_TOL, max_refine: int = 8):
        self.tol = tol
        self.max_refine = max_refine
        self._lu = None
        self._anorm = 0.0
        self._reuses = 0
        self._last_passes = 0
        self.n_factorizations = 0

    def _factor(self, A: sp.spmatrix) -> None:
        try:
            self._lu = spla.splu(A.tocsc())
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        # The norm only scales the backward error; matrices drift slowly
        # between factorizations, so the factorization-time value serves
        # until the next refactor.
        self._anorm = _inf_norm(A)
        self._reuses = 0
        self._last_passes = 0
        self.n_factorizations += 1

    def _refine(
        self, A, b2: np.ndarray, check_rows: slice | None
    ) -> tuple[np.ndarray, float]:
        absA = None
        if check_rows is not None:
            absA = A.copy()
            absA.data = np.abs(absA.data)

        def error(x, r):
            rel = _backward_error(r, self._anorm, x, b2)
            if check_rows is None:
                return rel
            # The global measure is dominated by the h^-3 jump rows and
            # says nothing about small-normed rows (metric constraints),
            # whose errors compound across flow steps.  Hold the checked
            # rows to a per-row backward error as well.
            denom = (absA @ np.abs(x))[check_rows] + np.abs(b2[check_rows])
            rows = np.abs(r[check_rows]) / np.maximum(denom, 1e-300)
            return max(rel, float(rows.max()))

        x = self._lu.solve(b2)
        r = b2 - A @ x
        rel = error(x, r)
        passes = 0
        while rel > self.tol and passes < self.max_refine:
            x = x + self._lu.solve(r)
            r = b2 - A @ x
            rel = error(x, r)
            passes += 1
        self._last_passes = passes
        return x, rel

    def solve(
        self,
        A: sp.spmatrix,
        b: np.ndarray,
        check_rows: slice | None = None,
    ) -> np.ndarray:
        b2, squeeze = _as_columns(np.asarray(b, dtype=np.float64))
        A = A.tocsr()
        if self._lu is None:
            self._factor(A)
        elif self._last_passes >= 3 and self._reuses >= 10:
            # Refinement cost against a drifted factorization has crept
            # past the amortized cost of a fresh one.
            self._factor(A)
        self._reuses += 1
        x, rel = self._refine(A, b2, check_rows)
        if rel > self.tol:
            self._factor(A)
            self._reuses += 1
            x, rel = self._refine(A, b2, check_rows)
            if rel > self.tol:
                raise SolverError(
                    f"linear solve stalled at relative residual {rel:.3e}"
                )
        if not np.isfinite(x).all():
            raise SolverError("linear solve produced non-finite values")
        return x[:, 0] if squeeze else x


def solve_linear(A: sp.spmatrix, b: np.ndarray) -> np.ndarray:
    """One-shot sparse direct solve with residual verification."""
    return LaggedSolver().solve(A, b)


# -- configuration and state ---------------------------------------------


@dataclass(frozen=True)
class FlowConfig:
    """Pseudo-time steps, tolerances, and mode flags for the flows.

    tau/tol govern the main flow, tau_pre/tol_pre/defect_tol_pre the
    metric preprocessing; constraint names the main flow's tangent-space
    mode and must match the model.
    """

    tau: float = 0.01
    tol: float = 1e-6
    tau_pre: float = 0.01
    tol_pre: float = 0.5
    defect_tol_pre: float = 0.5
    max_iter: int = 200000
    accelerate: bool = False
    constraint: str = "none"
    adapt_tau: bool = False

    def __post_init__(self):
        if min(self.tau, self.tau_pre, self.tol, self.tol_pre) <= 0:
            raise ConfigError("flow steps and tolerances must be positive")
        if self.defect_tol_pre < 0:
            raise ConfigError("preprocessing defect target must be nonnegative")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.constraint not in ("none", "aver", "bary"):
            raise ConfigError(f"unknown constraint mode {self.constraint!r}")


@dataclass
class MultiplierField:
    """Per-cell symmetric 2x2 Lagrange multipliers, stored as the three
    independent entries (11, 12, 22)."""

    values: np.ndarray  # (nc, 3)

    def tensors(self) -> np.ndarray:
        out = np.empty((self.values.shape[0], 2, 2))
        out[:, 0, 0] = self.values[:, 0]
        out[:, 0, 1] = self.values[:, 1]
        out[:, 1, 0] = self.values[:, 1]
        out[:, 1, 1] = self.values[:, 2]
        return out


class AccelState:
    """Nesterov extrapolation state for the unconstrained flows."""

    def __init__(self, y0: np.ndarray):
        self.t = 1.0
        self.v = y0.copy()
        self.y_prev = y0.copy()

    def advance(self, y_new: np.ndarray) -> np.ndarray:
        t_next = math.sqrt(self.t * self.t + 0.25) + 0.5
        eta = (self.t - 1.0) / t_next
        self.v = y_new + eta * (y_new - self.y_prev)
        self.y_prev = y_new.copy()
        self.t = t_next
        return self.v


def accelerate(state: AccelState, y_new: np.ndarray) -> np.ndarray:
    """Advance the extrapolation state past the new iterate and return
    the next linearization point."""
    return state.advance(y_new)


# -- assembled problem ----------------------------------------------------


@dataclass(frozen=True)
class EnergyBreakdown:
    total: float
    stretch: float
    bend: float
    stab: float
    force: float
    cubic: float


_KINDS = ("preasymptotic", "prestrain", "bilayer", "stretch")
_CONSTRAINT_OF_KIND = {
    "preasymptotic": "none",
    "prestrain": "aver",
    "bilayer": "bary",
    "stretch": "none",
}


class FlowProblem:
    """Assembled forms and energy bookkeeping for one flow on one mesh.

    kind selects the objective: 'preasymptotic' (full stretching plus
    thickness-squared bending/stabilization/forcing), 'prestrain'
    (bending + stabilization - forcing, aver-constrained), 'bilayer'
    (adds the explicit cubic term, bary-constrained), or 'stretch'
    (simplified stretching, used by the metric preprocessing).  Heavy
    matrices are cached; boundary/force data can be replaced between
    time steps without reassembling them.
    """

    def __init__(
        self,
        space: DGSpace,
        hess_op: DiscreteHessianOperator,
        metric: en.MetricField,
        material: en.MaterialParams,
        penalties: en.PenaltyParams,
        kind: str,
        curvature: en.CurvatureField | None = None,
        boundary: en.BoundarySample | None = None,
        force_qp: np.ndarray | None = None,
        defect_kind: str | None = None,
        bilayer_constant: bool = True,
    ):
        if kind not in _KINDS:
            raise ConfigError(f"unknown flow kind {kind!r}")
        if kind == "bilayer" and curvature is None:
            raise ConfigError("bilayer flow requires a curvature field")
        self.space = space
        self.hess_op = hess_op
        self.metric = metric
        self.material = material
        self.penalties = penalties
        self.kind = kind
        self.curvature = curvature
        self.bilayer_constant = bilayer_constant
        self.defect_kind = defect_kind or (
            "bary" if kind == "bilayer" else "aver"
        )
        if self.defect_kind not in ("aver", "bary"):
            raise ConfigError(f"unknown defect kind {self.defect_kind!r}")

        self.gram = assemble_gram(space)
        self._bend_mat: sp.csr_matrix | None = None
        self._stab_mat: sp.csr_matrix | None = None
        self.boundary = None
        self.force_qp = None
        self._zero = np.zeros((3, space.n_dofs))
        self.set_data(boundary=boundary, force_qp=force_qp)

    @property
    def constraint_mode(self) -> str:
        return _CONSTRAINT_OF_KIND[self.kind]

    @property
    def bend_matrix(self) -> sp.csr_matrix:
        if self._bend_mat is None:
            self._bend_mat = en.bending_matrix(
                self.space, self.hess_op, self.metric, self.material
            )
        return self._bend_mat

    @property
    def stab_matrix(self) -> sp.csr_matrix:
        if self._stab_mat is None:
            self._stab_mat = en.stabilization_matrix(self.space, self.penalties)
        return self._stab_mat

    def set_data(self, boundary=None, force_qp=None) -> None:
        """Install (or replace) boundary and force data; refreshes the
        data vectors and constants while keeping all matrices."""
        self.boundary = boundary
        self.force_qp = force_qp
        self.lifting = boundary.lifting if boundary is not None else None
        if self.lifting is not None:
            self.bend_data = en.bending_data_vector(
                self.space, self.hess_op, self.metric, self.material, self.lifting
            )
            self.bend_const = en.bending_energy(
                self.space, self.lifting, self.metric, self.material
            )
        else:
            self.bend_data = self._zero
            self.bend_const = 0.0
        if boundary is not None:
            self.stab_data = en.stabilization_data_vector(
                self.space, self.penalties, boundary
            )
            self.stab_const = en.stabilization_constant(
                self.space, self.penalties, boundary
            )
        else:
            self.stab_data = self._zero
            self.stab_const = 0.0
        if force_qp is not None:
            self.force_vec = en.force_vector(self.space, force_qp)
        else:
            self.force_vec = self._zero
        self.cubic_const = 0.0
        if self.kind == "bilayer" and self.bilayer_constant:
            self.cubic_const = 0.5 * self.material.alpha * self.curvature.norm2_integral()

    def _quadratic(self, mat: sp.csr_matrix, data: np.ndarray, const: float, y) -> float:
        return (
            0.5 * float(np.sum(y * (mat @ y.T).T))
            - float(np.sum(data * y))
            + const
        )

    def total_energy(
        self, y: np.ndarray, grads: np.ndarray | None = None
    ) -> EnergyBreakdown:
        e_bend = self._quadratic(self.bend_matrix, self.bend_data, self.bend_const, y)
        e_stab = self._quadratic(self.stab_matrix, self.stab_data, self.stab_const, y)
        e_force = float(np.sum(self.force_vec * y))
        e_stretch = en.stretching_energy(
            self.space, y, self.metric, self.material, grads
        )
        e_cubic = 0.0
        if self.kind == "bilayer":
            e_cubic = en.cubic_term(
                self.space, self.hess_op, y, self.curvature,
                self.material.alpha, self.lifting,
            )
        if self.kind == "preasymptotic":
            s2 = self.material.s**2
            total = e_stretch + s2 * (e_bend + e_stab - e_force)
        elif self.kind == "prestrain":
            total = e_bend + e_stab - e_force
        elif self.kind == "bilayer":
            total = e_bend + e_stab - e_force - e_cubic + self.cubic_const
        else:
            total = en.simplified_stretching(self.space, y, self.metric, grads)
        return EnergyBreakdown(
            total=total, stretch=e_stretch, bend=e_bend, stab=e_stab,
            force=e_force, cubic=e_cubic,
        )

    def defect(self, y: np.ndarray, grads: np.ndarray | None = None) -> float:
        if self.defect_kind == "bary":
            return en.defect_bary(self.space, y)
        return en.defect_aver(self.space, y, self.metric, grads)


# -- constraint matrices --------------------------------------------------


def constraint_matrix(space: DGSpace, y: np.ndarray, mode: str) -> sp.csr_matrix:
    """Linearized metric constraint: 3 rows per cell (entries 11, 12, 22
    of grad(w)^T grad(y) + grad(y)^T grad(w), integrated over the cell
    for 'aver' or evaluated at the barycenter for 'bary'), columns over
    the stacked components of w."""
    nc, nloc, ndof = space.n_cells, space.nloc, space.n_dofs
    if mode == "aver":
        gy = space.grads_at_qp(y)  # (3, nc, nq, 2)
        T = np.einsum("cq,cqla,mcqb->mclab", space.detJw, space.dN, gy, optimize=True)
    elif mode == "bary":
        gy = space.grads_at_centers(y)  # (3, nc, 2)
        T = np.einsum("cla,mcb->mclab", space.dN_center, gy)
    else:
        raise ConfigError(f"unknown constraint mode {mode!r}")
    sym = T + np.swapaxes(T, -1, -2)  # (3, nc, nloc, 2, 2)
    entries = np.stack(
        [sym[..., 0, 0], sym[..., 0, 1], sym[..., 1, 1]], axis=-1
    )  # (3, nc, nloc, 3)

    m_idx, c_idx, l_idx, r_idx = np.meshgrid(
        np.arange(3), np.arange(nc), np.arange(nloc), np.arange(3), indexing="ij"
    )
    rows = (c_idx * 3 + r_idx).ravel()
    cols = (m_idx * ndof + c_idx * nloc + l_idx).ravel()
    vals = np.moveaxis(entries, -1, -1).ravel()
    return sp.coo_matrix(
        (vals, (rows, cols)), shape=(nc * 3, 3 * ndof)
    ).tocsr()


def _check_constraint_rows(C: sp.csr_matrix, space: DGSpace) -> None:
    scale = abs(C).max() if C.nnz else 0.0
    row_max = np.asarray(abs(C).max(axis=1).todense()).ravel()
    bad = np.flatnonzero(row_max <= 1e-14 * max(scale, 1.0))
    if len(bad):
        cell = int(bad[0] // 3)
        raise SolverError(
            f"degenerate metric constraint on cell {cell}: the current "
            "iterate has vanishing gradient there"
        )


# -- flow steps -----------------------------------------------------------


def _unconstrained_parts(
    problem: FlowProblem, tau: float
) -> tuple[sp.csr_matrix, np.ndarray | float]:
    """Step matrix and right-hand side without the base-dependent
    stretching block, reusable while tau is unchanged."""
    G = problem.gram.matrix
    M_fixed = (G / tau).tocsr()
    rhs_fixed: np.ndarray | float = 0.0
    if problem.kind == "preasymptotic":
        s2 = problem.material.s**2
        if s2 > 0.0:
            M_fixed = M_fixed + s2 * (problem.bend_matrix + problem.stab_matrix)
            rhs_fixed = s2 * (problem.bend_data + problem.stab_data + problem.force_vec)
    return M_fixed, rhs_fixed


def step_unconstrained(
    problem: FlowProblem,
    y: np.ndarray,
    tau: float,
    base: np.ndarray | None = None,
    solver: LaggedSolver | None = None,
    parts: tuple[sp.csr_matrix, np.ndarray | float] | None = None,
    base_grads: np.ndarray | None = None,
) -> np.ndarray:
    """One linearized gradient-flow step from y (anchored and
    linearized at base, which differs from y only under acceleration)."""
    if problem.constraint_mode != "none":
        raise ConfigError(f"{problem.kind} flow requires a constrained step")
    if base is None:
        base = y
    if solver is None:
        solver = LaggedSolver()
    if parts is None:
        parts = _unconstrained_parts(problem, tau)
    M_fixed, rhs_fixed = parts
    space = problem.space
    if problem.kind == "preasymptotic":
        Q = en.stretching_q_field(
            space, base, problem.metric, problem.material, base_grads
        )
    else:  # stretch preprocessing
        Q = en.simplified_q_field(space, base, problem.metric, base_grads)
    M = M_fixed + en.grad_form_matrix(space, Q)
    rhs = (problem.gram.matrix @ base.T).T / tau + rhs_fixed
    y_next = solver.solve(M, rhs.T).T
    return y_next


def _constrained_parts(problem: FlowProblem, tau: float):
    M = problem.gram.matrix / tau + problem.bend_matrix + problem.stab_matrix
    M3 = sp.block_diag([M, M, M], format="csr")
    return M3


def step_constrained(
    problem: FlowProblem,
    y: np.ndarray,
    tau: float,
    mode: str,
    solver: LaggedSolver | None = None,
    M3: sp.csr_matrix | None = None,
) -> tuple[np.ndarray, MultiplierField]:
    """One constrained step: saddle-point solve keeping the increment in
    the linearized metric tangent space at y."""
    if solver is None:
        solver = LaggedSolver()
    space = problem.space
    ndof = space.n_dofs
    C = constraint_matrix(space, y, mode)
    _check_constraint_rows(C, space)
    if M3 is None:
        M3 = _constrained_parts(problem, tau)
    rhs_top = (
        (problem.gram.matrix @ y.T).T / tau
        + problem.bend_data
        + problem.stab_data
        + problem.force_vec
    )
    if problem.kind == "bilayer":
        rhs_top = rhs_top + en.cubic_rhs_vector(
            space, problem.hess_op, y, problem.curvature,
            problem.material.alpha, problem.lifting,
        )
    rhs = np.concatenate([rhs_top.ravel(), C @ y.ravel()])
    KKT = sp.bmat([[M3, C.T], [C, None]], format="csr")
    sol = solver.solve(KKT, rhs, check_rows=slice(3 * ndof, None))
    y_next = sol[: 3 * ndof].reshape(3, ndof)
    lam = MultiplierField(sol[3 * ndof :].reshape(space.n_cells, 3))
    return y_next, lam


def step_constrained_aver(problem, y, tau, solver=None, M3=None):
    return step_constrained(problem, y, tau, "aver", solver, M3)


def step_constrained_bary(problem, y, tau, solver=None, M3=None):
    return step_constrained(problem, y, tau, "bary", solver, M3)


# -- boundary-condition preprocessing --------------------------------------


def _needs_mass_regularization(space: DGSpace) -> bool:
    """The biharmonic system is definite iff the boundary terms pin all
    global affine deformations: any dirichlet/mixed edge does, and so do
    three or more non-collinear constrained points."""
    labels = space.mesh.labels
    if len(labels.dirichlet) or len(labels.mixed):
        return False
    pts = space.mesh.vertices[labels.point_bc]
    if len(pts) >= 3:
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-10) >= 2:
            return False
    return True


def bc_preprocess(
    space: DGSpace,
    hess_op: DiscreteHessianOperator,
    penalties: en.PenaltyParams,
    boundary: en.BoundarySample | None = None,
    force_qp: np.ndarray | None = None,
) -> np.ndarray:
    """Biharmonic solve producing a deformation that meets the boundary
    data: minimizes the flat-metric bending energy (mu = 6, lambda = 0)
    plus stabilization, with an optional fictitious force.  With
    incremental data it returns the increment field.  When no boundary
    term pins the affine kernel, an L2 mass term regularizes the system
    (the data then selects the minimum-norm representative).
    """
    mat = en.MaterialParams(mu=6.0, lam=0.0)
    metric = en.MetricField.identity(space)
    B = en.bending_matrix(space, hess_op, metric, mat)
    S = en.stabilization_matrix(space, penalties)
    M = B + S
    if _needs_mass_regularization(space):
        M = M + en.mass_matrix(space)
    rhs = np.zeros((3, space.n_dofs))
    if boundary is not None:
        if boundary.lifting is not None:
            rhs = rhs + en.bending_data_vector(
                space, hess_op, metric, mat, boundary.lifting
            )
        rhs = rhs + en.stabilization_data_vector(space, penalties, boundary)
    if force_qp is not None:
        rhs = rhs + en.force_vector(space, force_qp)
    return solve_linear(M.tocsr(), rhs.T).T


# -- flow driver ------------------------------------------------------------


LOG_COLUMNS = (
    "iter", "E_total", "E_S", "E_B", "S_h", "F", "N_h",
    "defect", "step_norm", "tau", "wall_ms",
)


@dataclass
class EnergyLog:
    """Per-step flow history plus the stopping outcome."""

    rows: list = field(default_factory=list)
    stopped_by: str = ""
    warning: str = ""

    @property
    def n_iter(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        i = LOG_COLUMNS.index(name)
        return np.array([row[i] for row in self.rows])

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(LOG_COLUMNS)
            for row in self.rows:
                writer.writerow(
                    [row[0]] + [repr(float(v)) for v in row[1:]]
                )


_MAX_TAU_HALVINGS = 40


def run_flow(
    problem: FlowProblem, config: FlowConfig, y0: np.ndarray
) -> tuple[np.ndarray, EnergyLog]:
    """Iterate the flow from y0 until the stopping rule fires.

    Main flows stop when |E(y^{n+1}) - E(y^n)| / tau <= tol; the metric
    preprocessing also stops when the defect reaches its target.
    Hitting max_iter sets a warning on the log instead of raising.
    """
    preprocess = problem.kind == "stretch"
    if not preprocess and config.constraint != problem.constraint_mode:
        raise ConfigError(
            f"flow kind {problem.kind!r} requires constraint "
            f"{problem.constraint_mode!r}, config says {config.constraint!r}"
        )
    constrained = problem.constraint_mode != "none"
    if config.accelerate and constrained:
        raise ConfigError("acceleration applies to unconstrained flows only")

    tau = config.tau_pre if preprocess else config.tau
    tol = config.tol_pre if preprocess else config.tol
    y = np.array(y0, dtype=np.float64)
    if y.shape != (3, problem.space.n_dofs):
        raise ConfigError(f"initial field has shape {y.shape}")
    e_prev = problem.total_energy(y).total

    solver = LaggedSolver()
    accel = AccelState(y) if config.accelerate else None
    M3 = _constrained_parts(problem, tau) if constrained else None
    parts = _unconstrained_parts(problem, tau) if not constrained else None
    y_grads = problem.space.grads_at_qp(y) if not constrained else None
    log = EnergyLog()

    for n in range(1, config.max_iter + 1):
        t0 = time.perf_counter()
        while True:
            if constrained:
                y_new, _ = step_constrained(
                    problem, y, tau, problem.constraint_mode, solver, M3
                )
                new_grads = None
            else:
                if accel is not None:
                    base, base_grads = accel.v, None
                else:
                    base, base_grads = y, y_grads
                y_new = step_unconstrained(
                    problem, y, tau, base, solver, parts, base_grads
                )
                new_grads = problem.space.grads_at_qp(y_new)
            bd = problem.total_energy(y_new, new_grads)
            if (
                config.adapt_tau
                and not constrained
                and bd.total > e_prev
            ):
                if tau <= config.tau * 0.5**_MAX_TAU_HALVINGS:
                    raise SolverError(
                        "energy still increases after exhausting step halvings"
                    )
                tau = 0.5 * tau
                parts = _unconstrained_parts(problem, tau)
                continue
            break
        step_norm = problem.gram.norm(y_new - y)
        defect = problem.defect(y_new, new_grads)
        wall_ms = (time.perf_counter() - t0) * 1e3
        log.rows.append(
            (
                n, bd.total, bd.stretch, bd.bend, bd.stab, bd.force,
                bd.cubic, defect, step_norm, tau, wall_ms,
            )
        )
        stop = None
        if abs(bd.total - e_prev) / tau <= tol:
            stop = "tol"
        if preprocess and defect <= config.defect_tol_pre:
            stop = stop or "defect"
        if accel is not None:
            accel.advance(y_new)
        y = y_new
        y_grads = new_grads
        e_prev = bd.total
        if stop:
            log.stopped_by = stop
            return y, log

    log.stopped_by = "max_iter"
    log.warning = f"stopped after max_iter={config.max_iter} without convergence"
    return y, log
