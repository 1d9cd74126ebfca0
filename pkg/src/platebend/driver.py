"""Run orchestration: static solves, time-stepped solves, rate studies.

A static run has three stages: a biharmonic solve fitting the boundary
data, a simplified stretching flow shrinking the metric defect, and the
model's main gradient flow.  Supplying an explicit initial field skips
the first two stages.

A time-stepped run advances prescribed data through t_m = m dt.  The
initial state solves the boundary-fit problem with the data at t = 0
(optionally against an enlarged pointwise constraint set, used to push
fold vertices off an unstable flat state); each subsequent step fits
the data increment, reruns the stretching preprocess, and relaxes the
main flow at the new time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import energy as en
from .config import ProblemConfig
from .dgspace import DGSpace
from .errors import ConfigError, SolverError
from .export import export_state, write_summary
from .flow import EnergyLog, FlowProblem, bc_preprocess, run_flow
from .hessian import DiscreteHessianOperator, LiftingBlocks, assemble_liftings, discrete_hessian
from .mesh import Mesh, build_structured_quad_mesh, make_mesh


@dataclass
class StageResult:
    """One stage's outcome; log is None for single-solve stages."""

    name: str
    y: np.ndarray
    log: EnergyLog | None = None


@dataclass
class RunResult:
    y: np.ndarray
    stages: list[StageResult]
    space: DGSpace
    problem: FlowProblem | None
    summary: dict = field(default_factory=dict)


@dataclass
class Setup:
    """Assembled discretization shared by all stages of a run."""

    space: DGSpace
    blocks: LiftingBlocks
    hess_op: DiscreteHessianOperator
    metric: en.MetricField
    curvature: en.CurvatureField | None


def build_setup(cfg: ProblemConfig, mesh: Mesh | None = None) -> Setup:
    space = DGSpace(mesh if mesh is not None else cfg.mesh, cfg.degree)
    blocks = assemble_liftings(space)
    hess_op = discrete_hessian(space, blocks)
    metric = en.MetricField(space, cfg.metric_fn)
    curvature = None
    if cfg.curvature_spec is not None:
        mode, data = cfg.curvature_spec
        if mode == "constant":
            curvature = en.CurvatureField(space, data)
        else:
            curvature = en.CurvatureField.from_regions(space, data)
    return Setup(space, blocks, hess_op, metric, curvature)


def make_problem(cfg: ProblemConfig, setup: Setup) -> FlowProblem:
    return FlowProblem(
        setup.space,
        setup.hess_op,
        setup.metric,
        cfg.material,
        cfg.penalties,
        kind=cfg.model,
        curvature=setup.curvature,
        bilayer_constant=cfg.curvature_constant,
    )


def _has_constraints(mesh: Mesh) -> bool:
    labels = mesh.labels
    return bool(len(labels.dirichlet) or len(labels.mixed) or len(labels.point_bc))


def _check_boundary(cfg: ProblemConfig) -> None:
    if _has_constraints(cfg.mesh) and cfg.boundary is None:
        raise ConfigError("mesh has constrained boundary but config has no boundary section")


def _sample(cfg: ProblemConfig, setup: Setup, t: float) -> en.BoundarySample | None:
    if cfg.boundary is None:
        return None
    return cfg.boundary.sample(setup.space, setup.blocks, t=t)


def _force_qp(cfg: ProblemConfig, space: DGSpace, t: float) -> np.ndarray | None:
    if cfg.force_fn is None:
        return None
    return en.ForceField(cfg.force_fn).sample(space, t=t)


def _interpolate_initial(cfg: ProblemConfig, space: DGSpace) -> np.ndarray:
    vals = np.asarray(cfg.initial_fn(space.node_phys), dtype=np.float64)
    if vals.shape != (space.n_cells, space.nloc, 3):
        raise ConfigError(f"initial field callable returned shape {vals.shape}")
    return np.moveaxis(vals, -1, 0).reshape(3, space.n_dofs)


def _metric_preprocess(
    cfg: ProblemConfig, setup: Setup, sample, y0: np.ndarray
) -> tuple[np.ndarray, EnergyLog]:
    stretch = FlowProblem(
        setup.space,
        setup.hess_op,
        setup.metric,
        cfg.material,
        cfg.penalties,
        kind="stretch",
        boundary=sample,
    )
    return run_flow(stretch, cfg.flow, y0)


def run_static(cfg: ProblemConfig, setup: Setup | None = None) -> RunResult:
    """Three-stage static solve; explicit initial data skips stages 1-2."""
    _check_boundary(cfg)
    if setup is None:
        setup = build_setup(cfg)
    space = setup.space
    stages: list[StageResult] = []

    sample = _sample(cfg, setup, t=0.0)
    if cfg.initial_fn is not None:
        y = _interpolate_initial(cfg, space)
    else:
        if sample is None:
            raise ConfigError("static run needs boundary data or an initial field")
        y = bc_preprocess(space, setup.hess_op, cfg.penalties, sample)
        stages.append(StageResult("bc_preprocess", y))
        y, pre_log = _metric_preprocess(cfg, setup, sample, y)
        stages.append(StageResult("metric_preprocess", y, pre_log))

    problem = make_problem(cfg, setup)
    problem.set_data(boundary=sample, force_qp=_force_qp(cfg, space, t=0.0))
    y, log = run_flow(problem, cfg.flow, y)
    stages.append(StageResult("main", y, log))

    summary = _summary_from(problem, y, log, iterations=_total_iters(stages))
    return RunResult(y, stages, space, problem, summary)


def run_preprocess(cfg: ProblemConfig, setup: Setup | None = None) -> RunResult:
    """Preparation stages only: the state a full run would start its
    main flow from, with the main model's energy and defect reported."""
    _check_boundary(cfg)
    if setup is None:
        setup = build_setup(cfg)
    space = setup.space
    stages: list[StageResult] = []

    if cfg.initial_fn is not None:
        y = _interpolate_initial(cfg, space)
        stages.append(StageResult("initial", y))
    elif cfg.dynamics is not None:
        y, init_stage = _dynamics_init(cfg, setup)
        stages.append(init_stage)
    else:
        sample = _sample(cfg, setup, t=0.0)
        if sample is None:
            raise ConfigError("static run needs boundary data or an initial field")
        y = bc_preprocess(space, setup.hess_op, cfg.penalties, sample)
        stages.append(StageResult("bc_preprocess", y))
        y, pre_log = _metric_preprocess(cfg, setup, sample, y)
        stages.append(StageResult("metric_preprocess", y, pre_log))

    problem = make_problem(cfg, setup)
    problem.set_data(
        boundary=_sample(cfg, setup, t=0.0), force_qp=_force_qp(cfg, space, t=0.0)
    )
    last_log = stages[-1].log
    summary = _summary_from(
        problem,
        y,
        last_log,
        iterations=_total_iters(stages),
        stopped_by=last_log.stopped_by if last_log else "none",
    )
    return RunResult(y, stages, space, problem, summary)


# -- time stepping -----------------------------------------------------------


def _mesh_with_points(mesh: Mesh, ids: list[int]) -> Mesh:
    """The same mesh with a replacement pointwise-constraint set."""
    topo = mesh.topology

    def pairs(edge_ids):
        return [(int(topo.vertices[e, 0]), int(topo.vertices[e, 1])) for e in edge_ids]

    return make_mesh(
        mesh.vertices,
        mesh.cells,
        dirichlet_pairs=pairs(mesh.labels.dirichlet),
        mixed_pairs=pairs(mesh.labels.mixed),
        crease_pairs=pairs(mesh.creases.edges),
        point_bc=ids,
        cell_regions=mesh.cell_regions,
    )


def _dynamics_init(cfg: ProblemConfig, setup: Setup) -> tuple[np.ndarray, StageResult]:
    """Initial state: boundary-fit solve with the data at t = 0.  An
    init_boundary section swaps in its own pointwise constraint set for
    this one solve."""
    if cfg.init_points is not None:
        ids, fn = cfg.init_points
        init_mesh = _mesh_with_points(cfg.mesh, ids)
        init_space = DGSpace(init_mesh, cfg.degree)
        init_blocks = assemble_liftings(init_space)
        init_op = discrete_hessian(init_space, init_blocks)
        data = en.BoundaryData(
            phi=cfg.boundary.phi if cfg.boundary else None,
            grad_phi=cfg.boundary.grad_phi if cfg.boundary else None,
            point_values=fn,
        )
        sample = data.sample(init_space, init_blocks, t=0.0)
        y = bc_preprocess(init_space, init_op, cfg.penalties, sample)
    else:
        sample = _sample(cfg, setup, t=0.0)
        if sample is None:
            raise ConfigError("time stepping needs boundary data or an initial field")
        y = bc_preprocess(setup.space, setup.hess_op, cfg.penalties, sample)
    return y, StageResult("init", y)


def run_dynamics(
    cfg: ProblemConfig,
    setup: Setup | None = None,
    on_step=None,
) -> RunResult:
    """Advance the prescribed data in time steps of length dt.

    Per step: fit the data increment (added to the previous state),
    rerun the stretching preprocess, then relax the main flow with the
    data at the new time.  on_step(m, t, RunResult-so-far) is called
    after each step when given."""
    if cfg.dynamics is None:
        raise ConfigError("config has no dynamics section")
    _check_boundary(cfg)
    if setup is None:
        setup = build_setup(cfg)
    space = setup.space
    dt, steps = cfg.dynamics
    stages: list[StageResult] = []

    if cfg.initial_fn is not None:
        y = _interpolate_initial(cfg, space)
        stages.append(StageResult("initial", y))
    else:
        y, init_stage = _dynamics_init(cfg, setup)
        stages.append(init_stage)

    problem = make_problem(cfg, setup)
    prev_sample = _sample(cfg, setup, t=0.0)
    step_rows = []
    warning = ""
    log = None

    for m in range(1, steps + 1):
        t_m = m * dt
        try:
            sample_m = _sample(cfg, setup, t=t_m)
            if sample_m is not None:
                delta = sample_m.delta(prev_sample)
                dy = bc_preprocess(space, setup.hess_op, cfg.penalties, delta)
                y = y + dy
                stages.append(StageResult(f"step_{m:03d}_bc", y))
            y, pre_log = _metric_preprocess(cfg, setup, sample_m, y)
            stages.append(StageResult(f"step_{m:03d}_metric", y, pre_log))
            problem.set_data(boundary=sample_m, force_qp=_force_qp(cfg, space, t=t_m))
            y, log = run_flow(problem, cfg.flow, y)
            stages.append(StageResult(f"step_{m:03d}_main", y, log))
        except SolverError as e:
            raise SolverError(f"time step {m} (t = {t_m:g}): {e}") from e
        if log.warning:
            warning = f"time step {m}: {log.warning}"
        prev_sample = sample_m
        step_rows.append(
            {
                "step": m,
                "t": t_m,
                "iterations": log.n_iter,
                "final_energy": float(log.rows[-1][1]),
                "defect": float(log.rows[-1][7]),
                "stopped_by": log.stopped_by,
            }
        )
        if on_step is not None:
            on_step(m, t_m, RunResult(y, stages, space, problem))

    summary = _summary_from(
        problem, y, log, iterations=_total_iters(stages), warning=warning
    )
    summary["steps"] = step_rows
    return RunResult(y, stages, space, problem, summary)


# -- summaries and output files ----------------------------------------------


def _total_iters(stages: list[StageResult]) -> int:
    return sum(s.log.n_iter for s in stages if s.log is not None)


def _summary_from(
    problem: FlowProblem,
    y: np.ndarray,
    log: EnergyLog | None,
    iterations: int,
    stopped_by: str | None = None,
    warning: str = "",
) -> dict:
    summary = {
        "final_energy": float(problem.total_energy(y).total),
        "defect": float(problem.defect(y)),
        "iterations": iterations,
        "stopped_by": stopped_by if stopped_by is not None else (log.stopped_by if log else "none"),
    }
    w = warning or (log.warning if log else "")
    if w:
        summary["warning"] = w
    return summary


def write_outputs(cfg: ProblemConfig, result: RunResult, out_dir=None) -> Path:
    """Write stage CSV logs, the final state surface, and the JSON
    summary; returns the output directory."""
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for stage in result.stages:
        if stage.log is not None:
            stage.log.write_csv(out / f"{stage.name}.csv")
    problem = result.problem
    export_state(
        result.space,
        result.y,
        out / "state.vtk",
        metric=problem.metric if problem else None,
        material=problem.material if problem else None,
        defect_kind=problem.defect_kind if problem else "aver",
    )
    write_summary(out / "summary.json", result.summary)
    return out


# -- discrete Hessian rate study ----------------------------------------------


def hessian_study(levels: int, k: int = 2) -> list[dict]:
    """Convergence table for the reconstructed Hessian of the
    interpolant of sin(pi x1) sin(pi x2) on uniform unit-square meshes."""
    if levels < 1:
        raise ConfigError("hessian-study needs at least one level")
    rows = []
    prev_err = None
    for level in range(levels):
        n = 2 ** (level + 1)
        mesh = build_structured_quad_mesh((0.0, 0.0, 1.0, 1.0), n, n)
        space = DGSpace(mesh, k)
        blocks = assemble_liftings(space)
        op = discrete_hessian(space, blocks)

        u = space.interpolate(
            lambda x: np.sin(np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])
        )
        H = op.apply(u)
        x = space.qp
        s1 = np.sin(np.pi * x[..., 0])
        c1 = np.cos(np.pi * x[..., 0])
        s2 = np.sin(np.pi * x[..., 1])
        c2 = np.cos(np.pi * x[..., 1])
        exact = np.empty_like(H)
        exact[..., 0, 0] = -np.pi**2 * s1 * s2
        exact[..., 0, 1] = np.pi**2 * c1 * c2
        exact[..., 1, 0] = exact[..., 0, 1]
        exact[..., 1, 1] = -np.pi**2 * s1 * s2
        diff = H - exact
        err = float(np.sqrt(np.sum(space.detJw * np.einsum("cqab,cqab->cq", diff, diff))))
        rate = float(np.log2(prev_err / err)) if prev_err else float("nan")
        rows.append(
            {
                "level": level + 1,
                "cells": mesh.n_cells,
                "h": float(space.sizes.h_cell.max()),
                "error": err,
                "rate": rate,
            }
        )
        prev_err = err
    return rows
