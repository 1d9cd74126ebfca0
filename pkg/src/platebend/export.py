"""State export: legacy ASCII VTK surfaces and JSON run summaries.

The VTK file stores the deformed surface: one point per local node of
every cell (nodes are interpolation points, so the written coordinates
are exactly the deformation's nodal values), and each cell split into
k x k bilinear sub-quads.  The subdivision is display-only and lossy:
between nodes the true surface is polynomial of degree k, the file
shows its bilinear interpolant.  Coordinates and data are printed with
%.17g, which round-trips float64 bitwise.

read_vtk parses files written here (not arbitrary VTK) so tests can
verify the exported state against the in-memory field.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import energy as en
from .dgspace import DGSpace
from .errors import ConfigError


def _fmt(x: float) -> str:
    return "%.17g" % x


@dataclass
class ExportedState:
    """Contents of one exported VTK surface."""

    points: np.ndarray  # (np, 3) deformed positions
    cells: np.ndarray  # (ncell, 4) sub-quad connectivity
    point_data: dict = field(default_factory=dict)  # name -> (np,) or (np, 3)
    cell_data: dict = field(default_factory=dict)  # name -> (ncell,)


def _subquad_connectivity(space: DGSpace) -> np.ndarray:
    """k x k bilinear sub-quads per cell over the nodal grid."""
    k = space.k
    n1 = k + 1
    quads = []
    for j in range(k):
        for i in range(k):
            a = j * n1 + i
            quads.append([a, a + 1, a + n1 + 1, a + n1])
    local = np.array(quads, dtype=np.int64)
    offsets = np.arange(space.n_cells, dtype=np.int64)[:, None, None] * space.nloc
    return (local[None, :, :] + offsets).reshape(-1, 4)


def state_arrays(
    space: DGSpace,
    y: np.ndarray,
    metric: en.MetricField | None = None,
    material: en.MaterialParams | None = None,
    defect_kind: str = "aver",
) -> ExportedState:
    """Assemble the exported surface for a deformation y (3, n_dofs)."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (3, space.n_dofs):
        raise ConfigError(f"deformation has shape {y.shape}")
    points = y.reshape(3, -1).T.copy()
    cells = _subquad_connectivity(space)
    per_sub = space.k * space.k
    point_data = {
        "parameter": np.concatenate(
            [space.node_phys.reshape(-1, 2), np.zeros((space.n_dofs, 1))], axis=1
        )
    }
    cell_data = {}
    if metric is not None:
        defect = en.defect_cell_values(space, y, metric, defect_kind)
        cell_data["defect"] = np.repeat(defect, per_sub)
        if material is not None:
            stretch = en.stretching_cell_integrals(space, y, metric, material)
            cell_data["stretch_energy"] = np.repeat(stretch, per_sub)
    return ExportedState(points, cells, point_data, cell_data)


def write_vtk(state: ExportedState, path) -> None:
    npts = len(state.points)
    ncell = len(state.cells)
    out = [
        "# vtk DataFile Version 2.0",
        "deformed plate surface",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {npts} double",
    ]
    for p in state.points:
        out.append(" ".join(_fmt(v) for v in p))
    out.append(f"CELLS {ncell} {5 * ncell}")
    for q in state.cells:
        out.append("4 " + " ".join(str(int(v)) for v in q))
    out.append(f"CELL_TYPES {ncell}")
    out.extend(["9"] * ncell)
    if state.point_data:
        out.append(f"POINT_DATA {npts}")
        for name, values in state.point_data.items():
            values = np.asarray(values)
            if values.ndim == 2:
                out.append(f"VECTORS {name} double")
                for v in values:
                    out.append(" ".join(_fmt(x) for x in v))
            else:
                out.append(f"SCALARS {name} double 1")
                out.append("LOOKUP_TABLE default")
                out.extend(_fmt(v) for v in values)
    if state.cell_data:
        out.append(f"CELL_DATA {ncell}")
        for name, values in state.cell_data.items():
            out.append(f"SCALARS {name} double 1")
            out.append("LOOKUP_TABLE default")
            out.extend(_fmt(v) for v in values)
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def export_state(
    space: DGSpace,
    y: np.ndarray,
    path,
    metric: en.MetricField | None = None,
    material: en.MaterialParams | None = None,
    defect_kind: str = "aver",
) -> ExportedState:
    state = state_arrays(space, y, metric, material, defect_kind)
    write_vtk(state, path)
    return state


def read_vtk(path) -> ExportedState:
    """Parse a VTK file written by write_vtk."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    pos = 0

    def expect(prefix: str) -> str:
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(prefix):
            got = lines[pos] if pos < len(lines) else "<eof>"
            raise ConfigError(f"vtk parse: expected {prefix!r}, got {got!r}")
        line = lines[pos]
        pos += 1
        return line

    expect("# vtk DataFile Version 2.0")
    pos += 1  # title
    expect("ASCII")
    expect("DATASET UNSTRUCTURED_GRID")
    npts = int(expect("POINTS").split()[1])
    points = np.array(
        [[float(v) for v in lines[pos + i].split()] for i in range(npts)]
    )
    pos += npts
    ncell = int(expect("CELLS").split()[1])
    cells = np.array(
        [[int(v) for v in lines[pos + i].split()[1:]] for i in range(ncell)],
        dtype=np.int64,
    )
    pos += ncell
    expect("CELL_TYPES")
    pos += ncell

    state = ExportedState(points, cells)
    target = None
    while pos < len(lines):
        line = lines[pos].strip()
        pos += 1
        if not line:
            continue
        if line.startswith("POINT_DATA"):
            target, count = state.point_data, npts
        elif line.startswith("CELL_DATA"):
            target, count = state.cell_data, ncell
        elif line.startswith("VECTORS"):
            name = line.split()[1]
            target[name] = np.array(
                [[float(v) for v in lines[pos + i].split()] for i in range(count)]
            )
            pos += count
        elif line.startswith("SCALARS"):
            name = line.split()[1]
            pos += 1  # LOOKUP_TABLE
            target[name] = np.array([float(lines[pos + i]) for i in range(count)])
            pos += count
        else:
            raise ConfigError(f"vtk parse: unexpected line {line!r}")
    return state


def write_summary(path, summary: dict) -> None:
    """JSON run summary; always carries final_energy, defect,
    iterations, stopped_by."""
    required = {"final_energy", "defect", "iterations", "stopped_by"}
    missing = required - set(summary)
    if missing:
        raise ConfigError(f"summary missing {sorted(missing)[0]!r}")
    Path(path).write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_summary(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
