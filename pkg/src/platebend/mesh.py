"""Quadrilateral meshes: topology, boundary labels, creases, sizes.

A mesh is a set of bilinearly mapped quadrilaterals given by vertex
coordinates and counterclockwise cell connectivity.  Edge topology is
derived once at construction: every edge carries a fixed unit normal
(outward of the domain on boundary edges), the two adjacent cells, and
its own length scale.  Hanging nodes are supported for 1-irregular
meshes by splitting the coarse edge into two sub-edges, each of which
is an independent interior edge whose "plus" side is the coarse cell.

Boundary conditions are attached as edge labels (dirichlet / mixed),
interior fold lines as crease edges, and pointwise constraints as
vertex ids.  Cells may carry integer region labels used for piecewise
constant material data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MeshError, MeshFormatError

# Tolerance for deciding that a hanging vertex lies on a coarse edge,
# relative to the edge length.
_COLLINEAR_TOL = 1e-9

_FORMAT_HEADER = "platebend-mesh v1"


@dataclass(frozen=True)
class EdgeTopology:
    """Oriented edge data derived from cell connectivity.

    vertices[e] = (a, b) are the endpoint vertex ids in the traversal
    order of the minus cell, cells[e] = (cell_minus, cell_plus) with
    cell_plus == -1 on boundary edges, and normals[e] is the unit
    normal pointing from the minus into the plus side.  For a hanging
    sub-edge the minus cell is the fine cell, the plus cell the coarse
    one, and (a, b) span only the sub-edge.
    """

    vertices: np.ndarray
    cells: np.ndarray
    normals: np.ndarray

    @property
    def n_edges(self) -> int:
        return len(self.vertices)

    @property
    def is_boundary(self) -> np.ndarray:
        return self.cells[:, 1] < 0

    @property
    def interior_ids(self) -> np.ndarray:
        return np.flatnonzero(self.cells[:, 1] >= 0)

    @property
    def boundary_ids(self) -> np.ndarray:
        return np.flatnonzero(self.cells[:, 1] < 0)


@dataclass(frozen=True)
class BoundaryLabels:
    """Partition of the boundary edges plus pointwise constraint vertices."""

    dirichlet: np.ndarray
    mixed: np.ndarray
    free: np.ndarray
    point_bc: np.ndarray


@dataclass(frozen=True)
class CreaseSet:
    """Interior edges along which gradient jumps are released."""

    edges: np.ndarray

    def __len__(self) -> int:
        return len(self.edges)


@dataclass(frozen=True)
class MeshSizes:
    """Cell, edge, and point length scales.

    h_cell[c] is the cell diameter, h_edge[e] the edge length, and
    h_point[i] the mean diameter of the cells sharing point-constraint
    vertex i (aligned with BoundaryLabels.point_bc).
    """

    h_cell: np.ndarray
    h_edge: np.ndarray
    h_point: np.ndarray
    h_min: float


@dataclass(frozen=True)
class ActiveEdgeSets:
    """Edge sets entering value and gradient jump terms.

    val  = interior + dirichlet + mixed edges (value jumps / traces),
    grad = (interior minus creases) + dirichlet edges (gradient jumps).
    """

    val: np.ndarray
    grad: np.ndarray


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray
    cells: np.ndarray
    topology: EdgeTopology
    labels: BoundaryLabels
    creases: CreaseSet
    cell_regions: np.ndarray
    vertex_cells: dict = field(repr=False)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def cell_corners(self, c: int) -> np.ndarray:
        return self.vertices[self.cells[c]]


def _check_cells(vertices: np.ndarray, cells: np.ndarray) -> None:
    nv = len(vertices)
    if cells.min(initial=0) < 0 or cells.max(initial=-1) >= nv:
        raise MeshError("cell connectivity references a vertex out of range")
    for c in range(len(cells)):
        ids = cells[c]
        if len(set(int(i) for i in ids)) != 4:
            raise MeshError(f"cell {c} repeats a vertex")
        p = vertices[ids]
        # det of the bilinear map is bilinear on the reference square, so
        # positivity at the four corners is positivity everywhere.
        scale = max(np.ptp(p[:, 0]), np.ptp(p[:, 1])) ** 2
        for k in range(4):
            e0 = p[(k + 1) % 4] - p[k]
            e1 = p[(k + 3) % 4] - p[k]
            det = e0[0] * e1[1] - e0[1] * e1[0]
            if det <= 1e-12 * scale:
                raise MeshError(
                    f"cell {c} has a nonpositive Jacobian at corner {k} "
                    "(check orientation and convexity)"
                )


def _between(a: np.ndarray, b: np.ndarray, m: np.ndarray) -> bool:
    """True if m lies strictly inside segment (a, b)."""
    d = b - a
    L2 = float(d @ d)
    if L2 == 0.0:
        return False
    t = float((m - a) @ d) / L2
    if not (1e-6 < t < 1.0 - 1e-6):
        return False
    off = m - a - t * d
    return float(off @ off) <= (_COLLINEAR_TOL**2) * L2


def _build_topology(vertices: np.ndarray, cells: np.ndarray) -> EdgeTopology:
    claims: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
    order: list[tuple[int, int]] = []
    for c in range(len(cells)):
        quad = cells[c]
        for k in range(4):
            a = int(quad[k])
            b = int(quad[(k + 1) % 4])
            key = (a, b) if a < b else (b, a)
            if key not in claims:
                claims[key] = []
                order.append(key)
            claims[key].append((c, a, b))

    singles: dict[tuple[int, int], tuple[int, int, int]] = {}
    edge_verts: list[tuple[int, int]] = []
    edge_cells: list[tuple[int, int]] = []

    for key in order:
        cl = claims[key]
        if len(cl) > 2:
            raise MeshError(f"edge {key} is shared by more than two cells")
        if len(cl) == 2:
            (c0, a0, b0), (c1, a1, b1) = cl
            if (a0, b0) != (b1, a1):
                raise MeshError(
                    f"cells {c0} and {c1} traverse edge {key} in the same "
                    "direction (inconsistent orientation)"
                )
            edge_verts.append((a0, b0))
            edge_cells.append((c0, c1))
        else:
            singles[key] = cl[0]

    # Hanging-node resolution: a coarse edge (a, b) is matched with two
    # fine sub-edges (a, m) and (m, b) from other cells.
    by_vertex: dict[int, set[tuple[int, int]]] = {}
    for key in singles:
        for v in key:
            by_vertex.setdefault(v, set()).add(key)

    parents: dict[tuple[int, int], tuple[int, tuple[int, int], tuple[int, int]]] = {}
    children: set[tuple[int, int]] = set()
    for key, (cell, a, b) in singles.items():
        cand = (by_vertex.get(a, set()) | by_vertex.get(b, set())) - {key}
        for other in cand:
            m_set = set(other) - {a, b}
            if len(m_set) != 1:
                continue
            m = m_set.pop()
            k1 = (a, m) if a < m else (m, a)
            k2 = (m, b) if m < b else (b, m)
            if k1 not in singles or k2 not in singles:
                continue
            if singles[k1][0] == cell or singles[k2][0] == cell:
                continue
            if _between(vertices[a], vertices[b], vertices[m]):
                parents[key] = (m, k1, k2)
                children.add(k1)
                children.add(k2)
                break

    bad = children & set(parents)
    if bad:
        raise MeshError(
            f"mesh is not 1-irregular: edge {sorted(bad)[0]} is both a "
            "hanging sub-edge and split by a further hanging node"
        )

    for key in order:
        if key not in singles or key in children:
            continue
        if key in parents:
            _, k1, k2 = parents[key]
            parent_cell = singles[key][0]
            for sub in (k1, k2):
                c_fine, a_f, b_f = singles[sub]
                edge_verts.append((a_f, b_f))
                edge_cells.append((c_fine, parent_cell))
        else:
            c0, a0, b0 = singles[key]
            edge_verts.append((a0, b0))
            edge_cells.append((c0, -1))

    ev = np.asarray(edge_verts, dtype=np.int64).reshape(-1, 2)
    ec = np.asarray(edge_cells, dtype=np.int64).reshape(-1, 2)
    tang = vertices[ev[:, 1]] - vertices[ev[:, 0]]
    length = np.linalg.norm(tang, axis=1)
    if np.any(length <= 0):
        raise MeshError("zero-length edge")
    tang = tang / length[:, None]
    normals = np.column_stack([tang[:, 1], -tang[:, 0]])
    return EdgeTopology(vertices=ev, cells=ec, normals=normals)


def _pair_lookup(topo: EdgeTopology) -> dict[tuple[int, int], int]:
    table: dict[tuple[int, int], int] = {}
    for e in range(topo.n_edges):
        a, b = int(topo.vertices[e, 0]), int(topo.vertices[e, 1])
        table[(a, b) if a < b else (b, a)] = e
    return table


def _resolve_edge_labels(
    topo: EdgeTopology,
    pairs: list[tuple[int, int]] | None,
    kind: str,
    want_boundary: bool,
) -> np.ndarray:
    if pairs is None or len(pairs) == 0:
        return np.empty(0, dtype=np.int64)
    table = _pair_lookup(topo)
    ids = []
    for a, b in pairs:
        key = (int(a), int(b)) if a < b else (int(b), int(a))
        e = table.get(key)
        if e is None:
            raise MeshError(f"{kind} pair {key} is not a mesh edge")
        on_boundary = topo.cells[e, 1] < 0
        if want_boundary and not on_boundary:
            raise MeshError(f"{kind} pair {key} is not a boundary edge")
        if not want_boundary and on_boundary:
            raise MeshError(f"{kind} pair {key} is not an interior edge")
        ids.append(e)
    ids = np.unique(np.asarray(ids, dtype=np.int64))
    return ids


def make_mesh(
    vertices,
    cells,
    dirichlet_pairs=None,
    mixed_pairs=None,
    crease_pairs=None,
    point_bc=None,
    cell_regions=None,
) -> Mesh:
    """Assemble a mesh from raw arrays, validating topology and labels."""
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    cells = np.ascontiguousarray(cells, dtype=np.int64)
    if vertices.ndim != 2 or vertices.shape[1] != 2:
        raise MeshError("vertices must be an (n, 2) array")
    if cells.ndim != 2 or cells.shape[1] != 4:
        raise MeshError("cells must be an (n, 4) array")
    _check_cells(vertices, cells)
    topo = _build_topology(vertices, cells)

    dir_ids = _resolve_edge_labels(topo, dirichlet_pairs, "dirichlet_edges", True)
    mix_ids = _resolve_edge_labels(topo, mixed_pairs, "mixed_edges", True)
    overlap = np.intersect1d(dir_ids, mix_ids)
    if len(overlap):
        raise MeshError(f"edge {int(overlap[0])} labeled both dirichlet and mixed")
    crease_ids = _resolve_edge_labels(topo, crease_pairs, "crease_edges", False)

    pts = np.unique(np.asarray(point_bc if point_bc is not None else [], dtype=np.int64))
    if len(pts) and (pts.min() < 0 or pts.max() >= len(vertices)):
        raise MeshError("point_bc vertex id out of range")

    boundary = topo.boundary_ids
    labeled = np.union1d(dir_ids, mix_ids)
    free = np.setdiff1d(boundary, labeled)

    if cell_regions is None:
        regions = np.zeros(len(cells), dtype=np.int64)
    else:
        regions = np.ascontiguousarray(cell_regions, dtype=np.int64)
        if regions.shape != (len(cells),):
            raise MeshError("cell_regions must provide one label per cell")

    vertex_cells: dict[int, list[int]] = {}
    for c in range(len(cells)):
        for v in cells[c]:
            vertex_cells.setdefault(int(v), []).append(c)

    labels = BoundaryLabels(
        dirichlet=dir_ids, mixed=mix_ids, free=free, point_bc=pts
    )
    return Mesh(
        vertices=vertices,
        cells=cells,
        topology=topo,
        labels=labels,
        creases=CreaseSet(edges=crease_ids),
        cell_regions=regions,
        vertex_cells=vertex_cells,
    )


def compute_sizes(mesh: Mesh) -> MeshSizes:
    """Cell diameters, edge lengths, and point scales."""
    pts = mesh.vertices[mesh.cells]  # (nc, 4, 2)
    diff = pts[:, :, None, :] - pts[:, None, :, :]
    h_cell = np.sqrt((diff**2).sum(-1).max(axis=(1, 2)))
    ev = mesh.topology.vertices
    h_edge = np.linalg.norm(mesh.vertices[ev[:, 1]] - mesh.vertices[ev[:, 0]], axis=1)
    h_point = np.array(
        [h_cell[mesh.vertex_cells[int(v)]].mean() for v in mesh.labels.point_bc]
    )
    return MeshSizes(
        h_cell=h_cell, h_edge=h_edge, h_point=h_point, h_min=float(h_cell.min())
    )


def classify_active_sets(mesh: Mesh) -> ActiveEdgeSets:
    """Edges carrying value jumps and gradient jumps.

    Creases are removed from the gradient set only: releasing the
    gradient jump across fold lines is the single change that the
    folding variant makes to the discretization.
    """
    topo = mesh.topology
    interior = topo.interior_ids
    crease = mesh.creases.edges
    if len(np.setdiff1d(crease, interior)):
        raise MeshError("crease edges must be interior edges")
    val = np.union1d(interior, np.union1d(mesh.labels.dirichlet, mesh.labels.mixed))
    grad = np.union1d(np.setdiff1d(interior, crease), mesh.labels.dirichlet)
    return ActiveEdgeSets(val=val, grad=grad)


def boundary_vertex_loops(mesh: Mesh) -> list[np.ndarray]:
    """Ordered vertex loops of the boundary, one array per closed loop."""
    topo = mesh.topology
    nxt: dict[int, int] = {}
    for e in topo.boundary_ids:
        a, b = int(topo.vertices[e, 0]), int(topo.vertices[e, 1])
        nxt[a] = b
    loops = []
    remaining = set(nxt)
    while remaining:
        start = min(remaining)
        loop = [start]
        remaining.discard(start)
        v = nxt[start]
        while v != start:
            loop.append(v)
            remaining.discard(v)
            v = nxt[v]
        loops.append(np.asarray(loop, dtype=np.int64))
    return loops


# ---------------------------------------------------------------------------
# Builders


def build_structured_quad_mesh(
    bounds,
    nx: int,
    ny: int,
    mapping=None,
    **labels,
) -> Mesh:
    """Tensor grid of quads on a rectangle, optionally mapped.

    bounds = (x0, y0, x1, y1).  mapping, if given, is applied to the
    vertex array (shape (n, 2) -> (n, 2)) after grid generation; the
    mapped cells must keep positive Jacobians.  Label keyword arguments
    are forwarded to make_mesh.
    """
    x0, y0, x1, y1 = bounds
    if nx < 1 or ny < 1 or x1 <= x0 or y1 <= y0:
        raise MeshError("invalid structured mesh parameters")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    if mapping is not None:
        vertices = np.asarray(mapping(vertices), dtype=np.float64)

    def vid(i, j):
        return j * (nx + 1) + i

    cells = np.array(
        [
            [vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)]
            for j in range(ny)
            for i in range(nx)
        ],
        dtype=np.int64,
    )
    return make_mesh(vertices, cells, **labels)


def build_disc_mesh(n: int, radius: float = 1.0, radial_grading: float = 1.0) -> Mesh:
    """Five-block quad mesh of a disc (5 n^2 cells).

    A central square of half-side radius/2 is surrounded by four blocks
    blending its sides onto the circle.  Seam vertices are shared by id,
    never by coordinate matching.  radial_grading < 1 shrinks the radial
    spacing geometrically toward the boundary (used for targets whose
    metric degenerates at the rim).
    """
    if n < 1:
        raise MeshError("disc mesh needs n >= 1")
    a = 0.5 * radius
    verts: list[np.ndarray] = []
    cells: list[list[int]] = []

    def add(p) -> int:
        verts.append(np.asarray(p, dtype=np.float64))
        return len(verts) - 1

    xs = np.linspace(-a, a, n + 1)
    G0 = [[add([xs[i], xs[j]]) for i in range(n + 1)] for j in range(n + 1)]
    for j in range(n):
        for i in range(n):
            cells.append([G0[j][i], G0[j][i + 1], G0[j + 1][i + 1], G0[j + 1][i]])

    if radial_grading == 1.0:
        w = np.linspace(0.0, 1.0, n + 1)
    else:
        steps = float(radial_grading) ** np.arange(n)
        w = np.concatenate([[0.0], np.cumsum(steps)])
        w = w / w[-1]

    # Tangential vertex id runs of the central square, one per quarter,
    # ordered so that theta increases: east, north, west, south.
    inner_runs = [
        [G0[s][n] for s in range(n + 1)],
        [G0[n][n - s] for s in range(n + 1)],
        [G0[n - s][0] for s in range(n + 1)],
        [G0[0][s] for s in range(n + 1)],
    ]
    diag = [-0.25 * np.pi, 0.25 * np.pi, 0.75 * np.pi, 1.25 * np.pi, 1.75 * np.pi]

    first_col: list[int] | None = None
    prev_col: list[int] | None = None
    for q in range(4):
        th0, th1 = diag[q], diag[q + 1]
        inner_ids = inner_runs[q]
        # grid[i][j]: i radial (0 = square side), j tangential.
        grid = [[-1] * (n + 1) for _ in range(n + 1)]
        for j in range(n + 1):
            grid[0][j] = inner_ids[j]
        for i in range(1, n + 1):
            for j in range(n + 1):
                if j == 0 and prev_col is not None:
                    grid[i][0] = prev_col[i]
                    continue
                if j == n and q == 3:
                    grid[i][n] = first_col[i]
                    continue
                th = th0 + (th1 - th0) * (j / n)
                outer = radius * np.array([np.cos(th), np.sin(th)])
                p = (1.0 - w[i]) * verts[inner_ids[j]] + w[i] * outer
                grid[i][j] = add(p)
        if q == 0:
            first_col = [grid[i][0] for i in range(n + 1)]
        prev_col = [grid[i][n] for i in range(n + 1)]
        for i in range(n):
            for j in range(n):
                cells.append(
                    [grid[i][j], grid[i + 1][j], grid[i + 1][j + 1], grid[i][j + 1]]
                )

    return make_mesh(np.array(verts), np.array(cells, dtype=np.int64))


# ---------------------------------------------------------------------------
# File format


def load_mesh(path) -> Mesh:
    """Read a mesh file (plain text, format 'platebend-mesh v1')."""
    with open(path, "r", encoding="utf-8") as f:
        raw = f.readlines()

    lines: list[tuple[int, str]] = []
    for i, text in enumerate(raw, start=1):
        stripped = text.split("#", 1)[0].strip()
        if stripped:
            lines.append((i, stripped))

    if not lines:
        raise MeshFormatError(1, "empty mesh file")
    ln, header = lines[0]
    if header != _FORMAT_HEADER:
        raise MeshFormatError(ln, f"expected header '{_FORMAT_HEADER}'")

    pos = 1

    def next_line():
        nonlocal pos
        if pos >= len(lines):
            raise MeshFormatError(lines[-1][0], "unexpected end of file")
        item = lines[pos]
        pos += 1
        return item

    def read_section_header(expected=None):
        ln, text = next_line()
        parts = text.split()
        if len(parts) != 2:
            raise MeshFormatError(ln, f"expected 'section count', got '{text}'")
        name = parts[0]
        if expected is not None and name != expected:
            raise MeshFormatError(ln, f"expected section '{expected}', got '{name}'")
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError(ln, f"bad count '{parts[1]}'") from None
        if count < 0:
            raise MeshFormatError(ln, "negative section count")
        return name, count, ln

    def read_rows(count, ncols, kind, conv):
        rows = []
        for _ in range(count):
            ln, text = next_line()
            parts = text.split()
            if len(parts) != ncols:
                raise MeshFormatError(ln, f"expected {ncols} {kind} values")
            try:
                rows.append([conv(p) for p in parts])
            except ValueError:
                raise MeshFormatError(ln, f"bad {kind} value") from None
        return rows

    _, nv, _ = read_section_header("vertices")
    vertices = np.array(read_rows(nv, 2, "coordinate", float), dtype=np.float64).reshape(nv, 2)
    _, nc, _ = read_section_header("cells")
    cells = np.array(read_rows(nc, 4, "vertex id", int), dtype=np.int64).reshape(nc, 4)

    optional = {}
    allowed = {"dirichlet_edges", "mixed_edges", "crease_edges", "point_bc", "cell_regions"}
    while pos < len(lines):
        name, count, ln = read_section_header()
        if name not in allowed:
            raise MeshFormatError(ln, f"unknown section '{name}'")
        if name in optional:
            raise MeshFormatError(ln, f"duplicate section '{name}'")
        if name in ("point_bc", "cell_regions"):
            rows = read_rows(count, 1, "integer", int)
            optional[name] = [r[0] for r in rows]
        else:
            rows = read_rows(count, 2, "vertex id", int)
            optional[name] = [tuple(r) for r in rows]

    regions = optional.get("cell_regions")
    if regions is not None and len(regions) != nc:
        raise MeshFormatError(lines[-1][0], "cell_regions must list one label per cell")

    return make_mesh(
        vertices,
        cells,
        dirichlet_pairs=optional.get("dirichlet_edges"),
        mixed_pairs=optional.get("mixed_edges"),
        crease_pairs=optional.get("crease_edges"),
        point_bc=optional.get("point_bc"),
        cell_regions=regions,
    )


def save_mesh(mesh: Mesh, path) -> None:
    """Write a mesh file in the 'platebend-mesh v1' format."""
    topo = mesh.topology
    out = [_FORMAT_HEADER]
    out.append(f"vertices {mesh.n_vertices}")
    for x, y in mesh.vertices:
        out.append(f"{float(x)!r} {float(y)!r}")
    out.append(f"cells {mesh.n_cells}")
    for quad in mesh.cells:
        out.append(" ".join(str(int(v)) for v in quad))

    def pairs_of(ids):
        return [(int(topo.vertices[e, 0]), int(topo.vertices[e, 1])) for e in ids]

    for name, ids in (
        ("dirichlet_edges", mesh.labels.dirichlet),
        ("mixed_edges", mesh.labels.mixed),
        ("crease_edges", mesh.creases.edges),
    ):
        if len(ids):
            out.append(f"{name} {len(ids)}")
            for a, b in pairs_of(ids):
                out.append(f"{a} {b}")
    if len(mesh.labels.point_bc):
        out.append(f"point_bc {len(mesh.labels.point_bc)}")
        for v in mesh.labels.point_bc:
            out.append(str(int(v)))
    if np.any(mesh.cell_regions != 0):
        out.append(f"cell_regions {mesh.n_cells}")
        for r in mesh.cell_regions:
            out.append(str(int(r)))

    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(out) + "\n")
