"""Multiblock quad meshes for the bundled crease scenarios.

Domains are decomposed into four-sided blocks whose sides follow the
fold curves; each block is filled by transfinite interpolation of its
side polylines.  Sides are sampled once into vertex id lists and shared
between adjacent blocks, so seams match by id and fold polylines are
mesh edges exactly.  Three-sided regions (a fold meeting the plate
boundary at a corner) are split into three blocks through the side
midpoints.
"""

from __future__ import annotations

import numpy as np

from . import scenarios as sc
from .errors import MeshError
from .mesh import Mesh, make_mesh


class MeshAssembler:
    """Vertex pool plus quad blocks; seams are shared by vertex id."""

    def __init__(self):
        self.vertices: list[tuple[float, float]] = []
        self.cells: list[list[int]] = []
        self.regions: list[int] = []
        self.crease_pairs: list[tuple[int, int]] = []

    def point(self, p) -> int:
        self.vertices.append((float(p[0]), float(p[1])))
        return len(self.vertices) - 1

    def sample(self, fn, n: int, first: int | None = None, last: int | None = None) -> list[int]:
        """n+1 ids along fn: [0, 1] -> point; endpoint ids are reused
        when given so adjacent sides share them."""
        ids = []
        for i in range(n + 1):
            if i == 0 and first is not None:
                ids.append(first)
            elif i == n and last is not None:
                ids.append(last)
            else:
                ids.append(self.point(fn(i / n)))
        return ids

    def segment(self, a: int, b: int, n: int) -> list[int]:
        pa = np.array(self.vertices[a])
        pb = np.array(self.vertices[b])
        return self.sample(lambda s: pa + s * (pb - pa), n, first=a, last=b)

    def block(self, south, east, north, west, region: int = 0) -> None:
        """Fill the four-sided region by transfinite interpolation.

        south and north run in the s direction, west and east in t, with
        south[0] = west[0], south[-1] = east[0], north[0] = west[-1] and
        north[-1] = east[-1].  The (s, t) frame must be right-handed so
        the emitted quads are counterclockwise.
        """
        ns, nt = len(south) - 1, len(west) - 1
        if len(north) != ns + 1 or len(east) != nt + 1:
            raise MeshError("opposite block sides must have matching lengths")
        if (south[0] != west[0] or south[-1] != east[0]
                or north[0] != west[-1] or north[-1] != east[-1]):
            raise MeshError("block corners do not match")
        V = np.array(self.vertices)
        S, N = V[south], V[north]
        W, E = V[west], V[east]
        s = np.linspace(0.0, 1.0, ns + 1)[1:-1, None, None]
        t = np.linspace(0.0, 1.0, nt + 1)[None, 1:-1, None]
        interior = (
            (1 - t) * S[1:-1, None] + t * N[1:-1, None]
            + (1 - s) * W[None, 1:-1] + s * E[None, 1:-1]
            - ((1 - s) * (1 - t) * S[0] + s * (1 - t) * S[-1]
               + (1 - s) * t * N[0] + s * t * N[-1])
        )
        grid = np.empty((ns + 1, nt + 1), dtype=np.int64)
        grid[:, 0] = south
        grid[:, nt] = north
        grid[0, :] = west
        grid[ns, :] = east
        for i in range(1, ns):
            for j in range(1, nt):
                grid[i, j] = self.point(interior[i - 1, j - 1])
        for i in range(ns):
            for j in range(nt):
                self.cells.append(
                    [int(grid[i, j]), int(grid[i + 1, j]),
                     int(grid[i + 1, j + 1]), int(grid[i, j + 1])]
                )
                self.regions.append(region)

    def tri_split(self, side_a, side_b, side_c, region: int = 0) -> None:
        """Three blocks filling the triangle with sides a: P -> Q,
        b: Q -> R, c: R -> P listed counterclockwise; all sides must
        carry the same even segment count."""
        n2 = len(side_a) - 1
        if n2 % 2 or len(side_b) != n2 + 1 or len(side_c) != n2 + 1:
            raise MeshError("triangle sides need equal even segment counts")
        if side_a[-1] != side_b[0] or side_b[-1] != side_c[0] or side_c[-1] != side_a[0]:
            raise MeshError("triangle sides do not close")
        n = n2 // 2
        ma, mb, mc = side_a[n], side_b[n], side_c[n]
        V = np.array(self.vertices)
        center = self.point(V[[side_a[0], side_b[0], side_c[0]]].mean(axis=0))
        spoke = {m: self.segment(m, center, n) for m in (ma, mb, mc)}
        self.block(side_a[: n + 1], spoke[ma], spoke[mc], side_c[n:][::-1], region)
        self.block(side_b[: n + 1], spoke[mb], spoke[ma], side_a[n:][::-1], region)
        self.block(side_c[: n + 1], spoke[mc], spoke[mb], side_b[n:][::-1], region)

    def mark_crease(self, ids) -> None:
        for a, b in zip(ids[:-1], ids[1:]):
            self.crease_pairs.append((int(a), int(b)))

    def build(self, **labels) -> Mesh:
        regions = np.array(self.regions, dtype=np.int64)
        return make_mesh(
            np.array(self.vertices),
            np.array(self.cells, dtype=np.int64),
            crease_pairs=self.crease_pairs or None,
            cell_regions=regions if regions.any() else None,
            **labels,
        )


def diamond_mesh(n: int = 6) -> Mesh:
    """Rotated square split by two fold curves into three regions.

    Regions are labeled 1 (left of the left fold), 2 (between the
    folds) and 3 (right).  n controls resolution: the middle block is
    2n x 2n cells and each outer region adds 3 n^2 cells, 10 n^2 in
    total.
    """
    if n < 1:
        raise MeshError("diamond mesh needs n >= 1")
    asm = MeshAssembler()
    x1, x2, x3, x4 = (asm.point(p) for p in sc.DIAMOND_CORNERS)
    (a0, a1), (b0, b1) = sc.DIAMOND_CREASE_ENDS
    z1, z2 = asm.point(a0), asm.point(a1)
    z4, z3 = asm.point(b0), asm.point(b1)

    rc = asm.sample(lambda s: sc.diamond_crease_point(0, s), 2 * n, first=z1, last=z2)
    lc = asm.sample(lambda s: sc.diamond_crease_point(1, s), 2 * n, first=z4, last=z3)
    asm.mark_crease(rc)
    asm.mark_crease(lc)

    # middle block: bottom and top sides bend through the plate corners
    south = asm.segment(z4, x1, n) + asm.segment(x1, z1, n)[1:]
    north = asm.segment(z3, x3, n) + asm.segment(x3, z2, n)[1:]
    asm.block(south, rc, north, lc, region=2)

    # outer regions: triangles bounded by a fold and two boundary edges
    asm.tri_split(lc, asm.segment(z3, x4, 2 * n), asm.segment(x4, z4, 2 * n), region=1)
    asm.tri_split(rc[::-1], asm.segment(z1, x2, 2 * n), asm.segment(x2, z2, 2 * n), region=3)
    return asm.build()


def starshade_mesh(q: int = 4, m: int = 3) -> tuple[Mesh, dict]:
    """Dodecagon plate with six valley and six mountain fold curves
    running from a central hexagon (whose edges fold as well) to the
    dodecagon vertices.  Valley tips carry pointwise constraints.

    q controls the petal resolution and m the hexagon and rim
    resolution: 18 q^2 + 24 q m + 6 m^2 cells.  Returns the mesh and an
    info dict with the dodecagon vertex ids.
    """
    if q < 1 or m < 1:
        raise MeshError("starshade mesh needs q >= 1 and m >= 1")
    asm = MeshAssembler()
    outer = [asm.point(p) for p in sc.starshade_outer_vertices()]
    hexv = [asm.point(p) for p in sc.starshade_hex_vertices()]
    center = asm.point([0.0, 0.0])
    curves = sc.starshade_fold_curves()

    valley, mountain = [], []
    for i in range(6):
        v = asm.sample(
            lambda s, c=curves[2 * i]["points"]: sc.bezier_point(c, s),
            2 * q, first=hexv[i], last=outer[2 * i],
        )
        mt = asm.sample(
            lambda s, c=curves[2 * i + 1]["points"]: sc.bezier_point(c, s),
            2 * q, first=hexv[i], last=outer[2 * i + 1],
        )
        valley.append(v)
        mountain.append(mt)
        asm.mark_crease(v)
        asm.mark_crease(mt)

    hex_edge = [asm.segment(hexv[i], hexv[(i + 1) % 6], 2 * m) for i in range(6)]
    for e in hex_edge:
        asm.mark_crease(e)

    # hexagon interior: six blocks between edge midpoints and the center
    spoke = [asm.segment(e[m], center, m) for e in hex_edge]
    for i in range(6):
        prev = (i + 5) % 6
        asm.block(hex_edge[i][: m + 1], spoke[i], spoke[prev], hex_edge[prev][m:][::-1])

    # petals: triangle between valley i and mountain i at the plate rim
    for i in range(6):
        rim = asm.segment(outer[2 * i], outer[2 * i + 1], 2 * q)
        asm.tri_split(valley[i], rim, mountain[i][::-1])

    # quad blocks between mountain i and valley i+1
    for i in range(6):
        j = (i + 1) % 6
        rim = asm.segment(outer[2 * i + 1], outer[(2 * i + 2) % 12], 2 * m)
        asm.block(mountain[i], rim, valley[j], hex_edge[i])

    mesh = asm.build(point_bc=[outer[2 * i] for i in range(6)])
    info = {
        "valley_ids": [outer[2 * i] for i in range(6)],
        "mountain_ids": [outer[2 * i + 1] for i in range(6)],
        "outer_ids": list(outer),
        "hex_ids": list(hexv),
    }
    return mesh, info
