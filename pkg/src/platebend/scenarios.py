"""Built-in scenario data: metrics, targets, forces, boundary programs.

Each builder returns plain callables over point arrays so they can be
handed to MetricField, ForceField, or BoundaryData directly.  The
catalog covers the bundled experiments:

  * bubble: rotationally symmetric metric with positive curvature
    concentrated near the rim; admits no smooth flat immersion, so the
    plate buckles into a spherical cap.
  * oscillating_disc: metric of an immersion whose boundary oscillates
    with six wrinkles; thick plates stay radially symmetric, thin ones
    develop all six wrinkles.
  * half_sphere: metric of a regularized unit half-sphere, with a
    time-ramped compressive force along the inward normal and a mixed
    boundary condition pinning the rim.
  * diamond: a rotated square split by two creases into three regions
    with piecewise constant spontaneous curvature (bilayer folding).
  * starshade: a dodecagon with six valley and six mountain fold
    curves meeting a central hexagon; time-dependent pointwise boundary
    conditions compress the valley tips radially.

Geometry helpers for the crease scenarios (Bezier curves, fold vertex
coordinates) live here too so mesh generation and boundary programs
share one definition.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError


# -- analytic metrics ------------------------------------------------------


def identity_metric():
    def metric(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()

    return metric


def bubble_metric(alpha: float = 0.2):
    """g = I2 + alpha (pi^2/4) cos(pi(1-r)/2)^2 (x x^T / r^2).

    The cos factor vanishes quadratically at the center, so the metric
    extends continuously with value I2 at r = 0.
    """

    def metric(x: np.ndarray) -> np.ndarray:
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        safe = np.maximum(r2, 1e-300)
        factor = alpha * (np.pi**2 / 4) * np.cos(0.5 * np.pi * (1.0 - np.sqrt(r2))) ** 2
        xx = np.einsum("...a,...b->...ab", x, x) / safe[..., None, None]
        g = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        g += np.where(r2[..., None, None] > 0.0, factor[..., None, None] * xx, 0.0)
        return g

    return metric


def oscillating_target():
    """Immersion (x1, x2, 0.2 r^4 sin(6 theta)) of the unit disc."""

    def target(x: np.ndarray) -> np.ndarray:
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        theta = np.arctan2(x[..., 1], x[..., 0])
        z = 0.2 * r2**2 * np.sin(6.0 * theta)
        return np.stack([x[..., 0], x[..., 1], z], axis=-1)

    return target


def oscillating_metric():
    """First fundamental form of the oscillating-disc immersion.

    With z = 0.2 r^4 sin(6 theta), the surface gradient is
    grad z = 0.8 r^2 sin(6 theta) (x1, x2) + 1.2 r^2 cos(6 theta) (-x2, x1)
    and g = I2 + grad z (grad z)^T.
    """

    def metric(x: np.ndarray) -> np.ndarray:
        r2 = x[..., 0] ** 2 + x[..., 1] ** 2
        theta = np.arctan2(x[..., 1], x[..., 0])
        s, c = np.sin(6.0 * theta), np.cos(6.0 * theta)
        gz1 = 0.8 * r2 * s * x[..., 0] - 1.2 * r2 * c * x[..., 1]
        gz2 = 0.8 * r2 * s * x[..., 1] + 1.2 * r2 * c * x[..., 0]
        gz = np.stack([gz1, gz2], axis=-1)
        g = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        g += np.einsum("...a,...b->...ab", gz, gz)
        return g

    return metric


def half_sphere_target(eps: float = 1e-3):
    """Immersion (x1, x2, sqrt(1 + eps - r^2)) of the unit disc."""

    def target(x: np.ndarray) -> np.ndarray:
        z = np.sqrt(1.0 + eps - x[..., 0] ** 2 - x[..., 1] ** 2)
        return np.stack([x[..., 0], x[..., 1], z], axis=-1)

    return target


def half_sphere_metric(eps: float = 1e-3):
    """First fundamental form of the half-sphere immersion:
    g = I2 + (x x^T) / (1 + eps - r^2)."""

    def metric(x: np.ndarray) -> np.ndarray:
        denom = 1.0 + eps - x[..., 0] ** 2 - x[..., 1] ** 2
        xx = np.einsum("...a,...b->...ab", x, x)
        g = np.broadcast_to(np.eye(2), x.shape[:-1] + (2, 2)).copy()
        g += xx / denom[..., None, None]
        return g

    return metric


def half_sphere_force(eps: float = 1e-3, scale: float = 1.0):
    """Compression ramp f(x, t) = -scale * t * y(x) / sqrt(1 + eps),
    the inward unit normal of the sphere times t."""
    target = half_sphere_target(eps)
    c = scale / math.sqrt(1.0 + eps)

    def force(x: np.ndarray, t: float) -> np.ndarray:
        return (-c * t) * target(x)

    return force


def half_sphere_boundary_phi(eps: float = 1e-3):
    """Trace of the half-sphere immersion on the unit circle:
    (x1, x2, sqrt(eps))."""

    def phi(x: np.ndarray, t: float) -> np.ndarray:
        z = np.full(x.shape[:-1], math.sqrt(eps))
        return np.stack([x[..., 0], x[..., 1], z], axis=-1)

    return phi


_METRICS = {
    "identity": (identity_metric, ()),
    "bubble": (bubble_metric, ("alpha",)),
    "oscillating_disc": (oscillating_metric, ()),
    "half_sphere": (half_sphere_metric, ("eps",)),
}

_TARGETS = {
    "flat": (lambda: (lambda x: np.stack(
        [x[..., 0], x[..., 1], np.zeros(x.shape[:-1])], axis=-1)), ()),
    "oscillating_disc": (oscillating_target, ()),
    "half_sphere": (half_sphere_target, ("eps",)),
}

_FORCES = {
    "half_sphere": (half_sphere_force, ("eps", "scale")),
}


def _build(table: dict, kind: str, name: str, params: dict):
    if name not in table:
        raise ConfigError(
            f"unknown builtin {kind} {name!r} (have: {', '.join(sorted(table))})"
        )
    builder, allowed = table[name]
    bad = sorted(set(params) - set(allowed))
    if bad:
        raise ConfigError(f"builtin {kind} {name!r} takes no parameter {bad[0]!r}")
    return builder(**params)


def builtin_metric(name: str, **params):
    return _build(_METRICS, "metric", name, params)


def builtin_target(name: str, **params):
    return _build(_TARGETS, "target", name, params)


def builtin_force(name: str, **params):
    return _build(_FORCES, "force", name, params)


def evaluate_builtin_metric(name: str, params: dict, point) -> np.ndarray:
    """Evaluate a named metric at one point and check it is SPD there."""
    g = builtin_metric(name, **params)(np.asarray(point, dtype=np.float64))
    if not np.allclose(g, np.swapaxes(g, -1, -2), atol=1e-12):
        raise ConfigError(f"metric {name!r} is not symmetric at {point}")
    tr = g[..., 0, 0] + g[..., 1, 1]
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    if np.any(det <= 0.0) or np.any(tr <= 0.0):
        raise ConfigError(f"metric {name!r} is not positive definite at {point}")
    return g


# -- diamond geometry ------------------------------------------------------

# Square (-1.5, 1.5)^2 rotated by pi/4: corners on the axes at distance
# 3/sqrt(2).  Two creases split it into three regions; each crease is a
# quadratic Bezier with the origin as control point whose endpoints sit
# one third of the way along the bottom and top right/left edges.

DIAMOND_RADIUS = 3.0 / math.sqrt(2.0)

DIAMOND_CORNERS = np.array(
    [
        [0.0, -DIAMOND_RADIUS],  # x1 bottom
        [DIAMOND_RADIUS, 0.0],  # x2 right
        [0.0, DIAMOND_RADIUS],  # x3 top
        [-DIAMOND_RADIUS, 0.0],  # x4 left
    ]
)

_THIRD = 1.0 / math.sqrt(2.0)
_TWO_THIRD = 2.0 / math.sqrt(2.0)

DIAMOND_CREASE_ENDS = np.array(
    [
        [[_THIRD, -_TWO_THIRD], [_THIRD, _TWO_THIRD]],  # right crease z1 -> z2
        [[-_THIRD, -_TWO_THIRD], [-_THIRD, _TWO_THIRD]],  # left crease z4 -> z3
    ]
)


def diamond_crease_point(which: int, s) -> np.ndarray:
    """Point on diamond crease 0 (right) or 1 (left) at parameter s in
    [0, 1]: quadratic Bezier with control point at the origin."""
    s = np.asarray(s, dtype=np.float64)
    a, b = DIAMOND_CREASE_ENDS[which]
    w = ((1.0 - s) ** 2)[..., None] * a + (s**2)[..., None] * b
    return w  # middle term vanishes: control point is the origin


def diamond_curvature_table(magnitude: float = 0.6) -> dict[int, np.ndarray]:
    """Region -> spontaneous curvature: +/-magnitude * I2 on the outer
    regions (1, 3) and the middle region (2)."""
    eye = np.eye(2)
    return {1: magnitude * eye, 2: -magnitude * eye, 3: magnitude * eye}


# -- starshade geometry ----------------------------------------------------

STARSHADE_R = 7.0
STARSHADE_HEX_R = 0.8
STARSHADE_HEX_TWIST = math.pi / 72  # hexagon rotated clockwise by 2.5 degrees


def _cis(radius: float, angle: float) -> np.ndarray:
    return np.array([radius * math.cos(angle), radius * math.sin(angle)])


def starshade_outer_vertices() -> np.ndarray:
    """Dodecagon vertices x_i = R cis((i-1) pi/6), i = 1..12.  Odd i are
    valley tips, even i are mountain tips."""
    return np.array(
        [_cis(STARSHADE_R, i * math.pi / 6) for i in range(12)]
    )


def starshade_hex_vertices() -> np.ndarray:
    """Hexagon vertices z_i = r cis((i-1) pi/3 - pi/72), i = 1..6."""
    return np.array(
        [_cis(STARSHADE_HEX_R, i * math.pi / 3 - STARSHADE_HEX_TWIST) for i in range(6)]
    )


def starshade_fold_curves() -> list[dict]:
    """The 12 cubic Bezier fold curves: entry i has kind 'valley' or
    'mountain', control points (4, 2), running from hexagon vertex z_i
    to dodecagon vertex x_{2i-1} (valley) or x_{2i} (mountain)."""
    outer = starshade_outer_vertices()
    hexv = starshade_hex_vertices()
    curves = []
    for i in range(6):
        base = i * math.pi / 3
        curves.append(
            {
                "kind": "valley",
                "points": np.array(
                    [
                        hexv[i],
                        _cis(3.0, base - math.pi / 8),
                        _cis(5.0, base - math.pi / 24),
                        outer[2 * i],
                    ]
                ),
            }
        )
        curves.append(
            {
                "kind": "mountain",
                "points": np.array(
                    [
                        hexv[i],
                        _cis(3.0, base + 5 * math.pi / 72),
                        _cis(5.0, base + math.pi / 8),
                        outer[2 * i + 1],
                    ]
                ),
            }
        )
    return curves


def bezier_point(control: np.ndarray, s) -> np.ndarray:
    """de Casteljau evaluation of a Bezier curve of any degree."""
    s = np.asarray(s, dtype=np.float64)[..., None]
    pts = [np.broadcast_to(p, s.shape[:-1] + (control.shape[-1],)) for p in control]
    while len(pts) > 1:
        pts = [(1.0 - s) * a + s * b for a, b in zip(pts[:-1], pts[1:])]
    return pts[0]


def _is_valley_tip(x: np.ndarray) -> np.ndarray:
    # Valley tips sit at angles 0, 60, ... degrees; mountain tips at
    # 30, 90, ... degrees.  Classify by angle modulo 60 degrees.
    ang = np.arctan2(x[..., 1], x[..., 0])
    frac = np.mod(ang, math.pi / 3)
    return np.minimum(frac, math.pi / 3 - frac) < math.pi / 12


def starshade_point_program(c_r: float = 0.25):
    """Pointwise boundary data for the dynamics: every constrained
    vertex moves as phi(t) = (1 - 2 c_r t) (x, 0)."""

    def point_values(x: np.ndarray, t: float) -> np.ndarray:
        scale = 1.0 - 2.0 * c_r * t
        zero = np.zeros(x.shape[:-1])
        return np.stack([scale * x[..., 0], scale * x[..., 1], zero], axis=-1)

    return point_values


def starshade_init_program(height: float = 1.5):
    """Pointwise boundary data for the t = 0 initialization: valley tips
    at their rest position, mountain tips lifted to the given height to
    break the flat equilibrium."""

    def point_values(x: np.ndarray, t: float) -> np.ndarray:
        lifted = np.where(_is_valley_tip(x), 0.0, height)
        return np.stack([x[..., 0], x[..., 1], lifted], axis=-1)

    return point_values


_POINT_PROGRAMS = {
    "starshade": (starshade_point_program, ("c_r",)),
    "starshade_init": (starshade_init_program, ("height",)),
}

_BOUNDARY_PHI = {
    "half_sphere": (half_sphere_boundary_phi, ("eps",)),
}


def builtin_point_program(name: str, **params):
    return _build(_POINT_PROGRAMS, "point program", name, params)


def builtin_boundary_phi(name: str, **params):
    return _build(_BOUNDARY_PHI, "boundary phi", name, params)
