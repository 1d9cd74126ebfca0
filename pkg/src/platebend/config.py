"""Problem configuration: one JSON file describes a full experiment.

The file names the model, the mesh (a mesh file or a built-in
generator), material and penalty parameters, the target metric, and the
optional boundary/force/curvature/initial data, each either a named
built-in from the scenario catalog or expressions over x1, x2, t.
Unknown keys are rejected with their full key path so typos surface
immediately instead of silently falling back to defaults.

Schema sketch (all sections except model optional):

    {
      "model": "preasymptotic" | "prestrain" | "bilayer",
      "constraint": "none" | "aver" | "bary",        # must match model
      "degree": 2,
      "mesh": {"file": "..."} |
              {"generator": {"kind": "disc", "n": 8, "radius": 1.0,
                             "grading": 1.0, "boundary": "free"}} |
              {"generator": {"kind": "rectangle", "bounds": [x0,y0,x1,y1],
                             "nx": 4, "ny": 4, "boundary": "dirichlet"}},
      "material": {"mu": 6.0, "lambda": 8.0, "s": 0.0 | "s2": 0.0},
      "metric": {"builtin": "bubble", "params": {...}} |
                {"expr": [g11, g12, g22]},
      "curvature": {"regions": {"1": [[a,b],[b,c]], ...} |
                    "constant": [[a,b],[b,c]],
                    "energy_constant": true},
      "boundary": {"phi": vec, "grad_phi": {"expr": [[..2..]x3]},
                   "points": vec},
      "force": vec,
      "initial": {"interpolate": [e1, e2, e3]} |
                 {"builtin": "half_sphere", "params": {...}},
      "penalties": {"gamma0": 1.0, "gamma1": 1.0, "gamma2": 10.0},
      "flow": {"tau", "tol", "tau_pre", "tol_pre", "defect_tol_pre",
               "max_iter", "accelerate", "adapt_tau"},
      "dynamics": {"dt": 0.05, "steps": 35},
      "init_boundary": {"points": {"ids": [...], ...vec...}},
      "output": {"dir": "out"},
      "sweep": {"path": "material.s2", "values": [...]}
    }

where vec is {"builtin": name, "params": {...}} or {"expr": [e1,e2,e3]}.
Relative paths (mesh file, output dir) resolve against the config
file's directory.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import energy as en
from . import scenarios as sc
from .errors import ConfigError
from .exprparse import compile_expression
from .flow import FlowConfig
from .mesh import Mesh, build_disc_mesh, build_structured_quad_mesh, load_mesh, make_mesh

_MODELS = {"preasymptotic": "none", "prestrain": "aver", "bilayer": "bary"}

_TOP_KEYS = {
    "model", "constraint", "degree", "mesh", "material", "metric",
    "curvature", "boundary", "force", "initial", "penalties", "flow",
    "dynamics", "init_boundary", "output", "sweep",
}


def _check_keys(section: dict, allowed, path: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    for key in section:
        if key not in allowed:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown key {where}")


def _get(section: dict, key: str, path: str, types, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"missing key {path}.{key}" if path else f"missing key {key}")
        return default
    value = section[key]
    wanted = types if isinstance(types, tuple) else (types,)
    ok = isinstance(value, wanted)
    if isinstance(value, bool) and bool not in wanted:
        ok = False  # JSON true/false must not pass as numbers
    if not ok:
        where = f"{path}.{key}" if path else key
        raise ConfigError(f"bad value for {where}: {value!r}")
    return value


def _num(section, key, path, default=None, required=False) -> float | None:
    v = _get(section, key, path, (int, float), default, required)
    return None if v is None else float(v)


# -- expression-backed callables -------------------------------------------


def _expr_list(raw, path: str, n: int) -> list:
    if not isinstance(raw, list) or len(raw) != n:
        raise ConfigError(f"{path} must list {n} expressions")
    return [compile_expression(e) if isinstance(e, str) else _bad_expr(e, path) for e in raw]


def _bad_expr(e, path):
    raise ConfigError(f"{path} entries must be expression strings, got {e!r}")


def _eval_expr(expr, x: np.ndarray, t: float) -> np.ndarray:
    v = expr(x1=x[..., 0], x2=x[..., 1], t=np.float64(t))
    return np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape[:-1])


def _vector_fn(exprs: list):
    def fn(x: np.ndarray, t: float = 0.0) -> np.ndarray:
        return np.stack([_eval_expr(e, x, t) for e in exprs], axis=-1)

    return fn


def _metric_expr_fn(exprs: list):
    def fn(x: np.ndarray) -> np.ndarray:
        g11, g12, g22 = (_eval_expr(e, x, 0.0) for e in exprs)
        g = np.empty(x.shape[:-1] + (2, 2))
        g[..., 0, 0] = g11
        g[..., 0, 1] = g[..., 1, 0] = g12
        g[..., 1, 1] = g22
        return g

    return fn


def _grad_expr_fn(rows: list):
    def fn(x: np.ndarray, t: float = 0.0) -> np.ndarray:
        out = np.empty(x.shape[:-1] + (3, 2))
        for i in range(3):
            for j in range(2):
                out[..., i, j] = _eval_expr(rows[i][j], x, t)
        return out

    return fn


def _parse_vec(section, path: str, builtins, n: int = 3, time_flags=()):
    """A 3-vector of expressions or a named builtin; returns
    (callable(x, t), uses_time).  Builtins all take (x, t)."""
    _check_keys(section, {"builtin", "params", "expr"}, path)
    has_builtin = "builtin" in section
    has_expr = "expr" in section
    if has_builtin == has_expr:
        raise ConfigError(f"{path} needs exactly one of 'builtin' or 'expr'")
    if has_expr:
        exprs = _expr_list(section["expr"], f"{path}.expr", n)
        return _vector_fn(exprs), any(e.uses_time for e in exprs)
    name = _get(section, "builtin", path, str, required=True)
    params = _get(section, "params", path, dict, default={})
    return builtins(name, **params), name in time_flags


# -- sections ---------------------------------------------------------------


def _parse_mesh(section, path: str, base: Path) -> Mesh:
    _check_keys(section, {"file", "generator"}, path)
    if ("file" in section) == ("generator" in section):
        raise ConfigError(f"{path} needs exactly one of 'file' or 'generator'")
    if "file" in section:
        rel = _get(section, "file", path, str, required=True)
        return load_mesh(base / rel)
    gen = section["generator"]
    gpath = f"{path}.generator"
    kind = _get(gen, "kind", gpath, str, required=True)
    boundary = _get(gen, "boundary", gpath, str, default="free")
    if boundary not in ("free", "dirichlet", "mixed"):
        raise ConfigError(f"{gpath}.boundary must be free, dirichlet, or mixed")
    if kind == "disc":
        _check_keys(gen, {"kind", "n", "radius", "grading", "boundary"}, gpath)
        mesh = build_disc_mesh(
            _get(gen, "n", gpath, int, required=True),
            radius=_num(gen, "radius", gpath, 1.0),
            radial_grading=_num(gen, "grading", gpath, 1.0),
        )
    elif kind == "rectangle":
        _check_keys(gen, {"kind", "bounds", "nx", "ny", "boundary"}, gpath)
        bounds = _get(gen, "bounds", gpath, list, required=True)
        if len(bounds) != 4:
            raise ConfigError(f"{gpath}.bounds must be [x0, y0, x1, y1]")
        mesh = build_structured_quad_mesh(
            [float(b) for b in bounds],
            _get(gen, "nx", gpath, int, required=True),
            _get(gen, "ny", gpath, int, required=True),
        )
    else:
        raise ConfigError(f"{gpath}.kind must be disc or rectangle")
    if boundary == "free":
        return mesh
    return _with_boundary_labels(mesh, boundary)


def _with_boundary_labels(mesh: Mesh, kind: str) -> Mesh:
    """Rebuild a mesh with every boundary edge labeled dirichlet or mixed."""
    topo = mesh.topology
    pairs = [
        (int(topo.vertices[e, 0]), int(topo.vertices[e, 1]))
        for e in topo.boundary_ids
    ]
    return make_mesh(
        mesh.vertices,
        mesh.cells,
        dirichlet_pairs=pairs if kind == "dirichlet" else None,
        mixed_pairs=pairs if kind == "mixed" else None,
        cell_regions=mesh.cell_regions,
    )


def _parse_material(section, path: str) -> en.MaterialParams:
    _check_keys(section, {"mu", "lambda", "s", "s2"}, path)
    if "s" in section and "s2" in section:
        raise ConfigError(f"{path} takes s or s2, not both")
    s2 = _num(section, "s2", path)
    if s2 is not None:
        if s2 < 0:
            raise ConfigError(f"{path}.s2 must be nonnegative")
        s = float(np.sqrt(s2))
    else:
        s = _num(section, "s", path, 0.0)
    return en.MaterialParams(
        mu=_num(section, "mu", path, 6.0),
        lam=_num(section, "lambda", path, 8.0),
        s=s,
    )


def _parse_metric(section, path: str):
    _check_keys(section, {"builtin", "params", "expr"}, path)
    if ("builtin" in section) == ("expr" in section):
        raise ConfigError(f"{path} needs exactly one of 'builtin' or 'expr'")
    if "expr" in section:
        return _metric_expr_fn(_expr_list(section["expr"], f"{path}.expr", 3))
    name = _get(section, "builtin", path, str, required=True)
    params = _get(section, "params", path, dict, default={})
    return sc.builtin_metric(name, **params)


def _sym2(raw, path: str) -> np.ndarray:
    Z = np.asarray(raw, dtype=np.float64)
    if Z.shape != (2, 2):
        raise ConfigError(f"{path} must be a 2x2 matrix")
    if abs(Z[0, 1] - Z[1, 0]) > 1e-14 * max(1.0, np.abs(Z).max()):
        raise ConfigError(f"{path} must be symmetric")
    return Z


def _parse_curvature(section, path: str):
    _check_keys(section, {"regions", "constant", "energy_constant"}, path)
    if ("regions" in section) == ("constant" in section):
        raise ConfigError(f"{path} needs exactly one of 'regions' or 'constant'")
    include = _get(section, "energy_constant", path, bool, default=True)
    if "constant" in section:
        return ("constant", _sym2(section["constant"], f"{path}.constant")), include
    regions = _get(section, "regions", path, dict, required=True)
    table = {}
    for key, raw in regions.items():
        try:
            label = int(key)
        except ValueError:
            raise ConfigError(f"{path}.regions keys must be integers, got {key!r}") from None
        table[label] = _sym2(raw, f"{path}.regions.{key}")
    return ("regions", table), include


def _parse_boundary(section, path: str):
    _check_keys(section, {"phi", "grad_phi", "points"}, path)
    phi = grad_phi = points = None
    uses_time = False
    if "phi" in section:
        phi, ut = _parse_vec(section["phi"], f"{path}.phi", sc.builtin_boundary_phi)
        uses_time |= ut
    if "grad_phi" in section:
        gsec = section["grad_phi"]
        _check_keys(gsec, {"expr"}, f"{path}.grad_phi")
        raw = _get(gsec, "expr", f"{path}.grad_phi", list, required=True)
        if len(raw) != 3:
            raise ConfigError(f"{path}.grad_phi.expr must list 3 rows of 2 expressions")
        rows = [_expr_list(r, f"{path}.grad_phi.expr", 2) for r in raw]
        grad_phi = _grad_expr_fn(rows)
        uses_time |= any(e.uses_time for row in rows for e in row)
    if "points" in section:
        points, ut = _parse_vec(
            section["points"], f"{path}.points", sc.builtin_point_program,
            time_flags=("starshade",),
        )
        uses_time |= ut
    return en.BoundaryData(phi=phi, grad_phi=grad_phi, point_values=points), uses_time


def _parse_initial(section, path: str):
    _check_keys(section, {"interpolate", "builtin", "params"}, path)
    if ("interpolate" in section) == ("builtin" in section):
        raise ConfigError(f"{path} needs exactly one of 'interpolate' or 'builtin'")
    if "interpolate" in section:
        exprs = _expr_list(section["interpolate"], f"{path}.interpolate", 3)
        fn = _vector_fn(exprs)
        return lambda x: fn(x, 0.0)
    name = _get(section, "builtin", path, str, required=True)
    params = _get(section, "params", path, dict, default={})
    return sc.builtin_target(name, **params)


def _parse_flow(section, path: str, constraint: str) -> FlowConfig:
    allowed = {
        "tau", "tol", "tau_pre", "tol_pre", "defect_tol_pre",
        "max_iter", "accelerate", "adapt_tau",
    }
    _check_keys(section, allowed, path)
    kwargs = {}
    for key in ("tau", "tol", "tau_pre", "tol_pre", "defect_tol_pre"):
        v = _num(section, key, path)
        if v is not None:
            kwargs[key] = v
    mi = _get(section, "max_iter", path, int)
    if mi is not None:
        kwargs["max_iter"] = mi
    for key in ("accelerate", "adapt_tau"):
        v = _get(section, key, path, bool)
        if v is not None:
            kwargs[key] = v
    return FlowConfig(constraint=constraint, **kwargs)


def _parse_dynamics(section, path: str) -> tuple[float, int]:
    _check_keys(section, {"dt", "steps"}, path)
    dt = _num(section, "dt", path, required=True)
    steps = _get(section, "steps", path, int, required=True)
    if dt <= 0 or steps < 1:
        raise ConfigError(f"{path} needs dt > 0 and steps >= 1")
    return dt, steps


def _parse_init_boundary(section, path: str):
    _check_keys(section, {"points"}, path)
    psec = _get(section, "points", path, dict, required=True)
    ppath = f"{path}.points"
    _check_keys(psec, {"ids", "builtin", "params", "expr"}, ppath)
    ids = _get(psec, "ids", ppath, list, required=True)
    try:
        ids = [int(i) for i in ids]
    except (TypeError, ValueError):
        raise ConfigError(f"{ppath}.ids must be vertex ids") from None
    rest = {k: v for k, v in psec.items() if k != "ids"}
    fn, _ = _parse_vec(rest, ppath, sc.builtin_point_program)
    return ids, fn


def _parse_sweep(section, path: str) -> tuple[str, list]:
    _check_keys(section, {"path", "values"}, path)
    target = _get(section, "path", path, str, required=True)
    values = _get(section, "values", path, list, required=True)
    if not values:
        raise ConfigError(f"{path}.values must not be empty")
    return target, values


# -- assembled configuration -------------------------------------------------


@dataclass
class ProblemConfig:
    """Everything the driver needs, parsed and validated."""

    model: str
    constraint: str
    degree: int
    mesh: Mesh
    material: en.MaterialParams
    penalties: en.PenaltyParams
    flow: FlowConfig
    metric_fn: object
    curvature_spec: tuple | None
    curvature_constant: bool
    boundary: en.BoundaryData | None
    force_fn: object | None
    initial_fn: object | None
    dynamics: tuple[float, int] | None
    init_points: tuple[list[int], object] | None
    output_dir: Path
    sweep: tuple[str, list] | None
    time_dependent: bool
    raw: dict = field(repr=False, default_factory=dict)
    base_dir: Path = Path(".")


def parse_config_data(data: dict, base_dir=".") -> ProblemConfig:
    base = Path(base_dir)
    _check_keys(data, _TOP_KEYS, "")
    model = data.get("model")
    if not model:
        raise ConfigError("model required")
    if model not in _MODELS:
        raise ConfigError(
            f"unknown model {model!r} (have: {', '.join(sorted(_MODELS))})"
        )
    constraint = _MODELS[model]
    explicit = _get(data, "constraint", "", str)
    if explicit is not None and explicit != constraint:
        raise ConfigError(
            f"model {model!r} implies constraint {constraint!r}, "
            f"config says {explicit!r}"
        )

    degree = _get(data, "degree", "", int, default=2)
    if degree < 2:
        raise ConfigError("degree must be at least 2")

    mesh = _parse_mesh(_get(data, "mesh", "", dict, required=True), "mesh", base)
    material = _parse_material(_get(data, "material", "", dict, default={}), "material")
    pen_sec = _get(data, "penalties", "", dict, default={})
    _check_keys(pen_sec, {"gamma0", "gamma1", "gamma2"}, "penalties")
    penalties = en.PenaltyParams(
        gamma0=_num(pen_sec, "gamma0", "penalties", 1.0),
        gamma1=_num(pen_sec, "gamma1", "penalties", 1.0),
        gamma2=_num(pen_sec, "gamma2", "penalties", 10.0),
    )
    flow = _parse_flow(_get(data, "flow", "", dict, default={}), "flow", constraint)

    if "metric" in data:
        metric_fn = _parse_metric(data["metric"], "metric")
    else:
        metric_fn = sc.identity_metric()

    curvature_spec = None
    curvature_constant = True
    if "curvature" in data:
        if model != "bilayer":
            raise ConfigError("curvature only applies to the bilayer model")
        curvature_spec, curvature_constant = _parse_curvature(
            data["curvature"], "curvature"
        )
    elif model == "bilayer":
        raise ConfigError("bilayer model requires a curvature section")

    boundary = None
    time_dependent = False
    if "boundary" in data:
        boundary, time_dependent = _parse_boundary(data["boundary"], "boundary")

    force_fn = None
    if "force" in data:
        force_fn, ut = _parse_vec(
            data["force"], "force", sc.builtin_force, time_flags=("half_sphere",)
        )
        time_dependent |= ut

    initial_fn = None
    if "initial" in data:
        initial_fn = _parse_initial(data["initial"], "initial")

    dynamics = None
    if "dynamics" in data:
        dynamics = _parse_dynamics(data["dynamics"], "dynamics")

    init_points = None
    if "init_boundary" in data:
        if dynamics is None:
            raise ConfigError("init_boundary only applies to dynamics runs")
        init_points = _parse_init_boundary(data["init_boundary"], "init_boundary")
        ids = init_points[0]
        if min(ids) < 0 or max(ids) >= mesh.n_vertices:
            raise ConfigError("init_boundary.points.ids out of range for the mesh")

    out_sec = _get(data, "output", "", dict, default={})
    _check_keys(out_sec, {"dir"}, "output")
    output_dir = base / _get(out_sec, "dir", "output", str, default="out")

    sweep = None
    if "sweep" in data:
        sweep = _parse_sweep(data["sweep"], "sweep")
        set_by_path(copy.deepcopy(data), sweep[0], sweep[1][0])  # validate path

    return ProblemConfig(
        model=model,
        constraint=constraint,
        degree=degree,
        mesh=mesh,
        material=material,
        penalties=penalties,
        flow=flow,
        metric_fn=metric_fn,
        curvature_spec=curvature_spec,
        curvature_constant=curvature_constant,
        boundary=boundary,
        force_fn=force_fn,
        initial_fn=initial_fn,
        dynamics=dynamics,
        init_points=init_points,
        output_dir=output_dir,
        sweep=sweep,
        time_dependent=time_dependent,
        raw=data,
        base_dir=base,
    )


def parse_config(path) -> ProblemConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must contain a JSON object")
    return parse_config_data(data, base_dir=path.parent)


def set_by_path(data: dict, dotted: str, value) -> dict:
    """Assign value at a dotted key path ('material.s2'), creating
    intermediate objects; returns data."""
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad sweep path {dotted!r}")
    node = data
    for key in keys[:-1]:
        nxt = node.setdefault(key, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"sweep path {dotted!r} crosses non-object {key!r}")
        node = nxt
    node[keys[-1]] = value
    return data


def expand_sweep(cfg: ProblemConfig) -> list[tuple[object, dict]]:
    """List of (value, raw config data) pairs, one per sweep value, with
    the sweep section removed and the value substituted."""
    if cfg.sweep is None:
        return [(None, cfg.raw)]
    path, values = cfg.sweep
    out = []
    for v in values:
        data = copy.deepcopy(cfg.raw)
        del data["sweep"]
        set_by_path(data, path, v)
        out.append((v, data))
    return out
