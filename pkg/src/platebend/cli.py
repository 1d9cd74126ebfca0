"""Command line entry point.

    platebend run <config.json> [--jobs N] [--out DIR] [--quiet]
    platebend preprocess <config.json> [--out DIR]
    platebend hessian-study [--levels N]

Exit codes: 0 success, 2 configuration error, 3 solver failure, 4 an
iteration cap was hit before the stopping test fired (results are
still written).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ProblemConfig, expand_sweep, parse_config, parse_config_data
from .driver import build_setup, run_dynamics, run_preprocess, run_static, write_outputs, hessian_study
from .errors import ConfigError, SolverError
from .export import export_state


def _print_stages(result, quiet: bool) -> None:
    if quiet:
        return
    for stage in result.stages:
        if stage.log is None:
            print(f"  [{stage.name}] direct solve")
        else:
            print(
                f"  [{stage.name}] {stage.log.n_iter} iterations, "
                f"stopped by {stage.log.stopped_by}, "
                f"E = {stage.log.rows[-1][1]:.6g}"
            )


def _execute(cfg: ProblemConfig, out_dir: Path, quiet: bool) -> tuple[int, dict]:
    setup = build_setup(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.dynamics is not None:
        problem_holder = {}

        def on_step(m, t, partial):
            problem_holder["p"] = partial.problem
            export_state(
                partial.space,
                partial.y,
                out_dir / f"state_{m:03d}.vtk",
                metric=partial.problem.metric,
                material=partial.problem.material,
                defect_kind=partial.problem.defect_kind,
            )
            if not quiet:
                row = partial.stages[-1].log
                print(
                    f"  step {m} (t = {t:g}): {row.n_iter} iterations, "
                    f"E = {row.rows[-1][1]:.6g}, defect = {row.rows[-1][7]:.6g}"
                )

        result = run_dynamics(cfg, setup, on_step=on_step)
    else:
        result = run_static(cfg, setup)
        _print_stages(result, quiet)
    write_outputs(cfg, result, out_dir)
    if not quiet:
        print(f"  wrote {out_dir / 'summary.json'}")
    if "warning" in result.summary:
        print(f"warning: {result.summary['warning']}", file=sys.stderr)
        return 4, result.summary
    return 0, result.summary


def _sweep_label(path: str, value) -> str:
    leaf = path.split(".")[-1]
    return f"{leaf}_{value:g}" if isinstance(value, float) else f"{leaf}_{value}"


def _sweep_worker(payload) -> tuple[str, int, str]:
    data, base_dir, out_dir, quiet = payload
    try:
        cfg = parse_config_data(data, base_dir=base_dir)
        code, _ = _execute(cfg, Path(out_dir), quiet)
        return out_dir, code, ""
    except ConfigError as e:
        return out_dir, 2, str(e)
    except SolverError as e:
        return out_dir, 3, str(e)


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    out_base = Path(args.out) if args.out else cfg.output_dir
    if cfg.sweep is None:
        code, _ = _execute(cfg, out_base, args.quiet)
        return code
    items = []
    for value, data in expand_sweep(cfg):
        label = _sweep_label(cfg.sweep[0], value)
        items.append((data, str(cfg.base_dir), str(out_base / label), True))
    if not args.quiet:
        print(f"sweep over {cfg.sweep[0]}: {len(items)} runs, jobs = {args.jobs}")
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_worker, items))
    else:
        results = [_sweep_worker(item) for item in items]
    worst = 0
    for out_dir, code, message in results:
        status = "ok" if code == 0 else f"exit {code}"
        if not args.quiet or code not in (0, 4):
            print(f"  {out_dir}: {status}" + (f" ({message})" if message else ""))
        if code in (2, 3):
            return code
        worst = max(worst, code)
    return worst


def _cmd_preprocess(args) -> int:
    cfg = parse_config(args.config)
    out_dir = Path(args.out) if args.out else cfg.output_dir
    result = run_preprocess(cfg)
    _print_stages(result, args.quiet)
    write_outputs(cfg, result, out_dir)
    if not args.quiet:
        print(f"  wrote {out_dir / 'summary.json'}")
    return 0


def _cmd_hessian_study(args) -> int:
    rows = hessian_study(args.levels)
    print(f"{'level':>5} {'cells':>7} {'h':>10} {'error':>14} {'rate':>7}")
    for r in rows:
        rate = f"{r['rate']:7.3f}" if r["rate"] == r["rate"] else "      -"
        print(
            f"{r['level']:>5} {r['cells']:>7} {r['h']:>10.5f} "
            f"{r['error']:>14.6e} {rate}"
        )
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="platebend",
        description="Bending deformations of prestrained and bilayer plates.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured experiment")
    p_run.add_argument("config", type=Path, help="JSON problem configuration")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    p_run.add_argument("--out", type=Path, help="override the output directory")
    p_run.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_pre = sub.add_parser("preprocess", help="run the preparation stages only")
    p_pre.add_argument("config", type=Path, help="JSON problem configuration")
    p_pre.add_argument("--out", type=Path, help="override the output directory")
    p_pre.add_argument("--quiet", action="store_true", help="suppress progress output")

    p_hs = sub.add_parser(
        "hessian-study", help="convergence table for the Hessian reconstruction"
    )
    p_hs.add_argument("--levels", type=int, default=4, help="number of refinements")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "preprocess":
            return _cmd_preprocess(args)
        return _cmd_hessian_study(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except SolverError as e:
        print(f"solver error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
