"""Command line interface.

Exit codes: 0 success, 1 unexpected error, 2 bad usage or configuration,
3 trajectory blow-up, 4 validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from .flows import BlowUpError
from .harness import (PAPER_REFERENCE, ExperimentConfig, convergence_study, emit_csv, fit_slope,
                      run_estimate)

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_BLOWUP, EXIT_VALIDATION = 0, 1, 2, 3, 4


def _load_config_file(path: str) -> dict:
    text = Path(path).read_text()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping of config keys")
    return data


def _parse_forcing(spec: str):
    out = []
    for item in spec.split(";"):
        parts = item.split(",")
        if len(parts) != 3:
            raise ValueError(f"forcing entry {item!r} must be k1,k2,q")
        out.append((int(parts[0]), int(parts[1]), float(parts[2])))
    return tuple(out)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON file with ExperimentConfig keys")
    p.add_argument("--nu", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--N", type=int, help="Fourier truncation max|k_i| <= N")
    p.add_argument("--n", type=int, help="number of time steps")
    p.add_argument("--T", type=float)
    p.add_argument("--K", type=int, help="number of QMC paths")
    p.add_argument("--scheme", choices=("strang", "lie", "swss"))
    p.add_argument("--forcing", type=_parse_forcing, help="'k1,k2,q;k1,k2,q;...'")
    p.add_argument("--functionals", type=lambda s: tuple(s.split(",")),
                   help="comma list of H-1, L2, H1, psi:<eta>")
    p.add_argument("--paper-reference", action="store_true",
                   help="report relative errors against the reference expectations")
    p.add_argument("--output", help="CSV output path")
    p.add_argument("--workers", type=int)
    p.add_argument("--convention", choices=("trig", "orthonormal"))
    p.add_argument("--layout", choices=("bridge", "step-major"))
    p.add_argument("--per-step-ordering", action="store_true", default=None)
    p.add_argument("--chunk-size", type=int)
    p.add_argument("--cfl-safety", type=float)
    p.add_argument("--shift-seed", type=int)


_FLAG_KEYS = ("nu", "epsilon", "N", "n", "T", "K", "scheme", "forcing", "functionals", "output",
              "workers", "convention", "layout", "per_step_ordering", "chunk_size", "cfl_safety",
              "shift_seed")


def build_config(args) -> ExperimentConfig:
    data = _load_config_file(args.config) if args.config else {}
    for key in _FLAG_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            data[key] = v
    if getattr(args, "paper_reference", False):
        data["reference"] = dict(PAPER_REFERENCE)
    return ExperimentConfig.from_mapping(data)


def _cmd_estimate(args) -> int:
    cfg = build_config(args)
    res = run_estimate(cfg)
    for k, v in res.estimates.items():
        line = f"{k:>10s} = {v:.15g}  (stderr {res.stderr[k]:.2e})"
        if k in res.rel_error:
            line += f"  relerr {res.rel_error[k]:.3e}"
        print(line)
    print(f"K = {res.K}, wall time {res.wall_time:.1f} s")
    if cfg.output:
        emit_csv([res], cfg.output)
    return EXIT_OK


def _cmd_study(args) -> int:
    cfg = build_config(args)
    grid = [int(x) for x in args.grid.split(",")]
    study = convergence_study(cfg, args.axis, grid)
    for r in study.rows:
        cells = [f"{r['value']:>6d}"]
        for k in cfg.functional_names:
            ratio = r[f"{k}_log2ratio"]
            cells.append(f"{k} {r[k]:.10f} err {r[f'{k}_relerr']:.3e}"
                         + ("" if ratio is None else f" log2 {ratio:+.2f}"))
        print("  ".join(cells))
    if args.axis == "timesteps":
        fit = [(v, e) for v, e in zip(study.values[:-1], study.errors(cfg.functional_names[-1]))]
        if len(fit) >= 2 and all(e > 0 for _, e in fit):
            print(f"fitted order ({cfg.functional_names[-1]}): {fit_slope(*zip(*fit)):.2f}")
    if cfg.output:
        emit_csv(study, cfg.output)
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .cubature import degree3_formula, load_formula, validate_formula

    f = load_formula(args.formula) if args.formula else degree3_formula(args.d)
    report = validate_formula(f, order=args.order, tol=args.tol)
    print(report.summary())
    print(f"symmetric: {f.is_symmetric()}")
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_VALIDATION


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snsweak",
                                     description="Weak approximation of stochastic 2D Navier-Stokes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="QMC estimate of the functionals")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("study", help="convergence study along one axis")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=("timesteps", "modes", "paths"))
    p.add_argument("--grid", required=True, help="comma list of ascending values")
    p.set_defaults(func=_cmd_study)

    p = sub.add_parser("validate-cubature", help="check a cubature formula's moment conditions")
    p.add_argument("formula", nargs="?", help="formula file (default: built-in degree-3)")
    p.add_argument("--d", type=int, default=4, help="dimension of the built-in formula")
    p.add_argument("--order", type=int, help="order to check (default: the formula's)")
    p.add_argument("--tol", type=float, default=1e-12)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("selftest", help="fast consistency checks")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BlowUpError as exc:
        print(f"blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ValueError, OSError, yaml.YAMLError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
