"""Command-line front end: ``run``, ``rates`` and ``verify``.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 solver failure.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from .adaptivity import AfemAbort, AfemConfig, ConvergenceHistory, afem_run, rates
from .cases import CASES, get_case, verify_case
from .kkt import KktSingularError, KktToleranceError
from .pdas import PdasNonConvergence

__all__ = ["cli_main", "read_config", "EXIT_OK", "EXIT_USAGE", "EXIT_INVALID", "EXIT_SOLVER"]

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_SOLVER = 0, 1, 2, 3

_CONFIG_TYPES = {
    "case": str,
    "mode": str,
    "theta": float,
    "max_dofs": int,
    "max_levels": int,
    "out": str,
    "pdas_tol": float,
    "pdas_max_iter": int,
    "kkt_tol": float,
    "quad_degree": int,
    "initial_h": float,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    """Parse ``key = value`` lines (``#`` comments allowed) into typed options."""
    text = Path(path).read_text()
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string("[run]\n" + text)
    out = {}
    for key, raw in cp["run"].items():
        key = key.replace("-", "_")
        if key not in _CONFIG_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        try:
            out[key] = _CONFIG_TYPES[key](raw)
        except ValueError as exc:
            raise ValueError(f"bad value for {key}: {raw!r}") from exc
    return out


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="twogrid-afem", description="Adaptive two-grid FEM for Stokes Dirichlet boundary control.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="adaptive or uniform benchmark run")
    run.add_argument("--case", choices=sorted(CASES))
    run.add_argument("--mode", choices=["adaptive", "uniform"])
    run.add_argument("--theta", type=float)
    run.add_argument("--max-dofs", type=int, dest="max_dofs")
    run.add_argument("--max-levels", type=int, dest="max_levels")
    run.add_argument("--out")
    run.add_argument("--config", help="file of key = value lines overriding the flags")

    rt = sub.add_parser("rates", help="print the rate table of a finished run")
    rt.add_argument("--in", dest="indir", required=True)

    vf = sub.add_parser("verify", help="finite-difference checks of the manufactured data")
    vf.add_argument("--case", choices=sorted(CASES), required=True)
    return parser


def _fmt(v, spec=".4e"):
    return "-" if v is None else format(v, spec)


def _print_table(history: ConvergenceHistory, out=None):
    out = sys.stdout if out is None else out
    print(f"{'level':>5} {'N':>8} {'error':>11} {'estimator':>11} {'rate_err':>9} {'rate_est':>9} {'pdas':>4}", file=out)
    for r in history.rows:
        print(
            f"{r['level']:>5} {r['N']:>8} {_fmt(r['error_total']):>11} {_fmt(r['estimator_total']):>11} "
            f"{_fmt(r['rate_error'], '.3f'):>9} {_fmt(r['rate_estimator'], '.3f'):>9} {r['pdas_iters']:>4}",
            file=out,
        )
    if len(history) >= 2:
        last = min(5, len(history))
        print(
            f"least-squares slope over last {last} levels: error {history.slope('error_total', last):.3f}, "
            f"estimator {history.slope('estimator_total', last):.3f}",
            file=out,
        )


def _cmd_run(args) -> int:
    opts = {k: getattr(args, k) for k in ("case", "mode", "theta", "max_dofs", "max_levels", "out")}
    if args.config:
        try:
            opts.update(read_config(args.config))
        except (OSError, ValueError) as exc:
            print(f"error: config: {exc}", file=sys.stderr)
            return EXIT_INVALID
    if opts["case"] is None or opts["out"] is None:
        print("error: run needs --case and --out (flag or config)", file=sys.stderr)
        return EXIT_INVALID
    cfg_keys = {k: v for k, v in opts.items() if k not in ("case", "out") and v is not None}
    try:
        case = get_case(opts["case"])
        config = AfemConfig(**cfg_keys)
    except (KeyError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        history = afem_run(case, config, opts["out"])
    except AfemAbort as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        exc.history.write_csv(Path(opts["out"]) / "history.csv")
        return EXIT_SOLVER
    except (PdasNonConvergence, KktSingularError, KktToleranceError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    _print_table(history)
    return EXIT_OK


def _cmd_rates(args) -> int:
    path = Path(args.indir)
    path = path / "history.csv" if path.is_dir() else path
    try:
        history = ConvergenceHistory.read_csv(path)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if len(history) < 2:
        print(f"warning: {path} holds {len(history)} level(s); rates need at least two", file=sys.stderr)
        _print_table(history)
        return EXIT_OK
    rates(history)
    _print_table(history)
    return EXIT_OK


def _cmd_verify(args) -> int:
    results = verify_case(get_case(args.case))
    for res in results:
        status = "ok" if res.passed else "FAIL"
        print(f"{status:4} {res.name:<20} max error {res.max_error:.3e} (tol {res.tol:.0e})")
    return EXIT_OK if all(r.passed for r in results) else EXIT_INVALID


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = {"run": _cmd_run, "rates": _cmd_rates, "verify": _cmd_verify}[args.command]
    return handler(args)


def main() -> None:
    sys.exit(cli_main())
