"""Command-line entry point: ``tcsim simulate|analyze|deconvolve|xsec|report``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 schema
mismatch, 5 internal fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .analysis import AnalysisError
from .geometry import GeometryError
from .materials import MaterialTableError
from .runner import (
    OUTPUT_DIR_ENV,
    ConfigError,
    RunConfig,
    SchemaMismatchError,
    load_report,
    load_schema,
    run_analyze,
    run_deconvolve,
    run_simulate,
    run_xsec_table,
)

log = logging.getLogger("tcsim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SCHEMA = 4
EXIT_INTERNAL = 5

SCHEMAS = {
    "config": "run configuration (simulate/analyze --config)",
    "digitized": "digitized event stream, NDJSON, header line first",
    "truth": "truth event stream, NDJSON, header line first",
    "report": "analysis report (report.json)",
    "rseries": "one R-versus-θ_ICS series inside a report",
    "deconvolved": "deconvolution output (deconvolved.json)",
    "provenance": "run provenance (provenance.json)",
}

REPORT_HELP = "Emitted files and their JSON schemas (schema_version 1.0):\n" + "\n".join(
    f"  {name:<12} {desc}" for name, desc in SCHEMAS.items()) + """

Histogram CSVs (hist_<frame>_<sample>.csv, mixed_<frame>_<sample>.csv) have
the columns theta_ics_lo,theta_ics_hi,dphi_lo,dphi_hi,count,err (degrees for
θ_ICS, radians for Δφ).  `tcsim report --schema NAME` prints a schema;
`tcsim report FILE` validates a report and prints its R table."""


def _default_output() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, "tcsim_out")


def _load_config(path, overrides: dict) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    for k, v in overrides.items():
        if v is not None:
            d[k] = v
    return RunConfig.from_dict(d)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config, {"seed": args.seed, "workers": args.workers, "n_events": args.events,
                                     "output_dir": args.output_dir, "backend": args.backend})
    res = run_simulate(cfg)
    _print_series(res.report)
    print(f"wrote {res.output_dir}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_config(args.config, {"output_dir": args.output_dir})
    report = run_analyze(cfg, args.events, args.output_dir)
    _print_series(report)
    return EXIT_OK


def cmd_deconvolve(args) -> int:
    out = args.output_dir or _default_output()
    doc = run_deconvolve(args.expt, args.sim_all, args.sim_tcs, out, args.frame)
    for p in doc["series"]["points"]:
        print(f"{p['theta_lo']:6.1f}-{p['theta_hi']:<6.1f} R_TCS = {p['R']:.4f} ± {p['sigma_R']:.4f}")
    return EXIT_OK


def cmd_xsec(args) -> int:
    path = Path(args.grid)
    try:
        grid = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read grid {path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    out = Path(args.output) if args.output else Path(_default_output()) / "xsec.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    n = run_xsec_table(grid, out)
    print(f"wrote {n} rows to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.schema:
        print(json.dumps(load_schema(args.schema), indent=2))
        return EXIT_OK
    if not args.file:
        print(REPORT_HELP)
        return EXIT_OK
    _print_series(load_report(args.file))
    return EXIT_OK


def _print_series(report: dict) -> None:
    sel = report.get("selection", {})
    if sel:
        print(f"selected {sel['n_selected']} events; counts {sel['counts']}")
    for s in report["series"]:
        print(f"[{report['mode']} {s['frame']} {s['sample']}]")
        for p in s["points"]:
            r = "nan" if p["R"] is None else f"{p['R']:.4f}"
            e = "nan" if p["sigma_R"] is None else f"{p['sigma_R']:.4f}"
            tag = "corr" if p.get("corrected") else "raw "
            print(f"  {p['theta_lo']:5.1f}-{p['theta_hi']:<5.1f} R = {r} ± {e} ({tag}, Σw = {p['sum_w']:.4g})")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tcsim", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=f"tcsim {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a run and analyse it in memory")
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--workers", type=int, help="override the worker count")
    p.add_argument("--events", type=int, help="override n_events")
    p.add_argument("--output-dir", help=f"output directory (default: config, then ${OUTPUT_DIR_ENV})")
    p.add_argument("--backend", choices=["python", "cython"], help="kernel backend")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="analyse a digitized event stream")
    p.add_argument("--config", required=True, help="run configuration JSON (cuts, frames, samples)")
    p.add_argument("--events", required=True, help="digitized NDJSON stream (optionally gzipped)")
    p.add_argument("--output-dir", help="output directory")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("deconvolve", help="remove multiple-scattering background from an R series")
    p.add_argument("--expt", required=True, help="report with the measured 'all' series")
    p.add_argument("--sim-all", required=True, help="simulation report providing R_sim(all) and f_TCS")
    p.add_argument("--sim-tcs", required=True, help="simulation report providing R_sim(TCS)")
    p.add_argument("--frame", default="lab", choices=["lab", "photon"])
    p.add_argument("--output-dir", help=f"output directory (default ${OUTPUT_DIR_ENV} or ./tcsim_out)")
    p.set_defaults(func=cmd_deconvolve)

    p = sub.add_parser("xsec", help="tabulate cross sections and R over a grid")
    p.add_argument("--grid", required=True, help="grid JSON: k1_keV, k2p_keV, theta1_deg, theta2p_deg, dphi_deg")
    p.add_argument("--output", help="CSV path (default <output dir>/xsec.csv)")
    p.set_defaults(func=cmd_xsec)

    p = sub.add_parser("report", help="document schemas or print a report",
                       description=REPORT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("file", nargs="?", help="report JSON to validate and print")
    p.add_argument("--schema", choices=sorted(SCHEMAS), help="print the named JSON schema")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GeometryError, MaterialTableError) as exc:
        print(f"tcsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaMismatchError as exc:
        print(f"tcsim: schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"tcsim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AnalysisError as exc:
        print(f"tcsim: analysis error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        log.exception("internal fault")
        print(f"tcsim: internal fault: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
