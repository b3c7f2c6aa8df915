"""Compiled vs pure-Python event kernel: throughput and output identity.

    python benchmarks/bench_kernel.py --events 20000 --python-events 2000

Each scenario is timed with both backends on the same event range; the
compiled run is then repeated on the Python backend's (shorter) range and
the arrays compared byte for byte.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from tcsim.digitizer import ResolutionConfig
from tcsim.geometry import geometry_preset
from tcsim.kernel import BACKENDS, KernelParams, simulate_batch
from tcsim.materials import builtin_material
from tcsim.transport import TransportOptions

SCENARIOS = {
    "apparatus_forced_scd": ("back2back", TransportOptions(force_scd_interaction=True), True, "candidates"),
    "apparatus_natural": ("back2back", TransportOptions(), True, "hits"),
    "sphere_forced_tcs": ("perfect_sphere", TransportOptions(forced_chain="tcs", theta_window_deg=(80.0, 84.0)),
                          False, "truth"),
    "sphere_natural": ("perfect_sphere", TransportOptions(), False, "truth"),
}


def params_for(name: str, mode: str, seed: int) -> KernelParams:
    preset, opts, digitize, keep = SCENARIOS[name]
    geom = geometry_preset(preset)
    mats = {m: builtin_material(m) for m in geom.materials}
    return KernelParams.build(seed, mode, geom, mats, opts, ResolutionConfig() if digitize else None, keep)


def time_backend(params, backend: str, n: int, repeat: int) -> tuple[float, dict]:
    best, out = float("inf"), None
    for _ in range(repeat):
        t = time.perf_counter()
        out = simulate_batch(params, 0, n, backend)
        best = min(best, time.perf_counter() - t)
    return best, out


def same_bytes(a: dict, b: dict) -> bool:
    return all(a[k].tobytes() == b[k].tobytes() for k in ("records", "events", "hits"))


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--events", type=int, default=20000, help="events for the compiled backend")
    ap.add_argument("--python-events", type=int, default=2000, help="events for the Python backend")
    ap.add_argument("--mode", default="ent", choices=["ent", "fd", "unpol", "separable"])
    ap.add_argument("--seed", type=int, default=12345)
    ap.add_argument("--repeat", type=int, default=3, help="best-of repeats for the compiled backend")
    ap.add_argument("--scenario", action="append", choices=sorted(SCENARIOS), help="default: all")
    ap.add_argument("--json", help="also write results to this JSON file")
    args = ap.parse_args(argv)

    if "cython" not in BACKENDS:
        print("compiled backend not built; only the Python kernel is available")
    rows = []
    print(f"{'scenario':<22} {'python us/ev':>13} {'cython us/ev':>13} {'speedup':>8} {'identical':>9}")
    for name in args.scenario or list(SCENARIOS):
        p = params_for(name, args.mode, args.seed)
        tp, outp = time_backend(p, "python", args.python_events, 1)
        row = {"scenario": name, "python_us_per_event": 1e6 * tp / args.python_events}
        if "cython" in BACKENDS:
            tc, _ = time_backend(p, "cython", args.events, args.repeat)
            _, outc = time_backend(p, "cython", args.python_events, 1)
            row["cython_us_per_event"] = 1e6 * tc / args.events
            row["speedup"] = row["python_us_per_event"] / row["cython_us_per_event"]
            row["identical"] = same_bytes(outp, outc)
        rows.append(row)
        print(f"{name:<22} {row['python_us_per_event']:13.1f} {row.get('cython_us_per_event', np.nan):13.2f} "
              f"{row.get('speedup', np.nan):8.1f} {str(row.get('identical', '-')):>9}")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)
    return 0 if all(r.get("identical", True) for r in rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
