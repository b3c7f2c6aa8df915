"""Run orchestration: configuration, chunked parallel simulation, streams, reports.

A run is cut into fixed-size chunks of consecutive event indices.  Every
event draws its random numbers from (seed, event index), so a chunk's
output does not depend on which process simulated it; chunks are merged
in index order, which makes streams and reports identical for any worker
count.  The same chunking is used when a digitized stream is analysed
again, so the in-memory pipeline and the stream analysis fill their
histograms in the same order and give the same report.
"""

from __future__ import annotations

import copy
import csv
import gzip
import hashlib
import io
import json
import logging
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    FRAMES,
    SAMPLES,
    AnalysisError,
    Hist2D,
    RSeries,
    Selection,
    SelectionCuts,
    TcsFraction,
    deconvolve_tcs,
    mix_events,
    reconstruct_arrays,
    select_truth,
    series_from_histograms,
    tcs_fraction,
    build_histograms,
)
from .digitizer import ResolutionConfig
from .geometry import VOL_DM0, VOL_DM1, VOL_SCD, VOLUME_NAMES, GeometryError, geometry_from_dict
from .kernel import EVENT_DTYPE, HIT_DTYPE, KernelParams, get_backend
from .materials import builtin_material, load_material_table
from .pair_state import PairMode
from .transport import LABEL_NAMES, TransportOptions

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"
DEFAULT_CHUNK = 100_000
OUTPUT_DIR_ENV = "TCSIM_OUTPUT_DIR"
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}
ROLE_NAMES = {0: "none", 1: "intermediate", 2: "first", 3: "second", 4: "free"}
KIND_NAMES = {0: "compton", 1: "photoabsorption"}
TRUTH_FIELDS = (("theta_ics", "t_ics"), ("theta1", "t1"), ("theta2", "t2"), ("phi1_lab", "p1_lab"),
                ("phi2_lab", "p2_lab"), ("phi1_photon", "p1_ph"), ("phi2_photon", "p2_ph"))


# --- errors ---------------------------------------------------------------------

class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


class SchemaMismatchError(ValueError):
    """An input file does not follow the expected schema or schema version."""


class BinningMismatchError(SchemaMismatchError):
    """Reports combined by deconvolution do not share their θ_ICS binning."""


# --- schemas --------------------------------------------------------------------

def load_schema(name: str) -> dict:
    ref = resources.files("tcsim") / "schemas" / f"{name}.schema.json"
    return json.loads(ref.read_text(encoding="utf-8"))


def _validator(name: str):
    import jsonschema
    from referencing import Registry, Resource

    schemas = [load_schema(n) for n in ("rseries", "report", "deconvolved", "provenance", "config",
                                        "digitized", "truth")]
    registry = Registry().with_resources([(s["$id"], Resource.from_contents(s)) for s in schemas])
    schema = load_schema(name)
    return jsonschema.Draft202012Validator(schema, registry=registry)


def validate_document(doc, name: str, part: str | None = None) -> None:
    """Validate ``doc`` against schema ``name`` (optionally one of its ``$defs``).

    Raises:
        SchemaMismatchError: listing the first violation with its JSON path.
    """
    v = _validator(name)
    if part is not None:
        schema = dict(v.schema["$defs"][part])
        schema["$defs"] = v.schema["$defs"]
        v = type(v)(schema, registry=v._registry)
    err = next(iter(sorted(v.iter_errors(doc), key=lambda e: list(e.absolute_path))), None)
    if err is not None:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise SchemaMismatchError(f"{name}: {where}: {err.message}")


# --- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class StreamOptions:
    truth: bool = True
    digitized: bool = True
    compress: bool = False


@dataclass
class RunConfig:
    """One simulation/analysis run.

    ``keep`` selects which events leave the kernel (default ``candidates``,
    two hits in each module, for the apparatus and ``truth`` for the water
    sphere).  ``truth_analysis`` analyses true angles instead of
    reconstructed ones (default: on for the sphere).
    """

    mode: str
    geometry: object
    n_events: int
    seed: int
    workers: int = 1
    chunk_size: int = DEFAULT_CHUNK
    output_dir: str = ""
    backend: str | None = None
    materials: dict = field(default_factory=dict)
    force_scd_interaction: bool = False
    forced_chain: str | None = None
    isotropic: bool = False
    keep: str | None = None
    truth_analysis: bool | None = None
    frames: tuple = ("lab",)
    samples: tuple = ("all", "TCS")
    streams: StreamOptions = field(default_factory=StreamOptions)
    plots: bool = True
    cuts: SelectionCuts = field(default_factory=SelectionCuts)
    resolution: ResolutionConfig = field(default_factory=ResolutionConfig)

    def __post_init__(self):
        if self.n_events <= 0:
            raise ConfigError("n_events: must be > 0")
        if self.workers < 1:
            raise ConfigError("workers: must be >= 1")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size: must be >= 1")
        try:
            self.mode = PairMode(self.mode).value
        except ValueError:
            raise ConfigError(f"mode: unknown pair mode {self.mode!r}") from None
        try:
            self.geometry_config = geometry_from_dict(self.geometry)
        except (GeometryError, TypeError, ValueError) as exc:
            raise ConfigError(f"geometry: {exc}") from None
        sphere = self.geometry_config.kind == "perfect_sphere"
        if self.keep is None:
            self.keep = "truth" if sphere else "candidates"
        if self.truth_analysis is None:
            self.truth_analysis = sphere
        if self.forced_chain is not None and not sphere:
            raise ConfigError("options/forced_chain: only available for the perfect_sphere geometry")
        if self.force_scd_interaction and not self.geometry_config.has_scd:
            raise ConfigError("options/force_scd_interaction: geometry has no scatter detector")
        if not sphere and not self.truth_analysis and self.keep == "truth":
            raise ConfigError("options/keep: 'truth' drops the hits needed for reconstruction")
        self.frames = tuple(self.frames)
        self.samples = tuple(self.samples)
        if not self.output_dir:
            self.output_dir = os.environ.get(OUTPUT_DIR_ENV, "tcsim_out")

    # -- (de)serialisation

    @classmethod
    def from_dict(cls, d: dict, validate: bool = True) -> "RunConfig":
        if validate:
            try:
                validate_document(d, "config")
            except SchemaMismatchError as exc:
                raise ConfigError(str(exc)) from None
        opts = d.get("options", {})
        streams = StreamOptions(**opts.get("streams", {}))
        res = ResolutionConfig(**d.get("resolution", {}))
        cut_kw = dict(d.get("cuts", {}))
        for key in ("theta_window_deg", "theta_ics_edges_deg"):
            if key in cut_kw:
                cut_kw[key] = tuple(float(x) for x in cut_kw[key])
        geometry = d["geometry"]
        has_scd = geometry_from_dict(geometry).has_scd if _geometry_ok(geometry) else True
        cut_kw.setdefault("require_scd", has_scd)
        try:
            cuts = SelectionCuts(resolution=res, **cut_kw)
        except AnalysisError as exc:
            raise ConfigError(f"cuts: {exc}") from None
        return cls(
            mode=d["mode"], geometry=geometry, n_events=int(d["n_events"]), seed=int(d["seed"]),
            workers=int(d.get("workers", 1)), chunk_size=int(d.get("chunk_size", DEFAULT_CHUNK)),
            output_dir=d.get("output_dir", ""), backend=d.get("backend"),
            materials=dict(d.get("materials", {})),
            force_scd_interaction=bool(opts.get("force_scd_interaction", False)),
            forced_chain=opts.get("forced_chain"), isotropic=bool(opts.get("isotropic", False)),
            keep=opts.get("keep"), truth_analysis=opts.get("truth_analysis"),
            frames=tuple(opts.get("frames", ("lab",))), samples=tuple(opts.get("samples", ("all", "TCS"))),
            streams=streams, plots=bool(opts.get("plots", True)), cuts=cuts, resolution=res,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        cuts = asdict(self.cuts)
        cuts.pop("resolution")
        cuts["theta_window_deg"] = list(cuts["theta_window_deg"])
        cuts["theta_ics_edges_deg"] = list(cuts["theta_ics_edges_deg"])
        return {
            "mode": self.mode, "geometry": self.geometry, "n_events": self.n_events, "seed": self.seed,
            "workers": self.workers, "chunk_size": self.chunk_size, "output_dir": self.output_dir,
            "backend": self.backend, "materials": dict(self.materials),
            "options": {
                "force_scd_interaction": self.force_scd_interaction, "forced_chain": self.forced_chain,
                "isotropic": self.isotropic, "keep": self.keep, "truth_analysis": self.truth_analysis,
                "frames": list(self.frames), "samples": list(self.samples),
                "streams": asdict(self.streams), "plots": self.plots,
            },
            "cuts": cuts,
            "resolution": asdict(self.resolution),
        }

    def physics_dict(self) -> dict:
        """The settings that determine the numbers (no worker count, paths or backend)."""
        d = self.to_dict()
        for key in ("workers", "output_dir", "backend"):
            d.pop(key)
        d["options"].pop("plots")
        d["options"].pop("streams")
        d["materials"] = {k: _file_digest(v) for k, v in sorted(self.materials.items())}
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.physics_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @property
    def n_chunks(self) -> int:
        return -(-self.n_events // self.chunk_size)

    def transport_options(self) -> TransportOptions:
        edges = self.cuts.theta_ics_edges_deg
        return TransportOptions(self.force_scd_interaction, self.forced_chain,
                                tuple(self.cuts.theta_window_deg), (float(edges[0]), float(edges[-1])),
                                self.isotropic)

    def material_tables(self) -> dict:
        out = {}
        for name in self.geometry_config.materials:
            path = self.materials.get(name)
            out[name] = load_material_table(path, name) if path else builtin_material(name)
        return out

    def kernel_params(self) -> KernelParams:
        sphere = self.geometry_config.kind == "perfect_sphere"
        return KernelParams.build(self.seed, self.mode, self.geometry_config, self.material_tables(),
                                  self.transport_options(), None if sphere else self.resolution, self.keep)


def _geometry_ok(g) -> bool:
    try:
        geometry_from_dict(g)
    except Exception:
        return False
    return True


def _file_digest(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise OSError(f"cannot read material table {path}: {exc.strerror or exc}") from exc


# --- stream encoding ------------------------------------------------------------------

def _num(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def _unnum(x) -> float:
    return math.nan if x is None else float(x)


def _dumps(d) -> str:
    return json.dumps(d, separators=(",", ":"), allow_nan=False)


def _group_bounds(keys: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.searchsorted(values, keys, side="left"), np.searchsorted(values, keys, side="right")


def encode_digitized(events: np.ndarray, hits: np.ndarray) -> str:
    """One JSON line per kept event, hits in digitization order per module."""
    lo, hi = _group_bounds(events["event"], hits["event"])
    lines = []
    for i, ev in enumerate(events):
        mods = {VOL_SCD: [], VOL_DM0: [], VOL_DM1: []}
        for h in hits[lo[i]:hi[i]]:
            mods[int(h["volume"])].append({"pixel": int(h["pixel"]), "energy_keV": float(h["energy"]),
                                           "u": float(h["u"]), "v": float(h["v"])})
        scd = mods[VOL_SCD]
        lines.append(_dumps({
            "schema_version": SCHEMA_VERSION,
            "event": int(ev["event"]), "weight": float(ev["weight"]), "label": LABEL_NAMES[int(ev["label"])],
            "truth": {name: _num(ev[col]) for name, col in TRUTH_FIELDS},
            "scd": scd[0] if scd else None, "dm0": mods[VOL_DM0], "dm1": mods[VOL_DM1],
        }))
    return "".join(line + "\n" for line in lines)


def encode_truth(events: np.ndarray, records: np.ndarray) -> str:
    lo, hi = _group_bounds(events["event"], records["event"])
    lines = []
    for i, ev in enumerate(events):
        recs = []
        for r in records[lo[i]:hi[i]]:
            pol = (r["pol_x"], r["pol_y"], r["pol_z"])
            recs.append({
                "seq": int(r["seq"]), "photon": int(r["photon"]), "level": int(r["level"]),
                "volume": VOLUME_NAMES[int(r["volume"])], "pixel": int(r["pixel"]),
                "kind": KIND_NAMES[int(r["kind"])], "edep_keV": float(r["edep"]),
                "position_mm": [float(r["x"]), float(r["y"]), float(r["z"])],
                "theta": _num(r["theta"]), "phi_lab": _num(r["phi_lab"]), "phi_photon": _num(r["phi_photon"]),
                "role": ROLE_NAMES[int(r["role"])],
                "pol": None if not math.isfinite(float(pol[0])) else [float(p) for p in pol],
            })
        lines.append(_dumps({
            "schema_version": SCHEMA_VERSION,
            "event": int(ev["event"]), "weight": float(ev["weight"]), "label": LABEL_NAMES[int(ev["label"])],
            "escaped": [bool(ev["escaped1"]), bool(ev["escaped2"])],
            "escape_energy_keV": [float(ev["esc_e1"]), float(ev["esc_e2"])],
            "degenerate_transports": int(ev["degenerate"]), "records": recs,
        }))
    return "".join(line + "\n" for line in lines)


def decode_digitized(lines) -> dict:
    """Rebuild kernel-style ``events``/``hits`` arrays from parsed digitized lines."""
    evs = np.zeros(len(lines), EVENT_DTYPE)
    hit_rows = []
    for i, d in enumerate(lines):
        row = evs[i]
        row["event"] = d["event"]
        row["weight"] = d["weight"]
        row["label"] = LABEL_CODES[d["label"]]
        t = d["truth"]
        for name, col in TRUTH_FIELDS:
            row[col] = _unnum(t[name])
        for vol, key in ((VOL_SCD, "scd"), (VOL_DM0, "dm0"), (VOL_DM1, "dm1")):
            hs = d[key]
            if key == "scd":
                hs = [] if hs is None else [hs]
            for h in hs:
                hit_rows.append((d["event"], h["energy_keV"], h["u"], h["v"], h["pixel"], vol))
    hits = np.zeros(len(hit_rows), HIT_DTYPE)
    if hit_rows:
        hits[:] = hit_rows
    # the kernel emits the SCD hit first only when it was digitized first;
    # reconstruction does not depend on the order across modules
    return {"events": evs, "hits": hits}


def _open_write(path: Path, compress: bool):
    raw = open(path, "wb")
    if compress:
        return raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0)
    return raw, raw


def _open_read(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8")
    return open(path, encoding="utf-8")


class StreamWriter:
    """Header line plus chunks of event lines; tracks a digest of the stored bytes."""

    def __init__(self, path: Path, header: dict, compress: bool):
        self.path = path
        self.raw, self.fh = _open_write(path, compress)
        self.count = 0
        self.write(_dumps(header) + "\n", 0)

    def write(self, text: str, n: int) -> None:
        self.fh.write(text.encode("utf-8"))
        self.count += n

    def close(self) -> dict:
        if self.fh is not self.raw:
            self.fh.close()
        self.raw.close()
        digest = hashlib.sha256(self.path.read_bytes()).hexdigest()
        return {"path": self.path.name, "sha256": digest, "events": self.count}


# --- chunk processing ----------------------------------------------------------------

@dataclass
class ChunkResult:
    index: int
    selection: Selection
    counts: dict
    truth_text: str = ""
    digitized_text: str = ""
    n_kept: int = 0


def analyse_batch(batch: dict, cfg: RunConfig) -> tuple[Selection, dict]:
    """Selection and rejection counts for one chunk of kernel output."""
    if cfg.truth_analysis:
        sel = select_truth(batch["events"], cfg.cuts)
        counts = {"accepted": len(sel), "theta_window": len(batch["events"]) - len(sel)}
        return sel, counts
    return reconstruct_arrays(batch["events"], batch["hits"], cfg.cuts)


_WORKER: dict = {}


def _init_worker(cfg_dict: dict) -> None:
    cfg = RunConfig.from_dict(cfg_dict, validate=False)
    _WORKER["cfg"] = cfg
    _WORKER["params"] = cfg.kernel_params()


def _run_chunk(index: int) -> ChunkResult:
    cfg = _WORKER["cfg"]
    params = _WORKER["params"]
    start = index * cfg.chunk_size
    count = min(cfg.chunk_size, cfg.n_events - start)
    batch = get_backend(cfg.backend).simulate_batch(params, start, count)
    sel, counts = analyse_batch(batch, cfg)
    out = ChunkResult(index, sel, counts, n_kept=len(batch["events"]))
    if cfg.streams.truth:
        out.truth_text = encode_truth(batch["events"], batch["records"])
    if cfg.streams.digitized:
        out.digitized_text = encode_digitized(batch["events"], batch["hits"])
    return out


def iter_chunks(cfg: RunConfig):
    """Simulate all chunks and yield their results in chunk order."""
    cfg_dict = cfg.to_dict()
    if cfg.workers == 1 or cfg.n_chunks == 1:
        _init_worker(cfg_dict)
        for i in range(cfg.n_chunks):
            yield _run_chunk(i)
        return
    import multiprocessing as mp

    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else None
    with ProcessPoolExecutor(max_workers=cfg.workers, mp_context=ctx, initializer=_init_worker,
                             initargs=(cfg_dict,)) as pool:
        yield from pool.map(_run_chunk, range(cfg.n_chunks))


# --- accumulation and reporting --------------------------------------------------------------

class Accumulator:
    """Merges chunk selections into histograms (and, for mixing, selections)."""

    def __init__(self, cuts: SelectionCuts, frames=("lab",), samples=("all", "TCS")):
        self.cuts = cuts
        self.frames = tuple(frames)
        self.samples = tuple(samples)
        for f in self.frames:
            if f not in FRAMES:
                raise AnalysisError(f"unknown frame {f!r}")
        for s in self.samples:
            if s not in SAMPLES:
                raise AnalysisError(f"unknown sample {s!r}")
        self.real = {(f, s): Hist2D.for_cuts(cuts) for f in self.frames for s in self.samples}
        self.tcs = TcsFraction.zeros(len(cuts.theta_ics_edges) - 1)
        self.labels_known = True
        self.counts: dict = {}
        self.parts: list = []
        self.n_selected = 0
        self.sum_w = 0.0

    def add(self, sel: Selection, counts: dict) -> None:
        for k, v in counts.items():
            self.counts[k] = self.counts.get(k, 0) + int(v)
        if len(sel) == 0:
            return
        self.n_selected += len(sel)
        self.sum_w += float(sel.weight.sum())
        known = bool((sel.label >= 0).all())
        self.labels_known &= known
        if known:
            self.tcs.fill(sel, self.cuts.theta_ics_edges)
        for (f, s), h in self.real.items():
            if s == "TCS" and not known:
                continue
            self.real[(f, s)] = h + build_histograms(sel.for_sample(s), self.cuts, f)
        if self.cuts.mixing:
            self.parts.append(sel)

    def selection(self) -> Selection:
        return Selection.concat(self.parts)

    def mixed(self, frame: str, sample: str) -> Hist2D | None:
        if not self.cuts.mixing:
            return None
        sub = self.selection().for_sample(sample)
        return mix_events(sub, self.cuts, np.random.default_rng(self.cuts.mixing_seed), frame)

    def series(self, mode: str) -> tuple[list[RSeries], dict]:
        out, mixed = [], {}
        tcs = self.tcs if self.labels_known and self.n_selected else None
        for (f, s), real in self.real.items():
            if s == "TCS" and not self.labels_known:
                log.warning("TCS sample skipped: stream lacks truth labels")
                continue
            m = self.mixed(f, s)
            mixed[(f, s)] = m
            out.append(series_from_histograms(real, m, tcs, mode, f, s))
        return out, mixed


def _cuts_dict(cuts: SelectionCuts) -> dict:
    d = asdict(cuts)
    d["theta_window_deg"] = list(d["theta_window_deg"])
    d["theta_ics_edges_deg"] = list(d["theta_ics_edges_deg"])
    return d


def build_report(cfg: RunConfig, acc: Accumulator) -> tuple[dict, dict]:
    series, mixed = acc.series(cfg.mode)
    counts = {k: acc.counts[k] for k in sorted(acc.counts)}
    report = {
        "schema_version": SCHEMA_VERSION, "kind": "tcsim.report", "mode": cfg.mode,
        "geometry": cfg.geometry, "config_hash": cfg.config_hash, "seed": cfg.seed,
        "n_events": cfg.n_events, "chunk_size": cfg.chunk_size, "truth_analysis": bool(cfg.truth_analysis),
        "selection": {"counts": counts, "n_selected": acc.n_selected, "sum_w": acc.sum_w},
        "cuts": _cuts_dict(cfg.cuts),
        "series": [s.to_dict() for s in series],
    }
    return report, mixed


def write_json(path: Path, doc: dict) -> None:
    text = json.dumps(doc, indent=2, sort_keys=False, allow_nan=False) + "\n"
    path.write_text(text, encoding="utf-8")


def _fmt(x: float) -> str:
    return repr(float(x))


def write_histogram_csv(path: Path, h: Hist2D) -> None:
    """Rows of ``theta_ics_lo,theta_ics_hi,dphi_lo,dphi_hi,count,err``."""
    err = np.sqrt(h.sumw2)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["theta_ics_lo", "theta_ics_hi", "dphi_lo", "dphi_hi", "count", "err"])
        for i in range(h.shape[0]):
            for j in range(h.shape[1]):
                w.writerow([_fmt(h.theta_edges[i]), _fmt(h.theta_edges[i + 1]), _fmt(h.dphi_edges[j]),
                            _fmt(h.dphi_edges[j + 1]), _fmt(h.counts[i, j]), _fmt(err[i, j])])


def emit_analysis(cfg: RunConfig, acc: Accumulator, out: Path, stem: str = "report") -> dict:
    """Write report JSON, histogram CSVs and (best effort) plots; return the report."""
    report, mixed = build_report(cfg, acc)
    validate_document(report, "report")
    write_json(out / f"{stem}.json", report)
    for (f, s), h in acc.real.items():
        if s == "TCS" and not acc.labels_known:
            continue
        write_histogram_csv(out / f"hist_{f}_{s}.csv", h)
        m = mixed.get((f, s))
        if m is not None:
            write_histogram_csv(out / f"mixed_{f}_{s}.csv", m)
    if cfg.plots:
        from . import plots

        plots.safe_plot(plots.plot_report, report, acc, mixed, out)
    return report


# --- top-level operations ---------------------------------------------------------------------

@dataclass
class RunResult:
    output_dir: Path
    report: dict
    provenance: dict
    accumulator: Accumulator


def _header(cfg: RunConfig, kind: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind, "mode": cfg.mode, "config_hash": cfg.config_hash,
            "seed": cfg.seed, "n_events": cfg.n_events, "chunk_size": cfg.chunk_size}


def stream_paths(cfg: RunConfig, out: Path) -> dict:
    ext = ".ndjson.gz" if cfg.streams.compress else ".ndjson"
    return {"truth": out / f"truth{ext}", "digitized": out / f"digitized{ext}"}


def run_simulate(cfg: RunConfig) -> RunResult:
    """Simulate, write streams and provenance, and analyse in memory.

    Returns:
        RunResult with the report (also written as ``report.json``).
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = stream_paths(cfg, out)
    writers = {}
    if cfg.streams.truth:
        writers["truth"] = StreamWriter(paths["truth"], _header(cfg, "tcsim.truth"), cfg.streams.compress)
    if cfg.streams.digitized:
        writers["digitized"] = StreamWriter(paths["digitized"], _header(cfg, "tcsim.digitized"),
                                            cfg.streams.compress)
    acc = Accumulator(cfg.cuts, cfg.frames, cfg.samples)
    try:
        for res in iter_chunks(cfg):
            if "truth" in writers:
                writers["truth"].write(res.truth_text, res.n_kept)
            if "digitized" in writers:
                writers["digitized"].write(res.digitized_text, res.n_kept)
            acc.add(res.selection, res.counts)
    finally:
        streams = {name: w.close() for name, w in writers.items()}
    prov = {
        "schema_version": SCHEMA_VERSION, "kind": "tcsim.provenance", "config_hash": cfg.config_hash,
        "config": cfg.physics_dict(), "seed": cfg.seed, "tcsim_version": __version__,
        "backend": get_backend(cfg.backend).NAME, "workers": cfg.workers, "n_chunks": cfg.n_chunks,
        "python": platform.python_version(), "numpy": np.__version__, "streams": streams,
    }
    validate_document(prov, "provenance")
    write_json(out / "provenance.json", prov)
    report = emit_analysis(cfg, acc, out)
    return RunResult(out, report, prov, acc)


def read_stream(path, expect_kind: str = "tcsim.digitized"):
    """Yield (header, list of event dicts per chunk index) from an NDJSON stream.

    Raises:
        OSError: missing or unreadable file.
        SchemaMismatchError: wrong kind or schema_version, malformed lines.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"event stream not found: {path}")
    with _open_read(path) as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise SchemaMismatchError(f"{path}:1: header is not JSON") from None
        if not isinstance(header, dict) or header.get("schema_version") != SCHEMA_VERSION:
            got = header.get("schema_version") if isinstance(header, dict) else None
            raise SchemaMismatchError(f"{path}: schema_version {got!r} is not supported (expected {SCHEMA_VERSION!r})")
        if header.get("kind") != expect_kind:
            raise SchemaMismatchError(f"{path}: stream kind {header.get('kind')!r}, expected {expect_kind!r}")
        chunk = int(header["chunk_size"])
        cur, buf = None, []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                ci = int(d["event"]) // chunk
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise SchemaMismatchError(f"{path}:{lineno}: malformed event line") from None
            if d.get("schema_version") != SCHEMA_VERSION:
                raise SchemaMismatchError(f"{path}:{lineno}: schema_version {d.get('schema_version')!r} is not "
                                          f"supported (expected {SCHEMA_VERSION!r})")
            if cur is not None and ci != cur:
                yield header, cur, buf
                buf = []
            cur = ci
            buf.append(d)
        if buf:
            yield header, cur, buf


def run_analyze(cfg: RunConfig, stream_path, output_dir=None) -> dict:
    """Analyse a digitized stream with the configuration's cuts; write report artifacts."""
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    acc = Accumulator(cfg.cuts, cfg.frames, cfg.samples)
    header = None
    for header, _, lines in read_stream(stream_path):
        try:
            batch = decode_digitized(lines)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaMismatchError(f"{stream_path}: event line does not match schema "
                                      f"{SCHEMA_VERSION}: {exc!r}") from None
        sel, counts = analyse_batch(batch, cfg)
        acc.add(sel, counts)
    if header is None:
        for header, _, _ in read_stream(stream_path):
            pass
    return emit_analysis(cfg, acc, out)


def load_report(path, kind: str = "tcsim.report") -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"report not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaMismatchError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        got = doc.get("schema_version") if isinstance(doc, dict) else None
        raise SchemaMismatchError(f"{path}: schema_version {got!r} is not supported (expected {SCHEMA_VERSION!r})")
    validate_document(doc, "report" if kind == "tcsim.report" else "deconvolved")
    return doc


def report_series(report: dict, frame: str, sample: str) -> RSeries:
    for s in report["series"]:
        if s["frame"] == frame and s["sample"] == sample:
            return RSeries.from_dict(s)
    raise SchemaMismatchError(f"report has no ({frame}, {sample}) series")


def deconvolve_series(expt: RSeries, sim_all: RSeries, sim_tcs: RSeries) -> RSeries:
    """Bin-wise TCS deconvolution; bins missing from any input are omitted.

    Raises:
        BinningMismatchError: θ_ICS edges differ between the inputs.
    """
    for name, s in (("sim_all", sim_all), ("sim_tcs", sim_tcs)):
        if not np.array_equal(np.asarray(s.theta_edges, float), np.asarray(expt.theta_edges, float)):
            raise BinningMismatchError(f"{name} θ_ICS edges {s.theta_edges} differ from the experiment's "
                                       f"{expt.theta_edges}")
    pts = []
    for p in expt.points:
        a = sim_all.point_for(p.theta_lo)
        t = sim_tcs.point_for(p.theta_lo)
        if a is None or t is None or not math.isfinite(a.f_tcs) or a.f_tcs <= 0:
            continue
        sf = a.sigma_f_tcs if math.isfinite(a.sigma_f_tcs) else 0.0
        r, s = deconvolve_tcs((p.R, p.sigma_R), (a.R, a.sigma_R), (t.R, t.sigma_R), (a.f_tcs, sf))
        q = copy.copy(p)
        q.R, q.sigma_R = r, s
        q.R_raw, q.sigma_R_raw = p.R, p.sigma_R
        q.f_tcs, q.sigma_f_tcs = a.f_tcs, sf
        pts.append(q)
    return RSeries("deconvolved", expt.frame, "TCS", list(expt.theta_edges), pts)


def run_deconvolve(expt_path, sim_all_path, sim_tcs_path, output_dir, frame: str = "lab",
                   plots: bool = True) -> dict:
    """Deconvolve the experiment's "all" series with the simulation's all/TCS series."""
    expt = load_report(expt_path)
    sim_all = load_report(sim_all_path)
    sim_tcs = load_report(sim_tcs_path)
    series = deconvolve_series(report_series(expt, frame, "all"), report_series(sim_all, frame, "all"),
                               report_series(sim_tcs, frame, "TCS"))
    doc = {"schema_version": SCHEMA_VERSION, "kind": "tcsim.deconvolved", "frame": frame,
           "inputs": {"expt": str(expt_path), "sim_all": str(sim_all_path), "sim_tcs": str(sim_tcs_path)},
           "series": series.to_dict()}
    validate_document(doc, "deconvolved")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "deconvolved.json", doc)
    if plots:
        from . import plots as P

        P.safe_plot(P.plot_r_series, [report_series(expt, frame, "all"), series], out / "deconvolved.svg",
                    "Deconvolved R")
    return doc


# --- cross-section tables ---------------------------------------------------------------------

XSEC_COLUMNS = ["k1_keV", "k2p_keV", "theta1_deg", "theta2p_deg", "dphi_deg", "kn_unpolarized_1",
                "kn_polarized_1", "kn_total_1", "entangled_dcs", "r_analytic"]


def _grid_list(grid: dict, key: str, default):
    v = grid.get(key, default)
    if not isinstance(v, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ConfigError(f"grid/{key}: must be a list of numbers")
    return [float(x) for x in v]


def run_xsec_table(grid: dict, path) -> int:
    """Tabulate cross sections and R over the Cartesian product of the grid.

    Grid keys (lists): ``k1_keV`` [511], ``k2p_keV`` [511], ``theta1_deg``,
    ``theta2p_deg`` and ``dphi_deg`` [0, 90].  Any empty list gives a
    header-only file.  ``kn_polarized_1`` uses φ = Δφ for photon 1.

    Returns:
        number of data rows written.
    """
    from .cross_sections import EntangledDcsKinematics, entangled_dcs, kn_polarized, kn_total, kn_unpolarized, r_analytic

    if not isinstance(grid, dict):
        raise ConfigError("grid: top level must be an object")
    unknown = set(grid) - {"k1_keV", "k2p_keV", "theta1_deg", "theta2p_deg", "dphi_deg"}
    if unknown:
        raise ConfigError(f"grid: unknown keys {sorted(unknown)}")
    k1s = _grid_list(grid, "k1_keV", [511.0])
    k2s = _grid_list(grid, "k2p_keV", [511.0])
    t1s = _grid_list(grid, "theta1_deg", [])
    t2s = _grid_list(grid, "theta2p_deg", [])
    dps = _grid_list(grid, "dphi_deg", [0.0, 90.0])
    for name, vals, lo, hi in (("k1_keV", k1s, 0, math.inf), ("k2p_keV", k2s, 0, math.inf),
                               ("theta1_deg", t1s, 0, 180), ("theta2p_deg", t2s, 0, 180)):
        for x in vals:
            if not (lo <= x <= hi) or (lo == 0 and hi == math.inf and x <= 0):
                raise ConfigError(f"grid/{name}: value {x} out of range")
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(XSEC_COLUMNS)
        for k1 in k1s:
            for k2 in k2s:
                for t1 in t1s:
                    for t2 in t2s:
                        a, b = math.radians(t1), math.radians(t2)
                        try:
                            r = r_analytic(a, b, k1, k2)
                        except (ZeroDivisionError, ValueError):
                            r = math.nan
                        for dp in dps:
                            e = entangled_dcs(EntangledDcsKinematics(k1, k2, a, b, math.radians(dp)))
                            w.writerow([_fmt(k1), _fmt(k2), _fmt(t1), _fmt(t2), _fmt(dp),
                                        _fmt(kn_unpolarized(k1, a)), _fmt(kn_polarized(k1, a, math.radians(dp))),
                                        _fmt(kn_total(k1)), _fmt(e), _fmt(r)])
                            n += 1
    return n
