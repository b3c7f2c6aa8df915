import csv
import gzip
import hashlib
import json
import math

import numpy as np
import pytest

from simruns import materials
from tcsim import analysis as A
from tcsim.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_SCHEMA, main
from tcsim.digitizer import ResolutionConfig
from tcsim.geometry import geometry_preset
from tcsim.kernel import BACKENDS, KernelParams, simulate_batch
from tcsim.runner import (
    RunConfig,
    load_report,
    read_stream,
    run_analyze,
    run_simulate,
    validate_document,
)
from tcsim.transport import TransportOptions

BASE = {"mode": "ent", "geometry": "back2back", "n_events": 400_000, "seed": 11, "chunk_size": 100_000,
        "options": {"force_scd_interaction": True, "frames": ["lab", "photon"], "plots": False}}


def write_config(path, **over):
    d = json.loads(json.dumps(BASE))
    opts = over.pop("options", {})
    d.update(over)
    d["options"].update(opts)
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """The same configuration simulated with one and with three workers."""
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for w in (1, 3):
        cfg = write_config(root / f"cfg{w}.json", workers=w, output_dir=str(root / f"w{w}"))
        assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
        out[w] = root / f"w{w}"
    out["cfg"] = root / "cfg1.json"
    return out


# --- kernel backends --------------------------------------------------------------------

@pytest.mark.skipif("cython" not in BACKENDS, reason="compiled backend not built")
@pytest.mark.parametrize("preset, opts, digitize, keep", [
    ("back2back", TransportOptions(force_scd_interaction=True), True, "candidates"),
    ("back2back", TransportOptions(), True, "hits"),
    ("perfect_sphere", TransportOptions(forced_chain="tcs", theta_window_deg=(80.0, 84.0)), False, "truth"),
    ("perfect_sphere", TransportOptions(), False, "truth"),
])
@pytest.mark.parametrize("mode", ["ent", "fd", "unpol", "separable"])
def test_backends_bit_identical(preset, opts, digitize, keep, mode):
    p = KernelParams.build(99, mode, geometry_preset(preset), materials(), opts,
                           ResolutionConfig() if digitize else None, keep)
    a = simulate_batch(p, 1000, 300, "python")
    b = simulate_batch(p, 1000, 300, "cython")
    for k in ("records", "events", "hits"):
        assert a[k].tobytes() == b[k].tobytes()


# --- simulate / analyze ---------------------------------------------------------------------

def test_worker_count_does_not_change_output(runs):
    for name in ("digitized.ndjson", "truth.ndjson", "report.json"):
        assert (runs[1] / name).read_bytes() == (runs[3] / name).read_bytes()
    p1 = json.loads((runs[1] / "provenance.json").read_text())
    p3 = json.loads((runs[3] / "provenance.json").read_text())
    assert p1["config_hash"] == p3["config_hash"] and p1["workers"] == 1 and p3["workers"] == 3


def test_emitted_documents_validate(runs):
    d = runs[1]
    report = json.loads((d / "report.json").read_text())
    validate_document(report, "report")
    prov = json.loads((d / "provenance.json").read_text())
    validate_document(prov, "provenance")
    assert report["config_hash"] == prov["config_hash"]
    assert RunConfig.load(runs["cfg"]).config_hash == prov["config_hash"]
    for kind in ("digitized", "truth"):
        lines = (d / f"{kind}.ndjson").read_text().splitlines()
        validate_document(json.loads(lines[0]), kind, "header")
        for line in lines[1:200]:
            validate_document(json.loads(line), kind, "event")
        assert prov["streams"][kind]["events"] == len(lines) - 1
        assert prov["streams"][kind]["sha256"] == hashlib.sha256((d / f"{kind}.ndjson").read_bytes()).hexdigest()


def test_histogram_csv_columns(runs):
    with open(runs[1] / "hist_lab_all.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["theta_ics_lo", "theta_ics_hi", "dphi_lo", "dphi_hi", "count", "err"]
    assert len(rows) == 8 * 24
    report = json.loads((runs[1] / "report.json").read_text())
    assert sum(float(r["count"]) for r in rows) == pytest.approx(report["selection"]["sum_w"])


def test_stream_analysis_reproduces_in_memory_report(runs, tmp_path):
    assert main(["analyze", "--config", str(runs["cfg"]), "--events", str(runs[1] / "digitized.ndjson"),
                 "--output-dir", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "report.json").read_bytes() == (runs[1] / "report.json").read_bytes()


def test_gzip_stream_is_deterministic(tmp_path):
    paths = []
    for i in range(2):
        cfg = write_config(tmp_path / f"c{i}.json", n_events=20_000, output_dir=str(tmp_path / f"o{i}"),
                           options={"streams": {"compress": True}})
        assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
        paths.append(tmp_path / f"o{i}" / "digitized.ndjson.gz")
    assert paths[0].read_bytes() == paths[1].read_bytes()
    with gzip.open(paths[0], "rt") as fh:
        assert json.loads(fh.readline())["kind"] == "tcsim.digitized"
    assert sum(1 for _ in read_stream(paths[0])) >= 1


def test_report_round_trip(runs, capsys):
    doc = load_report(runs[1] / "report.json")
    s = next(x for x in doc["series"] if x["frame"] == "lab" and x["sample"] == "all")
    assert A.RSeries.from_dict(s).to_dict() == s
    assert main(["report", str(runs[1] / "report.json")]) == EXIT_OK
    assert main(["report", "--schema", "report"]) == EXIT_OK
    assert "$id" in capsys.readouterr().out


# --- deconvolution ---------------------------------------------------------------------------

def _report_with(template: dict, sample: str, R: float, f_tcs: float = 1.0, edges=None) -> dict:
    """The template report with one synthetic lab-frame point in θ_ICS bin [10, 20)."""
    doc = json.loads(json.dumps(template))
    edges = edges or doc["cuts"]["theta_ics_edges_deg"]
    pt = {"theta_lo": 10.0, "theta_hi": 20.0, "R": R, "sigma_R": 0.1, "f_tcs": f_tcs, "sigma_f_tcs": 0.0}
    for s in doc["series"]:
        s["theta_edges_deg"] = edges
        s["points"] = [pt] if (s["frame"], s["sample"]) == ("lab", sample) else []
    return doc


@pytest.mark.parametrize("expt, sim_all, sim_tcs, f, expected", [
    (2.0, 2.0, 2.5, 0.8, 2.5), (1.8, 1.6, 2.2, 0.5, 2.6), (1.7, 1.3, 0.9, 1.0, 0.9 + 0.4)])
def test_deconvolve_command(runs, tmp_path, expt, sim_all, sim_tcs, f, expected):
    template = json.loads((runs[1] / "report.json").read_text())
    paths = {}
    for name, doc in (("expt", _report_with(template, "all", expt)),
                      ("all", _report_with(template, "all", sim_all, f)),
                      ("tcs", _report_with(template, "TCS", sim_tcs))):
        validate_document(doc, "report")
        paths[name] = tmp_path / f"{name}.json"
        paths[name].write_text(json.dumps(doc))
    assert main(["deconvolve", "--expt", str(paths["expt"]), "--sim-all", str(paths["all"]),
                 "--sim-tcs", str(paths["tcs"]), "--output-dir", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "deconvolved.json").read_text())
    validate_document(doc, "deconvolved")
    (p,) = doc["series"]["points"]
    assert p["R"] == pytest.approx(expected, abs=1e-12)
    assert p["R_raw"] == expt


def test_deconvolve_binning_mismatch_exit_4(runs, tmp_path):
    template = json.loads((runs[1] / "report.json").read_text())
    good = tmp_path / "good.json"
    good.write_text(json.dumps(_report_with(template, "all", 2.0, 0.8)))
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(_report_with(template, "TCS", 2.5, edges=[0.0, 10.0, 20.0, 40.0, 80.0])))
    assert main(["deconvolve", "--expt", str(good), "--sim-all", str(good), "--sim-tcs", str(bad),
                 "--output-dir", str(tmp_path)]) == EXIT_SCHEMA


# --- exit codes -----------------------------------------------------------------------------

def test_config_errors_exit_2(tmp_path):
    assert main(["simulate", "--config", str(write_config(tmp_path / "a.json", n_events=0))]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(write_config(tmp_path / "b.json", mode="bogus"))]) == EXIT_CONFIG
    (tmp_path / "c.json").write_text("{not json")
    assert main(["simulate", "--config", str(tmp_path / "c.json")]) == EXIT_CONFIG


def test_missing_files_exit_3(tmp_path):
    cfg = write_config(tmp_path / "a.json")
    assert main(["analyze", "--config", str(cfg), "--events", str(tmp_path / "missing.ndjson")]) == EXIT_IO
    assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == EXIT_IO


def test_stream_schema_mismatch_exit_4(runs, tmp_path):
    cfg = runs["cfg"]
    lines = (runs[1] / "digitized.ndjson").read_text().splitlines()
    header = json.loads(lines[0])
    bad = tmp_path / "old.ndjson"
    bad.write_text("\n".join([json.dumps(dict(header, schema_version="0.9"))] + lines[1:]) + "\n")
    assert main(["analyze", "--config", str(cfg), "--events", str(bad), "--output-dir", str(tmp_path)]) == EXIT_SCHEMA
    ev = json.loads(lines[1])
    ev["schema_version"] = "2.0"
    bad.write_text("\n".join([lines[0], json.dumps(ev)] + lines[2:]) + "\n")
    with pytest.raises(Exception, match=":2: schema_version '2.0'"):
        run_analyze(RunConfig.load(cfg), bad, tmp_path)
    assert main(["analyze", "--config", str(cfg), "--events", str(bad), "--output-dir", str(tmp_path)]) == EXIT_SCHEMA


# --- cross-section table -----------------------------------------------------------------------

def test_xsec_table(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"theta1_deg": [82.0, 90.0], "theta2p_deg": [90.0], "dphi_deg": [0.0, 90.0]}))
    out = tmp_path / "x.csv"
    assert main(["xsec", "--grid", str(grid), "--output", str(out)]) == EXIT_OK
    first = out.read_bytes()
    assert main(["xsec", "--grid", str(grid), "--output", str(out)]) == EXIT_OK
    assert out.read_bytes() == first
    rows = list(csv.DictReader(first.decode().splitlines()))
    assert len(rows) == 4
    r90 = [r for r in rows if float(r["theta1_deg"]) == 90.0]
    assert float(r90[0]["r_analytic"]) == pytest.approx(2.6, abs=1e-12)
    # the tabulated R equals the DCS ratio at Δφ = 90° and 0°
    assert float(r90[1]["entangled_dcs"]) / float(r90[0]["entangled_dcs"]) == pytest.approx(2.6, rel=1e-12)


def test_xsec_empty_grid(tmp_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"theta1_deg": [], "theta2p_deg": [90.0]}))
    out = tmp_path / "x.csv"
    assert main(["xsec", "--grid", str(grid), "--output", str(out)]) == EXIT_OK
    assert out.read_text().count("\n") == 1
    grid.write_text(json.dumps({"theta1_deg": [200.0], "theta2p_deg": [90.0]}))
    assert main(["xsec", "--grid", str(grid), "--output", str(out)]) == EXIT_CONFIG
