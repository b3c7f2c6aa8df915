import json
import math

import numpy as np
import pytest
from scipy import stats

from simruns import chi2_per_dof, materials
from tcsim.geometry import (
    VOL_DM0,
    VOL_DM1,
    VOL_SCD,
    VOL_SPHERE,
    Box,
    GeometryConfig,
    GeometryError,
    Sphere,
    geometry_from_dict,
    geometry_preset,
    ray_volume_intersection,
)
from tcsim.materials import MaterialTable, MaterialTableError, builtin_material, load_material_table
from tcsim.pair_state import GAMMA1, GAMMA2
from tcsim.rng import EventRng
from tcsim.transport import (
    KIND_COMPTON,
    KIND_PHOTO,
    LABEL_MS_BACKGROUND,
    LABEL_OTHER,
    LABEL_PURE_DCS,
    LABEL_PURE_TCS,
    InteractionRecord,
    TransportOptions,
    TruthEvent,
    classify_truth,
    next_interaction,
    propagate,
    simulate_event,
    truth_to_dict,
)
from tcsim.pair_state import Photon, Coherence

Z = (0.0, 0.0, 1.0)
ORIGIN = (0.0, 0.0, 0.0)


def write_table(path, rows):
    path.write_text("energy_keV,mu_pe_per_mm,mu_compton_per_mm\n" + "".join(f"{a},{b},{c}\n" for a, b, c in rows))
    return path


def constant_table(name, mu_pe, mu_c):
    return MaterialTable(name, [1.0, 2000.0], [mu_pe, mu_pe], [mu_c, mu_c])


def slab(vid, z0, z1, material, name="slab"):
    return Box(name, vid, (0.0, 0.0, 0.5 * (z0 + z1)), (1.0, 0, 0), (0, 1.0, 0), (0, 0, 1.0),
               (50.0, 50.0, 0.5 * (z1 - z0)), material)


# --- material tables -------------------------------------------------------------

def test_material_table_log_log_midpoint(tmp_path):
    t = load_material_table(write_table(tmp_path / "t.csv", [(100, 0.05, 0.05), (1000, 0.005, 0.005)]))
    assert t.mu_total(math.sqrt(100 * 1000)) == pytest.approx(0.0316, abs=5e-5)
    assert t.mu_total(316.23) == pytest.approx(math.sqrt(0.1 * 0.01), rel=1e-4)


def test_material_table_clamps_and_counts(tmp_path):
    t = load_material_table(write_table(tmp_path / "t.csv", [(100, 0.05, 0.05), (1000, 0.005, 0.005)]))
    assert t.mu(10.0) == (0.05, 0.05)
    assert t.diagnostics.get("clamped") == 1
    assert t.mu(5000.0) == (0.005, 0.005)
    assert t.diagnostics.get("clamped") == 2


@pytest.mark.parametrize("rows", [
    [(100, -0.1, 0.05), (1000, 0.005, 0.005)],
    [(100, 0.1, 0.05)],
    [(1000, 0.1, 0.05), (100, 0.005, 0.005)],
])
def test_material_table_load_errors(tmp_path, rows):
    with pytest.raises(MaterialTableError):
        load_material_table(write_table(tmp_path / "bad.csv", rows))


def test_material_table_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("e,mu\n100,0.1\n")
    with pytest.raises(MaterialTableError):
        load_material_table(p)


@pytest.mark.parametrize("name", ["lyso", "water"])
def test_builtin_tables(name):
    t = builtin_material(name)
    assert t.energy_keV[0] <= 7.0 and t.energy_keV[-1] >= 511.0
    assert t.mu_total(511.0) > 0


# --- geometry -------------------------------------------------------------------

def test_ray_box_on_axis():
    dm0 = geometry_preset("back2back").volume(VOL_DM0)
    assert ray_volume_intersection(ORIGIN, Z, dm0) == pytest.approx((38.0, 58.0), abs=1e-12)


def test_ray_box_miss():
    dm0 = geometry_preset("back2back").volume(VOL_DM0)
    assert ray_volume_intersection((100.0, 0.0, 0.0), Z, dm0) is None
    assert ray_volume_intersection(ORIGIN, (0.0, 0.0, -1.0), dm0) is None


def test_ray_sphere_from_centre():
    s = Sphere("s", VOL_SPHERE, ORIGIN, 200.0, "water")
    assert ray_volume_intersection(ORIGIN, Z, s) == pytest.approx((0.0, 200.0), abs=1e-12)


@pytest.mark.parametrize("name", ["back2back", "rotated28", "no_scd", "perfect_sphere"])
def test_presets(name):
    g = geometry_preset(name)
    assert geometry_from_dict(name).volumes == g.volumes
    assert g.has_scd == (name in ("back2back", "rotated28"))


def test_rotated_module_and_unknown_preset():
    g = geometry_preset("rotated28")
    assert math.degrees(math.acos(g.volume(VOL_DM0).w[2])) == pytest.approx(28.0)
    with pytest.raises(GeometryError):
        geometry_preset("nope")


def test_overlapping_volumes_rejected():
    with pytest.raises(GeometryError):
        GeometryConfig("apparatus", [slab(VOL_SCD, 0.0, 10.0, "lyso", "a"), slab(VOL_SPHERE, 5.0, 15.0, "lyso", "b")])


def test_pixel_geometry():
    dm0 = geometry_preset("back2back").volume(VOL_DM0)
    assert dm0.n_pixels == 256
    u, v = dm0.pixel_center(0)
    assert (u, v) == pytest.approx((-22.5, -22.5))
    assert dm0.pixel_of((u, v, 40.0)) == 0
    assert dm0.pixel_of((0.1, 0.1, 40.0)) == 8 * 16 + 8


# --- propagation ------------------------------------------------------------------

def test_interaction_depth_is_exponential():
    mu, length = 0.08, 20.0
    geom = GeometryConfig("apparatus", [slab(VOL_SCD, 10.0, 10.0 + length, "c")])
    mats = {"c": constant_table("c", 0.02, 0.06)}
    rng = EventRng(1)
    depths = []
    for _ in range(1_000_000):
        hit = next_interaction(ORIGIN, Z, 511.0, geom, mats, rng)
        if hit is not None:
            depths.append(hit[1][2] - 10.0)
    frac = len(depths) / 1_000_000
    assert frac == pytest.approx(1 - math.exp(-mu * length), abs=3e-3)
    assert chi2_per_dof(depths, lambda s: math.exp(-mu * s), 0.0, length) < 1.5


def test_no_photoabsorption_without_photo_cross_section():
    geom = GeometryConfig("apparatus", [slab(VOL_SCD, 10.0, 30.0, "c")])
    mats = {"c": constant_table("c", 0.0, 0.1)}
    rng = EventRng(2)
    ph = Photon(511.0, Z, None, Coherence.UNPOLARIZED, GAMMA2)
    kinds = [propagate(ph, ORIGIN, geom, mats, rng).get("kind") for _ in range(20_000)]
    assert KIND_PHOTO not in kinds and KIND_COMPTON in kinds


def test_no_interactions_in_vacuum_gap():
    a, b = slab(VOL_SCD, 10.0, 20.0, "c", "a"), slab(VOL_SPHERE, 40.0, 50.0, "c", "b")
    geom = GeometryConfig("apparatus", [b, a])
    mats = {"c": constant_table("c", 0.01, 0.05)}
    rng = EventRng(3)
    ph = Photon(511.0, Z, None, Coherence.UNPOLARIZED, GAMMA2)
    vols = set()
    for _ in range(20_000):
        r = propagate(ph, ORIGIN, geom, mats, rng)
        if not r["escaped"]:
            z = r["position"][2]
            assert 10.0 <= z <= 20.0 or 40.0 <= z <= 50.0
            vols.add(r["volume"])
    assert vols == {VOL_SCD, VOL_SPHERE}


def test_doubled_attenuation_halves_mean_free_path():
    big = GeometryConfig("perfect_sphere", [Sphere("s", VOL_SPHERE, ORIGIN, 1e6, "w")])
    w = builtin_material("water")
    w2 = MaterialTable("w", w.energy_keV, 2 * w.mu_pe, 2 * w.mu_compton)
    paths = []
    for mats in ({"w": w}, {"w": w2}):
        rng = EventRng(4)
        paths.append(np.mean([next_interaction(ORIGIN, Z, 511.0, big, mats, rng)[1][2] for _ in range(100_000)]))
    assert paths[1] / paths[0] == pytest.approx(0.5, rel=0.01)


# --- whole events ------------------------------------------------------------------

@pytest.fixture(scope="module")
def apparatus_events():
    g, m = geometry_preset("back2back"), materials()
    return g, [simulate_event("unpol", g, m, EventRng(5, i), event_index=i) for i in range(1000)]


def test_records_deposit_inside_volume(apparatus_events):
    g, events = apparatus_events
    n = 0
    for ev in events:
        for r in ev.records:
            assert r.energy_deposit > 0.0
            assert g.volume(r.volume).contains(r.position)
            n += 1
    assert n > 100


@pytest.mark.parametrize("mode", ["ent", "fd", "unpol", "separable"])
@pytest.mark.parametrize("preset", ["back2back", "perfect_sphere"])
def test_energy_conservation(mode, preset):
    g, m = geometry_preset(preset), materials()
    for i in range(300):
        ev = simulate_event(mode, g, m, EventRng(6, i), event_index=i)
        for pid in (GAMMA1, GAMMA2):
            total = ev.deposited(pid) + ev.escape_energy[pid]
            assert total == pytest.approx(511.0, abs=1e-6)
            assert ev.deposited(pid) <= 511.0 + 1e-6


def test_forced_scd_interaction_always_present():
    g, m = geometry_preset("back2back"), materials()
    opts = TransportOptions(force_scd_interaction=True)
    for i in range(1000):
        ev = simulate_event("ent", g, m, EventRng(7, i), opts, event_index=i)
        assert any(r.volume == VOL_SCD for r in ev.records)
        assert 0.0 < ev.weight < 1.0


def test_sphere_interactions_inside_radius():
    g, m = geometry_preset("perfect_sphere"), materials()
    r = g.volumes[0].radius
    for i in range(500):
        ev = simulate_event("ent", g, m, EventRng(8, i), event_index=i)
        assert all(math.sqrt(sum(x * x for x in rec.position)) <= r + 1e-7 for rec in ev.records)


def test_event_is_reproducible():
    g, m = geometry_preset("back2back"), materials()
    for i in range(50):
        a = simulate_event("ent", g, m, EventRng(9, i), event_index=i)
        b = simulate_event("ent", g, m, EventRng(9, i), event_index=i)
        assert json.dumps(truth_to_dict(a)) == json.dumps(truth_to_dict(b))


def test_scd_interaction_fraction():
    g, m = geometry_preset("back2back"), materials()
    scd = g.volume(VOL_SCD)
    t0, t1 = ray_volume_intersection(ORIGIN, Z, scd)
    expected = 1.0 - math.exp(-m["lyso"].mu_total(511.0) * (t1 - t0))
    n = 20_000
    hits = 0
    for i in range(n):
        ev = simulate_event("unpol", g, m, EventRng(10, i), event_index=i)
        first = next((r for r in ev.records if r.photon_id == GAMMA2), None)
        hits += first is not None and first.volume == VOL_SCD
    assert hits / n == pytest.approx(expected, rel=0.10)


# --- truth classification ------------------------------------------------------------

def rec(seq, pid, vol, pixel, kind, e=100.0):
    return InteractionRecord(seq, pid, 0, vol, pixel, kind, e, ORIGIN)


def truth(records):
    return TruthEvent(0, 0, "ent", Z, records=records)


TCS = [rec(0, GAMMA1, VOL_DM1, 10, KIND_COMPTON), rec(1, GAMMA1, VOL_DM1, 40, KIND_PHOTO),
       rec(2, GAMMA2, VOL_SCD, 0, KIND_COMPTON), rec(3, GAMMA2, VOL_DM0, 50, KIND_COMPTON),
       rec(4, GAMMA2, VOL_DM0, 90, KIND_PHOTO)]


def test_classify_pure_tcs():
    assert classify_truth(truth(TCS)) == LABEL_PURE_TCS


def test_classify_shared_pixel_is_ms_background():
    recs = TCS[:4] + [rec(4, GAMMA2, VOL_DM0, 50, KIND_PHOTO)]
    assert classify_truth(truth(recs)) == LABEL_MS_BACKGROUND


def test_classify_pure_dcs():
    assert classify_truth(truth(TCS[:2] + TCS[3:])) == LABEL_PURE_DCS


def test_classify_other():
    assert classify_truth(truth(TCS[:2])) == LABEL_OTHER
    assert classify_truth(truth([])) == LABEL_OTHER
    extra = TCS + [rec(5, GAMMA2, VOL_DM0, 120, KIND_COMPTON)]
    assert classify_truth(truth(extra)) == LABEL_OTHER
