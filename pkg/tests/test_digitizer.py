import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from simruns import materials
from tcsim.digitizer import (
    FWHM_TO_SIGMA,
    DetectorEvent,
    PixelHit,
    ResolutionConfig,
    detector_event_from_dict,
    detector_event_to_dict,
    digitize,
    smear_energy,
    smear_sigma,
)
from tcsim.geometry import VOL_DM0, VOL_DM1, VOL_SCD, geometry_preset
from tcsim.pair_state import GAMMA1, GAMMA2
from tcsim.rng import STREAM_DIGITIZE, EventRng
from tcsim.transport import (
    KIND_COMPTON,
    KIND_PHOTO,
    LABEL_MS_BACKGROUND,
    InteractionRecord,
    TruthEvent,
    classify_truth,
    simulate_event,
)

Z = (0.0, 0.0, 1.0)
PERFECT = ResolutionConfig(0.0, 0.0, 0.0, 0.0)


def rec(seq, vol, pixel, e, pid=GAMMA2, kind=KIND_COMPTON):
    return InteractionRecord(seq, pid, 0, vol, pixel, kind, e, (0.0, 0.0, 40.0))


def test_sigma_example():
    assert smear_sigma(511.0, 0.122) == pytest.approx(0.122 * 511.0 / 2.35482, abs=1e-12)
    assert smear_sigma(511.0, 0.122) == pytest.approx(26.47, abs=0.005)
    assert FWHM_TO_SIGMA == 2.35482


def test_smearing_is_unbiased():
    rng = EventRng(1)
    n = 1_000_000
    x = np.array([smear_energy(255.5, 0.122, rng) for _ in range(n)])
    s = smear_sigma(255.5, 0.122)
    assert abs(x.mean() - 255.5) < 3 * s / math.sqrt(n)
    assert x.std() == pytest.approx(s, rel=0.01)


def test_zero_resolution_is_identity():
    rng = EventRng(2)
    assert smear_energy(123.456, 0.0, rng) == 123.456


def test_clamping_is_rare_above_50_kev():
    sigma = smear_sigma(50.0, 0.143)
    assert stats.norm.cdf(-50.0 / sigma) < 1e-6
    rng = EventRng(3)
    x = np.array([smear_energy(50.0, 0.143, rng) for _ in range(1_000_000)])
    assert x.min() >= 0.0
    assert np.count_nonzero(x == 0.0) == 0


def test_clamping_never_negative():
    rng = EventRng(4)
    assert min(smear_energy(1.0, 0.9, rng) for _ in range(100_000)) >= 0.0


def test_pixel_merge():
    ev = TruthEvent(0, 0, "ent", Z, records=[rec(0, VOL_DM0, 17, 200.0), rec(1, VOL_DM0, 17, 55.5, kind=KIND_PHOTO)])
    det = digitize(ev, ResolutionConfig(0.0, 0.0, 0.0, 7.0), EventRng(5))
    assert len(det.dm0) == 1 and det.dm0[0].energy == 255.5 and det.dm0[0].pixel == 17


def test_threshold_drops_small_deposits():
    ev = TruthEvent(0, 0, "ent", Z, records=[rec(0, VOL_DM1, 3, 5.0), rec(1, VOL_DM1, 60, 300.0)])
    det = digitize(ev, ResolutionConfig(0.0, 0.0, 0.0, 7.0), EventRng(6))
    assert [h.energy for h in det.dm1] == [300.0]


def test_empty_event():
    det = digitize(TruthEvent(0, 0, "ent", Z), ResolutionConfig(), EventRng(7))
    assert det.hits() == []


@given(st.lists(st.tuples(st.sampled_from([VOL_DM0, VOL_DM1, VOL_SCD]), st.integers(0, 255),
                          st.floats(0.01, 511.0)), max_size=12))
def test_perfect_digitization_conserves_energy(deps):
    recs = [rec(i, v, 0 if v == VOL_SCD else p, e) for i, (v, p, e) in enumerate(deps)]
    det = digitize(TruthEvent(0, 0, "ent", Z, records=recs), PERFECT, EventRng(8))
    assert sum(h.energy for h in det.hits()) == pytest.approx(sum(e for _, _, e in deps), rel=1e-12, abs=1e-9)
    assert len(det.hits()) == len({(r.volume, r.pixel) for r in recs})


def test_ms_background_loses_hits_to_merging():
    g, m = geometry_preset("back2back"), materials()
    seen = 0
    for i in range(5000):
        ev = simulate_event("unpol", g, m, EventRng(9, i), event_index=i)
        if classify_truth(ev) != LABEL_MS_BACKGROUND:
            continue
        det = digitize(ev, PERFECT, EventRng(9, i, STREAM_DIGITIZE), g)
        assert len(det.hits()) < len(ev.records)
        seen += 1
    assert seen > 20


def test_pixel_coordinates_and_round_trip():
    g = geometry_preset("back2back")
    ev = TruthEvent(3, 0, "ent", Z, weight=0.5,
                    records=[rec(0, VOL_DM0, 0, 100.0), rec(1, VOL_DM0, 255, 300.0), rec(2, VOL_SCD, 0, 60.0)])
    det = digitize(ev, PERFECT, EventRng(10), g)
    assert (det.dm0[0].u, det.dm0[0].v) == pytest.approx((-22.5, -22.5))
    assert (det.dm0[1].u, det.dm0[1].v) == pytest.approx((22.5, 22.5))
    assert det.scd.energy == 60.0
    back = detector_event_from_dict(detector_event_to_dict(det))
    assert back == det


@pytest.mark.parametrize("kw", [{"scd_fwhm_frac_at_511": -0.1}, {"dm0_sdh_fwhm_frac": 1.0}, {"threshold_keV": -1.0}])
def test_resolution_validation(kw):
    with pytest.raises(ValueError):
        ResolutionConfig(**kw)


def test_resolution_scaling():
    r = ResolutionConfig()
    assert r.fwhm(VOL_SCD, 511.0) == pytest.approx(0.122 * 511.0)
    assert r.fwhm(VOL_DM0, 127.75) == pytest.approx(0.124 * 511.0 / 2.0)
    assert r.fwhm(VOL_DM1, 511.0) == pytest.approx(0.143 * 511.0)
