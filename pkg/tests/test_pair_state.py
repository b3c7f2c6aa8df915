import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

import tcsim.pair_state as ps
from simruns import binned_r, fit_dphi, sphere_series
from tcsim.analysis import mean_r_analytic
from tcsim.geometry import geometry_preset
from tcsim.kinematics import cross, dot, norm
from tcsim.pair_state import (
    GAMMA1,
    GAMMA2,
    ROLE_FIRST,
    ROLE_FREE,
    ROLE_SECOND,
    Coherence,
    PairContractError,
    PairMode,
    analyzing_scatter,
    assign_scattered_polarization,
    create_annihilation_pair,
    intermediate_scatter,
    scatter_mu,
)
from tcsim.rng import EventRng
from tcsim.transport import simulate_event

from simruns import materials

Z = (0.0, 0.0, 1.0)
X = (1.0, 0.0, 0.0)
HALF_PI = math.pi / 2
UNIFORM = stats.uniform(-math.pi, 2 * math.pi).cdf


def lab_azimuth(ph):
    return math.atan2(ph.direction[1], ph.direction[0])


@pytest.mark.parametrize("mode", list(PairMode))
def test_pair_creation(mode):
    pair = create_annihilation_pair(mode, rng=EventRng(1))
    a, b = pair.photon_a, pair.photon_b
    assert a.energy_keV == 511.0 and b.energy_keV == 511.0
    assert all(abs(x + y) < 1e-12 for x, y in zip(a.direction, b.direction))
    if mode is PairMode.UNPOL:
        assert a.coherence is Coherence.UNPOLARIZED and b.coherence is Coherence.UNPOLARIZED
        assert a.pol_ref is None and b.pol_ref is None
    else:
        assert abs(dot(a.pol_ref, b.pol_ref)) < 1e-12
        assert abs(dot(a.pol_ref, a.direction)) < 1e-12
    assert pair.correlation_consumed == (mode in (PairMode.UNPOL, PairMode.SEPARABLE))


def test_mode_strings_are_lowercase():
    assert [m.value for m in PairMode] == ["ent", "fd", "unpol", "separable"]


def test_intermediate_scatter_theta_zero():
    pair = create_annihilation_pair("ent", rng=EventRng(2))
    before = pair.photon_b.direction
    intermediate_scatter(pair, GAMMA2, 0.0, EventRng(3))
    ph = pair.photon_b
    assert ph.energy_keV == 511.0
    assert all(abs(x - y) < 1e-12 for x, y in zip(ph.direction, before))
    assert not pair.correlation_consumed and ph.coherence is Coherence.ENTANGLED


def test_intermediate_scatter_energy_and_frame():
    pair = create_annihilation_pair("ent", rng=EventRng(2))
    intermediate_scatter(pair, GAMMA2, HALF_PI, EventRng(4))
    ph = pair.photon_b
    assert ph.energy_keV == pytest.approx(255.5, abs=1e-12)
    assert abs(dot(ph.pol_ref, ph.direction)) < 1e-9
    assert abs(norm(ph.pol_ref) - 1.0) < 1e-12


@pytest.mark.parametrize("mode", ["fd", "unpol", "separable"])
def test_intermediate_scatter_contract(mode):
    pair = create_annihilation_pair(mode, rng=EventRng(5))
    with pytest.raises(PairContractError):
        intermediate_scatter(pair, GAMMA2, 0.3, EventRng(6))


def test_intermediate_after_consumption_is_contract_violation():
    rng = EventRng(7)
    pair = create_annihilation_pair("ent", rng=rng)
    analyzing_scatter(pair, GAMMA1, 1.0, rng)
    analyzing_scatter(pair, GAMMA2, 1.0, rng)
    with pytest.raises(PairContractError):
        intermediate_scatter(pair, GAMMA2, 0.3, rng)


@pytest.mark.parametrize("mode", ["ent", "fd"])
def test_correlation_consumed_once(mode):
    rng = EventRng(8)
    pair = create_annihilation_pair(mode, rng=rng)
    assert scatter_mu(pair, GAMMA2, 0.1, rng).role == ROLE_FIRST
    with pytest.raises(PairContractError):
        scatter_mu(pair, GAMMA2, 0.1, rng)
    assert scatter_mu(pair, GAMMA1, 0.2, rng).role == ROLE_SECOND
    assert pair.correlation_consumed and pair.pending_first_scatter is None
    assert pair.photon_a.coherence is Coherence.SEPARABLE and pair.photon_b.coherence is Coherence.SEPARABLE
    assert scatter_mu(pair, GAMMA1, 0.3, rng).role == ROLE_FREE


@pytest.mark.parametrize("mode", ["ent", "fd"])
def test_one_conditional_draw_per_pair_in_transport(mode, monkeypatch):
    calls = []
    real = ps.dphi_conditional_mu
    monkeypatch.setattr(ps, "dphi_conditional_mu", lambda *a: calls.append(1) or real(*a))
    geom = geometry_preset("perfect_sphere")
    mats = materials()
    for i in range(300):
        n0 = len(calls)
        ev = simulate_event(mode, geom, mats, EventRng(9, i), event_index=i)
        roles = [r.role for r in ev.records]
        assert len(calls) - n0 == roles.count(ROLE_SECOND) <= 1


def test_unpolarized_azimuth_uniform():
    rng = EventRng(10)
    phis = []
    for _ in range(100_000):
        pair = create_annihilation_pair("unpol", rng=rng)
        phi, _ = analyzing_scatter(pair, GAMMA1, 1.2, rng)
        phis.append(phi)
    assert stats.kstest(phis, UNIFORM).pvalue > 0.01


def _python_pairs(mode, theta, n, seed):
    rng = EventRng(seed)
    out = np.empty(n)
    for i in range(n):
        pair = create_annihilation_pair(mode, rng=rng)
        analyzing_scatter(pair, GAMMA1, theta, rng)
        analyzing_scatter(pair, GAMMA2, theta, rng)
        out[i] = lab_azimuth(pair.photon_a) - lab_azimuth(pair.photon_b)
    return np.arctan2(np.sin(out), np.cos(out))


def test_ent_pairs_python_level():
    r, s = fit_dphi(_python_pairs("ent", HALF_PI, 200_000, 11))
    assert abs(r - binned_r(2.6)) < 3 * s


def test_ent_pairs_1e7():
    # narrow forced windows around 90°: the kernel runs the same pair-state logic
    ser = sphere_series("ent", "dcs", 10_000_000, window=(89.95, 90.05))
    p = ser.points[0]
    assert abs(p.R - binned_r(mean_r_analytic(89.95, 90.05))) < 3 * p.sigma_R
    assert abs(mean_r_analytic(89.95, 90.05) - 2.6) < 1e-4


def test_separable_pairs_81_7():
    p = sphere_series("separable", "dcs", 10_000_000, window=(81.65, 81.75)).points[0]
    assert p.R == pytest.approx(1.63, abs=0.05)


def test_fd_pure_dcs_matches_entangled():
    p = sphere_series("fd", "dcs", 2_000_000, window=(81.65, 81.75)).points[0]
    assert p.R == pytest.approx(2.85, abs=0.05)


def test_ent_zero_angle_ics_is_invisible():
    tcs = sphere_series("ent", "tcs", 10_000_000, ics_range=(0.0, 0.5)).points[0]
    dcs = sphere_series("ent", "dcs", 10_000_000).points[0]
    assert tcs.theta_lo == 0.0 and dcs.theta_lo == 0.0
    assert abs(tcs.R - dcs.R) < 3 * math.hypot(tcs.sigma_R, dcs.sigma_R)


def test_fano_transfer_keeps_polarization_for_forward_scatter():
    rng = EventRng(12)
    theta = 1e-3
    d = (math.sin(theta), 0.0, math.cos(theta))
    kp = 511.0 / (2.0 - math.cos(theta))
    hits = 0
    for _ in range(100_000):
        out = assign_scattered_polarization(X, Z, d, 511.0, kp, rng)
        hits += abs(dot(out, X)) > 0.99
    assert hits / 100_000 > 0.99


def test_fano_transfer_absent_polarization_uniform():
    rng = EventRng(13)
    az = []
    for _ in range(50_000):
        out = assign_scattered_polarization(None, Z, Z, 511.0, 400.0, rng)
        az.append(math.atan2(out[1], out[0]))
    assert stats.kstest(az, UNIFORM).pvalue > 0.01


unit3 = st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: norm(v) > 0.2).map(
    lambda v: tuple(x / norm(v) for x in v))


@given(unit3, unit3, st.floats(0.0, math.pi), st.integers(0, 2 ** 32))
def test_fano_transfer_output_perpendicular(pol_seed, d_out, theta, seed):
    if norm(cross(pol_seed, d_out)) < 1e-3:
        return
    kp = 511.0 / (2.0 - math.cos(theta))
    out = assign_scattered_polarization(pol_seed, Z, d_out, 511.0, kp, EventRng(seed))
    assert abs(dot(out, d_out)) < 1e-9 and abs(norm(out) - 1.0) < 1e-12


@given(st.sampled_from(list(PairMode)), st.lists(st.tuples(st.booleans(), st.floats(-1.0, 1.0)), min_size=1,
                                                 max_size=8), st.integers(0, 2 ** 32))
def test_energy_never_increases_and_angle_exact(mode, steps, seed):
    rng = EventRng(seed)
    pair = create_annihilation_pair(mode, rng=rng)
    for second, mu in steps:
        pid = GAMMA2 if second else GAMMA1
        ph = pair.photon(pid)
        if ph.awaiting_partner:
            pid = GAMMA1 if second else GAMMA2
            ph = pair.photon(pid)
        k, d = ph.energy_keV, ph.direction
        scatter_mu(pair, pid, mu, rng)
        assert ph.energy_keV <= k
        assert dot(ph.direction, d) == pytest.approx(mu, abs=1e-9)
