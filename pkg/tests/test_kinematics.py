import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tcsim.kinematics import (
    azimuth_in_frame,
    compton_edge,
    compton_scattered_energy,
    cross,
    dot,
    norm,
    scatter_angle_from_deposit,
    scatter_direction,
    transport_polarization_frame,
    unit,
)

X = (1.0, 0.0, 0.0)
Y = (0.0, 1.0, 0.0)
Z = (0.0, 0.0, 1.0)
R2 = math.sqrt(0.5)

thetas = st.floats(0.0, math.pi, allow_nan=False)
energies = st.floats(1.0, 2000.0, allow_nan=False)
unit_vectors = st.tuples(*[st.floats(-1, 1, allow_nan=False)] * 3).filter(lambda v: norm(v) > 0.1).map(unit)


def close(a, b, tol=1e-12):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


@pytest.mark.parametrize("k, theta, expected", [
    (511.0, 0.0, 511.0),
    (511.0, math.pi / 2, 255.5),
    (511.0, math.pi, 511.0 / 3.0),
])
def test_compton_scattered_energy_examples(k, theta, expected):
    assert compton_scattered_energy(k, theta) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("e_dep, k, expected", [
    (0.0, 511.0, 0.0),
    (255.5, 511.0, math.pi / 2),
    (511.0 * 2.0 / 3.0, 511.0, math.pi),
])
def test_scatter_angle_from_deposit_examples(e_dep, k, expected):
    assert scatter_angle_from_deposit(e_dep, k) == pytest.approx(expected, abs=1e-7)


@pytest.mark.parametrize("e_dep", [-1.0, 340.7, 600.0])
def test_scatter_angle_rejects_unphysical_deposits(e_dep):
    with pytest.raises(ValueError):
        scatter_angle_from_deposit(e_dep, 511.0)


@pytest.mark.parametrize("k, theta", [(0.0, 1.0), (-5.0, 1.0), (math.nan, 1.0), (511.0, -0.1), (511.0, 4.0)])
def test_compton_scattered_energy_domain(k, theta):
    with pytest.raises(ValueError):
        compton_scattered_energy(k, theta)


@given(energies, st.floats(1e-3, math.pi - 2e-3), st.floats(1e-4, 1e-3))
def test_scattered_energy_strictly_decreasing(k, theta, step):
    assert compton_scattered_energy(k, theta + step) < compton_scattered_energy(k, theta)


@given(energies, thetas)
def test_deposit_round_trip(k, theta):
    e_dep = k - compton_scattered_energy(k, theta)
    e_dep = min(e_dep, compton_edge(k))
    back = scatter_angle_from_deposit(e_dep, k)
    # the inverse is ill-conditioned at the end points; compare cosines there
    if 1e-3 < theta < math.pi - 1e-3:
        assert back == pytest.approx(theta, abs=1e-9)
    assert math.cos(back) == pytest.approx(math.cos(theta), abs=1e-9)


@pytest.mark.parametrize("pol, d, expected", [
    (X, Z, X),
    (X, (0.0, R2, R2), X),
    (X, (R2, 0.0, R2), (R2, 0.0, -R2)),
])
def test_transport_polarization_frame_examples(pol, d, expected):
    assert close(transport_polarization_frame(pol, d), expected, 1e-12)


def test_transport_polarization_frame_degenerate_is_counted():
    diag = {}
    out = transport_polarization_frame(X, X, diag)
    assert abs(dot(out, X)) < 1e-12 and abs(norm(out) - 1.0) < 1e-12
    assert sum(diag.values()) == 1


@given(unit_vectors, unit_vectors)
def test_transport_polarization_frame_properties(pol, d):
    if norm(cross(pol, d)) < 1e-6:
        return
    out = transport_polarization_frame(pol, d)
    assert abs(norm(out) - 1.0) < 1e-12
    assert abs(dot(out, d)) < 1e-9
    assert abs(dot(out, cross(d, pol))) < 1e-9  # coplanar with {d, pol}


@pytest.mark.parametrize("theta, phi, expected", [
    (0.0, 0.0, Z), (0.0, 1.234, Z), (math.pi / 2, 0.0, X), (math.pi / 2, math.pi / 2, Y),
])
def test_scatter_direction_examples(theta, phi, expected):
    assert close(scatter_direction(Z, X, theta, phi), expected, 1e-12)


@pytest.mark.parametrize("d, expected", [(X, 0.0), (Y, math.pi / 2)])
def test_azimuth_in_frame_examples(d, expected):
    assert azimuth_in_frame(Z, X, d) == pytest.approx(expected, abs=1e-12)


def _frame(d, ref_seed):
    ref = transport_polarization_frame(ref_seed, d)
    return ref


@given(unit_vectors, unit_vectors, st.floats(0.0, math.pi), st.floats(-math.pi, math.pi))
def test_scatter_direction_angle(d, seed_ref, theta, phi):
    if norm(cross(seed_ref, d)) < 1e-3:
        return
    ref = _frame(d, seed_ref)
    out = scatter_direction(d, ref, theta, phi)
    assert abs(norm(out) - 1.0) < 1e-12
    assert dot(out, d) == pytest.approx(math.cos(theta), abs=1e-12)


def test_azimuth_round_trip_1000_random():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        d = unit(tuple(rng.normal(size=3)))
        ref = transport_polarization_frame(unit(tuple(rng.normal(size=3))), d)
        theta = rng.uniform(0.05, math.pi - 0.05)
        phi = rng.uniform(-math.pi, math.pi)
        back = azimuth_in_frame(d, ref, scatter_direction(d, ref, theta, phi))
        worst = max(worst, abs(math.remainder(back - phi, 2 * math.pi)))
    assert worst < 1e-9


def test_scatter_direction_requires_perpendicular_frame():
    with pytest.raises(ValueError):
        scatter_direction(Z, (R2, 0.0, R2), 0.5, 0.0)
