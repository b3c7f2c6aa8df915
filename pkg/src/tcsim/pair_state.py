"""Coherence engine for the annihilation photon pair.

Four pair modes are supported:

``ent``
    Entanglement survives intermediate scatters (scatters flagged as
    intermediate by the caller, i.e. in the scatter detector).  Those only
    change energy and direction; the polarization reference is carried
    along without rotation.  The correlation is spent on the first
    analysing scatter of each photon.
``fd``
    Full decoherence: the very first scatter of each photon, wherever it
    happens, spends the correlation.
``separable``
    Perpendicular but separable polarizations, each photon analysed on its
    own with the polarized Klein-Nishina law.
``unpol``
    No polarization at all; every azimuth is uniform.

Correlated sampling: the first photon to analyse draws its azimuth and is
parked in ``pending_first_scatter``; the partner draws Delta-phi from the
entangled conditional density.  In ``ent`` mode the first azimuth is
uniform.  In ``fd`` mode it follows the polarized Klein-Nishina law about
the photon's (randomly oriented) polarization reference, so that
reference becomes the photon's actual polarization; averaged over pairs
the first azimuth is still uniform and the Delta-phi law is unchanged.
Once the correlation is spent each photon's outgoing polarization follows
from the two-channel Klein-Nishina transfer of its reference.

Azimuths used for the correlation are "oriented": both photons are viewed
about the gamma-2 travel direction, with gamma-1's reference its
polarization vector and gamma-2's reference the polarization rotated by
90 degrees.  For a back-to-back pair both references then lie on the same
line and the oriented azimuths are lab azimuths (modulo pi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

from .cross_sections import dphi_conditional_mu, phi_polarized_mu
from .kinematics import (
    TWO_PI,
    X_HAT,
    Z_HAT,
    Vec3,
    any_perpendicular,
    cross,
    dot,
    reject_onto_plane,
    scatter_direction_mu,
    scattered_energy_mu,
    wrap_angle,
)

GAMMA1 = 1
GAMMA2 = 2

ROLE_NONE = 0
ROLE_INTERMEDIATE = 1
ROLE_FIRST = 2
ROLE_SECOND = 3
ROLE_FREE = 4

HALF_PI = 0.5 * math.pi


class PairMode(str, Enum):
    ENT = "ent"
    FD = "fd"
    UNPOL = "unpol"
    SEPARABLE = "separable"


MODE_CODES = {PairMode.ENT: 0, PairMode.FD: 1, PairMode.UNPOL: 2, PairMode.SEPARABLE: 3}


class Coherence(str, Enum):
    ENTANGLED = "entangled"
    SEPARABLE = "separable"
    UNPOLARIZED = "unpolarized"


class PairContractError(RuntimeError):
    """The pair state was driven in an order its mode does not allow."""


@dataclass
class Photon:
    energy_keV: float
    direction: Vec3
    pol_ref: Vec3 | None
    coherence: Coherence
    photon_id: int
    level: int = 0
    # geometric azimuth reference carried along the path (photon-frame analysis)
    frame_ref: Vec3 = X_HAT
    awaiting_partner: bool = False

    def __post_init__(self):
        if self.coherence is Coherence.UNPOLARIZED and self.pol_ref is not None:
            raise ValueError("unpolarized photon cannot carry a polarization reference")


@dataclass
class PendingScatter:
    photon_id: int
    mu: float
    k_before: float
    k_after: float
    dir_before: Vec3
    dir_after: Vec3
    pol_before: Vec3
    phi_oriented: float


@dataclass
class ScatterOutcome:
    phi: float          # local azimuth, measured from the reference actually used
    role: int
    phi_photon: float   # oriented azimuth from the transported geometric frame
    pol_before: Vec3 | None


@dataclass
class PairState:
    photon_a: Photon
    photon_b: Photon
    mode: PairMode
    correlation_consumed: bool
    pending_first_scatter: PendingScatter | None = None
    degenerate_transports: int = 0

    def photon(self, photon_id: int) -> Photon:
        return self.photon_a if photon_id == GAMMA1 else self.photon_b

    def partner(self, photon_id: int) -> Photon:
        return self.photon_b if photon_id == GAMMA1 else self.photon_a


# --- orientation helpers -----------------------------------------------------

def local_to_oriented(photon_id: int, phi_local: float) -> float:
    if photon_id == GAMMA1:
        return wrap_angle(-phi_local)
    return wrap_angle(phi_local - HALF_PI)


def oriented_to_local(photon_id: int, phi_oriented: float) -> float:
    if photon_id == GAMMA1:
        return wrap_angle(-phi_oriented)
    return wrap_angle(phi_oriented + HALF_PI)


def photon_frame_azimuth(photon_id: int, d_old: Vec3, frame_ref: Vec3, d_new: Vec3) -> float:
    """Azimuth of ``d_new`` about ``d_old`` in the transported geometric frame.

    Both photons start from the same lab reference, so only gamma 1's
    handedness is flipped; for unscattered photons this is the lab azimuth.
    """
    e2 = cross(d_old, frame_ref)
    phi = math.atan2(dot(d_new, e2), dot(d_new, frame_ref))
    if photon_id == GAMMA1:
        return wrap_angle(-phi)
    return wrap_angle(phi)


# --- pair creation -------------------------------------------------------------

def create_annihilation_pair(mode: PairMode, axis: Vec3 = Z_HAT, rng=None) -> PairState:
    """Two 511 keV photons along -axis (gamma 1) and +axis (gamma 2).

    Polarization references are mutually perpendicular with a uniformly
    random azimuth about the axis; for ``ent``/``fd`` they are only frame
    bookkeeping until the correlation is spent.
    """
    mode = PairMode(mode)
    psi = TWO_PI * rng.random() - math.pi
    b1 = any_perpendicular(axis)
    b2 = cross(axis, b1)
    c = math.cos(psi)
    s = math.sin(psi)
    e1 = (c * b1[0] + s * b2[0], c * b1[1] + s * b2[1], c * b1[2] + s * b2[2])
    e2 = cross(axis, e1)
    back = (-axis[0], -axis[1], -axis[2])
    if mode is PairMode.UNPOL:
        coh, p1, p2, consumed = Coherence.UNPOLARIZED, None, None, True
    elif mode is PairMode.SEPARABLE:
        coh, p1, p2, consumed = Coherence.SEPARABLE, e1, e2, True
    else:
        coh, p1, p2, consumed = Coherence.ENTANGLED, e1, e2, False
    g1 = Photon(511.0, back, p1, coh, GAMMA1, frame_ref=b1)
    g2 = Photon(511.0, tuple(axis), p2, coh, GAMMA2, frame_ref=b1)
    return PairState(g1, g2, mode, consumed)


# --- polarization transfer -------------------------------------------------------

def assign_scattered_polarization(pol_in: Vec3 | None, dir_in: Vec3, dir_out: Vec3,
                                  k: float, kp: float, rng) -> Vec3:
    """Outgoing linear polarization after a Compton scatter.

    Picks between the transported incident polarization and its
    perpendicular with weights (k'/k + k/k' - 2) + 4 cos^2(angle to pol_in).
    """
    if pol_in is None:
        psi = TWO_PI * rng.random() - math.pi
        b1 = any_perpendicular(dir_out)
        b2 = cross(dir_out, b1)
        c = math.cos(psi)
        s = math.sin(psi)
        return (c * b1[0] + s * b2[0], c * b1[1] + s * b2[1], c * b1[2] + s * b2[2])
    c_par, _ = reject_onto_plane(pol_in, dir_out)
    c_perp = cross(dir_out, c_par)
    cp = dot(c_par, pol_in)
    cq = dot(c_perp, pol_in)
    base = kp / k + k / kp - 2.0
    w1 = base + 4.0 * cp * cp
    w2 = base + 4.0 * cq * cq
    if rng.random() * (w1 + w2) < w1:
        return c_par
    return c_perp


# --- scatters ---------------------------------------------------------------------

def _transport(pair: PairState, v: Vec3, d: Vec3) -> Vec3:
    out, degenerate = reject_onto_plane(v, d)
    if degenerate:
        pair.degenerate_transports += 1
    return out


def _apply(pair: PairState, ph: Photon, mu: float, phi_local: float, ref: Vec3):
    k = ph.energy_keV
    kp = scattered_energy_mu(k, mu)
    d_old = ph.direction
    d_new = scatter_direction_mu(d_old, ref, mu, phi_local)
    phi_ph = photon_frame_azimuth(ph.photon_id, d_old, ph.frame_ref, d_new)
    ph.frame_ref = _transport(pair, ph.frame_ref, d_new)
    ph.energy_keV = kp
    ph.direction = d_new
    ph.level += 1
    return d_old, k, kp, phi_ph


def _resolve(pair: PairState, first: PendingScatter, pid: int, k: float, kp: float,
             d_old: Vec3, d_new: Vec3, pol_before: Vec3, rng) -> None:
    pa = pair.photon(first.photon_id)
    pb = pair.photon(pid)
    pa.pol_ref = assign_scattered_polarization(first.pol_before, first.dir_before, first.dir_after,
                                               first.k_before, first.k_after, rng)
    pb.pol_ref = assign_scattered_polarization(pol_before, d_old, d_new, k, kp, rng)
    for ph in (pa, pb):
        ph.coherence = Coherence.SEPARABLE
        ph.awaiting_partner = False
    pair.correlation_consumed = True
    pair.pending_first_scatter = None


def scatter_mu(pair: PairState, photon_id: int, mu: float, rng, intermediate: bool = False) -> ScatterOutcome:
    """Apply one Compton scatter with cos(theta) = ``mu`` chosen by the caller."""
    ph = pair.photon(photon_id)
    if ph.awaiting_partner:
        raise PairContractError("photon scattered again before its partner analysed")
    mode = pair.mode
    pol_before = ph.pol_ref
    if mode is PairMode.ENT and intermediate and not pair.correlation_consumed:
        phi = TWO_PI * rng.random() - math.pi
        d_old, k, kp, phi_ph = _apply(pair, ph, mu, phi, pol_before)
        ph.pol_ref = _transport(pair, pol_before, ph.direction)
        return ScatterOutcome(phi, ROLE_INTERMEDIATE, phi_ph, pol_before)
    if mode in (PairMode.ENT, PairMode.FD) and not pair.correlation_consumed:
        first = pair.pending_first_scatter
        if first is None:
            if mode is PairMode.FD:
                phi = phi_polarized_mu(ph.energy_keV, mu, rng)
            else:
                phi = TWO_PI * rng.random() - math.pi
            d_old, k, kp, phi_ph = _apply(pair, ph, mu, phi, pol_before)
            pair.pending_first_scatter = PendingScatter(
                photon_id, mu, k, kp, d_old, ph.direction, pol_before,
                local_to_oriented(photon_id, phi))
            ph.pol_ref = None
            ph.awaiting_partner = True
            return ScatterOutcome(phi, ROLE_FIRST, phi_ph, pol_before)
        if first.photon_id == photon_id:
            raise PairContractError("pending scatter belongs to this photon")
        dphi = dphi_conditional_mu(first.k_before, first.mu, ph.energy_keV, mu, rng)
        phi = oriented_to_local(photon_id, wrap_angle(first.phi_oriented + dphi))
        d_old, k, kp, phi_ph = _apply(pair, ph, mu, phi, pol_before)
        _resolve(pair, first, photon_id, k, kp, d_old, ph.direction, pol_before, rng)
        return ScatterOutcome(phi, ROLE_SECOND, phi_ph, pol_before)
    if pol_before is None:
        phi = TWO_PI * rng.random() - math.pi
        d_old, k, kp, phi_ph = _apply(pair, ph, mu, phi, ph.frame_ref)
        return ScatterOutcome(phi, ROLE_FREE, phi_ph, None)
    phi = phi_polarized_mu(ph.energy_keV, mu, rng)
    d_old, k, kp, phi_ph = _apply(pair, ph, mu, phi, pol_before)
    ph.pol_ref = assign_scattered_polarization(pol_before, d_old, ph.direction, k, kp, rng)
    return ScatterOutcome(phi, ROLE_FREE, phi_ph, pol_before)


def intermediate_scatter(pair: PairState, photon_id: int, theta: float, rng) -> PairState:
    """Entanglement-preserving scatter: new energy and direction, uniform azimuth,
    polarization reference transported onto the new direction."""
    if pair.mode is not PairMode.ENT or pair.correlation_consumed:
        raise PairContractError("intermediate scatters only exist for an unspent ent pair")
    scatter_mu(pair, photon_id, math.cos(theta), rng, intermediate=True)
    return pair


def analyzing_scatter(pair: PairState, photon_id: int, theta: float, rng) -> tuple[float, PairState]:
    """Analysing scatter; returns the local azimuth and the updated pair."""
    out = scatter_mu(pair, photon_id, math.cos(theta), rng)
    return out.phi, pair


def release_pending(pair: PairState, rng) -> None:
    """Settle a pending first scatter whose partner never analysed.

    The scattered photon's polarization follows from its reference by the
    two-channel transfer; the partner keeps its (transported) reference as
    its polarization.
    """
    first = pair.pending_first_scatter
    if first is None:
        return
    pa = pair.photon(first.photon_id)
    pa.pol_ref = assign_scattered_polarization(first.pol_before, first.dir_before, first.dir_after,
                                               first.k_before, first.k_after, rng)
    pb = pair.partner(first.photon_id)
    for ph in (pa, pb):
        ph.coherence = Coherence.SEPARABLE
        ph.awaiting_partner = False
    pair.correlation_consumed = True
    pair.pending_first_scatter = None
