"""Straight-line photon transport, truth-event assembly and topology labels.

This is the readable reference implementation.  The compiled kernel in
:mod:`tcsim.kernel` repeats the same arithmetic and random draws in the
same order, so both backends produce identical events for a given
``(seed, event_index)``.

Random draws per event (transport stream), in order:

1. isotropic emission only: two draws for the pair axis;
2. one draw for the pair's polarization azimuth;
3. per photon step: one free-path draw per traversed volume, one draw for
   the interaction kind, then the Compton angle sampler, then whatever the
   pair-state engine consumes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

from .cross_sections import MAX_TRIES, SamplerFault, kn_window_probability, sample_mu_kn
from .geometry import VOL_DM0, VOL_DM1, VOL_SCD, GeometryConfig, ray_volume_intersection
from .kinematics import TWO_PI, Z_HAT, Vec3
from .pair_state import (
    GAMMA1,
    GAMMA2,
    ROLE_INTERMEDIATE,
    PairMode,
    create_annihilation_pair,
    release_pending,
    scatter_mu,
)

KIND_COMPTON = 0
KIND_PHOTO = 1

LABEL_OTHER = 0
LABEL_PURE_TCS = 1
LABEL_PURE_DCS = 2
LABEL_MS_BACKGROUND = 3
LABEL_NAMES = {LABEL_OTHER: "other", LABEL_PURE_TCS: "pure_TCS",
               LABEL_PURE_DCS: "pure_DCS", LABEL_MS_BACKGROUND: "MS_background"}

CHAIN_NONE = 0
CHAIN_DCS = 1
CHAIN_TCS = 2
CHAIN_CODES = {None: CHAIN_NONE, "none": CHAIN_NONE, "dcs": CHAIN_DCS, "tcs": CHAIN_TCS}

MAX_STEPS = 200
NAN = float("nan")


@dataclass(frozen=True)
class TransportOptions:
    """Per-run transport switches.

    ``forced_chain`` ("dcs" or "tcs") is a variance-reduction mode for the
    water sphere: every photon step is forced to a Compton interaction inside
    the sphere with its polar angle forced into the analysis window, and the
    event weight carries the product of the forcing probabilities.
    """

    force_scd_interaction: bool = False
    forced_chain: str | None = None
    theta_window_deg: tuple[float, float] = (72.0, 92.0)
    theta_ics_range_deg: tuple[float, float] = (0.0, 80.0)
    isotropic: bool = False
    sphere_ics: bool = True

    @property
    def ics_in_sphere(self) -> bool:
        """Whether gamma 2's first sphere scatter is the intermediate one (never for a DCS chain)."""
        return self.sphere_ics and self.chain_code != CHAIN_DCS

    @property
    def chain_code(self) -> int:
        try:
            return CHAIN_CODES[self.forced_chain]
        except KeyError:
            raise ValueError(f"unknown forced_chain {self.forced_chain!r}") from None

    def mu_window(self) -> tuple[float, float]:
        lo, hi = self.theta_window_deg
        return math.cos(math.radians(hi)), math.cos(math.radians(lo))

    def mu_ics_window(self) -> tuple[float, float]:
        lo, hi = self.theta_ics_range_deg
        return math.cos(math.radians(hi)), math.cos(math.radians(lo))


@dataclass
class InteractionRecord:
    seq: int
    photon_id: int
    level: int
    volume: int
    pixel: int
    kind: int
    energy_deposit: float
    position: Vec3
    theta: float = NAN
    phi_lab: float = NAN
    phi_photon: float = NAN
    role: int = 0
    pol: Vec3 | None = None


@dataclass
class TruthEvent:
    event_index: int
    seed: int
    mode: str
    axis: Vec3
    weight: float = 1.0
    records: list[InteractionRecord] = field(default_factory=list)
    escaped: dict = field(default_factory=lambda: {GAMMA1: False, GAMMA2: False})
    escape_energy: dict = field(default_factory=lambda: {GAMMA1: 0.0, GAMMA2: 0.0})
    degenerate_transports: int = 0

    def photon_records(self, photon_id: int) -> list[InteractionRecord]:
        return [r for r in self.records if r.photon_id == photon_id]

    def deposited(self, photon_id: int) -> float:
        return sum(r.energy_deposit for r in self.records if r.photon_id == photon_id)

    def to_json(self) -> str:
        return json.dumps(truth_to_dict(self), allow_nan=False, separators=(",", ":"))


def _clean(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, tuple):
        return [_clean(v) for v in x]
    return x


def truth_to_dict(ev: TruthEvent) -> dict:
    recs = []
    for r in ev.records:
        d = asdict(r)
        recs.append({k: _clean(tuple(v) if isinstance(v, (list, tuple)) else v) for k, v in d.items()})
    return {
        "event": ev.event_index,
        "seed": ev.seed,
        "mode": ev.mode,
        "axis": list(ev.axis),
        "weight": ev.weight,
        "label": LABEL_NAMES[classify_truth(ev)],
        "escaped": [ev.escaped[GAMMA1], ev.escaped[GAMMA2]],
        "escape_energy_keV": [ev.escape_energy[GAMMA1], ev.escape_energy[GAMMA2]],
        "records": recs,
    }


# --- free paths ---------------------------------------------------------------

def next_interaction(pos: Vec3, d: Vec3, energy: float, geometry: GeometryConfig, materials, rng):
    """Walk the volumes along the ray and sample where the photon interacts.

    Returns ``(volume, position, mu_pe, mu_compton)`` or None on escape.
    Volumes are visited in order of entry distance; each one costs one draw.
    """
    segs = []
    for vol in geometry.volumes:
        hit = ray_volume_intersection(pos, d, vol)
        if hit is None or hit[1] <= hit[0]:
            continue
        segs.append((hit[0], hit[1], vol))
    segs.sort(key=lambda s: s[0])
    for t0, t1, vol in segs:
        mu_pe, mu_c = materials[vol.material].mu(energy)
        mu_t = mu_pe + mu_c
        s = -math.log(1.0 - rng.random()) / mu_t
        if s < t1 - t0:
            t = t0 + s
            return vol, (pos[0] + t * d[0], pos[1] + t * d[1], pos[2] + t * d[2]), mu_pe, mu_c
    return None


def forced_interaction(pos: Vec3, d: Vec3, energy: float, vol, materials, rng):
    """Interaction forced inside ``vol``'s chord (truncated exponential).

    Returns ``(position, mu_pe, mu_compton, probability)`` or None if the
    ray misses the volume.
    """
    hit = ray_volume_intersection(pos, d, vol)
    if hit is None or hit[1] <= hit[0]:
        return None
    t0, t1 = hit
    mu_pe, mu_c = materials[vol.material].mu(energy)
    mu_t = mu_pe + mu_c
    p = 1.0 - math.exp(-mu_t * (t1 - t0))
    s = -math.log(1.0 - rng.random() * p) / mu_t
    t = t0 + s
    return (pos[0] + t * d[0], pos[1] + t * d[1], pos[2] + t * d[2]), mu_pe, mu_c, p


# --- event simulation ---------------------------------------------------------------

def _isotropic_axis(rng) -> Vec3:
    cz = 2.0 * rng.random() - 1.0
    ph = TWO_PI * rng.random()
    st = math.sqrt(max(0.0, 1.0 - cz * cz))
    return (st * math.cos(ph), st * math.sin(ph), cz)


class _EventBuilder:
    def __init__(self, mode, geometry, materials, rng, options, event_index, seed):
        self.mode = PairMode(mode)
        self.geometry = geometry
        self.materials = materials
        self.rng = rng
        self.opt = options
        self.sphere = geometry.kind == "perfect_sphere"
        axis = _isotropic_axis(rng) if options.isotropic else Z_HAT
        self.pair = create_annihilation_pair(self.mode, axis, rng)
        self.ev = TruthEvent(event_index, seed, self.mode.value, axis)
        self.pos = {GAMMA1: (0.0, 0.0, 0.0), GAMMA2: (0.0, 0.0, 0.0)}
        self.alive = {GAMMA1: True, GAMMA2: True}
        self.steps = {GAMMA1: 0, GAMMA2: 0}

    # -- bookkeeping
    def _record(self, pid, vol, pos, kind, edep, level, theta=NAN, phi_lab=NAN,
                phi_photon=NAN, role=0, pol=None):
        self.ev.records.append(InteractionRecord(
            len(self.ev.records), pid, level, vol.vid, vol.pixel_of(pos), kind, edep, pos,
            theta, phi_lab, phi_photon, role, pol))

    def _escape(self, pid):
        ph = self.pair.photon(pid)
        self.alive[pid] = False
        self.ev.escaped[pid] = True
        self.ev.escape_energy[pid] = ph.energy_keV

    def _compton(self, pid, vol, pos, mu):
        ph = self.pair.photon(pid)
        level = ph.level
        if self.mode is PairMode.ENT:
            if self.sphere:
                intermediate = self.opt.ics_in_sphere and pid == GAMMA2 and level == 0
            else:
                intermediate = vol.vid == VOL_SCD
        else:
            intermediate = False
        k = ph.energy_keV
        out = scatter_mu(self.pair, pid, mu, self.rng, intermediate)
        d = ph.direction
        self._record(pid, vol, pos, KIND_COMPTON, k - ph.energy_keV, level, math.acos(mu),
                     math.atan2(d[1], d[0]), out.phi_photon, out.role, out.pol_before)
        return out.role

    # -- natural transport
    def _step(self, pid) -> int:
        """Advance one interaction; returns the Compton role or -1."""
        ph = self.pair.photon(pid)
        self.steps[pid] += 1
        if self.steps[pid] > MAX_STEPS:
            raise SamplerFault("photon exceeded the interaction cap")
        pos = self.pos[pid]
        scd = self.geometry.volume(VOL_SCD)
        hit = None
        if (self.opt.force_scd_interaction and pid == GAMMA2 and self.steps[pid] == 1
                and scd is not None):
            f = forced_interaction(pos, ph.direction, ph.energy_keV, scd, self.materials, self.rng)
            if f is not None:
                self.ev.weight *= f[3]
                hit = (scd, f[0], f[1], f[2])
        if hit is None:
            hit = next_interaction(pos, ph.direction, ph.energy_keV, self.geometry, self.materials, self.rng)
        if hit is None:
            self._escape(pid)
            return -1
        vol, p, mu_pe, mu_c = hit
        self.pos[pid] = p
        if self.rng.random() * (mu_pe + mu_c) < mu_pe:
            self._record(pid, vol, p, KIND_PHOTO, ph.energy_keV, ph.level)
            ph.energy_keV = 0.0
            self.alive[pid] = False
            return -1
        mu = sample_mu_kn(ph.energy_keV, self.rng)
        return self._compton(pid, vol, p, mu)

    def _run(self, pid, until_analyzing: bool) -> None:
        while self.alive[pid]:
            role = self._step(pid)
            if until_analyzing and role > ROLE_INTERMEDIATE:
                return

    def natural(self) -> TruthEvent:
        self._run(GAMMA1, True)
        self._run(GAMMA2, True)
        release_pending(self.pair, self.rng)
        self._run(GAMMA1, False)
        self._run(GAMMA2, False)
        return self._finish()

    # -- forced chain (water sphere)
    def _forced_step(self, pid, mu_lo, mu_hi) -> None:
        ph = self.pair.photon(pid)
        vol = self.geometry.volumes[0]
        f = forced_interaction(self.pos[pid], ph.direction, ph.energy_keV, vol, self.materials, self.rng)
        p, mu_pe, mu_c, prob = f[0], f[1], f[2], f[3]
        self.pos[pid] = p
        k = ph.energy_keV
        self.ev.weight *= prob * (mu_c / (mu_pe + mu_c)) * kn_window_probability(k, mu_lo, mu_hi)
        mu = sample_mu_kn(k, self.rng, mu_lo, mu_hi)
        self._compton(pid, vol, p, mu)

    def forced(self, chain: int) -> TruthEvent:
        lo, hi = self.opt.mu_window()
        self._forced_step(GAMMA1, lo, hi)
        if chain == CHAIN_TCS:
            ilo, ihi = self.opt.mu_ics_window()
            self._forced_step(GAMMA2, ilo, ihi)
        self._forced_step(GAMMA2, lo, hi)
        release_pending(self.pair, self.rng)
        for pid in (GAMMA1, GAMMA2):
            self._escape(pid)
        return self._finish()

    def _finish(self) -> TruthEvent:
        self.ev.degenerate_transports = self.pair.degenerate_transports
        return self.ev


def simulate_event(mode, geometry: GeometryConfig, materials, rng, options: TransportOptions | None = None,
                   event_index: int = 0, seed: int = 0) -> TruthEvent:
    """Create one annihilation pair and transport both photons to completion.

    Args:
        mode: pair coherence mode (``PairMode`` or its string value).
        geometry: apparatus or water-sphere geometry.
        materials: mapping of material name to :class:`MaterialTable`.
        rng: the event's transport stream.
        options: transport switches; defaults to plain analogue transport.
    """
    options = options or TransportOptions()
    b = _EventBuilder(mode, geometry, materials, rng, options, event_index, seed)
    chain = options.chain_code
    if chain != CHAIN_NONE:
        if not b.sphere:
            raise ValueError("forced chains are only defined for the perfect_sphere geometry")
        return b.forced(chain)
    return b.natural()


def propagate(photon, position: Vec3, geometry: GeometryConfig, materials, rng):
    """Sample the next interaction of a free photon.

    Returns ``{"escaped": True}`` or ``{"volume", "position", "kind"}``; the
    Compton angle and azimuth are left to the caller (pair-state engine).
    """
    hit = next_interaction(position, photon.direction, photon.energy_keV, geometry, materials, rng)
    if hit is None:
        return {"escaped": True}
    vol, p, mu_pe, mu_c = hit
    kind = KIND_PHOTO if rng.random() * (mu_pe + mu_c) < mu_pe else KIND_COMPTON
    return {"escaped": False, "volume": vol.vid, "position": p, "kind": kind}


# --- labels and truth summary ------------------------------------------------------

def classify_truth(ev: TruthEvent) -> int:
    """Topology label of an apparatus event.

    pure_TCS: gamma 2 Compton-scatters once in the SCD, then each photon
    Compton-scatters once and is photoabsorbed in its own module, with the
    four module deposits in four distinct pixels.  pure_DCS: the same
    without the SCD step.  MS_background: both modules see deposits but
    two interactions share a pixel.  Everything else is ``other``.
    """
    recs = ev.records
    if not recs or any(r.volume not in (VOL_DM0, VOL_DM1, VOL_SCD) for r in recs):
        return LABEL_OTHER
    g1 = [(r.volume, r.kind) for r in recs if r.photon_id == GAMMA1]
    g2 = [(r.volume, r.kind) for r in recs if r.photon_id == GAMMA2]
    clean1 = g1 == [(VOL_DM1, KIND_COMPTON), (VOL_DM1, KIND_PHOTO)]
    keys = [(r.volume, r.pixel) for r in recs]
    distinct = len(set(keys)) == len(keys)
    if clean1 and distinct:
        if g2 == [(VOL_SCD, KIND_COMPTON), (VOL_DM0, KIND_COMPTON), (VOL_DM0, KIND_PHOTO)]:
            return LABEL_PURE_TCS
        if g2 == [(VOL_DM0, KIND_COMPTON), (VOL_DM0, KIND_PHOTO)]:
            return LABEL_PURE_DCS
    vols = {r.volume for r in recs}
    if VOL_DM0 in vols and VOL_DM1 in vols and not distinct:
        return LABEL_MS_BACKGROUND
    return LABEL_OTHER


TRUTH_FIELDS = ("t_ics", "t1", "t2", "p1_lab", "p2_lab", "p1_ph", "p2_ph")


def truth_summary(ev: TruthEvent, sphere: bool, sphere_ics: bool = True) -> tuple:
    """Truth angles of the analysing (and intermediate) scatters.

    Apparatus: gamma 1's first Compton in DM1, gamma 2's first Compton in
    SCD and in DM0.  Sphere: gamma 1's first Compton; gamma 2's first
    Compton is the intermediate one when ``sphere_ics`` (else theta_ICS = 0)
    and the next one is analysing.  Missing scatters give NaN.
    """
    t_ics = t1 = t2 = p1l = p2l = p1p = p2p = NAN
    n2 = 0
    for r in ev.records:
        if r.kind != KIND_COMPTON:
            continue
        if r.photon_id == GAMMA1:
            if math.isnan(t1) and (sphere or r.volume == VOL_DM1):
                t1, p1l, p1p = r.theta, r.phi_lab, r.phi_photon
            continue
        if sphere:
            n2 += 1
            if sphere_ics and n2 == 1:
                t_ics = r.theta
            elif (n2 == 2 or not sphere_ics) and math.isnan(t2):
                t2, p2l, p2p = r.theta, r.phi_lab, r.phi_photon
        else:
            if r.volume == VOL_SCD and math.isnan(t_ics):
                t_ics = r.theta
            elif r.volume == VOL_DM0 and math.isnan(t2):
                t2, p2l, p2p = r.theta, r.phi_lab, r.phi_photon
    if sphere and not sphere_ics:
        t_ics = 0.0
    return t_ics, t1, t2, p1l, p2l, p1p, p2p


__all__ = [
    "InteractionRecord", "TruthEvent", "TransportOptions", "simulate_event", "propagate",
    "classify_truth", "truth_summary", "next_interaction", "forced_interaction",
    "KIND_COMPTON", "KIND_PHOTO", "LABEL_NAMES", "MAX_TRIES",
]
