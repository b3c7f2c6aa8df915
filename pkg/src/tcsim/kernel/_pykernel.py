"""Pure-Python backend: loops over events using the reference modules."""

from __future__ import annotations

import math

import numpy as np

from ..cross_sections import dphi_conditional_mu, phi_polarized_mu, sample_mu_kn
from ..digitizer import digitize
from ..pair_state import GAMMA1, GAMMA2
from ..rng import STREAM_DIGITIZE, STREAM_TRANSPORT, EventRng
from ..transport import classify_truth, simulate_event, truth_summary
from ._layout import (
    EVENT_DTYPE,
    HIT_DTYPE,
    KEEP_CANDIDATES,
    KEEP_CODES,
    KEEP_HITS,
    KEEP_TRUTH,
    RECORD_DTYPE,
)

NAME = "python"
SAMPLER_STREAM = 2


def _pack(rows, dtype) -> np.ndarray:
    """Structured array with zeroed padding, so whole buffers compare bytewise."""
    out = np.zeros(len(rows), dtype=dtype)
    if rows:
        out[:] = rows
    return out


def simulate_batch(params, start: int, count: int) -> dict:
    """Simulate events ``start .. start+count-1`` and return structured arrays."""
    keep = KEEP_CODES[params.keep]
    geom = params.geometry
    sphere = geom.kind == "perfect_sphere"
    opts = params.options
    recs, evs, hits = [], [], []
    for i in range(start, start + count):
        rng = EventRng(params.seed, i, STREAM_TRANSPORT)
        ev = simulate_event(params.mode, geom, params.materials, rng, opts, i, params.seed)
        ev_hits = []
        if not sphere and params.resolution is not None:
            det = digitize(ev, params.resolution, EventRng(params.seed, i, STREAM_DIGITIZE), geom)
            ev_hits = det.hits()
            n0, n1 = len(det.dm0), len(det.dm1)
        else:
            n0 = n1 = 0
        if keep == KEEP_HITS and not ev_hits:
            continue
        if keep == KEEP_CANDIDATES and not (n0 == 2 and n1 == 2):
            continue
        label = classify_truth(ev)
        summ = truth_summary(ev, sphere, opts.ics_in_sphere)
        evs.append((i, ev.weight, ev.escape_energy[GAMMA1], ev.escape_energy[GAMMA2], *summ,
                    len(ev.records), len(ev_hits), ev.degenerate_transports, label,
                    int(ev.escaped[GAMMA1]), int(ev.escaped[GAMMA2])))
        if keep == KEEP_TRUTH:
            continue
        for r in ev.records:
            pol = r.pol if r.pol is not None else (math.nan, math.nan, math.nan)
            recs.append((i, r.energy_deposit, r.position[0], r.position[1], r.position[2],
                         r.theta, r.phi_lab, r.phi_photon, pol[0], pol[1], pol[2],
                         r.seq, r.pixel, r.photon_id, r.level, r.volume, r.kind, r.role))
        for h in ev_hits:
            hits.append((i, h.energy, h.u, h.v, h.pixel, h.volume))
    return {
        "records": _pack(recs, RECORD_DTYPE),
        "events": _pack(evs, EVENT_DTYPE),
        "hits": _pack(hits, HIT_DTYPE),
    }


def sample_theta_batch(k: float, n: int, seed: int) -> np.ndarray:
    rng = EventRng(seed, 0, SAMPLER_STREAM)
    return np.array([math.acos(sample_mu_kn(k, rng)) for _ in range(n)])


def sample_phi_batch(k: float, theta: float, n: int, seed: int) -> np.ndarray:
    rng = EventRng(seed, 0, SAMPLER_STREAM)
    mu = math.cos(theta)
    return np.array([phi_polarized_mu(k, mu, rng) for _ in range(n)])


def sample_dphi_batch(k1: float, theta1: float, k2p: float, theta2p: float, n: int, seed: int) -> np.ndarray:
    rng = EventRng(seed, 0, SAMPLER_STREAM)
    m1 = math.cos(theta1)
    m2 = math.cos(theta2p)
    return np.array([dphi_conditional_mu(k1, m1, k2p, m2, rng) for _ in range(n)])

