"""Structured-array layouts shared by both kernel backends.

The dtypes are built with ``align=True`` so they match the C structs in
``_ckernel.pyx`` byte for byte; the compiled backend copies its buffers
straight into these arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

RECORD_DTYPE = np.dtype([
    ("event", "i8"), ("edep", "f8"), ("x", "f8"), ("y", "f8"), ("z", "f8"),
    ("theta", "f8"), ("phi_lab", "f8"), ("phi_photon", "f8"),
    ("pol_x", "f8"), ("pol_y", "f8"), ("pol_z", "f8"),
    ("seq", "i2"), ("pixel", "i2"),
    ("photon", "i1"), ("level", "i1"), ("volume", "i1"), ("kind", "i1"), ("role", "i1"),
], align=True)

EVENT_DTYPE = np.dtype([
    ("event", "i8"), ("weight", "f8"), ("esc_e1", "f8"), ("esc_e2", "f8"),
    ("t_ics", "f8"), ("t1", "f8"), ("t2", "f8"),
    ("p1_lab", "f8"), ("p2_lab", "f8"), ("p1_ph", "f8"), ("p2_ph", "f8"),
    ("n_records", "i4"), ("n_hits", "i4"), ("degenerate", "i4"),
    ("label", "i1"), ("escaped1", "i1"), ("escaped2", "i1"),
], align=True)

HIT_DTYPE = np.dtype([
    ("event", "i8"), ("energy", "f8"), ("u", "f8"), ("v", "f8"),
    ("pixel", "i2"), ("volume", "i1"),
], align=True)

KEEP_ALL = 0
KEEP_HITS = 1
KEEP_CANDIDATES = 2
KEEP_TRUTH = 3
KEEP_CODES = {"all": KEEP_ALL, "hits": KEEP_HITS, "candidates": KEEP_CANDIDATES, "truth": KEEP_TRUTH}


@dataclass
class KernelParams:
    """Everything a backend needs to simulate a range of events.

    The Python backend works from the rich objects (``geometry``,
    ``materials``, ``options``, ``resolution``); the compiled one reads the
    flat arrays filled in by :meth:`build`.
    """

    seed: int
    mode: str
    geometry: object
    materials: dict
    options: object
    resolution: object
    keep: str = "all"
    arrays: dict = field(default_factory=dict)

    @classmethod
    def build(cls, seed, mode, geometry, materials, options, resolution, keep="all"):
        from ..pair_state import MODE_CODES, PairMode
        from ..geometry import Sphere

        if keep not in KEEP_CODES:
            raise ValueError(f"unknown keep policy {keep!r}")
        p = cls(int(seed), PairMode(mode).value, geometry, materials, options, resolution, keep)
        vols = geometry.volumes
        n = len(vols)
        mat_names = []
        for v in vols:
            if v.material not in mat_names:
                mat_names.append(v.material)
        a = {
            "vtype": np.zeros(n, np.int32), "vid": np.zeros(n, np.int32),
            "center": np.zeros((n, 3)), "axes": np.zeros((n, 3, 3)), "half": np.zeros((n, 3)),
            "radius": np.zeros(n), "vmat": np.zeros(n, np.int32),
            "npu": np.zeros(n, np.int32), "npv": np.zeros(n, np.int32), "pitch": np.zeros(n),
        }
        for i, v in enumerate(vols):
            a["vid"][i] = v.vid
            a["center"][i] = v.center
            a["vmat"][i] = mat_names.index(v.material)
            if isinstance(v, Sphere):
                a["vtype"][i] = 1
                a["radius"][i] = v.radius
            else:
                a["axes"][i] = (v.u, v.v, v.w)
                a["half"][i] = v.half
                a["npu"][i] = v.pixels_u
                a["npv"][i] = v.pixels_v
                a["pitch"][i] = v.pitch
        offs = [0]
        cols = {"e": [], "le": [], "pe": [], "co": []}
        for name in mat_names:
            e, le, pe, co = materials[name].kernel_arrays()
            for key, arr in zip(("e", "le", "pe", "co"), (e, le, pe, co)):
                cols[key].append(arr)
            offs.append(offs[-1] + len(e))
        for key in cols:
            a["mat_" + key] = np.ascontiguousarray(np.concatenate(cols[key]))
        a["mat_off"] = np.array(offs, np.int32)
        frac = np.zeros(4)
        if resolution is not None:
            frac[:] = [resolution.dm0_sdh_fwhm_frac, resolution.dm1_sdh_fwhm_frac,
                       resolution.scd_fwhm_frac_at_511, 0.0]
        a["frac"] = frac
        mlo, mhi = options.mu_window()
        ilo, ihi = options.mu_ics_window()
        a["scalars"] = np.array([mlo, mhi, ilo, ihi,
                                 resolution.threshold_keV if resolution is not None else 0.0])
        a["flags"] = np.array([
            MODE_CODES[PairMode(mode)],
            1 if geometry.kind == "perfect_sphere" else 0,
            1 if options.ics_in_sphere else 0,
            options.chain_code,
            1 if options.force_scd_interaction else 0,
            1 if options.isotropic else 0,
            KEEP_CODES[keep],
            1 if resolution is not None else 0,
        ], np.int32)
        for key in list(a):
            a[key] = np.ascontiguousarray(a[key])
        p.arrays = a
        return p


def empty_batch() -> dict:
    return {"records": np.zeros(0, RECORD_DTYPE), "events": np.zeros(0, EVENT_DTYPE),
            "hits": np.zeros(0, HIT_DTYPE)}


def concat_batches(batches) -> dict:
    batches = list(batches)
    if not batches:
        return empty_batch()
    return {k: np.concatenate([b[k] for b in batches]) for k in ("records", "events", "hits")}


NAN = math.nan
