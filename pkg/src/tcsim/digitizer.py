"""Truth interactions -> pixel hits: per-pixel sums, Gaussian smearing, threshold."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .geometry import VOL_DM0, VOL_DM1, VOL_SCD, GeometryConfig
from .kinematics import ELECTRON_MASS_KEV

FWHM_TO_SIGMA = 2.35482


@dataclass(frozen=True)
class ResolutionConfig:
    """Energy resolution (FWHM fraction at 511 keV) per detector and threshold.

    FWHM scales as sqrt(E) in absolute terms, i.e. the fraction goes as
    1/sqrt(E).  A fraction of zero switches smearing off.
    """

    scd_fwhm_frac_at_511: float = 0.122
    dm0_sdh_fwhm_frac: float = 0.124
    dm1_sdh_fwhm_frac: float = 0.143
    threshold_keV: float = 7.0

    def __post_init__(self):
        for name in ("scd_fwhm_frac_at_511", "dm0_sdh_fwhm_frac", "dm1_sdh_fwhm_frac"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {v!r}")
        if self.threshold_keV < 0:
            raise ValueError("threshold_keV must be >= 0")

    def frac(self, volume: int) -> float:
        if volume == VOL_SCD:
            return self.scd_fwhm_frac_at_511
        if volume == VOL_DM0:
            return self.dm0_sdh_fwhm_frac
        return self.dm1_sdh_fwhm_frac

    def fwhm(self, volume: int, energy: float) -> float:
        """Absolute FWHM in keV at ``energy``."""
        return self.frac(volume) * math.sqrt(ELECTRON_MASS_KEV * max(energy, 0.0))


@dataclass
class PixelHit:
    volume: int
    pixel: int
    energy: float
    u: float
    v: float

    @property
    def row(self) -> int:
        return self.pixel // 16

    @property
    def col(self) -> int:
        return self.pixel % 16


@dataclass
class DetectorEvent:
    event_index: int
    weight: float = 1.0
    scd: PixelHit | None = None
    dm0: list[PixelHit] = field(default_factory=list)
    dm1: list[PixelHit] = field(default_factory=list)
    label: int | None = None

    def hits(self) -> list[PixelHit]:
        out = [self.scd] if self.scd is not None else []
        return out + self.dm0 + self.dm1


def smear_sigma(e: float, fwhm_frac_at_511: float) -> float:
    return fwhm_frac_at_511 * math.sqrt(ELECTRON_MASS_KEV * e) / FWHM_TO_SIGMA


def smear_energy(e: float, fwhm_frac_at_511: float, rng) -> float:
    """Gaussian-smeared energy, clamped at zero.  ``frac = 0`` draws nothing."""
    if fwhm_frac_at_511 == 0.0:
        return e
    x = e + smear_sigma(e, fwhm_frac_at_511) * rng.normal()
    return x if x > 0.0 else 0.0


def pixel_sums(records) -> list[tuple[int, int, float]]:
    """Sum deposits per (volume, pixel) in order of first appearance; sphere deposits skipped."""
    order: list[tuple[int, int]] = []
    sums: dict[tuple[int, int], float] = {}
    for r in records:
        if r.volume not in (VOL_DM0, VOL_DM1, VOL_SCD):
            continue
        key = (r.volume, r.pixel)
        if key not in sums:
            order.append(key)
            sums[key] = 0.0
        sums[key] += r.energy_deposit
    return [(v, p, sums[(v, p)]) for v, p in order]


def digitize(ev, cfg: ResolutionConfig, rng, geometry: GeometryConfig | None = None) -> DetectorEvent:
    """Digitize one truth event.

    Pixels are smeared in order of their first deposit, each consuming one
    normal draw from ``rng`` (the event's digitization stream) unless its
    resolution is zero; the threshold is applied after smearing.
    """
    out = DetectorEvent(ev.event_index, ev.weight)
    for vol, pix, e in pixel_sums(ev.records):
        es = smear_energy(e, cfg.frac(vol), rng)
        if es < cfg.threshold_keV:
            continue
        u, v = (0.0, 0.0)
        if geometry is not None and vol != VOL_SCD:
            u, v = geometry.volume(vol).pixel_center(pix)
        hit = PixelHit(vol, pix, es, u, v)
        if vol == VOL_SCD:
            out.scd = hit
        elif vol == VOL_DM0:
            out.dm0.append(hit)
        else:
            out.dm1.append(hit)
    return out


def detector_event_to_dict(det: DetectorEvent, label_names=None) -> dict:
    def h(x: PixelHit):
        return {"volume": x.volume, "pixel": x.pixel, "energy_keV": x.energy, "u": x.u, "v": x.v}

    d = {
        "event": det.event_index,
        "weight": det.weight,
        "scd": h(det.scd) if det.scd is not None else None,
        "dm0": [h(x) for x in det.dm0],
        "dm1": [h(x) for x in det.dm1],
    }
    if det.label is not None:
        d["label"] = label_names[det.label] if label_names else det.label
    return d


def detector_event_from_dict(d: dict, label_codes=None) -> DetectorEvent:
    def h(x):
        return PixelHit(int(x["volume"]), int(x["pixel"]), float(x["energy_keV"]), float(x["u"]), float(x["v"]))

    label = d.get("label")
    if label is not None and label_codes is not None:
        label = label_codes[label]
    return DetectorEvent(int(d["event"]), float(d["weight"]),
                         h(d["scd"]) if d.get("scd") else None,
                         [h(x) for x in d.get("dm0", [])], [h(x) for x in d.get("dm1", [])], label)
