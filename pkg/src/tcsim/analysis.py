"""Event selection, Δφ histograms, event mixing, modulation fits and R.

Two entry points feed the same histogramming and fitting code:

* :func:`reconstruct` / :func:`reconstruct_arrays` turn digitized pixel
  hits into reconstructed scatter angles (the experiment-like path);
* :func:`select_truth` takes the per-event truth summary of a
  perfect-detector run (interaction angles and azimuths straight from the
  transport).

Selections are columnar (:class:`Selection`), histograms are
:class:`Hist2D` over (θ_ICS, Δφ) with per-bin sums of weights and of
squared weights, so partial results from independent chunks merge by
addition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .digitizer import DetectorEvent, PixelHit, ResolutionConfig
from .geometry import VOL_DM0, VOL_DM1, VOL_SCD
from .kinematics import ELECTRON_MASS_KEV, compton_edge, scatter_angle_from_deposit, wrap_angle
from .transport import LABEL_PURE_TCS

PI = math.pi
TWO_PI = 2.0 * math.pi
RAD2DEG = 180.0 / math.pi
EDGE_TOL = 1.0 + 1e-12
SDH_FLOOR_REL = 1e-6

REJECT_MULTIPLICITY = "multiplicity"
REJECT_ADJACENCY = "adjacency"
REJECT_SDH_WINDOW = "sdh_window"
REJECT_THETA_WINDOW = "theta_window"
REJECT_NO_SCD = "no_scd"
REJECT_COMPTON_EDGE = "compton_edge"
REJECT_REASONS = (REJECT_NO_SCD, REJECT_MULTIPLICITY, REJECT_ADJACENCY,
                  REJECT_SDH_WINDOW, REJECT_COMPTON_EDGE, REJECT_THETA_WINDOW)

FRAMES = ("lab", "photon")
SAMPLES = ("all", "TCS")


class AnalysisError(ValueError):
    """Base class for analysis failures."""


class FitError(AnalysisError):
    """Rank-deficient or otherwise impossible modulation fit."""


class AcceptanceError(AnalysisError):
    """Mixed histogram empty where the real one is not."""

    def __init__(self, bins):
        self.bins = list(bins)
        super().__init__(f"mixed histogram empty in bins with real entries: {self.bins[:20]}"
                         + (" ..." if len(self.bins) > 20 else ""))


# --- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class SelectionCuts:
    """Event-selection and binning settings.

    Angles are in degrees.  ``sdh_window_fwhm`` is the half-width of the
    summed-double-hit window in units of the expected FWHM.
    """

    theta_window_deg: tuple = (72.0, 92.0)
    theta_ics_edges_deg: tuple = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0)
    sdh_window_fwhm: float = 1.5
    adjacency_exclusion: bool = True
    require_scd: bool = True
    dphi_bins: int = 24
    mixing: bool = True
    mixing_passes: int = 10
    mixing_seed: int = 0
    resolution: ResolutionConfig = field(default_factory=ResolutionConfig)

    def __post_init__(self):
        lo, hi = self.theta_window_deg
        if not lo < hi:
            raise AnalysisError(f"theta window low must be < high, got {self.theta_window_deg}")
        e = np.asarray(self.theta_ics_edges_deg, dtype=float)
        if e.ndim != 1 or len(e) < 2 or np.any(np.diff(e) <= 0):
            raise AnalysisError("theta_ics_edges_deg must be strictly increasing with >= 2 edges")
        if self.dphi_bins < 3:
            raise AnalysisError("need at least 3 dphi bins")
        if self.mixing_passes < 1:
            raise AnalysisError("mixing_passes must be >= 1")
        if self.sdh_window_fwhm <= 0:
            raise AnalysisError("sdh_window_fwhm must be > 0")

    @property
    def theta_ics_edges(self) -> np.ndarray:
        return np.asarray(self.theta_ics_edges_deg, dtype=float)

    @property
    def dphi_edges(self) -> np.ndarray:
        return np.linspace(-PI, PI, self.dphi_bins + 1)

    @property
    def theta_window_rad(self) -> tuple[float, float]:
        return math.radians(self.theta_window_deg[0]), math.radians(self.theta_window_deg[1])


# --- selected events ------------------------------------------------------------

@dataclass
class SelectedEvent:
    """One accepted coincidence; angles in radians, azimuths in the lab frame."""

    theta_ics: float
    theta1: float
    theta2p: float
    phi1: float
    phi2p: float
    dphi: float
    weight: float = 1.0
    label: int | None = None
    phi1_photon: float | None = None
    phi2p_photon: float | None = None
    event_index: int = -1


@dataclass(frozen=True)
class Rejection:
    reason: str

    def __bool__(self):
        return False


_COLUMNS = ("event", "theta_ics", "theta1", "theta2p", "phi1", "phi2p", "dphi",
            "weight", "label", "phi1_ph", "phi2p_ph")


@dataclass
class Selection:
    """Columnar set of selected events (label -1 = unknown, NaN photon azimuths = no truth)."""

    event: np.ndarray
    theta_ics: np.ndarray
    theta1: np.ndarray
    theta2p: np.ndarray
    phi1: np.ndarray
    phi2p: np.ndarray
    dphi: np.ndarray
    weight: np.ndarray
    label: np.ndarray
    phi1_ph: np.ndarray
    phi2p_ph: np.ndarray

    def __len__(self) -> int:
        return len(self.event)

    @classmethod
    def empty(cls) -> "Selection":
        kw = {c: np.zeros(0) for c in _COLUMNS}
        kw["event"] = np.zeros(0, np.int64)
        kw["label"] = np.zeros(0, np.int8)
        return cls(**kw)

    @classmethod
    def from_events(cls, events) -> "Selection":
        events = list(events)
        if not events:
            return cls.empty()
        nan = math.nan

        def col(f, dtype=float):
            return np.array([f(e) for e in events], dtype=dtype)

        return cls(
            event=col(lambda e: e.event_index, np.int64),
            theta_ics=col(lambda e: e.theta_ics), theta1=col(lambda e: e.theta1),
            theta2p=col(lambda e: e.theta2p), phi1=col(lambda e: e.phi1), phi2p=col(lambda e: e.phi2p),
            dphi=col(lambda e: e.dphi), weight=col(lambda e: e.weight),
            label=col(lambda e: -1 if e.label is None else e.label, np.int8),
            phi1_ph=col(lambda e: nan if e.phi1_photon is None else e.phi1_photon),
            phi2p_ph=col(lambda e: nan if e.phi2p_photon is None else e.phi2p_photon),
        )

    @classmethod
    def concat(cls, parts) -> "Selection":
        parts = [p for p in parts if p is not None]
        if not parts:
            return cls.empty()
        return cls(**{c: np.concatenate([getattr(p, c) for p in parts]) for c in _COLUMNS})

    def take(self, mask) -> "Selection":
        return Selection(**{c: getattr(self, c)[mask] for c in _COLUMNS})

    def azimuths(self, frame: str) -> tuple[np.ndarray, np.ndarray]:
        """(φ1, φ2′) in the requested frame."""
        if frame == "lab":
            return self.phi1, self.phi2p
        if frame == "photon":
            if len(self) and np.isnan(self.phi1_ph).any():
                raise AnalysisError("photon-frame analysis needs truth azimuths on every event")
            return self.phi1_ph, self.phi2p_ph
        raise AnalysisError(f"unknown frame {frame!r}; choose from {FRAMES}")

    def for_sample(self, sample: str) -> "Selection":
        if sample == "all":
            return self
        if sample == "TCS":
            if len(self) and (self.label < 0).any():
                raise AnalysisError("TCS sample needs truth labels on every event")
            return self.take(self.label == LABEL_PURE_TCS)
        raise AnalysisError(f"unknown sample {sample!r}; choose from {SAMPLES}")

    def to_events(self) -> list[SelectedEvent]:
        out = []
        for i in range(len(self)):
            lab = int(self.label[i])
            p1, p2 = float(self.phi1_ph[i]), float(self.phi2p_ph[i])
            out.append(SelectedEvent(float(self.theta_ics[i]), float(self.theta1[i]), float(self.theta2p[i]),
                                     float(self.phi1[i]), float(self.phi2p[i]), float(self.dphi[i]),
                                     float(self.weight[i]), None if lab < 0 else lab,
                                     None if math.isnan(p1) else p1, None if math.isnan(p2) else p2,
                                     int(self.event[i])))
        return out


def wrap_array(x: np.ndarray) -> np.ndarray:
    """Vectorised :func:`wrap_angle` (same step-by-step arithmetic, so results agree bit for bit)."""
    x = np.array(x, dtype=float)
    while True:
        hi = x >= PI
        if not hi.any():
            break
        x[hi] -= TWO_PI
    while True:
        lo = x < -PI
        if not lo.any():
            break
        x[lo] += TWO_PI
    return x


# --- reconstruction ---------------------------------------------------------------

def azimuth_from_pixels(hit1, hit2) -> float:
    """Azimuth of the line from ``hit1`` (scatter site) to ``hit2``.

    Module (u, v) coordinates share the lab orientation convention for all
    modules (u follows the module's rotation about the vertical axis, v is
    vertical), so the result is directly comparable between modules.

    Accepts PixelHits or plain (u, v) pairs.

    Raises:
        AnalysisError: if both hits sit at the same position.
    """
    u1, v1 = (hit1.u, hit1.v) if isinstance(hit1, PixelHit) else hit1
    u2, v2 = (hit2.u, hit2.v) if isinstance(hit2, PixelHit) else hit2
    du = u2 - u1
    dv = v2 - v1
    if du == 0.0 and dv == 0.0:
        raise AnalysisError("azimuth undefined for identical pixels")
    return math.atan2(dv, du)


def _chebyshev(p1: int, p2: int, n: int = 16) -> int:
    r1, c1 = divmod(p1, n)
    r2, c2 = divmod(p2, n)
    return max(abs(r1 - r2), abs(c1 - c2))


def sdh_fwhm(volume: int, expected: float, e_scd: float, res: ResolutionConfig) -> float:
    """FWHM of a DM's summed double hit, with the SCD resolution folded in for DM0."""
    f = res.frac(volume) * math.sqrt(ELECTRON_MASS_KEV * expected)
    if volume == VOL_DM0 and e_scd > 0.0:
        g = res.scd_fwhm_frac_at_511 * math.sqrt(ELECTRON_MASS_KEV * e_scd)
        f = math.sqrt(f * f + g * g)
    return max(f, SDH_FLOOR_REL * expected)


def _scatter_site(hits):
    """(scatter-site hit, other hit): the larger deposit is taken as the scatter."""
    a, b = hits
    return (a, b) if a.energy >= b.energy else (b, a)


def reconstruct(ev: DetectorEvent, cuts: SelectionCuts, truth: dict | None = None):
    """Reconstruct one digitized event.

    DM1 hosts γ1 (incident 511 keV); DM0, behind the scatter detector,
    hosts γ2′ (incident k = 511 keV − E_SCD).  Without an SCD hit θ_ICS
    is 0.  In each module the pixel with the larger deposit is taken as
    the scatter site and that deposit as the scattered photon's energy,
    so the polar angle follows from the recoil deposit k − E_larger.

    Args:
        ev: digitized event.
        cuts: selection settings.
        truth: optional mapping with ``phi1_photon``/``phi2_photon``
            truth azimuths carried into the result.

    Returns:
        SelectedEvent, or a falsy :class:`Rejection` naming the failed cut.
    """
    res = cuts.resolution
    if cuts.require_scd and ev.scd is None:
        return Rejection(REJECT_NO_SCD)
    if len(ev.dm0) != 2 or len(ev.dm1) != 2:
        return Rejection(REJECT_MULTIPLICITY)
    if cuts.adjacency_exclusion:
        for pair in (ev.dm0, ev.dm1):
            if _chebyshev(pair[0].pixel, pair[1].pixel) <= 1:
                return Rejection(REJECT_ADJACENCY)
    e_scd = ev.scd.energy if ev.scd is not None else 0.0
    k1 = ELECTRON_MASS_KEV
    k2 = ELECTRON_MASS_KEV - e_scd
    for vol, pair, k in ((VOL_DM1, ev.dm1, k1), (VOL_DM0, ev.dm0, k2)):
        s = pair[0].energy + pair[1].energy
        if abs(s - k) > cuts.sdh_window_fwhm * sdh_fwhm(vol, k, e_scd, res):
            return Rejection(REJECT_SDH_WINDOW)
    cs1, other1 = _scatter_site(ev.dm1)
    cs2, other2 = _scatter_site(ev.dm0)
    # the larger deposit is read as the scattered photon's energy: the
    # recoil deposit it implies must lie within [0, Compton edge]
    if k2 <= 0.0 or e_scd > compton_edge(k1) * EDGE_TOL:
        return Rejection(REJECT_COMPTON_EDGE)
    d1 = k1 - cs1.energy
    d2 = k2 - cs2.energy
    if d1 < 0.0 or d2 < 0.0 or d1 > compton_edge(k1) * EDGE_TOL or d2 > compton_edge(k2) * EDGE_TOL:
        return Rejection(REJECT_COMPTON_EDGE)
    theta_ics = scatter_angle_from_deposit(e_scd, k1) if e_scd > 0.0 else 0.0
    theta1 = scatter_angle_from_deposit(d1, k1)
    theta2p = scatter_angle_from_deposit(d2, k2)
    lo, hi = cuts.theta_window_rad
    if not (lo <= theta1 <= hi and lo <= theta2p <= hi):
        return Rejection(REJECT_THETA_WINDOW)
    phi1 = azimuth_from_pixels(cs1, other1)
    phi2p = azimuth_from_pixels(cs2, other2)
    t = truth or {}
    return SelectedEvent(theta_ics, theta1, theta2p, phi1, phi2p, wrap_angle(phi1 - phi2p),
                         ev.weight, ev.label, t.get("phi1_photon"), t.get("phi2_photon"), ev.event_index)


def _edge_array(k: np.ndarray) -> np.ndarray:
    r = 2.0 * k / ELECTRON_MASS_KEV
    return k * r / (1.0 + r)


def _angle_array(e: np.ndarray, k: np.ndarray) -> np.ndarray:
    c = 1.0 - ELECTRON_MASS_KEV * (1.0 / (k - e) - 1.0 / k)
    return np.arccos(np.clip(c, -1.0, 1.0))


def reconstruct_arrays(events: np.ndarray, hits: np.ndarray, cuts: SelectionCuts) -> tuple[Selection, dict]:
    """Vectorised :func:`reconstruct` over kernel output arrays.

    Args:
        events: EVENT_DTYPE rows sorted by event index.
        hits: HIT_DTYPE rows grouped by event in the same order; within a
            module, hits keep their digitization order.
        cuts: selection settings.

    Returns:
        (selection, counts) where counts maps "accepted" and each rejection
        reason to the number of events.
    """
    n = len(events)
    counts = {r: 0 for r in REJECT_REASONS}
    counts["accepted"] = 0
    if n == 0:
        return Selection.empty(), counts
    res = cuts.resolution
    row = np.searchsorted(events["event"], hits["event"])
    vol = hits["volume"]
    energy = hits["energy"]

    alive = np.ones(n, bool)

    def reject(mask, reason):
        m = alive & mask
        counts[reason] = int(m.sum())
        alive[m] = False

    is_scd = vol == VOL_SCD
    has_scd = np.zeros(n, bool)
    has_scd[row[is_scd]] = True
    e_scd = np.zeros(n)
    e_scd[row[is_scd]] = energy[is_scd]
    if cuts.require_scd:
        reject(~has_scd, REJECT_NO_SCD)

    pairs = {}
    for v in (VOL_DM0, VOL_DM1):
        idx = np.flatnonzero(vol == v)
        cnt = np.bincount(row[idx], minlength=n)
        first = np.zeros(n, np.int64)
        ok = cnt == 2
        # index of each event's first hit in this module
        start = np.searchsorted(row[idx], np.arange(n), side="left")
        first[ok] = idx[start[ok]]
        second = first.copy()
        second[ok] = idx[start[ok] + 1]
        pairs[v] = (first, second, ok)
    reject(~(pairs[VOL_DM0][2] & pairs[VOL_DM1][2]), REJECT_MULTIPLICITY)

    # everything below only reads rows that still have two hits per module
    def gather(v, field):
        a, b, _ = pairs[v]
        return hits[field][a], hits[field][b]

    if cuts.adjacency_exclusion:
        adj = np.zeros(n, bool)
        for v in (VOL_DM0, VOL_DM1):
            pa, pb = gather(v, "pixel")
            pa = pa.astype(np.int64)
            pb = pb.astype(np.int64)
            cheb = np.maximum(np.abs(pa // 16 - pb // 16), np.abs(pa % 16 - pb % 16))
            adj |= cheb <= 1
        reject(adj, REJECT_ADJACENCY)

    k1 = np.full(n, ELECTRON_MASS_KEV)
    k2 = ELECTRON_MASS_KEV - e_scd
    ea1, eb1 = gather(VOL_DM1, "energy")
    ea2, eb2 = gather(VOL_DM0, "energy")

    # SDH window, same arithmetic as sdh_fwhm()
    f1 = res.frac(VOL_DM1) * np.sqrt(ELECTRON_MASS_KEV * k1)
    f1 = np.maximum(f1, SDH_FLOOR_REL * k1)
    with np.errstate(invalid="ignore"):
        f2 = res.frac(VOL_DM0) * np.sqrt(ELECTRON_MASS_KEV * k2)
        g = res.scd_fwhm_frac_at_511 * np.sqrt(ELECTRON_MASS_KEV * e_scd)
        f2 = np.where(e_scd > 0.0, np.sqrt(f2 * f2 + g * g), f2)
    f2 = np.maximum(f2, SDH_FLOOR_REL * k2)
    w = cuts.sdh_window_fwhm
    bad_sdh = (np.abs(ea1 + eb1 - k1) > w * f1) | (np.abs(ea2 + eb2 - k2) > w * f2)
    reject(bad_sdh, REJECT_SDH_WINDOW)

    first1 = ea1 >= eb1
    first2 = ea2 >= eb2
    cs1 = np.where(first1, ea1, eb1)
    cs2 = np.where(first2, ea2, eb2)
    d1 = k1 - cs1
    d2 = k2 - cs2
    with np.errstate(invalid="ignore"):
        bad_edge = ((k2 <= 0.0) | (e_scd > _edge_array(k1) * EDGE_TOL)
                    | (d1 < 0.0) | (d2 < 0.0)
                    | (d1 > _edge_array(k1) * EDGE_TOL) | (d2 > _edge_array(k2) * EDGE_TOL))
    reject(bad_edge, REJECT_COMPTON_EDGE)

    keep = np.flatnonzero(alive)
    k1k, k2k, escd = k1[keep], k2[keep], e_scd[keep]
    theta_ics = np.where(escd > 0.0, _angle_array(escd, k1k), 0.0)
    theta1 = _angle_array(d1[keep], k1k)
    theta2p = _angle_array(d2[keep], k2k)
    lo, hi = cuts.theta_window_rad
    in_win = (theta1 >= lo) & (theta1 <= hi) & (theta2p >= lo) & (theta2p <= hi)
    counts[REJECT_THETA_WINDOW] = int((~in_win).sum())
    keep = keep[in_win]
    theta_ics, theta1, theta2p = theta_ics[in_win], theta1[in_win], theta2p[in_win]

    def azimuth(v, first_is_cs):
        a, b, _ = pairs[v]
        a, b = a[keep], b[keep]
        fc = first_is_cs[keep]
        cs = np.where(fc, a, b)
        ot = np.where(fc, b, a)
        return np.arctan2(hits["v"][ot] - hits["v"][cs], hits["u"][ot] - hits["u"][cs])

    phi1 = azimuth(VOL_DM1, first1)
    phi2p = azimuth(VOL_DM0, first2)
    ev = events[keep]
    counts["accepted"] = len(keep)
    sel = Selection(event=ev["event"].astype(np.int64), theta_ics=theta_ics, theta1=theta1, theta2p=theta2p,
                    phi1=phi1, phi2p=phi2p, dphi=wrap_array(phi1 - phi2p), weight=ev["weight"].astype(float),
                    label=ev["label"].astype(np.int8), phi1_ph=ev["p1_ph"].astype(float),
                    phi2p_ph=ev["p2_ph"].astype(float))
    return sel, counts


def select_truth(events: np.ndarray, cuts: SelectionCuts) -> Selection:
    """Perfect-detector selection from per-event truth summaries.

    Uses the true polar angles of the two analyzing scatters (θ window on
    both) and the true θ_ICS; azimuths are the truth lab and photon-frame
    values.  Events missing either analyzing scatter are dropped.
    """
    t1 = events["t1"]
    t2 = events["t2"]
    lo, hi = cuts.theta_window_rad
    with np.errstate(invalid="ignore"):
        m = (np.isfinite(t1) & np.isfinite(t2) & np.isfinite(events["t_ics"])
             & (t1 >= lo) & (t1 <= hi) & (t2 >= lo) & (t2 <= hi))
    ev = events[m]
    p1 = ev["p1_lab"].astype(float)
    p2 = ev["p2_lab"].astype(float)
    return Selection(event=ev["event"].astype(np.int64), theta_ics=ev["t_ics"].astype(float),
                     theta1=ev["t1"].astype(float), theta2p=ev["t2"].astype(float), phi1=p1, phi2p=p2,
                     dphi=wrap_array(p1 - p2), weight=ev["weight"].astype(float),
                     label=ev["label"].astype(np.int8), phi1_ph=ev["p1_ph"].astype(float),
                     phi2p_ph=ev["p2_ph"].astype(float))


# --- histograms -----------------------------------------------------------------

def _bin_index(edges: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Closed-left bin index; -1 outside [edges[0], edges[-1])."""
    i = np.searchsorted(edges, x, side="right") - 1
    i[(i < 0) | (i >= len(edges) - 1)] = -1
    return i


@dataclass
class Hist1D:
    edges: np.ndarray
    counts: np.ndarray
    sumw2: np.ndarray

    @classmethod
    def zeros(cls, edges) -> "Hist1D":
        edges = np.asarray(edges, dtype=float)
        return cls(edges, np.zeros(len(edges) - 1), np.zeros(len(edges) - 1))

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(self.sumw2)

    def fill(self, x, w=None) -> None:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        w = np.ones_like(x) if w is None else np.broadcast_to(np.asarray(w, dtype=float), x.shape)
        i = _bin_index(self.edges, x)
        ok = i >= 0
        nb = len(self.counts)
        self.counts += np.bincount(i[ok], weights=w[ok], minlength=nb)
        self.sumw2 += np.bincount(i[ok], weights=w[ok] * w[ok], minlength=nb)

    def rebin(self, factor: int) -> "Hist1D":
        nb = len(self.counts)
        if factor < 1 or nb % factor:
            raise AnalysisError(f"cannot rebin {nb} bins by {factor}")
        return Hist1D(self.edges[::factor].copy(), self.counts.reshape(-1, factor).sum(axis=1),
                      self.sumw2.reshape(-1, factor).sum(axis=1))

    def total(self) -> float:
        return float(self.counts.sum())


@dataclass
class Hist2D:
    """Weighted (θ_ICS [deg] × Δφ [rad]) histogram."""

    theta_edges: np.ndarray
    dphi_edges: np.ndarray
    counts: np.ndarray
    sumw2: np.ndarray
    insufficient: np.ndarray | None = None

    @classmethod
    def zeros(cls, theta_edges, dphi_edges) -> "Hist2D":
        te = np.asarray(theta_edges, dtype=float)
        de = np.asarray(dphi_edges, dtype=float)
        shape = (len(te) - 1, len(de) - 1)
        return cls(te, de, np.zeros(shape), np.zeros(shape))

    @classmethod
    def for_cuts(cls, cuts: SelectionCuts) -> "Hist2D":
        return cls.zeros(cuts.theta_ics_edges, cuts.dphi_edges)

    @property
    def shape(self) -> tuple[int, int]:
        return self.counts.shape

    def fill(self, theta_ics_deg, dphi, w=None) -> None:
        t = np.atleast_1d(np.asarray(theta_ics_deg, dtype=float))
        p = np.atleast_1d(np.asarray(dphi, dtype=float))
        w = np.ones_like(t) if w is None else np.broadcast_to(np.asarray(w, dtype=float), t.shape)
        it = _bin_index(self.theta_edges, t)
        ip = _bin_index(self.dphi_edges, p)
        ok = (it >= 0) & (ip >= 0)
        nt, npb = self.shape
        flat = it[ok] * npb + ip[ok]
        self.counts += np.bincount(flat, weights=w[ok], minlength=nt * npb).reshape(nt, npb)
        self.sumw2 += np.bincount(flat, weights=w[ok] * w[ok], minlength=nt * npb).reshape(nt, npb)

    def slice(self, i: int) -> Hist1D:
        return Hist1D(self.dphi_edges.copy(), self.counts[i].copy(), self.sumw2[i].copy())

    def same_binning(self, other: "Hist2D") -> bool:
        return (np.array_equal(self.theta_edges, other.theta_edges)
                and np.array_equal(self.dphi_edges, other.dphi_edges))

    def __add__(self, other: "Hist2D") -> "Hist2D":
        if not self.same_binning(other):
            raise AnalysisError("cannot add histograms with different binning")
        ins = None
        if self.insufficient is not None or other.insufficient is not None:
            a = self.insufficient if self.insufficient is not None else np.zeros(self.shape[0], bool)
            b = other.insufficient if other.insufficient is not None else np.zeros(self.shape[0], bool)
            ins = a & b
        return Hist2D(self.theta_edges, self.dphi_edges, self.counts + other.counts,
                      self.sumw2 + other.sumw2, ins)

    def total(self) -> float:
        return float(self.counts.sum())


def build_histograms(events, cuts: SelectionCuts, frame: str = "lab") -> Hist2D:
    """Fill θ_ICS × Δφ with event weights.

    Args:
        events: a :class:`Selection` or an iterable of :class:`SelectedEvent`.
        cuts: binning.
        frame: "lab" (reconstructed azimuths) or "photon" (truth azimuths).
    """
    sel = events if isinstance(events, Selection) else Selection.from_events(events)
    h = Hist2D.for_cuts(cuts)
    if len(sel):
        if frame == "lab":
            dphi = sel.dphi
        else:
            p1, p2 = sel.azimuths(frame)
            dphi = wrap_array(p1 - p2)
        h.fill(sel.theta_ics * RAD2DEG, dphi, sel.weight)
    return h


def mix_events(events, cuts: SelectionCuts, rng: np.random.Generator | None = None,
               frame: str = "lab") -> Hist2D:
    """Event-mixed Δφ histogram.

    Within each θ_ICS bin the events are shuffled once, then φ1 of event i
    is paired with φ2′ of event i+s (cyclically) for s = 1..M, each pair
    weighted w_i·w_j.  The M passes reuse the same single-arm azimuths, so
    the stored sum of squared weights is multiplied by M to keep the
    statistical error honest.  Bins with fewer than two events are flagged
    in ``insufficient``.
    """
    sel = events if isinstance(events, Selection) else Selection.from_events(events)
    rng = rng if rng is not None else np.random.default_rng(cuts.mixing_seed)
    h = Hist2D.for_cuts(cuts)
    h.insufficient = np.zeros(h.shape[0], bool)
    if len(sel) == 0:
        h.insufficient[:] = True
        return h
    p1, p2 = sel.azimuths(frame)
    tdeg = sel.theta_ics * RAD2DEG
    it = _bin_index(h.theta_edges, tdeg)
    m = cuts.mixing_passes
    for b in range(h.shape[0]):
        idx = np.flatnonzero(it == b)
        if len(idx) < 2:
            h.insufficient[b] = True
            continue
        idx = idx[rng.permutation(len(idx))]
        a1, w = p1[idx], sel.weight[idx]
        a2 = p2[idx]
        n = len(idx)
        one = Hist1D.zeros(h.dphi_edges)
        for s in range(1, m + 1):
            if s % n == 0:
                continue
            j = np.roll(np.arange(n), -s)
            one.fill(wrap_array(a1 - a2[j]), w * w[j])
        h.counts[b] = one.counts
        h.sumw2[b] = one.sumw2 * m
    return h


def acceptance_correct(real: Hist2D, mixed: Hist2D) -> Hist2D:
    """N_corr = N_real / N_mixed × Σ_Δφ N_mixed, slice by slice in θ_ICS.

    Errors treat real and mixed contents as independent.

    Raises:
        AcceptanceError: listing (θ bin, Δφ bin) pairs where mixed is empty
            but real is not.
    """
    if not real.same_binning(mixed):
        raise AnalysisError("real and mixed histograms have different binning")
    bad = np.argwhere((real.counts != 0) & (mixed.counts <= 0))
    if len(bad):
        raise AcceptanceError([tuple(int(x) for x in b) for b in bad])
    s = mixed.counts.sum(axis=1, keepdims=True)
    nz = mixed.counts > 0
    safe = np.where(nz, mixed.counts, 1.0)
    scale = np.where(nz, s / safe, 0.0)
    counts = real.counts * scale
    var = scale * scale * real.sumw2 + np.where(nz, (real.counts * s / (safe * safe)) ** 2 * mixed.sumw2, 0.0)
    return Hist2D(real.theta_edges, real.dphi_edges, counts, var)


# --- fitting ------------------------------------------------------------------------

@dataclass
class FitResult:
    A: float
    B: float
    covariance: np.ndarray
    chi2: float
    ndof: int

    @property
    def sigma_A(self) -> float:
        return math.sqrt(self.covariance[0, 0])

    @property
    def sigma_B(self) -> float:
        return math.sqrt(self.covariance[1, 1])


def fit_modulation(h: Hist1D) -> FitResult:
    """Weighted least squares of A·cos(2Δφ) + B on bin centres.

    Bins with zero sum of squared weights are treated as empty and left out.

    Raises:
        FitError: fewer than three usable bins or a singular design.
    """
    use = h.sumw2 > 0
    if use.sum() < 3:
        raise FitError(f"need >= 3 nonempty bins, have {int(use.sum())}")
    x = h.centers[use]
    y = h.counts[use]
    wt = 1.0 / h.sumw2[use]
    X = np.column_stack([np.cos(2.0 * x), np.ones_like(x)])
    XtW = X.T * wt
    M = XtW @ X
    if np.linalg.cond(M) > 1e12:
        raise FitError("rank-deficient modulation fit")
    cov = np.linalg.inv(M)
    beta = np.linalg.solve(M, XtW @ y)
    r = y - X @ beta
    chi2 = float(np.sum(wt * r * r))
    cov = 0.5 * (cov + cov.T)
    return FitResult(float(beta[0]), float(beta[1]), cov, chi2, int(use.sum()) - 2)


def enhancement_ratio(f: FitResult) -> tuple[float, float]:
    """R = (B − A)/(B + A) with first-order error propagation."""
    a, b = f.A, f.B
    s = a + b
    if s <= 0:
        raise AnalysisError(f"A + B = {s!r} <= 0: enhancement ratio undefined")
    r = (b - a) / s
    da = -2.0 * b / (s * s)
    db = 2.0 * a / (s * s)
    c = f.covariance
    var = da * da * c[0, 0] + db * db * c[1, 1] + 2.0 * da * db * c[0, 1]
    return r, math.sqrt(max(var, 0.0))


def _val_err(x) -> tuple[float, float]:
    if isinstance(x, (tuple, list)):
        return float(x[0]), float(x[1])
    return float(x), 0.0


def deconvolve_tcs(r_expt_all, r_sim_all, r_sim_tcs, f_sim_tcs) -> tuple[float, float]:
    """R_TCS = (R_expt_all − R_sim_all)/f_TCS + R_sim_TCS.

    Each argument is a value or a (value, sigma) pair; the returned sigma
    propagates all four independently to first order.
    """
    re, se = _val_err(r_expt_all)
    ra, sa = _val_err(r_sim_all)
    rt, st = _val_err(r_sim_tcs)
    f, sf = _val_err(f_sim_tcs)
    if not f > 0.0:
        raise AnalysisError(f"f_sim_tcs must be > 0, got {f!r}")
    d = re - ra
    r = d / f + rt
    var = (se / f) ** 2 + (sa / f) ** 2 + st * st + (d / (f * f) * sf) ** 2
    return r, math.sqrt(var)


# --- R series -------------------------------------------------------------------------

@dataclass
class RPoint:
    theta_lo: float
    theta_hi: float
    R: float
    sigma_R: float
    A: float = math.nan
    B: float = math.nan
    cov_AB: tuple = (math.nan, math.nan, math.nan)
    chi2: float = math.nan
    ndof: int = 0
    sum_w: float = 0.0
    corrected: bool = False
    R_raw: float = math.nan
    sigma_R_raw: float = math.nan
    f_tcs: float = math.nan
    sigma_f_tcs: float = math.nan

    @property
    def theta_center(self) -> float:
        return 0.5 * (self.theta_lo + self.theta_hi)

    @property
    def half_width(self) -> float:
        return 0.5 * (self.theta_hi - self.theta_lo)


@dataclass
class RSeries:
    mode: str
    frame: str
    sample: str
    theta_edges: list
    points: list = field(default_factory=list)

    def point_for(self, theta_lo: float) -> RPoint | None:
        for p in self.points:
            if p.theta_lo == theta_lo:
                return p
        return None

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        return {
            "mode": self.mode, "frame": self.frame, "sample": self.sample,
            "theta_edges_deg": [float(x) for x in self.theta_edges],
            "points": [{
                "theta_lo": p.theta_lo, "theta_hi": p.theta_hi, "theta_center": p.theta_center,
                "half_width": p.half_width, "R": clean(p.R), "sigma_R": clean(p.sigma_R),
                "A": clean(p.A), "B": clean(p.B), "cov_AB": [clean(x) for x in p.cov_AB],
                "chi2": clean(p.chi2), "ndof": p.ndof, "sum_w": p.sum_w, "corrected": p.corrected,
                "R_raw": clean(p.R_raw), "sigma_R_raw": clean(p.sigma_R_raw),
                "f_tcs": clean(p.f_tcs), "sigma_f_tcs": clean(p.sigma_f_tcs),
            } for p in self.points],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RSeries":
        def num(v):
            return math.nan if v is None else float(v)

        pts = [RPoint(float(p["theta_lo"]), float(p["theta_hi"]), num(p["R"]), num(p["sigma_R"]),
                      num(p.get("A")), num(p.get("B")), tuple(num(x) for x in p.get("cov_AB", [None] * 3)),
                      num(p.get("chi2")), int(p.get("ndof", 0)), float(p.get("sum_w", 0.0)),
                      bool(p.get("corrected", False)), num(p.get("R_raw")), num(p.get("sigma_R_raw")),
                      num(p.get("f_tcs")), num(p.get("sigma_f_tcs")))
               for p in d["points"]]
        return cls(d["mode"], d["frame"], d["sample"], [float(x) for x in d["theta_edges_deg"]], pts)


@dataclass
class TcsFraction:
    """Mergeable per-θ_ICS-bin sums for the weighted pure-TCS fraction."""

    sw: np.ndarray
    swt: np.ndarray
    sw2: np.ndarray
    sw2t: np.ndarray

    @classmethod
    def zeros(cls, nbins: int) -> "TcsFraction":
        return cls(*(np.zeros(nbins) for _ in range(4)))

    def fill(self, sel: Selection, theta_edges: np.ndarray) -> None:
        if len(sel) == 0:
            return
        i = _bin_index(theta_edges, sel.theta_ics * RAD2DEG)
        ok = i >= 0
        i, w = i[ok], sel.weight[ok]
        t = (sel.label[ok] == LABEL_PURE_TCS).astype(float)
        nb = len(self.sw)
        self.sw += np.bincount(i, weights=w, minlength=nb)
        self.swt += np.bincount(i, weights=w * t, minlength=nb)
        self.sw2 += np.bincount(i, weights=w * w, minlength=nb)
        self.sw2t += np.bincount(i, weights=w * w * t, minlength=nb)

    def __add__(self, other: "TcsFraction") -> "TcsFraction":
        return TcsFraction(self.sw + other.sw, self.swt + other.swt, self.sw2 + other.sw2, self.sw2t + other.sw2t)

    def values(self) -> tuple[np.ndarray, np.ndarray]:
        with np.errstate(invalid="ignore", divide="ignore"):
            f = self.swt / self.sw
            var = (self.sw2t * (1.0 - 2.0 * f) + f * f * self.sw2) / (self.sw * self.sw)
        return f, np.sqrt(np.maximum(var, 0.0))


def _fit_slice(h: Hist1D):
    try:
        fr = fit_modulation(h)
        r, s = enhancement_ratio(fr)
    except AnalysisError:
        return None
    return fr, r, s


def series_from_histograms(real: Hist2D, mixed: Hist2D | None = None, tcs: TcsFraction | None = None,
                           mode: str = "", frame: str = "lab", sample: str = "all") -> RSeries:
    """Fit every θ_ICS slice; corrected when a mixed histogram is given.

    A slice whose mixed histogram cannot correct it (too few events, empty
    mixed bins) falls back to the raw fit and is marked ``corrected=False``.
    Slices that cannot be fitted at all are omitted.
    """
    f, sf = tcs.values() if tcs is not None else (None, None)
    pts = []
    for i in range(real.shape[0]):
        raw = real.slice(i)
        if raw.total() <= 0:
            continue
        fit_raw = _fit_slice(raw)
        if fit_raw is None:
            continue
        best, corrected = fit_raw, False
        if mixed is not None and not (mixed.insufficient is not None and mixed.insufficient[i]):
            sub_r = Hist2D(real.theta_edges[i:i + 2], real.dphi_edges, real.counts[i:i + 1], real.sumw2[i:i + 1])
            sub_m = Hist2D(real.theta_edges[i:i + 2], real.dphi_edges, mixed.counts[i:i + 1], mixed.sumw2[i:i + 1])
            try:
                corr = acceptance_correct(sub_r, sub_m).slice(0)
                fit_c = _fit_slice(corr)
            except AcceptanceError:
                fit_c = None
            if fit_c is not None:
                best, corrected = fit_c, True
        fr, r, s = best
        c = fr.covariance
        p = RPoint(float(real.theta_edges[i]), float(real.theta_edges[i + 1]), r, s, fr.A, fr.B,
                   (float(c[0, 0]), float(c[0, 1]), float(c[1, 1])), fr.chi2, fr.ndof, raw.total(),
                   corrected, fit_raw[1], fit_raw[2])
        if f is not None:
            p.f_tcs = float(f[i])
            p.sigma_f_tcs = float(sf[i])
        pts.append(p)
    return RSeries(mode, frame, sample, [float(x) for x in real.theta_edges], pts)


def tcs_fraction(events: Selection, cuts: SelectionCuts) -> TcsFraction:
    tf = TcsFraction.zeros(len(cuts.theta_ics_edges) - 1)
    tf.fill(events, cuts.theta_ics_edges)
    return tf


def extract_r_series(events, cuts: SelectionCuts, frame: str = "lab", sample: str = "all",
                     correct: bool | None = None, rng: np.random.Generator | None = None,
                     mode: str = "") -> RSeries:
    """R per θ_ICS bin for one (frame, sample).

    Args:
        events: :class:`Selection` or iterable of :class:`SelectedEvent`
            (all accepted events; the TCS subset is taken here).
        cuts: selection and binning settings.
        frame: "lab" or "photon" (truth azimuths).
        sample: "all" or "TCS" (truth label pure_TCS).
        correct: apply the event-mixing acceptance correction; defaults to
            ``cuts.mixing``.
        rng: generator for the mixing shuffle (default seeded from cuts).
        mode: tag copied into the series.

    Returns:
        RSeries with f_TCS filled when labels are available.
    """
    sel = events if isinstance(events, Selection) else Selection.from_events(events)
    if frame not in FRAMES:
        raise AnalysisError(f"unknown frame {frame!r}")
    sub = sel.for_sample(sample)
    real = build_histograms(sub, cuts, frame)
    correct = cuts.mixing if correct is None else correct
    mixed = mix_events(sub, cuts, rng, frame) if correct else None
    tcs = tcs_fraction(sel, cuts) if len(sel) and (sel.label >= 0).all() else None
    return series_from_histograms(real, mixed, tcs, mode, frame, sample)


def mean_r_analytic(theta_lo_deg: float, theta_hi_deg: float, k1: float = 511.0, k2p: float = 511.0,
                    n: int = 41) -> float:
    """KN-weighted average of r_analytic over a symmetric θ window (both photons).

    The 90° and 0° coincidence rates are averaged separately over
    θ1, θ2′ ∈ window with weight sinθ and the ratio of the averages taken,
    which is what a fit to the pooled Δφ distribution measures.
    """
    from .cross_sections import EntangledDcsKinematics, entangled_dcs

    t = np.radians(np.linspace(theta_lo_deg, theta_hi_deg, n))
    wq = np.ones(n)
    wq[1:-1:2] = 4.0
    wq[2:-1:2] = 2.0
    num = den = 0.0
    for i, a in enumerate(t):
        for j, b in enumerate(t):
            w = wq[i] * wq[j] * math.sin(a) * math.sin(b)
            num += w * entangled_dcs(EntangledDcsKinematics(k1, k2p, a, b, 0.5 * PI))
            den += w * entangled_dcs(EntangledDcsKinematics(k1, k2p, a, b, 0.0))
    return num / den
