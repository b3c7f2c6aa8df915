"""Apparatus geometry: pixelated detector modules, scatter crystal, water sphere.

Lab frame: the source sits at the origin, gamma 2 travels along +z through
the scatter detector (SCD) into DM0, gamma 1 along -z into DM1; y is
vertical.  Each box carries its own orthonormal axes ``(u, v, w)`` with
``w`` pointing away from the source.  Pixel coordinates are reported in
the module's ``(u, v)`` plane, where ``u`` is the lab x axis rotated with
the module and ``v`` is the lab y axis, so azimuths from different modules
share one convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .kinematics import Vec3, dot

VOL_DM0 = 0
VOL_DM1 = 1
VOL_SCD = 2
VOL_SPHERE = 3
VOLUME_NAMES = {VOL_DM0: "dm0", VOL_DM1: "dm1", VOL_SCD: "scd", VOL_SPHERE: "sphere"}
VOLUME_IDS = {v: k for k, v in VOLUME_NAMES.items()}

PIXEL_SIZE_MM = 3.0
PIXELS_PER_SIDE = 16
CRYSTAL_DEPTH_MM = 20.0
DM_FACE_DISTANCE_MM = 38.0
SCD_CENTER_MM = 6.8
SCD_SIZE_MM = (3.0, 5.0, 3.0)  # (x, y, z): the 5 mm side is vertical


class GeometryError(ValueError):
    """Invalid or overlapping geometry."""


@dataclass(frozen=True)
class Box:
    name: str
    vid: int
    center: Vec3
    u: Vec3
    v: Vec3
    w: Vec3
    half: Vec3
    material: str
    pixels_u: int = 0
    pixels_v: int = 0
    pitch: float = 0.0

    @property
    def pixelated(self) -> bool:
        return self.pixels_u > 0

    @property
    def n_pixels(self) -> int:
        return self.pixels_u * self.pixels_v if self.pixelated else 1

    def to_local(self, p: Vec3) -> Vec3:
        q = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2])
        return (dot(q, self.u), dot(q, self.v), dot(q, self.w))

    def contains(self, p: Vec3, tol: float = 1e-7) -> bool:
        lu, lv, lw = self.to_local(p)
        return (abs(lu) <= self.half[0] + tol and abs(lv) <= self.half[1] + tol
                and abs(lw) <= self.half[2] + tol)

    def pixel_of(self, p: Vec3) -> int:
        """Pixel index ``row * pixels_u + col`` (0 for unsegmented boxes)."""
        if not self.pixelated:
            return 0
        lu, lv, _ = self.to_local(p)
        col = int(math.floor((lu + self.half[0]) / self.pitch))
        row = int(math.floor((lv + self.half[1]) / self.pitch))
        col = min(self.pixels_u - 1, max(0, col))
        row = min(self.pixels_v - 1, max(0, row))
        return row * self.pixels_u + col

    def pixel_center(self, pixel: int) -> tuple[float, float]:
        """(u, v) of a pixel centre in module coordinates, mm."""
        if not self.pixelated:
            return 0.0, 0.0
        row, col = divmod(pixel, self.pixels_u)
        return (-self.half[0] + (col + 0.5) * self.pitch,
                -self.half[1] + (row + 0.5) * self.pitch)


@dataclass(frozen=True)
class Sphere:
    name: str
    vid: int
    center: Vec3
    radius: float
    material: str

    n_pixels = 1

    def contains(self, p: Vec3, tol: float = 1e-7) -> bool:
        q = (p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2])
        return math.sqrt(dot(q, q)) <= self.radius + tol

    def pixel_of(self, p: Vec3) -> int:
        return 0


@dataclass
class GeometryConfig:
    kind: str  # "apparatus" or "perfect_sphere"
    volumes: list = field(default_factory=list)
    dm0_rotation_deg: float = 0.0
    preset: str | None = None

    def __post_init__(self):
        if self.kind not in ("apparatus", "perfect_sphere"):
            raise GeometryError(f"unknown geometry kind {self.kind!r}")
        ids = [v.vid for v in self.volumes]
        if len(set(ids)) != len(ids):
            raise GeometryError("duplicate volume ids")
        for vol in self.volumes:
            if isinstance(vol, Box) and vol.vid in (VOL_DM0, VOL_DM1) and vol.n_pixels != 256:
                raise GeometryError(f"{vol.name}: detector modules need 256 pixels, got {vol.n_pixels}")
        check_no_overlaps(self.volumes)

    def volume(self, vid: int):
        for v in self.volumes:
            if v.vid == vid:
                return v
        return None

    @property
    def has_scd(self) -> bool:
        return self.volume(VOL_SCD) is not None

    @property
    def materials(self) -> list[str]:
        seen = []
        for v in self.volumes:
            if v.material not in seen:
                seen.append(v.material)
        return seen


def _rot_y(angle: float) -> tuple[Vec3, Vec3, Vec3]:
    c, s = math.cos(angle), math.sin(angle)
    u = (c, 0.0, -s)
    v = (0.0, 1.0, 0.0)
    w = (s, 0.0, c)
    return u, v, w


def detector_module(name: str, vid: int, side: float, rotation_deg: float = 0.0,
                    face_distance: float = DM_FACE_DISTANCE_MM, material: str = "lyso") -> Box:
    """16x16 array of 3x3x20 mm^3 crystals, zero inter-pixel gap.

    ``side`` is +1 for the +z module and -1 for the -z module; the rotation
    turns the module about the vertical axis through the source.
    """
    u, v, w = _rot_y(math.radians(rotation_deg))
    if side < 0:
        # facing -z while keeping u = +x and v = +y
        w = (-w[0], -w[1], -w[2])
    half_face = 0.5 * PIXELS_PER_SIDE * PIXEL_SIZE_MM
    depth = face_distance + 0.5 * CRYSTAL_DEPTH_MM
    center = (w[0] * depth, w[1] * depth, w[2] * depth)
    return Box(name, vid, center, u, v, w, (half_face, half_face, 0.5 * CRYSTAL_DEPTH_MM),
               material, PIXELS_PER_SIDE, PIXELS_PER_SIDE, PIXEL_SIZE_MM)


def scatter_detector(center_mm: float = SCD_CENTER_MM, material: str = "lyso") -> Box:
    sx, sy, sz = SCD_SIZE_MM
    return Box("scd", VOL_SCD, (0.0, 0.0, center_mm), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0),
               (0.0, 0.0, 1.0), (0.5 * sx, 0.5 * sy, 0.5 * sz), material)


def apparatus(dm0_rotation_deg: float = 0.0, with_scd: bool = True, preset: str | None = None) -> GeometryConfig:
    vols = [detector_module("dm0", VOL_DM0, +1, dm0_rotation_deg),
            detector_module("dm1", VOL_DM1, -1, 0.0)]
    if with_scd:
        vols.append(scatter_detector())
    return GeometryConfig("apparatus", vols, dm0_rotation_deg, preset)


def perfect_sphere(radius_mm: float = 300.0, material: str = "water") -> GeometryConfig:
    return GeometryConfig("perfect_sphere", [Sphere("sphere", VOL_SPHERE, (0.0, 0.0, 0.0), radius_mm, material)],
                          preset="perfect_sphere")


PRESETS = {
    "back2back": lambda: apparatus(0.0, True, "back2back"),
    "rotated28": lambda: apparatus(28.0, True, "rotated28"),
    "no_scd": lambda: apparatus(0.0, False, "no_scd"),
    "perfect_sphere": lambda: perfect_sphere(),
}


def geometry_preset(name: str) -> GeometryConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise GeometryError(f"unknown geometry preset {name!r}; choose from {sorted(PRESETS)}") from None


def geometry_from_dict(spec) -> GeometryConfig:
    """Build a geometry from a preset name or an inline description."""
    if isinstance(spec, str):
        return geometry_preset(spec)
    kind = spec.get("kind", "apparatus")
    if kind == "perfect_sphere":
        return perfect_sphere(float(spec.get("radius_mm", 300.0)), spec.get("material", "water"))
    return apparatus(float(spec.get("dm0_rotation_deg", 0.0)), bool(spec.get("scd", True)), spec.get("preset"))


# --- intersection ------------------------------------------------------------

def ray_box(o: Vec3, d: Vec3, box: Box):
    q = (o[0] - box.center[0], o[1] - box.center[1], o[2] - box.center[2])
    t_in = -math.inf
    t_out = math.inf
    for axis, h in ((box.u, box.half[0]), (box.v, box.half[1]), (box.w, box.half[2])):
        oc = dot(q, axis)
        dc = dot(d, axis)
        if dc == 0.0:
            if oc < -h or oc > h:
                return None
            continue
        t1 = (-h - oc) / dc
        t2 = (h - oc) / dc
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > t_in:
            t_in = t1
        if t2 < t_out:
            t_out = t2
    if t_out < t_in or t_out <= 0.0:
        return None
    return (t_in if t_in > 0.0 else 0.0), t_out


def ray_sphere(o: Vec3, d: Vec3, sph: Sphere):
    q = (o[0] - sph.center[0], o[1] - sph.center[1], o[2] - sph.center[2])
    b = dot(q, d)
    c = dot(q, q) - sph.radius * sph.radius
    disc = b * b - c
    if disc < 0.0:
        return None
    sq = math.sqrt(disc)
    t0 = -b - sq
    t1 = -b + sq
    if t1 <= 0.0:
        return None
    return (t0 if t0 > 0.0 else 0.0), t1


def ray_volume_intersection(origin: Vec3, direction: Vec3, volume):
    """Entry/exit distances (mm) along a unit ray, or None on a miss.

    Entry is clamped to 0 when the origin is inside the volume; volumes
    entirely behind the origin count as misses.
    """
    if isinstance(volume, Sphere):
        return ray_sphere(origin, direction, volume)
    return ray_box(origin, direction, volume)


# --- overlap check ---------------------------------------------------------------

def _box_corners(b: Box):
    out = []
    for su in (-1, 1):
        for sv in (-1, 1):
            for sw in (-1, 1):
                out.append(tuple(b.center[i] + su * b.half[0] * b.u[i] + sv * b.half[1] * b.v[i]
                                 + sw * b.half[2] * b.w[i] for i in range(3)))
    return out


def _separated_on(axis: Vec3, a: Box, b: Box) -> bool:
    n = math.sqrt(dot(axis, axis))
    if n < 1e-12:
        return False
    ax = (axis[0] / n, axis[1] / n, axis[2] / n)
    pa = [dot(c, ax) for c in _box_corners(a)]
    pb = [dot(c, ax) for c in _box_corners(b)]
    return max(pa) <= min(pb) + 1e-9 or max(pb) <= min(pa) + 1e-9


def boxes_overlap(a: Box, b: Box) -> bool:
    """Separating-axis test for two oriented boxes (touching faces do not overlap)."""
    from .kinematics import cross
    axes = [a.u, a.v, a.w, b.u, b.v, b.w]
    axes += [cross(p, q) for p in (a.u, a.v, a.w) for q in (b.u, b.v, b.w)]
    return not any(_separated_on(ax, a, b) for ax in axes)


def check_no_overlaps(volumes) -> None:
    for i, a in enumerate(volumes):
        for b in volumes[i + 1:]:
            if isinstance(a, Box) and isinstance(b, Box):
                if boxes_overlap(a, b):
                    raise GeometryError(f"volumes {a.name} and {b.name} overlap")
            else:
                raise GeometryError("a sphere cannot share the world with other volumes")
