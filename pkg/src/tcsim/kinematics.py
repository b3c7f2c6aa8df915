"""Vector geometry, Compton kinematics and polarization-frame transport.

Vectors are plain ``(x, y, z)`` float tuples.  Every expression here is
written so the compiled kernel can repeat it operation for operation; keep
the evaluation order intact when editing (the two backends are compared
bit for bit).
"""

from __future__ import annotations

import math

Vec3 = tuple[float, float, float]

ELECTRON_MASS_KEV = 511.0
TWO_PI = 2.0 * math.pi
DEGENERATE_TOL = 1e-9

X_HAT: Vec3 = (1.0, 0.0, 0.0)
Y_HAT: Vec3 = (0.0, 1.0, 0.0)
Z_HAT: Vec3 = (0.0, 0.0, 1.0)


def dot(a: Vec3, b: Vec3) -> float:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


def cross(a: Vec3, b: Vec3) -> Vec3:
    return (a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0])


def norm(a: Vec3) -> float:
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


def unit(a: Vec3) -> Vec3:
    n = norm(a)
    return (a[0] / n, a[1] / n, a[2] / n)


def wrap_angle(phi: float) -> float:
    """Map an angle into [-pi, pi)."""
    while phi >= math.pi:
        phi -= TWO_PI
    while phi < -math.pi:
        phi += TWO_PI
    return phi


def any_perpendicular(d: Vec3) -> Vec3:
    """Deterministic unit vector perpendicular to ``d``.

    Built by rejecting the coordinate axis least aligned with ``d``
    (first axis wins ties), so for ``d = z`` this is ``x``.
    """
    ax, ay, az = abs(d[0]), abs(d[1]), abs(d[2])
    if ax <= ay and ax <= az:
        e = X_HAT
    elif ay <= az:
        e = Y_HAT
    else:
        e = Z_HAT
    p = dot(e, d)
    v = (e[0] - p * d[0], e[1] - p * d[1], e[2] - p * d[2])
    return unit(v)


def _check_energy(k: float) -> None:
    if not k > 0.0 or math.isinf(k):
        raise ValueError(f"photon energy must be positive and finite, got {k!r}")


def _check_theta(theta: float) -> None:
    if not 0.0 <= theta <= math.pi:
        raise ValueError(f"polar angle must lie in [0, pi], got {theta!r}")


def scattered_energy_mu(k: float, mu: float) -> float:
    """Compton-scattered energy for cos(theta) = ``mu`` (no validation)."""
    return k / (1.0 + (k / ELECTRON_MASS_KEV) * (1.0 - mu))


def compton_scattered_energy(k: float, theta: float) -> float:
    """Energy in keV of a photon of energy ``k`` after scattering by ``theta``."""
    _check_energy(k)
    _check_theta(theta)
    return scattered_energy_mu(k, math.cos(theta))


def compton_edge(k: float) -> float:
    """Largest energy a single Compton scatter can deposit."""
    r = 2.0 * k / ELECTRON_MASS_KEV
    return k * r / (1.0 + r)


def scatter_angle_from_deposit(e_dep: float, k: float) -> float:
    """Polar scatter angle implied by depositing ``e_dep`` out of ``k``.

    Raises:
        ValueError: for a negative deposit or one beyond the Compton edge.
    """
    _check_energy(k)
    edge = compton_edge(k)
    if e_dep < 0.0 or e_dep > edge * (1.0 + 1e-12):
        raise ValueError(f"deposit {e_dep!r} keV outside [0, {edge:.6g}] for k={k!r}")
    c = 1.0 - ELECTRON_MASS_KEV * (1.0 / (k - e_dep) - 1.0 / k)
    c = min(1.0, max(-1.0, c))
    return math.acos(c)


def reject_onto_plane(pol: Vec3, d: Vec3) -> tuple[Vec3, bool]:
    """Normalized component of ``pol`` perpendicular to ``d``.

    Returns the vector and a flag that is True when ``pol`` was (nearly)
    parallel to ``d`` and the deterministic fallback was used instead.
    """
    p = dot(pol, d)
    v = (pol[0] - p * d[0], pol[1] - p * d[1], pol[2] - p * d[2])
    n = norm(v)
    if n < DEGENERATE_TOL:
        return any_perpendicular(d), True
    return (v[0] / n, v[1] / n, v[2] / n), False


def transport_polarization_frame(pol_in: Vec3, dir_out: Vec3, diagnostics: dict | None = None) -> Vec3:
    """Carry a polarization vector onto a new propagation direction.

    The result is perpendicular to ``dir_out`` and lies in the plane spanned
    by ``dir_out`` and ``pol_in`` (no rotation about the new direction).
    If ``pol_in`` is parallel to ``dir_out`` a fallback perpendicular is
    returned and ``diagnostics["degenerate_pol_transport"]`` is incremented.
    """
    v, degenerate = reject_onto_plane(pol_in, dir_out)
    if degenerate and diagnostics is not None:
        diagnostics["degenerate_pol_transport"] = diagnostics.get("degenerate_pol_transport", 0) + 1
    return v


def scatter_direction_mu(d: Vec3, f: Vec3, mu: float, phi: float) -> Vec3:
    st = math.sqrt(max(0.0, 1.0 - mu * mu))
    cp = math.cos(phi)
    sp = math.sin(phi)
    e2 = cross(d, f)
    a = st * cp
    b = st * sp
    v = (a * f[0] + b * e2[0] + mu * d[0],
         a * f[1] + b * e2[1] + mu * d[1],
         a * f[2] + b * e2[2] + mu * d[2])
    return unit(v)


def scatter_direction(dir_parent: Vec3, frame_ref: Vec3, theta: float, phi: float) -> Vec3:
    """Unit vector at polar angle ``theta`` from ``dir_parent``.

    The azimuth ``phi`` is measured from ``frame_ref`` in the right-handed
    frame (frame_ref, dir_parent x frame_ref, dir_parent).
    """
    _check_theta(theta)
    if abs(dot(dir_parent, frame_ref)) > DEGENERATE_TOL:
        raise ValueError("frame_ref must be perpendicular to dir_parent")
    return scatter_direction_mu(dir_parent, frame_ref, math.cos(theta), phi)


def azimuth_in_frame(dir_parent: Vec3, frame_ref: Vec3, dir_scattered: Vec3) -> float:
    """Azimuth of ``dir_scattered`` about ``dir_parent`` measured from ``frame_ref``.

    Inverse of :func:`scatter_direction`; returns a value in [-pi, pi).
    """
    if norm(cross(dir_parent, dir_scattered)) < DEGENERATE_TOL:
        raise ValueError("azimuth undefined: scattered direction parallel to parent")
    e2 = cross(dir_parent, frame_ref)
    return wrap_angle(math.atan2(dot(dir_scattered, e2), dot(dir_scattered, frame_ref)))
