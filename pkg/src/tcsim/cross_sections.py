"""Klein-Nishina and entangled double-Compton cross sections, plus samplers.

Cross sections are relative: the common ``r_e^2 / 2`` factor is dropped and
totals are expressed in units of the Thomson cross section.  Only ratios
enter the enhancement ratio R.

Samplers take any ``rng`` exposing ``random() -> float in [0, 1)`` (an
:class:`tcsim.rng.EventRng`, ``numpy.random.Generator`` or
``random.Random``) and use constant-envelope rejection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

from .kinematics import (
    ELECTRON_MASS_KEV,
    TWO_PI,
    _check_energy,
    _check_theta,
    scattered_energy_mu,
)

XSEC_NORM = 40.0 / 9.0 - 3.0 * math.log(3.0)
KN_ENVELOPE = 2.0
MAX_TRIES = 1_000_000


class SamplerFault(RuntimeError):
    """A rejection loop exhausted its retry budget."""


def kn_mu(k: float, mu: float) -> float:
    """Unpolarized Klein-Nishina factor as a function of cos(theta)."""
    eps = scattered_energy_mu(k, mu) / k
    return eps * eps * (eps + 1.0 / eps - (1.0 - mu * mu))


def kn_unpolarized(k: float, theta: float) -> float:
    """(k'/k)^2 (k'/k + k/k' - sin^2 theta)."""
    _check_energy(k)
    _check_theta(theta)
    return kn_mu(k, math.cos(theta))


def kn_polarized(k: float, theta: float, phi: float) -> float:
    """Polarized Klein-Nishina factor; ``phi`` is measured from the incident polarization."""
    _check_energy(k)
    _check_theta(theta)
    mu = math.cos(theta)
    eps = scattered_energy_mu(k, mu) / k
    c = math.cos(phi)
    return eps * eps * (eps + 1.0 / eps - 2.0 * (1.0 - mu * mu) * c * c)


def kn_total(k: float) -> float:
    """Klein-Nishina total cross section in units of the Thomson cross section."""
    _check_energy(k)
    e = k / ELECTRON_MASS_KEV
    l2 = math.log1p(2.0 * e)
    if e < 1e-3:
        # series avoids the cancellation in the closed form
        return 1.0 - 2.0 * e + 5.2 * e * e - 13.3 * e ** 3
    return 0.75 * ((1.0 + e) / e ** 3 * (2.0 * e * (1.0 + e) / (1.0 + 2.0 * e) - l2)
                   + l2 / (2.0 * e) - (1.0 + 3.0 * e) / (1.0 + 2.0 * e) ** 2)


def _kn_antiderivative(u: float, kappa: float) -> float:
    # integral of kn over u = 1 + kappa (1 - mu), up to the 1/kappa Jacobian
    lu = math.log(u)
    return (-0.5 / (u * u) + lu - (2.0 / kappa) * (lu + 1.0 / u)
            + (u - 2.0 * lu - 1.0 / u) / (kappa * kappa))


def kn_mu_integral(k: float, mu_lo: float, mu_hi: float) -> float:
    """Closed-form integral of :func:`kn_mu` over cos(theta) in [mu_lo, mu_hi]."""
    kappa = k / ELECTRON_MASS_KEV
    u_lo = 1.0 + kappa * (1.0 - mu_lo)
    u_hi = 1.0 + kappa * (1.0 - mu_hi)
    return (_kn_antiderivative(u_lo, kappa) - _kn_antiderivative(u_hi, kappa)) / kappa


def kn_window_probability(k: float, mu_lo: float, mu_hi: float) -> float:
    """Probability that a Compton scatter at energy ``k`` lands in the cos(theta) window."""
    return kn_mu_integral(k, mu_lo, mu_hi) / kn_mu_integral(k, -1.0, 1.0)


@dataclass(frozen=True)
class EntangledDcsKinematics:
    """Kinematics of the correlated pair of analysing scatters.

    ``k1`` and ``k2p`` are the photon energies entering the two analysing
    scatters, ``theta1``/``theta2p`` their polar angles and ``dphi`` the
    angle between the scatter planes.
    """

    k1: float
    k2p: float
    theta1: float
    theta2p: float
    dphi: float = 0.0

    def __post_init__(self):
        _check_energy(self.k1)
        _check_energy(self.k2p)
        _check_theta(self.theta1)
        _check_theta(self.theta2p)

    @cached_property
    def k1p(self) -> float:
        return scattered_energy_mu(self.k1, math.cos(self.theta1))

    @cached_property
    def k2pp(self) -> float:
        return scattered_energy_mu(self.k2p, math.cos(self.theta2p))

    @cached_property
    def alpha1(self) -> float:
        return self.k1p / self.k1 + self.k1 / self.k1p

    @cached_property
    def alpha2p(self) -> float:
        return self.k2pp / self.k2p + self.k2p / self.k2pp

    @property
    def base(self) -> float:
        """The Delta-phi independent part of the bracket."""
        s1 = math.sin(self.theta1) ** 2
        s2 = math.sin(self.theta2p) ** 2
        return self.alpha1 * self.alpha2p - self.alpha1 * s2 - self.alpha2p * s1

    @property
    def modulation(self) -> float:
        return 2.0 * math.sin(self.theta1) ** 2 * math.sin(self.theta2p) ** 2


def entangled_dcs(kin: EntangledDcsKinematics) -> float:
    """Double Compton cross section of the annihilation Bell state.

    The momentum prefactor uses the scattered momenta k1'^2 k2''^2, which
    makes the Delta-phi integrated result factorize into two Klein-Nishina
    marginals.
    """
    bracket = kin.base + kin.modulation * math.sin(kin.dphi) ** 2
    return (kin.k1p ** 2 * kin.k2pp ** 2 * bracket
            / (4.0 * math.pi ** 2 * kin.k1 ** 2 * XSEC_NORM ** 2))


def r_analytic(theta1: float, theta2p: float, k1: float = 511.0, k2p: float = 511.0) -> float:
    """Yield ratio between Delta-phi = 90 deg and 0 deg for the entangled pair."""
    kin = EntangledDcsKinematics(k1, k2p, theta1, theta2p)
    a = kin.base
    if a <= 0.0:
        raise ValueError(f"degenerate kinematics: bracket {a!r} <= 0")
    return (a + kin.modulation) / a


def r_separable(theta1: float, theta2p: float, k1: float = 511.0, k2p: float = 511.0) -> float:
    """Same ratio for a separable pair with perpendicular, randomly oriented polarizations."""
    kin = EntangledDcsKinematics(k1, k2p, theta1, theta2p)
    s1 = math.sin(theta1) ** 2
    s2 = math.sin(theta2p) ** 2
    c = (kin.alpha1 - s1) * (kin.alpha2p - s2)
    return (c + 0.5 * s1 * s2) / (c - 0.5 * s1 * s2)


def r_max_symmetric(k: float = 511.0) -> tuple[float, float]:
    """Numerically locate the maximum of R over symmetric polar angles.

    Returns ``(theta_at_max, r_max)``.
    """
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(lambda t: -r_analytic(t, t, k, k),
                          bounds=(0.1, math.pi - 0.1), method="bounded",
                          options={"xatol": 1e-10})
    return float(res.x), float(-res.fun)


# --- samplers ---------------------------------------------------------------

def sample_mu_kn(k: float, rng, mu_lo: float = -1.0, mu_hi: float = 1.0) -> float:
    """cos(theta) distributed as the Klein-Nishina marginal, optionally truncated."""
    width = mu_hi - mu_lo
    for _ in range(MAX_TRIES):
        mu = mu_lo + width * rng.random()
        if KN_ENVELOPE * rng.random() < kn_mu(k, mu):
            return mu
    raise SamplerFault("Klein-Nishina rejection loop exhausted")


def sample_theta_kn(k: float, rng) -> float:
    """Polar angle with density proportional to kn_unpolarized(k, theta) sin(theta)."""
    _check_energy(k)
    return math.acos(sample_mu_kn(k, rng))


def phi_polarized_mu(k: float, mu: float, rng) -> float:
    eps = scattered_energy_mu(k, mu) / k
    alpha = eps + 1.0 / eps
    s2 = 2.0 * (1.0 - mu * mu)
    for _ in range(MAX_TRIES):
        phi = TWO_PI * rng.random() - math.pi
        c = math.cos(phi)
        if alpha * rng.random() < alpha - s2 * c * c:
            return phi
    raise SamplerFault("polarized azimuth rejection loop exhausted")


def sample_phi_polarized(k: float, theta: float, rng) -> float:
    """Azimuth from the incident polarization, density ~ alpha - 2 sin^2(theta) cos^2(phi)."""
    _check_energy(k)
    _check_theta(theta)
    return phi_polarized_mu(k, math.cos(theta), rng)


def dphi_conditional_mu(k1: float, mu1: float, k2p: float, mu2: float, rng) -> float:
    e1 = scattered_energy_mu(k1, mu1) / k1
    e2 = scattered_energy_mu(k2p, mu2) / k2p
    a1 = e1 + 1.0 / e1
    a2 = e2 + 1.0 / e2
    s1 = 1.0 - mu1 * mu1
    s2 = 1.0 - mu2 * mu2
    base = a1 * a2 - a1 * s2 - a2 * s1
    mod = 2.0 * s1 * s2
    env = base + mod
    for _ in range(MAX_TRIES):
        dphi = TWO_PI * rng.random() - math.pi
        s = math.sin(dphi)
        if env * rng.random() < base + mod * s * s:
            return dphi
    raise SamplerFault("conditional Delta-phi rejection loop exhausted")


def sample_dphi_conditional(theta1: float, theta2p: float, k1: float, k2p: float, rng) -> float:
    """Delta-phi at fixed polar angles, density ~ base + 2 sin^2 th1 sin^2 th2' sin^2 dphi."""
    EntangledDcsKinematics(k1, k2p, theta1, theta2p)
    return dphi_conditional_mu(k1, math.cos(theta1), k2p, math.cos(theta2p), rng)
