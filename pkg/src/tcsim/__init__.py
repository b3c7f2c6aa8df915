"""tcsim: double/triple Compton scattering of entangled annihilation photons.

Simulation (pair-state engine, transport, digitizer) and analysis (event
selection, event mixing, modulation fits, enhancement ratio R) for
polarization-correlation studies of 511 keV photon pairs.
"""

__version__ = "0.1.0"

from .kinematics import (  # noqa: F401
    azimuth_in_frame,
    compton_scattered_energy,
    scatter_angle_from_deposit,
    scatter_direction,
    transport_polarization_frame,
)
from .pair_state import PairMode  # noqa: F401
