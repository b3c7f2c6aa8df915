"""Regenerate the packaged attenuation tables (LYSO, water).

Photoelectric and incoherent mass attenuation coefficients come from the
Elam/Ravel/Sieber tables shipped with ``xraydb``.  Those tables stop being
reliable above 800 keV, so above that energy the photoelectric term is
extrapolated log-log from the 600-800 keV slope and the incoherent term is
scaled with the free-electron Klein-Nishina total cross section.

Usage::

    pip install xraydb
    python tools/make_material_tables.py src/tcsim/data
"""

import csv
import math
import sys
import warnings
from pathlib import Path

import numpy as np
import xraydb

ME = 511.0

MATERIALS = {
    # name: (formula as {element: atoms}, density g/cm^3)
    "lyso": ({"Lu": 1.8, "Y": 0.2, "Si": 1.0, "O": 5.0}, 7.1),
    "water": ({"H": 2.0, "O": 1.0}, 1.0),
}


def kn_sigma(k):
    e = k / ME
    l2 = math.log1p(2 * e)
    return ((1 + e) / e**3 * (2 * e * (1 + e) / (1 + 2 * e) - l2)
            + l2 / (2 * e) - (1 + 3 * e) / (1 + 2 * e) ** 2)


def mass_fractions(formula):
    masses = {el: n * xraydb.atomic_mass(el) for el, n in formula.items()}
    tot = sum(masses.values())
    return {el: m / tot for el, m in masses.items()}


def element_mu(el, energies_kev, kind):
    lo = energies_kev[energies_kev <= 800.0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        vals = np.asarray(xraydb.mu_elam(el, lo * 1e3, kind=kind), dtype=float)
        ref = np.asarray(xraydb.mu_elam(el, np.array([600e3, 800e3]), kind=kind), dtype=float)
    hi = energies_kev[energies_kev > 800.0]
    if kind == "photo":
        slope = math.log(ref[1] / ref[0]) / math.log(800.0 / 600.0)
        ext = ref[1] * (hi / 800.0) ** slope
    else:
        ext = ref[1] * np.array([kn_sigma(k) for k in hi]) / kn_sigma(800.0)
    return np.concatenate([vals, ext])


def main(outdir):
    outdir = Path(outdir)
    energies = np.unique(np.concatenate([np.geomspace(5.0, 1300.0, 96), [511.0, 800.0]]))
    for name, (formula, rho) in MATERIALS.items():
        w = mass_fractions(formula)
        pe = sum(w[el] * element_mu(el, energies, "photo") for el in w) * rho / 10.0
        co = sum(w[el] * element_mu(el, energies, "incoh") for el in w) * rho / 10.0
        with open(outdir / f"{name}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["energy_keV", "mu_pe_per_mm", "mu_compton_per_mm"])
            for e, a, b in zip(energies, pe, co):
                wr.writerow([f"{e:.6g}", f"{a:.6e}", f"{b:.6e}"])
        print(name, "511 keV: mu_pe=%.4g mu_c=%.4g /mm" % (np.interp(511, energies, pe), np.interp(511, energies, co)))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "src/tcsim/data")
