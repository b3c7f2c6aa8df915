"""Photon attenuation tables (photoelectric + Compton) with log-log interpolation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

HEADER = ["energy_keV", "mu_pe_per_mm", "mu_compton_per_mm"]


class MaterialTableError(ValueError):
    """Malformed attenuation table."""


@dataclass
class MaterialTable:
    name: str
    energy_keV: np.ndarray
    mu_pe: np.ndarray
    mu_compton: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.energy_keV = np.asarray(self.energy_keV, dtype=float)
        self.mu_pe = np.asarray(self.mu_pe, dtype=float)
        self.mu_compton = np.asarray(self.mu_compton, dtype=float)
        if len(self.energy_keV) < 2:
            raise MaterialTableError(f"{self.name}: need at least two rows")
        if np.any(np.diff(self.energy_keV) <= 0):
            raise MaterialTableError(f"{self.name}: energies must be strictly increasing")
        if np.any(self.energy_keV <= 0):
            raise MaterialTableError(f"{self.name}: energies must be positive")
        if np.any(self.mu_pe < 0) or np.any(self.mu_compton < 0):
            raise MaterialTableError(f"{self.name}: attenuation coefficients must be >= 0")
        # plain lists keep the scalar lookup fast and identical to the kernel's
        self._e = self.energy_keV.tolist()
        self._le = [math.log(e) for e in self._e]
        self._pe = self.mu_pe.tolist()
        self._co = self.mu_compton.tolist()

    def mu(self, energy: float) -> tuple[float, float]:
        """(mu_photoelectric, mu_compton) in 1/mm at ``energy`` keV.

        Out-of-range energies clamp to the end rows and bump
        ``diagnostics["clamped"]``.
        """
        e = self._e
        n = len(e)
        if energy <= e[0] or energy >= e[n - 1]:
            if energy != e[0] and energy != e[n - 1]:
                self.diagnostics["clamped"] = self.diagnostics.get("clamped", 0) + 1
            i = 0 if energy <= e[0] else n - 1
            return self._pe[i], self._co[i]
        lo, hi = 0, n - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if e[mid] <= energy:
                lo = mid
            else:
                hi = mid
        t = (math.log(energy) - self._le[lo]) / (self._le[hi] - self._le[lo])
        return _loglog(self._pe[lo], self._pe[hi], t), _loglog(self._co[lo], self._co[hi], t)

    def mu_total(self, energy: float) -> float:
        a, b = self.mu(energy)
        return a + b

    def kernel_arrays(self) -> tuple[np.ndarray, ...]:
        return (np.array(self._e), np.array(self._le), np.array(self._pe), np.array(self._co))


def _loglog(a: float, b: float, t: float) -> float:
    if a > 0.0 and b > 0.0:
        la = math.log(a)
        return math.exp(la + t * (math.log(b) - la))
    # zero entries cannot be log-interpolated
    return a + t * (b - a)


def load_material_table(path, name: str | None = None) -> MaterialTable:
    """Read ``energy_keV,mu_pe_per_mm,mu_compton_per_mm`` CSV into a table."""
    path = Path(path)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MaterialTableError(f"{path}: empty file") from None
        if [h.strip() for h in header] != HEADER:
            raise MaterialTableError(f"{path}:1: expected header {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise MaterialTableError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise MaterialTableError(f"{path}:{lineno}: {exc}") from None
            if vals[1] < 0 or vals[2] < 0:
                raise MaterialTableError(f"{path}:{lineno}: negative attenuation coefficient")
            rows.append(vals)
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    try:
        return MaterialTable(name or path.stem, arr[:, 0], arr[:, 1], arr[:, 2])
    except MaterialTableError as exc:
        raise MaterialTableError(f"{path}: {exc}") from None


def builtin_material(name: str) -> MaterialTable:
    """Packaged table for ``lyso`` or ``water``."""
    ref = resources.files("tcsim") / "data" / f"{name}.csv"
    with resources.as_file(ref) as p:
        return load_material_table(p, name)
