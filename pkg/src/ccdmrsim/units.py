"""Unit-suffixed quantity parsing and canonical internal units.

Every physical quantity in a configuration file either carries an explicit
unit suffix ("3.5mW", "2.5us", "2.87GHz") or is a bare number interpreted in
the canonical unit of its schema field.  Canonical internal units are SI
(seconds, watts, hertz, volts, amperes, coulombs) with two domain exceptions
that all module contracts share: lengths/positions in micrometres and optical
wavelengths in nanometres.
"""

from __future__ import annotations

import re

# multiplier tables: suffix -> factor into the canonical unit of the dimension
_UNIT_TABLES = {
    "power_w": {"W": 1.0, "mW": 1e-3, "uW": 1e-6, "nW": 1e-9, "pW": 1e-12},
    "time_s": {
        "s": 1.0,
        "ms": 1e-3,
        "us": 1e-6,
        "ns": 1e-9,
        "ps": 1e-12,
        "min": 60.0,
        "h": 3600.0,
    },
    "freq_hz": {"Hz": 1.0, "kHz": 1e3, "MHz": 1e6, "GHz": 1e9},
    "voltage_v": {"V": 1.0, "mV": 1e-3, "uV": 1e-6},
    "current_a": {"A": 1.0, "mA": 1e-3, "uA": 1e-6, "nA": 1e-9, "pA": 1e-12, "fA": 1e-15},
    "charge_c": {"C": 1.0, "mC": 1e-3, "uC": 1e-6, "nC": 1e-9, "pC": 1e-12, "fC": 1e-15},
    "field_g": {"G": 1.0, "mG": 1e-3, "T": 1e4, "mT": 10.0},
    "length_um": {"um": 1.0, "nm": 1e-3, "mm": 1e3, "m": 1e6},
    "wavelength_nm": {"nm": 1.0, "um": 1e3},
    "energy_ev": {"eV": 1.0, "meV": 1e-3},
    "dimensionless": {},
}

# "μ" and "µ" both normalise to "u" so configs may use either spelling
_MICRO_RE = re.compile("[µμ]")

_QUANTITY_RE = re.compile(r"^\s*([-+]?[0-9.]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z]*)\s*$")

PLANCK_EV_NM = 1239.84193  # photon energy (eV) x wavelength (nm)
ELEMENTARY_CHARGE_C = 1.602176634e-19


class UnitError(ValueError):
    """Raised when a quantity string cannot be parsed in its dimension."""


def photon_energy_ev(wavelength_nm: float) -> float:
    """Photon energy in eV for a vacuum wavelength in nm."""
    if wavelength_nm <= 0:
        raise UnitError(f"wavelength must be positive, got {wavelength_nm}")
    return PLANCK_EV_NM / wavelength_nm


def parse_quantity(value, dimension: str) -> float:
    """Parse a number or unit-suffixed string into the canonical unit.

    Bare numbers (int/float) are taken to already be in the canonical unit
    of ``dimension``.  Strings must match ``<number><suffix>`` where the
    suffix belongs to the dimension's unit table.
    """
    if dimension not in _UNIT_TABLES:
        raise UnitError(f"unknown dimension {dimension!r}")
    if isinstance(value, bool):
        raise UnitError(f"boolean is not a quantity: {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise UnitError(f"cannot parse quantity from {value!r}")

    text = _MICRO_RE.sub("u", value)
    m = _QUANTITY_RE.match(text)
    if m is None:
        raise UnitError(f"malformed quantity {value!r}")
    number, suffix = m.groups()
    try:
        magnitude = float(number)
    except ValueError as exc:
        raise UnitError(f"malformed number in {value!r}") from exc
    if not suffix:
        return magnitude
    table = _UNIT_TABLES[dimension]
    if suffix not in table:
        allowed = ", ".join(sorted(table)) or "none (dimensionless)"
        raise UnitError(
            f"unit {suffix!r} not valid for {dimension} (allowed: {allowed})"
        )
    return magnitude * table[suffix]
