"""Interface trap bank: saturating fill, indefinite dark storage, and
photostimulated two-class release.

Occupancies are tracked in elementary charges.  Two trap classes (fast and
slow) share a spectral activation response but release at different
per-watt rates, which is the minimal structure behind the observed
double-exponential readout transients.  Thermal emission is exactly zero:
a bank holds its charge unchanged through arbitrarily long dark waits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .units import photon_energy_ev

RELEASE_WAVELENGTH_RANGE_NM = (400.0, 800.0)


@dataclass(frozen=True)
class SpectralResponse:
    """Photostimulation efficiency vs photon energy, shared by both classes.

    Zero below the threshold, linear rise to 1 at the peak, then an
    optional linear decay above the peak (slope in 1/eV, floor at zero).
    The shape above the peak is unmeasured territory and deliberately a
    plain config knob.
    """

    threshold_ev: float = 2.2
    peak_ev: float = 2.3
    decay_per_ev: float = 4.0

    def __post_init__(self):
        if not 0 < self.threshold_ev < self.peak_ev:
            raise ValueError("need 0 < threshold < peak energy")
        if self.decay_per_ev < 0:
            raise ValueError("decay slope must be non-negative")

    def at_energy(self, energy_ev: float) -> float:
        if energy_ev < self.threshold_ev:
            return 0.0
        if energy_ev <= self.peak_ev:
            return (energy_ev - self.threshold_ev) / (self.peak_ev - self.threshold_ev)
        return max(0.0, 1.0 - self.decay_per_ev * (energy_ev - self.peak_ev))

    def at_wavelength(self, wavelength_nm: float) -> float:
        return self.at_energy(photon_energy_ev(wavelength_nm))


@dataclass(frozen=True)
class TrapBank:
    """Occupancy and kinetics of one electrode edge's interface traps."""

    q_fast: float = 0.0  # elementary charges
    q_slow: float = 0.0
    capacity_fast: float = 1.8e5
    capacity_slow: float = 4.2e5
    fill_fraction_fast: float = 0.3  # split of incoming flux between classes
    release_fast_per_w: float = 6.52e3  # s^-1 per W of edge illumination
    release_slow_per_w: float = 1.63e2
    response: SpectralResponse = SpectralResponse()

    def __post_init__(self):
        if not 0.0 <= self.q_fast <= self.capacity_fast + 1e-9:
            raise ValueError("fast-class occupancy outside [0, capacity]")
        if not 0.0 <= self.q_slow <= self.capacity_slow + 1e-9:
            raise ValueError("slow-class occupancy outside [0, capacity]")
        if not 0.0 <= self.fill_fraction_fast <= 1.0:
            raise ValueError("fill split must lie in [0, 1]")
        if min(self.capacity_fast, self.capacity_slow) <= 0:
            raise ValueError("capacities must be positive")
        if min(self.release_fast_per_w, self.release_slow_per_w) < 0:
            raise ValueError("release coefficients must be non-negative")

    @property
    def total_charge(self) -> float:
        return self.q_fast + self.q_slow

    @property
    def total_capacity(self) -> float:
        return self.capacity_fast + self.capacity_slow

    def emptied(self) -> "TrapBank":
        return replace(self, q_fast=0.0, q_slow=0.0)


def fill(bank: TrapBank, flux_holes_per_s: float, dt_s: float) -> TrapBank:
    """Advance the saturating fill ODE dQ/dt = f_c*flux*(1 - Q/N) exactly.

    The closed-form solution depends on the delivered charge only through
    its total, so stepping in one interval or many gives identical results.
    """
    if flux_holes_per_s < 0:
        raise ValueError("flux must be non-negative")
    if dt_s <= 0:
        raise ValueError("dt must be positive")
    return deposit(bank, flux_holes_per_s * dt_s)


def deposit(bank: TrapBank, holes: float) -> TrapBank:
    """Deliver a batch of holes through the same saturating law."""
    if holes < 0:
        raise ValueError("delivered charge must be non-negative")
    if holes == 0:
        return bank
    x_fast = bank.fill_fraction_fast * holes
    x_slow = (1.0 - bank.fill_fraction_fast) * holes
    q_fast = bank.capacity_fast - (bank.capacity_fast - bank.q_fast) * math.exp(
        -x_fast / bank.capacity_fast
    )
    q_slow = bank.capacity_slow - (bank.capacity_slow - bank.q_slow) * math.exp(
        -x_slow / bank.capacity_slow
    )
    return replace(bank, q_fast=q_fast, q_slow=q_slow)


def release_rate(
    bank: TrapBank, power_w: float, wavelength_nm: float
) -> tuple[float, float]:
    """Per-class photostimulated release rates (fast, slow) in s^-1."""
    if power_w < 0:
        raise ValueError("power must be non-negative")
    lo, hi = RELEASE_WAVELENGTH_RANGE_NM
    if not lo <= wavelength_nm <= hi:
        raise ValueError(
            f"readout wavelength {wavelength_nm} nm outside {lo:.0f}-{hi:.0f} nm"
        )
    s = bank.response.at_wavelength(wavelength_nm)
    return (
        bank.release_fast_per_w * power_w * s,
        bank.release_slow_per_w * power_w * s,
    )


@dataclass(frozen=True)
class ReleaseProfile:
    """Sum-of-exponentials released-charge rate r(t), in charges per second.

    terms: tuple of (initial occupancy Q_c, rate k_c); r(t) = sum k_c Q_c
    exp(-k_c t).  Analytic interval integrals keep the downstream signal
    chain exactly charge-conserving.
    """

    terms: tuple[tuple[float, float], ...]
    duration_s: float

    def rate(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for q0, k in self.terms:
            out += k * q0 * np.exp(-k * t)
        return out

    def released_between(self, t0: float, t1: float) -> float:
        """Charges released in [t0, t1], exact."""
        total = 0.0
        for q0, k in self.terms:
            if k > 0:
                total += q0 * (math.exp(-k * t0) - math.exp(-k * t1))
        return total

    def total_released(self) -> float:
        return self.released_between(0.0, self.duration_s)

    def interval_averages(self, edges: np.ndarray) -> np.ndarray:
        """Mean rate over each [edges[i], edges[i+1]] interval."""
        edges = np.asarray(edges, dtype=float)
        released = np.zeros(edges.size)
        for q0, k in self.terms:
            if k > 0:
                released += q0 * -np.exp(-k * edges)
        return np.diff(released) / np.diff(edges)


def discharge(
    bank: TrapBank,
    power_w: float,
    wavelength_nm: float,
    duration_s: float,
    dt_s: float | None = None,
) -> tuple[TrapBank, ReleaseProfile]:
    """Photostimulated release over a readout window.

    Occupancies decay as Q_c(t) = Q_c(0) exp(-k_c t) and the bank is
    reduced by exactly the released total; the returned profile carries the
    analytic r(t).  Release happens with or without bias; whether it
    becomes measurable current is the signal chain's business.  ``dt_s`` is
    accepted for interface symmetry with incremental callers but the
    kinetics are closed-form and step-size free.
    """
    if duration_s <= 0:
        raise ValueError("discharge duration must be positive")
    k_fast, k_slow = release_rate(bank, power_w, wavelength_nm)
    profile = ReleaseProfile(
        terms=((bank.q_fast, k_fast), (bank.q_slow, k_slow)),
        duration_s=duration_s,
    )
    after = replace(
        bank,
        q_fast=bank.q_fast * math.exp(-k_fast * duration_s),
        q_slow=bank.q_slow * math.exp(-k_slow * duration_s),
    )
    return after, profile
