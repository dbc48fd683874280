"""Carrier transport between NV sources, interface traps and electrodes.

Two phenomenological kernels carry the spatial physics: a capture
efficiency eta(d) mapping NV hole emission into interface-trap filling,
and a hole-current density g(d) describing carriers injected along the
whole biased electrode edge during readout.  Both depend on position only
through the shortest electrode-edge distance, which is the experimental
signature that distinguishes edge injection from a point source at the
laser spot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .geometry import DeviceLayout, NVRecord, distance_to_electrode, shortest_edge_distance
from .photophysics import CarrierEmission
from .units import ELEMENTARY_CHARGE_C

CAPTURE_KERNELS = ("hyperbolic", "power_law")


@dataclass(frozen=True)
class CaptureModel:
    """Interface capture efficiency eta(d) for NV-emitted holes.

    hyperbolic: eta = eta0 / (1 + d/d0)
    power_law:  eta = eta0 / (1 + d/d0)^exponent

    Whatever is not captured at the interface is absorbed by bulk traps and
    never read out.
    """

    eta0: float = 0.1
    d0_um: float = 10.0
    kernel: str = "hyperbolic"
    exponent: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eta0 <= 1.0:
            raise ValueError("eta0 must lie in [0, 1]")
        if self.d0_um <= 0:
            raise ValueError("d0 must be positive")
        if self.kernel not in CAPTURE_KERNELS:
            raise ValueError(f"unknown capture kernel {self.kernel!r}")
        if self.exponent <= 0:
            raise ValueError("power-law exponent must be positive")

    def efficiency(self, distance_um: float) -> float:
        if distance_um < 0:
            raise ValueError("distance must be non-negative")
        base = 1.0 + distance_um / self.d0_um
        if self.kernel == "hyperbolic":
            return self.eta0 / base
        return self.eta0 / base**self.exponent


def interface_capture_flux(
    source: NVRecord,
    emission: CarrierEmission,
    layout: DeviceLayout,
    model: CaptureModel,
) -> tuple[float, float]:
    """Split a hole emission rate into (interface flux, bulk loss), holes/s.

    The captured share follows eta at the shortest edge distance of the
    source; the remainder goes to bulk traps.  Electrons are routed to bulk
    donor capture entirely and never appear in the readout signal.
    """
    rate = emission.hole_rate
    if rate < 0:
        raise ValueError("hole emission rate must be non-negative")
    eta = model.efficiency(shortest_edge_distance(source.position_um, layout))
    return rate * eta, rate * (1.0 - eta)


def electrode_capture_weights(
    source: NVRecord, layout: DeviceLayout, model: CaptureModel
) -> list[float]:
    """Relative share of the interface flux reaching each electrode's bank.

    Weights are proportional to eta at the per-electrode distance and sum
    to one, so a gap-centre source feeds facing banks equally while an
    off-axis source feeds mostly its nearest edge.
    """
    etas = [
        model.efficiency(distance_to_electrode(source.position_um, layout, i))
        for i in range(len(layout.electrodes))
    ]
    total = sum(etas)
    if total == 0:
        return [1.0 / len(etas)] * len(etas)
    return [e / total for e in etas]


@dataclass(frozen=True)
class HoleCurrentField:
    """Hole current injected along one electrode edge during readout.

    The line source is uniform along the edge; the resulting density at a
    point depends only on its shortest edge distance through the kernel
    g(d) = 1/(1 + d/d_h).  ``total_current_a`` is the injected EGPC.
    """

    total_current_a: float
    edge_length_um: float
    d_h_um: float = 2.0

    def __post_init__(self):
        if self.total_current_a < 0:
            raise ValueError("injected current must be non-negative")
        if self.edge_length_um <= 0 or self.d_h_um <= 0:
            raise ValueError("edge length and d_h must be positive")

    def line_density_per_um(self) -> float:
        """Injected holes per second per micrometre of edge."""
        return self.total_current_a / ELEMENTARY_CHARGE_C / self.edge_length_um

    def density_at(self, distance_um: float) -> float:
        if distance_um < 0:
            raise ValueError("distance must be non-negative")
        return self.line_density_per_um() / (1.0 + distance_um / self.d_h_um)


def hole_capture_rate(
    nv: NVRecord, field: HoleCurrentField, layout: DeviceLayout
) -> float:
    """NV- -> NV0 conversion rate (s^-1) from the ambient hole current.

    rate = sigma_h * J(shortest edge distance); by construction it is
    independent of where along the electrode the readout spot sits.
    """
    d = shortest_edge_distance(nv.position_um, layout)
    return nv.capture_window_um * field.density_at(d)


def nv_population_decay(
    p_initial: float,
    rate_per_s: float,
    duration_s: float,
    extra_captures: float = 0.0,
) -> float:
    """Surviving NV- probability after exposure to the hole current.

    p(T) = p0 * exp(-rate*T - extra), where ``extra_captures`` carries the
    integrated early-time burst from any pre-filled trap bank discharging
    into the same field (dimensionless expected captures).
    """
    if rate_per_s < 0 or duration_s < 0 or extra_captures < 0:
        raise ValueError("rate, duration and extra term must be non-negative")
    if not 0.0 <= p_initial <= 1.0:
        raise ValueError("initial probability must lie in [0, 1]")
    return p_initial * math.exp(-rate_per_s * duration_s - extra_captures)


def prepump_extra_captures(
    nv: NVRecord,
    released_charges: float,
    edge_length_um: float,
    d_h_um: float,
    layout: DeviceLayout,
) -> float:
    """Expected extra hole captures from a released trap population.

    ``released_charges`` is the number of elementary charges liberated from
    the bank up to the probe time; they traverse the same edge-distance
    kernel as the steady current.
    """
    if released_charges < 0:
        raise ValueError("released charge must be non-negative")
    d = shortest_edge_distance(nv.position_um, layout)
    per_um = released_charges / edge_length_um
    return nv.capture_window_um * per_um / (1.0 + d / d_h_um)
