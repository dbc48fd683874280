"""Device geometry: electrode layout, NV registry and the optical spot model.

Coordinate convention: x runs across the inter-electrode gap, y runs along
the electrode edges, z runs into the diamond (surface at z = 0, depth
positive).  All lengths are micrometres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

WAVELENGTH_MIN_NM = 500.0
WAVELENGTH_MAX_NM = 780.0


@dataclass(frozen=True)
class ElectrodeRect:
    """Axis-aligned rectangular electrode footprint on the surface (µm)."""

    x0: float
    x1: float
    y0: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate electrode rectangle {self}")

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x <= self.x1 and self.y0 <= y <= self.y1

    def distance(self, x: float, y: float) -> float:
        """Euclidean distance to the footprint; 0 on or under the electrode."""
        dx = max(self.x0 - x, 0.0, x - self.x1)
        dy = max(self.y0 - y, 0.0, y - self.y1)
        return math.hypot(dx, dy)

    def facing_edge_x(self, toward: float) -> float:
        """x coordinate of the edge facing the given x position."""
        return self.x1 if toward >= self.x1 else self.x0

    def overlaps(self, other: "ElectrodeRect") -> bool:
        return not (
            self.x1 <= other.x0
            or other.x1 <= self.x0
            or self.y1 <= other.y0
            or other.y1 <= self.y0
        )


@dataclass(frozen=True)
class DeviceLayout:
    """Electrode pads flanking a gap, with polarity set by the signed bias.

    Electrodes are listed in increasing x.  A positive bias makes the last
    (largest-x) electrode the positively biased one; a negative bias makes
    the first one positive.  Exactly one electrode is positive whenever the
    bias magnitude is nonzero.
    """

    electrodes: tuple[ElectrodeRect, ...]

    def __post_init__(self):
        if len(self.electrodes) < 1:
            raise ValueError("layout needs at least one electrode")
        xs = [e.x0 for e in self.electrodes]
        if xs != sorted(xs):
            raise ValueError("electrodes must be listed in increasing x")
        for i, a in enumerate(self.electrodes):
            for b in self.electrodes[i + 1 :]:
                if a.overlaps(b):
                    raise ValueError("electrodes overlap")
        if len(self.electrodes) >= 2 and self.gap_width() <= 0:
            raise ValueError("inter-electrode gap must be positive")

    def gap_width(self) -> float:
        """Lateral width of the gap between the first two pads (µm)."""
        if len(self.electrodes) < 2:
            raise ValueError("gap undefined for a single electrode")
        return self.electrodes[1].x0 - self.electrodes[0].x1

    def positive_electrode(self, bias_v: float) -> int | None:
        """Index of the positively biased electrode, None at zero bias."""
        if bias_v == 0:
            return None
        return len(self.electrodes) - 1 if bias_v > 0 else 0

    def electrode_at(self, x: float, y: float) -> int | None:
        for i, e in enumerate(self.electrodes):
            if e.contains(x, y):
                return i
        return None

    def nearest_electrode(self, x: float, y: float) -> int:
        return min(
            range(len(self.electrodes)),
            key=lambda i: self.electrodes[i].distance(x, y),
        )


def two_pad_layout(
    gap_um: float = 10.0, pad_width_um: float = 10.0, pad_height_um: float = 20.0
) -> DeviceLayout:
    """Standard layout: two pads facing each other across a gap centred on x=0."""
    if gap_um <= 0:
        raise ValueError("gap width must be positive")
    half_gap = gap_um / 2.0
    half_h = pad_height_um / 2.0
    left = ElectrodeRect(-half_gap - pad_width_um, -half_gap, -half_h, half_h)
    right = ElectrodeRect(half_gap, half_gap + pad_width_um, -half_h, half_h)
    return DeviceLayout((left, right))


def shortest_edge_distance(point, layout: DeviceLayout) -> float:
    """Shortest lateral distance from a point to any electrode boundary (µm).

    Only the first two coordinates of ``point`` are used; depth does not
    enter the edge-distance law.  Returns 0 for points on or under an
    electrode footprint.
    """
    x, y = float(point[0]), float(point[1])
    return min(e.distance(x, y) for e in layout.electrodes)


def distance_to_electrode(point, layout: DeviceLayout, index: int) -> float:
    """Lateral distance from a point to one specific electrode footprint."""
    x, y = float(point[0]), float(point[1])
    return layout.electrodes[index].distance(x, y)


@dataclass(frozen=True)
class LaserSpot:
    """Focused Gaussian spot: centre (µm), wavelength (nm), power (W).

    ``waist_um`` is the in-focus 1/e^2 intensity radius.  Out-of-focus
    targets see a defocus-widened waist w(dz) = w0*sqrt(1+(dz/z_r)^2) with
    Rayleigh range ``rayleigh_um``.
    """

    center: tuple[float, float, float]
    wavelength_nm: float
    power_w: float
    waist_um: float = 0.2
    rayleigh_um: float = 0.6

    def __post_init__(self):
        if self.power_w < 0:
            raise ValueError("spot power must be non-negative")
        if not (WAVELENGTH_MIN_NM <= self.wavelength_nm <= WAVELENGTH_MAX_NM):
            raise ValueError(
                f"wavelength {self.wavelength_nm} nm outside the "
                f"{WAVELENGTH_MIN_NM:.0f}-{WAVELENGTH_MAX_NM:.0f} nm source range"
            )
        if self.waist_um <= 0 or self.rayleigh_um <= 0:
            raise ValueError("waist and Rayleigh range must be positive")

    def waist_at(self, z_um: float) -> float:
        dz = z_um - self.center[2]
        return self.waist_um * math.sqrt(1.0 + (dz / self.rayleigh_um) ** 2)

    def moved_to(self, center) -> "LaserSpot":
        return LaserSpot(
            tuple(float(c) for c in center),
            self.wavelength_nm,
            self.power_w,
            self.waist_um,
            self.rayleigh_um,
        )


def spot_power_at(target, spot: LaserSpot) -> float:
    """Gaussian power fraction exp(-2 r^2 / w^2) delivered at a target point.

    r is the lateral offset from the spot axis evaluated at the target
    depth, where the waist has defocus-widened to w(z).  Equals 1 on axis
    and exp(-2) at one waist radius.
    """
    tx, ty, tz = (float(c) for c in target)
    r2 = (tx - spot.center[0]) ** 2 + (ty - spot.center[1]) ** 2
    w = spot.waist_at(tz)
    return math.exp(-2.0 * r2 / (w * w))


def spot_fwhm_um(spot: LaserSpot) -> float:
    """FWHM of the in-focus intensity profile exp(-2 r^2 / w0^2)."""
    return spot.waist_um * math.sqrt(2.0 * math.log(2.0))


@dataclass(frozen=True)
class NVRecord:
    """Registry entry for one NV centre.

    Static per-defect model parameters ride along with the position so scan
    drivers and the sequence engine never need a side table.
    """

    label: str
    position_um: tuple[float, float, float]
    axis: tuple[float, float, float] = (0.57735027, 0.57735027, 0.57735027)
    rabi_mhz: float = 4.523  # Rabi frequency under unit microwave drive
    t2_us: float = 24.90
    capture_window_um: float = 5.0e-8  # hole-capture cross-section (edge-equivalent)
    pl_rate_per_w: float = 4.0e7  # detected PL counts/s per W delivered

    def __post_init__(self):
        if self.position_um[2] <= 0:
            raise ValueError(f"NV {self.label} must sit below the surface (z > 0)")
        norm = math.sqrt(sum(a * a for a in self.axis))
        if abs(norm - 1.0) > 1e-6:
            object.__setattr__(
                self, "axis", tuple(a / norm for a in self.axis)
            )
        if self.rabi_mhz <= 0 or self.t2_us <= 0:
            raise ValueError(f"NV {self.label} needs positive Rabi frequency and T2")


@dataclass
class NVRegistry:
    """Ordered collection of NV records with label lookup."""

    records: list[NVRecord] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def get(self, label: str) -> NVRecord:
        for rec in self.records:
            if rec.label == label:
                return rec
        raise KeyError(f"no NV labelled {label!r}")

    def labels(self) -> list[str]:
        return [rec.label for rec in self.records]

    def positions(self) -> np.ndarray:
        return np.array([rec.position_um for rec in self.records], dtype=float)
