"""Raster-scan drivers: PL maps, photoelectric charge maps, readout-position
maps, and the hole-capture experiment with single-shot charge readout.

Maps are deterministic per seed.  Pixels are independent: each charge-map
pixel resets the trap banks, pumps at the pixel, and reads at the fixed
electrode position; classification shots collapse to exact binomial draws
over the Poisson class-assignment probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import poisson

from . import photophysics as ph
from .fitting import ThresholdResult, fit_exponential_decay, poisson_mixture_threshold
from .geometry import LaserSpot, spot_power_at
from .readout import baseline_current, edge_profile
from .seeding import derive_seed
from .sequence import ReadSpec, _default_read, pump_spot, read_bank_charge
from .transport import (
    HoleCurrentField,
    hole_capture_rate,
    interface_capture_flux,
    electrode_capture_weights,
    nv_population_decay,
    prepump_extra_captures,
)
from .traps import deposit, discharge
from .world import World

GREEN_NV_MINUS_FRACTION = 0.70  # charge fraction after green preparation


@dataclass
class ScanMap:
    """2D raster of one observable over stage coordinates."""

    x_um: np.ndarray
    y_um: np.ndarray  # second axis; may be depth for xz slices
    values: np.ndarray  # shape (len(y), len(x))
    units: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_um = np.asarray(self.x_um, dtype=float)
        self.y_um = np.asarray(self.y_um, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.x_um) <= 0) or np.any(np.diff(self.y_um) <= 0):
            raise ValueError("scan grids must be strictly increasing")
        if self.values.shape != (self.y_um.size, self.x_um.size):
            raise ValueError("value matrix must match the grids")

    def peak_position(self) -> tuple[float, float]:
        iy, ix = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return float(self.x_um[ix]), float(self.y_um[iy])

    def contrast(self) -> float:
        """(peak - background) / background with the median as background."""
        background = float(np.median(self.values))
        if background == 0:
            return math.inf
        return float((self.values.max() - background) / background)


def write_map_csv(scan: ScanMap, path) -> None:
    """Matrix CSV: '# key=value' rows, an x-axis header row, then one row
    per y value (y coordinate first)."""
    lines = [f"# units={scan.units}"]
    for key in sorted(scan.metadata):
        lines.append(f"# {key}={scan.metadata[key]!r}")
    lines.append("y_um\\x_um," + ",".join(repr(x) for x in scan.x_um))
    for y, row in zip(scan.y_um, scan.values):
        lines.append(f"{y!r}," + ",".join(repr(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def write_png_data_csv(scan: ScanMap, path) -> None:
    """Spread the map onto 0-255 integers for external plotting."""
    lo, hi = float(scan.values.min()), float(scan.values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.round((scan.values - lo) * scale).astype(int)
    lines = ["y_um\\x_um," + ",".join(repr(x) for x in scan.x_um)]
    for y, row in zip(scan.y_um, data):
        lines.append(f"{y!r}," + ",".join(str(v) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


# --------------------------------------------------------------- PL imaging


def acquire_pl_map(
    world: World,
    x_range_um: tuple[float, float],
    y_range_um: tuple[float, float],
    pixels: int,
    seed: int,
    power_w: float = 300e-6,
    wavelength_nm: float = 532.0,
    dwell_s: float = 0.05,
    background_cps: float = 200.0,
    z_um: float = 4.0,
) -> ScanMap:
    """Confocal photoluminescence raster in the weak-excitation regime.

    Expected pixel counts are the sum over defects of their PL rate scaled
    by the delivered Gaussian power fraction, plus a flat background;
    counts are Poisson-sampled per pixel.
    """
    xs = np.linspace(*x_range_um, pixels)
    ys = np.linspace(*y_range_um, pixels)
    expected = np.full((ys.size, xs.size), background_cps * dwell_s)
    for nv in world.nvs:
        rate = nv.pl_rate_per_w * power_w * GREEN_NV_MINUS_FRACTION
        for iy, y in enumerate(ys):
            for ix, x in enumerate(xs):
                spot = LaserSpot((x, y, z_um), wavelength_nm, power_w)
                expected[iy, ix] += rate * spot_power_at(nv.position_um, spot) * dwell_s
    rng = np.random.default_rng(derive_seed(seed, "pl_map"))
    counts = rng.poisson(expected).astype(float)
    return ScanMap(
        xs,
        ys,
        counts,
        units="counts",
        metadata={
            "kind": "pl_map",
            "power_w": power_w,
            "dwell_s": dwell_s,
            "z_um": z_um,
            "seed": seed,
        },
    )


# ----------------------------------------------------------- charge imaging


def acquire_qint_map(
    world: World,
    x_range_um: tuple[float, float],
    y_range_um: tuple[float, float],
    pixels: int,
    seed: int,
    pump_power_w: float = 3.5e-3,
    pump_duration_s: float = 1.0,
    yield_exponent: float = 1.5,
    read: ReadSpec | None = None,
    z_um: float = 4.0,
) -> ScanMap:
    """Photoelectric image: pump at each pixel, read the stored charge.

    Carrier yield follows the calibrated full-power cycling rate scaled by
    (delivered power / pump power)^yield_exponent; the super-linear charge
    generation is what narrows the charge image relative to the PL image.
    Banks are reset before every pixel, and every read empties them again.
    """
    if read is None:
        read = _default_read(
            world,
            {
                "read_power_w": 3.5e-3,
                "read_wavelength_nm": 532.0,
                "read_bias_v": 2.2,
                "read_duration_s": 12.0,
                "repeats": 400,
            },
        )
    xs = np.linspace(*x_range_um, pixels)
    ys = np.linspace(*y_range_um, pixels)
    values = np.zeros((ys.size, xs.size))

    # reference hole yield of a fully illuminated defect over the pump
    ref_state = ph.dark_settle(
        ph.fresh_state(world.split_spin_levels, nv_minus=GREEN_NV_MINUS_FRACTION),
        world.rates,
    )
    _, ref_emission = ph.evolve(
        ref_state, world.rates, pump_power_w, 532.0, pump_duration_s
    )
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            w = world.copy()
            w.reset_banks()
            spot = LaserSpot((x, y, z_um), 532.0, pump_power_w)
            for nv in w.nvs:
                fraction = spot_power_at(nv.position_um, spot)
                holes = ref_emission.holes * fraction**yield_exponent
                if holes <= 0:
                    continue
                eta, _ = interface_capture_flux(
                    nv, ph.CarrierEmission(0.0, 1.0, 0.0, 1.0), w.layout, w.capture
                )
                weights = electrode_capture_weights(nv, w.layout, w.capture)
                for i, wt in enumerate(weights):
                    w.banks[i] = deposit(w.banks[i], holes * eta * wt)
            q, _, _ = read_bank_charge(w, read, derive_seed(seed, "qint", ix, iy))
            values[iy, ix] = q
    return ScanMap(
        xs,
        ys,
        values,
        units="C",
        metadata={
            "kind": "qint_map",
            "pump_power_w": pump_power_w,
            "pump_duration_s": pump_duration_s,
            "yield_exponent": yield_exponent,
            "z_um": z_um,
            "seed": seed,
        },
    )


def map_readout_position(
    world: World,
    seed: int,
    source_nv: str = "NV_S",
    plane: str = "xz",
    x_range_um: tuple[float, float] = (4.0, 16.0),
    other_range_um: tuple[float, float] = (0.0, 6.0),
    pixels: int = 13,
    pump_power_w: float = 3.5e-3,
    pump_duration_s: float = 1.0,
    read_power_w: float = 3.5e-3,
    read_wavelength_nm: float = 532.0,
    read_bias_v: float = 2.2,
    read_duration_s: float = 12.0,
    repeats: int = 400,
) -> ScanMap:
    """Integrated charge versus readout-spot position over an electrode.

    The source defect is pumped identically before every read; only the
    readout spot moves.  In the "xz" plane the second axis is depth.
    """
    if plane not in ("xy", "xz"):
        raise ValueError("plane must be 'xy' or 'xz'")
    nv = world.nvs.get(source_nv)
    xs = np.linspace(*x_range_um, pixels)
    others = np.linspace(*other_range_um, pixels)
    values = np.zeros((others.size, xs.size))
    for io, other in enumerate(others):
        for ix, x in enumerate(xs):
            w = world.copy()
            w.reset_banks()
            pump_spot(
                w, LaserSpot(nv.position_um, 532.0, pump_power_w), pump_duration_s
            )
            center = (x, other, 0.0) if plane == "xy" else (x, 0.0, other)
            read = ReadSpec(
                spot=LaserSpot(center, read_wavelength_nm, read_power_w),
                bias_v=read_bias_v,
                duration_s=read_duration_s,
                repeats=repeats,
            )
            q, _, _ = read_bank_charge(w, read, derive_seed(seed, "readpos", ix, io))
            values[io, ix] = q
    return ScanMap(
        xs,
        others,
        values,
        units="C",
        metadata={
            "kind": "readout_map",
            "plane": plane,
            "source_nv": source_nv,
            "bias_v": read_bias_v,
            "seed": seed,
        },
    )


# ------------------------------------------------- single-shot charge state


@dataclass(frozen=True)
class ChargeReadoutModel:
    """Photon statistics of the orange charge-state probe.

    The negative state is bright, the neutral state dark; a 50 ms probe
    gives well-separated Poisson count distributions and an integer
    threshold classifies single shots.
    """

    bright_cps: float = 400.0
    dark_cps: float = 100.0
    background_cps: float = 0.0
    duration_s: float = 0.05
    threshold_mode: str = "balanced"

    def __post_init__(self):
        if not self.bright_cps > self.dark_cps >= 0:
            raise ValueError("need bright rate > dark rate >= 0")
        if self.duration_s <= 0:
            raise ValueError("probe duration must be positive")

    @property
    def mean_bright(self) -> float:
        return (self.bright_cps + self.background_cps) * self.duration_s

    @property
    def mean_dark(self) -> float:
        return (self.dark_cps + self.background_cps) * self.duration_s

    def threshold(self) -> ThresholdResult:
        return poisson_mixture_threshold(
            self.mean_bright, self.mean_dark, mode=self.threshold_mode
        )

    def classify_probability(self, is_minus: bool) -> float:
        """P(shot classified as NV-) given the true charge state."""
        result = self.threshold()
        mean = self.mean_bright if is_minus else self.mean_dark
        return float(poisson.sf(result.threshold, mean))


def single_shot_charge_readout(
    is_minus: bool, model: ChargeReadoutModel, seed: int
) -> tuple[int, str]:
    """One probe shot: Poisson counts and the thresholded classification."""
    rng = np.random.default_rng(seed)
    mean = model.mean_bright if is_minus else model.mean_dark
    counts = int(rng.poisson(mean))
    label = "minus" if counts > model.threshold().threshold else "zero"
    return counts, label


def classify_shots(
    p_minus: float, n_shots: int, model: ChargeReadoutModel, rng: np.random.Generator
) -> int:
    """Number of shots classified NV- out of n, collapsing the shot loop.

    Each shot is an independent two-stage draw (true state, then counts vs
    threshold), so the classified tally is exactly binomial with the mixed
    classification probability.
    """
    q = p_minus * model.classify_probability(True) + (1.0 - p_minus) * (
        model.classify_probability(False)
    )
    return int(rng.binomial(n_shots, q))


def corrected_minus_fraction(frac: float, model: ChargeReadoutModel) -> float:
    """Invert the readout confusion to estimate the true NV- probability."""
    tpr = model.classify_probability(True)
    fpr = model.classify_probability(False)
    if tpr <= fpr:
        return frac
    return float(np.clip((frac - fpr) / (tpr - fpr), 0.0, 1.0))


# ------------------------------------------------------------- hole capture


@dataclass
class HoleCaptureResult:
    """Fitted NV- decay rates under EGPC plus the count-map time series."""

    nv_labels: list
    rates_per_s: dict
    rate_sigmas: dict
    edge_distances_um: dict
    spot_distances_um: dict
    maps: list
    probe_times_s: list
    prepumped: bool


def hole_capture_experiment(
    world: World,
    seed: int,
    bias_v: float = 1.0,
    egpc_power_w: float = 3.5e-3,
    probe_times_s=(0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0),
    shots: int = 400,
    with_prepump: bool = False,
    prepump_nv: str = "NV_S",
    prepump_power_w: float = 3.5e-3,
    prepump_duration_s: float = 1.0,
    spot_y_um: float = 0.0,
    model: ChargeReadoutModel | None = None,
    map_pixels: int = 21,
) -> HoleCaptureResult:
    """Track NV- survival against contact illumination time under bias.

    Defects are green-prepared, the contact edge is illuminated to drive an
    EGPC for each probe time, and each defect's charge state is read out in
    single shots.  The decay rate per defect follows the hole-current
    density at its shortest edge distance; a pre-pumped trap bank adds an
    early-time burst of released holes that can only speed the decay.
    """
    probe_times = sorted(float(t) for t in probe_times_s)
    if probe_times[0] < 0:
        raise ValueError("probe times must be non-negative")
    model = model or ChargeReadoutModel()
    layout = world.layout
    positive = layout.positive_electrode(bias_v)
    if positive is None:
        raise ValueError("hole capture needs a nonzero bias")
    rect = layout.electrodes[positive]
    other = layout.electrodes[1 if positive == 0 else 0]
    edge_x = rect.x1 if other.x0 >= rect.x1 else rect.x0
    spot = LaserSpot((edge_x, spot_y_um, 0.0), 532.0, egpc_power_w)
    edge_length = rect.y1 - rect.y0

    current = baseline_current(egpc_power_w, bias_v, spot, layout, world.egpc)
    field = HoleCurrentField(current, edge_length, world.hole_kernel_d_um)

    release_profile = None
    if with_prepump:
        w = world.copy()
        w.reset_banks()
        source = w.nvs.get(prepump_nv)
        pump_spot(w, LaserSpot(source.position_um, 532.0, prepump_power_w), prepump_duration_s)
        power_at_edge = egpc_power_w * edge_profile(spot, layout, positive, world.egpc)
        _, release_profile = discharge(
            w.banks[positive], power_at_edge, 532.0, probe_times[-1] + 1.0
        )

    rng = np.random.default_rng(derive_seed(seed, "hole_capture", with_prepump))
    fractions = {nv.label: [] for nv in world.nvs}
    maps = []
    for t_probe in probe_times:
        grid_counts = np.zeros((map_pixels, map_pixels))
        xs = np.linspace(-8.0, 8.0, map_pixels)
        ys = np.linspace(-8.0, 8.0, map_pixels)
        for nv in world.nvs:
            rate = hole_capture_rate(nv, field, layout)
            extra = 0.0
            if release_profile is not None:
                extra = prepump_extra_captures(
                    nv,
                    release_profile.released_between(0.0, t_probe),
                    edge_length,
                    world.hole_kernel_d_um,
                    layout,
                )
            p_minus = nv_population_decay(
                GREEN_NV_MINUS_FRACTION, rate, t_probe, extra
            )
            classified = classify_shots(p_minus, shots, model, rng)
            fractions[nv.label].append(classified / shots)
            mean_counts = (
                p_minus * model.mean_bright + (1.0 - p_minus) * model.mean_dark
            )
            ix = int(np.clip(np.searchsorted(xs, nv.position_um[0]), 0, map_pixels - 1))
            iy = int(np.clip(np.searchsorted(ys, nv.position_um[1]), 0, map_pixels - 1))
            grid_counts[iy, ix] = mean_counts
        maps.append(
            ScanMap(
                xs,
                ys,
                grid_counts,
                units="counts",
                metadata={"kind": "hole_capture_map", "probe_time_s": t_probe,
                          "bias_v": bias_v, "prepumped": with_prepump},
            )
        )

    times = np.array(probe_times)
    rates, sigmas, edge_d, spot_d = {}, {}, {}, {}
    for nv in world.nvs:
        observed = np.array(fractions[nv.label])
        corrected = np.array(
            [corrected_minus_fraction(f, model) for f in observed]
        )
        binom_sigma = np.sqrt(np.clip(observed * (1 - observed), 1e-4, None) / shots)
        fit = fit_exponential_decay(times, corrected, binom_sigma)
        rates[nv.label] = fit.params["rate"]
        sigmas[nv.label] = fit.sigmas["rate"]
        from .geometry import shortest_edge_distance

        edge_d[nv.label] = shortest_edge_distance(nv.position_um, layout)
        spot_d[nv.label] = math.dist(nv.position_um[:2], spot.center[:2])
    return HoleCaptureResult(
        nv_labels=[nv.label for nv in world.nvs],
        rates_per_s=rates,
        rate_sigmas=sigmas,
        edge_distances_um=edge_d,
        spot_distances_um=spot_d,
        maps=maps,
        probe_times_s=probe_times,
        prepumped=with_prepump,
    )
