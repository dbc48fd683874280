"""Pulse-sequence representation, validation and protocol execution.

Protocols are executed against a ``World``.  Pulsed spin protocols repeat a
microsecond-scale cycle (polarise, microwave, ionise, gap) for a fixed
time budget; rather than stepping hundreds of thousands of cycles, the
engine converges the per-cycle expected hole yield once (the level model
is periodic after a handful of cycles) and composes the saturating trap
fill in closed form.  A per-cycle Monte Carlo mode with sampled spin
outcomes and Poisson carrier statistics is kept for noise studies and for
checking the fast path against itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import photophysics as ph
from . import spin as spin_mod
from .geometry import LaserSpot, NVRecord, spot_power_at
from .readout import (
    AmplifierChain,
    CurrentTrace,
    baseline_current,
    edge_profile,
    integrate_excess_charge,
    synthesize_trace,
)
from .seeding import derive_seed
from .spin import MW_BAND_MHZ, flip_probability, pi_pulse_duration_s
from .transport import electrode_capture_weights, interface_capture_flux
from .traps import deposit, discharge
from .units import ELEMENTARY_CHARGE_C
from .world import World

SCHEMA_VERSION = "1"

PROTOCOL_KINDS = (
    "ccdmr",
    "rabi",
    "echo",
    "image_scan",
    "readout_map",
    "wavelength_sweep",
    "power_sweep",
    "fill_vs_time",
    "hole_capture",
)


class RunError(RuntimeError):
    """Module error propagated with the index of the offending event."""


# ----------------------------------------------------------------- events


@dataclass(frozen=True)
class LaserPulse:
    start_s: float
    duration_s: float
    spot: LaserSpot
    channel = "laser"


@dataclass(frozen=True)
class MicrowavePulse:
    start_s: float
    duration_s: float
    frequency_mhz: float
    amplitude: float = 1.0
    phase_rad: float = 0.0
    channel = "microwave"


@dataclass(frozen=True)
class SetBias:
    start_s: float
    bias_v: float
    duration_s: float = 0.0  # instantaneous marker
    channel = "bias"


@dataclass(frozen=True)
class ReadWindow:
    start_s: float
    duration_s: float
    spot: LaserSpot
    channel = "read"


@dataclass(frozen=True)
class Wait:
    start_s: float
    duration_s: float
    channel = "wait"


PulseEvent = LaserPulse | MicrowavePulse | SetBias | ReadWindow | Wait

_EVENT_TYPES = {
    "laser": LaserPulse,
    "microwave": MicrowavePulse,
    "bias": SetBias,
    "read": ReadWindow,
    "wait": Wait,
}
_CHANNEL_ORDER = {"bias": 0, "laser": 1, "microwave": 2, "read": 3, "wait": 4}


@dataclass(frozen=True)
class Violation:
    severity: str  # "error" | "warning"
    message: str
    index: int


def validate(events: list) -> list:
    """Schedule checks; an empty list means the sequence is well formed.

    Errors: negative times, non-positive durations, overlapping events on
    one channel.  Warnings: read windows while the bias is zero (charge is
    released but produces no current) and microwave pulses outside the
    2-4 GHz band.
    """
    violations = []
    for i, ev in enumerate(events):
        if ev.start_s < 0:
            violations.append(Violation("error", f"negative start time {ev.start_s}", i))
        if not isinstance(ev, SetBias) and ev.duration_s <= 0:
            violations.append(
                Violation("error", f"non-positive duration {ev.duration_s}", i)
            )
        if isinstance(ev, MicrowavePulse):
            lo, hi = MW_BAND_MHZ
            if not lo <= ev.frequency_mhz <= hi:
                violations.append(
                    Violation(
                        "warning",
                        f"microwave frequency {ev.frequency_mhz} MHz outside "
                        f"{lo:.0f}-{hi:.0f} MHz",
                        i,
                    )
                )

    by_channel: dict = {}
    for i, ev in enumerate(events):
        by_channel.setdefault(ev.channel, []).append((ev.start_s, ev.duration_s, i))
    for channel, items in by_channel.items():
        if channel in ("bias", "wait"):
            continue
        items.sort()
        for (s0, d0, i0), (s1, _, i1) in zip(items, items[1:]):
            if s1 < s0 + d0 - 1e-15:
                violations.append(
                    Violation(
                        "error",
                        f"{channel} events {i0} and {i1} overlap "
                        f"({s1:.3e} s < {s0 + d0:.3e} s)",
                        i1,
                    )
                )

    bias_steps = sorted(
        [(ev.start_s, ev.bias_v) for ev in events if isinstance(ev, SetBias)]
    )
    for i, ev in enumerate(events):
        if isinstance(ev, ReadWindow):
            bias = 0.0
            for t, v in bias_steps:
                if t <= ev.start_s:
                    bias = v
            if bias == 0.0:
                violations.append(
                    Violation(
                        "warning",
                        "read window with zero bias on both electrodes: "
                        "release without current",
                        i,
                    )
                )
    return violations


def serialize_sequence(events: list) -> list:
    """JSON-ready dict list in canonical schedule order."""
    out = []
    for ev in sorted(events, key=lambda e: (e.start_s, _CHANNEL_ORDER[e.channel])):
        d = {"type": ev.channel, "start_s": ev.start_s}
        if isinstance(ev, LaserPulse) or isinstance(ev, ReadWindow):
            d["duration_s"] = ev.duration_s
            d["spot"] = {
                "center_um": list(ev.spot.center),
                "wavelength_nm": ev.spot.wavelength_nm,
                "power_w": ev.spot.power_w,
                "waist_um": ev.spot.waist_um,
                "rayleigh_um": ev.spot.rayleigh_um,
            }
        elif isinstance(ev, MicrowavePulse):
            d.update(
                duration_s=ev.duration_s,
                frequency_mhz=ev.frequency_mhz,
                amplitude=ev.amplitude,
                phase_rad=ev.phase_rad,
            )
        elif isinstance(ev, SetBias):
            d["bias_v"] = ev.bias_v
        else:
            d["duration_s"] = ev.duration_s
        out.append(d)
    return out


def parse_sequence(dicts: list) -> list:
    events = []
    for d in dicts:
        kind = d["type"]
        if kind not in _EVENT_TYPES:
            raise ValueError(f"unknown event type {kind!r}")
        if kind in ("laser", "read"):
            s = d["spot"]
            spot = LaserSpot(
                tuple(s["center_um"]),
                s["wavelength_nm"],
                s["power_w"],
                s.get("waist_um", 0.2),
                s.get("rayleigh_um", 0.6),
            )
            events.append(
                _EVENT_TYPES[kind](d["start_s"], d["duration_s"], spot)
            )
        elif kind == "microwave":
            events.append(
                MicrowavePulse(
                    d["start_s"],
                    d["duration_s"],
                    d["frequency_mhz"],
                    d.get("amplitude", 1.0),
                    d.get("phase_rad", 0.0),
                )
            )
        elif kind == "bias":
            events.append(SetBias(d["start_s"], d["bias_v"]))
        else:
            events.append(Wait(d["start_s"], d["duration_s"]))
    return sorted(events, key=lambda e: (e.start_s, _CHANNEL_ORDER[e.channel]))


# ----------------------------------------------------------- run records


@dataclass
class RunPoint:
    value: float
    qint_c: float
    sigma_c: float
    seed: int
    extras: dict = field(default_factory=dict)


@dataclass
class RunRecord:
    protocol: str
    sweep_name: str
    points: list
    metadata: dict = field(default_factory=dict)
    traces: list = field(default_factory=list)
    wall_time_s: float | None = None  # never serialised with the data files

    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.points])

    def qints(self) -> np.ndarray:
        return np.array([p.qint_c for p in self.points])

    def sigmas(self) -> np.ndarray:
        return np.array([p.sigma_c for p in self.points])


def write_record_csv(record: RunRecord, path) -> None:
    """Run CSV: one '(sweep value, Q_int, sigma, seed)' row per point."""
    lines = [f"{record.sweep_name},q_int_c,sigma_c,seed"]
    for p in record.points:
        lines.append(f"{p.value!r},{p.qint_c!r},{p.sigma_c!r},{p.seed}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def record_sidecar(record: RunRecord) -> dict:
    """JSON sidecar payload (timestamps live in the manifest, not here)."""
    return {
        "schema_version": SCHEMA_VERSION,
        "protocol": record.protocol,
        "sweep_name": record.sweep_name,
        "metadata": record.metadata,
        "points": [
            {
                "value": p.value,
                "q_int_c": p.qint_c,
                "sigma_c": p.sigma_c,
                "seed": p.seed,
                "extras": p.extras,
            }
            for p in record.points
        ],
    }


# ----------------------------------------------------- cycle-level engine


@dataclass(frozen=True)
class CyclePhase:
    """One segment of a repeated cycle acting on a single defect.

    kind "laser" evolves the level model under delivered power; "wait"
    evolves it dark; "spin" applies a ground-spin map (population transfer
    or outright reassignment) after a dark interval of the pulse length.
    """

    kind: str
    duration_s: float
    power_w: float = 0.0
    wavelength_nm: float = 532.0
    spin_map: object = None

    @staticmethod
    def laser(duration_s: float, power_w: float, wavelength_nm: float = 532.0):
        return CyclePhase("laser", duration_s, power_w, wavelength_nm)

    @staticmethod
    def wait(duration_s: float):
        return CyclePhase("wait", duration_s)

    @staticmethod
    def spin(duration_s: float, spin_map):
        return CyclePhase("spin", duration_s, spin_map=spin_map)


def cycle_period_s(phases: list) -> float:
    return sum(p.duration_s for p in phases)


def _run_cycle(state, phases, rates):
    holes = 0.0
    for phase in phases:
        if phase.kind == "laser":
            state, emission = ph.evolve(
                state, rates, phase.power_w, phase.wavelength_nm, phase.duration_s
            )
            holes += emission.holes
        elif phase.kind == "wait":
            state, _ = ph.evolve(state, rates, 0.0, 532.0, phase.duration_s)
        elif phase.kind == "spin":
            if phase.duration_s > 0:
                state, _ = ph.evolve(state, rates, 0.0, 532.0, phase.duration_s)
            state = phase.spin_map(state)
        else:
            raise ValueError(f"unknown cycle phase {phase.kind!r}")
    return state, holes


def converge_cycle_yield(
    world: World, phases: list, max_cycles: int = 200, tol: float = 1e-10
) -> list:
    """Per-cycle expected hole emissions until the cycle turns periodic.

    Returns the transient list; its last entry is the steady per-cycle
    yield used for all remaining repetitions.
    """
    state = ph.fresh_state(world.split_spin_levels, nv_minus=0.70)
    state = ph.dark_settle(state, world.rates)
    yields = []
    previous = None
    for _ in range(max_cycles):
        state, holes = _run_cycle(state, phases, world.rates)
        yields.append(holes)
        if previous is not None and abs(holes - previous) <= tol * max(abs(holes), 1e-30):
            break
        previous = holes
    return yields


def accumulate_cycles(
    world: World,
    nv: NVRecord,
    phases: list,
    n_cycles: int,
    stochastic: bool = False,
    rng: np.random.Generator | None = None,
    flip_probability_value: float | None = None,
) -> dict:
    """Deposit n_cycles worth of captured charge into the world's banks.

    Expectation mode multiplies the converged per-cycle yield; Monte Carlo
    mode samples a spin outcome per cycle (when a flip probability is
    given), Poisson hole counts, and binomial capture thinning.  Both modes
    rely on the saturating fill law depending only on the delivered total,
    which makes the composition exact.  Returns per-electrode captured
    charge for bookkeeping.
    """
    if n_cycles < 0:
        raise ValueError("cycle count must be non-negative")
    captured = {i: 0.0 for i in world.banks}
    if n_cycles == 0:
        return captured
    eta, _ = interface_capture_flux(
        nv, ph.CarrierEmission(0.0, 1.0, 0.0, 1.0), world.layout, world.capture
    )
    weights = electrode_capture_weights(nv, world.layout, world.capture)

    if not stochastic:
        yields = converge_cycle_yield(world, phases)
        steady = yields[-1]
        transient = yields[:-1][: n_cycles]
        total_holes = sum(transient) + steady * max(0, n_cycles - len(transient))
        for i, w in enumerate(weights):
            captured[i] = total_holes * eta * w
    else:
        if rng is None:
            raise ValueError("Monte Carlo mode needs a random generator")
        if flip_probability_value is None:
            yields = converge_cycle_yield(world, phases)
            holes = rng.poisson(yields[-1], size=n_cycles).astype(float)
        else:
            flipped = _phases_with_flip(phases, 1.0)
            unflipped = _phases_with_flip(phases, 0.0)
            y_flip = converge_cycle_yield(world, flipped)[-1]
            y_keep = converge_cycle_yield(world, unflipped)[-1]
            spins = rng.random(n_cycles) < flip_probability_value
            means = np.where(spins, y_flip, y_keep)
            holes = rng.poisson(means).astype(float)
        for i, w in enumerate(weights):
            p = eta * w
            captured[i] = float(rng.binomial(holes.astype(int), p).sum())

    for i, amount in captured.items():
        world.banks[i] = deposit(world.banks[i], amount)
    return captured


def _phases_with_flip(phases: list, p_flip: float) -> list:
    """Replace probabilistic spin transfers by a fixed flip probability."""
    out = []
    for phase in phases:
        if phase.kind == "spin":
            out.append(CyclePhase.spin(phase.duration_s, _transfer_map(p_flip)))
        else:
            out.append(phase)
    return out


def _transfer_map(p_flip: float, branch: str = "lumped"):
    """Ground-spin population transfer by flip probability on one branch."""

    def apply(state):
        idx = state.idx
        pops = state.populations.copy()
        if branch in ("lumped",):
            key = "gs1" if not state.split else None
            if key is None:
                # split mode: lumped transfer spreads over both branches
                g0 = pops[idx["gs0"]]
                g1 = pops[idx["gsp"]] + pops[idx["gsm"]]
                new0 = g0 * (1 - p_flip) + g1 * p_flip
                new1 = g1 * (1 - p_flip) + g0 * p_flip
                pops[idx["gs0"]] = new0
                pops[idx["gsp"]] = new1 / 2.0
                pops[idx["gsm"]] = new1 / 2.0
            else:
                g0, g1 = pops[idx["gs0"]], pops[idx[key]]
                pops[idx["gs0"]] = g0 * (1 - p_flip) + g1 * p_flip
                pops[idx[key]] = g1 * (1 - p_flip) + g0 * p_flip
        else:
            key = "gsp" if branch == "upper" else "gsm"
            g0, g1 = pops[idx["gs0"]], pops[idx[key]]
            pops[idx["gs0"]] = g0 * (1 - p_flip) + g1 * p_flip
            pops[idx[key]] = g1 * (1 - p_flip) + g0 * p_flip
        return ph.LevelState(pops, state.split)

    return apply


def mw_spin_map(world: World, nv: NVRecord, frequency_mhz: float, amplitude: float, duration_s: float):
    """Spin map for a microwave pulse, honouring lumped/split operation.

    In split mode both branches are driven with their own detunings (a
    nearly degenerate pair sums transfer, capped at one, and flags the
    cap); in lumped mode the single effective transition is driven.
    """
    params = world.spin_params_for(nv)
    omega = amplitude * nv.rabi_mhz
    capped = False
    if world.split_spin_levels:
        f_lo, f_hi = spin_mod.resonance_frequencies(params)
        p_lower = flip_probability(frequency_mhz - f_lo, omega, duration_s)
        p_upper = flip_probability(frequency_mhz - f_hi, omega, duration_s)
        lower_map = _transfer_map(p_lower, "lower")
        upper_map = _transfer_map(p_upper, "upper")

        def apply(state):
            return upper_map(lower_map(state))

        return apply, capped
    detuning = frequency_mhz - params.zero_field_splitting_mhz
    p = flip_probability(detuning, omega, duration_s)
    return _transfer_map(p), capped


def _set_spin_map(p0: float, p1: float):
    """Outright reassignment of the NV- ground spin distribution."""

    def apply(state):
        if state.split:
            return state.with_ground_spin(p0, (p1 / 2.0, p1 / 2.0))
        return state.with_ground_spin(p0, p1)

    return apply


# -------------------------------------------------------------- readout op


@dataclass(frozen=True)
class ReadSpec:
    """One charge-readout window: spot, bias and estimator settings."""

    spot: LaserSpot
    bias_v: float = 2.2
    duration_s: float = 12.0
    repeats: int = 400
    tail_fraction: float = 0.2
    require_settled: bool = False
    attach_trace: bool = False

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")


def read_bank_charge(world: World, read: ReadSpec, seed: int) -> tuple[float, float, dict]:
    """Execute a readout window against the world's banks.

    Discharges the illuminated electrode's bank, synthesizes the filtered
    current trace (baseline plus collected release when that electrode is
    positively biased) and integrates the excess charge.  In analytic noise
    mode the repeat-averaged estimate is drawn from the exact sampling
    distribution of the estimator; in per-trace mode every repeat is
    rendered and averaged.
    """
    layout = world.layout
    spot = read.spot
    electrode = layout.nearest_electrode(spot.center[0], spot.center[1])
    factor = edge_profile(spot, layout, electrode, world.egpc)
    power_at_edge = spot.power_w * factor
    bank = world.banks[electrode]
    new_bank, profile = discharge(
        bank, power_at_edge, spot.wavelength_nm, read.duration_s
    )
    world.banks[electrode] = new_bank
    collected = layout.positive_electrode(read.bias_v) == electrode
    baseline = baseline_current(spot.power_w, read.bias_v, spot, layout, world.egpc)

    quiet_chain = replace(world.chain, noise_rms_a=0.0)
    trace = synthesize_trace(
        profile if collected else None,
        baseline,
        quiet_chain,
        read.duration_s,
        seed=0,
        q_eff=world.egpc.q_eff,
        metadata={"bias_v": read.bias_v, "read_power_w": spot.power_w,
                  "wavelength_nm": spot.wavelength_nm,
                  "spot_center_um": list(spot.center)},
    )
    result = integrate_excess_charge(
        trace,
        tail_fraction=read.tail_fraction,
        require_settled=read.require_settled,
        noise_rms_a=world.chain.noise_rms_a,
    )
    sigma_mean = result.sigma_c / math.sqrt(read.repeats)
    if world.noise_mode == "analytic":
        rng = np.random.default_rng(seed)
        q = result.q_c + rng.normal(0.0, sigma_mean) if sigma_mean > 0 else result.q_c
    else:
        values = []
        for r in range(read.repeats):
            noisy = synthesize_trace(
                profile if collected else None,
                baseline,
                world.chain,
                read.duration_s,
                seed=derive_seed(seed, "repeat", r),
                q_eff=world.egpc.q_eff,
            )
            values.append(
                integrate_excess_charge(
                    noisy,
                    tail_fraction=read.tail_fraction,
                    require_settled=False,
                ).q_c
            )
        q = float(np.mean(values))
    extras = {
        "settled": result.settled,
        "baseline_a": result.baseline_a,
        "released_charges": profile.total_released(),
        "collected": collected,
        "electrode": electrode,
    }
    if read.attach_trace:
        extras["trace"] = trace
    return float(q), float(sigma_mean), extras


def pump_spot(world: World, spot: LaserSpot, duration_s: float) -> dict:
    """Continuous optical pump: every defect cycles and feeds the banks.

    Returns per-NV hole emissions.  Defects seeing negligible power are
    skipped; capture into each electrode's bank follows the edge-distance
    efficiency and the per-electrode weight split.
    """
    emissions = {}
    for nv in world.nvs:
        delivered = spot.power_w * spot_power_at(nv.position_um, spot)
        if delivered < 1e-15:
            continue
        state = ph.dark_settle(
            ph.fresh_state(world.split_spin_levels, nv_minus=0.70), world.rates
        )
        _, emission = ph.evolve(
            state, world.rates, delivered, spot.wavelength_nm, duration_s
        )
        emissions[nv.label] = emission
        flux, _ = interface_capture_flux(nv, emission, world.layout, world.capture)
        weights = electrode_capture_weights(nv, world.layout, world.capture)
        for i, w in enumerate(weights):
            world.banks[i] = deposit(world.banks[i], flux * duration_s * w)
    return emissions


# ------------------------------------------------------- protocol builders


@dataclass
class ProtocolPlan:
    kind: str
    sweep_name: str
    sweep_values: list
    params: dict
    cycle_events: list = field(default_factory=list)


def _require_range(params: dict, key: str, lo, hi):
    v = params[key]
    if not lo <= v <= hi:
        raise ValueError(f"{key}={v} violates bound [{lo}, {hi}]")


def _spot_on(position, power_w: float, wavelength_nm: float = 532.0) -> LaserSpot:
    return LaserSpot(tuple(float(c) for c in position), wavelength_nm, power_w)


_CCDMR_DEFAULTS = {
    "nv": "NV_S",
    "pol_power_w": 300e-6,
    "pol_duration_s": 2.5e-6,
    "pi_duration_s": None,  # None -> half the defect's Rabi period
    "mw_amplitude": 1.0,
    "ion_power_w": 3.5e-3,
    "ion_duration_s": 500e-9,
    "budget_s": 1.5,
    "read_power_w": 3.5e-3,
    "read_wavelength_nm": 532.0,
    "read_bias_v": 2.2,
    "read_duration_s": 12.0,
    "repeats": 400000,
    "shuffle": False,
    "stochastic": False,
}


def build_protocol(kind: str, params: dict | None = None) -> ProtocolPlan:
    """Resolve a protocol plan with paper-faithful defaults.

    Unknown kinds and out-of-range parameters raise ValueError naming the
    violated bound.
    """
    params = dict(params or {})
    if kind not in PROTOCOL_KINDS:
        raise ValueError(f"unknown protocol kind {kind!r}; choose from {PROTOCOL_KINDS}")
    builder = {
        "ccdmr": _build_ccdmr,
        "rabi": _build_rabi,
        "echo": _build_echo,
        "wavelength_sweep": _build_wavelength_sweep,
        "power_sweep": _build_power_sweep,
        "fill_vs_time": _build_fill_vs_time,
        "image_scan": _build_image_scan,
        "readout_map": _build_readout_map,
        "hole_capture": _build_hole_capture,
    }[kind]
    return builder(params)


def _merge(defaults: dict, params: dict) -> dict:
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown protocol parameters: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(params)
    return merged


def _check_common(p: dict):
    _require_range(p, "pol_power_w", 0.0, 0.05)
    _require_range(p, "ion_power_w", 0.0, 0.05)
    _require_range(p, "read_power_w", 0.0, 0.05)
    _require_range(p, "read_bias_v", -10.0, 10.0)
    _require_range(p, "budget_s", 0.0, 600.0)


def _build_ccdmr(params: dict) -> ProtocolPlan:
    defaults = dict(_CCDMR_DEFAULTS)
    defaults.update(
        {"f_start_mhz": 2770.0, "f_stop_mhz": 2970.0, "points": 41}
    )
    p = _merge(defaults, params)
    _check_common(p)
    _require_range(p, "points", 2, 100000)
    values = list(np.linspace(p["f_start_mhz"], p["f_stop_mhz"], int(p["points"])))
    return ProtocolPlan("ccdmr", "frequency_mhz", values, p)


def _build_rabi(params: dict) -> ProtocolPlan:
    defaults = dict(_CCDMR_DEFAULTS)
    defaults.pop("pi_duration_s")
    defaults.update(
        {
            "frequency_mhz": 2870.0,
            "t_start_s": 0.0,
            "t_stop_s": 800e-9,
            "points": 33,
            "repeats": 500000,
        }
    )
    p = _merge(defaults, params)
    _check_common(p)
    _require_range(p, "t_stop_s", 1e-9, 1e-4)
    values = list(np.linspace(p["t_start_s"], p["t_stop_s"], int(p["points"])))
    return ProtocolPlan("rabi", "mw_duration_s", values, p)


def _build_echo(params: dict) -> ProtocolPlan:
    defaults = dict(_CCDMR_DEFAULTS)
    defaults.pop("pi_duration_s")
    defaults.update(
        {
            "frequency_mhz": None,  # None -> lower resonance of the world
            "taus_s": [
                0.5e-6, 2e-6, 4e-6, 6e-6, 8e-6, 10e-6,
                12.5e-6, 15e-6, 18e-6, 22e-6, 27e-6, 33e-6,
            ],
            "budget_s": 10.0,  # per-point budget; the paper fixes none for echo
            "read_duration_s": 20.0,  # long tail keeps the baseline estimate clean
            "repeats": 20000000,
        }
    )
    p = _merge(defaults, params)
    _check_common(p)
    if min(p["taus_s"]) < 0:
        raise ValueError("taus_s must be non-negative")
    return ProtocolPlan("echo", "tau_s", list(p["taus_s"]), p)


def _read_defaults() -> dict:
    return {
        "nv": "NV_S",
        "pump_power_w": 3.5e-3,
        "pump_duration_s": 1.0,
        "read_power_w": 3.5e-3,
        "read_wavelength_nm": 532.0,
        "read_bias_v": 2.2,
        "read_duration_s": 12.0,
        "repeats": 4000,
    }


def _build_wavelength_sweep(params: dict) -> ProtocolPlan:
    defaults = _read_defaults()
    defaults.update(
        {
            "wavelengths_nm": [
                633.0, 610.0, 590.0, 580.0, 570.0, 564.0, 558.0,
                552.0, 546.0, 540.0, 534.0, 528.0, 522.0,
            ],
            "read_duration_s": 3.0,
        }
    )
    p = _merge(defaults, params)
    _require_range(p, "read_bias_v", -10.0, 10.0)
    return ProtocolPlan("wavelength_sweep", "wavelength_nm", list(p["wavelengths_nm"]), p)


def _build_power_sweep(params: dict) -> ProtocolPlan:
    defaults = _read_defaults()
    defaults.update(
        {
            "read_powers_w": [0.5e-3, 1e-3, 2e-3, 3.5e-3, 7e-3],
            "window_s": 10.0,  # fixed integration window for Q_int
        }
    )
    p = _merge(defaults, params)
    _require_range(p, "read_bias_v", -10.0, 10.0)
    if max(p["read_powers_w"]) > 0.05:
        raise ValueError("read_powers_w entries must stay below 50 mW")
    return ProtocolPlan("power_sweep", "read_power_w", list(p["read_powers_w"]), p)


def _build_fill_vs_time(params: dict) -> ProtocolPlan:
    defaults = _read_defaults()
    defaults.update(
        {"pump_durations_s": [0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0]}
    )
    p = _merge(defaults, params)
    if min(p["pump_durations_s"]) <= 0:
        raise ValueError("pump_durations_s must be positive")
    return ProtocolPlan("fill_vs_time", "pump_duration_s", list(p["pump_durations_s"]), p)


def _build_image_scan(params: dict) -> ProtocolPlan:
    defaults = {
        "x_range_um": (-3.0, 3.0),
        "y_range_um": (-3.0, 3.0),
        "pixels": 25,
        "z_um": 4.0,
        "pump_power_w": 3.5e-3,
        "pump_duration_s": 1.0,
        "read_power_w": 3.5e-3,
        "read_wavelength_nm": 532.0,
        "read_bias_v": 2.2,
        "read_duration_s": 12.0,
        "repeats": 1,
        "yield_exponent": 1.5,
    }
    p = _merge(defaults, params)
    _require_range(p, "pixels", 2, 512)
    return ProtocolPlan("image_scan", "pixel", list(range(int(p["pixels"]) ** 2)), p)


def _build_readout_map(params: dict) -> ProtocolPlan:
    defaults = {
        "nv": "NV_S",
        "pump_power_w": 3.5e-3,
        "pump_duration_s": 1.0,
        "plane": "xz",  # "xy" over the pad or "xz" through the edge
        "x_range_um": (4.0, 16.0),
        "other_range_um": (0.0, 6.0),
        "pixels": 13,
        "read_power_w": 3.5e-3,
        "read_wavelength_nm": 532.0,
        "read_bias_v": 2.2,
        "read_duration_s": 12.0,
    }
    p = _merge(defaults, params)
    if p["plane"] not in ("xy", "xz"):
        raise ValueError("plane must be 'xy' or 'xz'")
    return ProtocolPlan("readout_map", "pixel", list(range(int(p["pixels"]) ** 2)), p)


def _build_hole_capture(params: dict) -> ProtocolPlan:
    defaults = {
        "bias_v": 1.0,
        "egpc_power_w": 3.5e-3,
        "probe_times_s": [0.0, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0],
        "shots": 400,
        "with_prepump": False,
        "prepump_nv": "NV_S",
        "prepump_power_w": 3.5e-3,
        "prepump_duration_s": 1.0,
        "spot_y_um": 0.0,
    }
    p = _merge(defaults, params)
    _require_range(p, "bias_v", -10.0, 10.0)
    if min(p["probe_times_s"]) < 0:
        raise ValueError("probe_times_s must be non-negative")
    return ProtocolPlan("hole_capture", "probe_time_s", list(p["probe_times_s"]), p)


# ------------------------------------------------------ protocol executors


def _ccdmr_cycle(world: World, nv: NVRecord, spin_phase: CyclePhase, p: dict) -> list:
    return [
        CyclePhase.laser(p["pol_duration_s"], p["pol_power_w"]),
        spin_phase,
        CyclePhase.laser(p["ion_duration_s"], p["ion_power_w"]),
        CyclePhase.wait(world.cycle_gap_s),
    ]


def _default_read(world: World, p: dict, **overrides) -> ReadSpec:
    positive = world.layout.positive_electrode(p["read_bias_v"])
    if positive is None:
        positive = len(world.layout.electrodes) - 1
    rect = world.layout.electrodes[positive]
    other = world.layout.electrodes[1 if positive == 0 else 0]
    edge_x = rect.x1 if other.x0 >= rect.x1 else rect.x0
    spot = LaserSpot(
        (edge_x, 0.0, 0.0), p["read_wavelength_nm"], p["read_power_w"]
    )
    spec = dict(
        spot=spot,
        bias_v=p["read_bias_v"],
        duration_s=p["read_duration_s"],
        repeats=p.get("repeats", 400),
    )
    spec.update(overrides)
    return ReadSpec(**spec)


def _sweep_order(n: int, shuffle: bool, seed: int) -> list:
    order = list(range(n))
    if shuffle:
        rng = np.random.default_rng(derive_seed(seed, "shuffle"))
        order = list(rng.permutation(n))
    return order


def run_ccdmr(plan: ProtocolPlan, world: World, seed: int) -> RunRecord:
    p = plan.params
    nv = world.nvs.get(p["nv"])
    pi_duration = p["pi_duration_s"] or pi_pulse_duration_s(
        p["mw_amplitude"] * nv.rabi_mhz
    )
    read = _default_read(world, p)
    points = [None] * len(plan.sweep_values)
    capped_any = False
    for j in _sweep_order(len(plan.sweep_values), p["shuffle"], seed):
        freq = plan.sweep_values[j]
        w = world.copy()
        w.reset_banks()
        spin_map, capped = mw_spin_map(w, nv, freq, p["mw_amplitude"], pi_duration)
        capped_any |= capped
        phases = _ccdmr_cycle(w, nv, CyclePhase.spin(pi_duration, spin_map), p)
        n_cycles = int(p["budget_s"] // cycle_period_s(phases))
        point_seed = derive_seed(seed, "point", j)
        if p["stochastic"]:
            rng = np.random.default_rng(derive_seed(point_seed, "mc"))
            params_spin = w.spin_params_for(nv)
            pf = flip_probability(
                freq - params_spin.zero_field_splitting_mhz,
                p["mw_amplitude"] * nv.rabi_mhz,
                pi_duration,
            )
            accumulate_cycles(w, nv, phases, n_cycles, True, rng, pf)
        else:
            accumulate_cycles(w, nv, phases, n_cycles)
        q, sigma, extras = read_bank_charge(w, read, point_seed)
        extras["n_cycles"] = n_cycles
        points[j] = RunPoint(freq, q, sigma, point_seed, extras)
    metadata = {
        "nv": nv.label,
        "pi_duration_s": pi_duration,
        "bias_field_g": world.spin_env.bias_field_g,
        "degenerate_drive_capped": capped_any,
        "repeats": p["repeats"],
    }
    return RunRecord("ccdmr", plan.sweep_name, points, metadata)


def run_rabi(plan: ProtocolPlan, world: World, seed: int) -> RunRecord:
    p = plan.params
    nv = world.nvs.get(p["nv"])
    read = _default_read(world, p)
    points = []
    for j, t_mw in enumerate(plan.sweep_values):
        w = world.copy()
        w.reset_banks()
        spin_map, _ = mw_spin_map(w, nv, p["frequency_mhz"], p["mw_amplitude"], t_mw)
        phases = _ccdmr_cycle(w, nv, CyclePhase.spin(t_mw, spin_map), p)
        n_cycles = int(p["budget_s"] // cycle_period_s(phases))
        accumulate_cycles(w, nv, phases, n_cycles)
        point_seed = derive_seed(seed, "point", j)
        q, sigma, extras = read_bank_charge(w, read, point_seed)
        extras["n_cycles"] = n_cycles
        points.append(RunPoint(t_mw, q, sigma, point_seed, extras))
    metadata = {"nv": nv.label, "frequency_mhz": p["frequency_mhz"], "repeats": p["repeats"]}
    return RunRecord("rabi", plan.sweep_name, points, metadata)


def invert_fill_charge(q_int_c: float, bank, q_eff: float) -> float:
    """Delivered holes from a measured Q_int through the saturating fill law.

    Inverts Q = e*q_eff*N*(1 - exp(-H/N)) using the bank's total capacity as
    a calibrated instrument constant (exact when the per-class fill ratios
    are matched, the default calibration).  Keeps differential spin signals
    undistorted by the fill nonlinearity.
    """
    from .units import ELEMENTARY_CHARGE_C as e

    n_total = bank.total_capacity
    x = q_int_c / (e * q_eff * n_total)
    x = min(x, 1.0 - 1e-12)
    return -n_total * math.log1p(-x)


def run_echo(plan: ProtocolPlan, world: World, seed: int) -> RunRecord:
    """Hahn echo under charge readout, both projection terminations.

    Spin coherence during the echo block is closed-form (pulses are short
    against T2); the final m=0 population maps onto the ionisation-pulse
    yield.  Per point, the measured charges of the two terminations are
    deconvolved through the fill law, differenced, and normalised by the
    cycle count; the record carries the difference-normalised envelope with
    the fitted amplitude stored in the metadata.
    """
    from .fitting import fit_exponential_decay

    p = plan.params
    nv = world.nvs.get(p["nv"])
    params_spin = world.spin_params_for(nv)
    frequency = p["frequency_mhz"]
    if frequency is None:
        frequency = spin_mod.resonance_frequencies(params_spin)[0]
    pi_time = pi_pulse_duration_s(p["mw_amplitude"] * nv.rabi_mhz)
    read = _default_read(world, p)
    pol_state = ph.dark_settle(
        ph.fresh_state(world.split_spin_levels, nv_minus=0.70), world.rates
    )
    pol_state, _ = ph.polarise(
        pol_state, world.rates, p["pol_power_w"], p["pol_duration_s"]
    )
    fidelity = pol_state.spin_polarisation
    raw = []
    for j, tau in enumerate(plan.sweep_values):
        per_term = {}
        n_cycles_tau = None
        for term in ("pi/2", "3pi/2"):
            w = world.copy()
            w.reset_banks()
            s_ideal = spin_mod.echo_amplitude(tau, params_spin, term)
            p0_final = fidelity * s_ideal + (1.0 - fidelity) * (1.0 - s_ideal)
            echo_block_s = 2.0 * tau + 2.0 * pi_time  # pi/2 + pi + projection
            phases = [
                CyclePhase.laser(p["pol_duration_s"], p["pol_power_w"]),
                CyclePhase.spin(echo_block_s, _set_spin_map(p0_final, 1.0 - p0_final)),
                CyclePhase.laser(p["ion_duration_s"], p["ion_power_w"]),
                CyclePhase.wait(w.cycle_gap_s),
            ]
            n_cycles = int(p["budget_s"] // cycle_period_s(phases))
            n_cycles_tau = n_cycles
            accumulate_cycles(w, nv, phases, n_cycles)
            point_seed = derive_seed(seed, "point", j, term)
            electrode = w.layout.nearest_electrode(
                read.spot.center[0], read.spot.center[1]
            )
            bank_before = w.banks[electrode]
            q, sigma, _ = read_bank_charge(w, read, point_seed)
            holes = invert_fill_charge(q, bank_before, w.egpc.q_eff)
            slope = 1.0 / max(1.0 - q / (
                ELEMENTARY_CHARGE_C * w.egpc.q_eff * bank_before.total_capacity
            ), 1e-12)
            per_term[term] = (holes, sigma * slope / ELEMENTARY_CHARGE_C, point_seed)
        h_diff = per_term["3pi/2"][0] - per_term["pi/2"][0]
        sigma_diff = math.hypot(per_term["3pi/2"][1], per_term["pi/2"][1])
        raw.append((tau, h_diff / n_cycles_tau, sigma_diff / n_cycles_tau,
                    per_term["pi/2"][2], n_cycles_tau))

    taus = np.array([r[0] for r in raw])
    diffs = np.array([r[1] for r in raw])
    sigmas = np.array([r[2] for r in raw])
    # difference normalisation: fit the free amplitude, report D/A
    amp_fit = fit_exponential_decay(2.0 * taus, diffs, sigmas)
    amplitude = amp_fit.params["amplitude"]
    points = [
        RunPoint(tau, d / amplitude, s / abs(amplitude), sd, {"n_cycles": n})
        for (tau, d, s, sd, n) in raw
    ]
    metadata = {
        "nv": nv.label,
        "frequency_mhz": frequency,
        "normalisation_amplitude": amplitude,
        "polarisation_fidelity": fidelity,
        "repeats": p["repeats"],
        "t2_seed_us": params_spin.t2_us,
    }
    return RunRecord("echo", plan.sweep_name, points, metadata)


def run_wavelength_sweep(plan: ProtocolPlan, world: World, seed: int) -> RunRecord:
    p = plan.params
    nv = world.nvs.get(p["nv"])
    points = []
    for j, wavelength in enumerate(plan.sweep_values):
        w = world.copy()
        w.reset_banks()
        pump = _spot_on(nv.position_um, p["pump_power_w"])
        pump_spot(w, pump, p["pump_duration_s"])
        read = _default_read(world, p)
        read = replace(
            read,
            spot=LaserSpot(
                read.spot.center, wavelength, p["read_power_w"],
                read.spot.waist_um, read.spot.rayleigh_um,
            ),
        )
        point_seed = derive_seed(seed, "point", j)
        q, sigma, extras = read_bank_charge(w, read, point_seed)
        points.append(RunPoint(wavelength, q, sigma, point_seed, extras))
    return RunRecord(
        "wavelength_sweep", plan.sweep_name, points, {"nv": nv.label, "repeats": p["repeats"]}
    )


def run_power_sweep(plan: ProtocolPlan, world: World, seed: int) -> RunRecord:
    """Read-power dependence: Q_int in a fixed window plus settled-tail fits.

    The fixed-window Q_int follows the plan's ``window_s``; the slow time
    constant is fitted on a separate long-enough readout of an identically
    prepared bank so the settledness precondition holds at every power.
    """
    from .fitting import fit_double_exponential
    from .traps import release_rate

    p = plan.params
    nv = world.nvs.get(p["nv"])
    points = []
    for j, power in enumerate(plan.sweep_values):
        w = world.copy()
        w.reset_banks()
        pump_spot(w, _spot_on(nv.position_um, p["pump_power_w"]), p["pump_duration_s"])
        read = _default_read(world, p, duration_s=p["window_s"])
        read = replace(
            read,
            spot=LaserSpot(
                read.spot.center, p["read_wavelength_nm"], power,
                read.spot.waist_um, read.spot.rayleigh_um,
            ),
        )
        point_seed = derive_seed(seed, "point", j)
        q, sigma, extras = read_bank_charge(w, read, point_seed)

        # settled trace for the limiting-time-constant fit
        w2 = world.copy()
        w2.reset_banks()
        pump_spot(w2, _spot_on(nv.position_um, p["pump_power_w"]), p["pump_duration_s"])
        electrode = w2.layout.nearest_electrode(read.spot.center[0], read.spot.center[1])
        factor = edge_profile(read.spot, w2.layout, electrode, w2.egpc)
        _, k_slow = release_rate(w2.banks[electrode], power * factor, p["read_wavelength_nm"])
        fit_duration = max(p["window_s"], 6.0 / max(k_slow, 1e-6))
        fit_read = replace(read, duration_s=fit_duration, attach_trace=True)
        _, _, fit_extras = read_bank_charge(w2, fit_read, derive_seed(point_seed, "fit"))
        trace: CurrentTrace = fit_extras["trace"]
        excess = trace.samples - fit_extras["baseline_a"]
        fit = fit_double_exponential(
            trace.times, excess, filter_cutoff_hz=world.chain.cutoff_hz
        )
        extras["tau_slow_s"] = fit.params.get("tau_slow", fit.params.get("tau"))
        extras["tau_fit_flags"] = list(fit.flags)
        points.append(RunPoint(power, q, sigma, point_seed, extras))
    return RunRecord(
        "power_sweep", plan.sweep_name, points,
        {"nv": nv.label, "window_s": p["window_s"], "repeats": p["repeats"]},
    )


def run_fill_vs_time(plan: ProtocolPlan, world: World, seed: int) -> RunRecord:
    p = plan.params
    nv = world.nvs.get(p["nv"])
    points = []
    for j, duration in enumerate(plan.sweep_values):
        w = world.copy()
        w.reset_banks()
        pump_spot(w, _spot_on(nv.position_um, p["pump_power_w"]), duration)
        read = _default_read(world, p)
        point_seed = derive_seed(seed, "point", j)
        q, sigma, extras = read_bank_charge(w, read, point_seed)
        points.append(RunPoint(duration, q, sigma, point_seed, extras))
    return RunRecord(
        "fill_vs_time", plan.sweep_name, points, {"nv": nv.label, "repeats": p["repeats"]}
    )


def run_protocol(plan: ProtocolPlan, world: World, seed: int) -> RunRecord:
    """Dispatch a resolved plan to its executor (maps live in imaging)."""
    if plan.kind in ("image_scan", "readout_map", "hole_capture"):
        raise ValueError(
            f"protocol {plan.kind!r} produces maps; run it via the imaging module"
        )
    executor = {
        "ccdmr": run_ccdmr,
        "rabi": run_rabi,
        "echo": run_echo,
        "wavelength_sweep": run_wavelength_sweep,
        "power_sweep": run_power_sweep,
        "fill_vs_time": run_fill_vs_time,
    }[plan.kind]
    return executor(plan, world, seed)


# ------------------------------------------------------- generic executor


def run(events: list, world: World, seed: int) -> RunRecord:
    """Execute an arbitrary validated event list against a world copy.

    Laser pulses drive every defect's level model and feed the banks;
    microwave pulses apply ground-spin transfers; read windows discharge
    and synthesize traces, one run-record point per window.  Module errors
    are re-raised with the offending event's index.
    """
    errors = [v for v in validate(events) if v.severity == "error"]
    if errors:
        raise RunError(f"sequence invalid: {errors[0].message} (event {errors[0].index})")
    w = world.copy()
    ordered = sorted(
        enumerate(events), key=lambda kv: (kv[1].start_s, _CHANNEL_ORDER[kv[1].channel])
    )
    nv_states = {
        nv.label: ph.dark_settle(
            ph.fresh_state(w.split_spin_levels, nv_minus=0.70), w.rates
        )
        for nv in w.nvs
    }
    clock = 0.0
    points = []
    for index, ev in ordered:
        try:
            if ev.start_s > clock + 1e-15:
                gap = ev.start_s - clock
                for label in nv_states:
                    nv_states[label], _ = ph.evolve(nv_states[label], w.rates, 0.0, 532.0, gap)
                clock = ev.start_s
            if isinstance(ev, SetBias):
                w.bias_v = ev.bias_v
                continue
            if isinstance(ev, Wait):
                pass
            elif isinstance(ev, LaserPulse):
                for nv in w.nvs:
                    delivered = ev.spot.power_w * spot_power_at(nv.position_um, ev.spot)
                    state, emission = ph.evolve(
                        nv_states[nv.label], w.rates, delivered,
                        ev.spot.wavelength_nm, ev.duration_s,
                    )
                    nv_states[nv.label] = state
                    flux, _ = interface_capture_flux(nv, emission, w.layout, w.capture)
                    weights = electrode_capture_weights(nv, w.layout, w.capture)
                    for i, wt in enumerate(weights):
                        w.banks[i] = deposit(w.banks[i], flux * ev.duration_s * wt)
            elif isinstance(ev, MicrowavePulse):
                for nv in w.nvs:
                    spin_map, _ = mw_spin_map(
                        w, nv, ev.frequency_mhz, ev.amplitude, ev.duration_s
                    )
                    nv_states[nv.label] = spin_map(nv_states[nv.label])
            elif isinstance(ev, ReadWindow):
                read = ReadSpec(
                    spot=ev.spot, bias_v=w.bias_v, duration_s=ev.duration_s, repeats=1
                )
                q, sigma, extras = read_bank_charge(
                    w, read, derive_seed(seed, "read", len(points))
                )
                points.append(
                    RunPoint(ev.start_s, q, sigma, derive_seed(seed, "read", len(points)), extras)
                )
            clock = max(clock, ev.start_s + ev.duration_s)
        except (ValueError, RunError) as exc:
            raise RunError(f"event {index} ({ev.channel}): {exc}") from exc
    warnings = [v.message for v in validate(events) if v.severity == "warning"]
    return RunRecord("sequence", "t_s", points, {"warnings": warnings})
