"""Coherent ground-state spin dynamics: resonances, rotations, echoes.

The triplet is treated as two independently driven two-level branches
(m=0 to m=+1 and m=0 to m=-1) under an axial bias field.  Pulses are short
compared with T2, so decoherence enters only through the closed-form echo
envelope, never during a pulse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MW_BAND_MHZ = (2000.0, 4000.0)  # sanity band for microwave events


@dataclass(frozen=True)
class SpinParams:
    """Ground-state spin constants for one defect."""

    zero_field_splitting_mhz: float = 2870.0
    gyromagnetic_mhz_per_g: float = 2.8025
    bias_field_g: float = 0.0
    rabi_mhz: float = 4.523  # angular-frequency-free Rabi rate under unit drive
    t2_us: float = 24.90
    echo_exponent: float = 1.0

    def __post_init__(self):
        if self.zero_field_splitting_mhz <= 0 or self.gyromagnetic_mhz_per_g <= 0:
            raise ValueError("D and gamma must be positive")
        if self.t2_us <= 0:
            raise ValueError("T2 must be positive")
        if not 1.0 <= self.echo_exponent <= 3.0:
            raise ValueError("echo stretch exponent must lie in [1, 3]")


def resonance_frequencies(p: SpinParams) -> tuple[float, float]:
    """(f_minus, f_plus) transition frequencies in MHz, symmetric about D."""
    zeeman = p.gyromagnetic_mhz_per_g * p.bias_field_g
    return (
        p.zero_field_splitting_mhz - zeeman,
        p.zero_field_splitting_mhz + zeeman,
    )


def flip_probability(
    detuning_mhz: float, rabi_mhz: float, duration_s: float
) -> float:
    """Rabi transfer probability for a square pulse.

    P = Omega^2/(Omega^2 + Delta^2) * sin^2(pi * sqrt(Omega^2 + Delta^2) * t),
    with frequencies in MHz and the duration in seconds.
    """
    if rabi_mhz < 0 or duration_s < 0:
        raise ValueError("Rabi frequency and duration must be non-negative")
    if rabi_mhz == 0:
        return 0.0
    omega_eff = math.hypot(rabi_mhz, detuning_mhz)
    t_us = duration_s * 1e6
    return (rabi_mhz / omega_eff) ** 2 * math.sin(math.pi * omega_eff * t_us) ** 2


@dataclass
class SpinState:
    """Bloch vector of the driven two-level subspace plus spectator share.

    The driven branch is selected per pulse; sz = +1 means all population
    in m=0, sz = -1 all in the driven m=+-1 branch.  ``spectator`` holds
    population parked in the undriven branch (split-field operation).
    ``degenerate_drive`` flags that a pulse addressed both branches at once
    (zero-field split mode) and transfer probabilities were summed, capped
    at one.
    """

    sx: float = 0.0
    sy: float = 0.0
    sz: float = 1.0
    spectator: float = 0.0
    degenerate_drive: bool = False

    @property
    def p0(self) -> float:
        """Population of m=0 within the full triplet."""
        active = 1.0 - self.spectator
        return active * (1.0 + self.sz) / 2.0

    @property
    def p1(self) -> float:
        """Population outside m=0 (driven branch plus spectator)."""
        return 1.0 - self.p0

    def copy(self) -> "SpinState":
        return SpinState(self.sx, self.sy, self.sz, self.spectator, self.degenerate_drive)


def _rotate(state: SpinState, axis: np.ndarray, angle: float) -> SpinState:
    """Rodrigues rotation of the Bloch vector about a unit axis."""
    v = np.array([state.sx, state.sy, state.sz])
    k = axis / np.linalg.norm(axis)
    rotated = (
        v * math.cos(angle)
        + np.cross(k, v) * math.sin(angle)
        + k * np.dot(k, v) * (1.0 - math.cos(angle))
    )
    out = state.copy()
    out.sx, out.sy, out.sz = (float(c) for c in rotated)
    return out


def apply_mw_pulse(
    state: SpinState,
    f_drive_mhz: float,
    rabi_mhz: float,
    duration_s: float,
    params: SpinParams,
    branch: str = "auto",
    phase_rad: float = 0.0,
) -> SpinState:
    """Apply a square microwave pulse to the addressed branch.

    In the rotating frame the Bloch vector precesses about the tilted axis
    (Omega cos(phi), Omega sin(phi), Delta) by 2*pi*sqrt(Omega^2+Delta^2)*t,
    which reproduces the detuned Rabi transfer formula for populations while
    keeping the phases needed to compose echo sequences.

    ``branch`` picks the driven transition: "lower", "upper", or "auto"
    (nearest resonance).
    """
    if rabi_mhz < 0 or duration_s < 0:
        raise ValueError("Rabi frequency and duration must be non-negative")
    if rabi_mhz == 0 or duration_s == 0:
        return state.copy()
    f_lo, f_hi = resonance_frequencies(params)
    if branch == "lower":
        resonance = f_lo
    elif branch == "upper":
        resonance = f_hi
    elif branch == "auto":
        resonance = f_lo if abs(f_drive_mhz - f_lo) <= abs(f_drive_mhz - f_hi) else f_hi
    else:
        raise ValueError(f"unknown branch {branch!r}")
    detuning = f_drive_mhz - resonance
    omega_eff = math.hypot(rabi_mhz, detuning)
    axis = np.array(
        [
            rabi_mhz * math.cos(phase_rad),
            rabi_mhz * math.sin(phase_rad),
            detuning,
        ]
    )
    angle = 2.0 * math.pi * omega_eff * duration_s * 1e6
    return _rotate(state, axis, angle)


def degenerate_flip_probability(
    f_drive_mhz: float, rabi_mhz: float, duration_s: float, params: SpinParams
) -> tuple[float, bool]:
    """Population transfer when both branches sit near the drive (B ~ 0).

    Transfer probabilities of the two branches are summed and capped at
    one; the boolean reports whether the cap engaged so callers can flag
    the run metadata.
    """
    f_lo, f_hi = resonance_frequencies(params)
    p = flip_probability(f_drive_mhz - f_lo, rabi_mhz, duration_s) + flip_probability(
        f_drive_mhz - f_hi, rabi_mhz, duration_s
    )
    return min(p, 1.0), p > 1.0


def free_evolution(
    state: SpinState, tau_s: float, detuning_mhz: float = 0.0
) -> SpinState:
    """Rotating-frame precession during a free-evolution interval."""
    if tau_s < 0:
        raise ValueError("free evolution time must be non-negative")
    return _rotate(state, np.array([0.0, 0.0, 1.0]), 2.0 * math.pi * detuning_mhz * tau_s * 1e6)


def pi_pulse_duration_s(rabi_mhz: float) -> float:
    """Duration of an on-resonance pi pulse at the given Rabi frequency."""
    if rabi_mhz <= 0:
        raise ValueError("Rabi frequency must be positive")
    return 1.0 / (2.0 * rabi_mhz) * 1e-6


def echo_envelope(tau_s: float, params: SpinParams) -> float:
    """Normalised Hahn-echo coherence exp(-(2 tau / T2)^n)."""
    if tau_s < 0:
        raise ValueError("tau must be non-negative")
    t2_s = params.t2_us * 1e-6
    return math.exp(-((2.0 * tau_s / t2_s) ** params.echo_exponent))


def echo_amplitude(
    tau_s: float,
    params: SpinParams,
    final_pulse: str = "pi/2",
    projection_sign: float = 1.0,
) -> float:
    """m=0 population after a pi/2 - tau - pi - tau - projection sequence.

    S = (1 -+ E)/2 with E the echo envelope; the pi/2 termination maps the
    refocused coherence away from m=0 and the 3pi/2 termination maps it
    back, so the difference of the two recovers E exactly.
    ``projection_sign`` = -1 swaps the convention.
    """
    env = echo_envelope(tau_s, params)
    if final_pulse in ("pi/2", "pi2"):
        return (1.0 - projection_sign * env) / 2.0
    if final_pulse in ("3pi/2", "3pi2"):
        return (1.0 + projection_sign * env) / 2.0
    raise ValueError(f"final_pulse must be 'pi/2' or '3pi/2', got {final_pulse!r}")
