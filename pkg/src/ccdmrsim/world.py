"""Shared simulation state: device, defects, models and trap banks.

A ``World`` is the single mutable object a run acts on.  Everything inside
it is an immutable dataclass except the per-electrode trap banks, which
are replaced wholesale on every update, so copying a world is cheap and
sweep points can run on independent copies.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .geometry import DeviceLayout, NVRecord, NVRegistry, two_pad_layout
from .photophysics import PhotoRates
from .readout import AmplifierChain, EgpcParams
from .spin import SpinParams
from .transport import CaptureModel
from .traps import TrapBank


@dataclass
class FieldSettings:
    """Spin-environment settings shared by all defects."""

    zero_field_splitting_mhz: float = 2870.0
    gyromagnetic_mhz_per_g: float = 2.8025
    bias_field_g: float = 0.0
    echo_exponent: float = 1.0


@dataclass
class World:
    layout: DeviceLayout
    nvs: NVRegistry
    rates: PhotoRates
    capture: CaptureModel
    chain: AmplifierChain
    egpc: EgpcParams
    banks: dict = field(default_factory=dict)  # electrode index -> TrapBank
    spin_env: FieldSettings = field(default_factory=FieldSettings)
    hole_kernel_d_um: float = 2.0  # readout hole-current kernel scale
    cycle_gap_s: float = 1e-6  # inter-cycle dead time in pulsed protocols
    bias_v: float = 0.0
    noise_mode: str = "analytic"  # "analytic" | "per_trace"

    def __post_init__(self):
        if self.noise_mode not in ("analytic", "per_trace"):
            raise ValueError("noise_mode must be 'analytic' or 'per_trace'")
        for i in range(len(self.layout.electrodes)):
            self.banks.setdefault(i, TrapBank())

    @property
    def split_spin_levels(self) -> bool:
        """Track m=+1 and m=-1 separately whenever a bias field is applied."""
        return self.spin_env.bias_field_g != 0.0

    def spin_params_for(self, nv: NVRecord) -> SpinParams:
        return SpinParams(
            zero_field_splitting_mhz=self.spin_env.zero_field_splitting_mhz,
            gyromagnetic_mhz_per_g=self.spin_env.gyromagnetic_mhz_per_g,
            bias_field_g=self.spin_env.bias_field_g,
            rabi_mhz=nv.rabi_mhz,
            t2_us=nv.t2_us,
            echo_exponent=self.spin_env.echo_exponent,
        )

    def copy(self) -> "World":
        return World(
            layout=self.layout,
            nvs=self.nvs,
            rates=self.rates,
            capture=self.capture,
            chain=self.chain,
            egpc=self.egpc,
            banks=dict(self.banks),
            spin_env=replace(self.spin_env),
            hole_kernel_d_um=self.hole_kernel_d_um,
            cycle_gap_s=self.cycle_gap_s,
            bias_v=self.bias_v,
            noise_mode=self.noise_mode,
        )

    def reset_banks(self) -> None:
        self.banks = {i: bank.emptied() for i, bank in self.banks.items()}

    def total_trapped_charge(self) -> float:
        return sum(bank.total_charge for bank in self.banks.values())


def default_registry() -> NVRegistry:
    """Seven defects: a five-NV cluster in the gap plus two distant sources.

    NV_S sits at the gap centre about 4 um deep; NV_A..NV_D surround it at
    1-2 um separations (the photoluminescence-map cluster); NV_1 and NV_2
    sit 16 um and 50 um away along the electrode edge direction.
    """
    return NVRegistry(
        [
            NVRecord("NV_S", (0.0, 0.0, 4.0)),
            NVRecord("NV_A", (-1.5, 1.2, 4.2)),
            NVRecord("NV_B", (1.8, -0.8, 3.8)),
            NVRecord("NV_C", (-0.6, -1.9, 4.1)),
            NVRecord("NV_D", (1.1, 1.7, 4.0)),
            NVRecord("NV_1", (0.0, 16.0, 4.0)),
            NVRecord("NV_2", (0.0, 50.0, 4.0)),
        ]
    )


def default_world(bias_field_g: float = 0.0, noise_mode: str = "analytic") -> World:
    """Calibrated default device: two 10x20 um pads across a 10 um gap."""
    return World(
        layout=two_pad_layout(gap_um=10.0, pad_width_um=10.0, pad_height_um=20.0),
        nvs=default_registry(),
        rates=PhotoRates(),
        capture=CaptureModel(),
        chain=AmplifierChain(),
        egpc=EgpcParams(),
        spin_env=FieldSettings(bias_field_g=bias_field_g),
        noise_mode=noise_mode,
    )
