"""Experiment configuration: strict schema, unit suffixes, serialisation.

Configurations are YAML with a fixed key hierarchy (documented in the
README).  Unknown keys are hard errors with a nearest-key suggestion, so a
typo can never silently fall back to a default.  Quantities may be bare
numbers (canonical units) or suffixed strings ("3.5mW", "2.5us"); they are
normalised on parse, and serialising a parsed config reproduces it
exactly.
"""

from __future__ import annotations

import difflib
import hashlib
from dataclasses import dataclass, field, fields as dc_fields

import yaml

from .geometry import NVRecord, NVRegistry, two_pad_layout
from .photophysics import PhotoRates
from .readout import AmplifierChain, EgpcParams
from .imaging import ChargeReadoutModel
from .sequence import PROTOCOL_KINDS
from .transport import CaptureModel
from .units import UnitError, parse_quantity
from .world import FieldSettings, World


class ConfigError(ValueError):
    """Carries the full list of per-key diagnostics for a bad config."""

    def __init__(self, problems: list):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Key:
    dimension: str  # units.py dimension, or "raw"
    default: object = None
    required: bool = False


_SCHEMA = {
    "seed": Key("raw", required=True),
    "output_dir": Key("raw", default=None),
    "noise_mode": Key("raw", default="analytic"),
    "cycle_gap": Key("time_s", default=1e-6),
    "device": {
        "gap": Key("length_um", default=10.0),
        "pad_width": Key("length_um", default=10.0),
        "pad_height": Key("length_um", default=20.0),
    },
    "spin": {
        "zero_field_splitting": Key("freq_hz", default=2.87e9),
        "gyromagnetic_mhz_per_g": Key("dimensionless", default=2.8025),
        "bias_field": Key("field_g", default=0.0),
        "echo_exponent": Key("dimensionless", default=1.0),
    },
    "photophysics": {
        "preset": Key("raw", default="v1"),
        "overrides": Key("raw", default=None),
    },
    "transport": {
        "eta0": Key("dimensionless", default=0.1),
        "d0": Key("length_um", default=10.0),
        "kernel": Key("raw", default="hyperbolic"),
        "exponent": Key("dimensionless", default=1.0),
        "hole_kernel_d": Key("length_um", default=2.0),
    },
    "traps": {
        "capacity_fast": Key("dimensionless", default=1.8e5),
        "capacity_slow": Key("dimensionless", default=4.2e5),
        "fill_fraction_fast": Key("dimensionless", default=0.3),
        "release_fast_per_w": Key("dimensionless", default=6.52e3),
        "release_slow_per_w": Key("dimensionless", default=1.63e2),
        "threshold_energy": Key("energy_ev", default=2.2),
        "peak_energy": Key("energy_ev", default=2.3),
        "decay_per_ev": Key("dimensionless", default=4.0),
    },
    "amplifier": {
        "sensitivity_per_v": Key("current_a", default=20e-12),
        "cutoff": Key("freq_hz", default=37.0),
        "sample_rate": Key("freq_hz", default=1000.0),
        "noise_rms": Key("current_a", default=50e-15),
    },
    "egpc": {
        "gain_a_per_w": Key("dimensionless", default=8.0e-9),
        "v0": Key("voltage_v", default=1.0),
        "q_eff": Key("dimensionless", default=1.0),
        "sigma_lateral": Key("length_um", default=1.0),
        "sigma_axial": Key("length_um", default=2.0),
        "bias_max": Key("voltage_v", default=10.0),
    },
    "charge_readout": {
        "bright_rate": Key("freq_hz", default=400.0),
        "dark_rate": Key("freq_hz", default=100.0),
        "background": Key("freq_hz", default=0.0),
        "duration": Key("time_s", default=0.05),
    },
}

_NV_SCHEMA = {
    "label": Key("raw", required=True),
    "position": Key("raw", required=True),  # 3 lengths, validated below
    "axis": Key("raw", default=(0.57735027, 0.57735027, 0.57735027)),
    "rabi": Key("freq_hz", default=4.523e6),
    "t2": Key("time_s", default=24.90e-6),
    "capture_window": Key("length_um", default=5.0e-8),
    "pl_rate_per_w": Key("dimensionless", default=4.0e7),
}

# protocol parameter dimensions are inferred from the key suffix
_SUFFIX_DIMENSIONS = {
    "_w": ("power_w", 1.0),
    "_s": ("time_s", 1.0),
    "_mhz": ("freq_hz", 1e-6),
    "_nm": ("wavelength_nm", 1.0),
    "_um": ("length_um", 1.0),
    "_v": ("voltage_v", 1.0),
    "_g": ("field_g", 1.0),
}


def _suggest(key: str, valid) -> str:
    close = difflib.get_close_matches(key, list(valid), n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return f"unknown key {key!r}{hint}; valid keys: {sorted(valid)}"


def _parse_section(raw: dict, schema: dict, path: str, problems: list) -> dict:
    out = {}
    raw = raw or {}
    if not isinstance(raw, dict):
        problems.append(f"{path}: expected a mapping")
        return out
    for key in raw:
        if key not in schema:
            problems.append(f"{path}.{key}: " + _suggest(key, schema.keys()))
    for key, spec in schema.items():
        if isinstance(spec, dict):
            out[key] = _parse_section(raw.get(key), spec, f"{path}.{key}", problems)
            continue
        if key not in raw or raw[key] is None:
            if spec.required:
                problems.append(f"{path}.{key}: required key missing")
            else:
                out[key] = spec.default
            continue
        value = raw[key]
        if spec.dimension == "raw":
            out[key] = value
            continue
        try:
            out[key] = parse_quantity(value, spec.dimension)
        except UnitError as exc:
            problems.append(f"{path}.{key}: {exc}")
    return out


def _parse_protocol_value(key: str, value, path: str, problems: list):
    if isinstance(value, (list, tuple)):
        return [
            _parse_protocol_value(key, item, f"{path}[]", problems) for item in value
        ]
    if isinstance(value, (bool, int, float)) or value is None:
        return value
    for suffix, (dimension, scale) in _SUFFIX_DIMENSIONS.items():
        if key.endswith(suffix):
            try:
                return parse_quantity(value, dimension) * scale
            except UnitError as exc:
                problems.append(f"{path}: {exc}")
                return None
    if isinstance(value, str):
        return value
    problems.append(f"{path}: cannot interpret value {value!r}")
    return None


@dataclass
class ProtocolBlock:
    kind: str
    name: str
    params: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    seed: int
    sections: dict
    nvs: list
    protocols: list
    output_dir: str | None = None
    noise_mode: str = "analytic"

    def config_hash(self) -> str:
        return hashlib.sha256(serialize_config(self).encode("utf-8")).hexdigest()


_PHOTO_FIELDS = {f.name for f in dc_fields(PhotoRates)}


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a configuration document.

    Raises ConfigError carrying one diagnostic per problem; a valid parse
    returns a fully normalised config with every default filled in.
    """
    problems: list = []
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"not valid YAML: {exc}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping"])

    known_top = set(_SCHEMA) | {"nvs", "protocols"}
    for key in raw:
        if key not in known_top:
            problems.append(_suggest(key, known_top))

    sections = _parse_section(
        {k: v for k, v in raw.items() if k in _SCHEMA}, _SCHEMA, "config", problems
    )

    if sections.get("noise_mode") not in ("analytic", "per_trace"):
        problems.append("config.noise_mode: must be 'analytic' or 'per_trace'")
    seed = sections.get("seed")
    if seed is not None and not isinstance(seed, int):
        problems.append("config.seed: master seed must be an integer (no wall-clock seeding)")

    overrides = sections["photophysics"].get("overrides")
    if overrides:
        for key in overrides:
            if key not in _PHOTO_FIELDS:
                problems.append(f"config.photophysics.overrides.{key}: " + _suggest(key, _PHOTO_FIELDS))
    if sections["photophysics"].get("preset") not in ("v1",):
        problems.append("config.photophysics.preset: only preset 'v1' is shipped")

    nvs = []
    raw_nvs = raw.get("nvs") or []
    if not isinstance(raw_nvs, list) or not raw_nvs:
        problems.append("config.nvs: at least one NV record is required")
        raw_nvs = []
    for i, entry in enumerate(raw_nvs):
        parsed = _parse_section(entry, _NV_SCHEMA, f"config.nvs[{i}]", problems)
        position = parsed.get("position")
        if position is not None:
            if not isinstance(position, (list, tuple)) or len(position) != 3:
                problems.append(f"config.nvs[{i}].position: need three coordinates")
            else:
                try:
                    parsed["position"] = tuple(
                        parse_quantity(c, "length_um") for c in position
                    )
                except UnitError as exc:
                    problems.append(f"config.nvs[{i}].position: {exc}")
        nvs.append(parsed)

    protocols = []
    raw_blocks = raw.get("protocols") or []
    if not isinstance(raw_blocks, list):
        problems.append("config.protocols: expected a list of blocks")
        raw_blocks = []
    if not raw_blocks:
        problems.append("config.protocols: at least one protocol block is required")
    for i, block in enumerate(raw_blocks):
        if not isinstance(block, dict):
            problems.append(f"config.protocols[{i}]: expected a mapping")
            continue
        unknown = set(block) - {"kind", "name", "params"}
        for key in unknown:
            problems.append(
                f"config.protocols[{i}].{key}: " + _suggest(key, {"kind", "name", "params"})
            )
        kind = block.get("kind")
        if kind not in PROTOCOL_KINDS:
            problems.append(
                f"config.protocols[{i}].kind: unknown kind {kind!r}; "
                f"choose from {sorted(PROTOCOL_KINDS)}"
            )
            continue
        params = {}
        for key, value in (block.get("params") or {}).items():
            params[key] = _parse_protocol_value(
                key, value, f"config.protocols[{i}].params.{key}", problems
            )
        protocols.append(ProtocolBlock(kind, block.get("name") or f"{kind}_{i}", params))

    # sweep specs must be non-empty
    for i, block in enumerate(protocols):
        for key, value in block.params.items():
            if isinstance(value, list) and not value:
                problems.append(f"config.protocols[{i}].params.{key}: empty sweep list")

    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(
        seed=int(seed),
        sections=sections,
        nvs=nvs,
        protocols=protocols,
        output_dir=sections.get("output_dir"),
        noise_mode=sections.get("noise_mode"),
    )


def build_world(config: ExperimentConfig) -> World:
    """Instantiate the simulation world a parsed configuration describes."""
    device = config.sections["device"]
    layout = two_pad_layout(device["gap"], device["pad_width"], device["pad_height"])
    registry = NVRegistry(
        [
            NVRecord(
                label=nv["label"],
                position_um=nv["position"],
                axis=tuple(nv["axis"]),
                rabi_mhz=nv["rabi"] / 1e6,
                t2_us=nv["t2"] * 1e6,
                capture_window_um=nv["capture_window"],
                pl_rate_per_w=nv["pl_rate_per_w"],
            )
            for nv in config.nvs
        ]
    )
    rates = PhotoRates()
    overrides = config.sections["photophysics"].get("overrides")
    if overrides:
        rates = rates.with_overrides(**overrides)
    transport = config.sections["transport"]
    traps = config.sections["traps"]
    amplifier = config.sections["amplifier"]
    egpc = config.sections["egpc"]
    spin = config.sections["spin"]

    from .traps import SpectralResponse, TrapBank

    bank = TrapBank(
        capacity_fast=traps["capacity_fast"],
        capacity_slow=traps["capacity_slow"],
        fill_fraction_fast=traps["fill_fraction_fast"],
        release_fast_per_w=traps["release_fast_per_w"],
        release_slow_per_w=traps["release_slow_per_w"],
        response=SpectralResponse(
            traps["threshold_energy"], traps["peak_energy"], traps["decay_per_ev"]
        ),
    )
    world = World(
        layout=layout,
        nvs=registry,
        rates=rates,
        capture=CaptureModel(
            eta0=transport["eta0"],
            d0_um=transport["d0"],
            kernel=transport["kernel"],
            exponent=transport["exponent"],
        ),
        chain=AmplifierChain(
            sensitivity_a_per_v=amplifier["sensitivity_per_v"],
            cutoff_hz=amplifier["cutoff"],
            sample_rate_hz=amplifier["sample_rate"],
            noise_rms_a=amplifier["noise_rms"],
        ),
        egpc=EgpcParams(
            gain_a_per_w=egpc["gain_a_per_w"],
            v0_v=egpc["v0"],
            q_eff=egpc["q_eff"],
            sigma_lateral_um=egpc["sigma_lateral"],
            sigma_axial_um=egpc["sigma_axial"],
            bias_max_v=egpc["bias_max"],
        ),
        banks={0: bank, 1: bank},
        spin_env=FieldSettings(
            zero_field_splitting_mhz=spin["zero_field_splitting"] / 1e6,
            gyromagnetic_mhz_per_g=spin["gyromagnetic_mhz_per_g"],
            bias_field_g=spin["bias_field"],
            echo_exponent=spin["echo_exponent"],
        ),
        hole_kernel_d_um=transport["hole_kernel_d"],
        cycle_gap_s=config.sections["cycle_gap"],
        noise_mode=config.noise_mode,
    )
    world.reset_banks()
    return world


def charge_readout_model(config: ExperimentConfig) -> ChargeReadoutModel:
    cr = config.sections["charge_readout"]
    return ChargeReadoutModel(
        bright_cps=cr["bright_rate"],
        dark_cps=cr["dark_rate"],
        background_cps=cr["background"],
        duration_s=cr["duration"],
    )


def _strip_defaults(sections: dict, schema: dict) -> dict:
    out = {}
    for key, spec in schema.items():
        if isinstance(spec, dict):
            nested = _strip_defaults(sections.get(key, {}), spec)
            if nested:
                out[key] = nested
        else:
            value = sections.get(key)
            if value is not None and value != spec.default:
                out[key] = value
    return out


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical YAML for a parsed config; parse(serialize(c)) == c."""
    doc: dict = _strip_defaults(config.sections, _SCHEMA)
    doc["seed"] = config.seed
    if config.output_dir is not None:
        doc["output_dir"] = config.output_dir
    if config.noise_mode != "analytic":
        doc["noise_mode"] = config.noise_mode
    doc["nvs"] = []
    for nv in config.nvs:
        entry = {"label": nv["label"], "position": list(nv["position"])}
        for key, spec in _NV_SCHEMA.items():
            if key in ("label", "position"):
                continue
            value = nv.get(key)
            if isinstance(value, tuple):
                value = list(value)
            default = list(spec.default) if isinstance(spec.default, tuple) else spec.default
            if value is not None and value != default:
                entry[key] = value
        doc["nvs"].append(entry)
    doc["protocols"] = [
        {"kind": b.kind, "name": b.name, **({"params": b.params} if b.params else {})}
        for b in config.protocols
    ]
    return yaml.safe_dump(doc, sort_keys=True, default_flow_style=False)
