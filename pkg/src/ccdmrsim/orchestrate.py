"""Run orchestration: execute every protocol block, write artefacts,
assemble the checksummed manifest.

All randomness descends from the master seed through stable hashes, so a
rerun of the same configuration produces byte-identical data files.  Wall
clock readings exist only inside the manifest.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path

import numpy as np

from . import fitting, imaging
from .config import ExperimentConfig, build_world, charge_readout_model, serialize_config
from .seeding import derive_seed
from .sequence import (
    SCHEMA_VERSION,
    RunRecord,
    build_protocol,
    record_sidecar,
    run_protocol,
    write_record_csv,
)

ARTIFACT_VERSION = "0.1.0"


@dataclass
class RunManifest:
    config_hash: str
    artifact_version: str
    files: dict = field(default_factory=dict)  # relative path -> sha256
    failures: list = field(default_factory=list)
    started_unix_s: float | None = None
    elapsed_s: float | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "artifact_version": self.artifact_version,
            "config_hash": self.config_hash,
            "files": self.files,
            "failures": self.failures,
            "started_unix_s": self.started_unix_s,
            "elapsed_s": self.elapsed_s,
        }


def _checksum(path: Path) -> str:
    return sha256(path.read_bytes()).hexdigest()


def _json_default(value):
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serialisable: {type(value)}")


def _dump_json(payload: dict, path: Path) -> None:
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=1, default=_json_default) + "\n",
        encoding="utf-8",
    )


def _fit_payload(result: fitting.FitResult) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "params": result.params,
        "sigmas": result.sigmas,
        "residual_rms": result.residual_rms,
        "converged": result.converged,
        "n_evaluations": result.n_evaluations,
        "flags": list(result.flags),
    }


def _record_fit(record: RunRecord, world) -> fitting.FitResult | None:
    """Standard analysis attached to each sweep kind's output."""
    x, y, s = record.values(), record.qints(), np.maximum(record.sigmas(), 1e-30)
    if record.protocol == "ccdmr":
        n_dips = 2 if world.spin_env.bias_field_g != 0 else 1
        return fitting.fit_lorentzian_dips(fitting.Spectrum(x, y, s), n_dips=n_dips)
    if record.protocol == "rabi":
        n = np.array([p.extras.get("n_cycles", 1) for p in record.points], dtype=float)
        scale = n[0] / n
        return fitting.fit_damped_sinusoid(x, y * scale, s * scale)
    if record.protocol == "echo":
        return fitting.fit_echo(x * 1e6, y, s)
    return None


def _run_block(block, world, model, seed: int, out: Path, png_data: bool) -> list:
    """Execute one protocol block; returns the files it wrote."""
    written = []
    if block.kind in ("image_scan", "readout_map", "hole_capture"):
        if block.kind == "image_scan":
            plan = build_protocol(block.kind, block.params)
            p = plan.params
            scan = imaging.acquire_qint_map(
                world,
                tuple(p["x_range_um"]),
                tuple(p["y_range_um"]),
                int(p["pixels"]),
                seed,
                pump_power_w=p["pump_power_w"],
                pump_duration_s=p["pump_duration_s"],
                yield_exponent=p["yield_exponent"],
                z_um=p["z_um"],
            )
            maps = [(f"{block.name}.csv", scan)]
        elif block.kind == "readout_map":
            plan = build_protocol(block.kind, block.params)
            p = plan.params
            scan = imaging.map_readout_position(
                world,
                seed,
                source_nv=p["nv"],
                plane=p["plane"],
                x_range_um=tuple(p["x_range_um"]),
                other_range_um=tuple(p["other_range_um"]),
                pixels=int(p["pixels"]),
                pump_power_w=p["pump_power_w"],
                pump_duration_s=p["pump_duration_s"],
                read_power_w=p["read_power_w"],
                read_wavelength_nm=p["read_wavelength_nm"],
                read_bias_v=p["read_bias_v"],
                read_duration_s=p["read_duration_s"],
            )
            maps = [(f"{block.name}.csv", scan)]
        else:
            plan = build_protocol(block.kind, block.params)
            p = plan.params
            result = imaging.hole_capture_experiment(
                world,
                seed,
                bias_v=p["bias_v"],
                egpc_power_w=p["egpc_power_w"],
                probe_times_s=p["probe_times_s"],
                shots=int(p["shots"]),
                with_prepump=bool(p["with_prepump"]),
                prepump_nv=p["prepump_nv"],
                prepump_power_w=p["prepump_power_w"],
                prepump_duration_s=p["prepump_duration_s"],
                spot_y_um=p["spot_y_um"],
                model=model,
            )
            rates_path = out / f"{block.name}_rates.csv"
            lines = ["nv,edge_distance_um,spot_distance_um,rate_per_s,sigma_per_s"]
            for label in result.nv_labels:
                lines.append(
                    f"{label},{result.edge_distances_um[label]!r},"
                    f"{result.spot_distances_um[label]!r},"
                    f"{result.rates_per_s[label]!r},{result.rate_sigmas[label]!r}"
                )
            rates_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            written.append(rates_path)
            maps = [
                (f"{block.name}_t{i}.csv", scan) for i, scan in enumerate(result.maps)
            ]
        for name, scan in maps:
            path = out / name
            imaging.write_map_csv(scan, path)
            written.append(path)
            sidecar = out / (path.stem + ".json")
            _dump_json(
                {"schema_version": SCHEMA_VERSION, "units": scan.units,
                 "metadata": scan.metadata},
                sidecar,
            )
            written.append(sidecar)
            if png_data:
                png_path = out / (path.stem + ".pngdata.csv")
                imaging.write_png_data_csv(scan, png_path)
                written.append(png_path)
        return written

    plan = build_protocol(block.kind, block.params)
    record = run_protocol(plan, world, seed)
    csv_path = out / f"{block.name}.csv"
    write_record_csv(record, csv_path)
    written.append(csv_path)
    sidecar_path = out / f"{block.name}.json"
    _dump_json(record_sidecar(record), sidecar_path)
    written.append(sidecar_path)
    fit = _record_fit(record, world)
    if fit is not None:
        fit_path = out / f"{block.name}_fit.json"
        _dump_json(_fit_payload(fit), fit_path)
        written.append(fit_path)
    return written


def orchestrate(
    config: ExperimentConfig,
    out_dir,
    seed_override: int | None = None,
    png_data: bool = False,
) -> RunManifest:
    """Run all protocol blocks and write outputs plus the manifest.

    A failing block is recorded in the manifest and the remaining blocks
    still run.  Per-block seeds derive from the master seed and the block
    index; per-point seeds derive further inside the executors.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    master = config.seed if seed_override is None else seed_override
    manifest = RunManifest(
        config_hash=config.config_hash(),
        artifact_version=ARTIFACT_VERSION,
        started_unix_s=time.time(),
    )
    (out / "config.yaml").write_text(serialize_config(config), encoding="utf-8")
    files = [out / "config.yaml"]
    model = charge_readout_model(config)
    for index, block in enumerate(config.protocols):
        world = build_world(config)
        block_seed = derive_seed(master, "block", index)
        try:
            files.extend(_run_block(block, world, model, block_seed, out, png_data))
        except Exception as exc:  # noqa: BLE001 - recorded, run continues
            manifest.failures.append(
                {"block": block.name, "kind": block.kind, "error": str(exc)}
            )
    for path in files:
        manifest.files[path.name] = _checksum(path)
    manifest.elapsed_s = time.time() - manifest.started_unix_s
    _dump_json(manifest.to_dict(), out / "manifest.json")
    return manifest


def verify_manifest(out_dir) -> bool:
    """Re-checksum every file the manifest lists."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    return all(
        _checksum(out / name) == digest for name, digest in manifest["files"].items()
    )
