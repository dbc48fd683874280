"""Command-line interface.

Subcommands: run a full configuration, shortcut runners for the bundled
spin protocols and charge imaging, fit any exported CSV, and validate a
configuration file.  The default output directory comes from --out, then
the CCDMRSIM_OUT environment variable, then ./ccdmrsim_out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import fitting
from .config import ConfigError, parse_config
from .orchestrate import _dump_json, _fit_payload, orchestrate
from .readout import read_trace_csv
from .sequence import build_protocol, validate

_DEFAULT_OUT_ENV = "CCDMRSIM_OUT"


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(_DEFAULT_OUT_ENV, "ccdmrsim_out"))


def _default_config_text(kind: str, seed: int) -> str:
    return f"""\
seed: {seed}
nvs:
  - label: NV_S
    position: [0.0, 0.0, 4.0]
  - label: NV_1
    position: [0.0, 16.0, 4.0]
  - label: NV_2
    position: [0.0, 50.0, 4.0]
protocols:
  - kind: {kind}
    name: {kind}
"""


def _cmd_run(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8")
    try:
        config = parse_config(text)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(
        config.output_dir or os.environ.get(_DEFAULT_OUT_ENV, "ccdmrsim_out")
    )
    manifest = orchestrate(config, out, seed_override=args.seed, png_data=args.png_data)
    print(f"wrote {len(manifest.files)} files to {out}")
    for failure in manifest.failures:
        print(f"block failed: {failure['block']}: {failure['error']}", file=sys.stderr)
    return 1 if manifest.failures else 0


def _cmd_protocol(kind: str):
    def handler(args) -> int:
        config = parse_config(_default_config_text(kind, args.seed))
        out = _out_dir(args)
        manifest = orchestrate(config, out, png_data=getattr(args, "png_data", False))
        print(f"wrote {len(manifest.files)} files to {out}")
        return 1 if manifest.failures else 0

    return handler


def _read_record_csv(path: Path):
    lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    x = np.array([float(r[0]) for r in rows])
    y = np.array([float(r[1]) for r in rows])
    s = np.array([float(r[2]) for r in rows])
    return header[0], x, y, s


def _cmd_fit(args) -> int:
    path = Path(args.csv)
    first_line = path.read_text(encoding="utf-8").splitlines()[0]
    model = args.model
    if first_line.startswith("#") or first_line.startswith("t_s"):
        trace = read_trace_csv(path)
        t = trace.times
        y = trace.samples
        excess = y - float(np.mean(y[-max(2, y.size // 5) :]))
        result = fitting.fit_double_exponential(
            t, excess, filter_cutoff_hz=trace.metadata.get("cutoff_hz")
        )
    else:
        sweep_name, x, y, s = _read_record_csv(path)
        if model == "auto":
            model = {
                "frequency_mhz": "lorentzian1",
                "mw_duration_s": "rabi",
                "tau_s": "echo",
            }.get(sweep_name, "lorentzian1")
        if model in ("lorentzian1", "lorentzian2"):
            result = fitting.fit_lorentzian_dips(
                x, y, s, n_dips=1 if model == "lorentzian1" else 2
            )
        elif model == "rabi":
            result = fitting.fit_damped_sinusoid(x, y, s)
        elif model == "echo":
            result = fitting.fit_echo(x * 1e6, y, s)
        elif model == "double_exp":
            result = fitting.fit_double_exponential(x, y, s)
        else:
            print(f"unknown model {model!r}", file=sys.stderr)
            return 2
    payload = _fit_payload(result)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(payload, out / (path.stem + "_fit.json"))
    print(json.dumps(payload, sort_keys=True, indent=1))
    return 0


def _cmd_validate(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8")
    try:
        config = parse_config(text)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}")
        return 2
    status = 0
    for block in config.protocols:
        try:
            plan = build_protocol(block.kind, block.params)
        except ValueError as exc:
            print(f"block {block.name}: {exc}")
            status = 2
            continue
        for violation in validate(plan.cycle_events):
            print(f"block {block.name}: {violation.severity}: {violation.message}")
            if violation.severity == "error":
                status = 2
    print("config ok" if status == 0 else "config has problems")
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ccdmrsim",
        description="Digital twin of charge-capture detected magnetic resonance "
        "experiments on single NV centres",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run every protocol block in a config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None, help="override the master seed")
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--png-data", action="store_true", help="emit 0-255 map matrices")
    p_run.set_defaults(handler=_cmd_run)

    for kind, help_text in (
        ("ccdmr", "zero-field CCDMR spectrum with default calibration"),
        ("rabi", "Rabi oscillation via charge readout"),
        ("echo", "Hahn echo via charge readout"),
    ):
        p = sub.add_parser(kind, help=help_text)
        p.add_argument("--seed", type=int, default=1234)
        p.add_argument("--out", default=None)
        p.set_defaults(handler=_cmd_protocol(kind))

    p_scan = sub.add_parser("scan", help="photoelectric charge image of the default field")
    p_scan.add_argument("--seed", type=int, default=1234)
    p_scan.add_argument("--out", default=None)
    p_scan.add_argument("--png-data", action="store_true")
    p_scan.set_defaults(handler=_cmd_protocol("image_scan"))

    p_fit = sub.add_parser("fit", help="fit an exported CSV (trace or sweep record)")
    p_fit.add_argument("csv")
    p_fit.add_argument(
        "--model",
        default="auto",
        choices=["auto", "lorentzian1", "lorentzian2", "rabi", "echo", "double_exp"],
    )
    p_fit.add_argument("--out", default=None)
    p_fit.set_defaults(handler=_cmd_fit)

    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    p_val.set_defaults(handler=_cmd_validate)

    args = parser.parse_args(argv)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
