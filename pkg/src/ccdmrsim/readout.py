"""Electrode-generated photocurrent synthesis and excess-charge extraction.

The readout chain is: baseline EGPC set by bias, power and spot placement;
a trap-release transient superposed on it; a first-order low-pass filter
standing in for the amplifier chain; uniform sampling; additive Gaussian
sample noise.  The filter step is the exact exponential integrator for
zero-order-held input, so a held step reproduces 1 - exp(-2 pi f_c t) at
the sample times to round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from .geometry import DeviceLayout, LaserSpot
from .traps import ReleaseProfile
from .units import ELEMENTARY_CHARGE_C


class TransientNotSettledError(RuntimeError):
    """Trace tail still carries transient; message names the shortfall."""

    def __init__(self, message: str, extra_duration_s: float):
        super().__init__(message)
        self.extra_duration_s = extra_duration_s


@dataclass(frozen=True)
class EgpcParams:
    """Baseline photocurrent model for the forward-biased junction.

    I0 = gain * P * V/(V+V0) * edge_profile(spot), nonzero only while the
    illuminated electrode is the positively biased one.  The edge profile
    peaks on the gap-facing edge at the surface and decays as a Gaussian in
    lateral and depth offset.
    """

    gain_a_per_w: float = 8.0e-9
    v0_v: float = 1.0
    q_eff: float = 1.0  # gain-collection factor on released charge
    sigma_lateral_um: float = 1.0
    sigma_axial_um: float = 2.0
    bias_max_v: float = 10.0

    def __post_init__(self):
        if self.gain_a_per_w < 0 or self.v0_v <= 0:
            raise ValueError("gain must be >= 0 and V0 > 0")
        if self.sigma_lateral_um <= 0 or self.sigma_axial_um <= 0:
            raise ValueError("edge profile widths must be positive")


def edge_profile(spot: LaserSpot, layout: DeviceLayout, electrode: int, params: EgpcParams) -> float:
    """Delivery factor of a spot onto one electrode's gap-facing edge."""
    rect = layout.electrodes[electrode]
    x, y, z = spot.center
    # the facing edge is the side toward the other pad (toward the gap)
    if len(layout.electrodes) >= 2:
        other = layout.electrodes[1 if electrode == 0 else 0]
        edge_x = rect.x1 if other.x0 >= rect.x1 else rect.x0
    else:
        edge_x = rect.x0
    dx = x - edge_x
    dy = max(rect.y0 - y, 0.0, y - rect.y1)
    lateral2 = dx * dx + dy * dy
    return math.exp(-lateral2 / (2.0 * params.sigma_lateral_um**2)) * math.exp(
        -(z * z) / (2.0 * params.sigma_axial_um**2)
    )


def baseline_current(
    power_w: float,
    bias_v: float,
    spot: LaserSpot,
    layout: DeviceLayout,
    params: EgpcParams,
) -> float:
    """Steady EGPC in amperes for a spot illuminating an electrode edge.

    Zero at zero bias and zero when the spot targets the reverse-biased
    electrode; otherwise linear in power with a hyperbolic bias saturation.
    """
    if abs(bias_v) > params.bias_max_v:
        raise ValueError(f"bias {bias_v} V outside +-{params.bias_max_v} V range")
    positive = layout.positive_electrode(bias_v)
    if positive is None:
        return 0.0
    target = layout.nearest_electrode(spot.center[0], spot.center[1])
    if target != positive:
        return 0.0
    sat = abs(bias_v) / (abs(bias_v) + params.v0_v)
    return params.gain_a_per_w * power_w * sat * edge_profile(spot, layout, positive, params)


@dataclass(frozen=True)
class AmplifierChain:
    """Transimpedance amplifier plus first-order low-pass plus sampler."""

    sensitivity_a_per_v: float = 20e-12
    cutoff_hz: float = 37.0
    sample_rate_hz: float = 1000.0
    noise_rms_a: float = 50e-15

    def __post_init__(self):
        if self.cutoff_hz <= 0 or self.sensitivity_a_per_v <= 0:
            raise ValueError("cutoff and sensitivity must be positive")
        if self.sample_rate_hz <= 2.0 * self.cutoff_hz:
            raise ValueError("sample rate must exceed twice the filter cutoff")
        if self.noise_rms_a < 0:
            raise ValueError("noise RMS must be non-negative")

    @property
    def dt_s(self) -> float:
        return 1.0 / self.sample_rate_hz

    @property
    def filter_tau_s(self) -> float:
        return 1.0 / (2.0 * math.pi * self.cutoff_hz)


@dataclass
class CurrentTrace:
    """Uniformly sampled photocurrent record with acquisition metadata."""

    t0_s: float
    dt_s: float
    samples: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.size < 2:
            raise ValueError("a trace needs at least two samples")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trace samples must be finite")
        if self.dt_s <= 0:
            raise ValueError("sample interval must be positive")

    @property
    def times(self) -> np.ndarray:
        return self.t0_s + self.dt_s * np.arange(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.dt_s * (self.samples.size - 1)


def lowpass_first_order(
    held_input: np.ndarray, dt_s: float, cutoff_hz: float, y0: float = 0.0
) -> np.ndarray:
    """Exact discrete first-order low-pass for zero-order-held input.

    ``held_input[k]`` applies on [t_k, t_{k+1}); the output is returned at
    sample times t_0..t_N with y[0] = y0 and
    y[k+1] = x[k] + (y[k] - x[k]) * exp(-2 pi f_c dt).
    """
    x = np.asarray(held_input, dtype=float)
    beta = math.exp(-2.0 * math.pi * cutoff_hz * dt_s)
    z, _ = lfilter([1.0 - beta], [1.0, -beta], x, zi=[beta * y0])
    return np.concatenate(([y0], z))


def filter_sampled_signal(
    samples: np.ndarray, dt_s: float, cutoff_hz: float, y0: float = 0.0
) -> np.ndarray:
    """Filter a sampled signal, treating each sample as held to the next."""
    samples = np.asarray(samples, dtype=float)
    return lowpass_first_order(samples[:-1], dt_s, cutoff_hz, y0)


def synthesize_trace(
    profile: ReleaseProfile | None,
    baseline_a: float,
    chain: AmplifierChain,
    duration_s: float,
    seed: int,
    q_eff: float = 1.0,
    metadata: dict | None = None,
) -> CurrentTrace:
    """Render the ideal current I(t) = I0 + q_eff*e*r(t) through the chain.

    The release input enters as exact per-interval averages, so the total
    injected charge matches the profile's analytic release to round-off.
    The filter state starts settled on the baseline; noise is i.i.d.
    Gaussian per output sample, seeded and reproducible.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    dt = chain.dt_s
    n_samples = int(round(duration_s / dt)) + 1
    edges = dt * np.arange(n_samples)
    held = np.full(n_samples - 1, baseline_a)
    if profile is not None:
        held = held + q_eff * ELEMENTARY_CHARGE_C * profile.interval_averages(edges)
    y = lowpass_first_order(held, dt, chain.cutoff_hz, y0=baseline_a)
    rng = np.random.default_rng(seed)
    noisy = y + rng.normal(0.0, chain.noise_rms_a, size=n_samples)
    meta = dict(metadata or {})
    meta.setdefault("seed", seed)
    meta.setdefault("noise_rms_a", chain.noise_rms_a)
    meta.setdefault("cutoff_hz", chain.cutoff_hz)
    meta.setdefault("sensitivity_a_per_v", chain.sensitivity_a_per_v)
    if duration_s < 3.0 * chain.filter_tau_s:
        meta["short_trace_warning"] = True
    return CurrentTrace(0.0, dt, noisy, meta)


def _tail_slice(n: int, tail_fraction: float) -> slice:
    n_tail = max(2, int(math.ceil(n * tail_fraction)))
    return slice(n - n_tail, n)


def _linear_slope(t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope and its standard error from the fit residuals."""
    t = t - t.mean()
    denom = float(np.dot(t, t))
    slope = float(np.dot(t, y - y.mean())) / denom
    resid = y - y.mean() - slope * t
    dof = max(1, y.size - 2)
    sigma = math.sqrt(float(np.dot(resid, resid)) / dof / denom)
    return slope, sigma


@dataclass(frozen=True)
class ChargeResult:
    """Integrated excess charge with its noise-propagated uncertainty."""

    q_c: float
    sigma_c: float
    baseline_a: float
    settled: bool
    noise_gain: float  # sigma_c / per-sample noise RMS


def integration_weights(n: int, dt_s: float, tail_fraction: float = 0.2) -> np.ndarray:
    """Linear weights w such that Q = w . samples for the default estimator.

    Trapezoid coefficients minus the tail-mean baseline propagated over the
    integration span; ||w|| converts per-sample noise into charge noise.
    """
    w = np.full(n, dt_s)
    w[0] = w[-1] = dt_s / 2.0
    span = dt_s * (n - 1)
    tail = _tail_slice(n, tail_fraction)
    n_tail = tail.stop - tail.start
    w[tail] -= span / n_tail
    return w


def integrate_excess_charge(
    trace: CurrentTrace,
    tail_fraction: float = 0.2,
    baseline_method: str = "tail_mean",
    require_settled: bool = True,
    noise_rms_a: float | None = None,
) -> ChargeResult:
    """Excess charge above baseline, Q = trapz(I - I_baseline).

    The baseline is the mean of the final ``tail_fraction`` of samples (or
    the offset of a double-exponential fit when so configured).  A slope
    test on the tail guards against unsettled transients; failing it raises
    ``TransientNotSettledError`` naming the extra duration needed, unless
    ``require_settled`` is False in which case the flag is carried in the
    result.
    """
    y = trace.samples
    t = trace.times
    tail = _tail_slice(y.size, tail_fraction)
    yt, tt = y[tail], t[tail]

    slope, slope_sigma = _linear_slope(tt, yt)
    tail_span = tt[-1] - tt[0]
    drift = abs(slope) * tail_span
    peak_excess = float(np.max(y) - np.mean(yt))
    settled = drift <= max(4.0 * slope_sigma * tail_span, 0.02 * peak_excess, 1e-30)
    if not settled and require_settled:
        half = yt.size // 2
        s1, _ = _linear_slope(tt[:half], yt[:half])
        s2, _ = _linear_slope(tt[half:], yt[half:])
        if s1 != 0 and 0 < s2 / s1 < 1:
            tau_est = -(tail_span / 2.0) / math.log(s2 / s1)
            extra = 5.0 * tau_est
        else:
            extra = 2.0 * trace.duration_s
        raise TransientNotSettledError(
            f"transient not settled in the final {tail_fraction:.0%} of the trace; "
            f"extend the readout by about {extra:.2f} s",
            extra_duration_s=extra,
        )

    if baseline_method == "tail_mean":
        baseline = float(np.mean(yt))
    elif baseline_method == "double_exp":
        from .fitting import fit_double_exponential

        result = fit_double_exponential(t, y - y[-1])
        baseline = float(result.params["offset"]) + y[-1]
    else:
        raise ValueError(f"unknown baseline method {baseline_method!r}")

    q = float(np.trapezoid(y - baseline, dx=trace.dt_s))
    w = integration_weights(y.size, trace.dt_s, tail_fraction)
    gain = float(np.linalg.norm(w))
    noise = trace.metadata.get("noise_rms_a", 0.0) if noise_rms_a is None else noise_rms_a
    return ChargeResult(q, noise * gain, baseline, settled, gain)


def write_trace_csv(trace: CurrentTrace, path) -> None:
    """Trace CSV: '# key=value' metadata rows, then t_s,current_A rows."""
    lines = []
    for key in sorted(trace.metadata):
        lines.append(f"# {key}={trace.metadata[key]!r}")
    lines.append("t_s,current_A")
    for t, value in zip(trace.times, trace.samples):
        lines.append(f"{t!r},{value!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace_csv(path) -> CurrentTrace:
    metadata = {}
    times = []
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, raw = line[1:].strip().partition("=")
                try:
                    import ast

                    metadata[key.strip()] = ast.literal_eval(raw)
                except (ValueError, SyntaxError):
                    metadata[key.strip()] = raw
                continue
            if line.startswith("t_s"):
                continue
            t_str, v_str = line.split(",")
            times.append(float(t_str))
            values.append(float(v_str))
    times = np.asarray(times)
    if times.size < 2:
        raise ValueError(f"trace file {path} holds fewer than two samples")
    return CurrentTrace(float(times[0]), float(times[1] - times[0]), np.array(values), metadata)
