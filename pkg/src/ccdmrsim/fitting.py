"""Least-squares models for spectra, transients and photon statistics.

All fitters share the same recipe: analytic model Jacobians, damped least
squares with bounded iterations, data-driven initial guesses, and
covariance-based uncertainties scaled by the residual variance.  The
double exponential is ill-conditioned by nature and gets a small
multi-start on top.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.stats import poisson

MAX_ITERATIONS = 200


@dataclass
class FitResult:
    """Parameter estimates with 1-sigma uncertainties and diagnostics."""

    params: dict
    sigmas: dict
    residual_rms: float
    converged: bool
    n_evaluations: int
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if not self.converged and "unreliable" not in self.flags:
            self.flags.append("unreliable")

    def param(self, name: str) -> float:
        return self.params[name]

    def sigma(self, name: str) -> float:
        return self.sigmas[name]


@dataclass
class Spectrum:
    """Swept response data: x values, responses, per-point uncertainty."""

    x: np.ndarray
    y: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not (self.x.size == self.y.size == self.sigma.size):
            raise ValueError("spectrum arrays must share one length")
        if np.any(self.sigma <= 0):
            raise ValueError("per-point sigma must be positive")


def _coerce(data, y=None, sigma=None):
    if isinstance(data, Spectrum):
        return data.x, data.y, data.sigma
    x = np.asarray(data, dtype=float)
    y = np.asarray(y, dtype=float)
    if sigma is None:
        sigma = np.ones_like(y)
    else:
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), y.shape).copy()
    return x, y, sigma


def _run_fit(model, jacobian, x, y, sigma, p0, names, bounds=None) -> FitResult:
    """Weighted least squares with analytic Jacobian and scaled covariance."""

    def residuals(p):
        return (model(x, p) - y) / sigma

    def jac(p):
        return jacobian(x, p) / sigma[:, None]

    kwargs = {"max_nfev": MAX_ITERATIONS, "x_scale": "jac"}
    if bounds is not None:
        kwargs["bounds"] = bounds
    result = least_squares(residuals, p0, jac=jac, **kwargs)
    dof = max(1, y.size - len(p0))
    chi2_red = 2.0 * result.cost / dof
    try:
        cov = np.linalg.inv(result.jac.T @ result.jac) * chi2_red
        sigmas = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        sigmas = np.full(len(p0), np.nan)
    rms = float(np.sqrt(np.mean((model(x, result.x) - y) ** 2)))
    converged = bool(result.success) and result.nfev < MAX_ITERATIONS
    return FitResult(
        params=dict(zip(names, (float(v) for v in result.x))),
        sigmas=dict(zip(names, (float(s) for s in sigmas))),
        residual_rms=rms,
        converged=converged,
        n_evaluations=int(result.nfev),
    )


# ---------------------------------------------------------------- Lorentzian


def _lorentzian_model(x, p):
    baseline = p[0]
    y = np.ones_like(x)
    for i in range((len(p) - 1) // 3):
        contrast, centre, width = p[1 + 3 * i : 4 + 3 * i]
        y = y - contrast * width**2 / ((x - centre) ** 2 + width**2)
    return baseline * y


def _lorentzian_jacobian(x, p):
    n_dips = (len(p) - 1) // 3
    baseline = p[0]
    J = np.zeros((x.size, len(p)))
    shape = np.ones_like(x)
    for i in range(n_dips):
        contrast, centre, width = p[1 + 3 * i : 4 + 3 * i]
        denom = (x - centre) ** 2 + width**2
        lor = width**2 / denom
        shape = shape - contrast * lor
        J[:, 1 + 3 * i] = -baseline * lor
        J[:, 2 + 3 * i] = -baseline * contrast * 2.0 * (x - centre) * width**2 / denom**2
        J[:, 3 + 3 * i] = -baseline * contrast * 2.0 * width * (x - centre) ** 2 / denom**2
    J[:, 0] = shape
    return J


def fit_lorentzian_dips(data, y=None, sigma=None, n_dips: int = 1) -> FitResult:
    """Fit y = B * (1 - sum_i C_i w_i^2/((x-x0_i)^2 + w_i^2)).

    Contrasts are relative to the fitted baseline.  Initial dip centres
    come from the deepest (masked) minima; needs at least 5*(3*n_dips+1)
    points.
    """
    x, y, sigma = _coerce(data, y, sigma)
    if n_dips not in (1, 2):
        raise ValueError("n_dips must be 1 or 2")
    if x.size < 5 * (3 * n_dips + 1):
        raise ValueError(f"need at least {5 * (3 * n_dips + 1)} points for {n_dips} dip(s)")

    baseline0 = float(np.median(np.sort(y)[y.size // 2 :]))
    span = float(x.max() - x.min())
    width0 = max(span / 40.0, float(np.min(np.diff(np.sort(x))))) * 2.0
    depth = y / baseline0 if baseline0 != 0 else y
    centres = []
    masked = depth.copy()
    for _ in range(n_dips):
        i = int(np.argmin(masked))
        centres.append(float(x[i]))
        masked[np.abs(x - x[i]) < 3.0 * width0] = np.inf
    contrast0 = max(1e-4, 1.0 - float(np.min(depth)))

    p0 = [baseline0]
    names = ["baseline"]
    lower = [-np.inf]
    upper = [np.inf]
    for i, c in enumerate(sorted(centres)):
        p0 += [contrast0, c, width0]
        names += [f"contrast_{i}", f"centre_{i}", f"width_{i}"]
        lower += [0.0, x.min() - span, 1e-12]
        upper += [1.0, x.max() + span, np.inf]
    return _run_fit(
        _lorentzian_model,
        _lorentzian_jacobian,
        x,
        y,
        sigma,
        p0,
        names,
        bounds=(lower, upper),
    )


# ---------------------------------------------------------- damped sinusoid


def _sinusoid_model(t, p):
    offset, amplitude, period, phase, tau = p
    return offset + amplitude * np.exp(-t / tau) * np.cos(2.0 * np.pi * t / period + phase)


def _sinusoid_jacobian(t, p):
    offset, amplitude, period, phase, tau = p
    theta = 2.0 * np.pi * t / period + phase
    damp = np.exp(-t / tau)
    J = np.empty((t.size, 5))
    J[:, 0] = 1.0
    J[:, 1] = damp * np.cos(theta)
    J[:, 2] = amplitude * damp * np.sin(theta) * 2.0 * np.pi * t / period**2
    J[:, 3] = -amplitude * damp * np.sin(theta)
    J[:, 4] = amplitude * damp * np.cos(theta) * t / tau**2
    return J


def fit_damped_sinusoid(data, y=None, sigma=None) -> FitResult:
    """Fit y = O + A exp(-t/tau) cos(2 pi t / T + phi).

    The period seed is the dominant peak of the detrended discrete
    spectrum, which needs the data to span at least two periods.  A fit
    whose amplitude is consistent with zero is flagged
    ``period_unidentifiable``.
    """
    t, y, sigma = _coerce(data, y, sigma)
    order = np.argsort(t)
    t, y, sigma = t[order], y[order], sigma[order]

    dt = float(np.median(np.diff(t)))
    detrended = y - y.mean()
    # zero-padded spectrum with parabolic peak refinement seeds the period
    # well inside the convergence basin even for few-cycle records
    padded = np.fft.rfft(detrended, n=16 * t.size)
    freqs = np.fft.rfftfreq(16 * t.size, dt)
    magnitude = np.abs(padded)
    span = t[-1] - t[0]
    if magnitude[1:].max() <= 0:
        period0 = span / 2.0
        phase0 = 0.0
    else:
        k = 1 + int(np.argmax(magnitude[1:]))
        if 1 <= k < magnitude.size - 1:
            a, b, c = magnitude[k - 1 : k + 2]
            denom = a - 2.0 * b + c
            shift = 0.5 * (a - c) / denom if denom != 0 else 0.0
        else:
            shift = 0.0
        f_peak = freqs[k] + shift * (freqs[1] - freqs[0])
        period0 = 1.0 / float(f_peak)
        phase0 = float(np.angle(padded[k])) - 2.0 * np.pi * f_peak * t[0]
        phase0 = math.remainder(phase0, 2.0 * math.pi)
    if span < 1.9 * period0:
        raise ValueError("data must span at least two oscillation periods")
    amplitude0 = float(np.std(detrended) * math.sqrt(2.0))
    names = ["offset", "amplitude", "period", "phase", "decay"]
    bounds = (
        [-np.inf, 0.0, dt, -2.0 * np.pi, dt],
        [np.inf, np.inf, span * 4.0, 2.0 * np.pi, np.inf],
    )
    best = None
    for factor in (1.0, 0.95, 1.05):
        p0 = [float(y.mean()), amplitude0, period0 * factor, phase0, span * 10.0]
        result = _run_fit(
            _sinusoid_model, _sinusoid_jacobian, t, y, sigma, p0, names, bounds=bounds
        )
        if best is None or result.residual_rms < best.residual_rms:
            best = result
    result = best
    amp, amp_sigma = result.params["amplitude"], result.sigmas["amplitude"]
    if amp <= 2.0 * amp_sigma or amp < 1e-12 * max(1.0, abs(result.params["offset"])):
        result.flags.append("period_unidentifiable")
    return result


# --------------------------------------------------------- double exponential


def _double_exp_model(t, p):
    offset, a_fast, tau_fast, a_slow, tau_slow = p
    return offset + a_fast * np.exp(-t / tau_fast) + a_slow * np.exp(-t / tau_slow)


def _double_exp_jacobian(t, p):
    _, a_fast, tau_fast, a_slow, tau_slow = p
    ef = np.exp(-t / tau_fast)
    es = np.exp(-t / tau_slow)
    J = np.empty((t.size, 5))
    J[:, 0] = 1.0
    J[:, 1] = ef
    J[:, 2] = a_fast * t / tau_fast**2 * ef
    J[:, 3] = es
    J[:, 4] = a_slow * t / tau_slow**2 * es
    return J


def _single_exp_model(t, p):
    offset, amplitude, tau = p
    return offset + amplitude * np.exp(-t / tau)


def _single_exp_jacobian(t, p):
    _, amplitude, tau = p
    e = np.exp(-t / tau)
    J = np.empty((t.size, 3))
    J[:, 0] = 1.0
    J[:, 1] = e
    J[:, 2] = amplitude * t / tau**2 * e
    return J


def _log_linear_tau(t, y, lo_frac, hi_frac) -> float | None:
    """Decay constant from a log-linear regression over a data window."""
    i0, i1 = int(t.size * lo_frac), max(int(t.size * hi_frac), int(t.size * lo_frac) + 2)
    tt, yy = t[i0:i1], y[i0:i1]
    good = yy > 0
    if good.sum() < 3:
        return None
    coeffs = np.polyfit(tt[good], np.log(yy[good]), 1)
    return -1.0 / coeffs[0] if coeffs[0] < 0 else None


def fit_double_exponential(
    data, y=None, sigma=None, filter_cutoff_hz: float | None = None
) -> FitResult:
    """Fit r(t) = O + A_f exp(-t/tau_f) + A_s exp(-t/tau_s), tau_f < tau_s.

    Seeds come from log-linear regressions on the tail (slow) and the
    slow-subtracted head (fast); three multi-starts with perturbed time
    constants guard the ill-conditioned valley.  Near-degenerate time
    constants collapse the fit to a single exponential with a flag.  If the
    acquisition chain's filter cutoff is supplied and the fitted fast
    constant sits inside the filter band, the result is flagged
    ``fast_constant_filter_biased``.
    """
    t, y, sigma = _coerce(data, y, sigma)
    order = np.argsort(t)
    t, y, sigma = t[order], y[order], sigma[order]

    offset0 = float(np.mean(y[-max(2, y.size // 10) :]))
    excess = y - offset0
    scale = float(np.max(np.abs(excess))) or 1.0
    tau_slow0 = _log_linear_tau(t, excess, 0.3, 0.9) or (t[-1] - t[0]) / 3.0
    slow_amp0 = float(
        np.median(excess[t > 0.3 * t[-1]] / np.exp(-t[t > 0.3 * t[-1]] / tau_slow0))
        if np.any(t > 0.3 * t[-1])
        else scale / 2.0
    )
    head = excess - slow_amp0 * np.exp(-t / tau_slow0)
    tau_fast0 = _log_linear_tau(t, head, 0.0, 0.2) or tau_slow0 / 20.0
    tau_fast0 = min(tau_fast0, tau_slow0 / 2.0)
    fast_amp0 = float(np.clip(head[0], -scale * 10, scale * 10))

    best = None
    for fast_factor, slow_factor in ((1.0, 1.0), (0.3, 1.0), (1.0, 3.0)):
        p0 = [offset0, fast_amp0, tau_fast0 * fast_factor, slow_amp0, tau_slow0 * slow_factor]
        result = _run_fit(
            _double_exp_model,
            _double_exp_jacobian,
            t,
            y,
            sigma,
            p0,
            ["offset", "amp_fast", "tau_fast", "amp_slow", "tau_slow"],
            bounds=(
                [-np.inf, -np.inf, 1e-12, -np.inf, 1e-12],
                [np.inf, np.inf, np.inf, np.inf, np.inf],
            ),
        )
        if best is None or result.residual_rms < best.residual_rms:
            best = result

    # enforce tau_fast < tau_slow by swapping the component labels
    if best.params["tau_fast"] > best.params["tau_slow"]:
        p, s = best.params, best.sigmas
        p["amp_fast"], p["amp_slow"] = p["amp_slow"], p["amp_fast"]
        p["tau_fast"], p["tau_slow"] = p["tau_slow"], p["tau_fast"]
        s["amp_fast"], s["amp_slow"] = s["amp_slow"], s["amp_fast"]
        s["tau_fast"], s["tau_slow"] = s["tau_slow"], s["tau_fast"]

    if best.params["tau_slow"] < 1.5 * best.params["tau_fast"]:
        single = _run_fit(
            _single_exp_model,
            _single_exp_jacobian,
            t,
            y,
            sigma,
            [offset0, fast_amp0 + slow_amp0, tau_slow0],
            ["offset", "amplitude", "tau"],
        )
        single.flags.append("collapsed_to_single_exponential")
        return single

    if filter_cutoff_hz is not None:
        if best.params["tau_fast"] < 3.0 / (2.0 * math.pi * filter_cutoff_hz):
            best.flags.append("fast_constant_filter_biased")
    return best


def fit_exponential_decay(data, y=None, sigma=None, fit_offset: bool = False) -> FitResult:
    """Fit y = A exp(-r t) (+ optional offset); reports rate and amplitude."""
    t, y, sigma = _coerce(data, y, sigma)
    offset0 = float(np.min(y)) if fit_offset else 0.0
    tau0 = _log_linear_tau(t, y - offset0, 0.0, 0.9) or max((t[-1] - t[0]) / 2.0, 1e-12)
    amp0 = float(np.max(y) - offset0)

    if fit_offset:
        result = _run_fit(
            _single_exp_model,
            _single_exp_jacobian,
            t,
            y,
            sigma,
            [offset0, amp0, tau0],
            ["offset", "amplitude", "tau"],
        )
        tau, tau_sigma = result.params["tau"], result.sigmas["tau"]
    else:

        def model(t, p):
            return p[0] * np.exp(-p[1] * t)

        def jac(t, p):
            e = np.exp(-p[1] * t)
            return np.column_stack([e, -p[0] * t * e])

        result = _run_fit(model, jac, t, y, sigma, [amp0, 1.0 / tau0], ["amplitude", "rate"])
        rate = result.params["rate"]
        result.params["tau"] = 1.0 / rate if rate != 0 else math.inf
        result.sigmas["tau"] = (
            result.sigmas["rate"] / rate**2 if rate != 0 else math.inf
        )
        return result
    result.params["rate"] = 1.0 / tau
    result.sigmas["rate"] = tau_sigma / tau**2 if tau > 0 else math.inf
    return result


# ------------------------------------------------------------------- echoes


def fit_echo(data, y=None, sigma=None, fix_exponent: bool = True) -> FitResult:
    """Fit the normalised echo y = exp(-(2 tau / T2)^n), intercept pinned at 1.

    ``fix_exponent`` holds n = 1; otherwise n floats within [1, 3].
    """
    tau, y, sigma = _coerce(data, y, sigma)
    positive = y > 0.05
    t2_seed = _log_linear_tau(2.0 * tau[positive], y[positive], 0.0, 1.0) if positive.sum() >= 3 else None
    t2_seed = t2_seed or float(2.0 * np.max(tau) / 2.0)

    def model(x, p):
        t2 = p[0]
        n = p[1] if len(p) > 1 else 1.0
        return np.exp(-(((2.0 * x) / t2) ** n))

    def jac(x, p):
        t2 = p[0]
        n = p[1] if len(p) > 1 else 1.0
        u = 2.0 * x / t2
        un = u**n
        value = np.exp(-un)
        J = np.empty((x.size, len(p)))
        J[:, 0] = value * n * un / t2
        if len(p) > 1:
            with np.errstate(divide="ignore", invalid="ignore"):
                logu = np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), 0.0)
            J[:, 1] = -value * un * logu
        return J

    if fix_exponent:
        return _run_fit(model, jac, tau, y, sigma, [t2_seed], ["t2"], bounds=([1e-12], [np.inf]))
    return _run_fit(
        model,
        jac,
        tau,
        y,
        sigma,
        [t2_seed, 1.0],
        ["t2", "exponent"],
        bounds=([1e-12, 1.0], [np.inf, 3.0]),
    )


# -------------------------------------------------- Poisson mixture threshold


@dataclass(frozen=True)
class ThresholdResult:
    """Integer photon-count threshold with its classification fidelity."""

    threshold: int
    fidelity: float
    classify_bright_above: bool
    flags: tuple = ()


def _balanced_accuracy(n: int, mu_bright: float, mu_dark: float) -> float:
    return 0.5 * (poisson.sf(n, mu_bright) + poisson.cdf(n, mu_dark))


def poisson_mixture_threshold(
    mu_bright: float,
    mu_dark: float,
    bright_weight: float = 0.5,
    mode: str = "balanced",
) -> ThresholdResult:
    """Optimal integer threshold between two Poisson count hypotheses.

    balanced mode maximises (P(N_bright > n) + P(N_dark <= n))/2, whose
    optimum sits at the likelihood-ratio crossing n = (mu_b - mu_d) /
    ln(mu_b / mu_d); equal_error mode instead matches the two error rates.
    ``bright_weight`` only enters the reported population-weighted accuracy
    via :func:`weighted_accuracy`, not the threshold choice.
    """
    if mu_bright <= 0 or mu_dark <= 0:
        raise ValueError("both means must be positive")
    if not 0.0 <= bright_weight <= 1.0:
        raise ValueError("bright weight must lie in [0, 1]")
    if mu_bright == mu_dark:
        return ThresholdResult(0, 0.5, True, flags=("degenerate_means",))

    swapped = mu_bright < mu_dark
    hi, lo = (mu_dark, mu_bright) if swapped else (mu_bright, mu_dark)

    if mode == "balanced":
        crossing = (hi - lo) / math.log(hi / lo)
        candidates = {max(0, int(math.floor(crossing)) + k) for k in (-1, 0, 1)}
        n_star = max(candidates, key=lambda n: _balanced_accuracy(n, hi, lo))
        fidelity = _balanced_accuracy(n_star, hi, lo)
    elif mode == "equal_error":
        upper = int(hi + 10.0 * math.sqrt(hi)) + 2
        grid = np.arange(0, upper)
        miss_bright = poisson.cdf(grid, hi)
        miss_dark = poisson.sf(grid, lo)
        n_star = int(grid[np.argmin(np.abs(miss_bright - miss_dark))])
        fidelity = _balanced_accuracy(n_star, hi, lo)
    else:
        raise ValueError(f"unknown threshold mode {mode!r}")
    return ThresholdResult(int(n_star), float(fidelity), not swapped)


def weighted_accuracy(result: ThresholdResult, mu_bright: float, mu_dark: float, bright_weight: float) -> float:
    """Population-weighted classification accuracy at a chosen threshold."""
    n = result.threshold
    if result.classify_bright_above:
        p_b = poisson.sf(n, mu_bright)
        p_d = poisson.cdf(n, mu_dark)
    else:
        p_b = poisson.cdf(n, mu_bright)
        p_d = poisson.sf(n, mu_dark)
    return bright_weight * p_b + (1.0 - bright_weight) * p_d


# --------------------------------------------------------------- small peaks


def fit_gaussian_peak(x, y, sigma=None) -> FitResult:
    """Fit y = O + A exp(-(x-x0)^2 / (2 s^2)); reports FWHM as well."""
    x, y, sigma = _coerce(x, y, sigma)
    offset0 = float(np.min(y))
    i_max = int(np.argmax(y))
    amp0 = float(y[i_max] - offset0)
    x00 = float(x[i_max])
    weights = np.clip(y - offset0, 0.0, None)
    s0 = float(np.sqrt(np.sum(weights * (x - x00) ** 2) / max(np.sum(weights), 1e-30)))
    s0 = max(s0, float(np.min(np.diff(np.sort(x)))) / 2.0)

    def model(x, p):
        o, a, x0, s = p
        return o + a * np.exp(-((x - x0) ** 2) / (2.0 * s * s))

    def jac(x, p):
        o, a, x0, s = p
        g = np.exp(-((x - x0) ** 2) / (2.0 * s * s))
        J = np.empty((x.size, 4))
        J[:, 0] = 1.0
        J[:, 1] = g
        J[:, 2] = a * g * (x - x0) / (s * s)
        J[:, 3] = a * g * (x - x0) ** 2 / s**3
        return J

    result = _run_fit(
        model,
        jac,
        x,
        y,
        sigma,
        [offset0, amp0, x00, s0],
        ["offset", "amplitude", "centre", "width"],
        bounds=([-np.inf, 0.0, -np.inf, 1e-12], [np.inf, np.inf, np.inf, np.inf]),
    )
    result.params["fwhm"] = 2.0 * math.sqrt(2.0 * math.log(2.0)) * result.params["width"]
    result.sigmas["fwhm"] = 2.0 * math.sqrt(2.0 * math.log(2.0)) * result.sigmas["width"]
    return result
