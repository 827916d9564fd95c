"""Closed-form evaluators and Monte-Carlo experiments for the spectral bias
of forward diffusion.

The forward process is dx_t = g(t) dW_t. Its accumulated noise variance
int_0^t |g|^2 ds is flat across frequency, so a signal whose power spectrum
decays like |w|^-alpha sees its high-|w| modes fall below any SNR threshold
gamma earlier: the threshold time obeys t_gamma(w) ~ |w|^-alpha. This module
verifies that numerically: exact threshold solvers on one side, a synthetic
power-law field + simulated Wiener accumulation experiment on the other.

Radial bands reuse the integer annuli of `flowlab.fields`. Slope fits use the
annulus-MEAN power per bin (band energy / cell count): summed band energy
picks up the ~2*pi*k cell count and would shift the slope by +1. The DC bin
is excluded from every fit (the power law is undefined at w = 0).
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .fields import radial_bin_counts, radial_energy_spectrum

DEFAULT_HORIZON = 1e3  # bisection search horizon, time units


class HorizonExceededError(RuntimeError):
    """Threshold not reachable within the search horizon."""


# ---------------------------------------------------------------------------
# diffusion coefficients g(t)
# ---------------------------------------------------------------------------


class DiffusionCoeff:
    """Time-dependent diffusion coefficient with an accumulated-variance
    evaluator V(t) = int_0^t |g(s)|^2 ds.

    kinds:
      constant   g(s) = g0          V(t) = g0^2 t        (closed form)
      linear     g(s) = a s         V(t) = a^2 t^3 / 3   (closed form)
      tabulated  samples (ts, gs)   composite Simpson on a refined grid
    """

    def __init__(self, kind: str, g0: float = 1.0, slope: float = 1.0,
                 ts: np.ndarray | None = None, gs: np.ndarray | None = None):
        if kind not in ("constant", "linear", "tabulated"):
            raise ValueError(f"unknown coefficient kind {kind!r}")
        self.kind = kind
        self.g0 = float(g0)
        self.slope = float(slope)
        if kind == "tabulated":
            if ts is None or gs is None:
                raise ValueError("tabulated coefficient needs (ts, gs) samples")
            self.ts = np.asarray(ts, dtype=np.float64)
            self.gs = np.asarray(gs, dtype=np.float64)
            if self.ts.ndim != 1 or self.ts.shape != self.gs.shape or self.ts.size < 2:
                raise ValueError("ts and gs must be matching 1D arrays, length >= 2")
            if np.any(np.diff(self.ts) <= 0) or self.ts[0] != 0.0:
                raise ValueError("ts must start at 0 and be strictly increasing")
            # prefix Simpson integrals of the linear interpolant of g, squared;
            # exact for piecewise-quadratic g^2 because the midpoint is interpolated
            g2 = self.gs**2
            gm2 = (0.5 * (self.gs[:-1] + self.gs[1:])) ** 2
            h = np.diff(self.ts)
            panels = h / 6.0 * (g2[:-1] + 4.0 * gm2 + g2[1:])
            self._cum = np.concatenate([[0.0], np.cumsum(panels)])

    @classmethod
    def constant(cls, g0=1.0):
        return cls("constant", g0=g0)

    @classmethod
    def linear(cls, slope=1.0):
        return cls("linear", slope=slope)

    @classmethod
    def tabulated(cls, ts, gs):
        return cls("tabulated", ts=ts, gs=gs)

    def g(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "constant":
            return np.broadcast_to(self.g0, t.shape).copy() if t.ndim else self.g0
        if self.kind == "linear":
            return self.slope * t
        return np.interp(t, self.ts, self.gs)

    def accumulated_variance(self, t: float) -> float:
        if t < 0:
            raise ValueError(f"t must be non-negative, got {t}")
        if self.kind == "constant":
            return self.g0**2 * t
        if self.kind == "linear":
            return self.slope**2 * t**3 / 3.0
        if t > self.ts[-1]:
            raise HorizonExceededError(
                f"tabulated coefficient only covers t <= {self.ts[-1]}, asked for {t}")
        i = int(np.searchsorted(self.ts, t, side="right") - 1)
        i = min(i, self.ts.size - 2)
        acc = self._cum[i]
        lo, hi = self.ts[i], t
        if hi > lo:
            gl = self.g(lo)
            gm = self.g(0.5 * (lo + hi))
            gh = self.g(hi)
            acc += (hi - lo) / 6.0 * (gl**2 + 4.0 * gm**2 + gh**2)
        return float(acc)

    def horizon(self) -> float:
        return float(self.ts[-1]) if self.kind == "tabulated" else DEFAULT_HORIZON


def accumulated_noise_variance(coeff: DiffusionCoeff, t: float) -> float:
    """V(t) = int_0^t |g|^2 ds; flat across frequency (Lemma-1 quantity)."""
    return coeff.accumulated_variance(t)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PowerLawSpectrum:
    """|x0(w)|^2 = amplitude * |w|^-alpha for w != 0; finite dc_power at 0."""

    alpha: float
    amplitude: float = 1.0
    dc_power: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0 or self.amplitude <= 0:
            raise ValueError("need alpha > 0 and amplitude > 0")

    def power(self, omega: float) -> float:
        w = abs(float(omega))
        if w == 0.0:
            return self.dc_power
        return self.amplitude * w**-self.alpha


@dataclass(frozen=True)
class TabulatedSpectrum:
    """Empirical spectrum: power per integer wavenumber bin."""

    powers: np.ndarray

    def power(self, omega: float) -> float:
        k = int(round(float(omega)))
        if k < 0 or k >= self.powers.shape[0]:
            raise ValueError(f"wavenumber {omega} outside tabulated range")
        return float(self.powers[k])


def _power_of(spectrum, omega) -> float:
    if hasattr(spectrum, "power"):
        return spectrum.power(omega)
    return float(spectrum)  # raw |x0(w)|^2 value


def snr_at(spectrum, coeff: DiffusionCoeff, t: float, omega: float) -> float:
    """SNR(w, t) = |x0(w)|^2 / int_0^t |g|^2 ds; +inf at t = 0."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return float("inf")
    return _power_of(spectrum, omega) / coeff.accumulated_variance(t)


def _invert_accumulated_variance(coeff: DiffusionCoeff, target: float,
                                 t_max: float | None = None) -> float:
    """Monotone-bisection solve of V(t) = target to 1e-10 relative."""
    if coeff.kind == "constant":
        return target / coeff.g0**2
    hi = coeff.horizon() if t_max is None else float(t_max)
    if coeff.accumulated_variance(hi) < target:
        raise HorizonExceededError(
            f"accumulated variance at horizon {hi} is below the target {target}")
    lo = 0.0
    while hi - lo > 1e-10 * max(hi, 1e-12):
        mid = 0.5 * (lo + hi)
        if coeff.accumulated_variance(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def threshold_time(spectrum, coeff: DiffusionCoeff, gamma: float, omega: float,
                   t_max: float | None = None) -> float:
    """Solve int_0^t |g|^2 ds = |x0(w)|^2 / gamma for the SNR-crossing time.

    Constant coefficients use the exact closed form |x0|^2/(gamma g0^2);
    otherwise monotone bisection to 1e-10 relative on [0, t_max].
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return _invert_accumulated_variance(coeff, _power_of(spectrum, omega) / gamma, t_max)


# ---------------------------------------------------------------------------
# synthetic power-law fields
# ---------------------------------------------------------------------------


def synth_power_law_field(alpha: float, amplitude: float, h: int, w: int, seed: int,
                          dc_power: float = 0.0) -> np.ndarray:
    """Real 2D field whose DFT magnitudes are exactly sqrt(amplitude)*|w|^-alpha/2.

    Phases are uniform random, Hermitian-symmetrized so that the inverse FFT
    is real; self-conjugate cells get a random sign. Same seed, same bits.
    """
    if h % 2 or w % 2:
        raise ValueError("h and w must be even")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = np.random.default_rng(seed)
    iu, iv = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cu = np.where(iu < h // 2 + h % 2, iu, iu - h)  # integer freq, unshifted layout
    cv = np.where(iv < w // 2 + w % 2, iv, iv - w)
    r = np.hypot(cu, cv)
    with np.errstate(divide="ignore"):
        mag = np.sqrt(amplitude) * np.where(r > 0, r, 1.0) ** (-alpha / 2.0)
    mag[0, 0] = np.sqrt(dc_power)

    theta = rng.uniform(0.0, 2.0 * np.pi, size=(h, w))
    signs = rng.choice(np.array([-1.0, 1.0]), size=(h, w))
    pu, pv = (h - iu) % h, (w - iv) % w
    lin = iu * w + iv
    plin = pu * w + pv
    coef = mag * np.exp(1j * theta)
    coef = np.where(lin <= plin, coef, np.conj(coef[pu, pv]))
    selfc = lin == plin
    coef[selfc] = signs[selfc] * mag[selfc]
    return np.fft.ifft2(coef).real


def fit_loglog_slope(k: np.ndarray, y: np.ndarray):
    """Least-squares slope/intercept of log y vs log k, with slope std error."""
    x = np.log(np.asarray(k, dtype=np.float64))
    z = np.log(np.asarray(y, dtype=np.float64))
    n = x.size
    xb, zb = x.mean(), z.mean()
    sxx = np.sum((x - xb) ** 2)
    slope = np.sum((x - xb) * (z - zb)) / sxx
    intercept = zb - slope * xb
    resid = z - (intercept + slope * x)
    dof = max(n - 2, 1)
    stderr = float(np.sqrt(np.sum(resid**2) / dof / sxx))
    return float(slope), float(intercept), stderr


def measured_radial_slope(field: np.ndarray, k_lo: int = 2, k_hi: int | None = None):
    """Fit the annulus-mean log power of one field against log k."""
    prof = radial_energy_spectrum(field)
    counts = radial_bin_counts(*field.shape)
    k_hi = min(field.shape) // 4 if k_hi is None else k_hi
    ks = np.arange(k_lo, k_hi + 1)
    mean_power = prof.energy[ks] / counts[ks]
    return fit_loglog_slope(ks, mean_power)


# ---------------------------------------------------------------------------
# Monte-Carlo bias experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdCurve:
    """(w, t_gamma(w)) pairs plus the fitted log-log line."""

    omegas: np.ndarray
    t_gamma: np.ndarray
    slope: float
    intercept: float
    slope_ci: float  # least-squares standard error of the slope
    n_trials: int
    low_confidence: bool = False
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "omegas": self.omegas.tolist(),
            "t_gamma": self.t_gamma.tolist(),
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_ci": self.slope_ci,
            "n_trials": self.n_trials,
            "low_confidence": self.low_confidence,
            **self.extras,
        }

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("omega,t_gamma\n")
            for w, t in zip(self.omegas, self.t_gamma):
                f.write(f"{w},{t:.17g}\n")


def band_power(field: np.ndarray) -> np.ndarray:
    return radial_energy_spectrum(field).energy


def theoretical_threshold_curve(signal_band_power: np.ndarray, counts: np.ndarray,
                                coeff: DiffusionCoeff, gamma: float,
                                grid_cells: int) -> np.ndarray:
    """Per-band Lemma-3 crossing times for band-summed SNR.

    The expected band noise power of the unnormalized DFT of accumulated white
    noise is counts[k] * grid_cells * V(t), so the band-summed SNR crosses
    gamma when V(t) = S(k) / (gamma * counts[k] * grid_cells).
    """
    out = np.full(signal_band_power.shape, np.nan)
    for k in range(1, signal_band_power.shape[0]):
        target = signal_band_power[k] / (gamma * counts[k] * grid_cells)
        try:
            out[k] = _invert_accumulated_variance(coeff, target)
        except HorizonExceededError:
            out[k] = np.nan
    return out


def empirical_bias_experiment(alpha: float, coeff: DiffusionCoeff, gamma: float,
                              grid: int, n_trials: int, seed: int,
                              amplitude: float = 1.0, n_times: int = 96,
                              k_lo: int = 2, k_hi: int | None = None) -> ThresholdCurve:
    """Monte-Carlo estimate of per-band SNR threshold times and their slope.

    Each trial draws a power-law field (the signal) and one realization of the
    accumulated Wiener noise on a log-spaced time grid (exact increments:
    std = sqrt(V(t_j) - V(t_{j-1}))). The recorded t_gamma is the first time
    the band-summed SNR drops below gamma, log-interpolated between grid
    times. Fitting log median-t_gamma against log w estimates -alpha.
    """
    if n_trials < 1:
        raise ValueError("need at least one trial")
    low_confidence = n_trials < 10
    if low_confidence:
        warnings.warn("fewer than 10 trials: confidence interval widened")
    k_hi = grid // 4 if k_hi is None else k_hi
    ks = np.arange(k_lo, k_hi + 1)
    counts = radial_bin_counts(grid, grid)
    cells = grid * grid

    # calibrate the search window from the closed-form band thresholds
    probe = band_power(synth_power_law_field(alpha, amplitude, grid, grid, seed))
    theory = theoretical_threshold_curve(probe, counts, coeff, gamma, cells)
    t_lo = 0.2 * np.nanmin(theory[ks])
    t_hi = 5.0 * np.nanmax(theory[ks])
    times = np.geomspace(t_lo, t_hi, n_times)

    root = np.random.SeedSequence(seed)
    crossings = np.full((n_trials, ks.size), np.nan)
    for trial, child in enumerate(root.spawn(n_trials)):
        rng = np.random.default_rng(child)
        sig = synth_power_law_field(alpha, amplitude, grid, grid, int(rng.integers(2**31)))
        s_band = band_power(sig)[ks]
        eps = np.zeros((grid, grid))
        prev_v = 0.0
        prev_snr = np.full(ks.size, np.inf)
        prev_t = 0.0
        done = np.zeros(ks.size, dtype=bool)
        for t in times:
            v = coeff.accumulated_variance(t)
            std = np.sqrt(max(v - prev_v, 0.0))
            eps = eps + std * rng.standard_normal((grid, grid))
            prev_v = v
            n_band = band_power(eps)[ks]
            with np.errstate(divide="ignore"):
                snr = s_band / n_band
            hit = (~done) & (snr < gamma)
            if np.any(hit):
                if prev_t == 0.0:
                    crossings[trial, hit] = t
                else:
                    # log-linear interpolation of the SNR crossing in log time
                    f = (np.log(gamma) - np.log(prev_snr[hit])) / (np.log(snr[hit]) - np.log(prev_snr[hit]))
                    crossings[trial, hit] = np.exp(np.log(prev_t) + f * (np.log(t) - np.log(prev_t)))
                done |= hit
            prev_snr = snr
            prev_t = t
            if done.all():
                break

    t_med = np.nanmedian(crossings, axis=0)
    ok = np.isfinite(t_med)
    slope, intercept, stderr = fit_loglog_slope(ks[ok], t_med[ok])
    if low_confidence:
        stderr *= 2.0
    return ThresholdCurve(
        omegas=ks[ok].astype(float),
        t_gamma=t_med[ok],
        slope=slope,
        intercept=intercept,
        slope_ci=stderr,
        n_trials=n_trials,
        low_confidence=low_confidence,
        extras={"theory_t": theory[ks].tolist(), "censored": int(np.isnan(crossings).sum())},
    )


def per_band_noise_power(coeff: DiffusionCoeff, t: float, grid: int, n_trials: int,
                         seed: int) -> np.ndarray:
    """Monte-Carlo per-cell mean noise power per radial band (Lemma-1 check).

    Accumulated noise at time t is Gaussian with variance V(t) per cell, so
    the per-cell spectral power should be flat (= cells * V(t)) in every band.
    """
    counts = radial_bin_counts(grid, grid)
    rng = np.random.default_rng(seed)
    std = np.sqrt(coeff.accumulated_variance(t))
    acc = np.zeros_like(counts, dtype=np.float64)
    for _ in range(n_trials):
        eps = std * rng.standard_normal((grid, grid))
        acc += band_power(eps)
    return acc / (n_trials * counts)
