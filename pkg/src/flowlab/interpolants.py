"""Stochastic-interpolant schedules, training objectives, and samplers.

Connects data (t = 0) to white noise (t = 1) along x_t = a_t x0 + s_t eps
with a_0 = s_1 = 1, a_1 = s_0 = 0. The default training objective regresses
a velocity network onto v* = a'_t x0 + s'_t eps; DDPM noise prediction and
score matching are provided as opt-in baselines. Sampling integrates the
probability-flow ODE (Heun, second order) or the reverse SDE (Euler-Maruyama)
from t = 1 down to t = 0.

Score and velocity are interchangeable through
    s(x, t) = (a_t v - a'_t x) / (s_t (a'_t s_t - a_t s'_t)),
which reduces to s = -eps/s_t on exact interpolant pairs. Training times are
drawn from Uniform(T_EPS, 1 - T_EPS) per sample to stay clear of the
endpoint singularities of that conversion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor

T_EPS = 1e-3  # endpoint guard for sampled training times

_HALF_PI = 0.5 * np.pi


class InterpolantSchedule:
    """Closed-form (a_t, s_t) pair with derivatives on t in [0, 1].

    kinds: "linear" (a = 1 - t, s = t) and "vp" (a = cos(pi t / 2),
    s = sin(pi t / 2)).
    """

    def __init__(self, kind: str):
        if kind not in ("linear", "vp"):
            raise ValueError(f"unknown schedule kind {kind!r}")
        self.kind = kind

    def eval(self, t):
        """Return (a, s, da, ds) at t; accepts scalars or arrays in [0, 1]."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0.0) or np.any(t > 1.0):
            raise ValueError("schedule time must lie in [0, 1]")
        if self.kind == "linear":
            one = np.ones_like(t)
            return 1.0 - t, t + 0.0, -one, one
        a = np.cos(_HALF_PI * t)
        s = np.sin(_HALF_PI * t)
        return a, s, -_HALF_PI * s, _HALF_PI * a

    def alpha(self, t):
        return self.eval(t)[0]

    def sigma(self, t):
        return self.eval(t)[1]


def schedule_eval(schedule: InterpolantSchedule, t):
    return schedule.eval(t)


@dataclass(frozen=True)
class PathSample:
    """One point on the noising path plus its regression target."""

    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    xt: np.ndarray
    v_star: np.ndarray


def _per_sample(coef, ndim):
    """Broadcast per-sample scalars over trailing field axes."""
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    return coef.reshape(coef.shape + (1,) * (ndim - 1))


def sample_path(x0: np.ndarray, eps: np.ndarray, t, schedule: InterpolantSchedule) -> PathSample:
    """xt = a_t x0 + s_t eps and v* = a'_t x0 + s'_t eps, exactly."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    a, s, da, ds = schedule.eval(t)
    a, s, da, ds = (_per_sample(c, x0.ndim) for c in (a, s, da, ds))
    xt = a * x0 + s * eps
    v_star = da * x0 + ds * eps
    return PathSample(x0, eps, np.asarray(t, dtype=np.float64), xt, v_star)


@dataclass(frozen=True)
class BetaSchedule:
    """Discrete DDPM variance schedule: per-step alpha_k and cumulative prod."""

    alphas: np.ndarray

    def __post_init__(self):
        a = self.alphas
        if a.ndim != 1 or a.size < 1:
            raise ValueError("alphas must be a non-empty 1D array")
        if np.any(a <= 0.0) or np.any(a >= 1.0):
            raise ValueError("need 0 < alpha_k < 1")

    @classmethod
    def linear_beta(cls, steps: int, beta_min=1e-4, beta_max=2e-2):
        if steps < 1:
            raise ValueError("need at least one step")
        betas = np.linspace(beta_min, beta_max, steps)
        return cls(1.0 - betas)

    @property
    def steps(self) -> int:
        return self.alphas.size

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)


# ---------------------------------------------------------------------------
# training objectives (return tape scalars; call .backward() for gradients)
# ---------------------------------------------------------------------------


def draw_times(batch: int, rng: np.random.Generator) -> np.ndarray:
    """Per-sample t ~ Uniform(T_EPS, 1 - T_EPS)."""
    return rng.uniform(T_EPS, 1.0 - T_EPS, size=batch)


def cfm_loss(model, x0: np.ndarray, cond, schedule: InterpolantSchedule,
             rng: np.random.Generator) -> tuple[Tensor, PathSample]:
    """Conditional flow matching: E || v_model(xt, t, cond) - v* ||^2.

    `model` maps (xt, t, cond) with xt of shape (B, ...) to a velocity Tensor
    of the same shape. The mean runs over every tensor entry and the batch.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    t = draw_times(x0.shape[0], rng)
    eps = rng.standard_normal(x0.shape)
    path = sample_path(x0, eps, t, schedule)
    v_hat = model(path.xt, t, cond)
    loss = tape.mse(v_hat, Tensor(path.v_star))
    return loss, path


def ddpm_loss(model, x0: np.ndarray, cond, beta_schedule: BetaSchedule,
              rng: np.random.Generator) -> Tensor:
    """Simplified DDPM objective E || eps - eps_model(xk, k, cond) ||^2."""
    if beta_schedule.steps < 1:
        raise ValueError("beta schedule needs K >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    k = rng.integers(1, beta_schedule.steps + 1, size=x0.shape[0])
    abar = beta_schedule.alpha_bar[k - 1]
    eps = rng.standard_normal(x0.shape)
    a = _per_sample(np.sqrt(abar), x0.ndim)
    s = _per_sample(np.sqrt(1.0 - abar), x0.ndim)
    xk = a * x0 + s * eps
    eps_hat = model(xk, k, cond)
    return tape.mse(eps_hat, Tensor(eps))


def score_loss(model, x0: np.ndarray, cond, schedule: InterpolantSchedule,
               rng: np.random.Generator) -> Tensor:
    """Denoising score matching: E || s_t * s_model(xt, t, cond) + eps ||^2."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = draw_times(x0.shape[0], rng)
    eps = rng.standard_normal(x0.shape)
    path = sample_path(x0, eps, t, schedule)
    s_hat = model(path.xt, t, cond)
    sig = Tensor(_per_sample(schedule.eval(t)[1], x0.ndim))
    resid = tape.add(tape.mul(sig, s_hat), Tensor(path.eps))
    return tape.tmean(tape.mul(resid, resid))


def score_from_velocity(v: np.ndarray, x: np.ndarray, t, schedule: InterpolantSchedule) -> np.ndarray:
    """Convert a velocity field to the marginal score.

    s = (a_t v - a'_t x) / (s_t (a'_t s_t - a_t s'_t)); on exact interpolant
    pairs this equals -eps / s_t. Valid for t in (0, 1) on both schedules
    (the inner factor is -1 for linear, -pi/2 for vp, both t-independent).
    """
    a, s, da, ds = schedule.eval(t)
    denom = s * (da * s - a * ds)
    if np.any(np.abs(denom) < 1e-300):
        raise ZeroDivisionError("degenerate score conversion at the path endpoint")
    ndim = np.asarray(v).ndim
    a, da, denom = (_per_sample(c, ndim) for c in (a, da, denom))
    return (a * v - da * x) / denom


# ---------------------------------------------------------------------------
# samplers (pure numpy, no gradient tracking)
# ---------------------------------------------------------------------------


def _check_finite(x, step):
    if not np.isfinite(x).all():
        raise FloatingPointError(f"non-finite sampler state at step {step}")


def ode_sample(model, noise: np.ndarray, cond, schedule: InterpolantSchedule,
               steps: int, method: str = "heun") -> np.ndarray:
    """Integrate dx/dt = v(x, t, cond) from t = 1 (noise) to t = 0 (data).

    Heun's method on a uniform grid; deterministic given inputs.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if method not in ("heun", "euler"):
        raise ValueError(f"unknown integrator {method!r}")
    x = np.array(noise, dtype=np.float64, copy=True)
    h = 1.0 / steps
    with tape.no_grad():
        for i in range(steps):
            t = 1.0 - i * h
            k1 = np.asarray(model(x, t, cond))
            if method == "euler":
                x = x - h * k1
            else:
                k2 = np.asarray(model(x - h * k1, t - h, cond))
                x = x - 0.5 * h * (k1 + k2)
            _check_finite(x, i)
    return x


@dataclass(frozen=True)
class SdeConfig:
    """Reverse-SDE sampling knobs: diffusion w_t >= 0 chosen post-hoc."""

    steps: int
    w_kind: str = "zero"  # zero | constant | sigma2
    w_scale: float = 0.0

    def w(self, t: float) -> float:
        if self.w_kind == "zero":
            return 0.0
        if self.w_kind == "constant":
            return self.w_scale
        if self.w_kind == "sigma2":
            return self.w_scale * float(np.sin(_HALF_PI * t) ** 2)
        raise ValueError(f"unknown w kind {self.w_kind!r}")


def sde_sample(model, noise: np.ndarray, cond, schedule: InterpolantSchedule,
               config: SdeConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Euler-Maruyama for dx = v dt - 1/2 w_t s dt + sqrt(w_t) dWbar.

    With w_t == 0 this reduces bit-for-bit to the Euler ODE sampler (the
    score is never evaluated and no random numbers are drawn).
    """
    if config.steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(noise, dtype=np.float64, copy=True)
    h = 1.0 / config.steps
    with tape.no_grad():
        for i in range(config.steps):
            t = 1.0 - i * h
            v = np.asarray(model(x, t, cond))
            w = config.w(t)
            if w < 0:
                raise ValueError("sde diffusion w_t must be non-negative")
            if w == 0.0:
                x = x - h * v
            else:
                if rng is None:
                    raise ValueError("stochastic sampling needs an rng")
                s = score_from_velocity(v, x, t, schedule)
                x = x - h * (v - 0.5 * w * s) + np.sqrt(w * h) * rng.standard_normal(x.shape)
            _check_finite(x, i)
    return x
