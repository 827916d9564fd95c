"""Frequency-guided Fourier token mixing.

Spatial features are FFT'd, truncated to the lowest |f| < mode_cap integer
frequencies per axis, mixed per retained mode by a shared block-diagonal
complex filter scaled with the frequency weight (beta + alpha * ||xi||^eta),
then zero-padded back and inverse-transformed. Realness of the output is
enforced by taking the real part of the inverse FFT (equivalent to
Hermitian-symmetrizing the filtered spectrum). The AFNO-style block adds a
shared per-mode perceptron, componentwise soft-thresholding, and a residual
connection behind a layer norm.

Conventions: unnormalized forward FFT, 1/(HW) inverse; mode_cap = 1 keeps
only the DC mode; mode_cap = n//2 + 1 keeps everything on an n-point axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tape
from .tape import Tensor


@dataclass
class SpectralWeights:
    """Learnable spectral filter: shared complex blocks + frequency weighting.

    w_re/w_im: (n_blocks, d/n_blocks, d/n_blocks) real tensors forming the
    complex mixing blocks; alpha/beta: scaling and shift of the frequency
    weight; eta: frequency exponent (initialized to 1, clamped to [0, 4]
    during optimization); lambda_shrink: soft-threshold level (>= 0, fixed);
    mode_cap: retained lowest-|f| modes per axis.
    """

    w_re: Tensor
    w_im: Tensor
    alpha: Tensor | float
    beta: Tensor | float
    eta: Tensor | float
    lambda_shrink: float = 0.0
    mode_cap: int = 1

    def __post_init__(self):
        if self.w_re.shape != self.w_im.shape or len(self.w_re.shape) != 3:
            raise ValueError("mixing blocks must be (n_blocks, bs, bs) pairs")
        if self.w_re.shape[1] != self.w_re.shape[2]:
            raise ValueError("mixing blocks must be square")
        if self.lambda_shrink < 0:
            raise ValueError("lambda_shrink must be >= 0")
        if self.mode_cap < 1:
            raise ValueError("mode_cap must be >= 1")

    @property
    def n_blocks(self) -> int:
        return self.w_re.shape[0]

    @property
    def block_size(self) -> int:
        return self.w_re.shape[1]

    @property
    def d(self) -> int:
        return self.n_blocks * self.block_size

    def w_complex(self) -> Tensor:
        return tape.to_complex(self.w_re, self.w_im)


def init_spectral_weights(d: int, n_blocks: int, mode_cap: int, rng: np.random.Generator,
                          lambda_shrink: float = 0.0, dtype=np.float64,
                          identity: bool = False) -> SpectralWeights:
    if d % n_blocks:
        raise ValueError(f"d={d} not divisible by n_blocks={n_blocks}")
    bs = d // n_blocks
    if identity:
        w_re = np.tile(np.eye(bs, dtype=dtype), (n_blocks, 1, 1))
        w_im = np.zeros((n_blocks, bs, bs), dtype=dtype)
    else:
        scale = 1.0 / np.sqrt(bs)
        w_re = (rng.standard_normal((n_blocks, bs, bs)) * scale).astype(dtype)
        w_im = (rng.standard_normal((n_blocks, bs, bs)) * scale).astype(dtype)
    return SpectralWeights(
        w_re=tape.param(w_re), w_im=tape.param(w_im),
        alpha=tape.param(np.asarray(0.1, dtype=dtype)),
        beta=tape.param(np.asarray(1.0, dtype=dtype)),
        eta=tape.param(np.asarray(1.0, dtype=dtype)),
        lambda_shrink=lambda_shrink, mode_cap=mode_cap)


def retained_axis_indices(n: int, mode_cap: int) -> np.ndarray:
    """Unshifted FFT indices whose integer frequency satisfies |f| < mode_cap."""
    if mode_cap > n // 2 + 1:
        raise ValueError(f"mode_cap={mode_cap} exceeds the Nyquist count {n // 2 + 1}")
    f = (np.fft.fftfreq(n) * n).astype(int)
    return np.where(np.abs(f) < mode_cap)[0]


def _freq_multiplier(radius: np.ndarray, weights: SpectralWeights) -> Tensor:
    """(beta + alpha * r^eta) with the r = 0 cell contributing beta exactly."""
    dt = weights.w_re.data.dtype
    mask = (radius > 0).astype(dt)
    logr = np.log(np.where(radius > 0, radius, 1.0)).astype(dt)
    term = tape.mul(tape.exp(tape.mul(weights.eta, logr)), mask)
    return tape.add(weights.beta, tape.mul(weights.alpha, term))


def frequency_weight(xi, weights: SpectralWeights) -> Tensor:
    """Complex filter block for one integer frequency vector xi."""
    r = np.hypot(float(xi[0]), float(xi[1]))
    m = _freq_multiplier(np.asarray(r), weights)
    return tape.mul(weights.w_complex(), m)


def _block_mix(z: Tensor, weights: SpectralWeights) -> Tensor:
    """Apply the block-diagonal filter as W @ z on each (..., d) mode vector.

    Grouped as one gemm per block: (W z)_i = sum_j W_ij z_j = (Z W^T)_i over
    all modes at once, rather than a tiny matvec per mode.
    """
    lead = z.shape[:-1]
    nb, bs = weights.n_blocks, weights.block_size
    m = int(np.prod(lead)) if lead else 1
    zb = tape.reshape(z, (m, nb, bs))
    zb = tape.transpose(zb, (1, 0, 2))  # (nb, modes, bs)
    mixed = tape.matmul(zb, tape.swap_last(weights.w_complex()))
    mixed = tape.transpose(mixed, (1, 0, 2))
    return tape.reshape(mixed, lead + (nb * bs,))


def _to_modes(u: Tensor, weights: SpectralWeights):
    """FFT + truncation; returns (cropped spectrum, radius grid, pad closure)."""
    h, w = u.shape[-3], u.shape[-2]
    rows = retained_axis_indices(h, weights.mode_cap)
    cols = retained_axis_indices(w, weights.mode_cap)
    fr = (np.fft.fftfreq(h) * h).astype(int)[rows]
    fc = (np.fft.fftfreq(w) * w).astype(int)[cols]
    radius = np.hypot(fr[:, None], fc[None, :])[..., None]  # (Rh, Rw, 1)
    z = tape.gather_modes(tape.fft2(tape.to_complex(u)), rows, cols)

    def from_modes(zm: Tensor) -> Tensor:
        padded = tape.scatter_modes(zm, rows, cols, h, w)
        return tape.creal(tape.ifft2(padded))

    return z, radius, from_modes


def spectral_mix(u, weights: SpectralWeights) -> Tensor:
    """FFT -> truncate -> frequency-weighted block mixing -> zero-pad -> IFFT.

    Linear in its input; output is real (Hermitian enforcement via the real
    part of the inverse transform).
    """
    u = tape.astensor(u)
    if not np.isfinite(u.data).all():
        raise ValueError("spectral_mix: non-finite input")
    z, radius, from_modes = _to_modes(u, weights)
    z = tape.mul(_block_mix(z, weights), _freq_multiplier(radius, weights))
    return from_modes(z)


def soft_threshold(z, lambda_shrink: float) -> Tensor:
    """S_lam(x) = sign(x) max(|x| - lam, 0), on real/imag parts independently."""
    if lambda_shrink < 0:
        raise ValueError("lambda_shrink must be >= 0")
    z = tape.astensor(z)

    def shrink(x):
        return tape.sub(tape.relu(tape.sub(x, lambda_shrink)),
                        tape.relu(tape.sub(tape.mul(x, -1.0), lambda_shrink)))

    if np.iscomplexobj(z.data):
        return tape.to_complex(shrink(tape.creal(z)), shrink(tape.cimag(z)))
    return shrink(z)


@dataclass
class AfnoMlpParams:
    """Shared per-mode perceptron MLP(z) = W2 relu(W1 z) + b, applied to the
    real and imaginary parts independently, plus the pre-block layer norm."""

    w1: Tensor
    w2: Tensor
    b: Tensor
    ln_gamma: Tensor | None = None
    ln_beta: Tensor | None = None


def init_afno_mlp(d: int, hidden: int, rng: np.random.Generator, dtype=np.float64) -> AfnoMlpParams:
    return AfnoMlpParams(
        w1=tape.param((rng.standard_normal((d, hidden)) / np.sqrt(d)).astype(dtype)),
        w2=tape.param((rng.standard_normal((hidden, d)) / np.sqrt(hidden)).astype(dtype)),
        b=tape.param(np.zeros(d, dtype=dtype)),
        ln_gamma=tape.param(np.ones(d, dtype=dtype)),
        ln_beta=tape.param(np.zeros(d, dtype=dtype)))


def _mode_mlp(z: Tensor, mlp: AfnoMlpParams) -> Tensor:
    def run(x):
        return tape.add(tape.matmul(tape.relu(tape.matmul(x, mlp.w1)), mlp.w2), mlp.b)

    return tape.to_complex(run(tape.creal(z)), run(tape.cimag(z)))


def fm_branch(h: Tensor, weights: SpectralWeights, mlp: AfnoMlpParams) -> Tensor:
    """Frequency-domain pipeline without the outer residual: mixing,
    frequency weighting, per-mode perceptron, soft-threshold, inverse FFT."""
    z, radius, from_modes = _to_modes(h, weights)
    z = tape.mul(_block_mix(z, weights), _freq_multiplier(radius, weights))
    z = _mode_mlp(z, mlp)
    z = soft_threshold(z, weights.lambda_shrink)
    return from_modes(z)


def afno_block(u, weights: SpectralWeights, mlp: AfnoMlpParams) -> Tensor:
    """Layer-normed frequency mixing with a residual connection around it."""
    u = tape.astensor(u)
    h = tape.layer_norm(u)
    if mlp.ln_gamma is not None:
        h = tape.add(tape.mul(h, mlp.ln_gamma), mlp.ln_beta)
    return tape.add(u, fm_branch(h, weights, mlp))
