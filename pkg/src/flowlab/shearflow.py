"""Pseudo-spectral solver for 2D periodic incompressible shear flow, plus
windowed dataset generation.

Domain [0,1]^2, array layout values[row, col] with y along rows and x along
columns. Velocity state lives in spectral space (Hermitian-symmetric FFT
coefficients of u_x and u_y). Pressure is eliminated by spectral Leray
projection; the quadratic term is evaluated pseudo-spectrally with 2/3-rule
dealiasing; viscosity integrates exactly through the factor exp(-nu k^2 dt);
advection + the stationary forcing f = (alpha sin(2 pi y), 0) step with RK2
(midpoint). The CFL estimate dt * max|u| / dx must stay below 1.

Datasets: trajectories are sliced into overlapping 8-frame windows (4 context
+ 4 target) over the saved frames and split train/val/test by trajectory; the
held-out test trajectories are also written as full frame sequences so that
rollout evaluation has enough ground truth.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .fields import FieldSeries, fieldpack_write

TWO_PI = 2.0 * np.pi


class CflError(RuntimeError):
    """Time step too large for the current velocity field."""


@dataclass(frozen=True)
class SolverConfig:
    grid: int = 64
    nu: float = 1e-3
    forcing_amp: float = 0.5
    dt: float = 1e-3
    n_steps: int = 600
    save_stride: int = 50
    init: str = "random"      # "shear" | "random"
    seed: int = 0
    perturb_amp: float = 0.05  # divergence-free noise on the shear profile
    init_band: int = 6         # highest excited wavenumber of the random init

    def __post_init__(self):
        if self.nu <= 0 or self.dt <= 0:
            raise ValueError("need nu > 0 and dt > 0")
        if self.grid < 4 or self.grid % 2:
            raise ValueError("grid must be an even number >= 4")
        if self.init not in ("shear", "random"):
            raise ValueError(f"unknown init kind {self.init!r}")


@dataclass
class FlowState:
    """Spectral velocity coefficients (2, N, N) and the current time."""

    uhat: np.ndarray
    time: float = 0.0


class _Operators:
    """Precomputed spectral grids for one resolution."""

    def __init__(self, n: int):
        m = (np.fft.fftfreq(n) * n).astype(np.float64)
        self.kx = TWO_PI * m[None, :]  # x along columns
        self.ky = TWO_PI * m[:, None]  # y along rows
        self.ksq = self.kx**2 + self.ky**2
        self.inv_ksq = np.where(self.ksq > 0, 1.0 / np.where(self.ksq > 0, self.ksq, 1.0), 0.0)
        keep = n / 3.0
        self.dealias = (np.abs(m)[None, :] < keep) & (np.abs(m)[:, None] < keep)


_OPS: dict[int, _Operators] = {}


def _ops(n: int) -> _Operators:
    if n not in _OPS:
        _OPS[n] = _Operators(n)
    return _OPS[n]


def leray_project(uhat: np.ndarray) -> np.ndarray:
    """Remove the irrotational component: uhat <- (I - k k^T/|k|^2) uhat.

    The k = 0 mode is untouched; the projector is idempotent.
    """
    n = uhat.shape[-1]
    ops = _ops(n)
    div = ops.kx * uhat[0] + ops.ky * uhat[1]
    out = np.empty_like(uhat)
    out[0] = uhat[0] - ops.kx * div * ops.inv_ksq
    out[1] = uhat[1] - ops.ky * div * ops.inv_ksq
    return out


def spectral_divergence(uhat: np.ndarray) -> float:
    """Max |k . uhat| normalized by the field scale (0 for divergence-free)."""
    n = uhat.shape[-1]
    ops = _ops(n)
    div = np.abs(ops.kx * uhat[0] + ops.ky * uhat[1])
    scale = max(np.sqrt(ops.ksq.max()) * np.abs(uhat).max(), 1e-300)
    return float(div.max() / scale)


def velocity_physical(uhat: np.ndarray) -> np.ndarray:
    return np.real(np.fft.ifft2(uhat, axes=(-2, -1)))


def kinetic_energy(uhat: np.ndarray) -> float:
    u = velocity_physical(uhat)
    return float(0.5 * np.mean(u[0] ** 2 + u[1] ** 2))


def _forcing_hat(config: SolverConfig) -> np.ndarray:
    n = config.grid
    y = np.arange(n)[:, None] / n
    fx = config.forcing_amp * np.sin(TWO_PI * y) * np.ones((n, n))
    out = np.zeros((2, n, n), dtype=np.complex128)
    out[0] = np.fft.fft2(fx)
    return out


def _nonlinear_hat(uhat: np.ndarray, config: SolverConfig, forcing_hat: np.ndarray) -> np.ndarray:
    """Dealiased, Leray-projected -(u . grad)u + f in spectral space."""
    n = config.grid
    ops = _ops(n)
    u = velocity_physical(uhat)
    dux_dx = np.real(np.fft.ifft2(1j * ops.kx * uhat[0]))
    dux_dy = np.real(np.fft.ifft2(1j * ops.ky * uhat[0]))
    duy_dx = np.real(np.fft.ifft2(1j * ops.kx * uhat[1]))
    duy_dy = np.real(np.fft.ifft2(1j * ops.ky * uhat[1]))
    adv = np.stack([u[0] * dux_dx + u[1] * dux_dy,
                    u[0] * duy_dx + u[1] * duy_dy])
    rhs = -np.fft.fft2(adv, axes=(-2, -1)) * ops.dealias + forcing_hat
    return leray_project(rhs)


def step(state: FlowState, config: SolverConfig, forcing_hat: np.ndarray | None = None) -> FlowState:
    """Advance one dt with the integrating-factor RK2 (midpoint) scheme."""
    n = config.grid
    ops = _ops(n)
    if forcing_hat is None:
        forcing_hat = _forcing_hat(config)
    u = velocity_physical(state.uhat)
    cfl = config.dt * np.max(np.abs(u)) * n
    if cfl >= 1.0:
        raise CflError(
            f"CFL estimate {cfl:.3f} >= 1 at t={state.time:.6g} "
            f"(dt={config.dt}, max|u|={np.max(np.abs(u)):.3g}, dx={1.0 / n:.3g})")
    e_half = np.exp(-config.nu * ops.ksq * config.dt / 2.0)
    n1 = _nonlinear_hat(state.uhat, config, forcing_hat)
    u_mid = e_half * (state.uhat + 0.5 * config.dt * n1)
    n2 = _nonlinear_hat(u_mid, config, forcing_hat)
    u_new = e_half * e_half * state.uhat + config.dt * e_half * n2
    return FlowState(u_new, state.time + config.dt)


def _random_divfree_hat(n: int, band: int, rng: np.random.Generator) -> np.ndarray:
    """Band-limited divergence-free random field (spectral), unit RMS velocity."""
    ops = _ops(n)
    noise = rng.standard_normal((2, n, n))
    uhat = np.fft.fft2(noise, axes=(-2, -1))
    m = np.fft.fftfreq(n) * n
    radius = np.hypot(m[:, None], m[None, :])
    mask = (radius > 0) & (radius <= band)
    uhat *= mask
    uhat = leray_project(uhat)
    u = velocity_physical(uhat)
    rms = np.sqrt(np.mean(u[0] ** 2 + u[1] ** 2))
    return uhat / rms


def init_field(config: SolverConfig) -> FlowState:
    """Shear profile u = (sin(2 pi y), 0) plus seeded divergence-free noise,
    or a band-limited random divergence-free field at unit RMS velocity."""
    n = config.grid
    rng = np.random.default_rng(config.seed)
    if config.init == "shear":
        y = np.arange(n)[:, None] / n
        ux = np.sin(TWO_PI * y) * np.ones((n, n))
        uhat = np.zeros((2, n, n), dtype=np.complex128)
        uhat[0] = np.fft.fft2(ux)
        if config.perturb_amp > 0:
            uhat = uhat + config.perturb_amp * _random_divfree_hat(n, config.init_band, rng)
        return FlowState(uhat)
    return FlowState(_random_divfree_hat(n, config.init_band, rng))


def run_trajectory(config: SolverConfig) -> np.ndarray:
    """Physical-space snapshots (n_frames, N, N, 2) with channels (u_x, u_y).

    Frame 0 is the initial state; one frame is stored every save_stride steps.
    """
    state = init_field(config)
    fhat = _forcing_hat(config)
    frames = [np.moveaxis(velocity_physical(state.uhat), 0, -1)]
    for i in range(config.n_steps):
        state = step(state, config, fhat)
        if (i + 1) % config.save_stride == 0:
            frames.append(np.moveaxis(velocity_physical(state.uhat), 0, -1))
    return np.stack(frames)


def slice_windows(frames: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    """Overlapping (n_windows, window, N, N, 2) views over the saved frames."""
    n = frames.shape[0]
    if n < window:
        raise ValueError(f"{n} frames cannot hold a window of {window}")
    starts = range(0, n - window + 1, stride)
    return np.stack([frames[s : s + window] for s in starts])


def split_by_trajectory(n_traj: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, list[int]]:
    """Deterministic train/val/test partition over trajectory indices."""
    n_train = max(int(round(fractions[0] * n_traj)), 1)
    n_val = max(int(round(fractions[1] * n_traj)), 1) if n_traj >= 3 else 0
    n_train = min(n_train, n_traj - min(2, n_traj - 1))
    ids = list(range(n_traj))
    return {"train": ids[:n_train],
            "val": ids[n_train : n_train + n_val],
            "test": ids[n_train + n_val :]}


def generate_dataset(config: SolverConfig, n_traj: int, out_dir, window: int = 8,
                     window_stride: int = 1, fractions=(0.8, 0.1, 0.1)) -> dict:
    """Run n_traj seeded trajectories, window them, and write FieldPacks.

    Emits train/val/test window packs, the test trajectories as full frame
    sequences (test_traj), and a JSON manifest. Windows from one trajectory
    never straddle a split.
    """
    n_frames = config.n_steps // config.save_stride + 1
    if n_frames < window:
        raise ValueError(
            f"n_steps//save_stride + 1 = {n_frames} frames < window {window}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trajectories = []
    for i in range(n_traj):
        traj_cfg = SolverConfig(**{**asdict(config), "seed": int(np.random.default_rng(
            [config.seed, i]).integers(2**31))})
        trajectories.append(run_trajectory(traj_cfg).astype(np.float32))
    splits = split_by_trajectory(n_traj, fractions)
    dt_frame = config.dt * config.save_stride
    dx = 1.0 / config.grid
    manifest = {"n_traj": n_traj, "frames_per_traj": n_frames, "window": window,
                "window_stride": window_stride, "splits": splits,
                "solver_config": asdict(config), "seed": config.seed,
                "files": {}}
    for name, ids in splits.items():
        if not ids:
            continue
        windows = np.concatenate([slice_windows(trajectories[i], window, window_stride)
                                  for i in ids])
        series = FieldSeries(windows, dx=dx, dy=dx, dt=dt_frame, channels=("u_x", "u_y"))
        path = out_dir / f"{name}.fieldpack"
        fieldpack_write(series, path, seed=config.seed)
        manifest["files"][name] = path.name
    if splits["test"]:
        full = np.stack([trajectories[i] for i in splits["test"]])
        series = FieldSeries(full, dx=dx, dy=dx, dt=dt_frame, channels=("u_x", "u_y"))
        path = out_dir / "test_traj.fieldpack"
        fieldpack_write(series, path, seed=config.seed)
        manifest["files"]["test_traj"] = path.name
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest
