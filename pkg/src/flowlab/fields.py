"""Field containers, radial spectrum diagnostics, error metrics, and the
FieldPack on-disk format.

Everything downstream speaks `FieldSeries`: a real-valued (B, T, H, W, C)
space-time grid with physical spacings. Spectral diagnostics follow the
unnormalized-forward / 1/(HW)-inverse FFT convention (numpy's default), and
radial binning partitions the centered 2D frequency plane into integer
annuli k = floor(sqrt(u^2 + v^2)).

Max_ERR is aggregated over the whole dataset (space, time, channels, batch);
per-trajectory maxima are available through the per_channel breakdown only.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR = 1e-20  # keeps log-energy finite on empty bins


class FieldPackError(ValueError):
    """Base class for FieldPack container problems."""


class MalformedHeaderError(FieldPackError):
    """Header prefix, JSON, or required keys are broken."""


class TruncatedPayloadError(FieldPackError):
    """Payload holds fewer bytes than the header shape requires."""


class DtypeMismatchError(FieldPackError):
    """Payload dtype tag differs from the supported f32le format."""


@dataclass(frozen=True)
class FieldSeries:
    """Real space-time grid of physical fields, shape (B, T, H, W, C)."""

    values: np.ndarray
    dx: float = 1.0
    dy: float = 1.0
    dt: float = 1.0
    channels: tuple[str, ...] | None = None

    def __post_init__(self):
        v = self.values
        if v.ndim != 5:
            raise ValueError(f"FieldSeries needs (B,T,H,W,C) values, got ndim={v.ndim}")
        b, t, h, w, c = v.shape
        if h < 2 or w < 2 or b < 1 or t < 1 or c < 1:
            raise ValueError(f"invalid FieldSeries shape {v.shape}: need H,W>=2 and B,T,C>=1")
        if not np.isfinite(v).all():
            raise ValueError("FieldSeries values must be finite (no NaN/Inf)")
        if self.channels is not None and len(self.channels) != c:
            raise ValueError(f"{len(self.channels)} channel names for {c} channels")

    @property
    def shape(self):
        return self.values.shape

    def channel_names(self) -> tuple[str, ...]:
        if self.channels is not None:
            return self.channels
        return tuple(f"ch{i}" for i in range(self.values.shape[-1]))

    def astype_f32(self) -> "FieldSeries":
        return FieldSeries(self.values.astype(np.float32), self.dx, self.dy, self.dt, self.channels)


@dataclass(frozen=True)
class SpectrumProfile:
    """Radial spectrum: total energy per integer wavenumber bin k = 0..K_max."""

    energy: np.ndarray

    def __post_init__(self):
        if self.energy.ndim != 1:
            raise ValueError("SpectrumProfile.energy must be 1D (one entry per bin)")

    @property
    def log_energy(self) -> np.ndarray:
        return np.log(self.energy + LOG_FLOOR)

    @property
    def k_max(self) -> int:
        return self.energy.shape[0] - 1

    def wavenumbers(self) -> np.ndarray:
        return np.arange(self.energy.shape[0])


@dataclass(frozen=True)
class SpectrumStack:
    """Radial spectra resolved per (sample, timestep, channel): (B, T, C, K+1)."""

    energy: np.ndarray

    def profile(self, b: int, t: int, c: int) -> SpectrumProfile:
        return SpectrumProfile(self.energy[b, t, c])

    def mean_profile(self) -> SpectrumProfile:
        return SpectrumProfile(self.energy.mean(axis=(0, 1, 2)))


def spectrum_k_max(h: int, w: int) -> int:
    """Largest integer radial bin reachable on an h x w grid."""
    return int(np.floor(np.hypot(h // 2, w // 2)))


def _centered_freq_radius(h: int, w: int) -> np.ndarray:
    u = np.arange(h) - h // 2
    v = np.arange(w) - w // 2
    return np.hypot(u[:, None], v[None, :])


def radial_energy_spectrum(field: np.ndarray) -> SpectrumProfile:
    """Bin |FFT|^2 of one real 2D grid into integer radial wavenumber annuli.

    Bin k receives all cells (u, v) of the *shifted* (zero-centered) spectrum
    with floor(sqrt(u^2 + v^2)) = k; the binning is an exact partition, so
    sum_k E(k) equals the total spectral energy.
    """
    field = np.asarray(field)
    if field.ndim != 2:
        raise ValueError(f"radial_energy_spectrum expects a 2D grid, got ndim={field.ndim}")
    if not np.isfinite(field).all():
        raise ValueError("radial_energy_spectrum: input contains NaN/Inf")
    h, w = field.shape
    power = np.abs(np.fft.fftshift(np.fft.fft2(field))) ** 2
    k = np.floor(_centered_freq_radius(h, w)).astype(np.int64)
    energy = np.bincount(k.ravel(), weights=power.ravel(), minlength=spectrum_k_max(h, w) + 1)
    return SpectrumProfile(energy)


def radial_bin_counts(h: int, w: int) -> np.ndarray:
    """Number of frequency cells falling into each radial bin."""
    k = np.floor(_centered_freq_radius(h, w)).astype(np.int64)
    return np.bincount(k.ravel(), minlength=spectrum_k_max(h, w) + 1)


def residual_spectrum(pred: FieldSeries, truth: FieldSeries) -> SpectrumStack:
    """Radial spectrum of (pred - truth) per sample, timestep, and channel."""
    if pred.values.shape != truth.values.shape:
        raise ValueError(f"shape mismatch: {pred.values.shape} vs {truth.values.shape}")
    diff = pred.values.astype(np.float64) - truth.values.astype(np.float64)
    b, t, h, w, c = diff.shape
    n_bins = spectrum_k_max(h, w) + 1
    k = np.floor(_centered_freq_radius(h, w)).astype(np.int64).ravel()
    out = np.empty((b, t, c, n_bins))
    for bi in range(b):
        for ti in range(t):
            for ci in range(c):
                power = np.abs(np.fft.fftshift(np.fft.fft2(diff[bi, ti, :, :, ci]))) ** 2
                out[bi, ti, ci] = np.bincount(k, weights=power.ravel(), minlength=n_bins)
    return SpectrumStack(out)


@dataclass(frozen=True)
class MetricReport:
    """MSE / nRMSE / Max_ERR with a per-channel breakdown.

    nRMSE is the per-sample L2 norm of the residual over the L2 norm of the
    truth, averaged over the batch; Max_ERR is the dataset-wide max |error|.
    """

    mse: float
    nrmse: float
    max_err: float
    per_channel: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "nrmse": self.nrmse,
            "max_err": self.max_err,
            "per_channel": self.per_channel,
        }


def compute_metrics(pred: FieldSeries, truth: FieldSeries) -> MetricReport:
    if pred.values.shape != truth.values.shape:
        raise ValueError(f"shape mismatch: {pred.values.shape} vs {truth.values.shape}")
    p = pred.values.astype(np.float64)
    g = truth.values.astype(np.float64)
    diff = p - g
    b = p.shape[0]

    def _stats(d, t):
        mse = float(np.mean(d * d))
        max_err = float(np.max(np.abs(d)))
        res_norm = np.sqrt((d * d).reshape(b, -1).sum(axis=1))
        tru_norm = np.sqrt((t * t).reshape(b, -1).sum(axis=1))
        if np.any(tru_norm == 0.0):
            warnings.warn("compute_metrics: zero-norm truth sample, nRMSE undefined")
            nrmse = float("nan")
        else:
            nrmse = float(np.mean(res_norm / tru_norm))
        return mse, nrmse, max_err

    mse, nrmse, max_err = _stats(diff, g)
    per_channel = {}
    for ci, name in enumerate(truth.channel_names()):
        cm, cn, cx = _stats(diff[..., ci], g[..., ci])
        per_channel[name] = {"mse": cm, "nrmse": cn, "max_err": cx}
    return MetricReport(mse, nrmse, max_err, per_channel)


# ---------------------------------------------------------------------------
# FieldPack container: [8-byte LE header length][UTF-8 JSON header][f32le payload]
# ---------------------------------------------------------------------------

_PREFIX = struct.Struct("<Q")
_DT = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


def _pack_container(header: dict, payload: bytes) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(len(raw)) + raw + payload


def _unpack_container(blob: bytes) -> tuple[dict, bytes]:
    if len(blob) < _PREFIX.size:
        raise MalformedHeaderError("file shorter than the 8-byte header prefix")
    (n,) = _PREFIX.unpack_from(blob, 0)
    if len(blob) < _PREFIX.size + n:
        raise MalformedHeaderError("file ends inside the JSON header")
    try:
        header = json.loads(blob[_PREFIX.size : _PREFIX.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"header is not valid UTF-8 JSON: {e}") from e
    if not isinstance(header, dict):
        raise MalformedHeaderError("header JSON must be an object")
    return header, blob[_PREFIX.size + n :]


def fieldpack_write(series: FieldSeries, path, seed=None, producer=None) -> None:
    """Write a FieldSeries; values must already be float32 for a bit-exact
    round trip (cast with `series.astype_f32()` if needed)."""
    v = series.values
    if v.dtype != np.float32:
        raise DtypeMismatchError(f"FieldPack stores f32le payloads; got dtype {v.dtype}")
    header = {
        "format": "fieldpack",
        "version": 1,
        "shape": list(v.shape),
        "dtype": "f32le",
        "dx": series.dx,
        "dy": series.dy,
        "dt": series.dt,
        "channels": list(series.channel_names()),
        "seed": seed,
        "producer": producer or {"tool": "flowlab"},
    }
    payload = np.ascontiguousarray(v, dtype=_DT["f32le"]).tobytes()
    with open(path, "wb") as f:
        f.write(_pack_container(header, payload))


def fieldpack_read(path) -> FieldSeries:
    with open(path, "rb") as f:
        blob = f.read()
    header, payload = _unpack_container(blob)
    for key in ("shape", "dtype", "dx", "dy", "dt"):
        if key not in header:
            raise MalformedHeaderError(f"header missing required key {key!r}")
    if header["dtype"] != "f32le":
        raise DtypeMismatchError(f"unsupported payload dtype tag {header['dtype']!r}")
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != 5:
        raise MalformedHeaderError(f"header shape must have 5 dims, got {shape}")
    want = 4 * int(np.prod(shape))
    if len(payload) < want:
        raise TruncatedPayloadError(f"payload holds {len(payload)} bytes, header needs {want}")
    if len(payload) > want:
        raise MalformedHeaderError(f"{len(payload) - want} trailing bytes after payload")
    values = np.frombuffer(payload, dtype=_DT["f32le"]).reshape(shape).copy()
    channels = tuple(header["channels"]) if header.get("channels") else None
    return FieldSeries(values, float(header["dx"]), float(header["dy"]), float(header["dt"]), channels)


# ---------------------------------------------------------------------------
# Report export (plot-ready CSV + JSON)
# ---------------------------------------------------------------------------


def write_spectrum_csv(profile: SpectrumProfile, path, tag: str = "") -> None:
    with open(path, "w") as f:
        f.write("wavenumber,energy,log_energy,tag\n")
        for k in range(profile.energy.shape[0]):
            f.write(f"{k},{profile.energy[k]:.17g},{profile.log_energy[k]:.17g},{tag}\n")


def write_spectrum_json(profile: SpectrumProfile, path, tag: str = "") -> None:
    with open(path, "w") as f:
        json.dump(
            {"tag": tag, "wavenumber": profile.wavenumbers().tolist(),
             "energy": profile.energy.tolist(), "log_energy": profile.log_energy.tolist()},
            f, indent=2)


def write_metrics_csv(report: MetricReport, path) -> None:
    with open(path, "w") as f:
        f.write("channel,mse,nrmse,max_err\n")
        f.write(f"all,{report.mse:.17g},{report.nrmse:.17g},{report.max_err:.17g}\n")
        for name, row in report.per_channel.items():
            f.write(f"{name},{row['mse']:.17g},{row['nrmse']:.17g},{row['max_err']:.17g}\n")


def write_metrics_json(report: MetricReport, path) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
