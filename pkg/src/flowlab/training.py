"""Experiment orchestration: optimization, training loops, sampling, rollout
evaluation, the noise-robustness protocol, and report emission.

The generative objective is velocity regression (flow matching) on the
4-frame target window conditioned on the 4-frame context window, optionally
regularized by MAE feature alignment: L_total = L_cfm + gamma * L_align.
The surrogate variant trains the same backbone to map context to target
directly with plain MSE. Optimization is AdamW (decoupled weight decay) with
global gradient-norm clipping and a triangular cyclic learning rate starting
at lr_max.

Runs are reproducible: all randomness derives from one root seed through
named SeedSequence children (data order, path noise, masking, evaluation
noise), and reports expose canonical_bytes() that exclude wall-clock.
"""
from __future__ import annotations

import hashlib
import json
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tape
from .backbone import BackboneConfig, VelocityBackbone, load_checkpoint, save_checkpoint
from .fields import (FieldSeries, MetricReport, SpectrumStack, compute_metrics,
                     fieldpack_read, fieldpack_write, residual_spectrum, spectrum_k_max)
from .interpolants import InterpolantSchedule, T_EPS, ode_sample, sample_path
from .mae import MaeConfig, MaeModel, alignment_loss, extract_features, init_alignment_head, \
    load_mae, mae_forward, random_mask, save_mae, total_loss
from .tape import Tensor


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over a named parameter map."""

    def __init__(self, params: dict[str, Tensor], lr=1e-4, betas=(0.9, 0.999),
                 weight_decay=0.01, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - (lr * update).astype(p.data.dtype)


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.asarray(p.grad, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def cyclic_lr(epoch: int, lr_min: float, lr_max: float, period: int) -> float:
    """Triangular schedule starting at lr_max, touching lr_min mid-cycle."""
    phase = (epoch % period) / period
    return lr_min + (lr_max - lr_min) * abs(1.0 - 2.0 * phase)


# ---------------------------------------------------------------------------
# configuration and reports
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str = "data"
    out_dir: str = "runs/run0"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    schedule: str = "linear"
    epochs: int = 20
    batch_size: int = 16
    lr_max: float = 1e-4
    lr_min: float = 1e-5
    lr_period: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    gamma: float = 0.0
    mae_checkpoint: str | None = None
    mae_layer: int | None = None
    sample_steps: int = 16
    noise_std: float = 0.0  # additive Gaussian corruption of the training data
    seed: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        d = json.loads(text)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)

    def config_hash(self) -> str:
        canon = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RolloutPlan:
    horizon: int = 1
    mode: str = "generative"  # or "surrogate"
    context_len: int = 4

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.mode not in ("generative", "surrogate"):
            raise ValueError(f"unknown rollout mode {self.mode!r}")


@dataclass
class RunReport:
    config_hash: str
    seed: int
    variant: str
    epoch_losses: list
    epoch_cfm: list
    epoch_align: list
    final_metrics: dict | None = None
    baseline_nrmse: float | None = None
    residual_log_energy: list | None = None
    aborted: bool = False
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "wall_clock"}
        d["volatile"] = {"wall_clock": self.wall_clock}
        return d

    def canonical_bytes(self) -> bytes:
        d = self.to_dict()
        d.pop("volatile")
        return json.dumps(d, sort_keys=True, separators=(",", ":")).encode()

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


@dataclass
class WindowData:
    """Normalized context/target windows plus the normalization stats."""

    context: np.ndarray
    target: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    dx: float
    dt: float
    channels: tuple


def normalization_stats(values: np.ndarray):
    mean = values.mean(axis=(0, 1, 2, 3))
    std = values.std(axis=(0, 1, 2, 3))
    std = np.where(std > 1e-8, std, 1.0)
    return mean.astype(np.float64), std.astype(np.float64)


def load_split(data_dir, name: str) -> FieldSeries:
    return fieldpack_read(Path(data_dir) / f"{name}.fieldpack")


def prepare_windows(series: FieldSeries, mean, std, context_len: int = 4,
                    noise_std: float = 0.0, rng: np.random.Generator | None = None) -> WindowData:
    v = series.values.astype(np.float64)
    if noise_std > 0.0:
        v = v + noise_std * rng.standard_normal(v.shape)
    v = (v - mean) / std
    return WindowData(context=v[:, :context_len], target=v[:, context_len:],
                      mean=mean, std=std, dx=series.dx, dt=series.dt,
                      channels=series.channel_names())


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _resolve_backbone(config: ExperimentConfig, sample_shape) -> BackboneConfig:
    _, t, h, w, c = sample_shape
    ctx = config.backbone.context_frames
    return replace(config.backbone, grid_h=h, grid_w=w, channels=c,
                   frames=t - ctx, context_frames=ctx)


def train(config: ExperimentConfig, quiet: bool = False):
    """Optimize the model per the config; returns (checkpoint path, RunReport).

    Writes per-epoch checkpoints, a final checkpoint, and report.json under
    config.out_dir. Identical (config, seed) reproduce identical bytes for
    checkpoints and the canonical report.
    """
    t_start = time.time()
    out_dir = Path(config.out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(config.seed)
    seq_data, seq_noise, seq_mask, seq_eval = root.spawn(4)
    rng_data = np.random.default_rng(seq_data)
    rng_noise = np.random.default_rng(seq_noise)

    train_series = load_split(config.data_dir, "train")
    mean, std = normalization_stats(train_series.values)
    corrupt_rng = np.random.default_rng(seq_mask) if config.noise_std > 0 else None
    data = prepare_windows(train_series, mean, std, config.backbone.context_frames,
                           noise_std=config.noise_std, rng=corrupt_rng)

    bb_config = _resolve_backbone(config, train_series.values.shape)
    model = VelocityBackbone(bb_config, seed=config.seed)
    params = dict(model.params)
    schedule = InterpolantSchedule(config.schedule)
    surrogate = bb_config.variant == "surrogate"

    mae_model = head = None
    if config.gamma > 0.0:
        if config.mae_checkpoint is None:
            raise ValueError("gamma > 0 needs an MAE checkpoint for alignment")
        mae_model = load_mae(config.mae_checkpoint)
        head = init_alignment_head(bb_config.d_model, mae_model.config.d_model,
                                   np.random.default_rng(root.spawn(1)[0]),
                                   gamma=config.gamma, dtype=bb_config.np_dtype())
        params.update(head.params())

    opt = AdamW(params, lr=config.lr_max, betas=(config.beta1, config.beta2),
                weight_decay=config.weight_decay)

    n = data.target.shape[0]
    losses, cfm_log, align_log = [], [], []
    aborted = False
    final_path = out_dir / "checkpoints" / "final.pack"
    extra_meta = {"normalization": {"mean": mean.tolist(), "std": std.tolist()},
                  "experiment": json.loads(config.to_json())}

    for epoch in range(config.epochs):
        lr = cyclic_lr(epoch, config.lr_min, config.lr_max, config.lr_period)
        order = rng_data.permutation(n)
        ep_loss = ep_cfm = ep_align = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            ctx = data.context[idx]
            x0 = data.target[idx]
            opt.zero_grad()
            if surrogate:
                pred, tap = model.forward(ctx)
                loss_cfm = tape.mse(pred, Tensor(x0.astype(bb_config.np_dtype())))
            else:
                t_draw = rng_noise.uniform(T_EPS, 1.0 - T_EPS, size=x0.shape[0])
                eps = rng_noise.standard_normal(x0.shape)
                path = sample_path(x0, eps, t_draw, schedule)
                v_hat, tap = model.forward(path.xt, t_draw, ctx)
                loss_cfm = tape.mse(v_hat, Tensor(path.v_star.astype(bb_config.np_dtype())))
            if head is not None:
                feats = extract_features(x0, mae_model, layer=config.mae_layer)
                loss_align = alignment_loss(tap, feats, head)
            else:
                loss_align = Tensor(np.asarray(0.0, dtype=bb_config.np_dtype()))
            loss = total_loss(loss_cfm, loss_align, config.gamma)
            if not np.isfinite(loss.data):
                warnings.warn(f"non-finite loss at epoch {epoch}; keeping last checkpoint")
                aborted = True
                break
            loss.backward()
            clip_global_norm(params, config.clip_norm)
            opt.step(lr)
            ep_cfm += float(loss_cfm.data)
            ep_align += float(loss_align.data)
            n_batches += 1
        if aborted:
            break
        cfm_log.append(ep_cfm / max(n_batches, 1))
        align_log.append(ep_align / max(n_batches, 1))
        # logged total recombined in double so the accounting identity
        # L_total = L_cfm + gamma * L_align holds exactly in the report
        losses.append(cfm_log[-1] + config.gamma * align_log[-1])
        if not quiet:
            print(f"epoch {epoch:3d}  lr {lr:.2e}  loss {losses[-1]:.6f}")
        save_checkpoint(model, out_dir / "checkpoints" / f"epoch_{epoch:03d}.pack", extra_meta)
        save_checkpoint(model, final_path, extra_meta)

    report = RunReport(config_hash=config.config_hash(), seed=config.seed,
                       variant=bb_config.variant, epoch_losses=losses,
                       epoch_cfm=cfm_log, epoch_align=align_log, aborted=aborted)
    try:
        test_series = load_split(config.data_dir, "test")
    except FileNotFoundError:
        test_series = None
    if test_series is not None and not aborted:
        evaluate_into_report(report, final_path, test_series, config, seq_eval)
    report.wall_clock = time.time() - t_start
    report.save(out_dir / "report.json")
    return final_path, report


def evaluate_into_report(report: RunReport, checkpoint_path, test_series: FieldSeries,
                         config: ExperimentConfig, eval_seq) -> None:
    """Fill final metrics, residual spectra, and the climatology baseline."""
    model, meta = load_checkpoint(checkpoint_path)
    mean = np.asarray(meta["normalization"]["mean"])
    std = np.asarray(meta["normalization"]["std"])
    ctx_len = model.config.context_frames
    pred = predict_windows(model, meta, test_series, config.sample_steps,
                           np.random.default_rng(eval_seq))
    truth = FieldSeries(test_series.values[:, ctx_len:].astype(np.float64),
                        test_series.dx, test_series.dy, test_series.dt,
                        test_series.channels)
    metrics = compute_metrics(pred, truth)
    report.final_metrics = metrics.to_dict()
    stack = residual_spectrum(pred, truth)
    report.residual_log_energy = np.log(stack.energy.mean(axis=(0, 1, 2)) + 1e-20).tolist()

    # climatological mean predictor: the per-location training-target mean
    train_series = load_split(config.data_dir, "train")
    clim = train_series.values[:, ctx_len:].astype(np.float64).mean(axis=(0, 1))
    clim_pred = np.broadcast_to(clim, truth.values.shape)
    base = compute_metrics(FieldSeries(np.ascontiguousarray(clim_pred),
                                       truth.dx, truth.dy, truth.dt, truth.channels), truth)
    report.baseline_nrmse = base.nrmse


def predict_windows(model: VelocityBackbone, meta: dict, series: FieldSeries,
                    steps: int, rng: np.random.Generator) -> FieldSeries:
    """Generate target windows for every context in `series` (physical units)."""
    mean = np.asarray(meta["normalization"]["mean"])
    std = np.asarray(meta["normalization"]["std"])
    ctx_len = model.config.context_frames
    v = (series.values.astype(np.float64) - mean) / std
    ctx = v[:, :ctx_len]
    if model.config.variant == "surrogate":
        out = model.predict(ctx)
    else:
        shape = (ctx.shape[0], model.config.frames, *ctx.shape[2:])
        noise = rng.standard_normal(shape)
        out = ode_sample(model.velocity_fn(ctx), noise, None,
                         InterpolantSchedule("linear"), steps)
    out = out.astype(np.float64) * std + mean
    return FieldSeries(out, series.dx, series.dy, series.dt, series.channels)


# ---------------------------------------------------------------------------
# sampling / rollout / robustness / spectra
# ---------------------------------------------------------------------------


def sample(checkpoint_path, context_series: FieldSeries, steps: int = 16,
           seed: int = 0) -> FieldSeries:
    """Draw one generated 4-step window per context window in the series."""
    model, meta = load_checkpoint(checkpoint_path)
    rng = np.random.default_rng(seed)
    return predict_windows(model, meta, context_series, steps, rng)


def rollout_eval(checkpoint_path, plan: RolloutPlan, traj_series: FieldSeries,
                 steps: int = 16, seed: int = 0) -> list[MetricReport]:
    """Chained generation: each new context is the previous output window.

    traj_series holds full ground-truth trajectories (B, n_frames, H, W, C);
    metrics are reported per 4-step block, never aggregated across blocks.
    """
    model, meta = load_checkpoint(checkpoint_path)
    mean = np.asarray(meta["normalization"]["mean"])
    std = np.asarray(meta["normalization"]["std"])
    k = plan.context_len
    frames = traj_series.values.shape[1]
    needed = k + plan.horizon * model.config.frames
    if frames < needed:
        raise ValueError(f"rollout needs {needed} ground-truth frames, have {frames}")
    rng = np.random.default_rng(seed)
    v = (traj_series.values.astype(np.float64) - mean) / std
    context = v[:, :k]
    reports = []
    for h in range(plan.horizon):
        if plan.mode == "surrogate" or model.config.variant == "surrogate":
            out = model.predict(context)
        else:
            noise = rng.standard_normal((v.shape[0], model.config.frames, *v.shape[2:]))
            out = ode_sample(model.velocity_fn(context), noise, None,
                             InterpolantSchedule("linear"), steps)
        lo, hi = k + h * model.config.frames, k + (h + 1) * model.config.frames
        pred_phys = out.astype(np.float64) * std + mean
        truth = traj_series.values[:, lo:hi].astype(np.float64)
        reports.append(compute_metrics(
            FieldSeries(pred_phys, traj_series.dx, traj_series.dy, traj_series.dt,
                        traj_series.channels),
            FieldSeries(truth, traj_series.dx, traj_series.dy, traj_series.dt,
                        traj_series.channels)))
        context = out  # normalized model output becomes the next context
    return reports


def noise_robustness(config: ExperimentConfig, delta_sigma: float) -> dict:
    """Appendix-style protocol: train clean vs noise-injected twins for the
    generative and surrogate modes, report metric deltas (noisy - clean)."""
    results = {}
    for mode in ("generative", "surrogate"):
        variant = "full" if mode == "generative" else "surrogate"
        per_mode = {}
        for tag, sigma in (("clean", 0.0), ("noisy", delta_sigma)):
            cfg = replace(config,
                          backbone=replace(config.backbone, variant=variant),
                          noise_std=sigma,
                          out_dir=str(Path(config.out_dir) / f"{mode}_{tag}"))
            _, report = train(cfg, quiet=True)
            per_mode[tag] = report.final_metrics
        delta = {key: per_mode["noisy"][key] - per_mode["clean"][key]
                 for key in ("mse", "nrmse", "max_err")}
        results[mode] = {"clean": per_mode["clean"], "noisy": per_mode["noisy"],
                         "delta": delta}
    out = Path(config.out_dir) / "noise_robustness.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        json.dump(results, f, indent=2, sort_keys=True)
    return results


def spectra_report(checkpoints: dict[str, str], test_series: FieldSeries,
                   out_csv, steps: int = 16, seed: int = 0) -> dict:
    """Mean residual spectrum per variant, CSV rows (wavenumber, mean log
    residual energy, variant) plus a top-third-band energy summary."""
    h, w = test_series.values.shape[2:4]
    n_bins = spectrum_k_max(h, w) + 1
    rows = []
    summary = {}
    for variant, path in checkpoints.items():
        model, meta = load_checkpoint(path)
        pred = predict_windows(model, meta, test_series, steps, np.random.default_rng(seed))
        ctx_len = model.config.context_frames
        truth = FieldSeries(test_series.values[:, ctx_len:].astype(np.float64),
                            test_series.dx, test_series.dy, test_series.dt,
                            test_series.channels)
        stack = residual_spectrum(pred, truth)
        mean_energy = stack.energy.mean(axis=(0, 1, 2))
        top_third = mean_energy[2 * n_bins // 3 :]
        summary[variant] = {"high_band_mean_energy": float(np.mean(top_third))}
        log_e = np.log(mean_energy + 1e-20)
        rows += [(k, log_e[k], variant) for k in range(n_bins)]
    with open(out_csv, "w") as f:
        f.write("wavenumber,mean_log_residual_energy,variant\n")
        for k, e, variant in rows:
            f.write(f"{k},{e:.17g},{variant}\n")
    return summary


# ---------------------------------------------------------------------------
# MAE pretraining
# ---------------------------------------------------------------------------


def pretrain_mae(data_dir, out_path, mask_ratio: float = 0.75, epochs: int = 5,
                 seed: int = 0, d_model: int = 64, depth: int = 2, heads: int = 2,
                 batch_size: int = 16, lr: float = 1e-3, patch=None, quiet: bool = False) -> Path:
    """Masked-autoencoder pretraining on the dataset's 4-frame half-windows."""
    series = load_split(data_dir, "train")
    mean, std = normalization_stats(series.values)
    v = (series.values.astype(np.float64) - mean) / std
    b, t = v.shape[0], v.shape[1]
    half = t // 2
    samples = np.concatenate([v[:, :half], v[:, half:]], axis=0).astype(np.float32)
    ph, pw, ps = patch or (8, 8, 1)
    config = MaeConfig(grid_h=v.shape[2], grid_w=v.shape[3], channels=v.shape[4],
                       frames=half, patch_h=ph, patch_w=pw, patch_s=ps,
                       d_model=d_model, depth=depth, heads=heads, mask_ratio=mask_ratio)
    model = MaeModel(config, seed=seed)
    opt = AdamW(model.params, lr=lr, weight_decay=0.01)
    root = np.random.SeedSequence(seed)
    rng_data = np.random.default_rng(root.spawn(1)[0])
    n = samples.shape[0]
    step_seed = seed * 1_000_003
    for epoch in range(epochs):
        order = rng_data.permutation(n)
        ep = 0.0
        n_batches = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            plan = random_mask(config.n_tokens, mask_ratio, step_seed + epoch * 10_000 + start)
            opt.zero_grad()
            _, loss = mae_forward(samples[idx], plan, model)
            loss.backward()
            clip_global_norm(model.params, 1.0)
            opt.step()
            ep += float(loss.data)
            n_batches += 1
        if not quiet:
            print(f"mae epoch {epoch:3d}  loss {ep / max(n_batches, 1):.6f}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_mae(model, out_path)
    return out_path
