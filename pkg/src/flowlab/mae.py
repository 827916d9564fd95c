"""Masked-autoencoder pretraining and representation alignment.

A tubelet-token encoder (factorized spatial/temporal attention) is trained to
reconstruct randomly masked tokens from the visible ones; the loss runs over
masked tokens only. Masked positions are zeroed at the input and excluded as
attention keys in both factorized passes, so visible-token features provably
depend on visible inputs alone while array shapes stay fixed. The decoder is
a shallow joint-attention transformer over the full token set with a learned
mask token.

Once pretrained, the frozen encoder is a surrogate feature extractor: a
trainable two-layer projection maps generator tap features onto it and the
alignment loss is the mean tokenwise (1 - cosine similarity). The MAE shares
the generator's tokenization geometry so features align token to token, and
alignment-time extraction runs unmasked on the clean target window.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tape
from .backbone import BackboneConfig, ParamStore, patchify, positional_table
from .tape import Tensor

MASK_NEG = -1e30  # additive logit mask for excluded keys


@dataclass(frozen=True)
class MaskPlan:
    """Masked/visible token index split; |masked| = round(ratio * N)."""

    n_tokens: int
    ratio: float
    masked: np.ndarray
    visible: np.ndarray
    seed: int

    def mask_vector(self) -> np.ndarray:
        m = np.zeros(self.n_tokens)
        m[self.masked] = 1.0
        return m


def random_mask(n_tokens: int, ratio: float, seed: int) -> MaskPlan:
    """Uniform random masking without replacement; deterministic per seed."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must lie in [0, 1), got {ratio}")
    n_masked = int(round(ratio * n_tokens))
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.choice(n_tokens, size=n_masked, replace=False))
    visible = np.setdiff1d(np.arange(n_tokens), masked)
    return MaskPlan(n_tokens, ratio, masked, visible, seed)


@dataclass(frozen=True)
class MaeConfig:
    grid_h: int = 64
    grid_w: int = 64
    channels: int = 2
    frames: int = 4
    patch_h: int = 8
    patch_w: int = 8
    patch_s: int = 1
    d_model: int = 64
    depth: int = 2       # encoder blocks
    dec_depth: int = 2   # decoder blocks (shallow by design)
    heads: int = 2
    mask_ratio: float = 0.75
    dtype: str = "f32"

    def geometry(self) -> BackboneConfig:
        return BackboneConfig(
            grid_h=self.grid_h, grid_w=self.grid_w, channels=self.channels,
            frames=self.frames, context_frames=self.frames, patch_h=self.patch_h,
            patch_w=self.patch_w, patch_s=self.patch_s, depth=1,
            d_model=self.d_model, heads=self.heads, kappa=1, n_blocks=1,
            variant="surrogate", dtype=self.dtype)

    @property
    def n_tokens(self) -> int:
        g = self.geometry()
        return g.n_tokens

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


class MaeModel:
    """Factorized-attention masked autoencoder over tape Tensors."""

    def __init__(self, config: MaeConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.geom = config.geometry()
        self.pos = positional_table(self.geom, self.geom.n_f).astype(config.np_dtype())
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype()
        d = cfg.d_model
        p: dict[str, Tensor] = {}

        def lin(name, fi, fo, zero=False):
            w = np.zeros((fi, fo), dtype=dt) if zero else \
                (rng.standard_normal((fi, fo)) / np.sqrt(fi)).astype(dt)
            p[name + ".w"] = tape.param(w)
            p[name + ".b"] = tape.param(np.zeros(fo, dtype=dt))

        def attn(name):
            for proj in ("wq", "wk", "wv", "wo"):
                p[f"{name}.{proj}"] = tape.param(
                    (rng.standard_normal((d, d)) / np.sqrt(d)).astype(dt))

        lin("embed", self.geom.patch_dim, d)
        for i in range(cfg.depth):
            attn(f"enc{i}.spatial")
            attn(f"enc{i}.temporal")
            lin(f"enc{i}.mlp.fc1", d, 4 * d)
            lin(f"enc{i}.mlp.fc2", 4 * d, d)
        p["mask_token"] = tape.param((rng.standard_normal(d) * 0.02).astype(dt))
        for i in range(cfg.dec_depth):
            attn(f"dec{i}.attn")
            lin(f"dec{i}.mlp.fc1", d, 4 * d)
            lin(f"dec{i}.mlp.fc2", 4 * d, d)
        lin("head", d, self.geom.patch_dim, zero=True)
        return p

    def n_params(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.params.values())

    # -- attention helpers -------------------------------------------------
    def _heads(self, x: Tensor, n: int):
        h = self.config.heads
        dh = self.config.d_model // h
        lead = x.shape[:-2]
        x = tape.reshape(x, lead + (n, h, dh))
        axes = list(range(x.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return tape.transpose(x, axes)

    def _attn(self, x: Tensor, name: str, key_mask: np.ndarray | None) -> Tensor:
        """Multi-head self-attention over axis -2; key_mask adds MASK_NEG to
        the logits of excluded keys (shape broadcastable to (..., 1, N))."""
        p = self.params
        n = x.shape[-2]
        q = self._heads(tape.matmul(x, p[f"{name}.wq"]), n)
        k = self._heads(tape.matmul(x, p[f"{name}.wk"]), n)
        v = self._heads(tape.matmul(x, p[f"{name}.wv"]), n)
        logits = tape.mul(tape.matmul(q, tape.swap_last(k)), float(1.0 / np.sqrt(q.shape[-1])))
        if key_mask is not None:
            logits = tape.add(logits, key_mask)
        out = tape.matmul(tape.softmax(logits, axis=-1), v)
        lead = out.shape[:-3]
        axes = list(range(out.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        out = tape.reshape(tape.transpose(out, axes), lead + (n, self.config.d_model))
        return tape.matmul(out, p[f"{name}.wo"])

    def _mlp(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        h = tape.gelu(tape.add(tape.matmul(x, p[f"{name}.fc1.w"]), p[f"{name}.fc1.b"]))
        return tape.add(tape.matmul(h, p[f"{name}.fc2.w"]), p[f"{name}.fc2.b"])

    # -- encoder / decoder ---------------------------------------------------
    def encode(self, series_values: np.ndarray, plan: MaskPlan | None,
               stop_layer: int | None = None) -> Tensor:
        """Token features (B, F, P, d). With a plan, masked tokens are zeroed
        at the input and excluded as keys in both factorized passes."""
        cfg, geom = self.config, self.geom
        toks = patchify(np.asarray(series_values, dtype=cfg.np_dtype()), geom)
        b = toks.shape[0]
        x = tape.add(tape.matmul(Tensor(toks), self.params["embed.w"]), self.params["embed.b"])
        x = tape.add(x, self.pos)
        sp_mask = tm_mask = None
        if plan is not None:
            grid = plan.mask_vector().reshape(geom.n_f, geom.tokens_per_frame).astype(cfg.np_dtype())
            x = tape.mul(x, (1.0 - grid)[None, :, :, None])
            # spatial pass: keys masked within each frame; temporal pass:
            # keys masked across frames at fixed location
            sp_mask = (MASK_NEG * grid)[None, :, None, None, :]        # (1,F,1,1,P)
            tm_mask = (MASK_NEG * grid.T)[None, :, None, None, :]      # (1,P,1,1,F)
        depth = cfg.depth if stop_layer is None else stop_layer
        for i in range(depth):
            h = self._attn(tape.layer_norm(x), f"enc{i}.spatial", sp_mask)
            x = tape.add(x, h)
            axes = list(range(x.ndim))
            axes[-3], axes[-2] = axes[-2], axes[-3]
            xt = tape.transpose(x, axes)
            ht = self._attn(tape.layer_norm(xt), f"enc{i}.temporal", tm_mask)
            x = tape.add(x, tape.transpose(ht, axes))
            x = tape.add(x, self._mlp(tape.layer_norm(x), f"enc{i}.mlp"))
        return x

    def decode(self, encoded: Tensor, plan: MaskPlan) -> Tensor:
        """Reconstruct patch values (B, N, patch_dim) from visible features
        plus the learned mask token at masked positions."""
        geom = self.geom
        b = encoded.shape[0]
        x = tape.reshape(encoded, (b, geom.n_tokens, self.config.d_model))
        keep = (1.0 - plan.mask_vector()[None, :, None]).astype(self.config.np_dtype())
        fill = tape.mul(self.params["mask_token"], 1.0 - keep)
        x = tape.add(tape.mul(x, keep), fill)
        x = tape.add(x, self.pos.reshape(1, geom.n_tokens, self.config.d_model))
        for i in range(self.config.dec_depth):
            x = tape.add(x, self._attn(tape.layer_norm(x), f"dec{i}.attn", None))
            x = tape.add(x, self._mlp(tape.layer_norm(x), f"dec{i}.mlp"))
        x = tape.layer_norm(x)
        return tape.add(tape.matmul(x, self.params["head.w"]), self.params["head.b"])


def masked_mse(pred_tokens: Tensor, target_tokens: np.ndarray, plan: MaskPlan) -> Tensor:
    """MSE restricted to masked tokens; 0 with a warning when nothing is masked."""
    if plan.masked.size == 0:
        warnings.warn("empty masked set: reconstruction loss is 0 by definition")
        return Tensor(np.asarray(0.0))
    m = plan.mask_vector()[None, :, None]
    diff = tape.sub(pred_tokens, Tensor(np.asarray(target_tokens)))
    sq = tape.mul(tape.mul(diff, diff), m)
    batch = pred_tokens.shape[0]
    denom = batch * plan.masked.size * pred_tokens.shape[-1]
    return tape.mul(tape.tsum(sq), 1.0 / denom)


def mae_forward(series_values: np.ndarray, plan: MaskPlan, model: MaeModel):
    """Encoder on visible tokens, decoder with mask tokens, masked-region MSE.

    Returns (reconstructed tokens (B, N, patch_dim), loss Tensor).
    """
    target = patchify(np.asarray(series_values, dtype=model.config.np_dtype()), model.geom)
    b = target.shape[0]
    target = target.reshape(b, model.geom.n_tokens, model.geom.patch_dim)
    encoded = model.encode(series_values, plan)
    recon = model.decode(encoded, plan)
    return recon, masked_mse(recon, target, plan)


def extract_features(series_values: np.ndarray, model: MaeModel, layer: int | None = None) -> np.ndarray:
    """Frozen-encoder features, all tokens visible (no masking), no gradients.

    Returns (B, N, d_model) numpy features from the chosen encoder layer.
    """
    with tape.no_grad():
        feats = model.encode(series_values, plan=None, stop_layer=layer)
    b = feats.shape[0]
    return feats.data.reshape(b, model.geom.n_tokens, model.config.d_model)


@dataclass
class AlignmentHead:
    """Two-layer projection from generator tap features to MAE feature space."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    gamma: float = 0.01

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")

    def params(self) -> dict[str, Tensor]:
        return {"align.w1": self.w1, "align.b1": self.b1,
                "align.w2": self.w2, "align.b2": self.b2}

    def project(self, feats: Tensor) -> Tensor:
        h = tape.gelu(tape.add(tape.matmul(feats, self.w1), self.b1))
        return tape.add(tape.matmul(h, self.w2), self.b2)


def init_alignment_head(d_gen: int, d_mae: int, rng: np.random.Generator,
                        gamma: float = 0.01, hidden: int | None = None,
                        dtype=np.float32) -> AlignmentHead:
    hidden = hidden or d_gen
    return AlignmentHead(
        w1=tape.param((rng.standard_normal((d_gen, hidden)) / np.sqrt(d_gen)).astype(dtype)),
        b1=tape.param(np.zeros(hidden, dtype=dtype)),
        w2=tape.param((rng.standard_normal((hidden, d_mae)) / np.sqrt(hidden)).astype(dtype)),
        b2=tape.param(np.zeros(d_mae, dtype=dtype)),
        gamma=gamma)


def alignment_loss(gen_tap: Tensor, mae_features: np.ndarray, head: AlignmentHead) -> Tensor:
    """Mean over tokens of (1 - cos(projected generator features, MAE features)).

    Lies in [0, 2]; zero exactly when the projected features are positively
    proportional to the targets tokenwise.
    """
    if gen_tap.shape[-2] != np.asarray(mae_features).shape[-2]:
        raise ValueError(
            f"token count mismatch: generator {gen_tap.shape[-2]} vs MAE "
            f"{np.asarray(mae_features).shape[-2]} (tokenization must match)")
    proj = head.project(gen_tap)
    target = np.asarray(mae_features, dtype=proj.dtype)
    dot = tape.tsum(tape.mul(proj, target), axis=-1)
    norm_p = tape.sqrt(tape.tsum(tape.mul(proj, proj), axis=-1))
    norm_t = np.sqrt(np.sum(target * target, axis=-1))
    cos = tape.div(dot, tape.mul(norm_p, norm_t))
    return tape.tmean(tape.sub(1.0, cos))


def total_loss(cfm: Tensor, align: Tensor, gamma: float) -> Tensor:
    """L_total = L_cfm + gamma * L_align."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    return tape.add(cfm, tape.mul(align, gamma))


def save_mae(model: MaeModel, path) -> None:
    ParamStore.from_params(model.params).save(path, meta={"mae_config": asdict(model.config)})


def load_mae(path) -> MaeModel:
    store, meta = ParamStore.load(path)
    config = MaeConfig(**meta["mae_config"])
    return MaeModel(config, params={n: tape.param(a) for n, a in store.items()})
