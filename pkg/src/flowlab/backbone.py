"""The dual-branch velocity network.

A noisy target window is tokenized into spatio-temporal tubes, positionally
encoded, and pushed through `depth` blocks. Each block runs two branches on
the same normed features: factorized salient flow attention (spatial pass
with kNN-centered background masking, then temporal) and frequency-guided
Fourier mixing. A 1x1-conv sigmoid gate fuses them per token, cross-attention
injects the encoded context window, and a pointwise MLP closes the block.
Everything is modulated DiT-style by the flow-matching time via per-block
(shift, scale, gate) triplets. Features after the tap block feed the
representation-alignment loss.

Ablation variants reshape this wiring (see `ablation_toggles`); the surrogate
variant drops noising, time conditioning, and cross-attention entirely and
maps the context window straight to a prediction.

Checkpoints serialize the named parameter map as a FieldPack-style container
(8-byte length-prefixed JSON manifest + concatenated little-endian payloads);
float32 models round-trip byte-identically.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape
from .attention import NeighborIndex, attention_map, build_neighbor_index, centered_neighborhood_weights
from .fouriermix import AfnoMlpParams, SpectralWeights, fm_branch
from .tape import Tensor

VARIANTS = ("full", "no_fm", "no_freq_weight", "add_fusion", "plain_attention",
            "no_sfa", "surrogate")


@dataclass(frozen=True)
class BackboneConfig:
    grid_h: int = 64
    grid_w: int = 64
    channels: int = 2
    frames: int = 4          # generated window length
    context_frames: int = 4  # conditioning window length k
    patch_h: int = 8
    patch_w: int = 8
    patch_s: int = 1         # tubelet temporal stride
    depth: int = 4
    d_model: int = 128
    heads: int = 4
    kappa: int = 5
    mode_cap: int = 0        # 0 resolves to the full Nyquist count
    n_blocks: int = 4
    mlp_ratio: int = 4
    lambda_shrink: float = 0.0
    tap_layer: int = -1      # -1 resolves to depth // 2
    pos_kind: str = "absolute"
    variant: str = "full"
    dtype: str = "f32"

    def __post_init__(self):
        if self.grid_h % self.patch_h or self.grid_w % self.patch_w:
            raise ValueError("grid must be divisible by the patch size")
        if self.frames % self.patch_s or self.context_frames % self.patch_s:
            raise ValueError("frame counts must be divisible by the temporal stride")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if (self.d_model // self.heads) % 2:
            raise ValueError("head dim must be even (differential split)")
        if self.d_model % self.n_blocks:
            raise ValueError("d_model must be divisible by n_blocks")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.tap() >= self.depth:
            raise ValueError("tap layer must lie below depth")
        if self.kappa > (self.grid_h // self.patch_h) * (self.grid_w // self.patch_w):
            raise ValueError("kappa exceeds the tokens of one frame")
        if self.pos_kind not in ("absolute", "rotary"):
            raise ValueError(f"unknown positional encoding {self.pos_kind!r}")
        if self.pos_kind == "rotary" and (self.d_model // self.heads) % 4:
            raise ValueError("rotary needs the head dim divisible by 4")

    # derived geometry -------------------------------------------------
    @property
    def n_f(self) -> int:
        return self.frames // self.patch_s

    @property
    def n_h(self) -> int:
        return self.grid_h // self.patch_h

    @property
    def n_w(self) -> int:
        return self.grid_w // self.patch_w

    @property
    def tokens_per_frame(self) -> int:
        return self.n_h * self.n_w

    @property
    def n_tokens(self) -> int:
        return self.n_f * self.tokens_per_frame

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w * self.patch_s * self.channels

    def tap(self) -> int:
        return self.depth // 2 if self.tap_layer < 0 else self.tap_layer

    def resolved_mode_cap(self) -> int:
        cap = min(self.n_h, self.n_w) // 2 + 1
        return cap if self.mode_cap <= 0 else min(self.mode_cap, cap)

    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def time_conditioning(self) -> bool:
        return self.variant != "surrogate"

    @property
    def uses_context_encoder(self) -> bool:
        return self.variant != "surrogate"

    @property
    def uses_fm(self) -> bool:
        return self.variant != "no_fm"

    @property
    def uses_sfa(self) -> bool:
        return self.variant != "no_sfa"

    @property
    def uses_gate(self) -> bool:
        return self.variant not in ("no_fm", "no_sfa", "add_fusion")

    @property
    def uses_freq_weight(self) -> bool:
        return self.variant != "no_freq_weight"


def ablation_toggles(config: BackboneConfig) -> dict[str, BackboneConfig]:
    """The base config plus the six ablation variants of it."""
    return {v: replace(config, variant=v) for v in VARIANTS}


# ---------------------------------------------------------------------------
# tokenization and positional encodings
# ---------------------------------------------------------------------------


def patchify(values: np.ndarray, config: BackboneConfig) -> np.ndarray:
    """(B, T, H, W, C) -> (B, n_f, P, patch_dim) tubelet tokens (pure reshape)."""
    b, t, h, w, c = values.shape
    s, ph, pw = config.patch_s, config.patch_h, config.patch_w
    if t % s or h % ph or w % pw:
        raise ValueError(f"shape {values.shape} not divisible by patch {(s, ph, pw)}")
    x = values.reshape(b, t // s, s, h // ph, ph, w // pw, pw, c)
    x = x.transpose(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(b, t // s, (h // ph) * (w // pw), s * ph * pw * c)


def unpatchify(tokens: np.ndarray, config: BackboneConfig, frames: int) -> np.ndarray:
    """Inverse of `patchify` for numpy arrays."""
    b = tokens.shape[0]
    s, ph, pw, c = config.patch_s, config.patch_h, config.patch_w, config.channels
    n_h, n_w = config.n_h, config.n_w
    x = tokens.reshape(b, frames // s, n_h, n_w, s, ph, pw, c)
    x = x.transpose(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, frames, n_h * ph, n_w * pw, c)


def unpatchify_t(tokens: Tensor, config: BackboneConfig, frames: int) -> Tensor:
    """In-graph inverse of `patchify` (tape version for the output head)."""
    b = tokens.shape[0]
    s, ph, pw, c = config.patch_s, config.patch_h, config.patch_w, config.channels
    n_h, n_w = config.n_h, config.n_w
    x = tape.reshape(tokens, (b, frames // s, n_h, n_w, s, ph, pw, c))
    x = tape.transpose(x, (0, 1, 4, 2, 5, 3, 6, 7))
    return tape.reshape(x, (b, frames, n_h * ph, n_w * pw, c))


def sinusoidal_positions(n: int, dim: int, scale: float = 1.0) -> np.ndarray:
    """[sin | cos] features of positions 0..n-1; position 0 -> (0..0, 1..1)."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = scale * np.arange(n)[:, None] * freqs[None, :]
    out = np.zeros((n, dim))
    out[:, :half] = np.sin(ang)
    out[:, half : 2 * half] = np.cos(ang)
    return out


def positional_table(config: BackboneConfig, n_f: int) -> np.ndarray:
    """Absolute sinusoidal (frame, row, col) table, shape (n_f, P, d_model)."""
    d = config.d_model
    d_axis = (d // 3) // 2 * 2
    f_enc = sinusoidal_positions(n_f, d_axis)
    r_enc = sinusoidal_positions(config.n_h, d_axis)
    c_enc = sinusoidal_positions(config.n_w, d_axis)
    table = np.zeros((n_f, config.n_h, config.n_w, d))
    table[..., :d_axis] = f_enc[:, None, None, :]
    table[..., d_axis : 2 * d_axis] = r_enc[None, :, None, :]
    table[..., 2 * d_axis : 3 * d_axis] = c_enc[None, None, :, :]
    return table.reshape(n_f, config.tokens_per_frame, d)


def rotary_tables(n: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables for rotary embedding of a length-n sequence."""
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / max(half, 1)))
    ang = np.arange(n)[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate feature pairs (2i, 2i+1) of (..., N, dim) by per-position angles.

    Rotations are isometries: vector norms are preserved exactly.
    """
    even = tape.tslice(x, (..., slice(0, None, 2)))
    odd = tape.tslice(x, (..., slice(1, None, 2)))
    re = tape.sub(tape.mul(even, cos), tape.mul(odd, sin))
    im = tape.add(tape.mul(even, sin), tape.mul(odd, cos))
    stacked = tape.concat([tape.reshape(re, re.shape + (1,)), tape.reshape(im, im.shape + (1,))], axis=-1)
    return tape.reshape(stacked, x.shape)


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of t in [0, 1] (scaled to the usual 0..1000 range)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = 1000.0 * t[:, None] * freqs[None, :]
    out = np.zeros((t.shape[0], dim))
    out[:, :half] = np.sin(ang)
    out[:, half : 2 * half] = np.cos(ang)
    return out


# ---------------------------------------------------------------------------
# module-level ops shared with tests and the MAE
# ---------------------------------------------------------------------------


def fuse_gate(u_sfa, u_fm, gate_w, gate_b) -> tuple[Tensor, Tensor]:
    """G = sigmoid(conv1x1([u_sfa, u_fm])); fused = G u_sfa + (1 - G) u_fm.

    The 1x1 conv is a per-token linear map to one channel; G broadcasts over
    the feature axis, so the fusion is elementwise convex.
    """
    u_sfa, u_fm = tape.astensor(u_sfa), tape.astensor(u_fm)
    both = tape.concat([u_sfa, u_fm], axis=-1)
    g = tape.sigmoid(tape.add(tape.matmul(both, gate_w), gate_b))
    fused = tape.add(tape.mul(g, u_sfa), tape.mul(tape.sub(1.0, g), u_fm))
    return g, fused


def cross_attention_core(tokens: Tensor, ctx: Tensor, wq, wk, wv, wo, heads: int) -> Tensor:
    """Multi-head cross-attention (queries from tokens, keys/values from ctx),
    without the residual."""
    b, n, d = tokens.shape
    nc = ctx.shape[-2]
    dh = d // heads

    def split_heads(x, length):
        x = tape.reshape(x, (b, length, heads, dh))
        return tape.transpose(x, (0, 2, 1, 3))

    q = split_heads(tape.matmul(tokens, wq), n)
    k = split_heads(tape.matmul(ctx, wk), nc)
    v = split_heads(tape.matmul(ctx, wv), nc)
    out = tape.matmul(attention_map(q, k), v)
    out = tape.reshape(tape.transpose(out, (0, 2, 1, 3)), (b, n, d))
    return tape.matmul(out, wo)


def condition_cross_attention(tokens, ctx, wq, wk, wv, wo, heads: int = 1) -> Tensor:
    """Cross-attention with the residual added (zero wo -> identity)."""
    tokens = tape.astensor(tokens)
    return tape.add(tokens, cross_attention_core(tokens, tape.astensor(ctx), wq, wk, wv, wo, heads))


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """DiT-style adaptive norm output: x * (1 + scale) + shift."""
    return tape.add(tape.mul(x, tape.add(scale, 1.0)), shift)


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------


class VelocityBackbone:
    """Dual-branch velocity network over tape Tensors.

    Parameters live in an insertion-ordered name -> Tensor map so gradient
    checks, the optimizer, and checkpointing all address them uniformly.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config
        self.neighbor_index = build_neighbor_index((config.n_h, config.n_w), config.kappa)
        self.pos_main = positional_table(config, config.n_f).astype(config.np_dtype())
        ctx_nf = config.context_frames // config.patch_s
        self.pos_ctx = positional_table(config, ctx_nf).astype(config.np_dtype())
        self._rot_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        self.params: dict[str, Tensor] = params if params is not None else self._init_params(seed)

    def _rot(self, n: int, width: int):
        """Cached rotary cos/sin tables for a length-n sequence of `width` dims."""
        key = (n, width)
        if key not in self._rot_cache:
            cos, sin = rotary_tables(n, width)
            dt = self.config.np_dtype()
            self._rot_cache[key] = (cos.astype(dt), sin.astype(dt))
        return self._rot_cache[key]

    # -- parameter construction -----------------------------------------
    def _init_params(self, seed: int) -> dict[str, Tensor]:
        cfg = self.config
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype()
        p: dict[str, Tensor] = {}

        def lin(name, fan_in, fan_out, zero=False):
            if zero:
                w = np.zeros((fan_in, fan_out), dtype=dt)
            else:
                w = (rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)).astype(dt)
            p[name + ".w"] = tape.param(w)
            p[name + ".b"] = tape.param(np.zeros(fan_out, dtype=dt))

        def ln(name):
            p[name + ".g"] = tape.param(np.ones(cfg.d_model, dtype=dt))
            p[name + ".b"] = tape.param(np.zeros(cfg.d_model, dtype=dt))

        def attn_pass(name, differential):
            d, h = cfg.d_model, cfg.heads
            for proj in ("wq", "wk", "wv"):
                p[f"{name}.{proj}"] = tape.param(
                    (rng.standard_normal((d, d)) / np.sqrt(d)).astype(dt))
            p[f"{name}.wo"] = tape.param((rng.standard_normal((d, d)) / np.sqrt(d)).astype(dt))
            if differential:
                p[f"{name}.lam"] = tape.param(np.zeros(h, dtype=dt))  # sigmoid(0) = 0.5

        lin("embed", cfg.patch_dim, cfg.d_model)
        if cfg.time_conditioning:
            lin("time.fc1", cfg.d_model, cfg.d_model)
            lin("time.fc2", cfg.d_model, cfg.d_model)
        if cfg.uses_context_encoder:
            lin("ctx.embed", cfg.patch_dim, cfg.d_model)
            for i in range(2):
                ln(f"ctx.{i}.ln1")
                attn_pass(f"ctx.{i}.attn", differential=False)
                ln(f"ctx.{i}.ln2")
                lin(f"ctx.{i}.mlp.fc1", cfg.d_model, cfg.mlp_ratio * cfg.d_model)
                lin(f"ctx.{i}.mlp.fc2", cfg.mlp_ratio * cfg.d_model, cfg.d_model)

        bs = cfg.d_model // cfg.n_blocks
        for i in range(cfg.depth):
            blk = f"blk{i}"
            if cfg.time_conditioning:
                n_mod = 9 if cfg.uses_context_encoder else 6
                lin(f"{blk}.adaln", cfg.d_model, n_mod * cfg.d_model, zero=True)
            else:
                ln(f"{blk}.ln1")
                if cfg.uses_context_encoder:
                    ln(f"{blk}.ln2")
                ln(f"{blk}.ln3")
            if cfg.uses_sfa:
                differential = cfg.variant != "plain_attention"
                attn_pass(f"{blk}.sfa.s", differential)
                attn_pass(f"{blk}.sfa.t", differential)
            if cfg.uses_fm:
                p[f"{blk}.fm.wre"] = tape.param(
                    (rng.standard_normal((cfg.n_blocks, bs, bs)) / np.sqrt(bs)).astype(dt))
                p[f"{blk}.fm.wim"] = tape.param(
                    (rng.standard_normal((cfg.n_blocks, bs, bs)) / np.sqrt(bs)).astype(dt))
                if cfg.uses_freq_weight:
                    p[f"{blk}.fm.alpha"] = tape.param(np.asarray(0.1, dtype=dt))
                    p[f"{blk}.fm.beta"] = tape.param(np.asarray(1.0, dtype=dt))
                    p[f"{blk}.fm.eta"] = tape.param(np.asarray(1.0, dtype=dt))
                lin(f"{blk}.fm.mlp.fc1", cfg.d_model, cfg.d_model)
                p[f"{blk}.fm.mlp.fc2.w"] = tape.param(
                    (rng.standard_normal((cfg.d_model, cfg.d_model)) / np.sqrt(cfg.d_model)).astype(dt))
                p[f"{blk}.fm.b"] = tape.param(np.zeros(cfg.d_model, dtype=dt))
            if cfg.uses_gate:
                lin(f"{blk}.gate", 2 * cfg.d_model, 1, zero=True)
            if cfg.uses_context_encoder:
                attn_pass(f"{blk}.cross", differential=False)
            lin(f"{blk}.mlp.fc1", cfg.d_model, cfg.mlp_ratio * cfg.d_model)
            lin(f"{blk}.mlp.fc2", cfg.mlp_ratio * cfg.d_model, cfg.d_model)
        lin("head", cfg.d_model, cfg.patch_dim, zero=True)
        return p

    def n_params(self) -> int:
        return sum(int(np.prod(t.shape)) for t in self.params.values())

    def randomize(self, seed: int, scale: float = 0.2) -> None:
        """Replace every parameter with small random values (gradient-check
        fixtures need the zero-initialized heads and gates to be live)."""
        rng = np.random.default_rng(seed)
        for name, t in self.params.items():
            t.data = (rng.standard_normal(t.shape) * scale).astype(t.data.dtype) \
                if t.ndim else np.asarray(rng.standard_normal() * scale, dtype=t.data.dtype)

    # -- building blocks --------------------------------------------------
    def _mlp(self, x: Tensor, name: str) -> Tensor:
        p = self.params
        h = tape.gelu(tape.add(tape.matmul(x, p[f"{name}.fc1.w"]), p[f"{name}.fc1.b"]))
        return tape.add(tape.matmul(h, p[f"{name}.fc2.w"]), p[f"{name}.fc2.b"])

    def _ln(self, x: Tensor, name: str | None) -> Tensor:
        x = tape.layer_norm(x)
        if name is not None:
            p = self.params
            x = tape.add(tape.mul(x, p[f"{name}.g"]), p[f"{name}.b"])
        return x

    def _split_heads(self, x: Tensor, seq: str = "token"):
        # (..., N, d) -> (..., heads, N, dh)
        h = self.config.heads
        dh = self.config.d_model // h
        lead = x.shape[:-2]
        n = x.shape[-2]
        x = tape.reshape(x, lead + (n, h, dh))
        axes = list(range(x.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return tape.transpose(x, axes)

    def _merge_heads(self, x: Tensor) -> Tensor:
        lead = x.shape[:-3]
        h, n, dh = x.shape[-3:]
        axes = list(range(x.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        return tape.reshape(tape.transpose(x, axes), lead + (n, h * dh))

    def _attention_pass(self, x: Tensor, name: str, kind: str, rotary=None) -> Tensor:
        """One multi-head attention pass over the last-but-one axis.

        kind: "sfa" (differential + centered background on the spatial pass),
        "diff" (differential, full attention), or "plain".
        """
        p = self.params
        q = self._split_heads(tape.matmul(x, p[f"{name}.wq"]))
        k = self._split_heads(tape.matmul(x, p[f"{name}.wk"]))
        v = self._split_heads(tape.matmul(x, p[f"{name}.wv"]))
        if kind == "plain":
            if rotary is not None:
                q, k = apply_rotary(q, *rotary), apply_rotary(k, *rotary)
            out = tape.matmul(attention_map(q, k), v)
        else:
            dh = self.config.d_model // self.config.heads
            half = dh // 2
            q1 = tape.tslice(q, (..., slice(0, half)))
            q2 = tape.tslice(q, (..., slice(half, dh)))
            k1 = tape.tslice(k, (..., slice(0, half)))
            k2 = tape.tslice(k, (..., slice(half, dh)))
            if rotary is not None:
                q1, k1 = apply_rotary(q1, *rotary), apply_rotary(k1, *rotary)
                q2, k2 = apply_rotary(q2, *rotary), apply_rotary(k2, *rotary)
            a1 = attention_map(q1, k1)
            if kind == "sfa":
                a2 = centered_neighborhood_weights(q2, k2, self.neighbor_index)
            else:
                a2 = attention_map(q2, k2)
            lam = tape.reshape(tape.sigmoid(p[f"{name}.lam"]), (self.config.heads, 1, 1))
            out = tape.matmul(tape.sub(a1, tape.mul(a2, lam)), v)
        return tape.matmul(self._merge_heads(out), p[f"{name}.wo"])

    def _sfa_branch(self, h: Tensor, blk: str) -> Tensor:
        """Factorized attention: spatial pass within frames, temporal across."""
        cfg = self.config
        dh = cfg.d_model // cfg.heads
        kind = "plain" if cfg.variant == "plain_attention" else "sfa"
        width = dh if kind == "plain" else dh // 2
        rot_s = self._rot(cfg.tokens_per_frame, width) if cfg.pos_kind == "rotary" else None
        y = self._attention_pass(h, f"{blk}.sfa.s", kind, rotary=rot_s)
        axes = list(range(y.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        yt = tape.transpose(y, axes)  # (B, P, F, d)
        kind_t = "plain" if cfg.variant == "plain_attention" else "diff"
        n_f = yt.shape[-2]
        rot_t = self._rot(n_f, width) if cfg.pos_kind == "rotary" else None
        zt = self._attention_pass(yt, f"{blk}.sfa.t", kind_t, rotary=rot_t)
        return tape.transpose(zt, axes)

    def _fm_branch(self, h: Tensor, blk: str) -> Tensor:
        cfg = self.config
        p = self.params
        b, n_f = h.shape[0], h.shape[1]
        grid = tape.reshape(h, (b, n_f, cfg.n_h, cfg.n_w, cfg.d_model))
        if cfg.uses_freq_weight:
            alpha, beta, eta = p[f"{blk}.fm.alpha"], p[f"{blk}.fm.beta"], p[f"{blk}.fm.eta"]
        else:
            alpha, beta, eta = 0.0, 1.0, 1.0
        weights = SpectralWeights(p[f"{blk}.fm.wre"], p[f"{blk}.fm.wim"], alpha=alpha,
                                  beta=beta, eta=eta, lambda_shrink=cfg.lambda_shrink,
                                  mode_cap=cfg.resolved_mode_cap())
        mlp = AfnoMlpParams(w1=p[f"{blk}.fm.mlp.fc1.w"], w2=p[f"{blk}.fm.mlp.fc2.w"],
                            b=p[f"{blk}.fm.b"])
        out = fm_branch(grid, weights, mlp)
        return tape.reshape(out, (b, n_f, cfg.tokens_per_frame, cfg.d_model))

    def _fuse(self, u_sfa, u_fm, blk: str):
        cfg = self.config
        if not cfg.uses_fm:
            return None, u_sfa
        if not cfg.uses_sfa:
            return None, u_fm
        if cfg.variant == "add_fusion":
            return None, tape.add(u_sfa, u_fm)
        return fuse_gate(u_sfa, u_fm, self.params[f"{blk}.gate.w"], self.params[f"{blk}.gate.b"])

    def _context_tokens(self, context: np.ndarray) -> Tensor:
        cfg = self.config
        p = self.params
        toks = patchify(np.asarray(context, dtype=cfg.np_dtype()), cfg)
        x = tape.add(tape.matmul(Tensor(toks), p["ctx.embed.w"]), p["ctx.embed.b"])
        x = tape.add(x, self.pos_ctx)
        b = x.shape[0]
        x = tape.reshape(x, (b, -1, cfg.d_model))
        for i in range(2):
            h = self._ln(x, f"ctx.{i}.ln1")
            x = tape.add(x, self._attention_pass(h, f"ctx.{i}.attn", "plain"))
            h = self._ln(x, f"ctx.{i}.ln2")
            x = tape.add(x, self._mlp(h, f"ctx.{i}.mlp"))
        return x

    def _time_cond(self, t: np.ndarray, batch: int) -> Tensor:
        cfg = self.config
        p = self.params
        if t is None:
            raise ValueError("time-conditioned forward needs t")
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (batch,))
        emb = time_embedding(t, cfg.d_model).astype(cfg.np_dtype())
        h = tape.silu(tape.add(tape.matmul(Tensor(emb), p["time.fc1.w"]), p["time.fc1.b"]))
        return tape.add(tape.matmul(h, p["time.fc2.w"]), p["time.fc2.b"])

    def _modulation(self, cond: Tensor, blk: str, n_mod: int):
        p = self.params
        raw = tape.add(tape.matmul(tape.silu(cond), p[f"{blk}.adaln.w"]), p[f"{blk}.adaln.b"])
        d = self.config.d_model
        b = raw.shape[0]
        parts = []
        for j in range(n_mod):
            part = tape.tslice(raw, (slice(None), slice(j * d, (j + 1) * d)))
            parts.append(tape.reshape(part, (b, 1, 1, d)))
        return parts

    # -- forward -----------------------------------------------------------
    def forward(self, xt, t=None, context=None):
        """Velocity prediction (or direct prediction in surrogate mode).

        xt: (B, frames, H, W, C) noisy window, or the context window itself in
        surrogate mode. Returns (output Tensor of the same shape, tap-layer
        token features (B, N, d_model)).
        """
        cfg = self.config
        p = self.params
        xt = np.asarray(xt, dtype=cfg.np_dtype())
        b, frames = xt.shape[0], xt.shape[1]
        toks = patchify(xt, cfg)
        x = tape.add(tape.matmul(Tensor(toks), p["embed.w"]), p["embed.b"])
        n_f = frames // cfg.patch_s
        pos = self.pos_main if n_f == cfg.n_f else positional_table(cfg, n_f).astype(cfg.np_dtype())
        x = tape.add(x, pos)

        cond = self._time_cond(t, b) if cfg.time_conditioning else None
        ctx_tokens = self._context_tokens(context) if cfg.uses_context_encoder else None

        tap_features = None
        for i in range(cfg.depth):
            blk = f"blk{i}"
            x = self._block(x, blk, cond, ctx_tokens)
            if i == cfg.tap():
                tap_features = tape.reshape(x, (b, -1, cfg.d_model))
        out = tape.layer_norm(x)
        out = tape.add(tape.matmul(out, p["head.w"]), p["head.b"])
        velocity = unpatchify_t(tape.reshape(out, (b, -1, cfg.patch_dim)), cfg, frames)
        return velocity, tap_features

    def _block(self, x: Tensor, blk: str, cond, ctx_tokens):
        cfg = self.config
        b = x.shape[0]
        with_cross = cfg.uses_context_encoder
        if cfg.time_conditioning:
            n_mod = 9 if with_cross else 6
            mods = self._modulation(cond, blk, n_mod)
            sh1, sc1, g1 = mods[0], mods[1], mods[2]
            if with_cross:
                sh2, sc2, g2 = mods[3], mods[4], mods[5]
                sh3, sc3, g3 = mods[6], mods[7], mods[8]
            else:
                sh3, sc3, g3 = mods[3], mods[4], mods[5]
            h = modulate(self._ln(x, None), sh1, sc1)
        else:
            g1 = g3 = None
            h = self._ln(x, f"{blk}.ln1")

        u_sfa = self._sfa_branch(h, blk) if cfg.uses_sfa else None
        u_fm = self._fm_branch(h, blk) if cfg.uses_fm else None
        _, fused = self._fuse(u_sfa, u_fm, blk)
        x = tape.add(x, tape.mul(g1, fused) if g1 is not None else fused)

        if with_cross:
            if cfg.time_conditioning:
                h2 = modulate(self._ln(x, None), sh2, sc2)
            else:
                h2 = self._ln(x, f"{blk}.ln2")
            flat = tape.reshape(h2, (b, -1, cfg.d_model))
            cross = cross_attention_core(flat, ctx_tokens, self.params[f"{blk}.cross.wq"],
                                         self.params[f"{blk}.cross.wk"],
                                         self.params[f"{blk}.cross.wv"],
                                         self.params[f"{blk}.cross.wo"], cfg.heads)
            cross = tape.reshape(cross, x.shape)
            if cfg.time_conditioning:
                x = tape.add(x, tape.mul(g2, cross))
            else:
                x = tape.add(x, cross)

        if cfg.time_conditioning:
            h3 = modulate(self._ln(x, None), sh3, sc3)
        else:
            h3 = self._ln(x, f"{blk}.ln3")
        mlp_out = self._mlp(h3, f"{blk}.mlp")
        return tape.add(x, tape.mul(g3, mlp_out) if g3 is not None else mlp_out)

    # -- numpy conveniences --------------------------------------------------
    def predict(self, xt, t=None, context=None) -> np.ndarray:
        with tape.no_grad():
            v, _ = self.forward(xt, t, context)
        return v.data

    def velocity_fn(self, context):
        """Sampler-facing closure v(x, t) conditioned on a fixed context."""

        def v(x, t, _cond=None):
            return self.predict(x, np.full(x.shape[0], t), context)

        return v


# ---------------------------------------------------------------------------
# parameter container / checkpoints
# ---------------------------------------------------------------------------

_PREFIX = struct.Struct("<Q")
_TAGS = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


class ParamStoreError(ValueError):
    pass


class ParamStore:
    """Insertion-ordered name -> array map with a byte-exact container format."""

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def set(self, name: str, array: np.ndarray) -> None:
        self._arrays[name] = np.ascontiguousarray(array)

    def get(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def items(self):
        return self._arrays.items()

    def names(self):
        return list(self._arrays.keys())

    def __len__(self):
        return len(self._arrays)

    @classmethod
    def from_params(cls, params: dict[str, Tensor]) -> "ParamStore":
        store = cls()
        for name, t in params.items():
            store.set(name, t.data)
        return store

    def to_bytes(self, meta: dict | None = None) -> bytes:
        manifest = {"format": "paramstore", "version": 1, "meta": meta or {}, "tensors": []}
        payload = bytearray()
        for name, arr in self._arrays.items():
            if arr.dtype == np.float32:
                tag = "f32le"
            elif arr.dtype == np.float64:
                tag = "f64le"
            else:
                raise ParamStoreError(f"unsupported dtype {arr.dtype} for {name!r}")
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "dtype": tag})
            payload.extend(arr.astype(_TAGS[tag], copy=False).tobytes())
        raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return _PREFIX.pack(len(raw)) + raw + bytes(payload)

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple["ParamStore", dict]:
        if len(blob) < _PREFIX.size:
            raise ParamStoreError("container shorter than its length prefix")
        (n,) = _PREFIX.unpack_from(blob, 0)
        try:
            manifest = json.loads(blob[_PREFIX.size : _PREFIX.size + n].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ParamStoreError(f"bad manifest: {e}") from e
        store = cls()
        offset = _PREFIX.size + n
        for entry in manifest["tensors"]:
            dt = _TAGS[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            nbytes = count * dt.itemsize
            chunk = blob[offset : offset + nbytes]
            if len(chunk) < nbytes:
                raise ParamStoreError(f"payload truncated at tensor {entry['name']!r}")
            store.set(entry["name"], np.frombuffer(chunk, dtype=dt).reshape(entry["shape"]).copy())
            offset += nbytes
        if offset != len(blob):
            raise ParamStoreError(f"{len(blob) - offset} trailing bytes in container")
        return store, manifest.get("meta", {})

    def save(self, path, meta: dict | None = None) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes(meta))

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def save_checkpoint(model: VelocityBackbone, path, extra_meta: dict | None = None) -> None:
    from dataclasses import asdict

    meta = {"config": asdict(model.config)}
    if extra_meta:
        meta.update(extra_meta)
    ParamStore.from_params(model.params).save(path, meta)


def load_checkpoint(path) -> tuple[VelocityBackbone, dict]:
    store, meta = ParamStore.load(path)
    config = BackboneConfig(**meta["config"])
    params = {name: tape.param(arr) for name, arr in store.items()}
    return VelocityBackbone(config, params=params), meta
