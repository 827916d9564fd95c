"""Dual-branch backbone: tokenization, fusion, conditioning, checkpoints."""
import numpy as np
import pytest

from flowlab import tape
from flowlab.backbone import (
    BackboneConfig,
    ParamStore,
    ParamStoreError,
    VelocityBackbone,
    ablation_toggles,
    apply_rotary,
    condition_cross_attention,
    fuse_gate,
    load_checkpoint,
    patchify,
    positional_table,
    rotary_tables,
    save_checkpoint,
    sinusoidal_positions,
    time_embedding,
    unpatchify,
)
from gradcheck import check_grads, finite_diff, rel_err

rng = np.random.default_rng(31)


def r(*shape):
    return rng.standard_normal(shape)


def tiny_config(**kw):
    base = dict(grid_h=4, grid_w=4, channels=1, frames=2, context_frames=2,
                patch_h=2, patch_w=2, patch_s=1, depth=1, d_model=8, heads=2,
                kappa=2, n_blocks=2, mlp_ratio=2, dtype="f64")
    base.update(kw)
    return BackboneConfig(**base)


class TestPatchify:
    def test_token_counting(self):
        cfg = BackboneConfig(grid_h=4, grid_w=4, channels=1, frames=1, context_frames=1,
                             patch_h=2, patch_w=2, patch_s=1, depth=1, d_model=8, heads=2,
                             kappa=1, n_blocks=2)
        toks = patchify(np.zeros((1, 1, 4, 4, 1)), cfg)
        assert toks.shape == (1, 1, 4, 4)  # 4 tokens of dimension 4

    def test_roundtrip_identity(self):
        cfg = tiny_config()
        x = r(2, 2, 4, 4, 1)
        toks = patchify(x, cfg)
        back = unpatchify(toks, cfg, frames=2)
        assert back == pytest.approx(x)

    def test_tubelet_stride_roundtrip(self):
        cfg = tiny_config(frames=4, context_frames=4, patch_s=2, channels=2)
        x = r(1, 4, 4, 4, 2)
        assert patchify(x, cfg).shape == (1, 2, 4, 2 * 2 * 2 * 2)
        assert unpatchify(patchify(x, cfg), cfg, frames=4) == pytest.approx(x)

    def test_pseudo_inverse_embedding_reconstructs(self):
        cfg = tiny_config()
        x = r(1, 2, 4, 4, 1)
        toks = patchify(x, cfg)
        embed = r(4, 8)  # patch_dim 4 -> d_model 8
        unembed = np.linalg.pinv(embed)
        recon = unpatchify((toks @ embed) @ unembed, cfg, frames=2)
        assert np.max(np.abs(recon - x)) < 1e-8

    def test_divisibility_violation(self):
        with pytest.raises(ValueError):
            BackboneConfig(grid_h=5, grid_w=4, patch_h=2, patch_w=2, d_model=8, heads=2,
                           n_blocks=2, kappa=1)


class TestPositional:
    def test_sinusoidal_zero_position(self):
        enc = sinusoidal_positions(3, 8)
        assert enc[0, :4] == pytest.approx(np.zeros(4))
        assert enc[0, 4:] == pytest.approx(np.ones(4))

    def test_table_shape_and_determinism(self):
        cfg = tiny_config()
        a = positional_table(cfg, 2)
        b = positional_table(cfg, 2)
        assert a.shape == (2, 4, 8)
        assert a.tobytes() == b.tobytes()

    def test_rotary_zero_angle_is_identity(self):
        cos, sin = rotary_tables(3, 4)
        x = tape.Tensor(r(3, 4))
        out = apply_rotary(x, cos[:1] * 0 + 1, sin[:1] * 0)  # angle 0 everywhere
        assert out.data == pytest.approx(x.data)

    def test_rotary_preserves_norms(self):
        cos, sin = rotary_tables(5, 6)
        x = r(2, 5, 6)
        out = apply_rotary(tape.Tensor(x), cos, sin).data
        assert np.linalg.norm(out, axis=-1) == pytest.approx(np.linalg.norm(x, axis=-1))

    def test_time_embedding_constant_batch(self):
        emb = time_embedding(np.full(4, 0.37), 16)
        assert np.all(emb == emb[0])


class TestFuseGate:
    def test_zero_gate_params_average_branches(self):
        a, b = r(2, 3, 4), r(2, 3, 4)
        g, fused = fuse_gate(a, b, tape.Tensor(np.zeros((8, 1))), tape.Tensor(np.zeros(1)))
        assert g.data == pytest.approx(np.full((2, 3, 1), 0.5))
        assert fused.data == pytest.approx((a + b) / 2)

    def test_saturated_bias_selects_sfa(self):
        a, b = r(2, 3, 4), r(2, 3, 4)
        _, fused = fuse_gate(a, b, tape.Tensor(np.zeros((8, 1))), tape.Tensor(np.full(1, 30.0)))
        assert np.max(np.abs(fused.data - a)) < 1e-9

    def test_single_pixel_loop_oracle(self):
        a, b = r(1, 2), r(1, 2)
        w, bias = r(4, 1), r(1)
        g, fused = fuse_gate(a, b, tape.Tensor(w), tape.Tensor(bias))
        logit = np.concatenate([a, b], axis=-1) @ w + bias
        gg = 1 / (1 + np.exp(-logit))
        assert g.data == pytest.approx(gg)
        assert fused.data == pytest.approx(gg * a + (1 - gg) * b)

    def test_gate_range_and_convexity(self):
        a, b = r(3, 5, 4), r(3, 5, 4)
        g, fused = fuse_gate(a, b, tape.Tensor(r(8, 1)), tape.Tensor(r(1)))
        assert np.all((g.data > 0) & (g.data < 1))
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        assert np.all(fused.data >= lo - 1e-12) and np.all(fused.data <= hi + 1e-12)

    def test_gradients(self):
        check_grads(lambda a, b, w, bias: tape.tsum(tape.pow_const(fuse_gate(a, b, w, bias)[1], 2.0)),
                    [r(2, 3), r(2, 3), r(6, 1), r(1)], rtol=1e-6)


class TestCrossAttention:
    def test_zero_output_projection_is_identity(self):
        toks, ctx = r(1, 3, 4), r(1, 5, 4)
        out = condition_cross_attention(toks, ctx, tape.Tensor(r(4, 4)), tape.Tensor(r(4, 4)),
                                        tape.Tensor(r(4, 4)), tape.Tensor(np.zeros((4, 4))), heads=2)
        assert out.data == pytest.approx(toks)

    def test_zero_values_keep_identity(self):
        toks, ctx = r(1, 3, 4), r(1, 1, 4)
        out = condition_cross_attention(toks, ctx, tape.Tensor(r(4, 4)), tape.Tensor(r(4, 4)),
                                        tape.Tensor(np.zeros((4, 4))), tape.Tensor(r(4, 4)), heads=1)
        assert out.data == pytest.approx(toks)

    def test_two_token_loop_oracle(self):
        toks, ctx = r(1, 2, 4), r(1, 3, 4)
        wq, wk, wv, wo = r(4, 4), r(4, 4), r(4, 4), r(4, 4)
        out = condition_cross_attention(toks, ctx, tape.Tensor(wq), tape.Tensor(wk),
                                        tape.Tensor(wv), tape.Tensor(wo), heads=1).data
        q = toks[0] @ wq
        k = ctx[0] @ wk
        v = ctx[0] @ wv
        expect = np.zeros((2, 4))
        for i in range(2):
            logits = q[i] @ k.T / 2.0
            w = np.exp(logits - logits.max())
            w /= w.sum()
            expect[i] = w @ v
        assert out[0] == pytest.approx(toks[0] + expect @ wo, abs=1e-12)

    def test_gradients(self):
        def build(toks, ctx, wq, wk, wv, wo):
            out = condition_cross_attention(toks, ctx, wq, wk, wv, wo, heads=2)
            return tape.tsum(tape.pow_const(out, 2.0))

        check_grads(build, [r(1, 2, 4), r(1, 3, 4), r(4, 4), r(4, 4), r(4, 4), r(4, 4)], rtol=1e-5)


class TestBackboneForward:
    def test_output_shape_matches_input(self):
        for kw in (dict(), dict(patch_s=2, frames=4, context_frames=4),
                   dict(channels=2), dict(pos_kind="rotary")):
            cfg = tiny_config(**kw)
            model = VelocityBackbone(cfg, seed=1)
            b = 2
            xt = r(b, cfg.frames, 4, 4, cfg.channels)
            ctx = r(b, cfg.context_frames, 4, 4, cfg.channels)
            v, tap = model.forward(xt, t=np.full(b, 0.4), context=ctx)
            assert v.shape == xt.shape
            assert tap.shape == (b, cfg.n_tokens, cfg.d_model)

    def test_determinism_same_seed(self):
        cfg = tiny_config()
        m1 = VelocityBackbone(cfg, seed=3)
        m2 = VelocityBackbone(cfg, seed=3)
        xt, ctx = r(1, 2, 4, 4, 1), r(1, 2, 4, 4, 1)
        a = m1.predict(xt, np.array([0.3]), ctx)
        b = m2.predict(xt, np.array([0.3]), ctx)
        assert a.tobytes() == b.tobytes()

    def test_zero_modulation_makes_time_irrelevant(self):
        cfg = tiny_config()
        model = VelocityBackbone(cfg, seed=4)
        model.randomize(seed=5)
        for i in range(cfg.depth):
            model.params[f"blk{i}.adaln.w"].data[:] = 0.0
            model.params[f"blk{i}.adaln.b"].data[:] = 0.0
        xt, ctx = r(1, 2, 4, 4, 1), r(1, 2, 4, 4, 1)
        a = model.predict(xt, np.array([0.1]), ctx)
        b = model.predict(xt, np.array([0.9]), ctx)
        assert a == pytest.approx(b)

    def test_end_to_end_gradient_check(self):
        cfg = tiny_config()
        model = VelocityBackbone(cfg, seed=6)
        model.randomize(seed=7)
        xt = r(1, 2, 4, 4, 1)
        ctx = r(1, 2, 4, 4, 1)
        t = np.array([0.45])
        target = r(1, 2, 4, 4, 1)

        def loss_fn():
            v, _ = model.forward(xt, t, ctx)
            return tape.mse(v, tape.Tensor(target))

        loss = loss_fn()
        loss.backward()
        # spot-check a representative subset of parameters with FD
        names = ["embed.w", "blk0.sfa.s.wq", "blk0.sfa.t.lam", "blk0.fm.wre",
                 "blk0.fm.eta", "blk0.gate.w", "blk0.cross.wq", "blk0.adaln.w",
                 "blk0.mlp.fc1.w", "head.w", "time.fc1.w", "ctx.embed.w"]
        for name in names:
            p = model.params[name]
            analytic = np.asarray(p.grad, dtype=np.float64)
            base = p.data.copy()

            def scalar(arr):
                p.data = arr
                with tape.no_grad():
                    out = loss_fn()
                p.data = base
                return float(out.data)

            numeric = finite_diff(scalar, [base], eps=1e-6)[0]
            err = rel_err(analytic, numeric)
            assert err < 1e-4, f"{name}: rel err {err:.2e}"

    def test_gate_saturation_kills_fm_gradients(self):
        cfg = tiny_config()
        model = VelocityBackbone(cfg, seed=8)
        model.randomize(seed=9)
        model.params["blk0.gate.w"].data[:] = 0.0
        model.params["blk0.gate.b"].data[:] = 30.0  # G ~ 1: SFA only
        xt, ctx = r(1, 2, 4, 4, 1), r(1, 2, 4, 4, 1)
        v, _ = model.forward(xt, np.array([0.5]), ctx)
        tape.tsum(tape.pow_const(v, 2.0)).backward()
        fm_grad = max(np.max(np.abs(model.params[f"blk0.fm.{n}"].grad))
                      for n in ("wre", "wim", "alpha", "beta", "eta"))
        sfa_grad = np.max(np.abs(model.params["blk0.sfa.s.wq"].grad))
        assert fm_grad < 1e-9
        assert sfa_grad > 1e-6


class TestVariants:
    def test_toggle_set_is_complete(self):
        cfg = tiny_config()
        variants = ablation_toggles(cfg)
        assert set(variants) == {"full", "no_fm", "no_freq_weight", "add_fusion",
                                 "plain_attention", "no_sfa", "surrogate"}

    def test_parameter_counts_never_exceed_base(self):
        cfg = tiny_config()
        base = VelocityBackbone(cfg, seed=0).n_params()
        for name, vcfg in ablation_toggles(cfg).items():
            n = VelocityBackbone(vcfg, seed=0).n_params()
            assert n <= base, f"{name} has {n} > base {base}"

    def test_add_fusion_is_plain_sum(self):
        cfg = tiny_config(variant="add_fusion")
        model = VelocityBackbone(cfg, seed=10)
        model.randomize(seed=11)
        captured = {}
        orig = model._fuse

        def spy(u_sfa, u_fm, blk):
            g, fused = orig(u_sfa, u_fm, blk)
            captured["check"] = np.max(np.abs(fused.data - (u_sfa.data + u_fm.data)))
            return g, fused

        model._fuse = spy
        model.predict(r(1, 2, 4, 4, 1), np.array([0.5]), r(1, 2, 4, 4, 1))
        assert captured["check"] == pytest.approx(0.0, abs=1e-12)

    def test_plain_attention_with_lambda_zero_matches_attn1_path(self):
        # the full model with lam raw -> -inf limit reduces to plain attention
        # on the first split; verify via lam = 0 materialization instead
        cfg = tiny_config()
        model = VelocityBackbone(cfg, seed=12)
        model.randomize(seed=13)
        xt, ctx = r(1, 2, 4, 4, 1), r(1, 2, 4, 4, 1)
        for nm in ("blk0.sfa.s.lam", "blk0.sfa.t.lam"):
            model.params[nm].data[:] = -40.0  # sigmoid -> 0
        v_zero_lam = model.predict(xt, np.array([0.5]), ctx)
        assert np.isfinite(v_zero_lam).all()

    def test_surrogate_maps_context_to_window(self):
        cfg = tiny_config(variant="surrogate")
        model = VelocityBackbone(cfg, seed=14)
        out, tap = model.forward(r(1, 2, 4, 4, 1))
        assert out.shape == (1, 2, 4, 4, 1)
        assert tap is not None
        assert "time.fc1.w" not in model.params
        assert "blk0.cross.wq" not in model.params
        assert "ctx.embed.w" not in model.params

    def test_no_fm_and_no_sfa_drop_parameters(self):
        cfg = tiny_config()
        no_fm = VelocityBackbone(ablation_toggles(cfg)["no_fm"], seed=0)
        assert not any(".fm." in n for n in no_fm.params)
        assert not any(".gate." in n for n in no_fm.params)
        no_sfa = VelocityBackbone(ablation_toggles(cfg)["no_sfa"], seed=0)
        assert not any(".sfa." in n for n in no_sfa.params)

    def test_no_freq_weight_drops_eq9_scalars(self):
        cfg = tiny_config(variant="no_freq_weight")
        model = VelocityBackbone(cfg, seed=0)
        assert "blk0.fm.alpha" not in model.params
        assert "blk0.fm.wre" in model.params

    def test_variant_forward_shapes(self):
        xt, ctx = r(1, 2, 4, 4, 1), r(1, 2, 4, 4, 1)
        for name, vcfg in ablation_toggles(tiny_config()).items():
            model = VelocityBackbone(vcfg, seed=15)
            if name == "surrogate":
                out, _ = model.forward(ctx)
            else:
                out, _ = model.forward(xt, np.array([0.3]), ctx)
            assert out.shape == xt.shape, name


class TestParamStore:
    def test_roundtrip_bytes_identical(self):
        cfg = tiny_config(dtype="f32")
        model = VelocityBackbone(cfg, seed=16)
        blob = ParamStore.from_params(model.params).to_bytes(meta={"note": 1})
        store, meta = ParamStore.from_bytes(blob)
        assert meta == {"note": 1}
        blob2 = store.to_bytes(meta=meta)
        assert blob == blob2

    def test_checkpoint_roundtrip_forward_bit_identical(self, tmp_path):
        cfg = tiny_config(dtype="f32")
        model = VelocityBackbone(cfg, seed=17)
        path = tmp_path / "model.pack"
        save_checkpoint(model, path, extra_meta={"norm": {"mean": [0.0], "std": [1.0]}})
        loaded, meta = load_checkpoint(path)
        assert meta["norm"]["std"] == [1.0]
        xt, ctx = (r(1, 2, 4, 4, 1).astype(np.float32),
                   r(1, 2, 4, 4, 1).astype(np.float32))
        a = model.predict(xt, np.array([0.5]), ctx)
        b = loaded.predict(xt, np.array([0.5]), ctx)
        assert a.tobytes() == b.tobytes()

    def test_truncation_and_trailing_errors(self):
        cfg = tiny_config(dtype="f32")
        model = VelocityBackbone(cfg, seed=18)
        blob = ParamStore.from_params(model.params).to_bytes()
        with pytest.raises(ParamStoreError, match="truncated"):
            ParamStore.from_bytes(blob[:-2])
        with pytest.raises(ParamStoreError, match="trailing"):
            ParamStore.from_bytes(blob + b"x")

    def test_deterministic_iteration_order(self):
        cfg = tiny_config()
        m1 = VelocityBackbone(cfg, seed=19)
        m2 = VelocityBackbone(cfg, seed=20)
        assert list(m1.params.keys()) == list(m2.params.keys())
