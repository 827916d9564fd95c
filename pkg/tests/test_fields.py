"""Field containers, radial spectra, metrics, and the FieldPack format."""
import numpy as np
import pytest

from flowlab.fields import (
    DtypeMismatchError,
    FieldSeries,
    MalformedHeaderError,
    TruncatedPayloadError,
    compute_metrics,
    fieldpack_read,
    fieldpack_write,
    radial_bin_counts,
    radial_energy_spectrum,
    residual_spectrum,
    spectrum_k_max,
    write_metrics_csv,
    write_spectrum_csv,
)


def brute_force_radial_spectrum(field):
    """O(H^2 W^2) DFT + binning oracle, independent of numpy's FFT."""
    h, w = field.shape
    k_max = spectrum_k_max(h, w)
    energy = np.zeros(k_max + 1)
    for uu in range(h):
        for vv in range(w):
            coef = 0.0 + 0.0j
            for x in range(h):
                for y in range(w):
                    coef += field[x, y] * np.exp(-2j * np.pi * (uu * x / h + vv * y / w))
            # express the frequency pair relative to the centered origin
            cu = uu - h if uu >= (h + 1) // 2 else uu
            cv = vv - w if vv >= (w + 1) // 2 else vv
            k = int(np.floor(np.hypot(cu, cv)))
            energy[k] += np.abs(coef) ** 2
    return energy


def series(values, **kw):
    return FieldSeries(np.asarray(values, dtype=np.float64), **kw)


class TestRadialSpectrum:
    def test_constant_field_all_energy_in_dc(self):
        prof = radial_energy_spectrum(np.full((8, 8), 3.0))
        assert prof.energy[0] == pytest.approx((3.0 * 64) ** 2)
        assert np.all(prof.energy[1:] == 0.0)

    def test_single_cosine_mode_lands_in_bin_3(self):
        w = 32
        x = np.arange(w)
        field = np.tile(np.cos(2 * np.pi * 3 * x / w), (32, 1))
        prof = radial_energy_spectrum(field)
        # two conjugate modes of magnitude HW/2 each
        assert prof.energy[3] == pytest.approx(2 * (32 * 32 / 2) ** 2, rel=1e-10)
        others = np.delete(prof.energy, 3)
        assert np.max(others) <= 1e-10 * prof.energy[3]

    def test_matches_brute_force_dft_oracle(self):
        rng = np.random.default_rng(0)
        field = rng.standard_normal((4, 4))
        expect = brute_force_radial_spectrum(field)
        got = radial_energy_spectrum(field).energy
        assert got == pytest.approx(expect, rel=1e-10)

    def test_parseval_partition(self):
        rng = np.random.default_rng(1)
        for h, w in [(8, 8), (6, 10), (5, 7)]:
            field = rng.standard_normal((h, w))
            prof = radial_energy_spectrum(field)
            total = np.sum(np.abs(np.fft.fft2(field)) ** 2)
            assert prof.energy.sum() == pytest.approx(total, rel=1e-12)
            assert radial_bin_counts(h, w).sum() == h * w

    def test_rejects_non_finite(self):
        bad = np.zeros((4, 4))
        bad[1, 2] = np.nan
        with pytest.raises(ValueError, match="NaN"):
            radial_energy_spectrum(bad)

    def test_log_energy_floor(self):
        prof = radial_energy_spectrum(np.full((8, 8), 1.0))
        assert np.isfinite(prof.log_energy).all()


class TestResidualSpectrum:
    def test_perfect_prediction_is_all_zero(self):
        rng = np.random.default_rng(2)
        truth = series(rng.standard_normal((2, 3, 8, 8, 2)))
        stack = residual_spectrum(truth, truth)
        assert np.all(stack.energy == 0.0)

    def test_constant_offset_goes_to_dc(self):
        rng = np.random.default_rng(3)
        t = rng.standard_normal((1, 1, 8, 8, 1))
        c = 0.7
        stack = residual_spectrum(series(t + c), series(t))
        prof = stack.profile(0, 0, 0)
        assert prof.energy[0] == pytest.approx((c * 64) ** 2, rel=1e-10)
        assert np.max(prof.energy[1:]) <= 1e-18 * prof.energy[0]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        p = rng.standard_normal((1, 1, 4, 4, 1))
        t = rng.standard_normal((1, 1, 4, 4, 1))
        stack = residual_spectrum(series(p), series(t))
        expect = brute_force_radial_spectrum(p[0, 0, :, :, 0] - t[0, 0, :, :, 0])
        assert stack.energy[0, 0, 0] == pytest.approx(expect, rel=1e-10)

    def test_shape_mismatch_rejected(self):
        a = series(np.zeros((1, 1, 4, 4, 1)))
        b = series(np.zeros((1, 1, 4, 6, 1)))
        with pytest.raises(ValueError, match="mismatch"):
            residual_spectrum(a, b)


class TestMetrics:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(5)
        t = series(rng.standard_normal((2, 2, 4, 4, 2)))
        rep = compute_metrics(t, t)
        assert rep.mse == 0.0 and rep.nrmse == 0.0 and rep.max_err == 0.0

    def test_analytic_offset_case(self):
        t = series(np.full((3, 2, 4, 4, 2), 2.0))
        p = series(np.full((3, 2, 4, 4, 2), 3.0))
        rep = compute_metrics(p, t)
        assert rep.mse == pytest.approx(1.0)
        assert rep.max_err == pytest.approx(1.0)
        assert rep.nrmse == pytest.approx(0.5)

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(6)
        p = rng.standard_normal((2, 1, 2, 2, 1))
        t = rng.standard_normal((2, 1, 2, 2, 1))
        rep = compute_metrics(series(p), series(t))
        # naive scalar loops
        sq, mx = 0.0, 0.0
        for idx in np.ndindex(*p.shape):
            d = p[idx] - t[idx]
            sq += d * d
            mx = max(mx, abs(d))
        n = p.size
        nr = 0.0
        for b in range(2):
            rn = np.sqrt(sum((p[b].flat[i] - t[b].flat[i]) ** 2 for i in range(p[b].size)))
            tn = np.sqrt(sum(t[b].flat[i] ** 2 for i in range(t[b].size)))
            nr += rn / tn
        assert rep.mse == pytest.approx(sq / n, rel=1e-12)
        assert rep.max_err == pytest.approx(mx, rel=1e-12)
        assert rep.nrmse == pytest.approx(nr / 2, rel=1e-12)

    def test_zero_norm_truth_warns_nan(self):
        t = series(np.zeros((1, 1, 4, 4, 1)))
        p = series(np.ones((1, 1, 4, 4, 1)))
        with pytest.warns(UserWarning, match="zero-norm"):
            rep = compute_metrics(p, t)
        assert np.isnan(rep.nrmse)
        assert rep.mse == pytest.approx(1.0)

    def test_residual_scaling_law(self):
        rng = np.random.default_rng(7)
        t = rng.standard_normal((2, 1, 4, 4, 1))
        r = rng.standard_normal((2, 1, 4, 4, 1))
        for c in (2.0, 5.0):
            r1 = compute_metrics(series(t + r), series(t))
            rc = compute_metrics(series(t + c * r), series(t))
            assert rc.mse == pytest.approx(c * c * r1.mse, rel=1e-12)
            assert rc.max_err == pytest.approx(c * r1.max_err, rel=1e-12)
            assert rc.nrmse == pytest.approx(c * r1.nrmse, rel=1e-12)

    def test_per_channel_breakdown(self):
        rng = np.random.default_rng(8)
        t = rng.standard_normal((1, 1, 4, 4, 2))
        p = t.copy()
        p[..., 1] += 1.0  # corrupt only channel 1
        rep = compute_metrics(series(p, channels=("u", "v")), series(t, channels=("u", "v")))
        assert rep.per_channel["u"]["mse"] == 0.0
        assert rep.per_channel["v"]["mse"] == pytest.approx(1.0)


class TestFieldSeriesInvariants:
    def test_rejects_nan(self):
        v = np.zeros((1, 1, 4, 4, 1))
        v[0, 0, 0, 0, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            FieldSeries(v)

    def test_rejects_small_grid(self):
        with pytest.raises(ValueError, match="shape"):
            FieldSeries(np.zeros((1, 1, 1, 4, 1)))


class TestFieldPack:
    def roundtrip(self, tmp_path, values, **kw):
        path = tmp_path / "x.fieldpack"
        s = FieldSeries(values, **kw)
        fieldpack_write(s, path)
        return path, s, fieldpack_read(path)

    def test_bit_identical_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        v = rng.standard_normal((2, 3, 4, 4, 2)).astype(np.float32)
        path, s, back = self.roundtrip(tmp_path, v, dx=0.5, dy=0.25, dt=0.1, channels=("u_x", "u_y"))
        assert back.values.tobytes() == s.values.tobytes()
        assert (back.dx, back.dy, back.dt) == (0.5, 0.25, 0.1)
        assert back.channels == ("u_x", "u_y")
        # writing the read-back series reproduces the file byte for byte
        path2 = tmp_path / "y.fieldpack"
        fieldpack_write(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_payload_size_arithmetic(self, tmp_path):
        v = np.zeros((2, 3, 4, 4, 2), dtype=np.float32)
        path, _, _ = self.roundtrip(tmp_path, v)
        blob = path.read_bytes()
        n = int.from_bytes(blob[:8], "little")
        assert len(blob) - 8 - n == 4 * 2 * 3 * 4 * 4 * 2  # 768 bytes

    def test_truncated_payload_error(self, tmp_path):
        v = np.zeros((1, 1, 4, 4, 1), dtype=np.float32)
        path, _, _ = self.roundtrip(tmp_path, v)
        blob = path.read_bytes()
        path.write_bytes(blob[:-1])
        with pytest.raises(TruncatedPayloadError):
            fieldpack_read(path)

    def test_malformed_header_error(self, tmp_path):
        path = tmp_path / "bad.fieldpack"
        path.write_bytes((12).to_bytes(8, "little") + b"not-json-at-")
        with pytest.raises(MalformedHeaderError):
            fieldpack_read(path)

    def test_dtype_mismatch_error(self, tmp_path):
        v = np.zeros((1, 1, 4, 4, 1), dtype=np.float32)
        path, _, _ = self.roundtrip(tmp_path, v)
        blob = path.read_bytes()
        n = int.from_bytes(blob[:8], "little")
        import json

        header = json.loads(blob[8 : 8 + n])
        header["dtype"] = "f64le"
        raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path.write_bytes(len(raw).to_bytes(8, "little") + raw + blob[8 + n :])
        with pytest.raises(DtypeMismatchError):
            fieldpack_read(path)

    def test_write_rejects_float64(self, tmp_path):
        s = FieldSeries(np.zeros((1, 1, 4, 4, 1)))
        with pytest.raises(DtypeMismatchError):
            fieldpack_write(s, tmp_path / "z.fieldpack")


def test_csv_exports(tmp_path):
    prof = radial_energy_spectrum(np.full((8, 8), 1.0))
    write_spectrum_csv(prof, tmp_path / "spec.csv", tag="demo")
    lines = (tmp_path / "spec.csv").read_text().strip().split("\n")
    assert lines[0] == "wavenumber,energy,log_energy,tag"
    assert len(lines) == prof.energy.shape[0] + 1

    t = series(np.full((1, 1, 4, 4, 1), 2.0))
    p = series(np.full((1, 1, 4, 4, 1), 3.0))
    write_metrics_csv(compute_metrics(p, t), tmp_path / "m.csv")
    assert "all,1," in (tmp_path / "m.csv").read_text()
