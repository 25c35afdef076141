import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from bcpvad import net, quant


@pytest.fixture(scope="module")
def calib_streams():
    rng = np.random.default_rng(21)
    return [rng.standard_normal((80, 32)) * 2 - 5 for _ in range(3)]


@pytest.fixture(scope="module")
def qmodel(small_params, calib_streams):
    stats = quant.calibrate(small_params, calib_streams)
    return quant.quantize_net(small_params, stats)


class TestPrimitives:
    @given(st.integers(0, 2**32 - 1), st.sampled_from([8, 16]))
    @settings(max_examples=40, deadline=None)
    def test_symmetric_error_bound(self, seed, bits):
        w = np.random.default_rng(seed).normal(0, 0.3, 50)
        t = quant.quantize_symmetric(w, bits)
        assert np.abs(t.values).max() <= (1 << (bits - 1)) - 1
        assert np.max(np.abs(t.dequantize() - w)) <= t.scale / 2 + 1e-15

    def test_zero_tensor(self):
        t = quant.quantize_symmetric(np.zeros(4))
        assert_array_equal(t.values, 0)
        assert t.scale == 1.0

    def test_affine_includes_zero(self):
        s, zp = quant.affine_params(0.5, 2.0)
        assert s == pytest.approx(2.0 / 255)
        assert zp == -128
        s, zp = quant.affine_params(-1.0, 1.0)
        assert quant.quantize_affine(0.0, s, zp) - zp == 0

    def test_degenerate_range_warns(self):
        with pytest.warns(quant.DegenerateCalibrationWarning):
            s, _ = quant.affine_params(0.0, 0.0, name="conv1")
        assert s == 1e-8

    @given(st.floats(1e-6, 10.0))
    @settings(max_examples=100, deadline=None)
    def test_fixed_multiplier(self, m):
        m0, shift = quant.fixed_multiplier(m)
        assert (1 << 30) <= m0 < (1 << 31)
        assert m0 * 2.0 ** -shift == pytest.approx(m, rel=2 ** -30)

    @given(st.integers(-(2**24), 2**24), st.floats(1e-4, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_requantize_rounds(self, acc, m):
        mult = quant.fixed_multiplier(m)
        exact = acc * mult[0] / 2.0 ** mult[1]
        ref = np.sign(exact) * np.floor(abs(exact) + 0.5)
        assert int(quant.requantize(np.array([acc]), mult)[0]) == ref

    def test_requantize_ties_away(self):
        half = (1 << 30, 31)                     # exactly 0.5
        assert_array_equal(quant.requantize(np.array([3, -3, 1, -1]), half), [2, -2, 1, -1])


class TestCalibration:
    def test_too_few_frames(self, small_params):
        with pytest.raises(quant.CalibrationError):
            quant.calibrate(small_params, [np.zeros((99, 32))])
        with pytest.raises(quant.CalibrationError):
            quant.calibrate(small_params, [])

    def test_ranges(self, small_params, calib_streams):
        stats = quant.calibrate(small_params, calib_streams, percentile=0.0)
        x = np.concatenate(calib_streams)
        assert stats["input"] == pytest.approx((x.min(), x.max()))
        lo, hi = stats["gru1.z"]
        assert 0 <= lo <= hi <= 1
        narrow = quant.calibrate(small_params, calib_streams)
        assert narrow["input"][1] <= stats["input"][1]

    def test_missing_boundary(self, small_params, calib_streams):
        stats = quant.calibrate(small_params, calib_streams)
        del stats.ranges["fc1"]
        with pytest.raises(quant.CalibrationError):
            quant.quantize_net(small_params, stats)


class TestQuantizedNet:
    def test_lut_ranges(self, qmodel):
        for name, lut in qmodel.luts.items():
            assert lut.shape == (256,)
            assert lut.min() >= -128 and lut.max() <= 127
            assert np.all(np.diff(lut) >= 0), name

    def test_weights_int8(self, qmodel):
        for t in qmodel.weights.values():
            assert np.abs(t.values).max() <= 127

    def test_tracks_float(self, small_params, qmodel, calib_streams):
        x = calib_streams[0]
        pf, _ = net.forward_sequence(small_params, x)
        pq, _ = quant.q_forward_sequence(qmodel, x)
        assert np.all((pq >= 0) & (pq <= 1))
        assert np.max(np.abs(pf - pq)) < 0.05

    def test_state_threading(self, qmodel, calib_streams):
        x = calib_streams[1][:30]
        whole, _ = quant.q_forward_sequence(qmodel, x)
        a, s = quant.q_forward_sequence(qmodel, x[:13])
        b, _ = quant.q_forward_sequence(qmodel, x[13:], s)
        assert_array_equal(np.r_[a, b], whole)

    def test_zero_weights_give_half(self, calib_streams):
        p = net.init_params(seed=0)
        for v in p.tensors.values():
            v[...] = 0.0
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", quant.DegenerateCalibrationWarning)
            q = quant.quantize_net(p, quant.calibrate(p, calib_streams))
        probs, _ = quant.q_forward_sequence(q, calib_streams[0][:5])
        assert_allclose(probs, 0.5, atol=1 / 255)

    def test_sixteen_bit_closer(self, small_params, calib_streams):
        stats = quant.calibrate(small_params, calib_streams)
        q16 = quant.quantize_net(small_params, stats, bits=16)
        assert q16.luts["fc2_pre"].shape == (65536,)
        x = calib_streams[2]
        pf, _ = net.forward_sequence(small_params, x)
        p8, _ = quant.q_forward_sequence(quant.quantize_net(small_params, stats), x)
        p16, _ = quant.q_forward_sequence(q16, x)
        assert np.max(np.abs(pf - p16)) < np.max(np.abs(pf - p8))

    def test_binary_accuracy(self):
        assert quant.binary_accuracy([0.9, 0.2, 0.6], [1, 0, 0]) == pytest.approx(2 / 3)


class TestModelFile:
    def test_round_trip_bit_exact(self, qmodel, tmp_path, calib_streams):
        path = quant.save_qparams(qmodel, tmp_path / "q")
        back = quant.load_qparams(path)
        for k, t in qmodel.weights.items():
            assert_array_equal(back.weights[k].values, t.values)
            assert back.weights[k].scale == t.scale
        for k, b in qmodel.biases.items():
            assert_array_equal(back.biases[k], b)
        assert back.mults == qmodel.mults and back.acts == qmodel.acts
        x = calib_streams[0][:40]
        assert_array_equal(quant.q_forward_sequence(back, x)[0], quant.q_forward_sequence(qmodel, x)[0])

    def test_wrong_kind(self, qmodel, small_params, tmp_path):
        fpath = net.save_params(small_params, tmp_path / "f")
        with pytest.raises(net.ModelFormatError):
            quant.load_qparams(fpath)
        path = quant.save_qparams(qmodel, tmp_path / "q")
        m = json.loads(path.read_text())
        m["format_version"] = 0
        path.write_text(json.dumps(m))
        with pytest.raises(net.ModelFormatError):
            quant.load_qparams(path)
