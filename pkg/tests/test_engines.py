"""Tests for the three stage engines: layer kernels, runners, faults."""

import numpy as np
import pytest

from coverify.blobio import dump_to_text
from coverify.engines import (
    DOUBLE,
    FLOAT32,
    EngineError,
    FaultConfigError,
    FaultSpec,
    NumericMode,
    ShapeError,
    StageConfig,
    StreamError,
    conv2d_forward,
    default_fixed_mode,
    fc_forward,
    pool_forward,
    predict,
    relu_forward,
    run_hw_stream,
    run_stage,
    sw_config,
)
from coverify.fixedpoint import FixedPointFormat
from coverify.netspec import LayerParameters, LayerSpec, parse_topology
from coverify.tensor import Tensor, from3d

from oracles import fixed_conv, fixed_fc, fixed_pool, naive_conv, naive_fc, naive_pool

FIXED = default_fixed_mode()


def _conv_layer(name="c", **kw):
    args = dict(filters=1, kernel=2, stride=1, pad=0)
    args.update(kw)
    return LayerSpec(kind="conv", name=name, **args)


def _pool_layer(kind="max", kernel=2, stride=2, name="p"):
    return LayerSpec(kind="pool", name=name, pool_kind=kind, kernel=kernel,
                     stride=stride)


class TestConvExamples:
    def test_ones_kernel(self):
        x = Tensor((1, 3, 3), np.ones(9))
        params = LayerParameters(weights=np.ones((1, 1, 2, 2)), biases=np.zeros(1))
        out = conv2d_forward(x, _conv_layer(), params, DOUBLE)
        assert out.shape == (1, 2, 2)
        assert (out.data == 4.0).all()

    def test_zero_weights_annihilate(self):
        rng = np.random.default_rng(0)
        x = Tensor((2, 4, 4), rng.standard_normal(32))
        params = LayerParameters(weights=np.zeros((3, 2, 2, 2)), biases=np.zeros(3))
        layer = _conv_layer(filters=3)
        for mode in (DOUBLE, FLOAT32, FIXED):
            out = conv2d_forward(x, layer, params, mode)
            assert (out.data == 0.0).all()

    def test_single_element(self):
        x = Tensor((1, 1, 1), [2.0])
        params = LayerParameters(weights=np.full((1, 1, 1, 1), 0.5),
                                 biases=np.array([1.0]))
        out = conv2d_forward(x, _conv_layer(kernel=1), params, DOUBLE)
        assert out.data.tolist() == [2.0]

    def test_shape_mismatch(self):
        x = Tensor((1, 3, 3), np.ones(9))
        params = LayerParameters(weights=np.ones((1, 2, 2, 2)), biases=np.zeros(1))
        with pytest.raises(ShapeError, match="layer c: weight shape"):
            conv2d_forward(x, _conv_layer(), params, DOUBLE)


class TestPoolReluFcExamples:
    def test_max_pool(self):
        x = Tensor((1, 2, 2), [1.0, 2.0, 3.0, 4.0])
        out = pool_forward(x, _pool_layer("max"), DOUBLE)
        assert out.data.tolist() == [4.0]

    def test_avg_pool(self):
        x = Tensor((1, 2, 2), [1.0, 2.0, 3.0, 4.0])
        out = pool_forward(x, _pool_layer("avg"), DOUBLE)
        assert out.data.tolist() == [2.5]

    def test_max_pool_all_equal(self):
        x = Tensor((1, 4, 4), np.full(16, 0.625))
        out = pool_forward(x, _pool_layer("max"), DOUBLE)
        assert (out.data == 0.625).all()

    def test_pool_window_too_large(self):
        x = Tensor((1, 2, 2), np.ones(4))
        with pytest.raises(ShapeError, match="smaller than pool window"):
            pool_forward(x, _pool_layer("max", kernel=3), DOUBLE)

    def test_relu(self):
        x = Tensor((1, 1, 3), [-1.0, 0.0, 2.0])
        layer = LayerSpec(kind="relu", name="r")
        out = relu_forward(x, layer, DOUBLE)
        assert out.data.tolist() == [0.0, 0.0, 2.0]
        allneg = relu_forward(Tensor((1, 1, 3), [-5.0, -0.1, -2.0]), layer, DOUBLE)
        assert (allneg.data == 0.0).all()
        again = relu_forward(out, layer, DOUBLE)
        assert again == out

    def test_fc_identity(self):
        x = Tensor((4, 1, 1), [1.0, 2.0, 3.0, 4.0])
        layer = LayerSpec(kind="fc", name="f", units=4)
        params = LayerParameters(weights=np.eye(4), biases=np.zeros(4))
        out = fc_forward(x, layer, params, DOUBLE)
        assert out.data.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_fc_zero_weights_give_biases(self):
        x = Tensor((1, 1, 3), [9.0, 9.0, 9.0])
        layer = LayerSpec(kind="fc", name="f", units=2)
        params = LayerParameters(weights=np.zeros((2, 3)), biases=np.array([0.5, -1.0]))
        out = fc_forward(x, layer, params, DOUBLE)
        assert out.data.tolist() == [0.5, -1.0]

    def test_fc_dot_product(self):
        x = Tensor((1, 1, 2), [1.0, 2.0])
        layer = LayerSpec(kind="fc", name="f", units=1)
        params = LayerParameters(weights=np.array([[3.0, 4.0]]), biases=np.array([0.5]))
        out = fc_forward(x, layer, params, DOUBLE)
        assert out.data.tolist() == [11.5]

    def test_predict(self):
        assert predict(Tensor((3, 1, 1), [0.1, 0.7, 0.2])) == 1
        assert predict(Tensor((2, 1, 1), [0.5, 0.5])) == 0
        assert predict(Tensor((10, 1, 1), np.full(10, 1.0))) == 0


class TestDoubleOracle:
    """Random-case agreement with naive nested-loop references."""

    def test_conv_random(self):
        rng = np.random.default_rng(10)
        for _ in range(8):
            c = int(rng.integers(1, 4))
            h = int(rng.integers(4, 9))
            w = int(rng.integers(4, 9))
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            f = int(rng.integers(1, 5))
            x = rng.standard_normal((c, h, w))
            weights = rng.standard_normal((f, c, k, k))
            biases = rng.standard_normal(f)
            layer = _conv_layer(filters=f, kernel=k, stride=stride, pad=pad)
            got = conv2d_forward(from3d(x), layer,
                                 LayerParameters(weights=weights, biases=biases),
                                 DOUBLE)
            want = naive_conv(x, weights, biases, stride, pad)
            assert got.shape == want.shape
            assert np.allclose(got.as3d(), want, rtol=1e-12, atol=1e-12)

    def test_pool_random(self):
        rng = np.random.default_rng(11)
        for kind in ("max", "avg"):
            for _ in range(5):
                c = int(rng.integers(1, 4))
                h = int(rng.integers(4, 10))
                w = int(rng.integers(4, 10))
                k = int(rng.integers(1, 4))
                stride = int(rng.integers(1, 3))
                x = rng.standard_normal((c, h, w))
                got = pool_forward(from3d(x), _pool_layer(kind, k, stride), DOUBLE)
                want = naive_pool(x, k, stride, kind)
                assert np.allclose(got.as3d(), want, rtol=1e-14, atol=1e-14)

    def test_fc_random(self):
        rng = np.random.default_rng(12)
        for _ in range(5):
            fan_in = int(rng.integers(1, 40))
            units = int(rng.integers(1, 10))
            x = rng.standard_normal(fan_in)
            weights = rng.standard_normal((units, fan_in))
            biases = rng.standard_normal(units)
            layer = LayerSpec(kind="fc", name="f", units=units)
            got = fc_forward(Tensor((fan_in, 1, 1), x), layer,
                             LayerParameters(weights=weights, biases=biases), DOUBLE)
            want = naive_fc(x, weights, biases)
            assert np.allclose(got.data, want, rtol=1e-12, atol=1e-12)

    def test_conv_linearity(self):
        # with zero biases the double-mode conv is linear in its input
        rng = np.random.default_rng(13)
        x = rng.standard_normal((2, 6, 6))
        weights = rng.standard_normal((3, 2, 3, 3))
        params = LayerParameters(weights=weights, biases=np.zeros(3))
        layer = _conv_layer(filters=3, kernel=3)
        base = conv2d_forward(from3d(x), layer, params, DOUBLE)
        scaled = conv2d_forward(from3d(2.5 * x), layer, params, DOUBLE)
        assert np.allclose(scaled.data, 2.5 * base.data, rtol=1e-12, atol=1e-14)


class TestFixedOracle:
    """Bit-exact agreement with the exact Python-integer reference."""

    WFMT = (8, 6)
    AFMT = (24, 12)

    def test_conv_random_exact(self):
        rng = np.random.default_rng(20)
        wf = FixedPointFormat(*self.WFMT)
        af = FixedPointFormat(*self.AFMT)
        mode = NumericMode("fixed", wf, af)
        for _ in range(5):
            c = int(rng.integers(1, 3))
            h = int(rng.integers(4, 8))
            w = int(rng.integers(4, 8))
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            f = int(rng.integers(1, 4))
            x = rng.uniform(-2, 2, (c, h, w))
            weights = rng.uniform(-2, 2, (f, c, k, k))
            biases = rng.uniform(-1, 1, f)
            layer = _conv_layer(filters=f, kernel=k, stride=stride, pad=pad)
            got = conv2d_forward(from3d(x), layer,
                                 LayerParameters(weights=weights, biases=biases), mode)
            want = fixed_conv(x, weights, biases, stride, pad, self.WFMT, self.AFMT)
            assert np.array_equal(got.as3d(), want)

    def test_fc_random_exact(self):
        rng = np.random.default_rng(21)
        mode = NumericMode("fixed", FixedPointFormat(*self.WFMT),
                           FixedPointFormat(*self.AFMT))
        for _ in range(5):
            fan_in = int(rng.integers(1, 30))
            units = int(rng.integers(1, 8))
            x = rng.uniform(-2, 2, fan_in)
            weights = rng.uniform(-2, 2, (units, fan_in))
            biases = rng.uniform(-1, 1, units)
            layer = LayerSpec(kind="fc", name="f", units=units)
            got = fc_forward(Tensor((fan_in, 1, 1), x), layer,
                             LayerParameters(weights=weights, biases=biases), mode)
            want = fixed_fc(x, weights, biases, self.WFMT, self.AFMT)
            assert np.array_equal(got.data, want)

    def test_pool_random_exact(self):
        rng = np.random.default_rng(22)
        mode = NumericMode("fixed", FixedPointFormat(*self.WFMT),
                           FixedPointFormat(*self.AFMT))
        for kind in ("max", "avg"):
            for _ in range(4):
                c = int(rng.integers(1, 3))
                h = int(rng.integers(4, 9))
                w = int(rng.integers(4, 9))
                k = int(rng.integers(1, 4))
                stride = int(rng.integers(1, 3))
                x = rng.uniform(-3, 3, (c, h, w))
                got = pool_forward(from3d(x), _pool_layer(kind, k, stride), mode)
                want = fixed_pool(x, k, stride, kind, self.WFMT, self.AFMT)
                assert np.array_equal(got.as3d(), want)

    def test_python_int_fallback_matches_int64_path(self):
        # same computation under a wide accumulator-forcing format pair and
        # the int64-provable pair must agree where both are exact
        rng = np.random.default_rng(23)
        x = rng.uniform(-1, 1, (1, 4, 4))
        weights = rng.uniform(-1, 1, (2, 1, 3, 3))
        biases = rng.uniform(-0.5, 0.5, 2)
        layer = _conv_layer(filters=2, kernel=3)
        fast = NumericMode("fixed", FixedPointFormat(8, 6), FixedPointFormat(24, 12))
        # 60-bit activations force the exact Python-integer path
        slow = NumericMode("fixed", FixedPointFormat(8, 6), FixedPointFormat(60, 12))
        got_fast = conv2d_forward(from3d(x), layer,
                                  LayerParameters(weights=weights, biases=biases), fast)
        got_slow = conv2d_forward(from3d(x), layer,
                                  LayerParameters(weights=weights, biases=biases), slow)
        # same fraction bits and no saturation at these magnitudes: equal values
        assert np.array_equal(got_fast.as3d(), got_slow.as3d())


def _tiny_net():
    return parse_topology(
        "network tiny\ninput 1 6 6\n"
        "layer conv conv1 filters=2 kernel=3 stride=1 pad=0\n"
        "layer relu relu1\n"
        "layer pool pool1 kind=max kernel=2 stride=2\n"
        "layer fc fc1 units=3\n"
    )


def _tiny_params(seed=3):
    from coverify.fixtures import make_parameters
    return make_parameters(_tiny_net(), seed)


def _tiny_image(seed=4):
    from coverify.fixtures import make_images
    return make_images(_tiny_net(), 1, seed)[0]


class TestRunStage:
    def test_single_relu_network(self):
        net = parse_topology("network t\ninput 1 1 2\nlayer relu r1\n")
        from coverify.netspec import ParameterSet
        dump = run_stage(net, ParameterSet(network="t"), Tensor((1, 1, 2), [-1.0, 2.0]),
                         sw_config())
        assert len(dump.records) == 1
        assert dump.records[0].values.tolist() == [0.0, 2.0]
        assert dump.prediction == 1

    def test_records_match_shapes_and_are_canonical(self):
        net = _tiny_net()
        dump = run_stage(net, _tiny_params(), _tiny_image(), sw_config())
        from coverify.blobio import canonical_array
        from coverify.netspec import infer_shapes
        assert [r.name for r in dump.records] == [s.name for s in infer_shapes(net)]
        assert [r.count for r in dump.records] == [s.count for s in infer_shapes(net)]
        for r in dump.records:
            assert np.array_equal(r.values, canonical_array(r.values))

    def test_determinism(self):
        net = _tiny_net()
        params, image = _tiny_params(), _tiny_image()
        for cfg in (sw_config(),
                    StageConfig(stage="design", mode=FLOAT32),
                    StageConfig(stage="design", mode=FIXED),
                    StageConfig(stage="hw", mode=FIXED)):
            a = run_stage(net, params, image, cfg)
            b = run_stage(net, params, image, cfg)
            assert a == b
            assert dump_to_text(a) == dump_to_text(b)

    def test_image_shape_checked(self):
        net = _tiny_net()
        with pytest.raises(ShapeError, match="does not match network input"):
            run_stage(net, _tiny_params(), Tensor((1, 3, 3), np.ones(9)), sw_config())

    def test_missing_parameters(self):
        from coverify.netspec import ParameterSet
        with pytest.raises(EngineError, match="parameters missing for layer conv1"):
            run_stage(_tiny_net(), ParameterSet(network="tiny"), _tiny_image(),
                      sw_config())

    def test_stage_config_validation(self):
        with pytest.raises(ValueError, match="sw stage runs in double precision"):
            StageConfig(stage="sw", mode=FLOAT32)
        with pytest.raises(ValueError, match="design stage runs in float32 or fixed"):
            StageConfig(stage="design", mode=DOUBLE)
        with pytest.raises(ValueError, match="hw stage"):
            StageConfig(stage="hw", mode=DOUBLE)
        fault = FaultSpec(layer="conv1", kind="zero", index=0)
        with pytest.raises(ValueError, match="only in the hw stage"):
            StageConfig(stage="design", mode=FLOAT32, fault=fault)

    def test_sw_vs_float32_close(self):
        # double vs single differ only by accumulation precision: bounded
        # relative to the element pair's own magnitude with a per-layer floor
        net = _tiny_net()
        params, image = _tiny_params(), _tiny_image()
        sw = run_stage(net, params, image, sw_config())
        des = run_stage(net, params, image, StageConfig(stage="design", mode=FLOAT32))
        for rs, rd in zip(sw.records, des.records):
            layer_scale = np.abs(rs.values).max()
            bound = 1e-4 * np.maximum(
                np.maximum(np.abs(rs.values), np.abs(rd.values)), 1e-3 * layer_scale
            )
            assert (np.abs(rs.values - rd.values) <= bound).all()


class TestHwStream:
    def test_bit_identical_to_design_without_faults(self):
        net = _tiny_net()
        params, image = _tiny_params(), _tiny_image()
        for mode in (FLOAT32, FIXED):
            des = run_stage(net, params, image, StageConfig(stage="design", mode=mode))
            hw = run_hw_stream(net, params, image, StageConfig(stage="hw", mode=mode))
            assert hw.stage == "hw"
            assert [r.values.tolist() for r in hw.records] == \
                   [r.values.tolist() for r in des.records]
            assert hw.prediction == des.prediction
            # byte-identical except the stage header line
            assert dump_to_text(hw).replace("stage hw", "stage design", 1) == \
                   dump_to_text(des)

    def test_run_stage_dispatches_hw(self):
        net = _tiny_net()
        params, image = _tiny_params(), _tiny_image()
        cfg = StageConfig(stage="hw", mode=FIXED)
        assert run_stage(net, params, image, cfg) == run_hw_stream(net, params, image, cfg)

    def test_stream_underflow_and_overflow(self):
        net = _tiny_net()
        params = _tiny_params()
        cfg = StageConfig(stage="hw", mode=FLOAT32)
        small = Tensor((1, 2, 2), np.ones(4))
        with pytest.raises(StreamError, match="underflow at layer input"):
            run_hw_stream(net, params, small, cfg)
        big = Tensor((1, 7, 7), np.ones(49))
        with pytest.raises(StreamError, match="overflow at layer input"):
            run_hw_stream(net, params, big, cfg)


class TestFaults:
    def _dumps(self, fault, mode=FLOAT32):
        net = _tiny_net()
        params, image = _tiny_params(), _tiny_image()
        clean = run_hw_stream(net, params, image, StageConfig(stage="hw", mode=mode))
        faulted = run_hw_stream(net, params, image,
                                StageConfig(stage="hw", mode=mode, fault=fault))
        return clean, faulted

    def test_scale_weights_diverges_from_target_on(self):
        clean, faulted = self._dumps(FaultSpec(layer="conv1", kind="scale", factor=0.5))
        assert not np.array_equal(clean.records[0].values, faulted.records[0].values)

    def test_scale_on_later_layer_keeps_prefix(self):
        # weights scaled at fc1: all earlier records identical, fc1 differs
        clean, faulted = self._dumps(FaultSpec(layer="fc1", kind="scale", factor=0.5))
        for i in range(3):
            assert np.array_equal(clean.records[i].values, faulted.records[i].values)
        assert not np.array_equal(clean.records[3].values, faulted.records[3].values)

    def test_scale_on_pool_scales_output_stream(self):
        clean, faulted = self._dumps(FaultSpec(layer="pool1", kind="scale", factor=2.0))
        assert np.array_equal(clean.records[0].values, faulted.records[0].values)
        assert np.array_equal(clean.records[1].values, faulted.records[1].values)
        got = faulted.records[2].values
        want = (clean.records[2].values.astype(np.float32) * np.float32(2.0)).astype(np.float64)
        from coverify.blobio import canonical_array
        assert np.array_equal(got, canonical_array(want))

    def test_zero_fault_differs_at_one_index_only(self):
        idx = 1
        clean, faulted = self._dumps(FaultSpec(layer="fc1", kind="zero", index=idx))
        diff = np.flatnonzero(clean.records[3].values != faulted.records[3].values)
        assert diff.tolist() == [idx]
        assert faulted.records[3].values[idx] == 0.0

    def test_bitflip_fixed_changes_target_word(self):
        clean, faulted = self._dumps(
            FaultSpec(layer="fc1", kind="bitflip", index=0, bit=3), mode=FIXED)
        a = clean.records[3].values
        b = faulted.records[3].values
        assert a[0] != b[0]
        assert np.array_equal(a[1:], b[1:])
        # a flipped bit-3 word moves the value by exactly 8 raw steps
        res = FIXED.act_fmt.resolution
        assert abs(b[0] - a[0]) == pytest.approx(8 * res, abs=1e-12)

    def test_bitflip_float32_sign_bit(self):
        clean, faulted = self._dumps(
            FaultSpec(layer="fc1", kind="bitflip", index=0, bit=31))
        a = clean.records[3].values[0]
        b = faulted.records[3].values[0]
        assert b == -a

    def test_bitflip_float32_saturates_non_finite(self):
        from coverify.engines import _flip_float32_bit
        # flipping the top exponent bit of 1.0 lands on infinity -> saturate
        v = _flip_float32_bit(1.0, 30)
        assert np.isfinite(v)
        assert v == float(np.finfo(np.float32).max)
        w = _flip_float32_bit(-1.0, 30)
        assert w == -float(np.finfo(np.float32).max)
        # flipping the same bit of 2.0 clears the exponent: exactly zero
        assert _flip_float32_bit(2.0, 30) == 0.0

    def test_fault_validation(self):
        net = _tiny_net()
        params, image = _tiny_params(), _tiny_image()

        def run(fault, mode=FLOAT32):
            run_hw_stream(net, params, image,
                          StageConfig(stage="hw", mode=mode, fault=fault))

        with pytest.raises(FaultConfigError, match="does not exist"):
            run(FaultSpec(layer="conv9", kind="zero", index=0))
        with pytest.raises(FaultConfigError, match="outside layer fc1"):
            run(FaultSpec(layer="fc1", kind="zero", index=3))
        with pytest.raises(FaultConfigError, match="outside the 32-bit value word"):
            run(FaultSpec(layer="fc1", kind="bitflip", index=0, bit=32))
        with pytest.raises(FaultConfigError, match="outside the 24-bit value word"):
            run(FaultSpec(layer="fc1", kind="bitflip", index=0, bit=24), mode=FIXED)
        with pytest.raises(FaultConfigError, match="unknown fault kind"):
            FaultSpec(layer="fc1", kind="stuck", index=0)
        with pytest.raises(FaultConfigError, match="finite factor"):
            FaultSpec(layer="fc1", kind="scale", factor=float("inf"))
        with pytest.raises(FaultConfigError, match="non-negative index"):
            FaultSpec(layer="fc1", kind="zero", index=-1)
