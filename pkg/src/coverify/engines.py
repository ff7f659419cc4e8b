"""Stage execution engines.

One layer-forward implementation serves all three stages; the numeric mode
decides how values move:

* ``double``  — the software reference: float64 end to end.
* ``float32`` — a single-precision design model: inputs, parameters and
  accumulation all in float32.
* ``fixed``   — hardware-style fixed point: parameters quantized to the
  weight format, activations to the activation format, MAC chains at the
  combined fraction scale with one truncating rescale per output element.

``run_stage`` executes a network directly; ``run_hw_stream`` executes it
through a streaming front end (one DMA-style channel per layer) that must
consume exactly C*H*W input elements and supports fault injection.  Absent
faults the two are bit-identical by construction, which is what makes exact
hardware-vs-design comparison meaningful.

All entry points are pure functions of their arguments and safe to run
concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .blobio import BlobDump, LayerRecord, canonical_array
from .fixedpoint import (
    FixedPointFormat,
    _mac_raw,
    check_mac_headroom,
    dequantize_array,
    int64_mac_safe,
    quantize,
    quantize_array,
)
from .netspec import LayerParameters, LayerSpec, NetworkSpec, ParameterSet, infer_shapes, parameter_shapes
from .tensor import Tensor

MODE_KINDS = ("double", "float32", "fixed")
FAULT_KINDS = ("scale", "zero", "bitflip")

DEFAULT_WEIGHT_FORMAT = FixedPointFormat(8, 6)
DEFAULT_ACTIVATION_FORMAT = FixedPointFormat(24, 12)


class EngineError(RuntimeError):
    """Raised for runtime failures inside a stage run."""


class ShapeError(EngineError):
    """Input or parameter geometry does not match the network."""


class StreamError(EngineError):
    """A stream channel carried the wrong number of elements."""


class FaultConfigError(ValueError):
    """A fault specification does not fit the target network."""


@dataclass(frozen=True)
class NumericMode:
    kind: str
    weight_fmt: FixedPointFormat | None = None
    act_fmt: FixedPointFormat | None = None

    def __post_init__(self):
        if self.kind not in MODE_KINDS:
            raise ValueError(f"unknown numeric mode {self.kind!r}")
        if self.kind == "fixed":
            if self.weight_fmt is None or self.act_fmt is None:
                raise ValueError("fixed mode requires weight and activation formats")
        elif self.weight_fmt is not None or self.act_fmt is not None:
            raise ValueError(f"{self.kind} mode takes no fixed-point formats")

    def describe(self) -> str:
        if self.kind == "fixed":
            return (
                f"fixed:w{self.weight_fmt.total_bits}.{self.weight_fmt.frac_bits}"
                f":a{self.act_fmt.total_bits}.{self.act_fmt.frac_bits}"
            )
        return self.kind


DOUBLE = NumericMode("double")
FLOAT32 = NumericMode("float32")


def default_fixed_mode() -> NumericMode:
    return NumericMode("fixed", DEFAULT_WEIGHT_FORMAT, DEFAULT_ACTIVATION_FORMAT)


@dataclass(frozen=True)
class FaultSpec:
    """A deliberate defect injected at one layer of the hw stage.

    * ``scale``   — multiply the layer's weights by ``factor`` (layers
      without parameters scale their output stream instead).
    * ``zero``    — force output element ``index`` to zero.
    * ``bitflip`` — flip bit ``bit`` of output element ``index``'s word
      (the fixed-point raw word, or the IEEE-754 single word in float32).
    """

    layer: str
    kind: str
    factor: float | None = None
    index: int | None = None
    bit: int | None = None

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise FaultConfigError(f"unknown fault kind {self.kind!r}")
        if self.kind == "scale":
            if self.factor is None or not math.isfinite(self.factor):
                raise FaultConfigError("scale fault requires a finite factor")
        elif self.kind == "zero":
            if self.index is None or self.index < 0:
                raise FaultConfigError("zero fault requires a non-negative index")
        else:
            if self.index is None or self.index < 0:
                raise FaultConfigError("bitflip fault requires a non-negative index")
            if self.bit is None or self.bit < 0:
                raise FaultConfigError("bitflip fault requires a non-negative bit")


@dataclass(frozen=True)
class StageConfig:
    stage: str
    mode: NumericMode
    fault: FaultSpec | None = None

    def __post_init__(self):
        if self.stage not in ("sw", "design", "hw"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "sw" and self.mode.kind != "double":
            raise ValueError("sw stage runs in double precision only")
        if self.stage in ("design", "hw") and self.mode.kind == "double":
            raise ValueError(f"{self.stage} stage runs in float32 or fixed mode")
        if self.fault is not None and self.stage != "hw":
            raise ValueError("fault injection is available only in the hw stage")


def sw_config() -> StageConfig:
    return StageConfig("sw", DOUBLE)


# ---------------------------------------------------------------------------
# layer kernels


def _im2col(x3: np.ndarray, kernel: int, stride: int, pad: int):
    """Gather conv/pool windows: returns (positions, C*k*k) plus (Ho, Wo)."""
    if pad:
        x3 = np.pad(x3, ((0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x3, (kernel, kernel), axis=(1, 2))
    win = win[:, ::stride, ::stride, :, :]
    c, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kernel * kernel)
    return cols, ho, wo


def _pool_windows(x3: np.ndarray, kernel: int, stride: int):
    win = sliding_window_view(x3, (kernel, kernel), axis=(1, 2))
    return win[:, ::stride, ::stride, :, :]


def _matmul_fixed(cols: np.ndarray, w_raw: np.ndarray, b_raw: np.ndarray,
                  wfmt: FixedPointFormat, afmt: FixedPointFormat) -> np.ndarray:
    """acc[p, f] = (b_raw[f] << act_frac) + sum_i cols[p, i] * w_raw[f, i],
    then one truncating rescale to the activation format.  The int64 fast
    path and the Python-integer fallback produce identical raws."""
    fan_in = cols.shape[1]
    if int64_mac_safe(fan_in, wfmt, afmt):
        bias_acc = b_raw << afmt.frac_bits
        acc = cols @ w_raw.T + bias_acc[None, :]
        out = acc >> wfmt.frac_bits
        return np.clip(out, afmt.min_int, afmt.max_int)
    check_mac_headroom(fan_in, wfmt, afmt)
    rows = cols.tolist()
    wts = w_raw.tolist()
    bias_accs = [int(b) << afmt.frac_bits for b in b_raw]
    out = np.empty((cols.shape[0], w_raw.shape[0]), dtype=np.int64)
    for p, row in enumerate(rows):
        for f, wrow in enumerate(wts):
            acc = bias_accs[f]
            for xv, wv in zip(row, wrow):
                acc = _mac_raw(acc, xv, wv)
            r = acc >> wfmt.frac_bits
            if r > afmt.max_int:
                r = afmt.max_int
            elif r < afmt.min_int:
                r = afmt.min_int
            out[p, f] = r
    return out


def conv2d_forward(x: Tensor, layer: LayerSpec, params: LayerParameters,
                   mode: NumericMode) -> Tensor:
    c, h, w = x.shape
    weights, biases = params.weights, params.biases
    if weights.shape != (layer.filters, c, layer.kernel, layer.kernel):
        raise ShapeError(
            f"layer {layer.name}: weight shape {weights.shape} does not match "
            f"{(layer.filters, c, layer.kernel, layer.kernel)}"
        )
    if mode.kind == "fixed":
        x_raw = quantize_array(x.as3d(), mode.act_fmt)
        w_raw = quantize_array(weights, mode.weight_fmt).reshape(layer.filters, -1)
        b_raw = quantize_array(biases, mode.weight_fmt)
        cols, ho, wo = _im2col(x_raw, layer.kernel, layer.stride, layer.pad)
        out_raw = _matmul_fixed(cols, w_raw, b_raw, mode.weight_fmt, mode.act_fmt)
        out = dequantize_array(out_raw.T.reshape(layer.filters, ho, wo), mode.act_fmt)
    elif mode.kind == "float32":
        cols, ho, wo = _im2col(x.as3d().astype(np.float32), layer.kernel, layer.stride, layer.pad)
        w32 = weights.astype(np.float32).reshape(layer.filters, -1)
        acc = cols @ w32.T + biases.astype(np.float32)[None, :]
        out = acc.T.reshape(layer.filters, ho, wo).astype(np.float64)
    else:
        cols, ho, wo = _im2col(x.as3d(), layer.kernel, layer.stride, layer.pad)
        acc = cols @ weights.reshape(layer.filters, -1).T + biases[None, :]
        out = acc.T.reshape(layer.filters, ho, wo)
    if not np.isfinite(out).all():
        raise EngineError(f"layer {layer.name}: non-finite output")
    return Tensor((layer.filters, out.shape[1], out.shape[2]), out.reshape(-1))


def pool_forward(x: Tensor, layer: LayerSpec, mode: NumericMode) -> Tensor:
    c, h, w = x.shape
    if h < layer.kernel or w < layer.kernel:
        raise ShapeError(f"layer {layer.name}: input {h}x{w} smaller than pool window")
    if mode.kind == "fixed":
        x_raw = quantize_array(x.as3d(), mode.act_fmt)
        win = _pool_windows(x_raw, layer.kernel, layer.stride)
        if layer.pool_kind == "max":
            out_raw = win.max(axis=(3, 4))
        else:
            k2 = layer.kernel * layer.kernel
            recip = quantize(1.0 / k2, mode.weight_fmt).raw
            if int64_mac_safe(k2, mode.weight_fmt, mode.act_fmt):
                acc = win.sum(axis=(3, 4)) * recip
                out_raw = np.clip(acc >> mode.weight_fmt.frac_bits,
                                  mode.act_fmt.min_int, mode.act_fmt.max_int)
            else:
                check_mac_headroom(k2, mode.weight_fmt, mode.act_fmt)
                sums = win.astype(object).sum(axis=(3, 4)) * recip
                shifted = np.array(
                    [int(v) >> mode.weight_fmt.frac_bits for v in sums.reshape(-1)],
                    dtype=np.int64,
                ).reshape(sums.shape)
                out_raw = np.clip(shifted, mode.act_fmt.min_int, mode.act_fmt.max_int)
        out = dequantize_array(out_raw, mode.act_fmt)
    elif mode.kind == "float32":
        win = _pool_windows(x.as3d().astype(np.float32), layer.kernel, layer.stride)
        if layer.pool_kind == "max":
            out = win.max(axis=(3, 4)).astype(np.float64)
        else:
            recip = np.float32(1.0 / (layer.kernel * layer.kernel))
            out = (win.sum(axis=(3, 4), dtype=np.float32) * recip).astype(np.float64)
    else:
        win = _pool_windows(x.as3d(), layer.kernel, layer.stride)
        if layer.pool_kind == "max":
            out = win.max(axis=(3, 4))
        else:
            out = win.sum(axis=(3, 4)) * (1.0 / (layer.kernel * layer.kernel))
    return Tensor((c, out.shape[1], out.shape[2]), out.reshape(-1))


def relu_forward(x: Tensor, layer: LayerSpec, mode: NumericMode) -> Tensor:
    # max(0, x) is exact in every mode; in fixed mode the input is snapped to
    # the activation grid first (identity for values already on it).
    if mode.kind == "fixed":
        raw = quantize_array(x.data, mode.act_fmt)
        vals = dequantize_array(np.maximum(raw, 0), mode.act_fmt)
    else:
        vals = np.maximum(x.data, 0.0)
    return Tensor(x.shape, vals)


def fc_forward(x: Tensor, layer: LayerSpec, params: LayerParameters,
               mode: NumericMode) -> Tensor:
    weights, biases = params.weights, params.biases
    if weights.shape != (layer.units, x.size):
        raise ShapeError(
            f"layer {layer.name}: weight shape {weights.shape} does not match "
            f"{(layer.units, x.size)}"
        )
    if mode.kind == "fixed":
        x_raw = quantize_array(x.data, mode.act_fmt)
        w_raw = quantize_array(weights, mode.weight_fmt)
        b_raw = quantize_array(biases, mode.weight_fmt)
        out_raw = _matmul_fixed(x_raw[None, :], w_raw, b_raw,
                                mode.weight_fmt, mode.act_fmt)[0]
        out = dequantize_array(out_raw, mode.act_fmt)
    elif mode.kind == "float32":
        out = (
            weights.astype(np.float32) @ x.data.astype(np.float32)
            + biases.astype(np.float32)
        ).astype(np.float64)
    else:
        out = weights @ x.data + biases
    if not np.isfinite(out).all():
        raise EngineError(f"layer {layer.name}: non-finite output")
    return Tensor((layer.units, 1, 1), out)


def predict(x: Tensor) -> int:
    """Argmax over the flattened values; ties break to the lowest index."""
    return int(np.argmax(x.data))


def _apply_layer(layer: LayerSpec, x: Tensor, params: ParameterSet,
                 mode: NumericMode) -> Tensor:
    if layer.kind == "conv":
        return conv2d_forward(x, layer, params.layers[layer.name], mode)
    if layer.kind == "pool":
        return pool_forward(x, layer, mode)
    if layer.kind == "relu":
        return relu_forward(x, layer, mode)
    return fc_forward(x, layer, params.layers[layer.name], mode)


def _check_parameters(net: NetworkSpec, params: ParameterSet) -> None:
    expected = parameter_shapes(net)
    for name, (wshape, bshape) in expected.items():
        lp = params.layers.get(name)
        if lp is None:
            raise EngineError(f"parameters missing for layer {name}")
        if lp.weights.shape != wshape or lp.biases.shape != bshape:
            raise EngineError(
                f"layer {name}: parameter shape {lp.weights.shape}/{lp.biases.shape} "
                f"does not match network {wshape}/{bshape}"
            )
    extra = set(params.layers) - set(expected)
    if extra:
        raise EngineError(f"parameters for unknown layer {sorted(extra)[0]}")


# ---------------------------------------------------------------------------
# stage runners


def run_stage(net: NetworkSpec, params: ParameterSet, image: Tensor,
              cfg: StageConfig, image_id: str = "0") -> BlobDump:
    """Run one stage over one image and record every layer's output.

    Recorded values are canonicalized to the dump file's 9-significant-digit
    domain; the values handed to the next layer are not, so fixed-point raws
    stay bit-exact through the network.
    """
    if cfg.stage == "hw":
        return run_hw_stream(net, params, image, cfg, image_id)
    if image.shape != net.input_shape:
        raise ShapeError(
            f"image shape {image.shape} does not match network input {net.input_shape}"
        )
    _check_parameters(net, params)
    records: list[LayerRecord] = []
    t = image
    for layer in net.layers:
        t = _apply_layer(layer, t, params, cfg.mode)
        records.append(LayerRecord(layer.name, canonical_array(t.data)))
    return BlobDump(stage=cfg.stage, image_id=image_id, records=records,
                    prediction=predict(t))


class _Stream:
    """A strict element stream: reads must account for every element."""

    def __init__(self, data: np.ndarray):
        self._data = np.asarray(data, dtype=np.float64)
        self._pos = 0

    def take(self, n: int, port: str) -> np.ndarray:
        avail = self._data.size - self._pos
        if n > avail:
            raise StreamError(
                f"stream underflow at {port}: needed {n} elements, got {avail}"
            )
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def assert_drained(self, port: str) -> None:
        left = self._data.size - self._pos
        if left:
            raise StreamError(
                f"stream overflow at {port}: {left} unconsumed elements"
            )


def _validate_fault(fault: FaultSpec, net: NetworkSpec, mode: NumericMode) -> None:
    shapes = {s.name: s.count for s in infer_shapes(net)}
    if fault.layer not in shapes:
        raise FaultConfigError(f"fault target layer {fault.layer!r} does not exist")
    if fault.kind in ("zero", "bitflip") and fault.index >= shapes[fault.layer]:
        raise FaultConfigError(
            f"fault index {fault.index} outside layer {fault.layer} "
            f"({shapes[fault.layer]} elements)"
        )
    if fault.kind == "bitflip":
        word_bits = mode.act_fmt.total_bits if mode.kind == "fixed" else 32
        if fault.bit >= word_bits:
            raise FaultConfigError(
                f"fault bit {fault.bit} outside the {word_bits}-bit value word"
            )


def _scaled_parameters(params: ParameterSet, layer: str, factor: float) -> ParameterSet:
    layers = dict(params.layers)
    lp = layers[layer]
    layers[layer] = LayerParameters(weights=lp.weights * factor, biases=lp.biases)
    return ParameterSet(network=params.network, layers=layers)


def _flip_float32_bit(v: float, bit: int) -> float:
    word = np.array([v], dtype=np.float32).view(np.uint32)
    word ^= np.uint32(1 << bit)
    flipped = word.view(np.float32)[0]
    if not np.isfinite(flipped):
        # keep the tensor-finiteness contract: saturate to the largest finite
        # single with the flipped word's sign
        sign = -1.0 if (int(word[0]) >> 31) & 1 else 1.0
        return float(sign * np.finfo(np.float32).max)
    return float(flipped)


def _apply_output_fault(t: Tensor, fault: FaultSpec, mode: NumericMode) -> Tensor:
    vals = t.data.copy()
    if fault.kind == "scale":
        if mode.kind == "fixed":
            raws = quantize_array(vals * fault.factor, mode.act_fmt)
            vals = dequantize_array(raws, mode.act_fmt)
        else:
            vals = (vals.astype(np.float32) * np.float32(fault.factor)).astype(np.float64)
    elif fault.kind == "zero":
        vals[fault.index] = 0.0
    else:  # bitflip
        if mode.kind == "fixed":
            fmt = mode.act_fmt
            raw = quantize(float(vals[fault.index]), fmt).raw
            word = (raw & ((1 << fmt.total_bits) - 1)) ^ (1 << fault.bit)
            if word & (1 << (fmt.total_bits - 1)):
                word -= 1 << fmt.total_bits
            vals[fault.index] = word * fmt.resolution
        else:
            vals[fault.index] = _flip_float32_bit(float(vals[fault.index]), fault.bit)
    return Tensor(t.shape, vals)


def run_hw_stream(net: NetworkSpec, params: ParameterSet, image: Tensor,
                  cfg: StageConfig, image_id: str = "0") -> BlobDump:
    """Run the hw stage through the streaming front end.

    The input tensor is consumed as a flat channel-major stream and must
    supply exactly C*H*W elements; each layer emits its output through its
    own channel whose element count is checked against the inferred shape.
    Without a fault the emitted records are bit-identical to
    ``run_stage`` with the same numeric mode.
    """
    if cfg.stage != "hw":
        raise ValueError("run_hw_stream requires an hw stage config")
    _check_parameters(net, params)
    shapes = infer_shapes(net)
    fault = cfg.fault
    if fault is not None:
        _validate_fault(fault, net, cfg.mode)

    stream = _Stream(image.data)
    c, h, w = net.input_shape
    t = Tensor((c, h, w), stream.take(c * h * w, "layer input"))
    stream.assert_drained("layer input")

    records: list[LayerRecord] = []
    for layer, lshape in zip(net.layers, shapes):
        use_params = params
        if fault is not None and fault.kind == "scale" \
                and fault.layer == layer.name and layer.has_parameters:
            use_params = _scaled_parameters(params, layer.name, fault.factor)
        t = _apply_layer(layer, t, use_params, cfg.mode)
        if fault is not None and fault.layer == layer.name \
                and not (fault.kind == "scale" and layer.has_parameters):
            t = _apply_output_fault(t, fault, cfg.mode)
        if t.size != lshape.count:
            raise StreamError(
                f"stream overflow at layer {layer.name}: emitted {t.size} "
                f"elements, channel expects {lshape.count}"
            )
        records.append(LayerRecord(layer.name, canonical_array(t.data)))
    return BlobDump(stage="hw", image_id=image_id, records=records,
                    prediction=predict(t))
