"""Network topology and parameter handling.

A topology is a line-oriented text file:

    network <name>
    input <C> <H> <W>
    layer conv <name> filters=<F> kernel=<K> stride=<S> pad=<P>
    layer pool <name> kind=<max|avg> kernel=<K> stride=<S>
    layer relu <name>
    layer fc <name> units=<U>

``#`` starts a comment, blank lines are ignored, unknown directives or keys
are rejected.  Syntax errors carry line numbers; semantic errors carry the
offending layer's name.  Shape inference runs at parse time so a returned
``NetworkSpec`` always has a positive output shape for every layer.

Parameters live in a separate file:

    params <network-name>
    layer <name>
    weights <count>
    <count values...>
    biases <count>
    <count values...>

Conv weights are ordered [filter][in_channel][ky][kx] row-major; fc weights
are [unit][fan_in] with the fan-in flattened channel-major then row-major —
the same order the engines flatten tensors.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .fixedpoint import FixedPointFormat, dequantize_array, quantize_array

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")

POOL_KINDS = ("max", "avg")

#: Names of the topologies shipped with the package.
BUNDLED_NETWORKS = ("lenet", "cifar10")


class TopologyError(ValueError):
    """Raised for syntax or semantic errors in a topology description."""


class ParameterError(ValueError):
    """Raised for malformed or incomplete parameter files."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a network.  Fields not applying to ``kind`` stay None."""

    kind: str  # conv | pool | relu | fc
    name: str
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    pad: int | None = None
    pool_kind: str | None = None
    units: int | None = None

    @property
    def has_parameters(self) -> bool:
        return self.kind in ("conv", "fc")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]


@dataclass(frozen=True)
class LayerShape:
    """Inferred output geometry of one layer."""

    name: str
    count: int
    shape: tuple[int, int, int]


@dataclass
class LayerParameters:
    weights: np.ndarray  # conv: (F, C, K, K); fc: (U, fan_in)
    biases: np.ndarray  # (F,) or (U,)

    def __eq__(self, other):
        if not isinstance(other, LayerParameters):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(
            self.biases, other.biases
        )


@dataclass
class ParameterSet:
    network: str
    layers: dict[str, LayerParameters] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return self.network == other.network and self.layers == other.layers


def _conv_out(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def infer_shapes(net: NetworkSpec) -> list[LayerShape]:
    """Walk the network and return (name, element count, shape) per layer.

    Raises TopologyError naming the layer if any dimension goes non-positive.
    """
    c, h, w = net.input_shape
    out: list[LayerShape] = []
    for layer in net.layers:
        if layer.kind == "conv":
            oh = _conv_out(h, layer.kernel, layer.stride, layer.pad)
            ow = _conv_out(w, layer.kernel, layer.stride, layer.pad)
            c, h, w = layer.filters, oh, ow
        elif layer.kind == "pool":
            oh = _conv_out(h, layer.kernel, layer.stride, 0)
            ow = _conv_out(w, layer.kernel, layer.stride, 0)
            h, w = oh, ow
        elif layer.kind == "relu":
            pass
        elif layer.kind == "fc":
            c, h, w = layer.units, 1, 1
        else:  # pragma: no cover - parse rejects unknown kinds
            raise TopologyError(f"layer {layer.name}: unknown kind {layer.kind!r}")
        if h < 1 or w < 1 or c < 1:
            raise TopologyError(
                f"layer {layer.name}: non-positive output dimension "
                f"({c}x{h}x{w})"
            )
        out.append(LayerShape(layer.name, c * h * w, (c, h, w)))
    return out


def _parse_attrs(tokens: list[str], lineno: int) -> dict[str, str]:
    attrs: dict[str, str] = {}
    for tok in tokens:
        if "=" not in tok:
            raise TopologyError(f"line {lineno}: expected key=value, got {tok!r}")
        key, value = tok.split("=", 1)
        if key in attrs:
            raise TopologyError(f"line {lineno}: duplicate key {key!r}")
        attrs[key] = value
    return attrs


def _take_int(attrs: dict[str, str], key: str, lineno: int, minimum: int) -> int:
    if key not in attrs:
        raise TopologyError(f"line {lineno}: missing key {key!r}")
    try:
        value = int(attrs.pop(key))
    except ValueError:
        raise TopologyError(f"line {lineno}: key {key!r} is not an integer") from None
    if value < minimum:
        raise TopologyError(f"line {lineno}: key {key!r} must be >= {minimum}")
    return value


def parse_topology(text: str) -> NetworkSpec:
    """Parse a topology description into a validated NetworkSpec."""
    name: str | None = None
    input_shape: tuple[int, int, int] | None = None
    layers: list[LayerSpec] = []
    seen: set[str] = set()

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0]

        if head == "network":
            if name is not None:
                raise TopologyError(f"line {lineno}: duplicate 'network' directive")
            if len(tokens) != 2 or not _NAME_RE.match(tokens[1]):
                raise TopologyError(f"line {lineno}: expected 'network <name>'")
            name = tokens[1]
        elif head == "input":
            if name is None:
                raise TopologyError(f"line {lineno}: 'input' before 'network'")
            if input_shape is not None:
                raise TopologyError(f"line {lineno}: duplicate 'input' directive")
            if len(tokens) != 4:
                raise TopologyError(f"line {lineno}: expected 'input <C> <H> <W>'")
            try:
                dims = tuple(int(t) for t in tokens[1:])
            except ValueError:
                raise TopologyError(f"line {lineno}: non-integer input dimension") from None
            if any(d < 1 for d in dims):
                raise TopologyError(f"line {lineno}: input dimensions must be >= 1")
            input_shape = dims
        elif head == "layer":
            if input_shape is None:
                raise TopologyError(f"line {lineno}: 'layer' before 'input'")
            if len(tokens) < 3:
                raise TopologyError(f"line {lineno}: expected 'layer <kind> <name> ...'")
            kind, lname = tokens[1], tokens[2]
            if not _NAME_RE.match(lname):
                raise TopologyError(f"line {lineno}: bad layer name {lname!r}")
            if lname in seen:
                raise TopologyError(f"layer {lname}: duplicate layer name (line {lineno})")
            attrs = _parse_attrs(tokens[3:], lineno)
            if kind == "conv":
                spec = LayerSpec(
                    kind="conv",
                    name=lname,
                    filters=_take_int(attrs, "filters", lineno, 1),
                    kernel=_take_int(attrs, "kernel", lineno, 1),
                    stride=_take_int(attrs, "stride", lineno, 1),
                    pad=_take_int(attrs, "pad", lineno, 0),
                )
            elif kind == "pool":
                if "kind" not in attrs:
                    raise TopologyError(f"line {lineno}: missing key 'kind'")
                pool_kind = attrs.pop("kind")
                if pool_kind not in POOL_KINDS:
                    raise TopologyError(
                        f"line {lineno}: pool kind must be one of {POOL_KINDS}"
                    )
                spec = LayerSpec(
                    kind="pool",
                    name=lname,
                    pool_kind=pool_kind,
                    kernel=_take_int(attrs, "kernel", lineno, 1),
                    stride=_take_int(attrs, "stride", lineno, 1),
                )
            elif kind == "relu":
                spec = LayerSpec(kind="relu", name=lname)
            elif kind == "fc":
                spec = LayerSpec(
                    kind="fc", name=lname, units=_take_int(attrs, "units", lineno, 1)
                )
            else:
                raise TopologyError(f"line {lineno}: unknown layer kind {kind!r}")
            if attrs:
                raise TopologyError(
                    f"line {lineno}: unknown key {sorted(attrs)[0]!r} for {kind}"
                )
            layers.append(spec)
            seen.add(lname)
        else:
            raise TopologyError(f"line {lineno}: unknown directive {head!r}")

    if name is None:
        raise TopologyError("missing 'network' directive")
    if input_shape is None:
        raise TopologyError("missing 'input' directive")
    if not layers:
        raise TopologyError("topology declares no layers")

    # fc output is a flat vector; only relu or further fc layers may follow.
    seen_fc = None
    for layer in layers:
        if seen_fc and layer.kind not in ("relu", "fc"):
            raise TopologyError(
                f"layer {layer.name}: {layer.kind} cannot follow fc layer {seen_fc}"
            )
        if layer.kind == "fc":
            seen_fc = layer.name

    net = NetworkSpec(name=name, input_shape=input_shape, layers=tuple(layers))
    infer_shapes(net)  # surfaces non-positive dimensions as TopologyError
    return net


def serialize_topology(net: NetworkSpec) -> str:
    """Render a NetworkSpec back to its text form (parse round-trips)."""
    c, h, w = net.input_shape
    lines = [f"network {net.name}", f"input {c} {h} {w}"]
    for l in net.layers:
        if l.kind == "conv":
            lines.append(
                f"layer conv {l.name} filters={l.filters} kernel={l.kernel} "
                f"stride={l.stride} pad={l.pad}"
            )
        elif l.kind == "pool":
            lines.append(
                f"layer pool {l.name} kind={l.pool_kind} kernel={l.kernel} "
                f"stride={l.stride}"
            )
        elif l.kind == "relu":
            lines.append(f"layer relu {l.name}")
        else:
            lines.append(f"layer fc {l.name} units={l.units}")
    return "\n".join(lines) + "\n"


def load_topology(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as f:
        return parse_topology(f.read())


def bundled_topology_text(name: str) -> str:
    """Return the text of a topology shipped with the package."""
    if name not in BUNDLED_NETWORKS:
        raise TopologyError(
            f"unknown bundled network {name!r}; available: {', '.join(BUNDLED_NETWORKS)}"
        )
    return resources.files("coverify.data").joinpath(f"{name}.net").read_text("utf-8")


def bundled_topology(name: str) -> NetworkSpec:
    return parse_topology(bundled_topology_text(name))


def parameter_shapes(net: NetworkSpec) -> dict[str, tuple[tuple, tuple]]:
    """Expected (weights shape, biases shape) for each parameterized layer."""
    shapes: dict[str, tuple[tuple, tuple]] = {}
    c, h, w = net.input_shape
    for layer, ls in zip(net.layers, infer_shapes(net)):
        if layer.kind == "conv":
            shapes[layer.name] = ((layer.filters, c, layer.kernel, layer.kernel), (layer.filters,))
        elif layer.kind == "fc":
            shapes[layer.name] = ((layer.units, c * h * w), (layer.units,))
        c, h, w = ls.shape
    return shapes


def parse_parameters(text: str, net: NetworkSpec) -> ParameterSet:
    """Parse a parameter file and validate it against the network."""
    expected = parameter_shapes(net)

    lines = text.splitlines()
    pos = 0

    def next_directive():
        nonlocal pos
        while pos < len(lines):
            line = lines[pos].split("#", 1)[0].strip()
            pos += 1
            if line:
                return line.split(), pos
        return None, pos

    tokens, lineno = next_directive()
    if tokens is None or tokens[0] != "params" or len(tokens) != 2:
        raise ParameterError(f"line {lineno}: expected 'params <network-name>' header")
    if tokens[1] != net.name:
        raise ParameterError(
            f"parameter file is for network {tokens[1]!r}, expected {net.name!r}"
        )

    def read_values(count: int, what: str, layer: str) -> np.ndarray:
        nonlocal pos
        values: list[float] = []
        while len(values) < count and pos < len(lines):
            line = lines[pos].split("#", 1)[0].strip()
            if line and line.split()[0] in ("layer", "weights", "biases"):
                break
            pos += 1
            if not line:
                continue
            for t in line.split():
                try:
                    values.append(float(t))
                except ValueError:
                    raise ParameterError(f"line {pos}: bad value {t!r}") from None
        if len(values) != count:
            raise ParameterError(
                f"layer {layer}: {what} expected {count} values, got {len(values)}"
            )
        return np.array(values, dtype=np.float64)

    layers: dict[str, LayerParameters] = {}
    while True:
        tokens, lineno = next_directive()
        if tokens is None:
            break
        if tokens[0] != "layer" or len(tokens) != 2:
            raise ParameterError(f"line {lineno}: expected 'layer <name>'")
        lname = tokens[1]
        if lname not in expected:
            raise ParameterError(f"layer {lname}: not a parameterized layer of {net.name}")
        if lname in layers:
            raise ParameterError(f"layer {lname}: duplicate parameter block")
        wshape, bshape = expected[lname]

        tokens, lineno = next_directive()
        if tokens is None or tokens[0] != "weights" or len(tokens) != 2:
            raise ParameterError(f"missing weights: {lname}")
        try:
            wcount = int(tokens[1])
        except ValueError:
            raise ParameterError(f"line {lineno}: weights count is not an integer") from None
        wneed = int(np.prod(wshape))
        if wcount != wneed:
            raise ParameterError(
                f"layer {lname}: weights expected {wneed}, got {wcount}"
            )
        weights = read_values(wcount, "weights", lname).reshape(wshape)

        tokens, lineno = next_directive()
        if tokens is None or tokens[0] != "biases" or len(tokens) != 2:
            raise ParameterError(f"missing biases: {lname}")
        try:
            bcount = int(tokens[1])
        except ValueError:
            raise ParameterError(f"line {lineno}: biases count is not an integer") from None
        bneed = int(np.prod(bshape))
        if bcount != bneed:
            raise ParameterError(f"layer {lname}: biases expected {bneed}, got {bcount}")
        biases = read_values(bcount, "biases", lname).reshape(bshape)

        layers[lname] = LayerParameters(weights=weights, biases=biases)

    missing = [n for n in expected if n not in layers]
    if missing:
        raise ParameterError(f"missing parameters: {missing[0]}")
    return ParameterSet(network=net.name, layers=layers)


def serialize_parameters(params: ParameterSet) -> str:
    """Render a ParameterSet to its text form with full double precision."""
    lines = [f"params {params.network}"]
    for name, lp in params.layers.items():
        lines.append(f"layer {name}")
        flat_w = lp.weights.reshape(-1)
        lines.append(f"weights {flat_w.size}")
        for i in range(0, flat_w.size, 8):
            lines.append(" ".join(f"{v:.17g}" for v in flat_w[i : i + 8]))
        flat_b = lp.biases.reshape(-1)
        lines.append(f"biases {flat_b.size}")
        for i in range(0, flat_b.size, 8):
            lines.append(" ".join(f"{v:.17g}" for v in flat_b[i : i + 8]))
    return "\n".join(lines) + "\n"


def load_parameters(path, net: NetworkSpec) -> ParameterSet:
    with open(path, "r", encoding="utf-8") as f:
        return parse_parameters(f.read(), net)


def save_parameters(params: ParameterSet, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize_parameters(params))


def quantize_parameters(params: ParameterSet, fmt: FixedPointFormat) -> ParameterSet:
    """Snap every weight and bias to the format's grid (quantize, then
    dequantize).  Idempotent: re-applying with the same format is identity."""
    out: dict[str, LayerParameters] = {}
    for name, lp in params.layers.items():
        out[name] = LayerParameters(
            weights=dequantize_array(quantize_array(lp.weights, fmt), fmt),
            biases=dequantize_array(quantize_array(lp.biases, fmt), fmt),
        )
    return ParameterSet(network=params.network, layers=out)
