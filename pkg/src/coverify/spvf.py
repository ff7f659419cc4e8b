"""Statistical envelope files (SPVF) and envelope checking.

An SPVF captures, per layer, the elementwise min/max observed over N
correctly predicted calibration images plus aggregate statistics (each stat
computed per image, then arithmetically averaged over the images).  A later
run's dump is checked against the envelope: an element passes if it lies
within [min_i - slack*std, max_i + slack*std] where std is the layer's
aggregate standard deviation, and a layer passes when the in-bounds fraction
reaches ``pass_fraction``.

File form (values in the same 9-significant-digit notation as dumps):

    spvf version 1
    network <name>
    images <N>
    layer <name> <count>
    stats mean=<v> min=<v> max=<v> range=<v> std=<v>
    bounds
    <min_i> <max_i>     (count lines)
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .blobio import BlobDump, StructureMismatchError, canonical, format_value
from .engines import run_stage, sw_config
from .netspec import NetworkSpec, ParameterSet
from .tensor import Tensor

DEFAULT_IMAGES = 100
DEFAULT_SLACK = 0.0
DEFAULT_PASS_FRACTION = 0.95

_MAX_REPORTED_INDICES = 20


class SpvfFormatError(ValueError):
    """Raised for malformed SPVF files."""


class CalibrationError(RuntimeError):
    """Raised when calibration cannot supply enough correct predictions."""


@dataclass(frozen=True)
class LayerStats:
    mean: float
    min: float
    max: float
    range: float
    std: float


@dataclass
class SpvfLayer:
    name: str
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    stats: LayerStats

    @property
    def count(self) -> int:
        return int(self.bounds_min.size)

    def __eq__(self, other):
        if not isinstance(other, SpvfLayer):
            return NotImplemented
        return (
            self.name == other.name
            and self.stats == other.stats
            and np.array_equal(self.bounds_min, other.bounds_min)
            and np.array_equal(self.bounds_max, other.bounds_max)
        )


@dataclass
class SpvfFile:
    network: str
    images: int
    layers: list[SpvfLayer]

    def layer(self, name: str) -> SpvfLayer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"no envelope for layer {name!r}")

    def __eq__(self, other):
        if not isinstance(other, SpvfFile):
            return NotImplemented
        return (
            self.network == other.network
            and self.images == other.images
            and self.layers == other.layers
        )


def _image_stats(values: np.ndarray) -> np.ndarray:
    vmin = float(values.min())
    vmax = float(values.max())
    return np.array([
        float(values.mean()), vmin, vmax, vmax - vmin, float(values.std()),
    ])


def generate_spvf(net: NetworkSpec, params: ParameterSet,
                  calibration: Iterable[tuple[Tensor, int]],
                  n: int = DEFAULT_IMAGES) -> SpvfFile:
    """Build the envelope from the first ``n`` correctly predicted images.

    ``calibration`` yields (image Tensor, label) pairs; images whose sw-stage
    prediction disagrees with the label are skipped.  Raises
    CalibrationError if fewer than ``n`` images survive the filter.
    """
    if n < 1:
        raise ValueError("image count must be >= 1")
    cfg = sw_config()
    mins: list[np.ndarray] | None = None
    maxs: list[np.ndarray] | None = None
    stat_sums: list[np.ndarray] | None = None
    names: list[str] = []
    kept = 0
    for image, label in calibration:
        dump = run_stage(net, params, image, cfg)
        if dump.prediction != int(label):
            continue
        if mins is None:
            names = [r.name for r in dump.records]
            mins = [r.values.copy() for r in dump.records]
            maxs = [r.values.copy() for r in dump.records]
            stat_sums = [_image_stats(r.values) for r in dump.records]
        else:
            for i, r in enumerate(dump.records):
                np.minimum(mins[i], r.values, out=mins[i])
                np.maximum(maxs[i], r.values, out=maxs[i])
                stat_sums[i] += _image_stats(r.values)
        kept += 1
        if kept == n:
            break
    if kept < n:
        raise CalibrationError(
            f"insufficient correctly predicted images: kept {kept} of {n}"
        )
    layers = []
    for name, lo, hi, sums in zip(names, mins, maxs, stat_sums):
        agg = sums / kept
        layers.append(SpvfLayer(
            name=name,
            bounds_min=lo,
            bounds_max=hi,
            stats=LayerStats(
                mean=canonical(agg[0]), min=canonical(agg[1]),
                max=canonical(agg[2]), range=canonical(agg[3]),
                std=canonical(agg[4]),
            ),
        ))
    return SpvfFile(network=net.name, images=kept, layers=layers)


@dataclass
class LayerEnvelopeResult:
    name: str
    count: int
    outside: int
    outside_indices: list[int]  # capped at _MAX_REPORTED_INDICES
    in_fraction: float
    stat_deltas: LayerStats  # dump stats minus envelope aggregates
    passed: bool


@dataclass
class EnvelopeReport:
    slack: float
    pass_fraction: float
    layers: list[LayerEnvelopeResult]
    passed: bool


def check_blobs(dump: BlobDump, spvf: SpvfFile,
                slack: float = DEFAULT_SLACK,
                pass_fraction: float = DEFAULT_PASS_FRACTION) -> EnvelopeReport:
    """Check one dump against the envelope, layer by layer."""
    if len(dump.records) != len(spvf.layers):
        raise StructureMismatchError(
            f"dump has {len(dump.records)} layers, envelope has {len(spvf.layers)}"
        )
    results = []
    for rec, env in zip(dump.records, spvf.layers):
        if rec.name != env.name:
            raise StructureMismatchError(
                f"layer {rec.name!r} in dump does not match {env.name!r} in envelope"
            )
        if rec.count != env.count:
            raise StructureMismatchError(
                f"layer {rec.name}: dump has {rec.count} elements, "
                f"envelope has {env.count}"
            )
        lo = env.bounds_min - slack * env.stats.std
        hi = env.bounds_max + slack * env.stats.std
        inside = (rec.values >= lo) & (rec.values <= hi)
        outside_idx = np.flatnonzero(~inside)
        frac = float(inside.mean())
        dstats = _image_stats(rec.values)
        deltas = LayerStats(
            mean=dstats[0] - env.stats.mean,
            min=dstats[1] - env.stats.min,
            max=dstats[2] - env.stats.max,
            range=dstats[3] - env.stats.range,
            std=dstats[4] - env.stats.std,
        )
        results.append(LayerEnvelopeResult(
            name=rec.name,
            count=rec.count,
            outside=int(outside_idx.size),
            outside_indices=[int(i) for i in outside_idx[:_MAX_REPORTED_INDICES]],
            in_fraction=frac,
            stat_deltas=deltas,
            passed=frac >= pass_fraction,
        ))
    return EnvelopeReport(
        slack=slack,
        pass_fraction=pass_fraction,
        layers=results,
        passed=all(r.passed for r in results),
    )


def render_envelope_report(report: EnvelopeReport) -> str:
    """Line format: one ``envelope`` line per layer plus an overall line."""
    lines = []
    for r in report.layers:
        lines.append(
            f"envelope {r.name} n={r.count} outside={r.outside} "
            f"frac={format_value(r.in_fraction)} pass={1 if r.passed else 0}"
        )
    lines.append(f"envelope-overall pass={1 if report.passed else 0}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# file form


def spvf_to_text(spvf: SpvfFile) -> str:
    lines = [
        "spvf version 1",
        f"network {spvf.network}",
        f"images {spvf.images}",
    ]
    for layer in spvf.layers:
        lines.append(f"layer {layer.name} {layer.count}")
        s = layer.stats
        lines.append(
            f"stats mean={format_value(s.mean)} min={format_value(s.min)} "
            f"max={format_value(s.max)} range={format_value(s.range)} "
            f"std={format_value(s.std)}"
        )
        lines.append("bounds")
        for lo, hi in zip(layer.bounds_min, layer.bounds_max):
            lines.append(f"{format_value(lo)} {format_value(hi)}")
    return "\n".join(lines) + "\n"


def write_spvf(spvf: SpvfFile, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(spvf_to_text(spvf))


def parse_spvf(text: str) -> SpvfFile:
    lines = text.splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines):
            line = lines[pos].split("#", 1)[0].strip()
            pos += 1
            if line:
                return line, pos
        return None, pos

    line, lineno = next_line()
    if line != "spvf version 1":
        raise SpvfFormatError(f"line {lineno}: expected 'spvf version 1' header")
    line, lineno = next_line()
    if line is None or not line.startswith("network ") or len(line.split()) != 2:
        raise SpvfFormatError(f"line {lineno}: expected 'network <name>'")
    network = line.split()[1]
    line, lineno = next_line()
    if line is None or not line.startswith("images ") or len(line.split()) != 2:
        raise SpvfFormatError(f"line {lineno}: expected 'images <N>'")
    try:
        images = int(line.split()[1])
    except ValueError:
        raise SpvfFormatError(f"line {lineno}: bad image count") from None

    layers: list[SpvfLayer] = []
    line, lineno = next_line()
    while line is not None:
        tokens = line.split()
        if tokens[0] != "layer" or len(tokens) != 3:
            raise SpvfFormatError(f"line {lineno}: expected 'layer <name> <count>'")
        name = tokens[1]
        try:
            count = int(tokens[2])
        except ValueError:
            raise SpvfFormatError(f"line {lineno}: bad count {tokens[2]!r}") from None

        line, lineno = next_line()
        if line is None or not line.startswith("stats "):
            raise SpvfFormatError(f"line {lineno}: expected 'stats' line for {name}")
        kv = {}
        for tok in line.split()[1:]:
            if "=" not in tok:
                raise SpvfFormatError(f"line {lineno}: bad stats token {tok!r}")
            k, v = tok.split("=", 1)
            try:
                kv[k] = float(v)
            except ValueError:
                raise SpvfFormatError(f"line {lineno}: bad stats value {v!r}") from None
        if set(kv) != {"mean", "min", "max", "range", "std"}:
            raise SpvfFormatError(f"line {lineno}: stats must carry mean/min/max/range/std")

        line, lineno = next_line()
        if line != "bounds":
            raise SpvfFormatError(f"line {lineno}: expected 'bounds' for {name}")
        lo = np.empty(count)
        hi = np.empty(count)
        for i in range(count):
            line, lineno = next_line()
            if line is None:
                raise SpvfFormatError(
                    f"layer {name} declares {count} bounds but provides {i}"
                )
            parts = line.split()
            if len(parts) != 2:
                raise SpvfFormatError(f"line {lineno}: expected '<min> <max>'")
            try:
                lo[i], hi[i] = float(parts[0]), float(parts[1])
            except ValueError:
                raise SpvfFormatError(f"line {lineno}: bad bound value") from None
        layers.append(SpvfLayer(
            name=name, bounds_min=lo, bounds_max=hi,
            stats=LayerStats(mean=kv["mean"], min=kv["min"], max=kv["max"],
                             range=kv["range"], std=kv["std"]),
        ))
        line, lineno = next_line()

    if not layers:
        raise SpvfFormatError("envelope contains no layers")
    return SpvfFile(network=network, images=images, layers=layers)


def read_spvf(path: str | os.PathLike) -> SpvfFile:
    with open(path, "r", encoding="utf-8") as f:
        return parse_spvf(f.read())
