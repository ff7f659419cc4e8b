"""Layer-dump files: the per-stage record of every layer's output values.

A dump file is line-oriented UTF-8:

    blobdump version 1
    stage <sw|design|hw>
    image <id>
    layer <name> <count>
    <count values, whitespace separated, wrapped freely>
    ...
    prediction <class-index>

Values use 9-significant-digit scientific notation (``2.50000000e-01``).
That encoding is the canonical value domain: :func:`canonical` rounds a double
through the formatter, and engines canonicalize record values at emission, so
a dump parsed back from disk equals its in-memory source exactly and a
write-parse-write cycle is a byte-level fixpoint.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

STAGES = ("sw", "design", "hw")

_VALUES_PER_LINE = 8


class DumpFormatError(ValueError):
    """Raised for malformed dump files."""


class StructureMismatchError(ValueError):
    """Raised when two artifacts disagree on layer names, order, or counts."""


def format_value(v: float) -> str:
    """Render a finite double as 9-significant-digit scientific notation.

    Negative zero normalizes to ``0.00000000e+00`` so equal values always
    render to equal bytes.
    """
    v = float(v)
    if not math.isfinite(v):
        raise ValueError(f"cannot format non-finite value {v!r}")
    if v == 0.0:
        v = 0.0
    return f"{v:.8e}"


def canonical(v: float) -> float:
    """The double a dump file can carry: round-trip through the formatter."""
    return float(format_value(v))


def canonical_array(values) -> np.ndarray:
    """Vectorized :func:`canonical` (idempotent)."""
    arr = np.asarray(values, dtype=np.float64)
    return np.array([canonical(float(v)) for v in arr.reshape(-1)]).reshape(arr.shape)


@dataclass
class LayerRecord:
    """One layer's flattened output values inside a dump."""

    name: str
    values: np.ndarray  # float64, canonical

    @property
    def count(self) -> int:
        return int(self.values.size)

    def __eq__(self, other):
        if not isinstance(other, LayerRecord):
            return NotImplemented
        return self.name == other.name and np.array_equal(self.values, other.values)


@dataclass
class BlobDump:
    """A full per-stage run record: every layer's values plus the argmax."""

    stage: str
    image_id: str
    records: list[LayerRecord]
    prediction: int

    def __post_init__(self):
        if self.stage not in STAGES:
            raise DumpFormatError(f"unknown stage {self.stage!r}")

    def record(self, name: str) -> LayerRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(f"no record for layer {name!r}")

    def __eq__(self, other):
        if not isinstance(other, BlobDump):
            return NotImplemented
        return (
            self.stage == other.stage
            and self.image_id == other.image_id
            and self.prediction == other.prediction
            and self.records == other.records
        )


def dump_to_text(dump: BlobDump) -> str:
    lines = [
        "blobdump version 1",
        f"stage {dump.stage}",
        f"image {dump.image_id}",
    ]
    for rec in dump.records:
        lines.append(f"layer {rec.name} {rec.count}")
        vals = rec.values
        for i in range(0, vals.size, _VALUES_PER_LINE):
            lines.append(" ".join(format_value(v) for v in vals[i : i + _VALUES_PER_LINE]))
    lines.append(f"prediction {dump.prediction}")
    return "\n".join(lines) + "\n"


def write_blob_dump(dump: BlobDump, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_to_text(dump))


def parse_blob_dump(text: str) -> BlobDump:
    """Parse a dump file; errors carry line numbers."""
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
    if line != "blobdump version 1":
        raise DumpFormatError(f"line {lineno}: expected 'blobdump version 1' header")

    line, lineno = next_line()
    if line is None or not line.startswith("stage "):
        raise DumpFormatError(f"line {lineno}: expected 'stage <name>'")
    stage = line.split()[1] if len(line.split()) == 2 else None
    if stage not in STAGES:
        raise DumpFormatError(f"line {lineno}: unknown stage {line[6:]!r}")

    line, lineno = next_line()
    if line is None or not line.startswith("image ") or len(line.split()) != 2:
        raise DumpFormatError(f"line {lineno}: expected 'image <id>'")
    image_id = line.split()[1]

    records: list[LayerRecord] = []
    prediction: int | None = None
    while True:
        line, lineno = next_line()
        if line is None:
            break
        tokens = line.split()
        if tokens[0] == "layer":
            if len(tokens) != 3:
                raise DumpFormatError(f"line {lineno}: expected 'layer <name> <count>'")
            name = tokens[1]
            try:
                count = int(tokens[2])
            except ValueError:
                raise DumpFormatError(f"line {lineno}: bad count {tokens[2]!r}") from None
            if count < 1:
                raise DumpFormatError(f"line {lineno}: count must be >= 1")
            values: list[float] = []
            while len(values) < count:
                line, vline = next_line()
                if line is None or line.split()[0] in ("layer", "prediction"):
                    raise DumpFormatError(
                        f"layer {name} declares {count} elements but provides "
                        f"{len(values)}"
                    )
                for t in line.split():
                    try:
                        values.append(float(t))
                    except ValueError:
                        raise DumpFormatError(f"line {vline}: bad value {t!r}") from None
            if len(values) != count:
                raise DumpFormatError(
                    f"layer {name} declares {count} elements but provides {len(values)}"
                )
            records.append(LayerRecord(name, np.array(values, dtype=np.float64)))
        elif tokens[0] == "prediction":
            if len(tokens) != 2:
                raise DumpFormatError(f"line {lineno}: expected 'prediction <index>'")
            try:
                prediction = int(tokens[1])
            except ValueError:
                raise DumpFormatError(f"line {lineno}: bad prediction {tokens[1]!r}") from None
            line, lineno = next_line()
            if line is not None:
                raise DumpFormatError(f"line {lineno}: content after prediction")
            break
        else:
            raise DumpFormatError(f"line {lineno}: unexpected directive {tokens[0]!r}")

    if prediction is None:
        raise DumpFormatError("missing 'prediction' line")
    if not records:
        raise DumpFormatError("dump contains no layer records")
    return BlobDump(stage=stage, image_id=image_id, records=records, prediction=prediction)


def read_blob_dump(path: str | os.PathLike) -> BlobDump:
    with open(path, "r", encoding="utf-8") as f:
        return parse_blob_dump(f.read())
