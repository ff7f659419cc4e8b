"""Flat channel-major tensor container plus its plain-text file form.

Every value that moves between stages (images, layer outputs) is carried as a
``Tensor``: a (channels, height, width) shape with the data stored flat in
channel-major, then row-major order.  All functions here are pure; instances
are treated as immutable once constructed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Tensor:
    """A 3-D value block stored flat in c-then-y-then-x order."""

    shape: tuple[int, int, int]
    data: np.ndarray

    def __post_init__(self):
        c, h, w = self.shape
        if c < 1 or h < 1 or w < 1:
            raise ValueError(f"non-positive tensor shape {self.shape}")
        arr = np.asarray(self.data, dtype=np.float64).reshape(-1)
        if arr.size != c * h * w:
            raise ValueError(
                f"tensor data length {arr.size} does not match shape "
                f"{c}x{h}x{w} = {c * h * w}"
            )
        if not np.isfinite(arr).all():
            raise ValueError("tensor contains non-finite values")
        object.__setattr__(self, "shape", (int(c), int(h), int(w)))
        object.__setattr__(self, "data", arr)

    @property
    def size(self) -> int:
        c, h, w = self.shape
        return c * h * w

    def as3d(self) -> np.ndarray:
        """Return a (C, H, W) view of the flat data."""
        return self.data.reshape(self.shape)

    def at(self, c: int, y: int, x: int) -> float:
        return float(self.as3d()[c, y, x])

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)


def from3d(arr) -> Tensor:
    """Build a Tensor from any (C, H, W)-shaped array."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {a.shape}")
    return Tensor(tuple(int(d) for d in a.shape), a.reshape(-1))


def write_tensor(tensor: Tensor, path: str | os.PathLike) -> None:
    """Write a tensor as a plain-text file: ``tensor C H W`` plus the values.

    Values are written with full double precision so a read-back reproduces
    the exact same doubles.
    """
    c, h, w = tensor.shape
    lines = [f"tensor {c} {h} {w}"]
    vals = tensor.data
    for i in range(0, vals.size, 8):
        lines.append(" ".join(f"{v:.17g}" for v in vals[i : i + 8]))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def parse_tensor(text: str) -> Tensor:
    """Parse the ``tensor C H W`` text form.  Blank lines and ``#`` comments
    are ignored; the value count must match the declared shape exactly."""
    shape = None
    values: list[float] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if shape is None:
            if tok[0] != "tensor" or len(tok) != 4:
                raise ValueError(f"line {lineno}: expected 'tensor C H W' header")
            try:
                c, h, w = (int(t) for t in tok[1:])
            except ValueError:
                raise ValueError(f"line {lineno}: non-integer tensor dimension") from None
            shape = (c, h, w)
            continue
        for t in tok:
            try:
                values.append(float(t))
            except ValueError:
                raise ValueError(f"line {lineno}: bad value {t!r}") from None
    if shape is None:
        raise ValueError("missing 'tensor C H W' header")
    expected = shape[0] * shape[1] * shape[2]
    if len(values) != expected:
        raise ValueError(
            f"tensor declares {expected} values but provides {len(values)}"
        )
    return Tensor(shape, np.array(values, dtype=np.float64))


def read_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "r", encoding="utf-8") as f:
        return parse_tensor(f.read())
