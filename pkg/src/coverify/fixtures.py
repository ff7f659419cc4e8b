"""Deterministic seeded fixtures: teacher parameters and calibration images.

Everything here is a pure function of (network, seed).  Draws come from
numpy's integer bit stream only, mapped onto dyadic grids (integers scaled by
powers of two), so the same seed reproduces the same bytes everywhere and
parameter files round-trip exactly.  Weight grids are finer than the default
weight format's resolution, which keeps fixed-point quantization honestly
lossy.

Calibration labels are assigned by the software stage of the same frozen
parameter set (the "teacher"), so every calibration image is correctly
predicted by construction; tests that need the insufficient-calibration
failure path mislabel images deliberately.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .engines import run_stage, sw_config
from .netspec import (
    LayerParameters,
    NetworkSpec,
    ParameterSet,
    parameter_shapes,
    save_parameters,
)
from .tensor import Tensor, write_tensor

DEFAULT_SEED = 7

_WEIGHT_GRID = 1024  # weight draws land on multiples of 1/1024
_BIAS_GRID = 4096


def _fan_in_shift(fan_in: int) -> int:
    """Power-of-two downscale keeping activations O(1) as depth grows:
    roughly 1/sqrt(fan_in) scaling, rounded to a shift."""
    return max(0, round(0.5 * math.log2(fan_in) - 1.8))


def make_parameters(net: NetworkSpec, seed: int = DEFAULT_SEED) -> ParameterSet:
    """Draw a frozen teacher parameter set for ``net`` from ``seed``."""
    rng = np.random.default_rng(seed)
    layers: dict[str, LayerParameters] = {}
    for name, (wshape, bshape) in parameter_shapes(net).items():
        fan_in = int(np.prod(wshape[1:]))
        shift = _fan_in_shift(fan_in)
        w_ints = rng.integers(-_WEIGHT_GRID // 2, _WEIGHT_GRID // 2, size=wshape)
        b_ints = rng.integers(-_BIAS_GRID // 16, _BIAS_GRID // 16, size=bshape)
        layers[name] = LayerParameters(
            weights=w_ints.astype(np.float64) / (_WEIGHT_GRID << shift),
            biases=b_ints.astype(np.float64) / _BIAS_GRID,
        )
    return ParameterSet(network=net.name, layers=layers)


def make_image(net: NetworkSpec, rng: np.random.Generator) -> Tensor:
    """One synthetic 8-bit-style image: integer draws normalized by 255."""
    c, h, w = net.input_shape
    pixels = rng.integers(0, 256, size=c * h * w)
    return Tensor((c, h, w), pixels.astype(np.float64) / 255.0)


def make_images(net: NetworkSpec, count: int, seed: int) -> list[Tensor]:
    rng = np.random.default_rng(seed)
    return [make_image(net, rng) for _ in range(count)]


def make_calibration(net: NetworkSpec, params: ParameterSet, count: int,
                     seed: int) -> list[tuple[Tensor, int]]:
    """Labeled calibration pairs; labels come from the teacher's sw stage."""
    cfg = sw_config()
    pairs = []
    for image in make_images(net, count, seed):
        dump = run_stage(net, params, image, cfg)
        pairs.append((image, dump.prediction))
    return pairs


@dataclass
class FixtureSet:
    """In-memory form of the standard test fixture for a network."""

    net: NetworkSpec
    params: ParameterSet
    calibration: list[tuple[Tensor, int]]
    inputs: list[Tensor]


def make_fixture(net: NetworkSpec, seed: int = DEFAULT_SEED,
                 calibration_count: int = 100, input_count: int = 1) -> FixtureSet:
    """The standard fixture: teacher params, calibration set, unseen inputs.

    Sub-seeds are derived from ``seed`` so the three draws are independent
    streams and the unseen inputs never collide with calibration images.
    """
    params = make_parameters(net, seed)
    calibration = make_calibration(net, params, calibration_count, seed + 1)
    inputs = make_images(net, input_count, seed + 2)
    return FixtureSet(net=net, params=params, calibration=calibration, inputs=inputs)


def write_fixture(fixture: FixtureSet, out_dir: str | os.PathLike,
                  topology_text: str) -> dict[str, str]:
    """Materialize a fixture to disk; returns the paths written.

    Layout: topology.net, params.txt, input_###.txt test images, and a
    calibration/ directory holding the images plus manifest.txt with
    ``<relative-path> <label>`` lines.
    """
    out = os.fspath(out_dir)
    calib_dir = os.path.join(out, "calibration")
    os.makedirs(calib_dir, exist_ok=True)

    topo_path = os.path.join(out, "topology.net")
    with open(topo_path, "w", encoding="utf-8") as f:
        f.write(topology_text)

    params_path = os.path.join(out, "params.txt")
    save_parameters(fixture.params, params_path)

    input_paths = []
    for i, image in enumerate(fixture.inputs):
        p = os.path.join(out, f"input_{i:03d}.txt")
        write_tensor(image, p)
        input_paths.append(p)

    manifest_lines = []
    for i, (image, label) in enumerate(fixture.calibration):
        rel = f"img_{i:03d}.txt"
        write_tensor(image, os.path.join(calib_dir, rel))
        manifest_lines.append(f"{rel} {label}")
    manifest_path = os.path.join(calib_dir, "manifest.txt")
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write("\n".join(manifest_lines) + "\n")

    return {
        "topology": topo_path,
        "params": params_path,
        "inputs": input_paths,
        "manifest": manifest_path,
    }


def read_manifest(path: str | os.PathLike) -> list[tuple[str, int]]:
    """Parse a calibration manifest into (absolute image path, label) pairs.

    Image paths are resolved relative to the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(os.fspath(path)))
    pairs = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(
                    f"line {lineno}: expected '<image-path> <label>'"
                )
            try:
                label = int(parts[1])
            except ValueError:
                raise ValueError(f"line {lineno}: bad label {parts[1]!r}") from None
            img = parts[0]
            if not os.path.isabs(img):
                img = os.path.join(base, img)
            pairs.append((img, label))
    if not pairs:
        raise ValueError("calibration manifest lists no images")
    return pairs
