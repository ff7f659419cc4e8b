"""Figure rendering for reports: charts written next to the text output.

All renderers write PNG files via the Agg backend and return the path
written, so they work headless.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .spvf import EnvelopeReport, SpvfFile
from .verifier import SimilarityReport


def similarity_figure(report: SimilarityReport, path: str | os.PathLike) -> str:
    """Grouped bars of per-layer design/hw similarity with the threshold."""
    names = [l.name for l in report.layers]
    sc_des = [l.sc_design for l in report.layers]
    sc_hw = [l.sc_hw for l in report.layers]
    xs = np.arange(len(names))

    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(names)), 4.0))
    ax.bar(xs - 0.18, sc_des, width=0.36, label="design vs sw")
    ax.bar(xs + 0.18, sc_hw, width=0.36, label="hw vs sw")
    ax.axhline(report.threshold, color="red", linestyle="--", linewidth=1,
               label=f"threshold {report.threshold:g}")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("similarity score")
    ax.set_title("Layer similarity vs software reference")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return os.fspath(path)


def envelope_check_figure(report: EnvelopeReport, path: str | os.PathLike) -> str:
    """Per-layer in-bounds fraction against the pass fraction."""
    names = [l.name for l in report.layers]
    fracs = [l.in_fraction for l in report.layers]
    xs = np.arange(len(names))

    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(names)), 4.0))
    colors = ["tab:blue" if l.passed else "tab:red" for l in report.layers]
    ax.bar(xs, fracs, width=0.6, color=colors)
    ax.axhline(report.pass_fraction, color="red", linestyle="--", linewidth=1,
               label=f"pass fraction {report.pass_fraction:g}")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("fraction of elements in bounds")
    ax.set_title("Envelope check")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return os.fspath(path)


def envelope_bounds_figure(spvf: SpvfFile, layer_name: str,
                           path: str | os.PathLike) -> str:
    """The min/max band of one layer's envelope over element index."""
    layer = spvf.layer(layer_name)
    xs = np.arange(layer.count)

    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.fill_between(xs, layer.bounds_min, layer.bounds_max, alpha=0.4,
                    label="observed min/max band")
    ax.axhline(layer.stats.mean, color="black", linewidth=1,
               label=f"mean {layer.stats.mean:.4g}")
    ax.set_xlabel("element index")
    ax.set_ylabel("value")
    ax.set_title(f"Envelope for layer {layer_name} ({spvf.images} images)")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return os.fspath(path)
