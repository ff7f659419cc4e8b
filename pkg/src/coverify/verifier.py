"""Three-way layer-by-layer similarity verification.

The score of two equal-length value sequences is the mean over elements of
``min(|a|,|b|) / max(|a|,|b|)`` (written ``1 - (X - Y)/X`` with
``X = max(|a|,|b|)``, ``Y = min(|a|,|b|)``), where an element with
``X < zero_epsilon`` — both values effectively zero — contributes 1.  A zero
against a nonzero contributes 0.  The score is symmetric, lies in [0, 1],
and equals exactly 1.0 on identical sequences.

``three_way_compare`` takes the software, design, and hardware dumps of the
same image, scores design and hardware against the software reference per
layer, and additionally counts exact design-vs-hardware element mismatches —
the two stages are bit-identical absent faults, so any exact mismatch marks
the first faulty layer even when it is far too small to move a score across
the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blobio import BlobDump, StructureMismatchError, format_value

DEFAULT_THRESHOLD = 0.90
DEFAULT_ZERO_EPSILON = 1e-12


@dataclass(frozen=True)
class VerifierConfig:
    threshold: float = DEFAULT_THRESHOLD
    zero_epsilon: float = DEFAULT_ZERO_EPSILON

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        if self.zero_epsilon < 0.0:
            raise ValueError("zero_epsilon must be >= 0")


def similarity_score(reference, candidate, zero_epsilon: float = DEFAULT_ZERO_EPSILON) -> float:
    """Mean per-element magnitude-ratio similarity of two sequences."""
    a = np.asarray(reference, dtype=np.float64).reshape(-1)
    b = np.asarray(candidate, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("cannot score empty sequences")
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    aa = np.abs(a)
    ab = np.abs(b)
    x = np.maximum(aa, ab)
    y = np.minimum(aa, ab)
    both_zero = x < zero_epsilon
    # 1 - (X - Y)/X, with the zero-vs-zero convention applied afterwards
    safe_x = np.where(both_zero, 1.0, x)
    terms = np.where(both_zero, 1.0, 1.0 - (x - y) / safe_x)
    return math.fsum(terms.tolist()) / a.size


@dataclass
class LayerScore:
    name: str
    count: int
    sc_design: float
    sc_hw: float
    sign_mismatch_design: int
    sign_mismatch_hw: int
    hw_design_mismatches: int
    passed: bool


@dataclass
class AdviceRecord:
    verified: bool
    stage: str | None  # "design" | "hardware" | None when verified
    layer: str | None
    text: str


@dataclass
class SimilarityReport:
    threshold: float
    layers: list[LayerScore] = field(default_factory=list)
    prediction_sw: int = 0
    prediction_design: int = 0
    prediction_hw: int = 0
    predictions_consistent: bool = True
    first_divergent: str | None = None
    verified: bool = False
    advice: str = ""

    def layer(self, name: str) -> LayerScore:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(f"no score for layer {name!r}")


def _check_structure(sw: BlobDump, other: BlobDump, which: str) -> None:
    if len(sw.records) != len(other.records):
        raise StructureMismatchError(
            f"sw dump has {len(sw.records)} layers, {which} dump has "
            f"{len(other.records)}"
        )
    for rs, ro in zip(sw.records, other.records):
        if rs.name != ro.name:
            raise StructureMismatchError(
                f"layer {rs.name!r} in sw dump does not match {ro.name!r} "
                f"in {which} dump"
            )
        if rs.count != ro.count:
            raise StructureMismatchError(
                f"layer {rs.name}: sw dump has {rs.count} elements, "
                f"{which} dump has {ro.count}"
            )


def _sign_mismatches(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(a * b < 0.0))


def recommend_action(report: SimilarityReport) -> AdviceRecord:
    """Derive the verdict and next debugging step from a scored report.

    Priority: a design-stage score failure first (fix the design model before
    trusting hardware numbers), then any hardware-stage failure (score below
    threshold or exact divergence from the design stage), then prediction
    inconsistency; otherwise the deployment is verified.
    """
    for l in report.layers:
        if l.sc_design < report.threshold:
            return AdviceRecord(
                verified=False, stage="design", layer=l.name,
                text=(
                    f"design stage diverges at layer {l.name} "
                    f"(score {format_value(l.sc_design)} < threshold "
                    f"{format_value(report.threshold)}): rework the design-stage "
                    f"implementation of {l.name} and re-check its output values"
                ),
            )
    for l in report.layers:
        if l.sc_hw < report.threshold or l.hw_design_mismatches > 0:
            if l.sc_hw < report.threshold:
                why = (
                    f"score {format_value(l.sc_hw)} < threshold "
                    f"{format_value(report.threshold)}"
                )
            else:
                why = (
                    f"{l.hw_design_mismatches} element(s) differ exactly from "
                    f"the design stage"
                )
            return AdviceRecord(
                verified=False, stage="hardware", layer=l.name,
                text=(
                    f"hardware stage diverges at layer {l.name} ({why}): "
                    f"rebuild the hardware configuration and redeploy"
                ),
            )
    if not report.predictions_consistent:
        last = report.layers[-1].name if report.layers else None
        return AdviceRecord(
            verified=False, stage="hardware", layer=last,
            text=(
                "predictions disagree across stages with all layers above "
                "threshold: inspect the final layer outputs and redeploy"
            ),
        )
    return AdviceRecord(verified=True, stage=None, layer=None,
                        text="deployment verified")


def three_way_compare(sw: BlobDump, design: BlobDump, hw: BlobDump,
                      cfg: VerifierConfig | None = None) -> SimilarityReport:
    """Score design and hw dumps against the sw reference, layer by layer."""
    cfg = cfg or VerifierConfig()
    _check_structure(sw, design, "design")
    _check_structure(sw, hw, "hw")

    report = SimilarityReport(threshold=cfg.threshold)
    for rs, rd, rh in zip(sw.records, design.records, hw.records):
        sc_des = similarity_score(rs.values, rd.values, cfg.zero_epsilon)
        sc_hw = similarity_score(rs.values, rh.values, cfg.zero_epsilon)
        report.layers.append(LayerScore(
            name=rs.name,
            count=rs.count,
            sc_design=sc_des,
            sc_hw=sc_hw,
            sign_mismatch_design=_sign_mismatches(rs.values, rd.values),
            sign_mismatch_hw=_sign_mismatches(rs.values, rh.values),
            hw_design_mismatches=int(np.count_nonzero(rd.values != rh.values)),
            passed=sc_des >= cfg.threshold and sc_hw >= cfg.threshold,
        ))

    report.prediction_sw = sw.prediction
    report.prediction_design = design.prediction
    report.prediction_hw = hw.prediction
    report.predictions_consistent = (
        sw.prediction == design.prediction == hw.prediction
    )
    for l in report.layers:
        if not l.passed or l.hw_design_mismatches > 0:
            report.first_divergent = l.name
            break
    advice = recommend_action(report)
    report.verified = advice.verified
    report.advice = advice.text
    return report


def render_report_lines(report: SimilarityReport) -> str:
    """The machine-readable report: score lines, prediction line, advice."""
    lines = []
    for l in report.layers:
        lines.append(
            f"score {l.name} n={l.count} sc_des={format_value(l.sc_design)} "
            f"sc_hw={format_value(l.sc_hw)} pass={1 if l.passed else 0}"
        )
    lines.append(
        f"prediction sw={report.prediction_sw} design={report.prediction_design} "
        f"hw={report.prediction_hw} "
        f"consistent={1 if report.predictions_consistent else 0}"
    )
    lines.append(f"advice {report.advice}")
    return "\n".join(lines) + "\n"


def render_report_table(report: SimilarityReport) -> str:
    """A human-oriented table of the same results."""
    name_w = max([len(l.name) for l in report.layers] + [5])
    header = (
        f"{'layer':<{name_w}}  {'n':>6}  {'sc_des':>12}  {'sc_hw':>12}  "
        f"{'hw!=des':>7}  pass"
    )
    rows = [header, "-" * len(header)]
    for l in report.layers:
        rows.append(
            f"{l.name:<{name_w}}  {l.count:>6}  {l.sc_design:>12.9f}  "
            f"{l.sc_hw:>12.9f}  {l.hw_design_mismatches:>7}  "
            f"{'ok' if l.passed else 'FAIL'}"
        )
    rows.append(
        f"predictions: sw={report.prediction_sw} "
        f"design={report.prediction_design} hw={report.prediction_hw} "
        f"({'consistent' if report.predictions_consistent else 'inconsistent'})"
    )
    rows.append(f"advice: {report.advice}")
    return "\n".join(rows) + "\n"
