"""Command-line interface.

Subcommands:

* ``shapes``      — print per-layer element counts and shapes of a topology.
* ``run``         — run one stage over one image and write its dump file.
* ``gen-spvf``    — build the calibration envelope file.
* ``check-spvf``  — check a dump against an envelope.
* ``verify``      — three-way compare sw/design/hw dump files.
* ``pipeline``    — envelope generation, all three stage runs, envelope
                    gates, and the final three-way verification in one call.
* ``gen-fixture`` — materialize a seeded fixture set to disk.

Exit codes: 0 success, 1 verification failure, 2 configuration or parse
error, 3 engine error, 4 calibration error.
"""

from __future__ import annotations

import argparse
import os
import re
import sys

from . import figures
from .blobio import (
    BlobDump,
    DumpFormatError,
    StructureMismatchError,
    read_blob_dump,
    write_blob_dump,
)
from .engines import (
    DEFAULT_ACTIVATION_FORMAT,
    DEFAULT_WEIGHT_FORMAT,
    DOUBLE,
    FLOAT32,
    EngineError,
    FaultConfigError,
    FaultSpec,
    NumericMode,
    StageConfig,
    run_stage,
)
from .fixedpoint import AccumulatorOverflowError, FixedPointFormat
from .fixtures import (
    DEFAULT_SEED,
    make_fixture,
    read_manifest,
    write_fixture,
)
from .netspec import (
    BUNDLED_NETWORKS,
    NetworkSpec,
    ParameterError,
    TopologyError,
    bundled_topology_text,
    infer_shapes,
    load_parameters,
    parse_topology,
)
from .spvf import (
    DEFAULT_IMAGES,
    DEFAULT_PASS_FRACTION,
    DEFAULT_SLACK,
    CalibrationError,
    SpvfFormatError,
    check_blobs,
    generate_spvf,
    read_spvf,
    render_envelope_report,
    write_spvf,
)
from .tensor import read_tensor
from .verifier import (
    DEFAULT_THRESHOLD,
    VerifierConfig,
    render_report_lines,
    render_report_table,
    three_way_compare,
)

EXIT_OK = 0
EXIT_VERIFICATION = 1
EXIT_CONFIG = 2
EXIT_ENGINE = 3
EXIT_CALIBRATION = 4

_FIXED_RE = re.compile(r"^fixed:w(\d+)\.(\d+):a(\d+)\.(\d+)$")


def parse_numeric_spec(spec: str) -> NumericMode:
    """``double`` | ``float32`` | ``fixed`` | ``fixed:wW.F:aW.F``"""
    if spec == "double":
        return DOUBLE
    if spec == "float32":
        return FLOAT32
    if spec == "fixed":
        return NumericMode("fixed", DEFAULT_WEIGHT_FORMAT, DEFAULT_ACTIVATION_FORMAT)
    m = _FIXED_RE.match(spec)
    if not m:
        raise ValueError(
            f"bad numeric spec {spec!r}; expected double, float32, fixed, "
            f"or fixed:wW.F:aW.F"
        )
    wt, wf, at, af = (int(g) for g in m.groups())
    return NumericMode("fixed", FixedPointFormat(wt, wf), FixedPointFormat(at, af))


def parse_fault_spec(spec: str) -> FaultSpec:
    """``<layer>:<scale|zero|bitflip>:<arg>`` with bitflip arg ``index,bit``."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"bad fault spec {spec!r}; expected layer:kind:arg")
    layer, kind, arg = parts
    if kind == "scale":
        return FaultSpec(layer=layer, kind="scale", factor=float(arg))
    if kind == "zero":
        return FaultSpec(layer=layer, kind="zero", index=int(arg))
    if kind == "bitflip":
        sub = arg.split(",")
        if len(sub) != 2:
            raise ValueError(
                f"bad bitflip argument {arg!r}; expected '<index>,<bit>'"
            )
        return FaultSpec(layer=layer, kind="bitflip", index=int(sub[0]),
                         bit=int(sub[1]))
    raise ValueError(f"unknown fault kind {kind!r}")


def _load_topology_arg(value: str) -> NetworkSpec:
    """A bundled network name or a path to a topology file."""
    if value in BUNDLED_NETWORKS:
        return parse_topology(bundled_topology_text(value))
    with open(value, "r", encoding="utf-8") as f:
        return parse_topology(f.read())


def _topology_text_arg(value: str) -> str:
    if value in BUNDLED_NETWORKS:
        return bundled_topology_text(value)
    with open(value, "r", encoding="utf-8") as f:
        return f.read()


def _image_id(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _stage_mode(stage: str, numeric: str | None) -> NumericMode:
    if numeric is not None:
        return parse_numeric_spec(numeric)
    return DOUBLE if stage == "sw" else FLOAT32


def _calibration_tensors(manifest_path: str):
    for img_path, label in read_manifest(manifest_path):
        yield read_tensor(img_path), label


# ---------------------------------------------------------------------------
# subcommands


def cmd_shapes(args) -> int:
    net = _load_topology_arg(args.topology)
    for s in infer_shapes(net):
        c, h, w = s.shape
        print(f"{s.name} {s.count} {c}x{h}x{w}")
    return EXIT_OK


def cmd_run(args) -> int:
    net = _load_topology_arg(args.topology)
    params = load_parameters(args.params, net)
    image = read_tensor(args.image)
    fault = parse_fault_spec(args.fault) if args.fault else None
    cfg = StageConfig(stage=args.stage, mode=_stage_mode(args.stage, args.numeric),
                      fault=fault)
    dump = run_stage(net, params, image, cfg, image_id=_image_id(args.image))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"file_{args.stage}.txt")
    write_blob_dump(dump, path)
    print(path)
    return EXIT_OK


def cmd_gen_spvf(args) -> int:
    net = _load_topology_arg(args.topology)
    params = load_parameters(args.params, net)
    spvf = generate_spvf(net, params, _calibration_tensors(args.calibration),
                         n=args.n)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "spvf.txt")
    write_spvf(spvf, path)
    print(f"{path} ({spvf.images} images)")
    if args.figures:
        os.makedirs(args.figures, exist_ok=True)
        for layer in spvf.layers:
            figures.envelope_bounds_figure(
                spvf, layer.name,
                os.path.join(args.figures, f"bounds_{layer.name}.png"))
    return EXIT_OK


def cmd_check_spvf(args) -> int:
    dump = read_blob_dump(args.dump)
    spvf = read_spvf(args.spvf)
    report = check_blobs(dump, spvf, slack=args.slack,
                         pass_fraction=args.pass_fraction)
    sys.stdout.write(render_envelope_report(report))
    if args.figures:
        os.makedirs(args.figures, exist_ok=True)
        figures.envelope_check_figure(
            report, os.path.join(args.figures, "envelope_check.png"))
    return EXIT_OK if report.passed else EXIT_VERIFICATION


def cmd_verify(args) -> int:
    sw = read_blob_dump(args.sw)
    design = read_blob_dump(args.design)
    hw = read_blob_dump(args.hw)
    report = three_way_compare(sw, design, hw,
                               VerifierConfig(threshold=args.threshold))
    text = render_report_lines(report)
    sys.stdout.write(text)
    if args.pretty:
        sys.stdout.write(render_report_table(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as f:
            f.write(text)
    if args.figures:
        os.makedirs(args.figures, exist_ok=True)
        figures.similarity_figure(
            report, os.path.join(args.figures, "similarity.png"))
    return EXIT_OK if report.verified else EXIT_VERIFICATION


def _envelope_gate(dump: BlobDump, spvf, args, stage_label: str,
                   action: str) -> bool:
    report = check_blobs(dump, spvf, slack=args.slack,
                         pass_fraction=args.pass_fraction)
    if report.passed:
        return True
    sys.stdout.write(render_envelope_report(report))
    failing = next(l.name for l in report.layers if not l.passed)
    print(f"gate {stage_label}-envelope failed at layer {failing}: {action}")
    return False


def cmd_pipeline(args) -> int:
    net = _load_topology_arg(args.topology)
    params = load_parameters(args.params, net)
    mode = parse_numeric_spec(args.numeric) if args.numeric else FLOAT32
    fault = parse_fault_spec(args.fault) if args.fault else None
    os.makedirs(args.out, exist_ok=True)

    spvf = generate_spvf(net, params, _calibration_tensors(args.calibration),
                         n=args.n)
    spvf_path = os.path.join(args.out, "spvf.txt")
    write_spvf(spvf, spvf_path)
    print(f"spvf {spvf_path} images={spvf.images}")

    if args.figures:
        os.makedirs(args.figures, exist_ok=True)

    sw_cfg = StageConfig(stage="sw", mode=DOUBLE)
    design_cfg = StageConfig(stage="design", mode=mode)
    hw_cfg = StageConfig(stage="hw", mode=mode, fault=fault)
    vcfg = VerifierConfig(threshold=args.threshold)

    for image_path in args.image:
        image = read_tensor(image_path)
        image_id = _image_id(image_path)

        dumps = {}
        for label, cfg in (("sw", sw_cfg), ("design", design_cfg), ("hw", hw_cfg)):
            dump = run_stage(net, params, image, cfg, image_id=image_id)
            path = os.path.join(args.out, f"file_{label}_{image_id}.txt")
            write_blob_dump(dump, path)
            print(f"dump {path}")
            dumps[label] = dump

        if not _envelope_gate(
                dumps["sw"], spvf, args, "sw",
                "software outputs leave the calibration envelope; re-examine "
                "the model configuration and calibration set"):
            return EXIT_VERIFICATION
        if not _envelope_gate(
                dumps["design"], spvf, args, "design",
                "design-stage outputs leave the calibration envelope; rework "
                "the design-stage implementation"):
            return EXIT_VERIFICATION
        if not _envelope_gate(
                dumps["hw"], spvf, args, "hw",
                "hardware outputs leave the calibration envelope; rebuild the "
                "hardware configuration and redeploy"):
            return EXIT_VERIFICATION

        report = three_way_compare(dumps["sw"], dumps["design"], dumps["hw"], vcfg)
        text = render_report_lines(report)
        sys.stdout.write(text)
        with open(os.path.join(args.out, f"report_{image_id}.txt"), "w",
                  encoding="utf-8") as f:
            f.write(text)
        if args.figures:
            figures.similarity_figure(
                report, os.path.join(args.figures, f"similarity_{image_id}.png"))
            figures.envelope_check_figure(
                check_blobs(dumps["hw"], spvf, slack=args.slack,
                            pass_fraction=args.pass_fraction),
                os.path.join(args.figures, f"envelope_hw_{image_id}.png"))
        if not report.verified:
            return EXIT_VERIFICATION
    return EXIT_OK


def cmd_gen_fixture(args) -> int:
    topo_text = _topology_text_arg(args.topology)
    net = parse_topology(topo_text)
    fixture = make_fixture(net, seed=args.seed,
                           calibration_count=args.n_calibration,
                           input_count=args.n_inputs)
    paths = write_fixture(fixture, args.out, topo_text)
    print(f"topology {paths['topology']}")
    print(f"params {paths['params']}")
    for p in paths["inputs"]:
        print(f"input {p}")
    print(f"manifest {paths['manifest']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coverify",
        description="Three-stage layer-by-layer CNN co-verification toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("shapes", help="print per-layer element counts and shapes")
    p.add_argument("--topology", required=True,
                   help="bundled network name or topology file path")
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("run", help="run one stage over one image")
    p.add_argument("--topology", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stage", required=True, choices=("sw", "design", "hw"))
    p.add_argument("--numeric", default=None,
                   help="double | float32 | fixed | fixed:wW.F:aW.F "
                        "(default: double for sw, float32 otherwise)")
    p.add_argument("--fault", default=None,
                   help="<layer>:<scale|zero|bitflip>:<arg> (hw stage only; "
                        "bitflip arg is '<index>,<bit>')")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gen-spvf", help="generate the calibration envelope")
    p.add_argument("--topology", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--calibration", required=True,
                   help="calibration manifest: '<image-path> <label>' lines")
    p.add_argument("--n", type=int, default=DEFAULT_IMAGES,
                   help="correctly predicted images to accumulate")
    p.add_argument("--out", required=True)
    p.add_argument("--figures", default=None,
                   help="directory for per-layer envelope band figures")
    p.set_defaults(func=cmd_gen_spvf)

    p = sub.add_parser("check-spvf", help="check a dump against an envelope")
    p.add_argument("--dump", required=True)
    p.add_argument("--spvf", required=True)
    p.add_argument("--slack", type=float, default=DEFAULT_SLACK)
    p.add_argument("--pass-fraction", type=float, default=DEFAULT_PASS_FRACTION)
    p.add_argument("--figures", default=None)
    p.set_defaults(func=cmd_check_spvf)

    p = sub.add_parser("verify", help="three-way compare sw/design/hw dumps")
    p.add_argument("--sw", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--hw", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", default=None, help="also write report.txt here")
    p.add_argument("--figures", default=None)
    p.add_argument("--pretty", action="store_true",
                   help="also print a human-oriented table")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pipeline",
                       help="envelope + three stages + verification in one run")
    p.add_argument("--topology", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--calibration", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--numeric", default=None,
                   help="design/hw numeric mode (default float32)")
    p.add_argument("--fault", default=None)
    p.add_argument("--n", type=int, default=DEFAULT_IMAGES)
    p.add_argument("--slack", type=float, default=DEFAULT_SLACK)
    p.add_argument("--pass-fraction", type=float, default=DEFAULT_PASS_FRACTION)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", default=None)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("gen-fixture", help="write a seeded fixture set to disk")
    p.add_argument("--topology", required=True,
                   help="bundled network name or topology file path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--n-calibration", type=int, default=DEFAULT_IMAGES)
    p.add_argument("--n-inputs", type=int, default=1)
    p.set_defaults(func=cmd_gen_fixture)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CalibrationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (EngineError, AccumulatorOverflowError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ENGINE
    except (TopologyError, ParameterError, DumpFormatError, SpvfFormatError,
            StructureMismatchError, FaultConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
