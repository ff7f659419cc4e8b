"""coverify: three-stage layer-by-layer co-verification for small CNNs.

A network runs through a double-precision software stage, a float32 or
fixed-point design stage, and a stream-driven hardware-emulation stage; each
run dumps every layer's output values.  Calibration runs build a statistical
envelope file; a three-way layer-by-layer similarity comparison certifies a
deployment or names the first faulty layer.
"""

from .blobio import (
    BlobDump,
    DumpFormatError,
    LayerRecord,
    StructureMismatchError,
    canonical,
    canonical_array,
    format_value,
    parse_blob_dump,
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
from .fixedpoint import (
    AccumulatorOverflowError,
    FixedPointFormat,
    QuantizedValue,
    dequantize,
    dequantize_array,
    fixed_mac,
    quantize,
    quantize_array,
    quantize_real,
    rescale_accumulator,
)
from .fixtures import FixtureSet, make_fixture, make_parameters
from .netspec import (
    LayerParameters,
    LayerShape,
    LayerSpec,
    NetworkSpec,
    ParameterError,
    ParameterSet,
    TopologyError,
    bundled_topology,
    infer_shapes,
    load_parameters,
    load_topology,
    parse_parameters,
    parse_topology,
    quantize_parameters,
    serialize_parameters,
    serialize_topology,
)
from .spvf import (
    CalibrationError,
    EnvelopeReport,
    SpvfFile,
    SpvfFormatError,
    check_blobs,
    generate_spvf,
    parse_spvf,
    read_spvf,
    spvf_to_text,
    write_spvf,
)
from .tensor import Tensor, from3d, parse_tensor, read_tensor, write_tensor
from .verifier import (
    SimilarityReport,
    VerifierConfig,
    recommend_action,
    render_report_lines,
    render_report_table,
    similarity_score,
    three_way_compare,
)

__version__ = "0.1.0"
