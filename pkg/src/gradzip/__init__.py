"""Error-bounded lossy compression for federated-learning gradient updates.

The package is organized as a four-stage codec (predict, quantize, entropy
code, lossless backend) wrapped in a round-based client/server pipeline,
plus a synthetic trace generator, a communication-time simulator, and a
command line front end.
"""

from .codec import (
    DEFAULT_BIN_CAP,
    MODE_ABSOLUTE,
    MODE_RELATIVE,
    ErrorBoundConfig,
    HuffmanBlock,
    QuantizedStream,
    dequantize,
    entropy_decode,
    entropy_encode,
    lossless_compress,
    lossless_decompress,
    quantize,
    resolve_bound,
)
from .errors import (
    DataError,
    FormatError,
    GradzipError,
    IntegrityError,
    ProtocolError,
    UsageError,
)
from .flsim import (
    CommModel,
    ModeComparison,
    RoundReport,
    SimConfig,
    break_even_bandwidth,
    comm_times,
    compare_modes,
    fedavg_mean,
    reports_to_csv,
    run_simulation,
)
from .pipeline import (
    CompressedPayload,
    PipelineParams,
    SyncState,
    compress_round,
    decompress_round,
    describe_blob,
    frame_payload,
    iter_payloads,
    parse_payload,
)
from .predictor import (
    MagPredictorState,
    PredictParams,
    SignBitmap,
    SignTensor,
    baseline_predict,
    bitmap_overhead_ratio,
    decode_bitmap,
    encode_bitmap,
    gradient_correlation,
    predict_magnitude,
    predict_signs,
    reconstruct_signs,
    sign_consistency,
)
from .trace import (
    MODE_FULL_BATCH,
    MODE_MINI_BATCH,
    GradientTensor,
    GradientTrace,
    LayerSpec,
    SynthConfig,
    abs_stats,
    load_trace,
    save_trace,
    synth_trace,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_BIN_CAP",
    "MODE_ABSOLUTE",
    "MODE_RELATIVE",
    "MODE_FULL_BATCH",
    "MODE_MINI_BATCH",
    "CommModel",
    "CompressedPayload",
    "DataError",
    "ErrorBoundConfig",
    "FormatError",
    "GradientTensor",
    "GradientTrace",
    "GradzipError",
    "HuffmanBlock",
    "IntegrityError",
    "LayerSpec",
    "MagPredictorState",
    "ModeComparison",
    "PipelineParams",
    "PredictParams",
    "ProtocolError",
    "QuantizedStream",
    "RoundReport",
    "SignBitmap",
    "SignTensor",
    "SimConfig",
    "SynthConfig",
    "SyncState",
    "UsageError",
    "abs_stats",
    "baseline_predict",
    "bitmap_overhead_ratio",
    "break_even_bandwidth",
    "comm_times",
    "compare_modes",
    "compress_round",
    "decode_bitmap",
    "decompress_round",
    "dequantize",
    "describe_blob",
    "encode_bitmap",
    "entropy_decode",
    "entropy_encode",
    "fedavg_mean",
    "frame_payload",
    "gradient_correlation",
    "iter_payloads",
    "load_trace",
    "lossless_compress",
    "lossless_decompress",
    "parse_payload",
    "predict_magnitude",
    "predict_signs",
    "quantize",
    "reconstruct_signs",
    "reports_to_csv",
    "resolve_bound",
    "run_simulation",
    "save_trace",
    "sign_consistency",
    "synth_trace",
]
