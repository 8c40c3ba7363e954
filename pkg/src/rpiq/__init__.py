"""Two-stage post-training weight quantization.

Stage 1 quantizes each layer column by column, steering later columns to
absorb the rounding error through the calibration Hessian. Stage 2 sweeps
column blocks with damped projected least-squares updates against a retained
calibration instance, lowering reconstruction loss without touching the grid
format. Artifacts round-trip through a small self-describing container.
"""

from .calibration import (
    BlockPartition,
    CalibrationSnapshot,
    HessianAccumulator,
    accumulate,
    capture_snapshot,
    damp,
    partition,
)
from .container import (
    ModelManifest,
    QuantizedArtifact,
    QuantizedLayer,
    TraceSummary,
    dequantize_layer,
    load_checkpoint,
    load_quantized,
    save_checkpoint,
    save_quantized,
)
from .errors import (
    ArgumentError,
    CalibrationError,
    CorruptFileError,
    FactorizationError,
    FormatVersionError,
    ModelSpecError,
    NumericError,
    ShapeError,
    SingularityError,
)
from .gptq import Stage1Result, quantize_layer_stage1, rtn_baseline
from .grid import (
    PackedBlock,
    QuantGrid,
    dequantize,
    fit_grid,
    fit_layer_grid,
    pack_codes,
    quantize,
    unpack_codes,
)
from .harness import (
    ComparisonReport,
    MemoryMeter,
    OverheadDelta,
    PipelineResult,
    QuantizeConfig,
    SyntheticModelSpec,
    compare_methods,
    generate_model,
    measure_overheads,
    quantize_model,
    reduction_pct,
)
from .refine import (
    RefineConfig,
    RefineResult,
    RefinementState,
    RefinementTrace,
    directed_residual,
    global_residual,
    refine_layer,
    solve_block,
    update_block,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "BlockPartition",
    "CalibrationError",
    "CalibrationSnapshot",
    "ComparisonReport",
    "CorruptFileError",
    "FactorizationError",
    "FormatVersionError",
    "HessianAccumulator",
    "MemoryMeter",
    "ModelManifest",
    "ModelSpecError",
    "NumericError",
    "OverheadDelta",
    "PackedBlock",
    "PipelineResult",
    "QuantGrid",
    "QuantizeConfig",
    "QuantizedArtifact",
    "QuantizedLayer",
    "RefineConfig",
    "RefineResult",
    "RefinementState",
    "RefinementTrace",
    "ShapeError",
    "SingularityError",
    "Stage1Result",
    "SyntheticModelSpec",
    "TraceSummary",
    "accumulate",
    "capture_snapshot",
    "compare_methods",
    "damp",
    "dequantize",
    "dequantize_layer",
    "directed_residual",
    "fit_grid",
    "fit_layer_grid",
    "generate_model",
    "global_residual",
    "load_checkpoint",
    "load_quantized",
    "measure_overheads",
    "pack_codes",
    "partition",
    "quantize",
    "quantize_layer_stage1",
    "quantize_model",
    "reduction_pct",
    "refine_layer",
    "rtn_baseline",
    "save_checkpoint",
    "save_quantized",
    "solve_block",
    "unpack_codes",
    "update_block",
]
