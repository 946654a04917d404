"""bnnkit: train, compile, execute and analyze small binary neural classifiers.

The toolkit covers the full path from latent-weight training with a
straight-through estimator, through folding batch-norm + sign into integer
thresholds over packed XNOR/popcount arithmetic, to cycle-accurate folding
analysis and gradient-based attention maps.
"""

from .bitcore import BitTensor, binarize, pack, unpack, xnor_popcount_dot
from .compiler import (
    CompiledLayer,
    CompiledModel,
    ThresholdParams,
    compile_model,
    emit_model,
    fold_batchnorm_to_threshold,
    load_model,
)
from .data import (
    ArrayDataset,
    AugmentConfig,
    Manifest,
    augment,
    balance,
    build_manifest,
    confusion_matrix,
    metrics_from_confusion,
    synth_quadrant_dataset,
)
from .engine import FeatureStream, MvtuConfig, classify, maxpool_or, mvtu_execute, sliding_window
from .errors import (
    BadMagicError,
    BnnkitError,
    CompileWarning,
    HeaderBoundsError,
    ModelFormatError,
    TruncatedFileError,
    UnsupportedVersionError,
)
from .gradcam import Heatmap, grad_cam, render_overlay, save_overlay
from .netspec import NetworkSpec, builtin_spec, count_binary_ops, infer_shapes
from .perfmodel import (
    FoldingConfig,
    PipelineReport,
    layer_cycles,
    pipeline_report,
    reference_folding,
    suggest_folding,
)
from .train import (
    TrainConfig,
    TrainedModel,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "BitTensor",
    "binarize",
    "pack",
    "unpack",
    "xnor_popcount_dot",
    "CompiledLayer",
    "CompiledModel",
    "ThresholdParams",
    "compile_model",
    "emit_model",
    "fold_batchnorm_to_threshold",
    "load_model",
    "ArrayDataset",
    "AugmentConfig",
    "Manifest",
    "augment",
    "balance",
    "build_manifest",
    "confusion_matrix",
    "metrics_from_confusion",
    "synth_quadrant_dataset",
    "FeatureStream",
    "MvtuConfig",
    "classify",
    "maxpool_or",
    "mvtu_execute",
    "sliding_window",
    "BnnkitError",
    "BadMagicError",
    "CompileWarning",
    "HeaderBoundsError",
    "ModelFormatError",
    "TruncatedFileError",
    "UnsupportedVersionError",
    "Heatmap",
    "grad_cam",
    "render_overlay",
    "save_overlay",
    "NetworkSpec",
    "builtin_spec",
    "count_binary_ops",
    "infer_shapes",
    "FoldingConfig",
    "PipelineReport",
    "layer_cycles",
    "pipeline_report",
    "reference_folding",
    "suggest_folding",
    "TrainConfig",
    "TrainedModel",
    "init_model",
    "load_checkpoint",
    "predict",
    "save_checkpoint",
    "train_model",
    "__version__",
]
