"""Domain-specific normalization for cross-subject generalization of
1D-CNN time-series classifiers.

Core pieces: a double-precision reverse-mode tensor engine, the bn/in/ibn
normalization family and its per-domain banked variants (dsbn/dsin/dson),
residual 1D classifiers, six unseen-domain inference strategies, and a
leave-one-subject-out evaluation harness with a synthetic covariate-shift
generator.
"""

from .aggregation import (
    AGGREGATE_METHODS,
    ALL_METHODS,
    SELECTION_METHODS,
    BranchOutputs,
    aggregate,
    branch_distance_euclidean,
    branch_distance_wasserstein,
    predict_with_selection,
)
from .autodiff import (
    Adam,
    Parameter,
    Tensor,
    conv1d,
    cross_entropy,
    dropout,
    gelu,
    grad_check,
    sigmoid,
    softmax,
    softmax_np,
)
from .data import (
    DatasetManifest,
    EegSample,
    SyntheticConfig,
    generate_synthetic,
    group_by_subject,
    load_dataset,
    save_synthetic_dataset,
    split_loso,
)
from .harness import (
    ExperimentConfig,
    FoldResult,
    LosoReport,
    emit_report,
    evaluate_fold,
    load_checkpoint,
    run_loso,
    save_checkpoint,
    train_fold,
)
from .metrics import MetricsReport, compute_auroc, compute_metrics
from .models import (
    ForwardTrace,
    ModelConfig,
    ResidualBlockConfig,
    ResNet1D,
    build_model,
)
from .norms import (
    BatchNorm,
    ChannelStats,
    DomainSpecificNorm,
    InstanceBatchNorm,
    InstanceNorm,
    NormState,
    batch_norm,
    compute_instance_stats,
    instance_norm,
    make_norm_layer,
    update_running_stats,
)

__version__ = "0.1.0"
