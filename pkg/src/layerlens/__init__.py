"""Layerwise spectral analysis and OOD detection for conv classifiers.

The package reads models and datasets from small binary formats (see
`layerlens.io`), runs them through a deterministic numpy inference engine
with named tap points, and offers per-layer diagnostics: stable ranks,
truncated weight-space projections, Mahalanobis feature scoring, CKA
similarity between layers, noise sensitivity, and prediction-bias rates.
"""

from .engine import (
    FeatureBatch,
    TapPoint,
    all_tap_ids,
    analysis_taps,
    block_boundary_taps,
    forward,
    forward_from,
    forward_truncated,
    im2col,
    normalize_images,
    penultimate_tap,
)
from .errors import (
    BlobIOError,
    DomainError,
    FormatError,
    NumericError,
    ShapeError,
    TopologyError,
    ValidationError,
)
from .io import (
    DatasetBlob,
    LayerSpec,
    ModelGraph,
    load_dataset,
    load_model,
    read_tensor,
    save_model,
    write_dataset,
    write_tensor,
)
from .metrics import (
    ScoreSet,
    auroc,
    coefficient_of_variation,
    max_softmax,
    prediction_rates,
    quantile_summary,
)
from .sensitivity import SensitivityReport, noise_sensitivity, sensitivity_auroc
from .similarity import GramEig, SimilarityReport, cka, cka_grid, gram
from .spectral import (
    LocalLinearOp,
    ProjectionBasis,
    conv_local_operator,
    parameter_census,
    projection_basis,
    projection_scores,
    stable_rank,
)
from .stats import CovarianceBundle, fit_covariance, load_bundle, mahalanobis, save_bundle

__version__ = "0.1.0"

__all__ = [
    "BlobIOError",
    "CovarianceBundle",
    "DatasetBlob",
    "DomainError",
    "FeatureBatch",
    "FormatError",
    "GramEig",
    "LayerSpec",
    "LocalLinearOp",
    "ModelGraph",
    "NumericError",
    "ProjectionBasis",
    "ScoreSet",
    "SensitivityReport",
    "ShapeError",
    "SimilarityReport",
    "TapPoint",
    "TopologyError",
    "ValidationError",
    "all_tap_ids",
    "analysis_taps",
    "auroc",
    "block_boundary_taps",
    "cka",
    "cka_grid",
    "coefficient_of_variation",
    "conv_local_operator",
    "fit_covariance",
    "forward",
    "forward_from",
    "forward_truncated",
    "gram",
    "im2col",
    "load_bundle",
    "load_dataset",
    "load_model",
    "mahalanobis",
    "max_softmax",
    "noise_sensitivity",
    "normalize_images",
    "parameter_census",
    "penultimate_tap",
    "prediction_rates",
    "projection_basis",
    "projection_scores",
    "quantile_summary",
    "read_tensor",
    "save_model",
    "save_bundle",
    "sensitivity_auroc",
    "stable_rank",
    "write_dataset",
    "write_tensor",
]
