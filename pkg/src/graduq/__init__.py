"""graduq: gradient-based epistemic uncertainty scoring for small
pre-trained classifiers, with OOD detection, calibration, and
active-learning evaluation harnesses."""

from .autodiff import Tensor, backward, grad_check
from .data import Dataset, SplitSpec, gen_gaussian_clusters, gen_ood_ring, load_csv, load_idx, split
from .errors import (
    ConfigError,
    DomainError,
    ExperimentError,
    FormatError,
    GraduqError,
    ShapeError,
)
from .metrics import aupr, auroc, lift_curve, raulc
from .models import (
    ModelConfig,
    ParameterSet,
    ProbVector,
    deserialize_model,
    forward_logits,
    init_parameters,
    insert_dropout,
    predict_proba,
    serialize_model,
)
from .scoring import (
    GradientBundle,
    ScorerConfig,
    UncertaintyScore,
    entropy_score,
    exgrad_score,
    gradnorm_score,
    inserted_dropout_score,
    kl_divergence,
    layer_selective_aggregate,
    mc_aa_score,
    negrad_score,
    per_class_gradients,
    perturb_theta_score,
    perturb_x_score,
    regrad_score,
    regrad_star_score,
    score_sample,
    smoothed_per_class_gradients,
    ungrad_score,
    vterm_score,
)
from .training import OptimizerConfig, TrainReport, evaluate, fit, sgd_step

__version__ = "0.1.0"
