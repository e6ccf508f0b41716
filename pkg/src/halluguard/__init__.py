"""Spectral trajectory-bundle scoring for hallucination detection.

The package is organized around a model-free container (trajectory bundles
of K sampled generations), a spectral scoring core, percentile feature
clipping, baseline detectors, an evaluation harness, an executable risk
bound laboratory, and a tiny instrumented transformer for end-to-end
experiments.
"""

from .bundle import (
    Generation,
    TrajectoryBundle,
    ValidationReport,
    read_bundle,
    read_bundle_file,
    validate_bundle,
    write_bundle,
    write_bundle_file,
)
from .clipping import ClipThresholds, FeatureClipper, MemoryBank, clip_features, compute_thresholds, update_bank
from .detectors import (
    DetectorConfig,
    DetectorScores,
    HalluGuardScorer,
    ORIENTATIONS,
    lexical_consistency,
    ln_entropy,
    perplexity,
    rouge_l,
    score_sample,
    semantic_entropy_lite,
)
from .metrics import (
    CalibrationStats,
    EvalConfig,
    EvalReport,
    LabeledScore,
    auprc,
    auroc,
    evaluate,
    fit_z_calibration,
    label_by_rouge,
    proxy_task_correlation,
    select_threshold,
    tpr_at_fpr,
)
from .spectral import (
    AmplificationEstimate,
    GramMatrix,
    SpectralConfig,
    Spectrum,
    amplification_exact,
    amplification_proxy,
    build_gram,
    halluguard_components,
    halluguard_score,
    spectral_summary,
)
from .bound import (
    BoundParams,
    data_term,
    decomposition_crossover,
    freedman_sanity,
    kappa_scaling_experiment,
    projector_deviation,
    reasoning_term,
    risk_bound,
    simulate_empirical_risk,
    verify_det_lower_bound,
    verify_submultiplicativity,
)

__version__ = "0.1.0"
