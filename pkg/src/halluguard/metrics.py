"""Evaluation harness: labeling, ranking metrics, thresholds, calibration.

All ranking metrics operate on scores oriented so that higher means
hallucinated; :func:`evaluate` applies each detector's declared orientation
before computing anything, so sign conventions live in exactly one place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .bundle import TrajectoryBundle
from .detectors import (
    DETECTOR_NAMES,
    HIGHER_IS_HALLUCINATED,
    ORIENTATIONS,
    DetectorConfig,
    fit_clip_bank,
    rouge_l,
    score_sample,
)
from .spectral import DegenerateCalibrationError

DEFAULT_TAU_R = 0.5
FPR_POINTS = (0.05, 0.10)


class UndefinedMetricError(ValueError):
    """Metric is undefined for this input (e.g. a single-class dataset)."""


@dataclass
class LabeledScore:
    prompt_id: str
    score: float
    label: int


@dataclass
class CalibrationStats:
    """Per-component mean/std over a validation split, for z-normalization."""

    mean: np.ndarray
    std: np.ndarray
    components: tuple[str, ...] = ("log_det", "log_sigma_max", "log_kappa_sq")


@dataclass
class DetectorReport:
    auroc: float
    auprc: float
    f1_at_threshold: float
    tpr_at_fpr: dict[float, float]
    threshold: float
    n_pos: int
    n_neg: int


@dataclass
class EvalReport:
    per_detector: dict[str, DetectorReport] = field(default_factory=dict)


def label_by_rouge(generation_text: str, references: Sequence[str], tau_r: float = DEFAULT_TAU_R) -> int:
    """Reference-based labeling: hallucinated (1) iff best ROUGE-L < tau_r."""
    if not references:
        raise ValueError("label_by_rouge needs at least one reference")
    best = max(rouge_l(generation_text, ref) for ref in references)
    return 1 if best < tau_r else 0


def _split(scores: Sequence[LabeledScore]) -> tuple[np.ndarray, np.ndarray]:
    pos = np.array([s.score for s in scores if s.label == 1], dtype=np.float64)
    neg = np.array([s.score for s in scores if s.label == 0], dtype=np.float64)
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError(
            f"need both classes, got n_pos={len(pos)}, n_neg={len(neg)}"
        )
    return pos, neg


def auroc(scores: Sequence[LabeledScore]) -> float:
    """Probability a positive outranks a negative, ties credited 0.5.

    Computed with midranks, which is algebraically identical to the
    pairwise estimator and to trapezoidal ROC integration.
    """
    pos, neg = _split(scores)
    all_scores = np.concatenate([pos, neg])
    order = np.argsort(all_scores, kind="mergesort")
    ranks = np.empty(len(all_scores), dtype=np.float64)
    sorted_scores = all_scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0  # midrank, 1-based
        i = j + 1
    rank_sum_pos = float(np.sum(ranks[: len(pos)]))
    n_pos, n_neg = len(pos), len(neg)
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores: Sequence[LabeledScore]) -> float:
    """Average precision: AP = sum_k (R_k - R_{k-1}) * P_k.

    Samples are ranked by descending score; equal scores keep their input
    order (stable sort), which makes tie handling reproducible.
    """
    labels = np.array([s.label for s in scores], dtype=np.int64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    vals = np.array([s.score for s in scores], dtype=np.float64)
    order = np.argsort(-vals, kind="stable")
    ranked = labels[order]
    tp = np.cumsum(ranked)
    precision = tp / np.arange(1, len(ranked) + 1)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def _roc_operating_points(scores: Sequence[LabeledScore]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds desc, fpr, tpr) for the decision rule score >= threshold."""
    pos, neg = _split(scores)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    fpr = np.array([np.mean(neg >= th) for th in thresholds])
    tpr = np.array([np.mean(pos >= th) for th in thresholds])
    return thresholds, fpr, tpr


def tpr_at_fpr(scores: Sequence[LabeledScore], fpr: float) -> float:
    """TPR at the most permissive threshold whose empirical FPR stays <= fpr.

    Conservative step convention: the returned TPR is attainable at some
    threshold that does not exceed the FPR budget; if even the strictest
    cut overshoots, the TPR is 0.
    """
    if not 0.0 < fpr < 1.0:
        raise ValueError(f"fpr must be in (0, 1), got {fpr}")
    _, fprs, tprs = _roc_operating_points(scores)
    feasible = fprs <= fpr
    if not np.any(feasible):
        return 0.0
    return float(np.max(tprs[feasible]))


def select_threshold(
    scores: Sequence[LabeledScore],
    mode: str = "quantile",
    pi_target: float = 0.5,
    fpr: float = 0.10,
    c_fp: float = 1.0,
    c_fn: float = 1.0,
    pi: float = 0.5,
) -> float:
    """Pick a decision threshold on validation scores.

    quantile:  match a target predicted-positive rate via score quantiles
               (upper-midpoint between the order statistics).
    fixed-fpr: most permissive threshold with empirical FPR <= fpr.
    bayes:     closed-form cost ratio c_fn/(c_fp+c_fn) * (1-pi)/pi for
               probability-like calibrated scores.
    """
    if mode == "bayes":
        if pi <= 0.0 or pi > 1.0:
            raise ValueError(f"bayes mode needs prior pi in (0, 1], got {pi}")
        return (c_fn / (c_fp + c_fn)) * (1.0 - pi) / pi
    vals = np.sort(np.array([s.score for s in scores], dtype=np.float64))
    if len(vals) == 0:
        raise ValueError("select_threshold needs non-empty scores")
    if mode == "quantile":
        if not 0.0 <= pi_target <= 1.0:
            raise ValueError(f"pi_target must be in [0, 1], got {pi_target}")
        n = len(vals)
        m = int(round(pi_target * n))  # number of predicted positives
        if m <= 0:
            return float(vals[-1] + 1.0)
        if m >= n:
            return float(vals[0])
        return float((vals[n - m - 1] + vals[n - m]) / 2.0)
    if mode == "fixed-fpr":
        thresholds, fprs, _ = _roc_operating_points(scores)
        feasible = fprs <= fpr
        if not np.any(feasible):
            return float(thresholds[0] + 1.0)
        return float(np.min(thresholds[feasible]))
    raise ValueError(f"unknown threshold mode {mode!r}")


def f1_at_threshold(scores: Sequence[LabeledScore], threshold: float) -> float:
    labels = np.array([s.label for s in scores])
    preds = np.array([s.score >= threshold for s in scores])
    tp = int(np.sum(preds & (labels == 1)))
    fp = int(np.sum(preds & (labels == 0)))
    fn = int(np.sum(~preds & (labels == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def fit_z_calibration(component_triples: Sequence[Sequence[float]]) -> CalibrationStats:
    """Per-component mean and population std over a validation split."""
    arr = np.asarray(component_triples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError(f"need at least 2 component triples, got shape {arr.shape}")
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)
    names = CalibrationStats.__dataclass_fields__["components"].default
    for i, s in enumerate(std):
        if s <= 0:
            raise DegenerateCalibrationError(f"zero variance in component {names[i]}")
    return CalibrationStats(mean=mean, std=std)


@dataclass
class EvalConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    tau_r: float = DEFAULT_TAU_R
    threshold_mode: str = "quantile"
    calibrate: bool = True


def bundle_label(bundle: TrajectoryBundle, tau_r: float = DEFAULT_TAU_R) -> int:
    """Stored label if present, else ROUGE labeling of the primary generation."""
    if bundle.label is not None:
        return bundle.label
    return label_by_rouge(bundle.generations[0].text, bundle.references, tau_r)


def evaluate(
    dataset: Sequence[TrajectoryBundle],
    detectors: Iterable[str] = DETECTOR_NAMES,
    config: EvalConfig | None = None,
) -> EvalReport:
    """Score a labeled dataset with every requested detector and report metrics.

    Aggregation is keyed by sorted prompt_id so results do not depend on
    input order.  With ``calibrate`` on, HalluGuard components are
    z-normalized against statistics fitted on this same dataset.
    """
    cfg = config or EvalConfig()
    requested = list(detectors)
    ordered = sorted(dataset, key=lambda b: b.prompt_id)
    labels = {b.prompt_id: bundle_label(b, cfg.tau_r) for b in ordered}
    n_pos = sum(labels.values())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"dataset must contain both classes, got n_pos={n_pos}, n_neg={n_neg}"
        )

    det_cfg = cfg.detector
    if det_cfg.clip and det_cfg.spectral.clip_thresholds is None:
        thresholds = fit_clip_bank(
            ordered, capacity=det_cfg.bank_capacity, quantile=det_cfg.clip_quantile
        )
        det_cfg = replace(det_cfg, spectral=replace(det_cfg.spectral, clip_thresholds=thresholds))
    if cfg.calibrate and "halluguard" in requested and det_cfg.calibration is None:
        from .spectral import halluguard_components

        triples = []
        for b in ordered:
            try:
                triples.append(halluguard_components(b, det_cfg.spectral))
            except Exception:
                continue
        if len(triples) >= 2:
            try:
                det_cfg = replace(det_cfg, calibration=fit_z_calibration(triples))
            except DegenerateCalibrationError:
                pass

    all_scores = [score_sample(b, requested, det_cfg) for b in ordered]
    report = EvalReport()
    for name in requested:
        oriented: list[LabeledScore] = []
        for b, ds in zip(ordered, all_scores):
            value = ds.scores.get(name)
            if value is None or not math.isfinite(value):
                continue
            if ORIENTATIONS[name] != HIGHER_IS_HALLUCINATED:
                value = -value
            oriented.append(LabeledScore(b.prompt_id, value, labels[b.prompt_id]))
        if not oriented:
            continue
        try:
            threshold = select_threshold(
                oriented, mode=cfg.threshold_mode, pi_target=n_pos / len(labels)
            )
            report.per_detector[name] = DetectorReport(
                auroc=auroc(oriented),
                auprc=auprc(oriented),
                f1_at_threshold=f1_at_threshold(oriented, threshold),
                tpr_at_fpr={f: tpr_at_fpr(oriented, f) for f in FPR_POINTS},
                threshold=threshold,
                n_pos=sum(s.label for s in oriented),
                n_neg=sum(1 - s.label for s in oriented),
            )
        except UndefinedMetricError:
            continue
    return report


def proxy_task_correlation(
    dataset: Sequence[TrajectoryBundle],
    proxy: str = "log_det",
    config: EvalConfig | None = None,
) -> float:
    """Pearson correlation between a spectral proxy and correctness.

    ``proxy`` is either ``log_det`` (adequacy component) or
    ``amp_minus_cond`` (log_sigma_max - log_kappa_sq).  Correctness is the
    non-hallucination indicator 1 - label.
    """
    from .spectral import halluguard_components

    cfg = config or EvalConfig()
    if len(dataset) < 10:
        raise ValueError("correlation needs at least 10 labeled bundles")
    values, correct = [], []
    for b in sorted(dataset, key=lambda x: x.prompt_id):
        ld, ls, lk = halluguard_components(b, cfg.detector.spectral)
        if proxy == "log_det":
            values.append(ld)
        elif proxy == "amp_minus_cond":
            values.append(ls - lk)
        else:
            raise ValueError(f"unknown proxy {proxy!r}")
        correct.append(1 - bundle_label(b, cfg.tau_r))
    values = np.asarray(values)
    correct = np.asarray(correct, dtype=np.float64)
    if values.std() == 0 or correct.std() == 0:
        raise UndefinedMetricError("correlation undefined: zero variance")
    return float(np.corrcoef(values, correct)[0, 1])
