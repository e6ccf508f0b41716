"""Bundle-level hallucination detectors.

Everything here is computable from a trajectory bundle alone: sequence
likelihood statistics, lexical and embedding consistency across the K
sampled generations, a clustering-based semantic entropy variant, and the
spectral HalluGuard score.  Each detector declares its orientation so the
evaluation harness can align signs before computing ranking metrics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import spectral
from .bundle import TrajectoryBundle
from .clipping import (
    DEFAULT_CAPACITY,
    DEFAULT_QUANTILE,
    ClipThresholds,
    MemoryBank,
    compute_thresholds,
    update_bank,
)
from .spectral import SpectralConfig, halluguard_components, halluguard_score

logger = logging.getLogger(__name__)

HIGHER_IS_HALLUCINATED = "higher-is-hallucinated"
LOWER_IS_HALLUCINATED = "lower-is-hallucinated"

# Orientation is declared data, not a convention baked into the math, so the
# harness can compare detectors of opposite polarity fairly.
ORIENTATIONS: dict[str, str] = {
    "halluguard": LOWER_IS_HALLUCINATED,
    "perplexity": HIGHER_IS_HALLUCINATED,
    "ln_entropy": HIGHER_IS_HALLUCINATED,
    "energy": HIGHER_IS_HALLUCINATED,
    "lexical_consistency": LOWER_IS_HALLUCINATED,
    "semantic_entropy": HIGHER_IS_HALLUCINATED,
}

DETECTOR_NAMES = tuple(ORIENTATIONS)


@dataclass
class DetectorScores:
    """Per-detector scores for one bundle; None marks an unavailable detector."""

    prompt_id: str
    scores: dict[str, Optional[float]]
    orientation: dict[str, str] = field(default_factory=lambda: dict(ORIENTATIONS))


@dataclass
class DetectorConfig:
    """Configuration shared by all detectors for one scoring run."""

    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    link_threshold: float = 0.9
    consistency_sim: str = "rouge-l"  # or "embed-cosine"
    clip: bool = True
    clip_quantile: float = DEFAULT_QUANTILE
    bank_capacity: int = DEFAULT_CAPACITY
    calibration: object = None


def perplexity(logprob: Sequence[float]) -> float:
    """Mean negative log-likelihood per token (nats)."""
    lp = np.asarray(logprob, dtype=np.float64)
    if lp.size < 1:
        raise ValueError("perplexity needs at least one token")
    return float(-np.mean(lp))


def ln_entropy(bundle: TrajectoryBundle) -> float:
    """Length-normalized NLL averaged over the K stochastic generations."""
    vals = []
    for gen in bundle.generations:
        if len(gen.logprob) < 1:
            raise ValueError("ln_entropy needs non-empty generations")
        vals.append(-float(np.mean(gen.logprob)))
    if len(vals) < 2:
        raise ValueError("ln_entropy needs K >= 2 generations")
    return float(np.mean(vals))


def energy_score(step_lse: Sequence[float]) -> float:
    """Sequence-mean free energy at unit temperature: -(1/T) sum(logsumexp_t)."""
    lse = np.asarray(step_lse, dtype=np.float64)
    if lse.size < 1:
        raise ValueError("energy_score needs at least one step")
    return float(-np.mean(lse))


def _lcs_length(a: list[str], b: list[str]) -> int:
    # Classic O(len(a)*len(b)) dynamic program, single rolling row.
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS F-measure over whitespace tokens; 0.0 when either side is empty."""
    cand = candidate.split()
    ref = reference.split()
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def lexical_consistency(
    texts: Sequence[str],
    sim: str = "rouge-l",
    embeddings: Optional[np.ndarray] = None,
) -> float:
    """Mean pairwise similarity over the K*(K-1)/2 generation pairs.

    Low values mean diverging generations.  ``embed-cosine`` scores pairs by
    cosine of the provided sentence embeddings instead of lexical overlap.
    """
    k = len(texts)
    if k < 2:
        raise ValueError("consistency needs K >= 2 generations")
    if sim == "rouge-l":
        pair = lambda i, j: rouge_l(texts[i], texts[j])
    elif sim == "embed-cosine":
        if embeddings is None:
            raise ValueError("embed-cosine similarity needs embeddings")
        e = np.asarray(embeddings, dtype=np.float64)
        norms = np.linalg.norm(e, axis=1)
        if np.any(norms <= 1e-12):
            raise ValueError("zero-norm embedding in embed-cosine consistency")
        e = e / norms[:, None]
        pair = lambda i, j: float(e[i] @ e[j])
    else:
        raise ValueError(f"unknown similarity {sim!r}")
    total = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            total += pair(i, j)
    return total / (k * (k - 1) / 2)


def semantic_entropy_lite(embeddings: np.ndarray, link_threshold: float = 0.9) -> float:
    """Cluster entropy of generations under cosine single-linkage.

    Generations whose embeddings chain together at cosine >= link_threshold
    share a cluster (connected components of the thresholded similarity
    graph); the score is the entropy of the cluster size distribution.  A
    "lite" stand-in for entailment-based semantic clustering: no external
    model, cosine geometry only.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    k = e.shape[0]
    if k < 2:
        raise ValueError("semantic entropy needs K >= 2 generations")
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms <= 1e-12):
        raise ValueError("zero-norm embedding cannot be normalized")
    e = e / norms[:, None]
    sim = e @ e.T
    # Union-find over edges with similarity above the linkage threshold.
    parent = list(range(k))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(k):
        for j in range(i + 1, k):
            if sim[i, j] >= link_threshold:
                parent[find(i)] = find(j)
    _, counts = np.unique([find(i) for i in range(k)], return_counts=True)
    p = counts / k
    return float(-np.sum(p * np.log(p)))


def score_sample(
    bundle: TrajectoryBundle,
    detectors: Iterable[str] = DETECTOR_NAMES,
    config: DetectorConfig | None = None,
) -> DetectorScores:
    """Run the requested detectors on one bundle.

    A detector whose inputs are missing (e.g. HalluGuard proxy mode on a
    bundle without step states) is marked unavailable (None) instead of
    failing the whole sample.  Sequence-level detectors (perplexity, energy)
    score the first generation, which exporters place first as the primary
    response.
    """
    cfg = config or DetectorConfig()
    requested = list(detectors)
    unknown = [d for d in requested if d not in ORIENTATIONS]
    if unknown:
        raise ValueError(f"unknown detectors: {unknown}")
    scores: dict[str, Optional[float]] = {}
    primary = bundle.generations[0]
    embeds = np.stack([g.sent_embed for g in bundle.generations]).astype(np.float64)
    for name in requested:
        try:
            if name == "perplexity":
                scores[name] = perplexity(primary.logprob)
            elif name == "ln_entropy":
                scores[name] = ln_entropy(bundle)
            elif name == "energy":
                scores[name] = energy_score(primary.step_lse)
            elif name == "lexical_consistency":
                scores[name] = lexical_consistency(
                    [g.text for g in bundle.generations],
                    sim=cfg.consistency_sim,
                    embeddings=embeds,
                )
            elif name == "semantic_entropy":
                scores[name] = semantic_entropy_lite(embeds, cfg.link_threshold)
            elif name == "halluguard":
                components = halluguard_components(bundle, cfg.spectral)
                scores[name] = halluguard_score(components, cfg.calibration)
        except (spectral.SpectralError, ValueError) as exc:
            logger.debug("detector %s unavailable on %s: %s", name, bundle.prompt_id, exc)
            scores[name] = None
    return DetectorScores(prompt_id=bundle.prompt_id, scores=scores)


class HalluGuardScorer(BaseEstimator):
    """Sklearn-style estimator for the spectral trust score.

    ``fit`` streams the training bundles' embeddings (and step states)
    through the clipping bank and fits per-component z-normalization;
    ``score_samples`` returns the calibrated score per bundle, higher =
    more trustworthy.
    """

    def __init__(
        self,
        ridge: float = 1e-3,
        normalize: bool = True,
        amp_mode: str = spectral.MODE_PROXY,
        floor: float = 1e-8,
        clip: bool = True,
        clip_quantile: float = DEFAULT_QUANTILE,
        bank_capacity: int = DEFAULT_CAPACITY,
        calibrate: bool = True,
    ):
        self.ridge = ridge
        self.normalize = normalize
        self.amp_mode = amp_mode
        self.floor = floor
        self.clip = clip
        self.clip_quantile = clip_quantile
        self.bank_capacity = bank_capacity
        self.calibrate = calibrate

    def _base_config(self, thresholds: Optional[ClipThresholds]) -> SpectralConfig:
        return SpectralConfig(
            ridge=self.ridge,
            normalize=self.normalize,
            amp_mode=self.amp_mode,
            floor=self.floor,
            clip_thresholds=thresholds,
        )

    def fit(self, bundles: Sequence[TrajectoryBundle], y=None):
        from .metrics import fit_z_calibration  # local import avoids a cycle

        self.thresholds_ = None
        if self.clip:
            self.thresholds_ = fit_clip_bank(
                bundles, capacity=self.bank_capacity, quantile=self.clip_quantile
            )
        self.calibration_ = None
        if self.calibrate:
            cfg = self._base_config(self.thresholds_)
            triples = [halluguard_components(b, cfg) for b in bundles]
            self.calibration_ = fit_z_calibration(triples)
        return self

    def score_samples(self, bundles: Sequence[TrajectoryBundle]) -> np.ndarray:
        cfg = self._base_config(getattr(self, "thresholds_", None))
        calibration = getattr(self, "calibration_", None)
        return np.array(
            [halluguard_score(halluguard_components(b, cfg), calibration) for b in bundles]
        )

    def decision_function(self, bundles: Sequence[TrajectoryBundle]) -> np.ndarray:
        return self.score_samples(bundles)


def fit_clip_bank(
    bundles: Sequence[TrajectoryBundle],
    capacity: int = DEFAULT_CAPACITY,
    quantile: float = DEFAULT_QUANTILE,
) -> ClipThresholds:
    """Populate a FIFO bank from the bundle stream in arrival order.

    Banks every vector that flows through the scoring path: sentence
    embeddings and, when present, per-step states.
    """
    bank = MemoryBank(capacity=capacity)
    for bundle in bundles:
        for gen in bundle.generations:
            update_bank(bank, gen.sent_embed[None, :])
            if gen.step_states is not None:
                update_bank(bank, gen.step_states)
    return compute_thresholds(bank, q=quantile)
