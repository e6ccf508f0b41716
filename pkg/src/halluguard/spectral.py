"""Gram-spectrum machinery behind the HalluGuard score.

The score of a bundle combines three spectral quantities of the ridged Gram
matrix built from the K generation embeddings, together with an estimate of
per-step rollout amplification:

    score = log_det + log_sigma_max - log_kappa_sq

Higher scores mean a richer, better-conditioned local generation geometry,
which we treat as more trustworthy; the evaluation harness flips the sign
when it needs "higher = hallucinated" orientation.  The determinant enters
in log form (monotone equivalent, avoids underflow at K = 10), and each
component can optionally be z-normalized against validation statistics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import lapack

from .bundle import TrajectoryBundle
from .clipping import ClipThresholds, clip_features

logger = logging.getLogger(__name__)

MODE_EXACT = "exact-jacobian"
MODE_PROXY = "state-delta-proxy"


class SpectralError(ValueError):
    pass


class DegenerateEmbeddingError(SpectralError):
    """A row had (near-)zero norm while unit normalization was requested."""


class NotPositiveDefiniteError(SpectralError):
    """Cholesky factorization failed; carries the failing pivot index."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


class InconsistentOracleError(SpectralError):
    """jvp/vjp pair failed the adjoint identity on random probes."""


class ConvergenceError(SpectralError):
    """Power iteration did not reach the requested tolerance."""

    def __init__(self, step: int, last_estimate: float):
        super().__init__(
            f"power iteration did not converge at step {step}; "
            f"last estimate {last_estimate:.6g}"
        )
        self.step = step
        self.last_estimate = last_estimate


class MissingStatesError(SpectralError):
    """Proxy amplification requested but no generation carries step states."""


class InsufficientStepsError(SpectralError):
    """State-delta proxy needs at least three recorded states."""


class DegenerateCalibrationError(SpectralError):
    """A calibration component has zero standard deviation."""


@dataclass
class GramMatrix:
    """Ridged embedding Gram matrix G = E E^T + ridge * I."""

    entries: np.ndarray
    ridge: float
    normalized: bool


@dataclass
class Spectrum:
    """Eigen summary of a positive definite Gram matrix."""

    eigenvalues: np.ndarray  # descending
    log_det: float
    kappa: float
    trace: float


@dataclass
class AmplificationEstimate:
    """Largest and average per-step log amplification of a rollout."""

    sigma_max: float
    beta_avg: float
    mode: str
    per_step: Optional[np.ndarray] = None


@dataclass
class SpectralConfig:
    """Knobs for turning a bundle into score components.

    ``jacobian_factory`` is required in exact mode: it maps
    ``(bundle, generation_index)`` to ``(jvp, vjp, n_steps, dim)`` oracles
    for that generation's step maps.
    """

    ridge: float = 1e-3
    normalize: bool = True
    amp_mode: str = MODE_PROXY
    floor: float = 1e-8
    power_iters: int = 20
    power_tol: float = 1e-6
    seed: int = 0
    clip_thresholds: Optional[ClipThresholds] = None
    jacobian_factory: Optional[Callable] = None


def build_gram(embeddings: np.ndarray, ridge: float = 1e-3, normalize: bool = True) -> GramMatrix:
    """Build the ridged Gram matrix over K embedding rows.

    With ``normalize`` the rows are unit-normalized first, so the Gram
    entries are cosines and the diagonal is exactly 1 + ridge.
    """
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise SpectralError(f"need a K x d matrix with K >= 2, got shape {e.shape}")
    if not np.all(np.isfinite(e)):
        raise SpectralError("embeddings contain non-finite entries")
    if ridge < 0:
        raise SpectralError(f"ridge must be >= 0, got {ridge}")
    if normalize:
        norms = np.linalg.norm(e, axis=1)
        if np.any(norms <= 1e-12):
            bad = int(np.argmin(norms))
            raise DegenerateEmbeddingError(f"row {bad} has norm {norms[bad]:.3g}")
        e = e / norms[:, None]
    g = e @ e.T
    g = (g + g.T) / 2.0
    g += ridge * np.eye(e.shape[0])
    return GramMatrix(entries=g, ridge=float(ridge), normalized=normalize)


def spectral_summary(gram: GramMatrix) -> Spectrum:
    """Eigenvalues (descending), Cholesky log-determinant and condition number."""
    g = gram.entries
    chol, info = lapack.dpotrf(g, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError(pivot=int(info))
    log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
    eigenvalues = np.linalg.eigvalsh(g)[::-1].copy()
    kappa = float(eigenvalues[0] / eigenvalues[-1])
    return Spectrum(
        eigenvalues=eigenvalues,
        log_det=log_det,
        kappa=kappa,
        trace=float(np.trace(g)),
    )


def _check_adjoint(jvp, vjp, t: int, dim: int, rng: np.random.Generator, tol: float = 1e-6):
    for _ in range(3):
        v = rng.standard_normal(dim)
        jv = np.asarray(jvp(t, v), dtype=np.float64)
        u = rng.standard_normal(jv.shape[0])
        lhs = float(jv @ u)
        rhs = float(v @ np.asarray(vjp(t, u), dtype=np.float64))
        scale = max(abs(lhs), abs(rhs), 1.0)
        if abs(lhs - rhs) > tol * scale:
            raise InconsistentOracleError(
                f"adjoint identity violated at step {t}: <Jv,u>={lhs:.8g} vs <v,J^T u>={rhs:.8g}"
            )


def amplification_exact(
    jvp: Callable[[int, np.ndarray], np.ndarray],
    vjp: Callable[[int, np.ndarray], np.ndarray],
    n_steps: int,
    dim: int,
    iters: int = 20,
    tol: float = 1e-6,
    seed: int = 0,
) -> AmplificationEstimate:
    """Per-step spectral norms via power iteration on J_t^T J_t.

    ``jvp(t, v)`` and ``vjp(t, u)`` must implement an adjoint pair for each
    step t in [0, n_steps); the pair is probe-checked before use.  Raises
    :class:`ConvergenceError` if a step's estimate does not stabilize to
    relative ``tol`` within ``iters`` iterations.
    """
    if n_steps < 1:
        raise SpectralError("need at least one step")
    rng = np.random.default_rng(seed)
    sigmas = np.empty(n_steps)
    for t in range(n_steps):
        _check_adjoint(jvp, vjp, t, dim, rng)
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        sigma = 0.0
        converged = False
        for _ in range(iters):
            jv = np.asarray(jvp(t, v), dtype=np.float64)
            new_sigma = float(np.linalg.norm(jv))
            if new_sigma == 0.0:
                sigma = 0.0
                converged = True
                break
            w = np.asarray(vjp(t, jv), dtype=np.float64)
            v = w / np.linalg.norm(w)
            if abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-300):
                sigma = new_sigma
                converged = True
                break
            sigma = new_sigma
        if not converged:
            raise ConvergenceError(step=t, last_estimate=sigma)
        sigmas[t] = sigma
    with np.errstate(divide="ignore"):
        logs = np.log(sigmas)
    return AmplificationEstimate(
        sigma_max=float(np.max(sigmas)),
        beta_avg=float(np.mean(logs)),
        mode=MODE_EXACT,
        per_step=sigmas,
    )


def amplification_proxy(step_states: np.ndarray, floor: float = 1e-8) -> AmplificationEstimate:
    """Amplification from consecutive state-delta norm ratios.

    Bundle-only fallback when Jacobian oracles are unavailable: the ratio
    a_t = |h_{t+1} - h_t| / max(|h_t - h_{t-1}|, floor) plays the role of a
    per-step gain.  A trajectory whose deltas all sit below ``floor`` is
    treated as perfectly stable (sigma_max = 1, beta_avg = 0).
    """
    states = np.asarray(step_states, dtype=np.float64)
    if states.ndim != 2 or states.shape[0] < 3:
        raise InsufficientStepsError(
            f"need at least 3 states (two consecutive deltas), got shape {states.shape}"
        )
    deltas = np.linalg.norm(np.diff(states, axis=0), axis=1)
    if np.all(deltas < floor):
        return AmplificationEstimate(sigma_max=1.0, beta_avg=0.0, mode=MODE_PROXY)
    ratios = deltas[1:] / np.maximum(deltas[:-1], floor)
    with np.errstate(divide="ignore"):
        logs = np.log(ratios)
    return AmplificationEstimate(
        sigma_max=float(np.max(ratios)),
        beta_avg=float(np.mean(logs)),
        mode=MODE_PROXY,
        per_step=ratios,
    )


def halluguard_components(
    bundle: TrajectoryBundle, config: SpectralConfig | None = None
) -> tuple[float, float, float]:
    """Score components (log_det, log_sigma_max, log_kappa_sq) for one bundle.

    log_det and log_kappa_sq come from the spectrum of the embedding Gram;
    log_sigma_max aggregates per-generation amplification estimates by
    maximum.  When ``config.clip_thresholds`` is set, embeddings and step
    states are percentile-clipped before use.
    """
    cfg = config or SpectralConfig()
    embeds = np.stack([g.sent_embed for g in bundle.generations]).astype(np.float64)
    if cfg.clip_thresholds is not None:
        embeds, _ = clip_features(embeds, cfg.clip_thresholds)
    spectrum = spectral_summary(build_gram(embeds, ridge=cfg.ridge, normalize=cfg.normalize))

    sigma_max = _bundle_sigma_max(bundle, cfg)
    return (spectrum.log_det, math.log(sigma_max), math.log(spectrum.kappa**2))


def _bundle_sigma_max(bundle: TrajectoryBundle, cfg: SpectralConfig) -> float:
    estimates: list[float] = []
    if cfg.amp_mode == MODE_EXACT:
        if cfg.jacobian_factory is None:
            raise SpectralError("exact amplification requires a jacobian_factory")
        for gi in range(len(bundle.generations)):
            jvp, vjp, n_steps, dim = cfg.jacobian_factory(bundle, gi)
            if n_steps < 1:
                continue
            est = amplification_exact(
                jvp, vjp, n_steps, dim, iters=cfg.power_iters, tol=cfg.power_tol, seed=cfg.seed
            )
            estimates.append(est.sigma_max)
    elif cfg.amp_mode == MODE_PROXY:
        any_states = False
        for gen in bundle.generations:
            if gen.step_states is None:
                continue
            any_states = True
            if gen.step_states.shape[0] < 3:
                continue
            states = gen.step_states.astype(np.float64)
            if cfg.clip_thresholds is not None:
                states, _ = clip_features(states, cfg.clip_thresholds)
            estimates.append(amplification_proxy(states, floor=cfg.floor).sigma_max)
        if not any_states:
            raise MissingStatesError(
                "proxy amplification needs step_states on at least one generation"
            )
        if not estimates:
            # States exist but every trajectory is too short for delta
            # ratios: treat the rollout as non-amplifying, like the
            # below-floor fallback.
            return 1.0
    else:
        raise SpectralError(f"unknown amplification mode {cfg.amp_mode!r}")
    if not estimates:
        raise SpectralError("no generation produced an amplification estimate")
    return max(estimates)


def halluguard_score(
    components: Sequence[float],
    calibration=None,
) -> float:
    """Combine the component triple into the scalar trust score.

    Without calibration the components are summed raw; with calibration
    (an object carrying per-component ``mean`` and ``std`` arrays) each
    component is z-normalized first.  Higher = more trustworthy.
    """
    ld, ls, lk = (float(c) for c in components)
    if not all(math.isfinite(c) for c in (ld, ls, lk)):
        raise SpectralError(f"components must be finite, got {(ld, ls, lk)}")
    if calibration is not None:
        mean = np.asarray(calibration.mean, dtype=np.float64)
        std = np.asarray(calibration.std, dtype=np.float64)
        if np.any(std <= 0):
            raise DegenerateCalibrationError(f"calibration std must be > 0, got {std}")
        ld, ls, lk = (np.array([ld, ls, lk]) - mean) / std
    return float(ld + ls - lk)
