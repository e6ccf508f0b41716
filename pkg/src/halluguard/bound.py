"""Executable hallucination risk bound and its numerical verification suite.

The bound decomposes total risk into a data-driven term (approximation gap
inflated by pretraining/mismatch constants) and a reasoning-driven term
(concentration factor times exponential rollout amplification):

    risk(T) = (1 + k_pt * log(complexity_PL) + k * eps_mismatch / signal_k)
              * inf_approx
            + L_size * exp(-K_rollouts * eps^2 / C) * alpha_amp
              * (exp(beta * T) - 1)

The remaining functions verify, at desk scale, the matrix inequalities the
bound rests on: submultiplicativity of Jacobian products, determinant lower
bounds on the smallest eigenvalue, projector perturbation sensitivity, the
quadratic growth of worst-case deviation with the Gram condition number,
and the concentration behavior of rollout averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .spectral import Spectrum


class BoundParamError(ValueError):
    """A bound parameter is outside its valid range."""


@dataclass
class BoundParams:
    """Every constant of the risk bound in one place.

    The bound uses three unrelated alphas (Gram ridge, reasoning amplitude,
    spectral envelope decay); they are kept as separately named fields to
    prevent collisions.  Fields not computable from data (mismatch, signal,
    source-condition and envelope constants) are simulator knobs.
    """

    # data-driven term
    inf_approx: float = 0.1
    k_pt: float = 0.0
    complexity_PL: float = math.e
    k: float = 0.0
    eps_mismatch: float = 0.0
    signal_k: float = 1.0
    # reasoning-driven term
    L_size: float = 1.0
    K_rollouts: int = 10
    eps: float = 0.5
    C: float = 1.0
    alpha_amp: float = 1.0
    beta: float = 0.1
    T: int = 12
    # source condition / spectral envelope (adequacy analysis)
    s: float = 1.0
    R_s: float = 1.0
    lambda_bar: float = 1.0
    lambda_lower: float = 0.1
    decay_alpha: float = 2.0
    # smoothness / perturbation constants
    H_star: float = 1.0
    rho: float = 1.0
    L_Phi: float = 1.0
    c_v: float = 1.0
    C_Pi: float = 2.0
    C_d: float = 1.0
    c_d: float = 1.0
    sigma_delta: float = 1.0

    def validate(self) -> None:
        checks = [
            ("inf_approx", self.inf_approx >= 0),
            ("k_pt", self.k_pt >= 0),
            ("complexity_PL", self.complexity_PL > 1),
            ("k", self.k >= 0),
            ("eps_mismatch", self.eps_mismatch >= 0),
            ("signal_k", self.signal_k > 0),
            ("L_size", self.L_size > 0),
            ("K_rollouts", self.K_rollouts >= 1),
            ("eps", self.eps > 0),
            ("C", self.C > 0),
            ("alpha_amp", self.alpha_amp > 0),
            ("beta", self.beta >= 0),
            ("T", self.T >= 0),
            ("s", self.s > 0),
            ("R_s", self.R_s > 0),
            ("lambda_bar", self.lambda_bar >= self.lambda_lower),
            ("lambda_lower", self.lambda_lower > 0),
            ("decay_alpha", self.decay_alpha > 1),
            ("H_star", self.H_star > 0),
            ("rho", self.rho > 0),
            ("L_Phi", self.L_Phi > 0),
            ("c_v", self.c_v > 0),
            ("C_Pi", self.C_Pi > 0),
            ("C_d", self.C_d > 0),
            ("c_d", self.c_d > 0),
            ("sigma_delta", self.sigma_delta > 0),
        ]
        for name, ok in checks:
            value = getattr(self, name)
            if not ok or not math.isfinite(float(value)):
                raise BoundParamError(f"invalid bound parameter {name}={value}")


def data_term(p: BoundParams) -> float:
    """Approximation gap inflated by complexity and mismatch multipliers."""
    p.validate()
    multiplier = 1.0 + p.k_pt * math.log(p.complexity_PL) + p.k * p.eps_mismatch / p.signal_k
    return multiplier * p.inf_approx


def reasoning_term(p: BoundParams, t: Optional[int] = None) -> float:
    """Concentration factor times exponential rollout amplification."""
    p.validate()
    horizon = p.T if t is None else t
    if horizon < 0:
        raise BoundParamError(f"invalid horizon T={horizon}")
    concentration = p.L_size * math.exp(-p.K_rollouts * p.eps**2 / p.C)
    return concentration * p.alpha_amp * (math.exp(p.beta * horizon) - 1.0)


def risk_bound(p: BoundParams, t: Optional[int] = None) -> float:
    """Total bound: data term plus reasoning term at horizon t (default p.T)."""
    return data_term(p) + reasoning_term(p, t)


def simulate_empirical_risk(
    p: BoundParams,
    noise_std: float,
    seed: int,
    t_range: Sequence[int],
) -> np.ndarray:
    """Synthetic empirical risk trajectory under the bound envelope.

    Multiplies each closed-form component by (1 + g) with seeded Gaussian g,
    then clamps into [0, bound(T)].  The clamping reproduces the intended
    construction where the theoretical curve is a conservative upper
    envelope of the noisy trajectory, rather than an independent test.
    """
    if noise_std < 0:
        raise BoundParamError(f"noise_std must be >= 0, got {noise_std}")
    if len(t_range) == 0:
        raise BoundParamError("t_range must be non-empty")
    rng = np.random.default_rng(seed)
    d = data_term(p)
    out = np.empty(len(t_range))
    for i, t in enumerate(t_range):
        r = reasoning_term(p, t)
        g1, g2 = rng.normal(0.0, noise_std, size=2)
        value = d * (1.0 + g1) + r * (1.0 + g2)
        out[i] = min(max(value, 0.0), d + r)
    return out


def decomposition_crossover(p: BoundParams, t_range: Sequence[int]) -> Optional[int]:
    """Smallest horizon where the reasoning term overtakes the data term."""
    if list(t_range) != sorted(t_range):
        raise BoundParamError("t_range must be sorted")
    d = data_term(p)
    for t in t_range:
        if reasoning_term(p, t) > d:
            return int(t)
    return None


@dataclass
class SubmultiplicativityReport:
    lhs: float
    rhs_product: float
    rhs_sigma_maxT: float
    holds: bool
    gap: float


def verify_submultiplicativity(
    jacobians: Sequence[np.ndarray], tol: float = 1e-9
) -> SubmultiplicativityReport:
    """Check |prod J_t| <= prod |J_t| <= sigma_max^T by dense SVD."""
    mats = [np.asarray(j, dtype=np.float64) for j in jacobians]
    if not mats:
        raise ValueError("need at least one matrix")
    n = mats[0].shape[0]
    for m in mats:
        if m.shape != (n, n):
            raise ValueError(f"dimension mismatch: expected {(n, n)}, got {m.shape}")
    product = mats[0]
    for m in mats[1:]:
        product = product @ m
    lhs = float(np.linalg.norm(product, 2))
    norms = [float(np.linalg.norm(m, 2)) for m in mats]
    rhs_product = float(np.prod(norms))
    rhs_sigma_maxT = float(max(norms) ** len(mats))
    scale = max(rhs_sigma_maxT, 1.0)
    holds = lhs <= rhs_product + tol * scale and rhs_product <= rhs_sigma_maxT + tol * scale
    return SubmultiplicativityReport(
        lhs=lhs,
        rhs_product=rhs_product,
        rhs_sigma_maxT=rhs_sigma_maxT,
        holds=bool(holds),
        gap=rhs_product - lhs,
    )


@dataclass
class DetLowerBoundReport:
    lambda_min: float
    bound: float
    holds: bool
    gap: float


def verify_det_lower_bound(
    spectrum: Spectrum, lambda_bar: float, tol: float = 1e-9
) -> DetLowerBoundReport:
    """Check lambda_min >= det / lambda_bar^(K-1), in log space for stability."""
    lam = spectrum.eigenvalues
    if lambda_bar < lam[0] * (1.0 - 1e-12):
        raise BoundParamError(
            f"lambda_bar={lambda_bar} must dominate the largest eigenvalue {lam[0]}"
        )
    k = len(lam)
    bound = math.exp(spectrum.log_det - (k - 1) * math.log(lambda_bar))
    lam_min = float(lam[-1])
    return DetLowerBoundReport(
        lambda_min=lam_min,
        bound=bound,
        holds=lam_min >= bound - tol * max(bound, 1.0),
        gap=lam_min - bound,
    )


class DegeneratePerturbationError(ValueError):
    """Perturbed feature matrix lost column rank."""


@dataclass
class ProjectorDeviationReport:
    deviation: float
    kappa: float
    bound_rhs: float
    holds: bool


def _orthogonal_projector(phi: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(phi)
    return q @ q.T


def projector_deviation(
    features: np.ndarray,
    perturbation: np.ndarray,
    target: np.ndarray,
    c_pi: float = 2.0,
) -> ProjectorDeviationReport:
    """Deviation of the projected target under a feature perturbation.

    Compares the exact projector change |(P~ - P) u*| against the
    sensitivity bound C_Pi * kappa * |dPhi| / sqrt(lambda_min) * |u*|.
    """
    phi = np.asarray(features, dtype=np.float64)
    dphi = np.asarray(perturbation, dtype=np.float64)
    u = np.asarray(target, dtype=np.float64)
    if phi.shape != dphi.shape:
        raise ValueError(f"shape mismatch: {phi.shape} vs {dphi.shape}")
    sv = np.linalg.svd(phi, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise DegeneratePerturbationError("feature matrix is not full column rank")
    sv_pert = np.linalg.svd(phi + dphi, compute_uv=False)
    if sv_pert[-1] <= 1e-12 * max(sv_pert[0], 1.0):
        raise DegeneratePerturbationError("perturbed feature matrix lost rank")
    p = _orthogonal_projector(phi)
    p_tilde = _orthogonal_projector(phi + dphi)
    deviation = float(np.linalg.norm((p_tilde - p) @ u))
    lam_min = float(sv[-1] ** 2)
    kappa = float((sv[0] / sv[-1]) ** 2)
    bound_rhs = (
        c_pi * kappa * float(np.linalg.norm(dphi, 2)) / math.sqrt(lam_min) * float(np.linalg.norm(u))
    )
    return ProjectorDeviationReport(
        deviation=deviation,
        kappa=kappa,
        bound_rhs=bound_rhs,
        holds=deviation <= bound_rhs,
    )


@dataclass
class KappaScalingResult:
    kappa_grid: np.ndarray
    max_sq_deviation: np.ndarray
    slope: float


def kappa_scaling_experiment(
    kappa_grid: Sequence[float],
    delta_norm: float = 1e-3,
    trials: int = 100,
    seed: int = 0,
    r: int = 8,
) -> KappaScalingResult:
    """Worst-case quadratic growth of squared deviation with conditioning.

    For each kappa, builds a feature matrix with singular values
    (sqrt(kappa), 1, ..., 1), forms its Gram, and measures the relative
    deviation of the Gram solve when the right-hand side sits along the top
    eigendirection and the perturbation (norm ``delta_norm``) along the
    minimal one; per-trial jitter randomizes the alignment slightly.  The
    worst case over trials scales like (kappa * delta_norm)^2, so the
    fitted log-log slope against kappa is near 2.
    """
    grid = np.asarray(sorted(kappa_grid), dtype=np.float64)
    if len(grid) < 3 or grid[0] <= 0:
        raise BoundParamError("kappa grid needs >= 3 positive points")
    if grid[-1] / grid[0] < 10.0 or grid.std() == 0:
        raise BoundParamError("kappa grid must span at least one decade")
    rng = np.random.default_rng(seed)
    d = r + 4
    max_sq = np.empty(len(grid))
    for gi, kappa in enumerate(grid):
        worst = 0.0
        for _ in range(trials):
            # Random orientation of the declared singular profile.
            qu, _ = np.linalg.qr(rng.standard_normal((d, r)))
            qv, _ = np.linalg.qr(rng.standard_normal((r, r)))
            sv = np.ones(r)
            sv[0] = math.sqrt(kappa)
            phi = qu @ np.diag(sv) @ qv.T
            gram = phi.T @ phi
            # Task signal pinned to the top eigendirection; only the
            # perturbation direction is sampled (cone around the minimal
            # eigenvector), so the max over trials approaches the worst case.
            b = qv[:, 0]
            bottom = qv[:, -1] if r > 1 else qv[:, 0]
            delta = delta_norm * _jitter(bottom, rng, 0.05)
            base = np.linalg.solve(gram, b)
            moved = np.linalg.solve(gram, b + delta)
            dev = np.linalg.norm(moved - base) / np.linalg.norm(base)
            worst = max(worst, float(dev**2))
        max_sq[gi] = worst
    slope = float(np.polyfit(np.log(grid), np.log(max_sq), 1)[0])
    return KappaScalingResult(kappa_grid=grid, max_sq_deviation=max_sq, slope=slope)


def _jitter(direction: np.ndarray, rng: np.random.Generator, scale: float) -> np.ndarray:
    v = direction + scale * rng.standard_normal(direction.shape)
    return v / np.linalg.norm(v)


@dataclass
class ConcentrationResult:
    k_grid: np.ndarray
    exceedance: np.ndarray
    envelope: np.ndarray
    fitted_C: float


def freedman_sanity(
    k_grid: Sequence[int],
    eps: float,
    c: Optional[float] = None,
    n_sims: int = 10_000,
    horizon: int = 20,
    increment_bound: float = 0.05,
    seed: int = 0,
) -> ConcentrationResult:
    """Monte-Carlo deviation probabilities for averaged bounded martingales.

    Each rollout is a length-``horizon`` sum of independent increments
    uniform on [-b, b]; averaging K rollouts concentrates the mean, and the
    empirical exceedance P(|avg| > eps) is compared against the
    exp(-K eps^2 / C) envelope.  The fitted C is the smallest constant that
    dominates every grid point; a caller-supplied ``c`` acts as a floor, so
    the reported envelope never undercuts the requested one.
    """
    grid = np.asarray(sorted(k_grid), dtype=np.int64)
    if len(grid) == 0 or grid[0] < 1:
        raise BoundParamError("k_grid must be non-empty with K >= 1")
    if c is not None and c <= 0:
        raise BoundParamError(f"C must be > 0, got {c}")
    rng = np.random.default_rng(seed)
    exceedance = np.empty(len(grid))
    for i, k in enumerate(grid):
        endpoints = rng.uniform(
            -increment_bound, increment_bound, size=(n_sims, int(k), horizon)
        ).sum(axis=2)
        averages = endpoints.mean(axis=1)
        exceedance[i] = float(np.mean(np.abs(averages) > eps))
    # Smallest C with exp(-K eps^2 / C) >= empirical exceedance everywhere.
    fitted = 0.0 if c is None else float(c)
    for k, p in zip(grid, exceedance):
        if 0.0 < p < 1.0:
            fitted = max(fitted, -k * eps**2 / math.log(p))
    if fitted == 0.0:
        fitted = eps**2  # all-zero exceedance: any positive C dominates
    envelope = np.exp(-grid * eps**2 / fitted)
    return ConcentrationResult(
        k_grid=grid, exceedance=exceedance, envelope=envelope, fitted_C=fitted
    )
