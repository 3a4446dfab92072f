"""Score models: exact closed forms for conjugate targets and a pluggable interface.

The score of the time-``t`` marginal is what a trained network would
approximate. For Gaussian and diagonal Gaussian-mixture targets the marginal
under the forward kernel ``N(sqrt(gamma_t) x0, Gamma_t I)`` is available in
closed form, so the sampler stack can be validated without any network.
Conditioning is handled by computing the conjugate posterior first and then
using it as the diffusion target.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .problems import GaussianPrior, InverseProblem, MixturePrior
from .schedules import NoiseSchedule


class UnsupportedStructureError(ValueError):
    """The requested posterior would leave the supported covariance structure."""


class SingularScoreError(ZeroDivisionError):
    """The marginal at the requested time has a degenerate covariance."""


@dataclass(frozen=True)
class GaussianTarget:
    """Gaussian ``N(mean, cov)``; ``cov`` is a diagonal vector or a dense matrix.

    Zero variances are allowed (pinned coordinates).
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if cov.ndim == 2:
            lam, Q = np.linalg.eigh(0.5 * (cov + cov.T))
            object.__setattr__(self, "_eig", (np.clip(lam, 0.0, None), Q))

    @property
    def dense(self) -> bool:
        return self.cov.ndim == 2

    @property
    def var(self) -> np.ndarray:
        """Marginal variances of each coordinate."""
        return np.diag(self.cov).copy() if self.dense else self.cov

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass(frozen=True)
class MixtureTarget:
    weights: np.ndarray
    components: tuple

    @property
    def dim(self) -> int:
        return self.components[0].dim


# ---------------------------------------------------------------- posteriors

def _gaussian_update(mu0, var0, A, sigma, y):
    """Precision-form conjugate update for a diagonal prior and dense ``A``."""
    prec0 = 1.0 / var0
    shift0 = np.where(np.isinf(var0), 0.0, mu0 * prec0)
    if np.isinf(sigma):
        P = np.diag(prec0)
        rhs = shift0
    else:
        P = np.diag(prec0) + A.T @ A / sigma ** 2
        rhs = shift0 + A.T @ y / sigma ** 2
    cov = np.linalg.inv(P)
    mean = cov @ rhs
    off = cov - np.diag(np.diag(cov))
    if np.all(off == 0.0):
        return mean, np.diag(cov).copy()
    return mean, 0.5 * (cov + cov.T)


def _mask_update(mu0, var0, mask, sigma, y):
    mean, var = mu0.copy(), var0.copy()
    if np.isinf(sigma):
        return mean, var
    if sigma == 0:
        mean[mask] = y
        var[mask] = 0.0
        return mean, var
    v = var0[mask]
    post_var = 1.0 / (1.0 / v + 1.0 / sigma ** 2)
    mean[mask] = post_var * (np.where(np.isinf(v), 0.0, mu0[mask] / v) + y / sigma ** 2)
    var[mask] = post_var
    return mean, var


def _log_evidence(comp: GaussianPrior, problem: InverseProblem) -> float:
    s2 = problem.sigma ** 2
    if problem.mask is not None:
        m, v = comp.mu[problem.mask], comp.var[problem.mask] + s2
        return float(-0.5 * np.sum(np.log(2 * np.pi * v) + (problem.y - m) ** 2 / v))
    A = problem.A
    S = A @ np.diag(comp.var) @ A.T + s2 * np.eye(A.shape[0])
    r = problem.y - A @ comp.mu
    _, logdet = np.linalg.slogdet(2 * np.pi * S)
    return float(-0.5 * (logdet + r @ np.linalg.solve(S, r)))


def posterior_params(problem: InverseProblem) -> GaussianTarget | MixtureTarget:
    """Exact conjugate posterior of a linear-Gaussian inverse problem.

    Gaussian priors accept any dense operator (the posterior covariance may
    be dense). Mixture priors keep diagonal components, which requires a
    mask observation or a dense ``A`` with diagonal ``A^T A``; mixture
    weights are reweighted by each component's evidence.
    """
    prior = problem.prior

    def update(comp):
        if problem.mask is not None:
            return _mask_update(comp.mu, comp.var, problem.mask, problem.sigma, problem.y)
        return _gaussian_update(comp.mu, comp.var, problem.A, problem.sigma, problem.y)

    if isinstance(prior, GaussianPrior):
        return GaussianTarget(*update(prior))

    if problem.A is not None and not np.isinf(problem.sigma):
        AtA = problem.A.T @ problem.A
        off = AtA - np.diag(np.diag(AtA))
        if np.max(np.abs(off)) > 1e-12 * max(1.0, np.max(np.abs(AtA))):
            raise UnsupportedStructureError(
                "mixture posteriors need diagonal A^T A; got a coupled operator")
    comps = tuple(GaussianTarget(*update(c)) for c in prior.components)
    if np.isinf(problem.sigma):
        weights = prior.weights.copy()
    else:
        logw = np.log(prior.weights) + np.array([_log_evidence(c, problem) for c in prior.components])
        weights = np.exp(logw - logsumexp(logw))
    return MixtureTarget(weights, comps)


# ---------------------------------------------------------------- closed-form scores

def _marginal_cov_diag(var, s: NoiseSchedule, t: int):
    g, G = s.gammas[t], s.Gammas[t]
    d = g * np.asarray(var, dtype=float) + G
    if np.any(d <= 0):
        raise SingularScoreError(f"marginal covariance is singular at t={t}")
    return d


def marginal_score_gaussian(mu, var, s: NoiseSchedule, t: int, x) -> np.ndarray:
    """Score of ``N(sqrt(gamma_t) mu, gamma_t diag(var) + Gamma_t I)`` at ``x``."""
    d = _marginal_cov_diag(var, s, t)
    return -(np.asarray(x, dtype=float) - np.sqrt(s.gammas[t]) * np.asarray(mu)) / d


def gaussian_score(target: GaussianTarget, s: NoiseSchedule, t: int, x) -> np.ndarray:
    if not target.dense:
        return marginal_score_gaussian(target.mean, target.cov, s, t, x)
    lam, Q = target._eig
    d = _marginal_cov_diag(lam, s, t)
    # einsum rather than BLAS: a row's result must not depend on the batch it came in
    r = np.einsum("...i,ij->...j", np.asarray(x, dtype=float) - np.sqrt(s.gammas[t]) * target.mean, Q)
    return -np.einsum("...j,ij->...i", r / d, Q)


def _mixture_parts(target: MixtureTarget, s: NoiseSchedule, t: int, x):
    x = np.asarray(x, dtype=float)
    g = s.gammas[t]
    logp, scores = [], []
    for w, comp in zip(target.weights, target.components):
        if comp.dense:
            raise UnsupportedStructureError("mixture components must be diagonal")
        d = _marginal_cov_diag(comp.cov, s, t)
        r = x - np.sqrt(g) * comp.mean
        logp.append(np.log(w) - 0.5 * np.sum(np.log(2 * np.pi * d) + r * r / d, axis=-1))
        scores.append(-r / d)
    return np.stack(logp, axis=0), np.stack(scores, axis=0)


def mixture_log_density(target: MixtureTarget, s: NoiseSchedule, t: int, x) -> np.ndarray:
    """Log density of the time-``t`` marginal of a diagonal Gaussian mixture."""
    logp, _ = _mixture_parts(target, s, t, x)
    return logsumexp(logp, axis=0)


def mixture_score(target: MixtureTarget, s: NoiseSchedule, t: int, x) -> np.ndarray:
    """Responsibility-weighted sum of component scores, stabilised in log space."""
    logp, scores = _mixture_parts(target, s, t, x)
    logp = logp - logp.max(axis=0, keepdims=True)
    r = np.exp(logp)
    r /= r.sum(axis=0, keepdims=True)
    return np.sum(r[..., None] * scores, axis=0)


def x0_from_score(x, t: int, score, s: NoiseSchedule) -> np.ndarray:
    """Denoised estimate ``(x + Gamma_t score) / sqrt(gamma_t)``."""
    return (np.asarray(x) + s.Gammas[t] * np.asarray(score)) / np.sqrt(s.gammas[t])


# ---------------------------------------------------------------- score models

class ScoreModel:
    """Interface for ``s(x, t, y)`` with evaluation counting.

    ``evaluate`` accepts a single state of shape ``(n,)`` or a batch of shape
    ``(k, n)``; the NFE counter increases by the number of states evaluated.
    The counter update is guarded by a lock so concurrent callers account
    correctly.
    """

    def __init__(self):
        self._nfe = 0
        self._lock = threading.Lock()

    @property
    def nfe_count(self) -> int:
        return self._nfe

    def reset_nfe(self) -> None:
        with self._lock:
            self._nfe = 0

    def evaluate(self, x, t: int, y=None) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = self._score(x, int(t), y)
        with self._lock:
            self._nfe += 1 if x.ndim == 1 else x.shape[0]
        return out

    def _score(self, x, t, y):
        raise NotImplementedError


class AnalyticScore(ScoreModel):
    """Exact score of a Gaussian or diagonal-mixture target on a schedule."""

    def __init__(self, target: GaussianTarget | MixtureTarget, schedule: NoiseSchedule):
        super().__init__()
        self.target = target
        self.schedule = schedule

    def _score(self, x, t, y):
        if isinstance(self.target, MixtureTarget):
            return mixture_score(self.target, self.schedule, t, x)
        return gaussian_score(self.target, self.schedule, t, x)


class ZeroScore(ScoreModel):
    def _score(self, x, t, y):
        return np.zeros_like(x)


def analytic_score(problem_or_target, schedule: NoiseSchedule) -> AnalyticScore:
    """Score model for a problem's posterior, or for an explicit target."""
    target = problem_or_target
    if isinstance(problem_or_target, InverseProblem):
        target = posterior_params(problem_or_target)
    return AnalyticScore(target, schedule)


def prior_target(prior: GaussianPrior | MixturePrior) -> GaussianTarget | MixtureTarget:
    """Diffusion target for unconditional (prior) scores."""
    if isinstance(prior, GaussianPrior):
        return GaussianTarget(prior.mu, prior.var)
    return MixtureTarget(prior.weights, tuple(GaussianTarget(c.mu, c.var) for c in prior.components))
