"""Ground truth for the benchmarks, computed without the sampler or score stack.

Posterior moments use the covariance (gain) form of Gaussian conditioning,
a different route from the precision form used to build scores. For
Gaussian targets the reverse chain is affine in its state, so the exact
mean and covariance of every level's output can also be propagated in
closed form.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

from .problems import GaussianPrior, InverseProblem, MixturePrior


def _condition(mu0, var0, problem: InverseProblem):
    """Posterior mean and covariance of one diagonal Gaussian prior component."""
    if np.isinf(problem.sigma):
        return mu0.copy(), np.diag(var0)
    if problem.mask is not None and problem.sigma == 0:
        mean, cov = mu0.copy(), np.diag(var0)
        mean[problem.mask] = problem.y
        obs = np.flatnonzero(problem.mask)
        cov[obs, :] = 0.0
        cov[:, obs] = 0.0
        return mean, cov
    A = problem.operator()
    S0 = np.diag(var0)
    S_yy = A @ S0 @ A.T + problem.sigma ** 2 * np.eye(A.shape[0])
    gain = np.linalg.solve(S_yy, A @ S0).T
    mean = mu0 + gain @ (problem.y - A @ mu0)
    cov = S0 - gain @ A @ S0
    return mean, 0.5 * (cov + cov.T)


def _evidence_logpdf(comp: GaussianPrior, problem: InverseProblem) -> float:
    A = problem.operator()
    S = A @ np.diag(comp.var) @ A.T + problem.sigma ** 2 * np.eye(A.shape[0])
    return float(stats.multivariate_normal(A @ comp.mu, S).logpdf(problem.y))


def posterior_mixture(problem: InverseProblem):
    """``(weights, [(mean, cov), ...])`` of the posterior; one component for Gaussian priors."""
    prior = problem.prior
    if isinstance(prior, GaussianPrior):
        return np.ones(1), [_condition(prior.mu, prior.var, problem)]
    comps = [_condition(c.mu, c.var, problem) for c in prior.components]
    if np.isinf(problem.sigma):
        return prior.weights.copy(), comps
    logw = np.log(prior.weights) + np.array([_evidence_logpdf(c, problem) for c in prior.components])
    w = np.exp(logw - logw.max())
    return w / w.sum(), comps


def gaussian_truth(problem: InverseProblem) -> np.ndarray:
    """Per-coordinate posterior second moment for a Gaussian prior."""
    if not isinstance(problem.prior, GaussianPrior):
        raise TypeError("gaussian_truth needs a Gaussian prior")
    _, [(mean, cov)] = posterior_mixture(problem)
    return mean ** 2 + np.diag(cov)


def mixture_truth(problem: InverseProblem) -> np.ndarray:
    """Per-coordinate posterior second moment for a mixture prior."""
    if not isinstance(problem.prior, MixturePrior):
        raise TypeError("mixture_truth needs a mixture prior")
    w, comps = posterior_mixture(problem)
    return sum(wk * (m ** 2 + np.diag(C)) for wk, (m, C) in zip(w, comps))


def truth(problem: InverseProblem) -> np.ndarray:
    if isinstance(problem.prior, MixturePrior):
        return mixture_truth(problem)
    return gaussian_truth(problem)


def direct_posterior_sampler(problem: InverseProblem, n_samples: int, rng: np.random.Generator,
                             chunk: int = 1_000_000):
    """Yield chunks of exact posterior draws (component pick, then Gaussian)."""
    w, comps = posterior_mixture(problem)
    factors = []
    for mean, cov in comps:
        lam, Q = np.linalg.eigh(cov)
        factors.append((mean, Q * np.sqrt(np.clip(lam, 0.0, None))))
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        which = rng.choice(len(w), size=k, p=w)
        z = rng.standard_normal((k, problem.dim))
        x = np.empty((k, problem.dim))
        for j, (mean, F) in enumerate(factors):
            sel = which == j
            x[sel] = mean + z[sel] @ F.T
        done += k
        yield x


def direct_second_moment(problem: InverseProblem, n_samples: int, seed: int = 0):
    """Monte Carlo second moment from exact posterior draws: ``(mean, stderr)``."""
    rng = np.random.default_rng(seed)
    n, mean, m2 = 0, np.zeros(problem.dim), np.zeros(problem.dim)
    for x in direct_posterior_sampler(problem, n_samples, rng):
        f = x * x
        k, fm = f.shape[0], f.mean(axis=0)
        delta = fm - mean
        m2 = m2 + ((f - fm) ** 2).sum(axis=0) + delta ** 2 * (n * k / (n + k))
        mean = mean + delta * (k / (n + k))
        n += k
    return mean, np.sqrt(m2 / (n - 1) / n)


def gaussian_level_moments(mean, cov, gammas, times, *, x_mean, x_cov, deterministic=False,
                           sigma1=0.0, return_x1=False):
    """Exact output mean and covariance of a discrete reverse chain on a Gaussian target.

    Args:
        mean, cov: target ``N(mean, cov)`` the exact score belongs to.
        gammas: schedule values indexed by grid time.
        times: visited grid times from the start down to 1.
        x_mean, x_cov: law of the initial state.
        deterministic: drop the ancestral noise.
        sigma1, return_x1: truncation rule for the last move to ``t = 0``.
    """
    mean = np.asarray(mean, float)
    cov = np.asarray(cov, float)
    n = mean.size
    eye = np.eye(n)
    m, C = np.asarray(x_mean, float).copy(), np.asarray(x_cov, float).copy()
    for t, u in zip(times[:-1], times[1:]):
        g_t, g_u = gammas[t], gammas[u]
        G_t, G_u = 1.0 - g_t, 1.0 - g_u
        P = np.linalg.inv(g_t * cov + G_t * eye)
        a = math.sqrt(g_u / g_t)
        b = math.sqrt(g_t / g_u) * (G_u - g_u / g_t * G_t)
        K = a * eye + b * P
        m = K @ m - b * math.sqrt(g_t) * (P @ mean)
        C = K @ C @ K.T
        if not deterministic:
            C = C + (G_u / G_t) * (1.0 - g_t / g_u) * eye
    if return_x1:
        return m, C
    r = 1.0 / math.sqrt(gammas[1])
    return r * m, r * r * C + sigma1 ** 2 * eye


def reference_mc(sampler, level: int, n_samples: int, qoi, seed: int = 0, stream: int = 7):
    """Plain Monte Carlo baseline at one level (delegates to the estimator code path)."""
    from .mlmc import mc_estimate
    return mc_estimate(sampler, level, n_samples, qoi, seed=seed, stream=stream)
