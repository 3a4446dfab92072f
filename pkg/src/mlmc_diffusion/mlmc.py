"""Multilevel Monte Carlo estimator, adaptive driver and plain-MC baseline.

Level ``l0`` contributes ``E[f(X_l0)]``; each level ``l > l0`` contributes
``E[f(X_l) - f(X_{l-1})]`` estimated from coupled pairs. Per-level variances
``V_l`` are sums of coordinate variances, i.e. ``E||d - E d||^2``, and bias
checks use the Euclidean norm of mean vectors.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import PathNoise
from .sampler import DiffusionSampler

CHUNK = 1024
STREAM_MLMC = 1
STREAM_START = 2
STREAM_SCREEN = 3
STREAM_MC = 7

TELEMETRY_COLUMNS = ("iteration", "level", "N_target", "N_done", "V_l", "Y_norm",
                     "bias_est", "eps_est", "total_nfe")


class RateUnavailableError(ValueError):
    """Too few levels to regress convergence rates."""


class NonConvergenceError(RuntimeError):
    """The level cap was reached before the bias test passed."""

    def __init__(self, msg, result):
        super().__init__(msg)
        self.result = result


@dataclass(frozen=True)
class QoI:
    """Componentwise quantity of interest.

    ``second-moment`` is ``x**2``; ``masked-second-moment`` additionally
    zeroes the coordinates flagged in ``mask`` (observed ones); ``custom``
    applies ``func`` to the ``(k, n)`` batch.
    """

    kind: str = "second-moment"
    mask: np.ndarray | None = None
    func: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("second-moment", "masked-second-moment", "custom"):
            raise ValueError(f"unknown QoI {self.kind!r}")
        if self.kind == "masked-second-moment":
            if self.mask is None:
                raise ValueError("masked QoI needs a mask")
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if self.kind == "custom" and self.func is None:
            raise ValueError("custom QoI needs func")

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "custom":
            return np.asarray(self.func(x), dtype=float)
        f = x * x
        if self.kind == "masked-second-moment":
            f = np.where(self.mask, 0.0, f)
        return f


def _moments(a):
    n = a.shape[0]
    mean = a.mean(axis=0)
    r = a - mean
    return n, mean, np.einsum("ij,ij->j", r, r)


def _chan(n1, mean1, m2_1, n2, mean2, m2_2):
    n = n1 + n2
    delta = mean2 - mean1
    mean = mean1 + delta * (n2 / n)
    m2 = m2_1 + m2_2 + delta * delta * (n1 * n2 / n)
    return n, mean, m2


@dataclass
class LevelStats:
    """Running componentwise moments of ``d = f(fine) - f(coarse)`` and ``f(fine)``.

    Moments are kept as (count, mean, centred sum of squares) and merged
    with the pairwise update of Chan et al.; at the base level ``d = f``.
    """

    level: int
    cost: float
    n: int = 0
    mean_d: np.ndarray | None = None
    m2_d: np.ndarray | None = None
    mean_f: np.ndarray | None = None
    m2_f: np.ndarray | None = None

    def add(self, d, f) -> "LevelStats":
        other = LevelStats(self.level, self.cost)
        other.n, other.mean_d, other.m2_d = _moments(np.atleast_2d(d))
        _, other.mean_f, other.m2_f = _moments(np.atleast_2d(f))
        merged = self.merge(other)
        self.n, self.mean_d, self.m2_d = merged.n, merged.mean_d, merged.m2_d
        self.mean_f, self.m2_f = merged.mean_f, merged.m2_f
        return self

    def merge(self, other: "LevelStats") -> "LevelStats":
        if other.level != self.level:
            raise ValueError("cannot merge statistics of different levels")
        if other.n == 0:
            return LevelStats(self.level, self.cost, self.n, self.mean_d, self.m2_d, self.mean_f, self.m2_f)
        if self.n == 0:
            return LevelStats(self.level, self.cost, other.n, other.mean_d, other.m2_d,
                              other.mean_f, other.m2_f)
        n, md, sd = _chan(self.n, self.mean_d, self.m2_d, other.n, other.mean_d, other.m2_d)
        _, mf, sf = _chan(self.n, self.mean_f, self.m2_f, other.n, other.mean_f, other.m2_f)
        return LevelStats(self.level, self.cost, n, md, sd, mf, sf)

    @property
    def Y(self) -> np.ndarray:
        return self.mean_d

    @property
    def V(self) -> float:
        return level_mean_and_variance(self)[1]

    @property
    def V_fine(self) -> float:
        self._need(2)
        return float(np.sum(self.m2_f) / (self.n - 1))

    @property
    def Y_fine(self) -> np.ndarray:
        return self.mean_f

    def _need(self, k):
        if self.n < k:
            raise ValueError(f"level {self.level} has {self.n} samples; need at least {k}")


@dataclass
class MlmcResult:
    estimate: np.ndarray
    eps_target: float
    eps_est: float
    levels: list
    alpha: float
    beta: float
    total_nfe: int
    l0: int
    converged: bool = True
    telemetry: list = field(default_factory=list)

    @property
    def L(self) -> int:
        return self.levels[-1].level

    @property
    def n_per_level(self) -> list[int]:
        return [s.n for s in self.levels]


# ---------------------------------------------------------------- estimator algebra

def level_mean_and_variance(stats: LevelStats) -> tuple[np.ndarray, float]:
    """Mean vector ``Y_l`` and summed unbiased coordinate variance ``V_l``."""
    stats._need(2)
    return stats.mean_d, float(np.sum(stats.m2_d) / (stats.n - 1))


def optimal_allocation(V, C, eps: float) -> list[int]:
    """Samples per level minimising cost subject to ``sum V/N <= eps^2 / 2``."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    V = np.asarray(V, dtype=float)
    C = np.asarray(C, dtype=float)
    if np.any(V < 0) or np.any(C <= 0):
        raise ValueError("need V >= 0 and C > 0")
    N = 2.0 / eps ** 2 * np.sqrt(V / C) * np.sum(np.sqrt(V * C))
    # shave round-off so exact integers are not pushed up by ceil
    return [int(v) for v in np.ceil(N * (1.0 - 1e-12))]


def bias_estimate(y_last: float, y_prev: float, alpha: float, M: int) -> float:
    """Bias of the finest level from the last two correction norms."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if M < 2:
        raise ValueError("M must be at least 2")
    return max(y_prev * M ** (-alpha), y_last) / (M ** alpha - 1.0)


def debias_level_mean(y_norm: float, var: float, n: int, tol: float = 1e-10, max_iter: int = 200,
                      mode: str = "divide", var_fn: Callable[[float], float] | None = None) -> float:
    """Correct ``||Y_l||`` for the upward bias ``E||Y||^2 = ||E Y||^2 + V/N``.

    Iterates ``b <- ||Y|| / sqrt(1 + V(b) / (N b^2))`` from ``b = ||Y||``;
    the fixed point is ``sqrt(||Y||^2 - V/N)`` when that is real and ``0``
    otherwise. ``var_fn`` recomputes ``V`` about a mean of norm ``b``;
    ``mode="multiply"`` applies the factor the other way round.
    """
    if n < 1 or var < 0:
        raise ValueError("need n >= 1 and var >= 0")
    if y_norm == 0.0:
        return 0.0
    if var == 0.0:
        return y_norm
    b = y_norm
    for _ in range(max_iter):
        v = var if var_fn is None else var_fn(b)
        if b == 0.0:
            return 0.0
        factor = math.sqrt(1.0 + v / (n * b * b))
        new = y_norm / factor if mode == "divide" else y_norm * factor
        if abs(new - b) < tol:
            return max(new, 0.0)
        b = new
    return max(b, 0.0)


def start_level_check(V1: float, Vf: float, Vc: float, M: int) -> bool:
    """True when coupling at the candidate base level already pays off."""
    return V1 <= (math.sqrt(Vf * M) - math.sqrt(Vc)) ** 2 / (1 + M)


def fit_rates(levels, M: int = 2) -> tuple[float, float]:
    """Least-squares decay rates from ``(level, ||Y_l||, V_l)`` triples.

    Returns ``alpha = -slope(log_M ||Y_l||)`` and ``beta = -slope(log_M V_l)``.
    Entries with a zero norm or variance are dropped from their regression.
    """
    levels = list(levels)

    def slope(pairs):
        pairs = [(l, v) for l, v in pairs if v > 0]
        if len(pairs) < 2:
            raise RateUnavailableError(f"need at least 2 levels with positive values, got {len(pairs)}")
        x = np.array([p[0] for p in pairs], dtype=float)
        y = np.log(np.array([p[1] for p in pairs])) / math.log(M)
        return float(np.polyfit(x, y, 1)[0])

    alpha = -slope([(l, y) for l, y, _ in levels])
    beta = -slope([(l, v) for l, _, v in levels])
    return alpha, beta


def eps_from_parts(y_last: float, var_sum: float, alpha: float, M: int) -> float:
    return math.sqrt(y_last ** 2 / (M ** alpha - 1.0) ** 2 + var_sum)


def eps_estimate(levels, alpha: float, M: int) -> float:
    """Estimated RMS error from the finest correction and the level variances."""
    levels = list(levels)
    var_sum = sum(s.V / s.n for s in levels)
    return eps_from_parts(float(np.linalg.norm(levels[-1].Y)), var_sum, alpha, M)


def predict_cost(alpha: float, beta: float, V0: float, C0: float, eps: float, M: int = 2):
    """Asymptotic MLMC cost, its regime tag, and the plain-MC prediction."""
    base = V0 * C0 * eps ** -2
    if math.isclose(beta, 1.0, rel_tol=1e-12, abs_tol=1e-12):
        regime, factor = "beta=1", abs(math.log(eps) / math.log(M)) ** 2
    elif beta > 1:
        regime, factor = "beta>1", 1.0
    else:
        regime, factor = "beta<1", eps ** ((beta - 1.0) / alpha)
    return base * factor, regime, V0 * C0 * eps ** (-2.0 - 1.0 / alpha)


# ---------------------------------------------------------------- sampling

def level_cost(sampler: DiffusionSampler, level: int, l0: int) -> int:
    g = sampler.grid
    return g.steps(level) + (g.steps(level - 1) if level > l0 else 0)


def level_samples(sampler: DiffusionSampler, level: int, l0: int, qoi: QoI, samples,
                  seed: int, stream: int):
    """``(d, f_fine)`` for the given sample indices of one level."""
    noise = PathNoise.make(seed, stream, level, samples, sampler.dim)
    if level == l0:
        f = qoi(sampler.sample_path(level, noise))
        return f, f
    xf, xc = sampler.sample_coupled_pair(level, noise)
    f = qoi(xf)
    return f - qoi(xc), f


def _chunks(start, count, chunk=CHUNK):
    return [np.arange(s, min(s + chunk, start + count)) for s in range(start, start + count, chunk)]


def draw_level(sampler, stats: LevelStats, count: int, l0: int, qoi: QoI, seed: int, stream: int,
               pool: ThreadPoolExecutor | None = None) -> LevelStats:
    """Append ``count`` new samples (next indices) to ``stats``.

    Chunk boundaries depend only on the sample indices and chunk results
    are merged in index order, so the outcome does not depend on ``pool``.
    """
    if count <= 0:
        return stats

    def work(idx):
        d, f = level_samples(sampler, stats.level, l0, qoi, idx, seed, stream)
        return LevelStats(stats.level, stats.cost).add(d, f)

    chunks = _chunks(stats.n, count)
    parts = list(pool.map(work, chunks)) if pool is not None else [work(c) for c in chunks]
    merged = stats
    for p in parts:
        merged = merged.merge(p)
    stats.n, stats.mean_d, stats.m2_d = merged.n, merged.mean_d, merged.m2_d
    stats.mean_f, stats.m2_f = merged.mean_f, merged.m2_f
    return stats


def mc_estimate(sampler: DiffusionSampler, level: int, n_samples: int, qoi: QoI, seed: int = 0,
                stream: int = STREAM_MC, workers: int = 1):
    """Plain Monte Carlo at one level: ``(estimate, stderr, total_nfe)``."""
    if n_samples < 2:
        raise ValueError("plain Monte Carlo needs at least 2 samples for a variance")
    stats = LevelStats(level, sampler.grid.steps(level))
    with _pool(workers) as pool:
        draw_level(sampler, stats, n_samples, level, qoi, seed, stream, pool)
    _, V = level_mean_and_variance(stats)
    return stats.mean_f.copy(), math.sqrt(V / n_samples), n_samples * sampler.grid.steps(level)


class _NullPool:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def _pool(workers):
    return ThreadPoolExecutor(max_workers=workers) if workers and workers > 1 else _NullPool()


def select_start_level(sampler: DiffusionSampler, qoi: QoI, l0: int, n0: int, seed: int = 0,
                       max_l0: int | None = None, workers: int = 1) -> int:
    """Raise ``l0`` until the start-level condition holds (or the cap is hit)."""
    cap = sampler.grid.L - 2 if max_l0 is None else max_l0
    with _pool(workers) as pool:
        for l in range(l0, cap + 1):
            st = draw_level(sampler, LevelStats(l + 1, level_cost(sampler, l + 1, l)), n0, l, qoi,
                            seed, STREAM_START, pool)
            coarse = draw_level(sampler, LevelStats(l, sampler.grid.steps(l)), n0, l, qoi,
                                seed, STREAM_START, pool)
            if start_level_check(st.V, st.V_fine, coarse.V_fine, sampler.grid.M):
                return l
    return cap


def screen_levels(sampler: DiffusionSampler, qoi: QoI, l0: int, L: int, n_samples: int,
                  seed: int = 0, workers: int = 1) -> list[LevelStats]:
    """Fixed-sample screening of every level ``l0..L`` for rate estimation."""
    out = []
    with _pool(workers) as pool:
        for l in range(l0, L + 1):
            st = LevelStats(l, level_cost(sampler, l, l0))
            out.append(draw_level(sampler, st, n_samples, l0, qoi, seed, STREAM_SCREEN, pool))
    return out


# ---------------------------------------------------------------- adaptive driver

def adaptive_mlmc(sampler: DiffusionSampler, eps: float, qoi: QoI, l0: int = 0, n0: int = 100,
                  seed: int = 0, max_level: int | None = None, alpha_default: float = 0.5,
                  debias: str = "divide", workers: int = 1, stream: int = STREAM_MLMC,
                  raise_on_failure: bool = True) -> MlmcResult:
    """Adaptive MLMC: grow sample counts and levels until the RMS target ``eps`` is met.

    Starts with ``n0`` samples on levels ``l0..l0+2``. Each iteration draws
    outstanding samples (at most ``10 * n0`` per level), re-estimates
    ``||Y_l||`` (debiased) and ``V_l``, re-allocates samples, and appends a
    level while the bias estimate exceeds ``eps / sqrt(2)``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    M = sampler.grid.M
    max_level = sampler.grid.L if max_level is None else min(max_level, sampler.grid.L)
    if l0 + 2 > max_level:
        raise ValueError(f"need l0 + 2 <= max level, got l0={l0}, max={max_level}")

    stats = [LevelStats(l, level_cost(sampler, l, l0)) for l in range(l0, l0 + 3)]
    target = [n0] * 3
    alpha, beta = alpha_default, 1.0
    telemetry = []
    converged = False
    it = 0
    with _pool(workers) as pool:
        while True:
            it += 1
            for st, tgt in zip(stats, target):
                draw_level(sampler, st, min(tgt - st.n, 10 * n0), l0, qoi, seed, stream, pool)

            V = np.array([st.V for st in stats])
            y_raw = [float(np.linalg.norm(st.Y)) for st in stats]
            y_deb = [_debiased_norm(st, debias) for st in stats]

            try:
                a_fit, b_fit = fit_rates([(st.level, y, v) for st, y, v in
                                          zip(stats[1:], y_raw[1:], V[1:])], M)
                alpha, beta = max(a_fit, alpha_default), max(b_fit, 0.0)
            except RateUnavailableError:
                alpha = alpha_default

            Vmod = V.copy()
            for i in range(2, len(stats)):
                Vmod[i] = max(Vmod[i], 0.5 * Vmod[i - 1] * M ** (-beta))
            C = [st.cost for st in stats]
            target = [max(n, st.n) for n, st in zip(optimal_allocation(Vmod, C, eps), stats)]

            bias = bias_estimate(y_deb[-1], y_deb[-2], alpha, M)
            eps_est = eps_from_parts(y_raw[-1], float(np.sum(V / [st.n for st in stats])), alpha, M)
            total = sum(st.n * st.cost for st in stats)
            for st, tgt, v, y in zip(stats, target, V, y_raw):
                telemetry.append((it, st.level, tgt, st.n, float(v), y, bias, eps_est, total))

            if bias > eps / math.sqrt(2):
                if stats[-1].level >= max_level:
                    break
                new = LevelStats(stats[-1].level + 1, level_cost(sampler, stats[-1].level + 1, l0))
                stats.append(new)
                Vmod = np.append(Vmod, Vmod[-1] * M ** (-beta))
                C.append(new.cost)
                alloc = optimal_allocation(Vmod, C, eps)
                target = [max(n, st.n) for n, st in zip(alloc, stats)]
                target[-1] = max(target[-1], n0)
                continue
            if all(tgt <= st.n for st, tgt in zip(stats, target)):
                converged = True
                break

    V = np.array([st.V for st in stats])
    estimate = sum(st.Y for st in stats)
    result = MlmcResult(
        estimate=np.array(estimate, dtype=float),
        eps_target=eps,
        eps_est=eps_from_parts(float(np.linalg.norm(stats[-1].Y)),
                               float(np.sum(V / [st.n for st in stats])), alpha, M),
        levels=stats, alpha=alpha, beta=beta,
        total_nfe=int(sum(st.n * st.cost for st in stats)),
        l0=l0, converged=converged, telemetry=telemetry)
    if not converged and raise_on_failure:
        raise NonConvergenceError(
            f"level cap {max_level} reached with bias above eps/sqrt(2); eps_est={result.eps_est:.4g}", result)
    return result


def _debiased_norm(st: LevelStats, mode: str) -> float:
    y = float(np.linalg.norm(st.Y))
    Y, V = level_mean_and_variance(st)
    n = st.n
    # variance about a mean vector of norm b pointing along Y
    return debias_level_mean(y, V, n, mode=mode,
                             var_fn=lambda b: V + n * (y - b) ** 2 / (n - 1))


def write_telemetry(path, rows, header_comment: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(TELEMETRY_COLUMNS)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)
