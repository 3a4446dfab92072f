"""Reverse-diffusion paths, single-level and coupled fine/coarse pairs.

States are batches of shape ``(k, n)``: one row per Monte Carlo sample. The
fine-grid index ``t`` doubles as the noise tag, so a coupled pair's fine path
draws exactly the numbers an uncoupled path at the same level would.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .rng import TERMINAL_TAG, TRUNCATION_TAG, PathNoise
from .schedules import LevelGrid, NoiseSchedule, reweight_factor, step_coefficients
from .scores import ScoreModel

METHODS = ("discrete", "sde-ddim1", "sde-em")


@dataclass(frozen=True)
class TerminalLaw:
    """Law of the initial reverse state ``x_T ~ N((I - M) y, M)``.

    ``mask`` holds the diagonal of ``M``: 1 marks coordinates drawn from
    N(0, 1), 0 marks coordinates copied from ``y``. ``pinned-observation``
    starts every path at ``scale * y`` (``scale = sqrt(gamma_T)`` for
    denoising).
    """

    mode: str = "standard-gaussian"
    y: np.ndarray | None = None
    mask: np.ndarray | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("standard-gaussian", "pinned-observation", "masked"):
            raise ValueError(f"unknown terminal law {self.mode!r}")
        if self.mode != "standard-gaussian" and self.y is None:
            raise ValueError(f"{self.mode} terminal law needs an observation")
        if self.y is not None:
            object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        if self.mode == "masked":
            m = np.asarray(self.mask, dtype=float)
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("mask diagonal must be binary")
            if m.shape != self.y.shape:
                raise ValueError("mask and observation dimensions differ")
            object.__setattr__(self, "mask", m)

    @classmethod
    def pinned(cls, y, gamma_T: float) -> "TerminalLaw":
        return cls("pinned-observation", y=y, scale=math.sqrt(gamma_T))


@dataclass(frozen=True)
class TruncationRule:
    """Final move from ``t = 1`` to ``t = 0``, which never evaluates the score."""

    mode: str = "final-gaussian"
    sigma1: float = 0.0

    def __post_init__(self):
        if self.mode not in ("return-x1", "final-gaussian"):
            raise ValueError(f"unknown truncation rule {self.mode!r}")
        if not (math.isfinite(self.sigma1) and self.sigma1 >= 0):
            raise ValueError("sigma1 must be finite and nonnegative")


@dataclass
class CoupledPair:
    x_fine: np.ndarray
    x_coarse: np.ndarray
    eta_c: np.ndarray
    t: int


def init_terminal(law: TerminalLaw, noise: PathNoise) -> np.ndarray:
    k, n = len(noise), noise.dim
    if law.y is not None and law.y.size != n:
        raise ValueError(f"terminal observation has dimension {law.y.size}, paths have {n}")
    if law.mode == "standard-gaussian":
        return noise.at(TERMINAL_TAG)
    if law.mode == "pinned-observation":
        return np.tile(law.scale * law.y, (k, 1))
    m = law.mask
    x = np.tile((1.0 - m) * law.y, (k, 1))
    if np.any(m):
        x = x + m * noise.at(TERMINAL_TAG)
    return x


def reverse_step(x, t: int, delta: int, score_model: ScoreModel, y, noise, s: NoiseSchedule):
    """One skip-``delta`` ancestral step; ``noise`` is already scaled."""
    if t - delta < 1:
        raise IndexError(f"reverse step {t} -> {t - delta} would pass t = 1; use the truncation rule")
    a, b, _ = step_coefficients(s, t, delta)
    return a * x - b * score_model.evaluate(x, t, y) + noise


def apply_truncation(x1, rule: TruncationRule, s: NoiseSchedule, noise: PathNoise | None = None):
    if rule.mode == "return-x1":
        return x1
    out = x1 / math.sqrt(s.gammas[1])
    if rule.sigma1 > 0:
        out = out + rule.sigma1 * noise.at(TRUNCATION_TAG)
    return out


# ---------------------------------------------------------------- SDE forms

def vp_drift(s: NoiseSchedule):
    """Drift and diffusion ``(A_t, B_t)`` of the variance-preserving SDE matching ``s``."""
    return (lambda t: -0.5 * s.beta(t)), (lambda t: math.sqrt(s.beta(t)))


def sde_em_step(x, t: float, h: float, score_model: ScoreModel, y, A, B, xi):
    """Euler-Maruyama step of the reverse SDE from forward time ``t`` to ``t - h``.

    ``A`` and ``B`` are callables of forward time; reverse time is
    ``tau = T - t`` so the coefficients are evaluated at the step start.
    """
    if not h > 0:
        raise ValueError("step size must be positive")
    a, b = A(t), B(t)
    drift = -a * x
    if b != 0.0:
        drift = drift + b * b * score_model.evaluate(x, t, y)
    return x + h * drift + math.sqrt(h) * b * xi


def _int_half_b2_over_Gamma(s: NoiseSchedule, t_lo: float, t_hi: float) -> float:
    """``int_{t_lo}^{t_hi} B^2 / (2 Gamma) du`` for the VP SDE, via ``d gamma = -B^2 gamma du``."""
    def logit(u):
        lg = s.log_gamma(u)
        return lg - math.log(-math.expm1(lg))
    return 0.5 * (logit(t_lo) - logit(t_hi))


def ddim1_coefficients(s: NoiseSchedule, s_time: float, t_time: float):
    """Exponential-integrator coefficients ``(a, b, std)`` from ``s_time`` to ``t_time``."""
    ls, lt = s.log_gamma(s_time), s.log_gamma(t_time)
    if ls > lt:
        raise ValueError(f"time order violated: gamma({s_time}) > gamma({t_time})")
    # exp(-int_t^s A du) with A = -beta/2 and int beta = log gamma_t - log gamma_s
    ea = math.exp(0.5 * (lt - ls))
    G_s, G_t = -math.expm1(ls), -math.expm1(lt)
    coef = ea * G_s - G_t / ea
    var = 0.0 if G_t == 0.0 else G_t * (1.0 - G_t / G_s / ea ** 2)
    return ea, coef, math.sqrt(max(var, 0.0))


def sde_ddim1_step(x, s_time: int, t_time: float, score_model: ScoreModel, y, schedule: NoiseSchedule, noise):
    """DDIM1 step from ``s_time`` to ``t_time``; ``noise`` is already scaled."""
    ea, coef, _ = ddim1_coefficients(schedule, s_time, t_time)
    if ea == 1.0 and coef == 0.0:
        return x + noise
    return ea * x + coef * score_model.evaluate(x, s_time, y) + noise


def sde_coarse_increment(eta_new, eta_prev, schedule: NoiseSchedule, t_mid: float, t_end: float):
    """Merge the increment ending at ``t_mid`` into the one spanning ``t_mid -> t_end``."""
    G_mid = -math.expm1(schedule.log_gamma(t_mid))
    G_end = -math.expm1(schedule.log_gamma(t_end))
    scaler = math.sqrt(G_end / G_mid) * math.exp(-_int_half_b2_over_Gamma(schedule, t_end, t_mid))
    return scaler * eta_prev + eta_new


# ---------------------------------------------------------------- path generation

@dataclass(frozen=True)
class DiffusionSampler:
    """Everything a reverse chain needs apart from its noise.

    Args:
        schedule: finest-grid schedule with ``grid.schedule_steps`` steps.
        grid: level hierarchy.
        score: score model (its NFE counter is shared by all paths).
        law: terminal law.
        truncation: rule for the last move to ``t = 0``.
        y: observation forwarded to the score model.
        method: ``discrete``, ``sde-ddim1`` or ``sde-em``.
        deterministic: suppress all noise after the terminal draw.
        dim: state dimension; inferred from ``law.y`` or ``y`` when omitted.
    """

    schedule: NoiseSchedule
    grid: LevelGrid
    score: ScoreModel
    law: TerminalLaw = TerminalLaw()
    truncation: TruncationRule = TruncationRule()
    y: np.ndarray | None = None
    method: str = "discrete"
    deterministic: bool = False
    dim: int | None = None

    def __post_init__(self):
        if self.dim is None:
            src = self.law.y if self.law.y is not None else self.y
            if src is None:
                raise ValueError("cannot infer the state dimension; pass dim")
            object.__setattr__(self, "dim", int(np.asarray(src).size))
        if self.schedule.T != self.grid.schedule_steps:
            raise ValueError(
                f"schedule has {self.schedule.T} steps, grid needs {self.grid.schedule_steps}")
        if self.method not in METHODS:
            raise ValueError(f"unknown sampler method {self.method!r}")

    def with_options(self, **kw) -> "DiffusionSampler":
        return replace(self, **kw)

    # one fine step; returns the new state and the increment used for coupling
    def _step(self, x, t, delta, noise):
        s = self.schedule
        if self.method == "sde-em":
            xi = np.zeros_like(x) if self.deterministic else noise.at(t)
            A, B = vp_drift(s)
            return sde_em_step(x, t, delta, self.score, self.y, A, B, xi), xi
        if self.deterministic:
            eta = np.zeros_like(x)
        elif self.method == "discrete":
            eta = step_coefficients(s, t, delta)[2] * noise.at(t)
        else:
            eta = ddim1_coefficients(s, t, t - delta)[2] * noise.at(t)
        if self.method == "discrete":
            return reverse_step(x, t, delta, self.score, self.y, eta, s), eta
        return sde_ddim1_step(x, t, t - delta, self.score, self.y, s, eta), eta

    def _accumulate(self, eta_c, eta, t, delta):
        if self.method == "sde-em":
            return eta_c + eta
        if self.method == "discrete":
            return reweight_factor(self.schedule, t, delta) * eta_c + eta
        return sde_coarse_increment(eta, eta_c, self.schedule, t, t - delta)

    def _coarse_step(self, x, t, delta, eta_c, n_fine):
        s = self.schedule
        if self.method == "sde-em":
            A, B = vp_drift(s)
            return sde_em_step(x, t, delta, self.score, self.y, A, B, eta_c / math.sqrt(n_fine))
        if self.method == "discrete":
            return reverse_step(x, t, delta, self.score, self.y, eta_c, s)
        return sde_ddim1_step(x, t, t - delta, self.score, self.y, s, eta_c)

    def sample_path(self, level: int, noise: PathNoise) -> np.ndarray:
        """Run level ``level`` from the terminal draw to ``t = 0``."""
        delta = self.grid.skip(level)
        x = init_terminal(self.law, noise)
        for t in self.grid.times(level)[:-1]:
            x, _ = self._step(x, int(t), delta, noise)
        return apply_truncation(x, self.truncation, self.schedule, noise)

    def coupled_block(self, pair: CoupledPair, level: int, noise: PathNoise) -> CoupledPair:
        """Advance the fine state ``M`` steps and the coarse state one step."""
        M, delta = self.grid.M, self.grid.skip(level)
        t0 = pair.t
        if t0 - M * delta < 1:
            raise IndexError(f"coupled block from t={t0} would pass t = 1")
        x_f, eta_c, t = pair.x_fine, np.zeros_like(pair.x_fine), t0
        for _ in range(M):
            x_f, eta = self._step(x_f, t, delta, noise)
            eta_c = self._accumulate(eta_c, eta, t, delta)
            t -= delta
        x_c = self._coarse_step(pair.x_coarse, t0, M * delta, eta_c, M)
        return CoupledPair(x_f, x_c, eta_c, t)

    def sample_coupled_pair(self, level: int, noise: PathNoise) -> tuple[np.ndarray, np.ndarray]:
        """Fine path at ``level`` and coarse path at ``level - 1`` sharing all noise."""
        if level < 1:
            raise ValueError("coupled pairs need level >= 1")
        x = init_terminal(self.law, noise)
        pair = CoupledPair(x, x.copy(), np.zeros_like(x), self.grid.t_start)
        for _ in range(self.grid.steps(level - 1)):
            pair = self.coupled_block(pair, level, noise)
        rule, s = self.truncation, self.schedule
        return apply_truncation(pair.x_fine, rule, s, noise), apply_truncation(pair.x_coarse, rule, s, noise)


def dump_paths_csv(path, level: int, samples, values) -> None:
    """Write sampled states as ``level,sample,coordinate,value`` rows."""
    values = np.atleast_2d(values)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "sample", "coordinate", "value"])
        for i, row in zip(samples, values):
            for j, v in enumerate(row):
                w.writerow([level, int(i), j, repr(float(v))])
