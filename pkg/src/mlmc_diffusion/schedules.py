"""Noise schedules, level grids and closed-form reverse-step coefficients.

A schedule is the ladder ``gamma_0 = 1 > gamma_1 > ... > gamma_T > 0`` of
signal-retention factors of the forward noising kernel; ``Gamma_t = 1 - gamma_t``
is the accumulated noise variance. All levels of a multilevel run index into
the same finest-grid schedule so coarse and fine chains see identical values
at shared times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit


class ScheduleError(ValueError):
    """Raised when a schedule cannot be built or violates its invariants."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable ladder of ``gamma_t`` for ``t = 0..T``."""

    gammas: np.ndarray
    kind: str = "custom"

    def __post_init__(self):
        g = np.array(self.gammas, dtype=float)
        g.setflags(write=False)
        object.__setattr__(self, "gammas", g)
        if g.ndim != 1 or g.size < 2:
            raise ScheduleError("gammas must be a vector of length T+1 >= 2")
        if g[0] != 1.0:
            raise ScheduleError(f"gammas[0] must equal 1 exactly, got {g[0]!r}")
        if not np.all(np.diff(g) < 0):
            raise ScheduleError("gammas must be strictly decreasing")
        if not g[-1] > 0:
            raise ScheduleError(f"gammas[T] must be positive, got {g[-1]!r}")
        Gam = 1.0 - g
        Gam.setflags(write=False)
        object.__setattr__(self, "Gammas", Gam)

    Gammas: np.ndarray = field(init=False, repr=False, compare=False)

    @property
    def T(self) -> int:
        return self.gammas.size - 1

    def gamma(self, t):
        return self.gammas[t]

    def Gamma(self, t):
        return self.Gammas[t]

    def beta(self, t: float) -> float:
        """Variance-preserving drift rate ``-d log(gamma)/dt`` in index units.

        The continuous schedule interpolates ``log gamma`` linearly between
        grid indices, so ``beta`` is piecewise constant; at a grid index the
        rate of the interval below it (towards ``t = 0``) is returned.
        """
        i = int(math.ceil(t)) if t > 0 else 1
        i = min(max(i, 1), self.T)
        return float(math.log(self.gammas[i - 1]) - math.log(self.gammas[i]))

    def log_gamma(self, t: float) -> float:
        """Piecewise log-linear interpolation of ``log gamma`` at real time ``t``."""
        if t <= 0:
            return 0.0
        if t >= self.T:
            return float(math.log(self.gammas[-1]))
        i = int(math.floor(t))
        w = t - i
        lo, hi = math.log(self.gammas[i]), math.log(self.gammas[i + 1])
        return (1.0 - w) * lo + w * hi

    def to_csv(self, path) -> None:
        """Write ``t,gamma`` rows with round-trip precision."""
        lines = ["t,gamma"]
        lines += [f"{t},{g!r}" for t, g in enumerate(self.gammas.tolist())]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "NoiseSchedule":
        rows = Path(path).read_text().strip().splitlines()
        if rows[0].strip() != "t,gamma":
            raise ScheduleError(f"bad schedule header {rows[0]!r}")
        gammas = []
        for expected, row in enumerate(rows[1:]):
            t, g = row.split(",")
            if int(t) != expected:
                raise ScheduleError(f"non-contiguous index {t} in schedule file")
            gammas.append(float(g))
        return cls(np.array(gammas), kind="file")


def build_schedule(kind: str, T: int, gamma_T: float | None = None,
                   sigma_y: float | None = None, gamma_1: float | None = None) -> NoiseSchedule:
    """Build a schedule on ``T + 1`` grid indices.

    Families:
        ``log-linear``: ``gamma_t = gamma_T ** (t / T)``, i.e. geometric decay
        with a constant ratio ``gamma_t / gamma_{t-1}``.
        ``terminal-pinned``: the same ladder with ``gamma_T`` fixed either
        directly or through an observation noise level as
        ``gamma_T = 1 / (1 + sigma_y**2)``.
        ``logit-linear``: ``log(gamma_t / Gamma_t)`` falls linearly from
        ``logit(gamma_1)`` at ``t = 1`` to ``logit(gamma_T)`` at ``t = T``, so
        every step removes the same amount of signal-to-noise ratio and
        ``gamma_1`` (the truncation point) does not move when ``T`` grows.
    """
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "terminal-pinned":
        if (gamma_T is None) == (sigma_y is None):
            raise ScheduleError("terminal-pinned needs exactly one of gamma_T, sigma_y")
        if sigma_y is not None:
            if not sigma_y > 0:
                raise ScheduleError("sigma_y must be positive")
            gamma_T = 1.0 / (1.0 + sigma_y ** 2)
    elif kind == "logit-linear":
        return _logit_linear(T, gamma_T, gamma_1)
    elif kind != "log-linear":
        raise ScheduleError(f"unknown schedule family {kind!r}")
    if gamma_T is None:
        raise ScheduleError(f"{kind} schedule requires gamma_T")
    if not 0.0 < gamma_T < 1.0:
        raise ScheduleError(f"gamma_T must lie in (0, 1) for a strictly decreasing ladder, got {gamma_T!r}")
    t = np.arange(T + 1)
    gammas = np.power(gamma_T, t / T)
    gammas[0] = 1.0
    gammas[-1] = gamma_T
    return NoiseSchedule(gammas, kind=kind)


def _logit_linear(T, gamma_T, gamma_1):
    if gamma_T is None or gamma_1 is None:
        raise ScheduleError("logit-linear needs gamma_T and gamma_1")
    if not 0.0 < gamma_T < 1.0 or not 0.0 < gamma_1 < 1.0:
        raise ScheduleError("gamma_T and gamma_1 must lie in (0, 1)")
    if T == 1:
        if gamma_1 != gamma_T:
            raise ScheduleError("with T = 1, gamma_1 and gamma_T are the same point")
        return NoiseSchedule(np.array([1.0, gamma_T]), kind="logit-linear")
    if not gamma_1 > gamma_T:
        raise ScheduleError("gamma_1 must exceed gamma_T for a strictly decreasing ladder")
    hi, lo = logit(gamma_1), logit(gamma_T)
    lam = hi - (hi - lo) * (np.arange(T + 1) - 1) / (T - 1)
    gammas = expit(lam)
    gammas[0] = 1.0
    gammas[1] = gamma_1
    gammas[-1] = gamma_T
    return NoiseSchedule(gammas, kind="logit-linear")


@dataclass(frozen=True)
class LevelGrid:
    """Geometric hierarchy of step counts ``T0 * M**l`` for ``l = 0..L``.

    Level ``l`` takes ``T0 * M**l`` reverse steps, each skipping
    ``M**(L - l)`` indices of the finest grid. Reverse chains run from index
    ``T + 1`` down to index ``1``; the final move to ``t = 0`` is left to the
    truncation rule, so the schedule must have ``T + 1`` steps
    (see :attr:`schedule_steps`).
    """

    T0: int
    M: int
    L: int

    def __post_init__(self):
        if self.T0 < 1:
            raise ValueError("T0 must be a positive integer")
        if self.M < 2:
            raise ValueError("M must be at least 2")
        if self.L < 0:
            raise ValueError("L must be nonnegative")

    @property
    def T(self) -> int:
        return self.T0 * self.M ** self.L

    @property
    def schedule_steps(self) -> int:
        return self.T + 1

    @property
    def t_start(self) -> int:
        return self.T + 1

    def steps(self, level: int) -> int:
        self._check(level)
        return self.T0 * self.M ** level

    def skip(self, level: int) -> int:
        self._check(level)
        return self.M ** (self.L - level)

    def times(self, level: int) -> np.ndarray:
        """Grid indices visited by level ``level``, from start down to 1."""
        return np.arange(self.t_start, 0, -self.skip(level))

    def _check(self, level):
        if not 0 <= level <= self.L:
            raise IndexError(f"level {level} outside 0..{self.L}")


def _check_skip(s: NoiseSchedule, t: int, delta: int):
    if t == 0:
        raise ValueError("t = 0 has Gamma_0 = 0 and admits no reverse step")
    if delta < 1:
        raise IndexError(f"skip size must be >= 1, got {delta}")
    if t - delta < 0 or t > s.T:
        raise IndexError(f"step {t} -> {t - delta} outside schedule 0..{s.T}")


def kernel_coefficients(gamma_t: float, gamma_s: float) -> tuple[float, float, float]:
    """Reverse-step coefficients ``(a, b, var)`` from ``gamma_t`` to an earlier ``gamma_s``.

    Works on raw values so degenerate zero-width steps (``gamma_s == gamma_t``)
    can be evaluated; they give the identity update ``(1, 0, 0)``.
    """
    G_t, G_s = 1.0 - gamma_t, 1.0 - gamma_s
    a = math.sqrt(gamma_s / gamma_t)
    b = math.sqrt(gamma_t / gamma_s) * (G_s - gamma_s / gamma_t * G_t)
    var = G_s / G_t * (1.0 - gamma_t / gamma_s)
    return a, b, var


def skip_variance(s: NoiseSchedule, t: int, delta: int) -> float:
    """Variance of the reverse kernel from ``t`` to ``t - delta`` given ``x_0``."""
    _check_skip(s, t, delta)
    g_t, g_s = s.gammas[t], s.gammas[t - delta]
    return float(s.Gammas[t - delta] / s.Gammas[t] * (1.0 - g_t / g_s))


def step_coefficients(s: NoiseSchedule, t: int, delta: int) -> tuple[float, float, float]:
    """Coefficients ``(a, b, c)`` of ``x_{t-delta} = a x_t - b score + c xi``."""
    _check_skip(s, t, delta)
    a, b, _ = kernel_coefficients(float(s.gammas[t]), float(s.gammas[t - delta]))
    return a, b, math.sqrt(skip_variance(s, t, delta))


def reweight_factor(s: NoiseSchedule, t: int, delta: int) -> float:
    """Scaling applied to accumulated coarse noise after a fine step from ``t``."""
    _check_skip(s, t, delta)
    g_t, g_s = s.gammas[t], s.gammas[t - delta]
    return float(math.sqrt(g_t / g_s) * s.Gammas[t - delta] / s.Gammas[t])
