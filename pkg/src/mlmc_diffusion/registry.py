"""Benchmark registry: named problems, sampler defaults and stored truth values.

The registry is an INI file (one section per benchmark). Vectors are
comma-separated; matrix rows are separated by ``;``. See ``docs/config.md``.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .problems import GaussianPrior, InverseProblem, MixturePrior

# The sampler stack is imported lazily so that truth lookups stay
# independent of it.


def parse_vector(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.replace("\n", " ").split(",") if v.strip()])


def parse_matrix(text: str) -> np.ndarray:
    return np.array([parse_vector(row) for row in text.split(";") if row.strip()])


def format_vector(v) -> str:
    return ", ".join(repr(float(x)) for x in np.ravel(v))


@dataclass(frozen=True)
class Benchmark:
    name: str
    problem: InverseProblem
    qoi_kind: str
    terminal_law: str
    target: str
    schedule_kind: str
    gamma_T: float | None
    gamma_1: float | None
    truth: np.ndarray | None
    provenance: str = ""

    @property
    def unobserved(self) -> np.ndarray | None:
        """Boolean mask of unobserved coordinates (mask problems only)."""
        if self.problem.mask is None:
            return None
        return ~self.problem.mask

    def qoi(self):
        from .mlmc import QoI
        if self.qoi_kind == "masked-second-moment":
            return QoI("masked-second-moment", mask=self.problem.mask)
        return QoI(self.qoi_kind)

    def default_T0(self) -> int:
        return 32 if self.terminal_law == "standard-gaussian" else 8

    def schedule(self, T: int):
        from .schedules import build_schedule
        if self.schedule_kind == "terminal-pinned" and self.gamma_T is None:
            return build_schedule("terminal-pinned", T, sigma_y=self.problem.sigma)
        return build_schedule(self.schedule_kind, T, gamma_T=self.gamma_T, gamma_1=self.gamma_1)

    def terminal(self, gamma_T: float):
        from .sampler import TerminalLaw
        p = self.problem
        if self.terminal_law == "standard-gaussian":
            return TerminalLaw()
        if self.terminal_law == "masked":
            return TerminalLaw("masked", y=p.embedded_observation(), mask=(~p.mask).astype(float))
        if self.terminal_law == "pinned-observation":
            if p.A is None or p.A.shape[0] != p.dim:
                raise ValueError("pinned terminal law needs a square observation operator")
            return TerminalLaw.pinned(p.y, gamma_T)
        raise ValueError(f"unknown terminal law {self.terminal_law!r}")

    def sampler(self, T0: int | None = None, M: int = 2, L: int = 12, *, method: str = "discrete",
                deterministic: bool = False, truncation=None, score=None):
        """Sampler whose finest level ``L`` fixes the shared schedule."""
        from .sampler import DiffusionSampler, TruncationRule
        from .schedules import LevelGrid
        from .scores import analytic_score, prior_target
        truncation = TruncationRule() if truncation is None else truncation
        grid = LevelGrid(self.default_T0() if T0 is None else T0, M, L)
        sched = self.schedule(grid.schedule_steps)
        if score is None:
            target = self.problem if self.target == "posterior" else prior_target(self.problem.prior)
            score = analytic_score(target, sched)
        return DiffusionSampler(sched, grid, score, self.terminal(float(sched.gammas[-1])), truncation,
                                y=self.problem.y, method=method, deterministic=deterministic,
                                dim=self.problem.dim)


def _prior(sec) -> GaussianPrior | MixturePrior:
    kind = sec.get("prior", "gaussian")
    if kind == "gaussian":
        return GaussianPrior(parse_vector(sec["prior_mean"]), parse_vector(sec["prior_var"]))
    if kind == "mixture":
        w = parse_vector(sec["weights"])
        comps = [GaussianPrior(parse_vector(sec[f"c{k}_mean"]), parse_vector(sec[f"c{k}_var"]))
                 for k in range(w.size)]
        return MixturePrior(w, tuple(comps))
    raise ValueError(f"unknown prior kind {kind!r}")


def problem_from_section(sec, name: str = "") -> InverseProblem:
    prior = _prior(sec)
    sigma = float(sec.get("sigma", "0"))
    y = parse_vector(sec["y"])
    if "mask" in sec:
        mask = parse_vector(sec["mask"]).astype(bool)
        return InverseProblem(prior, y, sigma, mask=mask, name=name)
    return InverseProblem(prior, y, sigma, A=parse_matrix(sec["A"]), name=name)


def benchmark_from_section(name: str, sec) -> Benchmark:
    truth = parse_vector(sec["truth"]) if "truth" in sec else None
    return Benchmark(
        name=name,
        problem=problem_from_section(sec, name),
        qoi_kind=sec.get("qoi", "second-moment"),
        terminal_law=sec.get("terminal_law", "standard-gaussian"),
        target=sec.get("target", "posterior"),
        schedule_kind=sec.get("schedule", "log-linear"),
        gamma_T=float(sec["gamma_T"]) if "gamma_T" in sec else None,
        gamma_1=float(sec["gamma_1"]) if "gamma_1" in sec else None,
        truth=truth,
        provenance=sec.get("provenance", ""),
    )


def default_registry_path():
    return resources.files("mlmc_diffusion") / "benchmarks.ini"


def load_registry(path=None) -> dict[str, Benchmark]:
    cp = configparser.ConfigParser(interpolation=None)
    if path is None:
        cp.read_string(default_registry_path().read_text())
    else:
        cp.read(Path(path))
    return {name: benchmark_from_section(name, cp[name]) for name in cp.sections()}


def get_benchmark(name: str, path=None) -> Benchmark:
    reg = load_registry(path)
    if name not in reg:
        raise KeyError(f"unknown benchmark {name!r}; known: {sorted(reg)}")
    return reg[name]
