"""Multilevel Monte Carlo for diffusion-model posterior sampling.

Submodules are loaded on first attribute access, so importing the package
(or only its oracle) does not pull in the sampler stack.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    "NoiseSchedule": "schedules", "LevelGrid": "schedules", "build_schedule": "schedules",
    "GaussianPrior": "problems", "MixturePrior": "problems", "InverseProblem": "problems",
    "ScoreModel": "scores", "AnalyticScore": "scores", "analytic_score": "scores",
    "posterior_params": "scores",
    "ExternalScore": "external",
    "PathNoise": "rng",
    "DiffusionSampler": "sampler", "TerminalLaw": "sampler", "TruncationRule": "sampler",
    "QoI": "mlmc", "LevelStats": "mlmc", "MlmcResult": "mlmc", "adaptive_mlmc": "mlmc",
    "mc_estimate": "mlmc",
    "get_benchmark": "registry", "load_registry": "registry",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + __all__)
