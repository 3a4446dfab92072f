"""Linear-Gaussian inverse problems and their priors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIMPLEX_TOL = 1e-12


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian with diagonal covariance ``diag(var)``."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        var = np.atleast_1d(np.asarray(self.var, dtype=float))
        if mu.shape != var.shape or mu.ndim != 1:
            raise ValueError(f"prior mean {mu.shape} and variance {var.shape} disagree")
        if np.any(~(var > 0)):
            raise ValueError("prior variances must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class MixturePrior:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        comps = tuple(self.components)
        if w.ndim != 1 or w.size != len(comps) or w.size == 0:
            raise ValueError("need one weight per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"mixture weights must lie on the simplex, sum={w.sum()!r}")
        if len({c.dim for c in comps}) != 1:
            raise ValueError("mixture components have different dimensions")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return self.components[0].dim


@dataclass(frozen=True)
class InverseProblem:
    """Observation ``y = A x + sigma * noise`` with a Gaussian or mixture prior.

    ``A`` is either a dense ``(m, n)`` matrix or, when ``mask`` is given, the
    coordinate selector of the observed entries (``mask[i]`` true means
    coordinate ``i`` is observed and ``y`` lists observed values in order).
    ``sigma = inf`` switches the likelihood off; ``sigma = 0`` is only
    allowed with a mask and pins observed coordinates.
    """

    prior: GaussianPrior | MixturePrior
    y: np.ndarray
    sigma: float
    A: np.ndarray | None = None
    mask: np.ndarray | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        object.__setattr__(self, "y", y)
        n = self.prior.dim
        if (self.A is None) == (self.mask is None):
            raise ValueError("give exactly one of a dense operator A or an observation mask")
        if self.sigma < 0 or np.isnan(self.sigma):
            raise ValueError("sigma must be nonnegative")
        if self.A is not None:
            A = np.atleast_2d(np.asarray(self.A, dtype=float))
            if A.shape != (y.size, n):
                raise ValueError(f"operator shape {A.shape} does not match y ({y.size}) and prior ({n})")
            if self.sigma == 0:
                raise ValueError("sigma = 0 is only supported for mask observations")
            object.__setattr__(self, "A", A)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != (n,) or int(mask.sum()) != y.size:
                raise ValueError("mask must have one entry per coordinate and one observation per true entry")
            object.__setattr__(self, "mask", mask)

    @property
    def dim(self) -> int:
        return self.prior.dim

    def operator(self) -> np.ndarray:
        """Dense form of the observation operator."""
        if self.A is not None:
            return self.A
        return np.eye(self.dim)[self.mask]

    def embedded_observation(self) -> np.ndarray:
        """Length-``n`` vector with observed values in place and zeros elsewhere."""
        if self.mask is None:
            raise ValueError("embedding only defined for mask observations")
        out = np.zeros(self.dim)
        out[self.mask] = self.y
        return out
