"""Per-stratum sampling-probability distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


class XiDistribution:
    """Base class: a distribution for one stratum's sampling probability."""

    fixed = False

    def sample(self, rng, size=None):
        raise NotImplementedError

    def point(self):
        raise NotImplementedError

    def can_be_zero(self):
        """True if the distribution can produce exactly 0."""
        raise NotImplementedError


@dataclass(frozen=True)
class FixedXi(XiDistribution):
    value: float
    fixed = True

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"sampling probability {self.value} outside [0, 1]")

    def sample(self, rng, size=None):
        if size is None:
            return float(self.value)
        return np.full(size, float(self.value))

    def point(self):
        return float(self.value)

    def can_be_zero(self):
        return self.value == 0.0


@dataclass(frozen=True)
class BetaXi(XiDistribution):
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Beta parameters must be positive")

    def sample(self, rng, size=None):
        return rng.beta(self.a, self.b, size=size)

    def point(self):
        return self.a / (self.a + self.b)

    def can_be_zero(self):
        return False

    def logpdf(self, x):
        return stats.beta.logpdf(x, self.a, self.b)


class EmpiricalXi(XiDistribution):
    """Uniform resampling from a set of Monte Carlo draws (e.g. a cascade)."""

    def __init__(self, draws):
        d = np.asarray(draws, dtype=float).ravel()
        if d.size == 0:
            raise ValueError("empirical distribution needs at least one draw")
        if np.any(d < 0) or np.any(d > 1):
            raise ValueError("empirical draws must lie in [0, 1]")
        d.setflags(write=False)
        self.draws = d

    @property
    def fixed(self):
        return bool(np.all(self.draws == self.draws[0]))

    def sample(self, rng, size=None):
        idx = rng.integers(self.draws.size, size=size)
        return self.draws[idx] if size is not None else float(self.draws[idx])

    def point(self):
        return float(self.draws.mean())

    def can_be_zero(self):
        return bool(np.any(self.draws == 0.0))

    def __repr__(self):
        return f"EmpiricalXi(n={self.draws.size}, mean={self.point():.4g})"


def as_xi_distribution(x):
    if isinstance(x, XiDistribution):
        return x
    if np.isscalar(x):
        return FixedXi(float(x))
    return EmpiricalXi(x)


class SamplingSpec:
    """Source and recipient sampling-probability distributions per stratum.

    If ``recipient`` is None the same random variable serves both roles, so a
    stratum's source and recipient probabilities are always equal.
    """

    def __init__(self, space, source, recipient=None):
        self.space = space
        self.source = self._coerce(source, "source")
        self.recipient = None if recipient is None else self._coerce(recipient, "recipient")

    def _coerce(self, d, role):
        if not isinstance(d, dict):
            if isinstance(d, (list, tuple)) and len(d) == self.space.A:
                d = dict(zip(self.space.ids, d))
            else:
                d = {sid: d for sid in self.space.ids}
        missing = [s for s in self.space.ids if s not in d]
        if missing:
            raise ValueError(f"{role} sampling distribution missing for strata {missing}")
        return tuple(as_xi_distribution(d[s]) for s in self.space.ids)

    @property
    def shared(self):
        return self.recipient is None

    @property
    def is_fixed(self):
        dists = self.source + (self.recipient or ())
        return all(d.fixed for d in dists)

    def point(self):
        xs = np.array([d.point() for d in self.source])
        xr = xs if self.shared else np.array([d.point() for d in self.recipient])
        return xs, xr

    def draw(self, rng):
        """One joint draw ``(xi_S, xi_R)`` as length-A arrays."""
        xs = np.array([d.sample(rng) for d in self.source])
        xr = xs if self.shared else np.array([d.sample(rng) for d in self.recipient])
        return xs, xr
