"""Service-time distributions and a grid check of the NBU inequality."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .core import ConfigError

NBU_KINDS = ("exponential", "shifted_exponential", "constant", "erlang")
# non-NBU kinds, only constructible with unchecked=True
UNCHECKED_KINDS = ("hyperexponential",)

NBU_TOL = 1e-12


@dataclass(frozen=True)
class ServiceDistribution:
    """i.i.d. service time X.

    Parameters by kind:
      * exponential: ``rate``
      * shifted_exponential: ``shift``, ``rate`` (X = shift + Exp(rate))
      * constant: ``value``
      * erlang: ``k`` (int), ``rate``
      * hyperexponential: ``p``, ``rate``, ``rate2`` (mixture; decreasing failure rate, not NBU)
    """

    kind: str
    rate: float = 1.0
    shift: float = 0.0
    value: float = 1.0
    k: int = 1
    p: float = 0.5
    rate2: float = 1.0
    unchecked: bool = False

    def __post_init__(self):
        if self.kind not in NBU_KINDS + UNCHECKED_KINDS:
            raise ConfigError(f"unknown service distribution {self.kind!r}")
        if self.kind in UNCHECKED_KINDS and not self.unchecked:
            raise ConfigError(f"{self.kind} is not NBU; construct with unchecked=True to use it")
        bad = []
        if self.kind in ("exponential", "shifted_exponential", "erlang", "hyperexponential") and not self.rate > 0:
            bad.append("rate")
        if self.kind == "shifted_exponential" and not self.shift > 0:
            bad.append("shift")
        if self.kind == "constant" and not self.value > 0:
            bad.append("value")
        if self.kind == "erlang" and (int(self.k) != self.k or self.k < 1):
            bad.append("k")
        if self.kind == "hyperexponential" and not (0 < self.p < 1 and self.rate2 > 0):
            bad.append("p/rate2")
        if bad:
            raise ConfigError(f"{self.kind}: parameters must be strictly positive: {bad}")

    # constructors matching the usual parameterizations
    @classmethod
    def exponential(cls, rate: float = 1.0) -> "ServiceDistribution":
        return cls("exponential", rate=rate)

    @classmethod
    def shifted_exponential(cls, shift: float, rate: float) -> "ServiceDistribution":
        return cls("shifted_exponential", shift=shift, rate=rate)

    @classmethod
    def constant(cls, value: float) -> "ServiceDistribution":
        return cls("constant", value=value)

    @classmethod
    def erlang(cls, k: int, rate: float) -> "ServiceDistribution":
        return cls("erlang", k=int(k), rate=rate)

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceDistribution":
        d = dict(d)
        kind = d.pop("kind", None)
        if kind is None:
            raise ConfigError("service distribution needs a 'kind'")
        known = {"rate", "shift", "value", "k", "p", "rate2", "unchecked"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown service parameters: {sorted(extra)}")
        return cls(kind, **d)

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        out.update({
            "exponential": {"rate": self.rate},
            "shifted_exponential": {"shift": self.shift, "rate": self.rate},
            "constant": {"value": self.value},
            "erlang": {"k": self.k, "rate": self.rate},
            "hyperexponential": {"p": self.p, "rate": self.rate, "rate2": self.rate2, "unchecked": True},
        }[self.kind])
        return out

    @property
    def mean(self) -> float:
        return mean(self)

    def ccdf(self, x):
        return ccdf(self, x)

    @property
    def is_exponential(self) -> bool:
        return self.kind == "exponential"

    def sample_n(self, rng: np.random.Generator, n: int) -> np.ndarray:
        kind = self.kind
        if kind == "exponential":
            return rng.exponential(1.0 / self.rate, n)
        if kind == "shifted_exponential":
            return self.shift + rng.exponential(1.0 / self.rate, n)
        if kind == "constant":
            return np.full(n, float(self.value))
        if kind == "erlang":
            return rng.gamma(self.k, 1.0 / self.rate, n)
        pick = rng.random(n) < self.p
        return np.where(pick, rng.exponential(1.0 / self.rate, n), rng.exponential(1.0 / self.rate2, n))

    def isf(self, q):
        """Inverse survival function: smallest x with ccdf(x) <= q."""
        q = np.asarray(q, dtype=float)
        kind = self.kind
        if kind == "exponential":
            return -np.log(q) / self.rate
        if kind == "shifted_exponential":
            return self.shift - np.log(np.minimum(q, 1.0)) / self.rate
        if kind == "constant":
            return np.full(q.shape, float(self.value))[()] if q.shape else float(self.value)
        if kind == "erlang":
            return stats.gamma.isf(q, self.k, scale=1.0 / self.rate)
        # mixture: numerical inversion
        from scipy.optimize import brentq

        def inv(qq):
            if qq >= 1.0:
                return 0.0
            hi = 1.0
            while self.ccdf(hi) > qq:
                hi *= 2
            return brentq(lambda x: self.ccdf(x) - qq, 0.0, hi, xtol=1e-14)

        return np.vectorize(inv)(q)[()]


def sample(dist: ServiceDistribution, rng: np.random.Generator) -> float:
    return float(dist.sample_n(rng, 1)[0])


def mean(dist: ServiceDistribution) -> float:
    kind = dist.kind
    if kind == "exponential":
        return 1.0 / dist.rate
    if kind == "shifted_exponential":
        return dist.shift + 1.0 / dist.rate
    if kind == "constant":
        return float(dist.value)
    if kind == "erlang":
        return dist.k / dist.rate
    return dist.p / dist.rate + (1 - dist.p) / dist.rate2


def ccdf(dist: ServiceDistribution, x):
    """Pr[X > x]. Negative x is clamped to 0, where the CCDF is 1."""
    x = np.maximum(np.asarray(x, dtype=float), 0.0)
    kind = dist.kind
    if kind == "exponential":
        out = np.exp(-dist.rate * x)
    elif kind == "shifted_exponential":
        out = np.where(x < dist.shift, 1.0, np.exp(-dist.rate * (x - dist.shift)))
    elif kind == "constant":
        out = np.where(x < dist.value, 1.0, 0.0)
    elif kind == "erlang":
        rx = dist.rate * x
        term = np.exp(-rx)
        out = term.copy()
        for j in range(1, dist.k):
            term = term * rx / j
            out = out + term
        out = np.minimum(out, 1.0)
    else:
        out = dist.p * np.exp(-dist.rate * x) + (1 - dist.p) * np.exp(-dist.rate2 * x)
    return out[()] if out.shape == () else out


@dataclass(frozen=True)
class NBUReport:
    max_violation: float
    max_abs_deviation: float
    ok: bool
    worst_point: Optional[tuple[float, float]] = None


def verify_nbu(dist: ServiceDistribution, grid_step: float, grid_max: float, tol: float = NBU_TOL) -> NBUReport:
    """Evaluate ccdf(tau + t) - ccdf(tau) * ccdf(t) on the square grid [0, grid_max]^2."""
    if not (grid_step > 0 and grid_max > 0):
        raise ConfigError("grid_step and grid_max must be positive")
    n = int(math.floor(grid_max / grid_step + 1e-9)) + 1
    g = np.arange(n) * grid_step
    f = ccdf(dist, g)
    # tau + t on a uniform grid is again a grid point; evaluate directly for accuracy
    lhs = ccdf(dist, g[:, None] + g[None, :])
    diff = lhs - f[:, None] * f[None, :]
    i, j = np.unravel_index(int(np.argmax(diff)), diff.shape)
    worst = float(diff[i, j])
    return NBUReport(
        max_violation=worst,
        max_abs_deviation=float(np.abs(diff).max()),
        ok=bool(worst <= tol),
        worst_point=(float(g[i]), float(g[j])),
    )
