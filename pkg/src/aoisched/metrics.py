"""Age penalty functions, their time averages over traces, sorted-vector
dominance and an empirical test of the usual stochastic order."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.integrate import quad_vec

from .core import ConfigError, SawtoothProcess

KINDS = ("avg", "max", "mean_square", "l_norm", "sum_penalty")
G_KINDS = ("stair", "exp", "table")

QUAD_RTOL = 1e-10


@dataclass(frozen=True)
class Penalty:
    """A symmetric, non-decreasing map from the age vector to a scalar.

    ``sum_penalty`` applies ``g`` to each age and sums: ``stair`` is
    floor(a*x), ``exp`` is exp(a*x) and ``table`` linearly interpolates the
    non-decreasing knots in ``table`` (constant outside the knot range).
    """

    kind: str
    l: float = 2.0
    g: Optional[str] = None
    a: float = 1.0
    table: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown penalty kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "l_norm" and not self.l >= 1:
            raise ConfigError(f"l_norm needs l >= 1, got {self.l}")
        if self.kind == "sum_penalty":
            if self.g not in G_KINDS:
                raise ConfigError(f"sum_penalty needs g in {G_KINDS}, got {self.g!r}")
            if self.g in ("stair", "exp") and not self.a >= 0:
                raise ConfigError(f"g={self.g} is non-decreasing only for a >= 0, got {self.a}")
            if self.g == "table":
                if len(self.table) < 2:
                    raise ConfigError("table g needs at least two knots")
                xs = np.array([k[0] for k in self.table], dtype=float)
                ys = np.array([k[1] for k in self.table], dtype=float)
                if np.any(np.diff(xs) <= 0):
                    raise ConfigError("table knots must have strictly increasing x")
                if np.any(np.diff(ys) < 0):
                    raise ConfigError("table g must be non-decreasing")

    @classmethod
    def from_dict(cls, d: dict) -> "Penalty":
        d = dict(d)
        if "table" in d:
            d["table"] = tuple(tuple(map(float, k)) for k in d["table"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad penalty config {d}: {exc}") from None

    @property
    def label(self) -> str:
        if self.kind == "l_norm":
            return f"l_norm(l={self.l:g})"
        if self.kind == "sum_penalty":
            return f"sum_{self.g}" + ("" if self.g == "table" else f"(a={self.a:g})")
        return self.kind

    def g_values(self, x: np.ndarray) -> np.ndarray:
        if self.g == "stair":
            return np.floor(self.a * x)
        if self.g == "exp":
            return np.exp(self.a * x)
        xs, ys = zip(*self.table)
        return np.interp(x, xs, ys)

    def g_antiderivative(self, x: np.ndarray) -> np.ndarray:
        """Some antiderivative of g, evaluated elementwise."""
        a = self.a
        if self.g == "stair":
            if a == 0:
                return np.zeros_like(x)
            z = a * x
            k = np.floor(z)
            return (0.5 * k * (k - 1) + k * (z - k)) / a
        if self.g == "exp":
            return x if a == 0 else np.expm1(a * x) / a
        xs = np.array([k[0] for k in self.table])
        ys = np.array([k[1] for k in self.table])
        cum = np.concatenate(([0.0], np.cumsum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs))))
        slopes = np.diff(ys) / np.diff(xs)
        j = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
        dx = np.clip(x, xs[0], xs[-1]) - xs[j]
        inner = cum[j] + ys[j] * dx + 0.5 * slopes[j] * dx * dx
        # constant extension outside the knots
        return inner + ys[0] * np.minimum(x - xs[0], 0.0) + ys[-1] * np.maximum(x - xs[-1], 0.0)


@dataclass(frozen=True)
class PenaltySchedule:
    """Time-dependent penalty: ``pieces[k] = (start_time, Penalty)``, first start at 0."""

    pieces: tuple[tuple[float, Penalty], ...]

    def __post_init__(self):
        if not self.pieces or self.pieces[0][0] != 0:
            raise ConfigError("penalty schedule must start at t=0")
        starts = [s for s, _ in self.pieces]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ConfigError("penalty schedule start times must increase")

    def active(self, t: float) -> Penalty:
        cur = self.pieces[0][1]
        for s, p in self.pieces:
            if s <= t:
                cur = p
        return cur

    @property
    def label(self) -> str:
        return "schedule[" + ",".join(f"{s:g}:{p.label}" for s, p in self.pieces) + "]"


PenaltyLike = Union[Penalty, PenaltySchedule]


def _pieces(p: PenaltyLike, t0: float, t1: float) -> list[tuple[float, float, Penalty]]:
    if isinstance(p, Penalty):
        return [(t0, t1, p)]
    out = []
    bounds = [s for s, _ in p.pieces] + [np.inf]
    for (s, pen), e in zip(p.pieces, bounds[1:]):
        lo, hi = max(s, t0), min(e, t1)
        if hi > lo:
            out.append((lo, hi, pen))
    return out


def _evaluate(p: Penalty, ages: np.ndarray) -> np.ndarray:
    """Penalty along the last axis."""
    k = p.kind
    if k == "avg":
        return ages.mean(axis=-1)
    if k == "max":
        return ages.max(axis=-1)
    if k == "mean_square":
        return (ages * ages).mean(axis=-1)
    if k == "l_norm":
        return (ages ** p.l).sum(axis=-1) ** (1.0 / p.l)
    return p.g_values(ages).sum(axis=-1)


def evaluate(p: PenaltyLike, ages: Sequence[float], t: float = 0.0) -> float:
    """Penalty of one age vector at time ``t``."""
    a = np.asarray(ages, dtype=float)
    if a.ndim != 1 or a.size == 0:
        raise ValueError("ages must be a non-empty vector")
    if np.any(a < 0):
        raise ValueError("ages must be non-negative")
    pen = p.active(t) if isinstance(p, PenaltySchedule) else p
    # evaluate on the sorted vector: symmetric by construction, and float
    # summation of elementwise-ordered terms in the same order stays ordered
    return float(_evaluate(pen, np.sort(a)[::-1]))


def _segments(procs: Sequence[SawtoothProcess], t0: float, t1: float):
    """Split [t0, t1] at every breakpoint of every process.

    Returns segment lengths ``L`` (S,) and start values ``C`` (S, N); on
    each segment every process equals ``C[:, n] + s`` for ``s`` in [0, L].
    """
    arrays = [p.arrays() for p in procs]
    for p, (ts, _) in zip(procs, arrays):
        if len(ts) == 0 or ts[0] > t0:
            raise ValueError("interval starts before process origin")
        if p.horizon is not None and t1 > p.horizon:
            raise ValueError(f"interval end {t1} beyond trace horizon {p.horizon}")
    inner = np.unique(np.concatenate([ts[(ts > t0) & (ts < t1)] for ts, _ in arrays]))
    starts = np.concatenate(([t0], inner))
    ends = np.concatenate((inner, [t1]))
    cols = []
    for ts, vs in arrays:
        idx = np.searchsorted(ts, starts, side="right") - 1
        cols.append(vs[idx] + (starts - ts[idx]))
    return ends - starts, np.column_stack(cols)


def _integrate(p: Penalty, L: np.ndarray, C: np.ndarray) -> float:
    """Exact (or adaptive-quadrature) integral of p(C + s) over each segment, summed."""
    k = p.kind
    if k == "avg":
        return float((C.mean(axis=1) * L + 0.5 * L * L).sum())
    if k == "max":
        # all coordinates share slope 1, so the argmax is fixed on a segment
        return float((C.max(axis=1) * L + 0.5 * L * L).sum())
    if k == "mean_square":
        E = C + L[:, None]
        return float(((E ** 3 - C ** 3) / 3.0).mean(axis=1).sum())
    if k == "sum_penalty":
        E = C + L[:, None]
        return float((p.g_antiderivative(E) - p.g_antiderivative(C)).sum())
    # l_norm: no closed form; integrate all segments at once over u in [0, 1]
    lp = p.l

    def f(u):
        return L * ((C + (u * L)[:, None]) ** lp).sum(axis=1) ** (1.0 / lp)

    val, _ = quad_vec(f, 0.0, 1.0, epsrel=QUAD_RTOL, epsabs=0.0, norm="max")
    return float(np.sum(val))


def integrate_penalty(procs: Sequence[SawtoothProcess], p: PenaltyLike, t0: float, t1: float) -> float:
    """Integral of p(ages(t)) dt over [t0, t1]."""
    if not t1 > t0:
        raise ValueError(f"empty interval [{t0}, {t1}]")
    total = 0.0
    for lo, hi, pen in _pieces(p, t0, t1):
        L, C = _segments(procs, lo, hi)
        total += _integrate(pen, L, C)
    return total


def time_average_penalty(trace, p: PenaltyLike, t0: float, t1: float, process: str = "delta") -> float:
    """Time average of p over [t0, t1] for the age (``delta``) or served-age (``xi``) vector."""
    if process not in ("delta", "xi"):
        raise ValueError("process must be 'delta' or 'xi'")
    if t0 < 0 or t1 > trace.horizon:
        raise ValueError(f"interval [{t0}, {t1}] outside trace [0, {trace.horizon}]")
    procs = trace.delta if process == "delta" else trace.xi
    return integrate_penalty(procs, p, t0, t1) / (t1 - t0)


def sorted_dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """True iff the i-th largest entry of ``a`` is <= the i-th largest of ``b`` for all i."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(np.sort(a) <= np.sort(b)))


def sorted_dominates_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise :func:`sorted_dominates` for (K, N) arrays."""
    return np.all(np.sort(a, axis=-1) <= np.sort(b, axis=-1), axis=-1)


@dataclass(frozen=True)
class StOrderReport:
    max_ccdf_violation: float
    epsilon: float
    ok: bool
    n_x: int
    n_y: int
    grid: tuple[float, ...] = field(repr=False, default=())


def dkw_epsilon(n: int, alpha: float) -> float:
    """Half-width of the Dvoretzky-Kiefer-Wolfowitz band at level 1 - alpha."""
    return math.sqrt(math.log(2.0 / alpha) / (2.0 * n))


def empirical_st_order(samples_x: Sequence[float], samples_y: Sequence[float],
                       grid: Optional[Sequence[float]] = None, confidence: float = 0.99,
                       epsilon: Optional[float] = None) -> StOrderReport:
    """Check X <=_st Y from samples: max_t [P_x(X > t) - P_y(Y > t)] <= epsilon.

    The default tolerance is the sum of the two one-sample DKW bands, each at
    level (1 - confidence)/2, so a true ordering passes with probability at
    least ``confidence``. The default grid is the pooled sample's quantiles at
    levels 0.01, ..., 0.99.
    """
    x = np.asarray(samples_x, dtype=float)
    y = np.asarray(samples_y, dtype=float)
    if x.size == 0 or y.size == 0:
        raise ValueError("empirical_st_order needs non-empty samples")
    if grid is None:
        grid = np.quantile(np.concatenate([x, y]), np.arange(1, 100) / 100.0)
    grid = np.asarray(grid, dtype=float)
    xs, ys = np.sort(x), np.sort(y)
    ccdf_x = 1.0 - np.searchsorted(xs, grid, side="right") / x.size
    ccdf_y = 1.0 - np.searchsorted(ys, grid, side="right") / y.size
    worst = float(np.max(ccdf_x - ccdf_y))
    if epsilon is None:
        alpha = (1.0 - confidence) / 2.0
        epsilon = dkw_epsilon(x.size, alpha) + dkw_epsilon(y.size, alpha)
    return StOrderReport(worst, float(epsilon), worst <= epsilon, int(x.size), int(y.size), tuple(grid.tolist()))


SHIPPED_PENALTIES = (
    Penalty("avg"),
    Penalty("max"),
    Penalty("mean_square"),
    Penalty("l_norm", l=1.0),
    Penalty("l_norm", l=3.0),
    Penalty("sum_penalty", g="stair", a=2.0),
    Penalty("sum_penalty", g="exp", a=0.5),
    Penalty("sum_penalty", g="table", table=((0.0, 0.0), (1.0, 0.5), (3.0, 0.5), (5.0, 4.0))),
)


@dataclass
class PenaltyPropertyReport:
    penalty: str
    trials: int
    symmetry_failures: int = 0
    monotonicity_failures: int = 0
    dominance_failures: int = 0

    @property
    def ok(self) -> bool:
        return self.symmetry_failures == self.monotonicity_failures == self.dominance_failures == 0


def check_penalty_properties(p: Penalty, trials: int, rng: np.random.Generator,
                             max_flows: int = 8, scale: float = 10.0) -> PenaltyPropertyReport:
    """Random (vector, permutation, dominating vector) triples; counts exact property failures."""
    rep = PenaltyPropertyReport(p.label, trials)
    for _ in range(trials):
        n = int(rng.integers(1, max_flows + 1))
        a = rng.random(n) * scale
        if n > 1 and rng.random() < 0.3:
            a[rng.integers(n)] = a[0]  # exercise ties
        perm = a[rng.permutation(n)]
        # elementwise-larger vector (some coordinates unchanged)
        b = a + rng.random(n) * scale * (rng.random(n) < 0.7)
        # sorted-dominating vector in scrambled order
        c = np.sort(a)[::-1] + rng.random(n) * scale * (rng.random(n) < 0.7)
        c = np.sort(c)[::-1][rng.permutation(n)]
        pa = evaluate(p, a)
        if evaluate(p, perm) != pa:
            rep.symmetry_failures += 1
        if not pa <= evaluate(p, b):
            rep.monotonicity_failures += 1
        if sorted_dominates(a, c) and not pa <= evaluate(p, c):
            rep.dominance_failures += 1
    return rep
