"""Arrival schedules: Poisson generations with optional arrival delays, CSV I/O."""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import ArrivalSchedule, ConfigError
from .rng import stream

DELAY_MODELS = ("zero", "bernoulli_half", "fixed", "custom")


@dataclass(frozen=True)
class TrafficConfig:
    """Poisson generation process of rate ``rate`` over ``[0, horizon]``.

    delay_model:
      * ``zero``: A_i = S_i
      * ``bernoulli_half``: A_i - S_i is 0 or 4/rate with probability 1/2 each
      * ``fixed``: A_i - S_i = ``delay``
      * ``custom``: A_i - S_i = ``delays[i-1]`` (cycled if shorter than the schedule)
    """

    rate: float
    horizon: float
    delay_model: str = "zero"
    seed: int = 0
    delay: float = 0.0
    delays: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if not (self.rate > 0 and np.isfinite(self.rate)):
            raise ConfigError(f"rate must be positive, got {self.rate}")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ConfigError(f"horizon must be positive, got {self.horizon}")
        if self.delay_model not in DELAY_MODELS:
            raise ConfigError(f"unknown delay_model {self.delay_model!r}; expected one of {DELAY_MODELS}")
        if self.delay_model == "fixed" and not self.delay >= 0:
            raise ConfigError("fixed delay must be >= 0")
        if self.delay_model == "custom":
            if not self.delays:
                raise ConfigError("custom delay model needs a non-empty delays list")
            if min(self.delays) < 0:
                raise ConfigError("custom delays must be >= 0")


def generate_poisson_schedule(cfg: TrafficConfig) -> ArrivalSchedule:
    """Draw generation times from a Poisson process and apply the delay model.

    Generation gaps and delay coin-flips use separate RNG streams, so switching
    the delay model leaves the generation times untouched.
    """
    gap_rng = stream(cfg.seed, "traffic.gaps")
    gens: list[np.ndarray] = []
    t = 0.0
    # draw gaps in blocks until the horizon is crossed
    block = max(16, int(cfg.rate * cfg.horizon * 1.1) + 16)
    while True:
        gaps = gap_rng.exponential(1.0 / cfg.rate, size=block)
        times = t + np.cumsum(gaps)
        gens.append(times)
        t = float(times[-1])
        if t > cfg.horizon:
            break
    s = np.concatenate(gens)
    s = s[s <= cfg.horizon]
    n = len(s)

    if cfg.delay_model == "zero":
        d = np.zeros(n)
    elif cfg.delay_model == "bernoulli_half":
        coin = stream(cfg.seed, "traffic.delay").random(n) < 0.5
        d = np.where(coin, 4.0 / cfg.rate, 0.0)
    elif cfg.delay_model == "fixed":
        d = np.full(n, float(cfg.delay))
    else:
        d = np.resize(np.asarray(cfg.delays, dtype=float), n)
    return ArrivalSchedule(tuple(s.tolist()), tuple((s + d).tolist()))


def traffic_intensity(rate: float, num_flows: int, num_servers: int, service_rate: float = 1.0) -> float:
    """Offered load rate*N / (M*mu)."""
    for name, v in (("rate", rate), ("num_flows", num_flows), ("num_servers", num_servers), ("service_rate", service_rate)):
        if not v > 0:
            raise ConfigError(f"{name} must be positive, got {v}")
    return rate * num_flows / (num_servers * service_rate)


def rate_for_intensity(rho: float, num_flows: int, num_servers: int, service_rate: float = 1.0) -> float:
    """Inverse of :func:`traffic_intensity`."""
    if not rho > 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    return rho * num_servers * service_rate / num_flows


def newest_arrived_by(sched: ArrivalSchedule, t: float) -> Optional[float]:
    """max{S_i : A_i <= t}, or None before the first arrival."""
    best = None
    for s, a in zip(sched.gen_times, sched.arrival_times):
        if a <= t and (best is None or s > best):
            best = s
    return best


class ArrivalIndex:
    """Fast repeated evaluation of :func:`newest_arrived_by`."""

    def __init__(self, sched: ArrivalSchedule):
        order = np.argsort(np.asarray(sched.arrival_times), kind="stable")
        self.arrivals = np.asarray(sched.arrival_times)[order]
        self.freshest = np.maximum.accumulate(np.asarray(sched.gen_times)[order]) if len(order) else np.array([])

    def __call__(self, t: float) -> Optional[float]:
        k = bisect.bisect_right(self.arrivals, t) - 1
        return None if k < 0 else float(self.freshest[k])

    def many(self, ts: np.ndarray) -> np.ndarray:
        """Vector version; NaN where nothing has arrived."""
        k = np.searchsorted(self.arrivals, ts, side="right") - 1
        out = np.full(np.shape(ts), np.nan)
        ok = k >= 0
        out[ok] = self.freshest[k[ok]]
        return out


def write_schedule_csv(sched: ArrivalSchedule, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seq", "gen_time", "arrival_time"])
        for i, (s, a) in enumerate(zip(sched.gen_times, sched.arrival_times), start=1):
            w.writerow([i, repr(float(s)), repr(float(a))])


def read_schedule_csv(path: Union[str, Path]) -> ArrivalSchedule:
    """Load and strictly validate a (seq, gen_time, arrival_time) CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or [])
        missing = {"seq", "gen_time", "arrival_time"} - cols
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["seq"]), float(row["gen_time"]), float(row["arrival_time"])))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from None
    for expected, (seq, _, _) in enumerate(rows, start=1):
        if seq != expected:
            raise ConfigError(f"{path}: seq must run 1..n in order; found {seq} at position {expected}")
    return ArrivalSchedule(tuple(r[1] for r in rows), tuple(r[2] for r in rows))


def schedule_from_pairs(pairs: Sequence[tuple[float, float]]) -> ArrivalSchedule:
    return ArrivalSchedule.from_pairs(pairs)
