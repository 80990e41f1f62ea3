"""Shared domain types: packets, arrival schedules, system configuration and
the sawtooth representation of an age trajectory."""

from __future__ import annotations

import bisect
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np


class ConfigError(ValueError):
    """Invalid user-supplied configuration."""


class InvariantViolation(RuntimeError):
    """Internal simulator state became inconsistent."""


@dataclass(slots=True)
class Packet:
    """One update packet. ``flow_id`` is 1-based, ``seq`` is the generation index (1-based)."""

    flow_id: int
    seq: int
    gen_time: float
    arrival_time: float
    service_start: Optional[float] = None
    delivery_time: Optional[float] = None
    # slot index while in service, None otherwise
    server: Optional[int] = None

    def __post_init__(self):
        if not (0.0 <= self.gen_time <= self.arrival_time):
            raise ConfigError(
                f"packet ({self.flow_id},{self.seq}) violates 0 <= S <= A: "
                f"S={self.gen_time}, A={self.arrival_time}"
            )

    def check(self) -> None:
        if self.service_start is not None and self.service_start < self.arrival_time:
            raise InvariantViolation(f"packet ({self.flow_id},{self.seq}): V < A")
        if self.delivery_time is not None:
            if self.service_start is None or self.delivery_time < self.service_start:
                raise InvariantViolation(f"packet ({self.flow_id},{self.seq}): D set without V <= D")

    def to_dict(self) -> dict:
        return {
            "flow": self.flow_id,
            "seq": self.seq,
            "S": self.gen_time,
            "A": self.arrival_time,
            "V": self.service_start,
            "D": self.delivery_time,
        }


@dataclass(frozen=True)
class ArrivalSchedule:
    """Synchronized generation/arrival times ``(S_i, A_i)`` shared by all flows.

    ``gen_times[i-1]`` and ``arrival_times[i-1]`` belong to generation ``i``.
    Arrivals may be out of order; generation times may not.
    """

    gen_times: tuple[float, ...]
    arrival_times: tuple[float, ...]

    def __post_init__(self):
        if len(self.gen_times) != len(self.arrival_times):
            raise ConfigError("gen_times and arrival_times differ in length")
        prev = -np.inf
        for i, (s, a) in enumerate(zip(self.gen_times, self.arrival_times), start=1):
            if not (np.isfinite(s) and np.isfinite(a)):
                raise ConfigError(f"generation {i}: non-finite time")
            if s < 0:
                raise ConfigError(f"generation {i}: negative generation time {s}")
            if s < prev:
                raise ConfigError(f"generation {i}: generation times must be non-decreasing")
            if a < s:
                raise ConfigError(f"generation {i}: arrival {a} precedes generation {s}")
            prev = s

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]]) -> "ArrivalSchedule":
        pairs = list(pairs)
        return cls(tuple(float(s) for s, _ in pairs), tuple(float(a) for _, a in pairs))

    @property
    def events(self) -> list[tuple[float, float]]:
        return list(zip(self.gen_times, self.arrival_times))

    def __len__(self) -> int:
        return len(self.gen_times)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.asarray(self.gen_times, dtype=np.float64).tobytes())
        h.update(np.asarray(self.arrival_times, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class SystemConfig:
    num_flows: int
    num_servers: int
    # one value for every flow, or a per-flow sequence
    initial_age: Union[float, tuple[float, ...]] = 0.0

    def __post_init__(self):
        if int(self.num_flows) != self.num_flows or self.num_flows < 1:
            raise ConfigError("num_flows must be a positive integer")
        if int(self.num_servers) != self.num_servers or self.num_servers < 1:
            raise ConfigError("num_servers must be a positive integer")
        if isinstance(self.initial_age, (list, tuple)):
            object.__setattr__(self, "initial_age", tuple(float(a) for a in self.initial_age))
            if len(self.initial_age) != self.num_flows:
                raise ConfigError(f"initial_age has {len(self.initial_age)} entries for {self.num_flows} flows")
        ages = np.asarray(self.initial_ages, dtype=float)
        if not (np.all(ages >= 0) and np.all(np.isfinite(ages))):
            raise ConfigError("initial_age must be finite and >= 0")

    @property
    def initial_ages(self) -> tuple[float, ...]:
        if isinstance(self.initial_age, tuple):
            return self.initial_age
        return (float(self.initial_age),) * self.num_flows


@dataclass
class SawtoothProcess:
    """Piecewise-linear unit-slope trajectory, stored as (time, value-just-after) breakpoints.

    ``anchors[k]`` is ``times[k] - values[k]``, i.e. the generation time whose age the
    process tracks after breakpoint ``k``. The engine records anchors exactly, so
    comparisons between processes can be made without float round-off.
    ``horizon`` (if set) is the end of the recorded interval.
    """

    times: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    anchors: list[float] = field(default_factory=list)
    horizon: Optional[float] = None

    @classmethod
    def from_breakpoints(cls, breakpoints: Sequence[tuple[float, float]], horizon=None) -> "SawtoothProcess":
        proc = cls(horizon=horizon)
        for t, v in breakpoints:
            proc.append(t, v)
        return proc

    @classmethod
    def starting_at(cls, t0: float, value: float) -> "SawtoothProcess":
        return cls([t0], [value], [t0 - value])

    def append(self, t: float, value: float, anchor: Optional[float] = None) -> None:
        if anchor is None:
            anchor = t - value
        if value < 0:
            raise InvariantViolation(f"negative age {value} at t={t}")
        if self.times:
            last = self.times[-1]
            if t < last:
                raise InvariantViolation(f"breakpoint at {t} precedes {last}")
            if t == last:
                # same instant: keep only the value just after all updates
                self.values[-1] = value
                self.anchors[-1] = anchor
                return
        self.times.append(t)
        self.values.append(value)
        self.anchors.append(anchor)

    @property
    def breakpoints(self) -> list[tuple[float, float]]:
        return list(zip(self.times, self.values))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.times, dtype=float), np.asarray(self.values, dtype=float)

    def __call__(self, t: float) -> float:
        return value_at(self, t)


def value_at(proc: SawtoothProcess, t: float) -> float:
    """Value of the process at ``t`` (right-continuous at breakpoints)."""
    if not proc.times or t < proc.times[0]:
        raise ValueError("query before process origin")
    k = bisect.bisect_right(proc.times, t) - 1
    return proc.values[k] + (t - proc.times[k])


def anchor_at(proc: SawtoothProcess, t: float) -> float:
    if not proc.times or t < proc.times[0]:
        raise ValueError("query before process origin")
    return proc.anchors[bisect.bisect_right(proc.times, t) - 1]


def segment_integrals(start_values: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Integral of ``c + s`` over ``s in [0, L]`` for each segment."""
    return start_values * lengths + 0.5 * lengths * lengths


def _check_interval(proc: SawtoothProcess, t0: float, t1: float) -> None:
    if not t1 > t0:
        raise ValueError(f"empty interval [{t0}, {t1}]")
    if not proc.times or t0 < proc.times[0]:
        raise ValueError("query before process origin")
    if proc.horizon is not None and t1 > proc.horizon:
        raise ValueError(f"interval end {t1} beyond recorded horizon {proc.horizon}")


def values_on_grid(proc: SawtoothProcess, grid: np.ndarray) -> np.ndarray:
    """Right-continuous values at each grid point (vectorized ``value_at``)."""
    ts, vs = proc.arrays()
    idx = np.searchsorted(ts, grid, side="right") - 1
    if np.any(idx < 0):
        raise ValueError("query before process origin")
    return vs[idx] + (grid - ts[idx])


def time_average(proc: SawtoothProcess, t0: float, t1: float) -> float:
    """Exact mean of the process over ``[t0, t1]``."""
    _check_interval(proc, t0, t1)
    ts, _ = proc.arrays()
    inner = ts[(ts > t0) & (ts < t1)]
    starts = np.concatenate(([t0], inner))
    ends = np.concatenate((inner, [t1]))
    c = values_on_grid(proc, starts)
    return float(segment_integrals(c, ends - starts).sum() / (t1 - t0))
