"""Domain types shared by every module: the line scenario and its timetable.

Trains and stations are numbered from 1 in every public signature, trace and
file. Per-(train, station) arrays are stored 0-based with shape
``(n_trains, n_stations)``; ``nominal_run[j - 1]`` is the section from
station ``j`` to ``j + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

DEFAULT_KAPPA_B = 0.05
DEFAULT_LAMBDA_MAX = 0.5


class ScenarioError(ValueError):
    """Raised when a scenario violates one of its invariants."""


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RevertPolicy:
    """When to restore the planned headway after congestion clears.

    ``never`` keeps the reduced headway; ``immediate`` reverts as soon as
    every platform's latest peak is below the platform capacity;
    ``hysteresis`` waits until every latest peak is below ``theta`` times
    the capacity.
    """

    kind: str = "never"
    theta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("never", "immediate", "hysteresis"):
            raise ScenarioError(f"unknown revert policy {self.kind!r}")
        if self.kind == "immediate" and self.theta != 1.0:
            object.__setattr__(self, "theta", 1.0)
        if not 0.0 < self.theta <= 1.0:
            raise ScenarioError("revert hysteresis theta must lie in (0, 1]")


@dataclass(frozen=True)
class Scenario:
    """Immutable description of one line, its demand and its regulation knobs.

    Times are seconds, counts are passengers, rates are passengers/second.
    ``disturbances`` maps 1-based ``(train, station)`` to ``(w1, w2)``: ``w1``
    lengthens the run on the section leaving that station, ``w2`` lengthens
    the dwell at that station.
    """

    n_stations: int
    n_trains: int
    nominal_run: np.ndarray
    min_dwell: float
    scheduled_headway: float
    min_headway: float
    arrival_rate: np.ndarray
    alight_fraction: np.ndarray
    delay_rate: np.ndarray
    train_capacity: float
    platform_capacity: float
    weight_wait: float = 0.5
    weight_load: float = 1.5
    weight_punctuality: float = 1.0
    weight_regularity: float = 1.0
    weight_control: float = 1.0
    run_adjust_min: Optional[np.ndarray] = None
    run_adjust_max: Optional[np.ndarray] = None
    dwell_adjust_min: float = -10.0
    dwell_adjust_max: float = 10.0
    headway_upper: Optional[float] = None
    disturbances: Mapping[Tuple[int, int], Tuple[float, float]] = field(default_factory=dict)
    revert_policy: RevertPolicy = field(default_factory=RevertPolicy)
    lambda_max: float = DEFAULT_LAMBDA_MAX
    name: str = "scenario"

    def __post_init__(self):
        n, m = int(self.n_stations), int(self.n_trains)
        object.__setattr__(self, "n_stations", n)
        object.__setattr__(self, "n_trains", m)
        for key in ("nominal_run", "arrival_rate", "alight_fraction", "delay_rate"):
            object.__setattr__(self, key, _frozen(getattr(self, key)))
        runs = self.nominal_run
        if self.run_adjust_min is None or self.run_adjust_max is None:
            lo, hi = run_bounds_from_fractions(runs, -0.17, 0.53)
            if self.run_adjust_min is None:
                object.__setattr__(self, "run_adjust_min", lo)
            if self.run_adjust_max is None:
                object.__setattr__(self, "run_adjust_max", hi)
        for key in ("run_adjust_min", "run_adjust_max"):
            val = np.asarray(getattr(self, key), dtype=float)
            if val.ndim == 0:
                val = np.full(runs.shape, float(val))
            object.__setattr__(self, key, _frozen(val))
        if self.headway_upper is None:
            object.__setattr__(self, "headway_upper", float(self.scheduled_headway))
        dist: Dict[Tuple[int, int], Tuple[float, float]] = {}
        for (i, j), (w1, w2) in dict(self.disturbances).items():
            dist[(int(i), int(j))] = (float(w1), float(w2))
        object.__setattr__(self, "disturbances", dist)
        for key in (
            "min_dwell", "scheduled_headway", "min_headway", "train_capacity",
            "platform_capacity", "weight_wait", "weight_load", "weight_punctuality",
            "weight_regularity", "weight_control", "dwell_adjust_min",
            "dwell_adjust_max", "headway_upper", "lambda_max",
        ):
            object.__setattr__(self, key, float(getattr(self, key)))

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_trains, self.n_stations)

    def disturbance(self, i: int, j: int) -> Tuple[float, float]:
        """``(w1, w2)`` for 1-based train ``i`` at station ``j``."""
        return self.disturbances.get((i, j), (0.0, 0.0))

    def with_changes(self, **changes) -> "Scenario":
        return replace(self, **changes)


@dataclass(frozen=True)
class Timetable:
    """Scheduled departures ``T[i-1, j-1]`` and the headway currently in force."""

    scheduled_departure: np.ndarray
    headway_in_force: float

    def __post_init__(self):
        object.__setattr__(self, "scheduled_departure", _frozen(self.scheduled_departure))
        object.__setattr__(self, "headway_in_force", float(self.headway_in_force))

    def at(self, i: int, j: int) -> float:
        return float(self.scheduled_departure[i - 1, j - 1])

    def gap(self, i: int, j: int) -> float:
        """Scheduled separation between train ``i`` and its predecessor at ``j``."""
        T = self.scheduled_departure
        return float(T[i - 1, j - 1] - T[i - 2, j - 1])

    def respaced(self, anchor_train: int, new_headway: float) -> "Timetable":
        """Keep trains up to ``anchor_train`` and re-space every later train.

        Later trains inherit the anchor's along-line profile, offset by whole
        multiples of ``new_headway``, so the new schedule is exactly regular
        behind the anchor whatever the delay rates are.
        """
        T = np.array(self.scheduled_departure)
        a = anchor_train - 1
        offsets = np.arange(1, T.shape[0] - a)[:, None] * float(new_headway)
        T[a + 1:] = T[a][None, :] + offsets
        return Timetable(T, new_headway)


def run_bounds_from_fractions(nominal_run, lower: float, upper: float):
    """Per-section run-time adjustment boxes ``[lower*R_j, upper*R_j]``.

    ``lower`` is negative (speed-up), ``upper`` positive (slow-down).
    """
    runs = np.asarray(nominal_run, dtype=float)
    return _frozen(lower * runs), _frozen(upper * runs)


def delay_rate_from_demand(arrival_rate, kappa_b: float = DEFAULT_KAPPA_B,
                           lambda_max: float = DEFAULT_LAMBDA_MAX) -> np.ndarray:
    """Saturating boarding-driven delay rate ``min(lambda_max, kappa_b * alpha)``.

    ``kappa_b`` is seconds of extra dwell per boarding passenger. The
    saturation keeps the implicit departure recursion well posed.
    """
    alpha = np.asarray(arrival_rate, dtype=float)
    return _frozen(np.minimum(lambda_max, kappa_b * alpha))


def validate_scenario(raw: Scenario) -> Scenario:
    """Return ``raw`` if every scenario invariant holds, else raise ScenarioError.

    The message names the first violated invariant.
    """
    n, m = raw.n_stations, raw.n_trains
    if n < 2:
        raise ScenarioError("n_stations must be >= 2")
    if m < 2:
        raise ScenarioError("n_trains must be >= 2")
    if raw.nominal_run.shape != (n - 1,):
        raise ScenarioError(
            f"dimension mismatch: nominal_run has shape {raw.nominal_run.shape}, expected ({n - 1},)")
    for key in ("arrival_rate", "alight_fraction", "delay_rate"):
        arr = getattr(raw, key)
        if arr.shape != (m, n):
            raise ScenarioError(f"dimension mismatch: {key} has shape {arr.shape}, expected ({m}, {n})")
        if not np.all(np.isfinite(arr)):
            raise ScenarioError(f"{key} contains non-finite values")
    for key in ("run_adjust_min", "run_adjust_max"):
        if getattr(raw, key).shape != (n - 1,):
            raise ScenarioError(f"dimension mismatch: {key} must have one entry per section")
    if np.any(raw.nominal_run <= 0):
        raise ScenarioError("nominal running times must be > 0")
    if raw.min_dwell < 0:
        raise ScenarioError("min_dwell must be >= 0")
    if raw.min_headway <= 0:
        raise ScenarioError("min_headway must be > 0")
    if raw.scheduled_headway < raw.min_headway:
        raise ScenarioError(
            f"scheduled headway {raw.scheduled_headway:g} s is below min_headway {raw.min_headway:g} s")
    if raw.headway_upper < raw.scheduled_headway:
        raise ScenarioError(
            f"headway_upper {raw.headway_upper:g} s is below the scheduled headway {raw.scheduled_headway:g} s")
    if raw.train_capacity <= 0:
        raise ScenarioError("train_capacity must be > 0")
    if raw.platform_capacity <= 0:
        raise ScenarioError("platform_capacity must be > 0")
    if np.any(raw.arrival_rate < 0):
        raise ScenarioError("arrival_rate must be >= 0")
    beta = raw.alight_fraction
    if np.any(beta < 0) or np.any(beta > 1):
        raise ScenarioError("alight_fraction must lie in [0, 1]")
    lam = raw.delay_rate
    if np.any(lam >= 1):
        i, j = np.argwhere(lam >= 1)[0] + 1
        raise ScenarioError(f"delay rate must be < 1 (train {i}, station {j})")
    if not 0 <= raw.lambda_max < 1:
        raise ScenarioError("lambda_max must lie in [0, 1)")
    if np.any(lam < 0) or np.any(lam > raw.lambda_max):
        raise ScenarioError(f"delay rate must lie in [0, lambda_max={raw.lambda_max:g}]")
    if np.any(beta[:, -1] != 1.0):
        raise ScenarioError("alight_fraction at the terminal station must be 1")
    if np.any(raw.arrival_rate[:, -1] != 0.0):
        raise ScenarioError("arrival_rate at the terminal station must be 0")
    for key in ("weight_wait", "weight_load", "weight_punctuality", "weight_regularity", "weight_control"):
        if getattr(raw, key) < 0:
            raise ScenarioError(f"{key} must be >= 0")
    if np.any(raw.run_adjust_min > 0) or np.any(raw.run_adjust_max < 0):
        raise ScenarioError("run-time control box must contain 0")
    if raw.dwell_adjust_min > 0 or raw.dwell_adjust_max < 0:
        raise ScenarioError("dwell-time control box must contain 0")
    if np.any(raw.nominal_run + raw.run_adjust_min <= 0):
        raise ScenarioError("run-time control box allows a non-positive running time")
    if raw.min_dwell + raw.dwell_adjust_min < 0:
        raise ScenarioError("dwell-time control box allows a negative dwell")
    for (i, j), (w1, w2) in raw.disturbances.items():
        if not (1 <= i <= m and 1 <= j <= n):
            raise ScenarioError(f"disturbance ({i}, {j}) is outside the line")
        if j == n and w1 != 0:
            raise ScenarioError(f"disturbance ({i}, {j}) has a run component past the terminal")
        if w1 < 0 or w2 < 0:
            raise ScenarioError(f"disturbance ({i}, {j}) must be non-negative")
    return raw


def build_nominal_timetable(s: Scenario, t0: float = 0.0) -> Timetable:
    """Regular timetable at the planned headway.

    Train ``i`` leaves station 1 at ``t0 + (i-1)*H``. Along the line the
    scheduled dwell at station ``j+1`` is ``D + lambda[i, j+1] * H``: the
    implicit schedule recursion
    ``T[i,j+1] = T[i,j] + lambda*(T[i,j+1] - T[i-1,j+1]) + R_j + D``
    collapses to this closed form because the scheduled gap
    ``T[i,j+1] - T[i-1,j+1]`` equals ``H``. The timetable is exactly
    regular whenever the delay rate at each station is the same for every
    train.
    """
    H = s.scheduled_headway
    lam = s.delay_rate
    legs = s.nominal_run[None, :] + s.min_dwell + lam[:, 1:] * H
    T = np.empty(s.shape)
    T[:, 0] = t0 + np.arange(s.n_trains) * H
    T[:, 1:] = T[:, :1] + np.cumsum(legs, axis=1)
    return Timetable(T, H)
