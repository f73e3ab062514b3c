"""Fluid passenger bookkeeping updated at every train departure.

Counts are non-negative reals; nothing is rounded inside the dynamics. The
elementwise helpers accept scalars or numpy arrays, which lets the headway
optimiser sweep many candidate headways at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from metro_str.model_core import Scenario


class DepartureFlows(NamedTuple):
    """Passenger movements of one departure, in evaluation order."""

    alighted: float
    arrived: float
    boarded: float
    on_board: float
    stranded: float
    peak: float
    wait_time: float


def alighting_count(on_board_prev, beta):
    return beta * on_board_prev


def arrival_count(alpha, h):
    """Passengers arriving during one headway, spread uniformly over it."""
    return alpha * h


def waiting_time(stranded_prev, alpha, h):
    """Passenger-seconds spent waiting for one departure.

    Passengers left behind by the previous train wait the whole headway;
    uniform arrivals wait half of it on average.
    """
    return stranded_prev * h + 0.5 * alpha * h * h


def exchange(on_board_prev, stranded_prev, alpha, beta, h, capacity) -> DepartureFlows:
    """Boarding and alighting when a train leaves a platform.

    ``stranded`` is taken from platform conservation (arrivals plus the
    previous queue minus boarders) and ``boarded`` is re-derived from it, so
    the balance holds bit-for-bit in floating point; mathematically this is
    the ``max(0, queue + arrivals + staying riders - capacity)`` form. ``on_board`` uses the folded ``min(capacity, ...)`` form.
    """
    alighted = alighting_count(on_board_prev, beta)
    arrived = arrival_count(alpha, h)
    boarded = np.minimum(capacity - on_board_prev + alighted, arrived + stranded_prev)
    on_board = np.minimum(capacity, stranded_prev + arrived + (1.0 - beta) * on_board_prev)
    total = arrived + stranded_prev
    stranded = total - boarded
    # one of the two subtractions is exact (Sterbenz), so boarded + stranded
    # reproduces total bit-for-bit
    boarded = total - stranded
    # worst instant: queue, newcomers and alighting riders share the platform
    peak = stranded_prev + arrived + beta * on_board_prev
    wait = waiting_time(stranded_prev, alpha, h)
    return DepartureFlows(alighted, arrived, boarded, on_board, stranded, peak, wait)


def trigger_check(peak: float, s: Scenario) -> bool:
    """Platform overcrowded: the peak reaches the platform capacity."""
    return bool(peak >= s.platform_capacity)


_FIELDS = ("on_board", "stranded", "boarded", "alighted", "arrived", "peak", "wait_time", "headway")


@dataclass
class PassengerState:
    """Per-(train, station) passenger counts, filled as departures execute.

    Arrays are indexed ``[i-1, j-1]``; entries of unexecuted departures are 0
    and ``executed`` marks which ones are defined.
    """

    on_board: np.ndarray
    stranded: np.ndarray
    boarded: np.ndarray
    alighted: np.ndarray
    arrived: np.ndarray
    peak: np.ndarray
    wait_time: np.ndarray
    headway: np.ndarray
    executed: np.ndarray

    @classmethod
    def empty(cls, n_trains: int, n_stations: int) -> "PassengerState":
        arrays = {name: np.zeros((n_trains, n_stations)) for name in _FIELDS}
        return cls(executed=np.zeros((n_trains, n_stations), dtype=bool), **arrays)

    def copy(self) -> "PassengerState":
        return PassengerState(**{name: getattr(self, name).copy() for name in _FIELDS + ("executed",)})

    def on_board_before(self, i: int, j: int) -> float:
        """Riders of train ``i`` arriving at ``j`` (empty train enters station 1)."""
        return float(self.on_board[i - 1, j - 2]) if j > 1 else 0.0

    def stranded_before(self, i: int, j: int) -> float:
        """Queue left at ``j`` by train ``i-1`` (no train 0)."""
        return float(self.stranded[i - 2, j - 1]) if i > 1 else 0.0

    def record(self, i: int, j: int, h: float, flows: DepartureFlows) -> None:
        """Store one departure in place. Used by the engine's event loop."""
        idx = (i - 1, j - 1)
        for name in ("on_board", "stranded", "boarded", "alighted", "arrived", "peak", "wait_time"):
            getattr(self, name)[idx] = float(getattr(flows, name))
        self.headway[idx] = h
        self.executed[idx] = True


def departure_flows(state: PassengerState, i: int, j: int, h: float, s: Scenario) -> DepartureFlows:
    if h < 0:
        raise ValueError(f"non-causal headway {h:g} s for train {i} at station {j}")
    if j > 1 and not state.executed[i - 1, j - 2]:
        raise ValueError(f"train {i} has not left station {j - 1}")
    if i > 1 and not state.executed[i - 2, j - 1]:
        raise ValueError(f"train {i - 1} has not left station {j}")
    return exchange(
        state.on_board_before(i, j),
        state.stranded_before(i, j),
        float(s.arrival_rate[i - 1, j - 1]),
        float(s.alight_fraction[i - 1, j - 1]),
        h,
        s.train_capacity,
    )


def departure_update(state: PassengerState, i: int, j: int, h: float, s: Scenario) -> PassengerState:
    """Return a copy of ``state`` with the departure of train ``i`` from ``j`` applied.

    ``h`` is the actual gap to the previous train at this station; for the
    first train it is the scheduled headway in force.
    """
    flows = departure_flows(state, i, j, h, s)
    new = state.copy()
    new.record(i, j, h, flows)
    return new
