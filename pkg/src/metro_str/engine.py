"""Departure-event simulation coupling train regulation and headway re-optimisation.

The train-operation regulator is always active. In ``STR`` mode every
departure also checks its platform peak against the platform capacity and,
when it is reached, re-optimises the line headway and re-spaces the
timetable behind the departing train. ``FIXED`` mode never touches the
headway and serves as the baseline.

A departure becomes *ready* once the same train has left the previous
station and the train ahead has left this one; its controls are decided at
that moment and fix its departure time. Ready departures wait in a heap and
execute in time order, ties broken by ``(train, station)``.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from metro_str import passenger_flow as pf
from metro_str.model_core import Scenario, Timetable, build_nominal_timetable, validate_scenario
from metro_str.pfm_headway import (
    CURVE_SAMPLES,
    DegenerateProblemError,
    headway_problem_from_line,
    optimize_headway,
    sample_curve,
)
from metro_str.tom_regulator import (
    MAX_ITER,
    TrafficState,
    apply_headway_shift,
    commit_departure,
    objective_J,
    plan_departure,
    solve_regulation,
)

log = logging.getLogger(__name__)

STR = "STR"
FIXED = "FIXED"

# pfm_flag values in the event table
FLAG_NONE, FLAG_PFM, FLAG_REVERT = 0, 1, 2

TRACE_COLUMNS = ("k", "i", "j", "t_d", "x_d", "h", "p_in", "p_str", "peak", "T_wait", "u1", "u2", "pfm_flag")


@dataclass(frozen=True)
class RunOptions:
    horizon_trains: int = 2
    pfm_tol: float = 0.1
    pfm_resolution: Optional[float] = 1.0
    max_iter: int = MAX_ITER
    # departures that must separate two headway changes (1 => one full event between)
    episode_spacing: int = 2
    curve_samples: int = CURVE_SAMPLES
    # False rolls the line out with zero controls (safety holds still apply)
    regulate: bool = True


@dataclass(frozen=True)
class EventRecord:
    k: int
    i: int
    j: int
    t_d: float
    x_d: float
    h: float
    p_in: float
    p_str: float
    peak: float
    T_wait: float
    u1: float
    u2: float
    pfm_flag: int
    postponed: bool = False
    headway_in_force: float = 0.0

    def row(self) -> Tuple:
        return tuple(getattr(self, c) for c in TRACE_COLUMNS)


@dataclass(frozen=True)
class PFMEpisode:
    event_index: int
    trigger: Tuple[int, int]
    peak: float
    old_headway: float
    new_headway: float
    score_new: float
    score_old: float
    curve_h: Tuple[float, ...]
    curve_F: Tuple[float, ...]
    applied: bool


@dataclass(frozen=True)
class HeadwayChange:
    event_index: int
    at: Tuple[int, int]
    old_headway: float
    new_headway: float
    reason: str


@dataclass
class EventTrace:
    mode: str
    scenario_name: str
    t0: float
    records: List[EventRecord] = field(default_factory=list)
    episodes: List[PFMEpisode] = field(default_factory=list)
    headway_changes: List[HeadwayChange] = field(default_factory=list)
    skipped_episodes: int = 0
    infeasible_decisions: int = 0
    nonconverged_decisions: int = 0
    summary: Dict[str, float] = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def by_event_counter(self, name: str, how: str = "sum") -> Dict[int, float]:
        """Aggregate one column over all records sharing ``k = i + j``."""
        out: Dict[int, List[float]] = {}
        for r in self.records:
            out.setdefault(r.k, []).append(float(getattr(r, name)))
        agg = {"sum": sum, "max": max}[how]
        return {k: agg(v) for k, v in sorted(out.items())}


class Line:
    """Mutable simulation state for one run. Use ``run`` unless stepping by hand."""

    def __init__(self, s: Scenario, mode: str = STR, t0: float = 0.0, options: Optional[RunOptions] = None):
        if mode not in (STR, FIXED):
            raise ValueError(f"unknown mode {mode!r}")
        self.s = validate_scenario(s)
        self.mode = mode
        self.opt = options or RunOptions()
        self.timetable: Timetable = build_nominal_timetable(s, t0)
        m, n = s.shape
        self.traffic = TrafficState.empty(m, n)
        self.passengers = pf.PassengerState.empty(m, n)
        self.platform_stranded = np.zeros(n)
        self.platform_peak = np.zeros(n)
        self.heap: List[Tuple[float, int, int]] = []
        self.trace = EventTrace(mode, s.name, t0)
        self.executed_count = 0
        self.last_change_event = -10**9
        self._ready(1, 1)

    @property
    def headway(self) -> float:
        return self.timetable.headway_in_force

    def _ready(self, i: int, j: int) -> None:
        if not self.opt.regulate:
            plan = plan_departure(self.traffic, self.timetable, self.s, 0.0, 0.0, i, j)
            commit_departure(self.traffic, plan, i, j)
            heapq.heappush(self.heap, (plan.time, i, j))
            return
        decision = solve_regulation(self.traffic, self.timetable, self.s, (i, j),
                                    horizon_trains=self.opt.horizon_trains, max_iter=self.opt.max_iter)
        if not decision.feasible:
            self.trace.infeasible_decisions += 1
        if not decision.converged:
            self.trace.nonconverged_decisions += 1
        u1, u2 = decision.controls_for(i, j)
        plan = plan_departure(self.traffic, self.timetable, self.s, u1, u2, i, j)
        commit_departure(self.traffic, plan, i, j)
        heapq.heappush(self.heap, (plan.time, i, j))

    def pending(self) -> bool:
        return bool(self.heap)

    def step_event(self) -> Optional[EventRecord]:
        """Execute the chronologically next departure; ``None`` once the line is empty."""
        if not self.heap:
            return None
        t, i, j = heapq.heappop(self.heap)
        s, tr = self.s, self.traffic
        tr.executed[i - 1, j - 1] = True
        x = t - self.timetable.at(i, j)
        tr.deviation[i - 1, j - 1] = x
        h = t - tr.actual_departure[i - 2, j - 1] if i > 1 else self.headway
        flows = pf.departure_flows(self.passengers, i, j, h, s)
        self.passengers.record(i, j, h, flows)
        self.platform_stranded[j - 1] = flows.stranded
        self.platform_peak[j - 1] = flows.peak
        event_index = self.executed_count
        self.executed_count += 1
        headway_before = self.headway
        flag = FLAG_NONE
        if self.mode == STR:
            flag = self._headway_logic(event_index, i, j, float(flows.peak))
        rec = EventRecord(
            k=i + j, i=i, j=j, t_d=float(t), x_d=float(x), h=float(h),
            p_in=float(flows.on_board), p_str=float(flows.stranded), peak=float(flows.peak),
            T_wait=float(flows.wait_time), u1=float(tr.u1[i - 1, j - 1]), u2=float(tr.u2[i - 1, j - 1]),
            pfm_flag=flag, postponed=bool(tr.postponed[i - 1, j - 1]), headway_in_force=headway_before,
        )
        self.trace.records.append(rec)
        m, n = s.shape
        if j < n and (i == 1 or tr.executed[i - 2, j]):
            self._ready(i, j + 1)
        if i < m and (j == 1 or tr.executed[i, j - 2]):
            self._ready(i + 1, j)
        return rec

    def _headway_logic(self, event_index: int, i: int, j: int, peak: float) -> int:
        s = self.s
        spaced = event_index - self.last_change_event >= self.opt.episode_spacing
        if pf.trigger_check(peak, s):
            if not spaced or i >= s.n_trains:
                return FLAG_NONE
            try:
                problem = headway_problem_from_line(s, i, self.platform_stranded, self.headway)
            except DegenerateProblemError as exc:
                log.warning("headway episode skipped at (%d, %d): %s", i, j, exc)
                self.trace.skipped_episodes += 1
                return FLAG_NONE
            result = optimize_headway(problem, tol=self.opt.pfm_tol, resolution=self.opt.pfm_resolution)
            hs, fs = sample_curve(problem, self.opt.curve_samples)
            old = self.headway
            applied = result.headway != old
            self.trace.episodes.append(PFMEpisode(
                event_index, (i, j), peak, old, result.headway, result.score,
                float(s.weight_wait - s.weight_load), tuple(map(float, hs)), tuple(map(float, fs)), applied,
            ))
            self.last_change_event = event_index
            if applied:
                self._change_headway(event_index, i, j, result.headway, "pfm")
            return FLAG_PFM
        policy = s.revert_policy
        if (policy.kind != "never" and spaced and self.headway < s.scheduled_headway
                and np.all(self.platform_peak < policy.theta * s.platform_capacity)):
            self._change_headway(event_index, i, j, s.scheduled_headway, "revert")
            self.last_change_event = event_index
            return FLAG_REVERT
        return FLAG_NONE

    def _change_headway(self, event_index: int, i: int, j: int, new_h: float, reason: str) -> None:
        old = self.headway
        self.timetable, _ = apply_headway_shift(self.traffic, self.timetable, old, new_h, (i, j), self.s.min_headway)
        self.trace.headway_changes.append(HeadwayChange(event_index, (i, j), old, new_h, reason))
        log.debug("headway %s at (%d, %d): %.1f -> %.1f s", reason, i, j, old, new_h)

    def finish(self) -> EventTrace:
        while self.heap:
            self.step_event()
        self.trace.summary = summarize(self)
        return self.trace


def summarize(line: Line) -> Dict[str, float]:
    s, tr, ps = line.s, line.traffic, line.passengers
    recs = line.trace.records
    gaps = np.diff(tr.actual_departure, axis=0)
    total_controls = float(np.abs(tr.u1[tr.executed]).sum() + np.abs(tr.u2[tr.executed]).sum())
    x = np.where(tr.executed, tr.deviation, np.nan)
    return {
        "events": float(len(recs)),
        "max_peak": float(ps.peak.max()),
        "total_wait": float(ps.wait_time.sum()),
        "max_stranded": float(ps.stranded.max()),
        "total_abs_controls": total_controls,
        "final_J": objective_J(x, tr.u1, tr.u2, s.weight_punctuality, s.weight_regularity, s.weight_control),
        "max_abs_deviation": float(np.nanmax(np.abs(x))),
        "min_gap": float(np.nanmin(gaps)) if gaps.size else float("nan"),
        "pfm_episodes": float(len(line.trace.episodes)),
        "headway_changes": float(len(line.trace.headway_changes)),
        "postponed": float(tr.postponed.sum()),
        "infeasible_decisions": float(line.trace.infeasible_decisions),
        "final_headway": float(line.headway),
        "end_time": float(np.nanmax(tr.actual_departure)),
    }


def run(scenario: Scenario, mode: str = STR, t0: float = 0.0, options: Optional[RunOptions] = None) -> EventTrace:
    """Simulate every train over every station and return the event trace."""
    return Line(scenario, mode, t0, options).finish()


@dataclass
class ComparisonReport:
    str_trace: EventTrace
    fixed_trace: EventTrace
    series: Dict[str, Dict[str, List[float]]]
    deltas: Dict[str, float]
    recovery: Dict[str, Optional[int]]


def _series(trace: EventTrace, ks: List[int]) -> Dict[str, List[float]]:
    peak = trace.by_event_counter("peak", "max")
    wait = trace.by_event_counter("T_wait", "sum")
    stranded = trace.by_event_counter("p_str", "sum")
    on_board = trace.by_event_counter("p_in", "sum")
    return {
        "peak_max": [peak.get(k, 0.0) for k in ks],
        "wait_total": [wait.get(k, 0.0) for k in ks],
        "stranded_total": [stranded.get(k, 0.0) for k in ks],
        "on_board_total": [on_board.get(k, 0.0) for k in ks],
    }


def recovery_event(ks: List[int], wait: List[float], onset_k: Optional[int]) -> Optional[int]:
    """First event counter after the waiting-time peak where waiting is back at its pre-onset level.

    The pre-onset level is the waiting total at ``onset_k - 1``. ``None`` if
    there was no onset or waiting never recovers.
    """
    if onset_k is None or onset_k - 1 not in ks:
        return None
    level = wait[ks.index(onset_k - 1)]
    start = ks.index(onset_k)
    top = start + int(np.argmax(wait[start:]))
    for idx in range(top + 1, len(ks)):
        if wait[idx] <= level:
            return ks[idx]
    return None


def congestion_onset(trace: EventTrace, capacity: float) -> Optional[int]:
    """Smallest event counter with a platform peak at or above ``capacity``."""
    ks = [r.k for r in trace.records if r.peak >= capacity]
    return min(ks) if ks else None


def compare_modes(scenario: Scenario, t0: float = 0.0, options: Optional[RunOptions] = None) -> ComparisonReport:
    """Run STR and FIXED on identical inputs and pair their per-``k`` series."""
    str_trace = run(scenario, STR, t0, options)
    fixed_trace = run(scenario, FIXED, t0, options)
    ks = sorted({r.k for r in fixed_trace.records} | {r.k for r in str_trace.records})
    series = {"k": {"k": [float(k) for k in ks]}, STR: _series(str_trace, ks), FIXED: _series(fixed_trace, ks)}
    series["delta"] = {name: [a - b for a, b in zip(series[STR][name], series[FIXED][name])]
                       for name in series[STR]}
    deltas = {key: str_trace.summary[key] - fixed_trace.summary[key]
              for key in ("max_peak", "total_wait", "max_stranded", "total_abs_controls", "final_J",
                          "pfm_episodes", "end_time")}
    onset = congestion_onset(fixed_trace, scenario.platform_capacity)
    recovery = {
        "onset_k": onset,
        STR: recovery_event(ks, series[STR]["wait_total"], onset),
        FIXED: recovery_event(ks, series[FIXED]["wait_total"], onset),
    }
    return ComparisonReport(str_trace, fixed_trace, series, deltas, recovery)
