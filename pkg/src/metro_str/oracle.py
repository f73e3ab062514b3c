"""Brute-force reference solvers for small headway and regulation problems.

Both oracles re-derive the dynamics with plain loops instead of reusing the
optimisers' vectorised code paths, so agreement is a real cross-check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from metro_str.pfm_headway import HeadwayProblem, make_headway_problem, objective_F, optimize_headway
from metro_str.tom_regulator import RegulationProblem, decide


# ---------------------------------------------------------------- headway


def headway_score_loop(p: HeadwayProblem, h: float) -> float:
    """``F(h)`` from scratch, nominal references recomputed at the headway in force."""

    def sweep(hh):
        wait = load = 0.0
        riders = 0.0
        for j in range(p.stranded.shape[0]):
            q, a, b = float(p.stranded[j]), float(p.alpha[j]), float(p.beta[j])
            wait += q * hh + 0.5 * a * hh * hh
            riders = min(p.capacity, q + a * hh + (1.0 - b) * riders)
            load += riders / p.capacity
        return wait, load

    w0, l0 = sweep(p.current_headway)
    w, l = sweep(h)
    return p.weight_wait * w / w0 - p.weight_load * l / l0


def headway_grid_argmin(p: HeadwayProblem, step: float = 1.0) -> Tuple[float, float]:
    """Best point of ``h_min + k*step`` (and ``h_max``); ties go to the smaller ``h``."""
    count = int(math.floor((p.h_max - p.h_min) / step + 1e-9))
    hs = [p.h_min + k * step for k in range(count + 1)]
    if hs[-1] < p.h_max:
        hs.append(p.h_max)
    best_h, best_f = hs[0], headway_score_loop(p, hs[0])
    for h in hs[1:]:
        f = headway_score_loop(p, h)
        if f < best_f:
            best_h, best_f = h, f
    return best_h, best_f


def random_headway_problem(rng: np.random.Generator, n_stations: Optional[int] = None) -> HeadwayProblem:
    n = int(n_stations or rng.integers(2, 14))
    capacity = float(rng.uniform(200.0, 2000.0))
    alpha = rng.uniform(0.0, 3.0, n)
    alpha[-1] = 0.0
    beta = rng.uniform(0.0, 0.6, n)
    beta[0], beta[-1] = 0.0, 1.0
    stranded = rng.uniform(0.0, 0.5 * capacity, n) * (rng.random(n) < 0.6)
    stranded[-1] = 0.0
    alpha[0] = max(alpha[0], 0.05)  # keeps the nominal wait positive
    h_min = float(rng.uniform(60.0, 240.0))
    h_max = h_min + float(rng.uniform(20.0, 400.0))
    current = float(rng.uniform(h_min, h_max))
    return make_headway_problem(stranded, alpha, beta, capacity, h_min, h_max, current,
                                float(rng.uniform(0.1, 2.0)), float(rng.uniform(0.1, 2.0)))


# ---------------------------------------------------------------- regulation


@dataclass(frozen=True)
class SmallRegulationInstance:
    """Predecessor deviations plus free trains controlled from station 1 on.

    Arrays are ``(trains, stations)`` for the free trains; ``w`` folds run and
    dwell disturbances of each cell, ``gap`` is the scheduled gap to the train
    ahead and ``base`` the dispatch deviation before control.
    """

    predecessor: np.ndarray
    base: np.ndarray
    lam: np.ndarray
    w: np.ndarray
    gap: np.ndarray
    run_lo: np.ndarray
    run_hi: np.ndarray
    dwell_lo: float
    dwell_hi: float
    h_min: float
    a: float = 1.0
    b: float = 1.0
    c: float = 1.0

    @property
    def shape(self) -> Tuple[int, int]:
        return self.lam.shape

    def problem(self) -> RegulationProblem:
        m, n = self.shape
        rows = m + 1
        free = np.zeros((rows, n), dtype=bool)
        free[1:] = True
        known = np.zeros((rows, n))
        known[0] = self.predecessor
        pad = lambda arr: np.vstack([np.zeros((1, n)), arr])  # noqa: E731
        return RegulationProblem(
            trains=list(range(2, 2 + m)), free=free, known=known, lam=pad(self.lam), w=pad(self.w),
            residual=np.zeros((rows, n)), gap=pad(self.gap), dispatch_base=np.concatenate([[0.0], self.base]),
            run_lo=self.run_lo, run_hi=self.run_hi, dwell_lo=self.dwell_lo, dwell_hi=self.dwell_hi,
            a=self.a, b=self.b, c=self.c, h_min=self.h_min, has_predecessor=True,
        )


def _int_range(lo: float, hi: float) -> np.ndarray:
    return np.arange(math.ceil(lo), math.floor(hi) + 1, dtype=float)


def regulation_grid_optimum(inst: SmallRegulationInstance) -> Tuple[float, Optional[Dict]]:
    """Exhaustive search over integer-second controls.

    Returns ``(J, controls)`` of the best feasible combination, or
    ``(inf, None)`` when no grid point is feasible.
    """
    m, n = inst.shape
    axes: List[np.ndarray] = []
    for _ in range(m):
        axes.append(_int_range(inst.dwell_lo, inst.dwell_hi))
        for j in range(1, n):
            axes.append(_int_range(inst.run_lo[j - 1], inst.run_hi[j - 1]))
            axes.append(_int_range(inst.dwell_lo, inst.dwell_hi))
    grids = np.meshgrid(*axes, indexing="ij")
    U = [g.ravel() for g in grids]
    combos = U[0].size
    J = np.zeros(combos)
    ok = np.ones(combos, dtype=bool)
    above = np.tile(np.asarray(inst.predecessor, dtype=float)[:, None], (1, combos)).T  # (combos, n)
    v = 0
    for r in range(m):
        row = np.zeros((combos, n))
        for j in range(n):
            if j == 0:
                u2 = U[v]
                v += 1
                x = inst.base[r] + u2 + inst.w[r, 0]
                effort = u2 * u2
            else:
                u1, u2 = U[v], U[v + 1]
                v += 2
                lam = inst.lam[r, j]
                x = (row[:, j - 1] - lam * above[:, j] + u1 + u2 + inst.w[r, j]) / (1.0 - lam)
                effort = u1 * u1 + u2 * u2
            row[:, j] = x
            diff = x - above[:, j]
            J += inst.a * x * x + inst.b * diff * diff + inst.c * effort
            ok &= diff >= inst.h_min - inst.gap[r, j]
        above = row
    if not ok.any():
        return math.inf, None
    idx = int(np.flatnonzero(ok)[np.argmin(J[ok])])
    return float(J[idx]), {"u": [float(u[idx]) for u in U]}


def random_regulation_instance(rng: np.random.Generator, max_combos: int = 200_000,
                               feasible_only: bool = True) -> SmallRegulationInstance:
    """Up to 2 free trains behind a given predecessor, at most 3 stations.

    With ``feasible_only`` instances are redrawn until some integer control
    grid point satisfies every headway constraint.
    """
    while True:
        inst = _draw_instance(rng, max_combos)
        if not feasible_only or math.isfinite(regulation_grid_optimum(inst)[0]):
            return inst


def _draw_instance(rng: np.random.Generator, max_combos: int) -> SmallRegulationInstance:
    while True:
        m = int(rng.integers(1, 3))
        n = int(rng.integers(2, 4))
        dwell = int(rng.integers(1, 4))
        run_lo = -rng.integers(1, 4, n - 1).astype(float)
        run_hi = rng.integers(1, 6, n - 1).astype(float)
        size = ((2 * dwell + 1) ** n * np.prod(run_hi - run_lo + 1)) ** m
        if size <= max_combos:
            break
    lam = rng.uniform(0.0, 0.4, (m, n)) * (rng.random((m, n)) < 0.7)
    w = np.round(rng.uniform(0.0, 12.0, (m, n)) * (rng.random((m, n)) < 0.4), 1)
    h_min = 120.0
    gap = h_min + rng.uniform(-4.0, 25.0, (m, n))
    pred = np.round(rng.uniform(-3.0, 15.0, n), 1)
    base = np.maximum(0.0, pred[0] + h_min - gap[:, 0])
    return SmallRegulationInstance(pred, base, lam, w, gap, run_lo, run_hi, -float(dwell), float(dwell), h_min,
                                   a=float(rng.uniform(0.5, 2.0)), b=float(rng.uniform(0.0, 2.0)),
                                   c=float(rng.uniform(0.2, 2.0)))


# ---------------------------------------------------------------- reports


@dataclass
class OracleReport:
    pfm_cases: int
    pfm_max_dh: float
    pfm_max_dF: float
    tom_cases: int
    tom_max_rel_gap: float
    tom_violations: int

    @property
    def ok(self) -> bool:
        return (self.pfm_max_dh <= 0.5 and self.pfm_max_dF <= 1e-6
                and self.tom_max_rel_gap <= 0.01 and self.tom_violations == 0)


def tom_check(inst: SmallRegulationInstance) -> Tuple[float, bool]:
    """Relative excess of the solver over the grid optimum, and exact feasibility."""
    p = inst.problem()
    d = decide(p)
    u = np.zeros(p.n_vars)
    for (i1, i2), a, b in zip(p.var_index, d.u1, d.u2):
        if i1 is not None:
            u[i1] = a
        u[i2] = b
    feasible = bool(np.all(p.headway_slack(u) >= 0) and np.all(u >= p.lower) and np.all(u <= p.upper))
    j_grid, _ = regulation_grid_optimum(inst)
    if not math.isfinite(j_grid):
        return 0.0, feasible or not d.feasible
    return max(0.0, d.objective_J - j_grid) / max(j_grid, 1e-9), feasible and d.feasible


def run_oracles(seed: int = 0, pfm_cases: int = 50, tom_cases: int = 10) -> OracleReport:
    rng = np.random.default_rng(seed)
    dh = df = 0.0
    for _ in range(pfm_cases):
        p = random_headway_problem(rng)
        res = optimize_headway(p)
        h_ref, f_ref = headway_grid_argmin(p)
        dh = max(dh, abs(res.headway - h_ref))
        df = max(df, abs(float(objective_F(p, res.headway)) - f_ref))
    gap, bad = 0.0, 0
    for inst in itertools.islice(iter(lambda: random_regulation_instance(rng), None), tom_cases):
        g, ok = tom_check(inst)
        gap = max(gap, g)
        bad += not ok
    return OracleReport(pfm_cases, dh, df, tom_cases, gap, bad)
