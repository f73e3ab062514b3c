"""Line-wide headway re-optimisation when a platform overcrowds.

The successor of the triggering train is propagated along the whole line as a
function of a candidate headway ``h``. The score trades normalised waiting
time against normalised load rate::

    F(h) = w_wait * sum(wait(h)) / sum(wait(h0)) - w_load * sum(load(h)) / sum(load(h0))

where ``h0`` is the headway in force. Waiting time is a convex quadratic in
``h`` and every on-board count is concave piecewise-linear in ``h``, so ``F``
is convex on the bounds; the optimiser relies on that for its golden-section
refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from metro_str.model_core import Scenario
from metro_str.passenger_flow import waiting_time

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
CURVE_SAMPLES = 129


class DegenerateProblemError(ValueError):
    """Nominal waiting time or load is zero, so the score cannot be normalised."""


@dataclass(frozen=True)
class HeadwayProblem:
    trigger_train: int
    stranded: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    capacity: float
    h_min: float
    h_max: float
    current_headway: float
    weight_wait: float
    weight_load: float
    nominal_wait: float = float("nan")
    nominal_load: float = float("nan")

    @property
    def successor(self) -> int:
        return self.trigger_train + 1


def make_headway_problem(stranded, alpha, beta, capacity, h_min, h_max, current_headway,
                         weight_wait, weight_load, trigger_train: int = 0) -> HeadwayProblem:
    """Assemble a problem and evaluate its nominal references at ``current_headway``.

    Raises DegenerateProblemError if either reference is zero.
    """
    if h_max < h_min:
        raise ValueError(f"empty headway bounds [{h_min:g}, {h_max:g}]")
    p = HeadwayProblem(
        trigger_train=trigger_train,
        stranded=np.asarray(stranded, dtype=float),
        alpha=np.asarray(alpha, dtype=float),
        beta=np.asarray(beta, dtype=float),
        capacity=float(capacity),
        h_min=float(h_min),
        h_max=float(h_max),
        current_headway=float(current_headway),
        weight_wait=float(weight_wait),
        weight_load=float(weight_load),
    )
    _, _, wait, load = propagate_successor(p, p.current_headway)
    nominal_wait, nominal_load = float(wait.sum()), float(load.sum())
    if not nominal_wait > 0 or not nominal_load > 0:
        raise DegenerateProblemError(
            f"degenerate headway problem: nominal wait {nominal_wait:g}, nominal load {nominal_load:g}")
    return HeadwayProblem(**{**p.__dict__, "nominal_wait": nominal_wait, "nominal_load": nominal_load})


def headway_problem_from_line(s: Scenario, trigger_train: int, stranded_snapshot,
                              current_headway: float) -> HeadwayProblem:
    """Problem for the successor of ``trigger_train`` on scenario ``s``."""
    row = trigger_train  # 0-based row of train trigger_train + 1
    return make_headway_problem(
        stranded_snapshot,
        s.arrival_rate[row],
        s.alight_fraction[row],
        s.train_capacity,
        s.min_headway,
        s.headway_upper,
        current_headway,
        s.weight_wait,
        s.weight_load,
        trigger_train=trigger_train,
    )


def propagate_successor(p: HeadwayProblem, h):
    """Sweep the successor train along the line at headway ``h``.

    ``h`` may be a scalar or a 1-D array of candidates. Returns per-station
    ``(stranded, on_board, wait, load)``; with array input each has shape
    ``(len(h), n_stations)``.
    """
    h_arr = np.asarray(h, dtype=float)
    scalar = h_arr.ndim == 0
    hv = np.atleast_1d(h_arr)[:, None]
    n = p.stranded.shape[0]
    stranded = np.empty((hv.shape[0], n))
    on_board = np.empty_like(stranded)
    riders = np.zeros(hv.shape[0])
    for j in range(n):
        demand = p.stranded[j] + p.alpha[j] * hv[:, 0] + (1.0 - p.beta[j]) * riders
        stranded[:, j] = np.maximum(0.0, demand - p.capacity)
        riders = np.minimum(p.capacity, demand)
        on_board[:, j] = riders
    wait = waiting_time(p.stranded[None, :], p.alpha[None, :], hv)
    load = on_board / p.capacity
    if scalar:
        return stranded[0], on_board[0], wait[0], load[0]
    return stranded, on_board, wait, load


def objective_F(p: HeadwayProblem, h):
    """Score of headway ``h`` (lower is better); vectorised over ``h``."""
    if not (p.nominal_wait > 0 and p.nominal_load > 0):
        raise DegenerateProblemError("headway problem has no positive nominal wait/load")
    _, _, wait, load = propagate_successor(p, h)
    return (p.weight_wait * wait.sum(axis=-1) / p.nominal_wait
            - p.weight_load * load.sum(axis=-1) / p.nominal_load)


def _pick(p: HeadwayProblem, hs: np.ndarray, fs: np.ndarray) -> Tuple[float, float]:
    """Argmin with ties going to the headway nearest the one in force, then the larger."""
    f_min = float(fs.min())
    tied = fs <= f_min + 1e-12 * max(1.0, abs(f_min))
    cand_h, cand_f = hs[tied], fs[tied]
    order = np.lexsort((-cand_h, np.abs(cand_h - p.current_headway)))
    k = order[0]
    return float(cand_h[k]), float(cand_f[k])


def golden_section(f, a: float, b: float, tol: float) -> float:
    """Minimiser of a unimodal ``f`` on ``[a, b]`` to within ``tol``."""
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


@dataclass(frozen=True)
class HeadwayResult:
    headway: float
    score: float
    grid_step: float


def coarse_grid(p: HeadwayProblem) -> np.ndarray:
    step = max(1.0, (p.h_max - p.h_min) / 512.0)
    count = int(math.floor((p.h_max - p.h_min) / step + 1e-9))
    grid = p.h_min + step * np.arange(count + 1)
    if grid[-1] < p.h_max:
        grid = np.append(grid, p.h_max)
    return grid


def optimize_headway(p: HeadwayProblem, tol: float = 0.1,
                     resolution: Optional[float] = 1.0) -> HeadwayResult:
    """Minimise ``F`` over ``[h_min, h_max]``.

    A coarse grid locates the best cell, golden-section search refines inside
    its neighbouring cells down to ``tol``. With ``resolution`` set, the
    answer is the best point of the lattice ``h_min + k*resolution`` (plus
    ``h_max``) next to the refined optimum, which by convexity is the lattice
    argmin; ``resolution=None`` returns the refined continuous optimum.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if p.h_max <= p.h_min:
        h = p.h_min
        return HeadwayResult(h, float(objective_F(p, h)), 0.0)
    grid = coarse_grid(p)
    f_grid = objective_F(p, grid)
    h_best, _ = _pick(p, grid, f_grid)
    b = int(np.searchsorted(grid, h_best))
    lo, hi = grid[max(b - 1, 0)], grid[min(b + 1, grid.size - 1)]
    h_ref = golden_section(lambda h: float(objective_F(p, h)), float(lo), float(hi), tol)
    h_now = min(max(p.current_headway, p.h_min), p.h_max)
    if resolution is None:
        cands = np.concatenate([grid, [h_ref, h_now]])
    else:
        k_lo = math.floor((h_ref - tol - p.h_min) / resolution)
        k_hi = math.ceil((h_ref + tol - p.h_min) / resolution)
        lattice = p.h_min + resolution * np.arange(max(k_lo, 0), k_hi + 1)
        lattice = lattice[lattice <= p.h_max]
        cands = np.concatenate([lattice, [p.h_max]])
        if abs((h_now - p.h_min) / resolution - round((h_now - p.h_min) / resolution)) < 1e-9:
            cands = np.append(cands, h_now)
        if (p.h_max - p.h_min) / resolution < 1.0:
            cands = np.append(cands, p.h_min)
    cands = np.clip(cands, p.h_min, p.h_max)
    h_opt, f_opt = _pick(p, cands, objective_F(p, cands))
    return HeadwayResult(h_opt, f_opt, float(grid[1] - grid[0]) if grid.size > 1 else 0.0)


def sample_curve(p: HeadwayProblem, n: int = CURVE_SAMPLES):
    """``n`` evenly spaced ``(h, F(h))`` samples across the bounds, for audit."""
    hs = np.linspace(p.h_min, p.h_max, n)
    return hs, objective_F(p, hs)
