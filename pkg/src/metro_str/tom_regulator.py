"""Departure-deviation dynamics and the receding-horizon regulation QP.

The deviation of train ``i`` at station ``j+1`` obeys the implicit relation::

    x[i,j+1] = x[i,j] + lam*(x[i,j+1] - x[i-1,j+1]) + u + w + e

where ``u = u1 + u2`` folds the run and dwell adjustments, ``w`` the
disturbances, and ``e`` is the timetable's own residual against the
scheduled-operation recursion (zero for a regular timetable built with the
same delay rates). Deviations are affine in the controls, so each
regulation step is a convex QP with control boxes and linear headway
constraints. It is solved with a dense primal-dual interior-point method;
the problems have at most a few dozen variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from metro_str.model_core import Scenario, Timetable

MAX_ITER = 200
# headway constraints are solved with this much slack so the returned
# controls satisfy the untightened constraint exactly
CONSTRAINT_MARGIN = 1e-6
# controls below this (margin and round-off) are reported as exact zeros
# whenever the untightened constraints still hold
SNAP = 1e-5
# departures this close to the timetable differ only by summation order
ON_TIME = 1e-9


def deviation_step(x_prev_station: float, x_prev_train: float, u: float, w: float, lam: float) -> float:
    """Solve ``x = x_prev_station + lam*(x - x_prev_train) + u + w`` for ``x``."""
    if lam >= 1:
        raise ValueError(f"delay rate must be < 1, got {lam:g}")
    return (x_prev_station - lam * x_prev_train + u + w) / (1.0 - lam)


def objective_J(x, u1, u2, a: float, b: float, c: float, x_prev_train=None) -> float:
    """Punctuality + regularity + control-effort cost of a block of deviations.

    ``x``, ``u1`` and ``u2`` are ``(trains, stations)`` arrays for consecutive
    trains; row ``r`` is regularised against row ``r-1``, and row 0 against
    ``x_prev_train`` when given. NaN entries (unexecuted events) are skipped.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    u1 = np.broadcast_to(np.asarray(u1, dtype=float), x.shape)
    u2 = np.broadcast_to(np.asarray(u2, dtype=float), x.shape)
    ahead = np.full_like(x, np.nan)
    ahead[1:] = x[:-1]
    if x_prev_train is not None:
        ahead[0] = np.asarray(x_prev_train, dtype=float)
    live = ~np.isnan(x)
    reg = live & ~np.isnan(ahead)
    total = a * np.sum(x[live] ** 2)
    total += b * np.sum((x[reg] - ahead[reg]) ** 2)
    total += c * (np.sum(np.nan_to_num(u1[live]) ** 2) + np.sum(np.nan_to_num(u2[live]) ** 2))
    return float(total)


@dataclass
class TrafficState:
    """Departure bookkeeping owned by the engine's event loop.

    ``actual_departure`` is set once an event is planned (its controls are
    fixed); ``executed`` marks departures that have happened. ``deviation``
    is recorded at execution against the timetable then in force.
    """

    actual_departure: np.ndarray
    deviation: np.ndarray
    actual_run: np.ndarray
    actual_dwell: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    postponed: np.ndarray
    executed: np.ndarray

    @classmethod
    def empty(cls, n_trains: int, n_stations: int) -> "TrafficState":
        nan = lambda: np.full((n_trains, n_stations), np.nan)  # noqa: E731
        return cls(nan(), nan(), nan(), nan(), np.zeros((n_trains, n_stations)),
                   np.zeros((n_trains, n_stations)), np.zeros((n_trains, n_stations), dtype=bool),
                   np.zeros((n_trains, n_stations), dtype=bool))

    @property
    def planned(self) -> np.ndarray:
        return ~np.isnan(self.actual_departure)

    def copy(self) -> "TrafficState":
        return TrafficState(*(np.array(getattr(self, f)) for f in (
            "actual_departure", "deviation", "actual_run", "actual_dwell", "u1", "u2",
            "postponed", "executed")))


@dataclass
class RegulationDecision:
    horizon: List[Tuple[int, int]]
    u1: np.ndarray
    u2: np.ndarray
    objective_J: float
    solver_iterations: int
    converged: bool
    feasible: bool = True

    def controls_for(self, i: int, j: int) -> Tuple[float, float]:
        k = self.horizon.index((i, j))
        return float(self.u1[k]), float(self.u2[k])


@dataclass
class RegulationProblem:
    """One horizon of the regulation QP in deviation coordinates.

    Row 0 of every ``(rows, stations)`` array is the predecessor of the first
    horizon train (known or predicted values only); rows ``1..`` are the
    horizon trains. ``free`` marks cells whose controls are decision
    variables; it must be a suffix of stations in each row. ``known`` holds
    deviations of the other cells. Column 0 cells are dispatches from the
    first station: ``x = dispatch_base + u2 + w``.
    """

    trains: List[int]
    free: np.ndarray
    known: np.ndarray
    lam: np.ndarray
    w: np.ndarray
    residual: np.ndarray
    gap: np.ndarray
    dispatch_base: np.ndarray
    run_lo: np.ndarray
    run_hi: np.ndarray
    dwell_lo: float
    dwell_hi: float
    a: float
    b: float
    c: float
    h_min: float
    has_predecessor: bool = True
    # filled by __post_init__
    cells: List[Tuple[int, int]] = field(default_factory=list, init=False)
    var_index: List[Tuple[Optional[int], int]] = field(default_factory=list, init=False)

    def __post_init__(self):
        rows, n = self.free.shape
        if self.free[0].any():
            raise ValueError("row 0 holds the predecessor and cannot be free")
        lo, hi = [], []
        for r in range(1, rows):
            js = np.flatnonzero(self.free[r])
            if js.size and not np.all(self.free[r, js[0]:]):
                raise ValueError("free cells must form a suffix of each row")
            for j in js:
                self.cells.append((r, int(j)))
                if j == 0:
                    self.var_index.append((None, len(lo)))
                    lo.append(self.dwell_lo)
                    hi.append(self.dwell_hi)
                else:
                    self.var_index.append((len(lo), len(lo) + 1))
                    lo += [float(self.run_lo[j - 1]), self.dwell_lo]
                    hi += [float(self.run_hi[j - 1]), self.dwell_hi]
        self.lower = np.array(lo)
        self.upper = np.array(hi)
        self._build_affine()

    @property
    def n_vars(self) -> int:
        return self.lower.size

    def _row_has_pred(self, r: int) -> bool:
        return r > 1 or self.has_predecessor

    def _build_affine(self):
        """Express every free deviation as ``A @ u + x0``."""
        rows, n = self.free.shape
        nv = self.n_vars
        coef = np.zeros((rows, n, nv))
        const = np.where(self.free, 0.0, np.nan_to_num(self.known))
        for (r, j), (i1, i2) in zip(self.cells, self.var_index):
            lam = self.lam[r, j] if self._row_has_pred(r) else 0.0
            push = np.zeros(nv)
            push[i2] = 1.0
            if i1 is not None:
                push[i1] = 1.0
            if j == 0:
                coef[r, j] = push
                const[r, j] = self.dispatch_base[r] + self.w[r, j]
            else:
                coef[r, j] = (coef[r, j - 1] - lam * coef[r - 1, j] + push) / (1.0 - lam)
                const[r, j] = (const[r, j - 1] - lam * const[r - 1, j] + self.w[r, j]
                               + self.residual[r, j]) / (1.0 - lam)
        idx = tuple(np.array(self.cells).T) if self.cells else (np.array([], int), np.array([], int))
        self.A = coef[idx]
        self.x0 = const[idx]
        pred = np.array([self._row_has_pred(r) for r, _ in self.cells], dtype=bool)
        prev_rows = (idx[0] - 1, idx[1])
        self.B = (self.A - coef[prev_rows])[pred]
        self.d0 = (self.x0 - const[prev_rows])[pred]
        self.bound = (self.h_min - self.gap[idx])[pred]
        self.pred_mask = pred

    def deviations(self, u) -> np.ndarray:
        return self.A @ np.asarray(u, dtype=float) + self.x0

    def objective(self, u) -> float:
        u = np.asarray(u, dtype=float)
        x = self.A @ u + self.x0
        d = self.B @ u + self.d0
        return float(self.a * x @ x + self.b * d @ d + self.c * u @ u)

    def gradient(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return (2 * self.a * self.A.T @ (self.A @ u + self.x0)
                + 2 * self.b * self.B.T @ (self.B @ u + self.d0)
                + 2 * self.c * u)

    def headway_slack(self, u) -> np.ndarray:
        """``x - x_ahead - (H_min - gap)`` per constrained cell; must be >= 0."""
        return self.B @ np.asarray(u, dtype=float) + self.d0 - self.bound

    def hessian(self) -> np.ndarray:
        return 2 * (self.a * self.A.T @ self.A + self.b * self.B.T @ self.B
                    + self.c * np.eye(self.n_vars))

    def split(self, u) -> Tuple[np.ndarray, np.ndarray]:
        """Per-cell ``(u1, u2)`` arrays aligned with ``cells``."""
        u = np.asarray(u, dtype=float)
        u1 = np.array([0.0 if i1 is None else u[i1] for i1, _ in self.var_index])
        u2 = np.array([u[i2] for _, i2 in self.var_index])
        return u1, u2


@dataclass
class QPResult:
    u: np.ndarray
    iterations: int
    converged: bool
    feasible: bool


def _interior_point(P, c, A, b, max_iter: int, tol: float = 1e-8):
    """Mehrotra predictor-corrector for ``min 0.5 x'Px + c'x`` s.t. ``Ax >= b``.

    Returns ``(x, y, iterations, converged)`` with ``y`` the row multipliers.
    Iterates stay strictly inside ``Ax > b``.
    """
    n, m = c.size, b.size
    x = np.zeros(n)
    z = np.maximum(A @ x - b, 1.0)
    y = np.ones(m)
    scale = 1.0 + max(np.abs(c).max(initial=0.0), np.abs(b).max(initial=0.0))
    for it in range(1, max_iter + 1):
        rd = P @ x + c - A.T @ y
        rp = A @ x - z - b
        mu = float(z @ y) / m
        if (np.abs(rd).max(initial=0.0) <= tol * scale and np.abs(rp).max(initial=0.0) <= tol * scale
                and mu <= tol * scale):
            return x, y, it, True
        # a diverging dual signals an empty feasible set
        if not (z.min() > 0 and 0 < y.min() and y.max() < 1e12 * scale):
            return x, y, it, False
        with np.errstate(all="ignore"):
            d = y / z
            K = P + (A.T * d) @ A
        if not np.isfinite(K).all():
            return x, y, it, False
        K[np.diag_indices(n)] += 1e-14 * (1.0 + np.abs(np.diag(K)).max())
        base = -rd - A.T @ (d * rp)

        def newton(rc):
            dx = np.linalg.solve(K, base - A.T @ (rc / z))
            dz = A @ dx + rp
            dy = (-rc - y * dz) / z
            return dx, dz, dy

        def longest(v, dv):
            neg = dv < 0
            return min(1.0, float((-v[neg] / dv[neg]).min())) if neg.any() else 1.0

        dx, dz, dy = newton(z * y)
        a_aff = min(longest(z, dz), longest(y, dy))
        mu_aff = float((z + a_aff * dz) @ (y + a_aff * dy)) / m
        sigma = (mu_aff / mu) ** 3
        dx, dz, dy = newton(z * y + dz * dy - sigma * mu)
        step = min(1.0, 0.995 * min(longest(z, dz), longest(y, dy)))
        if not (np.isfinite(dx).all() and np.isfinite(dy).all()):
            return x, y, it, False
        x, z, y = x + step * dx, z + step * dz, y + step * dy
    return x, y, max_iter, False


def _polish(P, c, A, b, x, y):
    """Re-solve the KKT system on the rows the interior point left active.

    Returns the polished point, or ``None`` when it is not primal and dual
    feasible (the interior answer is then kept).
    """
    slack = A @ x - b
    active = y > slack
    n, k = c.size, int(active.sum())
    Aa = A[active]
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = P
    kkt[:n, n:] = -Aa.T
    kkt[n:, :n] = Aa
    rhs = np.concatenate([-c, b[active]])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    xp, ya = sol[:n], sol[n:]
    tol = 1e-9 * (1.0 + np.abs(b).max(initial=0.0))
    if np.any(A @ xp - b < -tol) or np.any(ya < -1e-9 * (1.0 + np.abs(c).max(initial=0.0))):
        return None
    if np.abs(kkt @ sol - rhs).max(initial=0.0) > tol:
        return None
    return xp


def _snap(u, G, g):
    """Zero out controls below SNAP seconds unless that breaks a headway row."""
    small = np.abs(u) < SNAP
    if not small.any():
        return u
    snapped = np.where(small, 0.0, u)
    if np.all(G @ snapped - g >= 0) or not np.all(G @ u - g >= 0):
        return snapped
    return u


def _finish(u, lo, hi, G, g):
    u = _snap(np.clip(u, lo, hi), G, g)
    return u, bool(np.all(G @ u - g >= 0))


def solve_qp(Q, q, lo, hi, G=None, g=None, max_iter: int = MAX_ITER) -> QPResult:
    """Minimise ``0.5 u'Qu + q'u`` over ``lo <= u <= hi`` and ``G u >= g``.

    The exact problem is tried first and polished on its active set. When it
    fails, a first pass finds the least-squares violation ``v`` of the
    headway rows and a second pass solves the original objective against
    ``G u >= g - v``, so the least-violating, otherwise optimal, controls come
    back with ``feasible=False``.
    """
    n = q.size
    if G is None:
        G, g = np.zeros((0, n)), np.zeros(0)
    if n == 0:
        return QPResult(np.zeros(0), 0, True, bool(np.all(g <= 0)))
    k = G.shape[0]
    g_tight = g + CONSTRAINT_MARGIN
    eye = np.eye(n)
    rows = np.vstack([eye, -eye, G])
    rhs = np.concatenate([lo, -hi, g_tight])
    sol, y, used, conv = _interior_point(Q, q, rows, rhs, max_iter)
    if conv:
        polished = _polish(Q, q, rows, rhs, sol, y)
        if polished is not None:
            sol = polished
        u, feasible = _finish(sol, lo, hi, G, g)
        if feasible:
            return QPResult(u, used, True, True)
    if not k:
        u, _ = _finish(sol, lo, hi, G, g)
        return QPResult(u, used, conv, True)
    # phase 1: smallest squared violation of the headway rows within the boxes
    box = np.hstack([np.vstack([eye, -eye]), np.zeros((2 * n, k))])
    rows1 = np.vstack([box, np.hstack([G, np.eye(k)]), np.hstack([np.zeros((k, n)), np.eye(k)])])
    rhs1 = np.concatenate([lo, -hi, g_tight, np.zeros(k)])
    P1 = np.diag(np.concatenate([np.full(n, 1e-6), np.full(k, 2.0)]))
    sol1, _, it, conv = _interior_point(P1, np.zeros(n + k), rows1, rhs1, max_iter)
    used += it
    violation = np.where(sol1[n:] > SNAP, sol1[n:] + CONSTRAINT_MARGIN, 0.0)
    # phase 2: the original objective with just those rows relaxed
    rhs = np.concatenate([lo, -hi, g_tight - violation])
    sol, y, it, conv2 = _interior_point(Q, q, rows, rhs, max_iter)
    used += it
    if conv2:
        polished = _polish(Q, q, rows, rhs, sol, y)
        if polished is not None:
            sol = polished
    else:
        sol = sol1[:n]
    u, feasible = _finish(sol, lo, hi, G, g)
    return QPResult(u, used, conv and conv2, feasible)


def solve_problem(p: RegulationProblem, max_iter: int = MAX_ITER) -> QPResult:
    Q = p.hessian()
    q = 2 * (p.a * p.A.T @ p.x0 + p.b * p.B.T @ p.d0)
    return solve_qp(Q, q, p.lower, p.upper, p.B, p.bound - p.d0, max_iter=max_iter)


def _deviation_now(state: TrafficState, tt: Timetable, i: int, j: int) -> float:
    return float(state.actual_departure[i - 1, j - 1] - tt.scheduled_departure[i - 1, j - 1])


def schedule_residual(s: Scenario, tt: Timetable, i: int, j: int) -> float:
    """Amount by which the timetable departs from scheduled-operation dynamics.

    Zero when ``T[i,j]`` equals ``T[i,j-1] + R + D + lam*(T[i,j] - T[i-1,j])``.
    Train 1 has no predecessor; its dwell allowance uses the planned headway.
    """
    if j == 1:
        return 0.0
    T = tt.scheduled_departure
    lam = float(s.delay_rate[i - 1, j - 1])
    ahead_gap = T[i - 1, j - 1] - T[i - 2, j - 1] if i > 1 else s.scheduled_headway
    return float(T[i - 1, j - 2] + s.nominal_run[j - 2] + s.min_dwell + lam * ahead_gap - T[i - 1, j - 1])


def predict_row(s: Scenario, tt: Timetable, state: TrafficState, i: int) -> np.ndarray:
    """Deviations of train ``i``: planned where known, else a zero-control rollout.

    Unplanned predecessor values are held at their last planned deviation.
    """
    n = s.n_stations
    out = np.zeros(n)
    ahead = predict_hold(tt, state, i - 1) if i > 1 else None
    for j in range(1, n + 1):
        if state.planned[i - 1, j - 1]:
            out[j - 1] = _deviation_now(state, tt, i, j)
        elif j == 1:
            out[0] = 0.0
        else:
            lam = float(s.delay_rate[i - 1, j - 1]) if ahead is not None else 0.0
            xa = ahead[j - 1] if ahead is not None else 0.0
            out[j - 1] = deviation_step(out[j - 2], xa, 0.0, schedule_residual(s, tt, i, j), lam)
    return out


def predict_hold(tt: Timetable, state: TrafficState, i: int) -> np.ndarray:
    x = state.actual_departure[i - 1] - tt.scheduled_departure[i - 1]
    last = 0.0
    out = np.empty_like(x)
    for j, v in enumerate(x):
        if not np.isnan(v):
            last = v
        out[j] = last
    return out


def regulation_problem_for(state: TrafficState, tt: Timetable, s: Scenario, i: int, j: int,
                           horizon_trains: int = 2) -> RegulationProblem:
    """Receding horizon for the imminent departure of train ``i`` from ``j``.

    Covers train ``i`` from station ``j`` on and up to ``horizon_trains - 1``
    following trains from their first unplanned station. Future disturbances
    are unknown to the regulator and predicted as zero.
    """
    n = s.n_stations
    trains = list(range(i, min(i + horizon_trains, s.n_trains + 1)))
    rows = len(trains) + 1
    free = np.zeros((rows, n), dtype=bool)
    known = np.zeros((rows, n))
    lam = np.zeros((rows, n))
    residual = np.zeros((rows, n))
    gap = np.zeros((rows, n))
    base = np.zeros(rows)
    if i > 1:
        known[0] = predict_row(s, tt, state, i - 1)
    for r, k in enumerate(trains, start=1):
        planned = state.planned[k - 1]
        known[r] = np.where(planned, state.actual_departure[k - 1] - tt.scheduled_departure[k - 1], 0.0)
        free[r] = ~planned
        lam[r] = s.delay_rate[k - 1]
        for jj in range(1, n + 1):
            residual[r, jj - 1] = schedule_residual(s, tt, k, jj)
            gap[r, jj - 1] = tt.gap(k, jj) if k > 1 else np.inf
        if k > 1 and not planned[0]:
            ahead_dispatch = base[r - 1] if free[r - 1, 0] else known[r - 1, 0]
            base[r] = max(0.0, ahead_dispatch + s.min_headway - tt.gap(k, 1))
    free[1, : j - 1] = False
    return RegulationProblem(
        trains=trains, free=free, known=known, lam=lam, w=np.zeros((rows, n)), residual=residual,
        gap=gap, dispatch_base=base, run_lo=s.run_adjust_min, run_hi=s.run_adjust_max,
        dwell_lo=s.dwell_adjust_min, dwell_hi=s.dwell_adjust_max, a=s.weight_punctuality,
        b=s.weight_regularity, c=s.weight_control, h_min=s.min_headway, has_predecessor=i > 1,
    )


def decide(p: RegulationProblem, max_iter: int = MAX_ITER) -> RegulationDecision:
    """Solve a horizon problem into a decision over its free cells."""
    horizon = [(p.trains[r - 1], j + 1) for r, j in p.cells]
    if p.n_vars == 0:
        return RegulationDecision(horizon, np.zeros(0), np.zeros(0), 0.0, 0, True, True)
    grad0 = p.gradient(np.zeros(p.n_vars))
    if np.all(p.headway_slack(np.zeros(p.n_vars)) >= CONSTRAINT_MARGIN) and np.allclose(grad0, 0.0, atol=1e-12):
        zero = np.zeros(len(p.cells))
        return RegulationDecision(horizon, zero, zero.copy(), p.objective(np.zeros(p.n_vars)), 0, True, True)
    res = solve_problem(p, max_iter=max_iter)
    u1, u2 = p.split(res.u)
    return RegulationDecision(horizon, u1, u2, p.objective(res.u), res.iterations, res.converged, res.feasible)


def solve_regulation(state: TrafficState, timetable: Timetable, s: Scenario, horizon: Tuple[int, int],
                     horizon_trains: int = 2, max_iter: int = MAX_ITER) -> RegulationDecision:
    """Controls for the horizon starting at the imminent event ``horizon=(i, j)``."""
    i, j = horizon
    return decide(regulation_problem_for(state, timetable, s, i, j, horizon_trains), max_iter=max_iter)


@dataclass(frozen=True)
class PlannedDeparture:
    time: float
    run: float
    dwell: float
    u1: float
    u2: float
    postponed: bool


def plan_departure(state: TrafficState, tt: Timetable, s: Scenario, u1: float, u2: float,
                   i: int, j: int) -> PlannedDeparture:
    """Departure time of train ``i`` from ``j`` under the given controls.

    Running time is ``R + u1 + w1``; the dwell includes the boarding-driven
    ``lam * (t - t_ahead)`` term, solved implicitly. A departure closer than
    the minimum headway behind its predecessor is postponed to exactly that
    headway.
    """
    u1 = float(np.clip(u1, s.run_adjust_min[j - 2], s.run_adjust_max[j - 2])) if j > 1 else 0.0
    u2 = float(np.clip(u2, s.dwell_adjust_min, s.dwell_adjust_max))
    _, w2 = s.disturbance(i, j)
    t_ahead = float(state.actual_departure[i - 2, j - 1]) if i > 1 else None
    if i > 1 and np.isnan(t_ahead):
        raise ValueError(f"train {i - 1} has no departure from station {j} yet")
    if j == 1:
        base = 0.0
        if t_ahead is not None:
            base = max(0.0, t_ahead + s.min_headway - tt.at(i, 1))
        t = tt.at(i, 1) + base + u2 + w2
        run = dwell = float("nan")
    else:
        t_prev = float(state.actual_departure[i - 1, j - 2])
        if np.isnan(t_prev):
            raise ValueError(f"train {i} has no departure from station {j - 1} yet")
        w1, _ = s.disturbance(i, j - 1)
        lam = float(s.delay_rate[i - 1, j - 1])
        run = float(s.nominal_run[j - 2]) + u1 + w1
        if t_ahead is None:
            t = t_prev + run + s.min_dwell + lam * s.scheduled_headway + u2 + w2
        else:
            t = (t_prev + run + s.min_dwell + u2 + w2 - lam * t_ahead) / (1.0 - lam)
    if abs(t - tt.at(i, j)) <= ON_TIME:
        t = tt.at(i, j)
    postponed = False
    if t_ahead is not None and t < t_ahead + s.min_headway:
        t = t_ahead + s.min_headway
        postponed = True
    if j > 1:
        dwell = t - t_prev - run
    return PlannedDeparture(t, run, dwell, u1, u2, postponed)


def commit_departure(state: TrafficState, plan: PlannedDeparture, i: int, j: int) -> None:
    idx = (i - 1, j - 1)
    state.actual_departure[idx] = plan.time
    state.actual_run[idx] = plan.run
    state.actual_dwell[idx] = plan.dwell
    state.u1[idx] = plan.u1
    state.u2[idx] = plan.u2
    state.postponed[idx] = plan.postponed


def execute_departure(state: TrafficState, timetable: Timetable, s: Scenario,
                      decision: RegulationDecision, i: int, j: int) -> TrafficState:
    """Apply the decision's controls for ``(i, j)`` and record the departure.

    Returns a new state; the input is left untouched.
    """
    u1, u2 = decision.controls_for(i, j)
    new = state.copy()
    plan = plan_departure(new, timetable, s, u1, u2, i, j)
    commit_departure(new, plan, i, j)
    new.executed[i - 1, j - 1] = True
    new.deviation[i - 1, j - 1] = plan.time - timetable.at(i, j)
    return new


def apply_headway_shift(state: TrafficState, timetable: Timetable, old_h: float, new_h: float,
                        ref_event: Tuple[int, int], min_headway: float):
    """Re-space the timetable behind ``ref_event`` and hand deviations over.

    Returns ``(new_timetable, pending)`` where ``pending`` maps every
    not-yet-executed ``(i, j)`` of later trains to its deviation estimate
    against the new timetable: ``x + T_old - T_new``. For the train right
    behind the anchor this is the familiar ``t - T + old_h - new_h``; each
    further train picks up one more ``old_h - new_h``.
    """
    if new_h < min_headway:
        raise ValueError(f"headway {new_h:g} s is below the minimum {min_headway:g} s")
    anchor, _ = ref_event
    new_tt = timetable.respaced(anchor, new_h)
    old_T, new_T = timetable.scheduled_departure, new_tt.scheduled_departure
    pending = {}
    m, n = old_T.shape
    for i in range(anchor + 1, m + 1):
        for j in range(1, n + 1):
            if state.executed[i - 1, j - 1]:
                continue
            t_est = state.actual_departure[i - 1, j - 1]
            x_old = 0.0 if np.isnan(t_est) else t_est - old_T[i - 1, j - 1]
            pending[(i, j)] = float(x_old + old_T[i - 1, j - 1] - new_T[i - 1, j - 1])
    return new_tt, pending
