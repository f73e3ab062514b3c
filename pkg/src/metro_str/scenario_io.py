"""Scenario files, run configuration and trace output.

Scenario files are JSON with ``"version": "str_scenario_v1"``; the layout is
documented in ``docs/scenario_schema.md``. Per-(train, station) rates may be
given as full ``n_trains x n_stations`` arrays or as piecewise-constant
time bands keyed on each train's scheduled first departure (seconds after
the first train's).

Every writer is deterministic: keys are sorted, floats are written in
shortest round-trip form and line endings are ``\\n``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from metro_str.engine import TRACE_COLUMNS, ComparisonReport, EventTrace, RunOptions
from metro_str.model_core import (
    DEFAULT_KAPPA_B,
    DEFAULT_LAMBDA_MAX,
    RevertPolicy,
    Scenario,
    ScenarioError,
    delay_rate_from_demand,
    run_bounds_from_fractions,
    validate_scenario,
)

SCENARIO_VERSION = "str_scenario_v1"
BUNDLED = ("beijing_line9_synthetic",)
OUTPUT_ENV = "STR_OUTPUT_DIR"
MODES = ("str", "fixed", "compare")
TRACE_FORMATS = ("csv", "jsonl")


# ---------------------------------------------------------------- loading


def _require(doc: Dict[str, Any], key: str, where: str = "") -> Any:
    if key not in doc:
        raise ScenarioError(f"missing key '{where}{key}'")
    return doc[key]


def _number(value: Any, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"key '{key}': expected a number, got {value!r}")
    return float(value)


def _integer(value: Any, key: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"key '{key}': expected an integer, got {value!r}")
    return value


def _vector(value: Any, key: str, length: int) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"key '{key}': expected a list of numbers") from None
    if arr.shape != (length,):
        raise ScenarioError(f"dimension mismatch for '{key}': expected length {length}, got shape {arr.shape}")
    return arr


def _grid(value: Any, key: str, m: int, n: int, headway: float) -> np.ndarray:
    """Full ``m x n`` array, or a band definition expanded per train."""
    if isinstance(value, dict):
        out = np.tile(_vector(_require(value, "default", f"{key}."), f"{key}.default", n), (m, 1))
        offsets = np.arange(m) * headway
        for b, band in enumerate(value.get("bands", [])):
            where = f"{key}.bands[{b}]"
            if not isinstance(band, dict):
                raise ScenarioError(f"key '{where}': expected an object")
            start = _number(_require(band, "start", where + "."), where + ".start")
            end = _number(_require(band, "end", where + "."), where + ".end")
            if end <= start:
                raise ScenarioError(f"key '{where}': end must be after start")
            rates = _vector(_require(band, "values", where + "."), where + ".values", n)
            out[(offsets >= start) & (offsets < end)] = rates
        return out
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"key '{key}': expected an array of numbers or a band object") from None
    if arr.shape != (m, n):
        raise ScenarioError(f"dimension mismatch for '{key}': expected {m}x{n}, got shape {arr.shape}")
    return arr


def _delay_rate(value: Any, alpha: np.ndarray, lambda_max: float) -> np.ndarray:
    if isinstance(value, dict):
        model = value.get("model")
        if model != "demand":
            raise ScenarioError(f"key 'delay_rate.model': unknown model {model!r}")
        kappa = _number(value.get("kappa_b", DEFAULT_KAPPA_B), "delay_rate.kappa_b")
        cap = _number(value.get("lambda_max", lambda_max), "delay_rate.lambda_max")
        return delay_rate_from_demand(alpha, kappa, cap)
    m, n = alpha.shape
    return _grid(value, "delay_rate", m, n, 0.0)


def _disturbances(value: Any) -> Dict:
    out = {}
    if not isinstance(value, list):
        raise ScenarioError("key 'disturbances': expected a list")
    for d, item in enumerate(value):
        where = f"disturbances[{d}]"
        if not isinstance(item, dict):
            raise ScenarioError(f"key '{where}': expected an object")
        i = _integer(_require(item, "train", where + "."), where + ".train")
        j = _integer(_require(item, "station", where + "."), where + ".station")
        w1 = _number(item.get("run", 0.0), where + ".run")
        w2 = _number(item.get("dwell", 0.0), where + ".dwell")
        if (i, j) in out:
            raise ScenarioError(f"key '{where}': duplicate disturbance for train {i} station {j}")
        out[(i, j)] = (w1, w2)
    return out


def scenario_from_dict(doc: Dict[str, Any]) -> Scenario:
    """Build and validate a Scenario from a parsed scenario document."""
    if not isinstance(doc, dict) or doc.get("version") != SCENARIO_VERSION:
        found = doc.get("version") if isinstance(doc, dict) else None
        raise ScenarioError(f"unsupported scenario version {found!r} (expected {SCENARIO_VERSION!r})")
    n = _integer(_require(doc, "n_stations"), "n_stations")
    m = _integer(_require(doc, "n_trains"), "n_trains")
    if n < 2 or m < 2:
        raise ScenarioError("n_stations and n_trains must be >= 2")
    headway = _number(_require(doc, "scheduled_headway"), "scheduled_headway")
    runs = _vector(_require(doc, "nominal_run"), "nominal_run", n - 1)
    alpha = _grid(_require(doc, "arrival_rate"), "arrival_rate", m, n, headway)
    beta = _grid(_require(doc, "alight_fraction"), "alight_fraction", m, n, headway)
    lambda_max = _number(doc.get("lambda_max", DEFAULT_LAMBDA_MAX), "lambda_max")
    lam = _delay_rate(_require(doc, "delay_rate"), alpha, lambda_max)

    pfm = doc.get("weights_pfm", {})
    tom = doc.get("weights_tom", {})
    bounds = doc.get("control_bounds", {})
    if "run_fraction" in bounds and "run_seconds" in bounds:
        raise ScenarioError("key 'control_bounds': give run_fraction or run_seconds, not both")
    if "run_seconds" in bounds:
        rs = bounds["run_seconds"]
        run_lo = _vector(_require(rs, "min", "control_bounds.run_seconds."), "control_bounds.run_seconds.min", n - 1)
        run_hi = _vector(_require(rs, "max", "control_bounds.run_seconds."), "control_bounds.run_seconds.max", n - 1)
    else:
        frac = _vector(bounds.get("run_fraction", [-0.17, 0.53]), "control_bounds.run_fraction", 2)
        run_lo, run_hi = run_bounds_from_fractions(runs, float(frac[0]), float(frac[1]))
    dwell = _vector(bounds.get("dwell_seconds", [-10.0, 10.0]), "control_bounds.dwell_seconds", 2)

    revert = doc.get("revert_policy", {"kind": "never"})
    try:
        policy = RevertPolicy(str(revert.get("kind", "never")), float(revert.get("theta", 1.0)))
    except (AttributeError, TypeError, ValueError) as exc:
        raise ScenarioError(f"key 'revert_policy': {exc}") from None

    upper = doc.get("headway_upper")
    scenario = Scenario(
        n_stations=n,
        n_trains=m,
        nominal_run=runs,
        min_dwell=_number(_require(doc, "min_dwell"), "min_dwell"),
        scheduled_headway=headway,
        min_headway=_number(_require(doc, "min_headway"), "min_headway"),
        arrival_rate=alpha,
        alight_fraction=beta,
        delay_rate=lam,
        train_capacity=_number(_require(doc, "train_capacity"), "train_capacity"),
        platform_capacity=_number(_require(doc, "platform_capacity"), "platform_capacity"),
        weight_wait=_number(pfm.get("wait", 0.5), "weights_pfm.wait"),
        weight_load=_number(pfm.get("load", 1.5), "weights_pfm.load"),
        weight_punctuality=_number(tom.get("punctuality", 1.0), "weights_tom.punctuality"),
        weight_regularity=_number(tom.get("regularity", 1.0), "weights_tom.regularity"),
        weight_control=_number(tom.get("control", 1.0), "weights_tom.control"),
        run_adjust_min=run_lo,
        run_adjust_max=run_hi,
        dwell_adjust_min=float(dwell[0]),
        dwell_adjust_max=float(dwell[1]),
        headway_upper=None if upper is None else _number(upper, "headway_upper"),
        disturbances=_disturbances(doc.get("disturbances", [])),
        revert_policy=policy,
        lambda_max=lambda_max,
        name=str(doc.get("name", "scenario")),
    )
    return validate_scenario(scenario)


def resolve_scenario_path(name_or_path: str) -> Path:
    """A file path, or the name of a scenario shipped with the package."""
    path = Path(name_or_path)
    if path.is_file():
        return path
    stem = name_or_path[:-5] if name_or_path.endswith(".json") else name_or_path
    if stem in BUNDLED:
        return Path(str(resources.files("metro_str") / "data" / f"{stem}.json"))
    raise ScenarioError(f"scenario file not found: {name_or_path}")


def load_scenario(path) -> Scenario:
    """Parse, expand and validate a scenario file (or bundled scenario name)."""
    p = resolve_scenario_path(str(path))
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {p}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    return scenario_from_dict(doc)


def scenario_to_dict(s: Scenario) -> Dict[str, Any]:
    """Fully expanded document; loading it back reproduces ``s`` exactly."""
    doc: Dict[str, Any] = {
        "version": SCENARIO_VERSION,
        "name": s.name,
        "n_stations": s.n_stations,
        "n_trains": s.n_trains,
        "nominal_run": s.nominal_run.tolist(),
        "min_dwell": s.min_dwell,
        "scheduled_headway": s.scheduled_headway,
        "min_headway": s.min_headway,
        "headway_upper": s.headway_upper,
        "train_capacity": s.train_capacity,
        "platform_capacity": s.platform_capacity,
        "arrival_rate": s.arrival_rate.tolist(),
        "alight_fraction": s.alight_fraction.tolist(),
        "delay_rate": s.delay_rate.tolist(),
        "lambda_max": s.lambda_max,
        "weights_pfm": {"wait": s.weight_wait, "load": s.weight_load},
        "weights_tom": {"punctuality": s.weight_punctuality, "regularity": s.weight_regularity,
                        "control": s.weight_control},
        "control_bounds": {
            "run_seconds": {"min": s.run_adjust_min.tolist(), "max": s.run_adjust_max.tolist()},
            "dwell_seconds": [s.dwell_adjust_min, s.dwell_adjust_max],
        },
        "disturbances": [{"train": i, "station": j, "run": w[0], "dwell": w[1]}
                         for (i, j), w in sorted(s.disturbances.items())],
        "revert_policy": {"kind": s.revert_policy.kind, "theta": s.revert_policy.theta},
    }
    return doc


def save_scenario(s: Scenario, path) -> Path:
    path = Path(path)
    _write_text(path, json.dumps(scenario_to_dict(s), indent=1, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------- run config


@dataclass
class RunConfig:
    scenario_path: str
    mode: str = "str"
    output_dir: Optional[str] = None
    t0: float = 0.0
    trace_format: str = "csv"
    options: RunOptions = field(default_factory=RunOptions)
    seed: Optional[int] = None  # reserved; the model is deterministic

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.trace_format not in TRACE_FORMATS:
            raise ValueError(f"trace_format must be one of {TRACE_FORMATS}, got {self.trace_format!r}")
        if self.output_dir is None:
            self.output_dir = os.environ.get(OUTPUT_ENV, "str_output")

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
        return out


# ---------------------------------------------------------------- writing


def _write_text(path: Path, text: str) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if v == 0.0:
        return "0"  # folds -0.0
    return repr(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _json_text(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _csv_write(path: Path, header: Sequence[str], rows) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from None


def trace_summary(trace: EventTrace) -> Dict[str, Any]:
    return {
        "mode": trace.mode,
        "scenario": trace.scenario_name,
        "t0": trace.t0,
        "metrics": dict(trace.summary),
        "headway_changes": [
            {"event_index": c.event_index, "train": c.at[0], "station": c.at[1],
             "old_headway": c.old_headway, "new_headway": c.new_headway, "reason": c.reason}
            for c in trace.headway_changes],
        "skipped_episodes": trace.skipped_episodes,
        "nonconverged_decisions": trace.nonconverged_decisions,
    }


def write_trace(trace: EventTrace, config: RunConfig, prefix: Optional[str] = None) -> List[Path]:
    """Event table, summary JSON and PFM curve samples for one run."""
    out = config.output_path()
    stem = prefix or f"{trace.scenario_name}_{trace.mode.lower()}"
    paths = []
    if config.trace_format == "csv":
        path = out / f"{stem}_trace.csv"
        _csv_write(path, TRACE_COLUMNS, (r.row() for r in trace.records))
    else:
        path = out / f"{stem}_trace.jsonl"
        lines = [json.dumps(dict(zip(TRACE_COLUMNS, _jsonable(list(r.row())))), sort_keys=False)
                 for r in trace.records]
        _write_text(path, "".join(line + "\n" for line in lines))
    paths.append(path)

    path = out / f"{stem}_summary.json"
    _write_text(path, _json_text(trace_summary(trace)))
    paths.append(path)

    path = out / f"{stem}_pfm_curves.csv"
    rows = []
    for n, ep in enumerate(trace.episodes, start=1):
        for h, f in zip(ep.curve_h, ep.curve_F):
            rows.append((n, ep.trigger[0], ep.trigger[1], ep.old_headway, ep.new_headway, int(ep.applied), h, f))
    _csv_write(path, ("episode", "trigger_i", "trigger_j", "old_headway", "new_headway", "applied", "h", "F"), rows)
    paths.append(path)
    return paths


def write_comparison(report: ComparisonReport, config: RunConfig) -> List[Path]:
    """Both mode outputs, the per-``k`` series and a delta summary."""
    paths = write_trace(report.str_trace, config) + write_trace(report.fixed_trace, config)
    out = config.output_path()
    name = report.str_trace.scenario_name
    ks = report.series["k"]["k"]
    header = ["k"]
    columns = [[int(k) for k in ks]]
    for mode in ("STR", "FIXED", "delta"):
        for key in sorted(report.series[mode]):
            header.append(f"{mode.lower()}_{key}")
            columns.append(report.series[mode][key])
    path = out / f"{name}_compare_series.csv"
    _csv_write(path, header, zip(*columns))
    paths.append(path)
    path = out / f"{name}_compare_summary.json"
    _write_text(path, _json_text({
        "scenario": name,
        "deltas": report.deltas,
        "recovery": report.recovery,
        "str": report.str_trace.summary,
        "fixed": report.fixed_trace.summary,
    }))
    paths.append(path)
    return paths
