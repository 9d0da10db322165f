"""
Scenario orchestration: JSON configs, sweep grids, deterministic worker
pool, CSV/JSON reports.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import pipeline as pl

CSV_COLUMNS = ("scenario_id", "seed", "sweep_value", "ber", "mean_a_err_db", "iterations", "converged", "wall_time_s")


class ConfigError(ValueError):
    """Invalid scenario configuration (CLI exit code 2)."""


class ReportError(OSError):
    """Report could not be written (CLI exit code 3)."""


_NUM = {"type": "number"}
_OPT_NUM = {"type": ["number", "null"]}

SCENARIO_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["id", "seeds"],
    "additionalProperties": False,
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "kind": {"enum": ["single_pol", "dual_pol"]},
        "modulation": {"enum": ["QPSK", "16QAM", "64QAM", "QAM16", "QAM64"]},
        "baud": _NUM,
        "n_symbols": {"type": "integer", "minimum": 1},
        "link": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "length_km": _NUM,
                "ps_per_nm_per_km": _NUM,
                "dispersion_ps_nm": _NUM,
                "pmd_sections": {"type": "integer", "minimum": 1},
                "dgd_total": _NUM,
            },
        },
        "retrieval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": {"oneOf": [_NUM, {"const": "auto"}]},
                "reset_period": {"type": "integer", "minimum": 1},
                "max_escapes": {"type": "integer", "minimum": 0},
                "max_iterations": {"type": ["integer", "null"], "minimum": 1},
                "stop_tolerance": _OPT_NUM,
                "retrieval_dispersion": _NUM,
                "pilot_constraint": {"enum": ["phase_only", "full_field"]},
                "init": {"enum": ["random_uniform_phase", "provided"]},
            },
        },
        "params": {"type": "object"},
        "sweep": {
            "type": "object",
            "required": ["variable", "values"],
            "additionalProperties": False,
            "properties": {
                "variable": {"type": "string"},
                "values": {"type": "array", "minItems": 1},
            },
        },
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string"}, "trace_convergence": {"type": "boolean"}},
        },
    },
}


@dataclass(frozen=True)
class Scenario:
    """A validated experiment grid: ``sweep.values x seeds`` points."""

    id: str
    kind: str
    params: dict
    sweep_variable: str | None
    sweep_values: tuple
    seeds: tuple[int, ...]
    outputs: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def params_type(self) -> type:
        return pl.DualPolParams if self.kind == "dual_pol" else pl.SinglePolParams

    def base_params(self):
        return self.params_type(**self.params)

    def grid(self) -> list[tuple[Any, int]]:
        return [(v, s) for v in self.sweep_values for s in self.seeds]

    def point_params(self, value):
        base = self.base_params()
        if self.sweep_variable is None:
            return base
        return dataclasses.replace(base, **{self.sweep_variable: value})

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        try:
            jsonschema.validate(d, SCENARIO_SCHEMA)
        except jsonschema.ValidationError as e:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"{path}: {e.message}") from None
        kind = d.get("kind", "single_pol")
        ptype = pl.DualPolParams if kind == "dual_pol" else pl.SinglePolParams
        names = {f.name for f in dataclasses.fields(ptype)}
        params: dict[str, Any] = {}
        if "modulation" in d:
            params["modulation"] = d["modulation"]
        if "baud" in d:
            params["baud"] = float(d["baud"])
        if "n_symbols" in d:
            params["n_payload_symbols" if kind == "dual_pol" else "n_symbols"] = d["n_symbols"]
        link = dict(d.get("link", {}))
        if kind == "dual_pol":
            if "length_km" in link or "ps_per_nm_per_km" in link:
                params["link_dispersion"] = link.pop("length_km", 520.0) * link.pop(
                    "ps_per_nm_per_km", pl.ch.SMF_PS_NM_KM)
            if "dispersion_ps_nm" in link:
                params["link_dispersion"] = link.pop("dispersion_ps_nm")
        else:
            if "dispersion_ps_nm" in link:
                raise ConfigError("link/dispersion_ps_nm: single_pol links are set by length_km and ps_per_nm_per_km")
            for k in ("pmd_sections", "dgd_total"):
                if k in link:
                    raise ConfigError(f"link/{k}: not used by single_pol scenarios")
        params.update(link)
        retr = dict(d.get("retrieval", {}))
        if retr.get("epsilon") == "auto":
            if kind == "dual_pol":
                raise ConfigError("retrieval/epsilon: 'auto' is only available for single_pol scenarios")
            retr["epsilon"] = None
        params.update(retr)
        params.update(d.get("params", {}))
        unknown = sorted(set(params) - names)
        if unknown:
            raise ConfigError(f"unknown parameter(s) for {kind}: {', '.join(unknown)}")
        sweep = d.get("sweep")
        var = sweep["variable"] if sweep else None
        values = tuple(sweep["values"]) if sweep else (None,)
        if var is not None and var not in names:
            raise ConfigError(f"sweep/variable: {var!r} is not a {kind} parameter")
        s = cls(d["id"], kind, params, var, values, tuple(d["seeds"]), dict(d.get("outputs", {})), d)
        try:
            for v in values:
                s.point_params(v).frame_spec()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return s

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)


@dataclass
class ResultRow:
    scenario_id: str
    seed: int
    sweep_value: Any
    ber: float
    mean_a_err_db: float
    iterations: int
    converged: Any
    wall_time_s: float
    error: str | None = None
    extra: dict = field(default_factory=dict)

    def csv_fields(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


def _run_point(args) -> ResultRow:
    s, value, seed, trace_dir = args
    p = s.point_params(value)
    info = {"osnr_db": p.osnr_db, "pilot_overhead": p.pilot_overhead, "dispersion_ps_nm": p.retrieval_dispersion,
            "link_dispersion_ps_nm": p.link_dispersion}
    try:
        if s.kind == "dual_pol":
            r = pl.simulate_dual_pol(p, seed, workers=1)
            return ResultRow(s.id, seed, value, r.ber.ber, r.mean_a_err_db, r.iterations, r.converged_fraction,
                             r.wall_time_s, "equalizer diverged" if r.diverged else None,
                             {**info, "converged_fraction": r.converged_fraction, "pdl_trace": r.pdl_trace,
                              "ber_report": r.ber.to_dict()})
        r = pl.simulate_single_pol(p, seed)
        if trace_dir is not None:
            r.report.write_csv(Path(trace_dir) / f"trace_{s.id}_{_slug(value)}_{seed}.csv")
        return ResultRow(s.id, seed, value, r.ber, r.report.mean_a_err_db, r.report.iterations_used,
                         r.report.converged, r.wall_time_s, None,
                         {**info, "converged_fraction": float(r.report.converged)})
    except (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError) as e:
        return ResultRow(s.id, seed, value, math.nan, math.nan, 0, False, 0.0, f"{type(e).__name__}: {e}", info)


def _slug(v) -> str:
    return "none" if v is None else str(v).replace(".", "p").replace("-", "m")


def pool_size() -> int:
    """Worker count: ``PRISM_THREADS`` if set, else 1."""
    try:
        return max(1, int(os.environ.get("PRISM_THREADS", "1")))
    except ValueError:
        return 1


def run_scenario(s: Scenario, workers: int | None = None, trace_dir: str | Path | None = None) -> list[ResultRow]:
    """Run every (sweep value, seed) point; rows come back in config order.

    Each point is a pure function of its parameters and seed, so results do
    not depend on the number of workers or on completion order. Failing
    points are returned with ``error`` set.
    """
    jobs = [(s, v, seed, None if trace_dir is None else str(trace_dir)) for v, seed in s.grid()]
    n = workers or pool_size()
    if n > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(n, len(jobs))) as ex:
            return list(ex.map(_run_point, jobs))
    return [_run_point(j) for j in jobs]


def _fmt(v) -> str:
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def emit_report(rows: list[ResultRow], out_dir: str | Path, scenario: Scenario | None = None,
                stem: str | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (fixed columns) and ``<stem>.json`` (rows plus config)."""
    if not rows:
        raise ValueError("no result rows to report")
    stem = stem or (scenario.id if scenario else rows[0].scenario_id)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{stem}.csv"
        json_path = out / f"{stem}.json"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in rows:
                w.writerow([_fmt(v) for v in r.csv_fields()])
        doc = {
            "scenario": scenario.raw if scenario else None,
            "resolved_params": _jsonable(dataclasses.asdict(scenario.base_params())) if scenario else None,
            "columns": list(CSV_COLUMNS),
            "rows": [_jsonable(dataclasses.asdict(r)) for r in rows],
        }
        json_path.write_text(json.dumps(doc, indent=2, allow_nan=True))
    except OSError as e:
        raise ReportError(f"cannot write report to {out}: {e}") from e
    return csv_path, json_path


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    return x


def summarize(rows: list[ResultRow]) -> list[dict]:
    """Mean BER and A_err per sweep value, in first-seen order."""
    groups: dict[Any, list[ResultRow]] = {}
    for r in rows:
        groups.setdefault(json.dumps(r.sweep_value), []).append(r)
    out = []
    for key, rs in groups.items():
        ok = [r for r in rs if r.error is None]
        out.append({
            "sweep_value": json.loads(key),
            "n_seeds": len(rs),
            "n_failed": len(rs) - len(ok),
            "mean_ber": float(np.mean([r.ber for r in ok])) if ok else math.nan,
            "mean_a_err_db": float(np.mean([r.mean_a_err_db for r in ok])) if ok else math.nan,
        })
    return out


def load_rows(path: str | Path) -> list[ResultRow]:
    """Read rows back from a report (``.json`` or ``.csv``)."""
    p = Path(path)
    try:
        if p.suffix == ".json":
            return [ResultRow(**r) for r in json.loads(p.read_text())["rows"]]
        with open(p, newline="") as fh:
            rows = []
            for r in csv.DictReader(fh):
                rows.append(ResultRow(
                    r["scenario_id"], int(r["seed"]), _parse(r["sweep_value"]), float(r["ber"]),
                    float(r["mean_a_err_db"]), int(r["iterations"]), _parse(r["converged"]), float(r["wall_time_s"])))
            return rows
    except OSError as e:
        raise ReportError(f"cannot read {p}: {e}") from e
    except (KeyError, ValueError, TypeError) as e:
        raise ConfigError(f"{p} is not a result report: {e}") from e


def _parse(s: str):
    if s in ("True", "False"):
        return s == "True"
    if s == "None":
        return None
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s
