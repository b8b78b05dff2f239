"""JSON fit configuration mirroring :class:`Hyperparams`.

All five gammas must be given explicitly; every other field falls back to
its default. Unknown keys are rejected so typos do not pass silently.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .archive import read_json
from .errors import ParameterError, SchemaError
from .model import Hyperparams, TraceSolverParams

REQUIRED = ("gamma1", "gamma2", "gamma3", "gamma4", "gamma5")

_TYPES = {
    "nonneg_components": bool,
    "nonneg_traces": bool,
    "lds_enabled": bool,
    "extrapolate": bool,
    "max_outer_iters": int,
    "lds_inner_iters": int,
    "cd_max_sweeps": int,
    "init_iters": int,
    "assignment_probe_iters": int,
    "max_assignment_probes": int,
    "reseed_every": int,
    "reseed_rounds": int,
    "seed": int,
}


def _coerce(key: str, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise SchemaError(f"config field {key!r} must be true or false")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(f"config field {key!r} must be a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise SchemaError(f"config field {key!r} must be an integer")
        return int(value)
    return float(value)


def hyperparams_from_dict(doc: dict) -> Hyperparams:
    if not isinstance(doc, dict):
        raise SchemaError("config must be a JSON object")
    missing = [g for g in REQUIRED if g not in doc]
    if missing:
        raise ParameterError(f"config is missing required field(s): {', '.join(missing)}")
    known = {f.name for f in dataclasses.fields(Hyperparams)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise SchemaError(f"unknown config field(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        if key == "trace_solver":
            kwargs[key] = _trace_solver(value)
        elif key == "gamma1_init" and value is None:
            kwargs[key] = None
        else:
            kwargs[key] = _coerce(key, value, _TYPES.get(key, float))
    return Hyperparams(**kwargs).validate()


def _trace_solver(doc) -> TraceSolverParams:
    if not isinstance(doc, dict):
        raise SchemaError("trace_solver must be a JSON object")
    known = {f.name for f in dataclasses.fields(TraceSolverParams)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise SchemaError(f"unknown trace_solver field(s): {', '.join(unknown)}")
    out = {}
    for key, value in doc.items():
        if key == "step_size" and value is None:
            out[key] = None
        else:
            out[key] = _coerce(key, value, int if key == "max_grad_iters" else float)
    return TraceSolverParams(**out)


def load_config(path) -> Hyperparams:
    return hyperparams_from_dict(read_json(Path(path)))


def hyperparams_to_dict(hyper: Hyperparams) -> dict:
    return dataclasses.asdict(hyper)
