"""On-disk formats: dataset directories (manifest + CSV) and model archives.

Matrices are CSV with one row per matrix row and 17 significant digits, so
every finite double round-trips exactly. Empty cells mark missing data.
Every file is written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatVersionError, SchemaError, StorageError
from .model import CategorySpec, Label, ModelState, Trial, TrialSet

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
MODEL_META = "model.json"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        if isinstance(exc, OSError):
            raise StorageError(f"cannot write {path}: {exc}") from exc
        raise


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False, allow_nan=True) + "\n")


def read_json(path):
    path = Path(path)
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise StorageError(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc


def format_matrix(values: np.ndarray, mask: Optional[np.ndarray] = None) -> str:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    buf = io.StringIO()
    for r, row in enumerate(values):
        cells = [format(float(v), ".17g") for v in row]
        if mask is not None:
            cells = [c if mask[r, j] else "" for j, c in enumerate(cells)]
        buf.write(",".join(cells))
        buf.write("\n")
    return buf.getvalue()


def write_matrix(path, values, mask=None) -> None:
    atomic_write_text(path, format_matrix(values, mask))


def read_matrix(path, allow_missing: bool = False) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Parse a numeric CSV; returns (values, mask) with mask None when nothing is missing."""
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"missing matrix file {path}")
    rows, masks = [], []
    try:
        with open(path, newline="") as fh:
            for lineno, cells in enumerate(csv.reader(fh), start=1):
                if not cells:
                    continue
                vals, obs = [], []
                for col, cell in enumerate(cells, start=1):
                    cell = cell.strip()
                    if cell == "":
                        if not allow_missing:
                            raise SchemaError(f"{path}:{lineno}: empty cell in column {col}")
                        vals.append(0.0)
                        obs.append(False)
                        continue
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise SchemaError(
                            f"{path}:{lineno}: non-numeric cell {cell!r} in column {col}"
                        ) from None
                    obs.append(True)
                if rows and len(vals) != len(rows[0]):
                    raise SchemaError(
                        f"{path}:{lineno}: ragged row ({len(vals)} cells, expected {len(rows[0])})"
                    )
                rows.append(vals)
                masks.append(obs)
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: empty matrix file")
    values = np.array(rows, dtype=float)
    mask = np.array(masks, dtype=bool)
    return values, (None if mask.all() else mask)


# -- datasets ---------------------------------------------------------------


def category_to_dict(cat: CategorySpec) -> dict:
    out = {
        "name": cat.name,
        "kind": cat.kind,
        "values": list(cat.values),
        "n_components": cat.n_components,
    }
    if cat.bandwidth is not None:
        out["bandwidth"] = cat.bandwidth
    if cat.free_variants:
        out["free_variants"] = sorted(cat.free_variants)
    return out


def category_from_dict(d: dict) -> CategorySpec:
    try:
        return CategorySpec(
            name=str(d["name"]),
            values=tuple(str(v) for v in d["values"]),
            n_components=int(d.get("n_components", 1)),
            kind=str(d.get("kind", "categorical")),
            bandwidth=None if d.get("bandwidth") is None else float(d["bandwidth"]),
            free_variants=frozenset(int(i) for i in d.get("free_variants", ())),
        )
    except KeyError as exc:
        raise SchemaError(f"category entry is missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"bad category entry {d!r}: {exc}") from None


def _safe_name(token: str) -> str:
    if not token or any(ch in token for ch in "/\\\0") or token in (".", ".."):
        raise SchemaError(f"{token!r} cannot be used in a file name")
    return token


def save_dataset(trials: TrialSet, path) -> Path:
    """Write a manifest and one CSV per trial.

    Data that already went through its preprocessing is stored as is and
    declared with preprocess "none", so loading it back does not apply the
    nonlinearity twice.
    """
    path = Path(path)
    entries = []
    for t in trials.trials:
        rel = f"trials/{_safe_name(t.id)}.csv"
        write_matrix(path / rel, t.data, t.mask)
        entries.append({"id": t.id, "file": rel, "label": t.label.tokens(trials.categories)})
    write_json(
        path / MANIFEST,
        {
            "format_version": FORMAT_VERSION,
            "n_channels": trials.n_channels,
            "channel_names": list(trials.channel_names),
            "categories": [category_to_dict(c) for c in trials.categories],
            "preprocess": "none" if trials.preprocessed else trials.preprocess,
            "trials": entries,
        },
    )
    return path


def load_dataset(path) -> TrialSet:
    """Read ``manifest.json`` and its trial CSVs; applies the declared preprocessing."""
    path = Path(path)
    man = read_json(path / MANIFEST)
    if not isinstance(man, dict):
        raise SchemaError(f"{path / MANIFEST}: manifest must be a JSON object")
    version = man.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path / MANIFEST}: unsupported format_version {version!r}")
    try:
        categories = [category_from_dict(c) for c in man["categories"]]
        n_channels = int(man["n_channels"])
        entries = man["trials"]
    except KeyError as exc:
        raise SchemaError(f"{path / MANIFEST}: missing field {exc.args[0]!r}") from None
    trials = []
    for e in entries:
        try:
            file, tid, tokens = e["file"], str(e["id"]), e["label"]
        except KeyError as exc:
            raise SchemaError(f"{path / MANIFEST}: trial entry missing {exc.args[0]!r}") from None
        data, mask = read_matrix(path / file, allow_missing=True)
        if data.shape[0] != n_channels:
            raise SchemaError(f"{path / file}: {data.shape[0]} rows, expected {n_channels} channels")
        try:
            label = Label.from_tokens(categories, [str(x) for x in tokens])
        except SchemaError as exc:
            raise SchemaError(f"{path / MANIFEST}: trial {tid!r}: {exc}") from None
        trials.append(Trial(data, label, tid, mask))
    ts = TrialSet(
        categories,
        trials,
        man.get("channel_names"),
        str(man.get("preprocess", "none")),
    )
    return ts.apply_preprocess()


# -- model archives ---------------------------------------------------------


def component_file(cat: CategorySpec, value: str) -> str:
    return f"A_{_safe_name(cat.name)}_{_safe_name(value)}.csv"


def save_model(
    state: ModelState,
    path,
    config: Optional[dict] = None,
    metrics: Optional[dict] = None,
    channel_names: Optional[list] = None,
) -> Path:
    path = Path(path)
    for k, cat in enumerate(state.categories):
        for i, value in enumerate(cat.values):
            write_matrix(path / component_file(cat, value), state.components[k][:, :, i])
    for m, tid in enumerate(state.trial_ids):
        write_matrix(path / f"phi_{_safe_name(tid)}.csv", state.traces[m])
        if state.transitions is not None:
            write_matrix(path / f"W_{_safe_name(tid)}.csv", state.transitions[m])
    lines = ["iteration,objective"]
    lines += [f"{i},{format(v, '.17g')}" for i, v in enumerate(state.objective_history)]
    atomic_write_text(path / "objective.csv", "\n".join(lines) + "\n")
    if config is not None:
        write_json(path / "config.json", config)
    if metrics is not None:
        write_json(path / "metrics.json", metrics)
    write_json(
        path / MODEL_META,
        {
            "format_version": FORMAT_VERSION,
            "n_channels": state.n_channels,
            "channel_names": channel_names,
            "categories": [category_to_dict(c) for c in state.categories],
            "trials": [
                {"id": tid, "label": lab.tokens(state.categories)}
                for tid, lab in zip(state.trial_ids, state.labels)
            ],
            "has_transitions": state.transitions is not None,
            "converged": bool(state.converged),
            "noise_variance_estimate": state.noise_variance_estimate,
        },
    )
    return path


def load_model(path) -> ModelState:
    path = Path(path)
    meta = read_json(path / MODEL_META)
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path / MODEL_META}: unsupported format_version {version!r}")
    categories = [category_from_dict(c) for c in meta["categories"]]
    n = int(meta["n_channels"])
    components = []
    for cat in categories:
        tensor = np.zeros((n, cat.n_components, cat.size))
        for i, value in enumerate(cat.values):
            a, _ = read_matrix(path / component_file(cat, value))
            if a.shape != (n, cat.n_components):
                raise SchemaError(f"{path / component_file(cat, value)}: shape {a.shape}")
            tensor[:, :, i] = a
        components.append(tensor)
    ids, labels, traces, transitions = [], [], [], []
    for entry in meta["trials"]:
        tid = str(entry["id"])
        ids.append(tid)
        labels.append(Label.from_tokens(categories, entry["label"]))
        traces.append(read_matrix(path / f"phi_{tid}.csv")[0])
        if meta.get("has_transitions"):
            transitions.append(read_matrix(path / f"W_{tid}.csv")[0])
    history = []
    obj_file = path / "objective.csv"
    if obj_file.is_file():
        with open(obj_file, newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            history = [float(row[1]) for row in reader if row]
    state = ModelState(
        categories=categories,
        components=components,
        traces=traces,
        labels=labels,
        trial_ids=ids,
        transitions=transitions if meta.get("has_transitions") else None,
        objective_history=history,
        converged=bool(meta.get("converged", False)),
        noise_variance_estimate=float(meta.get("noise_variance_estimate", 0.0)),
    )
    state.check()
    return state
