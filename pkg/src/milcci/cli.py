"""Command-line entry point: ``milcci <command> [options]``.

Exit codes: 0 success, 2 schema or parameter error, 3 numeric error,
4 I/O error. Failures print one line ``error[CODE]: message`` on stderr.
Every run leaves a ``run.json`` next to its main output.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from importlib import metadata
from pathlib import Path
from typing import Optional

import numpy as np

from . import archive
from .config import hyperparams_to_dict, load_config
from .errors import MilcciError, NumericError, ParameterError, SchemaError, StorageError
from .evaluate import NULLS, information_criteria, match_and_score, reconstruction_metrics, validate
from .fitting import fit
from .graph import build_graphs
from .model import ModelState
from .synth import SynthParams, generate

log = logging.getLogger("milcci")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ParameterError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="milcci", description="Multi-label sparse component decomposition.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic dataset and its ground truth")
    p.add_argument("--preset", choices=("paper", "desk"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("graph", help="dump the label similarity matrices as CSV")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("fit", help="fit a model to a dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path, help="JSON hyperparameters")

    p = sub.add_parser("eval", help="score a fitted model against ground truth")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--truth", required=True, type=Path,
                   help="dataset directory with a truth/ archive, or a truth archive")
    p.add_argument("--data", type=Path, help="dataset for reconstruction metrics")

    p = sub.add_parser("validate", help="leave-one-out, Shapley and permutation tests")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--nulls", default="all", help=f"'all' or a comma list of {', '.join(NULLS)}")
    p.add_argument("--n-perm", type=_positive_int, default=1000)
    p.add_argument("--n-coalitions", type=_positive_int, default=500)
    p.add_argument("--exact-shapley", action="store_true",
                   help="enumerate all coalitions instead of sampling")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("render", help="write SVG heatmaps of components and traces")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--max-trials", type=_positive_int, default=4)
    return parser


# -- commands ---------------------------------------------------------------


def cmd_generate(args) -> dict:
    params = SynthParams.preset(args.preset, seed=args.seed)
    trials, truth = generate(params)
    archive.save_dataset(trials, args.out)
    state = ModelState(truth.categories, truth.components, truth.traces, truth.labels, truth.trial_ids)
    archive.save_model(state, args.out / "truth", channel_names=list(trials.channel_names))
    print(f"wrote {trials.n_trials} trials to {args.out}")
    return {"n_trials": trials.n_trials, "n_channels": trials.n_channels}


def cmd_graph(args) -> dict:
    trials = archive.load_dataset(args.data)
    for g in build_graphs(trials.categories):
        cat = g.category
        lines = ["," + ",".join(cat.values)]
        for value, row in zip(cat.values, g.weights):
            lines.append(value + "," + ",".join(format(float(x), ".17g") for x in row))
        text = "\n".join(lines) + "\n"
        archive.atomic_write_text(args.out / f"graph_{cat.name}.csv", text)
        print(f"# {cat.name}\n{text}", end="")
    return {}


def _fit_metrics(report, trials) -> dict:
    state = report.state
    return {
        "final_objective": report.final_objective,
        "iterations": report.iters,
        "converged": bool(state.converged),
        "noise_variance_estimate": state.noise_variance_estimate,
        "reconstruction": reconstruction_metrics(state, trials),
        "information_criteria": information_criteria(state, trials),
        "warnings": report.warnings,
    }


def cmd_fit(args) -> dict:
    hyper = load_config(args.config)
    trials = archive.load_dataset(args.data)
    config = hyperparams_to_dict(hyper)
    names = list(trials.channel_names)

    def progress(it, obj, secs):
        log.info("iteration %d objective %.10g (%.2fs)", it, obj, secs)

    try:
        report = fit(trials, hyper, callback=progress)
    except NumericError as exc:
        last = getattr(exc, "last_state", None)
        if last is not None:
            archive.save_model(last, args.out, config, {"aborted": str(exc)}, names)
        raise
    metrics = _fit_metrics(report, trials)
    archive.save_model(report.state, args.out, config, metrics, names)
    print(f"objective {report.final_objective:.10g} after {report.iters} iterations")
    return {"seed": hyper.seed}


def _truth_dir(path: Path) -> Path:
    if (path / archive.MODEL_META).is_file():
        return path
    if (path / "truth" / archive.MODEL_META).is_file():
        return path / "truth"
    raise StorageError(f"no ground-truth archive at {path} or {path / 'truth'}")


def cmd_eval(args) -> dict:
    est = archive.load_model(args.model)
    truth = archive.load_model(_truth_dir(args.truth))
    if est.trial_ids != truth.trial_ids:
        raise SchemaError("model and truth cover different trials")
    result = match_and_score(est, truth).to_dict()
    if args.data is not None:
        result["reconstruction"] = reconstruction_metrics(est, archive.load_dataset(args.data))
    path = args.model / "metrics.json"
    metrics = archive.read_json(path) if path.is_file() else {}
    metrics["evaluation"] = result
    archive.write_json(path, metrics)
    print(json.dumps(result, indent=2))
    return {}


def cmd_validate(args) -> dict:
    if args.nulls == "all":
        nulls = NULLS
    else:
        nulls = tuple(n.strip() for n in args.nulls.split(",") if n.strip())
        unknown = sorted(set(nulls) - set(NULLS))
        if unknown or not nulls:
            raise ParameterError(f"unknown null(s) {unknown}; choose from {', '.join(NULLS)}")
    state = archive.load_model(args.model)
    trials = archive.load_dataset(args.data)
    if state.trial_ids != [t.id for t in trials.trials]:
        raise SchemaError("model and dataset cover different trials")
    n_coal = None if args.exact_shapley else args.n_coalitions
    report = validate(state, trials, args.n_perm, n_coal, args.seed, nulls)
    doc = report.to_dict()
    archive.write_json(args.model / "validation.json", doc)
    print(json.dumps(doc["p_values"], indent=2))
    return {"seed": args.seed}


def cmd_render(args) -> dict:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    state = archive.load_model(args.model)
    args.out.mkdir(parents=True, exist_ok=True)
    written = []
    for k, cat in enumerate(state.categories):
        tensor = state.components[k]
        fig, axes = plt.subplots(1, cat.size, figsize=(1.2 + 1.4 * cat.size, 4), squeeze=False)
        vmax = float(np.abs(tensor).max()) or 1.0
        for i, value in enumerate(cat.values):
            ax = axes[0, i]
            ax.imshow(tensor[:, :, i], aspect="auto", cmap="RdBu_r", vmin=-vmax, vmax=vmax,
                      interpolation="nearest")
            ax.set_title(f"{cat.name}={value}", fontsize=8)
            ax.set_xlabel("component")
            if i == 0:
                ax.set_ylabel("channel")
        fig.tight_layout()
        path = args.out / f"components_{cat.name}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path.name)
    for m in range(min(args.max_trials, len(state.traces))):
        fig, ax = plt.subplots(figsize=(6, 2.5))
        for j, row in enumerate(state.traces[m]):
            ax.plot(row, lw=1, label=f"c{j}")
        ax.set_title(f"trial {state.trial_ids[m]}", fontsize=9)
        ax.set_xlabel("time")
        ax.legend(fontsize=6, ncol=4)
        fig.tight_layout()
        path = args.out / f"traces_{state.trial_ids[m]}.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(path.name)
    print("\n".join(written))
    return {"files": written}


COMMANDS = {
    "generate": (cmd_generate, "out"),
    "graph": (cmd_graph, "out"),
    "fit": (cmd_fit, "out"),
    "eval": (cmd_eval, "model"),
    "validate": (cmd_validate, "model"),
    "render": (cmd_render, "out"),
}


def _versions() -> dict:
    out = {"python": platform.python_version(), "numpy": np.__version__}
    for dist in ("scipy", "artifact"):
        try:
            out[dist] = metadata.version(dist)
        except metadata.PackageNotFoundError:
            out[dist] = None
    return out


def _write_run(args, argv, started, status, extra) -> None:
    target = getattr(args, COMMANDS[args.command][1])
    if not Path(target).is_dir():
        return
    doc = {
        "command": args.command,
        "argv": list(argv),
        "arguments": {k: str(v) if isinstance(v, Path) else v for k, v in vars(args).items()},
        "seed": getattr(args, "seed", None),
        "versions": _versions(),
        "wall_time_s": time.perf_counter() - started,
        "status": status,
    }
    doc.update(extra)
    path = Path(target) / "run.json"
    try:
        # eval and validate share the model directory with fit; keep every record
        runs = []
        if path.is_file():
            try:
                runs = list(archive.read_json(path).get("runs", []))
            except (MilcciError, AttributeError):
                runs = []
        archive.write_json(path, {"runs": runs + [doc]})
    except StorageError as exc:
        log.warning("could not write run.json: %s", exc)


def main(argv: Optional[list[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    started = time.perf_counter()
    args = None
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        extra = COMMANDS[args.command][0](args) or {}
        _write_run(args, argv, started, "ok", extra)
        return 0
    except MilcciError as exc:
        err, code = exc, exc.exit_code
    except OSError as exc:
        err, code = StorageError(str(exc)), 4
    message = " ".join(str(err).split())
    print(f"error[{err.code}]: {message}", file=sys.stderr)
    if args is not None:
        _write_run(args, argv, started, "error", {"error": message, "exit_code": code})
    return code


if __name__ == "__main__":
    sys.exit(main())
