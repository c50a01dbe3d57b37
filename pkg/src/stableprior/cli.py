"""Command-line front end.

One binary, subcommand style.  Every subcommand accepts --config FILE
holding a flat JSON object whose keys match the long flag names
(hyphens spelled as underscores); explicit flags override config
values, and unknown config keys are rejected before any work starts.

Exit codes: 0 success, 1 validation failure (bad flags, config, or
input files), 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    constraint_contour,
    kappa_for_axis_radius,
    magnitude_prune,
    sparsity_fraction,
    weight_kde,
)
from .datasets import load_cifar10, make_synthetic, normalize_pair
from .net import Model, load_checkpoint, micro_resnet
from .rng import named_stream
from .stable import QuadratureConfig, StableParams, pdf, sample
from .table import build_table, deserialize, read_header, serialize
from .train import (
    TrainConfig,
    evaluate,
    grid_to_csv,
    laplacian_log_deriv,
    report_to_csv,
    run_experiment_grid,
    train,
)

__all__ = ["main", "CliError"]


class CliError(ValueError):
    """Raised for anything the user can fix; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _fmt(value: float) -> str:
    return repr(float(value))


def _crc_of(blob: bytes) -> int:
    return struct.unpack("<I", blob[-4:])[0]


def _floats(value, key) -> list[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    if isinstance(value, (int, float)):
        return [float(value)]
    try:
        return [float(part) for part in str(value).split(",") if part != ""]
    except ValueError:
        raise CliError(f"{key}: expected comma-separated numbers, got {value!r}")


def _ints(value, key) -> list[int]:
    return [int(v) for v in _floats(value, key)]


def _shape(value) -> tuple[int, ...]:
    dims = tuple(_ints(value, "input_shape"))
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise CliError(f"input_shape must be three positive integers, got {value!r}")
    return dims


def _schedule(eff) -> tuple:
    if eff.get("lr") is not None:
        rate = float(eff["lr"])
        return ((0.0, rate), (1.0, rate))
    knots = eff["lr_schedule"]
    if isinstance(knots, str):
        try:
            knots = json.loads(knots)
        except json.JSONDecodeError:
            raise CliError(f"lr_schedule: not valid JSON: {knots!r}")
    try:
        return tuple((float(f), float(r)) for f, r in knots)
    except (TypeError, ValueError):
        raise CliError(f"lr_schedule must be a list of [fraction, rate] pairs")


def _write(path_or_none, text: str) -> None:
    if path_or_none is None:
        sys.stdout.write(text)
    else:
        Path(path_or_none).write_text(text)


def _require(eff, key):
    if eff.get(key) is None:
        raise CliError(f"--{key.replace('_', '-')} is required")
    return eff[key]


def _stable_params(eff) -> StableParams:
    return StableParams(float(eff["alpha"]), gamma=float(eff["gamma"]),
                        mu=float(eff["mu"]))


def _quad(eff) -> QuadratureConfig:
    return QuadratureConfig(abs_tol=float(eff["abs_tol"]))


def _load_data(eff):
    if eff["data"] == "synthetic":
        shape = _shape(eff["input_shape"])
        tr = make_synthetic(int(eff["n_train"]), int(eff["classes"]), shape,
                            float(eff["difficulty"]), int(eff["data_seed"]),
                            split="train")
        te = make_synthetic(int(eff["n_test"]), int(eff["classes"]), shape,
                            float(eff["difficulty"]), int(eff["data_seed"]),
                            split="test")
        return normalize_pair(tr, te)
    return load_cifar10(eff["data"])


def _train_config(eff) -> TrainConfig:
    return TrainConfig(
        epochs=int(eff["epochs"]),
        batch_size=int(eff["batch_size"]),
        prior_scale_c=float(eff["c"]),
        momentum_m=float(eff["momentum"]),
        dampening_tau=float(eff["dampening"]),
        lr_schedule=_schedule(eff),
        seed=int(eff["seed"]),
        dropout_rate=float(eff["dropout"]),
        augment_flip=bool(eff["flip"]),
        augment_cutout=bool(eff["cutout"]),
        cutout_size=int(eff["cutout_size"]),
    )


def _manifest(command: str, eff, extra: dict) -> str:
    config = {k: v for k, v in eff.items() if k != "out"}
    doc = {"command": command, "version": __version__, "config": config}
    doc.update(extra)
    return json.dumps(doc, sort_keys=True, indent=2, default=str) + "\n"


# ---------------------------------------------------------------- commands


_STABLE_DEFAULTS = {"alpha": 1.5, "gamma": 1.0, "mu": 0.0}

_DATA_DEFAULTS = {
    "data": "synthetic", "n_train": 1000, "n_test": 500, "classes": 10,
    "input_shape": "3,16,16", "difficulty": 1.0, "data_seed": 0,
}

_TRAIN_DEFAULTS = {
    "epochs": 10, "batch_size": 100, "c": 0.0, "momentum": 0.9,
    "dampening": 0.0, "lr": None, "lr_schedule": ((0.0, 0.01), (1.0, 0.01)),
    "seed": 0, "dropout": 0.0, "flip": False, "cutout": False,
    "cutout_size": 8, "hidden": 64,
}

_TABLE_DEFAULTS = {"epsilon": 0.8, "n_grid": 400, "abs_tol": 1e-9}


def cmd_density(eff) -> int:
    points = int(eff["points"])
    if points < 1:
        raise CliError(f"points must be >= 1, got {points}")
    lo, hi = float(eff["lo"]), float(eff["hi"])
    if points > 1 and hi <= lo:
        raise CliError(f"hi must exceed lo, got [{lo}, {hi}]")
    params = _stable_params(eff)
    thetas = np.linspace(lo, hi, points)
    dens = pdf(params, thetas, _quad(eff))
    dens = np.atleast_1d(dens)
    lines = ["theta,density"]
    lines += [f"{_fmt(t)},{_fmt(d)}" for t, d in zip(thetas, dens)]
    _write(eff.get("out"), "\n".join(lines) + "\n")
    return 0


def cmd_sample(eff) -> int:
    n = int(eff["n"])
    if n < 1:
        raise CliError(f"n must be >= 1, got {n}")
    params = _stable_params(eff)
    draws = sample(params, n, named_stream(int(eff["seed"]), "sample"))
    lines = ["draw"] + [_fmt(d) for d in draws]
    _write(eff.get("out"), "\n".join(lines) + "\n")
    return 0


def cmd_table_build(eff) -> int:
    out = _require(eff, "out")
    params = _stable_params(eff)
    table = build_table(params, float(eff["epsilon"]), int(eff["n_grid"]),
                        float(eff["c"]), _quad(eff))
    blob = serialize(table)
    Path(out).write_bytes(blob)
    info = {"path": str(out), "checksum": _crc_of(blob),
            "n_grid": table.n_grid, "delta": table.delta,
            "bytes": len(blob)}
    sys.stdout.write(json.dumps(info, sort_keys=True) + "\n")
    return 0


def cmd_table_inspect(eff) -> int:
    blob = Path(_require(eff, "table")).read_bytes()
    if eff.get("meta"):
        meta = read_header(blob)
        meta["checksum"] = _crc_of(blob)
        _write(eff.get("out"), json.dumps(meta, sort_keys=True) + "\n")
        return 0
    table = deserialize(blob)
    lines = ["k,theta,value"]
    for i, v in enumerate(table.values):
        k = i - table.n_grid
        lines.append(f"{k},{_fmt(k * table.delta)},{_fmt(v)}")
    _write(eff.get("out"), "\n".join(lines) + "\n")
    return 0


def _resolve_prior(eff):
    """(prior object or None, table checksum or None) for a train run."""
    kind = eff["prior"]
    if kind not in ("sas", "laplacian", "none"):
        raise CliError(f"prior must be sas, laplacian, or none, got {kind!r}")
    if kind == "none" or float(eff["c"]) == 0.0:
        return None, None
    if kind == "laplacian":
        return laplacian_log_deriv(float(eff["gamma"])), None
    if eff.get("table"):
        blob = Path(eff["table"]).read_bytes()
        return deserialize(blob), _crc_of(blob)
    table = build_table(_stable_params(eff), float(eff["epsilon"]),
                        int(eff["n_grid"]), 1.0, _quad(eff))
    return table, _crc_of(serialize(table))


def cmd_train(eff) -> int:
    out = Path(_require(eff, "out"))
    train_set, test_set = _load_data(eff)
    shape = tuple(train_set.images.shape[1:])
    prior, checksum = _resolve_prior(eff)
    config = _train_config(eff)
    model = Model(micro_resnet(shape, classes=train_set.class_count,
                               hidden=int(eff["hidden"])), shape, config.seed)
    report = train(model, train_set, test_set, prior, config)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_to_csv(report))
    (out / "checkpoint.bin").write_bytes(report.checkpoint)
    (out / "manifest.json").write_text(
        _manifest("train", eff, {"table_checksum": checksum}))
    return 0


def cmd_grid(eff) -> int:
    out = Path(_require(eff, "out"))
    train_set, test_set = _load_data(eff)
    shape = tuple(train_set.images.shape[1:])
    hidden = int(eff["hidden"])
    classes = train_set.class_count
    base = _train_config(eff)
    quad = _quad(eff)
    checksums = {}

    def model_factory(seed):
        return Model(micro_resnet(shape, classes=classes, hidden=hidden),
                     shape, seed)

    def table_factory(params, epsilon, n_grid):
        table = build_table(params, epsilon, n_grid, 1.0, quad)
        key = f"alpha={params.alpha},gamma={params.gamma}"
        checksums[key] = _crc_of(serialize(table))
        return table

    rows = run_experiment_grid(
        base,
        _floats(eff["alphas"], "alphas"),
        _floats(eff["gammas"], "gammas"),
        _floats(eff["cs"], "cs"),
        _ints(eff["seeds"], "seeds"),
        train_set, test_set, model_factory,
        epsilon=float(eff["epsilon"]), n_grid=int(eff["n_grid"]),
        include_laplacian=bool(eff["laplacian"]),
        sparsity_tau=float(eff["tau"]),
        table_factory=table_factory,
    )
    out.mkdir(parents=True, exist_ok=True)
    (out / "grid.csv").write_text(grid_to_csv(rows))
    (out / "manifest.json").write_text(
        _manifest("grid", eff, {"table_checksums": checksums}))
    return 0


def cmd_prune(eff) -> int:
    out = Path(_require(eff, "out"))
    model = load_checkpoint(Path(_require(eff, "checkpoint")).read_bytes())
    _, test_set = _load_data(eff)
    tau = float(eff["tau"])
    lines = ["fraction,test_accuracy,test_log_likelihood,sparsity"]
    for fraction in _floats(eff["fractions"], "fractions"):
        pruned, _ = magnitude_prune(model, fraction)
        acc, ll = evaluate(pruned, test_set)
        lines.append(",".join([_fmt(fraction), _fmt(acc), _fmt(ll),
                               _fmt(sparsity_fraction(pruned, tau))]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "prune.csv").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(_manifest("prune", eff, {}))
    return 0


def cmd_geometry(eff) -> int:
    out = Path(_require(eff, "out"))
    params = _stable_params(eff)
    radius = float(eff["axis_radius"])
    kappa = kappa_for_axis_radius(params, radius)
    contour = constraint_contour(params, kappa, int(eff["resolution"]))
    lines = ["angle,t1,t2,radius"]
    for angle, (t1, t2) in zip(contour.angles, contour.points[:-1]):
        lines.append(",".join([_fmt(angle), _fmt(t1), _fmt(t2),
                               _fmt(float(np.hypot(t1, t2)))]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "geometry.csv").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(_manifest("geometry", eff, {"kappa": kappa}))
    return 0


def cmd_kde(eff) -> int:
    out = Path(_require(eff, "out"))
    model = load_checkpoint(Path(_require(eff, "checkpoint")).read_bytes())
    points = int(eff["points"])
    if points < 2:
        raise CliError(f"points must be >= 2, got {points}")
    grid = np.linspace(float(eff["lo"]), float(eff["hi"]), points)
    dens = weight_kde(model, float(eff["bandwidth"]), grid)
    lines = ["theta,density"]
    lines += [f"{_fmt(t)},{_fmt(d)}" for t, d in zip(grid, dens)]
    out.mkdir(parents=True, exist_ok=True)
    (out / "kde.csv").write_text("\n".join(lines) + "\n")
    (out / "manifest.json").write_text(_manifest("kde", eff, {}))
    return 0


# ------------------------------------------------------------- wiring


_DEFAULTS = {
    "density": {**_STABLE_DEFAULTS, "lo": -5.0, "hi": 5.0, "points": 11,
                "abs_tol": 1e-9, "out": None},
    "sample": {**_STABLE_DEFAULTS, "n": 1000, "seed": 0, "out": None},
    "table-build": {**_STABLE_DEFAULTS, **_TABLE_DEFAULTS, "c": 1.0, "out": None},
    "table-inspect": {"table": None, "meta": False, "out": None},
    "train": {**_STABLE_DEFAULTS, **_TABLE_DEFAULTS, **_DATA_DEFAULTS,
              **_TRAIN_DEFAULTS, "prior": "sas", "table": None, "out": None},
    "grid": {**_STABLE_DEFAULTS, **_TABLE_DEFAULTS, **_DATA_DEFAULTS,
             **_TRAIN_DEFAULTS, "alphas": "2.0,1.5,1.0,0.5", "gammas": "1.0",
             "cs": "0.0,0.001,0.01", "seeds": "0,1,2", "laplacian": False,
             "tau": 1e-3, "out": None},
    "prune": {**_DATA_DEFAULTS, "checkpoint": None,
              "fractions": "0.0,0.25,0.5,0.75", "tau": 1e-3, "out": None},
    "geometry": {**_STABLE_DEFAULTS, "axis_radius": 1.0, "resolution": 64,
                 "out": None},
    "kde": {"checkpoint": None, "bandwidth": 0.05, "lo": -1.0, "hi": 1.0,
            "points": 201, "out": None},
}

_RUNNERS = {
    "density": cmd_density,
    "sample": cmd_sample,
    "table-build": cmd_table_build,
    "table-inspect": cmd_table_inspect,
    "train": cmd_train,
    "grid": cmd_grid,
    "prune": cmd_prune,
    "geometry": cmd_geometry,
    "kde": cmd_kde,
}

_FLAG_TYPES = {
    "alpha": float, "gamma": float, "mu": float, "lo": float, "hi": float,
    "points": int, "abs_tol": float, "n": int, "seed": int, "epsilon": float,
    "n_grid": int, "c": float, "epochs": int, "batch_size": int,
    "momentum": float, "dampening": float, "lr": float, "dropout": float,
    "cutout_size": int, "hidden": int, "n_train": int, "n_test": int,
    "classes": int, "difficulty": float, "data_seed": int, "tau": float,
    "axis_radius": float, "resolution": int, "bandwidth": float,
}


def _build_parser() -> _Parser:
    parser = _Parser(prog="stableprior",
                     description="Stable-prior training and analysis tools.")
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True,
                                 parser_class=_Parser)
    for name, defaults in _DEFAULTS.items():
        sub = subs.add_parser(name, argument_default=argparse.SUPPRESS)
        sub.add_argument("--config", help="flat JSON config file")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                sub.add_argument(flag, action="store_true")
            elif key in _FLAG_TYPES:
                sub.add_argument(flag, type=_FLAG_TYPES[key])
            else:
                sub.add_argument(flag)
    return parser


def _effective(args: argparse.Namespace) -> dict:
    provided = dict(vars(args))
    command = provided.pop("command")
    defaults = _DEFAULTS[command]
    eff = dict(defaults)
    config_path = provided.pop("config", None)
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config file is not valid JSON: {exc}")
        if not isinstance(doc, dict):
            raise CliError("config file must hold a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise CliError(f"unknown config keys: {', '.join(unknown)}")
        eff.update(doc)
    eff.update(provided)
    return eff


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        eff = _effective(args)
        return _RUNNERS[args.command](eff)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
