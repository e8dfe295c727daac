"""Command-line entry point.

Settings are resolved in layers: built-in defaults, then ``GRW_SEED`` for the
root seed, then a JSON ``--config`` file, then explicit flags. Exit codes:
0 success, 1 a check failed, 2 bad usage or input, 3 training diverged.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, grw, scale_lab, synthgen, trainer
from .seeding import derive_seed

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
SEED_ENV = "GRW_SEED"

log = logging.getLogger("grwsmooth")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


def _data_defaults() -> dict:
    d = dataclasses.asdict(synthgen.DataConfig())
    d.pop("seed")
    return d


def _train_defaults() -> dict:
    d = dataclasses.asdict(trainer.TrainConfig())
    for key in ("grw", "seed"):
        d.pop(key)
    d["lr_backbone"] = list(d["lr_backbone"])
    d["lr_head"] = list(d["lr_head"])
    return d


def default_config() -> dict:
    model = dataclasses.asdict(trainer.ModelConfig())
    model["hidden"] = list(model["hidden"])
    grw_cfg = dataclasses.asdict(grw.GrwConfig())
    grw_cfg.pop("seed")
    return {
        "seed": 0,
        "out": None,
        "grw": grw_cfg,
        "model": model,
        "train": _train_defaults(),
        "data": _data_defaults(),
        "scale": {"t_min": 3, "t_max": 10, "restarts": 20, "steps": 5000},
    }


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Recursive merge that rejects keys ``base`` does not know."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise UsageError(f"config key {path!r} must be an object")
            out[key] = merge_config(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def serialize_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)


def _config_doc(text: str) -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    return doc


def parse_config(text: str) -> dict:
    """Full config from JSON text; missing keys take defaults."""
    return merge_config(default_config(), _config_doc(text))


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# flag dest -> (section, key)
FLAG_KEYS = {
    "T": ("grw", "T"), "alpha": ("grw", "alpha"), "lam": ("grw", "lam"), "k": ("grw", "k"),
    "placement": ("model", "placement"), "hidden": ("model", "hidden"), "d": ("model", "d"),
    "head_layers": ("model", "head_layers"),
    "epochs": ("train", "epochs"), "batch_size": ("train", "batch_size"),
    "n_train": ("data", "n_train"), "n_test": ("data", "n_test"), "frames": ("data", "frames"),
    "n_points": ("data", "n_points"), "noise": ("data", "noise"),
    "t_min": ("scale", "t_min"), "t_max": ("scale", "t_max"),
    "restarts": ("scale", "restarts"), "steps": ("scale", "steps"),
}


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    env = _env_seed()
    if env is not None:
        cfg["seed"] = env
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        cfg = merge_config(cfg, _config_doc(text))
    for dest, (section, key) in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = list(value) if isinstance(value, tuple) else value
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        cfg["out"] = str(args.out)
    return cfg


def build_configs(cfg: dict):
    """Typed configs from a resolved dict. Raises ``UsageError`` on invalid values."""
    try:
        grw_cfg = grw.GrwConfig(seed=derive_seed(cfg["seed"], "grw") % 2 ** 32, **cfg["grw"])
        model_cfg = trainer.ModelConfig(**cfg["model"])
        train_cfg = trainer.TrainConfig(grw=grw_cfg, seed=cfg["seed"], **cfg["train"])
        data_cfg = synthgen.DataConfig(seed=cfg["seed"], **cfg["data"])
        data_cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    return grw_cfg, model_cfg, train_cfg, data_cfg


def _emit_json(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2) + "\n")


def _sig(x: float, digits: int = 12) -> float:
    return float(f"{x:.{digits}g}")


# ---------------------------------------------------------------- commands


def _load_split(path) -> synthgen.DatasetSplit:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"dataset not found: {p}")
    try:
        return synthgen.load_dataset(p)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot read dataset {p}: {exc}") from exc


def cmd_gen_data(args, cfg) -> int:
    *_, data_cfg = build_configs(cfg)
    out = Path(cfg["out"] or "dataset.grwd")
    split = synthgen.gen_dataset(data_cfg)
    synthgen.save_dataset(split, out)
    sidecar = out.with_name(out.name + ".json")
    sidecar.write_text(serialize_config({"data": dataclasses.asdict(data_cfg)}) + "\n", encoding="utf-8")
    _emit_json({"dataset": str(out), "sidecar": str(sidecar),
                "train": len(split.train), "test": len(split.test)})
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    _, model_cfg, train_cfg, _ = build_configs(cfg)
    split = _load_split(args.data)
    run_dir = Path(cfg["out"] or "run")
    try:
        metrics = trainer.train(split, model_cfg, train_cfg)
    except trainer.TrainingDiverged as exc:
        sys.stderr.write(f"error: training diverged: {exc}\n")
        return EXIT_DIVERGED
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    trainer.write_run(run_dir, metrics, model_cfg, train_cfg, resolved=cfg)
    final = metrics.final
    _emit_json({"run_dir": str(run_dir), "test_accuracy": final["test_accuracy"],
                "acc2": final["acc2"], "vel2": final["vel2"]})
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    split = _load_split(args.data)
    ckpt = Path(args.run) / "checkpoint.npz"
    if not ckpt.is_file():
        raise UsageError(f"no checkpoint in {args.run}")
    model, model_cfg = trainer.load_checkpoint(ckpt)
    X, y = split.arrays(split.test)
    ev = trainer.evaluate(model, X, y, model_cfg.placement)
    _emit_json({"accuracy": ev["accuracy"], "acc2": ev["acc2"], "vel2": ev["vel2"]})
    return EXIT_OK


def read_matrix(path) -> np.ndarray:
    """``N×d`` matrix from ``.npy``, JSON (nested list) or comma/space separated text."""
    p = Path(path)
    try:
        if p.suffix == ".npy":
            Z = np.load(p, allow_pickle=False)
        elif p.suffix == ".json":
            Z = np.array(json.loads(p.read_text(encoding="utf-8")), dtype=float)
        else:
            text = p.read_text(encoding="utf-8").replace(",", " ")
            Z = np.array([[float(v) for v in line.split()] for line in text.splitlines() if line.strip()])
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot parse {p}: {exc}") from exc
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    if Z.ndim != 2 or Z.size == 0 or not np.all(np.isfinite(Z)):
        raise UsageError(f"{p} must hold a finite N×d matrix, got shape {Z.shape}")
    return Z


def cmd_loss(args, cfg) -> int:
    grw_cfg, *_ = build_configs(cfg)
    Z = read_matrix(args.input)
    if grw_cfg.T > Z.shape[0]:
        raise UsageError(f"T={grw_cfg.T} exceeds sequence length {Z.shape[0]}")
    br = grw.smooth_loss(Z, grw_cfg)
    doc = {k: _sig(v) for k, v in br.as_dict().items() if k != "ce"}
    doc.update({"T": grw_cfg.T, "alpha": grw_cfg.alpha, "lam": grw_cfg.lam,
                "windows": Z.shape[0] // grw_cfg.T, "enumerated": grw_cfg.enumerates()})
    _emit_json(doc)
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    ts = args.t_values or list(checks.DEFAULT_TS)
    ds = args.d_values or list(checks.DEFAULT_DS)
    try:
        cells = checks.gradcheck_grid(ts, ds, args.draws, args.eps, args.tol, cfg["seed"],
                                      corrupt=args.corrupt_gradient)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    ok = all(c.passed for c in cells)
    _emit_json({"eps": args.eps, "tol": args.tol, "draws": args.draws, "passed": ok,
                "max_rel_err": max(c.max_rel_err for c in cells),
                "cells": [c.as_dict() for c in cells]})
    return EXIT_OK if ok else EXIT_CHECK


def cmd_scale_study(args, cfg) -> int:
    sc = cfg["scale"]
    if not 3 <= sc["t_min"] <= sc["t_max"] <= scale_lab.MAX_T:
        raise UsageError(f"need 3 <= t-min <= t-max <= {scale_lab.MAX_T}")
    rows = scale_lab.scaling_study(sc["t_min"], sc["t_max"], sc["restarts"], sc["steps"], cfg["seed"])
    if cfg["out"]:
        with open(cfg["out"], "w", newline="", encoding="utf-8") as fh:
            scale_lab.write_study_csv(rows, fh)
    else:
        scale_lab.write_study_csv(rows, sys.stdout)
    ratios = [r.ratio for r in rows]
    ok = all(r.lower_bound_ok for r in rows)
    sys.stderr.write(f"ratio min={min(ratios):.6g} max={max(ratios):.6g} "
                     f"max/min={max(ratios) / min(ratios):.6g} lower_bound_ok={str(ok).lower()}\n")
    return EXIT_OK if ok else EXIT_CHECK


def _parse_values(raw: str, axis: str) -> list:
    cast = int if axis == "T" else float
    try:
        return [cast(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad value list {raw!r} for axis {axis}") from None


def cmd_sweep(args, cfg) -> int:
    _, model_cfg, train_cfg, _ = build_configs(cfg)
    split = _load_split(args.data)
    values = _parse_values(args.values, args.axis)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    try:
        rows = trainer.ablation_sweep(split, args.axis, values, model_cfg, train_cfg, seeds)
    except trainer.TrainingDiverged as exc:
        sys.stderr.write(f"error: training diverged: {exc}\n")
        return EXIT_DIVERGED
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = cfg["out"] or "sweep.csv"
    trainer.write_csv(rows, out)
    _emit_json({"csv": str(out), "rows": len(rows)})
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_tuple(raw: str) -> tuple:
    return tuple(int(v) for v in raw.split(","))


def _add_grw(p):
    g = p.add_argument_group("smoothing loss")
    g.add_argument("--T", type=int, help="window length (default 5)")
    g.add_argument("--alpha", type=float, help="speed weight (default 0.5)")
    g.add_argument("--lambda", dest="lam", type=float, help="smoothing weight (default 0.1)")
    g.add_argument("--k", type=int, help="sampled orderings when not enumerating (default 1000)")


def _add_model(p):
    g = p.add_argument_group("model and training")
    g.add_argument("--placement", choices=trainer.PLACEMENTS)
    g.add_argument("--hidden", type=_int_tuple, help="encoder widths, comma separated")
    g.add_argument("--d", type=int, help="embedding width")
    g.add_argument("--head-layers", dest="head_layers", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", dest="batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config; flags override it, it overrides defaults")
    common.add_argument("--seed", type=int, help=f"root seed (default ${SEED_ENV} or 0)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="grwsmooth", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate a rotating-body dataset")
    p.add_argument("--train", dest="n_train", type=int)
    p.add_argument("--test", dest="n_test", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--points", dest="n_points", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--out", help="dataset path (default dataset.grwd)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train and write a run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="run directory (default ./run)")
    _add_grw(p)
    _add_model(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a run's checkpoint on a test split")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss", parents=[common], help="loss breakdown of one N×d sequence")
    p.add_argument("--input", required=True, help=".npy, .json or CSV/whitespace text")
    _add_grw(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient sweep")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--draws", type=int, default=20)
    p.add_argument("--t-values", dest="t_values", type=_int_tuple)
    p.add_argument("--d-values", dest="d_values", type=_int_tuple)
    p.add_argument("--corrupt-gradient", dest="corrupt_gradient", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("scale-study", parents=[common], help="1-D minimizer extent versus T")
    p.add_argument("--t-min", dest="t_min", type=int)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_scale_study)

    p = sub.add_parser("sweep", parents=[common], help="vary one smoothing setting")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", required=True, choices=trainer.SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma separated")
    p.add_argument("--seeds", help="comma separated (default: root seed)")
    p.add_argument("--out", help="CSV path (default sweep.csv)")
    _add_model(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
