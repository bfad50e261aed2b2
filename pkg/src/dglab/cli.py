"""``dglab`` command-line tool: data generation, training, ablation, alpha sweeps, analysis.

Settings come from an INI file with sections ``[data]``, ``[model]``,
``[train]``, ``[sweep]`` and ``[analyze]``. ``--set section.key=value`` and
``--seed`` override the file. Exit codes: 0 success, 1 configuration error,
2 data error, 3 numerical failure. ``DGLAB_LOG_LEVEL`` sets log verbosity.
"""
from __future__ import annotations

import argparse
import configparser
import glob
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, analysis, reports, synthdata
from .exceptions import ConfigError, DataError, DGLabError, SchemaError, UnsupportedError
from .experiments import (RunConfig, RunOutcome, ablate, build_model, desk_protocol, load_data,
                          run, sweep_alpha)
from .model import FusionSpec, load_checkpoint, save_checkpoint
from .train import seed_streams

logger = logging.getLogger("dglab")

EXIT_OK = 0


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _paths(text: str) -> tuple:
    return tuple(text.split())


def _bool(text: str) -> bool:
    states = configparser.RawConfigParser.BOOLEAN_STATES
    if text.lower() not in states:
        raise ValueError(f"not a boolean: {text!r}")
    return states[text.lower()]


FIELDS = {
    "data": {"n_classes": int, "input_dims": _ints, "mu": _floats, "sigma": _floats,
             "label_noise": _floats, "n_train": int, "n_test": int, "seed": int, "dir": str},
    "model": {"rep_dim": int, "hidden_dims": _ints, "fusion": str, "mlp_hidden": int},
    "train": {"mode": str, "alpha": float, "lr": float, "momentum": float,
              "weight_decay": float, "epochs": int, "batch_size": int,
              "lr_decay_factor": float, "lr_decay_every": int, "seed": int,
              "checkpoint_every": int, "workers": int, "track_suppression": _bool},
    "sweep": {"alphas": _floats},
    "analyze": {"modality": int, "checkpoints": _paths, "split": str, "max_samples": int},
}

DEFAULT_MLP_HIDDEN = 32


def load_settings(path: Optional[str] = None, overrides: Sequence[str] = ()) -> dict:
    """Read and type-check an INI file plus ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not section.key=value")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, value.strip())
    settings: dict = {s: {} for s in FIELDS}
    for section in parser.sections():
        if section not in FIELDS:
            raise ConfigError(f"unknown config section [{section}]")
        for name, raw in parser.items(section):
            if name not in FIELDS[section]:
                raise ConfigError(f"unknown key {section}.{name}")
            try:
                settings[section][name] = FIELDS[section][name](raw)
            except ValueError as exc:
                raise ConfigError(f"{section}.{name} = {raw!r}: {exc}") from None
    return settings


def build_run_config(settings: dict, seed: Optional[int] = None) -> RunConfig:
    """Desk-protocol defaults with the file's values layered on top."""
    data, model, tr = settings["data"], settings["model"], settings["train"]
    root = seed if seed is not None else tr.get("seed", 0)
    if root < 0:
        raise ConfigError(f"seed must be unsigned, got {root}")
    base = desk_protocol(root)
    gen_keys = ("n_classes", "input_dims", "mu", "sigma", "label_noise", "n_train", "n_test")
    gen = replace(base.gen, **{k: data[k] for k in gen_keys if k in data})
    if "input_dims" in data and "label_noise" not in data:
        gen = replace(gen, label_noise=(0.0,) * len(gen.input_dims))
    train_keys = ("mode", "alpha", "lr", "momentum", "weight_decay", "epochs", "batch_size",
                  "lr_decay_factor", "lr_decay_every")
    train_cfg = base.train.with_(**{k: tr[k] for k in train_keys if k in tr})
    kind = model.get("fusion", "concat")
    mlp_hidden = model.get("mlp_hidden", DEFAULT_MLP_HIDDEN) if kind == "mlp" else None
    modality = settings["analyze"].get("modality", 1)
    data_dir = data.get("dir")
    if data_dir is not None and not Path(data_dir).is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    return RunConfig(
        gen=gen,
        train=train_cfg,
        rep_dim=model.get("rep_dim", base.rep_dim),
        hidden_dims=tuple(model.get("hidden_dims", base.hidden_dims)),
        fusion=FusionSpec(kind, mlp_hidden),
        data_seed=data.get("seed"),
        data_dir=Path(data_dir) if data_dir is not None else None,
        analyze_modality=modality - 1,
        track_suppression=tr.get("track_suppression", True),
        checkpoint_every=tr.get("checkpoint_every", 0),
        alphas=tuple(settings["sweep"].get("alphas", base.alphas)),
        workers=tr.get("workers", 1),
    )


def describe(config: RunConfig) -> dict:
    """JSON-ready record of a run configuration."""
    t = config.train
    return {
        "seed": config.seed,
        "seed_streams": seed_streams(config.seed),
        "data": {**config.gen_spec().to_dict(),
                 "dir": str(config.data_dir) if config.data_dir else None},
        "model": {"rep_dim": config.rep_dim, "hidden_dims": list(config.hidden_dims),
                  "fusion": config.fusion.kind, "mlp_hidden": config.fusion.mlp_hidden},
        "train": {"mode": t.mode_name, "alpha": t.alpha, "lr": t.lr, "momentum": t.momentum,
                  "weight_decay": t.weight_decay, "epochs": t.epochs, "batch_size": t.batch_size,
                  "lr_decay_factor": t.lr_decay_factor, "lr_decay_every": t.lr_decay_every},
    }


def _write_json(path: Path, obj: dict) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ artifacts


def metrics_rows(outcome: RunOutcome) -> list:
    rows = []
    for rec in outcome.result.epochs:
        for split, m in rec["splits"].items():
            rows.append([rec["epoch"], split, m["multi_acc"], *m["uni_acc"],
                         m["loss_d"], m["loss_uni_sum"]])
    return rows


def gradnorm_rows(outcome: RunOutcome) -> list:
    return [[s.step, name, float(v)] for s in outcome.result.steps
            for name, v in s.grad_norms.items()]


def write_run(outcome: RunOutcome, out: Path) -> dict:
    """metrics.csv, gradnorms.csv, checkpoint.npz and run.json for one run."""
    out.mkdir(parents=True, exist_ok=True)
    M = outcome.model.n_modalities
    metrics = reports.metrics_schema(M)
    reports.write_table(out / "metrics.csv", metrics, metrics_rows(outcome))
    reports.write_table(out / "gradnorms.csv", reports.GRADNORMS, gradnorm_rows(outcome))
    epochs_done = len(outcome.result.epochs)
    if outcome.failed is None:
        save_checkpoint(outcome.model, out / "checkpoint.npz", step=epochs_done,
                        extra={"mode": outcome.config.train.mode_name, "seed": outcome.config.seed,
                               "optimizer_steps": len(outcome.result.steps)})
    record = {
        "version": __version__,
        "status": "failed" if outcome.failed else "ok",
        "error": outcome.failed,
        "partial": outcome.failed is not None,
        "epochs_completed": epochs_done,
        "steps_completed": len(outcome.result.steps),
        "config": describe(outcome.config),
        "schemas": {"metrics.csv": metrics.tag, "gradnorms.csv": reports.GRADNORMS.tag},
        "first_batch_digest": (outcome.result.first_batch_digests or [None])[0],
        "final": outcome.final("test") or None,
    }
    _write_json(out / "run.json", record)
    return record


def summary_row(key, outcome: RunOutcome) -> list:
    M = outcome.model.n_modalities
    final = outcome.final("test")
    nan = float("nan")
    return [key, final.get("multi_acc", nan), *final.get("uni_acc", [nan] * M),
            final.get("loss_d", nan), final.get("loss_uni_sum", nan),
            (outcome.result.first_batch_digests or [""])[0],
            "failed" if outcome.failed else "ok"]


def _status(outcomes: Sequence[RunOutcome]) -> int:
    failed = [o for o in outcomes if o.failed]
    for o in failed:
        logger.error("%s run failed: %s", o.config.train.mode_name, o.failed)
    return 3 if failed else EXIT_OK


# ------------------------------------------------------------------- commands


def cmd_gen_data(config: RunConfig, settings: dict, out: Path) -> int:
    spec = config.gen_spec()
    train_set, test_set = synthdata.generate(spec)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for ds in (train_set, test_set):
        path = out / f"{ds.split}.dgl"
        synthdata.save(ds, path)
        files[path.name] = synthdata.file_digest(path)
    _write_json(out / "dataset.json", {"spec": spec.to_dict(), "sha256": files})
    logger.info("wrote %s", ", ".join(sorted(files)))
    return EXIT_OK


def cmd_train(config: RunConfig, settings: dict, out: Path) -> int:
    ckpt_dir = out / "checkpoints" if config.checkpoint_every else None
    outcome = run(config, checkpoint_dir=ckpt_dir)
    record = write_run(outcome, out)
    if outcome.failed:
        logger.error("training failed after %d steps; partial artifacts in %s",
                     record["steps_completed"], out)
        return 3
    logger.info("final test %s", record["final"])
    return EXIT_OK


def cmd_ablate(config: RunConfig, settings: dict, out: Path) -> int:
    outcomes = ablate(config)
    for o in outcomes:
        write_run(o, out / o.config.train.mode_name)
    schema = reports.summary_schema("ablation", ("mode", str), config.gen.n_modalities)
    reports.write_table(out / "ablation.csv", schema,
                        [summary_row(o.config.train.mode_name, o) for o in outcomes])
    return _status(outcomes)


def cmd_sweep_alpha(config: RunConfig, settings: dict, out: Path) -> int:
    outcomes = sweep_alpha(config)
    for o in outcomes:
        write_run(o, out / f"alpha_{o.config.train.alpha!r}")
    schema = reports.summary_schema("sweep_alpha", ("alpha", float), config.gen.n_modalities)
    reports.write_table(out / "sweep_alpha.csv", schema,
                        [summary_row(o.config.train.alpha, o) for o in outcomes])
    return _status(outcomes)


def _checkpoint_paths(patterns: Sequence[str]) -> list:
    paths = []
    for pattern in patterns:
        matches = sorted(glob.glob(pattern))
        if not matches:
            raise DataError(f"no checkpoint matches {pattern!r}")
        paths.extend(matches)
    return paths


def cmd_analyze(config: RunConfig, settings: dict, out: Path,
                checkpoints: Sequence[str] = ()) -> int:
    opts = settings["analyze"]
    split = opts.get("split", "train")
    if split not in ("train", "test"):
        raise ConfigError(f"analyze.split must be train or test, got {split!r}")
    train_set, test_set = load_data(config)
    ds = train_set if split == "train" else test_set
    if "max_samples" in opts:
        ds = ds.subset(np.arange(min(opts["max_samples"], len(ds))))
    k = config.analyze_modality
    paths = _checkpoint_paths(list(checkpoints) or list(opts.get("checkpoints", ())))
    if paths:
        trajectory = []
        for i, p in enumerate(paths):
            model, meta = load_checkpoint(p)
            trajectory.append((meta.get("step") if meta.get("step") is not None else i, model))
    else:
        logger.info("no checkpoints given; analysing the freshly initialised model")
        trajectory = [(0, build_model(config, ds))]
    supp_rows, cmp_rows = [], []
    for step, model in trajectory:
        if model.fusion_spec.kind != "concat":
            raise UnsupportedError("suppression analysis needs a concat-fusion checkpoint")
        dims = [s.input_dim for s in model.encoder_specs]
        if dims != ds.input_dims or model.n_classes < ds.n_classes:
            raise SchemaError(f"checkpoint at step {step} expects inputs {dims} "
                              f"and {model.n_classes} classes; dataset has {ds.input_dims} "
                              f"and {ds.n_classes}")
        if not 0 <= k < model.n_modalities:
            raise ConfigError(f"analyze.modality {k + 1} outside 1..{model.n_modalities}")
        rec = analysis.model_suppression(model, ds.features, ds.labels, k, step=step)
        supp_rows.extend([step, i, float(g)] for i, g in enumerate(rec.geo_mean))
        cmp = analysis.check_suppression_inequality(model, ds.features, ds.labels, k, step=step)
        cmp_rows.extend([step, float(u), float(m), float(d)]
                        for u, m, d in zip(cmp.norm_uni, cmp.norm_multi, cmp.margin))
    out.mkdir(parents=True, exist_ok=True)
    reports.write_table(out / "suppression.csv", reports.SUPPRESSION, supp_rows)
    reports.write_table(out / "gradcompare.csv", reports.GRADCOMPARE, cmp_rows)
    _write_json(out / "analysis.json", {
        "version": __version__, "modality": k + 1, "split": split, "samples": len(ds),
        "checkpoints": [str(p) for p in paths],
        "schemas": {"suppression.csv": reports.SUPPRESSION.tag,
                    "gradcompare.csv": reports.GRADCOMPARE.tag}})
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "sweep-alpha": cmd_sweep_alpha,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dglab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="INI settings file")
        p.add_argument("--seed", type=int, help="root seed (overrides train.seed)")
        p.add_argument("--out", default=None, help="output directory (default: runs/<command>)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one setting; repeatable")
        if name == "analyze":
            p.add_argument("--checkpoint", action="append", default=[],
                           help="checkpoint file or glob; repeatable, in trajectory order")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("DGLAB_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else Path("runs") / args.command
    try:
        settings = load_settings(args.config, args.set)
        config = build_run_config(settings, args.seed)
        if args.command == "analyze":
            return cmd_analyze(config, settings, out, args.checkpoint)
        return COMMANDS[args.command](config, settings, out)
    except DGLabError as exc:
        print(f"dglab {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"dglab {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
