"""Command-line entry point: ``lmmv gen|train|eval|importance|schema``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .analysis import ImportanceReport, WindowSpec, parse_subsets, subset_eval, view_importance, window_eval
from .config import RUN_CONFIG_SCHEMA, ConfigError, RunConfig
from .data.io import DatasetFormatError, load_dataset, save_dataset
from .data.synth import generate, missingness_summary
from .metrics import EvalReport, MetricUndefined
from .model import catalog_fingerprint
from .trainer import (TrainConfig, Trainer, TrainingDiverged, evaluate, load_checkpoint,
                      restrict_views, save_checkpoint)

log = logging.getLogger("lmmv")

OUTPUT_ROOT_ENV = "LMMV_OUTPUT_ROOT"
EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 1, 2, 3


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _out_dir(args, cfg: RunConfig | None, sub: str) -> Path:
    if args.out:
        root = Path(args.out)
    elif cfg is not None and cfg.output_dir:
        root = Path(cfg.output_dir) / sub
    else:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "lmmv-runs")) / sub
    root.mkdir(parents=True, exist_ok=True)
    return root


def _load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    if not Path(path).is_file():
        raise CliError(f"config file {path} not found", EXIT_CONFIG)
    return RunConfig.load(path)


def _load_data(path):
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise CliError(f"data directory {p} has no manifest.json")
    try:
        return load_dataset(p)
    except DatasetFormatError as exc:
        raise CliError(f"cannot load dataset {p}: {exc}") from exc


def _split(ds, name: str):
    part = ds.part(name)
    if part.n_patients == 0:
        raise CliError(f"split {name!r} is empty")
    return part


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(rows: list[dict], path: Path) -> None:
    keys = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else r[k])
                        for k in keys})


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated integer list") from None


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    out = _out_dir(args, cfg, "data")
    ds = generate(cfg.synth)
    save_dataset(ds, out)
    summary = missingness_summary(ds)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_data(args.data)
    out = _out_dir(args, cfg, "train")
    views = args.views.split(",") if args.views else None
    if views:
        unknown = [v for v in views if v not in ds.catalog.names]
        if unknown:
            raise CliError(f"unknown views {unknown}; dataset has {list(ds.catalog.names)}", EXIT_CONFIG)
    seeds = args.seeds if args.seeds is not None else [cfg.train.seed]
    train_ds, val_ds = _split(ds, "train"), ds.part("val")
    for seed in seeds:
        tdict = {**cfg.train.to_dict(), "seed": seed}
        if args.no_view_dropout:
            tdict["view_dropout"] = 0.0
        tcfg = TrainConfig(**tdict)
        trainer = Trainer(train_ds, tcfg, cfg.model, val_ds if val_ds.n_patients else None, views=views)
        ckpt_path = out / f"ckpt_seed{seed}.ckpt"
        try:
            best, history = trainer.fit()
        except TrainingDiverged as exc:
            save_checkpoint(exc.checkpoint, ckpt_path)
            _write_csv(exc.history, out / f"log_seed{seed}.csv")
            raise CliError(f"seed {seed}: training diverged ({exc}); last good checkpoint at {ckpt_path}",
                           EXIT_DIVERGED) from exc
        save_checkpoint(best, ckpt_path)
        load_checkpoint(ckpt_path)  # validate what was written
        _write_csv(history, out / f"log_seed{seed}.csv")
        final = {"seed": seed, "selected_epoch": best.header["metrics"].get("selected_epoch"),
                 "validation": None}
        if val_ds.n_patients:
            try:
                final["validation"] = evaluate(best.build_model(), val_ds, None if views is None else
                                               _subset_mask(val_ds, views))
            except MetricUndefined as exc:
                log.warning("validation metrics undefined: %s", exc)
        _write_json(final, out / f"metrics_seed{seed}.json")
        print(f"seed {seed}: wrote {ckpt_path}")
    return 0


def _subset_mask(ds, views):
    return restrict_views(ds.available, [ds.catalog.index(v) for v in views])


def _checkpoints(paths, ds):
    out = []
    want = catalog_fingerprint(ds.catalog, ds.class_count)
    for p in paths:
        if not Path(p).is_file():
            raise CliError(f"checkpoint {p} not found")
        ck = load_checkpoint(p)
        if ck.header["dataset_fingerprint"] != want:
            raise CliError(f"checkpoint {p} was trained on a different dataset schema "
                           f"({ck.header['dataset_fingerprint']} != {want})")
        out.append((p, ck))
    return out


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_data(args.data)
    split = args.split or cfg.eval.get("split", "test")
    part = _split(ds, split)
    ckpts = _checkpoints(args.checkpoints, ds)
    windows = [WindowSpec.parse(w) for w in args.windows.split(",")] if args.windows else \
        [WindowSpec.parse(w) for w in cfg.eval.get("windows", [])]
    subsets = parse_subsets(args.subsets) if args.subsets else cfg.eval.get("subsets", [])
    report = EvalReport()
    for path, ck in ckpts:
        seed = ck.header["train"]["seed"]
        model = ck.build_model()
        meta = {"checkpoint": str(path)}
        if not windows and not subsets:
            report.add("final", seed, evaluate(model, part), **meta)
        if windows:
            for w, vals in window_eval(model, part, windows).items():
                report.add(f"window {w}", seed, vals, **meta)
        if subsets:
            for s, vals in subset_eval(model, part, subsets).items():
                report.add(f"subset {s}", seed, vals, **meta)
    out = _out_dir(args, cfg, "eval")
    _write_csv(report.rows, out / "eval.csv")
    _write_json(report.to_json(), out / "eval.json")
    for c, ms in report.aggregate().items():
        print(c, " ".join(f"{m}={a}" for m, a in ms.items()))
    return 0


def cmd_importance(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_data(args.data)
    split = args.split or cfg.eval.get("importance_split", "test")
    part = _split(ds, split)
    (path, ck), = _checkpoints([args.checkpoint], ds)
    if ck.header["train"]["view_dropout"] == 0.0:
        log.warning("checkpoint %s was trained without view dropout; importance may be unreliable", path)
    rep: ImportanceReport = view_importance(ck, part)
    out = _out_dir(args, cfg, "importance")
    (out / "importance.csv").write_text(rep.to_csv())
    _write_json(rep.to_json(), out / "importance.json")
    _write_json(rep.plot_data(), out / "importance_plot.json")
    print(rep.to_csv(), end="")
    return 0


def cmd_schema(args) -> int:
    print(json.dumps(RUN_CONFIG_SCHEMA, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lmmv", description="Longitudinal multi-view classifier")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("config", nargs="?")
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one checkpoint per seed")
    t.add_argument("config", nargs="?")
    t.add_argument("--data", required=True)
    t.add_argument("--out")
    t.add_argument("--seeds", type=_parse_ints)
    t.add_argument("--views", help="comma-separated view subset")
    t.add_argument("--no-view-dropout", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints")
    e.add_argument("checkpoints", nargs="+")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.add_argument("--split", choices=["train", "val", "test"])
    e.add_argument("--windows", help="X:Y[,X:Y...]")
    e.add_argument("--subsets", help="views separated by commas, subsets by semicolons")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("importance", help="leave-one-view-out importance")
    i.add_argument("checkpoint")
    i.add_argument("--config")
    i.add_argument("--data", required=True)
    i.add_argument("--out")
    i.add_argument("--split", choices=["train", "val", "test"])
    i.set_defaults(func=cmd_importance)

    s = sub.add_parser("schema", help="print the RunConfig JSON schema")
    s.set_defaults(func=cmd_schema)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, KeyError, MetricUndefined) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
