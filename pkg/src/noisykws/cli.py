"""``noisykws`` command line: prepare-data, pretrain, train, evaluate, report, selfcheck.

Every command writes into a fresh run directory under ``--out``
(``<timestamp>-<command>`` unless ``--run-name`` is given) holding the resolved
config, a log, metric CSVs and any checkpoints.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure, 5 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import tensor as tn
from .config import ConfigError, RunConfig, dump_json, read_config_file, resolve
from .data import DataError
from .dsp import WavError
from .evaluate import EvalResult, emit_report, results_from_csv, results_to_csv, results_to_markdown
from .model import CheckpointError, KwtConfig, load_checkpoint, model_from_checkpoint
from .pipeline import (evaluate_all, load_prepared, method_plan, prepare_data, pretrain_step_run,
                       save_model, save_prepared, train_step_run, write_rows)
from .selfcheck import run_selfcheck

log = logging.getLogger("noisykws")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5
COMMANDS = ("prepare-data", "pretrain", "train", "evaluate", "report", "selfcheck")
RUN_MARKER = "config.json"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisykws", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML (or .json) run config")
        s.add_argument("--method", help="training method, e.g. d2v-denoising")
        s.add_argument("--model", help="kwt1, kwt2, kwt3 or kwt-tiny")
        s.add_argument("--seed", type=int)
        s.add_argument("--threads", type=int, help="cap on BLAS worker threads")
        s.add_argument("--deterministic", action="store_true", default=None,
                       help="single-threaded stepping for bit-identical reruns")
        s.add_argument("--out", help="parent directory for run directories")
        s.add_argument("--run-name", help="run directory name (default: timestamp-command)")
        s.add_argument("--overwrite", action="store_true", help="allow reusing an existing run directory")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("pretrain", "train", "evaluate"):
            s.add_argument("--data", required=True, help="directory written by prepare-data")
        if name == "train":
            s.add_argument("--init-checkpoint", help="pretrained encoder (required for d2v-* methods)")
        if name == "evaluate":
            s.add_argument("--checkpoint", required=True)
        if name == "report":
            s.add_argument("inputs", nargs="+", help="evaluate run directories or results CSV files")
            s.add_argument("--formats", default="csv,json,markdown,svg")
    return p


def make_run_dir(out: str, command: str, name: str | None, overwrite: bool) -> Path:
    parent = Path(out)
    parent.mkdir(parents=True, exist_ok=True)
    if name is None:
        base = f"{time.strftime('%Y%m%d-%H%M%S')}-{command}"
        run, k = parent / base, 1
        while run.exists():
            run, k = parent / f"{base}-{k}", k + 1
    else:
        run = parent / name
        if run.exists():
            if not overwrite:
                raise FileExistsError(f"run directory {run} exists; pass --overwrite to replace it")
            if any(run.iterdir()) and not (run / RUN_MARKER).exists():
                raise FileExistsError(f"{run} does not look like a run directory; refusing to clear it")
            shutil.rmtree(run)
    run.mkdir()
    return run


def _attach_log(run: Path, verbose: bool) -> logging.Handler:
    handler = logging.FileHandler(run / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    root = logging.getLogger()
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handler


# ---------------------------------------------------------------- commands


def cmd_prepare(cfg: RunConfig, run: Path, args) -> int:
    pd = prepare_data(cfg.data, cfg.seed)
    save_prepared(pd, run)
    counts = pd.manifest.counts()
    log.info("prepared %s; %d suites", counts, len(pd.suites))
    print(f"prepared {counts} and {len(pd.suites)} test suites in {run}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, run: Path, args) -> int:
    variant, _ = method_plan(cfg.method)
    if variant is None:
        raise ConfigError(f"method {cfg.method!r} has no pretraining stage")
    pd = load_prepared(args.data)
    mcfg = cfg.model_config(len(pd.manifest.labels))
    model, rows = pretrain_step_run(pd, mcfg, cfg.pretrain, cfg.seed, cfg.mfcc)
    write_rows(run / "pretrain_log.csv", rows, ("epoch", "step", "loss", "tau", "lr"))
    step = rows[-1]["step"] if rows else 0
    ckpt = run / f"pretrain-{cfg.method}-{mcfg.name}-step{step}.kwsc"
    save_model(ckpt, model, {"kind": "pretrain", "method": cfg.method, "variant": variant,
                             "seed": cfg.seed, "step": step})
    print(f"pretrained {cfg.method} ({variant}) for {step} steps -> {ckpt}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, run: Path, args) -> int:
    variant, policy = method_plan(cfg.method)
    init = args.init_checkpoint
    if variant is not None and init is None:
        raise ConfigError(f"method {cfg.method!r} fine-tunes a pretrained encoder; pass --init-checkpoint")
    if variant is None and init is not None:
        raise ConfigError(f"method {cfg.method!r} trains from scratch; drop --init-checkpoint")
    if init is not None:
        meta, _ = load_checkpoint(init)
        if meta.get("variant") not in (None, variant):
            raise ConfigError(f"{init} was pretrained with variant {meta.get('variant')!r}, "
                              f"method {cfg.method!r} expects {variant!r}")
    pd = load_prepared(args.data)
    mcfg = cfg.model_config(len(pd.manifest.labels))
    model, rows = train_step_run(pd, mcfg, cfg.train, cfg.seed, init, cfg.augment, cfg.mfcc)
    write_rows(run / "train_log.csv", rows, ("epoch", "step", "lr", "train_loss", "val_accuracy"))
    step = rows[-1]["step"] if rows else 0
    best = max((r["val_accuracy"] for r in rows if r["val_accuracy"] != ""), default=float("nan"))
    ckpt = run / f"model-{cfg.method}-{mcfg.name}-step{step}.kwsc"
    save_model(ckpt, model, {"kind": "supervised", "method": cfg.method, "data_policy": policy,
                             "seed": cfg.seed, "step": step, "best_val_accuracy": best})
    print(f"trained {cfg.method} for {step} steps (best val acc {best:.3f}) -> {ckpt}")
    return EXIT_OK


def check_checkpoint_matches(meta: dict, cfg: RunConfig, n_classes: int) -> KwtConfig:
    """Fail before any suite runs if the checkpoint cannot serve the requested model."""
    ckpt_cfg = KwtConfig(**meta["config"])
    if cfg.model is not None and cfg.model_config(n_classes) != ckpt_cfg:
        want = cfg.model_config(n_classes)
        raise ConfigError(f"checkpoint holds {ckpt_cfg.name} (dim={ckpt_cfg.dim}, blocks={ckpt_cfg.n_blocks}, "
                          f"classes={ckpt_cfg.n_classes}); requested {want.name} (dim={want.dim}, "
                          f"blocks={want.n_blocks}, classes={want.n_classes})")
    if ckpt_cfg.n_classes != n_classes:
        raise ConfigError(f"checkpoint has {ckpt_cfg.n_classes} classes, data has {n_classes}")
    if ckpt_cfg.input_dim != cfg.mfcc.n_mfcc:
        raise ConfigError(f"checkpoint expects {ckpt_cfg.input_dim} coefficients, config gives {cfg.mfcc.n_mfcc}")
    return ckpt_cfg


def cmd_evaluate(cfg: RunConfig, run: Path, args) -> int:
    meta, _ = load_checkpoint(args.checkpoint)
    pd = load_prepared(args.data)
    check_checkpoint_matches(meta, cfg, len(pd.manifest.labels))
    model, meta = model_from_checkpoint(args.checkpoint)
    method = meta.get("method", cfg.method)
    res = evaluate_all(model, pd, mfcc=cfg.mfcc)
    (run / "results.csv").write_text(results_to_csv({method: res}))
    (run / "results.md").write_text(results_to_markdown({method: res}))
    print(f"{method}: clean {_fmt(res.clean)}, seen mean {_fmt(res.seen_mean)}, "
          f"unseen mean {_fmt(res.unseen_mean)} -> {run / 'results.csv'}")
    return EXIT_OK


def _fmt(v):
    return "-" if v is None else f"{v:.3f}"


def cmd_report(cfg: RunConfig, run: Path, args) -> int:
    merged: dict[str, EvalResult] = {}
    for item in args.inputs:
        path = Path(item)
        csv_path = path / "results.csv" if path.is_dir() else path
        for method, res in results_from_csv(csv_path.read_text()).items():
            if method in merged:
                raise DataError(f"method {method!r} appears in more than one input")
            merged[method] = res
    written = emit_report(merged, run, [f.strip() for f in args.formats.split(",") if f.strip()])
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_selfcheck(cfg: RunConfig, run: Path, args) -> int:
    lines = []

    def emit(line):
        print(line)
        lines.append(line)

    ok = run_selfcheck(emit)
    (run / "selfcheck.txt").write_text("\n".join(lines) + "\n")
    return EXIT_OK if ok else EXIT_NUMERIC


HANDLERS = {"prepare-data": cmd_prepare, "pretrain": cmd_pretrain, "train": cmd_train,
            "evaluate": cmd_evaluate, "report": cmd_report, "selfcheck": cmd_selfcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        raw = read_config_file(args.config) if args.config else {}
        cfg = resolve(raw, {"method": args.method, "model": args.model, "seed": args.seed,
                            "threads": args.threads, "out": args.out, "deterministic": args.deterministic})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        run = make_run_dir(cfg.out, args.command, args.run_name, args.overwrite)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    extra = {k: getattr(args, k) for k in ("data", "checkpoint", "init_checkpoint", "inputs") if hasattr(args, k)}
    (run / RUN_MARKER).write_text(dump_json(cfg, args.command, extra))
    handler = _attach_log(run, args.verbose)
    threads = 1 if cfg.deterministic else cfg.threads
    try:
        try:
            with threadpool_limits(limits=threads):
                return HANDLERS[args.command](cfg, run, args)
        except ConfigError as exc:
            code, msg = EXIT_CONFIG, f"config error: {exc}"
        except CheckpointError as exc:
            code, msg = EXIT_CONFIG, f"checkpoint error: {exc}"
        except (DataError, WavError) as exc:
            code, msg = EXIT_DATA, f"data error: {exc}"
        except tn.NonFiniteError as exc:
            code, msg = EXIT_NUMERIC, f"numeric failure: {exc}"
        except OSError as exc:
            code, msg = EXIT_IO, f"I/O error: {exc}"
        log.error(msg)
        print(msg, file=sys.stderr)
        return code
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()

if __name__ == "__main__":
    sys.exit(main())
