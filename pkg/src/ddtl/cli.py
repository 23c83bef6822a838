"""Command-line entry point: ``ddtl <subcommand> ...``.

Exit codes: 0 success, 1 configuration/usage error, 2 data error,
3 numerical failure (aborted training or a failed gradient check).
"""
from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, checkpoint, data, dff, gradcheck, metrics, segmentation, trainer
from .config import (ConfigError, ExperimentConfig, config_hash, load_config,
                     require_dff_parts, seg_domain)

log = logging.getLogger("ddtl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, obj) -> Path:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def _write_text(path: Path, text: str) -> Path:
    path.write_text(text, encoding="utf-8", newline="\n")
    return path


def write_manifest(out: Path, command: str, raw_config: dict, seed: int, started: str,
                   outputs: Sequence[Path]) -> Path:
    manifest = {
        "command": command,
        "config": raw_config,
        "config_hash": config_hash(raw_config),
        "seed": seed,
        "version": __version__,
        "started": started,
        "finished": _now(),
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    return _write_json(out / "manifest.json", manifest)


# ---------------------------------------------------------------- helpers

def _load(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["train.seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(Path(args.out).resolve())
    cfg = load_config(args.config, overrides)
    if args.seed is not None and cfg.segmentation is not None:
        cfg.segmentation.seed = args.seed
    return cfg


def _dff_domains(cfg: ExperimentConfig):
    require_dff_parts(cfg)
    sources = [s.build("source", cfg.size, cfg.base_dir) for s in cfg.sources]
    target = cfg.target.build("target", cfg.size, cfg.base_dir)
    if cfg.test is not None:
        test = cfg.test.build("target", cfg.size, cfg.base_dir)
    else:
        target, test = data.split(target, cfg.split, cfg.train.seed)
    return sources, target, test


def _run_dff(cfg: ExperimentConfig, sources, target, test, out: Path, command: str,
             started: str) -> int:
    arch = cfg.dff_arch()
    outputs = []
    try:
        params, history = trainer.train_dff(sources, target, arch, cfg.train)
    except trainer.TrainingAborted as exc:
        log.error("numerical abort: %s", exc)
        outputs.append(dff.save_params(out / "model.dff", exc.params, arch))
        outputs.append(_write_text(out / "loss_history.csv", exc.history.to_csv()))
        write_manifest(out, command, cfg.raw, cfg.train.seed, started, outputs)
        return EXIT_NUMERIC
    outputs.append(dff.save_params(out / "model.dff", params, arch))
    outputs.append(_write_text(out / "loss_history.csv", history.to_csv()))
    report = trainer.evaluate_classifier(params, arch, test)
    outputs.append(_write_json(out / "metrics.json", report))
    write_manifest(out, command, cfg.raw, cfg.train.seed, started, outputs)
    log.info("test accuracy %.4f", report["accuracy"])
    return EXIT_OK


def _apply_segmenter(domain: data.Domain, params, arch) -> data.Domain:
    masks = segmentation.predict_masks(domain.samples, params, arch)
    return data.apply_masks(domain, masks)


# ---------------------------------------------------------------- commands

def cmd_train_dff(args) -> int:
    started = _now()
    cfg = _load(args)
    sources, target, test = _dff_domains(cfg)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return _run_dff(cfg, sources, target, test, out, "train-dff", started)


def cmd_train_seg(args) -> int:
    started = _now()
    cfg = _load(args)
    sc = cfg.segmentation
    if sc is None or sc.train is None:
        raise ConfigError("train-seg needs a 'segmentation' section with a 'train' domain")
    train = seg_domain(cfg, "train").build("target", cfg.size, cfg.base_dir)
    test_spec = seg_domain(cfg, "test")
    if test_spec is not None:
        test = test_spec.build("target", cfg.size, cfg.base_dir)
    else:
        train, test = data.split(train, 0.8, sc.seed)
    for d in (train, test):
        if d.masks is None:
            raise data.DataError(f"domain {d.name!r} has no masks")
    arch = sc.arch()
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    try:
        params, history = segmentation.train_seg(train, arch, sc.train_config(), sc.w0, sc.sigma)
    except trainer.TrainingAborted as exc:
        log.error("numerical abort: %s", exc)
        outputs.append(segmentation.save_seg(out / "segmenter.seg", exc.params, arch))
        outputs.append(_write_text(out / "loss_history.csv", exc.history.to_csv()))
        write_manifest(out, "train-seg", cfg.raw, sc.seed, started, outputs)
        return EXIT_NUMERIC
    outputs.append(segmentation.save_seg(out / "segmenter.seg", params, arch))
    outputs.append(_write_text(out / "loss_history.csv", history.to_csv()))
    pred = segmentation.predict_masks(test.samples, params, arch)
    outputs.append(_write_json(out / "metrics.json",
                               metrics.summary(pred, test.masks, arch.num_classes)))
    mask_dir = out / "pred_masks"
    mask_dir.mkdir(exist_ok=True)
    for i, m in enumerate(pred):
        path = mask_dir / f"{i:05d}.pgm"
        data.write_pgm(path, m.astype(np.uint8))
        outputs.append(path)
    write_manifest(out, "train-seg", cfg.raw, sc.seed, started, outputs)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    started = _now()
    cfg = _load(args)
    if cfg.pipeline is None or cfg.pipeline.segmenter is None:
        raise ConfigError("pipeline needs a 'pipeline.segmenter' checkpoint path")
    ckpt = cfg.resolve(cfg.pipeline.segmenter)
    if not ckpt.is_file():
        raise data.DataError(f"{ckpt}: segmenter checkpoint not found")
    seg_params, seg_arch = segmentation.load_seg(ckpt)
    sources, target, test = _dff_domains(cfg)
    target = _apply_segmenter(target, seg_params, seg_arch)
    test = _apply_segmenter(test, seg_params, seg_arch)
    if cfg.pipeline.mask_sources:
        sources = [_apply_segmenter(s, seg_params, seg_arch) for s in sources]
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return _run_dff(cfg, sources, target, test, out, "pipeline", started)


def cmd_eval(args) -> int:
    started = _now()
    cfg = _load(args)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise data.DataError(f"{ckpt}: checkpoint not found")
    params, arch = dff.load_params(ckpt)
    spec = cfg.test or cfg.target
    if spec is None:
        raise ConfigError("eval needs a 'test' or 'target' domain")
    domain = spec.build("target", cfg.size, cfg.base_dir)
    if cfg.test is None:
        _, domain = data.split(domain, cfg.split, cfg.train.seed)
    out = cfg.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    path = _write_json(out / "eval_metrics.json", trainer.evaluate_classifier(params, arch, domain))
    write_manifest(out, "eval", cfg.raw, cfg.train.seed, started, [path])
    return EXIT_OK


def cmd_gradcheck(args, cases=None) -> int:
    report = gradcheck.run(gradcheck.CASES if cases is None else cases)
    width = max(len(name) for name, _, _ in report)
    for name, err, ok in report:
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {'ok' if ok else 'FAIL'}")
    failed = [name for name, _, ok in report if not ok]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    started = _now()
    if args.kind not in data.KINDS:
        raise ConfigError(f"unknown kind {args.kind!r}; choose from {list(data.KINDS)}")
    if args.out is None:
        raise ConfigError("gen-synth needs --out")
    try:
        domain = data.gen_synthetic(args.kind, args.count, args.size, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out)
    written = data.save_domain(domain, out)
    flags = {"kind": args.kind, "count": args.count, "size": args.size, "seed": args.seed}
    write_manifest(out, "gen-synth", flags, args.seed, started, written)
    return EXIT_OK


# ---------------------------------------------------------------- entry

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ddtl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="experiment JSON file")
        sp.add_argument("--seed", type=int, help="override the training seed")
        sp.add_argument("--out", help="override the output directory")
        sp.set_defaults(func=fn)
        return sp

    with_config("train-dff", cmd_train_dff, "joint DFF training on sources + target")
    with_config("train-seg", cmd_train_seg, "train the residual U-Net segmenter")
    with_config("pipeline", cmd_pipeline, "segment target images, then train DFF")
    ev = with_config("eval", cmd_eval, "evaluate a DFF checkpoint on the test domain")
    ev.add_argument("--checkpoint", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every operator")
    gc.set_defaults(func=cmd_gradcheck)

    gs = sub.add_parser("gen-synth", help="write a synthetic domain as PGM files")
    gs.add_argument("--kind", required=True, help=f"one of {', '.join(data.KINDS)}")
    gs.add_argument("--count", type=int, default=10)
    gs.add_argument("--size", type=int, default=64)
    gs.add_argument("--seed", type=int, default=0)
    gs.add_argument("--out")
    gs.set_defaults(func=cmd_gen_synth)
    return p


def _thread_limit():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=int(os.environ.get("DFF_THREADS", "1")))


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ddtl: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data.DataError, checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # domain/arch mismatches surface from the trainers as ValueError
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
