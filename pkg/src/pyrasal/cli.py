"""Command-line entry point: ``pyrasal {train,infer,eval,gradcheck,synth}``.

Exit codes: 0 ok, 1 evaluation skipped unmatched files, 2 configuration or input
error, 3 training diverged, 4 checkpoint error, 5 gradient check failed.
Log verbosity follows the ``PYRASAL_LOG`` environment variable (default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_UNMATCHED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5

log = logging.getLogger("pyrasal")


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_config(args):
    from .config import RunConfig
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for item in getattr(args, "set", None) or []:
        key, _, value = item.partition("=")
        cfg.set(key.strip(), value.strip())
    cfg.validate()
    return cfg


# -- subcommands ------------------------------------------------------------------
def cmd_train(args) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .dataset import read_manifest
    from .train import TrainingDiverged, train

    try:
        cfg = _load_config(args)
        if not cfg.manifest:
            raise ConfigError("manifest", "no manifest path given")
        if not Path(cfg.manifest).is_file():
            raise ConfigError("manifest", f"manifest file {cfg.manifest} does not exist")
        manifest = read_manifest(cfg.manifest)
        manifest.validate()
        tcfg = cfg.train_config()
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    except (FileNotFoundError, ValueError) as e:
        return _fail(EXIT_CONFIG, f"config key 'manifest': {e}")

    def report(rec):
        log.info("step %d epoch %d lr %.3g total %.5f", rec["step"], rec["epoch"], rec["lr"], rec["total"])

    try:
        result = train(manifest, tcfg, out_dir=cfg.out_dir, resume=args.resume, on_step=report)
    except TrainingDiverged as e:
        return _fail(EXIT_DIVERGED, str(e))
    except (CheckpointError, FileNotFoundError) as e:
        return _fail(EXIT_CHECKPOINT, f"cannot resume: {e}")
    except ValueError as e:
        return _fail(EXIT_CONFIG, str(e))
    last = result.history[-1]["total"] if result.history else float("nan")
    print(f"trained {result.step} steps over {result.epoch} epochs; last loss {last:.5f}")
    if result.checkpoints:
        print(f"checkpoint: {result.checkpoints[-1]}")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .checkpoint import CheckpointError, load_checkpoint
    from .config import ConfigError
    from .dataset import load_image, resize_bilinear, save_image
    from .model import AblationMode
    from .train import load_model

    try:
        cfg = _load_config(args)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    try:
        ckpt = load_checkpoint(args.ckpt)
        want = cfg.train_config()
        from .model import ModelConfig
        stored = ModelConfig.from_dict(ckpt.config["model"])
        if stored != want.model or ckpt.config.get("mode") != want.mode.value:
            raise CheckpointError("checkpoint architecture or mode differs from the config")
        model = load_model(ckpt)
    except (CheckpointError, OSError, KeyError, TypeError) as e:
        return _fail(EXIT_CHECKPOINT, str(e))
    in_dir, out_dir = Path(args.input), Path(args.output)
    images = sorted(p for p in in_dir.iterdir() if p.suffix.lower() == ".ppm") if in_dir.is_dir() else []
    if not images:
        return _fail(EXIT_CONFIG, f"no .ppm images in {in_dir}")
    needs_depth = model.mode is AblationMode.M1_PROVIDED_DEPTH
    if needs_depth and not args.depth:
        return _fail(EXIT_CONFIG, "m1_provided_depth inference needs --depth DIR")
    enc = model.cfg.encoder
    out_dir.mkdir(parents=True, exist_ok=True)
    for path in images:
        try:
            rgb = load_image(path)
            depth = load_image(Path(args.depth) / f"{path.stem}.pgm")[:1] if needs_depth else None
        except (OSError, ValueError) as e:
            return _fail(EXIT_CONFIG, str(e))
        h, w = rgb.shape[1:]
        x = resize_bilinear(rgb, enc.input_h, enc.input_w)[None]
        d = None if depth is None else np.clip(resize_bilinear(depth, enc.input_h, enc.input_w), 0, 1)[None]
        sal = model.predict(np.clip(x, 0, 1), d)[0]
        if (h, w) != sal.shape[1:]:
            sal = np.clip(resize_bilinear(sal, h, w), 0, 1)
        save_image(out_dir / f"{path.stem}.pgm", sal)
    print(f"wrote {len(images)} saliency maps to {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_dir

    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            return _fail(EXIT_CONFIG, f"{d} is not a directory")
    try:
        res = evaluate_dir(args.pred, args.gt, args.out, beta2=args.beta2, f_reduce=args.f_reduce)
    except ValueError as e:
        return _fail(EXIT_CONFIG, str(e))
    s = res.summary
    print(f"{'images':>8} {'mae':>8} {'f_beta':>8} {'e':>8} {'s':>8}")
    print(f"{len(res.per_image):>8} {s.mae:>8.3f} {s.f_beta:>8.3f} {s.e_measure:>8.3f} {s.s_measure:>8.3f}")
    if res.unmatched:
        for path in res.unmatched:
            print(f"unmatched: {path}", file=sys.stderr)
        return EXIT_UNMATCHED
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    from .config import ConfigError
    from .tensor import inject_grad_fault

    try:
        seed = _load_config(args).seed if args.config else 0
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    seed = args.seed if args.seed is not None else seed
    names = [n.strip() for n in args.ops.split(",") if n.strip()] if args.ops else None
    try:
        if args.inject_fault:
            with inject_grad_fault(args.inject_fault):
                results = gradcheck.run(names, seed=seed)
        else:
            results = gradcheck.run(names, seed=seed)
    except KeyError as e:
        return _fail(EXIT_CONFIG, str(e.args[0]))
    print(gradcheck.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        return _fail(EXIT_GRADCHECK, f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .dataset import generate_synthetic

    if args.n < 1:
        return _fail(EXIT_CONFIG, "--n must be >= 1")
    manifest = generate_synthetic(args.out, args.n, args.size, args.seed)
    print(f"wrote {len(manifest)} samples; manifest {Path(args.out) / 'manifest.txt'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pyrasal", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write saliency maps for a directory of .ppm images")
    i.add_argument("--config", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--output", required=True)
    i.add_argument("--depth", help="directory of same-stem .pgm depth maps (m1 mode)")
    i.add_argument("--set", action="append", metavar="KEY=VALUE")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted maps against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", help="where metrics.csv / summary.json go (default: --pred)")
    e.add_argument("--beta2", type=float, default=0.3)
    e.add_argument("--f-reduce", choices=("max", "mean"), default="max")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--config")
    g.add_argument("--ops", help="comma-separated case names (default: all)")
    g.add_argument("--seed", type=int)
    g.add_argument("--inject-fault", metavar="OP", help="test hook: corrupt the backward of OP")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("PYRASAL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
