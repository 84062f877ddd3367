"""``layersplit`` command-line entry point.

Every command writes a ``manifest.json`` beside its outputs. Exit codes: 0 on
success, 2 for usage or config errors, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import ConfigError, LayersplitError
from .imageio import read_image, write_image

logger = logging.getLogger("layersplit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _now():
    return datetime.now(timezone.utc).isoformat()


def write_manifest(out_dir, command, config, seed, artifacts, started):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "artifacts": [str(a) for a in artifacts],
        "version": __version__,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def cmd_synth(args):
    from .synth import CLI_MODEL_NAMES, dump_pair, load_corpus, sample_pair

    corpus = load_corpus(args.root, args.test_fraction, args.seed)
    rng = np.random.default_rng(args.seed)
    tag = CLI_MODEL_NAMES[args.model]
    artifacts = []
    for k in range(args.count):
        pair = sample_pair(corpus, tag, rng, args.patch_size, split=args.split)
        artifacts += dump_pair(pair, args.out, f"{k:05d}")
    config = {"root": str(args.root), "model_tag": tag, "count": args.count,
              "patch_size": args.patch_size, "test_fraction": args.test_fraction,
              "split": args.split}
    return args.out, config, artifacts


def _read_pair_dir(root):
    root = Path(root)
    pairs = []
    for first in sorted(root.glob("*_i1.png")):
        second = first.with_name(first.name.replace("_i1.png", "_i2.png"))
        if second.exists():
            pairs.append((read_image(first), read_image(second)))
    if not pairs:
        raise LayersplitError(f"no *_i1.png / *_i2.png pairs in {root}")
    return pairs


def cmd_train(args):
    from .config import validate_config
    from .model import save_checkpoint
    from .synth import load_corpus
    from .train import save_log, train, train_on_sequence

    cfg = validate_config(args.config, args.override)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pt"
    artifacts = [ckpt]
    if cfg.mode == "sequence":
        outputs, logs, net = train_on_sequence(_read_pair_dir(args.root), cfg, return_logs=True)
        save_checkpoint(net, ckpt, extra={"config": cfg.to_dict()})
        for k, (b1, b2) in enumerate(outputs):
            artifacts.append(write_image(out / f"{k:05d}_b1.png", b1))
            artifacts.append(write_image(out / f"{k:05d}_b2.png", b2))
        for k, log in enumerate(logs):
            save_log(log, out / f"train_log_{k:05d}.jsonl")
            artifacts.append(out / f"train_log_{k:05d}.jsonl")
    else:
        corpus = load_corpus(args.root, args.test_fraction, cfg.seed)
        _, log = train(cfg, corpus, ckpt)
        save_log(log, out / "train_log.jsonl")
        artifacts.append(out / "train_log.jsonl")
    return out, {**cfg.to_dict(), "root": str(args.root)}, artifacts


def cmd_infer(args):
    from ._validation import image_to_tensor, tensor_to_image
    from .model import load_checkpoint

    import torch

    net = load_checkpoint(args.ckpt)
    image = read_image(args.input)
    with torch.no_grad():
        y = net.predict(image_to_tensor(image), args.role, args.model_tag)
    path = write_image(args.out, tensor_to_image(y))
    config = {"ckpt": str(args.ckpt), "input": str(args.input), "role": args.role,
              "model_tag": args.model_tag}
    return Path(args.out).parent, config, [path]


def cmd_eval(args):
    from .evaluation import evaluate, load_eval_dir

    report = evaluate(args.ckpt, load_eval_dir(args.data), args.model_tag)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    csv_path = out.with_suffix(".csv")
    report.write_csv(csv_path)
    config = {"ckpt": str(args.ckpt), "data": str(args.data), "model_tag": args.model_tag}
    return out.parent, config, [out, csv_path]


def _weights(args):
    from .losses import LossWeights

    return LossWeights(args.lambda1, args.lambda2)


def cmd_toy(args):
    from .analysis import image_oracle, toy_images

    out = Path(args.out)
    i1, i2, gt = toy_images(args.size)
    b, energy = image_oracle(i1, i2, _weights(args))
    artifacts = [write_image(out / "i1.png", i1), write_image(out / "i2.png", i2),
                 write_image(out / "gt.png", gt), write_image(out / "oracle_b.png", b)]
    config = {"size": args.size, "lambda1": args.lambda1, "lambda2": args.lambda2,
              "oracle_energy": energy}
    return out, config, artifacts


def cmd_analyze(args):
    from .analysis import active_channels, feature_grid, image_oracle
    from .model import load_checkpoint

    out = Path(args.out)
    if args.what == "toy":
        return cmd_toy(args)
    if args.what == "oracle":
        i1, i2 = read_image(args.i1), read_image(args.i2)
        b, energy = image_oracle(i1, i2, _weights(args))
        path = write_image(out, b)
        return out.parent, {"i1": args.i1, "i2": args.i2, "lambda1": args.lambda1,
                            "lambda2": args.lambda2, "energy": energy}, [path]
    net = load_checkpoint(args.ckpt)
    if args.what == "channels":
        probes = [read_image(p) for p in sorted(Path(args.probes).glob("*.png"))]
        if not probes:
            raise LayersplitError(f"no PNG probe images in {args.probes}")
        report = active_channels(net, probes, args.threshold, args.model_tag)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report.to_dict(), indent=2))
        return out.parent, {"ckpt": args.ckpt, "probes": args.probes,
                            "threshold": args.threshold}, [out]
    image = read_image(args.input)
    grid = feature_grid(net, image, net.get_code(args.role, args.model_tag))
    path = write_image(out, grid)
    return out.parent, {"ckpt": args.ckpt, "input": args.input, "role": args.role}, [path]


def _add_lambdas(p):
    p.add_argument("--lambda1", type=float, default=15.0)
    p.add_argument("--lambda2", type=float, default=20.0)


def build_parser():
    parser = _Parser(prog="layersplit", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="synthesize training pairs from an image directory")
    p.add_argument("--root", required=True)
    p.add_argument("--model", choices=["linear", "subclip"], required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--test-fraction", type=float, default=0.05)
    p.add_argument("--split", choices=["train", "test"], default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a YAML config")
    p.add_argument("--config")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--root", required=True,
                   help="image corpus, or a directory of *_i1/*_i2 pairs in sequence mode")
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=0.05)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run a checkpoint on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--role", choices=["background", "reflection"], default="background")
    p.add_argument("--model-tag", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a checkpoint on a directory of test images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--model-tag", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="oracle, channel, feature and toy analyses")
    p.add_argument("what", choices=["oracle", "channels", "features", "toy"])
    p.add_argument("--out", required=True)
    p.add_argument("--i1")
    p.add_argument("--i2")
    p.add_argument("--ckpt")
    p.add_argument("--probes")
    p.add_argument("--in", dest="input")
    p.add_argument("--role", choices=["background", "reflection"], default="background")
    p.add_argument("--model-tag", default=None)
    p.add_argument("--threshold", type=float, default=1.0)
    p.add_argument("--size", type=int, default=64)
    _add_lambdas(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("toy", help="write the toy pair and its oracle background")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    _add_lambdas(p)
    p.set_defaults(func=cmd_toy)
    return parser


_REQUIRED = {"oracle": ("i1", "i2"), "channels": ("ckpt", "probes"),
             "features": ("ckpt", "input"), "toy": ()}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "analyze":
            missing = [f"--{k}" for k in _REQUIRED[args.what] if getattr(args, k) is None]
            if missing:
                parser.error(f"analyze {args.what} requires {', '.join(missing)}")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    started = _now()
    t0 = time.perf_counter()
    try:
        out_dir, config, artifacts = args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except (LayersplitError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    config = {**config, "elapsed_s": round(time.perf_counter() - t0, 3)}
    write_manifest(out_dir, argv_command(args), config, args.seed, artifacts, started)
    return 0


def argv_command(args):
    return args.command if args.command != "analyze" else f"analyze {args.what}"


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
