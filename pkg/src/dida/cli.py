"""Command-line entry point: ``dida {gen,train,attend,eval,gradcheck}``.

Settings resolve as defaults < ``--config FILE`` (key=value lines) < flags.
Every run prints its resolved settings. Exit codes: 0 success, 1 usage
error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels, pnm
from .attention import NoSalientRegion
from .encoder import EncoderConfig, init_encoder, load_checkpoint
from .evaluation import (grabcut_seeds, map_iou, parallel_map, scene_attention,
                         scene_ious, worker_count)
from .scenes import DataConfig, generate_scene, read_dataset, upsample_bilinear, write_dataset
from .train import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_range(text):
    try:
        lo, hi = text.split("..")
        return int(lo), int(hi)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected MIN..MAX, got {text!r}")


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")


# name -> (type, default, help); the same table drives flags and config-file keys
COMMANDS = {
    "gen": {
        "out": (str, None, "output directory"),
        "count": (int, 320, "number of scenes"),
        "size": (int, 32, "image height = width"),
        "seed": (int, 0, "generator seed"),
        "objects": (_int_range, (1, 3), "object count range MIN..MAX"),
        "object_size": (_int_range, (8, 14), "object size range MIN..MAX in pixels"),
        "background": (str, "noise", "noise | gradient"),
    },
    "train": {
        "data": (str, None, "dataset directory (with manifest.tsv)"),
        "steps": (int, 1000, "optimizer steps"),
        "lr": (float, 1e-3, "learning rate"),
        "lambda_dida": (float, 1.0, "weight of the difference-attention loss"),
        "lambda_con": (float, 1.0, "weight of the contrastive loss"),
        "seed": (int, 0, "seed for initialization and batching"),
        "out": (str, "encoder.dida", "checkpoint path"),
        "report": (str, "report.csv", "training report CSV path"),
        "batch_size": (int, 8, "scenes per step"),
        "eval_interval": (int, 100, "steps between held-out evaluations"),
        "optimizer": (str, "adam", "adam | sgd"),
        "widths": (_int_list, (8, 16, 32), "conv widths, comma-separated"),
        "feature_dim": (int, 32, "feature vector length"),
        "temperature": (float, 0.5, "contrastive temperature"),
    },
    "attend": {
        "ckpt": (str, None, "checkpoint path"),
        "image": (str, None, "input PPM"),
        "mask": (str, None, "saliency PGM"),
        "mode": (str, "dot", "dot | threshold"),
        "out": (str, None, "output prefix"),
    },
    "eval": {
        "ckpt": (str, None, "checkpoint path"),
        "data": (str, None, "dataset directory"),
        "out": (str, "iou.csv", "per-scene IoU CSV path"),
        "mode": (str, "dot", "dot | threshold"),
        "oracle": (bool, False, "use the saliency mask itself as the map (harness self-test)"),
    },
    "gradcheck": {
        "size": (str, "tiny", "tiny | small"),
        "tol": (float, 1e-4, "maximum allowed error for every suite"),
    },
}
REQUIRED = {"gen": ["out"], "train": ["data"], "attend": ["ckpt", "image", "mask", "out"],
            "eval": ["data"]}
CHOICES = {
    "gen": {"background": ("noise", "gradient")},
    "train": {"optimizer": ("adam", "sgd")},
    "attend": {"mode": ("dot", "threshold")},
    "eval": {"mode": ("dot", "threshold")},
    "gradcheck": {"size": ("tiny", "small")},
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dida", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dida {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value settings file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, (typ, _default, help_) in opts.items():
            flag = "--" + key.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                p.add_argument(flag, dest=key, type=typ, default=None, help=help_)
    return parser


def read_config_file(path, command) -> dict:
    opts = COMMANDS[command]
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in opts:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for {command}")
        typ = opts[key][0]
        try:
            out[key] = value.lower() in ("1", "true", "yes") if typ is bool else typ(value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}")
    return out


def resolve(args) -> dict:
    command = args.command
    settings = {k: d for k, (_t, d, _h) in COMMANDS[command].items()}
    if args.config:
        try:
            settings.update(read_config_file(args.config, command))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}")
    for key in COMMANDS[command]:
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    missing = [k for k in REQUIRED.get(command, []) if settings.get(k) is None]
    if command == "eval" and not settings["oracle"] and settings["ckpt"] is None:
        missing.append("ckpt")
    if missing:
        raise UsageError(f"dida {command}: missing required setting(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))
    for key, allowed in CHOICES[command].items():
        if settings[key] not in allowed:
            raise UsageError(f"--{key} must be one of {allowed}")
    return settings


def _print_settings(command, settings, out):
    print(f"[dida {command}] backend={kernels.BACKEND} threads={worker_count()}", file=out)
    for key in sorted(settings):
        value = settings[key]
        if isinstance(value, tuple):
            value = ",".join(map(str, value)) if key == "widths" else "..".join(map(str, value))
        print(f"  {key} = {value}", file=out)


# -- subcommands -----------------------------------------------------------------

def cmd_gen(s, out):
    lo, hi = s["objects"]
    smin, smax = s["object_size"]
    try:
        config = DataConfig(size=s["size"], min_objects=lo, max_objects=hi, min_size=smin,
                            max_size=smax, background=s["background"], seed=s["seed"])
    except ValueError as exc:
        raise UsageError(str(exc))
    if s["count"] < 1:
        raise UsageError("--count must be >= 1")
    scenes = parallel_map(lambda i: generate_scene(config, i), range(s["count"]))
    manifest = write_dataset(s["out"], scenes)
    print(f"wrote {len(scenes)} scenes and {manifest}", file=out)


def cmd_train(s, out):
    scenes = read_dataset(s["data"])
    if not scenes:
        raise RuntimeError(f"dataset {s['data']} is empty")
    size = scenes[0].image.shape[1]
    try:
        enc_cfg = EncoderConfig(3, size, s["widths"], s["feature_dim"], s["seed"])
        cfg = TrainConfig(steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"],
                          optimizer=s["optimizer"], lambda_dida=s["lambda_dida"],
                          lambda_contrastive=s["lambda_con"], eval_interval=s["eval_interval"],
                          seed=s["seed"], checkpoint=s["out"], temperature=s["temperature"])
    except ValueError as exc:
        raise UsageError(str(exc))
    t0 = time.perf_counter()
    _, report = train(init_encoder(enc_cfg), scenes, cfg)
    report.write_csv(s["report"])
    first, last = report.records[0], report.records[-1]
    print(f"trained {cfg.steps} steps in {time.perf_counter() - t0:.1f}s; "
          f"held-out IoU {first.mean_iou:.4f} -> {last.mean_iou:.4f}, "
          f"DiDA loss {first.dida_loss:.4f} -> {last.dida_loss:.4f}", file=out)
    print(f"wrote {s['out']} and {s['report']}", file=out)


def cmd_attend(s, out):
    encoder = load_checkpoint(s["ckpt"])
    image = pnm.read_image(s["image"])
    mask = pnm.read_image(s["mask"])
    size = encoder.config.input_size
    if image.ndim != 3 or image.shape != (encoder.config.input_channels, size, size):
        raise RuntimeError(f"image shape {image.shape} does not match checkpoint input {size}x{size}")
    if mask.shape != image.shape[1:]:
        raise RuntimeError(f"mask shape {mask.shape} does not match image {image.shape[1:]}")
    from .scenes import Scene
    amap = scene_attention(encoder, Scene(image, (mask > 0.5).astype(float)), s["mode"])
    raw = np.clip(upsample_bilinear(amap.raw.data, size, size), 0.0, 1.0)
    soft = np.clip(upsample_bilinear(amap.softened.data, size, size), 0.0, 1.0)
    prefix = s["out"]
    pnm.write_image(f"{prefix}_raw.pgm", raw)
    pnm.write_image(f"{prefix}_soft.pgm", soft)
    pnm.write_image(f"{prefix}_seeds.pgm", grabcut_seeds(raw))
    print(f"wrote {prefix}_raw.pgm, {prefix}_soft.pgm, {prefix}_seeds.pgm", file=out)


def cmd_eval(s, out):
    scenes = read_dataset(s["data"])
    if not scenes:
        raise RuntimeError(f"dataset {s['data']} is empty")
    if s["oracle"]:
        ious = [map_iou(sc.saliency, sc.saliency) for sc in scenes]
    else:
        ious = scene_ious(load_checkpoint(s["ckpt"]), scenes, s["mode"])
    mean = float(np.mean(ious))
    lines = ["index,iou"] + [f"{sc.index},{v!r}" for sc, v in zip(scenes, ious)] + [f"mean,{mean!r}"]
    Path(s["out"]).write_text("\n".join(lines) + "\n", encoding="ascii")
    print(f"mean IoU {mean:.6f} over {len(scenes)} scenes; wrote {s['out']}", file=out)


def cmd_gradcheck(s, out):
    from .gradcheck import run_all
    if s["tol"] < 0:
        raise UsageError("--tol must be >= 0")
    t0 = time.perf_counter()
    results = run_all(s["size"])
    ok = True
    for r in results:
        passed = r.passed(s["tol"])
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {r.name:<36} worst {r.metric} {r.worst:.3e}  "
              f"({r.checks} checks, {r.seconds:.2f}s)", file=out)
    print(f"{'all suites passed' if ok else 'FAILED'} at tol {s['tol']:g} "
          f"in {time.perf_counter() - t0:.1f}s", file=out)
    return EXIT_OK if ok else EXIT_RUNTIME


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "attend": cmd_attend, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        args = build_parser().parse_args(argv)
        settings = resolve(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s", stream=sys.stderr)
        _print_settings(args.command, settings, out)
        code = HANDLERS[args.command](settings, out)
        return EXIT_OK if code is None else code
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError, NoSalientRegion, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
