"""``zippo`` command line: data, training, the three inference tasks, and evaluation.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
A ``--config`` file holds ``key=value`` lines naming the selected command's
options (dashes or underscores); flags given on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .ablation import ordering_summary, run_ablation
from .checkpoint import CheckpointError, load_sections, save_sections
from .codec import Codec, CodecConfig, train_codec
from .imageio import (load_manifest_arrays, read_image, read_matte, write_image, write_matte, write_rgba)
from .labels import (BINARIZE_THRESHOLD, IOU_THRESHOLD, TRIMAP_RADIUS, available_refiners, composite, curate)
from .metrics import evaluate_pairs, read_pairs_manifest
from .sampler import SampleRequest, batch_sample
from .synth import BACKGROUNDS, CLASS_NAMES, SynthConfig, class_name, prompt_id, synth_dataset
from .tensor import ShapeError
from .trainer import (NonFiniteLossError, TaskMode, TrainConfig, load_checkpoint, smoothed, train)
from .unet import EMPTY_PROMPT, DistributionIdentifier, UNetConfig

log = logging.getLogger("zippo")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument helpers


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _color(text: str) -> tuple[float, float, float]:
    """``r,g,b`` in 0..255 -> floats in [0,1]."""
    parts = text.split(",")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"color must be r,g,b integers, got {text!r}") from None
    if len(vals) != 3 or any(not 0 <= v <= 255 for v in vals):
        raise argparse.ArgumentTypeError(f"color must be three values in 0..255, got {text!r}")
    return tuple(v / 255.0 for v in vals)


def _prompt(text: str) -> int:
    """Class name or integer prompt id."""
    if text.isdigit():
        return int(text)
    try:
        return prompt_id(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


# short config keys -> option names; each alias applies where its first available target exists
CONFIG_ALIASES = {
    "batch": ("batch_size",),
    "T": ("timesteps",),
    "ddim_steps": ("sample_steps", "steps"),
    "data": ("manifest",),
    "out": ("out_dir",),
}


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Validate and convert config-file values, installing them as defaults."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    sampling = "checkpoint" in actions
    for alias, targets in CONFIG_ALIASES.items():
        if alias not in values or alias in actions:
            continue
        # "ddim_steps" must not land on a training command's optimizer steps
        usable = [t for t in targets if t in actions and (t != "steps" or sampling)]
        if usable:
            values[usable[0]] = values.pop(alias)
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys for this command: {', '.join(unknown)}")
    defaults = {}
    for key, raw in values.items():
        action = actions[key]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
            defaults[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"config key {key}: {exc}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key}: {value!r} not in {list(action.choices)}")
        defaults[key] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(resolution=args.res, count=args.count, classes=args.classes, background=args.bg,
                      sigma=args.sigma, seed=args.seed)
    try:
        cfg.validate(args.factor)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records = synth_dataset(cfg, args.out_dir, factor=args.factor)
    print(f"wrote {len(records)} pairs to {Path(args.out_dir) / 'manifest.tsv'}")
    return EXIT_OK


def cmd_train_codec(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    images, _, _, _ = load_manifest_arrays(manifest)
    if args.identity:
        config = CodecConfig.identity()
    else:
        config = CodecConfig(latent_channels=args.latent_channels, factor=args.factor, base_width=args.width)
    codec, report = train_codec(images, config, steps=args.steps, lr=args.lr, seed=args.seed,
                                batch_size=args.batch_size)
    if report.losses and not np.isfinite(report.losses[-1]):
        raise NonFiniteLossError("codec", len(report.losses) - 1, report.losses[-1])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_sections(out / "codec.zippo", codec.to_sections())
    with open(out / "codec_history.csv", "w") as fh:
        fh.write("step,loss\n")
        for i, v in enumerate(report.losses):
            fh.write(f"{i},{v!r}\n")
    final = smoothed(report.losses)[-1] if report.losses else 0.0
    print(f"codec: final smoothed loss {final:.6f}, holdout mse {report.holdout_mse:.6f}, "
          f"latent scale {report.latent_scale:.4f}")
    return EXIT_OK


def _load_codec(path) -> Codec:
    if path is None:
        return Codec(CodecConfig.identity())
    return Codec.from_sections(load_sections(_existing(path, "codec checkpoint")))


def cmd_train(args) -> int:
    manifest = _existing(args.manifest, "manifest")
    codec = _load_codec(args.codec)
    vocab = args.vocab
    images, mattes, prompts, _ = load_manifest_arrays(manifest, vocab=vocab)
    config = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                         mode=TaskMode(args.mode), T=args.timesteps, log_every=args.log_every)
    ucfg = UNetConfig(base_width=args.width, vocab=vocab)
    result = train((images, mattes, prompts), config, codec, out_dir=args.out_dir, unet_config=ucfg)
    parts = []
    for col in ("l_r2m", "l_m2r", "l_joint"):
        vals = [getattr(h, col) for h in result.history if getattr(h, col) is not None]
        if vals:
            parts.append(f"{col} {smoothed(vals)[-1]:.5f}")
    print(f"trained {config.mode.value} for {config.steps} steps: " + ", ".join(parts))
    return EXIT_OK


def _bundle(args):
    return load_checkpoint(_existing(args.checkpoint, "checkpoint"))


def cmd_matte(args) -> int:
    b = _bundle(args)
    out = Path(args.out_dir)
    reqs, names = [], []
    for i, path in enumerate(args.inputs):
        img = read_image(_existing(path, "input image"))
        reqs.append(SampleRequest(DistributionIdentifier.R2M, img, steps=args.steps, seed=args.seed + i))
        names.append(Path(path).stem)
    for name, matte in zip(names, _sample_by_size(reqs, b)):
        write_matte(out / f"{name}_matte.png", matte)
    print(f"wrote {len(reqs)} matte(s) to {out}")
    return EXIT_OK


def cmd_paint(args) -> int:
    b = _bundle(args)
    _check_prompt(args.prompt, b.model.config.vocab)
    out = Path(args.out_dir)
    reqs, names = [], []
    for i, path in enumerate(args.inputs):
        matte = read_matte(_existing(path, "input matte"))
        reqs.append(SampleRequest(DistributionIdentifier.M2R, matte, prompt=args.prompt, steps=args.steps,
                                  seed=args.seed + i))
        names.append(Path(path).stem)
    for name, image in zip(names, _sample_by_size(reqs, b)):
        write_image(out / f"{name}_paint.png", image)
    print(f"wrote {len(reqs)} image(s) to {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    b = _bundle(args)
    _check_prompt(args.prompt, b.model.config.vocab)
    out = Path(args.out_dir)
    reqs = [SampleRequest(DistributionIdentifier.JOINT, prompt=args.prompt, steps=args.steps, seed=args.seed + i,
                          size=(args.size, args.size)) for i in range(args.count)]
    results = _sample_by_size(reqs, b)
    for i, res in enumerate(results):
        stem = f"sample_{i:03d}"
        write_image(out / f"{stem}_color.png", res.color)
        write_matte(out / f"{stem}_matte.png", res.alpha)
        write_rgba(out / f"{stem}_rgba.png", res.color, res.alpha)
        if args.bg is not None:
            bg = np.broadcast_to(np.asarray(args.bg, dtype=np.float32), res.color.shape)
            write_image(out / f"{stem}_over_bg.png", composite(res.color, res.alpha, bg))
    print(f"wrote {len(results)} transparent image(s) to {out}")
    return EXIT_OK


def _check_prompt(pid: int, vocab: int) -> None:
    if not 0 <= pid < vocab:
        raise UsageError(f"prompt id {pid} outside the model's vocabulary of {vocab}")


def _sample_by_size(reqs, bundle):
    """Run requests batched per pixel size, results in request order."""
    try:
        groups: dict[tuple[int, int], list[int]] = {}
        for i, r in enumerate(reqs):
            groups.setdefault(r.pixel_size, []).append(i)
        results = [None] * len(reqs)
        for idx in groups.values():
            for i, res in zip(idx, batch_sample([reqs[i] for i in idx], bundle.model, bundle.codec, bundle.schedule)):
                results[i] = res
    except (ValueError, ShapeError) as exc:
        raise UsageError(str(exc)) from None
    return results


def cmd_eval(args) -> int:
    pairs = read_pairs_manifest(_existing(args.pairs, "pairs manifest"))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = evaluate_pairs(pairs, csv_path=out / "metrics.csv", theta_step=args.theta_step,
                         phi_threshold=args.phi_threshold)
    for name, err in res.errors:
        print(f"skipped {name}: {err}", file=sys.stderr)
    if pairs and not res.rows:
        print("every item failed to evaluate", file=sys.stderr)
        return EXIT_USAGE
    m = res.mean
    print(f"evaluated {len(res.rows)}/{len(pairs)}: SAD {m['sad']:.4f} MSE {m['mse']:.6f} MAD {m['mad']:.6f} "
          f"CONN {m['conn']:.4f}")
    return EXIT_OK


def cmd_filter_labels(args) -> int:
    """Pairs manifest: ``matte<TAB>segmask[<TAB>name]``."""
    pairs = read_pairs_manifest(_existing(args.pairs, "pairs manifest"))
    out = Path(args.out_dir)
    (out / "refined").mkdir(parents=True, exist_ok=True)
    kept, rejects, failures = [], [], 0
    for name, matte_path, mask_path in pairs:
        try:
            matte = read_matte(matte_path)
            mask = read_matte(mask_path) >= 0.5
            keep, score, refined = curate(matte, mask, h=args.h, iou_threshold=args.iou_threshold,
                                          radius=args.radius, refiner=args.refiner)
        except (OSError, ValueError) as exc:
            failures += 1
            rejects.append(f"{name}\tnan\terror: {exc}")
            continue
        if keep:
            rel = f"refined/{name}.png"
            write_matte(out / rel, refined)
            kept.append(f"{name}\t{rel}\t{score!r}")
        else:
            rejects.append(f"{name}\t{score!r}\tiou not above {args.iou_threshold!r}")
    (out / "kept.tsv").write_text("".join(line + "\n" for line in kept))
    (out / "rejects.tsv").write_text("".join(line + "\n" for line in rejects))
    print(f"kept {len(kept)}, rejected {len(rejects) - failures}, failed {failures}")
    if pairs and failures == len(pairs):
        return EXIT_USAGE
    return EXIT_OK


def cmd_composite(args) -> int:
    fg = read_image(_existing(args.fg, "foreground"))
    alpha = read_matte(_existing(args.alpha, "alpha matte"))
    if args.bg_image is not None:
        bg = read_image(_existing(args.bg_image, "background"))
    else:
        bg = np.broadcast_to(np.asarray(args.bg, dtype=np.float32), fg.shape)
    try:
        result = composite(fg, alpha, bg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir) / args.name
    write_rgba(out, result, np.ones(result.shape[:2], dtype=np.float32))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    codec = _load_codec(args.codec)
    images, mattes, prompts, _ = load_manifest_arrays(_existing(args.manifest, "manifest"), vocab=args.vocab)
    test_images, test_mattes, _, _ = load_manifest_arrays(_existing(args.test_manifest, "test manifest"))
    config = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                         T=args.timesteps, log_every=args.log_every)
    ucfg = UNetConfig(base_width=args.width, vocab=args.vocab)
    result = run_ablation((images, mattes, prompts), test_images, test_mattes, codec, config,
                          modes=[TaskMode(m) for m in args.modes], unet_config=ucfg,
                          sample_steps=args.sample_steps, out_dir=args.out_dir)
    print("SAD ordering: " + ordering_summary(result))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw")
    common.add_argument("--config", default=None, help="key=value file of option defaults")
    common.add_argument("--out-dir", default="out", help="directory for all outputs")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="cap on BLAS worker threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="zippo", description="Joint RGB/matte latent diffusion toolkit.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=fn)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic image/matte dataset and manifest")
    p.add_argument("--count", type=int, default=100, help="number of samples")
    p.add_argument("--res", type=int, default=32, help="square resolution in pixels")
    p.add_argument("--bg", choices=BACKGROUNDS, default="black", help="background mode")
    p.add_argument("--classes", type=_csv_list, default=CLASS_NAMES, help="comma-separated class subset")
    p.add_argument("--sigma", type=float, default=1.0, help="edge blur in pixels")
    p.add_argument("--factor", type=int, default=4, help="codec downscale factor the resolution must divide")

    p = add("train-codec", cmd_train_codec, "fit the image autoencoder on a manifest's RGB images")
    p.add_argument("--manifest", required=True, help="dataset manifest (only images are used)")
    p.add_argument("--steps", type=int, default=2000, help="optimizer steps")
    p.add_argument("--lr", type=float, default=2e-3, help="peak learning rate")
    p.add_argument("--batch-size", type=int, default=32, help="images per step")
    p.add_argument("--latent-channels", type=int, default=4, help="latent channels C")
    p.add_argument("--factor", type=int, default=4, help="spatial downscale factor")
    p.add_argument("--width", type=int, default=CodecConfig.base_width, help="hidden channel width")
    p.add_argument("--identity", action="store_true", help="write a pixel-space identity codec instead")

    def training_opts(p, steps):
        p.add_argument("--manifest", required=True, help="training manifest")
        p.add_argument("--codec", default=None, help="codec checkpoint (omit for pixel space)")
        p.add_argument("--steps", type=int, default=steps, help="optimizer steps")
        p.add_argument("--batch-size", type=int, default=16, help="samples per step (before branch replication)")
        p.add_argument("--lr", type=float, default=1e-3, help="peak learning rate")
        p.add_argument("--timesteps", type=int, default=200, help="diffusion steps T")
        p.add_argument("--width", type=int, default=UNetConfig.base_width, help="denoiser base width")
        p.add_argument("--vocab", type=int, default=UNetConfig.vocab, help="prompt vocabulary size")
        p.add_argument("--log-every", type=int, default=500, help="steps between progress lines")

    p = add("train", cmd_train, "train the denoiser on a frozen codec")
    training_opts(p, 20000)
    p.add_argument("--mode", choices=[m.value for m in TaskMode], default="full", help="which branches to train")

    def sampling_opts(p):
        p.add_argument("--checkpoint", required=True, help="trained checkpoint")
        p.add_argument("--steps", type=int, default=20, help="DDIM steps")

    p = add("matte", cmd_matte, "estimate alpha mattes for RGB images")
    sampling_opts(p)
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="input image file(s)")

    p = add("paint", cmd_paint, "paint RGB images for alpha mattes")
    sampling_opts(p)
    p.add_argument("--in", dest="inputs", nargs="+", required=True, help="input matte file(s)")
    p.add_argument("--prompt", type=_prompt, default=EMPTY_PROMPT, help="class name or prompt id (0 = empty)")

    p = add("generate", cmd_generate, "generate transparent images from a prompt")
    sampling_opts(p)
    p.add_argument("--prompt", type=_prompt, default=EMPTY_PROMPT, help="class name or prompt id (0 = empty)")
    p.add_argument("--count", type=int, default=1, help="number of samples")
    p.add_argument("--size", type=int, default=32, help="square output size in pixels")
    p.add_argument("--bg", type=_color, default=None, help="also write a composite over this r,g,b color")

    p = add("eval", cmd_eval, "score predicted mattes against ground truth")
    p.add_argument("--pairs", required=True, help="manifest of pred<TAB>gt[<TAB>name] lines")
    p.add_argument("--theta-step", type=float, default=0.1, help="threshold spacing for CONN")
    p.add_argument("--phi-threshold", type=float, default=0.15, help="CONN distance cut-off")

    p = add("filter-labels", cmd_filter_labels, "keep pseudo-labels that agree with a segmentation mask")
    p.add_argument("--pairs", required=True, help="manifest of matte<TAB>segmask[<TAB>name] lines")
    p.add_argument("--h", type=int, default=BINARIZE_THRESHOLD, help="8-bit binarization threshold")
    p.add_argument("--iou-threshold", type=float, default=IOU_THRESHOLD, help="keep if IoU is strictly above")
    p.add_argument("--radius", type=int, default=TRIMAP_RADIUS, help="trimap unknown-band dilation radius")
    p.add_argument("--refiner", choices=available_refiners(), default="identity", help="trimap-based refiner")

    p = add("composite", cmd_composite, "alpha-blend a foreground over a background")
    p.add_argument("--fg", required=True, help="foreground RGB file")
    p.add_argument("--alpha", required=True, help="alpha matte file")
    p.add_argument("--bg", type=_color, default=(0.0, 0.0, 0.0), help="background r,g,b color")
    p.add_argument("--bg-image", default=None, help="background image file (overrides --bg)")
    p.add_argument("--name", default="composite.png", help="output file name")

    p = add("ablate", cmd_ablate, "compare single/dual/full training at one budget")
    training_opts(p, 2000)
    p.add_argument("--test-manifest", required=True, help="held-out manifest for R2M scoring")
    p.add_argument("--modes", type=_csv_list, default=tuple(m.value for m in TaskMode), help="modes to run")
    p.add_argument("--sample-steps", type=int, default=20, help="DDIM steps when scoring")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # config values must be installed before the real parse so they can satisfy required options
    command = next((a for a in argv if not a.startswith("-")), None)
    commands = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices
    if command in commands:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config", default=None)
        known, _ = pre.parse_known_args(argv[argv.index(command) + 1 :])
        if known.config is not None:
            _apply_config(commands[command], read_config_file(known.config))
    args = parser.parse_args(argv)
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    if args.command == "ablate":
        for m in args.modes:
            if m not in {t.value for t in TaskMode}:
                raise UsageError(f"unknown mode {m!r}")
    if args.command in ("gen-data",):
        for c in args.classes:
            if c not in CLASS_NAMES:
                raise UsageError(f"unknown class {c!r}; expected one of {CLASS_NAMES}")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"zippo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"zippo: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"zippo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"zippo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


__all__ = ["build_parser", "parse_args", "main", "read_config_file", "class_name"]
