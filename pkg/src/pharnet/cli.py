"""Command-line entry point: ``pharnet <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("pharnet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class CommandError(RuntimeError):
    """A runtime failure reported to the user without a traceback."""


def _residual_layers(text: str) -> tuple[int, ...]:
    try:
        layers = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list such as 1,2,3,4, got {text!r}") from None
    if not set(layers) <= {1, 2, 3, 4}:
        raise argparse.ArgumentTypeError(f"residual layers must be drawn from 1..4, got {text!r}")
    return layers


# -- train ---------------------------------------------------------------------------


def cmd_train(args, parser) -> int:
    from .config import TrainConfig, desk_config
    from .data import Corpus, synth_corpus
    from .training import train_loop

    if args.ablation and args.residual_layers is not None:
        parser.error("--ablation and --residual-layers are mutually exclusive")
    out = Path(args.out)
    if args.data == "synth":
        manifest = synth_corpus(out / "corpus", 16, 16, max(args.size or 64, 64), args.seed)
    else:
        manifest = args.data
    corpus = Corpus.from_manifest(manifest)
    overrides = {
        k: v
        for k, v in dict(
            max_steps=args.steps,
            learning_rate=args.lr,
            scale=args.scale,
            image_size=args.size,
            seed=args.seed,
            batch_size=args.batch_size,
            checkpoint_every=args.checkpoint_every,
        ).items()
        if v is not None
    }
    config = desk_config(**overrides) if args.desk else TrainConfig(**overrides)
    if args.ablation:
        config = config.with_ablation(args.ablation)
    if args.residual_layers is not None:
        config.residual_layers = args.residual_layers
        config.validate()
    state, lines = train_loop(corpus, config, out_dir=out)
    if lines:
        print(lines[-1])
    print(f"trained {state.step} steps; checkpoints and loss.log in {out}")
    return EXIT_OK


# -- harmonize -------------------------------------------------------------------------


def pad_to_multiple(img: np.ndarray, multiple: int, mode: str) -> np.ndarray:
    """Pad ``[C, H, W]`` at the bottom/right up to a multiple of ``multiple``."""
    _, h, w = img.shape
    ph, pw = (-h) % multiple, (-w) % multiple
    if not (ph or pw):
        return img
    pads = ((0, 0), (0, ph), (0, pw))
    if mode == "zero":
        return np.pad(img, pads)
    return np.pad(img, pads, mode="symmetric")


def cmd_harmonize(args, parser) -> int:
    from . import tensor as T
    from .checkpoint import load_checkpoint
    from .imageio import load_mask, load_rgb, save_image, save_mask
    from .tensor import Tensor

    comp = load_rgb(args.composite)
    bg = load_rgb(args.background)
    mask = load_mask(args.mask)
    if comp.shape != bg.shape:
        raise CommandError(f"composite {comp.shape[1:]} and background {bg.shape[1:]} sizes differ")
    if mask.shape[1:] != comp.shape[1:]:
        raise CommandError(f"mask size {mask.shape[1:]} does not match image size {comp.shape[1:]}")
    if not mask.any():
        raise CommandError("mask is empty: nothing to harmonize")
    h, w = comp.shape[1:]
    if h % 8 or w % 8:
        log.warning("image size %dx%d is not a multiple of 8; padding for inference and cropping the result", h, w)
    comp_p = pad_to_multiple(comp, 8, "reflect")[None]
    bg_p = pad_to_multiple(bg, 8, "reflect")[None]
    mask_p = pad_to_multiple(mask, 8, "zero")[None]

    state = load_checkpoint(args.checkpoint)
    gen = state.generator
    gen.train(False)

    def run():
        with T.no_grad():
            return gen.harmonize(Tensor(comp_p), Tensor(bg_p), Tensor(mask_p))

    out = run()
    save_image(out.output.data[0, :, :h, :w], args.out)
    if args.soft_mask:
        save_mask(out.soft_mask.data[0, :, :h, :w], args.soft_mask)
    if args.time:
        for _ in range(args.warmup):
            run()
        t0 = time.perf_counter()
        for _ in range(args.reps):
            run()
        print(f"mean_ms={(time.perf_counter() - t0) * 1000.0 / args.reps:.3f}")
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------------------


def cmd_gradcheck(args, parser) -> int:
    from .gradcheck import THRESHOLD, run_suite

    reports = run_suite(scale=args.scale, seed=args.seed, end_to_end=not args.ops_only)
    for r in reports:
        extra = f" probes={r.probes} pinned={r.pinned}" if r.probes else ""
        print(f"{r.name} max_rel_err={r.error:.3e} {'pass' if r.ok else 'fail'}{extra}")
    failed = [r.name for r in reports if not r.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)} (threshold {THRESHOLD:g})")
        return EXIT_FAIL
    print(f"all {len(reports)} checks below {THRESHOLD:g}")
    return EXIT_OK


# -- synth-data, bt, check --------------------------------------------------------------------


def cmd_synth(args, parser) -> int:
    from .data import synth_corpus

    synth_corpus(args.out, args.n_fg, args.n_bg, args.size, args.seed)
    print(Path(args.out) / "manifest.txt")
    return EXIT_OK


def cmd_bt(args, parser) -> int:
    from .bt import BTError, bt_fit, parse_pairs

    text = sys.stdin.read() if args.input == "-" else Path(args.input).read_text(encoding="utf-8")
    try:
        methods, wins = parse_pairs(text)
        result = bt_fit(wins, methods, pseudo_count=args.pseudo_count)
    except BTError as exc:
        raise CommandError(str(exc)) from None
    print(result.format())
    if not result.converged:
        log.warning("fit did not converge in %d iterations", result.iterations)
    return EXIT_OK


def cmd_check(args, parser) -> int:
    from .evalsuite import format_report, run_invariant_suite, run_smoke_training
    from .config import desk_config

    reports = run_invariant_suite(seed=args.seed, scale=args.scale)
    if args.smoke:
        reports += run_smoke_training(desk_config(seed=args.seed, scale=args.scale)).reports
    print(format_report(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pharnet", description="Painterly image harmonization at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoints")
    t.add_argument("--data", required=True, help="manifest path, or 'synth' for a generated corpus")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--scale", type=int, help="channel-width divisor (8 gives width 8)")
    t.add_argument("--size", type=int, help="training image size")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--ablation", choices=["V1", "V2", "V3", "V4"])
    t.add_argument("--residual-layers", type=_residual_layers, help="e.g. 1,2,3,4")
    t.add_argument("--desk", action="store_true", help="start from the desk-scale defaults")
    t.set_defaults(func=cmd_train)

    h = sub.add_parser("harmonize", help="harmonize one composite with a trained checkpoint")
    h.add_argument("--composite", required=True)
    h.add_argument("--background", required=True)
    h.add_argument("--mask", required=True)
    h.add_argument("--checkpoint", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--soft-mask", help="also write the predicted soft mask as PGM")
    h.add_argument("--time", action="store_true", help="report mean inference time")
    h.add_argument("--reps", type=int, default=100, help=argparse.SUPPRESS)
    h.add_argument("--warmup", type=int, default=3, help=argparse.SUPPRESS)
    h.set_defaults(func=cmd_harmonize)

    g = sub.add_parser("gradcheck", help="finite-difference audit of every differentiable op")
    g.add_argument("--scale", type=int, default=8)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ops-only", action="store_true", help="skip the end-to-end loss checks")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth-data", help="write a procedural corpus and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-fg", type=int, default=16)
    s.add_argument("--n-bg", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    b = sub.add_parser("bt", help="Bradley-Terry scores from PAIR lines")
    b.add_argument("input", help="file with 'PAIR a b wins_a wins_b' lines, or - for stdin")
    b.add_argument("--pseudo-count", type=float, default=0.5)
    b.set_defaults(func=cmd_bt)

    c = sub.add_parser("check", help="run the invariant suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--scale", type=int, default=8)
    c.add_argument("--smoke", action="store_true", help="also run the 200-step smoke training")
    c.set_defaults(func=cmd_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args, parser)
    except SystemExit:
        raise
    except (CommandError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
