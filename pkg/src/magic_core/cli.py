"""``magic`` command-line entry point.

Exit status: 0 success, 1 runtime failure, 2 bad flags, 3 missing file.
Errors print one line to stderr: ``error[<category>]: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import ConfigError, InputError, MagicError

EXIT_RUNTIME, EXIT_USAGE, EXIT_MISSING = 1, 2, 3


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageExit(f"{self.prog}: {message}")


def _out_path(args, default_name: str) -> Path:
    out = Path(args.out)
    return out / default_name if out.suffix == "" else out


def _emit(text: str, path: Path | None) -> None:
    from .fileio import atomic_write_text

    if path is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)
        print(f"wrote {path}")


def _load_model(args):
    from .checkpoint import load_checkpoint

    config = load_config(args.config) if getattr(args, "config", None) else None
    return load_checkpoint(args.checkpoint, config)


# ---------------------------------------------------------------------------
# subcommands

def cmd_datagen(args) -> int:
    from .data import DistortionConfig, synthetic_images, user_images, write_dataset

    cfg = DistortionConfig(sigma_range=(args.sigma_min, args.sigma_max), seed=args.seed)
    if args.images:
        images = list(user_images(args.images, args.srgb))
    else:
        images = synthetic_images(args.count, args.seed, args.size, args.size)
    ds = write_dataset(args.out, images, cfg, args.test_fraction)
    print(f"wrote {len(ds)} pairs to {args.out} (train {len(ds.train)}, test {len(ds.test)})")
    return 0


def _training_config(config_spec: str, channels: int):
    cfg = load_config(config_spec)
    if cfg.active_in is None and cfg.active_out is None and channels < cfg.in_channels:
        cfg = replace(cfg, active_in=channels, active_out=channels).validate()
    return cfg


def cmd_train(args) -> int:
    from .data import load_dataset
    from .model import build_model
    from .train import TrainConfig, evaluate, train

    ds = load_dataset(args.data)
    train_pairs = [ds.pair(i) for i in ds.train]
    test_pairs = [ds.pair(i) for i in ds.test]
    if not train_pairs:
        raise InputError(f"dataset {args.data} has no training images")
    cfg = _training_config(args.config, train_pairs[0][0].shape[0])
    tcfg = TrainConfig(patch=args.patch, batch=args.batch, epochs=args.epochs,
                       patches_per_image=args.patches_per_image, lr=args.lr,
                       lr_final=args.lr_final, seed=args.seed)
    model = build_model(cfg, seed=args.seed)
    result = train(model, train_pairs, tcfg, test_pairs, args.out)
    for e in result.epochs:
        extra = "" if e.test_psnr is None else f" test_psnr {e.test_psnr:.3f} test_ssim {e.test_ssim:.4f}"
        print(f"epoch {e.epoch} loss {e.train_loss:.5f}{extra}")
    if test_pairs:
        ev = evaluate(model, test_pairs)
        print(f"held-out psnr {ev.psnr:.3f} dB (input {ev.input_psnr:.3f}),"
              f" ssim {ev.ssim:.4f} (input {ev.input_ssim:.4f})")
    print(f"wrote {Path(args.out) / 'model.ckpt'}")
    return 0


def _infer_image(args):
    from .data import load_image

    model = _load_model(args)
    image = load_image(args.input, args.srgb)
    return model, image


def _save_output(args, model, out: np.ndarray, stem: str) -> None:
    from .data import save_image

    k = model.config.n_active_out
    path = save_image(_out_path(args, f"{Path(args.input).stem}.{stem}.png"), out[:k])
    print(f"wrote {path}")


def cmd_infer(args) -> int:
    from .model import forward

    model, image = _infer_image(args)
    out = forward(model, image).data
    _save_output(args, model, out, "out")
    return 0


def cmd_stream_infer(args) -> int:
    from .model import forward, prepare_input
    from .streaming import stream_frame

    model, image = _infer_image(args)
    x, (h, w) = prepare_input(model, image)
    out, ctx = stream_frame(model, x[0])
    out = out[:, :h, :w]
    print(f"first output row at line {ctx.first_output_at} (planned delay {ctx.plan.total_delay}),"
          f" peak buffered samples {ctx.peak_total}")
    if args.trace:
        ctx.write_trace(args.trace)
    _save_output(args, model, out, "stream")
    if args.verify:
        ref = forward(model, image).data
        diff = float(np.max(np.abs(ref.astype(np.float64) - out.astype(np.float64))))
        print(f"verify: max abs difference vs whole-frame inference {diff:.3g}")
        if diff > 1e-6:
            raise MagicError(f"stream/frame mismatch {diff:.3g} > 1e-6")
    return 0


def _hw(args):
    from .cost import HardwareParams

    return HardwareParams(args.width, args.height, args.fps, args.clock,
                          args.activation_bits, args.weight_bits)


def cmd_cost(args) -> int:
    from .cost import compare_text, memory_logic_report, report_csv, report_text

    hw = _hw(args)
    report = memory_logic_report(load_config(args.config), hw)
    if args.compare:
        other = memory_logic_report(load_config(args.compare), hw)
        text = report_text(report) + "\n" + report_text(other) + "\n" + compare_text(report, other)
    else:
        text = report_text(report)
    _emit(text, Path(args.out) if args.out else None)
    if args.csv:
        _emit(report_csv(report), Path(args.csv))
    return 0


def cmd_rf(args) -> int:
    from .cost import receptive_field

    model = _load_model(args) if args.checkpoint else None
    config = model.config if model is not None else load_config(args.config or "magic-ref")
    rf = receptive_field(config, model, args.threshold)
    print(f"config: {config.name}")
    print(f"horizontal: {rf.horizontal}")
    print(f"vertical: {'unbounded' if rf.vertical is None else rf.vertical}")
    print(f"effective_vertical: {rf.effective_vertical} (threshold {rf.threshold})")
    return 0


def cmd_dpcm_bench(args) -> int:
    from .dpcm import DpcmConfig, dpcm_bench

    cfg = DpcmConfig(args.input_bits, args.bits, args.step)
    rng = np.random.default_rng(args.seed)
    top = (1 << args.input_bits) - 1
    if args.smooth:
        start = rng.integers(0, top + 1, size=(args.rows, 1))
        steps = rng.integers(-args.smooth, args.smooth + 1, size=(args.rows, args.width - 1))
        rows = np.clip(np.concatenate([start, start + np.cumsum(steps, axis=1)], axis=1), 0, top)
    else:
        rows = rng.integers(0, top + 1, size=(args.rows, args.width))
    stats = dpcm_bench(rows, cfg)
    text = "".join(f"{k}: {v}\n" for k, v in stats.items())
    _emit(text, Path(args.out) if args.out else None)
    return 0


def cmd_eval(args) -> int:
    from .data import load_dataset
    from .train import evaluate

    model = _load_model(args)
    ds = load_dataset(args.data)
    ev = evaluate(model, ds.pairs(args.split))
    print(f"psnr {ev.psnr:.4f} dB (input {ev.input_psnr:.4f}, gain {ev.psnr_gain:+.4f})")
    print(f"ssim {ev.ssim:.6f} (input {ev.input_ssim:.6f})")
    if args.out:
        _emit(ev.table(), Path(args.out))
    return 0


def cmd_quantize(args) -> int:
    from .checkpoint import save_checkpoint
    from .cost import quantize_model, quantized_forward_delta
    from .data import load_dataset

    model = _load_model(args)
    ds = load_dataset(args.data)
    images = [x for x, _ in ds.pairs(args.split)]
    db = quantized_forward_delta(model, images, args.terms)
    print(f"terms {args.terms}: output psnr vs float model {db:.3f} dB")
    if args.out:
        path = save_checkpoint(quantize_model(model, args.terms), _out_path(args, "quantized.ckpt"))
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="magic", description="Line-streaming restoration CNN toolkit.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(fn=fn)
        return sp

    def config_flag(sp, default="magic-ref"):
        sp.add_argument("--config", default=default,
                        help="named config (magic-ref, fir-ablation) or JSON file")

    sp = add("datagen", cmd_datagen, "generate a distorted/clean image pair dataset")
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--seed", type=int, default=0, help="global seed")
    sp.add_argument("--count", type=int, default=96, help="number of synthetic images")
    sp.add_argument("--size", type=int, default=96, help="synthetic image side in pixels")
    sp.add_argument("--images", default=None, help="directory of RGB PNG/PPM images to use instead")
    sp.add_argument("--srgb", action="store_true", help="decode sRGB input images to linear")
    sp.add_argument("--sigma-min", type=float, default=0.5, help="smallest blur sigma")
    sp.add_argument("--sigma-max", type=float, default=2.0, help="largest blur sigma")
    sp.add_argument("--test-fraction", type=float, default=0.25, help="held-out share")

    sp = add("train", cmd_train, "train a model on a dataset directory")
    config_flag(sp)
    sp.add_argument("--data", required=True, help="dataset directory from datagen")
    sp.add_argument("--out", required=True, help="output directory for model.ckpt and loss.csv")
    sp.add_argument("--seed", type=int, default=0, help="initialization and batch-order seed")
    sp.add_argument("--epochs", type=int, default=20, help="training epochs")
    sp.add_argument("--batch", type=int, default=4, help="patches per step")
    sp.add_argument("--patch", type=int, default=64, help="patch side, multiple of 16")
    sp.add_argument("--patches-per-image", type=int, default=8, help="patches per image per epoch")
    sp.add_argument("--lr", type=float, default=3e-3, help="initial Adam learning rate")
    sp.add_argument("--lr-final", type=float, default=3e-4, help="learning rate after cosine decay")

    for name, fn, help_ in (("infer", cmd_infer, "whole-frame inference on one image"),
                            ("stream-infer", cmd_stream_infer, "line-streaming inference on one image")):
        sp = add(name, fn, help_)
        sp.add_argument("--checkpoint", required=True, help="model checkpoint")
        sp.add_argument("--config", default=None, help="require the checkpoint to match this config")
        sp.add_argument("--input", required=True, help="input image (PNG/PPM)")
        sp.add_argument("--out", required=True, help="output image path or directory")
        sp.add_argument("--srgb", action="store_true", help="decode sRGB input to linear")
        if name == "stream-infer":
            sp.add_argument("--verify", action="store_true",
                            help="also run whole-frame inference and require max abs diff <= 1e-6")
            sp.add_argument("--trace", default=None, help="write the per-layer buffer trace here")

    sp = add("cost", cmd_cost, "memory, compute and latency report")
    config_flag(sp)
    sp.add_argument("--compare", default=None, help="second config to compare against")
    sp.add_argument("--width", type=int, default=1920, help="frame width in pixels")
    sp.add_argument("--height", type=int, default=1080, help="frame height in pixels")
    sp.add_argument("--fps", type=float, default=30, help="frames per second")
    sp.add_argument("--clock", type=float, default=5e8, help="clock frequency in Hz")
    sp.add_argument("--activation-bits", type=int, default=12, help="bits per stored activation")
    sp.add_argument("--weight-bits", type=int, default=8, help="bits per weight")
    sp.add_argument("--out", default=None, help="write the text report here instead of stdout")
    sp.add_argument("--csv", default=None, help="write the per-layer table here")

    sp = add("rf", cmd_rf, "receptive field of a config or trained checkpoint")
    sp.add_argument("--config", default=None,
                    help="named config or JSON file; defaults to the checkpoint's config, else magic-ref")
    sp.add_argument("--checkpoint", default=None, help="use this model's IIR weights")
    sp.add_argument("--threshold", type=float, default=0.999,
                    help="share of the IIR impulse response counted as effective")

    sp = add("dpcm-bench", cmd_dpcm_bench, "DPCM round-trip statistics on random rows")
    sp.add_argument("--bits", type=int, default=8, help="residual bits")
    sp.add_argument("--input-bits", type=int, default=12, help="sample bits")
    sp.add_argument("--step", type=int, default=None, help="quantizer step override")
    sp.add_argument("--rows", type=int, default=1000, help="number of rows")
    sp.add_argument("--width", type=int, default=1920, help="samples per row")
    sp.add_argument("--smooth", type=int, default=16,
                    help="max neighbour difference of the random walk rows; 0 for white noise")
    sp.add_argument("--seed", type=int, default=0, help="row generator seed")
    sp.add_argument("--out", default=None, help="write the stats here instead of stdout")

    sp = add("eval", cmd_eval, "PSNR/SSIM of a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True, help="model checkpoint")
    sp.add_argument("--config", default=None, help="require the checkpoint to match this config")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--split", choices=("test", "train", "all"), default="test", help="which images")
    sp.add_argument("--out", default=None, help="write the per-image CSV table here")

    sp = add("quantize", cmd_quantize, "shift-sum weight approximation and its output PSNR")
    sp.add_argument("--checkpoint", required=True, help="model checkpoint")
    sp.add_argument("--config", default=None, help="require the checkpoint to match this config")
    sp.add_argument("--terms", type=int, choices=(1, 2, 3), default=3, help="power-of-two terms per weight")
    sp.add_argument("--data", required=True, help="dataset whose inputs are compared")
    sp.add_argument("--split", choices=("test", "train", "all"), default="test", help="which images")
    sp.add_argument("--out", default=None, help="write the quantized checkpoint here")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        msg = exc.strerror and exc.filename and f"{exc.strerror}: {exc.filename}" or str(exc)
        print(f"error[missing-file]: {msg}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error[config]: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_USAGE
    except MagicError as exc:
        print(f"error[{exc.category}]: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error[runtime]: {' '.join(str(exc).split())}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
