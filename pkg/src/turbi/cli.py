"""Command-line interface: one subcommand per stage plus run-all, baselines and evaluation.

Staged runs exchange directories holding ``frames/`` (16-bit PNG) and, where
frame identity matters, ``indices.csv`` with the original frame numbers
(0-based). Set ``TURBI_LOG`` to a logging level name (e.g. ``INFO``) for
progress messages.
"""

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .deblur import blind_deconvolve
from .fusion import extract_detail, fuse, lowrank_split
from .io import append_csv, read_csv, read_image, write_csv, write_image, write_sequence
from .scenes import edge_scene, textured_scene
from .stabilize import LOG_HEADER, absorbing_stabilize, internal_stabilize, register_to_reference
from .subsample import energy_curve_rows, sharpness_scores, subsample
from .turbsim import save_bundle, simulate

log = logging.getLogger("turbi")


def _setup_logging():
    level = os.environ.get("TURBI_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _toggle(text):
    name, sep, state = text.partition("=")
    state = state.strip().lower()
    if not sep or state not in ("on", "off"):
        raise argparse.ArgumentTypeError(f"expected NAME=on|off, got {text!r}")
    return name.strip(), state == "on"


def _config(args):
    config = pl.load_config(args.config) if args.config else pl.PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.emit_intermediates:
        changes["emit_intermediates"] = True
    if getattr(args, "input", None):
        changes["input_dir"] = str(args.input)
    if getattr(args, "out", None):
        changes["output_dir"] = str(args.out)
    config = replace(config, **changes)
    if args.stage_toggle:
        config = config.with_toggles(**dict(args.stage_toggle))
    return config


def _need(value, what):
    if value is None:
        raise pl.ConfigError(f"{what} is not set (flag or [pipeline] config key)")
    return Path(value)


def _read_stage_dir(path):
    """Frames plus original indices (positions when no ``indices.csv``)."""
    frames, truth = pl.load_input(path)
    idx_path = Path(path) / "indices.csv"
    if idx_path.exists():
        indices = np.array([int(r["frame"]) for r in read_csv(idx_path)], dtype=np.intp)
        if len(indices) != frames.shape[0]:
            raise ValueError(f"{idx_path} lists {len(indices)} frames, found {frames.shape[0]}")
    else:
        indices = np.arange(frames.shape[0])
    return frames, indices, truth


def _write_stage_dir(path, frames, indices, log_rows=None):
    path = Path(path)
    write_sequence(path / "frames", frames, bits=16)
    write_csv(path / "indices.csv", ("frame",), [(int(i),) for i in indices])
    if log_rows:
        write_csv(path / "stabilize_log.csv", LOG_HEADER, log_rows)


def cmd_simulate(args, config):
    out = _need(config.output_dir, "output directory")
    if args.truth:
        truth = read_image(args.truth)
    else:
        scene = edge_scene if args.scene == "edge" else textured_scene
        truth = scene(args.size, seed=config.seed)
    bundle = simulate(truth, args.frames, args.severe, config.turbulence_params())
    save_bundle(bundle, out)
    print(f"wrote {args.frames} frames to {out / 'frames'}")


def cmd_subsample(args, config):
    frames, _ = pl.load_input(_need(config.input_dir, "input directory"))
    out = _need(config.output_dir, "output directory")
    res = subsample(frames, config.subsample)
    _write_stage_dir(out, frames[res.indices], res.indices)
    write_image(out / "reference.png", res.reference, bits=16)
    write_csv(out / "energy_curve.csv", pl.ENERGY_HEADER, energy_curve_rows(res, config.subsample.rho))
    print(f"kept {len(res.indices)} of {frames.shape[0]} frames")


def cmd_stabilize(args, config):
    frames, indices, _ = _read_stage_dir(_need(config.input_dir, "input directory"))
    out, rows = internal_stabilize(frames, config.stabilize_params(), frame_ids=indices)
    _write_stage_dir(_need(config.output_dir, "output directory"), out, indices, rows)


def cmd_absorb(args, config):
    stabilized, indices, _ = _read_stage_dir(_need(config.input_dir, "input directory"))
    original, _ = pl.load_input(args.original)
    frames, sharp, rows = absorbing_stabilize(stabilized, original, sharpness_scores(original),
                                              indices, config.stabilize_params())
    _write_stage_dir(_need(config.output_dir, "output directory"), frames, sharp, rows)
    print(f"absorbed {len(rows)} frame(s)")


def cmd_register(args, config):
    frames, indices, _ = _read_stage_dir(_need(config.input_dir, "input directory"))
    registered, rows = register_to_reference(frames, read_image(args.reference),
                                             config.stabilize_params())
    rows = [(r[0], int(indices[r[1]])) + r[2:] for r in rows]
    _write_stage_dir(_need(config.output_dir, "output directory"), registered, indices, rows)


def cmd_fuse(args, config):
    frames, _, _ = _read_stage_dir(_need(config.input_dir, "input directory"))
    out = _need(config.output_dir, "output directory")
    fp = config.fusion_params()
    low, sparse = lowrank_split(frames, fp)
    detail, _ = extract_detail(sparse, fp)
    base = read_image(args.deblurred) if args.deblurred else low
    write_image(out / "low_rank.png", low, bits=16)
    write_image(out / "detail.png", 0.5 + 0.5 * detail.values, bits=16)
    write_image(out / "final.png", fuse(base, detail, fp.beta), bits=16)


def cmd_deblur(args, config):
    out = _need(config.output_dir, "output directory")
    res = blind_deconvolve(read_image(args.image), config.deblur)
    write_image(out / "deblurred.png", res.image, bits=16)
    write_csv(out / "kernel.csv", tuple(range(res.kernel.shape[1])),
              [tuple(f"{v:.8g}" for v in row) for row in res.kernel])
    if res.diverged:
        print("warning: objective increased; returned the best iterate", file=sys.stderr)


def cmd_run_all(args, config):
    manifest = pl.run_all(config)
    print(f"config_hash {manifest.config_hash}")
    for label, rep in manifest.metrics.items():
        print(f"{label}: psnr {rep.psnr:.4f} ssim {rep.ssim:.4f}")


def _baseline(config, name, compute):
    frames, truth = pl.load_input(_need(config.input_dir, "input directory"))
    out = _need(config.output_dir, "output directory")
    image = compute(frames)
    write_image(out / f"{name}.png", image, bits=16)
    if truth is not None:
        rep = pl.evaluate(image, truth)
        pl.append_metrics(out / "metrics.csv", name, rep)
        print(f"{name}: psnr {rep.psnr:.4f} ssim {rep.ssim:.4f}")


def cmd_baseline_centroid(args, config):
    _baseline(config, "centroid", lambda f: pl.centroid_baseline(f, config.flow, config.threads))


def cmd_baseline_mean(args, config):
    _baseline(config, "mean", pl.mean_baseline)


def cmd_evaluate(args, config):
    rep = pl.evaluate(read_image(args.restored), read_image(args.truth))
    print(f"psnr {rep.psnr:.4f} ssim {rep.ssim:.4f}")
    if args.metrics:
        append_csv(args.metrics, pl.METRICS_HEADER, [pl.metrics_row(args.label, rep)])


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--emit-intermediates", action="store_true")
    common.add_argument("--stage-toggle", type=_toggle, action="append", metavar="NAME=on|off",
                        help=f"stages: {', '.join(pl.STAGES)}")

    parser = argparse.ArgumentParser(prog="turbi", description="Turbulence-degraded sequence restoration")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, io=True):
        p = sub.add_parser(name, parents=[common], help=help_text)
        if io:
            p.add_argument("--input", type=Path)
        p.add_argument("--out", type=Path)
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "write a synthetic distorted bundle", io=False)
    p.add_argument("--truth", type=Path, help="ground-truth image (default: synthetic scene)")
    p.add_argument("--scene", choices=("edge", "textured"), default="edge",
                   help="synthetic scene used when --truth is not given")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--severe", type=int, default=20)
    add("subsample", cmd_subsample, "select frames and extract the reference")
    add("stabilize", cmd_stabilize, "internal stabilization of a frame set")
    p = add("absorb", cmd_absorb, "absorb sharp frames from the original sequence")
    p.add_argument("--original", type=Path, required=True)
    p = add("register", cmd_register, "register frames to a reference image")
    p.add_argument("--reference", type=Path, required=True)
    p = add("fuse", cmd_fuse, "low-rank split, detail layer and fusion")
    p.add_argument("--deblurred", type=Path, help="deblurred low-rank image (default: the low-rank image)")
    p = add("deblur", cmd_deblur, "blind deconvolution of one image", io=False)
    p.add_argument("image", type=Path)
    add("run-all", cmd_run_all, "full pipeline with manifest and metrics")
    add("baseline-centroid", cmd_baseline_centroid, "centroid-method baseline")
    add("baseline-mean", cmd_baseline_mean, "temporal-mean baseline")
    p = sub.add_parser("evaluate", parents=[common], help="PSNR and SSIM against the truth")
    p.add_argument("restored", type=Path)
    p.add_argument("truth", type=Path)
    p.add_argument("--metrics", type=Path, help="append the result to this CSV")
    p.add_argument("--label", default="restored")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _config(args)
        args.func(args, config)
    except pl.ConfigError as exc:
        print(f"turbi: config error: {exc}", file=sys.stderr)
        return 2
    except pl.StageError as exc:
        print(f"turbi: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as exc:
        print(f"turbi: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
