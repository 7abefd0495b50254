"""Command-line entry point: ``hazeshift {synth,train,dehaze,hazify,roundtrip,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zlib
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .denoiser import NetworkDenoiser
from .diffusion import DEHAZE, HAZIFY
from .haze import gen_dataset
from .imageio import list_images, read_image, signed_to_unit, write_image
from .metrics import MetricReport
from .schedule import build_schedule
from .tiled import tiled_sample
from .trainer import DatasetError, PairedDataset, set_deterministic, train

log = logging.getLogger("hazeshift")

HAZE_CHOICES = {"homogeneous": True, "nonhomogeneous": False, "mixed": None}


def _file_seed(seed: int, name: str) -> np.random.Generator:
    # per-file stream independent of processing order
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _fit_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if img.shape[2] == channels:
        return img
    if channels == 3 and img.shape[2] == 1:
        return np.repeat(img, 3, axis=2)
    return img.mean(axis=2, keepdims=True)


def translate_image(img, direction, schedule, denoiser, patch, stride, rng, deterministic=False, window_batch=16):
    """Tiled sampling of one signed-range image, shrinking the window for small inputs."""
    h, w = img.shape[:2]
    p = min(patch, h, w)
    r = min(stride, p) if stride is not None else max(p // 2, 1)
    if p != patch:
        log.warning("image %dx%d smaller than patch %d; using %d", h, w, patch, p)
    return tiled_sample(img, direction, schedule, denoiser, p, r, rng=rng, deterministic=deterministic, window_batch=window_batch)


def _io_pairs(inp: Path, out: Path) -> List[Tuple[Path, Path]]:
    if inp.is_dir():
        return [(inp / n, out / (Path(n).stem + ".png")) for n in list_images(inp)]
    if out.suffix.lower() != ".png":
        out = out / (inp.stem + ".png")
    return [(inp, out)]


def run_translate(inp, out, direction, schedule, denoiser, cfg: RunConfig, channels: int = 3) -> int:
    """Dehaze or hazify a file or directory; returns the number of images written."""
    done = 0
    pairs = _io_pairs(Path(inp), Path(out))
    for src, dst in pairs:
        try:
            img = _fit_channels(read_image(src), channels)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", src, exc)
            continue
        res = translate_image(
            img, direction, schedule, denoiser, cfg.patch_size, cfg.stride,
            _file_seed(cfg.seed, src.name), cfg.deterministic, cfg.window_batch,
        )
        write_image(dst, res)
        log.info("%s %s -> %s (%dx%d, %d steps)", direction, src, dst, img.shape[0], img.shape[1], schedule.T)
        done += 1
    return done


def run_roundtrip(inp, out, schedule, denoiser, cfg: RunConfig, channels: int = 3) -> Optional[MetricReport]:
    """Hazify then dehaze each input; writes ``hazy/``, ``dehazed/`` and ``report.csv`` under ``out``."""
    out = Path(out)
    inp = Path(inp)
    srcs = [inp / n for n in list_images(inp)] if inp.is_dir() else [inp]
    report = MetricReport()
    for src in srcs:
        try:
            clear = _fit_channels(read_image(src), channels)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", src, exc)
            continue
        rng = _file_seed(cfg.seed, src.name)
        hazy = translate_image(clear, HAZIFY, schedule, denoiser, cfg.patch_size, cfg.stride, rng, cfg.deterministic, cfg.window_batch)
        back = translate_image(hazy, DEHAZE, schedule, denoiser, cfg.patch_size, cfg.stride, rng, cfg.deterministic, cfg.window_batch)
        name = src.stem + ".png"
        write_image(out / "hazy" / name, hazy)
        write_image(out / "dehazed" / name, back)
        report.add(name, signed_to_unit(back), signed_to_unit(clear))
    if not report.names:
        return None
    (out / "report.csv").write_text(report.to_csv())
    return report


def run_eval(pred_dir, gt_dir) -> Tuple[MetricReport, List[str]]:
    pred_names, gt_names = set(list_images(pred_dir)), set(list_images(gt_dir))
    unmatched = sorted(pred_names ^ gt_names)
    report = MetricReport()
    for n in sorted(pred_names & gt_names):
        a = read_image(Path(pred_dir) / n, signed=False)
        b = read_image(Path(gt_dir) / n, signed=False)
        report.add(n, a, b)
    return report, unmatched


# argument handling


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat JSON config; command-line flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--threads", type=int)
    p.add_argument("-v", "--verbose", action="store_true", help="per-step debug logging")


def _sampling(p: argparse.ArgumentParser):
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--steps", type=int, help="reverse steps T (defaults to the checkpoint's)")
    p.add_argument("--kappa", type=float, help="noise scale (defaults to the checkpoint's)")
    p.add_argument("--patch", type=int, dest="patch_size", help="window size (default: the checkpoint's training patch size)")
    p.add_argument("--stride", type=int, help="window stride (default: half the patch)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hazeshift", description="Bidirectional residual diffusion for dehazing and haze generation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    _common(p)
    p.add_argument("--n", type=int, dest="n_pairs")
    p.add_argument("--size", type=int)
    p.add_argument("--haze", choices=sorted(HAZE_CHOICES))
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train the denoiser on clear/ + hazy/ pairs")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for checkpoints and loss.csv")
    p.add_argument("--ckpt", help="resume from this checkpoint")
    p.add_argument("--iterations", type=int)
    p.add_argument("--ckpt-every", type=int, dest="ckpt_every")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--patch", type=int, dest="patch_size")
    p.add_argument("--steps", type=int, dest="T")
    p.add_argument("--kappa", type=float)

    for name, helptext in (("dehaze", "remove haze"), ("hazify", "synthesize haze")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _sampling(p)

    p = sub.add_parser("roundtrip", help="hazify then dehaze, reporting PSNR/SSIM")
    _common(p)
    _sampling(p)

    p = sub.add_parser("eval", help="PSNR/SSIM of predictions against ground truth")
    _common(p)
    p.add_argument("--input", required=True, help="prediction directory")
    p.add_argument("--gt", required=True, help="ground-truth directory")
    p.add_argument("--output", help="CSV path (default: stdout)")
    return parser


_NON_CONFIG = {"command", "config", "verbose", "ckpt", "input", "output", "out", "data", "gt", "steps"}


def resolve_config(args) -> Tuple[RunConfig, set]:
    """Config file overridden by flags, plus the set of keys either one set explicitly."""
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    explicit = set(json.loads(Path(args.config).read_text())) if args.config else set()
    values = {k: v for k, v in vars(args).items() if k not in _NON_CONFIG}
    if getattr(args, "steps", None) is not None:
        values["T"] = args.steps
    explicit |= {k for k, v in values.items() if v is not None}
    return cfg.override(**values), explicit


def _load_sampler(args, cfg: RunConfig, explicit: set):
    ckpt = load_checkpoint(args.ckpt)
    trained_patch = (ckpt.extra.get("train_config") or {}).get("patch_size")
    if "patch_size" not in explicit and trained_patch and trained_patch != cfg.patch_size:
        # window size should match training: normalization statistics are per window
        log.info("using the checkpoint's training patch size %d", trained_patch)
        cfg = cfg.override(patch_size=trained_patch)
    sched = ckpt.schedule
    T = args.steps if args.steps is not None else sched.T
    kappa = args.kappa if args.kappa is not None else sched.kappa
    if T != sched.T:
        log.warning("sampling with %d steps but the checkpoint was trained with T=%d", T, sched.T)
    schedule = build_schedule(T, kappa, sched.gamma)
    return cfg, schedule, NetworkDenoiser(ckpt.model), ckpt.denoiser_config.image_channels


def _setup_logging(verbose: bool):
    # handler on the package logger only, so embedding applications keep their root config
    if not any(getattr(h, "_hazeshift", False) for h in log.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        handler._hazeshift = True
        log.addHandler(handler)
    log.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg, explicit = resolve_config(args)
    except (ConfigError, TypeError, ValueError) as exc:
        parser.error(str(exc))
    log.info("config %s", cfg.to_json())
    log.info("seed %d", cfg.seed)
    if cfg.deterministic:
        set_deterministic(cfg.threads)
    else:
        import torch

        torch.set_num_threads(cfg.threads)

    try:
        if args.command == "synth":
            gen_dataset(cfg.n_pairs, cfg.size, HAZE_CHOICES[cfg.haze], cfg.seed, args.out)
            return 0

        if args.command == "train":
            dataset = PairedDataset.from_dir(args.data)
            resume = load_checkpoint(args.ckpt) if args.ckpt else None
            schedule = resume.schedule if resume is not None else cfg.schedule()
            out = Path(args.out)
            train(dataset, cfg.train_config(), schedule, cfg.denoiser_config(), out_dir=out, resume=resume, loss_log=out / "loss.csv")
            return 0

        if args.command in ("dehaze", "hazify"):
            cfg, schedule, den, channels = _load_sampler(args, cfg, explicit)
            n = run_translate(args.input, args.output, args.command, schedule, den, cfg, channels)
            if n == 0:
                log.error("no input could be processed")
                return 1
            return 0

        if args.command == "roundtrip":
            cfg, schedule, den, channels = _load_sampler(args, cfg, explicit)
            report = run_roundtrip(args.input, args.output, schedule, den, cfg, channels)
            if report is None:
                log.error("no input could be processed")
                return 1
            log.info("round trip mean PSNR %.3f dB, SSIM %.4f", report.mean_psnr, report.mean_ssim)
            return 0

        if args.command == "eval":
            report, unmatched = run_eval(args.input, args.gt)
            for n in unmatched:
                log.warning("unmatched file excluded: %s", n)
            if not report.names:
                log.error("no matching filenames between %s and %s", args.input, args.gt)
                return 1
            text = report.to_csv()
            if args.output:
                Path(args.output).parent.mkdir(parents=True, exist_ok=True)
                Path(args.output).write_text(text)
            else:
                sys.stdout.write(text)
            return 0
    except (CheckpointError, DatasetError, ConfigError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
