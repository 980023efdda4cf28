"""Command-line entry point: ``qdsr <command> [options]``.

Exit status is 0 when every output was written and checked, 1 when a command
fails at run time and 2 for usage or configuration errors. Errors go to
standard error as ``qdsr <command>: error: <message>``.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, ConfigError, RunConfig, load_config, parse_seed
from .dataset import generate_pairs, load_archive, pair_psf, save_archive
from .gradcheck import gradcheck
from .localize import PixelCalibration, evaluate_reconstruction, rayleigh_from_fwhm, write_report
from .net import PRESETS as NET_PRESETS
from .net import forward, load_weights, save_weights
from .optics import Emitter, EmitterSet, PsfSpec, measure_fwhm, render_psf
from .tensorio import load_pgm, load_tensor, save_pgm, save_tensor
from .train import normalize_frame, train_incremental

log = logging.getLogger("qdsr")


class CommandError(RuntimeError):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_simulate(cfg: RunConfig, n: int, out_path, workers: int = 1) -> dict:
    """Simulate ``n`` pairs into an archive plus its sidecar manifest."""
    if n <= 0:
        raise ConfigError("nothing to generate (n must be at least 1)")
    seed = cfg.require_seed()
    out_path = Path(out_path)
    pairs = generate_pairs(seed, cfg.scene, n, workers=workers)
    manifest = save_archive(out_path, pairs, seed, cfg.scene).to_dict()
    manifest["config"] = cfg.to_dict()
    _write_json(Path(str(out_path) + ".manifest.json"), manifest)
    pairs_back, footer = load_archive(out_path)
    if len(pairs_back) != n or footer["count"] != n:
        raise CommandError(f"{out_path}: archive check failed")
    return manifest


def cmd_train(cfg: RunConfig, out_dir, workers: int = 1, stop_after: int | None = None) -> dict:
    """Train with checkpoints, log CSV and run manifest under ``out_dir``."""
    out_dir = Path(out_dir)
    tcfg = cfg.train_config()
    started = _now()
    best, tlog = train_incremental(tcfg, cfg.scene, cfg.net, cfg.loss, out_dir=out_dir,
                                   stop_after=stop_after, workers=workers)
    tlog.write_csv(out_dir / "train_log.csv")
    save_weights(out_dir / "best.qsrw", best, cfg.net)
    check, _ = load_weights(out_dir / "best.qsrw", cfg.net)
    if not all(np.all(np.isfinite(t)) for t in check.tensors()):
        raise CommandError("best checkpoint contains non-finite weights")
    complete = len(tlog.rows) == tcfg.iterations * tcfg.epochs_per_iteration
    manifest = {
        "config": cfg.to_dict(),
        "version": __version__,
        "complete": complete,
        "epochs_logged": len(tlog.rows),
        "best_val_loss": min((r["val_loss"] for r in tlog.rows), default=None),
        "best_checkpoint": "best.qsrw",
        "log": "train_log.csv",
        "started": started,
        "finished": _now(),
    }
    _write_json(out_dir / "run_manifest.json", manifest)
    return manifest


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return load_pgm(path)
    return load_tensor(path)


def reconstruct(params, net_cfg, frame) -> np.ndarray:
    """Eval-mode forward pass on one camera frame."""
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 2:
        raise ValueError(f"input must be a single 2D frame, got shape {frame.shape}")
    if min(frame.shape) < net_cfg.kernel:
        raise ValueError(f"input {frame.shape} is smaller than the {net_cfg.kernel}x"
                         f"{net_cfg.kernel} kernel")
    out, _ = forward(params, net_cfg, normalize_frame(frame).astype(params.dtype))
    return out.astype(np.float64)


def cmd_infer(weights, input_path, out_path, pgm_preview: bool = True) -> np.ndarray:
    params, net_cfg = load_weights(weights)
    recon = reconstruct(params, net_cfg, _read_image(input_path))
    total = float(recon.sum())
    if not abs(total - 1.0) <= 1e-6:
        raise CommandError(f"reconstruction mass {total} is not 1")
    out_path = Path(out_path)
    save_tensor(out_path, recon)
    if pgm_preview:
        save_pgm(out_path.with_suffix(".pgm"), recon)
    return recon


def _evaluate_one(item, ecfg, cal):
    recon, pair = item
    psf = pair_psf(pair)
    # the target raster holds each emitter at its nearest pixel; score against that
    truth = EmitterSet([Emitter(*e) for e in pair.meta["emitters"]])
    report = evaluate_reconstruction(
        recon, truth, cal, rayleigh=rayleigh_from_fwhm(psf.fwhm_px, psf.kind),
        mass_threshold=ecfg.peak_threshold * float(np.max(recon)),
        min_separation_px=ecfg.min_separation_px, max_distance=ecfg.max_distance)
    report["index"] = pair.meta.get("index")
    return report


def _infer_one(params, net_cfg, pair):
    return reconstruct(params, net_cfg, pair.input)


def cmd_evaluate(cfg: RunConfig, truth_archive, out_path, weights=None, recon=None,
                 nm_per_pixel: float | None = None, workers: int = 1) -> dict:
    """Score reconstructions against the emitters stored in ``truth_archive``.

    Reconstructions come either from ``weights`` (inference on every archived
    frame) or from ``recon``, a ``.qsrt`` holding one ``(H, W)`` map or an
    ``(N, H, W)`` stack aligned with the archive.
    """
    if (weights is None) == (recon is None):
        raise ConfigError("pass exactly one of --weights or --recon")
    pairs, _ = load_archive(truth_archive)
    if recon is not None:
        stack = load_tensor(recon)
        stack = stack[None] if stack.ndim == 2 else stack
        if stack.ndim != 3 or stack.shape[0] != len(pairs):
            raise ValueError(f"{recon}: expected {len(pairs)} reconstructions, "
                             f"got array of shape {stack.shape}")
        recons = list(stack)
    else:
        params, net_cfg = load_weights(weights)
        job = partial(_infer_one, params, net_cfg)
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                recons = list(pool.map(job, pairs))
        else:
            recons = [job(p) for p in pairs]

    nm = nm_per_pixel if nm_per_pixel is not None else cfg.eval.nm_per_hires_pixel
    cal = PixelCalibration(nm) if nm is not None else None
    job = partial(_evaluate_one, ecfg=cfg.eval, cal=cal)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            scenes = list(pool.map(job, zip(recons, pairs)))
    else:
        scenes = [job(item) for item in zip(recons, pairs)]

    means = [s["mean_distance"] for s in scenes if s["mean_distance"] is not None]
    ratios = [s["rayleigh_ratio"] for s in scenes if s.get("rayleigh_ratio") is not None]
    report = {
        "unit": "nm" if cal else "px",
        "calibration": asdict(cal) if cal else None,
        "n_scenes": len(scenes),
        "n_failed": sum(s["failed"] for s in scenes),
        "mean_distance": float(np.mean(means)) if means else None,
        "rayleigh_ratio": float(np.mean(ratios)) if ratios else None,
        "scenes": scenes,
    }
    out_path = Path(out_path)
    write_report(report, out_path)
    rows = [(s["index"], i, j, d) for s in scenes for i, j, d in s["pairs"]]
    with open(out_path.with_suffix(".csv"), "w") as fh:
        fh.write(f"scene,estimate,truth,distance_{report['unit']}\n")
        for row in rows:
            fh.write(",".join(repr(v) for v in row) + "\n")
    return report


def cmd_gradcheck(preset: str = "tiny", corrupt: bool = False, seed: int = 0):
    if preset not in NET_PRESETS:
        raise ConfigError(f"unknown net preset '{preset}' (choose from {', '.join(NET_PRESETS)})")
    return gradcheck(NET_PRESETS[preset], seed=seed, corrupt=corrupt)


def cmd_psf_preview(spec: PsfSpec, out_path, support: int | None = None) -> dict:
    kernel = render_psf(spec, support)
    along = measure_fwhm(kernel, spec.axis_angle)
    across = measure_fwhm(kernel, spec.axis_angle + math.pi / 2)
    report = {
        "psf": asdict(spec),
        "support": kernel.shape[0],
        "sum": float(kernel.sum()),
        "fwhm_along_axis": along,
        "fwhm_across_axis": across,
        "anisotropy_ratio": along / across,
        "rayleigh_px": rayleigh_from_fwhm(spec.fwhm_px, spec.kind),
    }
    out_path = Path(out_path)
    save_tensor(out_path, kernel)
    save_pgm(out_path.with_suffix(".pgm"), kernel)
    _write_json(out_path.with_suffix(".json"), report)
    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdsr", description=__doc__.splitlines()[0])
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--seed", type=int, metavar="U64", help="overrides the config seed")
    p.add_argument("--workers", type=int, default=1, metavar="N",
                   help="processes for data generation and batch evaluation")
    p.add_argument("--preset", default="paper", choices=sorted(PRESETS),
                   help="base configuration the config file is overlaid on")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("simulate", help="simulate a training archive")
    s.add_argument("--n", type=int, required=True, help="number of pairs")
    s.add_argument("--out", required=True, help="archive path (.qsra)")

    s = sub.add_parser("train", help="train a network")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)

    s = sub.add_parser("infer", help="reconstruct one frame")
    s.add_argument("--weights", required=True)
    s.add_argument("--input", required=True, help=".qsrt or .pgm frame")
    s.add_argument("--out", required=True, help="output .qsrt (a .pgm preview is written next to it)")

    s = sub.add_parser("evaluate", help="score reconstructions against an archive")
    s.add_argument("--truth", required=True, help="archive with ground-truth emitters")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--recon", help=".qsrt map or stack aligned with the archive")
    s.add_argument("--nm-per-pixel", type=float, help="hi-res pixel size; omit to report pixels")
    s.add_argument("--out", required=True, help="report .json (a .csv is written next to it)")

    s = sub.add_parser("gradcheck", help="finite-difference check of backpropagation")
    s.add_argument("--net-preset", default="tiny", choices=sorted(NET_PRESETS))
    s.add_argument("--corrupt", action="store_true", help="perturb the backward pass (must fail)")

    s = sub.add_parser("psf-preview", help="render a PSF kernel and measure it")
    s.add_argument("--kind", default="gaussian", choices=("gaussian", "airy"))
    s.add_argument("--fwhm", type=float, required=True, help="FWHM in hi-res pixels")
    s.add_argument("--squeeze", type=float, default=1.0)
    s.add_argument("--angle", type=float, default=0.0, help="squeeze axis angle, radians")
    s.add_argument("--support", type=int)
    s.add_argument("--out", required=True, help="output .qsrt (plus .pgm and .json)")
    return p


def _run(args) -> int:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = replace(cfg, seed=parse_seed(args.seed))
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    if args.command == "simulate":
        m = cmd_simulate(cfg, args.n, args.out, args.workers)
        print(f"wrote {m['count']} pairs to {args.out}")
    elif args.command == "train":
        m = cmd_train(cfg, args.out_dir, args.workers, args.stop_after)
        print(f"best validation loss {m['best_val_loss']!r}; outputs in {args.out_dir}")
    elif args.command == "infer":
        recon = cmd_infer(args.weights, args.input, args.out, cfg.io.pgm_preview)
        print(f"wrote {recon.shape[0]}x{recon.shape[1]} reconstruction to {args.out}")
    elif args.command == "evaluate":
        r = cmd_evaluate(cfg, args.truth, args.out, args.weights, args.recon,
                         args.nm_per_pixel, args.workers)
        print(f"{r['n_scenes']} scenes, {r['n_failed']} failed, mean distance "
              f"{r['mean_distance']} {r['unit']}, rayleigh ratio {r['rayleigh_ratio']}")
    elif args.command == "gradcheck":
        rep = cmd_gradcheck(args.net_preset, args.corrupt, cfg.seed or 0)
        for i, err in enumerate(rep.layer_errors):
            print(f"layer {i}: max relative error {err:.3e}")
        print(f"{'PASS' if rep.passed else 'FAIL'}: max relative error {rep.max_error:.3e}"
              f" (tolerance {rep.tolerance:g})")
        return 0 if rep.passed else 1
    elif args.command == "psf-preview":
        spec = PsfSpec(args.kind, args.fwhm, args.squeeze, args.angle)
        print(json.dumps(cmd_psf_preview(spec, args.out, args.support), indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"qdsr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"qdsr {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
