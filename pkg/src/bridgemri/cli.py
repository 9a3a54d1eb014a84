"""Experiment harness: data generation, training, reconstruction, eval.

Exit codes: 0 success, 1 usage/configuration, 2 data problems, 3
numerical aborts.  BRIDGEMRI_LOG_LEVEL controls stderr verbosity.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .bridge import SamplerConfig, make_predictor, sample, train_step
from .bridge import make_trainer
from .contourlet import contourlet_decompose
from .errors import BridgeMRIError, ConfigError, DataError, NumericsError
from .formats import (ExperimentConfig, apply_overrides, load_config,
                      load_raw_tensor, load_trainer_checkpoint, read_pgm,
                      save_config, save_raw_tensor, save_trainer_checkpoint,
                      write_pgm)
from .kspace import PhantomSpec, generate_phantom, make_mask, undersample
from .metrics import (evaluate_pairs, format_mean_std, wilcoxon_signed_rank)
from .rng import derive_stream_seed, integers, stream
from .schedule import make_schedule

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

LOSS_COLUMNS = ("step", "rec_x", "rec_y", "selfcon_x", "selfcon_y", "total")
METRIC_COLUMNS = ("image_id", "psnr_db", "ssim", "nmse")

LOG = logging.getLogger("bridgemri")


def _setup_logging() -> None:
    level = os.environ.get("BRIDGEMRI_LOG_LEVEL", "INFO").upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        level = "INFO"
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level),
                        format="%(levelname)s %(message)s", force=True)


# --------------------------------------------------------------------------
# Configuration resolution
# --------------------------------------------------------------------------


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="FILE",
                     help="key=value config file; flags override it")
    sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    for f in dataclasses.fields(ExperimentConfig):
        sub.add_argument(f"--{f.name.replace('_', '-')}",
                         dest=f"cfg_{f.name}", metavar="V",
                         help=argparse.SUPPRESS)


def _resolve_config(args, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if base is None:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    else:
        if args.config:
            raise ConfigError("--config cannot be combined with --resume; "
                              "the checkpoint already embeds its config")
        cfg = base
    overrides: dict[str, str] = {}
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = value
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# Dataset plumbing
# --------------------------------------------------------------------------


def _load_manifest(data_dir: Path) -> dict:
    path = data_dir / "manifest.json"
    if not path.is_file():
        raise DataError(f"no dataset manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _split_ids(manifest: dict, split: str) -> list[str]:
    if split == "train":
        return list(manifest["train_ids"])
    if split == "test":
        return list(manifest["test_ids"])
    return list(manifest["train_ids"]) + list(manifest["test_ids"])


def _load_images(data_dir: Path, sub: str, ids, cfg: ExperimentConfig) -> np.ndarray:
    out = []
    for image_id in ids:
        arr = load_raw_tensor(data_dir / sub / f"{image_id}.scnt")
        if arr.shape != (cfg.height, cfg.width):
            raise DataError(f"{sub}/{image_id}: shape {arr.shape} does not "
                            f"match configured {cfg.height}x{cfg.width}")
        out.append(arr.astype(np.float32))
    return np.stack(out)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = _resolve_config(args)
    out = Path(cfg.data_dir)
    if out.is_dir() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty; pass --force to "
                        f"overwrite")
    for sub in ("full", "r4", "r8"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    masks = {r: make_mask(cfg.width, r, cfg.center_lines, cfg.mask_offset)
             for r in (4, 8)}
    for r, mask in masks.items():
        save_raw_tensor(out / f"mask_r{r}.scnt",
                        mask.columns.astype(np.uint64))
        write_pgm(out / f"mask_r{r}.pgm",
                  np.tile(mask.columns.astype(np.float64), (cfg.width, 1)))
    count = cfg.train_count + cfg.test_count
    ids = [f"{i:04d}" for i in range(count)]
    for i, image_id in enumerate(ids):
        spec = PhantomSpec(seed=derive_stream_seed(cfg.seed, f"data-{image_id}"),
                           height=cfg.height, width=cfg.width,
                           ellipse_count=(cfg.ellipse_min, cfg.ellipse_max),
                           intensity=(cfg.intensity_min, cfg.intensity_max))
        full = generate_phantom(spec).astype(np.float32)
        save_raw_tensor(out / "full" / f"{image_id}.scnt", full)
        for r, mask in masks.items():
            under = np.clip(undersample(full, mask), 0.0, 1.0).astype(np.float32)
            save_raw_tensor(out / f"r{r}" / f"{image_id}.scnt", under)
        if (i + 1) % 100 == 0:
            LOG.info("generated %d/%d phantoms", i + 1, count)
    manifest = {"count": count, "train_ids": ids[:cfg.train_count],
                "test_ids": ids[cfg.train_count:], "height": cfg.height,
                "width": cfg.width, "seed": cfg.seed,
                "acceleration_factors": [4, 8]}
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    save_config(out / "config.cfg", cfg)
    LOG.info("dataset of %d phantoms written to %s", count, out)


def cmd_train(args) -> None:
    if args.resume:
        base, state = load_trainer_checkpoint(args.resume)
        cfg = _resolve_config(args, base=base)
    else:
        cfg = _resolve_config(args)
        state = make_trainer(cfg.seed, cfg.training_config(),
                             cfg.denoiser_config())
    data_dir = Path(cfg.data_dir)
    manifest = _load_manifest(data_dir)
    ids = _split_ids(manifest, "train")
    full = _load_images(data_dir, "full", ids, cfg)
    under = _load_images(data_dir, f"r{cfg.acceleration}", ids, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.cfg", cfg)

    loss_path = out / "loss.csv"
    fresh = not (args.resume and loss_path.is_file())
    with open(loss_path, "w" if fresh else "a", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(LOSS_COLUMNS)
        while state.step < cfg.iterations:
            idx = integers(state.rng, 0, len(ids) - 1, (cfg.batch_size,))
            losses = train_step(state, full[idx], under[idx])
            writer.writerow([state.step] + [repr(losses[c])
                                            for c in LOSS_COLUMNS[1:]])
            if state.step % cfg.checkpoint_every == 0:
                fh.flush()
                save_trainer_checkpoint(out / f"ckpt_{state.step:06d}.scndb",
                                        cfg, state)
                LOG.info("step %d/%d total %.5f", state.step, cfg.iterations,
                         losses["total"])
    save_trainer_checkpoint(out / "ckpt_final.scndb", cfg, state)
    LOG.info("training finished at step %d; final checkpoint in %s",
             state.step, out)


def cmd_reconstruct(args) -> None:
    cfg, state = load_trainer_checkpoint(args.checkpoint)
    if args.data_dir:
        cfg = dataclasses.replace(cfg, data_dir=args.data_dir)
    data_dir = Path(cfg.data_dir)
    manifest = _load_manifest(data_dir)
    ids = _split_ids(manifest, args.split)
    if args.count is not None:
        ids = ids[:args.count]
    if not ids:
        raise DataError(f"no images in split {args.split!r}")
    under = _load_images(data_dir, f"r{cfg.acceleration}", ids, cfg)
    out = Path(args.out_dir) if args.out_dir else Path(cfg.out_dir) / "recon"
    (out / "recon").mkdir(parents=True, exist_ok=True)
    (out / "errmap").mkdir(parents=True, exist_ok=True)

    deterministic = cfg.sample_deterministic and not args.stochastic
    rng = None if deterministic else stream(cfg.seed, "sample")
    predictor = make_predictor(state.net_config, state.params1)
    sampler = SamplerConfig(steps=cfg.steps, deterministic=deterministic)
    done = 0
    for start in range(0, len(ids), cfg.batch_size):
        batch_ids = ids[start:start + cfg.batch_size]
        recon = sample(predictor, state.schedule,
                       under[start:start + len(batch_ids)], sampler, rng=rng)
        for image_id, rec in zip(batch_ids, recon):
            save_raw_tensor(out / "recon" / f"{image_id}.scnt", rec)
            write_pgm(out / "recon" / f"{image_id}.pgm", rec)
            ref_path = data_dir / "full" / f"{image_id}.scnt"
            if ref_path.is_file():
                err = np.abs(rec - load_raw_tensor(ref_path).astype(np.float32))
                save_raw_tensor(out / "errmap" / f"{image_id}.scnt", err)
                write_pgm(out / "errmap" / f"{image_id}.pgm", err)
        done += len(batch_ids)
        if done % 20 < cfg.batch_size:
            LOG.info("reconstructed %d/%d images", done, len(ids))
    LOG.info("wrote %d reconstructions to %s", len(ids), out / "recon")


def _load_by_id(directory: Path, ids) -> list[np.ndarray]:
    return [load_raw_tensor(directory / f"{i}.scnt") for i in ids]


def cmd_eval(args) -> None:
    est_dir = Path(args.est_dir)
    refs_dir = Path(args.refs_dir)
    ids = sorted(p.stem for p in est_dir.glob("*.scnt"))
    if not ids:
        raise DataError(f"no .scnt estimates found in {est_dir}")
    missing = [i for i in ids if not (refs_dir / f"{i}.scnt").is_file()]
    if missing:
        raise DataError(f"{len(missing)} estimates lack references, e.g. "
                        f"{missing[0]!r}")
    refs = _load_by_id(refs_dir, ids)
    ests = _load_by_id(est_dir, ids)
    report = evaluate_pairs(ids, refs, ests, peak=args.peak)
    out = Path(args.out) if args.out else est_dir / "metrics.csv"
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in report.rows():
            writer.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    agg = report.aggregate()
    print(f"images   {len(ids)}")
    print(f"psnr_db  {format_mean_std(*agg['psnr_db'])}")
    print(f"ssim     {format_mean_std(*agg['ssim'], decimals=4)}")
    print(f"nmse     {format_mean_std(*agg['nmse'], decimals=4)}")
    if args.compare_dir:
        other = _load_by_id(Path(args.compare_dir), ids)
        base = evaluate_pairs(ids, refs, other, peak=args.peak)
        try:
            test = wilcoxon_signed_rank(list(zip(report.psnr_db,
                                                 base.psnr_db)))
        except DataError:
            print("wilcoxon  not significant (all paired differences are zero)")
        else:
            verdict = "significant" if test.significant else "not significant"
            print(f"wilcoxon  W={test.statistic:.1f} p={test.p_value:.3g} "
                  f"n={test.n} ({verdict} at p<0.005)")
    LOG.info("metrics written to %s", out)


def cmd_inspect(args) -> None:
    if args.subject == "schedule":
        sched = make_schedule(args.steps)
        print("t m sigma sigma_step sigma_tilde")
        for t in range(1, sched.steps + 1):
            print(f"{t} {sched.m[t]:.10f} {sched.sigma[t]:.10f} "
                  f"{sched.sigma_step[t]:.10f} {sched.sigma_tilde[t]:.10f}")
    elif args.subject == "mask":
        mask = make_mask(args.width, args.acceleration, args.center_lines,
                         args.offset)
        img = np.tile(mask.columns.astype(np.float64), (args.width, 1))
        out = Path(args.out) if args.out else Path(f"mask_r{args.acceleration}.pgm")
        write_pgm(out, img)
        print(f"columns {int(mask.columns.sum())}/{mask.width} "
              f"density {mask.density:.4f} -> {out}")
    else:
        path = Path(args.input)
        if path.suffix == ".pgm":
            img = read_pgm(path)
        else:
            img = load_raw_tensor(path).astype(np.float64)
        levels = tuple(int(p) for p in args.j.split(","))
        pyr = contourlet_decompose(img, len(levels), levels)
        out = Path(args.out) if args.out else Path("contourlet")
        out.mkdir(parents=True, exist_ok=True)
        for level, bands in enumerate(pyr.subbands):
            for k, band in enumerate(bands):
                lo, hi = float(band.min()), float(band.max())
                norm = (band - lo) / (hi - lo) if hi > lo else band * 0.0
                write_pgm(out / f"level{level}_band{k}.pgm", norm)
            print(f"level {level}: {len(bands)} subbands of "
                  f"{bands[0].shape[0]}x{bands[0].shape[1]}")
        lo_img = pyr.lowpass
        write_pgm(out / "lowpass.pgm", np.clip(lo_img, 0.0, 1.0))
        print(f"lowpass: {lo_img.shape[0]}x{lo_img.shape[1]} -> {out}")


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridgemri",
        description="bridge-diffusion reconstruction experiments on "
                    "synthetic undersampled MR phantoms")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    _add_config_flags(p)
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the twin bridge networks")
    _add_config_flags(p)
    p.add_argument("--resume", metavar="CKPT",
                   help="continue from a checkpoint (config comes from it)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="sample reconstructions from a "
                                           "checkpoint")
    p.add_argument("--checkpoint", required=True, metavar="CKPT")
    p.add_argument("--data-dir", metavar="DIR")
    p.add_argument("--out-dir", metavar="DIR")
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--count", type=int, metavar="N",
                   help="limit to the first N images of the split")
    p.add_argument("--stochastic", action="store_true",
                   help="sample with transition noise")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="score reconstructions against references")
    p.add_argument("--refs-dir", required=True, metavar="DIR")
    p.add_argument("--est-dir", required=True, metavar="DIR")
    p.add_argument("--compare-dir", metavar="DIR",
                   help="second method for a paired signed-rank test on PSNR")
    p.add_argument("--out", metavar="CSV")
    p.add_argument("--peak", type=float, default=1.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print schedules, masks, or "
                                       "directional subbands")
    p.add_argument("subject", choices=("schedule", "mask", "contourlet"))
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--acceleration", type=int, default=4)
    p.add_argument("--center-lines", type=int, default=0)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--input", metavar="FILE",
                   help="image (.scnt or .pgm) for contourlet inspection")
    p.add_argument("--j", default="3,3,2", metavar="J1,J2,...",
                   help="directional orders per pyramid level")
    p.add_argument("--out", metavar="PATH")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        return EXIT_OK if code == 0 else EXIT_USAGE
    _setup_logging()
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.func is cmd_inspect and args.subject == "contourlet" \
            and not args.input:
        LOG.error("inspect contourlet needs --input")
        return EXIT_USAGE
    try:
        args.func(args)
    except ConfigError as exc:
        LOG.error("configuration error: %s", exc)
        return EXIT_USAGE
    except DataError as exc:
        LOG.error("data error: %s", exc)
        return EXIT_DATA
    except NumericsError as exc:
        LOG.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except BridgeMRIError as exc:
        LOG.error("error: %s", exc)
        return EXIT_USAGE
    except OSError as exc:
        LOG.error("i/o error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
