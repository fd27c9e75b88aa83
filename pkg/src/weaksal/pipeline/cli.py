"""Command-line entry point: ``weaksal <command> ...``.

Exit codes: 0 success, 2 bad input (unreadable or inconsistent files,
invalid configuration), 3 any other failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from weaksal.densecrf import mean_field_refine
from weaksal.errors import ConfigError, MissingMap, WeaksalError
from weaksal.imagecore import read_image, write_map
from weaksal.metrics import EvalReport
from weaksal.pipeline.config import PipelineConfig, parse_pairs
from weaksal.pipeline.evaluate import evaluate_dataset
from weaksal.pipeline.manifest import DatasetManifest, ManifestEntry
from weaksal.pipeline.stages import load_images, predict_maps, run_stage1, run_stage2
from weaksal.pipeline.synth import corrupt_annotation, generate_synth_dataset
from weaksal.seedsal import load_external_saliency, mbd_seed_saliency
from weaksal.toynet import load_checkpoint
from weaksal.toynet.params import config_from_params

EXIT_OK, EXIT_BAD_INPUT, EXIT_FAILURE = 0, 2, 3
log = logging.getLogger("weaksal")


def load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    cfg = cfg.with_overrides(parse_pairs(args.set or []))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, rng_seed=args.seed))
    cfg.validate()
    return cfg


def seed_value(args, cfg: PipelineConfig) -> int:
    return cfg.train.rng_seed if args.seed is None else args.seed


def config_for_checkpoint(cfg: PipelineConfig, path):
    params, scales = load_checkpoint(path)
    net = config_from_params(params, scales or cfg.net.scales)
    return params, dataclasses.replace(cfg, net=net)


# --- commands --------------------------------------------------------------------------

def cmd_synth(args) -> None:
    cfg = load_config(args)
    m = generate_synth_dataset(args.n_images, args.n_classes, seed_value(args, cfg), args.out, args.size)
    print(f"wrote {len(m)} images and {Path(args.out) / 'manifest.txt'}")


def cmd_seed(args) -> None:
    cfg = load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    if args.out_dir:
        manifest = manifest.with_annotation_dir(Path(args.out_dir).resolve())
    rng = np.random.default_rng(seed_value(args, cfg))
    for entry in manifest.entries:
        smap = mbd_seed_saliency(read_image(entry.image), cfg.seed)
        if args.corrupt_erosion > 1 or args.corrupt_noise > 0:
            smap = corrupt_annotation(smap, rng, args.corrupt_erosion, args.corrupt_noise)
        write_map(entry.annotation, smap)
    if args.manifest_out:
        manifest.save(args.manifest_out)
    print(f"seeded {len(manifest)} annotations")


def cmd_refine(args) -> None:
    cfg = load_config(args)
    images = sorted(Path(args.images).glob("*.png"))
    if not images:
        raise MissingMap(f"no PNG images in {args.images}")
    manifest = DatasetManifest([ManifestEntry(p, None, p) for p in images], Path(args.images))
    for path, smap in zip(images, load_external_saliency(args.maps, manifest)):
        refined = mean_field_refine(read_image(path), smap, cfg.crf, method=cfg.crf_method)
        write_map(Path(args.out) / f"{path.stem}.png", refined)
    print(f"refined {len(images)} maps into {args.out}")


def cmd_stage1(args) -> None:
    cfg = load_config(args)
    manifest = DatasetManifest.load(args.manifest)
    _, state = run_stage1(manifest, cfg, args.work_dir)
    print(f"stage 1: {state.round_index} rounds, stop reason {state.stop_reason}, "
          f"{state.discarded_count} discarded; checkpoint {Path(args.work_dir) / 'model.ckpt'}")


def cmd_stage2(args) -> None:
    cfg = load_config(args)
    params, cfg = config_for_checkpoint(cfg, args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    seeds = load_external_saliency(args.maps_dir, manifest) if args.maps_dir else None
    _, state = run_stage2(manifest, params, cfg, args.work_dir, seed_maps=seeds)
    print(f"stage 2: {state.round_index} rounds, stop reason {state.stop_reason}, "
          f"{state.discarded_count} discarded; checkpoint {Path(args.work_dir) / 'model.ckpt'}")


def cmd_predict(args) -> None:
    cfg = load_config(args)
    params, cfg = config_for_checkpoint(cfg, args.checkpoint)
    manifest = DatasetManifest.load(args.manifest)
    for entry, smap in zip(manifest.entries, predict_maps(load_images(manifest), params, cfg)):
        write_map(Path(args.out) / f"{entry.name}.png", smap)
    print(f"wrote {len(manifest)} predictions to {args.out}")


def cmd_eval(args) -> None:
    report = evaluate_dataset(args.preds, args.gts, args.out)
    sys.stdout.write(report.to_text())


def cmd_report(args) -> None:
    if args.kv:
        try:
            report = EvalReport.from_kv(Path(args.kv).read_text())
        except OSError as exc:
            raise WeaksalError(f"cannot read report {args.kv}: {exc}") from exc
    elif args.preds and args.gts:
        report = evaluate_dataset(args.preds, args.gts)
    else:
        raise ConfigError("report needs --kv, or both --preds and --gts")
    text = report.curve_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_config(args) -> None:
    sys.stdout.write(load_config(args).to_text())


# --- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="seed for every random generator")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (1 for bit-reproducible runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="weaksal", description="Weakly supervised saliency training pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--n-images", type=int, default=200)
    p.add_argument("--n-classes", type=int, default=6)
    p.add_argument("--size", type=int, default=48)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("seed", parents=[common], help="write seed saliency annotations for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", help="write maps here instead of the manifest's annotation paths")
    p.add_argument("--manifest-out", help="save the manifest pointing at the written maps")
    p.add_argument("--corrupt-erosion", type=int, default=0, help="grey erosion window applied to each seed")
    p.add_argument("--corrupt-noise", type=float, default=0.0, help="std of additive noise applied to each seed")
    p.set_defaults(func=cmd_seed)

    p = sub.add_parser("refine", parents=[common], help="dense CRF over a directory of maps")
    p.add_argument("--images", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("stage1", parents=[common], help="alternating training with image labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--work-dir", required=True)
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", parents=[common], help="CAM-guided fine-tuning without labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--work-dir", required=True)
    p.add_argument("--maps-dir", help="external seed maps named <image stem>.png")
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("predict", parents=[common], help="write network saliency maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="PR curve, max F-measure and MAE")
    p.add_argument("--preds", required=True)
    p.add_argument("--gts", required=True)
    p.add_argument("--out", help="directory for report.txt, report.kv and pr_curve.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="emit PR-curve CSV for plotting")
    p.add_argument("--kv", help="report.kv written by eval")
    p.add_argument("--preds")
    p.add_argument("--gts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("config", parents=[common], help="print the effective configuration")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args)
    except (WeaksalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
