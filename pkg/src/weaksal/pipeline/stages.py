"""Alternating optimisation: train, predict, refine and update annotations.

Stage 1 trains the whole network on labelled images and draws the CAM of
each round from the current network. Stage 2 freezes the classification
layer, computes every image's CAM once from the stage-1 network, and
fine-tunes the saliency stream on unlabelled images.

Evaluation masks are never opened here.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from weaksal.densecrf import PairwiseKernels
from weaksal.errors import EmptyDataset, MalformedFile
from weaksal.imagecore import (
    Image,
    SaliencyMap,
    binarize,
    decode_map,
    encode_map,
    read_image,
    read_map,
    write_map,
)
from weaksal.metrics import mean_dataset_mae
from weaksal.pipeline.config import PipelineConfig
from weaksal.pipeline.manifest import DatasetManifest
from weaksal.seedsal import mbd_seed_saliency
from weaksal.toynet import (
    NetParams,
    TrainSample,
    forward,
    init_params,
    save_checkpoint,
    top_k_cam_mean,
    train_round,
)
from weaksal.toynet.params import CLS_NAMES
from weaksal.updater import prepare_bundle, update_annotation

log = logging.getLogger(__name__)

STOP_THRESHOLD = "threshold"
STOP_ROUND_CAP = "round_cap"


@dataclass
class RoundState:
    round_index: int = 0
    mean_mae_history: list[float] = field(default_factory=list)
    best_validation_loss: float = math.inf
    discarded_count: int = 0
    stop_reason: str = ""
    discarded: list[str] = field(default_factory=list)


def quantized(smap: SaliencyMap) -> SaliencyMap:
    """The map exactly as it reads back from its 8-bit PNG."""
    return decode_map(encode_map(smap))


def load_images(manifest: DatasetManifest) -> list[Image]:
    return [read_image(e.image) for e in manifest.entries]


def initial_annotations(manifest: DatasetManifest, images: Sequence[Image], cfg: PipelineConfig) -> list[SaliencyMap]:
    """Existing annotation files, or seed saliency where a file is missing."""
    maps = []
    for entry, image in zip(manifest.entries, images):
        if entry.annotation.is_file():
            smap = read_map(entry.annotation)
            if smap.shape != image.shape:
                raise MalformedFile(f"annotation {entry.annotation} does not match image {entry.image}")
        else:
            smap = quantized(mbd_seed_saliency(image, cfg.seed))
        maps.append(smap)
    return maps


def validation_names(names: Sequence[str], fraction: float, seed: int) -> set[str]:
    """Seeded split; keeps at least one training entry and, if possible, one validation entry."""
    n = len(names)
    if fraction <= 0 or n < 2:
        return set()
    n_val = min(n - 1, max(1, int(round(fraction * n))))
    order = np.random.default_rng(seed).permutation(n)
    return {names[i] for i in order[:n_val]}


@dataclass
class _Outputs:
    work_dir: Path | None

    def annotations(self, round_index: int, names, maps) -> None:
        if self.work_dir is None:
            return
        d = self.work_dir / "annotations" / f"round{round_index:02d}"
        for name, smap in zip(names, maps):
            write_map(d / f"{name}.png", smap)

    def audit(self, round_index: int, lines) -> None:
        if self.work_dir is None:
            return
        d = self.work_dir / "audit"
        d.mkdir(parents=True, exist_ok=True)
        (d / f"round{round_index:02d}.log").write_text("".join(f"{line}\n" for line in lines))

    def finish(self, manifest: DatasetManifest, params: NetParams, cfg: PipelineConfig, state: RoundState) -> None:
        if self.work_dir is None:
            return
        ann_dir = self.work_dir / "annotations" / f"round{state.round_index:02d}"
        final = manifest.with_annotation_dir(ann_dir)
        DatasetManifest(final.active(), final.root).save(self.work_dir / "manifest.txt")
        (self.work_dir / "discarded.txt").write_text("".join(f"{n}\n" for n in state.discarded))
        save_checkpoint(self.work_dir / "model.ckpt", params, cfg.net)
        lines = [f"round {i + 1}\tmean_mae={m!r}" for i, m in enumerate(state.mean_mae_history)]
        lines += [f"stop_reason = {state.stop_reason}", f"discarded = {state.discarded_count}",
                  f"best_validation_loss = {state.best_validation_loss!r}"]
        (self.work_dir / "rounds.log").write_text("\n".join(lines) + "\n")


CamSource = Callable[[int, object, NetParams], SaliencyMap]


def _alternate(manifest: DatasetManifest, images: list[Image], annotations: list[SaliencyMap],
               cam_for: CamSource, cfg: PipelineConfig, params: NetParams, freeze_classifier: bool,
               work_dir) -> tuple[NetParams, RoundState]:
    out = _Outputs(None if work_dir is None else Path(work_dir))
    names = [e.name for e in manifest.entries]
    labels = [None if freeze_classifier else e.labels for e in manifest.entries]
    active = [i for i, e in enumerate(manifest.entries) if e.active]
    if not active:
        raise EmptyDataset("manifest has no active entries")
    val = validation_names([names[i] for i in active], cfg.val_fraction, cfg.train.rng_seed)
    state = RoundState()
    for r in range(1, cfg.max_rounds + 1):
        samples = {i: TrainSample(images[i], binarize(annotations[i], cfg.binarize_threshold), labels[i], names[i])
                   for i in active}
        train = [samples[i] for i in active if names[i] not in val]
        held = [samples[i] for i in active if names[i] in val]
        train_cfg = dataclasses.replace(cfg.train, rng_seed=cfg.train.rng_seed + r)
        if all(s.degenerate for s in samples.values()):
            # nothing to learn from; the update step can still recover non-degenerate maps
            log.warning("round %d: every annotation is all-background or all-foreground; training skipped", r)
            history = []
        else:
            pool = train if any(not s.degenerate for s in train) else held
            params, history = train_round(pool, held, train_cfg, cfg.net, params, freeze_classifier)
        if history:
            state.best_validation_loss = min(state.best_validation_loss, min(h.val_loss for h in history))

        kept, preds, audit = [], {}, []
        for i in active:
            fwd = forward(images[i], params, cfg.net)
            kernels = PairwiseKernels(images[i], cfg.crf, cfg.crf_method)
            bundle = prepare_bundle(images[i], annotations[i], fwd.fused_prob, cam_for(i, fwd, params),
                                    cfg.crf, kernels=kernels)
            decision = update_annotation(images[i], bundle, cfg.thresholds, cfg.crf, kernels=kernels)
            audit.append(decision.audit_line(names[i]))
            if decision.keep:
                annotations[i] = quantized(decision.s_update)
                preds[i] = fwd.fused_prob
                kept.append(i)
            else:
                state.discarded.append(names[i])
        manifest.deactivate(state.discarded)
        state.discarded_count = len(state.discarded)
        active = kept
        out.annotations(r, [names[i] for i in active], [annotations[i] for i in active])
        out.audit(r, audit)
        state.round_index = r
        if not active:
            raise EmptyDataset(f"round {r} discarded every remaining sample")
        mean_mae = mean_dataset_mae([annotations[i] for i in active], [preds[i] for i in active])
        state.mean_mae_history.append(mean_mae)
        log.info("round %d: mean MAE %.4f, %d active, %d discarded", r, mean_mae, len(active), len(state.discarded))
        if mean_mae < cfg.stop_mean_mae:
            state.stop_reason = STOP_THRESHOLD
            break
    else:
        state.stop_reason = STOP_ROUND_CAP
    out.finish(manifest, params, cfg, state)
    return params, state


def run_stage1(manifest: DatasetManifest, cfg: PipelineConfig, work_dir=None,
               params: NetParams | None = None) -> tuple[NetParams, RoundState]:
    """Alternate training with annotation updates on a labelled manifest."""
    cfg.validate()
    manifest.require_nonempty()
    for e in manifest.active():
        if not e.labels:
            raise MalformedFile(f"stage 1 needs image labels; {e.image} has none")
    manifest.check_labels(cfg.net.n_classes)
    images = load_images(manifest)
    annotations = initial_annotations(manifest, images, cfg)
    params = init_params(cfg.net, cfg.train.rng_seed) if params is None else params.copy()
    k = min(cfg.cam_top_k_stage1, cfg.net.n_classes)
    cam_for = lambda i, fwd, p: top_k_cam_mean(fwd, p, k)
    return _alternate(manifest, images, annotations, cam_for, cfg, params, False, work_dir)


def offline_cams(images: Sequence[Image], params: NetParams, cfg: PipelineConfig) -> list[SaliencyMap]:
    """Top-k CAM mean of every image under fixed parameters, computed once."""
    k = min(cfg.cam_top_k_stage2, cfg.net.n_classes)
    return [top_k_cam_mean(forward(image, params, cfg.net), params, k) for image in images]


def run_stage2(manifest: DatasetManifest, stage1_params: NetParams, cfg: PipelineConfig, work_dir=None,
               seed_maps: Sequence[SaliencyMap] | None = None) -> tuple[NetParams, RoundState]:
    """Fine-tune the saliency stream guided by CAMs from the stage-1 network.

    Every entry starts active, including ones discarded in stage 1.
    """
    cfg.validate()
    manifest = DatasetManifest([dataclasses.replace(e, active=True) for e in manifest.entries], manifest.root)
    manifest.require_nonempty()
    stage1_params.check(cfg.net)
    images = load_images(manifest)
    if seed_maps is None:
        annotations = initial_annotations(manifest, images, cfg)
    else:
        annotations = [quantized(m) for m in seed_maps]
        if len(annotations) != len(images):
            raise MalformedFile(f"{len(annotations)} seed maps for {len(images)} images")
    cams = offline_cams(images, stage1_params, cfg)
    params, state = _alternate(manifest, images, annotations, lambda i, fwd, p: cams[i], cfg,
                               stage1_params.copy(), True, work_dir)
    for name in CLS_NAMES:
        assert params[name].tobytes() == stage1_params[name].tobytes()
    return params, state


def predict_maps(images: Sequence[Image], params: NetParams, cfg: PipelineConfig) -> list[SaliencyMap]:
    return [forward(image, params, cfg.net).fused_prob for image in images]
