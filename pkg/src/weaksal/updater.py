"""Per-image annotation update: keep, merge or discard a noisy annotation.

Each image carries three maps (current annotation, network prediction and
the averaged class activation map) plus their CRF refinements. The refined
annotation and prediction are compared first; when they disagree the CAM
arbitrates, and when neither is close to the CAM the sample is dropped.
"""
from __future__ import annotations

from dataclasses import dataclass

from weaksal.densecrf import CrfParams, PairwiseKernels, mean_field_refine
from weaksal.errors import ConfigError
from weaksal.imagecore import Image, SaliencyMap, check_same_shape
from weaksal.metrics import mae

KEEP_MERGED, DISCARD, KEEP_ANNOTATION, KEEP_PREDICTION = 1, 2, 3, 4


@dataclass(frozen=True)
class UpdaterThresholds:
    """Agreement (alpha) and CAM-consistency (beta) thresholds on the [0, 1] scale."""

    alpha: float = 15 / 255
    beta: float = 40 / 255

    def validate(self) -> None:
        if not 0.0 < self.alpha < self.beta < 1.0:
            raise ConfigError(f"need 0 < alpha < beta < 1, got alpha={self.alpha}, beta={self.beta}")


@dataclass(frozen=True)
class AnnotationBundle:
    s_anno: SaliencyMap
    s_predict: SaliencyMap
    s_cam: SaliencyMap
    crf_anno: SaliencyMap
    crf_predict: SaliencyMap
    crf_cam: SaliencyMap

    def __post_init__(self):
        maps = (self.s_anno, self.s_predict, self.s_cam, self.crf_anno, self.crf_predict, self.crf_cam)
        for m in maps[1:]:
            check_same_shape(maps[0], m, what="annotation bundle maps")

    @property
    def shape(self) -> tuple[int, int]:
        return self.s_anno.shape


@dataclass(frozen=True)
class UpdateDecision:
    """Outcome for one image. ``s_update`` is None exactly when discarded."""

    branch: int
    s_update: SaliencyMap | None
    mae_anno_predict: float
    mae_anno_cam: float
    mae_predict_cam: float

    @property
    def keep(self) -> bool:
        return self.s_update is not None

    def audit_line(self, name: str) -> str:
        action = "keep" if self.keep else "discard"
        return (f"{name}\tbranch={self.branch}\t{action}\tmae_anno_predict={self.mae_anno_predict:.6f}"
                f"\tmae_anno_cam={self.mae_anno_cam:.6f}\tmae_predict_cam={self.mae_predict_cam:.6f}")


def prepare_bundle(image: Image, s_anno: SaliencyMap, s_predict: SaliencyMap, s_cam: SaliencyMap,
                   crf: CrfParams, kernels: PairwiseKernels | None = None, method: str = "auto") -> AnnotationBundle:
    """CRF-refine the annotation, prediction and CAM maps of one image."""
    for m in (s_anno, s_predict, s_cam):
        check_same_shape(image, m, what="image and map")
    crf.validate()
    if kernels is None:
        kernels = PairwiseKernels(image, crf, method)
    refine = lambda m: mean_field_refine(image, m, crf, kernels=kernels)
    return AnnotationBundle(s_anno, s_predict, s_cam, refine(s_anno), refine(s_predict), refine(s_cam))


def update_annotation(image: Image, b: AnnotationBundle, t: UpdaterThresholds, crf: CrfParams,
                      kernels: PairwiseKernels | None = None, method: str = "auto") -> UpdateDecision:
    check_same_shape(image, b, what="image and annotation bundle")
    t.validate()
    d_ap = mae(b.crf_anno, b.crf_predict)
    d_ac = mae(b.crf_anno, b.crf_cam)
    d_pc = mae(b.crf_predict, b.crf_cam)
    if d_ap <= t.alpha:
        avg = SaliencyMap((b.s_anno.values + b.s_predict.values) / 2.0)
        merged = mean_field_refine(image, avg, crf, method=method, kernels=kernels)
        return UpdateDecision(KEEP_MERGED, merged, d_ap, d_ac, d_pc)
    if d_ac > t.beta and d_pc > t.beta:
        return UpdateDecision(DISCARD, None, d_ap, d_ac, d_pc)
    if d_ac <= d_pc:
        return UpdateDecision(KEEP_ANNOTATION, b.crf_anno, d_ap, d_ac, d_pc)
    return UpdateDecision(KEEP_PREDICTION, b.crf_predict, d_ap, d_ac, d_pc)
