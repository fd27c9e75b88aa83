"""MAE, dataset precision-recall curves and maximum F-measure."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from weaksal.errors import DimensionMismatch, EmptyCurve, EmptyDataset, MalformedFile
from weaksal.imagecore import BinaryMask, SaliencyMap

BETA_SQ = 0.3
DEFAULT_THRESHOLDS = 256


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class EvalReport:
    max_f: float
    mae: float
    curve: list[PrPoint] = field(default_factory=list)

    def to_text(self) -> str:
        best = max(self.curve, key=lambda p: f_measure(p.precision, p.recall))
        lines = [
            f"max F-measure    : {self.max_f:.4f}  (beta^2 = {BETA_SQ})",
            f"  at threshold   : {best.threshold:.4f}  P = {best.precision:.4f}  R = {best.recall:.4f}",
            f"MAE              : {self.mae:.4f}",
            f"curve points     : {len(self.curve)}",
        ]
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        curve = " ".join(f"{p.threshold!r},{p.precision!r},{p.recall!r}" for p in self.curve)
        return f"max_f = {self.max_f!r}\nmae = {self.mae!r}\ncurve = {curve}\n"

    @classmethod
    def from_kv(cls, text: str) -> EvalReport:
        kv = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise MalformedFile(f"bad report line: {line!r}")
            kv[key.strip()] = value.strip()
        try:
            curve = [PrPoint(*map(float, trip.split(","))) for trip in kv["curve"].split()]
            return cls(max_f=float(kv["max_f"]), mae=float(kv["mae"]), curve=curve)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedFile(f"bad report: {exc}") from exc

    def curve_csv(self) -> str:
        rows = ["threshold,precision,recall"]
        rows += [f"{p.threshold!r},{p.precision!r},{p.recall!r}" for p in self.curve]
        return "\n".join(rows) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text())
        (out / "report.kv").write_text(self.to_kv())
        (out / "pr_curve.csv").write_text(self.curve_csv())


def _check_pair(a, b) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"map sizes differ: {a.shape} vs {b.shape}")


def mae(s1: SaliencyMap | BinaryMask, s2: SaliencyMap | BinaryMask) -> float:
    _check_pair(s1, s2)
    a = np.asarray(s1.values, dtype=np.float64)
    b = np.asarray(s2.values, dtype=np.float64)
    return float(np.mean(np.abs(a - b)))


def mean_dataset_mae(annos: Sequence[SaliencyMap], preds: Sequence[SaliencyMap]) -> float:
    if len(annos) != len(preds):
        raise DimensionMismatch(f"{len(annos)} annotations vs {len(preds)} predictions")
    if not annos:
        raise EmptyDataset("no map pairs to compare")
    total = 0.0
    for a, p in zip(annos, preds):
        total += mae(a, p)
    return total / len(annos)


def thresholds(n: int = DEFAULT_THRESHOLDS) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one threshold")
    return np.linspace(0.0, 1.0, n)


def image_pr(pred: SaliencyMap, gt: BinaryMask, ts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-threshold precision and recall of ``pred > t`` against ``gt``.

    Precision is 1 where nothing is predicted positive.
    """
    _check_pair(pred, gt)
    v = pred.values.ravel()
    pos = gt.values.ravel().astype(bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise ValueError("ground truth has no positive pixel")
    all_sorted = np.sort(v)
    pos_sorted = np.sort(v[pos])
    predicted = v.size - np.searchsorted(all_sorted, ts, side="right")
    tp = n_pos - np.searchsorted(pos_sorted, ts, side="right")
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / n_pos
    return precision, recall


def dataset_pr_curve(preds: Sequence[SaliencyMap], gts: Sequence[BinaryMask],
                     n_thresholds: int = DEFAULT_THRESHOLDS) -> list[PrPoint]:
    if len(preds) != len(gts):
        raise DimensionMismatch(f"{len(preds)} predictions vs {len(gts)} ground truths")
    if not preds:
        raise EmptyDataset("no images to evaluate")
    ts = thresholds(n_thresholds)
    p_sum = np.zeros_like(ts)
    r_sum = np.zeros_like(ts)
    for pred, gt in zip(preds, gts):
        p, r = image_pr(pred, gt, ts)
        p_sum += p
        r_sum += r
    n = len(preds)
    return [PrPoint(float(t), float(p), float(r)) for t, p, r in zip(ts, p_sum / n, r_sum / n)]


def f_measure(precision: float, recall: float, beta_sq: float = BETA_SQ) -> float:
    denom = beta_sq * precision + recall
    if denom <= 0.0:
        return 0.0
    return (1.0 + beta_sq) * precision * recall / denom


def max_f_measure(curve: Sequence[PrPoint], beta_sq: float = BETA_SQ) -> float:
    if not curve:
        raise EmptyCurve("PR curve has no points")
    return max(f_measure(p.precision, p.recall, beta_sq) for p in curve)


def evaluate(preds: Sequence[SaliencyMap], gts: Sequence[BinaryMask],
             n_thresholds: int = DEFAULT_THRESHOLDS) -> EvalReport:
    curve = dataset_pr_curve(preds, gts, n_thresholds)
    return EvalReport(max_f=max_f_measure(curve), mae=mean_dataset_mae(gts, preds), curve=curve)
