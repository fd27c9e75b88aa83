from __future__ import annotations

from pathlib import Path

from weaksal.errors import DimensionMismatch, EmptyDataset, MissingMap
from weaksal.imagecore import read_map, read_mask
from weaksal.metrics import DEFAULT_THRESHOLDS, EvalReport, evaluate


def evaluate_dataset(preds_dir, gts_dir, out_dir=None, n_thresholds: int = DEFAULT_THRESHOLDS) -> EvalReport:
    """Score every ``<name>.png`` mask in ``gts_dir`` against the same-named map in ``preds_dir``."""
    preds_dir, gts_dir = Path(preds_dir), Path(gts_dir)
    gt_paths = sorted(gts_dir.glob("*.png"))
    if not gt_paths:
        raise EmptyDataset(f"no ground-truth masks in {gts_dir}")
    preds, gts = [], []
    for gt_path in gt_paths:
        pred_path = preds_dir / gt_path.name
        if not pred_path.is_file():
            raise MissingMap(f"no prediction for {gt_path.name} in {preds_dir}")
        pred, gt = read_map(pred_path), read_mask(gt_path)
        if pred.shape != gt.shape:
            raise DimensionMismatch(f"{gt_path.name}: prediction {pred.shape} vs ground truth {gt.shape}")
        preds.append(pred)
        gts.append(gt)
    report = evaluate(preds, gts, n_thresholds)
    if out_dir is not None:
        report.write(out_dir)
    return report
