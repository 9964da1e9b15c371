"""Per-class segmentation metrics: Dice, IoU, precision, recall, Hausdorff.

Ratio metrics are computed from TP/FP/FN pixel counts and are ``None`` when
their denominator is zero.  Undefined values are skipped when averaging, so a
class absent from both prediction and ground truth does not count as a perfect
score.  Hausdorff distances are in pixel units.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import directed_hausdorff

RATIO_METRICS = ("dice", "iou", "precision", "recall")
ALL_METRICS = RATIO_METRICS + ("hausdorff",)
CSV_COLUMNS = ("run_id", "mode", "seed", "split", "class") + ALL_METRICS


def _labels(m) -> np.ndarray:
    return np.asarray(getattr(m, "labels", m))


def _ratio(num: float, den: float) -> float | None:
    return num / den if den else None


def class_metrics(pred, gt, c: int) -> dict[str, float | None]:
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    ps, gs = p == c, g == c
    tp = int(np.count_nonzero(ps & gs))
    fp = int(np.count_nonzero(ps & ~gs))
    fn = int(np.count_nonzero(~ps & gs))
    return {
        "dice": _ratio(2 * tp, 2 * tp + fp + fn),
        "iou": _ratio(tp, tp + fp + fn),
        "precision": _ratio(tp, tp + fp),
        "recall": _ratio(tp, tp + fn),
    }


def hausdorff(pred, gt, c: int) -> float | None:
    """Symmetric Hausdorff distance between the class-``c`` pixel sets, or None if either is empty."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in size")
    a = np.argwhere(p == c).astype(np.float64)
    b = np.argwhere(g == c).astype(np.float64)
    if not len(a) or not len(b):
        return None
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class MetricsRecord:
    per_class: dict[int, dict[str, float | None]] = field(default_factory=dict)
    mean_dice: float | None = None
    mean_iou: float | None = None
    mean_precision: float | None = None
    mean_recall: float | None = None
    mean_hausdorff: float | None = None
    num_samples: int = 0

    def means(self) -> dict[str, float | None]:
        return {m: getattr(self, "mean_" + m) for m in ALL_METRICS}

    def csv_rows(self, run_id: str = "", mode: str = "", seed="", split: str = "") -> list[dict]:
        rows = []
        for c, scores in sorted(self.per_class.items()):
            rows.append({"run_id": run_id, "mode": mode, "seed": seed, "split": split, "class": c,
                         **{m: _fmt(scores.get(m)) for m in ALL_METRICS}})
        rows.append({"run_id": run_id, "mode": mode, "seed": seed, "split": split, "class": "mean",
                     **{m: _fmt(v) for m, v in self.means().items()}})
        return rows


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def score_pairs(pairs: Sequence[tuple[np.ndarray, np.ndarray]], num_classes: int,
                with_hausdorff: bool = True) -> MetricsRecord:
    """Average per-sample, per-class metrics over ``(pred, gt)`` label pairs.

    Each class is averaged over the samples where a metric is defined; the
    ``mean_*`` fields then average over foreground classes (class 0 excluded).
    """
    if not pairs:
        raise ValueError("cannot score an empty split")
    names = ALL_METRICS if with_hausdorff else RATIO_METRICS
    per_sample: dict[int, dict[str, list]] = {c: {m: [] for m in names} for c in range(1, num_classes)}
    for pred, gt in pairs:
        for c in range(1, num_classes):
            scores = class_metrics(pred, gt, c)
            if with_hausdorff:
                scores["hausdorff"] = hausdorff(pred, gt, c)
            for m in names:
                per_sample[c][m].append(scores[m])
    rec = MetricsRecord(num_samples=len(pairs))
    for c, lists in per_sample.items():
        rec.per_class[c] = {m: _mean(lists[m]) for m in names}
    for m in names:
        setattr(rec, "mean_" + m, _mean(rec.per_class[c][m] for c in rec.per_class))
    return rec


def evaluate(predictor, split: Sequence[tuple[np.ndarray, object]], num_classes: int | None = None,
             with_hausdorff: bool = True, batch_size: int = 16) -> MetricsRecord:
    """Predict every image in ``split`` and score it against its mask.

    ``predictor`` is either network parameters (anything with a ``config``
    attribute, run through :func:`semstack.segnet.predict`) or a callable
    mapping a batch of images ``[N,H,W]`` to label maps ``[N,H,W]``.
    """
    if not split:
        raise ValueError("cannot evaluate an empty split")
    if num_classes is None:
        num_classes = split[0][1].num_classes
    predict: Callable[[np.ndarray], np.ndarray]
    if hasattr(predictor, "config"):
        from .segnet import predict as net_predict

        def predict(batch):
            return net_predict(predictor, batch[:, None])
    else:
        predict = predictor
    pairs = []
    for start in range(0, len(split), batch_size):
        chunk = split[start:start + batch_size]
        preds = predict(np.stack([img for img, _ in chunk]))
        pairs.extend((p, _labels(m)) for p, (_, m) in zip(preds, chunk))
    return score_pairs(pairs, num_classes, with_hausdorff)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
