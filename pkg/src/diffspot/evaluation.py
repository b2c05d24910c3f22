"""Pixel- and image-level metrics with per-generator aggregation.

Pixel metrics (F1, IoU) are computed per image and averaged over manipulated
images only (ground truth with at least one positive pixel); image metrics
(F1 on the fake class, accuracy) cover all images.  Scores are grouped by
``generator_tag`` and the global averages are arithmetic means over subsets.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as D
from .engine import ModelState, predict
from .errors import ValidationError

METRIC_NAMES = ("pixel_f1", "pixel_iou", "image_f1", "image_acc")


def pixel_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """Overlap scores between two binary masks: (f1, iou).

    f1 = 2TP/(2TP+FP+FN), iou = TP/(TP+FP+FN).  Both are 1.0 when both masks
    are empty (callers normally exclude empty-GT images) and 0.0 when exactly
    one is empty.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.logical_and(p, g).sum())
    fp = int(np.logical_and(p, ~g).sum())
    fn = int(np.logical_and(~p, g).sum())
    if tp + fp + fn == 0:
        return 1.0, 1.0
    f1 = 2 * tp / (2 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    return f1, iou


def image_metrics(p_fakes, labels, threshold: float = 0.5) -> tuple[float, float]:
    """Detection scores over fake probabilities: (f1 on fake class, accuracy).

    ``labels`` may be strings ("real"/"fake") or real=0/fake=1 integers.
    Prediction is the strict comparison ``p_fake > threshold``.  F1 is 0.0
    when its denominator vanishes (no fake labels and no fake predictions).
    """
    p = np.asarray(list(p_fakes), dtype=np.float64)
    lab = [D.LABEL_INDEX[v] if isinstance(v, str) else int(v) for v in labels]
    y = np.asarray(lab, dtype=np.int64)
    if p.shape != y.shape or p.size == 0:
        raise ValueError("p_fakes and labels must be equal-length and nonempty")
    pred = (p > threshold).astype(np.int64)
    acc = float((pred == y).mean())
    tp = int(np.logical_and(pred == 1, y == 1).sum())
    fp = int(np.logical_and(pred == 1, y == 0).sum())
    fn = int(np.logical_and(pred == 0, y == 1).sum())
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    return f1, acc


@dataclass
class SubsetMetrics:
    subset: str
    n_images: int
    n_manipulated: int
    pixel_f1: float | None
    pixel_iou: float | None
    image_f1: float
    image_acc: float

    def as_dict(self) -> dict:
        return self.__dict__.copy()


@dataclass
class MetricReport:
    subsets: list[SubsetMetrics]
    average: dict[str, float | None]

    def to_json(self, path: str | Path) -> None:
        doc = {"subsets": [s.as_dict() for s in self.subsets], "average": self.average}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))

    def to_csv(self, path: str | Path) -> None:
        def fmt(v):
            return "" if v is None else f"{v:.6f}"

        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["subset", "n_images", "pixel_IoU", "pixel_F1", "image_F1", "image_Acc"])
            for s in self.subsets:
                writer.writerow(
                    [s.subset, s.n_images, fmt(s.pixel_iou), fmt(s.pixel_f1), fmt(s.image_f1), fmt(s.image_acc)]
                )
            a = self.average
            writer.writerow(
                ["AVG", sum(s.n_images for s in self.subsets), fmt(a["pixel_iou"]),
                 fmt(a["pixel_f1"]), fmt(a["image_f1"]), fmt(a["image_acc"])]
            )

    def metric(self, subset: str, name: str) -> float | None:
        if subset == "AVG":
            return self.average[name]
        for s in self.subsets:
            if s.subset == subset:
                return getattr(s, name)
        raise KeyError(f"no subset {subset!r}")


def evaluate_samples(
    samples: list[D.ImageSample],
    state: ModelState,
    threshold: float = 0.5,
    micro_average: bool = False,
) -> MetricReport:
    """Metric aggregation over already-decoded samples (the evaluation core)."""
    if not samples:
        raise ValidationError("no samples to evaluate")
    per_image = []
    for s in samples:
        result = predict(state, s.image, threshold=threshold)
        rec = {
            "subset": s.generator_tag,
            "label": s.label,
            "p_fake": result.p_fake,
            "pred": result.mask_binary if s.mask.any() else None,
            "gt": s.mask if s.mask.any() else None,
        }
        per_image.append(rec)

    by_subset: dict[str, list[dict]] = {}
    for rec in per_image:
        by_subset.setdefault(rec["subset"], []).append(rec)

    subsets = []
    for tag in sorted(by_subset):
        recs = by_subset[tag]
        manip = [r for r in recs if r["gt"] is not None]
        pixel_f1 = pixel_iou = None
        if manip:
            if micro_average:
                tp = fp = fn = 0
                for r in manip:
                    p, g = r["pred"].astype(bool), r["gt"].astype(bool)
                    tp += int(np.logical_and(p, g).sum())
                    fp += int(np.logical_and(p, ~g).sum())
                    fn += int(np.logical_and(~p, g).sum())
                pixel_f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 1.0
                pixel_iou = tp / (tp + fp + fn) if (tp + fp + fn) else 1.0
            else:
                scores = [pixel_metrics(r["pred"], r["gt"]) for r in manip]
                pixel_f1 = float(np.mean([s[0] for s in scores]))
                pixel_iou = float(np.mean([s[1] for s in scores]))
        f1, acc = image_metrics(
            [r["p_fake"] for r in recs], [r["label"] for r in recs], threshold=threshold
        )
        subsets.append(
            SubsetMetrics(
                subset=tag,
                n_images=len(recs),
                n_manipulated=len(manip),
                pixel_f1=pixel_f1,
                pixel_iou=pixel_iou,
                image_f1=f1,
                image_acc=acc,
            )
        )

    def subset_mean(name: str) -> float | None:
        vals = [getattr(s, name) for s in subsets if getattr(s, name) is not None]
        return float(np.mean(vals)) if vals else None

    average = {name: subset_mean(name) for name in METRIC_NAMES}
    return MetricReport(subsets=subsets, average=average)


def evaluate(
    manifest: D.Manifest,
    state: ModelState,
    split: str | None = "test",
    threshold: float = 0.5,
    micro_average: bool = False,
) -> MetricReport:
    """Run the model over a manifest split and aggregate metrics by subset.

    ``micro_average=True`` pools pixel counts across a subset's manipulated
    images instead of averaging per-image scores.
    """
    subset = manifest.filter(split=split) if split else manifest
    if len(subset) == 0:
        raise ValidationError(f"no samples in split {split!r}")
    samples = [D.load_sample(subset, e) for e in subset.entries]
    return evaluate_samples(samples, state, threshold=threshold, micro_average=micro_average)
