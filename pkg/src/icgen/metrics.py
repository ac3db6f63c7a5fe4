"""Evaluation metrics and per-dataset reports.

Segmentation is scored by mean IoU with dataset-level accumulation
(intersections and unions are summed over all slices before dividing),
which stays well defined when individual slices miss a class.  Generation
tasks are scored by MAE, PSNR and SSIM on [0, 1] intensities.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


def _aligned(pred, gt):
    if len(pred) != len(gt):
        raise ValueError(f"prediction/reference counts differ: {len(pred)} vs {len(gt)}")
    for p, g in zip(pred, gt):
        if np.asarray(p).shape != np.asarray(g).shape:
            raise ValueError("prediction/reference shapes differ")


def miou(pred, gt, class_ids) -> tuple[dict[int, float], float]:
    """Per-class IoU and the mean over foreground classes.

    Counts accumulate over the whole list before dividing; classes absent
    from both prediction and reference are excluded from the mean.
    """
    _aligned(pred, gt)
    inter = {c: 0 for c in class_ids}
    union = {c: 0 for c in class_ids}
    for p, g in zip(pred, gt):
        p = np.asarray(p)
        g = np.asarray(g)
        for c in class_ids:
            pc, gc = p == c, g == c
            inter[c] += int(np.logical_and(pc, gc).sum())
            union[c] += int(np.logical_or(pc, gc).sum())
    per_class = {c: inter[c] / union[c] for c in class_ids if union[c] > 0}
    mean = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return per_class, mean


def mae(pred, gt) -> float:
    """Mean absolute error over all pixels of the aligned lists."""
    _aligned(pred, gt)
    total, count = 0.0, 0
    for p, g in zip(pred, gt):
        diff = np.abs(np.asarray(p, dtype=np.float64) - np.asarray(g, dtype=np.float64))
        total += diff.sum()
        count += diff.size
    return total / count


def psnr(pred, gt, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE) in dB; zero MSE reports math.inf."""
    _aligned(pred, gt)
    total, count = 0.0, 0
    for p, g in zip(pred, gt):
        d = np.asarray(p, dtype=np.float64) - np.asarray(g, dtype=np.float64)
        total += (d * d).sum()
        count += d.size
    mse = total / count
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def ssim(
    pred: np.ndarray,
    gt: np.ndarray,
    window: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
    max_val: float = 1.0,
    sigma: float = 1.5,
) -> float:
    """Mean local SSIM with a Gaussian-weighted sliding window.

    Standard constants C1 = (k1 L)^2, C2 = (k2 L)^2; the border of
    (window - 1) / 2 pixels is cropped before averaging so every retained
    value comes from a fully supported window.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("ssim expects two aligned 2-D images")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than the {window}-pixel window")
    c1 = (k1 * max_val) ** 2
    c2 = (k2 * max_val) ** 2
    truncate = ((window - 1) // 2) / sigma

    def blur(a):
        return gaussian_filter(a, sigma=sigma, truncate=truncate, mode="reflect")

    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x * mu_x
    syy = blur(y * y) - mu_y * mu_y
    sxy = blur(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    ssim_map = num / den
    pad = (window - 1) // 2
    return float(ssim_map[pad:-pad, pad:-pad].mean())


def mean_ssim(pred, gt, **kwargs) -> float:
    _aligned(pred, gt)
    return float(np.mean([ssim(p, g, **kwargs) for p, g in zip(pred, gt)]))


@dataclass
class MetricReport:
    """Per-dataset evaluation summary, serializable to JSON and a CSV row."""

    dataset: str
    task_kind: str
    per_class_iou: dict = field(default_factory=dict)
    miou: float | None = None
    mae: float | None = None
    psnr: float | None = None
    psnr_infinite_count: int = 0
    ssim: float | None = None
    pixels: int = 0
    slices: int = 0
    volumes: int = 0
    accumulation: str = "dataset-level"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.psnr is not None and math.isinf(self.psnr):
            d["psnr"] = "inf"
        d["per_class_iou"] = {str(k): v for k, v in self.per_class_iou.items()}
        return d

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    CSV_FIELDS = ["dataset", "task_kind", "miou", "mae", "psnr", "ssim", "pixels", "slices", "volumes"]

    def csv_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}

    @classmethod
    def from_json(cls, path) -> "MetricReport":
        d = json.loads(Path(path).read_text())
        if d.get("psnr") == "inf":
            d["psnr"] = math.inf
        d["per_class_iou"] = {int(k): v for k, v in d.get("per_class_iou", {}).items()}
        return cls(**d)


def write_csv(reports: list[MetricReport], path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MetricReport.CSV_FIELDS)
        writer.writeheader()
        for r in reports:
            writer.writerow(r.csv_row())


def segmentation_report(pred_labels, gt_labels, class_ids, dataset: str, volumes: int = 1) -> MetricReport:
    per_class, mean = miou(pred_labels, gt_labels, class_ids)
    return MetricReport(
        dataset=dataset,
        task_kind="segmentation",
        per_class_iou=per_class,
        miou=mean,
        pixels=int(sum(np.asarray(p).size for p in pred_labels)),
        slices=len(pred_labels),
        volumes=volumes,
    )


def generation_report(pred, gt, dataset: str, task_kind: str, volumes: int = 1) -> MetricReport:
    """MAE/PSNR/SSIM over aligned slice lists.

    PSNR is averaged per slice; slices with zero error are excluded from the
    average and counted separately so a flagged-infinite result stays visible.
    """
    _aligned(pred, gt)
    per_slice_psnr = [psnr([p], [g]) for p, g in zip(pred, gt)]
    finite = [v for v in per_slice_psnr if math.isfinite(v)]
    inf_count = len(per_slice_psnr) - len(finite)
    return MetricReport(
        dataset=dataset,
        task_kind=task_kind,
        mae=mae(pred, gt),
        psnr=float(np.mean(finite)) if finite else math.inf,
        psnr_infinite_count=inf_count,
        ssim=mean_ssim(pred, gt),
        pixels=int(sum(np.asarray(p).size for p in pred)),
        slices=len(pred),
        volumes=volumes,
    )
