"""Segmentation and localization metrics: IoU, Prec@k, PointIt, PointM and Acc_box.

Boxes are inclusive pixel coordinates ``(x_min, y_min, x_max, y_max)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

Box = tuple[int, int, int, int]


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def intersection_union(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int]:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    _same_shape(pred, gt)
    return int((pred & gt).sum()), int((pred | gt).sum())


def iou_flagged(pred: np.ndarray, gt: np.ndarray) -> tuple[float, bool]:
    """IoU and an "empty union" flag (IoU is 0.0 in that case)."""
    inter, union = intersection_union(pred, gt)
    if union == 0:
        return 0.0, True
    return inter / union, False


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    return iou_flagged(pred, gt)[0]


def precision_at(pred: np.ndarray, gt: np.ndarray, k: float = 0.5) -> int:
    return int(iou(pred, gt) >= k)


def to_image_resolution(values: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinearly up-sample a response map to ``shape``; same-size input passes through."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape == tuple(shape):
        return values
    t = torch.from_numpy(values)[None, None]
    return F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)[0, 0].numpy()


def max_location(values: np.ndarray) -> tuple[int, int]:
    """(row, col) of the global maximum; lowest row-major index wins ties."""
    values = np.asarray(values)
    flat = int(np.argmax(values))
    return divmod(flat, values.shape[1])


def point_m(response_or_mask: np.ndarray, gt_mask: np.ndarray) -> bool:
    """Hit iff the response maximum lands on a ground-truth mask pixel."""
    gt_mask = np.asarray(gt_mask, bool)
    values = to_image_resolution(response_or_mask, gt_mask.shape)
    row, col = max_location(values)
    return bool(gt_mask[row, col])


def point_it(response_or_mask: np.ndarray, gt_box: Box, image_shape: tuple[int, int] | None = None) -> bool:
    """Hit iff the response maximum lies inside the ground-truth box (inclusive)."""
    values = np.asarray(response_or_mask)
    if image_shape is not None:
        values = to_image_resolution(values, image_shape)
    row, col = max_location(values)
    x0, y0, x1, y1 = gt_box
    return bool(x0 <= col <= x1 and y0 <= row <= y1)


def mask_box(mask: np.ndarray) -> Box | None:
    ys, xs = np.nonzero(np.asarray(mask, bool))
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def box_iou(a: Box, b: Box) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    inter = max(ix, 0) * max(iy, 0)
    area_a = (a[2] - a[0] + 1) * (a[3] - a[1] + 1)
    area_b = (b[2] - b[0] + 1) * (b[3] - b[1] + 1)
    return inter / (area_a + area_b - inter)


def acc_box(pred_mask: np.ndarray, gt_box: Box, k: float = 0.5) -> bool:
    """Hit iff the tight box of the prediction has box-IoU >= k with the GT box."""
    box = mask_box(pred_mask)
    return box is not None and box_iou(box, gt_box) >= k


@dataclass
class SampleResult:
    sample_id: str
    iou: float
    intersection: int
    union: int
    prec_at_05: int
    point_it: bool
    point_m: bool
    acc_box: bool
    empty_union: bool


@dataclass
class MetricsReport:
    mean_iou: float
    overall_iou: float
    prec_at_05: float
    point_it: float
    point_m: float
    acc_box: float
    count: int
    samples: list[SampleResult] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("samples")
        return d

    def table(self) -> str:
        rows = [
            ("samples", f"{self.count}"),
            ("mIoU", f"{100 * self.mean_iou:.2f}"),
            ("oIoU", f"{100 * self.overall_iou:.2f}"),
            ("P@0.5", f"{100 * self.prec_at_05:.2f}"),
            ("PointIt", f"{100 * self.point_it:.2f}"),
            ("PointM", f"{100 * self.point_m:.2f}"),
            ("Acc_box", f"{100 * self.acc_box:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:>7}" for k, v in rows)

    def write_jsonl(self, path: str | Path) -> None:
        with Path(path).open("w") as fh:
            fh.write(json.dumps({"summary": self.summary()}, sort_keys=True) + "\n")
            for s in self.samples:
                fh.write(json.dumps(asdict(s), sort_keys=True) + "\n")


def evaluate_sample(
    sample_id: str,
    pred_mask: np.ndarray,
    gt_mask: np.ndarray,
    gt_box: Box,
    response_map: np.ndarray | None = None,
) -> SampleResult:
    """Score one prediction. Pointing metrics use ``response_map`` when given, else the mask."""
    gt_mask = np.asarray(gt_mask, bool)
    if not gt_mask.any():
        raise ValueError(f"{sample_id}: ground-truth mask is empty")
    pred_mask = np.asarray(pred_mask, bool)
    inter, union = intersection_union(pred_mask, gt_mask)
    value = inter / union if union else 0.0
    pointer = response_map if response_map is not None else pred_mask.astype(np.float64)
    return SampleResult(
        sample_id=sample_id,
        iou=value,
        intersection=inter,
        union=union,
        prec_at_05=int(value >= 0.5),
        point_it=point_it(pointer, gt_box, gt_mask.shape),
        point_m=point_m(pointer, gt_mask),
        acc_box=acc_box(pred_mask, gt_box),
        empty_union=union == 0,
    )


def aggregate_results(samples: Sequence[SampleResult]) -> MetricsReport:
    n = len(samples)
    if n == 0:
        raise ValueError("no samples to aggregate")
    total_union = sum(s.union for s in samples)
    return MetricsReport(
        mean_iou=float(np.mean([s.iou for s in samples])),
        overall_iou=sum(s.intersection for s in samples) / total_union if total_union else 0.0,
        prec_at_05=float(np.mean([s.prec_at_05 for s in samples])),
        point_it=hit_rate([s.point_it for s in samples]),
        point_m=hit_rate([s.point_m for s in samples]),
        acc_box=hit_rate([s.acc_box for s in samples]),
        count=n,
        samples=list(samples),
    )


def hit_rate(hits: Sequence[bool]) -> float:
    """#Hits / (#Hits + #Misses)."""
    n_hit = sum(bool(h) for h in hits)
    return n_hit / len(hits) if hits else 0.0
