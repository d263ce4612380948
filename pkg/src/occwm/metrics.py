"""Geometric IoU and semantic mIoU over predicted occupancy sequences.

Counts can be taken over the full grid or restricted to the region of voxels
that was (in)visible in the history, which is how forecast skill inside and
outside the observed area is separated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, OccupancyGrid, VisibilityVolume

__all__ = ["MetricReport", "MetricAccumulator", "compute_metrics"]

REGIONS = ("visible", "invisible", "all")


@dataclass
class MetricReport:
    """Per-horizon and averaged (IoU, mIoU), values in [0, 1].

    Undefined entries (empty region, or no gt-present class for mIoU) are NaN
    and are excluded from the averages. ``class_intersection``/``class_union``
    hold the raw per-horizon per-class voxel counts; ``geo_*`` the counts with
    all occupied classes merged. Values are scaled by 100 only when printing.
    """

    region: str
    per_horizon: list[tuple[float, float]]
    average: tuple[float, float]
    per_class_iou: np.ndarray
    class_intersection: np.ndarray = field(repr=False)
    class_union: np.ndarray = field(repr=False)
    class_gt_count: np.ndarray = field(repr=False)
    geo_intersection: np.ndarray = field(repr=False)
    geo_union: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "region": self.region,
            "per_horizon": [{"iou": i, "miou": m} for i, m in self.per_horizon],
            "average": {"iou": self.average[0], "miou": self.average[1]},
            "per_class_iou": [float(v) for v in self.per_class_iou],
        }


def _nanmean(values: np.ndarray) -> float:
    defined = values[~np.isnan(values)]
    return float(defined.mean()) if defined.size else float("nan")


class MetricAccumulator:
    """Accumulates per-horizon voxel counts across samples, then reports.

    IoU/mIoU are computed from the summed counts (dataset-level IoU), so the
    report from a single sequence pair equals ``compute_metrics`` on it.
    """

    def __init__(self, num_classes: int, free_class: int, horizons: int, region: str):
        if region not in REGIONS:
            raise ValueError(f"region must be one of {REGIONS}, got {region!r}")
        self.num_classes = num_classes
        self.free_class = free_class
        self.region = region
        k = num_classes
        self.class_intersection = np.zeros((horizons, k), dtype=np.int64)
        self.class_union = np.zeros((horizons, k), dtype=np.int64)
        self.class_gt = np.zeros((horizons, k), dtype=np.int64)
        self.geo_intersection = np.zeros(horizons, dtype=np.int64)
        self.geo_union = np.zeros(horizons, dtype=np.int64)
        self.selected = np.zeros(horizons, dtype=np.int64)

    def add(self,
            pred: list[OccupancyGrid],
            gt: list[OccupancyGrid],
            region_mask: list[VisibilityVolume] | None = None) -> None:
        if len(pred) != len(gt) or len(pred) != self.class_intersection.shape[0]:
            raise ValueError("pred/gt length must equal the configured horizon count")
        if self.region != "all" and region_mask is None:
            raise ValueError(f"region {self.region!r} requires a region mask per frame")
        for h, (p, g) in enumerate(zip(pred, gt)):
            if p.spec != g.spec:
                raise ValueError("pred and gt specs differ")
            if self.region == "all":
                sel = np.ones(p.spec.dims, dtype=bool)
            else:
                observed = region_mask[h].observed
                sel = observed if self.region == "visible" else ~observed
            self._tally(h, p.labels[sel], g.labels[sel])

    def _tally(self, h: int, p: np.ndarray, g: np.ndarray) -> None:
        k = self.num_classes
        self.selected[h] += p.size
        if p.size == 0:
            return
        joint = np.bincount(g.astype(np.int64) * k + p.astype(np.int64),
                            minlength=k * k).reshape(k, k)
        inter = np.diag(joint)
        gt_count = joint.sum(axis=1)
        pred_count = joint.sum(axis=0)
        self.class_intersection[h] += inter
        self.class_union[h] += gt_count + pred_count - inter
        self.class_gt[h] += gt_count
        occ_p = p != self.free_class
        occ_g = g != self.free_class
        self.geo_intersection[h] += int(np.count_nonzero(occ_p & occ_g))
        self.geo_union[h] += int(np.count_nonzero(occ_p | occ_g))

    def report(self) -> MetricReport:
        horizons = self.class_intersection.shape[0]
        per_horizon: list[tuple[float, float]] = []
        semantic = [c for c in range(self.num_classes) if c != self.free_class]
        for h in range(horizons):
            if self.selected[h] == 0:
                per_horizon.append((float("nan"), float("nan")))
                continue
            geo = (self.geo_intersection[h] / self.geo_union[h]
                   if self.geo_union[h] > 0 else float("nan"))
            present = [c for c in semantic if self.class_gt[h, c] > 0]
            if present:
                ious = [self.class_intersection[h, c] / self.class_union[h, c]
                        for c in present]
                miou = float(np.mean(ious))
            else:
                miou = float("nan")
            per_horizon.append((float(geo), miou))
        arr = np.asarray(per_horizon, dtype=np.float64)
        average = (_nanmean(arr[:, 0]), _nanmean(arr[:, 1]))
        total_inter = self.class_intersection.sum(axis=0)
        total_union = self.class_union.sum(axis=0)
        with np.errstate(invalid="ignore"):
            per_class = np.where(total_union > 0,
                                 total_inter / np.maximum(total_union, 1),
                                 np.nan)
        return MetricReport(
            region=self.region,
            per_horizon=per_horizon,
            average=average,
            per_class_iou=per_class,
            class_intersection=self.class_intersection.copy(),
            class_union=self.class_union.copy(),
            class_gt_count=self.class_gt.copy(),
            geo_intersection=self.geo_intersection.copy(),
            geo_union=self.geo_union.copy(),
        )


def compute_metrics(pred: list[OccupancyGrid],
                    gt: list[OccupancyGrid],
                    region_mask: list[VisibilityVolume] | None = None,
                    region: str = "all") -> MetricReport:
    """IoU / mIoU per future step and averaged, over one prediction sequence.

    Per semantic class c: IoU_c = |pred=c and gt=c| / |pred=c or gt=c| over the
    selected voxels; mIoU averages classes present in gt within the region.
    Geometric IoU merges all non-free labels into one occupied class.
    """
    if not pred or len(pred) != len(gt):
        raise ValueError("pred and gt must be non-empty sequences of equal length")
    spec: GridSpec = pred[0].spec
    acc = MetricAccumulator(spec.num_classes, spec.free_class, len(pred), region)
    acc.add(pred, gt, region_mask)
    return acc.report()
