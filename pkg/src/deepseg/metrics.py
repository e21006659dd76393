"""Overlap and distance metrics for binary segmentation masks.

Dice with a smoothing term, sensitivity/specificity from pixel counts, and
the symmetric Hausdorff distance computed through an exact Euclidean
distance transform (integer squared distances, one square root at the end).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    epsilon: float = 1.0
    # 100 is the plain max-based Hausdorff distance; 95 gives HD95
    hd_percentile: float = 100.0
    spacing: float = 1.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise MetricError(f"epsilon must be positive, got {self.epsilon}")
        if not 0 < self.hd_percentile <= 100:
            raise MetricError(f"hd_percentile must lie in (0, 100], got {self.hd_percentile}")
        if self.spacing <= 0:
            raise MetricError(f"spacing must be positive, got {self.spacing}")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype == bool:
        return arr
    if not np.isin(arr, (0, 1)).all():
        bad = np.unique(arr[~np.isin(arr, (0, 1))])[:5]
        raise MetricError(f"{name} must be binary (0/1); found values {bad.tolist()}")
    return arr.astype(bool)


def _same_shape(pred, truth):
    if np.shape(pred) != np.shape(truth):
        raise MetricError(f"mask shapes differ: pred {np.shape(pred)} vs truth {np.shape(truth)}")


def dice(pred, truth, config: MetricConfig = MetricConfig()) -> float:
    """(2*sum(y*p) + eps) / (sum(y) + sum(p) + eps); works on soft predictions too."""
    _same_shape(pred, truth)
    p = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(truth, dtype=np.float64).ravel()
    return float((2.0 * (y * p).sum() + config.epsilon) / (y.sum() + p.sum() + config.epsilon))


def confusion(pred, truth) -> ConfusionCounts:
    _same_shape(pred, truth)
    p = _binary(pred, "pred")
    t = _binary(truth, "truth")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = p.size - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


def sensitivity(counts: ConfusionCounts) -> float:
    """TP / (TP + FN); 1.0 when there is no foreground to find."""
    denom = counts.tp + counts.fn
    return 1.0 if denom == 0 else counts.tp / denom


def specificity(counts: ConfusionCounts) -> float:
    """TN / (TN + FP); 1.0 when there is no background."""
    denom = counts.tn + counts.fp
    return 1.0 if denom == 0 else counts.tn / denom


# ---------------------------------------------------------------------------
# Distance transform and Hausdorff distance
# ---------------------------------------------------------------------------


def squared_edt(features) -> np.ndarray:
    """Exact squared Euclidean distance from every pixel to the nearest True pixel.

    SciPy's exact transform supplies the nearest feature pixel for each
    position; the squared distance is then formed in integers, so no
    floating-point rounding enters before the final square root. Pixels in a
    mask with no True pixel get -1.
    """
    f = np.asarray(features, dtype=bool)
    if f.ndim != 2:
        raise MetricError(f"squared_edt expects a 2-D mask, got shape {f.shape}")
    if not f.any():
        return np.full(f.shape, -1, dtype=np.int64)
    ri, ci = distance_transform_edt(~f, return_distances=False, return_indices=True)
    rr, cc = np.indices(f.shape)
    return (ri.astype(np.int64) - rr) ** 2 + (ci.astype(np.int64) - cc) ** 2


def mask_to_points(mask) -> np.ndarray:
    """Foreground coordinates as an (k, 2) integer array of (row, col)."""
    return np.argwhere(_binary(mask, "mask"))


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    if len(np.unique(pts, axis=0)) != len(pts):
        raise MetricError("point set contains duplicate coordinates")
    return pts


def directed_squared_distances(source, target) -> np.ndarray:
    """Squared distance from each source point to its nearest target point."""
    src, tgt = _as_points(source), _as_points(target)
    if len(src) == 0 or len(tgt) == 0:
        raise MetricError("Hausdorff distance is undefined for an empty point set")
    lo = np.minimum(src.min(axis=0), tgt.min(axis=0))
    hi = np.maximum(src.max(axis=0), tgt.max(axis=0))
    grid = np.zeros(tuple(hi - lo + 1), dtype=bool)
    grid[tuple((tgt - lo).T)] = True
    d2 = squared_edt(grid)
    return d2[tuple((src - lo).T)]


def hausdorff(pred_points, truth_points, config: MetricConfig = MetricConfig()) -> float:
    """Symmetric Hausdorff distance max(h(S, T), h(T, S)) between point sets.

    Raises MetricError when either set is empty.
    """
    a = directed_squared_distances(pred_points, truth_points)
    b = directed_squared_distances(truth_points, pred_points)
    if config.hd_percentile >= 100:
        worst = max(int(a.max()), int(b.max()))
        return math.sqrt(worst) * config.spacing
    pa = np.percentile(np.sqrt(a), config.hd_percentile)
    pb = np.percentile(np.sqrt(b), config.hd_percentile)
    return float(max(pa, pb)) * config.spacing


def hausdorff_masks(pred, truth, config: MetricConfig = MetricConfig()) -> float | None:
    """Hausdorff distance between mask foregrounds; None when either is empty."""
    _same_shape(pred, truth)
    ps, ts = mask_to_points(pred), mask_to_points(truth)
    if len(ps) == 0 or len(ts) == 0:
        return None
    return hausdorff(ps, ts, config)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    sensitivity: float
    specificity: float
    hd: float | None
    empty_truth: bool = False


@dataclass
class MetricReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    missing: list[str] = field(default_factory=list)

    def _mean(self, attr: str) -> float | None:
        vals = [getattr(c, attr) for c in self.cases if getattr(c, attr) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_dsc(self):
        return self._mean("dsc")

    @property
    def mean_sensitivity(self):
        return self._mean("sensitivity")

    @property
    def mean_specificity(self):
        return self._mean("specificity")

    @property
    def mean_hd(self):
        return self._mean("hd")

    @property
    def flagged(self) -> list[str]:
        """Cases whose sensitivity came from the empty-truth convention."""
        return [c.case_id for c in self.cases if c.empty_truth]

    def rows(self):
        for c in self.cases:
            yield [c.case_id, c.dsc, c.sensitivity, c.specificity, c.hd]
        for cid in self.missing:
            yield [cid, None, None, None, None]
        yield ["MEAN", self.mean_dsc, self.mean_sensitivity, self.mean_specificity, self.mean_hd]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case_id", "dsc", "sensitivity", "specificity", "hd"])
            for row in self.rows():
                w.writerow([row[0]] + ["NA" if v is None else repr(float(v)) for v in row[1:]])


def evaluate_case(case_id: str, pred, truth, config: MetricConfig = MetricConfig()) -> CaseMetrics:
    counts = confusion(pred, truth)
    return CaseMetrics(
        case_id=case_id,
        dsc=dice(pred, truth, config),
        sensitivity=sensitivity(counts),
        specificity=specificity(counts),
        hd=hausdorff_masks(pred, truth, config),
        empty_truth=counts.tp + counts.fn == 0,
    )


def evaluate_cases(predictions, truths, config: MetricConfig = MetricConfig(), case_ids=None) -> MetricReport:
    """Per-case metrics plus means; cases with an undefined HD only drop out of the HD mean."""
    predictions, truths = list(predictions), list(truths)
    if len(predictions) != len(truths):
        raise MetricError(f"{len(predictions)} predictions for {len(truths)} ground-truth masks")
    if case_ids is None:
        case_ids = [f"case_{i:04d}" for i in range(len(predictions))]
    case_ids = list(case_ids)
    if len(case_ids) != len(predictions):
        raise MetricError(f"{len(case_ids)} case ids for {len(predictions)} cases")
    order = sorted(range(len(case_ids)), key=lambda i: case_ids[i])
    return MetricReport([evaluate_case(case_ids[i], predictions[i], truths[i], config) for i in order])
