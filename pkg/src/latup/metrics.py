"""Segmentation evaluation: region mapping, Dice coefficient, 95th-percentile
Hausdorff distance (with a brute-force oracle), confusion matrices, and
per-sample metric aggregation with boxplot-style statistics.

Label volumes use the values {0,1,2,4}; the three evaluated regions are
whole tumor (labels 1,2,4), tumor core (1,4) and enhancing tumor (4).
Distances are in voxel units, which equal millimetres on the usual
1 mm^3 resampled grids.

Empty-mask conventions: Dice is 1.0 when both masks are empty and 0.0 when
exactly one is; HD95 is skipped (None) when either mask is empty, and skip
counts are carried through aggregation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ShapeError

VALID_LABELS = (0, 1, 2, 4)
REGIONS = ("wt", "tc", "et")

# Map label value -> channel index; index 3 corresponds to label 4.
_LABEL_TO_INDEX = np.full(5, -1, dtype=np.int64)
_LABEL_TO_INDEX[[0, 1, 2, 4]] = [0, 1, 2, 3]
_INDEX_TO_LABEL = np.array([0, 1, 2, 4], dtype=np.uint8)

CLASS_DISPLAY = ("BG", "NCR/NET", "ED", "ET")


def _check_labels(labels: np.ndarray, who: str) -> None:
    bad = np.setdiff1d(np.unique(labels), VALID_LABELS)
    if bad.size:
        raise ValueError(f"{who}: unknown label values {bad.tolist()}")


@dataclass(frozen=True)
class RegionMasks:
    """Binary whole-tumor / tumor-core / enhancing masks (nested by construction)."""

    wt: np.ndarray
    tc: np.ndarray
    et: np.ndarray

    def __getitem__(self, region: str) -> np.ndarray:
        return getattr(self, region)


def region_masks(labels: np.ndarray) -> RegionMasks:
    """Derive the three evaluated region masks from a label volume."""
    labels = np.asarray(labels)
    _check_labels(labels, "region_masks")
    return RegionMasks(
        wt=np.isin(labels, (1, 2, 4)),
        tc=np.isin(labels, (1, 4)),
        et=labels == 4,
    )


def prediction_to_labels(prob: np.ndarray) -> np.ndarray:
    """Per-voxel argmax over the channel axis, emitting label values.

    Ties resolve to the lowest channel index; channel 3 maps to label 4.
    Accepts (D,H,W,4) or (1,D,H,W,4).
    """
    prob = np.asarray(prob)
    if prob.ndim == 5:
        prob = prob[0]
    if prob.ndim != 4 or prob.shape[-1] != 4:
        raise ShapeError(f"prediction_to_labels: expected (...,4), got {prob.shape}")
    return _INDEX_TO_LABEL[prob.argmax(axis=-1)]


def dice_coefficient(pred: np.ndarray, truth: np.ndarray) -> float:
    """Overlap 2|P n T| / (|P| + |T|); 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"dice_coefficient: shapes {pred.shape} vs {truth.shape}")
    p = int(pred.sum())
    t = int(truth.sum())
    if p + t == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / (p + t)


def hd95(pred: np.ndarray, truth: np.ndarray) -> float | None:
    """Symmetric 95th-percentile Hausdorff distance, or None when either
    mask is empty.

    Directed distances come from the exact Euclidean distance transform of
    the opposite mask sampled at this mask's voxels; the percentile is
    nearest-rank (1-based index ceil(0.95 n) of the sorted distances).
    """
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"hd95: shapes {pred.shape} vs {truth.shape}")
    if not pred.any() or not truth.any():
        return None

    def directed(src, dst):
        dist_to_dst = ndimage.distance_transform_edt(~dst)
        values = np.sort(dist_to_dst[src], kind="stable")
        rank = math.ceil(0.95 * values.size)
        return float(values[rank - 1])

    return max(directed(pred, truth), directed(truth, pred))


def hd95_bruteforce(pred: np.ndarray, truth: np.ndarray) -> float | None:
    """Oracle for :func:`hd95`: exhaustive integer squared distances between
    all voxel pairs, min then sqrt, same nearest-rank percentile.  Meant for
    masks up to ~16^3."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"hd95_bruteforce: shapes {pred.shape} vs {truth.shape}")
    if not pred.any() or not truth.any():
        return None
    pc = np.argwhere(pred).astype(np.int64)
    tc = np.argwhere(truth).astype(np.int64)

    def directed(a, b):
        diffs = a[:, None, :] - b[None, :, :]
        d2min = (diffs * diffs).sum(axis=2).min(axis=1)
        values = np.sort(np.sqrt(d2min.astype(np.float64)), kind="stable")
        rank = math.ceil(0.95 * values.size)
        return float(values[rank - 1])

    return max(directed(pc, tc), directed(tc, pc))


# ---------------------------------------------------------------------------
# Confusion matrices


@dataclass(frozen=True)
class ConfusionResult:
    """Row-normalized per-class confusion averaged across samples.

    ``mean`` and ``std`` are 4x4 (rows = true class, columns = predicted);
    ``row_counts[i]`` says how many samples had class i present (rows with
    no true voxels are undefined and excluded from that row's statistics);
    ``excluded`` counts samples dropped by the ET-absent rule.
    """

    mean: np.ndarray
    std: np.ndarray
    row_counts: np.ndarray
    excluded: int


def confusion_matrix(true_labels: list[np.ndarray], pred_labels: list[np.ndarray],
                     exclude_et_absent: bool = False) -> ConfusionResult:
    """Average the per-sample row-normalized confusion matrices."""
    if len(true_labels) != len(pred_labels):
        raise ShapeError("confusion_matrix: need one prediction per truth volume")
    per_sample: list[np.ndarray] = []
    defined: list[np.ndarray] = []
    excluded = 0
    for t, p in zip(true_labels, pred_labels):
        t = np.asarray(t)
        p = np.asarray(p)
        if t.shape != p.shape:
            raise ShapeError(f"confusion_matrix: shapes {t.shape} vs {p.shape}")
        _check_labels(t, "confusion_matrix(true)")
        _check_labels(p, "confusion_matrix(pred)")
        if exclude_et_absent and not (t == 4).any():
            excluded += 1
            continue
        ti = _LABEL_TO_INDEX[t.reshape(-1)]
        pi = _LABEL_TO_INDEX[p.reshape(-1)]
        counts = np.bincount(ti * 4 + pi, minlength=16).reshape(4, 4).astype(np.float64)
        row_sums = counts.sum(axis=1)
        has_row = row_sums > 0
        norm = np.zeros((4, 4))
        norm[has_row] = counts[has_row] / row_sums[has_row, None]
        per_sample.append(norm)
        defined.append(has_row)

    mean = np.zeros((4, 4))
    std = np.zeros((4, 4))
    row_counts = np.zeros(4, dtype=np.int64)
    if per_sample:
        mats = np.stack(per_sample)
        rows_ok = np.stack(defined)
        for i in range(4):
            sel = rows_ok[:, i]
            row_counts[i] = int(sel.sum())
            if row_counts[i]:
                mean[i] = mats[sel, i].mean(axis=0)
                std[i] = mats[sel, i].std(axis=0)
    return ConfusionResult(mean=mean, std=std, row_counts=row_counts, excluded=excluded)


# ---------------------------------------------------------------------------
# Aggregation


@dataclass(frozen=True)
class MetricsRecord:
    """One sample's scores for one region."""

    sample_id: str
    fold: int
    region: str
    dsc: float
    hd95: float | None


@dataclass(frozen=True)
class SummaryStats:
    """Boxplot-style summary: mean/std plus quartiles and 1.5*IQR outliers."""

    n: int
    mean: float
    std: float
    median: float
    q1: float
    q3: float
    outliers: tuple[float, ...]
    skipped: int = 0

    def as_dict(self) -> dict:
        return {
            "n": self.n, "mean": self.mean, "std": self.std,
            "median": self.median, "q1": self.q1, "q3": self.q3,
            "outliers": list(self.outliers), "skipped": self.skipped,
        }


def _summarize(values: list[float], skipped: int = 0) -> SummaryStats:
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = (np.percentile(arr, q) for q in (25, 50, 75))
    fence = 1.5 * (q3 - q1)
    outliers = tuple(float(v) for v in arr[(arr < q1 - fence) | (arr > q3 + fence)])
    return SummaryStats(
        n=arr.size, mean=float(arr.mean()), std=float(arr.std()),
        median=float(med), q1=float(q1), q3=float(q3),
        outliers=outliers, skipped=skipped)


def aggregate(records: list[MetricsRecord], group: str = "overall") -> dict:
    """Mean/std/median/quartile statistics per region and metric.

    ``group`` is ``overall`` (single group) or ``fold`` (one group per fold
    id).  Standard deviations are population (ddof 0).  Skipped HD95 entries
    are excluded from the HD95 statistics and reported in ``skipped``.
    """
    if not records:
        raise ValueError("aggregate: no records")
    if group not in ("overall", "fold"):
        raise ValueError(f"aggregate: unknown grouping {group!r}")
    groups: dict[object, list[MetricsRecord]] = {}
    for rec in records:
        key = rec.fold if group == "fold" else "overall"
        groups.setdefault(key, []).append(rec)

    out: dict = {}
    for key, recs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        out[key] = {}
        for region in REGIONS:
            rr = [r for r in recs if r.region == region]
            if not rr:
                continue
            dsc_stats = _summarize([r.dsc for r in rr])
            hd_values = [r.hd95 for r in rr if r.hd95 is not None]
            skipped = len(rr) - len(hd_values)
            hd_stats = (_summarize(hd_values, skipped=skipped) if hd_values
                        else SummaryStats(0, math.nan, math.nan, math.nan,
                                          math.nan, math.nan, (), skipped))
            out[key][region] = {"dsc": dsc_stats, "hd95": hd_stats}
    return out


# ---------------------------------------------------------------------------
# Exports

METRICS_COLUMNS = ("sample_id", "fold", "region", "dsc", "hd95", "hd95_skipped")


def _record_row(rec: MetricsRecord) -> dict:
    return {
        "sample_id": rec.sample_id,
        "fold": rec.fold,
        "region": rec.region,
        "dsc": rec.dsc,
        "hd95": "" if rec.hd95 is None else rec.hd95,
        "hd95_skipped": rec.hd95 is None,
    }


def write_metrics_csv(records: list[MetricsRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(_record_row(rec))


def write_metrics_jsonl(records: list[MetricsRecord], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            row = _record_row(rec)
            row["hd95"] = rec.hd95  # null rather than empty string
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_metrics_csv(path) -> list[MetricsRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(MetricsRecord(
                sample_id=row["sample_id"],
                fold=int(row["fold"]),
                region=row["region"],
                dsc=float(row["dsc"]),
                hd95=None if row["hd95"] == "" else float(row["hd95"]),
            ))
    return records


def evaluate_sample(true_labels: np.ndarray, pred_labels: np.ndarray,
                    sample_id: str, fold: int = 0) -> list[MetricsRecord]:
    """DSC and HD95 for each region of one sample."""
    tm = region_masks(true_labels)
    pm = region_masks(pred_labels)
    records = []
    for region in REGIONS:
        records.append(MetricsRecord(
            sample_id=sample_id, fold=fold, region=region,
            dsc=dice_coefficient(pm[region], tm[region]),
            hd95=hd95(pm[region], tm[region]),
        ))
    return records
