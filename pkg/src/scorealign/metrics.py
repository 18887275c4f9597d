"""Exact image- and pixel-level detection metrics.

AUROC uses the tie-aware rank formulation (half credit for ties), AP the
step-wise precision-recall sum with ties grouped at one threshold. Both
depend only on the ordering of the scores, so any strictly increasing
transform of all scores leaves them bitwise unchanged. All accumulation
is done in float64 regardless of the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import ceil
from typing import Mapping, Optional, Sequence

import numpy as np

from .tensorio import DatasetManifest


class UndefinedMetricError(ValueError):
    """The metric is undefined for this input (e.g. a single-class sample set)."""


def _as_score_label_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite score")
    return s, y


def _average_ranks(s: np.ndarray) -> np.ndarray:
    """1-based ranks with ties assigned their group's average rank."""
    order = np.argsort(s, kind="stable")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability a positive outscores a negative, ties counting half.

    Raises UndefinedMetricError unless both classes are present.
    """
    s, y = _as_score_label_arrays(scores, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"auroc needs both classes, got {n_pos} positives / {n_neg} negatives"
        )
    ranks = _average_ranks(s)
    rank_sum = float(np.sum(ranks[y == 1]))
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def average_precision(scores, labels) -> float:
    """Step-wise AP: sum of (R_k - R_{k-1}) * P_k over descending unique thresholds."""
    s, y = _as_score_label_arrays(scores, labels)
    n_pos = int(np.sum(y == 1))
    if n_pos == 0:
        raise UndefinedMetricError("average_precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    ap = 0.0
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = len(s_sorted)
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(np.sum(y_sorted[i : j + 1]))
        seen += j + 1 - i
        recall = tp / n_pos
        precision = tp / seen
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return ap


def image_score(values: np.ndarray, top_fraction=0.01) -> float:
    """Mean of the ceil(top_fraction * count) largest pixel scores.

    `top_fraction="max"` returns the single maximum pixel score.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty score map")
    if top_fraction == "max":
        return float(np.max(v))
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError(f"top_fraction must be in (0, 1], got {top_fraction}")
    m = ceil(top_fraction * v.size)
    top = np.partition(v, v.size - m)[v.size - m :]
    return float(np.mean(np.sort(top)))


@dataclass
class MetricsReport:
    """One row of detection results for a pool of test images."""

    scope: str  # "mixed", "class:<id>", or "macro"
    i_auroc: float
    i_ap: float
    p_auroc: Optional[float]
    p_ap: Optional[float]
    n_images: int
    n_pixels: int

    CSV_HEADER = "scope,i_auroc,i_ap,p_auroc,p_ap,n_images,n_pixels"

    def to_csv_row(self) -> str:
        def fmt(x):
            return "" if x is None else repr(float(x))

        return ",".join(
            [self.scope, fmt(self.i_auroc), fmt(self.i_ap), fmt(self.p_auroc),
             fmt(self.p_ap), str(self.n_images), str(self.n_pixels)]
        )


def _pool_metrics(scope, entries, score_maps, masks, top_fraction) -> MetricsReport:
    img_scores = []
    img_labels = []
    pix_scores = []
    pix_labels = []
    n_pixels = 0
    for e in entries:
        values = score_maps[e.image_id]
        img_scores.append(image_score(values, top_fraction))
        img_labels.append(1 if e.label == "anomalous" else 0)
        flat = np.asarray(values, dtype=np.float64).ravel()
        if e.label == "anomalous":
            if e.image_id in masks:
                mask = np.asarray(masks[e.image_id])
                if mask.shape != np.asarray(values).shape:
                    raise ValueError(
                        f"{e.image_id}: mask shape {mask.shape} != map shape "
                        f"{np.asarray(values).shape}"
                    )
                pix_scores.append(flat)
                pix_labels.append((mask.ravel() > 0).astype(np.int64))
                n_pixels += flat.size
            # anomalous without pixel ground truth: image metrics only
        else:
            # normal test image: implicit all-zero mask
            pix_scores.append(flat)
            pix_labels.append(np.zeros(flat.size, dtype=np.int64))
            n_pixels += flat.size

    i_auroc = auroc(img_scores, img_labels)
    i_ap = average_precision(img_scores, img_labels)
    p_auroc = p_ap = None
    if pix_scores:
        ps = np.concatenate(pix_scores)
        pl = np.concatenate(pix_labels)
        if pl.max(initial=0) == 1 and pl.min(initial=1) == 0:
            p_auroc = auroc(ps, pl)
            p_ap = average_precision(ps, pl)
    return MetricsReport(scope, i_auroc, i_ap, p_auroc, p_ap, len(entries), n_pixels)


def evaluate(
    manifest: DatasetManifest,
    score_maps: Mapping[str, np.ndarray],
    masks: Optional[Mapping[str, np.ndarray]] = None,
    top_fraction=0.01,
) -> list[MetricsReport]:
    """Score the test split: one mixed report, plus per-class reports and
    their macro average when the manifest carries class ids.

    Image metrics come from the top-fraction aggregate of each score map;
    pixel metrics pool all pixels of all test images (normal images count
    as all-negative).
    """
    masks = masks or {}
    entries = manifest.split("test")
    if not entries:
        raise UndefinedMetricError("manifest has no test images")
    missing = [e.image_id for e in entries if e.image_id not in score_maps]
    if missing:
        raise ValueError(f"missing score maps for {missing[:5]} (+{max(0, len(missing)-5)} more)")

    reports = [_pool_metrics("mixed", entries, score_maps, masks, top_fraction)]
    class_ids = sorted({e.class_id for e in entries if e.class_id is not None})
    if class_ids:
        per_class = []
        for cid in class_ids:
            cls_entries = [e for e in entries if e.class_id == cid]
            per_class.append(
                _pool_metrics(f"class:{cid}", cls_entries, score_maps, masks, top_fraction)
            )
        reports.extend(per_class)
        reports.append(macro_average(per_class))
    return reports


def macro_average(per_class: Sequence[MetricsReport]) -> MetricsReport:
    """Unweighted mean of per-class reports (the model-unified protocol)."""

    def mean_of(attr):
        vals = [getattr(r, attr) for r in per_class]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    return MetricsReport(
        scope="macro",
        i_auroc=mean_of("i_auroc"),
        i_ap=mean_of("i_ap"),
        p_auroc=mean_of("p_auroc"),
        p_ap=mean_of("p_ap"),
        n_images=sum(r.n_images for r in per_class),
        n_pixels=sum(r.n_pixels for r in per_class),
    )


def write_reports_csv(path, reports: Sequence[MetricsReport]) -> None:
    with open(path, "w") as f:
        f.write(MetricsReport.CSV_HEADER + "\n")
        for r in reports:
            f.write(r.to_csv_row() + "\n")
