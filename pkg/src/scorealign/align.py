"""Per-class score statistics and the alignment transforms.

A class's normal-score distribution is summarized by its pixel mean, the
mean of per-image maxima (robust stand-in for the population max), and
the population std. Alignment maps each class's scores through the
affine transform s -> (s - u) / (gamma - u), sending class normals to
mean 0 / reference-max 1 while preserving within-class rank order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class DegenerateScaleWarning(UserWarning):
    """gamma - u fell below eps; the denominator was clamped."""


@dataclass
class ScoreMap:
    """Per-location anomaly scores for one image."""

    image_id: str
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"{self.image_id}: non-finite score")


@dataclass
class ClassStats:
    """Normal-score statistics of one class, fitted on training maps only."""

    class_id: int
    u: float       # mean of all pixel scores
    gamma: float   # mean over images of the per-image max pixel score
    sigma: float   # population std of all pixel scores
    n_images: int
    n_pixels: int

    CSV_HEADER = "class_id,u,gamma,sigma,n_images,n_pixels"

    def to_csv_row(self) -> str:
        return (f"{self.class_id},{self.u!r},{self.gamma!r},{self.sigma!r},"
                f"{self.n_images},{self.n_pixels}")


def fit_class_stats(maps_by_class: Mapping[int, Sequence[ScoreMap]]) -> list[ClassStats]:
    """Fit ClassStats per class from training score maps.

    Fixed-order (manifest-order) accumulation keeps the result deterministic.
    """
    out = []
    for class_id in sorted(maps_by_class):
        maps = list(maps_by_class[class_id])
        if not maps:
            raise ValueError(f"class {class_id}: empty score-map group")
        pixels = np.concatenate([m.values.ravel() for m in maps])
        maxima = np.array([float(np.max(m.values)) for m in maps])
        out.append(
            ClassStats(
                class_id=class_id,
                u=float(np.mean(pixels)),
                gamma=float(np.mean(maxima)),
                sigma=float(np.std(pixels)),
                n_images=len(maps),
                n_pixels=int(pixels.size),
            )
        )
    return out


def normalize_meanmax(smap: ScoreMap, u: float, gamma: float, eps: float = 1e-6) -> ScoreMap:
    """Mean-max normalization: each pixel becomes (s - u) / max(gamma - u, eps).

    A degenerate denominator (gamma - u < eps) is clamped to eps and
    flagged with DegenerateScaleWarning.
    """
    denom = gamma - u
    if denom < eps:
        warnings.warn(
            f"{smap.image_id}: gamma - u = {denom:.3e} < eps; clamping",
            DegenerateScaleWarning,
            stacklevel=2,
        )
        denom = eps
    return ScoreMap(smap.image_id, (smap.values - u) / denom)


def normalize_meanstd(smap: ScoreMap, u: float, sigma: float, eps: float = 1e-6) -> ScoreMap:
    """Mean/std variant: identical to meanmax with gamma = u + 3*sigma."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    return normalize_meanmax(smap, u, u + 3.0 * sigma, eps)


def apply_oracle_alignment(
    maps: Sequence[ScoreMap],
    class_ids: Mapping[str, int],
    stats: Sequence[ClassStats],
    variant: str = "meanmax",
    eps: float = 1e-6,
) -> list[ScoreMap]:
    """Calibrate each map with its own class's fitted statistics.

    The class-aware (label-given) alignment path; `class_ids` maps
    image_id to class id.
    """
    if variant not in ("meanmax", "meanstd"):
        raise ValueError(f"unknown variant {variant!r}")
    by_class = {s.class_id: s for s in stats}
    out = []
    for smap in maps:
        if smap.image_id not in class_ids:
            raise KeyError(f"{smap.image_id}: no class label")
        cid = class_ids[smap.image_id]
        if cid not in by_class:
            raise KeyError(f"{smap.image_id}: no fitted stats for class {cid}")
        st = by_class[cid]
        if variant == "meanmax":
            out.append(normalize_meanmax(smap, st.u, st.gamma, eps))
        else:
            out.append(normalize_meanstd(smap, st.u, st.sigma, eps))
    return out


def write_stats_csv(path, stats: Sequence[ClassStats]) -> None:
    with open(path, "w") as f:
        f.write(ClassStats.CSV_HEADER + "\n")
        for s in stats:
            f.write(s.to_csv_row() + "\n")


def read_stats_csv(path) -> list[ClassStats]:
    stats = []
    with open(path) as f:
        header = f.readline().strip()
        if header != ClassStats.CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in f:
            if not line.strip():
                continue
            cid, u, gamma, sigma, n_img, n_pix = line.strip().split(",")
            stats.append(ClassStats(int(cid), float(u), float(gamma), float(sigma),
                                    int(n_img), int(n_pix)))
    return stats
