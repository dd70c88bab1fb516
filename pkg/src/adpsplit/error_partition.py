"""Error region partitioning: normalized L1 maps, thresholding, erosion,
band stratification, and connected-component grouping with statistics.

All coordinates are (x, y) pixel indices with x along image columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
SIGMA2_FLOOR = 0.5  # px, keeps collinear regions from producing zero scales


@dataclass
class ErrorMaps:
    """Per-view error maps: normalized error e, binary metric m, band index b."""

    e: np.ndarray  # H x W in [0,1]
    m: np.ndarray  # H x W bool, post-erosion
    b: np.ndarray  # H x W int, valid where the pre-erosion threshold held


@dataclass
class ErrorRegion:
    """One connected high-error pixel group attributed to a split candidate."""

    candidate: int
    view: int
    pixels: np.ndarray  # A x 2 of (x, y)
    area: int
    band: int
    centroid: np.ndarray = None   # (x, y), sub-pixel
    e1: np.ndarray = None         # dominant PCA direction, unit 2-vector
    e2: np.ndarray = None         # (-e1y, e1x)
    sigma1: float = 0.0
    sigma2: float = 0.0
    gt_rgb: np.ndarray = None


def error_map(rendered, gt) -> np.ndarray:
    """Min-max-normalized per-pixel L1 error (sum over channels)."""
    rendered = np.asarray(rendered, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if rendered.shape != gt.shape:
        raise ValueError(f"shape mismatch: {rendered.shape} vs {gt.shape}")
    raw = np.abs(rendered - gt).sum(axis=-1)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def metric_map(e, tau_l1: float) -> np.ndarray:
    """Binary map of pixels with normalized error strictly above tau_l1."""
    return np.asarray(e) > tau_l1


def erode(m, r_erode: int) -> np.ndarray:
    """Binary erosion with a square footprint of side ``r_erode``.

    Sides <= 1 are the identity. Even sides anchor the extra row/column
    toward the top-left of the center pixel; pixels outside the image
    count as zero.
    """
    m = np.asarray(m, dtype=bool)
    if r_erode <= 1:
        return m.copy()
    footprint = np.ones((r_erode, r_erode), dtype=bool)
    return ndimage.binary_erosion(m, structure=footprint, border_value=0)


def band_map(e, tau_l1: float, l_bands: int) -> np.ndarray:
    """Equal-width error bands over (tau_l1, 1], clamped to l_bands - 1.

    Only meaningful where e > tau_l1; other pixels get band 0.
    """
    e = np.asarray(e, dtype=np.float64)
    b = np.floor((e - tau_l1) / (1.0 - tau_l1) * l_bands).astype(np.int64)
    return np.clip(b, 0, l_bands - 1)


def compute_maps(rendered, gt, cfg) -> ErrorMaps:
    """Full per-view map pipeline: error, threshold, erode, band."""
    e = error_map(rendered, gt)
    m = erode(metric_map(e, cfg.tau_l1), cfg.r_erode)
    b = band_map(e, cfg.tau_l1, cfg.l_bands)
    return ErrorMaps(e=e, m=m, b=b)


def partition(maps: ErrorMaps, dominant_map, candidates, m_min: int,
              view: int = -1) -> list:
    """Split retained high-error pixels into per-candidate error regions.

    Regions are maximal 8-connected components of pixels sharing m = 1,
    the same dominant candidate, and the same band; components smaller
    than ``m_min`` are dropped. Output order is deterministic:
    (candidate, band, first pixel row-major).
    """
    dominant_map = np.asarray(dominant_map)
    if maps.m.shape != dominant_map.shape:
        raise ValueError(
            f"map shape {maps.m.shape} != dominant map shape {dominant_map.shape}"
        )
    candidates = set(int(c) for c in candidates)
    regions = []
    present = np.unique(dominant_map[maps.m])
    for cand in sorted(c for c in present if int(c) in candidates):
        cand_mask = maps.m & (dominant_map == cand)
        for band in np.unique(maps.b[cand_mask]):
            mask = cand_mask & (maps.b == band)
            labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
            for lab in range(1, n + 1):
                ys, xs = np.nonzero(labels == lab)
                if len(xs) < m_min:
                    continue
                regions.append(
                    ErrorRegion(
                        candidate=int(cand),
                        view=view,
                        pixels=np.stack([xs, ys], axis=1),
                        area=len(xs),
                        band=int(band),
                    )
                )
    width = maps.m.shape[1]
    regions.sort(
        key=lambda r: (r.candidate, r.band,
                       int((r.pixels[:, 1] * width + r.pixels[:, 0]).min()))
    )
    return regions


def region_stats(region: ErrorRegion, gt) -> ErrorRegion:
    """Fill centroid, PCA axes, sigmas, and centroid ground-truth color."""
    pts = region.pixels.astype(np.float64)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / len(pts)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    e1 = evecs[:, 1]
    sigma1 = float(np.sqrt(max(evals[1], 0.0)))
    sigma2 = float(np.sqrt(max(evals[0], 0.0)))
    sigma1 = max(sigma1, SIGMA2_FLOOR)
    sigma2 = max(sigma2, SIGMA2_FLOOR)
    gt = np.asarray(gt, dtype=np.float64)
    cx = int(np.clip(round(centroid[0]), 0, gt.shape[1] - 1))
    cy = int(np.clip(round(centroid[1]), 0, gt.shape[0] - 1))
    region.centroid = centroid
    region.e1 = e1
    region.e2 = np.array([-e1[1], e1[0]])
    region.sigma1 = sigma1
    region.sigma2 = sigma2
    region.gt_rgb = gt[cy, cx].copy()
    return region
