"""Gaussian query attention maps built from bounding-box labels.

A query map is the target attention pattern for the object token: one
Gaussian marker per labeled box, peaked at the box center, with the
marker spread tied to the box extent. Overlapping markers are combined
by element-wise maximum so the map stays in [0, 1] with unit peaks.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "BoundingBox",
    "QueryAttentionMap",
    "LabeledImage",
    "gaussian_marker",
    "build_query_map",
    "resample_map",
]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image pixel coordinates, [x_min, y_min, w, h]."""

    x_min: float
    y_min: float
    width: float
    height: float
    class_id: int = 0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"box must have positive extent, got w={self.width} h={self.height}"
            )

    @property
    def center(self):
        return (self.x_min + self.width / 2.0, self.y_min + self.height / 2.0)


@dataclass(frozen=True)
class QueryAttentionMap:
    """2D target map with values in [0, 1]; shape is (H, W)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"query map must be 2D, got shape {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def resolution(self):
        return self.values.shape


@dataclass
class LabeledImage:
    """H x W x 3 image in [0, 1] plus its (possibly empty) box labels."""

    image: np.ndarray
    boxes: list = field(default_factory=list)
    identifier: str = ""


def gaussian_marker(x, y, center, sigma):
    """Evaluate one elliptical Gaussian marker at point (x, y).

    Args:
        center: (x_c, y_c) marker peak location.
        sigma: (sigma_x, sigma_y) spreads, both > 0.

    Returns:
        exp(-(x-x_c)^2/(2 sigma_x^2) - (y-y_c)^2/(2 sigma_y^2)), in (0, 1].
    """
    sx, sy = sigma
    if sx <= 0 or sy <= 0:
        raise ValueError(f"marker spread must be positive, got ({sx}, {sy})")
    xc, yc = center
    return math.exp(-((x - xc) ** 2) / (2 * sx**2) - ((y - yc) ** 2) / (2 * sy**2))


def build_query_map(boxes, resolution, sigma_scale=0.5, image_size=None):
    """Rasterize Gaussian markers for each box into a single target map.

    Box centers are mapped into grid coordinates and snapped to the
    nearest grid point, so the map peaks at exactly 1.0 whenever at
    least one box is given. Marker spreads are half the mapped box
    extent times ``sigma_scale``. Overlaps combine by element-wise max.

    Args:
        boxes: list of BoundingBox in image pixel coordinates.
        resolution: (H_a, W_a) of the output grid.
        sigma_scale: multiplier on the half-extent spreads, > 0.
        image_size: (H, W) the boxes refer to; defaults to ``resolution``
            (boxes already in grid coordinates).

    Returns:
        QueryAttentionMap of shape ``resolution``; all-zero iff ``boxes``
        is empty.
    """
    h_a, w_a = int(resolution[0]), int(resolution[1])
    if h_a <= 0 or w_a <= 0:
        raise ValueError(f"resolution must be positive, got {resolution}")
    if sigma_scale <= 0:
        raise ValueError(f"sigma_scale must be positive, got {sigma_scale}")
    if image_size is None:
        image_size = (h_a, w_a)
    h_img, w_img = image_size

    values = np.zeros((h_a, w_a), dtype=np.float64)
    ys, xs = np.mgrid[0:h_a, 0:w_a].astype(np.float64)

    sx_scale = w_a / float(w_img)
    sy_scale = h_a / float(h_img)
    for box in boxes:
        cx_px, cy_px = box.center
        w_map = box.width * sx_scale
        h_map = box.height * sy_scale
        sigma_x = sigma_scale * w_map / 2.0
        sigma_y = sigma_scale * h_map / 2.0
        variance_ok = (
            np.isfinite(sigma_x) and np.isfinite(sigma_y)
            and sigma_x**2 > 0 and sigma_y**2 > 0
        )
        if not variance_ok:
            warnings.warn(
                f"skipping degenerate box {box}: zero area after mapping to {resolution}",
                stacklevel=2,
            )
            continue
        # Pixel j spans [j, j+1) in continuous grid coordinates; snap the
        # mapped center onto the nearest pixel index so the peak is exact.
        xc = int(np.clip(np.round(cx_px * sx_scale - 0.5), 0, w_a - 1))
        yc = int(np.clip(np.round(cy_px * sy_scale - 0.5), 0, h_a - 1))
        marker = np.exp(
            -((xs - xc) ** 2) / (2 * sigma_x**2) - ((ys - yc) ** 2) / (2 * sigma_y**2)
        )
        np.maximum(values, marker, out=values)

    return QueryAttentionMap(values)


def resample_map(qmap, target_resolution):
    """Bilinearly resample a map to a new resolution, clamped to [0, 1].

    Uses half-pixel (non corner-aligned) sampling; resampling to the
    same resolution returns identical values.
    """
    h, w = int(target_resolution[0]), int(target_resolution[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"target resolution must be positive, got {target_resolution}")
    src = qmap.values
    if src.shape == (h, w):
        return QueryAttentionMap(src.copy())
    t = torch.from_numpy(np.ascontiguousarray(src))[None, None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return QueryAttentionMap(np.clip(out[0, 0].numpy(), 0.0, 1.0))
