"""Distribution distance, attention coverage, domain score, and plots.

The feature extractor is a desk-scale stand-in for a pretrained
embedding network: channel-wise average pooling followed by a fixed
seeded random projection. It exercises the Frechet-distance formula
exactly; paper-scale runs swap in a real embedding behind the same
``embed`` contract.
"""

import math
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .querymap import QueryAttentionMap

__all__ = [
    "RandomProjectionFeatures",
    "compute_fid",
    "Coverage",
    "attention_coverage",
    "domain_score",
    "plot_maps",
]


class RandomProjectionFeatures:
    """Deterministic pooled-pixel random-projection embeddings."""

    def __init__(self, feature_dim=64, pool=8, seed=0):
        self.feature_dim = feature_dim
        self.pool = pool
        rng = np.random.default_rng(seed)
        n_in = 3 * pool * pool
        self.projection = rng.standard_normal((feature_dim, n_in)) / math.sqrt(n_in)

    def embed(self, image):
        arr = np.asarray(image, dtype=np.float64)
        t = torch.from_numpy(arr).permute(2, 0, 1)[None]
        pooled = F.adaptive_avg_pool2d(t, self.pool)[0].numpy()
        return self.projection @ pooled.reshape(-1)

    def embed_set(self, images):
        return np.stack([self.embed(img) for img in images])


def compute_fid(set_a, set_b, eps=1e-6):
    """Frechet distance between Gaussian fits of two feature sets.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` with both
    covariances regularized by ``eps * I``. The cross term is computed
    through the symmetric product ``S_a^(1/2) S_b S_a^(1/2)`` (same
    spectrum as ``S_a S_b``) with negative eigenvalues clamped at zero,
    which keeps the result symmetric in its arguments. Small negative
    totals from roundoff are clamped at zero.
    """
    a = np.asarray(set_a, dtype=np.float64)
    b = np.asarray(set_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature sets must be (n, d) with equal d, got {a.shape}, {b.shape}")
    d = a.shape[1]
    for name, s in (("a", a), ("b", b)):
        if s.shape[0] < d + 1:
            raise ValueError(
                f"set {name} has {s.shape[0]} samples; need at least {d + 1} for a "
                "nonsingular covariance"
            )

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.cov(a, rowvar=False) + eps * np.eye(d)
    sigma_b = np.cov(b, rowvar=False) + eps * np.eye(d)

    vals_a, vecs_a = np.linalg.eigh(sigma_a)
    root_a = (vecs_a * np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = root_a @ sigma_b @ root_a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigh(inner)[0]
    trace_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()

    diff = mu_a - mu_b
    fid = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * trace_cross)
    return max(fid, 0.0)


class Coverage(NamedTuple):
    value: float
    degenerate: bool


def attention_coverage(attn_map, boxes, image_size=None):
    """Fraction of map mass inside the boxes' footprint.

    Args:
        attn_map: nonnegative 2D array (or tensor / QueryAttentionMap).
        boxes: BoundingBox list, in ``image_size`` pixel coordinates.
        image_size: (H, W) the boxes refer to; defaults to the map shape.

    Returns:
        Coverage(value in [0, 1], degenerate); an all-zero map is
        degenerate with value 0.
    """
    if isinstance(attn_map, QueryAttentionMap):
        attn_map = attn_map.values
    values = np.asarray(torch.as_tensor(attn_map).detach().cpu().numpy(), dtype=np.float64)
    hm, wm = values.shape
    if image_size is None:
        image_size = (hm, wm)
    hi, wi = image_size
    sy, sx = hm / hi, wm / wi

    mask = np.zeros((hm, wm), dtype=bool)
    for box in boxes:
        y0 = int(np.clip(np.floor(box.y_min * sy), 0, hm))
        y1 = int(np.clip(np.ceil((box.y_min + box.height) * sy), 0, hm))
        x0 = int(np.clip(np.floor(box.x_min * sx), 0, wm))
        x1 = int(np.clip(np.ceil((box.x_min + box.width) * sx), 0, wm))
        mask[y0:y1, x0:x1] = True

    total = values.sum()
    if total <= 0:
        return Coverage(0.0, True)
    return Coverage(float(values[mask].sum() / total), False)


def domain_score(image, lum_midpoint=0.5, sat_midpoint=0.05, sharpness=10.0):
    """Pixel-statistics score in [0, 1]; >= 0.5 reads as target domain.

    The toy target domain is dark and saturated, the source bright and
    gray, so the score rises as mean luminance falls below the midpoint
    and mean saturation rises above its midpoint. Midpoints were
    calibrated on the bundled fixture.
    """
    arr = np.asarray(image, dtype=np.float64)
    lum = float((0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]).mean())
    sat = float((arr.max(axis=-1) - arr.min(axis=-1)).mean())
    logit = sharpness * (lum_midpoint - lum) + sharpness * (sat - sat_midpoint)
    return float(1.0 / (1.0 + math.exp(-logit)))


def _to_panel(values, tile):
    """Grayscale panel, peak-normalized, nearest-upscaled to tile size."""
    v = np.asarray(torch.as_tensor(values).detach().cpu().numpy(), dtype=np.float64)
    if v.ndim == 2:
        peak = v.max()
        v = v / peak if peak > 0 else v
        v = np.repeat(v[:, :, None], 3, axis=2)
    img = Image.fromarray(np.round(np.clip(v, 0, 1) * 255).astype(np.uint8))
    return np.array(img.resize((tile, tile), Image.NEAREST), dtype=np.uint8)


def plot_maps(maps, boxes, out_path, source_image=None, query_map=None,
              image_size=None, tile=128):
    """Write a one-row PNG grid: source image, query map, then each map.

    Box outlines are drawn in red on every panel; omitted source/query
    panels render blank so the panel count is always ``len(maps) + 2``.
    """
    maps = list(maps)
    if image_size is None:
        if source_image is not None:
            image_size = source_image.shape[:2]
        elif maps:
            image_size = tuple(torch.as_tensor(maps[0]).shape)
        else:
            raise ValueError("nothing to plot")
    hi, wi = image_size

    panels = []
    blank = np.zeros((hi, wi), dtype=np.float64)
    panels.append(_to_panel(source_image if source_image is not None else blank, tile))
    qvals = query_map.values if isinstance(query_map, QueryAttentionMap) else query_map
    panels.append(_to_panel(qvals if qvals is not None else blank, tile))
    panels.extend(_to_panel(m, tile) for m in maps)

    sy, sx = tile / hi, tile / wi
    for panel in panels:
        for box in boxes:
            y0 = int(np.clip(round(box.y_min * sy), 0, tile - 1))
            y1 = int(np.clip(round((box.y_min + box.height) * sy), 0, tile - 1))
            x0 = int(np.clip(round(box.x_min * sx), 0, tile - 1))
            x1 = int(np.clip(round((box.x_min + box.width) * sx), 0, tile - 1))
            panel[y0, x0:x1 + 1] = (255, 32, 32)
            panel[y1, x0:x1 + 1] = (255, 32, 32)
            panel[y0:y1 + 1, x0] = (255, 32, 32)
            panel[y0:y1 + 1, x1] = (255, 32, 32)

    gap = 2
    grid = np.full((tile, len(panels) * (tile + gap) - gap, 3), 255, dtype=np.uint8)
    for i, panel in enumerate(panels):
        x = i * (tile + gap)
        grid[:, x:x + tile] = panel
    Image.fromarray(grid).save(out_path)
    return out_path
