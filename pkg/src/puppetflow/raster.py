"""Shared software-rasterization primitives (pure numpy, deterministic).

Pixel centers sit at half-integer coordinates (x + 0.5, y + 0.5); coverage
values are in [0, 1] with a one-pixel linear ramp at shape edges.
"""

from __future__ import annotations

import numpy as np


def pixel_grid(height: int, width: int) -> tuple:
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    return np.meshgrid(xs, ys)


def composite(img: np.ndarray, cov: np.ndarray, color, y0: int = 0, x0: int = 0) -> None:
    """Alpha-composite a coverage patch over img in place (later calls overwrite)."""
    h, w = cov.shape
    if h == 0 or w == 0:
        return
    dst = img[y0 : y0 + h, x0 : x0 + w]
    c = np.asarray(color, dtype=np.float32)
    dst *= (1.0 - cov)[..., None].astype(np.float32)
    dst += cov[..., None].astype(np.float32) * c


def segment_coverage(a, b, half_width: float, height: int, width: int) -> tuple:
    """Anti-aliased coverage of a thick segment, restricted to its bbox.

    Returns (coverage patch, y0, x0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = np.floor(np.minimum(a, b) - half_width - 1).astype(int)
    hi = np.ceil(np.maximum(a, b) + half_width + 1).astype(int)
    x0, y0 = max(lo[0], 0), max(lo[1], 0)
    x1, y1 = min(hi[0], width), min(hi[1], height)
    if x0 >= x1 or y0 >= y1:
        return np.zeros((0, 0)), 0, 0
    xs = np.arange(x0, x1, dtype=np.float64) + 0.5
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-18:
        t = np.zeros_like(gx)
    else:
        t = np.clip(((gx - a[0]) * ab[0] + (gy - a[1]) * ab[1]) / denom, 0.0, 1.0)
    dist = np.hypot(gx - (a[0] + t * ab[0]), gy - (a[1] + t * ab[1]))
    cov = np.clip(half_width + 0.5 - dist, 0.0, 1.0)
    return cov, y0, x0


def disc_coverage(center, radius: float, height: int, width: int) -> np.ndarray:
    """Anti-aliased coverage of a filled disc over the full canvas."""
    gx, gy = pixel_grid(height, width)
    dist = np.hypot(gx - center[0], gy - center[1])
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def ellipse_coverage(center, ax: float, ay: float, height: int, width: int) -> np.ndarray:
    """Approximate anti-aliased coverage of an axis-aligned filled ellipse."""
    gx, gy = pixel_grid(height, width)
    # Signed "radial" excess scaled to roughly pixel units.
    r = np.hypot((gx - center[0]) / ax, (gy - center[1]) / ay)
    scale = min(ax, ay)
    return np.clip(0.5 + (1.0 - r) * scale, 0.0, 1.0)


def polygon_mask(vertices, height: int, width: int) -> np.ndarray:
    """Even-odd point-in-polygon test over pixel centers -> bool (H, W)."""
    verts = np.asarray(vertices, dtype=np.float64)
    gx, gy = pixel_grid(height, width)
    inside = np.zeros((height, width), dtype=bool)
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        crosses = (y1 > gy) != (y2 > gy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (x2 - x1) * (gy - y1) / (y2 - y1) + x1
        inside ^= crosses & (gx < xint)
    return inside
