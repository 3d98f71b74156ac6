"""Synthetic keypoint-heatmap task.

Each sample is one random convex quadrilateral (rotation, translation,
scale) flat-filled over a noisy background; its four vertices are the
keypoints. Targets are quarter-resolution Gaussian heatmaps (sigma 2,
peak exactly 1 at the rounded keypoint cell). Generation is deterministic
per (seed, index).
"""

import hashlib
from dataclasses import dataclass

import numpy as np

HEATMAP_STRIDE = 4
HEATMAP_SIGMA = 2.0
_MARGIN = 4.0  # keeps rounded cells strictly inside the heatmap grid


@dataclass
class HeatmapSample:
    image: np.ndarray      # (3, H, W)
    keypoints: np.ndarray  # (K, 2) as (x, y) pixel coordinates
    target: np.ndarray     # (K, H/4, W/4)


def stream_seed(seed, name):
    """Derive an independent integer seed for a named substream."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _sample_quad(rng, h, w):
    """Convex, in-bounds quadrilateral with CCW angle-ordered vertices."""
    while True:
        scale = rng.uniform(0.15, 0.35) * min(h, w)
        cx = rng.uniform(_MARGIN + scale * 0.2, w - _MARGIN - scale * 0.2)
        cy = rng.uniform(_MARGIN + scale * 0.2, h - _MARGIN - scale * 0.2)
        base = rng.uniform(0.0, 2.0 * np.pi)
        angles = base + np.arange(4) * (np.pi / 2) + rng.uniform(-0.3, 0.3, 4)
        radii = scale * rng.uniform(0.7, 1.3, 4)
        xs = cx + radii * np.cos(angles)
        ys = cy + radii * np.sin(angles)
        pts = np.stack([xs, ys], axis=1)
        if xs.min() < _MARGIN or xs.max() > w - _MARGIN:
            continue
        if ys.min() < _MARGIN or ys.max() > h - _MARGIN:
            continue
        if _is_convex(pts):
            return pts


def _is_convex(pts):
    n = len(pts)
    cross = []
    for i in range(n):
        a, b, c = pts[i], pts[(i + 1) % n], pts[(i + 2) % n]
        cross.append(np.cross(b - a, c - b))
    cross = np.asarray(cross)
    return bool(np.all(cross > 1e-6) or np.all(cross < -1e-6))


def _fill_mask(pts, h, w):
    """Inside test for a convex polygon at pixel centers."""
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5
    py = ys + 0.5
    inside = np.ones((h, w), dtype=bool)
    n = len(pts)
    sign = 0.0
    for i in range(n):
        ax, ay = pts[i]
        bx, by = pts[(i + 1) % n]
        cr = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        if sign == 0.0:
            sign = 1.0 if cr.mean() >= 0 else -1.0
        inside &= (cr * sign) >= 0
    return inside


def _gaussian_heatmap(cell_x, cell_y, hh, hw):
    ys, xs = np.mgrid[0:hh, 0:hw]
    d2 = (xs - cell_x) ** 2 + (ys - cell_y) ** 2
    return np.exp(-d2 / (2.0 * HEATMAP_SIGMA ** 2))


def make_sample(seed, index, h, w, k_kp=4):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))
    quad = _sample_quad(rng, h, w)
    # keypoints are the vertices, cycled when k_kp != 4
    pts = quad[np.arange(k_kp) % 4]
    mask = _fill_mask(quad, h, w)
    background = rng.uniform(0.0, 0.3, size=3)[:, None, None] \
        + rng.normal(0.0, 0.05, size=(3, h, w))
    fill = rng.uniform(0.5, 1.0, size=3)[:, None, None]
    image = np.where(mask[None], fill, background)

    hh, hw = h // HEATMAP_STRIDE, w // HEATMAP_STRIDE
    target = np.empty((k_kp, hh, hw))
    for i, (x, y) in enumerate(pts):
        cell_x = int(np.clip(round(x / HEATMAP_STRIDE), 0, hw - 1))
        cell_y = int(np.clip(round(y / HEATMAP_STRIDE), 0, hh - 1))
        target[i] = _gaussian_heatmap(cell_x, cell_y, hh, hw)
    return HeatmapSample(image=image, keypoints=pts.copy(), target=target)


def synth_dataset(seed, n, h, w, k_kp=4):
    """n deterministic samples; same (seed, index) always gives the same sample."""
    if h % 32 or w % 32:
        raise ValueError(f"image size {h}x{w} must be divisible by 32")
    if k_kp < 1:
        raise ValueError("k_kp must be >= 1")
    return [make_sample(seed, i, h, w, k_kp) for i in range(n)]


def dataset_hash(samples):
    """Stable digest of a dataset, for determinism checks."""
    hasher = hashlib.sha256()
    for s in samples:
        hasher.update(np.ascontiguousarray(s.image).tobytes())
        hasher.update(np.ascontiguousarray(s.keypoints).tobytes())
        hasher.update(np.ascontiguousarray(s.target).tobytes())
    return hasher.hexdigest()


def batch_arrays(samples, indices):
    """Stack selected samples into (images, targets, keypoints) arrays."""
    images = np.stack([samples[i].image for i in indices])
    targets = np.stack([samples[i].target for i in indices])
    kps = np.stack([samples[i].keypoints for i in indices])
    return images, targets, kps
