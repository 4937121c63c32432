"""Shared helpers for the test suite."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np


def disk_image(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Bright disk on a dark background with mild noise; returns (image, mask)."""
    img = np.full((size, size, 3), 0.12)
    radius = rng.uniform(0.15, 0.3) * size
    cy = size / 2 + rng.uniform(-0.15, 0.15) * size
    cx = size / 2 + rng.uniform(-0.15, 0.15) * size
    rr, cc = np.mgrid[0:size, 0:size]
    mask = (rr - cy) ** 2 + (cc - cx) ** 2 <= radius**2
    img[mask] = [0.85, 0.80, 0.75]
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0), mask


def tree_digest(root: Path) -> str:
    """Order-independent digest of every file's relative path and bytes."""
    digest = hashlib.sha256()
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def box_contains_fraction(box: tuple[int, int, int, int], mask: np.ndarray) -> float:
    """Fraction of true mask pixels inside the (inclusive) box."""
    rmin, rmax, cmin, cmax = box
    inside = np.zeros_like(mask, dtype=bool)
    inside[rmin : rmax + 1, cmin : cmax + 1] = True
    return float((mask & inside).sum() / mask.sum())
