"""Image preprocessing: contour-based ROI extraction, cropping, resizing,
augmentation, and channel normalization.

Pipeline order is segment -> crop -> resize -> augment -> normalize; images
travel as HxWx3 float arrays with values in [0, 1] until normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import DataError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

ROI_AREA_MIN = 0.05
ROI_AREA_MAX = 0.95
ROI_BOX_MARGIN = 0.05
ROI_MIN_CONTRAST = 0.1


@dataclass(frozen=True)
class NormalizationSpec:
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if any(s <= 0 for s in self.std):
            raise DataError(f"std must be strictly positive, got {self.std}")


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_degrees: float = 15.0
    hflip_probability: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.rotation_degrees < 0:
            raise DataError("rotation range must be >= 0")
        if not 0.0 <= self.hflip_probability <= 1.0:
            raise DataError("hflip_probability must be in [0, 1]")


@dataclass
class RoiResult:
    """Foreground bounding box (inclusive row/col bounds) and mask."""

    row_min: int
    row_max: int
    col_min: int
    col_max: int
    mask: np.ndarray
    converged: bool
    fallback_used: bool
    iterations: int
    energies: list[float] = field(default_factory=list)

    @property
    def box(self) -> tuple[int, int, int, int]:
        return (self.row_min, self.row_max, self.col_min, self.col_max)


# ---------------------------------------------------------------------------
# Two-region piecewise-constant contour segmentation (level-set descent)


def _smooth_delta(phi: np.ndarray, eps: float = 1.0) -> np.ndarray:
    return (eps / math.pi) / (eps**2 + phi**2)


def _region_means(gray: np.ndarray, h: np.ndarray) -> tuple[float, float]:
    inside, outside = h.sum(), (1.0 - h).sum()
    c1 = (gray * h).sum() / inside if inside > 0 else 0.0
    c2 = (gray * (1.0 - h)).sum() / outside if outside > 0 else 0.0
    return c1, c2


def contour_energy(gray: np.ndarray, phi: np.ndarray, mu: float) -> float:
    """Region-mean fidelity plus contour-length penalty of the segmentation.

    Evaluated on the binary foreground (phi > 0) so the value depends only on
    the segmentation itself, not on the level set's parametrization.
    """
    h = (phi > 0).astype(np.float64)
    c1, c2 = _region_means(gray, h)
    fidelity = ((gray - c1) ** 2 * h + (gray - c2) ** 2 * (1.0 - h)).sum()
    gy, gx = np.gradient(h)
    length = np.sqrt(gx**2 + gy**2).sum()
    return float(fidelity + mu * length)


def _level_set_step(gray: np.ndarray, phi: np.ndarray, mu: float, dt: float) -> np.ndarray:
    """One semi-implicit descent step on the contour energy."""
    eta = 1e-16
    p = np.pad(phi, 1, mode="edge")
    phixp = p[1:-1, 2:] - p[1:-1, 1:-1]
    phixn = p[1:-1, 1:-1] - p[1:-1, :-2]
    phix0 = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    phiyp = p[2:, 1:-1] - p[1:-1, 1:-1]
    phiyn = p[1:-1, 1:-1] - p[:-2, 1:-1]
    phiy0 = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0

    c1w = 1.0 / np.sqrt(eta + phixp**2 + phiy0**2)
    c2w = 1.0 / np.sqrt(eta + phixn**2 + phiy0**2)
    c3w = 1.0 / np.sqrt(eta + phix0**2 + phiyp**2)
    c4w = 1.0 / np.sqrt(eta + phix0**2 + phiyn**2)
    neighbor = (
        p[1:-1, 2:] * c1w + p[1:-1, :-2] * c2w + p[2:, 1:-1] * c3w + p[:-2, 1:-1] * c4w
    )

    h = (phi > 0).astype(np.float64)
    c1, c2 = _region_means(gray, h)
    fidelity = -((gray - c1) ** 2) + (gray - c2) ** 2

    delta = _smooth_delta(phi)
    numerator = phi + dt * delta * (mu * neighbor + fidelity)
    denominator = 1.0 + mu * dt * delta * (c1w + c2w + c3w + c4w)
    return numerator / denominator


def _initial_level_set(shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    rr, cc = np.mgrid[0:h, 0:w]
    radius = 0.35 * min(h, w)
    dist = np.sqrt((rr - (h - 1) / 2.0) ** 2 + (cc - (w - 1) / 2.0) ** 2)
    return radius - dist


def _signed_distance(mask: np.ndarray) -> np.ndarray:
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return inside - outside


def _tight_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def segment_roi(
    image: np.ndarray,
    max_iters: int = 300,
    tol: float = 5e-4,
    mu: float = 0.2,
    dt: float = 5.0,
) -> RoiResult:
    """Locate the foreground region by minimizing a two-region contour energy.

    The level set starts as a centered circle of radius 0.35*min(h, w) and
    descends the energy with step backtracking, so the recorded energies are
    non-increasing. Convergence means the foreground mask changed by at most
    a `tol` fraction of pixels over several consecutive accepted steps.
    Returns the tight foreground box expanded by a 5% margin; falls back to
    the full-image box when the foreground covers < 5% or > 95% of the image,
    the final regions lack meaningful contrast (no usable contour), or the
    iteration diverges.
    """
    img = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(img)):
        raise DataError("segment_roi requires finite pixel values")
    gray = img.mean(axis=2) if img.ndim == 3 else img
    h, w = gray.shape
    full = RoiResult(0, h - 1, 0, w - 1, np.ones((h, w), dtype=bool),
                     converged=False, fallback_used=True, iterations=0)

    if float(gray.max() - gray.min()) < 1e-12:
        return full

    phi = _initial_level_set(gray.shape)
    energies = [contour_energy(gray, phi, mu)]
    converged = False
    diverged = False
    iterations = 0
    stable_run = 0
    stable_needed = 10
    for _ in range(max_iters):
        trial_dt, candidate, cand_energy = dt, None, None
        for _ in range(8):
            step = _level_set_step(gray, phi, mu, trial_dt)
            energy = contour_energy(gray, step, mu)
            if not np.isfinite(energy) or not np.all(np.isfinite(step)):
                diverged = True
                break
            if energy <= energies[-1] + 1e-12:
                candidate, cand_energy = step, energy
                break
            trial_dt /= 2.0
        if candidate is None:
            # no descending step left: settled at a discrete minimum
            converged = not diverged
            break
        iterations += 1
        flipped = float(np.mean((candidate > 0) != (phi > 0)))
        phi = candidate
        energies.append(cand_energy)
        stable_run = stable_run + 1 if flipped <= tol else 0
        if stable_run >= stable_needed:
            converged = True
            break
        if iterations % 10 == 0:
            # re-anchor the level set so the update band tracks the contour
            phi = _signed_distance(phi > 0)

    mask = phi > 0
    area = float(mask.mean())
    c1, c2 = _region_means(gray, mask.astype(np.float64))
    contrast = abs(c1 - c2) / float(gray.max() - gray.min())
    if diverged or area < ROI_AREA_MIN or area > ROI_AREA_MAX or contrast < ROI_MIN_CONTRAST:
        full.iterations = iterations
        full.energies = energies
        full.converged = converged
        return full

    rmin, rmax, cmin, cmax = _tight_box(mask)
    margin_r = math.ceil(ROI_BOX_MARGIN * (rmax - rmin + 1))
    margin_c = math.ceil(ROI_BOX_MARGIN * (cmax - cmin + 1))
    return RoiResult(
        max(0, rmin - margin_r),
        min(h - 1, rmax + margin_r),
        max(0, cmin - margin_c),
        min(w - 1, cmax + margin_c),
        mask,
        converged=converged,
        fallback_used=False,
        iterations=iterations,
        energies=energies,
    )


# ---------------------------------------------------------------------------
# Geometric and value transforms


def crop(image: np.ndarray, roi: RoiResult) -> np.ndarray:
    h, w = image.shape[:2]
    rmin, rmax, cmin, cmax = roi.box
    if rmin > rmax or cmin > cmax:
        raise DataError(f"degenerate crop box {roi.box}")
    if rmin < 0 or cmin < 0 or rmax >= h or cmax >= w:
        raise DataError(f"crop box {roi.box} outside image {image.shape}")
    return image[rmin : rmax + 1, cmin : cmax + 1].copy()


def resize(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize to side x side; convex interpolation keeps value bounds."""
    if side < 8:
        raise DataError(f"target side must be >= 8, got {side}")
    tensor = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(tensor, size=(side, side), mode="bilinear", align_corners=False)
    return out.squeeze(0).permute(1, 2, 0).contiguous().numpy()


def augment(image: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Random rotation (zero-filled borders) then horizontal flip.

    Both draws always consume the rng so streams stay aligned across specs;
    zero rotation and zero flip probability reproduce the input bit-exactly.
    """
    angle = float(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    flip = bool(rng.random() < spec.hflip_probability)
    out = image
    if angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(0, 1), reshape=False, order=1,
                             mode="constant", cval=0.0)
        out = np.clip(out, 0.0, 1.0)
    if flip:
        out = out[:, ::-1].copy()
    return out if out is not image else image.copy()


def normalize(image: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    mean = np.asarray(spec.mean, dtype=image.dtype)
    std = np.asarray(spec.std, dtype=image.dtype)
    return (image - mean) / std


def denormalize(image: np.ndarray, spec: NormalizationSpec) -> np.ndarray:
    mean = np.asarray(spec.mean, dtype=image.dtype)
    std = np.asarray(spec.std, dtype=image.dtype)
    return image * std + mean


# ---------------------------------------------------------------------------
# File I/O and the composed pipeline


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 2:
        arr = arr[..., None].repeat(3, axis=2)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path)


@dataclass
class PreprocessConfig:
    side: int = 64
    roi_enabled: bool = True
    roi_max_iters: int = 300
    roi_tol: float = 5e-4
    roi_mu: float = 0.2
    rotation_degrees: float = 15.0
    hflip_probability: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


class Preprocessor:
    """Applies the deterministic base pipeline and per-view transforms.

    `load_base` output (ROI crop + resize, still in [0, 1]) is cacheable per
    record; augmentation happens only on training views, with an rng owned
    by the caller so batches can be prepared in any order.
    """

    def __init__(self, config: PreprocessConfig):
        self.config = config
        self.normalization = NormalizationSpec(config.mean, config.std)
        self.augmentation = AugmentationSpec(config.rotation_degrees, config.hflip_probability)

    def prepare_base(self, image: np.ndarray) -> tuple[np.ndarray, RoiResult | None]:
        roi = None
        if self.config.roi_enabled:
            roi = segment_roi(image, max_iters=self.config.roi_max_iters,
                              tol=self.config.roi_tol, mu=self.config.roi_mu)
            image = crop(image, roi)
        return resize(image, self.config.side), roi

    def load_base(self, path: str | Path) -> tuple[np.ndarray, RoiResult | None]:
        return self.prepare_base(load_image(path))

    def train_view(self, base: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return normalize(augment(base, self.augmentation, rng), self.normalization)

    def eval_view(self, base: np.ndarray) -> np.ndarray:
        return normalize(base, self.normalization)
