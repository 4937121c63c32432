"""Labeled-image manifests, class statistics, stratified folds, and a
deterministic synthetic three-class image generator for desk-scale runs.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

UNASSIGNED_FOLD = -1

WEIGHT_SCHEMES = ("balanced", "inverse-sqrt", "none")


@dataclass(frozen=True)
class ImageRecord:
    """One labeled image: unique id, file path, 0-based class label, fold."""

    id: str
    path: str
    label: int
    fold: int = UNASSIGNED_FOLD


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError(f"num_classes must be >= 2, got {self.num_classes}")
        seen: set[str] = set()
        for rec in self.records:
            if not rec.path:
                raise DataError(f"record {rec.id!r} has an empty path")
            if rec.id in seen:
                raise DataError(f"duplicate record id {rec.id!r}")
            seen.add(rec.id)
            if not 0 <= rec.label < self.num_classes:
                raise DataError(
                    f"record {rec.id!r} has label {rec.label}, "
                    f"outside 0..{self.num_classes - 1}"
                )

    @property
    def class_counts(self) -> np.ndarray:
        """Per-class record counts, always recomputed from the records."""
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for rec in self.records:
            counts[rec.label] += 1
        return counts

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, ids: set[str]) -> "DatasetManifest":
        return DatasetManifest(
            [r for r in self.records if r.id in ids], self.num_classes
        )


@dataclass(frozen=True)
class ClassWeights:
    scheme: str
    weights: np.ndarray

    def __post_init__(self):
        if self.scheme not in WEIGHT_SCHEMES:
            raise DataError(f"unknown weight scheme {self.scheme!r}")
        if self.scheme != "none" and not np.all(self.weights > 0):
            raise DataError("class weights must be strictly positive")


@dataclass(frozen=True)
class FoldSpec:
    k: int
    assignments: dict[str, int]

    def members(self, fold: int) -> list[str]:
        return [rid for rid, f in self.assignments.items() if f == fold]


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    class_proportions: tuple[float, ...] = (1 / 3, 1 / 3, 1 / 3)
    specular_blob_count_range: tuple[int, int] = (0, 5)
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise DataError(f"image_size must be >= 32, got {self.image_size}")
        props = np.asarray(self.class_proportions, dtype=float)
        if np.any(props < 0) or not math.isclose(props.sum(), 1.0, abs_tol=1e-9):
            raise DataError(
                f"class_proportions must be non-negative and sum to 1, got {self.class_proportions}"
            )
        lo, hi = self.specular_blob_count_range
        if lo < 0 or hi < lo:
            raise DataError(
                f"invalid specular_blob_count_range {self.specular_blob_count_range}"
            )


# ---------------------------------------------------------------------------
# Manifest I/O
#
# CSV with header `id,path,label[,fold]`, optionally preceded by a comment
# line `# num_classes=N`. Without the comment, num_classes = max label + 1.


def load_manifest(path: str | Path, num_classes: int | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    declared = num_classes
    rows: list[dict[str, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if first.startswith("#"):
            token = first.lstrip("#").strip()
            if token.startswith("num_classes="):
                try:
                    declared = int(token.split("=", 1)[1])
                except ValueError as exc:
                    raise DataError(f"bad num_classes header in {path}: {first!r}") from exc
        else:
            fh.seek(0)
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "path", "label"} <= set(reader.fieldnames):
            raise DataError(f"manifest {path} must have columns id,path,label[,fold]")
        for lineno, row in enumerate(reader, start=2):
            rows.append(row)
            if row["id"] is None or row["label"] is None or not row.get("path"):
                raise DataError(f"malformed row {lineno} in {path}")

    records = []
    for row in rows:
        try:
            label = int(row["label"])
            fold = int(row["fold"]) if row.get("fold") not in (None, "") else UNASSIGNED_FOLD
        except (TypeError, ValueError) as exc:
            raise DataError(f"malformed row in {path}: {row}") from exc
        # relative paths resolve against the manifest's own directory
        rec_path = Path(row["path"])
        if not rec_path.is_absolute():
            rec_path = path.parent / rec_path
        records.append(ImageRecord(id=row["id"], path=str(rec_path), label=label, fold=fold))
    if not records:
        raise DataError(f"manifest {path} has no records")
    if declared is None:
        declared = max(r.label for r in records) + 1
    return DatasetManifest(records=records, num_classes=declared)


def save_manifest(
    manifest: DatasetManifest, path: str | Path, relative: bool = True
) -> None:
    """Write the manifest CSV; paths under the manifest's directory are
    stored relative to it so generated trees are location-independent.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent.resolve()
    has_folds = any(r.fold != UNASSIGNED_FOLD for r in manifest.records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# num_classes={manifest.num_classes}\n")
        fields = ["id", "path", "label"] + (["fold"] if has_folds else [])
        writer = csv.writer(fh)
        writer.writerow(fields)
        for rec in manifest.records:
            rec_path = Path(rec.path)
            if relative and rec_path.resolve().is_relative_to(base):
                rec_path = rec_path.resolve().relative_to(base)
            row = [rec.id, str(rec_path), rec.label]
            if has_folds:
                row.append(rec.fold)
            writer.writerow(row)


def with_folds(manifest: DatasetManifest, folds: FoldSpec) -> DatasetManifest:
    """Copy of the manifest with fold assignments stamped onto the records."""
    records = [
        ImageRecord(r.id, r.path, r.label, folds.assignments[r.id])
        for r in manifest.records
    ]
    return DatasetManifest(records, manifest.num_classes)


# ---------------------------------------------------------------------------
# Class statistics


def class_ratio(manifest: DatasetManifest) -> np.ndarray:
    """Per-class counts relative to class 0 (n_i / n_0)."""
    counts = manifest.class_counts
    if counts[0] == 0:
        raise DataError("class 0 is empty; ratio undefined")
    return counts.astype(float) / float(counts[0])


def compute_class_weights(manifest: DatasetManifest, scheme: str = "none") -> ClassWeights:
    """Per-class loss weights.

    "balanced" weights are proportional to 1/n_i, "inverse-sqrt" to
    1/sqrt(n_i); both are rescaled to sum to the number of classes so the
    expected loss scale matches the unweighted case. "none" is all ones.
    """
    if scheme not in WEIGHT_SCHEMES:
        raise DataError(f"unknown weight scheme {scheme!r}; choose from {WEIGHT_SCHEMES}")
    counts = manifest.class_counts.astype(float)
    if scheme == "none":
        return ClassWeights(scheme, np.ones(manifest.num_classes))
    if np.any(counts == 0):
        raise DataError(f"scheme {scheme!r} needs every class populated, counts={counts}")
    raw = 1.0 / counts if scheme == "balanced" else 1.0 / np.sqrt(counts)
    weights = raw * (manifest.num_classes / raw.sum())
    return ClassWeights(scheme, weights)


# ---------------------------------------------------------------------------
# Stratified k-fold


def stratified_kfold(manifest: DatasetManifest, k: int, seed: int) -> FoldSpec:
    """Seeded stratified folds; per-class fold sizes differ by at most 1."""
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    counts = manifest.class_counts
    for cls, n in enumerate(counts):
        if n < k:
            raise DataError(f"class {cls} has {n} records, fewer than k={k}")
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    for cls in range(manifest.num_classes):
        ids = [r.id for r in manifest.records if r.label == cls]
        order = rng.permutation(len(ids))
        start = int(rng.integers(k))  # rotate so leftovers spread across folds
        for pos, idx in enumerate(order):
            assignments[ids[idx]] = (start + pos) % k
    return FoldSpec(k=k, assignments=assignments)


def split_records(
    manifest: DatasetManifest, folds: FoldSpec, val_fold: int
) -> tuple[list[ImageRecord], list[ImageRecord]]:
    """(train, validation) records for one held-out fold."""
    if not 0 <= val_fold < folds.k:
        raise DataError(f"val_fold {val_fold} outside 0..{folds.k - 1}")
    train, val = [], []
    for rec in manifest.records:
        fold = folds.assignments.get(rec.id)
        if fold is None:
            raise DataError(f"record {rec.id!r} has no fold assignment")
        (val if fold == val_fold else train).append(rec)
    if not train:
        raise DataError("training split is empty")
    return train, val


# ---------------------------------------------------------------------------
# Synthetic generator
#
# Class 0: fully visible bright annulus. Class 1: the same annulus with
# 40-60% of its pixels hidden behind an occluding background-colored disk.
# Class 2: no annulus, dark central disk. Every class gets specular white
# blobs and per-pixel background noise. Annulus pixel counts are strictly
# ordered class 0 > class 1 > class 2 for every seed: visible ring areas
# land in disjoint intervals by construction (ring geometry is sampled
# tightly enough that 60% of the largest ring < 100% of the smallest).

_BACKGROUND = np.array([0.24, 0.13, 0.11])
_RING = np.array([0.85, 0.55, 0.50])
_DARK_DISK = np.array([0.07, 0.04, 0.04])
_SPECULAR = np.array([0.98, 0.98, 0.97])
_NOISE_SIGMA = 0.03


def apportion_counts(proportions: np.ndarray, count: int) -> np.ndarray:
    """Largest-remainder apportionment of `count` into integer class counts."""
    props = np.asarray(proportions, dtype=float)
    ideal = props * count
    counts = np.floor(ideal).astype(np.int64)
    remainder = count - counts.sum()
    order = np.argsort(-(ideal - counts), kind="stable")
    for i in range(remainder):
        counts[order[i]] += 1
    return counts


def _disk_mask(size: int, center: tuple[float, float], radius: float) -> np.ndarray:
    rr, cc = np.mgrid[0:size, 0:size]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def _occluder_radius(ring: np.ndarray, size: int, center: tuple[float, float],
                     target: float) -> float:
    """Smallest radius whose disk covers >= target fraction of the ring."""
    ring_total = ring.sum()
    lo, hi = 1.0, 2.0 * size
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        covered = (ring & _disk_mask(size, center, mid)).sum() / ring_total
        if covered >= target:
            hi = mid
        else:
            lo = mid
    return hi


def _render_image(rng: np.random.Generator, label: int, config: SynthConfig) -> np.ndarray:
    size = config.image_size
    img = np.tile(_BACKGROUND, (size, size, 1)).astype(np.float64)

    center = (
        size / 2 + rng.uniform(-0.04, 0.04) * size,
        size / 2 + rng.uniform(-0.04, 0.04) * size,
    )
    r_out = rng.uniform(0.30, 0.34) * size
    r_in = r_out * (1.0 - rng.uniform(0.38, 0.42))

    if label in (0, 1):
        ring = _disk_mask(size, center, r_out) & ~_disk_mask(size, center, r_in)
        img[ring] = _RING
        if label == 1:
            theta = rng.uniform(0, 2 * math.pi)
            r_mid = 0.5 * (r_in + r_out)
            occ_center = (
                center[0] + r_mid * math.sin(theta),
                center[1] + r_mid * math.cos(theta),
            )
            occ_radius = _occluder_radius(ring, size, occ_center, rng.uniform(0.42, 0.58))
            img[_disk_mask(size, occ_center, occ_radius)] = _BACKGROUND
    else:
        img[_disk_mask(size, center, rng.uniform(0.20, 0.30) * size)] = _DARK_DISK

    lo, hi = config.specular_blob_count_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        blob_center = (rng.uniform(0, size), rng.uniform(0, size))
        img[_disk_mask(size, blob_center, rng.uniform(1.0, 2.2))] = _SPECULAR

    img += rng.normal(0.0, _NOISE_SIGMA, img.shape)
    return np.clip(img, 0.0, 1.0)


def annulus_pixel_count(image: np.ndarray) -> int:
    """Pixels matching the ring color family (excludes specular white)."""
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    return int(np.count_nonzero((r > 0.6) & (b > 0.3) & (b < 0.75)))


def generate_synthetic(
    config: SynthConfig, count: int, out_dir: str | Path
) -> DatasetManifest:
    """Write `count` PNG images plus manifest.csv and genconfig.json.

    Deterministic for a fixed config: image i is rendered from an rng
    seeded by (config.seed, i), so outputs are byte-identical across runs.
    """
    num_classes = len(config.class_proportions)
    if count < num_classes:
        raise DataError(f"count {count} smaller than number of classes {num_classes}")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    counts = apportion_counts(np.asarray(config.class_proportions), count)
    labels = np.repeat(np.arange(num_classes), counts)

    records = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng([config.seed, i])
        img = _render_image(rng, int(label), config)
        name = f"{i:05d}_c{int(label)}.png"
        Image.fromarray((img * 255.0).round().astype(np.uint8)).save(img_dir / name)
        records.append(ImageRecord(id=f"{i:05d}", path=str(img_dir / name), label=int(label)))

    manifest = DatasetManifest(records, num_classes)
    save_manifest(manifest, out_dir / "manifest.csv")
    with open(out_dir / "genconfig.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
