"""Reference images, abundance-weighted weight images and training patches.

A reference image marks every pixel closer than ``radius_px`` to an
annotated cell centre. The weight image puts one value on each such disk,
chosen from the class census so that rarer classes weigh more, and a
background value everywhere else.

Note the background differs between strategies: ``RatioWeight`` and
``Unweighted`` use 1, both exponential strategies use exp(-1). The
exponential strategies therefore weigh the most abundant class exactly like
background, while the ratio strategy weighs it like background at 1.

Pixel ``(row, col)`` sits at coordinate ``(x=col, y=row)``; distances are
exact Euclidean distances between that lattice point and each dot.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .annotations import CellClass, ClassCensus, DotAnnotationSet

DEFAULT_RADIUS_PX = 4.0
DEFAULT_PATCH_SIZE = 256


class WeightKind(str, enum.Enum):
    RATIO = "RatioWeight"
    EXP1 = "ExpWeightType1"
    EXP2 = "ExpWeightType2"
    UNWEIGHTED = "Unweighted"


@dataclass(frozen=True)
class WeightStrategy:
    kind: WeightKind
    census: ClassCensus
    radius_px: float = DEFAULT_RADIUS_PX

    def __post_init__(self):
        object.__setattr__(self, "kind", WeightKind(self.kind))
        if not self.radius_px > 0:
            raise ValueError(f"radius_px must be > 0, got {self.radius_px}")

    def class_weights(self) -> dict[CellClass, float]:
        return {c: class_weight(self, c) for c in self.census.classes}


def class_weight(strategy: WeightStrategy, cell_class: CellClass | str) -> float:
    """Disk weight for one class under ``strategy``."""
    cls = strategy.census.resolve(cell_class)
    n = strategy.census.counts[cls]
    n_max = strategy.census.max_count
    kind = strategy.kind
    if kind is WeightKind.RATIO:
        return n_max / n
    if kind is WeightKind.EXP1:
        return math.exp(-n / n_max)
    if kind is WeightKind.EXP2:
        return math.exp(-((n / n_max) ** 2))
    return 1.0


def background_weight(strategy: WeightStrategy) -> float:
    if strategy.kind in (WeightKind.EXP1, WeightKind.EXP2):
        return math.exp(-1.0)
    return 1.0


def _disk_windows(dots: DotAnnotationSet, radius: float) -> Iterator[tuple[int, slice, slice, np.ndarray]]:
    """Yield (dot index, row slice, col slice, squared distances) per dot.

    The window covers every lattice point that can lie within ``radius``.
    """
    reach = int(math.ceil(radius))
    for k, d in enumerate(dots.dots):
        r0 = max(int(math.floor(d.y)) - reach, 0)
        r1 = min(int(math.ceil(d.y)) + reach + 1, dots.height)
        c0 = max(int(math.floor(d.x)) - reach, 0)
        c1 = min(int(math.ceil(d.x)) + reach + 1, dots.width)
        if r0 >= r1 or c0 >= c1:
            continue
        dy = np.arange(r0, r1, dtype=np.float64)[:, None] - d.y
        dx = np.arange(c0, c1, dtype=np.float64)[None, :] - d.x
        yield k, slice(r0, r1), slice(c0, c1), dx * dx + dy * dy


def make_reference(dots: DotAnnotationSet, radius_px: float = DEFAULT_RADIUS_PX) -> np.ndarray:
    """Binary (height, width) uint8 map: 1 where the nearest dot is closer than ``radius_px``."""
    if not radius_px > 0:
        raise ValueError(f"radius_px must be > 0, got {radius_px}")
    ref = np.zeros((dots.height, dots.width), dtype=np.uint8)
    r2 = float(radius_px) ** 2
    for _, rows, cols, d2 in _disk_windows(dots, radius_px):
        ref[rows, cols] |= (d2 < r2).astype(np.uint8)
    return ref


def make_weight(dots: DotAnnotationSet, strategy: WeightStrategy) -> np.ndarray:
    """Float32 (height, width) weight map.

    Pixels inside a disk take the weight of the nearest dot's class; on
    exact distance ties the larger weight wins.
    """
    weights = strategy.class_weights()
    by_class = {}
    for c in dots.classes():
        try:
            by_class[c] = weights[strategy.census.resolve(c)]
        except KeyError:
            raise KeyError(f"dots contain class {c.name!r} missing from the census") from None

    out = np.full((dots.height, dots.width), background_weight(strategy), dtype=np.float64)
    best = np.full((dots.height, dots.width), np.inf)
    r2 = float(strategy.radius_px) ** 2
    for k, rows, cols, d2 in _disk_windows(dots, strategy.radius_px):
        w = by_class[dots.dots[k].cell_class]
        cur_d, cur_w = best[rows, cols], out[rows, cols]
        take = (d2 < r2) & ((d2 < cur_d) | ((d2 == cur_d) & (w > cur_w)))
        cur_d[take] = d2[take]
        cur_w[take] = w
    return out.astype(np.float32)


@dataclass
class TrainingSample:
    """Aligned (image, reference, weight) patch; ``row``/``col`` are the top-left pixel."""

    image: np.ndarray
    reference: np.ndarray
    weight: np.ndarray
    row: int = 0
    col: int = 0
    region_id: str = ""

    def __post_init__(self):
        hw = self.image.shape[:2]
        if self.reference.shape != hw or self.weight.shape != hw:
            raise ValueError(
                f"misaligned sample: image {self.image.shape}, reference "
                f"{self.reference.shape}, weight {self.weight.shape}"
            )


def patch_origins(length: int, patch_size: int, stride: int) -> list[int]:
    n = max(math.ceil((length - patch_size) / stride), 0) + 1
    return [i * stride for i in range(n)]


def extract_patches(
    image: np.ndarray,
    reference: np.ndarray,
    weight: np.ndarray,
    patch_size: int = DEFAULT_PATCH_SIZE,
    stride: int | None = None,
    region_id: str = "",
) -> list[TrainingSample]:
    """Cut aligned patches covering the whole region, row-major.

    Patches running past the region edge are zero-padded; padded pixels get
    weight 0 so they never contribute to the loss.
    """
    stride = patch_size if stride is None else stride
    if stride <= 0 or patch_size <= 0:
        raise ValueError("patch_size and stride must be positive")
    h, w = image.shape[:2]
    if reference.shape != (h, w) or weight.shape != (h, w):
        raise ValueError("image, reference and weight must share height and width")

    samples = []
    for r in patch_origins(h, patch_size, stride):
        for c in patch_origins(w, patch_size, stride):
            img = np.zeros((patch_size, patch_size) + image.shape[2:], dtype=image.dtype)
            ref = np.zeros((patch_size, patch_size), dtype=np.uint8)
            wt = np.zeros((patch_size, patch_size), dtype=np.float32)
            ph, pw = min(patch_size, h - r), min(patch_size, w - c)
            img[:ph, :pw] = image[r : r + ph, c : c + pw]
            ref[:ph, :pw] = reference[r : r + ph, c : c + pw]
            wt[:ph, :pw] = weight[r : r + ph, c : c + pw]
            samples.append(TrainingSample(img, ref, wt, r, c, region_id))
    return samples


# On-disk layout: <root>/<region_id>/patch_<row>_<col>.{img,ref,w}; each file
# is a single array in NumPy .npy format (img float32 HxWx3, ref uint8, w float32).
SAMPLE_SUFFIXES = ("img", "ref", "w")


def write_samples(samples: list[TrainingSample], root: str | Path) -> list[Path]:
    root = Path(root)
    written = []
    for s in samples:
        d = root / s.region_id
        d.mkdir(parents=True, exist_ok=True)
        stem = f"patch_{s.row}_{s.col}"
        arrays = (
            s.image.astype(np.float32),
            s.reference.astype(np.uint8),
            s.weight.astype(np.float32),
        )
        for suffix, arr in zip(SAMPLE_SUFFIXES, arrays):
            path = d / f"{stem}.{suffix}"
            with open(path, "wb") as fh:
                np.save(fh, arr, allow_pickle=False)
            written.append(path)
    return written


def read_samples(root: str | Path) -> list[TrainingSample]:
    """Load every sample under ``root``, sorted by region then row-major."""
    root = Path(root)
    found = []
    for img_path in root.glob("*/patch_*_*.img"):
        _, row, col = img_path.name[: -len(".img")].split("_")
        found.append((img_path.parent.name, int(row), int(col), img_path))
    samples = []
    for region_id, row, col, img_path in sorted(found):
        stem = img_path.with_suffix("")
        arrays = []
        for suffix in SAMPLE_SUFFIXES:
            with open(f"{stem}.{suffix}", "rb") as fh:
                arrays.append(np.load(fh, allow_pickle=False))
        samples.append(TrainingSample(*arrays, row=row, col=col, region_id=region_id))
    return samples
