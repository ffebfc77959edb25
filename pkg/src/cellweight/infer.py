"""Tiled detector inference, probability-map peak extraction and cell classification."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .annotations import CellClass, DotAnnotationSet

CLASSIFIER_PATCH = 28


@dataclass
class ProbabilityMap:
    pixels: np.ndarray
    region_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2:
            raise ValueError(f"probability map must be 2-D, got shape {self.pixels.shape}")


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    confidence: float
    cell_class: CellClass | None = None
    class_probability: float | None = None


@dataclass
class DetectionResult:
    centers: list[Detection] = field(default_factory=list)
    region_id: str = ""

    def __len__(self) -> int:
        return len(self.centers)

    def points(self) -> np.ndarray:
        if not self.centers:
            return np.zeros((0, 2))
        return np.array([(d.x, d.y) for d in self.centers], dtype=np.float64)


def _tile_origins(length: int, tile: int, overlap: int) -> list[int]:
    if length <= tile:
        return [0]
    step = tile - overlap
    starts = list(range(0, length - tile, step))
    starts.append(length - tile)
    return starts


def predict_map(
    model: Callable[[torch.Tensor], torch.Tensor],
    image: np.ndarray,
    tile: int = 256,
    overlap: int = 0,
    region_id: str = "",
    batch_size: int = 8,
) -> ProbabilityMap:
    """Run ``model`` over an (H, W, 3) region tile by tile.

    Tiles advance by ``tile - overlap`` and the last row/column of tiles is
    aligned to the region edge; overlapping predictions are averaged.
    Regions smaller than ``tile`` are zero-padded and the output cropped.
    """
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must be in [0, tile), got {overlap}")
    h, w = image.shape[:2]
    ph, pw = max(h, tile), max(w, tile)
    padded = np.zeros((ph, pw, image.shape[2]), dtype=np.float32)
    padded[:h, :w] = image

    acc = np.zeros((ph, pw), dtype=np.float64)
    hits = np.zeros((ph, pw), dtype=np.float64)
    origins = [(r, c) for r in _tile_origins(ph, tile, overlap) for c in _tile_origins(pw, tile, overlap)]
    if isinstance(model, torch.nn.Module):
        model.eval()
    with torch.no_grad():
        for i in range(0, len(origins), batch_size):
            chunk = origins[i : i + batch_size]
            x = torch.from_numpy(np.stack([padded[r : r + tile, c : c + tile] for r, c in chunk]))
            y = model(x).detach().cpu().numpy()[..., 0]
            for (r, c), p in zip(chunk, y):
                acc[r : r + tile, c : c + tile] += p
                hits[r : r + tile, c : c + tile] += 1
    return ProbabilityMap((acc / hits)[:h, :w], region_id)


def extract_centers(
    prob: ProbabilityMap,
    threshold: float = 0.5,
    min_distance: float = 5.0,
) -> DetectionResult:
    """Cell centres from a probability map.

    Pixels ``>= threshold`` are grouped into 8-connected components;
    components whose centroids are closer than ``min_distance`` are merged
    (single linkage). Each centre is the centroid of its group, moved to the
    nearest member pixel if the centroid falls on a sub-threshold pixel.
    Confidence is the group's peak probability.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    p = prob.pixels
    labels, n = ndimage.label(p >= threshold, structure=np.ones((3, 3)))
    if n == 0:
        return DetectionResult([], prob.region_id)

    idx = np.arange(1, n + 1)
    centroids = np.array(ndimage.center_of_mass(np.ones_like(p), labels, idx))  # (row, col)
    sizes = ndimage.sum_labels(np.ones_like(p), labels, idx)
    peaks = ndimage.maximum(p, labels, idx)

    group = np.arange(n)
    if min_distance > 0 and n > 1:
        pairs = cKDTree(centroids).query_pairs(min_distance, output_type="ndarray")
        pairs = pairs[np.hypot(*(centroids[pairs[:, 0]] - centroids[pairs[:, 1]]).T) < min_distance]
        adj = np.zeros((n, n), dtype=bool)
        adj[pairs[:, 0], pairs[:, 1]] = True
        _, group = connected_components(adj, directed=False)

    centers = []
    for g in np.unique(group):
        members = np.flatnonzero(group == g)
        wsum = sizes[members].sum()
        cy, cx = (centroids[members] * sizes[members, None]).sum(axis=0) / wsum
        ry, rx = int(round(cy)), int(round(cx))
        if not (0 <= ry < p.shape[0] and 0 <= rx < p.shape[1]) or p[ry, rx] < threshold:
            rows, cols = np.nonzero(np.isin(labels, members + 1))
            k = np.argmin((rows - cy) ** 2 + (cols - cx) ** 2)
            cy, cx = float(rows[k]), float(cols[k])
        centers.append(Detection(float(cx), float(cy), float(peaks[members].max())))
    centers.sort(key=lambda d: (d.y, d.x))
    return DetectionResult(centers, prob.region_id)


def crop_cells(image: np.ndarray, points: np.ndarray, size: int = CLASSIFIER_PATCH) -> np.ndarray:
    """(n, size, size, C) crops centred on rounded (x, y) points, zero-padded at borders."""
    half = size // 2
    padded = np.pad(image, ((half, half), (half, half), (0, 0)))
    out = np.zeros((len(points), size, size, image.shape[2]), dtype=np.float32)
    for i, (x, y) in enumerate(points):
        r, c = int(round(y)), int(round(x))
        out[i] = padded[r : r + size, c : c + size]
    return out


def annotated_crops(
    regions: Sequence[tuple[np.ndarray, DotAnnotationSet]], size: int = CLASSIFIER_PATCH
) -> tuple[np.ndarray, np.ndarray]:
    """Classifier training data: one crop per annotated dot and its class index."""
    crops = [crop_cells(image, dots.points(), size) for image, dots in regions]
    labels = [dots.labels() for _, dots in regions]
    channels = regions[0][0].shape[2] if regions else 3
    if not crops:
        return np.zeros((0, size, size, channels), np.float32), np.zeros(0, np.int64)
    return np.concatenate(crops), np.concatenate(labels).astype(np.int64)


def classify_cells(
    classifier: Callable[[torch.Tensor], torch.Tensor],
    image: np.ndarray,
    detections: DetectionResult,
    classes: Sequence[CellClass],
    batch_size: int = 256,
) -> DetectionResult:
    """Label each detection with the classifier's argmax class and its probability."""
    if not detections.centers:
        return DetectionResult([], detections.region_id)
    crops = crop_cells(image, detections.points())
    if isinstance(classifier, torch.nn.Module):
        classifier.eval()
    probs = []
    with torch.no_grad():
        for i in range(0, len(crops), batch_size):
            probs.append(classifier(torch.from_numpy(crops[i : i + batch_size])).cpu().numpy())
    probs = np.concatenate(probs)
    labeled = [
        replace(d, cell_class=classes[int(k)], class_probability=float(row[k]))
        for d, row, k in zip(detections.centers, probs, probs.argmax(axis=1))
    ]
    return DetectionResult(labeled, detections.region_id)


def detections_from_annotations(dots: DotAnnotationSet) -> DetectionResult:
    """Treat annotated dots as unlabeled detections (to classify at ground-truth positions)."""
    return DetectionResult([Detection(d.x, d.y, 1.0) for d in dots.dots], dots.region_id)


def write_detections(result: DetectionResult, path: str | Path) -> Path:
    """CSV ``x,y,confidence,class``; class is empty for unclassified detections."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "confidence", "class"])
        for d in result.centers:
            w.writerow([repr(d.x), repr(d.y), repr(d.confidence), d.cell_class.name if d.cell_class else ""])
    return path


def read_detections(path: str | Path, classes: Sequence[CellClass]) -> DetectionResult:
    lookup = {c.name: c for c in classes}
    centers = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            name = row["class"].strip()
            if name and name not in lookup:
                raise ValueError(f"{path}:{reader.line_num}: unknown class {name!r}")
            centers.append(Detection(float(row["x"]), float(row["y"]), float(row["confidence"]), lookup.get(name)))
    return DetectionResult(centers, Path(path).stem)
