"""Synthetic mIHC-like regions with exact dot ground truth.

Cells are anti-aliased coloured disks on a light, textured background.
Class identity is carried by colour only, so a colour-aware classifier can
separate classes while detection difficulty is tuned with ``noise_sigma``,
texture amplitude, radius spread and the palette's contrast against the
background.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .annotations import (
    DEFAULT_MICRON_PER_PIXEL,
    DotAnnotation,
    DotAnnotationSet,
    make_classes,
    parse_annotations,
    write_annotations,
)

# Training-set ratios of CD8+, CD4+/FOXP3-, CD4+/FOXP3+ in the bone marrow data.
MARROW_COUNTS = {"CD8+": 2244, "CD4+/FOXP3-": 997, "CD4+/FOXP3+": 243}

DEFAULT_PALETTE = {
    "CD8+": (0.80, 0.22, 0.20),
    "CD4+/FOXP3-": (0.55, 0.36, 0.18),
    "CD4+/FOXP3+": (0.18, 0.22, 0.55),
}


@dataclass(frozen=True)
class SynthConfig:
    canvas: tuple[int, int] = (256, 256)
    class_palette: dict[str, tuple[float, float, float]] = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    class_frequencies: dict[str, float] = field(default_factory=lambda: {k: float(v) for k, v in MARROW_COUNTS.items()})
    cell_radius_mean: float = 4.0
    cell_radius_sigma: float = 0.4
    cells_per_region: int = 40
    noise_sigma: float = 0.02
    color_jitter: float = 0.03
    background: tuple[float, float, float] = (0.88, 0.86, 0.84)
    texture_amplitude: float = 0.04
    texture_scale_px: float = 6.0
    min_separation_px: float | None = None  # default 2 * cell_radius_mean
    seed: int = 0
    region_id: str = "region_000"
    micron_per_pixel: float = DEFAULT_MICRON_PER_PIXEL

    def __post_init__(self):
        object.__setattr__(self, "canvas", tuple(self.canvas))
        if set(self.class_palette) != set(self.class_frequencies):
            raise ValueError("class_palette and class_frequencies must name the same classes")
        if any(f <= 0 for f in self.class_frequencies.values()):
            raise ValueError("class frequencies must be positive")
        colors = [tuple(c) for c in self.class_palette.values()]
        if len(set(colors)) != len(colors):
            raise ValueError("palette colours must be pairwise distinct")
        if self.cells_per_region < 0 or self.cell_radius_mean <= 0:
            raise ValueError("cells_per_region must be >= 0 and cell_radius_mean > 0")
        if self.min_separation_px is not None and self.min_separation_px < 2 * self.cell_radius_mean:
            raise ValueError("min_separation_px must be at least 2 * cell_radius_mean")

    @property
    def class_names(self) -> list[str]:
        return list(self.class_frequencies)


def _sample_centers(rng, n, radii, height, width, min_sep, max_tries=2000):
    centers = np.zeros((n, 2))
    for i in range(n):
        margin = radii[i] + 1.0
        if width - 1 - 2 * margin <= 0 or height - 1 - 2 * margin <= 0:
            raise ValueError(f"canvas {height}x{width} too small for cells of radius {radii[i]:.1f}")
        for _ in range(max_tries):
            x = rng.uniform(margin, width - 1 - margin)
            y = rng.uniform(margin, height - 1 - margin)
            if i == 0 or np.min(np.hypot(centers[:i, 0] - x, centers[:i, 1] - y)) >= min_sep:
                centers[i] = (x, y)
                break
        else:
            raise ValueError(
                f"canvas {height}x{width} too small to place {n} cells "
                f"{min_sep:.1f} px apart (placed {i})"
            )
    return centers


def generate_region(cfg: SynthConfig) -> tuple[np.ndarray, DotAnnotationSet]:
    """Render one region; returns a float32 (H, W, 3) image in [0, 1] and its dots."""
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.canvas
    classes = make_classes(cfg.class_names)
    freqs = np.array([cfg.class_frequencies[c.name] for c in classes], dtype=np.float64)

    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), cfg.texture_scale_px)
    texture /= texture.std() + 1e-12
    image = np.asarray(cfg.background, dtype=np.float64)[None, None, :] + cfg.texture_amplitude * texture[..., None]

    n = cfg.cells_per_region
    labels = rng.choice(len(classes), size=n, p=freqs / freqs.sum())
    radii = np.maximum(rng.normal(cfg.cell_radius_mean, cfg.cell_radius_sigma, size=n), 1.5)
    min_sep = cfg.min_separation_px if cfg.min_separation_px is not None else 2 * cfg.cell_radius_mean
    centers = _sample_centers(rng, n, radii, h, w, min_sep)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dots = []
    for (x, y), radius, k in zip(centers, radii, labels):
        color = np.asarray(cfg.class_palette[classes[k].name]) + rng.normal(0, cfg.color_jitter, 3)
        r0, r1 = int(y - radius - 2), int(y + radius + 3)
        c0, c1 = int(x - radius - 2), int(x + radius + 3)
        dist = np.hypot(xx[r0:r1, c0:c1] - x, yy[r0:r1, c0:c1] - y)
        alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)[..., None]
        image[r0:r1, c0:c1] = (1 - alpha) * image[r0:r1, c0:c1] + alpha * color
        dots.append(DotAnnotation(float(x), float(y), classes[k]))

    image += rng.normal(0, cfg.noise_sigma, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return image, DotAnnotationSet(cfg.region_id, w, h, tuple(dots), cfg.micron_per_pixel)


def generate_dataset(
    cfg: SynthConfig, n_regions: int, prefix: str = "region"
) -> list[tuple[np.ndarray, DotAnnotationSet]]:
    """``n_regions`` independent regions with seeds spawned from ``cfg.seed``."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(n_regions)
    return [
        generate_region(replace(cfg, seed=int(s), region_id=f"{prefix}_{i:03d}"))
        for i, s in enumerate(seeds)
    ]


def write_region(out_dir: str | Path, image: np.ndarray, dots: DotAnnotationSet) -> Path:
    """Write ``<id>.npy`` (image), ``<id>.csv`` and ``<id>.json`` (annotations)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{dots.region_id}.npy", "wb") as fh:
        np.save(fh, image.astype(np.float32), allow_pickle=False)
    return write_annotations(dots, out_dir / f"{dots.region_id}.csv")


def read_region(csv_path: str | Path, schema) -> tuple[np.ndarray, DotAnnotationSet]:
    csv_path = Path(csv_path)
    dots = parse_annotations(csv_path, schema)
    image = np.load(csv_path.with_suffix(".npy"), allow_pickle=False)
    if image.shape[:2] != (dots.height, dots.width):
        raise ValueError(f"{csv_path}: image {image.shape[:2]} does not match metadata {dots.height}x{dots.width}")
    return image, dots
