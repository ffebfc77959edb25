"""Dot annotations: parsing, validation, class census and region splits.

Annotation files are UTF-8 CSV with a required ``x,y,class`` header, one
row per annotated cell centre. Each CSV has a JSON sidecar with the same
stem (``region.csv`` + ``region.json``) holding ``region_id``, ``width``,
``height`` and ``micron_per_pixel``.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_MICRON_PER_PIXEL = 0.442
CSV_HEADER = ("x", "y", "class")


class AnnotationError(Exception):
    """Base class for annotation problems."""


class AnnotationParseError(AnnotationError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class AnnotationValidationError(AnnotationError):
    pass


class AnnotationSchemaError(AnnotationError):
    pass


@dataclass(frozen=True)
class CellClass:
    name: str
    index: int

    def __str__(self) -> str:
        return self.name


def make_classes(names: Sequence[str]) -> list[CellClass]:
    """Build an ordered class list from names; index follows list order."""
    if len(set(names)) != len(names):
        raise AnnotationSchemaError(f"duplicate class names in schema: {list(names)}")
    return [CellClass(n, i) for i, n in enumerate(names)]


@dataclass(frozen=True)
class DotAnnotation:
    x: float
    y: float
    cell_class: CellClass


@dataclass(frozen=True)
class DotAnnotationSet:
    region_id: str
    width: int
    height: int
    dots: tuple[DotAnnotation, ...] = ()
    micron_per_pixel: float = DEFAULT_MICRON_PER_PIXEL

    def __post_init__(self):
        object.__setattr__(self, "dots", tuple(self.dots))
        if self.width <= 0 or self.height <= 0:
            raise AnnotationValidationError(
                f"region {self.region_id!r}: width/height must be positive, "
                f"got {self.width}x{self.height}"
            )
        if not self.micron_per_pixel > 0:
            raise AnnotationValidationError(
                f"region {self.region_id!r}: micron_per_pixel must be > 0"
            )
        for d in self.dots:
            if not (0 <= d.x < self.width and 0 <= d.y < self.height):
                raise AnnotationValidationError(
                    f"region {self.region_id!r}: dot ({d.x}, {d.y}) outside "
                    f"{self.width}x{self.height}"
                )

    def __len__(self) -> int:
        return len(self.dots)

    def points(self) -> np.ndarray:
        """(n, 2) array of (x, y)."""
        if not self.dots:
            return np.zeros((0, 2))
        return np.array([(d.x, d.y) for d in self.dots], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([d.cell_class.index for d in self.dots], dtype=np.int64)

    def classes(self) -> set[CellClass]:
        return {d.cell_class for d in self.dots}

    def px_to_micron(self, px: float) -> float:
        return px * self.micron_per_pixel

    def micron_to_px(self, um: float) -> float:
        return um / self.micron_per_pixel


@dataclass(frozen=True)
class ClassCensus:
    counts: dict[CellClass, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.counts:
            raise AnnotationValidationError("census has no classes")
        for c, n in self.counts.items():
            if n < 1:
                raise AnnotationValidationError(
                    f"class {c.name!r} has {n} training examples; every class needs at least one"
                )

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def max_count(self) -> int:
        return max(self.counts.values())

    @property
    def classes(self) -> list[CellClass]:
        return sorted(self.counts, key=lambda c: c.index)

    def resolve(self, cell_class: CellClass | str) -> CellClass:
        """Look a class up by object or by name."""
        for c in self.counts:
            if c == cell_class or c.name == cell_class:
                return c
        name = getattr(cell_class, "name", cell_class)
        raise KeyError(f"class {name!r} not in census")

    def __getitem__(self, cell_class: CellClass | str) -> int:
        return self.counts[self.resolve(cell_class)]

    def rarest(self) -> CellClass:
        return min(self.counts, key=lambda c: (self.counts[c], c.index))

    @classmethod
    def from_names(cls, counts: dict[str, int]) -> "ClassCensus":
        classes = make_classes(list(counts))
        return cls({c: counts[c.name] for c in classes})


def _schema_lookup(schema: Sequence[str] | Sequence[CellClass]) -> dict[str, CellClass]:
    classes = [c if isinstance(c, CellClass) else None for c in schema]
    if all(c is not None for c in classes):
        return {c.name: c for c in classes}
    return {c.name: c for c in make_classes([str(s) for s in schema])}


def metadata_path(csv_path: str | Path) -> Path:
    return Path(csv_path).with_suffix(".json")


def read_metadata(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        meta = json.load(fh)
    missing = {"region_id", "width", "height"} - set(meta)
    if missing:
        raise AnnotationValidationError(f"{path}: metadata missing keys {sorted(missing)}")
    unknown = set(meta) - {"region_id", "width", "height", "micron_per_pixel"}
    if unknown:
        raise AnnotationValidationError(f"{path}: unknown metadata keys {sorted(unknown)}")
    meta.setdefault("micron_per_pixel", DEFAULT_MICRON_PER_PIXEL)
    return meta


def parse_annotations(
    path: str | Path,
    schema: Sequence[str] | Sequence[CellClass],
    metadata: dict | None = None,
) -> DotAnnotationSet:
    """Read one region's dot annotations.

    ``metadata`` defaults to the JSON sidecar next to ``path``.
    """
    path = Path(path)
    lookup = _schema_lookup(schema)
    if metadata is None:
        metadata = read_metadata(metadata_path(path))

    dots = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise AnnotationParseError(path, 1, f"expected header {','.join(CSV_HEADER)!r}, got {header!r}")
        for row in reader:
            line = reader.line_num
            if not row or all(not v.strip() for v in row):
                continue
            if len(row) != 3:
                raise AnnotationParseError(path, line, f"expected 3 fields, got {len(row)}")
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError as exc:
                raise AnnotationParseError(path, line, str(exc)) from None
            if not (math.isfinite(x) and math.isfinite(y)):
                raise AnnotationParseError(path, line, "non-finite coordinate")
            name = row[2].strip()
            if name not in lookup:
                raise AnnotationSchemaError(
                    f"{path}:{line}: unknown class {name!r}; schema is {sorted(lookup)}"
                )
            dots.append(DotAnnotation(x, y, lookup[name]))

    return DotAnnotationSet(
        region_id=str(metadata["region_id"]),
        width=int(metadata["width"]),
        height=int(metadata["height"]),
        dots=tuple(dots),
        micron_per_pixel=float(metadata.get("micron_per_pixel", DEFAULT_MICRON_PER_PIXEL)),
    )


def write_annotations(dots: DotAnnotationSet, path: str | Path) -> Path:
    """Write CSV plus JSON sidecar. Coordinates use repr() so they round-trip."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for d in dots.dots:
            w.writerow([repr(float(d.x)), repr(float(d.y)), d.cell_class.name])
    meta = {
        "region_id": dots.region_id,
        "width": dots.width,
        "height": dots.height,
        "micron_per_pixel": dots.micron_per_pixel,
    }
    with open(metadata_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def census(
    sets: Iterable[DotAnnotationSet],
    classes: Sequence[CellClass] | None = None,
) -> ClassCensus:
    """Count dots per class over all sets.

    With ``classes`` given, every listed class must occur at least once.
    """
    counter: Counter[CellClass] = Counter()
    for s in sets:
        counter.update(d.cell_class for d in s.dots)
    if not counter:
        raise AnnotationValidationError("census needs at least one annotated dot")
    if classes is not None:
        missing = [c.name for c in classes if counter[c] == 0]
        if missing:
            raise AnnotationValidationError(f"classes with zero annotated dots: {missing}")
        extra = set(counter) - set(classes)
        if extra:
            raise AnnotationSchemaError(f"dots of classes outside schema: {sorted(c.name for c in extra)}")
    return ClassCensus(dict(sorted(counter.items(), key=lambda kv: kv[0].index)))


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation; every nonzero fraction gets at least one item."""
    raw = [f * n for f in fractions]
    sizes = [math.floor(r + 1e-9) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    for i, f in enumerate(fractions):
        if f > 0 and sizes[i] == 0:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def split_regions(
    sets: Sequence[DotAnnotationSet],
    fractions: Sequence[float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> tuple[list[DotAnnotationSet], list[DotAnnotationSet], list[DotAnnotationSet]]:
    """Split whole regions (never individual dots) into train/val/test."""
    if len(fractions) != 3:
        raise ValueError("fractions must be (train, val, test)")
    if any(f < 0 for f in fractions):
        raise ValueError(f"negative split fraction in {fractions}")
    total = sum(fractions)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {total}")
    nonzero = sum(1 for f in fractions if f > 0)
    if len(sets) < nonzero:
        raise ValueError(f"{len(sets)} regions cannot fill {nonzero} nonzero splits")

    order = np.random.default_rng(seed).permutation(len(sets))
    sizes = _allocate(len(sets), fractions)
    out, start = [], 0
    for size in sizes:
        out.append([sets[i] for i in order[start : start + size]])
        start += size
    return out[0], out[1], out[2]
