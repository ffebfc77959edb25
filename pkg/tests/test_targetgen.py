import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellweight.annotations import ClassCensus, DotAnnotation, DotAnnotationSet, make_classes
from cellweight.targetgen import (
    TrainingSample,
    WeightKind,
    WeightStrategy,
    background_weight,
    class_weight,
    extract_patches,
    make_reference,
    make_weight,
    read_samples,
    write_samples,
)

from conftest import NAMES

# exp/ratio closed forms on the 2244/997/243 census, evaluated with mpmath at 30 digits
RATIO = [1.0, 2.25075225677031093279839518555672, 9.23456790123456790123456790123389]
EXP1 = [0.367879441171442321595523770161445, 0.64127563917455101324797950830018, 0.897368425883559502792646279179923]
EXP2 = [0.367879441171442321595523770161445, 0.820863169270119186624663132956235, 0.988342029221163178721121471109133]

SCALE = 8  # oracle dots live on a 1/8 px grid so squared distances are exact integers


def disk_lattice_count(r):
    reach = math.ceil(r)
    return sum(1 for dx in range(-reach, reach + 1) for dy in range(-reach, reach + 1) if dx * dx + dy * dy < r * r)


def oracle_nearest(dots, width, height, r):
    """Per pixel: list of (scaled squared distance, dot index) for all dots within r. Pure integer arithmetic."""
    lim = (SCALE * r) ** 2
    scaled = [(round(d.x * SCALE), round(d.y * SCALE)) for d in dots]
    out = {}
    for i in range(height):
        for j in range(width):
            hits = []
            for k, (X, Y) in enumerate(scaled):
                d2 = (SCALE * j - X) ** 2 + (SCALE * i - Y) ** 2
                if d2 < lim:
                    hits.append((d2, k))
            out[i, j] = hits
    return out


def oracle_reference(dots, width, height, r):
    near = oracle_nearest(dots, width, height, r)
    ref = np.zeros((height, width), dtype=np.uint8)
    for (i, j), hits in near.items():
        ref[i, j] = bool(hits)
    return ref


def oracle_weight(dots, width, height, strategy):
    near = oracle_nearest(dots, width, height, strategy.radius_px)
    w = np.full((height, width), background_weight(strategy))
    for (i, j), hits in near.items():
        if hits:
            dmin = min(h[0] for h in hits)
            w[i, j] = max(class_weight(strategy, dots[k].cell_class) for d2, k in hits if d2 == dmin)
    return w.astype(np.float32)


def random_dots(rng, classes, n, size=64):
    xs = rng.integers(0, size * SCALE, n) / SCALE
    ys = rng.integers(0, size * SCALE, n) / SCALE
    labels = rng.integers(0, len(classes), n)
    return DotAnnotationSet("rand", size, size, tuple(DotAnnotation(float(x), float(y), classes[k]) for x, y, k in zip(xs, ys, labels)))


def test_single_dot_is_45_pixels():
    classes = make_classes(NAMES)
    ref = make_reference(DotAnnotationSet("a", 32, 32, (DotAnnotation(10, 10, classes[0]),)), 4)
    assert disk_lattice_count(4) == 45
    assert ref.sum() == 45
    assert ref.dtype == np.uint8
    ii, jj = np.nonzero(ref)
    assert np.all((ii - 10) ** 2 + (jj - 10) ** 2 < 16)


def test_no_dots_reference_is_zero():
    assert not make_reference(DotAnnotationSet("a", 16, 8), 4).any()


def test_two_dots_one_apart(classes):
    dots = DotAnnotationSet("a", 32, 32, (DotAnnotation(10, 10, classes[0]), DotAnnotation(11, 10, classes[0])))
    ref = make_reference(dots, 4)
    np.testing.assert_array_equal(ref, oracle_reference(dots.dots, 32, 32, 4))
    ii, jj = np.nonzero(ref)
    assert np.all(np.minimum(np.hypot(jj - 10, ii - 10), np.hypot(jj - 11, ii - 10)) < 4)


def test_reference_clips_at_border(classes):
    ref = make_reference(DotAnnotationSet("a", 16, 16, (DotAnnotation(0, 0, classes[0]),)), 4)
    assert ref.sum() == sum(1 for dx in range(4) for dy in range(4) if dx * dx + dy * dy < 16)


@pytest.mark.parametrize("idx, name", list(enumerate(NAMES)))
def test_class_weight_closed_forms(marrow_census, idx, name):
    for kind, expected in [(WeightKind.RATIO, RATIO), (WeightKind.EXP1, EXP1), (WeightKind.EXP2, EXP2)]:
        got = class_weight(WeightStrategy(kind, marrow_census), name)
        assert got == pytest.approx(expected[idx], rel=1e-12)
    assert class_weight(WeightStrategy(WeightKind.UNWEIGHTED, marrow_census), name) == 1.0


def test_background_weights(marrow_census):
    assert background_weight(WeightStrategy("RatioWeight", marrow_census)) == 1.0
    assert background_weight(WeightStrategy("ExpWeightType1", marrow_census)) == pytest.approx(0.367879, abs=1e-6)
    assert background_weight(WeightStrategy("ExpWeightType2", marrow_census)) == math.exp(-1)
    assert background_weight(WeightStrategy("Unweighted", marrow_census)) == 1.0


def test_unknown_class_rejected(marrow_census):
    with pytest.raises(KeyError):
        class_weight(WeightStrategy("RatioWeight", marrow_census), "CD99+")
    other = make_classes(["X", "Y"])
    dots = DotAnnotationSet("a", 8, 8, (DotAnnotation(1, 1, other[0]),))
    with pytest.raises(KeyError):
        make_weight(dots, WeightStrategy("RatioWeight", marrow_census))


def test_bad_radius(marrow_census):
    with pytest.raises(ValueError):
        WeightStrategy("RatioWeight", marrow_census, radius_px=0)
    with pytest.raises(ValueError):
        make_reference(DotAnnotationSet("a", 4, 4), 0)


counts_st = st.lists(st.integers(1, 10_000), min_size=2, max_size=6)


@settings(max_examples=200)
@given(counts_st)
def test_weight_ordering_properties(counts):
    c = ClassCensus.from_names({f"c{i}": n for i, n in enumerate(counts)})
    n_max = max(counts)
    for kind in (WeightKind.RATIO, WeightKind.EXP1, WeightKind.EXP2):
        s = WeightStrategy(kind, c)
        w = {cls: class_weight(s, cls) for cls in c.classes}
        for a in c.classes:
            for b in c.classes:
                if c[a] < c[b]:
                    assert w[a] > w[b]
            if c[a] == n_max:
                assert w[a] == pytest.approx(1.0 if kind is WeightKind.RATIO else math.exp(-1))
                assert w[a] == pytest.approx(background_weight(s))
    e1, e2 = WeightStrategy(WeightKind.EXP1, c), WeightStrategy(WeightKind.EXP2, c)
    for cls in c.classes:
        if c[cls] == n_max:
            assert class_weight(e2, cls) == class_weight(e1, cls)
        else:
            assert class_weight(e2, cls) > class_weight(e1, cls)


def test_weight_empty_is_background(marrow_census):
    for kind in WeightKind:
        s = WeightStrategy(kind, marrow_census)
        w = make_weight(DotAnnotationSet("a", 16, 16), s)
        assert w.dtype == np.float32
        assert np.all(w == np.float32(background_weight(s)))


def test_weight_single_rare_dot(marrow_census, classes):
    s = WeightStrategy("RatioWeight", marrow_census)
    w = make_weight(DotAnnotationSet("a", 32, 32, (DotAnnotation(10, 10, classes[2]),)), s)
    disk = w != 1.0
    assert disk.sum() == 45
    np.testing.assert_allclose(w[disk], 9.234568, rtol=1e-6)


def test_weight_tie_goes_to_rarer(marrow_census, classes):
    s = WeightStrategy("RatioWeight", marrow_census)
    dots = DotAnnotationSet("a", 32, 32, (DotAnnotation(10, 10, classes[0]), DotAnnotation(12, 10, classes[2])))
    w = make_weight(dots, s)
    assert w[10, 11] == pytest.approx(RATIO[2])
    assert w[10, 10] == pytest.approx(1.0)  # on the CD8+ dot: nearest wins
    np.testing.assert_array_equal(w, oracle_weight(dots.dots, 32, 32, s))
    # order of dots must not matter
    flipped = DotAnnotationSet("a", 32, 32, dots.dots[::-1])
    np.testing.assert_array_equal(make_weight(flipped, s), w)


@pytest.mark.parametrize("kind", list(WeightKind))
def test_weight_matches_oracle_random(marrow_census, classes, kind):
    rng = np.random.default_rng(hash(kind.value) % 2**32)
    s = WeightStrategy(kind, marrow_census)
    for _ in range(8):
        dots = random_dots(rng, classes, int(rng.integers(0, 21)), size=32)
        w = make_weight(dots, s)
        np.testing.assert_array_equal(w, oracle_weight(dots.dots, 32, 32, s))
        ref = make_reference(dots, s.radius_px)
        class_values = {np.float32(v) for v in s.class_weights().values()}
        assert set(np.unique(w[ref == 1]).tolist()) <= class_values


def test_reference_matches_hypot_on_float_dots(classes):
    rng = np.random.default_rng(3)
    for _ in range(5):
        n = int(rng.integers(1, 21))
        dots = DotAnnotationSet("f", 40, 40, tuple(DotAnnotation(float(x), float(y), classes[0]) for x, y in rng.uniform(0, 39.99, (n, 2))))
        ref = make_reference(dots, 4)
        expected = np.zeros((40, 40), dtype=np.uint8)
        for i in range(40):
            for j in range(40):
                expected[i, j] = any(math.hypot(j - d.x, i - d.y) < 4 for d in dots.dots)
        np.testing.assert_array_equal(ref, expected)


def _region(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return (
        rng.random((h, w, 3)).astype(np.float32),
        (rng.random((h, w)) > 0.8).astype(np.uint8),
        rng.uniform(0.5, 2, (h, w)).astype(np.float32),
    )


@pytest.mark.parametrize("size, n", [(256, 1), (512, 4), (300, 4)])
def test_patch_counts(size, n):
    img, ref, w = _region(size, size)
    samples = extract_patches(img, ref, w, 256, 256)
    assert len(samples) == n
    assert all(s.image.shape == (256, 256, 3) and s.reference.shape == (256, 256) for s in samples)


def test_patches_reassemble_with_zero_padding():
    img, ref, w = _region(300, 300, seed=1)
    samples = extract_patches(img, ref, w, 256, 256)
    assert [(s.row, s.col) for s in samples] == [(0, 0), (0, 256), (256, 0), (256, 256)]
    canvas = np.zeros((512, 512, 3), np.float32)
    wcanvas = np.full((512, 512), -1.0, np.float32)
    for s in samples:
        canvas[s.row : s.row + 256, s.col : s.col + 256] = s.image
        wcanvas[s.row : s.row + 256, s.col : s.col + 256] = s.weight
    np.testing.assert_array_equal(canvas[:300, :300], img)
    np.testing.assert_array_equal(wcanvas[:300, :300], w)
    assert np.all(canvas[300:] == 0) and np.all(canvas[:, 300:] == 0)
    assert np.all(wcanvas[300:] == 0) and np.all(wcanvas[:, 300:] == 0)


def test_patches_overlapping_stride():
    img, ref, w = _region(128, 128)
    samples = extract_patches(img, ref, w, 64, 32)
    assert len(samples) == 9
    s = samples[4]
    np.testing.assert_array_equal(s.image, img[32:96, 32:96])


def test_misaligned_sample_rejected():
    with pytest.raises(ValueError):
        TrainingSample(np.zeros((4, 4, 3)), np.zeros((4, 5)), np.zeros((4, 4)))


def test_sample_roundtrip(tmp_path):
    img, ref, w = _region(100, 130, seed=2)
    samples = extract_patches(img, ref, w, 64, 64, region_id="reg")
    write_samples(samples, tmp_path)
    assert (tmp_path / "reg" / "patch_64_64.w").exists()
    back = read_samples(tmp_path)
    assert [(s.row, s.col) for s in back] == [(s.row, s.col) for s in samples]
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.reference, b.reference)
        np.testing.assert_array_equal(a.weight, b.weight)
        assert b.region_id == "reg"
