import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossover.patches import (
    PatchExtractor, SampleSet, SamplerConfig, boundary_distance, boundary_pixels, exterior_band_density,
    extract_crossover, sample_training_centers, thin_sequence,
)


def disk(n=20, r=8):
    rr, cc = np.indices((n, n))
    return (rr - n // 2) ** 2 + (cc - n // 2) ** 2 <= r * r


def test_constant_image_blocks():
    img = np.full((200, 200), 0.7)
    p = extract_crossover(img, (100, 100), 100, 20)
    assert p.vertical.shape == (100, 20) and p.horizontal.shape == (20, 100)
    assert (p.vertical == 0.7).all() and (p.horizontal == 0.7).all()


def test_corner_zero_fill():
    img = np.ones((50, 50))
    p = extract_crossover(img, (0, 0), 100, 20)
    # vertical block starts 50 rows and 10 cols before the center
    assert (p.vertical[:50] == 0).all() and (p.vertical[:, :10] == 0).all()
    assert (p.vertical[50:, 10:] == 1).all()
    assert (p.horizontal[:10] == 0).all() and (p.horizontal[:, :50] == 0).all()


def test_even_extent_centering():
    img = np.arange(300 * 300, dtype=float).reshape(300, 300)
    p = extract_crossover(img, (150, 150), 100, 20)
    # center is the (n/2 + 1)-th pixel of each even-length block, 1-based
    assert p.vertical[50, 10] == img[150, 150]
    assert p.horizontal[10, 50] == img[150, 150]


def test_outside_center_rejected():
    with pytest.raises(ValueError):
        extract_crossover(np.zeros((5, 5)), (5, 0), 4, 2)
    with pytest.raises(ValueError):
        extract_crossover(np.zeros((5, 5)), (1, 1), 2, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(3, 40), st.integers(1, 12))
def test_overlap_consistency_and_zero_fill(seed, L, S):
    if S >= L:
        S = L - 1
    rng = np.random.default_rng(seed)
    h, w = int(rng.integers(1, 60)), int(rng.integers(1, 60))
    img = rng.random((h, w))
    c = (int(rng.integers(0, h)), int(rng.integers(0, w)))
    p = extract_crossover(img, c, L, S)
    ov, oh = p.overlap()
    np.testing.assert_array_equal(ov, oh)
    # re-embed the vertical block on a zero canvas and read the image region back
    canvas = np.zeros((h + 2 * L, w + 2 * L))
    top, left = c[0] - L // 2 + L, c[1] - S // 2 + L
    canvas[top:top + L, left:left + S] = p.vertical
    region = canvas[L:L + h, L:L + w]
    inside = np.zeros((h, w), dtype=bool)
    inside[max(c[0] - L // 2, 0):c[0] - L // 2 + L, max(c[1] - S // 2, 0):c[1] - S // 2 + S] = True
    np.testing.assert_array_equal(region[inside], img[inside])
    ext = PatchExtractor(img, L, S)
    v, hz = ext.extract(np.array([c]))
    np.testing.assert_array_equal(v[0, 0], p.vertical)
    np.testing.assert_array_equal(hz[0, 0], p.horizontal)


def test_square_extraction_centered():
    img = np.random.default_rng(0).random((30, 30))
    ext = PatchExtractor(img, 20, 4)
    sq = ext.extract_square(np.array([[15, 15]]), 6)[0, 0]
    np.testing.assert_array_equal(sq, img[12:18, 12:18])


def test_boundary_band_complete():
    mask = disk()
    s = sample_training_centers(mask, SamplerConfig(boundary_band=2))
    d = boundary_distance(mask)
    chosen = np.zeros_like(mask)
    chosen[s.rows, s.cols] = True
    assert chosen[d <= 2].all()
    assert (s.labels == mask[s.rows, s.cols]).all()


def test_exterior_density_non_increasing():
    mask = np.zeros((80, 80), dtype=bool)
    mask[35:45, 30:50] = True
    for cfg in (SamplerConfig(2), SamplerConfig(3), SamplerConfig(1, 4, 16)):
        s = sample_training_centers(mask, cfg)
        dens = exterior_band_density(mask, s, cfg.boundary_band)
        vals = [dens[k] for k in sorted(dens)]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:])), vals


def test_no_duplicates_and_inside():
    mask = disk(40, 12)
    s = sample_training_centers(mask)
    keys = set(zip(s.rows.tolist(), s.cols.tolist()))
    assert len(keys) == len(s)
    assert s.rows.min() >= 0 and s.rows.max() < 40 and s.cols.max() < 40
    assert set(s.provenance) <= {"boundary-band", "interior"} | {f"exterior-band-{k}" for k in range(1, 40)}


def test_single_class_mask_warns():
    s = sample_training_centers(np.zeros((16, 16), dtype=bool))
    assert s.warning and len(s.by_label(1)) == 0 and len(s) > 0
    s = sample_training_centers(np.ones((16, 16), dtype=bool))
    assert s.warning and len(s.by_label(0)) == 0


def test_sampling_deterministic_and_csv_roundtrip(tmp_path):
    mask = disk(30, 9)
    a, b = sample_training_centers(mask), sample_training_centers(mask)
    np.testing.assert_array_equal(a.centers, b.centers)
    a.to_csv(tmp_path / "s.csv")
    c = SampleSet.from_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(a.centers, c.centers)
    np.testing.assert_array_equal(a.labels, c.labels)
    assert a.provenance == c.provenance
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "row,col,label,provenance"


def test_boundary_definition():
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 1:4] = True
    b = boundary_pixels(mask)
    assert b.sum() == 8 and not b[2, 2]


@pytest.mark.parametrize("items, expected", [
    (list("abcde"), list("ace")), (["a"], ["a"]), (list(range(8)), [0, 2, 4, 6]), ([], []),
])
def test_thin_sequence(items, expected):
    assert thin_sequence(items) == expected


def test_far_exterior_still_covered():
    # a zero-count band must not silence every band beyond it
    mask = np.zeros((128, 128), dtype=bool)
    mask[50:70, 40:60] = True
    cfg = SamplerConfig()
    s = sample_training_centers(mask, cfg)
    d = boundary_distance(mask)
    n_far = int((d[~mask] > 30).sum())
    assert (d[s.rows, s.cols] > 30).sum() >= 0.5 * n_far / cfg.max_stride ** 2
