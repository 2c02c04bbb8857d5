import math

import numpy as np
import pytest
from scipy import ndimage

from crossover.dataio import (
    ImageFormatError, SyntheticSpec, decode_pgm, encode_pgm, iter_split, load_image, load_mask, read_manifest,
    save_image, save_mask, synth_generate, synth_pair, synth_sequence, write_dataset,
)


def test_pgm_header_arithmetic(tmp_path):
    (tmp_path / "a.pgm").write_bytes(b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255]))
    img = load_image(tmp_path / "a.pgm")
    np.testing.assert_allclose(img.ravel(), [0, 1 / 3, 2 / 3, 1], atol=1 / 510)


def test_pgm_comments_and_whitespace():
    raw = b"P5 # made by hand\n3 1\n# depth\n255\n" + bytes([1, 2, 3])
    assert decode_pgm(raw).tolist() == [[1, 2, 3]]


def test_zero_byte_file(tmp_path):
    (tmp_path / "e.pgm").write_bytes(b"")
    with pytest.raises(ImageFormatError, match="empty"):
        load_image(tmp_path / "e.pgm")


@pytest.mark.parametrize("raw, msg", [
    (b"P5\n4 4\n255\n" + bytes(10), "truncated PGM raster"),
    (b"P5\n4", "truncated PGM header"),
    (b"P5\n2 2\n65535\n" + bytes(8), "maxval"),
    (b"P2\n1 1\n255\n0", "unsupported"),
    (b"GIF89a", "unsupported"),
])
def test_bad_files(tmp_path, raw, msg):
    (tmp_path / "x.img").write_bytes(raw)
    with pytest.raises(ImageFormatError, match=msg):
        load_image(tmp_path / "x.img")


@pytest.mark.parametrize("ext", [".pgm", ".png"])
def test_roundtrip(tmp_path, ext):
    if ext == ".png":
        pytest.importorskip("PIL")
    pix = np.random.default_rng(0).integers(0, 256, size=(7, 9)).astype(np.uint8)
    save_image(pix / 255.0, tmp_path / f"i{ext}")
    back = load_image(tmp_path / f"i{ext}")
    np.testing.assert_array_equal(np.rint(back * 255).astype(np.uint8), pix)
    m = pix > 100
    save_mask(m, tmp_path / f"m{ext}")
    np.testing.assert_array_equal(load_mask(tmp_path / f"m{ext}"), m)


def test_encode_header():
    assert encode_pgm(np.zeros((2, 3), dtype=np.uint8)).startswith(b"P5\n3 2\n255\n")


def test_synth_deterministic():
    spec = SyntheticSpec(seed=11, distractor_count=(0, 2))
    a, b = synth_generate(spec, 3), synth_generate(spec, 3)
    for (ia, ma), (ib, mb) in zip(a, b):
        np.testing.assert_array_equal(ia, ib)
        np.testing.assert_array_equal(ma, mb)
    # pure in index: generating from an offset reproduces the same items
    np.testing.assert_array_equal(synth_generate(spec, 1, start=2)[0][0], a[2][0])


def test_degenerate_spec_is_piecewise_constant():
    spec = SyntheticSpec(blur_sigma=0.0, noise_sigma=0.0, contrast=(1.0, 1.0), texture_amplitude=0.0, seed=3)
    img, mask = synth_pair(spec, 0)
    inside, outside = np.unique(img[mask]), np.unique(img[~mask])
    assert len(inside) == 1 and len(outside) == 1 and inside[0] != outside[0]


def test_area_bounds_and_connectivity():
    spec = SyntheticSpec(seed=5)
    rmin, rmax = spec.radius
    four = ndimage.generate_binary_structure(2, 1)
    for img, mask in synth_generate(spec, 100):
        assert math.pi * rmin ** 2 * 0.5 <= mask.sum() <= math.pi * rmax ** 2 * 2
        assert ndimage.label(mask, structure=four)[1] == 1
        assert img.min() >= 0 and img.max() <= 1


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(radius=(2, 5))
    with pytest.raises(ValueError):
        SyntheticSpec(blur_sigma=-1)


def test_distractors_outside_mask():
    spec = SyntheticSpec(seed=7, distractor_count=(2, 2), contrast=(0.4, 0.4), noise_sigma=0, texture_amplitude=0)
    img, mask = synth_pair(spec, 1)
    # bright pixels outside the ground truth exist (the bars)
    assert (img[~mask] > img[~mask].min() + 0.3).sum() > 100


def test_sequence_frames():
    frames = synth_sequence(SyntheticSpec(seed=1), 4)
    assert len(frames) == 4 and all(m.any() for _, m in frames)
    assert not np.array_equal(frames[0][1], frames[3][1])


def test_dataset_manifest(tmp_path):
    pairs = synth_generate(SyntheticSpec(height=32, width=32, radius=(4, 8), seed=2), 3)
    manifest = write_dataset(tmp_path, pairs, ["train", "train", "test"])
    assert manifest.read_text().splitlines()[0] == "image_path,mask_path,split"
    assert [e.split for e in read_manifest(manifest)] == ["train", "train", "test"]
    (stem, img, mask), = list(iter_split(manifest, "test"))
    assert stem == "img_0002"
    np.testing.assert_array_equal(mask, pairs[2][1])
    assert np.abs(img - pairs[2][0]).max() <= 1 / 510 + 1e-12
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "bad.csv")
