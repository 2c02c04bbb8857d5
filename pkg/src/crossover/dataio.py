"""Grayscale image / mask I/O and a seeded synthetic blob generator.

Images are 2D float arrays in [0, 1]; masks are boolean arrays. On disk
both are 8-bit grayscale (binary PGM, or PNG when Pillow is available),
masks stored as {0, 255}.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage


class ImageFormatError(ValueError):
    pass


# -- PGM / PNG -------------------------------------------------------------

def _pgm_tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    i = 0
    n = len(raw)
    while len(tokens) < count:
        while i < n and raw[i:i + 1].isspace():
            i += 1
        if i < n and raw[i:i + 1] == b"#":
            while i < n and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not raw[i:i + 1].isspace() and raw[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError("truncated PGM header")
        tokens.append(raw[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def decode_pgm(raw: bytes) -> np.ndarray:
    """Decode an 8-bit binary PGM (P5) to a ``uint8`` array."""
    if len(raw) < 2 or raw[:2] != b"P5":
        raise ImageFormatError("not a binary PGM (missing P5 magic)")
    (magic, w, h, maxval), offset = _pgm_tokens(raw, 4)
    try:
        width, height, mv = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad PGM extent {width}x{height}")
    if mv != 255:
        raise ImageFormatError(f"only 8-bit PGM (maxval 255) is supported, got maxval {mv}")
    body = raw[offset:offset + width * height]
    if len(body) != width * height:
        raise ImageFormatError(f"truncated PGM raster: expected {width * height} bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width).copy()


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes()


def _png_available() -> bool:
    try:
        import PIL.Image  # noqa: F401
    except ImportError:
        return False
    return True


def read_bytes8(path: str | Path, allow_png: bool = True) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        raise ImageFormatError(f"{path}: empty file")
    if raw[:2] == b"P5":
        try:
            return decode_pgm(raw)
        except ImageFormatError as exc:
            raise ImageFormatError(f"{path}: {exc}") from None
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        if not (allow_png and _png_available()):
            raise ImageFormatError(f"{path}: PNG support needs Pillow")
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "1", "P"):
                raise ImageFormatError(f"{path}: expected 8-bit grayscale PNG, got mode {im.mode}")
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    raise ImageFormatError(f"{path}: unsupported image format")


def write_bytes8(pixels: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        if not _png_available():
            raise ImageFormatError("PNG output needs Pillow")
        from PIL import Image

        Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)
        return
    path.write_bytes(encode_pgm(pixels))


def to_bytes8(image: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def load_image(path: str | Path, allow_png: bool = True) -> np.ndarray:
    """Grayscale image scaled to [0, 1]."""
    return read_bytes8(path, allow_png).astype(np.float64) / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    write_bytes8(to_bytes8(image), path)


def load_mask(path: str | Path, allow_png: bool = True) -> np.ndarray:
    return read_bytes8(path, allow_png) > 127


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    write_bytes8(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8), path)


# -- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Blob images with textured background, optional elongated distractors.

    Distractor bars share the foreground intensity but are not part of the
    ground truth; they are placed clear of every blob.
    """

    height: int = 128
    width: int = 128
    blob_count: tuple[int, int] = (1, 1)
    radius: tuple[float, float] = (10.0, 22.0)
    eccentricity: float = 0.3
    wobble: float = 0.08
    blur_sigma: float = 1.0
    contrast: tuple[float, float] = (0.25, 0.45)
    background: tuple[float, float] = (0.2, 0.35)
    texture_amplitude: float = 0.05
    noise_sigma: float = 0.03
    distractor_count: tuple[int, int] = (0, 0)
    distractor_width: tuple[int, int] = (20, 40)
    seed: int = 0

    def __post_init__(self):
        if self.radius[0] < 3 or self.radius[1] < self.radius[0]:
            raise ValueError(f"radius range must satisfy 3 <= rmin <= rmax, got {self.radius}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigmas must be >= 0")
        if self.blob_count[0] < 1 or self.blob_count[1] < self.blob_count[0]:
            raise ValueError(f"bad blob count range {self.blob_count}")


def _rng(spec: SyntheticSpec, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, index, stream])))


def _blob_mask(shape, center, r0, ecc, tilt, harmonics) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    rho = np.hypot(dy, dx)
    phi = np.arctan2(dy, dx)
    a, b = r0 * (1.0 + ecc), r0 / (1.0 + ecc)
    t = phi - tilt
    rad = a * b / np.sqrt((b * np.cos(t)) ** 2 + (a * np.sin(t)) ** 2)
    for k, amp, ph in harmonics:
        rad = rad * (1.0 + amp * np.cos(k * phi + ph))
    mask = rho <= rad
    return _largest_component(mask)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    four = ndimage.generate_binary_structure(2, 1)
    lab, n = ndimage.label(mask, structure=four)
    if n <= 1:
        return ndimage.binary_fill_holes(mask)
    sizes = ndimage.sum_labels(mask, lab, index=np.arange(1, n + 1))
    return ndimage.binary_fill_holes(lab == (int(np.argmax(sizes)) + 1))


def _texture(rng: np.random.Generator, shape, amplitude: float) -> np.ndarray:
    if amplitude == 0:
        return np.zeros(shape)
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=3.0, mode="reflect")
    sd = field.std()
    return amplitude * field / (sd if sd > 0 else 1.0)


def _place_blobs(rng: np.random.Generator, spec: SyntheticSpec, shape) -> np.ndarray:
    h, w = shape
    count = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    mask = np.zeros(shape, dtype=bool)
    placed = 0
    for _ in range(50 * count):
        if placed == count:
            break
        r0 = float(rng.uniform(*spec.radius))
        ecc = float(rng.uniform(0.0, spec.eccentricity))
        tilt = float(rng.uniform(0.0, math.pi))
        harmonics = [(k, float(rng.uniform(-spec.wobble, spec.wobble)), float(rng.uniform(0, 2 * math.pi))) for k in (2, 3, 4)]
        reach = r0 * (1.0 + ecc) * (1.0 + 3 * spec.wobble) + 2
        if 2 * reach >= min(h, w):
            reach = min(h, w) / 2 - 1
        center = (float(rng.uniform(reach, h - reach)), float(rng.uniform(reach, w - reach)))
        blob = _blob_mask(shape, center, r0, ecc, tilt, harmonics)
        if not blob.any():
            continue
        if placed and (ndimage.binary_dilation(mask, iterations=3) & blob).any():
            continue
        mask |= blob
        placed += 1
    if not mask.any():
        # degenerate fallback: a centered disk of minimal radius
        mask = _blob_mask(shape, (h / 2, w / 2), spec.radius[0], 0.0, 0.0, [])
    return mask


def _place_bars(rng: np.random.Generator, spec: SyntheticSpec, blobs: np.ndarray) -> np.ndarray:
    h, w = blobs.shape
    bars = np.zeros_like(blobs)
    count = int(rng.integers(spec.distractor_count[0], spec.distractor_count[1] + 1))
    if count == 0:
        return bars
    forbidden = ndimage.binary_dilation(blobs, iterations=4)
    for _ in range(count):
        for _attempt in range(40):
            horizontal = bool(rng.random() < 0.5)
            thick = int(rng.integers(spec.distractor_width[0], spec.distractor_width[1] + 1))
            span = w if horizontal else h
            across = h if horizontal else w
            length = int(rng.integers(int(0.7 * span), span + 1))
            if thick >= across:
                break
            a0 = int(rng.integers(0, across - thick + 1))
            s0 = int(rng.integers(0, span - length + 1))
            bar = np.zeros_like(blobs)
            if horizontal:
                bar[a0:a0 + thick, s0:s0 + length] = True
            else:
                bar[s0:s0 + length, a0:a0 + thick] = True
            if not (bar & forbidden).any():
                bars |= bar
                forbidden |= ndimage.binary_dilation(bar, iterations=2)
                break
    return bars


def synth_pair(spec: SyntheticSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Image and ground-truth mask number ``index``; pure in (spec, index)."""
    shape = (spec.height, spec.width)
    rng = _rng(spec, index)
    mask = _place_blobs(rng, spec, shape)
    bars = _place_bars(rng, spec, mask)
    return _composite(rng, spec, mask, bars), mask


def _composite(rng, spec: SyntheticSpec, mask: np.ndarray, bars: np.ndarray) -> np.ndarray:
    shape = mask.shape
    level = float(rng.uniform(*spec.background))
    contrast = float(rng.uniform(*spec.contrast))
    bright = (mask | bars).astype(np.float64)
    if spec.blur_sigma > 0:
        bright = ndimage.gaussian_filter(bright, spec.blur_sigma, mode="nearest")
    img = level + _texture(rng, shape, spec.texture_amplitude) + contrast * bright
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(spec: SyntheticSpec, count: int, start: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    return [synth_pair(spec, start + i) for i in range(count)]


def synth_sequence(spec: SyntheticSpec, frames: int, index: int = 0, drift: float = 1.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """A blob slowly translating and breathing across ``frames`` frames."""
    rng = _rng(spec, index, stream=1)
    h, w = spec.height, spec.width
    r0 = float(rng.uniform(*spec.radius))
    ecc = float(rng.uniform(0.0, spec.eccentricity))
    tilt = float(rng.uniform(0.0, math.pi))
    harmonics = [(k, float(rng.uniform(-spec.wobble, spec.wobble)), float(rng.uniform(0, 2 * math.pi))) for k in (2, 3, 4)]
    angle = float(rng.uniform(0, 2 * math.pi))
    c0 = np.array([h / 2, w / 2])
    step = drift * np.array([math.sin(angle), math.cos(angle)])
    out = []
    for f in range(frames):
        center = c0 + step * (f - frames / 2)
        radius = r0 * (1.0 + 0.05 * math.sin(2 * math.pi * f / max(frames, 1)))
        mask = _blob_mask((h, w), tuple(center), radius, ecc, tilt, harmonics)
        fr = _rng(spec, index, stream=100 + f)
        out.append((_composite(fr, spec, mask, np.zeros_like(mask)), mask))
    return out


# -- dataset manifest ------------------------------------------------------

MANIFEST_HEADER = ["image_path", "mask_path", "split"]


@dataclass
class DatasetEntry:
    image_path: str
    mask_path: str
    split: str


def write_dataset(out_dir: str | Path, pairs, splits, ext: str = ".pgm") -> Path:
    """Write image/mask files plus ``manifest.csv``; paths are relative to ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ((img, mask), split) in enumerate(zip(pairs, splits)):
        ip = Path("images") / f"img_{i:04d}{ext}"
        mp = Path("masks") / f"mask_{i:04d}{ext}"
        save_image(img, out_dir / ip)
        save_mask(mask, out_dir / mp)
        entries.append(DatasetEntry(ip.as_posix(), mp.as_posix(), split))
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for e in entries:
            wr.writerow([e.image_path, e.mask_path, e.split])
    return manifest


def read_manifest(path: str | Path) -> list[DatasetEntry]:
    path = Path(path)
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"{path}: expected header {','.join(MANIFEST_HEADER)}")
        return [DatasetEntry(r["image_path"], r["mask_path"], r["split"]) for r in rd]


def iter_split(manifest: str | Path, split: str) -> Iterator[tuple[str, np.ndarray, np.ndarray]]:
    """Yield ``(image_id, image, mask)`` for one split, in manifest order."""
    root = Path(manifest).parent
    for e in read_manifest(manifest):
        if e.split == split:
            yield Path(e.image_path).stem, load_image(root / e.image_path), load_mask(root / e.mask_path)


def spec_dict(spec: SyntheticSpec) -> dict:
    return asdict(spec)
