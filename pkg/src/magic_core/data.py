"""Synthetic training pairs, image I/O and quality metrics.

Images are float64 arrays of shape (C, H, W) with values in [0, 1],
treated as linear intensities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError
from .fileio import atomic_write_bytes, atomic_write_text

LUMA = (0.299, 0.587, 0.114)
CHROMA_STD = 0.04
PSNR_CAP = 99.0


# ---------------------------------------------------------------------------
# distortion

def rgb_to_rcc(image: np.ndarray) -> np.ndarray:
    """Keep red, replace green and blue by luma: (R, Y, Y)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise InputError(f"rgb_to_rcc expects a (3, H, W) image, got shape {img.shape}")
    y = LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]
    return np.stack([img[0], y, y])


@dataclass(frozen=True)
class DistortionConfig:
    sigma_range: tuple[float, float] = (0.5, 2.0)
    noise_scales: tuple[tuple[float, float], ...] = ((1e-4, 1e-3), (4e-4, 4e-3))
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.sigma_range
        if not 0 < lo <= hi:
            raise ConfigError(f"sigma_range {self.sigma_range} must satisfy 0 < lo <= hi")
        if not self.noise_scales:
            raise ConfigError("noise_scales is empty")
        for a, b in self.noise_scales:
            if a < 0 or b < 0:
                raise ConfigError(f"noise scale ({a}, {b}) must be non-negative")


@dataclass(frozen=True)
class DatasetPair:
    input: np.ndarray     # RCC, (3, H, W)
    target: np.ndarray    # RGB, (3, H, W)
    seed: tuple


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Sampled Gaussian truncated at 4 sigma and renormalized to unit sum."""
    radius = max(1, math.ceil(4 * sigma))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(image, k, axis=-1, mode="reflect")
    return ndimage.correlate1d(out, k, axis=-2, mode="reflect")


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def distort(image: np.ndarray, cfg: DistortionConfig = DistortionConfig(),
            seed=0) -> DatasetPair:
    """RCC conversion, random Gaussian blur, then signal-dependent Gaussian noise.

    Noise variance per pixel is ``a + b * I`` with (a, b) drawn once per image
    from ``cfg.noise_scales``.  ``seed`` may be an int or a tuple such as
    (global_seed, image_index).
    """
    target = np.array(image, dtype=np.float64)
    rcc = rgb_to_rcc(target)
    key = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = _rng(key)
    sigma = rng.uniform(*cfg.sigma_range)
    a, b = cfg.noise_scales[int(rng.integers(len(cfg.noise_scales)))]
    blurred = gaussian_blur(rcc, sigma)
    std = np.sqrt(a + b * np.clip(blurred, 0.0, None))
    noisy = blurred + std * rng.standard_normal(blurred.shape)
    return DatasetPair(np.clip(noisy, 0.0, 1.0), target, key)


# ---------------------------------------------------------------------------
# metrics

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _ssim_window() -> np.ndarray:
    t = np.arange(SSIM_WINDOW, dtype=np.float64) - SSIM_WINDOW // 2
    g = np.exp(-0.5 * (t / SSIM_SIGMA) ** 2)
    return g / g.sum()


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM of two single-channel images over valid window positions."""
    g = _ssim_window()
    r = SSIM_WINDOW // 2

    def filt(x):
        x = ndimage.correlate1d(x, g, axis=0, mode="constant")
        x = ndimage.correlate1d(x, g, axis=1, mode="constant")
        return x[r:x.shape[0] - r, r:x.shape[1] - r]

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with an 11x11 Gaussian window, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise InputError(f"ssim expects (H, W) or (C, H, W), got shape {a.shape}")
    if min(a.shape[1:]) < SSIM_WINDOW:
        raise InputError(f"ssim: image {a.shape[1]}x{a.shape[2]} smaller than the"
                         f" {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([ssim_map(x, y).mean() for x, y in zip(a, b)]))


# ---------------------------------------------------------------------------
# procedural images

def _colour(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    # grey level plus a modest chroma offset: natural scenes keep R, G and B
    # strongly correlated, and independent uniform channels would make the
    # green/blue split unrecoverable from (R, Y, Y)
    shape = (3,) if n is None else (n, 3)
    level = rng.uniform(0.05, 0.95, size=shape[:-1] + (1,))
    return np.clip(level + rng.normal(0.0, CHROMA_STD, size=shape), 0.0, 1.0)


def synthetic_image(rng: np.random.Generator, height: int = 96, width: int = 96) -> np.ndarray:
    """Smooth colour gradient, band-limited texture and a few flat coloured shapes."""
    yy, xx = np.mgrid[0:height, 0:width] / max(height, width)
    c0, c1 = _colour(rng, 2)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    tex = ndimage.gaussian_filter(rng.standard_normal((height, width)), rng.uniform(1.0, 3.0))
    tex /= max(np.abs(tex).max(), 1e-9)
    img = img + rng.uniform(0.05, 0.15) * tex[None]

    for _ in range(int(rng.integers(3, 7))):
        colour = _colour(rng)
        cy, cx = rng.uniform(0, 1, size=2) * (height, width)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(0.05, 0.25, size=2) * (height, width)
            mask = ((np.arange(height)[:, None] - cy) / ry) ** 2 + \
                   ((np.arange(width)[None] - cx) / rx) ** 2 <= 1
        else:
            hy, hx = rng.uniform(0.05, 0.2, size=2) * (height, width)
            mask = (np.abs(np.arange(height)[:, None] - cy) <= hy) & \
                   (np.abs(np.arange(width)[None] - cx) <= hx)
        img = np.where(mask[None], colour[:, None, None], img)

    # a few thin stripes give the network fine vertical and horizontal detail
    for _ in range(int(rng.integers(1, 4))):
        colour = _colour(rng)
        if rng.random() < 0.5:
            r0 = int(rng.integers(0, height))
            img[:, r0:r0 + int(rng.integers(1, 3))] = colour[:, None, None]
        else:
            c0_ = int(rng.integers(0, width))
            img[:, :, c0_:c0_ + int(rng.integers(1, 3))] = colour[:, None, None]
    return np.clip(img, 0.0, 1.0)


def split_indices(n: int, seed: int, test_fraction: float = 0.25) -> tuple[list[int], list[int]]:
    """Seed-stable disjoint train/test split of ``range(n)``."""
    if not 0 < test_fraction < 1:
        raise ConfigError(f"test_fraction={test_fraction} must be in (0, 1)")
    perm = _rng((seed, 0x5117)).permutation(n)
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    return sorted(int(i) for i in perm[n_test:]), sorted(int(i) for i in perm[:n_test])


# ---------------------------------------------------------------------------
# image files

def _to_uint(image: np.ndarray, bits: int) -> np.ndarray:
    m = (1 << bits) - 1
    return np.floor(np.clip(image, 0, 1) * m + 0.5).astype(np.uint16 if bits > 8 else np.uint8)


def srgb_to_linear(v: np.ndarray) -> np.ndarray:
    return np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)


def encode_ppm(image: np.ndarray, bits: int = 16) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise InputError(f"PPM needs 1 or 3 channels, got shape {img.shape}")
    c, h, w = img.shape
    q = _to_uint(img, bits).transpose(1, 2, 0)
    magic = b"P6" if c == 3 else b"P5"
    body = q.astype(">u2").tobytes() if bits > 8 else q.tobytes()
    return magic + f"\n{w} {h}\n{(1 << bits) - 1}\n".encode() + body


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError("truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise InputError(f"unsupported netpbm type {magic!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    c = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * c
    body = np.frombuffer(data, dtype=dtype, count=n, offset=pos) if len(data) - pos >= n * np.dtype(dtype).itemsize else None
    if body is None:
        raise InputError("truncated PPM payload")
    return body.reshape(h, w, c).transpose(2, 0, 1).astype(np.float64) / maxval


def save_image(path: str | Path, image: np.ndarray, bits: int | None = None) -> Path:
    """Atomic write; ``.ppm``/``.pgm`` default to 16 bits, ``.png`` is 8-bit."""
    path = Path(path)
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        return atomic_write_bytes(path, encode_ppm(img, bits or 16))
    if suffix == ".png":
        from io import BytesIO

        from PIL import Image

        if img.shape[0] not in (1, 3):
            img = img[:3] if img.shape[0] > 3 else img[:1]
        q = _to_uint(img, 8).transpose(1, 2, 0)
        pil = Image.fromarray(q[..., 0] if q.shape[2] == 1 else q)
        buf = BytesIO()
        pil.save(buf, format="PNG")
        return atomic_write_bytes(path, buf.getvalue())
    raise InputError(f"unsupported image format {path.suffix!r} (use .png or .ppm)")


def load_image(path: str | Path, srgb: bool = False) -> np.ndarray:
    """Read PPM/PGM or PNG as (C, H, W) float64 in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6"):
        img = decode_ppm(data)
    else:
        from PIL import Image, UnidentifiedImageError

        try:
            with Image.open(path) as pil:
                arr = np.asarray(pil)
        except UnidentifiedImageError:
            raise InputError(f"cannot decode image {path}") from None
        if arr.dtype == np.uint8:
            arr = arr / 255.0
        else:
            arr = arr / 65535.0
        img = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)[:3]
    return srgb_to_linear(img) if srgb else img


# ---------------------------------------------------------------------------
# dataset directories

MANIFEST = "manifest.txt"


@dataclass
class Dataset:
    root: Path
    names: list[str]
    train: list[int]
    test: list[int]

    def pair(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        name = self.names[i]
        return (load_image(self.root / "input" / name),
                load_image(self.root / "target" / name))

    def pairs(self, which: str = "all") -> list[tuple[np.ndarray, np.ndarray]]:
        idx = {"all": range(len(self.names)), "train": self.train, "test": self.test}[which]
        return [self.pair(i) for i in idx]

    def __len__(self) -> int:
        return len(self.names)


def write_dataset(out: str | Path, images, cfg: DistortionConfig = DistortionConfig(),
                  test_fraction: float = 0.25) -> Dataset:
    """Distort ``images`` (an iterable of RGB arrays) into input/ and target/ under ``out``."""
    out = Path(out)
    names = []
    lines = ["magic-dataset 1",
             f"seed {cfg.seed}",
             f"sigma_range {cfg.sigma_range[0]!r} {cfg.sigma_range[1]!r}",
             "noise_scales " + " ".join(f"{a!r},{b!r}" for a, b in cfg.noise_scales)]
    for i, img in enumerate(images):
        pair = distort(img, cfg, (cfg.seed, i))
        name = f"{i:05d}.ppm"
        save_image(out / "input" / name, pair.input)
        save_image(out / "target" / name, pair.target)
        names.append(name)
    if not names:
        raise InputError("no images to write")
    train, test = split_indices(len(names), cfg.seed, test_fraction)
    lines.append(f"count {len(names)}")
    lines.append("train " + " ".join(map(str, train)))
    lines.append("test " + " ".join(map(str, test)))
    lines += [f"image {n} seed {cfg.seed},{i}" for i, n in enumerate(names)]
    atomic_write_text(out / MANIFEST, "\n".join(lines) + "\n")
    return Dataset(out, names, train, test)


def synthetic_images(n: int, seed: int, height: int = 96, width: int = 96):
    for i in range(n):
        yield synthetic_image(_rng((seed, i, 0x1A6E)), height, width)


def user_images(directory: str | Path, srgb: bool = False):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    files = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in (".png", ".ppm", ".pnm"))
    for p in files:
        img = load_image(p, srgb)
        if img.shape[0] != 3:
            raise InputError(f"{p}: expected an RGB image, got {img.shape[0]} channels")
        yield img


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    names, train, test = [], [], []
    for line in manifest.read_text().splitlines():
        key, _, rest = line.partition(" ")
        if key == "image":
            names.append(rest.split()[0])
        elif key == "train":
            train = [int(t) for t in rest.split()]
        elif key == "test":
            test = [int(t) for t in rest.split()]
    if not names:
        raise InputError(f"dataset {root} is empty")
    return Dataset(root, names, train, test)
