"""Image handling: 8-bit RGB images, appearance meta-properties, synthetic
corruptions, and PPM/PNG file I/O.

Images are numpy arrays of shape (h, w, 3), dtype uint8, RGB channel order.

The four meta-properties summarize the overall appearance of an image with a
single number each:

- brightness: mean HSV value channel (max of R, G, B per pixel), scaled to
  [0, 1].
- saturation: mean HSV saturation, (value - min(R, G, B)) / value, taken as 0
  for black pixels.
- entropy: Shannon entropy (bits) of the 256-bin histogram of the grayscale
  luminance 0.299 R + 0.587 G + 0.114 B.
- edge_amount: fraction of interior pixels whose Sobel gradient magnitude
  exceeds 10% of the operator's maximum possible response.

Corruptions are pure functions of (image, kind, severity, seed): the same
arguments always produce the same output image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PROPERTY_NAMES = ("brightness", "saturation", "entropy", "edge_amount")

CORRUPTION_KINDS = ("brightness", "defocus_blur", "frosted_blur", "fog", "gaussian_noise")
SEVERITIES = (1, 2, 3)

# Severity-indexed corruption parameters (index with severity - 1).
BRIGHTNESS_DELTA = (0.1, 0.3, 0.5)
DEFOCUS_RADIUS = (3, 5, 9)
FROSTED_ITERATIONS = (1, 2, 3)
FROSTED_RADIUS = (2, 3, 4)
FOG_WEIGHT = (0.15, 0.30, 0.50)
NOISE_SIGMA = (0.04, 0.08, 0.18)

# The Sobel kernels below are scaled by 1/4 so that responses stay close to
# the [0, 1] range of the input. The largest magnitude any [0, 1] image can
# produce is then sqrt(5)/2 (both gradients cannot peak on the same patch).
SOBEL_MAX_MAGNITUDE = math.sqrt(5.0) / 2.0
EDGE_THRESHOLD = 0.1 * SOBEL_MAX_MAGNITUDE

_LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def validate_image(img: np.ndarray) -> np.ndarray:
    """Check that img is an (h, w, 3) uint8 RGB array and return it."""
    if not isinstance(img, np.ndarray):
        raise TypeError(f"image must be a numpy array, got {type(img).__name__}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must have shape (h, w, 3), got {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"image dtype must be uint8, got {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"image must be non-empty, got shape {img.shape}")
    return img


def quantize(x01: np.ndarray) -> np.ndarray:
    """Map a float array in [0, 1] to uint8 by round-half-up at 1/255 steps."""
    return np.clip(np.floor(x01 * 255.0 + 0.5), 0.0, 255.0).astype(np.uint8)


@dataclass(frozen=True)
class MetaProperties:
    brightness: float
    saturation: float
    entropy: float
    edge_amount: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.brightness, self.saturation, self.entropy, self.edge_amount],
            dtype=np.float64,
        )


def luminance(img: np.ndarray) -> np.ndarray:
    """Grayscale luminance in [0, 255] as float64, shape (h, w)."""
    r, g, b = (img[..., i].astype(np.float64) for i in range(3))
    return _LUMA_WEIGHTS[0] * r + _LUMA_WEIGHTS[1] * g + _LUMA_WEIGHTS[2] * b


def sobel_magnitude(gray01: np.ndarray) -> np.ndarray:
    """Gradient magnitude of the normalized Sobel operator on interior pixels.

    Args:
        gray01: float array (h, w), values in [0, 1].

    Returns:
        Array of shape (h - 2, w - 2); empty when there is no interior.
    """
    h, w = gray01.shape
    if h < 3 or w < 3:
        return np.zeros((max(h - 2, 0), max(w - 2, 0)), dtype=np.float64)
    p = gray01
    right = p[:-2, 2:] + 2.0 * p[1:-1, 2:] + p[2:, 2:]
    left = p[:-2, :-2] + 2.0 * p[1:-1, :-2] + p[2:, :-2]
    bottom = p[2:, :-2] + 2.0 * p[2:, 1:-1] + p[2:, 2:]
    top = p[:-2, :-2] + 2.0 * p[:-2, 1:-1] + p[:-2, 2:]
    gx = (right - left) / 4.0
    gy = (bottom - top) / 4.0
    return np.hypot(gx, gy)


def compute_meta_properties(img: np.ndarray) -> MetaProperties:
    """Compute brightness, saturation, entropy and edge_amount for an image."""
    validate_image(img)
    chan = img.astype(np.float64)
    value = chan.max(axis=2)
    cmin = chan.min(axis=2)
    brightness = float(value.mean() / 255.0)

    sat = np.zeros_like(value)
    nz = value > 0
    sat[nz] = (value[nz] - cmin[nz]) / value[nz]
    saturation = float(sat.mean())

    y = luminance(img)
    bins = np.clip(np.floor(y + 0.5), 0, 255).astype(np.intp)
    counts = np.bincount(bins.ravel(), minlength=256)
    p = counts[counts > 0] / bins.size
    entropy = float(-(p * np.log2(p)).sum())

    mag = sobel_magnitude(y / 255.0)
    edge_amount = float((mag > EDGE_THRESHOLD).mean()) if mag.size else 0.0

    return MetaProperties(brightness, saturation, entropy, edge_amount)


@dataclass(frozen=True)
class Corruption:
    """A corruption kind plus a severity level in {1, 2, 3}."""

    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ValueError(f"severity must be one of {SEVERITIES}, got {self.severity}")


def corruption_rng(corruption: Corruption, seed: int) -> np.random.Generator:
    """Generator keyed on (seed, kind, severity) so corruptions never share
    streams across kinds or severity levels."""
    kind_index = CORRUPTION_KINDS.index(corruption.kind)
    return np.random.default_rng([int(seed), kind_index, corruption.severity])


def apply_corruption(img: np.ndarray, corruption: Corruption, seed: int) -> np.ndarray:
    """Apply a corruption and requantize to uint8.

    Deterministic: the output depends only on (img, corruption, seed).
    """
    validate_image(img)
    rng = corruption_rng(corruption, seed)
    level = corruption.severity - 1
    if corruption.kind == "brightness":
        return _corrupt_brightness(img, BRIGHTNESS_DELTA[level])
    if corruption.kind == "defocus_blur":
        return _corrupt_defocus(img, DEFOCUS_RADIUS[level])
    if corruption.kind == "frosted_blur":
        return _corrupt_frosted(img, FROSTED_ITERATIONS[level], FROSTED_RADIUS[level], rng)
    if corruption.kind == "fog":
        return _corrupt_fog(img, FOG_WEIGHT[level], rng)
    if corruption.kind == "gaussian_noise":
        return _corrupt_noise(img, NOISE_SIGMA[level], rng)
    raise ValueError(f"unknown corruption kind {corruption.kind!r}")


def _corrupt_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    # Raise the HSV value channel by delta (clamped), keep hue and saturation.
    # Scaling RGB by new_value/value does exactly that; black pixels have no
    # hue to keep, so they become gray at the new value.
    rgb = img.astype(np.float64) / 255.0
    v = rgb.max(axis=2)
    v2 = np.clip(v + delta, 0.0, 1.0)
    out = np.empty_like(rgb)
    nz = v > 0
    scale = np.zeros_like(v)
    scale[nz] = v2[nz] / v[nz]
    out = rgb * scale[..., None]
    out[~nz] = v2[~nz, None]
    return quantize(out)


def _disk_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    mask = (yy * yy + xx * xx) <= r * r
    k = mask.astype(np.float64)
    return k / k.sum()


def _corrupt_defocus(img: np.ndarray, radius: int) -> np.ndarray:
    kernel = _disk_kernel(radius)
    rgb = img.astype(np.float64) / 255.0
    out = np.empty_like(rgb)
    for c in range(3):
        out[..., c] = ndimage.convolve(rgb[..., c], kernel, mode="reflect")
    return quantize(out)


def _corrupt_frosted(
    img: np.ndarray, iterations: int, radius: int, rng: np.random.Generator
) -> np.ndarray:
    # Frosted glass: every pixel is replaced by a randomly chosen pixel from
    # its neighborhood (repeated per iteration), then lightly defocused.
    h, w = img.shape[:2]
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    out = img
    for _ in range(iterations):
        dy = rng.integers(-radius, radius + 1, size=(h, w))
        dx = rng.integers(-radius, radius + 1, size=(h, w))
        yy = np.clip(rows + dy, 0, h - 1)
        xx = np.clip(cols + dx, 0, w - 1)
        out = out[yy, xx]
    return _corrupt_defocus(out, 2)


def _plasma(size: int, rng: np.random.Generator) -> np.ndarray:
    """Diamond-square cloud texture, normalized to [0, 1], shape (size, size)."""
    k = 1
    while (1 << k) + 1 < size:
        k += 1
    s = (1 << k) + 1
    g = np.zeros((s, s), dtype=np.float64)
    g[0, 0], g[0, -1], g[-1, 0], g[-1, -1] = rng.random(4)
    step = s - 1
    amp = 0.5
    while step >= 2:
        half = step // 2
        # Diamond step: centers of each square cell.
        ys = np.arange(half, s, step)
        yy, xx = np.meshgrid(ys, ys, indexing="ij")
        avg = (
            g[yy - half, xx - half]
            + g[yy - half, xx + half]
            + g[yy + half, xx - half]
            + g[yy + half, xx + half]
        ) / 4.0
        g[yy, xx] = avg + rng.uniform(-amp, amp, yy.shape)
        # Square step: edge midpoints are lattice points with odd index parity.
        idx = np.arange(0, s, half)
        yy2, xx2 = np.meshgrid(idx, idx, indexing="ij")
        odd = ((yy2 // half + xx2 // half) % 2) == 1
        py, px = yy2[odd], xx2[odd]
        total = np.zeros(py.shape, dtype=np.float64)
        cnt = np.zeros(py.shape, dtype=np.float64)
        for dy, dx in ((-half, 0), (half, 0), (0, -half), (0, half)):
            ny, nx = py + dy, px + dx
            ok = (ny >= 0) & (ny < s) & (nx >= 0) & (nx < s)
            total[ok] += g[ny[ok], nx[ok]]
            cnt[ok] += 1.0
        g[py, px] = total / cnt + rng.uniform(-amp, amp, py.shape)
        step = half
        amp /= 2.0
    lo, hi = g.min(), g.max()
    if hi - lo < 1e-12:
        return np.full((size, size), 0.5)
    return ((g - lo) / (hi - lo))[:size, :size]


def _corrupt_fog(img: np.ndarray, weight: float, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    plasma = _plasma(max(h, w), rng)[:h, :w]
    fog = 0.55 + 0.45 * plasma
    rgb = img.astype(np.float64) / 255.0
    out = (1.0 - weight) * rgb + weight * fog[..., None]
    return quantize(out)


def _corrupt_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    rgb = img.astype(np.float64) / 255.0
    out = rgb + rng.normal(0.0, sigma, size=rgb.shape)
    return quantize(np.clip(out, 0.0, 1.0))


def write_ppm(path, img: np.ndarray) -> None:
    """Write a binary PPM (P6, maxval 255). Byte-deterministic."""
    from . import fsio

    validate_image(img)
    h, w = img.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    fsio.atomic_write_bytes(path, header + img.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255)."""
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            c = data[pos : pos + 1]
            if c == b"#":
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl + 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        return data[start:pos]

    magic = token()
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM (magic {magic!r})")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as exc:
        raise ValueError(f"{path}: bad PPM header: {exc}") from exc
    if maxval != 255:
        raise ValueError(f"{path}: unsupported PPM maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    body = data[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: PPM pixel data truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_image(path, img: np.ndarray) -> None:
    """Write an image; format chosen by extension (.ppm native, .png via Pillow)."""
    from pathlib import Path

    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(path, img)
    elif suffix == ".png":
        import io

        from PIL import Image

        from . import fsio

        validate_image(img)
        buf = io.BytesIO()
        Image.fromarray(img, mode="RGB").save(buf, format="PNG")
        fsio.atomic_write_bytes(path, buf.getvalue())
    else:
        raise ValueError(f"unsupported image format {suffix!r} (use .ppm or .png)")


def read_image(path) -> np.ndarray:
    from pathlib import Path

    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        return read_ppm(path)
    if suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    raise ValueError(f"unsupported image format {suffix!r} (use .ppm or .png)")
