# services/imaging.py

import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from .errors import DimensionMismatch, MalformedImage, SingularHomography, UnsupportedFormat, UnwritableOutput

logger = logging.getLogger(__name__)

# Images are 2-D float64 arrays (height, width), row-major, intensities in [0, 1].
Image = np.ndarray
Homography = np.ndarray

PathLike = Union[str, Path]


def as_image(data, name: str = "image") -> Image:
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise DimensionMismatch(f"{name} must be a non-empty 2-D raster, got shape {img.shape}")
    return img


def _same_shape(*images: Tuple[str, Image]) -> None:
    shapes = {name: img.shape for name, img in images}
    if len(set(shapes.values())) != 1:
        raise DimensionMismatch(f"raster dimensions differ: {shapes}")


# ---------------- PGM (P5, maxval 255) ----------------
def _read_header_token(data: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos:pos + 1].isspace():
            pos += 1
        elif data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise MalformedImage("unexpected end of PGM header")
    return data[start:pos], pos


def decode_pgm(data: bytes, source: str = "<bytes>") -> Image:
    magic, pos = _read_header_token(data, 0)
    if magic != b"P5":
        raise UnsupportedFormat(f"{source}: expected binary PGM 'P5', got {magic[:8]!r}")
    try:
        width_tok, pos = _read_header_token(data, pos)
        height_tok, pos = _read_header_token(data, pos)
        maxval_tok, pos = _read_header_token(data, pos)
        width, height, maxval = int(width_tok), int(height_tok), int(maxval_tok)
    except ValueError:
        raise MalformedImage(f"{source}: non-numeric PGM header field")
    if width < 1 or height < 1:
        raise MalformedImage(f"{source}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"{source}: maxval {maxval} is not supported (only 255)")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise MalformedImage(f"{source}: missing whitespace after PGM header")
    pos += 1

    payload = data[pos:pos + width * height]
    if len(payload) < width * height:
        raise MalformedImage(f"{source}: truncated payload ({len(payload)} of {width * height} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return pixels.astype(np.float64) / 255.0


def encode_pgm(img: Image) -> bytes:
    img = as_image(img)
    height, width = img.shape
    raster = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return f"P5\n{width} {height}\n255\n".encode("ascii") + raster.tobytes()


def load_pgm(path: PathLike) -> Image:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise MalformedImage(f"cannot read {path}: {e}")
    return decode_pgm(data, source=str(path))


def save_pgm(img: Image, path: PathLike) -> None:
    data = encode_pgm(img)
    try:
        Path(path).write_bytes(data)
    except OSError as e:
        raise UnwritableOutput(f"cannot write {path}: {e}")


# ---------------- Colour / geometry ----------------
def rgb_to_gray(r, g, b) -> Image:
    """ITU-R BT.601 luma."""
    r, g, b = as_image(r, "r"), as_image(g, "g"), as_image(b, "b")
    _same_shape(("r", r), ("g", g), ("b", b))
    return np.clip(0.299 * r + 0.587 * g + 0.114 * b, 0.0, 1.0)


def fixed_height_width(height: int, width: int, target_h: int) -> int:
    return max(1, int(np.floor(width * target_h / height + 0.5)))


def resize_fixed_height(img: Image, target_h: int) -> Image:
    """Bilinear rescale to `target_h` rows keeping the aspect ratio."""
    img = as_image(img)
    if target_h < 1:
        raise DimensionMismatch(f"target height must be >= 1, got {target_h}")
    height, width = img.shape
    out_w = fixed_height_width(height, width, target_h)
    if (target_h, out_w) == img.shape:
        return img.copy()
    resized = cv2.resize(img, (out_w, target_h), interpolation=cv2.INTER_LINEAR)
    return np.clip(resized, 0.0, 1.0)


def resize_to(img: Image, height: int, width: int) -> Image:
    img = as_image(img)
    if img.shape == (height, width):
        return img.copy()
    return np.clip(cv2.resize(img, (width, height), interpolation=cv2.INTER_LINEAR), 0.0, 1.0)


def normalize_homography(h) -> Homography:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise DimensionMismatch(f"homography must be 3x3, got {h.shape}")
    if abs(np.linalg.det(h)) <= 1e-12:
        raise SingularHomography("homography is singular")
    if h[2, 2] != 0.0:
        h = h / h[2, 2]
    return h


def homography_from_corners(src: Sequence[Sequence[float]], dst: Sequence[Sequence[float]]) -> Homography:
    """Projective map taking four source corners onto four destination corners."""
    h = cv2.getPerspectiveTransform(np.asarray(src, dtype=np.float32), np.asarray(dst, dtype=np.float32))
    return normalize_homography(h)


def warp_perspective(img: Image, h: Homography, fill: float, out_shape: Optional[Tuple[int, int]] = None) -> Image:
    """
    Inverse-mapped perspective warp with bilinear sampling. `h` maps source pixel
    coordinates (x, y) to output coordinates; output pixels whose bilinear neighbours
    fall outside the source read `fill` for those neighbours.
    """
    img = as_image(img)
    h = normalize_homography(h)
    out_h, out_w = out_shape if out_shape is not None else img.shape
    src_h, src_w = img.shape

    inv = np.linalg.inv(h)
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
        sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    valid = np.isfinite(sx) & np.isfinite(sy)
    sx = np.where(valid, sx, -2.0)
    sy = np.where(valid, sy, -2.0)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def sample(yy, xx):
        inside = (xx >= 0) & (xx < src_w) & (yy >= 0) & (yy < src_h)
        values = img[np.clip(yy, 0, src_h - 1), np.clip(xx, 0, src_w - 1)]
        return np.where(inside, values, fill)

    top = sample(y0, x0) * (1.0 - fx) + sample(y0, x0 + 1) * fx
    bottom = sample(y0 + 1, x0) * (1.0 - fx) + sample(y0 + 1, x0 + 1) * fx
    out = top * (1.0 - fy) + bottom * fy
    return np.where(valid, out, fill)


def alpha_composite(fg: Image, alpha: Image, bg: Image) -> Image:
    fg, alpha, bg = as_image(fg, "fg"), as_image(alpha, "alpha"), as_image(bg, "bg")
    _same_shape(("fg", fg), ("alpha", alpha), ("bg", bg))
    if alpha.min() < 0.0 or alpha.max() > 1.0:
        raise DimensionMismatch("alpha values must lie within [0, 1]")
    return np.clip(alpha * fg + (1.0 - alpha) * bg, 0.0, 1.0)


def crop_region(img: Image, height: int, width: int, fy: float, fx: float) -> Image:
    """Crop a height x width window at fractional offset (fy, fx), upscaling sources that are too small."""
    img = as_image(img)
    src_h, src_w = img.shape
    if src_h < height or src_w < width:
        scale = max(height / src_h, width / src_w)
        img = resize_to(img, max(height, int(np.ceil(src_h * scale))), max(width, int(np.ceil(src_w * scale))))
        src_h, src_w = img.shape
    top = int(fy * (src_h - height + 1))
    left = int(fx * (src_w - width + 1))
    top = min(max(top, 0), src_h - height)
    left = min(max(left, 0), src_w - width)
    return img[top:top + height, left:left + width].copy()


def minmax_normalize(values: np.ndarray) -> Image:
    """Scale to [0, 1]; a zero range maps to all zeros."""
    values = np.asarray(values, dtype=np.float64)
    low, high = float(values.min()), float(values.max())
    if high - low <= 0.0:
        return np.zeros_like(values)
    return (values - low) / (high - low)
