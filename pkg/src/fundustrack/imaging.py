"""Fundus photograph decoding and preprocessing.

Readers for baseline PNG (via Pillow, alpha discarded) and plain/binary PPM
(maxval 255), a PPM writer for bit-exact test fixtures, and the preprocessing
chain applied before vessel analysis: green-channel extraction, tile-based
clipped histogram equalization, field-of-view detection, and bilinear resize.

Grayscale rasters are float64 arrays in [0, 1]; masks are boolean arrays.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import BadParams, CorruptData, TooSmall, UnsupportedFormat
from .validation import check_gray_array, check_rgb_array

MIN_DECODE_DIM = 64
DEFAULT_TILE = 32
DEFAULT_CLIP = 2.0
DEFAULT_FOV_THRESHOLD = 0.06

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

# 4-connectivity structuring element for component labelling
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(eq=False)
class FundusImage:
    """Decoded RGB fundus photograph.

    ``pixels`` is an (height, width, 3) uint8 array; ``source_id`` is a
    content hash over dimensions and pixel data, stable across re-encodes.
    """

    width: int
    height: int
    pixels: np.ndarray
    source_id: str

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "FundusImage":
        pixels = check_rgb_array(pixels)
        h, w = pixels.shape[:2]
        return cls(width=w, height=h, pixels=pixels, source_id=content_hash(pixels))


def content_hash(pixels: np.ndarray) -> str:
    """SHA-256 over dimensions and raw RGB bytes; the canonical image id."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w = pixels.shape[:2]
    digest = hashlib.sha256()
    digest.update(f"{w}x{h}:".encode("ascii"))
    digest.update(pixels.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# decoding / encoding
# ---------------------------------------------------------------------------

def decode_image(data: bytes, format_hint: str = "auto") -> FundusImage:
    """Decode PNG or PPM bytes into a validated :class:`FundusImage`.

    Parameters
    ----------
    data : bytes
        Raw file contents.
    format_hint : {"auto", "png", "ppm"}
        "auto" sniffs the magic bytes.

    Raises
    ------
    UnsupportedFormat
        Unrecognized magic bytes or a PPM variant outside P3/P6 maxval 255.
    CorruptData
        Recognized container with truncated or inconsistent contents.
    TooSmall
        Either dimension below 64 pixels.
    """
    if not data:
        raise CorruptData("empty byte stream")
    if format_hint not in ("auto", "png", "ppm"):
        raise BadParams(f"unknown format hint: {format_hint!r}")

    if format_hint == "auto":
        if data[:8] == _PNG_MAGIC:
            format_hint = "png"
        elif data[:2] in (b"P3", b"P6"):
            format_hint = "ppm"
        else:
            raise UnsupportedFormat("unrecognized magic bytes")

    if format_hint == "png":
        pixels = _decode_png(data)
    else:
        pixels = _decode_ppm(data)

    h, w = pixels.shape[:2]
    if w < MIN_DECODE_DIM or h < MIN_DECODE_DIM:
        raise TooSmall(f"image is {w}x{h}; minimum dimension is {MIN_DECODE_DIM}")
    return FundusImage(width=w, height=h, pixels=pixels, source_id=content_hash(pixels))


def _decode_png(data: bytes) -> np.ndarray:
    if data[:8] != _PNG_MAGIC:
        raise UnsupportedFormat("not a PNG stream")
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise UnsupportedFormat(str(exc)) from exc
    except (OSError, SyntaxError, ValueError) as exc:
        raise CorruptData(f"PNG decode failed: {exc}") from exc


class _PpmTokenizer:
    """Whitespace/comment-aware tokenizer over PPM header and plain bodies."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def next_token(self) -> bytes:
        data, n = self.data, len(self.data)
        pos = self.pos
        while pos < n:
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        if pos >= n:
            raise CorruptData("unexpected end of PPM stream")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        self.pos = pos
        return data[start:pos]

    def next_int(self, what: str) -> int:
        tok = self.next_token()
        try:
            return int(tok)
        except ValueError:
            raise CorruptData(f"bad PPM {what}: {tok!r}") from None


def _decode_ppm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic not in (b"P3", b"P6"):
        raise UnsupportedFormat(f"not a P3/P6 PPM stream: {magic!r}")
    tok = _PpmTokenizer(data)
    tok.pos = 2
    width = tok.next_int("width")
    height = tok.next_int("height")
    maxval = tok.next_int("maxval")
    if width <= 0 or height <= 0:
        raise CorruptData(f"bad PPM dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"only maxval 255 PPM supported, got {maxval}")

    count = width * height * 3
    if magic == b"P6":
        # exactly one whitespace byte separates the header from the raster
        raster = data[tok.pos + 1:]
        if len(raster) < count:
            raise CorruptData("truncated P6 raster")
        flat = np.frombuffer(raster[:count], dtype=np.uint8)
    else:
        values = np.empty(count, dtype=np.uint8)
        for i in range(count):
            v = tok.next_int("sample")
            if not 0 <= v <= maxval:
                raise CorruptData(f"P3 sample {v} exceeds maxval {maxval}")
            values[i] = v
        flat = values
    return flat.reshape(height, width, 3)


def encode_ppm(image: FundusImage, plain: bool = False) -> bytes:
    """Serialize to PPM; binary P6 by default, ASCII P3 when ``plain``."""
    pixels = np.ascontiguousarray(image.pixels, dtype=np.uint8)
    header = f"{image.width} {image.height}\n255\n"
    if plain:
        body = "\n".join(
            " ".join(str(v) for v in row.reshape(-1)) for row in pixels
        )
        return ("P3\n" + header + body + "\n").encode("ascii")
    return b"P6\n" + header.encode("ascii") + pixels.tobytes()


def encode_png(image: FundusImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image.pixels, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def mask_to_png(mask: np.ndarray) -> bytes:
    """Export a boolean mask as a 1-bit PNG."""
    mask = np.asarray(mask, dtype=bool)
    buf = io.BytesIO()
    Image.fromarray(mask).convert("1").save(buf, format="PNG")
    return buf.getvalue()


def png_to_mask(data: bytes) -> np.ndarray:
    """Read a 1-bit (or any grayscale) PNG back into a boolean mask."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            return np.asarray(img.convert("L")) > 127
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptData(f"mask PNG decode failed: {exc}") from exc


def gray_to_png(values: np.ndarray) -> bytes:
    """Export a [0, 1] grayscale map as an 8-bit PNG, for debugging."""
    values = check_gray_array(values, "map")
    as8 = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(as8, mode="L").save(buf, format="PNG")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def extract_green_channel(image: FundusImage) -> np.ndarray:
    """Green channel scaled to [0, 1]; the highest-contrast channel for vessels."""
    return image.pixels[:, :, 1].astype(np.float64) / 255.0


def luminance(image: FundusImage) -> np.ndarray:
    """Rec. 601 luma in [0, 1]."""
    px = image.pixels.astype(np.float64)
    return (0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]) / 255.0


def normalize_illumination(
    gray: np.ndarray, tile: int = DEFAULT_TILE, clip: float = DEFAULT_CLIP
) -> np.ndarray:
    """Tile-based clipped histogram equalization (CLAHE-style).

    The image is reflect-padded to a multiple of ``tile``; each tile gets a
    256-bin histogram clipped at ``clip`` times the uniform bin count with the
    excess redistributed evenly, and per-pixel values are remapped by bilinear
    interpolation between the four surrounding tile mappings. Constant inputs
    map to constant outputs; output stays in [0, 1].
    """
    gray = check_gray_array(gray, "gray")
    if tile < 8:
        raise BadParams(f"tile must be >= 8, got {tile}")
    if not clip > 0:
        raise BadParams(f"clip must be > 0, got {clip}")

    h, w = gray.shape
    ny = -(-h // tile)
    nx = -(-w // tile)
    pad_h, pad_w = ny * tile - h, nx * tile - w
    padded = np.pad(gray, ((0, pad_h), (0, pad_w)), mode="reflect") if (pad_h or pad_w) else gray

    bins = 256
    q = np.minimum((padded * bins).astype(np.int64), bins - 1)

    area = tile * tile
    clip_limit = max(1.0, clip * area / bins)
    # per-tile clipped-histogram CDF mappings, shape (ny, nx, bins)
    luts = np.empty((ny, nx, bins), dtype=np.float64)
    for ty in range(ny):
        for tx in range(nx):
            block = q[ty * tile:(ty + 1) * tile, tx * tile:(tx + 1) * tile]
            hist = np.bincount(block.reshape(-1), minlength=bins).astype(np.float64)
            excess = np.maximum(hist - clip_limit, 0.0).sum()
            hist = np.minimum(hist, clip_limit) + excess / bins
            luts[ty, tx] = np.cumsum(hist) / area

    # bilinear blend between tile-center mappings, clamped at the borders
    ph, pw = padded.shape
    cy = (np.arange(ph) + 0.5) / tile - 0.5
    cx = (np.arange(pw) + 0.5) / tile - 0.5
    y0 = np.clip(np.floor(cy).astype(np.int64), 0, ny - 1)
    x0 = np.clip(np.floor(cx).astype(np.int64), 0, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    fy = np.clip(cy - y0, 0.0, 1.0)[:, None]
    fx = np.clip(cx - x0, 0.0, 1.0)[None, :]

    tl = luts[y0[:, None], x0[None, :], q]
    tr = luts[y0[:, None], x1[None, :], q]
    bl = luts[y1[:, None], x0[None, :], q]
    br = luts[y1[:, None], x1[None, :], q]
    out = (tl * (1 - fx) + tr * fx) * (1 - fy) + (bl * (1 - fx) + br * fx) * fy
    return np.clip(out[:h, :w], 0.0, 1.0)


def detect_fov_mask(image: FundusImage, threshold: float = DEFAULT_FOV_THRESHOLD) -> np.ndarray:
    """Detect the illuminated circular field of view on the dark background.

    Pixels with luminance above ``threshold`` are candidates; only the largest
    4-connected component is kept. An all-dark image yields an empty mask.
    """
    if not 0.0 < threshold < 1.0:
        raise BadParams(f"threshold must be in (0, 1), got {threshold}")
    bright = luminance(image) > threshold
    if not bright.any():
        return np.zeros(bright.shape, dtype=bool)
    labels, n = ndimage.label(bright, structure=_CROSS)
    if n == 1:
        return bright
    sizes = np.bincount(labels.reshape(-1))
    sizes[0] = 0
    return labels == sizes.argmax()


def resize_bilinear(image: FundusImage, w: int, h: int) -> FundusImage:
    """Bilinear resize; identity when the target equals the source size."""
    if w < 16 or h < 16:
        raise BadParams(f"target dimensions must be >= 16, got {w}x{h}")
    if w == image.width and h == image.height:
        return FundusImage.from_array(image.pixels.copy())

    src = image.pixels.astype(np.float64)
    sx = np.clip((np.arange(w) + 0.5) * image.width / w - 0.5, 0, image.width - 1)
    sy = np.clip((np.arange(h) + 0.5) * image.height / h - 0.5, 0, image.height - 1)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, image.width - 1)
    y1 = np.minimum(y0 + 1, image.height - 1)
    fx = (sx - x0)[None, :, None]
    fy = (sy - y0)[:, None, None]

    top = src[y0[:, None], x0[None, :], :] * (1 - fx) + src[y0[:, None], x1[None, :], :] * fx
    bot = src[y1[:, None], x0[None, :], :] * (1 - fx) + src[y1[:, None], x1[None, :], :] * fx
    out = np.clip(np.rint(top * (1 - fy) + bot * fy), 0, 255).astype(np.uint8)
    return FundusImage.from_array(out)
