"""PNG loading, saving, and the crop/letterbox geometry helpers.

Images travel through the package as uint8 RGB arrays of shape (H, W, 3)
and masks as {0, 1} uint8 arrays of shape (H, W). Model code converts to
float64 in [0, 1] at the boundary.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import DimensionError, ValidationError


def load_image(path) -> np.ndarray:
    """Read a PNG as uint8 RGB (H, W, 3)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(path, image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise DimensionError(f"expected uint8 (H, W, 3), got {image.dtype} {image.shape}")
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def load_mask(path) -> np.ndarray:
    """Read a mask PNG as a {0, 1} uint8 array."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr >= 128).astype(np.uint8)


def save_mask(path, mask: np.ndarray) -> None:
    if mask.ndim != 2:
        raise DimensionError(f"expected (H, W) mask, got {mask.shape}")
    Image.fromarray((mask > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def encode_png(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(image, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def decode_png(blob: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(blob)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def to_float(image: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] to float64 [0, 1]."""
    return image.astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    """float64 [0, 1] to uint8 with round-half-away and clipping."""
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# crops and letterboxing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LetterboxMeta:
    """Geometry needed to undo a letterbox: crop size, pads, model side."""

    width: int
    height: int
    pad_left: int
    pad_top: int
    side: int


def crop(image: np.ndarray, xmin: int, ymin: int, xmax: int, ymax: int) -> np.ndarray:
    h, w = image.shape[:2]
    if not (0 <= xmin < xmax <= w and 0 <= ymin < ymax <= h):
        raise ValidationError(
            f"crop [{xmin},{ymin},{xmax},{ymax}] outside image {w}x{h}"
        )
    return image[ymin:ymax, xmin:xmax].copy()


def paste(image: np.ndarray, patch: np.ndarray, xmin: int, ymin: int) -> np.ndarray:
    """Return a copy of image with patch written at (xmin, ymin)."""
    h, w = image.shape[:2]
    ph, pw = patch.shape[:2]
    if xmin < 0 or ymin < 0 or xmin + pw > w or ymin + ph > h:
        raise ValidationError(f"paste of {pw}x{ph} at ({xmin},{ymin}) exceeds {w}x{h}")
    out = image.copy()
    out[ymin:ymin + ph, xmin:xmin + pw] = patch
    return out


def _nearest_indices(n_out: int, n_in: int) -> np.ndarray:
    # sample at output pixel centers, floor to the covering input pixel
    return np.minimum(
        ((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1
    )


def resize_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    ys = _nearest_indices(height, image.shape[0])
    xs = _nearest_indices(width, image.shape[1])
    return image[np.ix_(ys, xs)]


def letterbox(image: np.ndarray, side: int) -> tuple[np.ndarray, LetterboxMeta]:
    """Pad a crop to square with edge replication, then resize to side x side."""
    h, w = image.shape[:2]
    if h == 0 or w == 0:
        raise ValidationError("cannot letterbox an empty crop")
    big = max(h, w)
    pad_top = (big - h) // 2
    pad_bottom = big - h - pad_top
    pad_left = (big - w) // 2
    pad_right = big - w - pad_left
    padded = np.pad(
        image,
        ((pad_top, pad_bottom), (pad_left, pad_right), (0, 0)),
        mode="edge",
    )
    out = resize_nearest(padded, side, side)
    return out, LetterboxMeta(w, h, pad_left, pad_top, side)


def unletterbox(image: np.ndarray, meta: LetterboxMeta) -> np.ndarray:
    """Invert the letterbox geometry: resize back, then strip the pads."""
    big = max(meta.width, meta.height)
    back = resize_nearest(image, big, big)
    return back[
        meta.pad_top:meta.pad_top + meta.height,
        meta.pad_left:meta.pad_left + meta.width,
    ].copy()
