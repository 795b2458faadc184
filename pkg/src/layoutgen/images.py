"""Image helpers: value-range conversion, PNG/PPM I/O, resizing and cropping.

Arrays are ``(height, width, 3)`` float32 in ``[-1, 1]`` unless noted.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor((np.asarray(image, dtype=np.float64) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def save_png(path, image: np.ndarray) -> None:
    # fixed compression settings so identical arrays give identical bytes
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def save_ppm(path, image: np.ndarray) -> None:
    pixels = to_uint8(image)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def load_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    pixels = np.frombuffer(data[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return from_uint8(pixels.reshape(h, w, 3))


def load_image(path) -> np.ndarray:
    return load_ppm(path) if str(path).lower().endswith(".ppm") else load_png(path)


def _axis_weights(n_in: int, n_out: int):
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = (src - lo).astype(np.float32)
    return lo, hi, frac


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers; works on ``(..., H, W, C)``."""
    h, w = image.shape[-3], image.shape[-2]
    if (h, w) == (out_h, out_w):
        return np.array(image, dtype=np.float32)
    lo, hi, fy = _axis_weights(h, out_h)
    rows = image[..., lo, :, :] * (1 - fy)[:, None, None] + image[..., hi, :, :] * fy[:, None, None]
    lo, hi, fx = _axis_weights(w, out_w)
    out = rows[..., :, lo, :] * (1 - fx)[:, None] + rows[..., :, hi, :] * fx[:, None]
    return out.astype(np.float32)


def center_crop(image: np.ndarray) -> np.ndarray:
    h, w = image.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    return image[top:top + s, left:left + s]


def box_pixels(tl, br, height: int, width: int) -> tuple[int, int, int, int]:
    """Pixel rows/cols ``(y0, y1, x0, x1)`` covered by a normalized box, at least one pixel."""
    x0 = min(max(int(math.floor(tl[0] * width + 1e-9)), 0), width - 1)
    y0 = min(max(int(math.floor(tl[1] * height + 1e-9)), 0), height - 1)
    x1 = max(min(int(math.ceil(br[0] * width - 1e-9)), width), x0 + 1)
    y1 = max(min(int(math.ceil(br[1] * height - 1e-9)), height), y0 + 1)
    return y0, y1, x0, x1


def crop_box(image: np.ndarray, tl, br) -> np.ndarray:
    y0, y1, x0, x1 = box_pixels(tl, br, image.shape[0], image.shape[1])
    return image[y0:y1, x0:x1]
