"""Image file I/O: 8-bit PNG/PPM and float32 PFM."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image


def write_png(img: np.ndarray, path):
    """Clip to [0, 1], quantize to 8 bits and write."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(arr8, mode="RGB").save(path)


def read_image(path) -> np.ndarray:
    """Load any PIL-readable 8-bit image as float RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_ppm(img: np.ndarray, path):
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    arr8 = np.round(arr * 255.0).astype(np.uint8)
    h, w = arr8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr8.tobytes())


def write_pfm(img: np.ndarray, path):
    """Color PFM, bottom-up little-endian float32 (negative scale)."""
    arr = np.asarray(img, dtype=np.float32)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"PF\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(arr[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"PF":
            raise ValueError("only color PFM ('PF') supported")
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4", count=w * h * 3)
    img = data.reshape(h, w, 3)[::-1].astype(np.float64)
    return img


def write_image(img: np.ndarray, path):
    """Pick the writer from the file extension (.png, .ppm, .pfm)."""
    name = str(path).lower()
    if name.endswith(".png"):
        write_png(img, path)
    elif name.endswith(".ppm"):
        write_ppm(img, path)
    elif name.endswith(".pfm"):
        write_pfm(img, path)
    else:
        raise ValueError(f"unsupported image extension: {path}")
