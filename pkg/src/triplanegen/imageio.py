"""Image output: 8-bit PNG with linear-to-sRGB conversion, plus raw float32
dumps in the shared tensor format for HDR inspection."""

from __future__ import annotations

import numpy as np
from PIL import Image

from .autodiff import tensor_from_bytes, tensor_to_bytes


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x,
                    1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png(path, linear_rgb: np.ndarray) -> None:
    """(H, W, 3) linear RGB in [0, 1] -> sRGB-encoded 8-bit PNG."""
    srgb = linear_to_srgb(np.asarray(linear_rgb, dtype=np.float64))
    Image.fromarray((srgb * 255.0 + 0.5).astype(np.uint8)).save(path)


def save_hdr(path, linear_rgb: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(np.asarray(linear_rgb, dtype=np.float32)))


def load_hdr(path) -> np.ndarray:
    with open(path, "rb") as f:
        return tensor_from_bytes(f.read())
