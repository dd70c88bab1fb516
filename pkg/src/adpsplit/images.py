"""Image file output: binary PPM (P6) and lossless PNG."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(image) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(img * 255.0).astype(np.uint8)


def write_ppm(path, image) -> None:
    img = to_uint8(image)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def write_png(path, image) -> None:
    from PIL import Image

    img = to_uint8(image)
    if img.ndim == 2:
        Image.fromarray(img, mode="L").save(path)
    else:
        Image.fromarray(img, mode="RGB").save(path)


def write_image(path, image) -> None:
    """Dispatch on extension: .ppm or .png."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ppm":
        write_ppm(path, image)
    elif suffix == ".png":
        write_png(path, image)
    else:
        raise ValueError(f"unsupported image extension: {suffix}")


def write_index_png(path, indices) -> None:
    """Indexed map (e.g. dominant-Gaussian map) as a grayscale PNG.

    Indices are mapped modulo 255 with the sentinel -1 rendered black.
    """
    from PIL import Image

    idx = np.asarray(indices, dtype=np.int64)
    gray = np.where(idx < 0, 0, idx % 255 + 1).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path)
