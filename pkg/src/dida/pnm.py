"""Plain-text PPM (P3) and PGM (P2) reading and writing, 8-bit only."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    """Malformed PPM/PGM content."""


def quantize(values) -> np.ndarray:
    """Map [0, 1] floats to 0..255 codes, rounding half up."""
    v = np.asarray(values, dtype=np.float64)
    if v.size and (v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def write_image(path, image) -> None:
    """Write a 3 x H x W image as P3 or an H x W map as P2.

    Float input is quantized with :func:`quantize`; integer input is taken
    as raw codes and must already be in 0..255.
    """
    arr = np.asarray(image)
    if np.issubdtype(arr.dtype, np.integer):
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("integer codes must lie in 0..255")
        codes = arr.astype(np.uint8)
    else:
        codes = quantize(arr)
    if codes.ndim == 3 and codes.shape[0] == 3:
        magic, rows = "P3", codes.transpose(1, 2, 0).reshape(codes.shape[1], -1)
        height, width = codes.shape[1], codes.shape[2]
    elif codes.ndim == 2:
        magic, rows = "P2", codes
        height, width = codes.shape
    else:
        raise ValueError(f"cannot write array of shape {codes.shape}")
    lines = [magic, f"{width} {height}", "255"]
    lines += [" ".join(str(int(v)) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def _tokens(text: str):
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        yield from line.split()


def read_codes(path) -> np.ndarray:
    """Raw integer samples: 3 x H x W for P3, H x W for P2."""
    try:
        text = Path(path).read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise PNMError(f"{path}: not a plain-text PNM file") from exc
    toks = list(_tokens(text))
    if len(toks) < 4 or toks[0] not in ("P2", "P3"):
        raise PNMError(f"{path}: expected P2 or P3 header")
    try:
        width, height, maxval = int(toks[1]), int(toks[2]), int(toks[3])
        samples = np.array([int(t) for t in toks[4:]], dtype=np.int64)
    except ValueError as exc:
        raise PNMError(f"{path}: non-integer token") from exc
    if width < 1 or height < 1 or maxval != 255:
        raise PNMError(f"{path}: unsupported size or maxval ({width}x{height}, {maxval})")
    channels = 3 if toks[0] == "P3" else 1
    if samples.size != width * height * channels:
        raise PNMError(f"{path}: expected {width * height * channels} samples, found {samples.size}")
    if samples.min() < 0 or samples.max() > maxval:
        raise PNMError(f"{path}: sample out of range")
    if channels == 3:
        return samples.reshape(height, width, 3).transpose(2, 0, 1).copy()
    return samples.reshape(height, width)


def read_image(path) -> np.ndarray:
    """Samples scaled to [0, 1] as float64."""
    return read_codes(path).astype(np.float64) / 255.0
