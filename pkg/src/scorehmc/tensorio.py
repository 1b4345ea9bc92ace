"""File formats: TNSR tensors and 8-bit PGM previews.

TNSR layout (little endian throughout):
    magic ``TNSR`` | u32 version=1 | u32 rank | rank x u64 dims | f64 payload

The payload is row-major float64. PGM previews are binary ``P5`` files with a
linear min/max intensity scaling; the scaling bounds are recorded in a text
sidecar next to the image so the mapping stays invertible.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1


def save_tensor(path, arr: np.ndarray) -> None:
    """Write a float64 array in TNSR format."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(TNSR_MAGIC)
        f.write(struct.pack("<II", TNSR_VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.astype("<f8").tobytes())


def load_tensor(path) -> np.ndarray:
    """Read a TNSR file back into a float64 array."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TNSR_MAGIC:
            raise ValueError(f"{path}: not a TNSR file (magic {magic!r})")
        version, rank = struct.unpack("<II", f.read(8))
        if version != TNSR_VERSION:
            raise ValueError(f"{path}: unsupported TNSR version {version}")
        shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = f.read(8 * count)
        if len(payload) != 8 * count:
            raise ValueError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f8", count=count)
    return data.reshape(shape).copy()


def save_pgm(path, img: np.ndarray, sidecar: bool = True) -> None:
    """Write a 2D array as a binary PGM preview with linear min/max scaling."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM preview expects a 2D image, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    if span <= 0:
        scaled = np.zeros_like(img)
    else:
        scaled = (img - lo) / span
    data = np.round(scaled * 255.0).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())
    if sidecar:
        with open(path.with_suffix(path.suffix + ".txt"), "w") as f:
            f.write(f"min = {lo!r}\nmax = {hi!r}\n")
