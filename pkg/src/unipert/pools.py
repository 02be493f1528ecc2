"""Image pool disk I/O: directories of NTF tensors, plus a binary-PPM (P6)
converter for ingesting external 8-bit images."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BadMagicError, MissingPoolError, TruncatedFileError
from .ntf import read_ntf, write_ntf
from .sampler import ImagePool


def write_pool(pool_dir, images) -> list:
    pool_dir = Path(pool_dir)
    pool_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        path = pool_dir / f"img_{i:04d}.ntf"
        write_ntf(img, path)
        paths.append(path)
    return paths


def load_pool(pool_dir, role: str = "source") -> ImagePool:
    pool_dir = Path(pool_dir)
    if not pool_dir.is_dir():
        raise MissingPoolError(f"{pool_dir} is not a directory")
    files = sorted(pool_dir.glob("*.ntf"))
    if not files:
        raise MissingPoolError(f"no .ntf tensors under {pool_dir}")
    images = np.stack([read_ntf(f) for f in files])
    return ImagePool(images=images, role=role)


def ppm_to_tensor(path) -> np.ndarray:
    """Parse a binary P6 PPM with 8-bit samples and scale to [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise BadMagicError(f"{path}: not a binary PPM (P6)")
    fields = []
    pos = 2
    while len(fields) < 3:
        if pos >= len(data):
            raise TruncatedFileError(f"{path}: header ended early")
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise BadMagicError(f"{path}: only 8-bit PPMs supported (maxval {maxval})")
    need = width * height * 3
    raw = data[pos : pos + need]
    if len(raw) != need:
        raise TruncatedFileError(f"{path}: pixel data is {len(raw)} bytes, expected {need}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3)
    return pixels.astype(np.float64) / 255.0


def convert_ppm(src, dst) -> None:
    write_ntf(ppm_to_tensor(src), dst)
