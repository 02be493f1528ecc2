"""Per-target feature bank: fixed crop set, k-means token centers, and
global features for every (encoder, crop) pair, cached to disk.

Crops are fixed once per target before optimization; re-cropping each step
is exactly the instability the multi-crop aggregation removes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    KTooLargeError,
    TruncatedFileError,
    VersionMismatchError,
)
from .ntf import tensor_from_bytes, tensor_to_bytes
from .sampler import CropSpec, build_crop_set, crop_resize
from .tensorops import SeededRng, as_tensor

BANK_MAGIC = b"UBK1"
MAX_ITERS = 100
SHIFT_TOL = 1e-8


def kmeans(points, k: int, rng: SeededRng) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters re-seed to the point farthest from its center. The
    within-cluster SSE is asserted non-increasing every iteration.
    """
    points = as_tensor(points, rank=2)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise KTooLargeError(f"k={k} outside 1..{n}")
    gen = rng.generator()
    centers = _plus_plus_seed(points, k, gen)

    prev_sse = np.inf
    for _ in range(MAX_ITERS):
        d2 = _sqdist(points, centers)
        assign = d2.argmin(axis=1)
        sse = float(d2[np.arange(n), assign].sum())
        assert sse <= prev_sse * (1.0 + 1e-12) + 1e-15, "Lloyd SSE increased"
        prev_sse = sse

        new_centers = centers.copy()
        own_d2 = d2[np.arange(n), assign].copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new_centers[c] = points[members].mean(axis=0)
            else:
                far = int(own_d2.argmax())
                new_centers[c] = points[far]
                own_d2[far] = -np.inf
        shift = float(np.abs(new_centers - centers).max())
        centers = new_centers
        if shift < SHIFT_TOL:
            break
    return centers


def _plus_plus_seed(points, k, gen):
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(gen.integers(n))]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(gen.integers(n))
        else:
            u = gen.uniform(0.0, 1.0) * total
            idx = int(np.searchsorted(np.cumsum(d2), u, side="right"))
            idx = min(idx, n - 1)
        centers[j] = points[idx]
        d2 = np.minimum(d2, ((points - centers[j]) ** 2).sum(axis=1))
    return centers


def _sqdist(points, centers):
    diff = points[:, None, :] - centers[None, :, :]
    return (diff * diff).sum(axis=2)


@dataclass(frozen=True)
class TargetBank:
    """Immutable per-target cache.

    centers: (t, n_crops, k, d); global_feats: (t, n_crops, d);
    crop_specs: the shared crop windows (pixel rects on the target).
    """

    crop_specs: tuple
    centers: np.ndarray
    global_feats: np.ndarray
    k: int

    @property
    def n_crops(self) -> int:
        return len(self.crop_specs)

    @property
    def n_encoders(self) -> int:
        return self.centers.shape[0]

    def select_crops(self, indices) -> "TargetBank":
        """View restricted to a subset of crops (used by the per-crop
        inner-update schedule)."""
        indices = list(indices)
        return TargetBank(
            crop_specs=tuple(self.crop_specs[i] for i in indices),
            centers=np.ascontiguousarray(self.centers[:, indices]),
            global_feats=np.ascontiguousarray(self.global_feats[:, indices]),
            k=self.k,
        )


def bank_from_crop_specs(target, specs, encoders, k: int, rng: SeededRng) -> TargetBank:
    """Cluster each encoder's tokens for each listed crop window."""
    dims = encoders[0].dims
    t = len(encoders)
    n_crops = len(specs)
    centers = np.empty((t, n_crops, k, dims.dim))
    global_feats = np.empty((t, n_crops, dims.dim))
    for ci, spec in enumerate(specs):
        crop = crop_resize(target, spec, dims.height, dims.width)
        for ei, enc in enumerate(encoders):
            out = enc.forward(crop)
            centers[ei, ci] = kmeans(out.tokens, k, rng.spawn("kmeans", ei, ci))
            global_feats[ei, ci] = out.global_feat
    return TargetBank(tuple(specs), centers, global_feats, k)


def build_bank(target, encoders, m: int, k: int, rng: SeededRng, *,
               scale_min: float = 0.5, with_attention: bool = True) -> TargetBank:
    """Shared crop set (attention crop from the FIRST encoder, kept last),
    then per (encoder, crop) cluster centers and global features."""
    target = as_tensor(target, rank=3)
    specs, _ = build_crop_set(
        target, m, encoders[0], rng.spawn("crops"),
        scale_min=scale_min, with_attention=with_attention,
    )
    return bank_from_crop_specs(target, specs, encoders, k, rng)


def save_bank(bank: TargetBank, path, digest: bytes) -> None:
    if len(digest) != 32:
        raise ValueError("digest must be 32 bytes")
    spec_rows = np.array([s.as_row() for s in bank.crop_specs], dtype=np.float64)
    blob = BANK_MAGIC + digest
    blob += struct.pack("<3Q", bank.n_encoders, bank.n_crops, bank.k)
    for tensor in (spec_rows, bank.centers, bank.global_feats):
        chunk = tensor_to_bytes(tensor)
        blob += struct.pack("<Q", len(chunk)) + chunk
    Path(path).write_bytes(blob)


def load_bank(path, digest: bytes) -> TargetBank:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFileError("bank file shorter than its magic")
    if data[:4] != BANK_MAGIC:
        raise BadMagicError(f"expected {BANK_MAGIC!r}, got {data[:4]!r}")
    if len(data) < 36 + 24:
        raise TruncatedFileError("bank file ends inside the header")
    stored = data[4:36]
    if stored != digest:
        raise VersionMismatchError("bank was built under a different configuration")
    t, n_crops, k = struct.unpack("<3Q", data[36:60])
    offset = 60
    tensors = []
    for _ in range(3):
        if len(data) < offset + 8:
            raise TruncatedFileError("bank file ends inside a block header")
        (size,) = struct.unpack("<Q", data[offset : offset + 8])
        offset += 8
        if len(data) < offset + size:
            raise TruncatedFileError("bank file ends inside a tensor block")
        tensors.append(tensor_from_bytes(data[offset : offset + size]))
        offset += size
    if offset != len(data):
        raise TruncatedFileError("trailing bytes after the last tensor block")
    spec_rows, centers, global_feats = tensors
    if centers.shape[:2] != (t, n_crops) or centers.shape[2] != k:
        raise VersionMismatchError("bank header disagrees with tensor shapes")
    specs = tuple(CropSpec(*(int(v) for v in row)) for row in spec_rows)
    return TargetBank(specs, centers, global_feats, int(k))
