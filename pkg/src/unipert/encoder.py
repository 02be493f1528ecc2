"""Pluggable surrogate encoders.

An encoder maps an H x W x C image to L patch tokens, a global feature
(token mean), and a key-attention saliency grid. The built-in toy encoder
is a single-head softmax self-attention block over patch embeddings with a
hand-derived backward pass to the input pixels; it registers under "toy".
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import kernels
from .errors import DuplicateSeedError, ShapeMismatchError
from .tensorops import SeededRng, as_tensor


@dataclass(frozen=True)
class EncoderOutput:
    tokens: np.ndarray         # (L, d)
    global_feat: np.ndarray    # (d,)
    attention_map: np.ndarray  # (grid_h, grid_w), non-negative, sums to 1


@dataclass(frozen=True)
class EncoderDims:
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 16

    @property
    def grid_h(self) -> int:
        return self.height // self.patch

    @property
    def grid_w(self) -> int:
        return self.width // self.patch

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_len(self) -> int:
        return self.patch * self.patch * self.channels


# Pixels are centered before embedding so patch vectors of natural [0, 1]
# images do not all share a dominant mean-brightness direction (which would
# collapse every token cosine toward 1). Constant shift: gradients unchanged.
PIXEL_OFFSET = 0.5


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (L, patch*patch*C), patches in row-major grid order,
    each flattened rows-then-cols-then-channels."""
    h, w, c = image.shape
    gh, gw = h // patch, w // patch
    tiles = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(gh * gw, patch * patch * c))


def encode_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """Centered patch matrix as fed to the patch embedding."""
    return patchify(image - PIXEL_OFFSET, patch)


def unpatchify(patches: np.ndarray, patch: int, h: int, w: int, c: int) -> np.ndarray:
    gh, gw = h // patch, w // patch
    tiles = patches.reshape(gh, gw, patch, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(h, w, c))


class ToyEncoder:
    """Patch embedding + one softmax self-attention layer + projection.

    No positional embedding, so token sets are equivariant under patch
    permutation. Weights are i.i.d. uniform in [-1/sqrt(d), +1/sqrt(d)],
    derived deterministically from the seed.
    """

    kind = "toy"

    def __init__(self, seed: int, dims: EncoderDims = EncoderDims()):
        self.seed = int(seed)
        self.dims = dims
        d = dims.dim
        bound = 1.0 / np.sqrt(d)
        gen = SeededRng(self.seed, stream_id=0).generator()
        self.patch_embed = gen.uniform(-bound, bound, size=(dims.patch_len, d))
        self.wq = gen.uniform(-bound, bound, size=(d, d))
        self.wk = gen.uniform(-bound, bound, size=(d, d))
        self.wv = gen.uniform(-bound, bound, size=(d, d))
        self.wo = gen.uniform(-bound, bound, size=(d, d))
        # stacked (t=1) views for the kernel interface
        self._we = self.patch_embed[None]
        self._wq = self.wq[None]
        self._wk = self.wk[None]
        self._wv = self.wv[None]
        self._wo = self.wo[None]

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = as_tensor(image, rank=3)
        dims = self.dims
        if image.shape != (dims.height, dims.width, dims.channels):
            raise ShapeMismatchError(
                f"encoder expects {(dims.height, dims.width, dims.channels)}, got {image.shape}"
            )
        return image

    def forward(self, image) -> EncoderOutput:
        image = self._check_image(image)
        dims = self.dims
        patches = encode_patches(image, dims.patch)
        tokens, glob, attn = kernels.forward_stack(
            patches, self._we, self._wq, self._wk, self._wv, self._wo
        )
        return EncoderOutput(
            tokens=tokens[0],
            global_feat=glob[0],
            attention_map=attn[0].reshape(dims.grid_h, dims.grid_w),
        )

    def backward_to_input(self, image, grad_tokens, grad_global) -> np.ndarray:
        """Gradient of <tokens, grad_tokens> + <global_feat, grad_global>
        with respect to the input pixels."""
        image = self._check_image(image)
        dims = self.dims
        grad_tokens = as_tensor(grad_tokens, rank=2)
        grad_global = as_tensor(grad_global, rank=1)
        if grad_tokens.shape != (dims.n_tokens, dims.dim) or grad_global.shape != (dims.dim,):
            raise ShapeMismatchError("cotangent shapes do not match encoder output")
        patches = encode_patches(image, dims.patch)
        d_patches = kernels.backward_stack(
            patches, self._we, self._wq, self._wk, self._wv, self._wo,
            grad_tokens[None], grad_global[None],
        )
        return unpatchify(d_patches, dims.patch, dims.height, dims.width, dims.channels)


def make_ensemble(seeds, dims: EncoderDims = EncoderDims(), kind: str = "toy"):
    """Build one encoder per seed; seeds must be pairwise distinct."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    if len(set(seeds)) != len(seeds):
        raise DuplicateSeedError(f"duplicate encoder seeds in {seeds}")
    factory = REGISTRY[kind]
    return [factory(seed, dims) for seed in seeds]


# Plug-in registry: name -> factory(seed, dims) returning an object with
# .forward / .backward_to_input / .dims matching ToyEncoder's contract.
REGISTRY = {"toy": ToyEncoder}


def register(kind: str, factory) -> None:
    REGISTRY[kind] = factory


@lru_cache(maxsize=32)
def as_stack(encoders: tuple):
    """Stacked weight arrays for an all-toy ensemble, or None.

    Lets the alignment hot path run one batched kernel call instead of t
    per-encoder calls; plug-in encoders fall back to the generic path.
    """
    if not encoders:
        return None
    dims = encoders[0].dims
    for enc in encoders:
        if type(enc) is not ToyEncoder or enc.dims != dims:
            return None
    return (
        np.stack([e.patch_embed for e in encoders]),
        np.stack([e.wq for e in encoders]),
        np.stack([e.wk for e in encoders]),
        np.stack([e.wv for e in encoders]),
        np.stack([e.wo for e in encoders]),
    )
