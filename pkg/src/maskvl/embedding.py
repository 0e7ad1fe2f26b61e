"""Modality-specific projection of patches and tokens into the shared width.

Both branches compute ``LayerNorm(content + position[i] + type)``; the
normalisation comes after the three-term sum.
"""

from __future__ import annotations

import numpy as np

from .nn import LayerNorm, Linear, Module, param, trunc_normal
from .tensor import Tensor


class CapacityError(ValueError):
    """More positions than the position table holds."""


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """Split ``[..., H, W, C]`` into ``[..., n, P*P*C]`` patches, top-left first, row-major."""
    *lead, H, W, C = images.shape
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} is not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = images.reshape(*lead, gh, patch, gw, patch, C)
    k = len(lead)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, gh * gw, patch * patch * C)


def unpatchify(patches: np.ndarray, patch: int, grid: tuple[int, int], channels: int = 3) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    *lead, n, _ = patches.shape
    gh, gw = grid
    if gh * gw != n:
        raise ValueError(f"grid {grid} does not hold {n} patches")
    k = len(lead)
    x = patches.reshape(*lead, gh, gw, patch, patch, channels)
    x = x.transpose(*range(k), k, k + 2, k + 1, k + 3, k + 4)
    return x.reshape(*lead, gh * patch, gw * patch, channels)


class PatchEmbedder(Module):
    def __init__(self, patch: int, channels: int, d: int, n_max: int, rng: np.random.Generator):
        self.patch = patch
        self.channels = channels
        self.proj = Linear(patch * patch * channels, d, rng)
        self.pos = param(trunc_normal(rng, (n_max, d)))
        self.type = param(trunc_normal(rng, (d,)))
        self.norm = LayerNorm(d)

    @property
    def n_max(self) -> int:
        return self.pos.shape[0]

    def __call__(self, patches: np.ndarray | Tensor) -> Tensor:
        """``[B, n, P*P*C]`` patches to ``[B, n, d]``; position index = patch index."""
        x = patches if isinstance(patches, Tensor) else Tensor(patches)
        n = x.shape[-2]
        if n > self.n_max:
            raise CapacityError(f"{n} patches exceed position table of {self.n_max}")
        return self.norm(self.proj(x) + self.pos[:n] + self.type)


class TokenEmbedder(Module):
    def __init__(self, vocab_size: int, d: int, m_max: int, rng: np.random.Generator):
        self.table = param(trunc_normal(rng, (vocab_size, d)))
        self.pos = param(trunc_normal(rng, (m_max, d)))
        self.type = param(trunc_normal(rng, (d,)))
        self.norm = LayerNorm(d)

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def __call__(self, ids: np.ndarray) -> Tensor:
        """``[B, T]`` ids to ``[B, T, d]``. PAD rows are produced; attention masks them."""
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id out of range [0, {self.vocab_size})")
        T = ids.shape[-1]
        if T > self.pos.shape[0]:
            raise CapacityError(f"{T} tokens exceed position table of {self.pos.shape[0]}")
        return self.norm(self.table[ids] + self.pos[:T] + self.type)


def embed_patches(patches, embedder: PatchEmbedder) -> Tensor:
    return embedder(patches)


def embed_tokens(ids, embedder: TokenEmbedder) -> Tensor:
    return embedder(ids)
