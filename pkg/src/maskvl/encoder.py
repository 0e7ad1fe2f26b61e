"""Single-stream encoder over the concatenated token + kept-patch sequence."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import NEG_INF, Block, LayerNorm, Module, block_param_count
from .tensor import Tensor, concat, getitem

IMAGE_MASK_RATIO = 0.6
TEXT_MASK_PROB = 0.15


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    n_max: int = 16
    m_max: int = 16

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.layers < 0:
            raise ValueError("layers must be >= 0")


@dataclass
class MaskPlan:
    """Per-sample masking decisions for a batch.

    ``text_mask`` marks tokens replaced by MASK (never CLS or PAD).
    ``image_kept`` / ``image_masked`` partition ``range(n)`` for every row.
    """

    text_mask: np.ndarray  # [B, T] bool
    image_kept: np.ndarray  # [B, n_kept] int
    image_masked: np.ndarray  # [B, n_masked] int

    @property
    def batch_size(self) -> int:
        return self.image_kept.shape[0]

    @property
    def n_kept(self) -> int:
        return self.image_kept.shape[1]

    @property
    def n_masked(self) -> int:
        return self.image_masked.shape[1]

    @classmethod
    def empty(cls, batch: int, n: int, m: int) -> "MaskPlan":
        return cls(
            text_mask=np.zeros((batch, m), dtype=bool),
            image_kept=np.tile(np.arange(n), (batch, 1)),
            image_masked=np.zeros((batch, 0), dtype=np.int64),
        )

    def restore_index(self) -> np.ndarray:
        """For every original patch position, its slot in ``[kept..., masked...]``."""
        order = np.concatenate([self.image_kept, self.image_masked], axis=1)
        return np.argsort(order, axis=1)


def make_mask_plan(n: int, pad_mask: np.ndarray, rng: np.random.Generator,
                   image_ratio: float = IMAGE_MASK_RATIO, text_prob: float = TEXT_MASK_PROB) -> MaskPlan:
    """Draw a mask plan for ``pad_mask.shape[0]`` samples of ``n`` patches.

    Images lose exactly ``round(image_ratio * n)`` patches (seeded shuffle).
    Text tokens are masked i.i.d. with ``text_prob``; if the whole batch drew
    no target while one was possible, the text draw is repeated.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pad_mask = np.atleast_2d(np.asarray(pad_mask, dtype=bool))
    B, T = pad_mask.shape
    n_mask = int(round(image_ratio * n))
    kept = np.empty((B, n - n_mask), dtype=np.int64)
    masked = np.empty((B, n_mask), dtype=np.int64)
    for b in range(B):
        perm = rng.permutation(n)
        masked[b] = np.sort(perm[:n_mask])
        kept[b] = np.sort(perm[n_mask:])

    eligible = ~pad_mask
    eligible[:, 0] = False
    text_mask = np.zeros((B, T), dtype=bool)
    if text_prob > 0 and eligible.any():
        while True:
            text_mask = (rng.random((B, T)) < text_prob) & eligible
            if text_mask.any():
                break
    return MaskPlan(text_mask=text_mask, image_kept=kept, image_masked=masked)


@dataclass
class EncoderOutput:
    h_text: Tensor | None  # [B, T, d]; row 0 is CLS
    h_v: Tensor  # [B, n_kept, d], ordered as ``kept``
    kept: np.ndarray  # [B, n_kept] original patch positions
    attention: list[np.ndarray] | None = None

    @property
    def h_cls(self) -> Tensor:
        return self.h_text[:, 0]

    @property
    def h_w(self) -> Tensor:
        return self.h_text[:, 1:]

    @property
    def sequence_length(self) -> int:
        t = 0 if self.h_text is None else self.h_text.shape[1]
        return t + self.h_v.shape[1]


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [Block(cfg.width, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.width) if cfg.layers else None

    def encode(self, w_hat: Tensor | None, v_hat: Tensor, plan: MaskPlan,
               pad_mask: np.ndarray | None = None, keep_attention: bool = False) -> EncoderOutput:
        """Run the blocks over ``{w_hat, v_hat[kept]}``; masked patches are left out entirely."""
        B, n, d = v_hat.shape
        if d != self.cfg.width:
            raise ValueError(f"patch width {d} != encoder width {self.cfg.width}")
        if plan.batch_size != B:
            raise ValueError(f"plan is for {plan.batch_size} samples, batch has {B}")
        if plan.image_kept.size and (plan.image_kept.min() < 0 or plan.image_kept.max() >= n):
            raise IndexError(f"plan references patch outside [0, {n})")
        rows = np.arange(B)[:, None]
        v_kept = getitem(v_hat, (rows, plan.image_kept))

        bias_parts = []
        if w_hat is not None:
            if w_hat.shape[0] != B or w_hat.shape[2] != d:
                raise ValueError(f"token states {w_hat.shape} do not match patch states {v_hat.shape}")
            T = w_hat.shape[1]
            pad = np.zeros((B, T), dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
            if pad.shape != (B, T):
                raise ValueError(f"pad mask {pad.shape} does not match tokens {(B, T)}")
            bias_parts.append(np.where(pad, NEG_INF, 0.0))
            x = concat([w_hat, v_kept], axis=1)
        else:
            T = 0
            x = v_kept
        bias_parts.append(np.zeros((B, plan.n_kept)))
        key_bias = np.concatenate(bias_parts, axis=1)

        attention = [] if keep_attention else None
        for block in self.blocks:
            x = block(x, key_bias, keep_attention)
            if keep_attention:
                attention.append(block.attn.last_weights)
        if self.norm is not None:
            x = self.norm(x)
        h_text = x[:, :T] if T else None
        h_v = x[:, T:] if T else x
        return EncoderOutput(h_text=h_text, h_v=h_v, kept=plan.image_kept, attention=attention)

    def encode_full(self, w_hat: Tensor | None, v_hat: Tensor, pad_mask: np.ndarray | None = None,
                    keep_attention: bool = False) -> EncoderOutput:
        T = 0 if w_hat is None else w_hat.shape[1]
        plan = MaskPlan.empty(v_hat.shape[0], v_hat.shape[1], T)
        return self.encode(w_hat, v_hat, plan, pad_mask, keep_attention)


def encoder_param_count(layers: int, width: int, mlp_ratio: int, patch_dim: int, n_max: int) -> int:
    """Closed-form parameter count of the visual path plus shared blocks.

    Counts the patch projection, patch position/type embeddings and their
    norm, ``layers`` blocks and the final norm. Text embeddings and
    pretraining heads are excluded.
    """
    patch_side = patch_dim * width + width + n_max * width + width + 2 * width
    final_norm = 2 * width if layers else 0
    return patch_side + layers * block_param_count(width, mlp_ratio) + final_norm
