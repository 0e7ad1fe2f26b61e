"""Pretraining heads and losses: masked tokens, masked patches, image-text matching."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import MaskConfig, ModelConfig
from .data import MASK, RESERVED, MultimodalBatch
from .embedding import PatchEmbedder, TokenEmbedder, patchify
from .encoder import Encoder, EncoderConfig, EncoderOutput, MaskPlan, make_mask_plan
from .nn import Block, LayerNorm, Linear, Module, param, trunc_normal
from .tensor import Tensor, concat, getitem, log_softmax

logger = logging.getLogger(__name__)


class MlmHead(Module):
    def __init__(self, d: int, vocab_size: int, rng: np.random.Generator):
        self.proj = Linear(d, vocab_size, rng)

    def __call__(self, h: Tensor) -> Tensor:
        return self.proj(h)


class ItmHead(Module):
    """Two-way classifier on the CLS state; column 1 is "matched"."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.proj = Linear(d, 2, rng)

    def __call__(self, h_cls: Tensor) -> Tensor:
        return self.proj(h_cls)


class MimDecoder(Module):
    """Light transformer that regresses raw pixels for masked patches.

    Input is the kept-patch states (adapted to the decoder width) scattered
    back to their grid slots, with a learned mask embedding everywhere else,
    plus the decoder's own position table.
    """

    def __init__(self, d: int, d_dec: int, layers: int, heads: int, n_max: int,
                 patch_dim: int, rng: np.random.Generator):
        self.adapter = Linear(d, d_dec, rng)
        self.mask_token = param(trunc_normal(rng, (d_dec,)))
        self.pos = param(trunc_normal(rng, (n_max, d_dec)))
        self.blocks = [Block(d_dec, heads, 4, rng) for _ in range(layers)]
        self.norm = LayerNorm(d_dec)
        self.head = Linear(d_dec, patch_dim, rng)

    def __call__(self, h_v: Tensor, plan: MaskPlan) -> Tensor:
        """Pixel predictions ``[B, n_masked, patch_dim]`` in ``plan.image_masked`` order."""
        B = h_v.shape[0]
        x = self.adapter(h_v)
        fill = Tensor(np.zeros((B, plan.n_masked, x.shape[-1]), dtype=x.dtype)) + self.mask_token
        rows = np.arange(B)[:, None]
        x = getitem(concat([x, fill], axis=1), (rows, plan.restore_index()))
        x = x + self.pos[: x.shape[1]]
        for block in self.blocks:
            x = block(x)
        x = getitem(self.norm(x), (rows, plan.image_masked))
        return self.head(x)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def nll(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    return -getitem(logp, (np.arange(targets.shape[0]), targets)).mean()


def mlm_loss(h_text: Tensor, plan: MaskPlan, target_ids: np.ndarray, head: MlmHead) -> Tensor:
    """Mean NLL over masked text positions; other positions do not contribute."""
    b_idx, t_idx = np.nonzero(plan.text_mask)
    if b_idx.size == 0:
        raise ValueError("mlm_loss needs at least one masked token")
    h = getitem(h_text, (b_idx, t_idx))
    return nll(head(h), np.asarray(target_ids)[b_idx, t_idx])


def patch_targets(images: np.ndarray, patch: int, normalize: bool = False) -> np.ndarray:
    target = patchify(images, patch)
    if normalize:
        mu = target.mean(axis=-1, keepdims=True)
        var = target.var(axis=-1, keepdims=True)
        target = (target - mu) / np.sqrt(var + 1e-6)
    return target.astype(np.float32)


def mim_loss(h_v: Tensor, plan: MaskPlan, target_patches: np.ndarray, decoder: MimDecoder) -> Tensor:
    """Mean over masked patches of the per-patch mean squared pixel error."""
    if plan.n_masked == 0:
        raise ValueError("mim_loss needs at least one masked patch")
    pred = decoder(h_v, plan)
    rows = np.arange(plan.batch_size)[:, None]
    target = Tensor(np.asarray(target_patches)[rows, plan.image_masked].astype(pred.dtype))
    diff = pred - target
    return (diff * diff).mean()


def itm_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    return nll(logits, labels)


@dataclass
class ItmBatch:
    images: np.ndarray
    ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray  # 1 = aligned pair
    source: np.ndarray  # index of the image actually shown
    degenerate: bool = False


def itm_negatives(batch: MultimodalBatch, rng: np.random.Generator, swap_prob: float = 0.5) -> ItmBatch:
    """With probability ``swap_prob`` give each caption a different in-batch image."""
    B = len(batch)
    source = np.arange(B)
    labels = np.ones(B, dtype=np.int64)
    if B < 2:
        logger.warning("ITM batch of one cannot form a negative; keeping the positive")
        return ItmBatch(batch.images, batch.ids, batch.pad_mask, labels, source, degenerate=True)
    for i in range(B):
        if rng.random() < swap_prob:
            j = int(rng.integers(B - 1))
            source[i] = j + (j >= i)
            labels[i] = 0
    return ItmBatch(batch.images[source], batch.ids, batch.pad_mask, labels, source)


def corrupt_tokens(ids: np.ndarray, plan: MaskPlan, vocab_size: int, rng: np.random.Generator,
                   bert_mix: bool = False) -> np.ndarray:
    """Replace masked tokens by MASK (or the 80/10/10 mix when ``bert_mix``)."""
    out = np.array(ids, copy=True)
    if not bert_mix:
        out[plan.text_mask] = MASK
        return out
    u = rng.random(out.shape)
    random_ids = rng.integers(len(RESERVED), max(vocab_size, len(RESERVED) + 1), size=out.shape)
    out[plan.text_mask & (u < 0.8)] = MASK
    swap = plan.text_mask & (u >= 0.8) & (u < 0.9)
    out[swap] = random_ids[swap]
    return out


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class PretrainLosses:
    l_mlm: Tensor | None
    l_mim: Tensor | None
    l_itm: Tensor | None
    total: Tensor
    itm_accuracy: float = float("nan")

    def values(self) -> dict[str, float]:
        out = {}
        for key in ("l_mlm", "l_mim", "l_itm", "total"):
            t = getattr(self, key)
            out[key] = float("nan") if t is None else t.item()
        return out


class PretrainModel(Module):
    """Embedders, shared encoder and the three pretraining heads."""

    def __init__(self, cfg: ModelConfig, vocab_size: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        n = cfg.n_patches
        self.patch_embed = PatchEmbedder(cfg.patch, cfg.channels, cfg.width, n, rng)
        self.token_embed = TokenEmbedder(vocab_size, cfg.width, cfg.m_max, rng)
        self.encoder = Encoder(self.encoder_config, rng)
        self.mlm_head = MlmHead(cfg.width, vocab_size, rng)
        self.mim_decoder = MimDecoder(cfg.width, cfg.dec_width, cfg.dec_layers, cfg.dec_heads, n,
                                      cfg.patch_dim, rng)
        self.itm_head = ItmHead(cfg.width, rng)

    @property
    def encoder_config(self) -> EncoderConfig:
        c = self.cfg
        return EncoderConfig(layers=c.layers, width=c.width, heads=c.heads, mlp_ratio=c.mlp_ratio,
                             n_max=c.n_patches, m_max=c.m_max)

    @property
    def vocab_size(self) -> int:
        return self.token_embed.vocab_size

    def embed_images(self, images: np.ndarray) -> Tensor:
        return self.patch_embed(patchify(np.asarray(images, dtype=self.patch_embed.proj.weight.dtype),
                                         self.cfg.patch))

    def forward(self, images: np.ndarray, ids: np.ndarray, pad_mask: np.ndarray,
                plan: MaskPlan | None = None, keep_attention: bool = False) -> EncoderOutput:
        v_hat = self.embed_images(images)
        w_hat = self.token_embed(ids)
        if plan is None:
            return self.encoder.encode_full(w_hat, v_hat, pad_mask, keep_attention)
        return self.encoder.encode(w_hat, v_hat, plan, pad_mask, keep_attention)

    def itm_logits(self, images: np.ndarray, ids: np.ndarray, pad_mask: np.ndarray) -> Tensor:
        return self.itm_head(self.forward(images, ids, pad_mask).h_cls)

    def mim_only_loss(self, images: np.ndarray, plan: MaskPlan) -> Tensor:
        """Image-only reconstruction: encoder sees the kept patches and nothing else."""
        v_hat = self.embed_images(images)
        out = self.encoder.encode(None, v_hat, plan)
        return mim_loss(out.h_v, plan, patch_targets(images, self.cfg.patch, self.cfg.norm_pix_loss),
                        self.mim_decoder)


def pretrain_losses(model: PretrainModel, batch: MultimodalBatch, plan: MaskPlan,
                    corrupted_ids: np.ndarray, itm: ItmBatch) -> PretrainLosses:
    """Deterministic loss evaluation given every random draw.

    One forward with the mask plan feeds the token and patch objectives; a
    second, unmasked forward over the (partly swapped) ITM batch feeds the
    matching objective. ``total`` is their unweighted sum.
    """
    l_mlm = l_mim = None
    if plan.text_mask.any() or plan.n_masked:
        out = model.forward(batch.images, corrupted_ids, batch.pad_mask, plan)
        if plan.text_mask.any():
            l_mlm = mlm_loss(out.h_text, plan, batch.ids, model.mlm_head)
        if plan.n_masked:
            targets = patch_targets(batch.images, model.cfg.patch, model.cfg.norm_pix_loss)
            l_mim = mim_loss(out.h_v, plan, targets, model.mim_decoder)
    logits = model.itm_logits(itm.images, itm.ids, itm.pad_mask)
    l_itm = itm_loss(logits, itm.labels)
    acc = float((logits.data.argmax(axis=-1) == itm.labels).mean())
    total = l_itm
    if l_mlm is not None:
        total = l_mlm + total
    if l_mim is not None:
        total = total + l_mim
    return PretrainLosses(l_mlm, l_mim, l_itm, total, acc)


def draw_pretrain_inputs(model: PretrainModel, batch: MultimodalBatch, rng: np.random.Generator,
                         mask_cfg: MaskConfig) -> tuple[MaskPlan, np.ndarray, ItmBatch]:
    plan = make_mask_plan(model.cfg.n_patches, batch.pad_mask, rng, mask_cfg.image_ratio, mask_cfg.text_prob)
    corrupted = corrupt_tokens(batch.ids, plan, model.vocab_size, rng, mask_cfg.bert_mix)
    itm = itm_negatives(batch, rng, mask_cfg.itm_swap_prob)
    return plan, corrupted, itm


def pretrain_step(batch: MultimodalBatch, model: PretrainModel, rng: np.random.Generator,
                  mask_cfg: MaskConfig | None = None) -> PretrainLosses:
    """Draw masks and negatives, evaluate all objectives, populate gradients."""
    mask_cfg = mask_cfg or MaskConfig()
    plan, corrupted, itm = draw_pretrain_inputs(model, batch, rng, mask_cfg)
    losses = pretrain_losses(model, batch, plan, corrupted, itm)
    model.zero_grad()
    losses.total.backward()
    return losses
