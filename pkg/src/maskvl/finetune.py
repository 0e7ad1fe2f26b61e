"""Task heads on top of a pretrained encoder: VQA, NLVR pairs, retrieval."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .data import (
    COLORS,
    QUESTIONS,
    CaptionedImage,
    Vocab,
    answer_table,
    encode,
    generate_synthetic,
)
from .nn import Linear, Module
from .objectives import ItmHead, PretrainModel, nll
from .tensor import Tensor, concat, gelu, log_sigmoid

BACKBONE_PREFIXES = ("patch_embed", "token_embed", "encoder")


class MlpHead(Module):
    """Affine -> GELU -> affine."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    @property
    def out_features(self) -> int:
        return self.fc2.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class RetrievalHead(Module):
    """Single matching logit, initialised from the ITM head's "matched" column."""

    def __init__(self, itm: ItmHead):
        self.proj = Linear(itm.proj.weight.shape[0], 1, np.random.default_rng(0))
        self.proj.weight.data = itm.proj.weight.data[:, 1:2].copy()
        self.proj.bias.data = itm.proj.bias.data[1:2].copy()

    def __call__(self, h_cls: Tensor) -> Tensor:
        return self.proj(h_cls).reshape(-1)


def backbone_parameters(model: PretrainModel) -> dict[str, Tensor]:
    return {n: p for n, p in model.named_parameters() if n.split(".")[0] in BACKBONE_PREFIXES}


def encode_texts(texts, vocab: Vocab, m_max: int) -> tuple[np.ndarray, np.ndarray]:
    enc = [encode(t, vocab, m_max) for t in texts]
    return np.stack([e[0] for e in enc]), np.stack([e[1] for e in enc])


# ---------------------------------------------------------------------------
# VQA
# ---------------------------------------------------------------------------


def vqa_forward(model: PretrainModel, head: MlpHead, images, question_ids, pad_mask) -> Tensor:
    """Multilabel answer scores ``[B, K]`` from the CLS state."""
    return head(model.forward(images, question_ids, pad_mask).h_cls)


def vqa_loss(scores: Tensor, soft_targets: np.ndarray) -> Tensor:
    """Per-class binary NLL against soft targets in [0, 1], averaged over all entries."""
    t = Tensor(np.asarray(soft_targets, dtype=scores.dtype))
    return -(t * log_sigmoid(scores) + (1.0 - t) * log_sigmoid(-scores)).mean()


@dataclass
class VqaSample:
    image: np.ndarray
    question: str
    answer: int
    kind: str


def make_vqa_samples(n: int, seed: int, kinds=("color",), image_size: int = 32) -> list[VqaSample]:
    """Closed-set questions about the synthetic shape; answers index :func:`answer_table`."""
    answers = answer_table()
    rng = np.random.default_rng(seed)
    out = []
    for rec in generate_synthetic(n, seed, image_size):
        kind = kinds[int(rng.integers(len(kinds)))]
        truth = {"color": rec.scene.color, "shape": rec.scene.shape, "where": rec.scene.quadrant}[kind]
        out.append(VqaSample(rec.image, QUESTIONS[kind], answers.index(truth), kind))
    return out


def check_answer_table(head: MlpHead, answers) -> None:
    if head.out_features != len(answers):
        raise ConfigError(f"head predicts {head.out_features} classes, answer table has {len(answers)}")


# ---------------------------------------------------------------------------
# NLVR pair method
# ---------------------------------------------------------------------------


@dataclass
class PairSample:
    image_a: np.ndarray
    image_b: np.ndarray
    caption: str
    label: bool


def pair_representation(model: PretrainModel, images_a, images_b, ids, pad_mask) -> Tensor:
    """Concatenate the CLS states of (caption, image_a) and (caption, image_b)."""
    h_a = model.forward(images_a, ids, pad_mask).h_cls
    h_b = model.forward(images_b, ids, pad_mask).h_cls
    return concat([h_a, h_b], axis=-1)


def nlvr_forward(model: PretrainModel, head: MlpHead, images_a, images_b, ids, pad_mask) -> Tensor:
    return head(pair_representation(model, images_a, images_b, ids, pad_mask))


def make_nlvr_samples(n: int, seed: int, image_size: int = 32, colors=COLORS) -> list[PairSample]:
    """Pairs captioned "both images contain a <color> shape", half of them true."""
    rng = np.random.default_rng(seed)
    pool = generate_synthetic(max(4 * n, 64), seed + 1, image_size)
    by_color = {c: [r for r in pool if r.scene.color == c] for c in COLORS}
    out = []
    for i in range(n):
        color = colors[int(rng.integers(len(colors)))]
        same = by_color[color]
        other = [r for r in pool if r.scene.color != color]
        if i % 2 == 0:
            a, b = same[rng.integers(len(same))], same[rng.integers(len(same))]
        else:
            a = same[rng.integers(len(same))] if rng.random() < 0.5 else other[rng.integers(len(other))]
            b = other[rng.integers(len(other))]
            if rng.random() < 0.5:
                a, b = b, a
        label = a.scene.color == color and b.scene.color == color
        out.append(PairSample(a.image, b.image, f"both images contain a {color} shape", label))
    return out


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------


def retrieval_score(model: PretrainModel, head: RetrievalHead, images, ids, pad_mask) -> Tensor:
    return head(model.forward(images, ids, pad_mask).h_cls)


def retrieval_loss(scores: Tensor) -> Tensor:
    """Softmax cross-entropy over ``[B, 1 + negatives]`` scores; column 0 is the positive."""
    if scores.shape[-1] < 2:
        raise ValueError("retrieval fine-tuning needs at least one negative")
    return nll(scores, np.zeros(scores.shape[0], dtype=np.int64))


def retrieval_finetune_step(model: PretrainModel, head: RetrievalHead, anchor_images: np.ndarray,
                            pos_ids: np.ndarray, pos_pad: np.ndarray,
                            neg_ids: np.ndarray, neg_pad: np.ndarray) -> Tensor:
    """Loss for anchors ``[B, H, W, C]`` against 1 positive and ``K`` negative captions each.

    ``neg_ids`` is ``[B, K, T]``. Every caption is scored with its anchor image.
    """
    neg_ids = np.asarray(neg_ids)
    if neg_ids.ndim != 3 or neg_ids.shape[1] < 1:
        raise ValueError("need at least one negative caption per anchor")
    B, K, T = neg_ids.shape
    ids = np.concatenate([np.asarray(pos_ids)[:, None], neg_ids], axis=1).reshape(B * (K + 1), T)
    pad = np.concatenate([np.asarray(pos_pad)[:, None], neg_pad], axis=1).reshape(B * (K + 1), T)
    images = np.repeat(anchor_images, K + 1, axis=0)
    scores = retrieval_score(model, head, images, ids, pad).reshape(B, K + 1)
    return retrieval_loss(scores)


def sample_negative_captions(records: list[CaptionedImage], anchor: int, k: int,
                             rng: np.random.Generator) -> list[str]:
    """``k`` captions from other records whose text differs from the anchor's."""
    positive = records[anchor].caption
    pool = [r.caption for i, r in enumerate(records) if i != anchor and r.caption != positive]
    if not pool:
        raise ValueError("no caption differs from the positive")
    picks = rng.choice(len(pool), size=k, replace=len(pool) < k)
    return [pool[i] for i in picks]

