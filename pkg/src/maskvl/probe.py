"""Retrieval metrics and read-only probes of patch/word representations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .data import CLS, PAD, CaptionedImage, Vocab, encode
from .objectives import PretrainModel
from .tensor import no_grad

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# recall@K
# ---------------------------------------------------------------------------


@dataclass
class RetrievalResult:
    ranked: np.ndarray  # [queries, candidates] candidate ids, best first
    recall_at: dict[int, float]


def rank_candidates(scores: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending; equal scores keep ascending index order."""
    scores = np.asarray(scores)
    return np.argsort(-scores, axis=1, kind="stable")


def recall_at_k(scores: np.ndarray, truth: Sequence[int], ks: Iterable[int] = (1, 5, 10),
                candidate_ids: Sequence | None = None) -> RetrievalResult:
    scores = np.asarray(scores, dtype=np.float64)
    Q, C = scores.shape
    ids = np.arange(C) if candidate_ids is None else np.asarray(candidate_ids)
    if len(ids) != C:
        raise ValueError(f"{len(ids)} candidate ids for {C} score columns")
    lookup = {cid: j for j, cid in enumerate(ids.tolist())}
    truth = list(truth)
    if len(truth) != Q:
        raise ValueError(f"{len(truth)} truths for {Q} queries")
    cols = []
    for t in truth:
        key = t.item() if isinstance(t, np.generic) else t
        if key not in lookup:
            raise KeyError(f"truth id {t!r} is not among the candidates")
        cols.append(lookup[key])
    order = rank_candidates(scores)
    position = np.argmax(order == np.asarray(cols)[:, None], axis=1)
    recall = {int(k): float((position < k).mean()) for k in ks}
    return RetrievalResult(ranked=ids[order], recall_at=recall)


# ---------------------------------------------------------------------------
# similarity probes
# ---------------------------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Cosine similarity of the last axis, broadcasting leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    num = (a * b).sum(-1)
    den = np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1), eps)
    return np.clip(num / den, -1.0, 1.0)


SIMILARITIES = ("cosine", "centered-cosine", "attention")


@dataclass
class AlignmentMap:
    word: str
    grid: np.ndarray  # [H/P, W/P]
    normalization: dict = field(default_factory=lambda: {"similarity": "cosine", "layer": "final"})


def contextual_states(model: PretrainModel, image: np.ndarray, ids: np.ndarray, pad: np.ndarray,
                      keep_attention: bool = False):
    """Text states, patch states and (optionally) per-layer attention of one unmasked forward."""
    with no_grad():
        out = model.forward(image[None], ids[None], pad[None], keep_attention=keep_attention)
    attention = [a[0] for a in out.attention] if keep_attention else None
    return out.h_text.data[0], out.h_v.data[0], attention


def alignment_grid(word_state: np.ndarray, patch_states: np.ndarray, grid: tuple[int, int],
                   similarity: str = "cosine") -> np.ndarray:
    if similarity == "centered-cosine":
        # drop the component shared by every patch of the image
        centre = patch_states.mean(axis=0)
        word_state, patch_states = word_state - centre, patch_states - centre
    elif similarity != "cosine":
        raise ValueError(f"unknown similarity {similarity!r}")
    return cosine(word_state[None], patch_states).reshape(grid)


def word_patch_alignment(model: PretrainModel, vocab: Vocab, image: np.ndarray, caption: str,
                         word_index: int, similarity: str = "cosine") -> AlignmentMap:
    """Similarity between the state at token position ``word_index`` and every patch state.

    Position 0 is CLS, so the first word of the caption is ``word_index=1``.
    ``similarity="attention"`` instead reads the head-averaged last-layer
    attention from the word to each patch.
    """
    if similarity not in SIMILARITIES:
        raise ValueError(f"unknown similarity {similarity!r}; expected one of {SIMILARITIES}")
    ids, pad = encode(caption, vocab, model.cfg.m_max)
    if not 0 <= word_index < len(ids) or ids[word_index] in (CLS, PAD):
        raise IndexError(f"word_index {word_index} does not address a word of {caption!r}")
    want_attn = similarity == "attention"
    h_text, h_v, attention = contextual_states(model, image, ids, pad, want_attn)
    if want_attn:
        if not attention:
            raise ValueError("attention similarity needs at least one encoder layer")
        T = len(ids)
        grid = attention[-1][:, word_index, T:].mean(axis=0).astype(np.float64).reshape(model.cfg.grid)
        layer = "last attention"
    else:
        grid = alignment_grid(h_text[word_index], h_v, model.cfg.grid, similarity)
        layer = "final"
    return AlignmentMap(word=vocab.itos[ids[word_index]], grid=grid,
                        normalization={"similarity": similarity, "layer": layer})


def top_similarity_distribution(model: PretrainModel, vocab: Vocab, dataset: Iterable[CaptionedImage],
                                nouns: Sequence[str]) -> list[tuple[str, str, float]]:
    """Max patch cosine for every (image, noun), the noun fed as a one-word caption.

    Out-of-vocabulary nouns are looked up as UNK, with a warning.
    """
    for noun in nouns:
        if noun not in vocab:
            logger.warning("noun %r is out of vocabulary; probing with UNK", noun)
    rows = []
    for rec in dataset:
        for noun in nouns:
            ids, pad = encode(noun, vocab, model.cfg.m_max)
            h_text, h_v, _ = contextual_states(model, rec.image, ids, pad)
            rows.append((rec.id, noun, float(cosine(h_text[1][None], h_v).max())))
    return rows


def similarity_histogram(rows, bins: int = 20, lo: float = -1.0, hi: float = 1.0) -> list[tuple[str, float, float, int]]:
    """Per-noun counts over fixed-width bins of ``[lo, hi]``."""
    edges = np.linspace(lo, hi, bins + 1)
    table = []
    for noun in dict.fromkeys(r[1] for r in rows):
        values = np.array([r[2] for r in rows if r[1] == noun])
        counts, _ = np.histogram(values, bins=edges)
        table.extend((noun, float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins))
    return table


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class KMeansResult:
    labels: np.ndarray
    centers: np.ndarray
    inertia_history: list[float]
    n_iter: int


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # duplicates only: fall back to any point not yet chosen
            rest = [i for i in range(n) if i not in chosen]
            nxt = int(rng.choice(rest))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from given centres. Empty clusters keep their centre."""
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).copy()
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    history = [float(_sq_dists(x, centers)[np.arange(len(x)), labels].sum())]
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(len(centers)):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        new = np.argmin(_sq_dists(x, centers), axis=1)
        history.append(float(_sq_dists(x, centers)[np.arange(len(x)), new].sum()))
        if np.array_equal(new, labels):
            break
        labels = new
    return KMeansResult(labels=labels, centers=centers, inertia_history=history, n_iter=it)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    x = np.asarray(x, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > x.shape[0]:
        raise ValueError(f"k={k} exceeds the {x.shape[0]} points")
    rng = np.random.default_rng(seed)
    return lloyd(x, kmeans_plus_plus(x, k, rng), max_iter)


def patch_states(model: PretrainModel, image: np.ndarray, caption: str | None = None,
                 vocab: Vocab | None = None) -> np.ndarray:
    """Final patch states of an unmasked forward; image-only unless a caption is given."""
    with no_grad():
        v_hat = model.embed_images(image[None])
        if caption is None:
            out = model.encoder.encode_full(None, v_hat)
        else:
            ids, pad = encode(caption, vocab, model.cfg.m_max)
            out = model.encoder.encode_full(model.token_embed(ids[None]), v_hat, pad[None])
    return out.h_v.data[0]


def cluster_patches(model: PretrainModel, image: np.ndarray, k: int, seed: int = 0,
                    caption: str | None = None, vocab: Vocab | None = None) -> np.ndarray:
    """k-means cluster id for every grid cell."""
    states = patch_states(model, image, caption, vocab)
    return kmeans(states, k, seed).labels.reshape(model.cfg.grid)


# ---------------------------------------------------------------------------
# artifact files
# ---------------------------------------------------------------------------

_PALETTE = np.array([
    [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60], [250, 190, 212],
    [0, 128, 128], [220, 190, 255], [170, 110, 40], [255, 250, 200], [128, 0, 0], [170, 255, 195],
], dtype=np.uint8)


def _upsample(grid: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(grid, factor, axis=0), factor, axis=1)


def write_tsv_grid(path: str | Path, grid: np.ndarray, header: dict | None = None) -> None:
    """Rows of tab-separated ``repr`` floats; ``#`` lines carry metadata."""
    lines = [f"# {k}={v}" for k, v in (header or {}).items()]
    lines += ["\t".join(repr(float(v)) for v in row) for row in np.asarray(grid)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_tsv_grid(path: str | Path) -> np.ndarray:
    rows = [line.split("\t") for line in Path(path).read_text(encoding="utf-8").splitlines()
            if line and not line.startswith("#")]
    return np.array([[float(v) for v in row] for row in rows], dtype=np.float64)


def write_heatmap(amap: AlignmentMap, prefix: str | Path, image: np.ndarray | None = None,
                  patch: int = 8) -> dict[str, Path]:
    """Emit ``<prefix>.pgm`` (min-max scaled), ``<prefix>.tsv`` (raw) and an overlay PNG."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    g = amap.grid
    span = g.max() - g.min()
    scaled = np.zeros_like(g) if span == 0 else (g - g.min()) / span
    gray = np.round(_upsample(scaled, patch) * 255).astype(np.uint8)
    paths = {"pgm": prefix.with_suffix(".pgm"), "tsv": prefix.with_suffix(".tsv")}
    Image.fromarray(gray, mode="L").save(paths["pgm"])
    meta = dict(amap.normalization, word=amap.word, min=repr(float(g.min())), max=repr(float(g.max())))
    write_tsv_grid(paths["tsv"], g, meta)
    if image is not None:
        base = np.asarray(image, dtype=np.float64)
        heat = np.stack([gray / 255.0, np.zeros_like(gray, dtype=np.float64), 1.0 - gray / 255.0], -1)
        overlay = np.round(np.clip(0.5 * base + 0.5 * heat, 0, 1) * 255).astype(np.uint8)
        paths["png"] = prefix.with_name(prefix.name + "_overlay.png")
        Image.fromarray(overlay).save(paths["png"])
    return paths


def write_cluster_map(labels: np.ndarray, path: str | Path, patch: int = 8) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = _PALETTE[_upsample(labels, patch) % len(_PALETTE)]
    Image.fromarray(rgb).save(path)
    return path


def write_histogram_tsv(path: str | Path, table) -> Path:
    path = Path(path)
    lines = ["noun\tbin_lo\tbin_hi\tcount"] + [f"{n}\t{lo!r}\t{hi!r}\t{c}" for n, lo, hi, c in table]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_similarity_rows(path: str | Path, rows) -> Path:
    path = Path(path)
    lines = ["image_id\tnoun\tmax_similarity"] + [f"{i}\t{n}\t{s!r}" for i, n, s in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path

