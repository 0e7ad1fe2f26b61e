"""Word-level tokenizer, synthetic shapes-and-captions data, JSONL ingestion."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PAD, CLS, MASK, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[MASK]", "[UNK]")

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle", "cross")
QUADRANTS = ("top left", "top right", "bottom left", "bottom right")
RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
QUESTIONS = {
    "color": "what color is the shape",
    "shape": "what shape is in the image",
    "where": "where is the shape",
}


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    """Token <-> id map. Ids 0-3 are reserved for PAD, CLS, MASK, UNK."""

    def __init__(self, words: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED) + list(words)
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi and self.stoi[word] >= len(RESERVED)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK)

    @property
    def words(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls([line for line in text.split("\n") if line])


def build_vocab(corpus: Iterable[str], min_count: float = 1) -> Vocab:
    """Vocabulary of lowercase whitespace tokens seen at least ``min_count`` times.

    Ordering is by count descending, then token ascending, so the result does
    not depend on corpus order.
    """
    counts: Counter[str] = Counter()
    n = 0
    for caption in corpus:
        counts.update(tokenize(caption))
        n += 1
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [w for w, c in counts.items() if c >= min_count and w not in RESERVED]
    kept.sort(key=lambda w: (-counts[w], w))
    return Vocab(kept)


def encode(caption: str, vocab: Vocab, m_max: int) -> tuple[np.ndarray, np.ndarray]:
    """``[CLS] + word ids``, truncated/padded to ``m_max``.

    Returns ``(ids, pad_mask)`` where ``pad_mask`` is True at PAD positions.
    """
    if m_max < 2:
        raise ValueError("m_max must be at least 2")
    ids = [CLS] + [vocab.id(w) for w in tokenize(caption)]
    ids = ids[:m_max]
    out = np.full(m_max, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    pad = np.ones(m_max, dtype=bool)
    pad[: len(ids)] = False
    return out, pad


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i in (PAD, CLS):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# records and batches
# ---------------------------------------------------------------------------


@dataclass
class SceneParams:
    shape: str
    color: str
    quadrant: str
    seed: int

    @property
    def quadrant_index(self) -> int:
        return QUADRANTS.index(self.quadrant)


@dataclass
class CaptionedImage:
    """One image-caption pair. ``image`` is H x W x C float32 in [0, 1]."""

    id: str
    image: np.ndarray
    caption: str
    scene: SceneParams | None = None


@dataclass
class MultimodalBatch:
    images: np.ndarray  # [B, H, W, C]
    ids: np.ndarray  # [B, T] int64, CLS at position 0
    pad_mask: np.ndarray  # [B, T] bool, True at PAD
    records: list[CaptionedImage] = field(default_factory=list)

    def __len__(self) -> int:
        return self.images.shape[0]


def collate(records: Sequence[CaptionedImage], vocab: Vocab, m_max: int) -> MultimodalBatch:
    encoded = [encode(r.caption, vocab, m_max) for r in records]
    return MultimodalBatch(
        images=np.stack([r.image for r in records]).astype(np.float32),
        ids=np.stack([e[0] for e in encoded]),
        pad_mask=np.stack([e[1] for e in encoded]),
        records=list(records),
    )


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def caption_for(scene: SceneParams) -> str:
    return f"a {scene.color} {scene.shape} in the {scene.quadrant}"


def synthetic_corpus() -> list[str]:
    """Every caption and question the synthetic tasks can emit (vocab seed)."""
    texts = [
        caption_for(SceneParams(s, c, q, 0)) for s in SHAPES for c in COLORS for q in QUADRANTS
    ]
    texts += list(QUESTIONS.values())
    texts += [f"both images contain a {c} shape" for c in COLORS]
    return texts


def answer_table() -> list[str]:
    return list(COLORS) + list(SHAPES) + list(QUADRANTS)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float32) / np.float32(255.0)


def _shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = size / 2.0
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c * c
    if shape == "triangle":
        # apex at the top centre, base along the bottom row
        return np.abs(xx - c) <= yy / 2.0
    if shape == "cross":
        arm = max(size // 3, 1)
        lo = (size - arm) // 2
        band = np.zeros(size, dtype=bool)
        band[lo: lo + arm] = True
        return band[:, None] | band[None, :]
    raise ValueError(f"unknown shape {shape!r}")


def render(scene: SceneParams, image_size: int = 32, channels: int = 3) -> np.ndarray:
    """Draw one shape inside its quadrant on a dim noisy background."""
    if channels != 3:
        raise ValueError("synthetic images are RGB")
    rng = np.random.default_rng(scene.seed)
    half = image_size // 2
    img = rng.uniform(0.0, 0.1, size=(image_size, image_size, 3))
    size = int(rng.integers(max(half // 2, 2), half - 1))
    row, col = divmod(scene.quadrant_index, 2)
    y0 = row * half + int(rng.integers(1, half - size))
    x0 = col * half + int(rng.integers(1, half - size))
    mask = _shape_mask(scene.shape, size)
    shade = rng.uniform(0.85, 1.0)
    color = np.asarray(RGB[scene.color]) * shade
    patch = img[y0: y0 + size, x0: x0 + size]
    patch[mask] = color
    return _from_uint8(_to_uint8(img))


def sample_scene(rng: np.random.Generator) -> SceneParams:
    return SceneParams(
        shape=SHAPES[rng.integers(len(SHAPES))],
        color=COLORS[rng.integers(len(COLORS))],
        quadrant=QUADRANTS[rng.integers(len(QUADRANTS))],
        seed=int(rng.integers(2**31)),
    )


def make_record(scene: SceneParams, idx: int, image_size: int = 32) -> CaptionedImage:
    return CaptionedImage(id=f"syn-{scene.seed:010d}-{idx}", image=render(scene, image_size),
                          caption=caption_for(scene), scene=scene)


def generate_synthetic(n: int, seed: int, image_size: int = 32) -> list[CaptionedImage]:
    """``n`` random shape images with truthful captions, a pure function of ``seed``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    return [make_record(sample_scene(rng), i, image_size) for i in range(n)]


# ---------------------------------------------------------------------------
# image files and JSONL manifests
# ---------------------------------------------------------------------------


def read_image(path: str | Path, image_size: int) -> np.ndarray:
    """Read a PPM/PNG, scale the short side to ``image_size`` (nearest), centre-crop."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        if (w, h) != (image_size, image_size):
            scale = image_size / min(w, h)
            nw, nh = max(image_size, round(w * scale)), max(image_size, round(h * scale))
            im = im.resize((nw, nh), Image.NEAREST)
            left, top = (nw - image_size) // 2, (nh - image_size) // 2
            im = im.crop((left, top, left + image_size, top + image_size))
        return _from_uint8(np.asarray(im))


def write_image(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(_to_uint8(image)).save(path)


@dataclass
class RecordError:
    line: int
    id: str | None
    message: str


class JsonlDataset:
    """Streams records from a manifest of ``{"id", "image", "caption"}`` lines.

    Bad lines are skipped and appended to ``errors`` instead of aborting the
    stream. Iterating again re-reads the file.
    """

    KEYS = {"id", "image", "caption"}

    def __init__(self, manifest: str | Path, image_root: str | Path | None = None, image_size: int = 32):
        self.manifest = Path(manifest)
        self.image_root = Path(image_root) if image_root is not None else self.manifest.parent
        self.image_size = image_size
        self.errors: list[RecordError] = []

    def __iter__(self) -> Iterator[CaptionedImage]:
        self.errors = []
        with open(self.manifest, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    self._report(RecordError(lineno, None, f"parse error: {exc.msg}"))
                    continue
                if not isinstance(obj, dict) or set(obj) != self.KEYS:
                    self._report(RecordError(lineno, None, f"expected keys {sorted(self.KEYS)}"))
                    continue
                path = self.image_root / obj["image"]
                try:
                    image = read_image(path, self.image_size)
                except (OSError, ValueError) as exc:
                    self._report(RecordError(lineno, str(obj["id"]), f"image error: {exc}"))
                    continue
                yield CaptionedImage(id=str(obj["id"]), image=image, caption=str(obj["caption"]))

    def _report(self, err: RecordError) -> None:
        logger.warning("manifest %s line %d (id=%s): %s", self.manifest, err.line, err.id, err.message)
        self.errors.append(err)


def load_jsonl(manifest_path: str | Path, image_root: str | Path | None = None,
               image_size: int = 32) -> JsonlDataset:
    return JsonlDataset(manifest_path, image_root, image_size)


def export_jsonl(records: Iterable[CaptionedImage], out_dir: str | Path,
                 manifest_name: str = "manifest.jsonl") -> Path:
    """Write records as PNG files plus a manifest readable by :func:`load_jsonl`."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", encoding="utf-8") as fh:
        for rec in records:
            rel = f"images/{rec.id}.png"
            write_image(out_dir / rel, rec.image)
            fh.write(json.dumps({"id": rec.id, "image": rel, "caption": rec.caption}) + "\n")
    return manifest


def save_answers(path: str | Path, answers: Sequence[str]) -> None:
    Path(path).write_text("".join(a + "\n" for a in answers), encoding="utf-8")


def load_answers(path: str | Path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").split("\n") if line]


def vocab_for_synthetic(min_count: float = 1) -> Vocab:
    return build_vocab(synthetic_corpus(), min_count)
