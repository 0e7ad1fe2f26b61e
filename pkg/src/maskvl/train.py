"""Training loops, evaluation metrics and the probe drivers behind the CLI."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import probe
from .checkpoint import Checkpoint, CheckpointError, VersionError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError
from .data import (
    COLORS,
    MASK,
    SHAPES,
    CaptionedImage,
    Vocab,
    answer_table,
    build_vocab,
    collate,
    encode,
    generate_synthetic,
    load_jsonl,
    synthetic_corpus,
    tokenize,
)
from .encoder import make_mask_plan
from .finetune import (
    BACKBONE_PREFIXES,
    MlpHead,
    RetrievalHead,
    check_answer_table,
    encode_texts,
    make_nlvr_samples,
    make_vqa_samples,
    nlvr_forward,
    retrieval_finetune_step,
    retrieval_score,
    sample_negative_captions,
    vqa_forward,
    vqa_loss,
)
from .objectives import PretrainModel, nll, patch_targets, pretrain_step
from .optim import AdamW, Schedule, layer_decay_scales
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

MIM_INIT_PREFIXES = ("patch_embed", "encoder", "mim_decoder")


# ---------------------------------------------------------------------------
# data and model construction
# ---------------------------------------------------------------------------


def load_records(cfg: Config, n: int | None = None, seed: int | None = None) -> list[CaptionedImage]:
    """Training records: synthetic (``n`` samples from ``seed``) or a JSONL manifest."""
    if cfg.data.source == "jsonl":
        ds = load_jsonl(cfg.data.manifest, cfg.data.resolved_image_root() or None, cfg.model.image_size)
        records = list(ds)
        if not records:
            raise ValueError(f"manifest {cfg.data.manifest} produced no usable records")
        return records
    n = cfg.train.num_samples if n is None else n
    seed = cfg.train.seed if seed is None else seed
    return generate_synthetic(n, seed, cfg.model.image_size)


def make_vocab(cfg: Config, records: Sequence[CaptionedImage]) -> Vocab:
    if cfg.data.source == "synthetic":
        # the fixed synthetic grammar, so every synthetic task shares one vocabulary
        return build_vocab(synthetic_corpus(), cfg.data.vocab_min_count)
    return build_vocab((r.caption for r in records), cfg.data.vocab_min_count)


def build_model(cfg: Config, vocab: Vocab, seed: int | None = None) -> PretrainModel:
    return PretrainModel(cfg.model, len(vocab), cfg.train.seed if seed is None else seed)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def _check_compatible(ckpt: Checkpoint, cfg: Config, kind: str) -> None:
    """A resume target must be the same kind of run with the same model shape."""
    if ckpt.kind != kind:
        raise VersionError(f"checkpoint kind {ckpt.kind!r}, expected {kind!r}")
    if ckpt.config.get("model") != cfg.to_dict()["model"]:
        raise VersionError("checkpoint model section differs from the config")


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[PretrainModel, Vocab, Config]:
    cfg = Config.from_dict(ckpt.config)
    vocab = Vocab(ckpt.vocab[4:])
    model = build_model(cfg, vocab)
    own = {k: v for k, v in ckpt.params.items() if not k.startswith("head.")}
    model.load_state_dict(own)
    return model, vocab, cfg


def load_init(model: PretrainModel, ckpt: Checkpoint, prefixes: Sequence[str] = MIM_INIT_PREFIXES) -> list[str]:
    """Copy matching parameters from a warm-start checkpoint; returns the names copied."""
    own = dict(model.named_parameters())
    copied = []
    for name, arr in ckpt.params.items():
        if name.split(".")[0] not in prefixes:
            continue
        if name not in own:
            raise CheckpointError(f"warm-start tensor {name} has no counterpart in the model")
        if own[name].shape != arr.shape:
            raise CheckpointError(f"warm-start tensor {name}: shape {arr.shape} != {own[name].shape}")
        own[name].data = np.array(arr, dtype=own[name].dtype)
        copied.append(name)
    return sorted(copied)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class ItmEvalSet:
    images: np.ndarray
    ids: np.ndarray
    pad_mask: np.ndarray
    labels: np.ndarray


def itm_eval_set(records: Sequence[CaptionedImage], vocab: Vocab, m_max: int, n_pairs: int,
                 seed: int = 0) -> ItmEvalSet:
    """``n_pairs`` (image, caption) pairs, alternating true and false captions.

    A false caption comes from another record whose caption text differs.
    Records are reused cyclically when ``n_pairs`` exceeds their number.
    """
    rng = np.random.default_rng(seed)
    images, texts, labels = [], [], []
    for i in range(n_pairs):
        rec = records[i % len(records)]
        if i % 2 == 0:
            texts.append(rec.caption)
            labels.append(1)
        else:
            pool = [r.caption for r in records if r.caption != rec.caption]
            texts.append(pool[int(rng.integers(len(pool)))])
            labels.append(0)
        images.append(rec.image)
    ids, pad = encode_texts(texts, vocab, m_max)
    return ItmEvalSet(np.stack(images).astype(np.float32), ids, pad, np.array(labels))


def _chunks(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(n, start + size))


def itm_accuracy(model: PretrainModel, eval_set: ItmEvalSet, batch: int = 64) -> float:
    correct = 0
    with no_grad():
        for sl in _chunks(len(eval_set.labels), batch):
            logits = model.itm_logits(eval_set.images[sl], eval_set.ids[sl], eval_set.pad_mask[sl])
            correct += int((logits.data.argmax(-1) == eval_set.labels[sl]).sum())
    return correct / len(eval_set.labels)


def mlm_accuracy(model: PretrainModel, records: Sequence[CaptionedImage], vocab: Vocab,
                 batch: int = 64) -> float:
    """Leave-one-out masked-token accuracy with the whole image visible.

    Every non-special token of every caption is masked on its own and
    predicted from the rest of the caption plus the image.
    """
    images, ids, pads, positions, targets = [], [], [], [], []
    for rec in records:
        x, pad = encode(rec.caption, vocab, model.cfg.m_max)
        for t in range(1, len(x)):
            if pad[t]:
                break
            masked = x.copy()
            masked[t] = MASK
            images.append(rec.image)
            ids.append(masked)
            pads.append(pad)
            positions.append(t)
            targets.append(x[t])
    if not targets:
        raise ValueError("no maskable tokens")
    images = np.stack(images)
    ids, pads = np.stack(ids), np.stack(pads)
    positions, targets = np.array(positions), np.array(targets)
    correct = 0
    with no_grad():
        for sl in _chunks(len(targets), batch):
            out = model.forward(images[sl], ids[sl], pads[sl])
            rows = np.arange(sl.stop - sl.start)
            logits = model.mlm_head(out.h_text[rows, positions[sl]])
            correct += int((logits.data.argmax(-1) == targets[sl]).sum())
    return correct / len(targets)


def mim_mse(model: PretrainModel, images: np.ndarray, seed: int, batch: int = 64) -> tuple[float, float]:
    """Masked-patch MSE of the decoder and of the per-image, per-channel mean-pixel predictor.

    Both are scored on the same seeded mask plans, image-only.
    """
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    sq_model = sq_base = 0.0
    count = 0
    with no_grad():
        for sl in _chunks(len(images), batch):
            imgs = np.asarray(images[sl], dtype=np.float32)
            B = len(imgs)
            plan = make_mask_plan(cfg.n_patches, np.zeros((B, 1), bool), rng, 0.6, 0.0)
            v_hat = model.embed_images(imgs)
            out = model.encoder.encode(None, v_hat, plan)
            pred = model.mim_decoder(out.h_v, plan).data
            targets = patch_targets(imgs, cfg.patch, cfg.norm_pix_loss)
            rows = np.arange(B)[:, None]
            tgt = targets[rows, plan.image_masked]
            mean = imgs.reshape(B, -1, cfg.channels).mean(axis=1)  # [B, C]
            base = np.tile(mean, cfg.patch * cfg.patch)[:, None, :]
            sq_model += float(((pred - tgt) ** 2).sum())
            sq_base += float(((base - tgt) ** 2).sum())
            count += tgt.size
    return sq_model / count, sq_base / count


def itm_scores(model: PretrainModel, images: np.ndarray, ids: np.ndarray, pad: np.ndarray,
               batch: int = 64) -> np.ndarray:
    """Matched-minus-unmatched logit for every (image, caption) pair, ``[images, captions]``."""
    I, C = len(images), len(ids)
    img_idx, cap_idx = np.meshgrid(np.arange(I), np.arange(C), indexing="ij")
    img_idx, cap_idx = img_idx.ravel(), cap_idx.ravel()
    out = np.empty(I * C)
    with no_grad():
        for sl in _chunks(I * C, batch):
            logits = model.itm_logits(images[img_idx[sl]], ids[cap_idx[sl]], pad[cap_idx[sl]]).data
            out[sl] = logits[:, 1] - logits[:, 0]
    return out.reshape(I, C)


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class StepLog:
    step: int
    lr: float
    values: dict[str, float]


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    model: PretrainModel
    vocab: Vocab
    records: list[CaptionedImage]
    history: list[StepLog] = field(default_factory=list)
    stopped_at: int | None = None


def _checkpoint(kind: str, cfg: Config, vocab: Vocab, model: PretrainModel, step: int,
                opt: AdamW | None, rng: np.random.Generator, meta: dict | None = None,
                extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    params = dict(model.state_dict())
    params.update(extra or {})
    return Checkpoint(
        kind=kind, config=cfg.to_dict(), vocab=list(vocab.itos), params=params, step=step,
        optimizer=opt.state_arrays() if opt else {}, optimizer_step=opt.state.step if opt else 0,
        rng_state=_rng_state(rng), meta=meta or {},
    )


def run_pretrain(cfg: Config, out: str | Path | None = None, resume: str | Path | None = None,
                 init: str | Path | Checkpoint | None = None,
                 callback: Callable[[int, PretrainModel], bool] | None = None,
                 records: list[CaptionedImage] | None = None,
                 max_steps: int | None = None) -> PretrainResult:
    """Multimodal pretraining on the summed token, patch and matching objectives.

    ``init`` warm-starts the visual path from an image-only checkpoint.
    ``callback(step, model)`` runs after every update and may return True to
    stop early. ``max_steps`` halts the loop (without changing the schedule),
    which is how a run is interrupted for a resume test.
    """
    records = load_records(cfg) if records is None else records
    vocab = make_vocab(cfg, records)
    model = build_model(cfg, vocab)
    opt = AdamW(dict(model.named_parameters()), cfg.optim.weight_decay,
                (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps)
    rng = np.random.default_rng(cfg.train.seed)
    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        _check_compatible(ckpt, cfg, "pretrain")
        model.load_state_dict(ckpt.params)
        opt.load_state_arrays(ckpt.optimizer, ckpt.optimizer_step)
        rng = _rng_from_state(ckpt.rng_state)
        start = ckpt.step
    elif init is not None:
        warm = init if isinstance(init, Checkpoint) else load_checkpoint(init)
        copied = load_init(model, warm)
        logger.info("warm start: copied %d tensors", len(copied))

    schedule = Schedule(cfg.optim.lr, max(cfg.train.steps, 1), cfg.optim.warmup_fraction)
    history: list[StepLog] = []
    stopped = None
    end = cfg.train.steps if max_steps is None else min(cfg.train.steps, max_steps)
    B = min(cfg.train.batch_size, len(records))
    for step in range(start, end):
        idx = rng.choice(len(records), size=B, replace=False)
        batch = collate([records[i] for i in idx], vocab, cfg.model.m_max)
        losses = pretrain_step(batch, model, rng, cfg.mask)
        lr = schedule.lr_at(step)
        opt.step(lr)
        vals = losses.values()
        vals["itm_acc"] = losses.itm_accuracy
        history.append(StepLog(step, lr, vals))
        if cfg.train.log_every and (step + 1) % cfg.train.log_every == 0:
            logger.info("step %d lr %.3g %s", step + 1, lr,
                        " ".join(f"{k}={v:.4f}" for k, v in vals.items()))
        if callback is not None and callback(step + 1, model):
            stopped = step + 1
            end = step + 1
            break
    ckpt = _checkpoint("pretrain", cfg, vocab, model, end if stopped is None else stopped, opt, rng)
    if out is not None:
        save_checkpoint(ckpt, out)
    return PretrainResult(ckpt, model, vocab, records, history, stopped)


def pretrain_mim_only(cfg: Config, out: str | Path | None = None,
                      records: list[CaptionedImage] | None = None) -> PretrainResult:
    """Image-only masked reconstruction: the encoder sees kept patches and nothing else.

    Only the patch embedder, encoder and reconstruction decoder train; the
    checkpoint still holds every parameter so it loads as a full model.
    """
    records = load_records(cfg) if records is None else records
    vocab = make_vocab(cfg, records)
    model = build_model(cfg, vocab)
    params = {n: p for n, p in model.named_parameters() if n.split(".")[0] in MIM_INIT_PREFIXES}
    opt = AdamW(params, cfg.optim.weight_decay, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps)
    rng = np.random.default_rng(cfg.train.seed)
    schedule = Schedule(cfg.optim.mim_lr, max(cfg.train.steps, 1), cfg.optim.warmup_fraction)
    images = np.stack([r.image for r in records]).astype(np.float32)
    B = min(cfg.train.batch_size, len(records))
    history = []
    for step in range(cfg.train.steps):
        idx = rng.choice(len(records), size=B, replace=False)
        plan = make_mask_plan(cfg.model.n_patches, np.zeros((B, 1), bool), rng, cfg.mask.image_ratio, 0.0)
        model.zero_grad()
        loss = model.mim_only_loss(images[idx], plan)
        loss.backward()
        lr = schedule.lr_at(step)
        opt.step(lr)
        history.append(StepLog(step, lr, {"l_mim": loss.item()}))
        if cfg.train.log_every and (step + 1) % cfg.train.log_every == 0:
            logger.info("mim step %d lr %.3g l_mim=%.5f", step + 1, lr, loss.item())
    ckpt = _checkpoint("pretrain-mim", cfg, vocab, model, cfg.train.steps, opt, rng)
    if out is not None:
        save_checkpoint(ckpt, out)
    return PretrainResult(ckpt, model, vocab, records, history)


def steps_to_itm(cfg: Config, threshold: float = 0.9, eval_every: int = 25,
                 init: Checkpoint | None = None, records: list[CaptionedImage] | None = None) -> int | None:
    """First evaluated step at which held-in ITM accuracy reaches ``threshold``; None if never."""
    records = load_records(cfg) if records is None else records
    vocab = make_vocab(cfg, records)
    eval_set = itm_eval_set(records, vocab, cfg.model.m_max, cfg.train.eval_pairs, seed=cfg.train.seed)
    hit: list[int] = []

    def check(step: int, model: PretrainModel) -> bool:
        if step % eval_every == 0 and itm_accuracy(model, eval_set) >= threshold:
            hit.append(step)
            return True
        return False

    run_pretrain(cfg, init=init, callback=check, records=records)
    return hit[0] if hit else None


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

TASKS = ("vqa", "nlvr", "retrieval")


def make_head(task: str, model: PretrainModel, cfg: Config, n_answers: int = 0):
    d = cfg.model.width
    rng = np.random.default_rng(cfg.train.seed + 1)
    if task == "vqa":
        return MlpHead(d, cfg.finetune.hidden_mult * d, n_answers, rng)
    if task == "nlvr":
        return MlpHead(2 * d, cfg.finetune.hidden_mult * d, 2, rng)
    if task == "retrieval":
        return RetrievalHead(model.itm_head)
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def finetune_optimizer(model: PretrainModel, head, cfg: Config) -> AdamW:
    """AdamW over the backbone and the task head, with layer-wise lr decay."""
    params = {n: p for n, p in model.named_parameters() if n.split(".")[0] in BACKBONE_PREFIXES}
    params.update({f"head.{n}": p for n, p in head.named_parameters()})
    scales = layer_decay_scales(list(params), cfg.model.layers, cfg.optim.layer_decay)
    return AdamW(params, cfg.optim.weight_decay, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps, scales)


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    model: PretrainModel
    head: object
    history: list[StepLog]
    metrics: dict[str, float]


def _soft_targets(answers: np.ndarray, k: int) -> np.ndarray:
    t = np.zeros((len(answers), k), dtype=np.float32)
    t[np.arange(len(answers)), answers] = 1.0
    return t


def finetune_task_data(task: str, cfg: Config, vocab: Vocab, seed: int):
    n = cfg.finetune.num_samples
    if task == "vqa":
        return make_vqa_samples(n, seed, kinds=tuple(cfg.finetune.vqa_kinds.split(",")),
                                image_size=cfg.model.image_size)
    if task == "nlvr":
        return make_nlvr_samples(n, seed, cfg.model.image_size, tuple(cfg.finetune.nlvr_colors.split(",")))
    return generate_synthetic(n, seed, cfg.model.image_size)


def _zero_unused(params: dict[str, Tensor]) -> None:
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def finetune_loss(task: str, model: PretrainModel, head, samples, idx: np.ndarray, vocab: Vocab,
                  cfg: Config, rng: np.random.Generator) -> Tensor:
    m = cfg.model.m_max
    if task == "vqa":
        batch = [samples[i] for i in idx]
        ids, pad = encode_texts([s.question for s in batch], vocab, m)
        images = np.stack([s.image for s in batch])
        scores = vqa_forward(model, head, images, ids, pad)
        return vqa_loss(scores, _soft_targets(np.array([s.answer for s in batch]), head.out_features))
    if task == "nlvr":
        batch = [samples[i] for i in idx]
        ids, pad = encode_texts([s.caption for s in batch], vocab, m)
        logits = nlvr_forward(model, head, np.stack([s.image_a for s in batch]),
                              np.stack([s.image_b for s in batch]), ids, pad)
        return nll(logits, np.array([int(s.label) for s in batch]))
    K = cfg.finetune.negatives
    pos_ids, pos_pad = encode_texts([samples[i].caption for i in idx], vocab, m)
    negs = [encode_texts(sample_negative_captions(samples, int(i), K, rng), vocab, m) for i in idx]
    neg_ids = np.stack([n[0] for n in negs])
    neg_pad = np.stack([n[1] for n in negs])
    images = np.stack([samples[i].image for i in idx])
    return retrieval_finetune_step(model, head, images, pos_ids, pos_pad, neg_ids, neg_pad)


def task_metrics(task: str, model: PretrainModel, head, samples, vocab: Vocab, cfg: Config) -> dict[str, float]:
    m = cfg.model.m_max
    with no_grad():
        if task == "vqa":
            ids, pad = encode_texts([s.question for s in samples], vocab, m)
            scores = vqa_forward(model, head, np.stack([s.image for s in samples]), ids, pad).data
            return {"vqa_accuracy": float((scores.argmax(-1) == [s.answer for s in samples]).mean())}
        if task == "nlvr":
            ids, pad = encode_texts([s.caption for s in samples], vocab, m)
            logits = nlvr_forward(model, head, np.stack([s.image_a for s in samples]),
                                  np.stack([s.image_b for s in samples]), ids, pad).data
            return {"nlvr_accuracy": float((logits.argmax(-1) == [int(s.label) for s in samples]).mean())}
    # retrieval: text -> image over distinct captions
    captions = list(dict.fromkeys(s.caption for s in samples))
    ids, pad = encode_texts(captions, vocab, m)
    images = np.stack([s.image for s in samples])
    scores = np.empty((len(samples), len(captions)))
    with no_grad():
        for i in range(len(samples)):
            reps = np.repeat(images[i:i + 1], len(captions), axis=0)
            scores[i] = retrieval_score(model, head, reps, ids, pad).data
    truth = [captions.index(s.caption) for s in samples]
    res = probe.recall_at_k(scores, truth, (1, 5, 10))
    return {f"retrieval_r@{k}": v for k, v in res.recall_at.items()}


def run_finetune(task: str, cfg: Config, init: str | Path | Checkpoint | None = None,
                 out: str | Path | None = None) -> FinetuneResult:
    """Fine-tune backbone plus a fresh task head; the pretraining heads stay frozen."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if init is not None:
        ckpt = init if isinstance(init, Checkpoint) else load_checkpoint(init)
        model, vocab, _ = model_from_checkpoint(ckpt)
    else:
        vocab = make_vocab(cfg, [])
        model = build_model(cfg, vocab)
    answers = answer_table()
    head = make_head(task, model, cfg, len(answers))
    if task == "vqa":
        check_answer_table(head, answers)
    opt = finetune_optimizer(model, head, cfg)
    rng = np.random.default_rng(cfg.train.seed)
    samples = finetune_task_data(task, cfg, vocab, cfg.train.seed)
    schedule = Schedule(cfg.optim.finetune_lr, max(cfg.finetune.steps, 1), cfg.optim.warmup_fraction)
    B = min(cfg.finetune.batch_size, len(samples))
    history = []
    for step in range(cfg.finetune.steps):
        idx = rng.choice(len(samples), size=B, replace=False)
        model.zero_grad()
        head.zero_grad()
        loss = finetune_loss(task, model, head, samples, idx, vocab, cfg, rng)
        loss.backward()
        _zero_unused(opt.params)
        lr = schedule.lr_at(step)
        opt.step(lr)
        history.append(StepLog(step, lr, {"loss": loss.item()}))
        if cfg.train.log_every and (step + 1) % cfg.train.log_every == 0:
            logger.info("%s step %d loss=%.4f", task, step + 1, loss.item())
    held_out = finetune_task_data(task, cfg, vocab, cfg.train.seed + 10_000)[:128]
    metrics = task_metrics(task, model, head, held_out, vocab, cfg)
    extra = {f"head.{n}": p.data for n, p in head.named_parameters()}
    ckpt = _checkpoint(f"finetune-{task}", cfg, vocab, model, cfg.finetune.steps, None, rng,
                       meta={"task": task, "answers": answers}, extra=extra)
    if out is not None:
        save_checkpoint(ckpt, out)
    return FinetuneResult(ckpt, model, head, history, metrics)


def head_from_checkpoint(ckpt: Checkpoint, model: PretrainModel, cfg: Config):
    task = ckpt.meta["task"]
    answers = ckpt.meta.get("answers", [])
    if task == "vqa" and ckpt.params["head.fc2.bias"].shape != (len(answers),):
        raise ConfigError(f"checkpoint head has {ckpt.params['head.fc2.bias'].shape[0]} classes, "
                          f"answer table has {len(answers)}")
    head = make_head(task, model, cfg, len(answers))
    head.load_state_dict({k[len("head."):]: v for k, v in ckpt.params.items() if k.startswith("head.")})
    return task, head


# ---------------------------------------------------------------------------
# evaluation and probe drivers
# ---------------------------------------------------------------------------


def write_metrics(metrics: dict[str, float], out_dir: str | Path, name: str = "metrics") -> tuple[Path, Path]:
    """``<name>.tsv`` with ``metric<TAB>value`` rows plus a readable ``<name>.log``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tsv = out_dir / f"{name}.tsv"
    tsv.write_text("metric\tvalue\n" + "".join(f"{k}\t{v!r}\n" for k, v in metrics.items()), encoding="utf-8")
    log = out_dir / f"{name}.log"
    width = max((len(k) for k in metrics), default=0)
    log.write_text("".join(f"{k.ljust(width)}  {v:.6f}\n" for k, v in metrics.items()), encoding="utf-8")
    return tsv, log


def read_metrics(path: str | Path) -> dict[str, float]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()[1:]
    return {k: float(v) for k, v in (line.split("\t") for line in lines)}


def run_eval(checkpoint: str | Path | Checkpoint, out_dir: str | Path, seed: int | None = None,
             n_items: int = 128) -> dict[str, float]:
    """Score a checkpoint on held-out synthetic data and write the metrics files.

    Pretraining checkpoints get ITM accuracy, leave-one-out MLM accuracy,
    masked-patch MSE against the mean baseline and ITM-score retrieval;
    fine-tuned checkpoints get their task metric.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model, vocab, cfg = model_from_checkpoint(ckpt)
    seed = cfg.train.seed + 20_000 if seed is None else seed
    if ckpt.kind.startswith("finetune-"):
        task, head = head_from_checkpoint(ckpt, model, cfg)
        samples = finetune_task_data(task, cfg, vocab, seed)[:n_items]
        metrics = task_metrics(task, model, head, samples, vocab, cfg)
    else:
        records = generate_synthetic(n_items, seed, cfg.model.image_size)
        images = np.stack([r.image for r in records])
        eval_set = itm_eval_set(records, vocab, cfg.model.m_max, n_items, seed)
        mse, base = mim_mse(model, images, seed)
        metrics = {
            "itm_accuracy": itm_accuracy(model, eval_set),
            "mlm_accuracy": mlm_accuracy(model, records[:32], vocab),
            "mim_mse": mse,
            "mim_mse_mean_baseline": base,
        }
        subset = records[:32]
        captions = list(dict.fromkeys(r.caption for r in subset))
        ids, pad = encode_texts(captions, vocab, cfg.model.m_max)
        scores = itm_scores(model, images[:32], ids, pad)
        res = probe.recall_at_k(scores, [captions.index(r.caption) for r in subset], (1, 5, 10))
        metrics.update({f"text_retrieval_r@{k}": v for k, v in res.recall_at.items()})
    write_metrics(metrics, out_dir)
    logger.info("eval %s: %s", ckpt.kind, metrics)
    return metrics


PROBE_KINDS = ("heatmap", "cluster", "nounsim")


def probe_words(caption: str) -> list[int]:
    """Token positions (CLS = 0) of the color and shape words of a caption."""
    return [i + 1 for i, w in enumerate(tokenize(caption)) if w in COLORS or w in SHAPES]


def run_probe(kind: str, checkpoint: str | Path | Checkpoint, out_dir: str | Path,
              n_images: int = 4, seed: int | None = None, k: int = 4,
              nouns: Sequence[str] | None = None, similarity: str = "cosine") -> list[Path]:
    """Write probe artifacts for ``n_images`` held-out synthetic images; returns the paths."""
    if kind not in PROBE_KINDS:
        raise ValueError(f"unknown probe {kind!r}; expected one of {PROBE_KINDS}")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    model, vocab, cfg = model_from_checkpoint(ckpt)
    seed = cfg.train.seed + 30_000 if seed is None else seed
    records = generate_synthetic(max(n_images, 1), seed, cfg.model.image_size)[:n_images]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: list[Path] = []
    if kind == "heatmap":
        for rec in records:
            for pos in probe_words(rec.caption):
                amap = probe.word_patch_alignment(model, vocab, rec.image, rec.caption, pos, similarity)
                written = probe.write_heatmap(amap, out_dir / f"{rec.id}_{pos}_{amap.word}", rec.image,
                                              cfg.model.patch)
                paths.extend(written.values())
    elif kind == "cluster":
        for rec in records:
            labels = probe.cluster_patches(model, rec.image, k, seed)
            paths.append(probe.write_cluster_map(labels, out_dir / f"{rec.id}_k{k}.png", cfg.model.patch))
            tsv = out_dir / f"{rec.id}_k{k}.tsv"
            probe.write_tsv_grid(tsv, labels, {"k": k, "seed": seed})
            paths.append(tsv)
    else:
        nouns = list(nouns) if nouns is not None else list(SHAPES) + list(COLORS)
        rows = probe.top_similarity_distribution(model, vocab, records, nouns)
        paths.append(probe.write_similarity_rows(out_dir / "noun_similarity.tsv", rows))
        paths.append(probe.write_histogram_tsv(out_dir / "noun_histogram.tsv", probe.similarity_histogram(rows)))
    return paths


def alignment_hit_rate(model: PretrainModel, vocab: Vocab, records: Sequence[CaptionedImage],
                       similarity: str = "cosine") -> float:
    """Fraction of color/shape words whose best-matching patch lies in the captioned quadrant."""
    gh, gw = model.cfg.grid
    hits = total = 0
    for rec in records:
        q = rec.scene.quadrant_index
        top, left = divmod(q, 2)
        for pos in probe_words(rec.caption):
            grid = probe.word_patch_alignment(model, vocab, rec.image, rec.caption, pos, similarity).grid
            r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
            hits += int((r >= gh // 2) == bool(top) and (c >= gw // 2) == bool(left))
            total += 1
    return hits / total

