import math

import numpy as np
import pytest

from helpers import full_loss_gradcheck, softmax_nll_ref
from maskvl.config import MaskConfig
from maskvl.data import MASK, MultimodalBatch, collate, generate_synthetic
from maskvl.encoder import MaskPlan, make_mask_plan
from maskvl.objectives import (
    ItmHead,
    MimDecoder,
    MlmHead,
    corrupt_tokens,
    draw_pretrain_inputs,
    itm_loss,
    itm_negatives,
    mim_loss,
    mlm_loss,
    nll,
    patch_targets,
    pretrain_losses,
    pretrain_step,
)
from maskvl.tensor import Tensor


def _zero_linear(lin):
    lin.weight.data[...] = 0.0
    lin.bias.data[...] = 0.0


# -- MLM ---------------------------------------------------------------------------


def test_mlm_uniform_logits_give_log_vocab(rng):
    head = MlmHead(8, 7, rng)
    _zero_linear(head.proj)
    h = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
    mask = np.zeros((2, 5), bool)
    mask[0, 2] = mask[1, 4] = True
    plan = MaskPlan(mask, np.zeros((2, 0), np.int64), np.zeros((2, 0), np.int64))
    loss = mlm_loss(h, plan, rng.integers(0, 7, (2, 5)), head)
    assert abs(loss.item() - math.log(7)) < 1e-6


def test_mlm_confident_correct_goes_to_zero(rng):
    head = MlmHead(4, 7, rng)
    _zero_linear(head.proj)
    head.proj.bias.data[3] = 50.0
    plan = MaskPlan(np.array([[False, True]]), np.zeros((1, 0), np.int64), np.zeros((1, 0), np.int64))
    loss = mlm_loss(Tensor(np.zeros((1, 2, 4), np.float32)), plan, np.array([[0, 3]]), head)
    assert loss.item() < 1e-6


def test_mlm_matches_nll_oracle(rng):
    head = MlmHead(6, 9, rng)
    h = Tensor(rng.standard_normal((2, 4, 6)))
    mask = np.zeros((2, 4), bool)
    mask[0, 1] = mask[0, 3] = mask[1, 2] = True
    targets = rng.integers(0, 9, (2, 4))
    plan = MaskPlan(mask, np.zeros((2, 0), np.int64), np.zeros((2, 0), np.int64))
    logits = h.data[mask] @ head.proj.weight.data + head.proj.bias.data
    expected = softmax_nll_ref(logits, targets[mask])
    assert abs(mlm_loss(h, plan, targets, head).item() - expected) < 1e-6


def test_mlm_empty_mask_is_contract_error(rng):
    plan = MaskPlan(np.zeros((1, 3), bool), np.zeros((1, 0), np.int64), np.zeros((1, 0), np.int64))
    with pytest.raises(ValueError):
        mlm_loss(Tensor(np.zeros((1, 3, 4))), plan, np.zeros((1, 3), int), MlmHead(4, 5, rng))


def test_mlm_gradient_only_reaches_masked_positions(rng):
    head = MlmHead(4, 5, rng)
    h = Tensor(rng.standard_normal((1, 4, 4)), requires_grad=True)
    plan = MaskPlan(np.array([[False, True, False, False]]), np.zeros((1, 0), np.int64), np.zeros((1, 0), np.int64))
    mlm_loss(h, plan, np.array([[0, 2, 0, 0]]), head).backward()
    assert np.abs(h.grad[0, [0, 2, 3]]).max() == 0.0
    assert np.abs(h.grad[0, 1]).max() > 0.0


# -- MIM ---------------------------------------------------------------------------


@pytest.fixture
def decoder(rng):
    return MimDecoder(8, 8, 1, 2, 4, 12, rng)


def _plan(rng, B=2, n=4):
    return make_mask_plan(n, np.zeros((B, 1), bool), rng, 0.5, 0.0)


def test_mim_zero_when_prediction_is_exact(decoder, rng):
    plan = _plan(rng)
    h = Tensor(rng.standard_normal((2, plan.n_kept, 8)).astype(np.float32))
    pred = decoder(h, plan).data
    targets = np.zeros((2, 4, 12), np.float32)
    targets[np.arange(2)[:, None], plan.image_masked] = pred
    assert mim_loss(h, plan, targets, decoder).item() == 0.0


def test_mim_zero_prediction_gives_mean_square(decoder, rng):
    _zero_linear(decoder.head)
    plan = _plan(rng)
    targets = rng.standard_normal((2, 4, 12)).astype(np.float32)
    h = Tensor(rng.standard_normal((2, plan.n_kept, 8)).astype(np.float32))
    masked = targets[np.arange(2)[:, None], plan.image_masked]
    assert abs(mim_loss(h, plan, targets, decoder).item() - float((masked**2).mean())) < 1e-6


def test_mim_matches_loop_oracle(decoder, rng):
    plan = _plan(rng)
    h = Tensor(rng.standard_normal((2, plan.n_kept, 8)))
    targets = rng.standard_normal((2, 4, 12))
    pred = decoder(h, plan).data
    total = 0.0
    for b in range(2):
        for j, pos in enumerate(plan.image_masked[b]):
            total += sum((pred[b, j, k] - targets[b, pos, k]) ** 2 for k in range(12)) / 12
    expected = total / (2 * plan.n_masked)
    assert abs(mim_loss(h, plan, targets, decoder).item() - expected) < 1e-6


def test_mim_invariant_to_kept_order(decoder, rng):
    plan = _plan(rng, B=1)
    h = rng.standard_normal((1, plan.n_kept, 8))
    targets = rng.standard_normal((1, 4, 12))
    perm = rng.permutation(plan.n_kept)
    shuffled = MaskPlan(plan.text_mask, plan.image_kept[:, perm], plan.image_masked)
    a = mim_loss(Tensor(h), plan, targets, decoder).item()
    b = mim_loss(Tensor(h[:, perm]), shuffled, targets, decoder).item()
    assert abs(a - b) < 1e-6


def test_mim_loss_ignores_kept_targets(decoder, rng):
    plan = _plan(rng)
    h = Tensor(rng.standard_normal((2, plan.n_kept, 8)))
    targets = rng.standard_normal((2, 4, 12))
    base = mim_loss(h, plan, targets, decoder).item()
    targets[np.arange(2)[:, None], plan.image_kept] = 1e3
    assert mim_loss(h, plan, targets, decoder).item() == base


def test_patch_targets_normalized_option(rng):
    imgs = rng.random((1, 16, 16, 3))
    t = patch_targets(imgs, 8, normalize=True)
    np.testing.assert_allclose(t.mean(-1), 0.0, atol=1e-5)


# -- ITM ---------------------------------------------------------------------------


def test_itm_uniform_logits_give_log2():
    assert abs(itm_loss(Tensor(np.zeros((5, 2))), np.array([0, 1, 1, 0, 1])).item() - math.log(2)) < 1e-7


def test_itm_separated_logits_go_to_zero():
    logits = Tensor(np.array([[40.0, -40.0], [-40.0, 40.0]]))
    assert itm_loss(logits, np.array([0, 1])).item() < 1e-6


def test_itm_matches_two_class_oracle(rng):
    logits = rng.standard_normal((6, 2))
    labels = rng.integers(0, 2, 6)
    assert abs(itm_loss(Tensor(logits), labels).item() - softmax_nll_ref(logits, labels)) < 1e-6


def test_itm_head_reads_two_columns(rng):
    assert ItmHead(8, rng)(Tensor(np.zeros((3, 8)))).shape == (3, 2)


def test_itm_negatives_forced_zero(tiny_batch, rng):
    out = itm_negatives(tiny_batch, rng, swap_prob=0.0)
    assert out.labels.tolist() == [1, 1, 1, 1]
    np.testing.assert_array_equal(out.images, tiny_batch.images)


def test_itm_negatives_forced_one_batch_two(tiny_batch, rng):
    batch = MultimodalBatch(tiny_batch.images[:2], tiny_batch.ids[:2], tiny_batch.pad_mask[:2])
    out = itm_negatives(batch, rng, swap_prob=1.0)
    assert out.labels.tolist() == [0, 0]
    assert out.source.tolist() == [1, 0]


def test_itm_negative_never_keeps_own_image(tiny_batch, rng):
    for _ in range(200):
        out = itm_negatives(tiny_batch, rng)
        neg = out.labels == 0
        assert (out.source[neg] != np.arange(4)[neg]).all()


def test_itm_negative_fraction_three_sigma(tiny_batch):
    rng = np.random.default_rng(77)
    negs = sum(int((itm_negatives(tiny_batch, rng).labels == 0).sum()) for _ in range(10_000))
    total = 10_000 * len(tiny_batch)
    assert abs(negs / total - 0.5) < 3 * math.sqrt(0.25 / total)


def test_itm_single_pair_is_flagged(tiny_batch, rng, caplog):
    one = MultimodalBatch(tiny_batch.images[:1], tiny_batch.ids[:1], tiny_batch.pad_mask[:1])
    out = itm_negatives(one, rng)
    assert out.degenerate and out.labels.tolist() == [1]
    assert "cannot form a negative" in caplog.text


# -- corruption and combined step ---------------------------------------------------


def test_corrupt_tokens_pure_replacement(tiny_batch, rng):
    plan = make_mask_plan(4, tiny_batch.pad_mask, rng)
    out = corrupt_tokens(tiny_batch.ids, plan, 30, rng)
    assert (out[plan.text_mask] == MASK).all()
    assert (out[~plan.text_mask] == tiny_batch.ids[~plan.text_mask]).all()


def test_corrupt_tokens_bert_mix_keeps_unmasked(tiny_batch, rng):
    plan = make_mask_plan(4, tiny_batch.pad_mask, rng, text_prob=0.9)
    out = corrupt_tokens(tiny_batch.ids, plan, 30, rng, bert_mix=True)
    assert (out[~plan.text_mask] == tiny_batch.ids[~plan.text_mask]).all()


def test_total_is_exact_sum(tiny_model, tiny_batch, rng):
    plan, corrupted, itm = draw_pretrain_inputs(tiny_model, tiny_batch, rng, MaskConfig())
    losses = pretrain_losses(tiny_model, tiny_batch, plan, corrupted, itm)
    assert losses.total.item() == pytest.approx(losses.l_mlm.item() + losses.l_itm.item() + losses.l_mim.item(),
                                                abs=1e-6)


def test_uniform_heads_compose_analytically(tiny_model, tiny_batch, rng, vocab):
    _zero_linear(tiny_model.mlm_head.proj)
    _zero_linear(tiny_model.itm_head.proj)
    plan, corrupted, itm = draw_pretrain_inputs(tiny_model, tiny_batch, rng, MaskConfig())
    losses = pretrain_losses(tiny_model, tiny_batch, plan, corrupted, itm)
    out = tiny_model.forward(tiny_batch.images, corrupted, tiny_batch.pad_mask, plan)
    targets = patch_targets(tiny_batch.images, 8)
    mim = mim_loss(out.h_v, plan, targets, tiny_model.mim_decoder).item()
    expected = math.log(len(vocab)) + math.log(2) + mim
    assert abs(losses.total.item() - expected) < 1e-5


def test_zero_masking_reduces_to_itm(tiny_model, tiny_batch, rng):
    cfg = MaskConfig(image_ratio=0.0, text_prob=0.0)
    losses = pretrain_step(tiny_batch, tiny_model, rng, cfg)
    assert losses.l_mlm is None and losses.l_mim is None
    assert losses.total.item() == losses.l_itm.item()


def test_pretrain_step_populates_all_grads(tiny_model, tiny_batch, rng):
    pretrain_step(tiny_batch, tiny_model, rng)
    missing = [n for n, p in tiny_model.named_parameters() if p.grad is None]
    assert missing == []


def test_overfit_fixed_batch_decreases_loss(tiny_model_cfg, vocab):
    from maskvl.objectives import PretrainModel
    from maskvl.optim import AdamW

    model = PretrainModel(tiny_model_cfg, len(vocab), seed=1)
    batch = collate(generate_synthetic(8, seed=8, image_size=16), vocab, tiny_model_cfg.m_max)
    opt = AdamW(dict(model.named_parameters()), weight_decay=0.0)
    plan, corrupted, itm = draw_pretrain_inputs(model, batch, np.random.default_rng(0), MaskConfig())
    history = []
    for _ in range(50):
        losses = pretrain_losses(model, batch, plan, corrupted, itm)
        model.zero_grad()
        losses.total.backward()
        opt.step(3e-3)
        history.append(losses.total.item())
    assert all(b < a for a, b in zip(history, history[1:])), history


def test_nll_rejects_nothing_for_valid_targets():
    assert nll(Tensor(np.zeros((2, 3))), np.array([0, 2])).item() == pytest.approx(math.log(3))


def _two_sample(batch):
    return MultimodalBatch(batch.images[:2], batch.ids[:2], batch.pad_mask[:2])


@pytest.mark.slow
@pytest.mark.parametrize("h", [1e-3, 1e-5])
def test_full_loss_gradients_match_finite_differences(h, tiny_model, tiny_batch):
    """Every parameter scalar of the float64 model, perturbed one at a time."""
    checked, failures = full_loss_gradcheck(tiny_model, _two_sample(tiny_batch), seed=0, h=h)
    assert checked == tiny_model.num_parameters()
    assert failures == [], failures[:6]
