import math

import numpy as np
import pytest

from helpers import adamw_scalar_ref
from maskvl.optim import AdamW, MissingGradError, Schedule, layer_decay_scales, lr_at
from maskvl.tensor import Tensor


@pytest.fixture
def schedule():
    return Schedule(base_lr=1e-4, total_steps=1000)


@pytest.mark.parametrize("step,expected", [(0, 0.0), (50, 0.5e-4), (100, 1e-4), (550, 0.5e-4), (1000, 0.0)])
def test_schedule_values(schedule, step, expected):
    assert lr_at(step, schedule) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("step", [-1, 1001, 1e9])
def test_schedule_out_of_range(schedule, step):
    with pytest.raises(ValueError):
        schedule.lr_at(step)


@pytest.mark.parametrize("total,base", [(1000, 1e-4), (2000, 1e-3), (50, 3e-3)])
def test_schedule_sum_matches_trapezoid(total, base):
    # piecewise linear with its kink on an integer step: the integer-step sum is exact trapezoid area
    s = Schedule(base, total)
    got = math.fsum(s.lr_at(t) for t in range(total + 1))
    area = 0.5 * base * total
    assert abs(got - area) / area < 1e-6


def test_schedule_without_warmup():
    s = Schedule(1.0, 10, warmup_fraction=0.0)
    assert s.lr_at(0) == 1.0 and s.lr_at(5) == 0.5


def test_schedule_all_warmup():
    s = Schedule(1.0, 10, warmup_fraction=1.0)
    assert s.lr_at(5) == 0.5 and s.lr_at(10) == 1.0


def _param(value, shape=(1, 1)):
    return Tensor(np.full(shape, value, dtype=np.float64), requires_grad=True)


@pytest.mark.parametrize("grad,wd", [(0.3, 0.0), (-2.0, 0.0), (0.3, 0.01), (1e-4, 0.1)])
def test_adamw_matches_scalar_oracle(grad, wd):
    p = _param(1.5)
    opt = AdamW({"w": p}, weight_decay=wd)
    lr = 1e-2
    expected = adamw_scalar_ref(1.5, [grad] * 20, lr, wd=wd)
    for want in expected:
        p.grad = np.full((1, 1), grad)
        opt.step(lr)
        assert abs(p.data[0, 0] - want) < 1e-6


def test_adamw_varying_grads_match_oracle(rng):
    grads = rng.standard_normal(20)
    p = _param(-0.4)
    opt = AdamW({"w": p}, weight_decay=0.01)
    expected = adamw_scalar_ref(-0.4, grads, 3e-3, wd=0.01)
    for g, want in zip(grads, expected):
        p.grad = np.full((1, 1), g)
        opt.step(3e-3)
        assert abs(p.data[0, 0] - want) < 1e-6


def test_zero_grad_zero_decay_leaves_params(rng):
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    before = w.data.copy()
    opt = AdamW({"w": w}, weight_decay=0.0)
    for _ in range(5):
        w.grad = np.zeros_like(w.data)
        opt.step(1e-2)
    np.testing.assert_array_equal(w.data, before)


def test_weight_decay_only_is_exact(rng):
    w = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    before = w.data.copy()
    opt = AdamW({"w": w}, weight_decay=0.01)
    w.grad = np.zeros_like(w.data)
    opt.step(0.5)
    np.testing.assert_array_equal(w.data, before * (1 - 0.5 * 0.01))


def test_vectors_skip_decay(rng):
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    before = b.data.copy()
    opt = AdamW({"b": b}, weight_decay=0.5)
    b.grad = np.zeros(4)
    opt.step(1.0)
    np.testing.assert_array_equal(b.data, before)


def test_missing_grad_names_parameter():
    opt = AdamW({"encoder.blocks.0.attn.qkv.weight": _param(1.0), "ok": _param(1.0)})
    opt.params["ok"].grad = np.zeros((1, 1))
    with pytest.raises(MissingGradError, match="encoder.blocks.0.attn.qkv.weight"):
        opt.step(1e-3)


def test_missing_grad_does_not_advance_state():
    p = _param(1.0)
    opt = AdamW({"w": p})
    with pytest.raises(MissingGradError):
        opt.step(1e-3)
    assert opt.state.step == 0


def test_moment_shapes_mirror_params(rng):
    params = {"a": Tensor(rng.standard_normal((2, 3)), requires_grad=True),
              "b": Tensor(rng.standard_normal(5), requires_grad=True)}
    opt = AdamW(params)
    for p in params.values():
        p.grad = np.ones_like(p.data)
    opt.step(1e-3)
    for name, p in params.items():
        assert opt.state.m[name].shape == p.shape == opt.state.v[name].shape


def test_lr_scale_is_applied():
    a, b = _param(1.0), _param(1.0)
    opt = AdamW({"a": a, "b": b}, weight_decay=0.0, lr_scale={"b": 0.5})
    a.grad = b.grad = np.ones((1, 1))
    opt.step(1e-2)
    assert (1.0 - b.data[0, 0]) == pytest.approx(0.5 * (1.0 - a.data[0, 0]), rel=1e-9)


def test_state_arrays_round_trip(rng):
    p = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    opt = AdamW({"w": p})
    p.grad = rng.standard_normal((2, 2))
    opt.step(1e-3)
    other = AdamW({"w": Tensor(p.data.copy(), requires_grad=True)})
    other.load_state_arrays(opt.state_arrays(), opt.state.step)
    np.testing.assert_array_equal(other.state.m["w"], opt.state.m["w"])
    assert other.state.step == 1


def test_layer_decay_scales():
    names = ["patch_embed.proj.weight", "token_embed.table", "encoder.blocks.0.mlp.fc1.weight",
             "encoder.blocks.3.mlp.fc1.weight", "encoder.norm.gamma", "head.fc2.bias"]
    s = layer_decay_scales(names, layers=4, decay=0.5)
    assert s["head.fc2.bias"] == 1.0
    assert s["encoder.norm.gamma"] == 1.0
    assert s["encoder.blocks.3.mlp.fc1.weight"] == 0.5
    assert s["encoder.blocks.0.mlp.fc1.weight"] == 0.5**4
    assert s["patch_embed.proj.weight"] == s["token_embed.table"] == 0.5**5
