"""AdamW with decoupled weight decay and a linear warmup/decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class Schedule:
    """Piecewise linear: 0 -> ``base_lr`` over the warmup, then back to 0 at ``total_steps``."""

    base_lr: float
    total_steps: int
    warmup_fraction: float = 0.10

    @property
    def warmup_steps(self) -> float:
        return self.warmup_fraction * self.total_steps

    def lr_at(self, step: float) -> float:
        if step < 0 or step > self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        warm = self.warmup_steps
        if step < warm:
            return self.base_lr * step / warm
        if self.total_steps == warm:
            return self.base_lr
        return self.base_lr * (self.total_steps - step) / (self.total_steps - warm)


def lr_at(step: float, schedule: Schedule) -> float:
    return schedule.lr_at(step)


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    lr_scale: dict[str, float] = field(default_factory=dict)
    decay: dict[str, bool] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState, lr: float) -> None:
    """One AdamW update in place.

    Decay is decoupled: ``p <- p (1 - lr wd)`` happens before the
    bias-corrected Adam step and does not pass through the moments.
    """
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad.astype(p.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step_lr = lr * state.lr_scale.get(name, 1.0)
        data = p.data
        if state.decay.get(name, True) and state.weight_decay:
            data = data * (1.0 - step_lr * state.weight_decay)
        p.data = data - step_lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class AdamW:
    """Named-parameter AdamW. 1-D tensors (biases, norms, type vectors) skip decay."""

    def __init__(self, params: Mapping[str, Tensor], weight_decay: float = 0.01,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 lr_scale: Mapping[str, float] | None = None):
        self.params = dict(params)
        self.state = OptimizerState(
            beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay,
            lr_scale=dict(lr_scale or {}),
            decay={name: p.ndim >= 2 for name, p in self.params.items()},
        )

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            if name in self.state.m:
                out[f"m/{name}"] = self.state.m[name]
                out[f"v/{name}"] = self.state.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step: int) -> None:
        for name, p in self.params.items():
            key_m, key_v = f"m/{name}", f"v/{name}"
            if key_m in arrays:
                if arrays[key_m].shape != p.shape:
                    raise ValueError(f"optimizer moment for {name} has shape {arrays[key_m].shape}")
                self.state.m[name] = np.array(arrays[key_m], dtype=p.dtype)
                self.state.v[name] = np.array(arrays[key_v], dtype=p.dtype)
        self.state.step = step


def layer_decay_scales(names, layers: int, decay: float) -> dict[str, float]:
    """Learning-rate multipliers shrinking geometrically from the top block down.

    Heads and the final encoder norm get 1, block ``i`` gets
    ``decay ** (layers - i)``, embeddings get ``decay ** (layers + 1)``.
    """
    scales = {}
    for name in names:
        parts = name.split(".")
        if "embed" in parts[0] or (len(parts) > 1 and "embed" in parts[1]):
            depth = layers + 1
        elif "blocks" in parts and "encoder" in parts:
            i = int(parts[parts.index("blocks") + 1])
            depth = layers - i
        else:
            depth = 0
        scales[name] = decay**depth
    return scales
