"""Adam with linear warmup, cosine decay and global-norm gradient clipping.

State lives in plain float32 arrays keyed by parameter name so it rides
along in checkpoints; the learning rate is a pure function of the step
index, which keeps resumed runs bit-identical to uninterrupted ones.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ContractError, GradientVector, ParamStore
from .config import OptimConfig


def lr_at(step: int, cfg: OptimConfig, total_steps: int) -> float:
    """Learning rate for 0-based step index."""
    warmup = min(cfg.warmup_steps, total_steps)
    if warmup > 0 and step < warmup:
        return cfg.lr * (step + 1) / warmup
    if cfg.schedule == "constant" or total_steps <= warmup:
        return cfg.lr
    progress = (step - warmup) / max(1, total_steps - warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


class Adam:
    def __init__(self, store: ParamStore, cfg: OptimConfig, total_steps: int):
        self.store = store
        self.cfg = cfg
        self.total_steps = total_steps
        self.m = {n: np.zeros_like(store[n].data) for n in store.names()}
        self.v = {n: np.zeros_like(store[n].data) for n in store.names()}

    def step(self, grads: GradientVector, step_index: int) -> float:
        """Apply one update in place; returns the learning rate used."""
        cfg = self.cfg
        lr = lr_at(step_index, cfg, self.total_steps)
        flat = grads.flat
        if cfg.grad_clip > 0:
            norm = float(np.linalg.norm(flat))
            if norm > cfg.grad_clip:
                flat = flat * (cfg.grad_clip / norm)
                grads = GradientVector(grads.param_names, flat, grads.offsets, grads.shapes)
        t = step_index + 1
        bias1 = 1.0 - cfg.beta1 ** t
        bias2 = 1.0 - cfg.beta2 ** t
        for name in grads.param_names:
            g = grads.block(name)
            m = self.m[name]
            v = self.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + cfg.eps)
            update *= lr
            target = self.store[name].data
            np.subtract(target, update.astype(target.dtype, copy=False), out=target)
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.store.names():
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.store.names():
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk not in arrays or vk not in arrays:
                raise ContractError(f"optimizer state missing for {name!r}")
            self.m[name] = arrays[mk].astype(self.m[name].dtype).reshape(self.m[name].shape)
            self.v[name] = arrays[vk].astype(self.v[name].dtype).reshape(self.v[name].shape)
