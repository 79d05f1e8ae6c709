"""Adam optimizer with decoupled weight decay and per-group learning rates."""

from __future__ import annotations

import numpy as np

from .nn import Parameter


class AdamW:
    """Adam with decoupled weight decay (applied multiplicatively per step).

    ``groups`` is a list of dicts: {"name": str, "params": [(name, Parameter)],
    "lr": float}.  State is keyed by parameter name so it survives checkpoint
    round trips.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        self.groups = groups
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {}
        self.v = {}
        for group in groups:
            for name, p in group["params"]:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for group in self.groups:
            for _, p in group["params"]:
                p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for group in self.groups:
            lr = group["lr"]
            for name, p in group["params"]:
                g = p.grad
                if g is None:
                    continue
                m = self.m[name]
                v = self.v[name]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                if self.weight_decay:
                    p.data *= 1.0 - lr * self.weight_decay
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def scale_lr(self, factor: float) -> None:
        for group in self.groups:
            group["lr"] *= factor

    def state_arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        out["opt.step"] = np.array([float(self.step_count)])
        out["opt.lrs"] = np.array([g["lr"] for g in self.groups])
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for name in self.m:
            self.m[name][...] = arrays[f"opt.m.{name}"]
            self.v[name][...] = arrays[f"opt.v.{name}"]
        self.step_count = int(arrays["opt.step"][0])
        for g, lr in zip(self.groups, arrays["opt.lrs"]):
            g["lr"] = float(lr)


def param_groups_for(model, lr_backbone: float, lr_head: float) -> list:
    """Two groups: corner-head parameters at lr_head, everything else at
    lr_backbone."""
    head_params, body_params = [], []
    for name, p in model.named_parameters():
        (head_params if name.startswith("head.") else body_params).append((name, p))
    return [
        {"name": "backbone", "params": body_params, "lr": lr_backbone},
        {"name": "head", "params": head_params, "lr": lr_head},
    ]
