"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .autodiff import NumericsError, Tensor

__all__ = ["cosine_lr", "AdamW", "clip_grad_norm"]


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0) -> float:
    """Cosine annealing from ``base_lr`` to ``min_lr`` over ``total_steps``.

    lr(step) = min_lr + 0.5 * (base_lr - min_lr) * (1 + cos(pi * step / total_steps))
    Steps at or past ``total_steps`` return ``min_lr``.
    """
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if step >= total_steps:
        return min_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total


class AdamW:
    """Decoupled-weight-decay Adam.

    Per step, for each parameter p with gradient g:
        p <- p * (1 - lr * weight_decay)
        m <- beta1 * m + (1 - beta1) * g
        v <- beta2 * v + (1 - beta2) * g^2
        p <- p - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)

    Parameters are grouped; each group carries its own base learning rate so
    schedules can scale encoder and head groups independently.
    """

    def __init__(
        self,
        param_groups: Sequence[dict],
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        if eps <= 0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.groups = []
        for group in param_groups:
            params = list(group["params"])
            self.groups.append(
                {
                    "params": params,
                    "lr": float(group["lr"]),
                    "base_lr": float(group.get("base_lr", group["lr"])),
                    "weight_decay": float(group.get("weight_decay", weight_decay)),
                }
            )
        self.t = 0
        self._m = {}
        self._v = {}
        for group in self.groups:
            for p in group["params"]:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def parameters(self) -> list[Tensor]:
        return [p for g in self.groups for p in g["params"]]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_lr_factor(self, factor: float) -> None:
        """Scale every group's lr to factor * its base lr (cosine schedules)."""
        for group in self.groups:
            group["lr"] = group["base_lr"] * factor

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for group in self.groups:
            lr = group["lr"]
            wd = group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                g = p.grad
                if not np.isfinite(g).all():
                    raise NumericsError(
                        f"non-finite gradient for parameter {p.name or p!r}"
                    )
                if wd != 0.0:
                    p.data *= 1.0 - lr * wd
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * (g * g)
                mhat = m / bc1
                vhat = v / bc2
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
