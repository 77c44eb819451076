"""First-order optimizers updating parameter tensors in place."""

from dataclasses import dataclass

import numpy as np

from .tensor import StateError


@dataclass(frozen=True)
class OptimizerConfig:
    rule: str = "momentum"  # "sgd", "momentum" or "adam"
    momentum: float = 0.9
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # global L2 norm clip, 0 disables

    def __post_init__(self):
        if self.rule not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer rule {self.rule!r}")


class Optimizer:
    """Stateful optimizer over a ``{name: Tensor}`` mapping."""

    def __init__(self, params, config=None):
        self.params = params
        self.config = config or OptimizerConfig()
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr, grads=None):
        """Apply one update. ``grads`` defaults to each tensor's ``.grad``."""
        cfg = self.config
        if grads is None:
            grads = {}
            for name, p in self.params.items():
                if p.grad is None:
                    raise StateError(f"parameter {name!r} has no gradient")
                grads[name] = p.grad
        else:
            missing = [name for name in self.params if name not in grads]
            if missing:
                raise StateError(f"no gradient supplied for {missing[0]!r}")
        if cfg.grad_clip > 0:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > cfg.grad_clip:
                grads = {k: g * (cfg.grad_clip / norm) for k, g in grads.items()}
        self.t += 1
        for name, p in self.params.items():
            g = grads[name]
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            if cfg.rule == "sgd":
                p.data -= lr * g
            elif cfg.rule == "momentum":
                buf = self.m[name]
                buf *= cfg.momentum
                buf += g
                p.data -= lr * buf
            else:
                m, v = self.m[name], self.v[name]
                m *= cfg.beta1
                m += (1 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1 - cfg.beta2) * g * g
                mhat = m / (1 - cfg.beta1**self.t)
                vhat = v / (1 - cfg.beta2**self.t)
                p.data -= lr * mhat / (np.sqrt(vhat) + cfg.eps)


def optimizer_step(params, grads, config, lr, state=None):
    """Functional wrapper: one update of ``params`` using ``grads``.

    Pass the returned state back in to keep momentum/Adam moments across steps.
    """
    state = state or Optimizer(params, config)
    state.step(lr, grads)
    return state
