"""Multilayer perceptrons over named parameter dictionaries."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .ops import layer_norm, linear
from .tensor import parameter


class ConfigurationError(ValueError):
    """Parameters or settings disagree with the declared architecture."""


@dataclass(frozen=True)
class MLPSpec:
    """Stack of ``linear -> [layer_norm] -> activation`` layers.

    ``activate_last=False`` leaves the final layer linear, which is what the
    regression heads use.
    """

    layer_widths: tuple
    use_layer_norm: bool = False
    activation: str = "relu"
    activate_last: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if not self.layer_widths:
            raise ConfigurationError("MLPSpec needs at least one layer")
        if any(w <= 0 for w in self.layer_widths):
            raise ConfigurationError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation not in ("relu", "none"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @property
    def out_dim(self):
        return self.layer_widths[-1]

    def _activated(self, i):
        last = i == len(self.layer_widths) - 1
        return self.activation == "relu" and (self.activate_last or not last)


def init_mlp(spec, in_dim, rng, prefix, params=None, zero_last=False):
    """Create parameters for ``spec`` under ``prefix`` and add them to ``params``.

    Weights are uniform with fan-in scaling: ``sqrt(6 / fan_in)`` bound for
    layers followed by ReLU, ``sqrt(3 / fan_in)`` otherwise.
    """
    params = {} if params is None else params
    fan_in = int(in_dim)
    for i, width in enumerate(spec.layer_widths):
        gain = 6.0 if spec._activated(i) else 3.0
        bound = np.sqrt(gain / fan_in)
        if zero_last and i == len(spec.layer_widths) - 1:
            W = np.zeros((fan_in, width))
        else:
            W = rng.uniform(-bound, bound, size=(fan_in, width))
        params[f"{prefix}.{i}.W"] = parameter(W, f"{prefix}.{i}.W")
        params[f"{prefix}.{i}.b"] = parameter(np.zeros(width), f"{prefix}.{i}.b")
        if spec.use_layer_norm:
            params[f"{prefix}.{i}.ln_g"] = parameter(np.ones(width), f"{prefix}.{i}.ln_g")
            params[f"{prefix}.{i}.ln_b"] = parameter(np.zeros(width), f"{prefix}.{i}.ln_b")
        fan_in = width
    return params


def mlp_forward(spec, params, x, prefix, eps=1e-5):
    h = x
    for i in range(len(spec.layer_widths)):
        try:
            W = params[f"{prefix}.{i}.W"]
            b = params[f"{prefix}.{i}.b"]
        except KeyError as exc:
            raise ConfigurationError(f"missing parameter {exc.args[0]}") from None
        if W.shape[1] != spec.layer_widths[i]:
            raise ConfigurationError(
                f"{prefix}.{i}.W has width {W.shape[1]}, spec says {spec.layer_widths[i]}"
            )
        h = linear(h, W, b)
        if spec.use_layer_norm:
            h = layer_norm(h, params[f"{prefix}.{i}.ln_g"], params[f"{prefix}.{i}.ln_b"], eps)
        if spec._activated(i):
            h = h.relu()
    return h


def mlp_param_names(spec, prefix) -> list:
    names = []
    for i in range(len(spec.layer_widths)):
        names += [f"{prefix}.{i}.W", f"{prefix}.{i}.b"]
        if spec.use_layer_norm:
            names += [f"{prefix}.{i}.ln_g", f"{prefix}.{i}.ln_b"]
    return names


def count_parameters(params: dict, prefix: Optional[str] = None) -> int:
    return sum(p.size for name, p in params.items() if prefix is None or name.startswith(prefix))
