"""Two-level attention gate with an identity residual.

Each gated block is recalibrated twice from the same squeezed channel
descriptor: a per-channel vector gate and a single global scalar gate,
both fed by one shared reduction layer.  The gated signal is added back
onto the untouched input, so a freshly zero-initialized gate scales the
input by exactly 1.25 (both sigmoids sit at 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    add,
    channel_scale,
    fully_connected,
    global_avg_pool,
    relu,
    reshape,
    scalar_scale,
    sigmoid,
    xavier_init,
    zeros_param,
)


def reduction_width(channels: int) -> int:
    """Width of the shared bottleneck layer: c // 16, clamped to >= 1."""
    return max(1, channels // 16)


@dataclass
class GateParams:
    """Weights of one gate: shared reduction, channel branch, global branch."""

    w_reduce: Parameter
    b_reduce: Parameter
    w_channel: Parameter
    b_channel: Parameter
    w_global: Parameter
    b_global: Parameter

    @property
    def channels(self) -> int:
        return self.w_channel.data.shape[0]

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, prefix: str = "gate") -> "GateParams":
        """Xavier weights, zero biases, so a fresh gate starts at the 1.25x identity point."""
        mid = reduction_width(channels)
        return cls(
            w_reduce=xavier_init((mid, channels), channels, mid, rng, f"{prefix}.reduce.w"),
            b_reduce=zeros_param((mid,), f"{prefix}.reduce.b"),
            w_channel=xavier_init((channels, mid), mid, channels, rng, f"{prefix}.channel.w"),
            b_channel=zeros_param((channels,), f"{prefix}.channel.b"),
            w_global=xavier_init((1, mid), mid, 1, rng, f"{prefix}.global.w"),
            b_global=zeros_param((1,), f"{prefix}.global.b"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_reduce, self.b_reduce, self.w_channel, self.b_channel, self.w_global, self.b_global]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class GateOutput:
    """Gated block plus the attention values that produced it."""

    output: Tensor
    channel_attention: Tensor  # (b, c), each value in (0, 1)
    global_attention: Tensor  # (b, 1), each value in (0, 1)


def squeeze(u: Tensor) -> Tensor:
    """Per-channel spatial mean; (b, c, h, w) -> (b, c)."""
    b, c = u.shape[0], u.shape[1]
    return reshape(global_avg_pool(u), (b, c))


def _reduced(s: Tensor, params: GateParams) -> Tensor:
    return relu(fully_connected(s, params.w_reduce, params.b_reduce))


def excite_channel(s: Tensor, params: GateParams) -> Tensor:
    """Channel attention e = sigmoid(f_c(relu(f_mid(s)))); shape (b, c)."""
    return sigmoid(fully_connected(_reduced(s, params), params.w_channel, params.b_channel))


def excite_global(s: Tensor, params: GateParams) -> Tensor:
    """Global attention, one scalar per batch item; shape (b, 1)."""
    return sigmoid(fully_connected(_reduced(s, params), params.w_global, params.b_global))


def apply_gate(u: Tensor, params: GateParams) -> GateOutput:
    """Gate a feature map: out = u + global * (channel * u).

    The two excitations share the reduced descriptor, so the reduction
    weights collect gradient from both branches.
    """
    b, c = u.shape[0], u.shape[1]
    if c != params.channels:
        raise ValueError(f"input has {c} channels, gate expects {params.channels}")
    s = squeeze(u)
    hidden = _reduced(s, params)
    e = sigmoid(fully_connected(hidden, params.w_channel, params.b_channel))
    e_bar = sigmoid(fully_connected(hidden, params.w_global, params.b_global))
    u_tilde = channel_scale(u, reshape(e, (b, c, 1, 1)))
    v_tilde = scalar_scale(u_tilde, reshape(e_bar, (b, 1, 1, 1)))
    return GateOutput(output=add(u, v_tilde), channel_attention=e, global_attention=e_bar)
