"""Attention-based modality matching between speech and text representations.

Given speech-side rows S [T, d] and text-side rows P [L, d], four
dot-product attention readouts are formed:

* self readouts: softmax(S S^T) S and softmax(P P^T) P,
* cross readouts: softmax(S P^T) P and softmax(P S^T) S,

and the loss is the sum of the two MSEs between matching-shape pairs. The
cross readouts have the query side's length regardless of the other side's,
which is what lets sequences of different lengths be compared without any
alignment. Plain dot products, no learned projections, no scaling: the
``temperature`` variant is an opt-in extension (temperature 1 is exact).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, ShapeError
from .tensor import Tensor, add, attention_readout, mse


@dataclass
class Am3Outputs:
    """Readouts and loss; s_* share shape [T, d], p_* share [L, d]."""

    s_self: Tensor
    s_cross: Tensor
    p_self: Tensor
    p_cross: Tensor
    loss: Tensor


def am3_loss(s: Tensor, p: Tensor) -> Am3Outputs:
    """Modality matching loss; gradients flow to both inputs."""
    return am3_loss_scaled(s, p, temperature=1.0)


def am3_loss_scaled(s: Tensor, p: Tensor, temperature: float = 1.0) -> Am3Outputs:
    """Same as :func:`am3_loss` with logits divided by ``temperature``."""
    if temperature <= 0.0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if s.data.ndim != 2 or p.data.ndim != 2 or s.shape[1] != p.shape[1]:
        raise ShapeError(
            f"modality matching needs matching feature dims, got {s.shape} and {p.shape}")
    inv = 1.0 / temperature
    s_self = attention_readout(s, s, inv)
    s_cross = attention_readout(s, p, inv)
    p_self = attention_readout(p, p, inv)
    p_cross = attention_readout(p, s, inv)
    loss = add(mse(s_self, s_cross), mse(p_self, p_cross))
    return Am3Outputs(s_self=s_self, s_cross=s_cross,
                      p_self=p_self, p_cross=p_cross, loss=loss)
