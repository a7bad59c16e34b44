"""Stacked soft attention over spatial feature locations.

The first 1x1 convolution is shared by all glimpses; the second one has one
output channel per glimpse, normalized over locations separately.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from . import ops
from .errors import ShapeError
from .features import FeatureMap
from .tensor import ParamStore, Rng, Tensor, as_rng, glorot_init


@dataclass
class AttentionParams:
    conv1_weight: Tensor
    conv1_bias: Tensor
    conv2_weight: Tensor
    conv2_bias: Tensor

    def __post_init__(self) -> None:
        if (
            self.conv1_bias.shape != (self.hidden_size,)
            or self.conv2_weight.shape[0] != self.hidden_size
            or self.conv2_bias.shape != (self.glimpse_count,)
            or self.glimpse_count < 1
        ):
            raise ShapeError("Inconsistent attention parameter shapes")

    @property
    def input_size(self) -> int:
        """Feature depth plus question state size."""
        return self.conv1_weight.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.conv1_weight.shape[1]

    @property
    def glimpse_count(self) -> int:
        return self.conv2_weight.shape[1]

    @staticmethod
    def parameter_count(depth: int, state_size: int, hidden: int, glimpses: int) -> int:
        return (depth + state_size) * hidden + hidden + hidden * glimpses + glimpses

    @classmethod
    def create(
        cls,
        depth: int,
        state_size: int,
        hidden: int,
        glimpses: int,
        seeds: Sequence[Rng],
        dtype: npt.DTypeLike = np.float64,
    ) -> AttentionParams:
        """Glorot weights and zero biases; `seeds` holds one seed per layer."""
        first, second = seeds
        rows = depth + state_size
        return cls(
            conv1_weight=glorot_init((rows, hidden), rows, hidden, first, dtype),
            conv1_bias=Tensor(np.zeros(hidden, dtype=dtype)),
            conv2_weight=glorot_init(
                (hidden, glimpses), hidden, glimpses, second, dtype
            ),
            conv2_bias=Tensor(np.zeros(glimpses, dtype=dtype)),
        )

    def register(self, store: ParamStore, prefix: str) -> None:
        store.add(f"{prefix}/conv1/weight", self.conv1_weight)
        store.add(f"{prefix}/conv1/bias", self.conv1_bias)
        store.add(f"{prefix}/conv2/weight", self.conv2_weight)
        store.add(f"{prefix}/conv2/bias", self.conv2_bias)


@dataclass
class AttentionResult:
    """Attention weights and the glimpses they produce.

    Attributes:
        weights: (..., L, C) attention distributions, one column per glimpse.
        glimpses: (..., C, depth) weighted averages of the features.
        x: (..., C * depth) glimpses concatenated in glimpse order.
    """

    weights: Tensor
    glimpses: Tensor
    x: Tensor

    @property
    def glimpse_count(self) -> int:
        return self.glimpses.shape[-2]

    def glimpse(self, c: int) -> Tensor:
        """Returns glimpse `c` as a depth-length tensor (per batch row)."""
        piece = ops.slice_axis(self.glimpses, c, c + 1, axis=-2)
        return ops.reshape(piece, piece.shape[:-2] + piece.shape[-1:])

    def glimpse_list(self) -> list[Tensor]:
        return [self.glimpse(c) for c in range(self.glimpse_count)]


def _locations(phi: Tensor | FeatureMap) -> Tensor:
    if isinstance(phi, FeatureMap):
        return phi.flat()
    return phi


def attention_logits(
    s: Tensor,
    phi: Tensor | FeatureMap,
    params: AttentionParams,
    training: bool = False,
    seed: Rng = 0,
    dropout_rate: float = 0.5,
) -> Tensor:
    """Computes the (..., L, C) attention logits.

    The question state is tiled over every location and appended after the
    image features; both 1x1 convolutions are linear maps applied per
    location, with dropout on each of their inputs when training.

    Raises:
        ShapeError: If the state or feature sizes do not match `params`.
    """
    features = _locations(phi)
    state_size = s.shape[-1]
    if (
        features.ndim < 2
        or s.shape[:-1] != features.shape[:-2]
        or features.shape[-1] + state_size != params.input_size
    ):
        raise ShapeError(
            f"State {s.shape} and features {features.shape} do not match "
            f"attention input size {params.input_size}"
        )
    rng = as_rng(seed)
    tiled = ops.broadcast_to(
        ops.reshape(s, s.shape[:-1] + (1, state_size)),
        features.shape[:-1] + (state_size,),
    )
    inputs = ops.dropout(
        ops.concat([features, tiled], axis=-1), dropout_rate, training, rng
    )
    hidden = ops.relu(ops.linear(inputs, params.conv1_weight, params.conv1_bias))
    hidden = ops.dropout(hidden, dropout_rate, training, rng)
    return ops.linear(hidden, params.conv2_weight, params.conv2_bias)


def attention_weights(logits: Tensor) -> Tensor:
    """Softmax over locations, separately for each glimpse column."""
    return ops.softmax(logits, axis=-2)


def compute_glimpses(weights: Tensor, phi: Tensor | FeatureMap) -> AttentionResult:
    """Forms each glimpse as the weighted average of location features."""
    features = _locations(phi)
    if weights.shape[:-1] != features.shape[:-1]:
        raise ShapeError(
            f"Weights {weights.shape} do not match features {features.shape}"
        )
    glimpses = ops.matmul(ops.swapaxes(weights, -1, -2), features)
    x = ops.reshape(
        glimpses, glimpses.shape[:-2] + (glimpses.shape[-2] * glimpses.shape[-1],)
    )
    return AttentionResult(weights=weights, glimpses=glimpses, x=x)


def forward_attention(
    s: Tensor,
    phi: Tensor | FeatureMap,
    params: AttentionParams,
    training: bool = False,
    seed: Rng = 0,
    dropout_rate: float = 0.5,
) -> AttentionResult:
    """Runs logits, weights and glimpses end to end."""
    logits = attention_logits(s, phi, params, training, seed, dropout_rate)
    return compute_glimpses(attention_weights(logits), phi)
