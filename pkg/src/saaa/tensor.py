"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array. Operations in `saaa.ops` build a graph of
tensors whose `_backward` closures push the output gradient onto their
inputs, in the style of micrograd but over whole arrays.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator, Sequence
from typing import Any

import numpy as np
import numpy.typing as npt

from .errors import InvalidArgumentError, ShapeError

Array = npt.NDArray[np.floating[Any]]
Rng = np.random.Generator | int | Sequence[int]
Indices = Sequence[int] | npt.NDArray[np.integer[Any]]


def as_rng(rng: Rng) -> np.random.Generator:
    """Returns a generator, seeding a new one when given a seed."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class Tensor:
    """A node in the computation graph.

    Attributes:
        data: The values, row-major.
        grad: Accumulated gradient after `backward`, same shape as `data`.
        requires_grad: Whether gradients are tracked through this node.
        name: Optional label, set for parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(
        self,
        data: npt.ArrayLike,
        requires_grad: bool = False,
        name: str = "",
        dtype: npt.DTypeLike | None = None,
    ) -> None:
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: Array = array
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @classmethod
    def from_op(
        cls,
        data: Array,
        parents: Sequence[Tensor],
        backward: Callable[[Array], None],
    ) -> Tensor:
        """Creates the output node of an operation.

        The node only records its parents when one of them tracks gradients,
        so graphs over constants are never built.
        """
        out = cls(data)
        if any(parent.requires_grad for parent in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype[Any]:
        return self.data.dtype

    def item(self) -> float:
        """Returns the value of a one-element tensor."""
        return float(self.data.reshape(-1)[0])

    def accumulate(self, grad: Array) -> None:
        """Adds `grad` to this node's gradient when it tracks gradients."""
        if not self.requires_grad:
            return
        if grad.shape != self.data.shape:
            raise ShapeError(
                f"Gradient shape {grad.shape} does not match {self.data.shape}"
            )
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + grad

    def __add__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.add(self, other)

    def __radd__(self, other: float) -> Tensor:
        from . import ops

        return ops.add(other, self)

    def __sub__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other: float) -> Tensor:
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from . import ops

        return ops.mul(self, other)

    def __rmul__(self, other: float) -> Tensor:
        from . import ops

        return ops.mul(other, self)

    def __neg__(self) -> Tensor:
        from . import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        from . import ops

        return ops.matmul(self, other)

    def __repr__(self) -> str:
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={self.shape}, requires_grad={self.requires_grad})"


GradientMap = dict[str, Tensor]
"""Gradients keyed by parameter name."""


class ParamStore:
    """Named trainable parameters, iterated in sorted name order."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        """Registers a parameter.

        Raises:
            InvalidArgumentError: If the name is already taken.
        """
        if name in self._params:
            raise InvalidArgumentError(f"Duplicate parameter name: {name}")
        tensor.requires_grad = True
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: object) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(name, self._params[name]) for name in self.names()]

    def num_parameters(self) -> int:
        """Total number of scalar parameters."""
        return sum(tensor.size for tensor in self._params.values())

    def arrays(self) -> dict[str, Array]:
        """Returns the parameter values keyed by name."""
        return {name: tensor.data for name, tensor in self.items()}


def glorot_init(
    shape: Sequence[int],
    fan_in: int,
    fan_out: int,
    seed: Rng,
    dtype: npt.DTypeLike = np.float64,
) -> Tensor:
    """Draws values uniformly in [-b, b] with b = sqrt(6 / (fan_in + fan_out)).

    Args:
        shape: Positive extents.
        fan_in: Number of inputs feeding each unit.
        fan_out: Number of units fed by each input.
        seed: A seed or generator; identical seeds give identical values.
        dtype: Storage type.

    Raises:
        ShapeError: If an extent is not positive.
        InvalidArgumentError: If fan_in + fan_out is not positive.
    """
    if any(extent <= 0 for extent in shape):
        raise ShapeError(f"Invalid shape: {tuple(shape)}")
    if fan_in + fan_out <= 0:
        raise InvalidArgumentError(f"Invalid fans: {fan_in}, {fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    values = as_rng(seed).uniform(-bound, bound, size=tuple(shape))
    return Tensor(values.astype(dtype))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, store: ParamStore | None = None) -> GradientMap:
    """Computes exact gradients of a scalar loss.

    Args:
        loss: A one-element tensor.
        store: Parameters to report gradients for.

    Returns:
        Gradients for every parameter of `store` reachable from `loss`;
        parameters not on the graph are absent.

    Raises:
        InvalidArgumentError: If `loss` is not a scalar.
    """
    if loss.size != 1:
        raise InvalidArgumentError(f"Loss must be a scalar, got shape {loss.shape}")
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    if not loss.requires_grad:
        return {}
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    if store is None:
        return {}
    reached = {id(node) for node in order}
    gradients: GradientMap = {}
    for name, param in store.items():
        if id(param) in reached and param.grad is not None:
            gradients[name] = Tensor(param.grad)
    return gradients
