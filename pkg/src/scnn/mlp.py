"""Feed-forward network model with an operation-level execution log.

All arithmetic is performed in float32 with a fixed accumulation order
(input index ascending), because the leakage simulator consumes the exact
bit patterns of every intermediate product. Forward passes are pure:
identical network and input produce a bit-identical log.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import UsageError


class ActivationKind(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    TANH = "tanh"
    SOFTMAX = "softmax"


SCALAR_KINDS = (ActivationKind.RELU, ActivationKind.SIGMOID, ActivationKind.TANH)


@dataclass(frozen=True)
class LayerSpec:
    """One fully connected layer: weight matrix, bias vector, activation."""

    weights: np.ndarray  # float32, shape (n_neurons, n_inputs)
    bias: np.ndarray  # float32, shape (n_neurons,)
    activation: ActivationKind

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float32)
        b = np.asarray(self.bias, dtype=np.float32)
        if w.ndim != 2 or w.shape[0] < 1 or w.shape[1] < 1:
            raise UsageError(f"weights must be a non-empty 2-D matrix, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise UsageError(
                f"bias shape {b.shape} does not match {w.shape[0]} neurons"
            )
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(b)):
            raise UsageError("weights and bias must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_neurons(self) -> int:
        return self.weights.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class NetworkDescription:
    """Input width plus the ordered hidden and output layers."""

    input_dim: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        if self.input_dim < 1:
            raise UsageError(f"input_dim must be positive, got {self.input_dim}")
        if len(layers) < 2:
            raise UsageError("network needs at least one hidden layer and an output layer")
        expected = self.input_dim
        for i, layer in enumerate(layers):
            if layer.n_inputs != expected:
                raise UsageError(
                    f"layer {i} expects {layer.n_inputs} inputs but gets {expected}"
                )
            if layer.activation is ActivationKind.SOFTMAX and i != len(layers) - 1:
                raise UsageError("softmax is only legal on the output layer")
            expected = layer.n_neurons

    @property
    def layer_sizes(self) -> list[int]:
        return [layer.n_neurons for layer in self.layers]

    @property
    def connection_count(self) -> int:
        return sum(l.n_neurons * l.n_inputs for l in self.layers)


@dataclass(frozen=True)
class MulStore:
    """One product of a known operand and a weight, stored to memory."""

    layer: int
    neuron: int
    input_index: int
    input_value: float
    weight: float
    product: float


@dataclass(frozen=True)
class ActEval:
    """One scalar activation evaluation."""

    layer: int
    neuron: int
    pre_activation: float
    kind: ActivationKind
    output: float


@dataclass(frozen=True)
class SoftmaxEval:
    """One vector softmax evaluation over a whole output layer."""

    layer: int
    inputs: tuple[float, ...]
    outputs: tuple[float, ...]


Event = MulStore | ActEval | SoftmaxEval


@dataclass(frozen=True)
class ExecutionLog:
    events: tuple[Event, ...] = field(default_factory=tuple)

    def mul_stores(self) -> list[MulStore]:
        return [e for e in self.events if isinstance(e, MulStore)]

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


def activate(kind: ActivationKind, x: float) -> float:
    """Scalar activation. Softmax is vector-valued and rejected here."""
    if kind is ActivationKind.SOFTMAX:
        raise UsageError("softmax is vector-valued, use softmax()")
    xv = float(np.float32(x))
    if kind is ActivationKind.RELU:
        y = max(0.0, xv)
    elif kind is ActivationKind.SIGMOID:
        y = 1.0 / (1.0 + np.exp(-xv))
    elif kind is ActivationKind.TANH:
        y = 2.0 / (1.0 + np.exp(-2.0 * xv)) - 1.0
    else:  # pragma: no cover - enum is closed
        raise UsageError(f"unknown activation {kind}")
    return float(np.float32(y))


def softmax(values: Sequence[float]) -> np.ndarray:
    """Numerically stable softmax (max subtraction), float64 result."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise UsageError("softmax needs a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise UsageError("softmax inputs must be finite")
    shifted = arr - arr.max()
    e = np.exp(shifted)
    return e / e.sum()


def forward(
    net: NetworkDescription,
    input_vector: Sequence[float],
    neuron_orders: dict[int, Sequence[int]] | None = None,
) -> tuple[np.ndarray, ExecutionLog]:
    """Run one inference and log every product store and activation.

    ``neuron_orders`` optionally remaps the processing order of neurons
    inside given layers (used by the shuffling countermeasure); it never
    changes the numeric result, only the event order.
    """
    x = np.asarray(input_vector, dtype=np.float32)
    if x.shape != (net.input_dim,):
        raise UsageError(f"input shape {x.shape} does not match input_dim {net.input_dim}")
    if not np.all(np.isfinite(x)):
        raise UsageError("input must be finite")

    events: list[Event] = []
    current = x
    for li, layer in enumerate(net.layers):
        order: Iterable[int] = range(layer.n_neurons)
        if neuron_orders and li in neuron_orders:
            order = list(neuron_orders[li])
            if sorted(order) != list(range(layer.n_neurons)):
                raise UsageError(f"neuron order for layer {li} is not a permutation")
        pre = np.zeros(layer.n_neurons, dtype=np.float32)
        for ni in order:
            acc = layer.bias[ni]
            for ii in range(layer.n_inputs):
                product = np.float32(current[ii] * layer.weights[ni, ii])
                events.append(
                    MulStore(
                        layer=li,
                        neuron=ni,
                        input_index=ii,
                        input_value=float(current[ii]),
                        weight=float(layer.weights[ni, ii]),
                        product=float(product),
                    )
                )
                acc = np.float32(acc + product)
            pre[ni] = acc
            if layer.activation is not ActivationKind.SOFTMAX:
                out = activate(layer.activation, float(acc))
                events.append(
                    ActEval(
                        layer=li,
                        neuron=ni,
                        pre_activation=float(acc),
                        kind=layer.activation,
                        output=out,
                    )
                )
        if layer.activation is ActivationKind.SOFTMAX:
            outs = softmax(pre).astype(np.float32)
            events.append(
                SoftmaxEval(
                    layer=li,
                    inputs=tuple(float(v) for v in pre),
                    outputs=tuple(float(v) for v in outs),
                )
            )
            current = outs
        else:
            current = np.array(
                [activate(layer.activation, float(v)) for v in pre], dtype=np.float32
            )
    return current, ExecutionLog(tuple(events))


def random_network(
    input_dim: int,
    layer_sizes: Sequence[int],
    activations: ActivationKind | Sequence[ActivationKind],
    weight_range: float,
    precision: float,
    seed: int,
) -> NetworkDescription:
    """Network with weights drawn uniformly from the grid
    ``{-weight_range, ..., -p, 0, p, ..., weight_range}`` with step ``p``.

    Biases are zero. Deterministic for a given seed.
    """
    if weight_range <= 0:
        raise UsageError(f"weight_range must be positive, got {weight_range}")
    if precision <= 0:
        raise UsageError(f"precision must be positive, got {precision}")
    sizes = list(layer_sizes)
    if not sizes:
        raise UsageError("need at least one layer size")
    if isinstance(activations, ActivationKind):
        acts = [activations] * len(sizes)
    else:
        acts = list(activations)
    if len(acts) != len(sizes):
        raise UsageError(f"{len(sizes)} layers but {len(acts)} activations")

    rng = np.random.default_rng(seed)
    steps = int(round(weight_range / precision))
    layers = []
    fan_in = input_dim
    for size, act in zip(sizes, acts):
        grid = rng.integers(-steps, steps + 1, size=(size, fan_in))
        weights = (grid * precision).astype(np.float32)
        layers.append(
            LayerSpec(weights=weights, bias=np.zeros(size, dtype=np.float32), activation=act)
        )
        fan_in = size
    return NetworkDescription(input_dim=input_dim, layers=tuple(layers))
