"""Feed-forward networks and the scalar objectives built on top of them.

A network is a chain of affine layers with a slope-restricted activation
between consecutive layers (never after the last one)::

    f(x) = W^L phi(... phi(W^0 x + b^0) ...) + b^L

Objectives are linear functionals of either the network output (open loop)
or of one closed-loop step ``A R y + B f(R y)``.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

WEIGHT_FORMAT = "lipbnb-weights/1"


class NetworkError(ValueError):
    """Base class for malformed networks and weight files."""


class InputShapeError(NetworkError):
    pass


class WeightParseError(NetworkError):
    pass


class DimensionChainError(NetworkError):
    pass


class NonFiniteWeightError(NetworkError):
    pass


class ActivationKind(str, enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


_DEFAULT_SLOPES = {
    ActivationKind.RELU: (0.0, 1.0),
    ActivationKind.TANH: (0.0, 1.0),
    ActivationKind.SIGMOID: (0.0, 0.25),
    ActivationKind.IDENTITY: (1.0, 1.0),
}


@dataclass(frozen=True)
class ActivationSector:
    """Elementwise activation together with its slope bounds ``[alpha, beta]``."""

    kind: ActivationKind
    alpha: float
    beta: float

    def __post_init__(self):
        if (self.alpha, self.beta) != _DEFAULT_SLOPES[self.kind]:
            raise ValueError(
                f"{self.kind.value} activation has sector {_DEFAULT_SLOPES[self.kind]}, "
                f"got ({self.alpha}, {self.beta})"
            )

    @classmethod
    def of(cls, kind: "ActivationKind | str") -> "ActivationSector":
        kind = ActivationKind(kind)
        alpha, beta = _DEFAULT_SLOPES[kind]
        return cls(kind, alpha, beta)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        if self.kind is ActivationKind.RELU:
            return np.maximum(z, 0.0)
        if self.kind is ActivationKind.TANH:
            return np.tanh(z)
        if self.kind is ActivationKind.SIGMOID:
            return 0.5 * (1.0 + np.tanh(0.5 * z))
        return z


@dataclass(frozen=True, eq=False)
class NeuralNetwork:
    """Dense feed-forward network.

    ``weights[k]`` has shape ``(n_{k+1}, n_k)``. The activation is applied
    after every layer except the last one.
    """

    weights: tuple
    biases: tuple
    activation: ActivationSector = field(default_factory=lambda: ActivationSector.of("relu"))

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float, copy=True) for w in self.weights)
        if not ws:
            raise DimensionChainError("network needs at least one layer")
        if self.biases is None:
            bs = tuple(np.zeros(w.shape[0]) for w in ws)
        else:
            bs = tuple(np.array(b, dtype=float, copy=True).reshape(-1) for b in self.biases)
        if len(bs) != len(ws):
            raise DimensionChainError(f"{len(ws)} weight matrices but {len(bs)} bias vectors")
        for k, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2:
                raise DimensionChainError(f"layer {k}: weight must be 2-D, got shape {w.shape}")
            if b.shape != (w.shape[0],):
                raise DimensionChainError(f"layer {k}: bias length {b.size} != {w.shape[0]} rows")
            if k > 0 and w.shape[1] != ws[k - 1].shape[0]:
                raise DimensionChainError(
                    f"layer {k} expects {w.shape[1]} inputs but layer {k - 1} "
                    f"produces {ws[k - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NonFiniteWeightError(f"layer {k} has non-finite entries")
            w.setflags(write=False)
            b.setflags(write=False)
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        if isinstance(self.activation, (str, ActivationKind)):
            object.__setattr__(self, "activation", ActivationSector.of(self.activation))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def arch(self) -> list[int]:
        return [self.input_dim] + [w.shape[0] for w in self.weights]

    @property
    def hidden_sizes(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    @property
    def num_neurons(self) -> int:
        return sum(self.hidden_sizes)

    def __call__(self, x):
        return forward(self, x)


def forward(network: NeuralNetwork, x) -> np.ndarray:
    """Evaluate the network at ``x``; a 2-D input is treated as a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1:] != (network.input_dim,) or x.ndim > 2:
        raise InputShapeError(f"expected input of size {network.input_dim}, got shape {x.shape}")
    z = x
    last = len(network.weights) - 1
    for k, (w, b) in enumerate(zip(network.weights, network.biases)):
        z = z @ w.T + b
        if k < last:
            z = network.activation(z)
    return z


@dataclass(frozen=True, eq=False)
class ObjectiveFunction:
    """Scalar map ``y -> c^T (A R y + B f(R y))``.

    With ``state_matrix`` and ``input_matrix`` both ``None`` this is the
    open-loop objective ``c^T f(R y)``.
    """

    network: NeuralNetwork
    direction: np.ndarray
    state_matrix: Optional[np.ndarray] = None
    input_matrix: Optional[np.ndarray] = None
    rotation: Optional[np.ndarray] = None

    def __post_init__(self):
        net = self.network
        c = np.array(self.direction, dtype=float).reshape(-1)
        n_x = net.input_dim
        rot = np.eye(n_x) if self.rotation is None else np.array(self.rotation, dtype=float)
        if rot.shape != (n_x, n_x):
            raise InputShapeError(f"rotation must be {n_x}x{n_x}, got {rot.shape}")
        closed = self.state_matrix is not None or self.input_matrix is not None
        if closed:
            a = np.zeros((c.size, n_x)) if self.state_matrix is None else np.array(self.state_matrix, dtype=float)
            b = np.array(self.input_matrix, dtype=float) if self.input_matrix is not None else None
            if b is None:
                b = np.zeros((c.size, net.output_dim))
            if b.ndim == 1:
                b = b.reshape(-1, 1)
            if a.shape != (c.size, n_x):
                raise InputShapeError(f"state matrix must be {c.size}x{n_x}, got {a.shape}")
            if b.shape != (c.size, net.output_dim):
                raise InputShapeError(
                    f"input matrix must be {c.size}x{net.output_dim}, got {b.shape}"
                )
        else:
            if c.size != net.output_dim:
                raise InputShapeError(f"direction must have size {net.output_dim}, got {c.size}")
            a, b = None, None
        for name, value in (("direction", c), ("state_matrix", a), ("input_matrix", b), ("rotation", rot)):
            if value is not None:
                value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def closed_loop(self) -> bool:
        return self.state_matrix is not None

    @property
    def linear_row(self) -> np.ndarray:
        """Row vector ``c^T A R`` (zero in open loop)."""
        if not self.closed_loop:
            return np.zeros(self.network.input_dim)
        return self.direction @ self.state_matrix @ self.rotation

    @property
    def output_row(self) -> np.ndarray:
        """Row vector ``c^T B`` applied to the network output (``c^T`` in open loop)."""
        if not self.closed_loop:
            return self.direction
        return self.direction @ self.input_matrix

    def __call__(self, y):
        return objective_eval(self, y)


def objective_eval(obj: ObjectiveFunction, y):
    """Value of ``obj`` at ``y`` (scalar) or at each row of ``y`` (vector)."""
    y = np.asarray(y, dtype=float)
    n_x = obj.network.input_dim
    if y.shape[-1:] != (n_x,) or y.ndim > 2:
        raise InputShapeError(f"expected point of size {n_x}, got shape {y.shape}")
    x = y @ obj.rotation.T
    val = forward(obj.network, x) @ obj.output_row
    if obj.closed_loop:
        val = val + (x @ obj.state_matrix.T) @ obj.direction
    return val if val.ndim else float(val)


def network_to_dict(network: NeuralNetwork) -> dict:
    return {
        "format": WEIGHT_FORMAT,
        "arch": network.arch,
        "activation": network.activation.kind.value,
        "weights": [w.tolist() for w in network.weights],
        "biases": [b.tolist() for b in network.biases],
    }


def network_from_dict(doc: dict) -> NeuralNetwork:
    try:
        arch = [int(n) for n in doc["arch"]]
        kind = ActivationKind(doc["activation"])
        weights = [np.array(w, dtype=float) for w in doc["weights"]]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise WeightParseError(f"malformed weight document: {exc}") from exc
    for k, w in enumerate(weights):
        if w.ndim != 2:
            raise DimensionChainError(f"layer {k}: weights are not a rectangular matrix")
    if len(arch) != len(weights) + 1:
        raise DimensionChainError(f"arch lists {len(arch)} sizes for {len(weights)} layers")
    for k, w in enumerate(weights):
        if w.shape != (arch[k + 1], arch[k]):
            raise DimensionChainError(
                f"layer {k}: weight shape {w.shape} disagrees with arch ({arch[k + 1]}, {arch[k]})"
            )
    return NeuralNetwork(tuple(weights), tuple(biases), ActivationSector.of(kind))


def dumps_network(network: NeuralNetwork) -> str:
    # json emits floats with repr(), which round-trips doubles exactly
    return json.dumps(network_to_dict(network), indent=1) + "\n"


def save_network(network: NeuralNetwork, path) -> None:
    Path(path).write_text(dumps_network(network))


def load_network(path) -> NeuralNetwork:
    """Read a weight file.

    Raises
    ------
    WeightParseError
        The file is not valid JSON or misses required fields.
    DimensionChainError
        Layer shapes do not chain or disagree with ``arch``.
    NonFiniteWeightError
        A weight or bias is NaN or infinite.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text, parse_constant=lambda name: math.nan)
    except json.JSONDecodeError as exc:
        raise WeightParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise WeightParseError(f"{path}: top level must be an object")
    return network_from_dict(doc)


def random_network(sizes: Sequence[int], activation="relu", seed=0, scale=1.0, bias_scale=0.1) -> NeuralNetwork:
    """Gaussian weights scaled by ``scale / sqrt(fan_in)``; handy for tests."""
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(size=(n_out, n_in)) * scale / math.sqrt(n_in))
        bs.append(rng.normal(size=n_out) * bias_scale)
    return NeuralNetwork(tuple(ws), tuple(bs), activation)
