"""Peer classifier networks.

Plain ReLU multi-layer perceptrons that expose two things per forward pass:
the final hidden activation (the embedding consumed by the relational
losses) and the class logits. Networks are either trainable or frozen;
frozen copies serve as fixed self-teachers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, add_bias, matmul, relu

MODE_TRAINING = "training"
MODE_FROZEN = "frozen"


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and initialization seed for one peer."""

    input_dim: int
    hidden_dims: tuple
    num_classes: int
    init_seed: int
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if not self.hidden_dims:
            raise ValueError("hidden_dims needs at least one layer")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError("hidden_dims entries must be positive")
        if self.hidden_dims[-1] < 2:
            raise ValueError("the last hidden width (embedding dimension) must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.init_seed < 0:
            raise ValueError("init_seed must be non-negative")
        if self.activation != "relu":
            raise ValueError("activation must be 'relu'")

    @property
    def embedding_dim(self) -> int:
        return self.hidden_dims[-1]

    @property
    def layer_dims(self) -> tuple:
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "num_classes": self.num_classes,
            "init_seed": self.init_seed,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            input_dim=d["input_dim"],
            hidden_dims=tuple(d["hidden_dims"]),
            num_classes=d["num_classes"],
            init_seed=d["init_seed"],
            activation=d.get("activation", "relu"),
        )


@dataclass
class ForwardOutput:
    """Embedding (batch, embedding_dim) and logits (batch, num_classes)."""

    embedding: Tensor
    logits: Tensor


class PeerNetwork:
    """One peer: named parameter tensors plus a training/frozen mode flag."""

    def __init__(self, config: NetworkConfig, parameters: dict, mode: str = MODE_TRAINING):
        if mode not in (MODE_TRAINING, MODE_FROZEN):
            raise ValueError(f"mode must be '{MODE_TRAINING}' or '{MODE_FROZEN}'")
        self.config = config
        self.parameters = parameters
        self.mode = mode

    def forward(self, features: Tensor) -> ForwardOutput:
        """Run the network; the input batch is never mutated."""
        if features.data.ndim != 2 or features.data.shape[1] != self.config.input_dim:
            raise ValueError(
                f"features must have shape (batch, {self.config.input_dim}), "
                f"got {features.data.shape}"
            )
        h = features
        n_hidden = len(self.config.hidden_dims)
        for i in range(n_hidden):
            h = relu(add_bias(matmul(h, self.parameters[f"w{i}"]), self.parameters[f"b{i}"]))
        logits = add_bias(
            matmul(h, self.parameters[f"w{n_hidden}"]), self.parameters[f"b{n_hidden}"]
        )
        return ForwardOutput(embedding=h, logits=logits)

    def snapshot(self) -> "PeerNetwork":
        """Frozen deep copy; later training of the source leaves it untouched."""
        params = {
            name: Tensor(p.data.copy(), requires_grad=False)
            for name, p in self.parameters.items()
        }
        return PeerNetwork(self.config, params, mode=MODE_FROZEN)

    def zero_grads(self) -> None:
        for p in self.parameters.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters.values())


def init_network(config: NetworkConfig) -> PeerNetwork:
    """Fresh trainable network.

    Weights are uniform in +/- sqrt(6 / (fan_in + fan_out)) drawn from the
    config seed; biases start at zero. The same config always produces
    bit-identical parameters.
    """
    rng = np.random.default_rng(config.init_seed)
    params: dict[str, Tensor] = {}
    dims = config.layer_dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        params[f"w{i}"] = Tensor(
            rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True
        )
        params[f"b{i}"] = Tensor(np.zeros(fan_out), requires_grad=True)
    return PeerNetwork(config, params, mode=MODE_TRAINING)


def save_checkpoint(net: PeerNetwork, path) -> None:
    """Write config and parameters as JSON with full float round-trip precision."""
    doc = {
        "config": net.config.to_dict(),
        "parameters": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in net.parameters.items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> PeerNetwork:
    """Rebuild a trainable network from a checkpoint written by save_checkpoint."""
    doc = json.loads(Path(path).read_text())
    config = NetworkConfig.from_dict(doc["config"])
    params = {}
    for name, entry in doc["parameters"].items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = Tensor(arr, requires_grad=True)
    return PeerNetwork(config, params, mode=MODE_TRAINING)
