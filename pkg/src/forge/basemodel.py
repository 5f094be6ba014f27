"""Toy base models: small MLP classifiers with versioned lineage."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import numerics as nx


@dataclass(frozen=True)
class ArchMeta:
    dims: tuple[int, ...]  # d_in, hidden..., n_classes
    activation: str = "silu"
    lineage: tuple[str, ...] = ()

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def layer_names(self) -> list[str]:
        return [f"fc{i + 1}" for i in range(self.n_layers - 1)] + ["head"]


@dataclass(frozen=True)
class BaseModel:
    version_id: str
    layers: dict[str, np.ndarray]
    arch: ArchMeta

    def replace(self, **kw) -> "BaseModel":
        return dataclasses.replace(self, **kw)

    def weight(self, name: str) -> np.ndarray:
        try:
            return self.layers[f"{name}.weight"]
        except KeyError:
            raise KeyError(f"base model {self.version_id} has no linear layer {name!r}") from None

    def linear_layers(self) -> list[str]:
        return self.arch.layer_names()

    def lora_targets(self) -> list[str]:
        # every linear layer except the classifier head
        return self.linear_layers()[:-1]

    def forward(self, x, factors: dict | None = None) -> nx.Tensor:
        """Differentiable logits. ``factors`` maps layer name -> (B, A) tensors."""
        h = nx.as_tensor(x)
        names = self.linear_layers()
        act = _ACTIVATIONS[self.arch.activation]
        for i, name in enumerate(names):
            w = nx.Tensor(self.layers[f"{name}.weight"])
            b = nx.Tensor(self.layers[f"{name}.bias"])
            out = h @ w.T + b
            if factors and name in factors:
                B, A = factors[name]
                out = out + (h @ A.T) @ B.T
            h = act(out) if i < len(names) - 1 else out
        return h

    def logits(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float32)
        names = self.linear_layers()
        for i, name in enumerate(names):
            h = h @ self.layers[f"{name}.weight"].T + self.layers[f"{name}.bias"]
            if i < len(names) - 1:
                h = _NP_ACT[self.arch.activation](h)
        return h

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.logits(x).argmax(axis=1) == y))

    def param_arrays(self) -> dict[str, np.ndarray]:
        return dict(self.layers)


_ACTIVATIONS = {"silu": nx.silu, "tanh": nx.tanh, "relu": nx.relu}
_NP_ACT = {
    "silu": lambda z: z * nx._sigmoid(z),
    "tanh": np.tanh,
    "relu": lambda z: np.maximum(z, 0.0),
}


def init_mlp(dims, seed: int, activation: str = "silu", version_id: str = "t0") -> BaseModel:
    rng = nx.rng_stream(seed, "base-init")
    arch = ArchMeta(tuple(dims), activation, (version_id,))
    layers = {}
    for name, d_in, d_out in zip(arch.layer_names(), dims[:-1], dims[1:]):
        layers[f"{name}.weight"] = (rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)).astype(np.float32)
        layers[f"{name}.bias"] = np.zeros(d_out, np.float32)
    return BaseModel(version_id, layers, arch)
