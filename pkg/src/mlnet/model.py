"""Feature extractor, closed-set head and one-vs-all open-set heads."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import DomainError, ParseError, ShapeError
from .nn_core import DenseLayerParams, backprop, init_mlp, mlp_forward

CHECKPOINT_FORMAT = "mlnet-checkpoint"
CHECKPOINT_VERSION = 1


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # two-way softmax on (x, 0); both branches avoid overflow
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class HeadOutputs:
    features: np.ndarray  # (B, D) raw z
    closed_probs: np.ndarray  # (B, K)
    open_pos: np.ndarray  # (B, K)


class Network:
    """MLNet parameters: extractor MLP, K-way closed head, K two-logit open heads.

    All tensors live in ``self.params`` so optimizers and gradient checks can
    iterate over them by name.
    """

    def __init__(self, params: Dict[str, np.ndarray], layer_dims: Sequence[int], num_classes: int,
                 activation: str = "tanh", seed: int | None = None):
        self.params = params
        self.layer_dims = list(layer_dims)
        self.num_classes = num_classes
        self.activation = activation
        self.seed = seed
        self._validate()

    @classmethod
    def init(cls, in_dim: int, num_classes: int, hidden: Sequence[int] = (64,), feat_dim: int = 32,
             activation: str = "tanh", seed: int = 0, rng: np.random.Generator | None = None) -> "Network":
        if rng is None:
            rng = np.random.default_rng(seed)
        dims = [in_dim, *hidden, feat_dim]
        params = {}
        for i, layer in enumerate(init_mlp(dims, rng)):
            params[f"extractor.{i}.weight"] = layer.weight
            params[f"extractor.{i}.bias"] = layer.bias
        scale = 1.0 / np.sqrt(feat_dim)
        params["closed.weight"] = rng.normal(0.0, scale, size=(num_classes, feat_dim))
        params["closed.bias"] = np.zeros(num_classes)
        params["open.weight"] = rng.normal(0.0, scale, size=(num_classes, 2, feat_dim))
        params["open.bias"] = np.zeros((num_classes, 2))
        return cls(params, dims, num_classes, activation, seed)

    def _validate(self):
        K, D = self.num_classes, self.feat_dim
        if K < 2:
            raise DomainError("need at least two known classes")
        if D < 1:
            raise DomainError("feature dimension must be positive")
        expected = {"closed.weight": (K, D), "closed.bias": (K,), "open.weight": (K, 2, D), "open.bias": (K, 2)}
        for i, (a, b) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            expected[f"extractor.{i}.weight"] = (b, a)
            expected[f"extractor.{i}.bias"] = (b,)
        if set(expected) != set(self.params):
            raise ShapeError(f"parameter names {sorted(self.params)} do not match architecture")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name} has shape {self.params[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.params[name])):
                raise DomainError(f"{name} has non-finite entries")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feat_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def extractor_layers(self) -> List[DenseLayerParams]:
        n = len(self.layer_dims) - 1
        return [DenseLayerParams(self.params[f"extractor.{i}.weight"], self.params[f"extractor.{i}.bias"])
                for i in range(n)]

    def copy(self) -> "Network":
        return Network({k: v.copy() for k, v in self.params.items()}, self.layer_dims,
                       self.num_classes, self.activation, self.seed)

    # forward pieces

    def extractor_forward(self, x: np.ndarray) -> List[np.ndarray]:
        return mlp_forward(self.extractor_layers, x, self.activation)

    def extractor_backward(self, activations, feature_grad):
        grads, _ = backprop(self.extractor_layers, activations, feature_grad, self.activation, prefix="extractor.")
        return grads

    def closed_logits(self, z: np.ndarray) -> np.ndarray:
        return z @ self.params["closed.weight"].T + self.params["closed.bias"]

    def open_logits(self, z: np.ndarray) -> np.ndarray:
        """(B, K, 2) logits; ``[..., 0]`` is the positive side."""
        return np.einsum("bd,kcd->bkc", z, self.params["open.weight"]) + self.params["open.bias"]

    def heads(self, z: np.ndarray) -> HeadOutputs:
        z = _as_batch(z, self.feat_dim)
        return HeadOutputs(z, closed_probs(self, z), open_scores(self, z))

    # checkpoints

    def save(self, path) -> None:
        """Write a versioned JSON checkpoint; floats round-trip exactly."""
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "num_classes": self.num_classes,
            "feat_dim": self.feat_dim,
            "layer_dims": self.layer_dims,
            "activation": self.activation,
            "seed": self.seed,
            "tensors": {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                        for name, arr in sorted(self.params.items())},
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "Network":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"checkpoint {path} is not valid JSON: {exc}") from exc
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ParseError(f"{path} is not an mlnet checkpoint")
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {doc.get('version')}")
        params = {name: np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
                  for name, t in doc["tensors"].items()}
        return cls(params, doc["layer_dims"], doc["num_classes"], doc["activation"], doc.get("seed"))


def _as_batch(a, dim):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != dim:
        raise ShapeError(f"expected (batch, {dim}) array, got {a.shape}")
    return a


def extract_features(net: Network, batch: np.ndarray) -> np.ndarray:
    """Raw extractor output z = F(x); no normalization."""
    batch = _as_batch(batch, net.in_dim)
    if batch.shape[0] == 0:
        raise ShapeError("empty batch")
    return net.extractor_forward(batch)[-1]


def closed_probs(net: Network, z: np.ndarray) -> np.ndarray:
    return softmax(net.closed_logits(_as_batch(z, net.feat_dim)), axis=1)


def open_scores(net: Network, z: np.ndarray) -> np.ndarray:
    """Positive-side probability of each one-vs-all head, softmaxed within its own pair."""
    logits = net.open_logits(_as_batch(z, net.feat_dim))
    return sigmoid(logits[..., 0] - logits[..., 1])
