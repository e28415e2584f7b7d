"""Dense MLP engine: forward/backward passes, Nesterov SGD, inverse lr decay.

Parameters are kept in plain ``dict[str, np.ndarray]`` stores so the optimizer
and the finite-difference oracle can treat every network uniformly. Gradient
bundles use the same keys as the parameters they differentiate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

GradientBundle = Dict[str, np.ndarray]

ACTIVATIONS = ("tanh", "softplus", "linear")


@dataclass
class DenseLayerParams:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"inconsistent layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def init_mlp(dims: Sequence[int], rng: np.random.Generator) -> List[DenseLayerParams]:
    """Layers for ``dims[0] -> dims[1] -> ... -> dims[-1]`` with scaled normal init."""
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
        layers.append(DenseLayerParams(w, np.zeros(fan_out)))
    return layers


def _activate(h, activation):
    if activation == "tanh":
        return np.tanh(h)
    if activation == "softplus":
        return np.logaddexp(0.0, h)
    if activation == "linear":
        return h
    raise DomainError(f"unknown activation {activation!r}")


def _activation_slope(out, activation):
    # derivative expressed through the post-activation value
    if activation == "tanh":
        return 1.0 - out**2
    if activation == "softplus":
        return -np.expm1(-out)  # sigmoid(h) = 1 - exp(-softplus(h))
    return np.ones_like(out)


def mlp_forward(layers: Sequence[DenseLayerParams], x: np.ndarray, activation: str = "tanh") -> List[np.ndarray]:
    """Run ``x`` (batch x in_dim) through the MLP.

    Returns ``[x, h_1, ..., h_L]``. Hidden layers use ``activation``; the last
    layer is left linear.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != layers[0].in_dim:
        raise ShapeError(f"input of shape {x.shape} does not match first layer in_dim {layers[0].in_dim}")
    acts = [x]
    h = x
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        h = h @ layer.weight.T + layer.bias
        if i != last:
            h = _activate(h, activation)
        acts.append(h)
    return acts


def backprop(
    layers: Sequence[DenseLayerParams],
    activations: Sequence[np.ndarray],
    output_grad: np.ndarray,
    activation: str = "tanh",
    prefix: str = "",
):
    """Reverse pass for the scalar loss whose gradient w.r.t. the MLP output is ``output_grad``.

    Returns ``(grads, input_grad)`` where ``grads`` maps ``f"{prefix}{i}.weight"`` /
    ``f"{prefix}{i}.bias"`` to arrays shaped like the layer parameters.
    """
    if len(activations) != len(layers) + 1:
        raise ShapeError("activations do not belong to these layers")
    for layer, a_in, a_out in zip(layers, activations[:-1], activations[1:]):
        if a_in.shape[1] != layer.in_dim or a_out.shape[1] != layer.out_dim:
            raise ShapeError("stale activations: shapes differ from the current layers")
    delta = np.asarray(output_grad, dtype=np.float64)
    if delta.shape != activations[-1].shape:
        raise ShapeError(f"output_grad {delta.shape} vs output {activations[-1].shape}")

    grads: GradientBundle = {}
    for i in range(len(layers) - 1, -1, -1):
        a_in = activations[i]
        grads[f"{prefix}{i}.weight"] = delta.T @ a_in
        grads[f"{prefix}{i}.bias"] = delta.sum(axis=0)
        delta = delta @ layers[i].weight
        if i > 0:
            delta = delta * _activation_slope(a_in, activation)
    return grads, delta


def finite_diff_grad(
    loss_fn: Callable[[Dict[str, np.ndarray]], float],
    params: Dict[str, np.ndarray],
    eps: float = 1e-5,
) -> GradientBundle:
    """Central-difference gradient of ``loss_fn(params)``.

    Each coordinate is perturbed in place and restored afterwards, so
    ``loss_fn`` must read the arrays it is handed rather than copies.
    """
    if not eps > 0:
        raise DomainError("eps must be positive")
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn(params))
            flat[i] = orig - eps
            down = float(loss_fn(params))
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            gflat[i] = (up - down) / (2.0 * eps)
        grads[name] = g
    return grads


def inverse_schedule(base_lr: float, progress: float, a: float = 10.0, b: float = 0.75) -> float:
    """``base_lr * (1 + a * progress) ** -b`` for training progress in [0, 1]."""
    if not 0.0 <= progress <= 1.0:
        raise DomainError(f"progress {progress} outside [0, 1]")
    return base_lr * (1.0 + a * progress) ** (-b)


@dataclass
class OptimizerState:
    base_lr_extractor: float = 0.001
    base_lr_heads: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    progress: float = 0.0
    schedule_a: float = 10.0
    schedule_b: float = 0.75
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def lr_for(self, name: str) -> float:
        base = self.base_lr_extractor if name.startswith("extractor") else self.base_lr_heads
        return inverse_schedule(base, self.progress, self.schedule_a, self.schedule_b)


def sgd_nesterov_step(params: Dict[str, np.ndarray], grads: GradientBundle, state: OptimizerState):
    """One in-place Nesterov update; parameters named ``extractor*`` use the extractor lr.

    v <- mu*v - lr*g ;  theta <- theta + mu*v - lr*g
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} missing or misshapen")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name!r}")
    if not 0.0 <= state.progress <= 1.0:
        raise DomainError(f"progress {state.progress} outside [0, 1]")

    mu = state.momentum
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        lr = state.lr_for(name)
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= mu
        v -= lr * g
        p += mu * v - lr * g
    return params, state
