"""Small ReLU perceptron with hand-written backprop, plus SGD and Adam."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from .synthdata import make_rng

__all__ = [
    "MlpModel",
    "ParamGrads",
    "OptimizerState",
    "mlp_init",
    "mlp_forward",
    "mlp_backward",
    "optimizer_step",
    "make_optimizer",
]


@dataclass
class MlpModel:
    """Weights ``out x in`` and biases per layer; hidden layers ReLU, output linear scalar."""

    layer_sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def __post_init__(self):
        _check_layer_sizes(self.layer_sizes)
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("need one weight matrix and one bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if w.shape != shape:
                raise ValueError(f"layer {i}: weight shape {w.shape}, expected {shape}")
            if b.shape != (shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape}, expected {(shape[0],)}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpModel":
        return MlpModel(list(self.layer_sizes), [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def shifted(self, c: float) -> "MlpModel":
        """Same network with ``c`` added to the scalar output."""
        out = self.copy()
        out.biases[-1] = out.biases[-1] + c
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat(self, theta: np.ndarray) -> "MlpModel":
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(theta[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            biases.append(theta[pos:pos + b.size].copy())
            pos += b.size
        return MlpModel(list(self.layer_sizes), weights, biases)

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        return cls(d["layer_sizes"], d["weights"], d["biases"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MlpModel":
        return cls.from_dict(json.loads(text))


@dataclass
class ParamGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(w * w) + np.sum(b * b) for w, b in zip(self.weights, self.biases))))

    def __add__(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, s: float) -> "ParamGrads":
        return ParamGrads([s * w for w in self.weights], [s * b for b in self.biases])


def _check_layer_sizes(layer_sizes: Sequence[int]):
    if len(layer_sizes) < 2:
        raise ValueError("layer_sizes needs at least an input and an output size")
    if any(int(s) != s or s < 1 for s in layer_sizes):
        raise ValueError(f"layer sizes must be positive integers, got {list(layer_sizes)}")
    if layer_sizes[-1] != 1:
        raise ValueError(f"last layer size must be 1 (scalar output), got {layer_sizes[-1]}")


def mlp_init(layer_sizes: Sequence[int], seed: int) -> MlpModel:
    """Weights uniform on ``+-sqrt(6 / fan_in)``, biases zero."""
    _check_layer_sizes(layer_sizes)
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(list(layer_sizes), weights, biases)


def _check_batch(model: MlpModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :] if model.input_dim > 1 or x.size == 1 else x[:, None]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"batch has {x.shape[-1]} features, model expects {model.input_dim}")
    return x


def _forward_cache(model: MlpModel, x: np.ndarray):
    activations = [x]
    pre = []
    h = x
    n_layers = len(model.weights)
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
        activations.append(h)
    return activations, pre


def mlp_forward(model: MlpModel, batch) -> np.ndarray:
    """Network outputs, one scalar per row of ``batch``."""
    x = _check_batch(model, batch)
    activations, _ = _forward_cache(model, x)
    return activations[-1][:, 0]


def mlp_backward(model: MlpModel, batch, upstream) -> ParamGrads:
    """Gradient of ``sum_i upstream[i] * T(x_i)`` with respect to every parameter."""
    x = _check_batch(model, batch)
    upstream = np.asarray(upstream, dtype=np.float64).ravel()
    if upstream.shape[0] != x.shape[0]:
        raise ValueError(f"upstream has {upstream.shape[0]} entries for a batch of {x.shape[0]}")
    activations, pre = _forward_cache(model, x)
    n_layers = len(model.weights)
    gw: List[np.ndarray] = [None] * n_layers
    gb: List[np.ndarray] = [None] * n_layers
    delta = upstream[:, None]
    for i in range(n_layers - 1, -1, -1):
        gw[i] = delta.T @ activations[i]
        gb[i] = delta.sum(axis=0)
        if i > 0:
            # ReLU subgradient at 0 taken as 0
            delta = (delta @ model.weights[i]) * (pre[i - 1] > 0.0)
    return ParamGrads(gw, gb)


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    first_moment: list = field(default=None, repr=False)
    second_moment: list = field(default=None, repr=False)
    step_count: int = 0

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


def make_optimizer(kind: str, learning_rate: float, model: MlpModel, **kwargs) -> OptimizerState:
    state = OptimizerState(kind=kind, learning_rate=learning_rate, **kwargs)
    if state.kind == "adam":
        params = model.weights + model.biases
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    return state


def optimizer_step(state: OptimizerState, model: MlpModel, grads: ParamGrads):
    """Apply one update and return ``(new_model, state)``.

    The state's moment buffers and step counter are advanced in place.
    """
    n_layers = len(model.weights)
    if len(grads.weights) != n_layers or len(grads.biases) != n_layers:
        raise ValueError("gradient layer count does not match model")
    for i in range(n_layers):
        if grads.weights[i].shape != model.weights[i].shape or grads.biases[i].shape != model.biases[i].shape:
            raise ValueError(f"layer {i}: gradient shape does not match parameter shape")
        if not (np.all(np.isfinite(grads.weights[i])) and np.all(np.isfinite(grads.biases[i]))):
            raise FloatingPointError(f"non-finite gradient in layer {i}")

    params = model.weights + model.biases
    g = grads.weights + grads.biases
    lr = state.learning_rate
    if state.kind == "sgd":
        new = [p - lr * gi for p, gi in zip(params, g)]
    else:
        if state.first_moment is None:
            state.first_moment = [np.zeros_like(p) for p in params]
            state.second_moment = [np.zeros_like(p) for p in params]
        t = state.step_count + 1
        b1, b2, eps = state.adam_beta1, state.adam_beta2, state.adam_eps
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        new = []
        with np.errstate(over="ignore"):
            for k, (p, gi) in enumerate(zip(params, g)):
                m = b1 * state.first_moment[k] + (1.0 - b1) * gi
                v = b2 * state.second_moment[k] + (1.0 - b2) * (gi * gi)
                state.first_moment[k] = m
                state.second_moment[k] = v
                new.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
    state.step_count += 1
    out = MlpModel(list(model.layer_sizes), new[:n_layers], new[n_layers:])
    for i in range(n_layers):
        if not (np.all(np.isfinite(out.weights[i])) and np.all(np.isfinite(out.biases[i]))):
            raise FloatingPointError(f"non-finite parameters in layer {i} after update")
    return out, state
