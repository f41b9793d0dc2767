"""Feed-forward networks, inverted dropout and Adam on top of the diffla tape.

Batches are column-major: an input batch is ``in_dim x batch`` and a layer
computes ``W @ x + b[:, None]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffla as D

CHECKPOINT_FORMAT = "neuraldmd-mlp"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_arrays(cls, arrays, activation: str) -> "MlpParams":
        arrays = list(arrays)
        return cls(arrays[0::2], arrays[1::2], activation)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation)

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "layers": [
                {"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in zip(self.weights, self.biases)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        ws, bs = [], []
        for layer in d["layers"]:
            ws.append(np.asarray(layer["weight"], dtype=float).reshape(layer["shape"]))
            bs.append(np.asarray(layer["bias"], dtype=float))
        return cls(ws, bs, d.get("activation", "tanh"))


ACTIVATIONS = {"tanh": D.tanh, "relu": D.relu}


def mlp_init(sizes, activation: str = "tanh", seed=0) -> MlpParams:
    """Glorot-uniform weights and zero biases."""
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise D.ContractViolation("an MLP needs at least an input and an output layer")
    if min(sizes) < 1:
        raise D.ContractViolation(f"zero-width layer in {sizes}")
    if activation not in ACTIVATIONS:
        raise D.ContractViolation(f"unknown activation {activation!r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs, activation)


@dataclass
class DropoutMask:
    """Inverted-dropout masks, one per hidden layer; entries are 0 or 1/keep."""

    masks: list[np.ndarray]
    keep: float

    @classmethod
    def sample(cls, params: MlpParams, batch: int, rate: float, rng: np.random.Generator):
        keep = 1.0 - rate
        masks = [
            (rng.random((w.shape[0], batch)) < keep) / keep for w in params.weights[:-1]
        ]
        return cls(masks, keep)


def mlp_apply(weights, biases, x, activation: str = "tanh", mask: DropoutMask | None = None):
    """Forward pass over explicit (possibly Var) weights; see :func:`mlp_forward`."""
    act = ACTIVATIONS[activation]
    h = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = w @ h + D.reshape(b, (-1, 1))
        if i < last:
            h = act(h)
            if mask is not None:
                h = h * mask.masks[i]
    return h


@dataclass
class MlpTrace:
    """Tape fragment of one forward pass."""

    tape: D.Tape
    inputs: D.Var
    params: list[D.Var]
    output: D.Var
    activation: str = "tanh"


def mlp_forward(p: MlpParams, x, mask: DropoutMask | None = None, tape: D.Tape | None = None):
    """Evaluate the network and return ``(output_array, trace)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] != p.sizes[0]:
        raise D.ContractViolation(f"input of shape {x.shape} does not match width {p.sizes[0]}")
    tape = tape or D.Tape()
    xv = tape.leaf(x)
    pv = [tape.leaf(a) for a in p.arrays()]
    out = mlp_apply(pv[0::2], pv[1::2], xv, p.activation, mask)
    return out.value, MlpTrace(tape, xv, pv, out, p.activation)


def mlp_backward(trace: MlpTrace, out_adjoint) -> tuple[MlpParams, np.ndarray]:
    """Parameter adjoints (packed as MlpParams) and the input adjoint."""
    grads = trace.tape.gradient(trace.output, trace.params + [trace.inputs],
                                seed=np.asarray(out_adjoint, dtype=float))
    return MlpParams.from_arrays(grads[:-1], trace.activation), grads[-1]


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    state: AdamState | None = field(default=None, repr=False)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.state is None:
            self.state = AdamState.zeros_like(params)
        new, self.state = adam_step(params, grads, self.state, self.lr, self.beta1,
                                    self.beta2, self.eps)
        return new


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new parameter list and state."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise D.ContractViolation("parameter, gradient and state lists differ in length")
    t = state.step + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise D.ContractViolation(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


def save_params(path, nets: dict[str, MlpParams], header: dict | None = None) -> None:
    """Write networks as a JSON checkpoint (doubles round-trip exactly)."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "header": header or {},
        "networks": {name: p.to_dict() for name, p in nets.items()},
    }
    Path(path).write_text(json.dumps(doc))


def load_params(path) -> tuple[dict[str, MlpParams], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    nets = {name: MlpParams.from_dict(d) for name, d in doc["networks"].items()}
    return nets, doc.get("header", {})
