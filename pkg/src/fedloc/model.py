"""Dense MLP with hand-written forward/backward over a flat parameter vector.

Parameters live in one float64 vector laid out layer by layer: the weight
matrix (fan_in x fan_out, row-major) followed by that layer's bias. Three
output heads are supported: "linear" (mean squared error), "sigmoid" (mean
binary cross-entropy), and "softmax" (mean categorical cross-entropy). All
updates are plain seeded mini-batch SGD; there is no framework and no hidden
state, so identical inputs give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_HEADS = ("linear", "sigmoid", "softmax")

LOG_EPS = 1e-12  # clamp inside every log

PARAMS_FORMAT = "fedloc-params-v1"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss, gradient, or output."""


@dataclass(frozen=True)
class MlpArchitecture:
    """layer_widths = (input, hidden..., output); at least one hidden layer."""

    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_head: str = "linear"

    def __post_init__(self) -> None:
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ValueError("need input, at least one hidden, and output widths")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_head not in OUTPUT_HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        if self.output_head == "softmax" and widths[-1] < 2:
            raise ValueError("softmax head needs output width >= 2")

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        ws = self.layer_widths
        return sum(ws[i] * ws[i + 1] + ws[i + 1] for i in range(self.n_layers))

    def fingerprint(self) -> str:
        widths = "-".join(str(w) for w in self.layer_widths)
        return f"mlp:{widths}:{self.hidden_activation}:{self.output_head}"


def _layer_slices(arch: MlpArchitecture) -> list[tuple[slice, slice, int, int]]:
    """Per layer: (weight slice, bias slice, fan_in, fan_out) into the flat vector."""
    out, offset = [], 0
    ws = arch.layer_widths
    for i in range(arch.n_layers):
        fan_in, fan_out = ws[i], ws[i + 1]
        w_sl = slice(offset, offset + fan_in * fan_out)
        b_sl = slice(w_sl.stop, w_sl.stop + fan_out)
        out.append((w_sl, b_sl, fan_in, fan_out))
        offset = b_sl.stop
    return out


def init_params(arch: MlpArchitecture, seed: int) -> np.ndarray:
    """Uniform(-1, 1)/sqrt(fan_in) weights, zero biases, drawn layer by layer."""
    rng = np.random.default_rng(seed)
    params = np.zeros(arch.n_params, dtype=np.float64)
    for w_sl, _, fan_in, fan_out in _layer_slices(arch):
        scale = 1.0 / np.sqrt(fan_in)
        params[w_sl] = rng.uniform(-scale, scale, fan_in * fan_out)
    return params


def unflatten(params: np.ndarray, arch: MlpArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (W, b) per layer; W has shape (fan_in, fan_out)."""
    params = np.asarray(params)
    if params.shape != (arch.n_params,):
        raise ValueError(f"parameter vector has length {params.shape}, expected ({arch.n_params},)")
    return [
        (params[w_sl].reshape(fan_in, fan_out), params[b_sl])
        for w_sl, b_sl, fan_in, fan_out in _layer_slices(arch)
    ]


def flatten(layers: list[tuple[np.ndarray, np.ndarray]], arch: MlpArchitecture) -> np.ndarray:
    """Inverse of unflatten; validates every shape."""
    slices = _layer_slices(arch)
    if len(layers) != len(slices):
        raise ValueError(f"expected {len(slices)} layers, got {len(layers)}")
    params = np.empty(arch.n_params, dtype=np.float64)
    for (w, b), (w_sl, b_sl, fan_in, fan_out) in zip(layers, slices):
        if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
            raise ValueError(
                f"layer shapes {w.shape}/{b.shape} do not match ({fan_in}, {fan_out})/({fan_out},)"
            )
        params[w_sl] = np.asarray(w, dtype=np.float64).ravel()
        params[b_sl] = b
    return params


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=1, keepdims=True)


def _forward_cached(params: np.ndarray, arch: MlpArchitecture, x: np.ndarray):
    """Returns (output, hidden pre-activations, layer inputs) for backprop."""
    layers = unflatten(params, arch)
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != arch.layer_widths[0]:
        raise ValueError(f"input must have shape (n, {arch.layer_widths[0]}), got {a.shape}")
    inputs, pre_acts = [], []
    for i, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ w + b
        if i < arch.n_layers - 1:
            pre_acts.append(z)
            a = np.maximum(z, 0.0) if arch.hidden_activation == "relu" else np.tanh(z)
        else:
            if arch.output_head == "linear":
                a = z
            elif arch.output_head == "sigmoid":
                a = _sigmoid(z)
            else:
                a = _softmax(z)
    if not np.all(np.isfinite(a)):
        raise DivergenceError("forward pass produced non-finite outputs")
    return a, pre_acts, inputs


def forward(params: np.ndarray, arch: MlpArchitecture, x: np.ndarray) -> np.ndarray:
    """(n, out) network outputs; softmax rows are probabilities summing to 1."""
    out, _, _ = _forward_cached(params, arch, x)
    return out


def loss(outputs: np.ndarray, targets: np.ndarray, head: str, pos_weight: float = 1.0) -> float:
    """Mean loss matching the head: MSE / binary CE / categorical CE.

    pos_weight scales the positive-class term of the sigmoid head (useful for
    the one-vs-all imbalance); it must be 1.0 for the other heads.
    """
    if head not in OUTPUT_HEADS:
        raise ValueError(f"unknown head {head!r}")
    if head != "sigmoid" and pos_weight != 1.0:
        raise ValueError("pos_weight applies to the sigmoid head only")
    out = np.asarray(outputs, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    if out.shape != tgt.shape:
        raise ValueError(f"outputs {out.shape} and targets {tgt.shape} differ")
    if head == "linear":
        return float(np.mean((out - tgt) ** 2))
    if head == "sigmoid":
        p = np.clip(out, LOG_EPS, 1.0 - LOG_EPS)
        elem = -(pos_weight * tgt * np.log(p) + (1.0 - tgt) * np.log1p(-p))
        return float(np.mean(elem))
    p = np.clip(out, LOG_EPS, 1.0)
    return float(np.mean(-np.sum(tgt * np.log(p), axis=1)))


def loss_and_gradient(
    params: np.ndarray,
    arch: MlpArchitecture,
    x: np.ndarray,
    y: np.ndarray,
    pos_weight: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Mean batch loss and its analytic gradient as a flat vector."""
    out, pre_acts, inputs = _forward_cached(params, arch, x)
    tgt = np.asarray(y, dtype=np.float64)
    if tgt.shape != out.shape:
        raise ValueError(f"targets {tgt.shape} do not match outputs {out.shape}")
    n, m = out.shape
    value = loss(out, tgt, arch.output_head, pos_weight)

    # d(mean loss)/d(output-layer pre-activation)
    if arch.output_head == "linear":
        delta = 2.0 * (out - tgt) / (n * m)
    elif arch.output_head == "sigmoid":
        delta = (out * (1.0 - tgt + pos_weight * tgt) - pos_weight * tgt) / (n * m)
    else:
        delta = (out - tgt) / n

    layers = unflatten(params, arch)
    grad = np.empty(arch.n_params, dtype=np.float64)
    slices = _layer_slices(arch)
    for i in range(arch.n_layers - 1, -1, -1):
        w_sl, b_sl, _, _ = slices[i]
        grad[w_sl] = (inputs[i].T @ delta).ravel()
        grad[b_sl] = delta.sum(axis=0)
        if i > 0:
            upstream = delta @ layers[i][0].T
            z = pre_acts[i - 1]
            if arch.hidden_activation == "relu":
                delta = upstream * (z > 0.0)
            else:
                delta = upstream * (1.0 - np.tanh(z) ** 2)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        raise DivergenceError("non-finite loss or gradient")
    return value, grad


def gradient(
    params: np.ndarray,
    arch: MlpArchitecture,
    x: np.ndarray,
    y: np.ndarray,
    pos_weight: float = 1.0,
) -> np.ndarray:
    return loss_and_gradient(params, arch, x, y, pos_weight)[1]


@dataclass(frozen=True)
class TrainingHyperparams:
    """One local optimization recipe: plain SGD, seeded shuffling."""

    learning_rate: float
    batch_size: int
    local_epochs: int
    seed: int

    def __post_init__(self) -> None:
        if not (np.isfinite(self.learning_rate) and self.learning_rate >= 0.0):
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")


def train_local(
    params: np.ndarray,
    arch: MlpArchitecture,
    x: np.ndarray,
    y: np.ndarray,
    hp: TrainingHyperparams,
    frozen_mask: np.ndarray | None = None,
    pos_weight: float = 1.0,
) -> np.ndarray:
    """hp.local_epochs epochs of seeded mini-batch SGD; returns new params.

    The seeded shuffle decides batch membership; indices inside a batch are
    then sorted so a batch covering the whole epoch reproduces the full-batch
    gradient bitwise. Entries under frozen_mask never change. The input vector
    is not modified.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        raise ValueError("train_local needs at least one sample")
    if frozen_mask is not None and frozen_mask.shape != (arch.n_params,):
        raise ValueError("frozen_mask length does not match the parameter vector")
    out = np.array(params, dtype=np.float64, copy=True)
    if out.shape != (arch.n_params,):
        raise ValueError(f"parameter vector has length {out.shape}, expected ({arch.n_params},)")
    rng = np.random.default_rng(hp.seed)
    for _ in range(hp.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            batch = np.sort(order[start : start + hp.batch_size])
            _, grad = loss_and_gradient(out, arch, x[batch], y[batch], pos_weight)
            if frozen_mask is not None:
                grad[frozen_mask] = 0.0
            out -= hp.learning_rate * grad
    return out


def save_params(path: str, params: np.ndarray, arch: MlpArchitecture) -> None:
    """Checkpoint: flat vector plus the architecture fingerprint, npz format."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (arch.n_params,):
        raise ValueError(f"parameter vector has length {params.shape}, expected ({arch.n_params},)")
    np.savez(path, format=PARAMS_FORMAT, fingerprint=arch.fingerprint(), values=params)


def load_params(path: str, arch: MlpArchitecture | None = None) -> tuple[np.ndarray, str]:
    """Load a checkpoint; if arch is given, its fingerprint must match."""
    path = str(path)
    if not Path(path).exists() and Path(path + ".npz").exists():
        path = path + ".npz"
    with np.load(path) as data:
        if str(data["format"]) != PARAMS_FORMAT:
            raise ValueError(f"{path}: unknown checkpoint format {data['format']!r}")
        fingerprint = str(data["fingerprint"])
        values = np.asarray(data["values"], dtype=np.float64)
    if arch is not None:
        if fingerprint != arch.fingerprint():
            raise ValueError(
                f"{path}: checkpoint fingerprint {fingerprint} does not match {arch.fingerprint()}"
            )
        if values.shape != (arch.n_params,):
            raise ValueError(f"{path}: checkpoint has {values.shape} values, expected {arch.n_params}")
    return values, fingerprint
