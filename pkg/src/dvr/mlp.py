"""Multilayer perceptrons with analytic forward/backward passes.

Used for the feature extractor, the two posterior estimators, and the
decoder. Weights are stored as (fan_in, fan_out) matrices so a batch with
rows as samples maps through `batch @ w + b`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng

__all__ = [
    "ACTIVATIONS",
    "MlpSpec",
    "MlpParams",
    "MlpTape",
    "mlp_spec",
    "mlp_init",
    "mlp_forward",
    "mlp_backward",
]

#: nonlinearity name -> (f, df/dx expressed via the pre-activation)
LEAKY_SLOPE = 0.2

ACTIVATIONS = ("identity", "lrelu", "tanh")


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "identity":
        return x
    if name == "lrelu":
        return np.where(x > 0.0, x, LEAKY_SLOPE * x)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(pre)
    if name == "lrelu":
        return np.where(pre > 0.0, 1.0, LEAKY_SLOPE)
    if name == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    raise ValueError(f"unknown activation {name!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths plus one nonlinearity per layer.

    `widths` includes the input width, so an MLP with L layers has
    len(widths) == L + 1 and len(activations) == L. `dropout` is the drop
    probability applied to hidden-layer activations when a forward pass is
    run in training mode; 0 disables it.
    """

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer")
        if any(w < 1 for w in self.widths):
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ValueError("need exactly one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1


def mlp_spec(
    in_dim: int,
    hidden: tuple[int, ...] | list[int],
    out_dim: int,
    hidden_activation: str = "lrelu",
    output_activation: str = "identity",
    dropout: float = 0.0,
) -> MlpSpec:
    """Convenience factory: hidden layers share one nonlinearity."""
    widths = (in_dim, *hidden, out_dim)
    acts = (hidden_activation,) * len(hidden) + (output_activation,)
    return MlpSpec(widths=widths, activations=acts, dropout=dropout)


@dataclass
class MlpParams:
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        """Flat name -> array view of every parameter (shared storage)."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )


@dataclass
class MlpTape:
    """Per-batch cache for the backward pass."""

    inputs: list[np.ndarray]       # activation entering each layer, inputs[0] = batch
    preacts: list[np.ndarray]      # pre-activation of each layer
    drop_masks: list[np.ndarray | None]


def mlp_init(spec: MlpSpec, rng: Rng, scale: float = 1.0) -> MlpParams:
    """Gaussian init: weights ~ N(0, scale^2 / fan_in), biases zero."""
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    params = MlpParams()
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        std = scale / np.sqrt(fan_in)
        params.weights.append(rng.normal(fan_in, fan_out) * std)
        params.biases.append(np.zeros(fan_out))
    return params


def _check_params(params: MlpParams, spec: MlpSpec) -> None:
    if len(params.weights) != spec.n_layers or len(params.biases) != spec.n_layers:
        raise ValueError("parameter count does not match spec")
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        expect = (spec.widths[i], spec.widths[i + 1])
        if w.shape != expect or b.shape != (spec.widths[i + 1],):
            raise ValueError(f"layer {i} shapes {w.shape}/{b.shape} != spec {expect}")


def mlp_forward(
    params: MlpParams,
    spec: MlpSpec,
    batch: np.ndarray,
    training: bool = False,
    rng: Rng | None = None,
) -> tuple[np.ndarray, MlpTape]:
    """Forward a (batch, in_dim) matrix; returns output and backward tape.

    Dropout (inverted, on hidden activations) fires only when `training` is
    true, spec.dropout > 0 and an rng is supplied; otherwise the pass is a
    pure deterministic function.
    """
    _check_params(params, spec)
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != spec.in_dim:
        raise ValueError(
            f"batch shape {batch.shape} does not match input width {spec.in_dim}"
        )
    use_dropout = training and spec.dropout > 0.0 and rng is not None
    keep = 1.0 - spec.dropout
    tape = MlpTape(inputs=[batch], preacts=[], drop_masks=[])
    a = batch
    for i in range(spec.n_layers):
        pre = a @ params.weights[i] + params.biases[i]
        tape.preacts.append(pre)
        a = _act(spec.activations[i], pre)
        if use_dropout and i < spec.n_layers - 1:
            mask = (rng.uniform(a.size).reshape(a.shape) < keep) / keep
            a = a * mask
            tape.drop_masks.append(mask)
        else:
            tape.drop_masks.append(None)
        if i < spec.n_layers - 1:
            tape.inputs.append(a)
    return a, tape


def mlp_backward(
    params: MlpParams,
    spec: MlpSpec,
    tape: MlpTape,
    upstream: np.ndarray,
) -> tuple[MlpParams, np.ndarray]:
    """Gradients of the scalar loss seeded by `upstream` (d loss / d output).

    Returns (param_grads, input_grad) where param_grads mirrors MlpParams.
    """
    _check_params(params, spec)
    if len(tape.preacts) != spec.n_layers:
        raise ValueError("tape does not match spec")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != tape.preacts[-1].shape:
        raise ValueError(
            f"upstream shape {upstream.shape} != output shape {tape.preacts[-1].shape}"
        )
    grads = MlpParams(
        weights=[np.empty(0)] * spec.n_layers,
        biases=[np.empty(0)] * spec.n_layers,
    )
    delta = upstream
    for i in reversed(range(spec.n_layers)):
        mask = tape.drop_masks[i]
        if mask is not None:
            delta = delta * mask
        delta = delta * _act_grad(spec.activations[i], tape.preacts[i])
        grads.weights[i] = tape.inputs[i].T @ delta
        grads.biases[i] = delta.sum(axis=0)
        delta = delta @ params.weights[i].T
    return grads, delta
