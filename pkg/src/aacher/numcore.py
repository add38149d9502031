"""Multilayer perceptrons with layer normalization, backprop, and Adam.

Every parameter array may carry an optional leading *member* axis. A stack of
``M`` networks with identical layer sizes is stored as weights of shape
``(M, fan_in, fan_out)`` and evaluated with one batched matmul; an unstacked
network uses plain ``(fan_in, fan_out)`` matrices. Inputs are ``(batch, in)``
or a single vector ``(in,)``. A shared input broadcasts across all members.

Hidden layer: affine -> layer norm -> gain/bias -> ReLU.
Output layer: affine, then optionally tanh.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .rng import Rng

LN_EPS = 1e-6
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shapes, ordering, ...)."""


class TrainingDivergence(FloatingPointError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, layer: int | None = None):
        super().__init__(message)
        self.layer = layer


@dataclass
class MlpParams:
    layer_sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_gain: list[np.ndarray]
    ln_bias: list[np.ndarray]
    output_activation: str = "linear"
    ln_eps: float = LN_EPS

    def __post_init__(self):
        self.layer_sizes = tuple(int(n) for n in self.layer_sizes)
        if self.output_activation not in ("linear", "tanh"):
            raise ContractViolation(f"unknown output activation {self.output_activation!r}")
        n_layers = len(self.layer_sizes) - 1
        n_hidden = n_layers - 1
        if n_layers < 1:
            raise ContractViolation("an MLP needs at least an input and an output width")
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ContractViolation("weights/biases count disagrees with layer_sizes")
        if len(self.ln_gain) != n_hidden or len(self.ln_bias) != n_hidden:
            raise ContractViolation("layer-norm parameter count disagrees with hidden layers")
        lead = self.weights[0].shape[:-2]
        for i in range(n_layers):
            fan_in, fan_out = self.layer_sizes[i], self.layer_sizes[i + 1]
            if self.weights[i].shape != lead + (fan_in, fan_out):
                raise ContractViolation(
                    f"layer {i}: weight shape {self.weights[i].shape}, expected {lead + (fan_in, fan_out)}")
            if self.biases[i].shape != lead + (fan_out,):
                raise ContractViolation(f"layer {i}: bias shape {self.biases[i].shape}")
            if i < n_hidden:
                for name, arr in (("ln_gain", self.ln_gain[i]), ("ln_bias", self.ln_bias[i])):
                    if arr.shape != lead + (fan_out,):
                        raise ContractViolation(f"layer {i}: {name} shape {arr.shape}")

    @property
    def n_hidden(self) -> int:
        return len(self.layer_sizes) - 2

    @property
    def members(self) -> int | None:
        """Size of the leading member axis, or None for a single network."""
        lead = self.weights[0].shape[:-2]
        return lead[0] if lead else None

    def named_tensors(self) -> Iterator[tuple[int, str, np.ndarray]]:
        """(layer index, name, array) in a fixed canonical order."""
        for i in range(len(self.weights)):
            yield i, "weight", self.weights[i]
            yield i, "bias", self.biases[i]
            if i < self.n_hidden:
                yield i, "ln_gain", self.ln_gain[i]
                yield i, "ln_bias", self.ln_bias[i]

    def tensors(self) -> list[np.ndarray]:
        return [arr for _, _, arr in self.named_tensors()]

    def _rebuild(self, arrays: list[np.ndarray]) -> "MlpParams":
        it = iter(arrays)
        weights, biases, gains, lbiases = [], [], [], []
        for i in range(len(self.weights)):
            weights.append(next(it))
            biases.append(next(it))
            if i < self.n_hidden:
                gains.append(next(it))
                lbiases.append(next(it))
        return MlpParams(self.layer_sizes, weights, biases, gains, lbiases,
                         self.output_activation, self.ln_eps)

    def map(self, fn) -> "MlpParams":
        return self._rebuild([fn(a) for a in self.tensors()])

    def copy(self) -> "MlpParams":
        return self.map(np.array)

    def zeros_like(self) -> "MlpParams":
        return self.map(np.zeros_like)

    def member(self, i: int) -> "MlpParams":
        """View of member ``i`` of a stacked set as an unstacked network."""
        if self.members is None:
            raise ContractViolation("member() needs stacked parameters")
        return self.map(lambda a: a[i])

    @staticmethod
    def stack(nets: list["MlpParams"]) -> "MlpParams":
        first = nets[0]
        columns = zip(*(n.tensors() for n in nets))
        return first._rebuild([np.stack(col) for col in columns])


def init_mlp(layer_sizes, rng: Rng, output_activation: str = "linear",
             final_bound: float | None = None, members: int | None = None) -> MlpParams:
    """Uniform +-1/sqrt(fan_in) init; ``final_bound`` overrides the last layer's range.

    With ``members`` set, draws a stack of independent networks in one go.
    """
    layer_sizes = tuple(int(n) for n in layer_sizes)
    lead = () if members is None else (int(members),)
    n_layers = len(layer_sizes) - 1
    weights, biases, gains, lbiases = [], [], [], []
    for i in range(n_layers):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        bound = 1.0 / np.sqrt(fan_in)
        if i == n_layers - 1 and final_bound is not None:
            bound = final_bound
        weights.append(rng.uniform(-bound, bound, lead + (fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, lead + (fan_out,)))
        if i < n_layers - 1:
            gains.append(np.ones(lead + (fan_out,)))
            lbiases.append(np.zeros(lead + (fan_out,)))
    return MlpParams(layer_sizes, weights, biases, gains, lbiases, output_activation)


@dataclass
class ForwardCache:
    squeeze: bool
    hidden: list[tuple] = field(default_factory=list)
    output: tuple = ()


def _row(v: np.ndarray) -> np.ndarray:
    # (..., n) -> (..., 1, n) so per-member vectors broadcast over the batch axis
    return v[..., None, :]


def _t(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _row_mean(a: np.ndarray) -> np.ndarray:
    # mean over the last axis as a matrix-vector product, noticeably faster than a.mean(-1)
    n = a.shape[-1]
    return a @ np.full((n, 1), 1.0 / n)


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (params.layer_sizes[0],):
        raise ContractViolation(f"input width {x.shape[-1:]} but network expects {params.layer_sizes[0]}")
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    cache = ForwardCache(squeeze)
    h = x
    for i in range(params.n_hidden):
        z = h @ params.weights[i]
        z += _row(params.biases[i])
        z -= _row_mean(z)
        var = np.einsum("...i,...i->...", z, z)[..., None] / z.shape[-1]
        inv_std = 1.0 / np.sqrt(var + params.ln_eps)
        xhat = z
        xhat *= inv_std
        u = xhat * _row(params.ln_gain[i])
        u += _row(params.ln_bias[i])
        h_out = np.maximum(u, 0.0, out=u)
        cache.hidden.append((h, xhat, inv_std, h_out))
        h = h_out
    z = h @ params.weights[-1]
    z += _row(params.biases[-1])
    out = np.tanh(z, out=z) if params.output_activation == "tanh" else z
    cache.output = (h, out)
    if squeeze:
        out = out[..., 0, :]
    return out, cache


def mlp_backward(params: MlpParams, cache: ForwardCache | None, upstream,
                 param_grads: bool = True) -> tuple[MlpParams | None, np.ndarray]:
    """Gradients of ``sum(output * upstream)`` w.r.t. every parameter and the input.

    ``upstream`` has the shape of the forward output. The input gradient keeps
    the member axis when parameters are stacked, even if the input was shared.
    With ``param_grads=False`` only the input gradient is computed (grads is None).
    """
    if cache is None or not cache.output:
        raise ContractViolation("mlp_backward needs the cache from mlp_forward")
    dy = np.asarray(upstream, dtype=np.float64)
    if cache.squeeze:
        dy = dy[..., None, :]
    h, out = cache.output
    if dy.shape[-1] != out.shape[-1]:
        raise ContractViolation(f"upstream width {dy.shape[-1]} but output width {out.shape[-1]}")
    dz = dy * (1.0 - out * out) if params.output_activation == "tanh" else dy

    n = len(params.weights)
    gw: list = [None] * n
    gb: list = [None] * n
    gg: list = [None] * params.n_hidden
    gbeta: list = [None] * params.n_hidden
    if param_grads:
        gw[-1] = _t(h) @ dz
        gb[-1] = dz.sum(axis=-2)
    dh = dz @ _t(params.weights[-1])
    for i in reversed(range(params.n_hidden)):
        h_in, xhat, inv_std, h_out = cache.hidden[i]
        gain = params.ln_gain[i]
        du = dh
        du *= h_out > 0.0
        p = du * xhat
        if param_grads:
            gg[i] = p.sum(axis=-2)
            gbeta[i] = du.sum(axis=-2)
        # d xhat = du * gain; its row mean and the row mean of (d xhat * xhat) via gemv
        mean_dx_xhat = (p @ gain[..., :, None]) / gain.shape[-1]
        dz = du * _row(gain)
        dz -= _row_mean(dz)
        np.multiply(xhat, mean_dx_xhat, out=p)
        dz -= p
        dz *= inv_std
        if param_grads:
            gw[i] = _t(h_in) @ dz
            gb[i] = dz.sum(axis=-2)
        dh = dz @ _t(params.weights[i])
    if cache.squeeze:
        dh = dh[..., 0, :]
    if not param_grads:
        return None, dh
    grads = MlpParams(params.layer_sizes, gw, gb, gg, gbeta, params.output_activation, params.ln_eps)
    return grads, dh


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: MlpParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(params: MlpParams, state: AdamState, grads: MlpParams, lr: float) -> tuple[MlpParams, AdamState]:
    """Bias-corrected Adam update, applied in place. Returns its arguments for chaining."""
    if lr <= 0:
        raise ContractViolation(f"learning rate must be positive, got {lr}")
    named = list(grads.named_tensors())
    for layer, name, g in named:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient in layer {layer} ({name})", layer=layer)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, m, v, (_, _, g) in zip(params.tensors(), state.m.tensors(), state.v.tensors(), named):
        if p.shape != g.shape:
            raise ContractViolation(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def gaussian(rng: Rng, mean: float, std: float, size=None):
    if std < 0:
        raise ContractViolation(f"std must be non-negative, got {std}")
    return rng.normal(mean, std, size)
