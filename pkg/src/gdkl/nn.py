"""Fully-connected ReLU feature extractor with hand-written backprop.

Parameters live in one flat vector. Layer ``i`` occupies ``W_i`` (in x out,
row-major) followed by ``b_i`` (out). Hidden layers use ReLU, the output
layer is affine. The ReLU subgradient at exactly zero is taken to be 0.

Checkpoint format (``save_params``/``load_params``): an unsigned 64-bit
little-endian length ``n`` followed by ``n`` little-endian float64 values.
The ``.txt`` variant writes ``n`` on the first line and one ``repr`` decimal
per following line.
"""
from dataclasses import dataclass, field
import struct

import numpy as np

from gdkl import autodiff as ad
from gdkl.errors import DimensionMismatch, InvalidArchitecture, LengthMismatch, NoRecordedForward

DEFAULT_HIDDEN = (100, 100, 100, 20)


@dataclass
class FeatureNetwork:
    layer_sizes: tuple
    params: np.ndarray
    grad: np.ndarray = None
    _cache: list = field(default=None, repr=False)

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (num_params(self.layer_sizes),):
            raise LengthMismatch(
                f"expected {num_params(self.layer_sizes)} parameters, got {self.params.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.params)

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def layers(self, vector=None):
        """Yield ``(W, b)`` views into ``vector`` (defaults to the parameters)."""
        vector = self.params if vector is None else vector
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = vector[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = vector[offset : offset + fan_out]
            offset += fan_out
            yield W, b

    def zero_grad(self):
        self.grad[:] = 0.0

    def copy(self):
        return FeatureNetwork(self.layer_sizes, self.params.copy())


def num_params(layer_sizes):
    return sum((a + 1) * b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


def _validate_sizes(layer_sizes):
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise InvalidArchitecture(f"need at least two positive layer sizes, got {sizes}")
    return sizes


def init_network(layer_sizes, rng):
    """He-normal weights (variance 2 / fan_in), zero biases."""
    sizes = _validate_sizes(layer_sizes)
    params = np.zeros(num_params(sizes))
    net = FeatureNetwork(tuple(sizes), params)
    for W, _ in net.layers():
        W[:] = rng.standard_normal(W.shape) * np.sqrt(2.0 / W.shape[0])
    return net


def forward(net, X, record=False):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != net.layer_sizes[0]:
        raise DimensionMismatch(f"network expects {net.layer_sizes[0]} inputs, got {X.shape[1]}")
    cache = [X] if record else None
    h = X
    layers = list(net.layers())
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
        if record:
            cache.append(h)
    if record:
        net._cache = cache
    return h


def backward(net, upstream):
    """Gradient of ``sum(upstream * forward(X))`` with respect to the parameters.

    Uses the activations recorded by the last ``forward(..., record=True)``.
    """
    if net._cache is None:
        raise NoRecordedForward("call forward(net, X, record=True) before backward")
    cache = net._cache
    g = np.asarray(upstream, dtype=float)
    if g.shape != cache[-1].shape:
        raise DimensionMismatch(f"upstream gradient shape {g.shape} != output shape {cache[-1].shape}")
    grad = np.zeros_like(net.params)
    grad_layers = list(net.layers(grad))
    layers = list(net.layers())
    for i in range(len(layers) - 1, -1, -1):
        if i < len(layers) - 1:
            g = g * (cache[i + 1] > 0.0)
        dW, db = grad_layers[i]
        dW[:] = cache[i].T @ g
        db[:] = g.sum(axis=0)
        if i > 0:
            g = g @ layers[i][0].T
    return grad


def features_node(net, theta, X):
    """Network output as a tape node whose parent is the parameter node ``theta``.

    ``theta.value`` must be the array backing ``net.params``.
    """
    out = forward(net, X, record=True)
    cache = net._cache

    def vjp(g):
        net._cache = cache
        return backward(net, g)

    return ad._make(out, (theta, vjp))


# optimizers -------------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    milestones: tuple = (0.6, 0.8)
    decay_mask: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None
    step: int = 0


@dataclass
class SGDMomentum:
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = (0.6, 0.8)
    decay_mask: np.ndarray = None
    velocity: np.ndarray = None
    step: int = 0


def scheduled_lr(base_lr, milestones, current_step, total_steps):
    """Base rate divided by 10 for every milestone fraction already reached."""
    if total_steps <= 0:
        return base_lr
    passed = sum(current_step >= frac * total_steps for frac in milestones)
    return base_lr * 10.0 ** (-passed)


def optimizer_step(state, params, grads, current_step, total_steps):
    """One update. Returns ``(new_params, state)``; buffers in ``state`` update in place."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise LengthMismatch(f"params {params.shape} vs grads {grads.shape}")
    lr = scheduled_lr(state.lr, state.milestones, current_step, total_steps)
    state.step += 1
    if isinstance(state, Adam):
        if state.m is None:
            state.m = np.zeros_like(params)
            state.v = np.zeros_like(params)
        if state.m.shape != params.shape:
            raise LengthMismatch("optimizer buffers do not match the parameter vector")
        state.m = state.beta1 * state.m + (1 - state.beta1) * grads
        state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
        m_hat = state.m / (1 - state.beta1**state.step)
        v_hat = state.v / (1 - state.beta2**state.step)
        update = m_hat / (np.sqrt(v_hat) + state.eps)
    elif isinstance(state, SGDMomentum):
        if state.velocity is None:
            state.velocity = np.zeros_like(params)
        if state.velocity.shape != params.shape:
            raise LengthMismatch("optimizer buffers do not match the parameter vector")
        state.velocity = state.momentum * state.velocity + grads
        update = state.velocity
    else:
        raise TypeError(f"unknown optimizer state {type(state).__name__}")
    new = params - lr * update
    if state.weight_decay:
        mask = 1.0 if state.decay_mask is None else state.decay_mask
        new = new - lr * state.weight_decay * mask * params
    return new, state


# checkpoints ------------------------------------------------------------------


def save_params(path, vector):
    vector = np.asarray(vector, dtype="<f8").ravel()
    path = str(path)
    if path.endswith(".txt"):
        with open(path, "w") as fh:
            fh.write(f"{vector.size}\n")
            fh.writelines(f"{float(v)!r}\n" for v in vector)
        return
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", vector.size))
        fh.write(vector.tobytes())


def load_params(path):
    path = str(path)
    if path.endswith(".txt"):
        with open(path) as fh:
            n = int(fh.readline())
            values = np.array([float(line) for line in fh if line.strip()])
    else:
        with open(path, "rb") as fh:
            (n,) = struct.unpack("<Q", fh.read(8))
            values = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    if values.size != n:
        raise LengthMismatch(f"checkpoint declares {n} values but holds {values.size}")
    return values
