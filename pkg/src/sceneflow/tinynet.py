"""Small fully-connected ReLU network with hand-written backprop and Adam.

Hidden layers use ReLU, the output layer is affine.  Everything runs in
float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TinyNet:
    """MLP ``widths[0] -> ... -> widths[-1]``."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for W, b, W_next in zip(weights, biases, weights[1:] + [None]):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ValueError("weight/bias shapes are inconsistent")
            if W_next is not None and W_next.shape[0] != W.shape[1]:
                raise ValueError("consecutive layer widths do not chain")
        self.weights = [np.asarray(W, dtype=np.float64) for W in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]

    @property
    def widths(self):
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    @property
    def params(self):
        """Parameter arrays in a fixed order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def copy(self):
        return TinyNet([W.copy() for W in self.weights], [b.copy() for b in self.biases])

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        pos = 0
        for p in self.params:
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != flat.size:
            raise ValueError("flat parameter vector has the wrong length")

    def forward(self, X, return_cache=False):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.widths[0]:
            raise ValueError(f"expected input of shape (N, {self.widths[0]}), got {X.shape}")
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                np.maximum(h, 0.0, out=h)
            acts.append(h)
        return (h, acts) if return_cache else h

    __call__ = forward

    def backward(self, cache, grad_out, need_input_grad=False):
        """Reverse-mode gradients given the forward cache and dL/d(output).

        Returns ``(param_grads, input_grad)`` with ``param_grads`` ordered
        like :attr:`params`; ``input_grad`` is None unless requested.
        """
        acts = cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output {acts[-1].shape}")
        n_layers = len(self.weights)
        grads = [None] * (2 * n_layers)
        for i in range(n_layers - 1, -1, -1):
            if i < n_layers - 1:
                g = g * (acts[i + 1] > 0)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or need_input_grad:
                g = g @ self.weights[i].T
        return grads, (g if need_input_grad else None)


def init(widths, seed=0, output_scale=1.0):
    """He-normal weights for ReLU-fed layers, zero biases.

    ``output_scale`` multiplies the final (affine) layer's weights; 0 gives a
    network whose initial output is exactly zero.
    """
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError("widths need an input and an output size, all positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        W = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        if i == len(widths) - 2:
            W *= output_scale
        weights.append(W)
        biases.append(np.zeros(fan_out))
    return TinyNet(weights, biases)


def forward(net, inputs):
    return net.forward(inputs)


def backward(net, inputs, upstream):
    """Parameter and input gradients of ``sum(upstream * net(inputs))``."""
    _, cache = net.forward(inputs, return_cache=True)
    return net.backward(cache, upstream, need_input_grad=True)


@dataclass
class AdamState:
    lr: float = 0.004
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net, lr=0.004, **kw):
        return cls(lr=lr, m=[np.zeros_like(p) for p in net.params],
                   v=[np.zeros_like(p) for p in net.params], **kw)


def adam_step(net, state, grads):
    """One bias-corrected Adam update in place (no weight decay)."""
    if len(grads) != len(state.m):
        raise ValueError("gradient list does not match optimizer state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(net.params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state
