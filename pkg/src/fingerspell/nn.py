"""Minimal float64 neural-network primitives with exact analytic backward passes.

Everything here is sized for desk-scale models: single-sequence forward /
backward, parameters held in plain numpy arrays, and a finite-difference
harness (`grad_check`) that every layer must survive.  No autodiff: each
layer caches what its own backward needs.

Backward convention: ``backward(dy)`` accumulates into ``Param.grad`` and
returns the gradient w.r.t. the layer input.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class GradientError(RuntimeError):
    """Non-finite gradient or a shape violation during backprop."""


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


def zero_grads(params) -> None:
    for p in params:
        p.grad[...] = 0.0


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 128
    heads: int = 2
    ffn_dim: int = 512
    layers: int = 2
    dropout: float = 0.3
    add_positional: bool = True

    def __post_init__(self) -> None:
        if self.model_dim % self.heads != 0:
            raise ValueError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")


# ---------------------------------------------------------------------------
# stateless math

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    return (dy - (dy * y).sum(axis=axis, keepdims=True)) * y


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def positional_encoding(T: int, dim: int) -> np.ndarray:
    """Sinusoidal positional encoding, (T, dim)."""
    pe = np.zeros((T, dim), dtype=np.float64)
    pos = np.arange(T, dtype=np.float64)[:, None]
    div = np.exp(-math.log(10000.0) * np.arange(0, dim, 2, dtype=np.float64) / dim)
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: dim // 2])
    return pe


def xavier_uniform(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_in, n_out))


# ---------------------------------------------------------------------------
# layers

class Linear:
    """y = x W + b with cached input for the backward pass."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "linear"):
        self.W = Param(f"{name}.W", xavier_uniform(rng, n_in, n_out))
        self.b = Param(f"{name}.b", np.zeros(n_out))
        self._x: Optional[np.ndarray] = None

    def params(self):
        return [self.W, self.b]

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        if x.shape[-1] != self.W.value.shape[0]:
            raise GradientError(
                f"{self.W.name}: input dim {x.shape[-1]} != {self.W.value.shape[0]}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._x
        self.W.grad += x.T @ dy
        self.b.grad += dy.sum(axis=0)
        return dy @ self.W.value.T


class LayerNorm:
    """Row-wise normalization with learned gain/bias.

    eps is tiny (1e-12) so a freshly initialized layer really does emit
    unit-variance rows; float64 keeps that numerically safe.
    """

    EPS = 1e-12

    def __init__(self, dim: int, name: str = "ln"):
        self.gamma = Param(f"{name}.gamma", np.ones(dim))
        self.beta = Param(f"{name}.beta", np.zeros(dim))
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        std = np.sqrt(var + self.EPS)
        xhat = xc / std
        self._cache = (xhat, std)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, std = self._cache
        self.gamma.grad += (dy * xhat).sum(axis=0)
        self.beta.grad += dy.sum(axis=0)
        dxhat = dy * self.gamma.value
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return (dxhat - m1 - xhat * m2) / std


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._mask


class Dropout:
    """Inverted dropout: scales by 1/(1-p) at train time, identity at eval."""

    def __init__(self, p: float):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout p must be in [0,1), got {p}")
        self.p = p
        self._mask = None

    def params(self):
        return []

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        if not train or self.p == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise GradientError("train-mode dropout needs an rng")
        self._mask = (rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy if self._mask is None else dy * self._mask


class MultiHeadSelfAttention:
    """Scaled dot-product self-attention over the full sequence (non-causal)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, name: str = "attn"):
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.dk = dim, heads, dim // heads
        self.Wq = Param(f"{name}.Wq", xavier_uniform(rng, dim, dim))
        self.bq = Param(f"{name}.bq", np.zeros(dim))
        self.Wk = Param(f"{name}.Wk", xavier_uniform(rng, dim, dim))
        self.bk = Param(f"{name}.bk", np.zeros(dim))
        self.Wv = Param(f"{name}.Wv", xavier_uniform(rng, dim, dim))
        self.bv = Param(f"{name}.bv", np.zeros(dim))
        self.Wo = Param(f"{name}.Wo", xavier_uniform(rng, dim, dim))
        self.bo = Param(f"{name}.bo", np.zeros(dim))
        self._cache = None

    def params(self):
        return [self.Wq, self.bq, self.Wk, self.bk, self.Wv, self.bv, self.Wo, self.bo]

    def _split(self, x: np.ndarray) -> np.ndarray:
        T = x.shape[0]
        return x.reshape(T, self.heads, self.dk).transpose(1, 0, 2)  # (h, T, dk)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        h, T, dk = x.shape
        return x.transpose(1, 0, 2).reshape(T, h * dk)

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        if x.shape[0] == 0:
            raise GradientError("attention over an empty sequence")
        q = self._split(x @ self.Wq.value + self.bq.value)
        k = self._split(x @ self.Wk.value + self.bk.value)
        v = self._split(x @ self.Wv.value + self.bv.value)
        scores = q @ k.transpose(0, 2, 1) / math.sqrt(self.dk)  # (h, T, T)
        attn = softmax(scores, axis=-1)
        ctx = self._merge(attn @ v)  # (T, dim)
        self._cache = (x, q, k, v, attn, ctx)
        return ctx @ self.Wo.value + self.bo.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, q, k, v, attn, ctx = self._cache
        self.Wo.grad += ctx.T @ dy
        self.bo.grad += dy.sum(axis=0)
        dctx = self._split(dy @ self.Wo.value.T)
        dattn = dctx @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dctx
        dscores = softmax_backward(attn, dattn, axis=-1) / math.sqrt(self.dk)
        dq = dscores @ k
        dk_ = dscores.transpose(0, 2, 1) @ q
        dqm, dkm, dvm = self._merge(dq), self._merge(dk_), self._merge(dv)
        self.Wq.grad += x.T @ dqm
        self.bq.grad += dqm.sum(axis=0)
        self.Wk.grad += x.T @ dkm
        self.bk.grad += dkm.sum(axis=0)
        self.Wv.grad += x.T @ dvm
        self.bv.grad += dvm.sum(axis=0)
        return dqm @ self.Wq.value.T + dkm @ self.Wk.value.T + dvm @ self.Wv.value.T


class EncoderLayer:
    """Pre-norm transformer layer: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str = "enc"):
        d = cfg.model_dim
        self.ln1 = LayerNorm(d, f"{name}.ln1")
        self.attn = MultiHeadSelfAttention(d, cfg.heads, rng, f"{name}.attn")
        self.drop1 = Dropout(cfg.dropout)
        self.ln2 = LayerNorm(d, f"{name}.ln2")
        self.ffn1 = Linear(d, cfg.ffn_dim, rng, f"{name}.ffn1")
        self.relu = ReLU()
        self.ffn2 = Linear(cfg.ffn_dim, d, rng, f"{name}.ffn2")
        self.drop2 = Dropout(cfg.dropout)

    def params(self):
        return (self.ln1.params() + self.attn.params() + self.ln2.params()
                + self.ffn1.params() + self.ffn2.params())

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        a = x + self.drop1.forward(
            self.attn.forward(self.ln1.forward(x), train, rng), train, rng)
        h = self.ffn2.forward(self.relu.forward(self.ffn1.forward(self.ln2.forward(a))))
        return a + self.drop2.forward(h, train, rng)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = self.drop2.backward(dy)
        da = dy + self.ln2.backward(
            self.ffn1.backward(self.relu.backward(self.ffn2.backward(dh))))
        dattn = self.drop1.backward(da)
        return da + self.ln1.backward(self.attn.backward(dattn))


class EncoderStack:
    """Positional encoding (once) followed by the configured encoder layers."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, name: str = "enc"):
        self.cfg = cfg
        self.layers = [EncoderLayer(cfg, rng, f"{name}.{i}") for i in range(cfg.layers)]

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x: np.ndarray, train: bool = False, rng=None) -> np.ndarray:
        if self.cfg.add_positional:
            x = x + positional_encoding(x.shape[0], self.cfg.model_dim)
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient in {p.name}; aborting step {self.t}")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            mhat = self.m[i] / (1 - self.beta1 ** self.t)
            vhat = self.v[i] / (1 - self.beta2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


# ---------------------------------------------------------------------------
# verification harness

def grad_check(params, loss_fn, step: float = 1e-5, limit: int = 10_000,
               rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between stored analytic grads and central differences.

    ``loss_fn()`` must recompute the scalar loss from current parameter values
    (eval mode: no dropout).  Analytic gradients must already sit in
    ``Param.grad``.  Above ``limit`` total entries a random subsample of that
    size is checked.  Relative error uses |a-n| / max(|a|+|n|, 1e-4) so that
    finite-difference noise on near-zero gradients does not dominate.
    """
    entries = [(p, i) for p in params for i in range(p.value.size)]
    if len(entries) > limit:
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.choice(len(entries), size=limit, replace=False)
        entries = [entries[int(j)] for j in pick]
    worst = 0.0
    for p, i in entries:
        flat = p.value.reshape(-1)
        orig = flat[i]
        flat[i] = orig + step
        f_plus = loss_fn()
        flat[i] = orig - step
        f_minus = loss_fn()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        analytic = p.grad.reshape(-1)[i]
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-4)
        worst = max(worst, err)
    return worst
