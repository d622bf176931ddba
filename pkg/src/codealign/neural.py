"""A small reverse-mode kernel: layers with hand-written backward passes, RMSprop,
finite-difference gradient checks and a flat-text checkpoint format.

Everything is float64. Layers cache what they need on ``forward`` and consume it
on ``backward``; parameter gradients accumulate into ``Tensor.grad``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A named parameter array with a gradient buffer and RMSprop state."""

    def __init__(self, data, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor({self.name!r}, shape={self.shape})"


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    decay: float = 0.99
    epsilon: float = 1e-8
    batch_size: int = 8

    def validate(self):
        if self.learning_rate <= 0 or self.epsilon <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate, epsilon and batch_size must be positive")
        if not 0 <= self.decay < 1:
            raise ValueError("decay must lie in [0, 1)")


def rmsprop_step(params: Sequence[Tensor], config: OptimizerConfig = OptimizerConfig(), grads=None) -> None:
    """In place: v <- decay*v + (1-decay)*g^2; p <- p - lr*g/(sqrt(v)+eps)."""
    grads = [p.grad for p in params] if grads is None else list(grads)
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter expected")
    for p, g in zip(params, grads):
        g = np.asarray(g, dtype=float)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {p.name} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for {p.name or 'parameter'}")
    for p, g in zip(params, grads):
        p.v = config.decay * p.v + (1.0 - config.decay) * g * g
        p.data = p.data - config.learning_rate * g / (np.sqrt(p.v) + config.epsilon)


class Layer:
    kind = "layer"

    def __init__(self):
        self._cache = None

    @property
    def params(self) -> list[Tensor]:
        return []

    def hyper(self) -> list:
        return []

    def forward(self, x, train=False, rng=None, mask=None):
        raise NotImplementedError

    def backward(self, gy):
        raise NotImplementedError

    def _take(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a preceding forward")
        c, self._cache = self._cache, None
        return c


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng=None, weight=None, bias=None):
        super().__init__()
        if weight is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            lim = np.sqrt(6.0 / (n_in + n_out))
            weight = rng.uniform(-lim, lim, (n_in, n_out))
        self.W = Tensor(weight, "W")
        self.b = Tensor(np.zeros(n_out) if bias is None else bias, "b")
        if self.W.shape != (n_in, n_out) or self.b.shape != (n_out,):
            raise ValueError(f"dense parameter shapes {self.W.shape}, {self.b.shape} do not match ({n_in}, {n_out})")

    @property
    def params(self):
        return [self.W, self.b]

    def forward(self, x, train=False, rng=None, mask=None):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"dense layer expects last dimension {self.W.shape[0]}, got {x.shape}")
        self._cache = x
        return x @ self.W.data + self.b.data

    def backward(self, gy):
        x = self._take()
        x2, g2 = x.reshape(-1, x.shape[-1]), gy.reshape(-1, gy.shape[-1])
        self.W.grad += x2.T @ g2
        self.b.grad += g2.sum(axis=0)
        return gy @ self.W.data.T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None, mask=None):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, gy):
        return np.where(self._take(), gy, 0.0)


class LeakyReLU(Layer):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = float(slope)

    def hyper(self):
        return [self.slope]

    def forward(self, x, train=False, rng=None, mask=None):
        self._cache = x > 0
        return np.where(self._cache, x, self.slope * x)

    def backward(self, gy):
        return np.where(self._take(), gy, self.slope * gy)


class Dropout(Layer):
    """Inverted dropout: scaled at train time so eval mode is the identity."""

    kind = "dropout"

    def __init__(self, rate: float):
        super().__init__()
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)

    def hyper(self):
        return [self.rate]

    def forward(self, x, train=False, rng=None, mask=None):
        if not train or self.rate == 0:
            self._cache = None
            self._identity = True
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs a random generator")
        keep = (rng.random(np.shape(x)) >= self.rate) / (1.0 - self.rate)
        self._identity = False
        self._cache = keep
        return x * keep

    def backward(self, gy):
        if getattr(self, "_identity", False):
            return gy
        return gy * self._take()


class Recurrent(Layer):
    """tanh cell over (batch, time, n_in) input; returns the last valid hidden state.

    ``mask`` (batch, time) flags real steps. Padded steps carry the state through.
    """

    kind = "recurrent"

    def __init__(self, n_in: int, n_hidden: int, rng=None, w_in=None, w_rec=None, bias=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if w_in is None:
            lim = np.sqrt(6.0 / (n_in + n_hidden))
            w_in = rng.uniform(-lim, lim, (n_in, n_hidden))
        if w_rec is None:
            q, _ = np.linalg.qr(rng.normal(size=(n_hidden, n_hidden)))
            w_rec = q
        self.Wx = Tensor(w_in, "Wx")
        self.Wh = Tensor(w_rec, "Wh")
        self.b = Tensor(np.zeros(n_hidden) if bias is None else bias, "b")
        if self.Wx.shape != (n_in, n_hidden) or self.Wh.shape != (n_hidden, n_hidden) or self.b.shape != (n_hidden,):
            raise ValueError("recurrent parameter shapes are inconsistent")

    @property
    def params(self):
        return [self.Wx, self.Wh, self.b]

    def forward(self, x, train=False, rng=None, mask=None, h0=None):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[2] != self.Wx.shape[0]:
            raise ValueError(f"recurrent layer expects (batch, time, {self.Wx.shape[0]}), got {x.shape}")
        bsz, steps, _ = x.shape
        mask = np.ones((bsz, steps), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        h = np.zeros((bsz, self.Wh.shape[0])) if h0 is None else np.broadcast_to(h0, (bsz, self.Wh.shape[0])).copy()
        hs, acts = [h], []
        for t in range(steps):
            a = np.tanh(x[:, t] @ self.Wx.data + h @ self.Wh.data + self.b.data)
            h = np.where(mask[:, t:t + 1], a, h)
            acts.append(a)
            hs.append(h)
        self._cache = (x, mask, hs, acts)
        return h

    def backward(self, gy):
        x, mask, hs, acts = self._take()
        gx = np.zeros_like(x)
        gh = gy
        for t in range(x.shape[1] - 1, -1, -1):
            m = mask[:, t:t + 1]
            ga = np.where(m, gh, 0.0) * (1.0 - acts[t] ** 2)
            self.Wx.grad += x[:, t].T @ ga
            self.Wh.grad += hs[t].T @ ga
            self.b.grad += ga.sum(axis=0)
            gx[:, t] = ga @ self.Wx.data.T
            gh = np.where(m, 0.0, gh) + ga @ self.Wh.data.T
        return gx


class SumPool(Layer):
    """Sum over the time axis of (batch, time, d), ignoring masked steps."""

    kind = "sum_pool"

    def forward(self, x, train=False, rng=None, mask=None):
        x = np.asarray(x, dtype=float)
        if x.ndim != 3:
            raise ValueError(f"sum_pool expects (batch, time, d), got {x.shape}")
        m = np.ones(x.shape[:2]) if mask is None else np.asarray(mask, dtype=float)
        self._cache = m
        return np.einsum("btd,bt->bd", x, m)

    def backward(self, gy):
        m = self._take()
        return gy[:, None, :] * m[:, :, None]


LAYER_KINDS = {cls.kind: cls for cls in (Dense, ReLU, LeakyReLU, Dropout, Recurrent, SumPool)}


@dataclass
class Sequential:
    layers: list = field(default_factory=list)

    @property
    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def forward(self, x, train: bool = False, rng=None, mask=None):
        for layer in self.layers:
            x = layer.forward(x, train=train, rng=rng, mask=mask)
        return x

    __call__ = forward

    def backward(self, gy):
        for layer in reversed(self.layers):
            gy = layer.backward(gy)
        return gy


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if n == 0:
        raise ValueError("empty batch")
    if np.any((labels < 0) | (labels >= c)) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers in [0, {c})")
    lp = log_softmax(logits)
    loss = -float(lp[np.arange(n), labels].mean())
    grad = np.exp(lp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def numeric_grad(f: Callable[[], float], t: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to array ``t`` (modified in place, then restored)."""
    g = np.zeros_like(t)
    it = np.nditer(t, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = t[i]
        t[i] = old + eps
        hi = f()
        t[i] = old - eps
        lo = f()
        t[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def gradcheck(f: Callable[[], float], arrays: Sequence[np.ndarray], analytic: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Largest relative error between analytic gradients and central differences."""
    return max(relative_error(g, numeric_grad(f, a, eps)) for a, g in zip(arrays, analytic))


def save_network(net: Sequential, path) -> None:
    out = []
    for layer in net.layers:
        out.append(" ".join(["layer", layer.kind] + [repr(h) for h in layer.hyper()]))
        for p in layer.params:
            m = p.data.reshape(1, -1) if p.data.ndim == 1 else p.data
            out.append(f"param {p.name} {m.shape[0]} {m.shape[1]}")
            out.extend(" ".join(f"{v:.17g}" for v in row) for row in m)
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def load_network(path) -> Sequential:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    specs, i = [], 0
    while i < len(lines):
        head = lines[i].split()
        i += 1
        if not head:
            continue
        if head[0] != "layer" or len(head) < 2 or head[1] not in LAYER_KINDS:
            raise ValueError(f"{path}:{i}: expected 'layer <kind>'")
        params = {}
        while i < len(lines) and lines[i].startswith("param "):
            _, name, r, c = lines[i].split()
            r, c = int(r), int(c)
            block = np.array([[float(v) for v in ln.split()] for ln in lines[i + 1:i + 1 + r]])
            if block.shape != (r, c):
                raise ValueError(f"{path}:{i + 1}: parameter {name} is not {r}x{c}")
            params[name] = block
            i += 1 + r
        specs.append((head[1], [float(h) for h in head[2:]], params))
    layers = []
    for kind, hyper, p in specs:
        if kind == "dense":
            layers.append(Dense(*p["W"].shape, weight=p["W"], bias=p["b"][0]))
        elif kind == "recurrent":
            layers.append(Recurrent(*p["Wx"].shape, w_in=p["Wx"], w_rec=p["Wh"], bias=p["b"][0]))
        elif kind in ("leaky_relu", "dropout"):
            layers.append(LAYER_KINDS[kind](*hyper))
        else:
            layers.append(LAYER_KINDS[kind]())
    return Sequential(layers)
