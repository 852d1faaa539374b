"""Small fully connected softmax network trained with Adam.

Parameters live in one flat float64 vector; per-layer weights and biases are
views into it, so an Adam step is a handful of whole-vector operations.

The training objective is the unnormalized cross-entropy
``C(g, p) = -sum_s g_s log p_s`` averaged over samples.  Targets ``g`` are
any non-negative vectors, not necessarily distributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PAD, ContextWindow

CHECKPOINT_MAGIC = "icedude-network"
CHECKPOINT_VERSION = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EVAL_CHUNK = 65536


class Divergence(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr_first: float = 1e-3
    lr_later: float = 1e-4
    batch_size: int = 128
    hidden: int = 40
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_first <= 0 or self.lr_later <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.hidden < 1:
            raise ValueError("batch size and width must be positive")

    def learning_rate(self, iteration: int) -> float:
        """Rate for the ``iteration``-th training round (0-based)."""
        return self.lr_first if iteration == 0 else self.lr_later


def encode_context(ctx: ContextWindow, z_size: int) -> np.ndarray:
    symbols = list(ctx.left) + list(ctx.right)
    out = np.zeros(len(symbols) * z_size)
    for j, s in enumerate(symbols):
        if s != PAD:
            out[j * z_size + s] = 1.0
    return out


def encode_contexts(contexts: np.ndarray, z_size: int) -> np.ndarray:
    """One-hot encode an ``(n, 2k)`` context array into ``(n, 2k*z_size)`` uint8.

    PAD slots become all-zero blocks.
    """
    n, width = contexts.shape
    out = np.zeros((n, width, z_size), dtype=np.uint8)
    for j in range(width):
        col = contexts[:, j]
        ok = col != PAD
        out[np.nonzero(ok)[0], j, col[ok]] = 1
    return out.reshape(n, width * z_size)


class IndexedTargets:
    """Targets ``table[index[i]]`` without materializing the full matrix."""

    def __init__(self, table: np.ndarray, index: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)
        self.index = np.asarray(index)

    def __len__(self) -> int:
        return self.index.size

    def __getitem__(self, rows) -> np.ndarray:
        return self.table[self.index[rows]]


@dataclass
class Network:
    """``dims = (in, hidden..., out)``; ReLU hidden layers, softmax over each head.

    With ``heads > 1`` the output units are split into equal groups and each
    group gets its own softmax.
    """

    dims: tuple[int, ...]
    heads: int = 1
    flat: np.ndarray = field(default=None, repr=False)
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)
    adam_step: int = 0
    epochs_done: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) < 2 or min(self.dims) < 1:
            raise ValueError(f"bad layer sizes {self.dims}")
        if self.dims[-1] % self.heads:
            raise ValueError("output width must be divisible by the number of heads")
        size = self.n_params(self.dims)
        if self.flat is None:
            self.flat = np.zeros(size)
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {self.flat.shape}")
        if self.adam_m is None:
            self.reset_optimizer()
        self.layers = self._views(self.flat)

    @staticmethod
    def n_params(dims) -> int:
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    def _views(self, buf):
        views, off = [], 0
        for a, b in zip(self.dims[:-1], self.dims[1:]):
            views.append((buf[off:off + a * b].reshape(a, b), buf[off + a * b:off + a * b + b]))
            off += a * b + b
        return views

    @classmethod
    def create(cls, n_in: int, n_out: int, hidden: int = 40, depth: int = 3,
               heads: int = 1, seed=0) -> "Network":
        """He-style symmetric uniform init, ``U(-sqrt(6/fan_in), +sqrt(6/fan_in))``; zero biases."""
        from .channel_math import make_rng

        dims = (n_in,) + (hidden,) * depth + (n_out,)
        rng = make_rng(seed)
        net = cls(dims, heads)
        for w, _ in net.layers:
            lim = np.sqrt(6.0 / w.shape[0])
            w[...] = rng.uniform(-lim, lim, size=w.shape)
        return net

    def reset_optimizer(self) -> None:
        self.adam_m = np.zeros_like(self.flat)
        self.adam_v = np.zeros_like(self.flat)
        self.adam_step = 0

    def copy(self) -> "Network":
        return Network(self.dims, self.heads, self.flat.copy(), self.adam_m.copy(),
                       self.adam_v.copy(), self.adam_step, self.epochs_done)

    # -- forward / backward -------------------------------------------------

    def _softmax(self, logits: np.ndarray) -> np.ndarray:
        b = logits.shape[0]
        g = logits.reshape(b, self.heads, -1)
        g = g - g.max(axis=2, keepdims=True)
        np.exp(g, out=g)
        g /= g.sum(axis=2, keepdims=True)
        return g.reshape(b, -1)

    def _forward(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            h = h @ w
            h += b
            if i < last:
                np.maximum(h, 0.0, out=h)
            acts.append(h)
        return acts, self._softmax(acts[-1])

    def forward(self, x) -> np.ndarray:
        # compact (uint8 one-hot) inputs are cast chunk by chunk
        x = np.asarray(x)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.dims[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.dims[0]}")
        out = np.empty((x.shape[0], self.dims[-1]))
        for s in range(0, x.shape[0], EVAL_CHUNK):
            out[s:s + EVAL_CHUNK] = self._forward(x[s:s + EVAL_CHUNK].astype(np.float64))[1]
        return out[0] if single else out

    def loss_and_grad(self, x: np.ndarray, g: np.ndarray, grad: np.ndarray | None = None):
        """Mean cross-entropy over the batch and its gradient as a flat vector."""
        if grad is None:
            grad = np.empty_like(self.flat)
        gviews = self._views(grad)
        acts, p = self._forward(x)
        b = x.shape[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(g > 0, g * np.log(p), 0.0)
        loss = -terms.sum() / b
        # d/dlogits of -sum g log softmax = p * sum_head(g) - g
        gh = g.reshape(b, self.heads, -1)
        delta = (p.reshape(b, self.heads, -1) * gh.sum(axis=2, keepdims=True) - gh).reshape(b, -1)
        delta /= b
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            gw, gb = gviews[i]
            np.matmul(acts[i].T, delta, out=gw)
            delta.sum(axis=0, out=gb)
            if i:
                delta = delta @ w.T
                delta *= acts[i] > 0
        return loss, grad

    def adam_update(self, grad: np.ndarray, lr: float) -> None:
        self.adam_step += 1
        t = self.adam_step
        self.adam_m *= ADAM_BETA1
        self.adam_m += (1 - ADAM_BETA1) * grad
        self.adam_v *= ADAM_BETA2
        self.adam_v += (1 - ADAM_BETA2) * grad * grad
        mhat = self.adam_m / (1 - ADAM_BETA1 ** t)
        vhat = self.adam_v / (1 - ADAM_BETA2 ** t)
        self.flat -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)

    # -- checkpoints ----------------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
                 "dims " + " ".join(map(str, self.dims)),
                 f"heads {self.heads}"]
        for key, value in (meta or {}).items():
            lines.append(f"meta {key} {value}")
        lines.append(f"params {self.flat.size}")
        lines += [repr(float(v)) for v in self.flat]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> tuple["Network", dict]:
        lines = Path(path).read_text().splitlines()
        magic, version = lines[0].split()
        if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
            raise ValueError(f"not a version-{CHECKPOINT_VERSION} network checkpoint")
        dims = tuple(int(v) for v in lines[1].split()[1:])
        heads = int(lines[2].split()[1])
        meta, i = {}, 3
        while lines[i].startswith("meta "):
            _, key, value = lines[i].split(" ", 2)
            meta[key] = value
            i += 1
        count = int(lines[i].split()[1])
        flat = np.array([float(v) for v in lines[i + 1:i + 1 + count]])
        return cls(dims, heads, flat), meta


def objective(net: Network, inputs, targets) -> float:
    """Mean cross-entropy over the whole data set with frozen weights."""
    n = len(inputs)
    total = 0.0
    for s in range(0, n, EVAL_CHUNK):
        rows = np.arange(s, min(n, s + EVAL_CHUNK))
        p = net.forward(inputs[rows])
        g = targets[rows]
        with np.errstate(divide="ignore", invalid="ignore"):
            total -= np.where(g > 0, g * np.log(p), 0.0).sum()
    return total / n


def train_epoch(net: Network, inputs, targets, cfg: TrainConfig, lr: float | None = None):
    """One shuffled minibatch pass; returns ``(new_net, mean_batch_loss)``.

    ``net`` is left untouched.  The shuffle is seeded by ``(cfg.seed, epochs
    already run)`` so repeated calls are reproducible.
    """
    from .channel_math import make_rng

    if lr is None:
        lr = cfg.lr_first
    out = net.copy()
    n = len(inputs)
    perm = make_rng([cfg.seed, out.epochs_done]).permutation(n)
    grad = np.empty_like(out.flat)
    total = 0.0
    for s in range(0, n, cfg.batch_size):
        idx = perm[s:s + cfg.batch_size]
        loss, _ = out.loss_and_grad(inputs[idx].astype(np.float64), targets[idx], grad)
        if not np.isfinite(loss):
            raise Divergence(f"non-finite loss at epoch {out.epochs_done}")
        total += loss * idx.size
        out.adam_update(grad, lr)
    out.epochs_done += 1
    return out, total / n


def fit(net: Network, inputs, targets, cfg: TrainConfig, lr: float, epochs: int | None = None,
        fresh_optimizer: bool = True):
    """Run several epochs; returns ``(new_net, per-epoch losses)``."""
    out = net.copy()
    if fresh_optimizer:
        out.reset_optimizer()
    losses = []
    for _ in range(cfg.epochs if epochs is None else epochs):
        out, loss = train_epoch(out, inputs, targets, cfg, lr)
        losses.append(loss)
    return out, losses

