"""Count-based two-pass DUDE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ChannelMatrix, LossMatrix, SymbolSequence, as_array, context_array


@dataclass(frozen=True)
class ContextCounts:
    """Center-symbol counts for every distinct fully in-range context.

    ``contexts[m]`` is a ``2k`` tuple (left then right); ``counts[m, z]`` how
    often it surrounded ``z``; ``position_index[i - k]`` is the context id of
    position ``i`` for ``k <= i < n - k``.
    """

    k: int
    z_size: int
    contexts: np.ndarray
    counts: np.ndarray
    position_index: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def distribution(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=1, keepdims=True)

    def lookup(self, left, right) -> np.ndarray:
        key = np.asarray(list(left) + list(right), dtype=self.contexts.dtype)
        hit = np.nonzero((self.contexts == key).all(axis=1))[0]
        if hit.size == 0:
            raise KeyError("context never observed")
        return self.counts[hit[0]]


def build_counts(z, k: int, z_size: int | None = None) -> ContextCounts:
    zs = as_array(z)
    n = zs.size
    if z_size is None:
        z_size = z.alphabet.size if isinstance(z, SymbolSequence) else int(zs.max()) + 1
    if 2 * k >= n:
        raise ValueError(f"need k < n/2 (k={k}, n={n})")
    ctx = np.ascontiguousarray(context_array(zs, k)[k:n - k])
    center = zs[k:n - k]
    if k == 0:
        contexts = np.zeros((1, 0), dtype=ctx.dtype)
        inverse = np.zeros(center.size, dtype=np.int64)
    else:
        # Sort rows as opaque byte strings; exact and much faster than axis=0 unique.
        keys = ctx.view(np.dtype((np.void, ctx.dtype.itemsize * ctx.shape[1]))).ravel()
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        contexts = ctx[first]
    counts = np.zeros((contexts.shape[0], z_size), dtype=np.int64)
    np.add.at(counts, (inverse, center), 1)
    return ContextCounts(k, z_size, contexts, counts, inverse.ravel())


def dude_rule(p_emp: np.ndarray, z: np.ndarray, pi: ChannelMatrix, loss: LossMatrix) -> np.ndarray:
    """Per-position ``argmin_xhat p_emp^T pinv(pi) [loss[:, xhat] * pi[:, z_i]]``.

    ``p_emp`` is ``(m, |Z|)``, one context distribution per position in ``z``.
    Ties go to the smallest ``xhat``.
    """
    v = p_emp @ pi.pinv                      # (m, |X|)
    v = v * pi.entries[:, z].T               # (m, |X|)
    scores = v @ loss.entries                # (m, |Xhat|)
    return np.argmin(scores, axis=1)


def dude_denoise(z, counts: ContextCounts, pi: ChannelMatrix, loss: LossMatrix, k: int) -> SymbolSequence:
    """Positions within ``k`` of either end are passed through unchanged."""
    zs = as_array(z)
    n = zs.size
    if counts.k != k or counts.position_index.size != max(0, n - 2 * k):
        raise ValueError("counts were not built from this sequence and window")
    if counts.z_size != pi.cols:
        raise ValueError(f"counts cover {counts.z_size} symbols, channel emits {pi.cols}")
    out = zs.copy()
    p_emp = counts.distribution()[counts.position_index]
    out[k:n - k] = dude_rule(p_emp, zs[k:n - k], pi, loss)
    return SymbolSequence.of(out, max(pi.cols, loss.entries.shape[1]))


def dude(z, pi: ChannelMatrix, loss: LossMatrix, k: int) -> SymbolSequence:
    return dude_denoise(z, build_counts(z, k, pi.cols), pi, loss, k)
