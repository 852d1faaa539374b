"""Alphabets, sequences, channel/loss matrices and single-symbol denoisers.

Symbols are always integer indices ``0..size-1``.  Context slots that fall
outside the sequence hold the reserved marker :data:`PAD`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PAD = -1

# Tolerance on the pseudo-inverse residual ||P P+ P - P||_inf.
RANK_TOL = 1e-9


class InvalidWindow(ValueError):
    pass


class RankDeficientChannel(ValueError):
    pass


@dataclass(frozen=True)
class Alphabet:
    size: int
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"alphabet size must be >= 2, got {self.size}")
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(self.size)))
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if len(labels) != self.size or len(set(labels)) != self.size:
            raise ValueError("labels must be distinct and match the size")

    def index(self, label: str) -> int:
        return self.labels.index(label)


BINARY = Alphabet(2, ("0", "1"))
DNA = Alphabet(4, ("A", "C", "G", "T"))


@dataclass(frozen=True, eq=False)
class SymbolSequence:
    alphabet: Alphabet
    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.int64)
        if data.ndim != 1 or data.size == 0:
            raise ValueError("sequence must be a non-empty 1-D array")
        if data.min() < 0 or data.max() >= self.alphabet.size:
            raise ValueError("symbol index out of range for alphabet")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.size

    @classmethod
    def of(cls, data, size: int | None = None) -> "SymbolSequence":
        data = np.asarray(data, dtype=np.int64)
        if size is None:
            size = max(2, int(data.max()) + 1)
        return cls(Alphabet(size), data)


def as_array(seq) -> np.ndarray:
    """Symbol data of a SymbolSequence or any integer array-like."""
    if isinstance(seq, SymbolSequence):
        return seq.data
    return np.asarray(seq, dtype=np.int64)


def pseudo_inverse(m: np.ndarray) -> np.ndarray:
    """Right inverse ``m.T (m m.T)^-1`` of a full-row-rank matrix."""
    gram = m @ m.T
    # Gram matrices here are at most 30x30; LU with partial pivoting.
    return np.linalg.solve(gram, m).T


@dataclass(frozen=True, eq=False)
class ChannelMatrix:
    """Row-stochastic ``|X| x |Z|`` transition matrix with cached pseudo-inverse."""

    entries: np.ndarray
    pinv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        p = np.array(self.entries, dtype=np.float64)
        if p.ndim != 2:
            raise ValueError("channel matrix must be 2-D")
        if (p < 0).any():
            raise ValueError("channel matrix has negative entries")
        if np.abs(p.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("channel matrix rows must sum to 1")
        if p.shape[0] > p.shape[1]:
            raise RankDeficientChannel("channel needs |X| <= |Z| for full row rank")
        try:
            pinv = pseudo_inverse(p)
        except np.linalg.LinAlgError as exc:
            raise RankDeficientChannel(str(exc)) from None
        residual = np.abs(p @ pinv @ p - p).max()
        if not np.isfinite(residual) or residual >= RANK_TOL:
            raise RankDeficientChannel(f"pseudo-inverse residual {residual:.3g}")
        p.setflags(write=False)
        pinv.setflags(write=False)
        object.__setattr__(self, "entries", p)
        object.__setattr__(self, "pinv", pinv)

    def __eq__(self, other):
        if not isinstance(other, ChannelMatrix):
            return NotImplemented
        return np.array_equal(self.entries, other.entries)

    __hash__ = None

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    @property
    def average_noise(self) -> float:
        """Mean off-diagonal row mass, i.e. the average symbol error rate."""
        d = min(self.rows, self.cols)
        return float(1.0 - np.diag(self.entries)[:d].mean())

    @classmethod
    def normalized(cls, entries) -> "ChannelMatrix":
        """Build from a non-negative matrix after exact row renormalization."""
        p = np.asarray(entries, dtype=np.float64)
        return cls(p / p.sum(axis=1, keepdims=True))


def symmetric_channel(size: int, delta: float) -> ChannelMatrix:
    """``1-delta`` on the diagonal, ``delta/(size-1)`` elsewhere."""
    p = np.full((size, size), delta / (size - 1))
    np.fill_diagonal(p, 1.0 - delta)
    return ChannelMatrix(p)


@dataclass(frozen=True, eq=False)
class LossMatrix:
    entries: np.ndarray

    def __post_init__(self):
        lam = np.array(self.entries, dtype=np.float64)
        if lam.ndim != 2 or (lam < 0).any():
            raise ValueError("loss matrix must be 2-D and non-negative")
        lam.setflags(write=False)
        object.__setattr__(self, "entries", lam)


def hamming_loss(size: int) -> LossMatrix:
    return LossMatrix(1.0 - np.eye(size))


def average_loss(x, xhat, loss: LossMatrix) -> float:
    x, xhat = as_array(x), as_array(xhat)
    if x.shape != xhat.shape:
        raise ValueError(f"length mismatch: {x.size} vs {xhat.size}")
    return float(loss.entries[x, xhat].mean())


# Map-set kinds.
FULL = "full"
FACTORED = "factored"
REDUCED = "reduced"


@dataclass(frozen=True, eq=False)
class DenoiserMapSet:
    """An ordered family of single-symbol denoisers ``s: Z -> Xhat``.

    ``table`` has one row per output unit.  For the ``full`` and ``reduced``
    kinds row ``s`` is the complete map (``table[s, z] == s(z)``).  For the
    ``factored`` kind row ``s`` is a partial map ``(z, a)`` meaning "send
    ``z`` to ``a``"; units are grouped into ``z_size`` heads of ``xhat_size``.
    """

    kind: str
    z_size: int
    xhat_size: int
    table: np.ndarray

    def __len__(self) -> int:
        return self.table.shape[0]

    @property
    def heads(self) -> int:
        return self.z_size if self.kind == FACTORED else 1

    def outputs(self) -> np.ndarray:
        """``(|Z|, |S|, |Xhat|)`` indicator of ``s(z) == a``.

        For the factored kind only the head of ``z`` is non-zero.
        """
        ind = np.zeros((self.z_size, len(self), self.xhat_size))
        if self.kind == FACTORED:
            for s, (z, a) in enumerate(self.table):
                ind[z, s, a] = 1.0
        else:
            for z in range(self.z_size):
                ind[z, np.arange(len(self)), self.table[:, z]] = 1.0
        return ind

    def describe(self, s: int) -> str:
        if self.kind == REDUCED:
            return "say-what-you-see" if s == 0 else f"const-{s - 1}"
        if self.kind == FACTORED:
            z, a = self.table[s]
            return f"{z}->{a}"
        return "(" + ",".join(str(v) for v in self.table[s]) + ")"


def enumerate_maps(z_size: int, xhat_size: int, kind: str = FULL) -> DenoiserMapSet:
    """Canonical ordering: full maps are lexicographic over ``(s(0), .., s(|Z|-1))``;
    reduced maps are ``[say-what-you-see, const-0, .., const-(|Xhat|-1)]``;
    factored units are ordered by ``(z, a)``.
    """
    if z_size < 2 or xhat_size < 2:
        raise ValueError("alphabet sizes must be >= 2")
    if kind == FULL:
        table = np.array(list(itertools.product(range(xhat_size), repeat=z_size)), dtype=np.int64)
    elif kind == REDUCED:
        if z_size != xhat_size:
            raise ValueError("say-what-you-see needs |Z| == |Xhat|")
        rows = [np.arange(z_size)] + [np.full(z_size, a) for a in range(xhat_size)]
        table = np.array(rows, dtype=np.int64)
    elif kind == FACTORED:
        table = np.array([(z, a) for z in range(z_size) for a in range(xhat_size)], dtype=np.int64)
    else:
        raise ValueError(f"unknown map-set kind {kind!r}")
    table.setflags(write=False)
    return DenoiserMapSet(kind, z_size, xhat_size, table)


@dataclass(frozen=True)
class ContextWindow:
    k: int
    left: tuple[int, ...]
    right: tuple[int, ...]

    def __post_init__(self):
        if len(self.left) != self.k or len(self.right) != self.k:
            raise ValueError("context sides must both have length k")


def extract_context(seq, i: int, k: int) -> ContextWindow:
    z = as_array(seq)
    n = z.size
    if k >= n:
        raise InvalidWindow(f"window radius {k} too large for length {n}")
    if not 0 <= i < n:
        raise IndexError(i)
    left = tuple(int(z[j]) if j >= 0 else PAD for j in range(i - k, i))
    right = tuple(int(z[j]) if j < n else PAD for j in range(i + 1, i + k + 1))
    return ContextWindow(k, left, right)


def context_array(seq, k: int) -> np.ndarray:
    """All contexts at once as an ``(n, 2k)`` read-only view, PAD at the edges.

    Column order is ``left`` (oldest first) followed by ``right``.
    """
    z = as_array(seq)
    n = z.size
    if k >= n:
        raise InvalidWindow(f"window radius {k} too large for length {n}")
    dtype = np.int8 if z.max(initial=0) < 127 else np.int16
    padded = np.full(n + 2 * k, PAD, dtype=dtype)
    padded[k:k + n] = z
    win = sliding_window_view(padded, 2 * k + 1)
    if k == 0:
        return win[:, :0]
    return np.concatenate([win[:, :k], win[:, k + 1:]], axis=1)


def write_matrix(path, m) -> None:
    """Plain-text matrix: ``rows cols`` on line one, then row-major decimals."""
    m = np.asarray(getattr(m, "entries", m), dtype=np.float64)
    lines = [f"{m.shape[0]} {m.shape[1]}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in m]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_matrix(text: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) < 2:
        raise ValueError("matrix text needs a 'rows cols' header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = tokens[2:]
    if len(values) != rows * cols:
        raise ValueError(f"expected {rows * cols} entries, found {len(values)}")
    return np.array([float(v) for v in values]).reshape(rows, cols)


def read_matrix(path) -> np.ndarray:
    return parse_matrix(Path(path).read_text())
