"""Experiment data: Markov sources, binary images, DNA references and reads,
and the fixed channels used in the benchmarks.

Netpbm conventions: in PBM a 1 bit is black; the loaders keep that meaning,
so a white page is all zeros.  Grey-level PGM pixels strictly below the
threshold (on a 0..255 scale) count as black (1).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel_math import make_rng
from .core import BINARY, DNA, Alphabet, ChannelMatrix, SymbolSequence, symmetric_channel


@dataclass(frozen=True)
class MarkovSourceSpec:
    size: int
    alpha: float
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.size < 2 or self.n < 1:
            raise ValueError("need size >= 2 and n >= 1")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")


def gen_markov(spec: MarkovSourceSpec) -> SymbolSequence:
    """Symmetric Markov chain: stay with probability ``1-alpha``, otherwise
    move to one of the other ``size-1`` symbols uniformly.  The uniform start
    is the stationary law."""
    rng = make_rng(spec.seed)
    x0 = rng.integers(spec.size)
    jump = rng.random(spec.n - 1) < spec.alpha
    step = rng.integers(1, spec.size, size=spec.n - 1)
    x = np.empty(spec.n, dtype=np.int64)
    x[0] = x0
    x[1:] = (x0 + np.cumsum(np.where(jump, step, 0))) % spec.size
    return SymbolSequence(Alphabet(spec.size), x)


# -- images ------------------------------------------------------------------


@dataclass(frozen=True)
class ImageRecord:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8 in {0, 1}
    name: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.uint8)
        if px.shape != (self.height, self.width):
            raise ValueError(f"pixel grid {px.shape} != ({self.height}, {self.width})")
        if px.size and px.max() > 1:
            raise ValueError("pixels must be binary")
        object.__setattr__(self, "pixels", px)


class MalformedImage(ValueError):
    pass


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header(data: bytes, count: int, raw: bool):
    """Read ``count`` header tokens (comments allowed) and return them with the
    offset where pixel data starts.  Raw formats need exactly one whitespace
    byte after the last token."""
    pos, out = 0, []
    for _ in range(count):
        m = _TOKEN.match(data, pos)
        if not m:
            raise MalformedImage("truncated netpbm header")
        out.append(m.group(1))
        pos = m.end()
    if raw:
        if not data[pos:pos + 1].isspace():
            raise MalformedImage("raw raster must follow a single whitespace byte")
        pos += 1
    return out, pos


def _ints(tokens) -> list[int]:
    try:
        return [int(t) for t in tokens]
    except ValueError as exc:
        raise MalformedImage(f"bad header number: {exc}") from None


def parse_netpbm(data: bytes, name: str = "", threshold: int = 128) -> ImageRecord:
    magic = data[:2]
    if magic in (b"P1", b"P4"):
        (_, w, h), pos = _header(data, 3, magic == b"P4")
        w, h = _ints([w, h])
        if magic == b"P1":
            bits = re.sub(rb"#[^\n]*", b"", data[pos:])
            digits = np.frombuffer(re.sub(rb"\s", b"", bits), dtype=np.uint8)
            if digits.size != w * h or ((digits != ord("0")) & (digits != ord("1"))).any():
                raise MalformedImage(f"expected {w * h} 0/1 pixels, found {digits.size}")
            px = (digits - ord("0")).reshape(h, w)
        else:
            stride = (w + 7) // 8
            raw = np.frombuffer(data, dtype=np.uint8, count=stride * h, offset=pos) \
                if len(data) - pos >= stride * h else None
            if raw is None:
                raise MalformedImage("P4 raster shorter than width x height")
            px = np.unpackbits(raw.reshape(h, stride), axis=1)[:, :w]
        return ImageRecord(w, h, px, name)
    if magic in (b"P2", b"P5"):
        (_, w, h, maxval), pos = _header(data, 4, magic == b"P5")
        w, h, maxval = _ints([w, h, maxval])
        if not 0 < maxval < 65536:
            raise MalformedImage("maxval out of range")
        if magic == b"P2":
            vals = _ints(re.sub(rb"#[^\n]*", b"", data[pos:]).split())
            if len(vals) != w * h:
                raise MalformedImage(f"expected {w * h} grey values, found {len(vals)}")
            grey = np.array(vals).reshape(h, w)
        else:
            dt = np.dtype(">u2" if maxval > 255 else np.uint8)
            if len(data) - pos < w * h * dt.itemsize:
                raise MalformedImage("P5 raster shorter than width x height")
            grey = np.frombuffer(data, dtype=dt, count=w * h, offset=pos).reshape(h, w)
        grey = np.asarray(grey, dtype=np.int64)
        if grey.size and (grey.min() < 0 or grey.max() > maxval):
            raise MalformedImage(f"grey value outside 0..{maxval}")
        # the threshold is on a 0..255 scale whatever maxval is
        return ImageRecord(w, h, (grey * 255 < threshold * maxval).astype(np.uint8), name)
    raise MalformedImage(f"unsupported magic {magic!r}")


def load_image(path, threshold: int = 128) -> ImageRecord:
    path = Path(path)
    return parse_netpbm(path.read_bytes(), path.stem, threshold)


def write_pbm(path, img: ImageRecord, plain: bool = False) -> None:
    if plain:
        rows = "\n".join(" ".join(str(v) for v in row) for row in img.pixels)
        Path(path).write_bytes(f"P1\n{img.width} {img.height}\n{rows}\n".encode())
    else:
        packed = np.packbits(img.pixels, axis=1)
        Path(path).write_bytes(f"P4\n{img.width} {img.height}\n".encode() + packed.tobytes())


def raster(img: ImageRecord) -> SymbolSequence:
    return SymbolSequence(BINARY, img.pixels.ravel().astype(np.int64))


def unraster(seq, like: ImageRecord) -> ImageRecord:
    data = np.asarray(getattr(seq, "data", seq))
    return ImageRecord(like.width, like.height, data.reshape(like.height, like.width), like.name)


def synthetic_image(width: int = 256, height: int = 256, seed=0, name: str = "") -> ImageRecord:
    """Structured binary test picture: filled ellipses and rectangles over a
    banded background, combined by XOR.  Long runs and sharp edges, like a
    binarized photograph, with no redistribution concerns."""
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width]
    period = rng.integers(max(2, min(width, height) // 10), max(3, min(width, height) // 4))
    angle = rng.uniform(0, np.pi)
    band = (np.cos(angle) * xx + np.sin(angle) * yy) // period
    img = (band % 2 == 0) & (rng.random() < 0.5)
    for _ in range(rng.integers(4, 9)):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        ry, rx = rng.uniform(0.05, 0.33) * height, rng.uniform(0.05, 0.33) * width
        if rng.random() < 0.5:
            shape = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        else:
            shape = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        img = img ^ shape
    return ImageRecord(width, height, img.astype(np.uint8), name or f"synthetic-{seed}")


# -- DNA ---------------------------------------------------------------------

_BASES = "ACGT"


@dataclass(frozen=True)
class DnaCorpus:
    names: tuple[str, ...]
    references: tuple[np.ndarray, ...]


def parse_fasta(text: str, strip_invalid: bool = False) -> DnaCorpus:
    names, seqs, cur = [], [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            names.append(line[1:].split()[0] if len(line) > 1 else f"record{len(names)}")
            cur = []
            seqs.append(cur)
            continue
        if cur is None:
            raise ValueError(f"line {lineno}: sequence data before the first '>' header")
        line = line.upper()
        bad = set(line) - set(_BASES)
        if bad:
            if not strip_invalid:
                raise ValueError(f"line {lineno}: non-ACGT symbols {sorted(bad)}")
            line = "".join(c for c in line if c in _BASES)
        cur.append(line)
    if not names:
        raise ValueError("FASTA input has no records")
    refs = []
    lut = np.full(256, -1, dtype=np.int64)
    for i, c in enumerate(_BASES):
        lut[ord(c)] = i
    for name, parts in zip(names, seqs):
        s = "".join(parts)
        if not s:
            raise ValueError(f"record {name!r} is empty")
        refs.append(lut[np.frombuffer(s.encode(), dtype=np.uint8)])
    return DnaCorpus(tuple(names), tuple(refs))


def load_fasta(path, strip_invalid: bool = False) -> DnaCorpus:
    return parse_fasta(Path(path).read_text(), strip_invalid)


def write_fasta(path, corpus: DnaCorpus, width: int = 70) -> None:
    lines = []
    for name, ref in zip(corpus.names, corpus.references):
        s = "".join(_BASES[v] for v in ref)
        lines.append(">" + name)
        lines += [s[i:i + width] for i in range(0, len(s), width)]
    Path(path).write_text("\n".join(lines) + "\n")


def synthetic_references(count: int = 20, length: int = 1500, divergence: float = 0.1,
                         seed=0) -> DnaCorpus:
    """Stand-in for a set of homologous marker genes: one random ancestor,
    and each reference is that ancestor with a ``divergence`` fraction of
    positions resampled."""
    rng = make_rng(seed)
    ancestor = rng.integers(4, size=length)
    refs = []
    for _ in range(count):
        ref = ancestor.copy()
        hit = rng.random(length) < divergence
        ref[hit] = rng.integers(4, size=hit.sum())
        refs.append(ref)
    return DnaCorpus(tuple(f"ref{i}" for i in range(count)), tuple(refs))


def synth_reads(corpus: DnaCorpus, n: int, read_len_range=(500, 5000), seed=0) -> SymbolSequence:
    """Concatenate reads until ``n`` symbols, then truncate to exactly ``n``.

    Each read picks a reference uniformly, a length uniformly in the range
    (capped at that reference's length) and a uniform start.
    """
    lo, hi = read_len_range
    if lo < 1 or hi < lo:
        raise ValueError("bad read length range")
    refs = corpus.references
    if not refs:
        raise ValueError("empty corpus")
    short = [nm for nm, r in zip(corpus.names, refs) if r.size < lo]
    if short:
        raise ValueError(f"references shorter than the minimum read length: {short}")
    rng = make_rng(seed)
    parts, total = [], 0
    while total < n:
        ref = refs[rng.integers(len(refs))]
        length = int(rng.integers(lo, min(hi, ref.size) + 1))
        start = int(rng.integers(0, ref.size - length + 1))
        parts.append(ref[start:start + length])
        total += length
    return SymbolSequence(DNA, np.concatenate(parts)[:n])


# -- channels ----------------------------------------------------------------

PI_DNA = np.array([
    [0.8122, 0.0034, 0.0894, 0.0950],
    [0.0096, 0.8237, 0.0808, 0.0859],
    [0.1066, 0.0436, 0.7774, 0.0724],
    [0.0704, 0.0690, 0.0889, 0.7717],
])


def make_bsc(delta: float) -> ChannelMatrix:
    return symmetric_channel(2, delta)


def builtin_channels() -> dict[str, ChannelMatrix]:
    # Published rows are rounded to 4 decimals; renormalize to exact row sums.
    return {
        "pi_0.1": ChannelMatrix([[0.88, 0.12], [0.09, 0.91]]),
        "pi_0.2": ChannelMatrix([[0.83, 0.17], [0.23, 0.77]]),
        "pi_0.3": ChannelMatrix([[0.72, 0.28], [0.33, 0.67]]),
        "pi_dna": ChannelMatrix.normalized(PI_DNA),
    }


def resolve_channel(spec: str, size: int = 2) -> ChannelMatrix:
    """``pi_0.1`` / ``pi_dna`` registry names, ``bsc:0.3``, ``sym:0.3`` (size-ary
    symmetric), or a path to a plain-text matrix file."""
    from .core import read_matrix

    reg = builtin_channels()
    if spec in reg:
        return reg[spec]
    if spec.startswith("bsc:"):
        return make_bsc(float(spec[4:]))
    if spec.startswith("sym:"):
        return symmetric_channel(size, float(spec[4:]))
    return ChannelMatrix(read_matrix(spec))
