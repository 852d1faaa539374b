"""Experiment runner: data generation or loading, corruption, every denoiser in
the suite, metrics, CSV reports and replayable manifests.

A run is described by one flat :class:`ExperimentConfig`.  Denoisers that do
not depend on the initial channel are computed once per window size and
shared across a delta0 sweep; each window size is an independent cell that
may run in its own worker process.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .channel_math import corrupt
from .core import DNA, Alphabet, ChannelMatrix, SymbolSequence, hamming_loss, write_matrix
from .cude import cude_denoise, train_cude
from .data_io import (
    DnaCorpus,
    ImageRecord,
    MarkovSourceSpec,
    gen_markov,
    load_fasta,
    load_image,
    raster,
    resolve_channel,
    synth_reads,
    synthetic_image,
    synthetic_references,
    unraster,
    write_fasta,
    write_pbm,
)
from .dude import dude
from .hmm import HmmModel, baum_welch, emission_channel, fb_denoise, initial_hmm, symmetric_markov_hmm
from .ice import channel_l1_error, initial_channel, objective_gap, run_ice
from .ndude import denoise as ndude_denoise
from .ndude import encode_sequence, train_ndude
from .neural import TrainConfig

log = logging.getLogger(__name__)

CSV_VERSION = 1
MANIFEST_NAME = "manifest.json"
WORKERS_ENV = "ICEDUDE_MAX_WORKERS"

SOURCES = ("markov", "images", "dna", "noisy")

# Denoisers whose output does not depend on the initial channel guess.
FIXED_DENOISERS = ("fb", "dude", "ndude", "cude")
# Denoisers rerun for every delta0.
SWEPT_DENOISERS = (
    "ice-ndude", "ice-cude", "ndude-pi0", "cude-pi0",
    "bw1", "bw2", "bw3", "bw1-ndude", "bw2-ndude", "bw3-ndude",
)
DENOISERS = FIXED_DENOISERS + SWEPT_DENOISERS

DEFAULT_DENOISERS = {
    "markov": ("fb", "ndude", "cude", "ice-ndude", "ice-cude"),
    "images": ("ndude", "cude", "ice-ndude", "ice-cude", "bw1", "bw2", "bw3"),
    "dna": ("ndude", "cude", "ice-ndude", "ice-cude", "bw1"),
    "noisy": ("ice-ndude", "ice-cude"),
}
DEFAULT_CHANNELS = {"markov": "bsc:0.3", "images": "pi_0.1", "dna": "pi_dna"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run.  ``None`` fields take desk-scale
    defaults from :meth:`resolved`, which the manifest records."""

    experiment_id: str = "exp"
    source: str = "markov"
    alphabet_size: int = 2
    alpha: float = 0.1
    n: int | None = None
    inputs: tuple[str, ...] = ()
    image_count: int = 4
    image_size: int = 256
    read_min: int = 500
    read_max: int = 5000
    channel: str | None = None
    init_channel: str | None = None
    delta0s: tuple[float, ...] = (0.1,)
    ks: tuple[int, ...] = ()
    denoisers: tuple[str, ...] = ()
    epochs: int | None = None
    hidden: int | None = None
    batch_size: int = 128
    lr_first: float = 1e-3
    lr_later: float = 1e-4
    ice_iters: int = 3
    ice_tol: float = 1e-3
    bw_iters: int = 100
    bw_tol: float = 1e-6
    two_phase: bool = False
    train_items: int | None = None
    data_seed: int = 1
    noise_seed: int = 2
    train_seed: int = 3
    output_dir: str | None = None

    def __post_init__(self):
        for name in ("inputs", "delta0s", "ks", "denoisers"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        unknown = set(self.denoisers) - set(DENOISERS)
        if unknown:
            raise ValueError(f"unknown denoisers {sorted(unknown)}; choose from {DENOISERS}")
        if self.source == "noisy" and not self.inputs:
            raise ValueError("source 'noisy' needs at least one input file")
        if any(k < 0 for k in self.ks):
            raise ValueError("window sizes must be non-negative")

    @property
    def has_truth(self) -> bool:
        return self.source != "noisy"

    def resolved(self) -> "ExperimentConfig":
        """Fill desk-scale defaults that depend on the source."""
        big = self.source == "dna" or (self.source == "markov" and self.alphabet_size > 2)
        n = self.n if self.n is not None else (10 ** 5 if big else 10 ** 6)
        dna = self.source == "dna"
        ks = self.ks or ((32,) if dna else (16,))
        channel = self.channel
        if channel is None and self.has_truth:
            channel = DEFAULT_CHANNELS[self.source] if self.alphabet_size == 2 or dna else "sym:0.3"
        return dataclasses.replace(
            self,
            n=n,
            ks=ks,
            channel=channel,
            denoisers=self.denoisers or DEFAULT_DENOISERS[self.source],
            epochs=self.epochs if self.epochs is not None else (20 if dna else 10),
            hidden=self.hidden if self.hidden is not None else (160 if dna else 40),
        )

    def train_config(self) -> TrainConfig:
        cfg = self.resolved()
        return TrainConfig(epochs=cfg.epochs, lr_first=cfg.lr_first, lr_later=cfg.lr_later,
                           batch_size=cfg.batch_size, hidden=cfg.hidden, seed=cfg.train_seed)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - names
        if extra:
            raise ValueError(f"unknown config fields {sorted(extra)}")
        return cls(**data)


@dataclass
class MetricsRow:
    experiment_id: str
    denoiser: str
    k: int | None = None
    delta0: float | None = None
    item: str = ""
    iteration: int | None = None
    ber: float | None = None
    noise_level: float | None = None
    normalized_error: float | None = None
    channel_l1: float | None = None
    objective_gap: float | None = None
    objective: float | None = None
    pi_hat: str = ""
    status: str = "ok"
    message: str = ""
    wall_time: float = field(default=0.0, compare=False)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


COLUMNS = tuple(f.name for f in dataclasses.fields(MetricsRow))


def format_channel(pi) -> str:
    pi = np.asarray(getattr(pi, "entries", pi))
    return ";".join(" ".join(repr(float(v)) for v in row) for row in pi)


def parse_channel(text: str) -> np.ndarray:
    return np.array([[float(v) for v in row.split()] for row in text.split(";")])


# -- data ----------------------------------------------------------------------


@dataclass
class Item:
    name: str
    z: SymbolSequence
    x: SymbolSequence | None = None
    image: ImageRecord | None = None
    fmt: str = "text"  # how reconstructions are written: text, pbm or fasta


@dataclass
class PreparedData:
    items: list[Item]
    train: Item
    pi_true: ChannelMatrix | None
    z_size: int
    source_model: object = None  # HmmModel when the clean source is a known Markov chain


def _concat(items: list[Item], name: str) -> Item:
    if len(items) == 1:
        return dataclasses.replace(items[0], name=name) if name != "all" else items[0]
    alpha = items[0].z.alphabet
    z = SymbolSequence(alpha, np.concatenate([it.z.data for it in items]))
    x = None
    if all(it.x is not None for it in items):
        x = SymbolSequence(items[0].x.alphabet, np.concatenate([it.x.data for it in items]))
    return Item(name, z, x, fmt=items[0].fmt)


def read_symbol_text(path) -> SymbolSequence:
    """Whitespace-separated integer symbols; ``#`` starts a comment line."""
    vals = []
    for line in Path(path).read_text().splitlines():
        if line.lstrip().startswith("#"):
            continue
        vals += [int(t) for t in line.split()]
    if not vals:
        raise ValueError(f"{path}: no symbols")
    return SymbolSequence.of(vals)


def write_symbol_text(path, seq, width: int = 64) -> None:
    data = np.asarray(getattr(seq, "data", seq))
    lines = [" ".join(str(int(v)) for v in data[i:i + width]) for i in range(0, data.size, width)]
    Path(path).write_text("\n".join(lines) + "\n")


IMAGE_SUFFIXES = {".pbm", ".pgm"}
FASTA_SUFFIXES = {".fa", ".fasta", ".fna"}


def _load_noisy(path: str, size: int) -> Item:
    p = Path(path)
    suffix = p.suffix.lower()
    if suffix in IMAGE_SUFFIXES:
        img = load_image(p)
        return Item(p.stem, raster(img), image=img, fmt="pbm")
    if suffix in FASTA_SUFFIXES:
        corpus = load_fasta(p, strip_invalid=True)
        return Item(p.stem, SymbolSequence(DNA, np.concatenate(corpus.references)), fmt="fasta")
    seq = read_symbol_text(p)
    return Item(p.stem, SymbolSequence(Alphabet(max(size, seq.alphabet.size)), seq.data))


def prepare_data(cfg: ExperimentConfig) -> PreparedData:
    cfg = cfg.resolved()
    size = 4 if cfg.source == "dna" else cfg.alphabet_size
    pi_true = resolve_channel(cfg.channel, size) if cfg.channel else None
    source_model = None
    if cfg.source == "noisy":
        items = [_load_noisy(p, size) for p in cfg.inputs]
    else:
        clean: list[Item] = []
        if cfg.source == "markov":
            x = gen_markov(MarkovSourceSpec(size, cfg.alpha, cfg.n, cfg.data_seed))
            clean.append(Item("markov", x, x))
            source_model = symmetric_markov_hmm(size, cfg.alpha, pi_true)
        elif cfg.source == "images":
            if cfg.inputs:
                imgs = [load_image(p) for p in cfg.inputs]
            else:
                imgs = [synthetic_image(cfg.image_size, cfg.image_size, seed=(cfg.data_seed, i))
                        for i in range(cfg.image_count)]
            clean += [Item(img.name, raster(img), raster(img), img, "pbm") for img in imgs]
        else:
            corpus = load_fasta(cfg.inputs[0], strip_invalid=True) if cfg.inputs \
                else synthetic_references(seed=cfg.data_seed)
            x = synth_reads(corpus, cfg.n, (cfg.read_min, cfg.read_max), seed=cfg.data_seed)
            clean.append(Item("reads", x, x, fmt="fasta"))
        items = []
        for i, it in enumerate(clean):
            seed = cfg.noise_seed if len(clean) == 1 else (cfg.noise_seed, i)
            items.append(dataclasses.replace(it, z=corrupt(it.x, pi_true, seed)))
    if pi_true is not None:
        z_size = pi_true.cols
    else:
        z_size = max([size] + [it.z.alphabet.size for it in items])
    items = [dataclasses.replace(it, z=SymbolSequence(Alphabet(z_size), it.z.data)) for it in items]
    if cfg.two_phase:
        count = cfg.train_items or len(items)
        train = _concat(items[:count], "train")
    else:
        train = _concat(items, "all")
        items = [train] if len(items) > 1 else items
    return PreparedData(items, train, pi_true, z_size, source_model)


# -- denoiser execution --------------------------------------------------------


class _Cell:
    """All computation for one window size; shares expensive artifacts."""

    def __init__(self, cfg: ExperimentConfig, data: PreparedData, k: int):
        self.cfg = cfg
        self.data = data
        self.k = k
        self.tcfg = cfg.train_config()
        self.loss = hamming_loss(data.z_size)
        self._cache: dict = {}
        self.train_inputs = encode_sequence(data.train.z, k, data.z_size)

    def cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def item_inputs(self, item: Item):
        if item is self.data.train:
            return self.train_inputs
        return self.cached(("inputs", item.name), lambda: encode_sequence(item.z, self.k, self.data.z_size))

    @property
    def fine_tune(self) -> bool:
        return self.cfg.two_phase

    def pi0(self, delta0: float) -> ChannelMatrix:
        if self.cfg.init_channel:
            return resolve_channel(self.cfg.init_channel, self.data.z_size)
        return initial_channel(self.data.z_size, delta0)

    def need_truth(self) -> ChannelMatrix:
        if self.data.pi_true is None:
            raise ValueError("this denoiser needs the true channel (--channel)")
        return self.data.pi_true

    # Each runner returns (per-item outputs, extras dict).

    def _ndude_items(self, key, pi: ChannelMatrix, base_model=None):
        """Train N-DUDE under ``pi`` on the training data, optionally fine-tune per item."""
        model = base_model
        if model is None:
            model = self.cached(("ndude-model", key), lambda: train_ndude(
                self.data.train.z, pi, self.loss, self.k, None, self.tcfg, inputs=self.train_inputs))
        outs = []
        for item in self.data.items:
            inp = self.item_inputs(item)
            m = model
            if self.fine_tune:
                m = train_ndude(item.z, pi, self.loss, self.k, model.map_set, self.tcfg,
                                init=model.net, lr=self.tcfg.lr_later, inputs=inp)
            outs.append(ndude_denoise(m, item.z, inp).data)
        return outs, model

    def _cude_models(self):
        """CUDE is channel-free, so one set of (fine-tuned) models serves every channel."""
        def build():
            base = train_cude(self.data.train.z, self.k, self.tcfg, self.train_inputs, self.data.z_size)
            models = []
            for item in self.data.items:
                if self.fine_tune:
                    models.append(train_cude(item.z, self.k, self.tcfg, self.item_inputs(item),
                                             self.data.z_size, init=base.net))
                else:
                    models.append(base)
            return models
        return self.cached("cude-models", build)

    def _cude_items(self, pi: ChannelMatrix):
        models = self._cude_models()
        return [cude_denoise(m, item.z, pi, self.loss, self.item_inputs(item)).data
                for m, item in zip(models, self.data.items)]

    def reference_ndude(self):
        return self.cached(("ndude-model", "truth"), lambda: train_ndude(
            self.data.train.z, self.need_truth(), self.loss, self.k, None, self.tcfg,
            inputs=self.train_inputs))

    def ice(self, delta0: float):
        def go():
            ref = self.reference_ndude() if self.data.pi_true is not None else None
            return run_ice(self.data.train.z, self.pi0(delta0), self.k, self.loss, self.tcfg,
                           max_iters=self.cfg.ice_iters, tol=self.cfg.ice_tol,
                           pi_true=self.data.pi_true, ref_model=ref, inputs=self.train_inputs)
        return self.cached(("ice", delta0), go)

    def bw(self, order: int, delta0: float):
        def go():
            pi0 = self.pi0(delta0)
            init = initial_hmm(self.data.z_size, order, pi0.average_noise, seed=self.cfg.train_seed)
            if self.cfg.init_channel:
                init = HmmModel(order, init.initial, init.transition, pi0.entries)
            return baum_welch(self.data.train.z, order, init, self.cfg.bw_iters, self.cfg.bw_tol)
        return self.cached(("bw", order, delta0), go)

    def run(self, name: str, delta0: float | None):
        if name == "fb":
            if self.data.source_model is None:
                raise ValueError("FB with the true source model needs a Markov source")
            return [fb_denoise(self.data.source_model, it.z, self.loss).data for it in self.data.items], {}
        if name == "dude":
            pi = self.need_truth()
            return [dude(it.z, pi, self.loss, self.k).data for it in self.data.items], {}
        if name == "ndude":
            outs, _ = self._ndude_items("truth", self.need_truth(), self.reference_ndude())
            return outs, {}
        if name == "cude":
            return self._cude_items(self.need_truth()), {}
        if name == "ndude-pi0":
            pi0 = self.pi0(delta0)
            outs, _ = self._ndude_items(("pi0", delta0), pi0)
            return outs, {"pi": pi0}
        if name == "cude-pi0":
            pi0 = self.pi0(delta0)
            return self._cude_items(pi0), {"pi": pi0}
        if name in ("ice-ndude", "ice-cude"):
            res = self.ice(delta0)
            extras = {"pi": res.pi_hat, "ice": res}
            if name == "ice-cude":
                return self._cude_items(res.pi_hat), extras
            if self.data.pi_true is not None:
                extras["gap"] = objective_gap(res.model, self.reference_ndude(), self.data.train.z,
                                              self.loss, self.train_inputs)
            outs, _ = self._ndude_items(("ice", delta0), res.pi_hat, res.model)
            return outs, extras
        if name.startswith("bw"):
            order = int(name[2])
            fit = self.bw(order, delta0)
            pi = emission_channel(fit.model)
            if name.endswith("-ndude"):
                outs, _ = self._ndude_items(("bw", order, delta0), pi)
                return outs, {"pi": pi}
            return [fb_denoise(fit.model, it.z, self.loss).data for it in self.data.items], {"pi": pi}
        raise ValueError(f"unknown denoiser {name!r}")


def _rows_for(cfg, cell: _Cell, name: str, delta0, outs, extras, wall) -> list[MetricsRow]:
    data = cell.data
    pi = extras.get("pi")
    base = dict(experiment_id=cfg.experiment_id, denoiser=name, k=cell.k, delta0=delta0,
                wall_time=wall)
    if pi is not None:
        base["pi_hat"] = format_channel(pi)
        if data.pi_true is not None:
            base["channel_l1"] = channel_l1_error(pi, data.pi_true)
    if "gap" in extras:
        base["objective_gap"] = extras["gap"]
    noise = data.pi_true.average_noise if data.pi_true is not None else None

    def scored(item_name, x, xhat):
        row = MetricsRow(item=item_name, **base)
        if x is not None:
            row.ber = float(np.mean(x != xhat))
            row.noise_level = noise
            if noise:
                row.normalized_error = row.ber / noise
        return row

    rows = []
    if len(data.items) > 1:
        for item, xhat in zip(data.items, outs):
            rows.append(scored(item.name, None if item.x is None else item.x.data, xhat))
    xs = [it.x for it in data.items]
    if all(x is not None for x in xs):
        rows.append(scored("", np.concatenate([x.data for x in xs]), np.concatenate(outs)))
    else:
        rows.append(MetricsRow(item="", **base))
    if name == "ice-ndude" and "ice" in extras:
        for rec in extras["ice"].trace:
            rows.append(MetricsRow(
                experiment_id=cfg.experiment_id, denoiser="ice-trace", k=cell.k, delta0=delta0,
                iteration=rec.iteration, channel_l1=rec.l1_error, objective_gap=rec.objective_gap,
                objective=rec.objective_new, pi_hat=format_channel(rec.pi)))
    return rows


def _run_cell(cfg: ExperimentConfig, k: int, keep_outputs: bool = False):
    """Every selected denoiser at one window size.  Failures are recorded per denoiser."""
    data = prepare_data(cfg)
    cell = _Cell(cfg, data, k)
    rows: list[MetricsRow] = []
    outputs: dict = {}
    plan = [(name, None) for name in cfg.denoisers if name in FIXED_DENOISERS]
    plan += [(name, d0) for d0 in cfg.delta0s for name in cfg.denoisers if name in SWEPT_DENOISERS]
    for name, d0 in plan:
        start = time.perf_counter()
        try:
            outs, extras = cell.run(name, d0)
        except Exception as exc:  # isolate: one denoiser failing must not sink the run
            log.exception("denoiser %s (k=%d, delta0=%s) failed", name, k, d0)
            rows.append(MetricsRow(cfg.experiment_id, name, k, d0, status="failed",
                                   message=f"{type(exc).__name__}: {exc}",
                                   wall_time=time.perf_counter() - start))
            continue
        wall = time.perf_counter() - start
        rows += _rows_for(cfg, cell, name, d0, outs, extras, wall)
        if keep_outputs:
            outputs[(name, k, d0)] = outs
    return (rows, outputs, data) if keep_outputs else rows


def max_workers(requested: int | None = None) -> int:
    cap = os.environ.get(WORKERS_ENV)
    n = requested or os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def _map_cells(jobs: list[tuple[ExperimentConfig, int]], workers: int | None = None) -> list[list[MetricsRow]]:
    workers = min(max_workers(workers), len(jobs)) if jobs else 1
    if workers <= 1:
        return [_run_cell(c, k) for c, k in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_cell, c, k) for c, k in jobs]
        return [f.result() for f in futures]


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[MetricsRow]:
    """Run every (window size, denoiser, delta0) combination in ``cfg``.

    Writes ``<output_dir>/<experiment_id>.csv`` and a manifest when
    ``output_dir`` is set.
    """
    cfg = cfg.resolved()
    rows = [r for cell in _map_cells([(cfg, k) for k in cfg.ks], workers) for r in cell]
    if cfg.output_dir:
        write_report(cfg, rows)
    return rows


# -- sweeps ----------------------------------------------------------------------


@dataclass
class SpreadRow:
    experiment_id: str
    denoiser: str
    k: int
    count: int
    min: float
    median: float
    max: float

    @property
    def spread(self) -> float:
        return self.max - self.min


SPREAD_COLUMNS = ("experiment_id", "denoiser", "k", "count", "min", "median", "max", "spread")


def spread_summary(rows: list[MetricsRow]) -> list[SpreadRow]:
    """Min/median/max normalized error per (denoiser, k) over the aggregate rows."""
    groups: dict = {}
    for r in rows:
        if r.ok and r.item == "" and r.iteration is None and r.normalized_error is not None:
            groups.setdefault((r.experiment_id, r.denoiser, r.k), []).append(r.normalized_error)
    return [SpreadRow(e, d, k, len(v), min(v), statistics.median(v), max(v))
            for (e, d, k), v in groups.items()]


def sweep_initial_delta(cfg: ExperimentConfig, deltas, workers: int | None = None):
    """Returns ``(rows, spread)``.  An empty ``deltas`` yields two empty lists."""
    deltas = tuple(deltas)
    if not deltas:
        return [], []
    sweep = dataclasses.replace(cfg, delta0s=deltas)
    rows = run_experiment(dataclasses.replace(sweep, output_dir=None), workers)
    spread = spread_summary(rows)
    if cfg.output_dir:
        write_report(sweep.resolved(), rows, spread)
    return rows, spread


def alphabet_config(cfg: ExperimentConfig, size: int) -> ExperimentConfig:
    """The symmetric Markov/channel construction for one alphabet size."""
    if size < 2:
        raise ValueError("alphabet size must be >= 2")
    return dataclasses.replace(
        cfg,
        experiment_id=f"{cfg.experiment_id}-x{size}",
        source="markov",
        alphabet_size=size,
        channel="sym:0.3",
        init_channel=None,
        output_dir=None,
    )


def alphabet_sweep(sizes, cfg: ExperimentConfig, workers: int | None = None) -> list[MetricsRow]:
    jobs = []
    for size in sizes:
        sub = alphabet_config(cfg, size).resolved()
        jobs += [(sub, k) for k in sub.ks]
    rows = [r for cell in _map_cells(jobs, workers) for r in cell]
    if cfg.output_dir:
        write_report(cfg, rows)
    return rows


def run_denoise(cfg: ExperimentConfig, out_dir) -> tuple[list[MetricsRow], list[Path]]:
    """Run the selected denoisers and write each reconstruction next to the report."""
    cfg = cfg.resolved()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, written = [], []
    for k in cfg.ks:
        cell_rows, outputs, data = _run_cell(cfg, k, keep_outputs=True)
        rows += cell_rows
        for (name, kk, d0), outs in outputs.items():
            tag = f"{name}-k{kk}" + (f"-d{d0:g}" if d0 is not None else "")
            for item, xhat in zip(data.items, outs):
                written.append(_write_output(out, item, tag, xhat))
    write_report(dataclasses.replace(cfg, output_dir=str(out)), rows)
    return rows, written


def _write_output(out: Path, item: Item, tag: str, xhat) -> Path:
    if item.fmt == "pbm" and item.image is not None:
        path = out / f"{item.name}.{tag}.pbm"
        write_pbm(path, unraster(xhat, item.image))
    elif item.fmt == "fasta":
        path = out / f"{item.name}.{tag}.fa"
        write_fasta(path, DnaCorpus((f"{item.name}-{tag}",), (np.asarray(xhat),)))
    else:
        path = out / f"{item.name}.{tag}.txt"
        write_symbol_text(path, xhat)
    return path


# -- reports -------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_rows(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("csv_version",) + COLUMNS)
        for r in rows:
            w.writerow((CSV_VERSION,) + tuple(_cell(getattr(r, c)) for c in COLUMNS))


_INT_FIELDS = {"k", "iteration"}
_FLOAT_FIELDS = {"delta0", "ber", "noise_level", "normalized_error", "channel_l1",
                 "objective_gap", "objective", "wall_time"}


def read_rows(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            if int(rec.pop("csv_version")) != CSV_VERSION:
                raise ValueError(f"{path}: unsupported csv version")
            kw = {}
            for c in COLUMNS:
                v = rec[c]
                if c in _INT_FIELDS:
                    kw[c] = int(v) if v else None
                elif c in _FLOAT_FIELDS:
                    kw[c] = float(v) if v else (0.0 if c == "wall_time" else None)
                else:
                    kw[c] = v
            rows.append(MetricsRow(**kw))
    return rows


def write_spread(path, spread: list[SpreadRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("csv_version",) + SPREAD_COLUMNS)
        for s in spread:
            w.writerow((CSV_VERSION, s.experiment_id, s.denoiser, s.k, s.count,
                        repr(s.min), repr(s.median), repr(s.max), repr(s.spread)))


def table_layout(rows: list[MetricsRow]) -> tuple[list[str], dict[str, dict[str, float]]]:
    """Denoisers down, experiments across; aggregate normalized error in each cell."""
    columns: list[str] = []
    table: dict[str, dict[str, float]] = {}
    for r in rows:
        if not r.ok or r.item or r.iteration is not None or r.normalized_error is None:
            continue
        col = r.experiment_id
        if col not in columns:
            columns.append(col)
        table.setdefault(r.denoiser, {})[col] = r.normalized_error
    return columns, table


def write_table(path, rows: list[MetricsRow]) -> None:
    columns, table = table_layout(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["denoiser"] + columns)
        for name, vals in table.items():
            w.writerow([name] + [repr(vals[c]) if c in vals else "" for c in columns])


def manifest_for(cfg: ExperimentConfig, files: list[str]) -> dict:
    return {
        "tool": "icedude",
        "version": __version__,
        "csv_version": CSV_VERSION,
        "config": cfg.to_dict(),
        "seeds": {"data": cfg.data_seed, "noise": cfg.noise_seed, "train": cfg.train_seed},
        "python": platform.python_version(),
        "numpy": np.__version__,
        "files": files,
    }


def write_report(cfg: ExperimentConfig, rows: list[MetricsRow], spread=None) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [f"{cfg.experiment_id}.csv"]
    write_rows(out / files[0], rows)
    if spread is not None:
        files.append(f"{cfg.experiment_id}.spread.csv")
        write_spread(out / files[-1], spread)
    if cfg.two_phase or cfg.source == "images":
        files.append(f"{cfg.experiment_id}.table.csv")
        write_table(out / files[-1], rows)
    path = out / f"{cfg.experiment_id}.{MANIFEST_NAME}"
    path.write_text(json.dumps(manifest_for(cfg, files), indent=2) + "\n")
    return path


def load_manifest(path) -> ExperimentConfig:
    data = json.loads(Path(path).read_text())
    if data.get("tool") != "icedude":
        raise ValueError(f"{path} is not an icedude manifest")
    if data["version"] != __version__:
        log.warning("manifest written by version %s, replaying with %s", data["version"], __version__)
    return ExperimentConfig.from_dict(data["config"])


def replay(path, workers: int | None = None) -> list[MetricsRow]:
    """Rerun the experiment recorded in a manifest without writing reports."""
    cfg = dataclasses.replace(load_manifest(path), output_dir=None)
    return run_experiment(cfg, workers)


def estimate_channel(cfg: ExperimentConfig) -> tuple[list[MetricsRow], dict]:
    """ICE alone for every (k, delta0): returns trace rows and ``{(k, delta0): pi_hat}``.

    With ``output_dir`` set, each estimate is written as a plain-text matrix.
    """
    cfg = cfg.resolved()
    data = prepare_data(cfg)
    rows, estimates = [], {}
    for k in cfg.ks:
        cell = _Cell(cfg, data, k)
        for d0 in cfg.delta0s:
            start = time.perf_counter()
            res = run_ice(data.train.z, cell.pi0(d0), k, cell.loss, cell.tcfg,
                          max_iters=cfg.ice_iters, tol=cfg.ice_tol, pi_true=data.pi_true,
                          inputs=cell.train_inputs, final_update=False)
            estimates[(k, d0)] = res.pi_hat
            row = MetricsRow(cfg.experiment_id, "ice", k, d0, pi_hat=format_channel(res.pi_hat),
                             iteration=res.iterations_run, objective=res.trace[-1].objective_new,
                             wall_time=time.perf_counter() - start)
            if data.pi_true is not None:
                row.channel_l1 = channel_l1_error(res.pi_hat, data.pi_true)
            rows.append(row)
            rows += [MetricsRow(cfg.experiment_id, "ice-trace", k, d0, iteration=rec.iteration,
                                channel_l1=rec.l1_error, objective=rec.objective_new,
                                pi_hat=format_channel(rec.pi)) for rec in res.trace]
    if cfg.output_dir:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        for (k, d0), pi in estimates.items():
            write_matrix(out / f"{cfg.experiment_id}.k{k}.d{d0:g}.channel.txt", pi.entries)
        write_report(cfg, rows)
    return rows, estimates
