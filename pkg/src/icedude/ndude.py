"""Neural DUDE: a context network that outputs a distribution over
single-symbol denoisers, trained on pseudo-labels from the noisy data alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel_math import channel_pseudo_labels
from .core import (
    FACTORED,
    REDUCED,
    ChannelMatrix,
    DenoiserMapSet,
    LossMatrix,
    SymbolSequence,
    as_array,
    context_array,
    enumerate_maps,
)
from .neural import IndexedTargets, Network, TrainConfig, encode_contexts, fit, objective


def encode_sequence(z, k: int, z_size: int | None = None) -> np.ndarray:
    """Network inputs for every position of ``z``: one-hot contexts, PAD as zeros."""
    zs = as_array(z)
    if z_size is None:
        z_size = z.alphabet.size if isinstance(z, SymbolSequence) else int(zs.max()) + 1
    return encode_contexts(context_array(zs, k), z_size)


@dataclass
class NdudeModel:
    net: Network
    k: int
    map_set: DenoiserMapSet
    pi_used: ChannelMatrix
    losses: list = field(default_factory=list)

    def __post_init__(self):
        if self.net.dims[-1] != len(self.map_set):
            raise ValueError("network output width must equal the map-set size")

    def checkpoint_meta(self) -> dict:
        return {
            "model": "ndude",
            "k": self.k,
            "map_set": self.map_set.kind,
            "z_size": self.map_set.z_size,
            "xhat_size": self.map_set.xhat_size,
            "pi": " ".join(repr(float(v)) for v in self.pi_used.entries.ravel()),
        }

    def save(self, path) -> None:
        self.net.save(path, self.checkpoint_meta())

    @classmethod
    def load(cls, path) -> "NdudeModel":
        net, meta = Network.load(path)
        maps = enumerate_maps(int(meta["z_size"]), int(meta["xhat_size"]), meta["map_set"])
        vals = np.array([float(v) for v in meta["pi"].split()])
        rows = vals.size // maps.z_size
        return cls(net, int(meta["k"]), maps, ChannelMatrix(vals.reshape(rows, maps.z_size)))


def default_maps(z_size: int) -> DenoiserMapSet:
    return enumerate_maps(z_size, z_size, REDUCED)


def new_network(k: int, maps: DenoiserMapSet, cfg: TrainConfig) -> Network:
    return Network.create(2 * k * maps.z_size, len(maps), hidden=cfg.hidden,
                          heads=maps.heads, seed=cfg.seed)


def train_ndude(z, pi: ChannelMatrix, loss: LossMatrix, k: int, maps: DenoiserMapSet | None,
                cfg: TrainConfig, init: Network | None = None, lr: float | None = None,
                inputs: np.ndarray | None = None) -> NdudeModel:
    """Fit the network on pseudo-label targets ``L_new[z_i]``.

    Training warm-starts from ``init`` when given; ``lr`` defaults to the
    first-round rate for a fresh network and the later rate for a warm start.
    """
    zs = as_array(z)
    if maps is None:
        maps = default_maps(pi.cols)
    if inputs is None:
        inputs = encode_sequence(zs, k, pi.cols)
    labels = channel_pseudo_labels(pi, loss, maps)
    net = init if init is not None else new_network(k, maps, cfg)
    if lr is None:
        lr = cfg.lr_first if init is None else cfg.lr_later
    net, losses = fit(net, inputs, IndexedTargets(labels.matrix, zs), cfg, lr)
    return NdudeModel(net, k, maps, pi, losses)


def ndude_objective(model: NdudeModel, z, pi: ChannelMatrix, loss: LossMatrix,
                    inputs: np.ndarray | None = None) -> float:
    """Mean pseudo-label cross-entropy of ``model`` with labels built from ``pi``."""
    zs = as_array(z)
    if inputs is None:
        inputs = encode_sequence(zs, model.k, model.map_set.z_size)
    labels = channel_pseudo_labels(pi, loss, model.map_set)
    return objective(model.net, inputs, IndexedTargets(labels.matrix, zs))


def map_probabilities(model: NdudeModel, z, inputs: np.ndarray | None = None) -> np.ndarray:
    if inputs is None:
        inputs = encode_sequence(z, model.k, model.map_set.z_size)
    return model.net.forward(inputs)


def apply_maps(probs: np.ndarray, maps: DenoiserMapSet, z) -> np.ndarray:
    """Reconstruction from per-position map distributions (ties to lowest index)."""
    zs = as_array(z)
    if maps.kind == FACTORED:
        heads = probs.reshape(zs.size, maps.z_size, maps.xhat_size)
        return np.argmax(heads[np.arange(zs.size), zs], axis=1)
    best = np.argmax(probs, axis=1)
    return maps.table[best, zs]


def posterior_from_probs(probs: np.ndarray, maps: DenoiserMapSet, z) -> np.ndarray:
    """``q[i, x] = sum of probs[i, s] over maps with s(z_i) = x``."""
    zs = as_array(z)
    ind = maps.outputs()  # (|Z|, |S|, |Xhat|)
    q = np.empty((zs.size, maps.xhat_size))
    for v in range(maps.z_size):
        rows = zs == v
        q[rows] = probs[rows] @ ind[v]
    return q


def denoise(model: NdudeModel, z, inputs: np.ndarray | None = None) -> SymbolSequence:
    zs = as_array(z)
    xhat = apply_maps(map_probabilities(model, zs, inputs), model.map_set, zs)
    return SymbolSequence.of(xhat, model.map_set.xhat_size)


def induced_posterior(model: NdudeModel, z, inputs: np.ndarray | None = None) -> np.ndarray:
    """``(n, |X|)`` array; every row sums to one."""
    return posterior_from_probs(map_probabilities(model, z, inputs), model.map_set, z)
