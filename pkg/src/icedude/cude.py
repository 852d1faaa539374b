"""CUDE: learn the context-conditional law of the noisy center symbol with a
network, then plug it into the DUDE rule in place of raw counts.

Training never sees a channel, so one trained model serves any channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ChannelMatrix, LossMatrix, SymbolSequence, as_array
from .dude import dude_rule
from .ndude import encode_sequence
from .neural import IndexedTargets, Network, TrainConfig, fit


@dataclass
class CudeModel:
    net: Network
    k: int
    losses: list = field(default_factory=list)

    @property
    def z_size(self) -> int:
        return self.net.dims[-1]

    def save(self, path) -> None:
        self.net.save(path, {"model": "cude", "k": self.k})

    @classmethod
    def load(cls, path) -> "CudeModel":
        net, meta = Network.load(path)
        return cls(net, int(meta["k"]))


def train_cude(z, k: int, cfg: TrainConfig, inputs: np.ndarray | None = None,
               z_size: int | None = None, init: Network | None = None,
               lr: float | None = None) -> CudeModel:
    """One-hot cross-entropy fit of the center-symbol predictor.

    ``init`` warm-starts from an existing network (per-item fine-tuning), in
    which case ``lr`` defaults to the later-round rate.
    """
    zs = as_array(z)
    if z_size is None:
        z_size = z.alphabet.size if isinstance(z, SymbolSequence) else int(zs.max()) + 1
    if inputs is None:
        inputs = encode_sequence(zs, k, z_size)
    if init is None:
        net = Network.create(inputs.shape[1], z_size, hidden=cfg.hidden, seed=cfg.seed)
    else:
        net = init
    if lr is None:
        lr = cfg.lr_first if init is None else cfg.lr_later
    net, losses = fit(net, inputs, IndexedTargets(np.eye(z_size), zs), cfg, lr)
    return CudeModel(net, k, losses)


def context_distribution(model: CudeModel, z, inputs: np.ndarray | None = None) -> np.ndarray:
    if inputs is None:
        inputs = encode_sequence(z, model.k, model.z_size)
    return model.net.forward(inputs)


def cude_denoise(model: CudeModel, z, pi: ChannelMatrix, loss: LossMatrix,
                 inputs: np.ndarray | None = None) -> SymbolSequence:
    zs = as_array(z)
    xhat = dude_rule(context_distribution(model, zs, inputs), zs, pi, loss)
    return SymbolSequence.of(xhat, loss.entries.shape[1])
