"""Quantities derived from a channel and a loss matrix.

None of these functions ever sees a clean sequence: the estimated loss and
the pseudo-labels depend only on the channel, the loss, the noisy symbol and
the candidate single-symbol denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ChannelMatrix, DenoiserMapSet, LossMatrix, SymbolSequence, as_array


def make_rng(seed) -> np.random.Generator:
    """All randomness in the package comes from PCG64 seeded through here."""
    return np.random.Generator(np.random.PCG64(seed))


def corrupt(x, pi: ChannelMatrix, seed) -> SymbolSequence:
    """Pass ``x`` through the memoryless channel ``pi``."""
    xs = as_array(x)
    p = pi.entries
    if xs.max() >= p.shape[0]:
        raise ValueError("clean symbol outside the channel's input alphabet")
    u = make_rng(seed).random(xs.size)
    cum = np.cumsum(p, axis=1)[:, :-1]
    z = np.zeros(xs.size, dtype=np.int64)
    for j in range(cum.shape[1]):
        z += u >= cum[xs, j]
    return SymbolSequence.of(z, p.shape[1])


def rho(pi: ChannelMatrix, loss: LossMatrix, maps: DenoiserMapSet) -> np.ndarray:
    """``rho[x, s] = sum_z pi[x, z] * loss[x, s(z)]``.

    For factored (partial) maps ``(z, a)`` only the single term of ``z`` is
    kept, so summing a full map's partial terms recovers its full ``rho``.
    """
    p, lam = pi.entries, loss.entries
    if p.shape[1] != maps.z_size or lam.shape != (p.shape[0], maps.xhat_size):
        raise ValueError("channel, loss and map set dimensions disagree")
    # ind[z, s, a] = 1{s(z) = a}
    ind = maps.outputs()
    return np.einsum("xz,xa,zsa->xs", p, lam, ind)


@dataclass(frozen=True)
class EstimatedLoss:
    matrix: np.ndarray  # |Z| x |S|
    map_set: DenoiserMapSet


def estimated_loss(pi: ChannelMatrix, loss: LossMatrix, maps: DenoiserMapSet) -> EstimatedLoss:
    """Unbiased loss estimate ``L = pinv(pi) @ rho``.

    Rank deficiency is rejected when the ChannelMatrix is constructed.
    """
    return EstimatedLoss(pi.pinv @ rho(pi, loss, maps), maps)


@dataclass(frozen=True)
class PseudoLabels:
    matrix: np.ndarray  # |Z| x |S|, non-negative
    l_max: float
    map_set: DenoiserMapSet

    def targets(self, z) -> np.ndarray:
        """Training target for every position: row ``z_i`` of the matrix."""
        return self.matrix[as_array(z)]


def pseudo_labels(est: EstimatedLoss) -> PseudoLabels:
    l_max = float(est.matrix.max())
    return PseudoLabels(l_max - est.matrix, l_max, est.map_set)


def channel_pseudo_labels(pi: ChannelMatrix, loss: LossMatrix, maps: DenoiserMapSet) -> PseudoLabels:
    return pseudo_labels(estimated_loss(pi, loss, maps))
