"""Iterative channel estimation around Neural DUDE.

Each round trains the network on pseudo-labels built from the current
channel guess (approximate E-step), reads the induced per-position posterior
off the network, and re-estimates the channel in closed form (M-step).
Only the noisy sequence is ever consulted.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ChannelMatrix, DenoiserMapSet, LossMatrix, as_array, symmetric_channel
from .ndude import (
    NdudeModel,
    default_maps,
    encode_sequence,
    induced_posterior,
    ndude_objective,
    train_ndude,
)
from .neural import Divergence, TrainConfig

log = logging.getLogger(__name__)

STOP_TOL = 1e-3
MAX_ITERS = 3
ENTRY_FLOOR = 1e-8


class DegeneratePosterior(ValueError):
    pass


def m_step_matrix(posterior: np.ndarray, z, pi_prev: ChannelMatrix | None = None,
                  floor: float = ENTRY_FLOOR) -> np.ndarray:
    """``pi[j, v] = sum_i 1{z_i = v} q_i(j) / sum_i q_i(j)`` as a raw array.

    A row with no posterior mass keeps its value from ``pi_prev`` (uniform if
    none given).  Entries are floored at ``floor`` and rows renormalized.
    No rank check is done here.
    """
    q = np.asarray(posterior, dtype=np.float64)
    zs = as_array(z)
    if q.shape[0] != zs.size:
        raise ValueError("posterior length does not match the sequence")
    z_size = pi_prev.cols if pi_prev is not None else max(int(zs.max()) + 1, q.shape[1])
    num = np.zeros((q.shape[1], z_size))
    for v in range(z_size):
        num[:, v] = q[zs == v].sum(axis=0)
    mass = q.sum(axis=0)
    if not (mass > 0).any():
        raise DegeneratePosterior("posterior puts no mass on any clean symbol")
    pi = np.empty_like(num)
    for j in range(num.shape[0]):
        if mass[j] > 0:
            pi[j] = num[j] / mass[j]
        else:
            log.warning("M-step: no posterior mass on symbol %d; keeping previous row", j)
            pi[j] = pi_prev.entries[j] if pi_prev is not None else 1.0 / z_size
    if floor:
        pi = np.maximum(pi, floor)
    return pi / pi.sum(axis=1, keepdims=True)


def m_step(posterior: np.ndarray, z, pi_prev: ChannelMatrix | None = None,
           floor: float = ENTRY_FLOOR) -> ChannelMatrix:
    """Closed-form channel update; raises ``RankDeficientChannel`` if the result
    cannot serve as a channel for the next round."""
    return ChannelMatrix.normalized(m_step_matrix(posterior, z, pi_prev, floor))


def channel_l1_error(pi_est, pi_true) -> float:
    """Entrywise L1 distance divided by the number of entries."""
    a = np.asarray(getattr(pi_est, "entries", pi_est))
    b = np.asarray(getattr(pi_true, "entries", pi_true))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum() / a.size)


def objective_gap(model: NdudeModel, ref_model: NdudeModel, z, loss: LossMatrix,
                  inputs: np.ndarray | None = None) -> float:
    """``|L(w_ref, Z; pi_ref) - L(w, Z; pi_ref)|`` with ``pi_ref = ref_model.pi_used``."""
    pi_ref = ref_model.pi_used
    if inputs is None:
        inputs = encode_sequence(z, model.k, pi_ref.cols)
    ref = ndude_objective(ref_model, z, pi_ref, loss, inputs)
    return abs(ref - ndude_objective(model, z, pi_ref, loss, inputs))


def initial_channel(size: int, delta0: float) -> ChannelMatrix:
    """Symmetric starting guess: total off-diagonal row mass ``delta0``."""
    return symmetric_channel(size, delta0)


@dataclass
class IterationRecord:
    iteration: int               # t after the update, 1-based
    objective_prev: float        # L(w^(t), Z; pi^(t-1)), the training objective
    objective_new: float         # L(w^(t), Z; pi^(t))
    pi: ChannelMatrix            # pi^(t)
    l1_error: float | None = None
    objective_gap: float | None = None

    @property
    def stop_statistic(self) -> float:
        return abs(self.objective_new - self.objective_prev)


@dataclass
class IceResult:
    pi_hat: ChannelMatrix
    model: NdudeModel            # final network, trained under pi_hat
    iterations_run: int
    converged: bool
    trace: list[IterationRecord] = field(default_factory=list)
    pi0: ChannelMatrix | None = None

    @property
    def w_hat(self):
        return self.model.net


def run_ice(z, pi0: ChannelMatrix, k: int, loss: LossMatrix, cfg: TrainConfig,
            maps: DenoiserMapSet | None = None, max_iters: int = MAX_ITERS, tol: float = STOP_TOL,
            pi_true: ChannelMatrix | None = None, ref_model: NdudeModel | None = None,
            inputs: np.ndarray | None = None, final_update: bool = True,
            init=None) -> IceResult:
    """Alternate network training and channel re-estimation.

    Stops once ``|L(w^(t), Z; pi^(t)) - L(w^(t), Z; pi^(t-1))| <= tol`` or after
    ``max_iters`` rounds, then retrains once under the final estimate.
    ``pi_true`` and ``ref_model`` only feed the diagnostic trace.  ``init``
    warm-starts the very first round (used for per-image fine-tuning).
    """
    zs = as_array(z)
    if maps is None:
        maps = default_maps(pi0.cols)
    if inputs is None:
        inputs = encode_sequence(zs, k, pi0.cols)
    pi_t = pi0
    net = init
    model = None
    trace: list[IterationRecord] = []
    converged = False
    for t in range(max_iters):
        lr = cfg.learning_rate(t) if init is None else cfg.lr_later
        model = train_ndude(zs, pi_t, loss, k, maps, cfg, init=net, lr=lr, inputs=inputs)
        net = model.net
        q = induced_posterior(model, zs, inputs)
        pi_next = m_step(q, zs, pi_t)
        rec = IterationRecord(
            t + 1,
            ndude_objective(model, zs, pi_t, loss, inputs),
            ndude_objective(model, zs, pi_next, loss, inputs),
            pi_next,
        )
        if not (np.isfinite(rec.objective_prev) and np.isfinite(rec.objective_new)):
            raise Divergence(f"non-finite objective at ICE iteration {t + 1}: {trace + [rec]}")
        if pi_true is not None:
            rec.l1_error = channel_l1_error(pi_next, pi_true)
        if ref_model is not None:
            rec.objective_gap = objective_gap(model, ref_model, zs, loss, inputs)
        log.info("ICE iteration %d: objective %.6f -> %.6f, pi=%s", rec.iteration,
                 rec.objective_prev, rec.objective_new, np.round(pi_next.entries, 4).tolist())
        trace.append(rec)
        pi_t = pi_next
        if rec.stop_statistic <= tol:
            converged = True
            break
    if final_update or model is None:
        model = train_ndude(zs, pi_t, loss, k, maps, cfg, init=net, lr=cfg.lr_later if net is not None else None,
                            inputs=inputs)
    else:
        model = NdudeModel(model.net, k, maps, pi_t, model.losses)
    return IceResult(pi_t, model, len(trace), converged, trace, pi0)
