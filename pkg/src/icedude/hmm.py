"""Hidden Markov baseline: scaled forward-backward smoothing and Baum-Welch.

An order-``m`` Markov source over ``X`` is handled as an order-1 chain over
composite states ``(x_{t-m+1}, .., x_t)`` indexed base-``|X|`` with the most
recent symbol least significant.  Emissions are tied to that last symbol, so
the channel stays memoryless.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .channel_math import make_rng
from .core import ChannelMatrix, LossMatrix, SymbolSequence, as_array

log = logging.getLogger(__name__)


class InconsistentModel(ValueError):
    """The observations have zero probability under the model."""


@dataclass
class HmmModel:
    order: int
    initial: np.ndarray      # (S,)
    transition: np.ndarray   # (S, S), structurally sparse for order > 1
    emission: np.ndarray     # (|X|, |Z|)

    def __post_init__(self):
        self.initial = np.asarray(self.initial, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.emission = np.asarray(self.emission, dtype=np.float64)
        s = self.n_states
        if self.initial.shape != (s,) or self.transition.shape != (s, s):
            raise ValueError("initial/transition shapes do not match order and alphabet")
        for name, m in (("initial", self.initial[None]), ("transition", self.transition),
                        ("emission", self.emission)):
            if (m < 0).any() or np.abs(m.sum(axis=1) - 1).max() > 1e-9:
                raise ValueError(f"{name} rows must be probability vectors")
        allowed = structure_mask(self.base_size, self.order)
        if (self.transition[~allowed] != 0).any():
            raise ValueError("transition violates the composite-state overlap structure")

    @property
    def base_size(self) -> int:
        return self.emission.shape[0]

    @property
    def n_states(self) -> int:
        return self.base_size ** self.order

    def last_symbol(self) -> np.ndarray:
        return np.arange(self.n_states) % self.base_size

    def state_emission(self) -> np.ndarray:
        return self.emission[self.last_symbol()]

    def save(self, path) -> None:
        s, x, z = self.n_states, self.base_size, self.emission.shape[1]
        lines = [f"hmm {self.order} {x} {z}", f"{1} {s}",
                 " ".join(repr(float(v)) for v in self.initial), f"{s} {s}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.transition]
        lines.append(f"{x} {z}")
        lines += [" ".join(repr(float(v)) for v in row) for row in self.emission]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "HmmModel":
        tokens = Path(path).read_text().split()
        if tokens[0] != "hmm":
            raise ValueError("missing 'hmm order |X| |Z|' header")
        order = int(tokens[1])
        pos, mats = 4, []
        for _ in range(3):
            r, c = int(tokens[pos]), int(tokens[pos + 1])
            vals = np.array([float(v) for v in tokens[pos + 2:pos + 2 + r * c]])
            mats.append(vals.reshape(r, c))
            pos += 2 + r * c
        return cls(order, mats[0][0], mats[1], mats[2])


def structure_mask(size: int, order: int) -> np.ndarray:
    """``mask[a, b]`` is True when composite state ``b`` can follow ``a``."""
    s = size ** order
    shifted = (np.arange(s) % (size ** (order - 1))) * size
    mask = np.zeros((s, s), dtype=bool)
    for b in range(size):
        mask[np.arange(s), shifted + b] = True
    return mask


def expand_transitions(cond: np.ndarray, order: int) -> np.ndarray:
    """Composite transition matrix from ``cond[history, next]``, ``history`` in
    the same base-``|X|`` indexing as the composite states."""
    cond = np.asarray(cond, dtype=np.float64)
    size = cond.shape[1]
    s = size ** order
    if cond.shape[0] != s:
        raise ValueError("conditional table needs one row per composite history")
    shifted = (np.arange(s) % (size ** (order - 1))) * size
    a = np.zeros((s, s))
    for b in range(size):
        a[np.arange(s), shifted + b] = cond[:, b]
    return a


def stationary(transition: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(transition.T)
    v = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    v = np.abs(v)
    return v / v.sum()


def base_marginal(model: HmmModel, dist: np.ndarray) -> np.ndarray:
    out = np.zeros(model.base_size)
    np.add.at(out, model.last_symbol(), dist)
    return out


def markov_hmm(cond: np.ndarray, emission, order: int = 1, initial=None) -> HmmModel:
    a = expand_transitions(cond, order)
    if initial is None:
        initial = stationary(a)
    return HmmModel(order, initial, a, getattr(emission, "entries", emission))


def symmetric_markov_hmm(size: int, alpha: float, emission) -> HmmModel:
    """Order-1 chain that leaves its state with probability ``alpha``."""
    cond = np.full((size, size), alpha / (size - 1))
    np.fill_diagonal(cond, 1 - alpha)
    return markov_hmm(cond, emission, 1, np.full(size, 1.0 / size))


def initial_hmm(size: int, order: int, delta0: float, stay: float = 0.9,
                jitter: float = 0.05, seed=0, z_size: int | None = None) -> HmmModel:
    """Baum-Welch starting point.

    Transitions favour repeating the last symbol with probability ``stay``,
    perturbed by seeded multiplicative noise of relative size ``jitter`` and
    renormalized; emissions are the symmetric channel with error ``delta0``.
    """
    z_size = size if z_size is None else z_size
    s = size ** order
    last = np.arange(s) % size
    cond = np.full((s, size), (1 - stay) / (size - 1))
    cond[np.arange(s), last] = stay
    if jitter:
        cond *= 1 + jitter * make_rng(seed).uniform(-1, 1, size=cond.shape)
        cond /= cond.sum(axis=1, keepdims=True)
    emission = np.full((size, z_size), delta0 / (z_size - 1))
    np.fill_diagonal(emission, 1 - delta0)
    return markov_hmm(cond, emission, order, np.full(s, 1.0 / s))


@numba.njit(cache=True)
def _forward(initial, trans, obs_lik):
    n, s = obs_lik.shape
    alpha = np.empty((n, s))
    scale = np.empty(n)
    tot = 0.0
    for j in range(s):
        alpha[0, j] = initial[j] * obs_lik[0, j]
        tot += alpha[0, j]
    scale[0] = tot
    if tot <= 0.0:
        return alpha, scale, 0
    for j in range(s):
        alpha[0, j] /= tot
    for t in range(1, n):
        tot = 0.0
        for j in range(s):
            acc = 0.0
            for i in range(s):
                acc += alpha[t - 1, i] * trans[i, j]
            alpha[t, j] = acc * obs_lik[t, j]
            tot += alpha[t, j]
        scale[t] = tot
        if tot <= 0.0:
            return alpha, scale, t
        for j in range(s):
            alpha[t, j] /= tot
    return alpha, scale, n


@numba.njit(cache=True)
def _backward(trans, obs_lik, scale):
    n, s = obs_lik.shape
    beta = np.empty((n, s))
    tmp = np.empty(s)
    for i in range(s):
        beta[n - 1, i] = 1.0
    for t in range(n - 2, -1, -1):
        for j in range(s):
            tmp[j] = obs_lik[t + 1, j] * beta[t + 1, j]
        for i in range(s):
            acc = 0.0
            for j in range(s):
                acc += trans[i, j] * tmp[j]
            beta[t, i] = acc / scale[t + 1]
    return beta


@dataclass
class SmoothingResult:
    posterior: np.ndarray    # (n, S) composite-state marginals
    loglik: float
    alpha: np.ndarray
    beta: np.ndarray
    scale: np.ndarray

    def symbol_posterior(self, model: HmmModel) -> np.ndarray:
        """Marginal posterior over the current base symbol, ``(n, |X|)``."""
        out = np.zeros((self.posterior.shape[0], model.base_size))
        last = model.last_symbol()
        for x in range(model.base_size):
            out[:, x] = self.posterior[:, last == x].sum(axis=1)
        return out


def forward_backward(model: HmmModel, z) -> SmoothingResult:
    zs = as_array(z)
    if zs.max() >= model.emission.shape[1]:
        raise ValueError("observation outside the emission alphabet")
    obs_lik = np.ascontiguousarray(model.state_emission()[:, zs].T)
    alpha, scale, reached = _forward(model.initial, model.transition, obs_lik)
    if reached < zs.size:
        raise InconsistentModel(f"observation {reached} has zero probability under the model")
    beta = _backward(model.transition, obs_lik, scale)
    post = alpha * beta
    post /= post.sum(axis=1, keepdims=True)
    return SmoothingResult(post, float(np.log(scale).sum()), alpha, beta, scale)


def bayes_response(posterior: np.ndarray, loss: LossMatrix) -> np.ndarray:
    """``argmin_xhat sum_x loss[x, xhat] * posterior[i, x]`` (ties to lowest)."""
    return np.argmin(posterior @ loss.entries, axis=1)


def fb_denoise(model: HmmModel, z, loss: LossMatrix) -> SymbolSequence:
    post = forward_backward(model, z).symbol_posterior(model)
    return SymbolSequence.of(bayes_response(post, loss), loss.entries.shape[1])


def _reestimate(model: HmmModel, zs: np.ndarray, sm: SmoothingResult) -> HmmModel:
    obs_lik = model.state_emission()[:, zs].T
    # xi summed over time: alpha_t(i) A(i,j) b_j(z_{t+1}) beta_{t+1}(j) / c_{t+1}
    w = obs_lik[1:] * sm.beta[1:] / sm.scale[1:, None]
    xi = model.transition * (sm.alpha[:-1].T @ w)
    rows = xi.sum(axis=1, keepdims=True)
    trans = np.where(rows > 0, xi / np.where(rows > 0, rows, 1), model.transition)

    sym_post = sm.symbol_posterior(model)
    z_size = model.emission.shape[1]
    counts = np.zeros((model.base_size, z_size))
    for v in range(z_size):
        counts[:, v] = sym_post[zs == v].sum(axis=0)
    mass = counts.sum(axis=1, keepdims=True)
    emission = np.where(mass > 0, counts / np.where(mass > 0, mass, 1), model.emission)
    initial = sm.posterior[0]
    return HmmModel(model.order, initial / initial.sum(), trans, emission)


@dataclass
class BaumWelchResult:
    model: HmmModel
    loglik_trace: list
    iterations: int
    converged: bool


def baum_welch(z, order: int, init: HmmModel, max_iters: int = 100, tol: float = 1e-6) -> BaumWelchResult:
    """EM for initial law, transitions and tied emissions.

    ``loglik_trace[t]`` is the log-likelihood of the model before update ``t``
    plus a final entry for the returned model.  Stops when the relative
    improvement drops below ``tol``.
    """
    zs = as_array(z)
    if init.order != order:
        raise ValueError("init order does not match")
    model = init
    sm = forward_backward(model, zs)
    trace = [sm.loglik]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        model = _reestimate(model, zs, sm)
        sm = forward_backward(model, zs)
        trace.append(sm.loglik)
        if not np.isfinite(sm.loglik):
            raise FloatingPointError("log-likelihood became non-finite")
        if abs(trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
    return BaumWelchResult(model, trace, it, converged)


def bw_denoise(z, order: int, init: HmmModel, loss: LossMatrix, **kw):
    """Fit by Baum-Welch then denoise by forward-backward under the fit."""
    fit = baum_welch(z, order, init, **kw)
    return fb_denoise(fit.model, z, loss), fit


def emission_channel(model: HmmModel, floor: float = 1e-8) -> ChannelMatrix:
    """The tied emission matrix as a channel for plug-in denoisers.

    Entries are floored at ``floor`` and renormalized so the result stays usable
    by the pseudo-inverse; rank deficiency still raises.
    """
    return ChannelMatrix.normalized(np.maximum(model.emission, floor))


def bw_hybrid_channel(z, order: int, init: HmmModel, floor: float = 1e-8, **kw) -> ChannelMatrix:
    """Baum-Welch emission estimate, ready to plug into N-DUDE or CUDE."""
    return emission_channel(baum_welch(z, order, init, **kw).model, floor)
