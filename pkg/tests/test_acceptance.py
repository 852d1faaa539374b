"""End-to-end acceptance checks.

The desk-scale experiments (criteria 5 to 9) take minutes each on one core;
their fixtures are module-scoped so related checks share one run.
"""

import dataclasses
import itertools
import time

import numpy as np
import pytest

from icedude.bench import ExperimentConfig, alphabet_sweep, parse_channel, replay, run_experiment, spread_summary
from icedude.channel_math import estimated_loss, make_rng
from icedude.core import FULL, ChannelMatrix, LossMatrix, enumerate_maps
from icedude.hmm import baum_welch, forward_backward, initial_hmm, markov_hmm
from icedude.ice import channel_l1_error, m_step_matrix
from icedude.neural import Network

DESK_DELTAS = (0.05, 0.1, 0.2, 0.4)


def aggregate(rows, name, delta0=None):
    """The whole-data row of one denoiser (and one delta0 for the swept ones)."""
    found = [r for r in rows if r.denoiser == name and r.item == "" and r.iteration is None
             and (delta0 is None or r.delta0 == delta0)]
    assert len(found) == 1, f"{name} delta0={delta0}: {len(found)} rows"
    assert found[0].ok, found[0].message
    return found[0]


def trace(rows, delta0):
    return sorted((r for r in rows if r.denoiser == "ice-trace" and r.delta0 == delta0),
                  key=lambda r: r.iteration)


# -- 1 ---------------------------------------------------------------------------


def test_c1_unbiased_loss_identity(record):
    rng = make_rng(101)
    start = time.perf_counter()
    worst = 0.0
    made = 0
    while made < 50:
        nx = int(rng.integers(2, 5))
        nz = int(rng.integers(nx, 5))
        pi = rng.dirichlet(np.ones(nz) * 0.7, size=nx)
        if np.linalg.matrix_rank(pi) < nx or np.linalg.cond(pi @ pi.T) > 1e4:
            continue
        made += 1
        lam = rng.uniform(0, 1, size=(nx, nx))
        maps = enumerate_maps(nz, nx, FULL)
        est = estimated_loss(ChannelMatrix(pi), LossMatrix(lam), maps).matrix
        # expected loss of every single-symbol map, straight from the definition
        rho = np.array([[sum(pi[x, z] * lam[x, s[z]] for z in range(nz)) for s in maps.table]
                        for x in range(nx)])
        worst = max(worst, float(np.abs(pi @ est - rho).max()))
    elapsed = time.perf_counter() - start
    ok = record(1, worst <= 1e-12 and elapsed < 1.0, f"max |Pi L - rho| = {worst:.2e}, {elapsed:.2f}s")
    assert ok


# -- 2 ---------------------------------------------------------------------------


def enumerate_binary_hmm(model, z):
    n = len(z)
    paths = np.array(list(itertools.product(range(2), repeat=n)))
    em = model.state_emission()
    logp = np.log(model.initial[paths[:, 0]]) + np.log(em[paths[:, 0], z[0]])
    for t in range(1, n):
        logp += np.log(model.transition[paths[:, t - 1], paths[:, t]]) + np.log(em[paths[:, t], z[t]])
    p = np.exp(logp)
    total = p.sum()
    post = np.stack([np.bincount(paths[:, t], weights=p, minlength=2) for t in range(n)]) / total
    return post, np.log(total)


def test_c2_forward_backward_matches_enumeration(record):
    rng = make_rng(202)
    forward_backward(markov_hmm(np.full((2, 2), 0.5), np.eye(2) * 0.8 + 0.1), np.zeros(2, dtype=int))  # JIT warm-up
    start = time.perf_counter()
    post_err = ll_err = 0.0
    for _ in range(100):
        model = markov_hmm(rng.dirichlet(np.ones(2), size=2), rng.dirichlet(np.ones(2), size=2),
                           1, rng.dirichlet(np.ones(2)))
        z = rng.integers(2, size=int(rng.integers(1, 11)))
        post, ll = enumerate_binary_hmm(model, z)
        sm = forward_backward(model, z)
        post_err = max(post_err, float(np.abs(sm.posterior - post).max()))
        ll_err = max(ll_err, abs(sm.loglik - ll))
    elapsed = time.perf_counter() - start
    ok = record(2, post_err <= 1e-10 and ll_err <= 1e-10 and elapsed < 5,
                f"marginals {post_err:.1e}, loglik {ll_err:.1e}, {elapsed:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------------


def weighted_log(c, p):
    """``c * log(p)`` with the convention ``0 * log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(c > 0, c * np.log(p), 0.0)


def channel_objective(counts, a, b):
    """Pi-dependent part of the bound under factored Q; Pi = [[1-a, a], [b, 1-b]]."""
    return (weighted_log(counts[0, 0], 1 - a) + weighted_log(counts[0, 1], a)
            + weighted_log(counts[1, 0], b) + weighted_log(counts[1, 1], 1 - b))


def test_c3_m_step_beats_grid_search(record):
    rng = make_rng(303)
    grid = np.linspace(0, 1, 1001)
    start = time.perf_counter()
    worst = -np.inf
    for _ in range(20):
        n = int(rng.integers(2, 7))
        z = rng.integers(2, size=n)
        q = rng.dirichlet(np.ones(2), size=n)
        # counts[x, z] = sum of q_i(x) over positions with Z_i = z
        counts = np.stack([np.bincount(z, weights=q[:, x], minlength=2) for x in range(2)])
        pi = m_step_matrix(q, z, floor=0.0)
        closed = float(channel_objective(counts, pi[0, 1], pi[1, 0]))
        # the objective separates over rows, so the 2-D grid max is a sum of 1-D maxima
        best = float(np.max(channel_objective(counts, grid, 0.5) - channel_objective(counts, 0.5, 0.5))
                     + np.max(channel_objective(counts, 0.5, grid) - channel_objective(counts, 0.5, 0.5))
                     + channel_objective(counts, 0.5, 0.5))
        worst = max(worst, best - closed)
    elapsed = time.perf_counter() - start
    ok = record(3, worst <= 1e-3 and elapsed < 30,
                f"grid max - closed form <= {worst:.2e}, {elapsed:.2f}s")
    assert ok


# -- 4 ---------------------------------------------------------------------------


def test_c4_gradients(record):
    rng = make_rng(404)
    start = time.perf_counter()
    worst = 0.0
    for i in range(20):
        heads = int(rng.choice([1, 2, 3]))
        width = int(rng.integers(2, 5))
        net = Network.create(int(rng.integers(2, 7)), heads * width, hidden=int(rng.integers(3, 8)),
                             depth=int(rng.integers(1, 4)), heads=heads, seed=i)
        for _, b in net.layers:
            b[...] = rng.uniform(-0.5, 0.5, size=b.shape)
        x = rng.random((int(rng.integers(1, 10)), net.dims[0]))
        g = rng.uniform(0, 2, size=(x.shape[0], net.dims[-1]))
        _, grad = net.loss_and_grad(x, g)
        fd = np.zeros_like(net.flat)
        h = 1e-5
        for j in range(net.flat.size):
            keep = net.flat[j]
            net.flat[j] = keep + h
            up, _ = net.loss_and_grad(x, g)
            net.flat[j] = keep - h
            down, _ = net.loss_and_grad(x, g)
            net.flat[j] = keep
            fd[j] = (up - down) / (2 * h)
        rel = np.abs(grad - fd) / np.maximum(1e-6, np.abs(grad) + np.abs(fd))
        worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - start
    ok = record(4, worst < 1e-4 and elapsed < 5, f"max relative error {worst:.1e}, {elapsed:.2f}s")
    assert ok


# -- 5, 6, 7: binary Markov source through a BSC ------------------------------


@pytest.fixture(scope="module")
def desk():
    cfg = ExperimentConfig(
        experiment_id="desk", source="markov", alpha=0.1, channel="bsc:0.3", n=10 ** 6, ks=(16,),
        delta0s=DESK_DELTAS, denoisers=("fb", "ndude", "cude", "ice-ndude", "ice-cude", "ndude-pi0"))
    start = time.perf_counter()
    rows = run_experiment(cfg)
    return rows, time.perf_counter() - start


@pytest.mark.desk
def test_c5_synthetic_reproduction(desk, record):
    rows, wall = desk
    fb = aggregate(rows, "fb").normalized_error
    nd = aggregate(rows, "ndude").normalized_error
    cu = aggregate(rows, "cude").normalized_error
    ice_row = aggregate(rows, "ice-ndude", 0.1)
    ice_nd = ice_row.normalized_error
    ice_cu = aggregate(rows, "ice-cude", 0.1).normalized_error
    pi_hat = parse_channel(ice_row.pi_hat)
    delta_hat = float((pi_hat[0, 1] + pi_hat[1, 0]) / 2)

    a = 0.28 <= delta_hat <= 0.32
    b = abs(ice_nd - nd) <= 0.05 and abs(ice_cu - cu) <= 0.05
    c = max(nd, cu, ice_nd, ice_cu) <= 1.15 * fb
    record("5a", a, f"delta_hat = {delta_hat:.4f}")
    record("5b", b, f"ICE-N-DUDE {ice_nd:.4f} vs N-DUDE {nd:.4f}; ICE-CUDE {ice_cu:.4f} vs CUDE {cu:.4f}")
    record("5c", c, f"worst {max(nd, cu, ice_nd, ice_cu):.4f} vs 1.15 x FB {1.15 * fb:.4f} "
                    f"(desk run {wall:.0f}s)")
    assert a and b and c


@pytest.mark.desk
def test_c6_initialization_robustness(desk, record):
    rows, _ = desk
    spread = {s.denoiser: s for s in spread_summary(rows)}
    ice = max(spread["ice-ndude"].spread, spread["ice-cude"].spread)
    plug = spread["ndude-pi0"].spread
    ok = record(6, ice <= 0.03 and plug > 0.10,
                f"ICE span {ice:.4f} (N-DUDE {spread['ice-ndude'].spread:.4f}, "
                f"CUDE {spread['ice-cude'].spread:.4f}); plug-in span {plug:.4f}")
    assert spread["fb"].spread == 0.0
    assert ok


@pytest.mark.desk
def test_c7_channel_metrics_trend(desk, record):
    rows, _ = desk
    tr = trace(rows, 0.1)
    first, last = tr[0], tr[-1]
    ok = record(7, last.objective_gap <= first.objective_gap and last.channel_l1 <= first.channel_l1
                and last.channel_l1 <= 0.05,
                f"iterations {len(tr)}: gap {first.objective_gap:.5f} -> {last.objective_gap:.5f}, "
                f"L1 {first.channel_l1:.4f} -> {last.channel_l1:.4f}")
    assert ok


@pytest.mark.desk
def test_desk_ordering(desk):
    """FB is best, and ICE beats the plug-in run under the wrong channel."""
    rows, _ = desk
    fb = aggregate(rows, "fb").normalized_error
    ice = aggregate(rows, "ice-ndude", 0.1).normalized_error
    mismatched = aggregate(rows, "ndude-pi0", 0.1).normalized_error
    assert fb <= ice <= mismatched


# -- 8: Baum-Welch --------------------------------------------------------------


def test_c8a_baum_welch_monotone(record):
    rng = make_rng(808)
    worst = np.inf
    for order in (1, 2, 3):
        for size in (2, 4):
            model = initial_hmm(size, order, 0.2, seed=int(rng.integers(1000)))
            z = forward_sample(rng, size, 3000)
            fit = baum_welch(z, order, model, max_iters=30, tol=0)
            steps = np.diff(fit.loglik_trace)
            worst = min(worst, float(steps.min()))
    ok = record("8a", worst >= -1e-9, f"smallest log-likelihood step {worst:.2e}")
    assert ok


def forward_sample(rng, size, n):
    x = np.zeros(n, dtype=np.int64)
    for t in range(1, n):
        x[t] = x[t - 1] if rng.random() < 0.9 else rng.integers(size)
    flip = rng.random(n) < 0.2
    return np.where(flip, rng.integers(size, size=n), x)


@pytest.fixture(scope="module")
def dna():
    cfg = ExperimentConfig(experiment_id="dna", source="dna",
                           denoisers=("ndude", "cude", "ice-cude", "bw1"))
    return run_experiment(cfg)


@pytest.mark.desk
def test_dna_cude_not_worse_than_ndude(dna):
    cu = aggregate(dna, "cude").normalized_error
    nd = aggregate(dna, "ndude").normalized_error
    assert cu <= nd, f"CUDE {cu:.4f} vs N-DUDE {nd:.4f}"


@pytest.mark.desk
def test_c8b_dna_baum_welch_fails_ice_does_not(dna, record):
    bw = aggregate(dna, "bw1", 0.1).normalized_error
    cu = aggregate(dna, "cude").normalized_error
    ice = aggregate(dna, "ice-cude", 0.1).normalized_error
    ok = record("8b", bw > 1.0 and ice < 1.0 and abs(ice - cu) <= 0.1,
                f"BW1 {bw:.4f}; ICE-CUDE {ice:.4f}; CUDE {cu:.4f}")
    assert ok


# -- 9: binary images -------------------------------------------------------------

IMAGE_CHANNELS = ("pi_0.1", "pi_0.2", "pi_0.3")


@pytest.fixture(scope="module")
def images():
    out = {}
    for ch in IMAGE_CHANNELS:
        cfg = ExperimentConfig(experiment_id=f"img-{ch}", source="images", channel=ch,
                               image_count=8, image_size=256, two_phase=True, train_items=8,
                               ks=(16,), denoisers=("cude", "ice-cude"))
        out[ch] = run_experiment(cfg)
    return out


@pytest.mark.desk
def test_c9_images(images, record):
    lines, ok = [], True
    for ch, rows in images.items():
        ice = aggregate(rows, "ice-cude", 0.1)
        cu = aggregate(rows, "cude").normalized_error
        good = ice.channel_l1 <= 0.05 and ice.normalized_error <= 1.1 * cu
        ok &= good
        lines.append(f"{ch}: L1 {ice.channel_l1:.4f}, ICE-CUDE {ice.normalized_error:.4f} vs CUDE {cu:.4f}")
    record(9, ok, "; ".join(lines))
    assert ok


# -- alphabet sweep ---------------------------------------------------------------

ALPHABET_SIZES = (3, 4, 10, 30)


@pytest.fixture(scope="module")
def alphabet():
    cfg = ExperimentConfig(experiment_id="alphabet", denoisers=("fb", "cude", "ice-ndude", "ice-cude"))
    rows = alphabet_sweep(ALPHABET_SIZES, cfg)
    return {size: [r for r in rows if r.experiment_id == f"alphabet-x{size}"] for size in ALPHABET_SIZES}


@pytest.mark.desk
@pytest.mark.parametrize("size", ALPHABET_SIZES)
def test_alphabet_ice_cude_tracks_cude(alphabet, size):
    rows = alphabet[size]
    ice = aggregate(rows, "ice-cude", 0.1).normalized_error
    cu = aggregate(rows, "cude").normalized_error
    assert abs(ice - cu) <= 0.05, f"|X|={size}: ICE-CUDE {ice:.4f} vs CUDE {cu:.4f}"


@pytest.mark.desk
def test_alphabet_large_channel_metrics(alphabet):
    last = trace(alphabet[max(ALPHABET_SIZES)], 0.1)[-1]
    assert last.channel_l1 < 0.05 and last.objective_gap < 0.05, \
        f"L1 {last.channel_l1:.4f}, objective gap {last.objective_gap:.4f}"


# -- 10: replay -------------------------------------------------------------------


@pytest.mark.parametrize("cfg", [
    ExperimentConfig(experiment_id="replay-markov", n=20_000, ks=(3,), epochs=2, hidden=12,
                     delta0s=(0.1, 0.3), denoisers=("fb", "dude", "ndude", "cude", "ice-ndude", "ice-cude",
                                                     "ndude-pi0", "cude-pi0", "bw1", "bw2-ndude")),
    ExperimentConfig(experiment_id="replay-images", source="images", channel="pi_0.2", image_count=3,
                     image_size=48, two_phase=True, train_items=2, ks=(2,), epochs=2, hidden=12,
                     denoisers=("ndude", "cude", "ice-ndude", "ice-cude", "bw1")),
    ExperimentConfig(experiment_id="replay-dna", source="dna", n=8000, ks=(4,), epochs=1, hidden=16,
                     denoisers=("dude", "cude", "ice-cude")),
], ids=lambda c: c.experiment_id)
def test_c10_replay_is_bit_exact(cfg, tmp_path, record):
    cfg = dataclasses.replace(cfg, output_dir=str(tmp_path))
    rows = run_experiment(cfg)
    again = replay(tmp_path / f"{cfg.experiment_id}.manifest.json")
    same = len(rows) == len(again) and all(a == b for a, b in zip(rows, again))
    prior = ACCEPTANCE_10.setdefault("ok", True)
    ACCEPTANCE_10["ok"] = prior and same
    ACCEPTANCE_10.setdefault("ids", []).append(cfg.experiment_id)
    record(10, ACCEPTANCE_10["ok"], f"{len(ACCEPTANCE_10['ids'])} manifests replayed, "
                                   f"{'all' if ACCEPTANCE_10['ok'] else 'not all'} identical")
    assert same


ACCEPTANCE_10: dict = {}
