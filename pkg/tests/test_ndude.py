import numpy as np
import pytest

from icedude.channel_math import channel_pseudo_labels, corrupt, make_rng
from icedude.core import FULL, REDUCED, SymbolSequence, enumerate_maps, hamming_loss, symmetric_channel
from icedude.data_io import MarkovSourceSpec, gen_markov, make_bsc
from icedude.ndude import (
    NdudeModel,
    apply_maps,
    default_maps,
    denoise,
    encode_sequence,
    induced_posterior,
    new_network,
    ndude_objective,
    posterior_from_probs,
    train_ndude,
)
from icedude.neural import IndexedTargets, Network, TrainConfig, objective, train_epoch

H2 = hamming_loss(2)
SMALL = TrainConfig(epochs=3, hidden=12, seed=1)


def point_mass_model(k, maps, index, pi):
    """A network whose output is (numerically) all on map ``index``."""
    net = Network((2 * k * maps.z_size, 3, 3, 3, len(maps)))
    net.layers[-1][1][index] = 60.0
    return NdudeModel(net, k, maps, pi)


class TestInducedPosterior:
    def test_uniform_full_binary(self):
        maps = enumerate_maps(2, 2, FULL)
        q = posterior_from_probs(np.full((1, 4), 0.25), maps, np.array([0]))
        np.testing.assert_allclose(q, [[0.5, 0.5]])

    def test_reduced_dna(self):
        maps = enumerate_maps(4, 4, REDUCED)
        q = posterior_from_probs(np.array([[0.6, 0.1, 0.1, 0.1, 0.1]]), maps, np.array([0]))
        np.testing.assert_allclose(q, [[0.7, 0.1, 0.1, 0.1]], atol=1e-15)

    def test_reduced_matches_full_on_shared_support(self):
        rng = make_rng(2)
        full = enumerate_maps(4, 4, FULL)
        red = enumerate_maps(4, 4, REDUCED)
        where = [next(i for i, m in enumerate(full.table) if (m == r).all()) for r in red.table]
        p_red = rng.dirichlet(np.ones(5), size=30)
        p_full = np.zeros((30, 256))
        p_full[:, where] = p_red
        z = rng.integers(4, size=30)
        np.testing.assert_allclose(posterior_from_probs(p_full, full, z),
                                   posterior_from_probs(p_red, red, z), atol=1e-14)

    @pytest.mark.parametrize("kind", [FULL, REDUCED])
    def test_rows_sum_to_one(self, kind):
        rng = make_rng(3)
        maps = enumerate_maps(3, 3, kind)
        p = rng.dirichlet(np.ones(len(maps)), size=100)
        q = posterior_from_probs(p, maps, rng.integers(3, size=100))
        assert (q >= 0).all()
        np.testing.assert_allclose(q.sum(axis=1), 1, atol=1e-10)


class TestApplyMaps:
    def test_identity_point_mass(self):
        z = gen_markov(MarkovSourceSpec(2, 0.2, 200, 1))
        model = point_mass_model(2, default_maps(2), 0, make_bsc(0.1))
        np.testing.assert_array_equal(denoise(model, z).data, z.data)

    @pytest.mark.parametrize("a", [0, 1, 2])
    def test_constant_point_mass(self, a):
        z = gen_markov(MarkovSourceSpec(3, 0.2, 200, 2))
        model = point_mass_model(1, default_maps(3), a + 1, symmetric_channel(3, 0.1))
        assert (denoise(model, z).data == a).all()

    def test_mapping_depends_on_context_only(self):
        maps = enumerate_maps(2, 2, FULL)
        probs = np.array([[0.1, 0.2, 0.6, 0.1]] * 2)
        # same context, different centers: both get the flip map
        assert apply_maps(probs, maps, np.array([0, 1])).tolist() == [1, 0]

    def test_ties_pick_lowest_map(self):
        maps = enumerate_maps(2, 2, FULL)
        assert apply_maps(np.full((1, 4), 0.25), maps, np.array([1])).tolist() == [0]


class TestTraining:
    def test_noiseless_learns_identity(self):
        pi = make_bsc(0.0)
        labels = channel_pseudo_labels(pi, H2, default_maps(2))
        # identity ties with const-z in the labels, so its optimal mass is 1/2
        assert (labels.matrix[:, 0] == labels.matrix.max(axis=1)).all()
        z = SymbolSequence.of(make_rng(4).integers(2, size=5000), 2)
        model = train_ndude(z, pi, H2, 2, None, TrainConfig(epochs=10, hidden=12, seed=1))
        probs = model.net.forward(encode_sequence(z, 2))
        assert (probs.argmax(axis=1) == 0).all()
        np.testing.assert_array_equal(denoise(model, z).data, z.data)

    def test_objective_trend(self):
        x = gen_markov(MarkovSourceSpec(2, 0.1, 20_000, 5))
        pi = make_bsc(0.2)
        z = corrupt(x, pi, 6)
        maps = default_maps(2)
        inputs = encode_sequence(z, 4)
        targets = IndexedTargets(channel_pseudo_labels(pi, H2, maps).matrix, z.data)
        cfg = TrainConfig(hidden=20, seed=2)
        net = new_network(4, maps, cfg)
        values = [objective(net, inputs, targets)]
        for _ in range(3):
            net, _ = train_epoch(net, inputs, targets, cfg, cfg.lr_first)
            values.append(objective(net, inputs, targets))
        upticks = sum(b > a for a, b in zip(values, values[1:]))
        assert upticks <= 1
        assert all(b <= a * 1.01 for a, b in zip(values, values[1:]))

    def test_warm_start_uses_later_rate(self):
        z = corrupt(gen_markov(MarkovSourceSpec(2, 0.1, 3000, 7)), make_bsc(0.2), 8)
        first = train_ndude(z, make_bsc(0.2), H2, 2, None, SMALL)
        again = train_ndude(z, make_bsc(0.2), H2, 2, None, SMALL, init=first.net)
        assert again.net.epochs_done == 2 * SMALL.epochs
        # the small later rate moves weights less than a fresh first round did
        fresh = new_network(2, default_maps(2), SMALL)
        assert np.abs(again.net.flat - first.net.flat).max() < np.abs(first.net.flat - fresh.flat).max()

    def test_objective_matches_training_loss_scale(self):
        z = corrupt(gen_markov(MarkovSourceSpec(2, 0.1, 4000, 9)), make_bsc(0.2), 10)
        model = train_ndude(z, make_bsc(0.2), H2, 2, None, SMALL)
        val = ndude_objective(model, z, make_bsc(0.2), H2)
        assert np.isfinite(val) and val > 0
        assert abs(val - model.losses[-1]) < 0.2 * model.losses[-1]

    def test_posterior_valid_after_training(self):
        z = corrupt(gen_markov(MarkovSourceSpec(2, 0.1, 3000, 11)), make_bsc(0.3), 12)
        model = train_ndude(z, make_bsc(0.3), H2, 3, None, SMALL)
        q = induced_posterior(model, z)
        assert q.shape == (3000, 2)
        np.testing.assert_allclose(q.sum(axis=1), 1, atol=1e-10)


def test_checkpoint_roundtrip(tmp_path):
    z = corrupt(gen_markov(MarkovSourceSpec(2, 0.1, 2000, 1)), make_bsc(0.2), 2)
    pi = make_bsc(0.2)
    model = train_ndude(z, pi, H2, 2, enumerate_maps(2, 2, FULL), SMALL)
    model.save(tmp_path / "m.txt")
    back = NdudeModel.load(tmp_path / "m.txt")
    assert back.k == 2 and back.map_set.kind == FULL
    np.testing.assert_array_equal(back.pi_used.entries, pi.entries)
    np.testing.assert_array_equal(denoise(back, z).data, denoise(model, z).data)


def test_output_width_checked():
    with pytest.raises(ValueError):
        NdudeModel(Network((4, 3, 4)), 1, default_maps(2), make_bsc(0.1))
