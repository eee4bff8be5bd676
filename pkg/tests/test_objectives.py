import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdrib import numerics as nx
from cdrib.data import synth_scenario
from cdrib.model import GaussianLatent, Hyper, init_state, zero_state
from cdrib.objectives import (
    Batch,
    LossBreakdown,
    LossSwitches,
    contrastive_loss,
    derangement,
    kl_to_standard_normal,
    l2_penalty,
    reconstruction_loss,
    sample_negatives,
    total_loss,
)


def latent(mu, sigma):
    return GaussianLatent(nx.Tensor(np.atleast_2d(mu)), nx.Tensor(np.atleast_2d(sigma)))


def kl_scalar(mu, sigma):
    return float(kl_to_standard_normal(latent(mu, sigma)).data)


class TestKL:
    @pytest.mark.parametrize(
        "mu, sigma, expected",
        [
            ([0.0], [1.0], 0.0),
            ([1.0], [1.0], 0.5),
            ([0.0], [math.e], 0.5 * (math.e**2 - 3)),
            ([0.0], [0.5], 0.5 * (0.25 - 1 + 2 * math.log(2))),
            ([1.0, -2.0], [1.0, 1.0], 2.5),
        ],
    )
    def test_closed_form(self, mu, sigma, expected):
        assert abs(kl_scalar(mu, sigma) - expected) < 1e-12

    def test_mean_over_rows(self):
        mu = np.array([[0.0], [2.0]])
        sigma = np.ones((2, 1))
        assert kl_scalar(mu, sigma) == pytest.approx(1.0, abs=1e-12)

    def test_empty_rows(self):
        assert float(kl_to_standard_normal(latent([0.3], [0.7]), rows=[]).data) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-10, 10), min_size=1, max_size=4),
        st.lists(st.floats(0.05, 10), min_size=4, max_size=4),
    )
    def test_nonnegative(self, mu, sigma):
        assert kl_scalar(mu, sigma[: len(mu)]) >= -1e-12

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(0)
        mu, sigma = np.array([0.7, -0.3]), np.array([0.6, 1.4])
        z = mu + sigma * rng.standard_normal((200_000, 2))
        log_q = -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma)
        log_p = -0.5 * z**2
        mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
        assert abs(kl_scalar(mu, sigma) - mc) / kl_scalar(mu, sigma) < 0.02


class TestReconstruction:
    def test_zero_latents_give_two_ln2(self):
        z = np.zeros((3, 4))
        out = reconstruction_loss(z, z, [(0, 1), (2, 2)], negatives=[[0], [1]])
        assert float(out.data) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_hand_value(self):
        zu = np.array([[1.0, 0.0]])
        zi = np.array([[2.0, 0.0], [-1.0, 0.0]])
        out = float(reconstruction_loss(zu, zi, [(0, 0)], negatives=[[1]]).data)
        sig = lambda x: 1 / (1 + math.exp(-x))  # noqa: E731
        assert out == pytest.approx(-(math.log(sig(2.0)) + math.log(1 - sig(-1.0))), abs=1e-12)

    def test_skips_missing_negatives(self):
        z = np.zeros((2, 2))
        out = reconstruction_loss(z, z, [(0, 0)], negatives=[[-1]])
        assert float(out.data) == pytest.approx(math.log(2), abs=1e-12)

    def test_no_edges(self):
        assert float(reconstruction_loss(np.zeros((1, 2)), np.zeros((1, 2)), []).data) == 0.0

    def test_width_mismatch(self):
        with pytest.raises(nx.DimensionError):
            reconstruction_loss(np.zeros((1, 2)), np.zeros((1, 3)), [(0, 0)], negatives=[[0]])


class TestNegativeSampling:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 20), st.integers(1, 5), st.integers(0, 2**16))
    def test_avoids_interacted(self, n_items, k, seed):
        rng = np.random.default_rng(seed)
        interacted = [frozenset(rng.choice(n_items, size=rng.integers(0, n_items), replace=False).tolist())]
        out = sample_negatives([0, 0], n_items, interacted, k, rng)
        assert out.shape == (2, k)
        assert not set(out.ravel().tolist()) & interacted[0]
        assert np.all((out >= 0) & (out < n_items))

    def test_saturated_user_counted(self):
        counters = Counter()
        out = sample_negatives([0], 2, [frozenset({0, 1})], 3, np.random.default_rng(0), counters)
        assert np.all(out == -1) and counters["saturated_user"] == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**16))
def test_derangement_has_no_fixed_points(n, seed):
    d = derangement(n, np.random.default_rng(seed))
    assert sorted(d.tolist()) == list(range(n))
    assert np.all(d != np.arange(n))


class TestContrastive:
    def _state(self, pair, F=4):
        return init_state(pair, Hyper(n_factors=F), seed=3)

    def test_zero_discriminator_gives_two_ln2(self):
        sc = synth_scenario(n_users=120, n_items=60, seed=1)
        st_ = zero_state(sc.pair, Hyper(n_factors=4))
        z = np.random.default_rng(0).normal(size=(5, 4))
        out = contrastive_loss(z, z, st_, rng=0)
        assert float(out.data) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_too_few_users(self):
        sc = synth_scenario(n_users=120, n_items=60, seed=1)
        c = Counter()
        out = contrastive_loss(np.ones((1, 4)), np.ones((1, 4)), self._state(sc.pair), rng=0, counters=c)
        assert float(out.data) == 0.0 and c["contrastive_too_few_users"] == 1


def test_l2_penalty_matches_sum_of_squares():
    sc = synth_scenario(n_users=120, n_items=60, seed=1)
    st_ = init_state(sc.pair, Hyper(n_factors=4, l2=0.01), seed=0)
    expected = 0.01 * sum(float(np.sum(t.data**2)) for t in st_.tape.params.values())
    assert float(l2_penalty(st_).data) == pytest.approx(expected, rel=1e-12)


@pytest.fixture(scope="module")
def setup():
    sc = synth_scenario(n_users=150, n_items=80, seed=2)
    st_ = init_state(sc.pair, Hyper(n_factors=8, beta1=0.7, beta2=1.6), seed=5)
    batch = Batch(sc.pair.graph_x.edges[:64], sc.pair.graph_y.edges[:64])
    return sc, st_, batch


class TestTotalLoss:
    def test_total_is_weighted_sum(self, setup):
        sc, st_, batch = setup
        loss, br = total_loss(sc.pair, st_, batch, np.random.default_rng(0))
        assert float(loss.data) == pytest.approx(br.total, rel=1e-12)
        assert br.total == pytest.approx(br.recompute(0.7, 1.6), rel=1e-12)
        assert br.is_finite()

    def test_deterministic_given_rng(self, setup):
        sc, st_, batch = setup
        a = total_loss(sc.pair, st_, batch, np.random.default_rng(9))[1]
        b = total_loss(sc.pair, st_, batch, np.random.default_rng(9))[1]
        assert a == b

    def test_ablations_zero_their_terms(self, setup):
        sc, st_, batch = setup
        sw = LossSwitches(contrastive=False, in_domain=False)
        _, br = total_loss(sc.pair, st_, batch, np.random.default_rng(0), switches=sw)
        assert br.contrastive == 0.0 and br.recon_x2X == 0.0 and br.recon_y2Y == 0.0
        assert br.recon_o2X > 0 and br.recon_o2Y > 0

    def test_bad_kl_scale(self, setup):
        sc, st_, batch = setup
        with pytest.raises(ValueError):
            total_loss(sc.pair, st_, batch, np.random.default_rng(0), switches=LossSwitches(kl_scale="bogus"))

    def test_breakdown_line_round_trips(self):
        br = LossBreakdown(kl_x_user=0.1, total=2.5)
        parsed = dict(kv.split("=") for kv in br.to_line(epoch=3).split())
        assert parsed["epoch"] == "3" and float(parsed["kl_x_user"]) == 0.1


def test_doubling_beta1_adds_its_kl_terms(setup):
    sc, st_, batch = setup
    _, a = total_loss(sc.pair, st_, batch, np.random.default_rng(4))
    doubled = type(st_)(Hyper(n_factors=8, beta1=1.4, beta2=1.6), st_.tape, st_.seed)
    _, b = total_loss(sc.pair, doubled, batch, np.random.default_rng(4))
    assert b.total - a.total == pytest.approx(0.7 * (a.kl_x_user + a.kl_x_item), rel=1e-10)


def test_cross_domain_term_only_touches_overlap_rows():
    zx = nx.ParamTape({"z": np.random.default_rng(0).normal(size=(5, 3))})
    items_y = np.random.default_rng(1).normal(size=(4, 3))
    overlap_rows = [1, 3]
    edges = [(1, 0), (3, 2), (1, 3)]
    loss = reconstruction_loss(zx["z"], items_y, edges, negatives=[[1], [0], [2]])
    nx.backward(loss, zx)
    touched = np.flatnonzero(np.any(zx.grads["z"] != 0, axis=1))
    assert set(touched.tolist()) <= set(overlap_rows)


def test_separable_limit_is_near_zero():
    zu = np.array([[10.0, 0.0]])
    zi = np.array([[10.0, 0.0], [-10.0, 0.0]])
    assert float(reconstruction_loss(zu, zi, [(0, 0)], negatives=[[1]]).data) < 1e-6
