import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmgp import analysis
from fedmgp.features import DegenerateError, build_basis
from fedmgp.model import PromptGroupSet
from fedmgp.selection import SelectionOutcome
from fedmgp.verify import monotone_instance


@pytest.fixture
def basis(rng):
    return build_basis(12, 3, 3, 0.0, rng)


class TestCfc:
    def test_values(self, basis, rng):
        u = basis.global_dir
        assert analysis.cfc(2 * u, basis) == pytest.approx(2.0)
        assert analysis.cfc(basis.noise_dirs[1], basis) == pytest.approx(0.0, abs=1e-12)
        w = analysis.random_complement_directions(u, 1, rng)[0]
        assert analysis.cfc(0.7 * u + 5.0 * w, basis) == pytest.approx(0.7)

    def test_dimension_mismatch(self, basis):
        with pytest.raises(ValueError):
            analysis.cfc(np.ones(3), basis)


class TestExpectedCfc:
    def test_constant_sequence_has_zero_gap(self):
        rep = analysis.expected_cfc([0.5, 0.5, 0.5], [0.1, 0.7, 0.3], 1.0)
        assert rep.gap == 0.0

    def test_two_group_instance(self):
        # S = [0.6, 0.8]; pi = softmax(S) evaluated directly
        e = [math.exp(0.6), math.exp(0.8)]
        pi = [v / sum(e) for v in e]
        rep = analysis.expected_cfc([0.6, 0.8], [0.8, 0.6], 1.0)
        np.testing.assert_allclose(rep.probs, pi, rtol=1e-12)
        np.testing.assert_allclose(rep.probs, [0.45017, 0.54983], atol=5e-6)
        assert rep.expected_cfc_pi == pytest.approx(0.6 * pi[0] + 0.8 * pi[1], rel=1e-12)
        assert rep.expected_cfc_pi == pytest.approx(0.70997, abs=5e-6)
        assert rep.expected_cfc_uniform == pytest.approx(0.70)

    def test_uniform_limit(self):
        rep = analysis.expected_cfc([0.1, 0.9, 0.4], [0.5, 0.1, 0.2], 1e9)
        assert abs(rep.expected_cfc_pi - rep.expected_cfc_uniform) < 1e-9

    def test_degenerate_pair(self):
        with pytest.raises(DegenerateError):
            analysis.expected_cfc([0.0, 1.0], [0.0, 1.0], 1.0)

    @settings(max_examples=300, deadline=None)
    @given(seed=st.integers(0, 10**6), G=st.integers(2, 8), tau=st.floats(0.05, 10.0))
    def test_chebyshev_on_monotone_scores(self, seed, G, tau):
        c, s = monotone_instance(np.random.default_rng(seed), G)
        rep = analysis.expected_cfc(c, s, tau)
        assert rep.gap >= 0
        if np.ptp(c) > 0:
            assert rep.gap > 0

    def test_sign_flipped_distribution_breaks_the_inequality(self):
        flipped = lambda scores, tau: analysis.selection_distribution(-np.asarray(scores), tau)
        rep = analysis.expected_cfc([0.1, 0.9], [0.9, 0.1], 1.0, distribution=flipped)
        assert rep.gap < 0


class TestSetMean:
    def test_limits(self, rng):
        c, s = monotone_instance(rng, 5)
        rep = analysis.expected_cfc(c, s, 1.0)
        assert analysis.set_mean_expectation(c, s, 1.0, 1).set_mean == pytest.approx(rep.expected_cfc_pi, abs=1e-12)
        assert analysis.set_mean_expectation(c, s, 1.0, 5).set_mean == pytest.approx(rep.expected_cfc_uniform, abs=1e-12)

    def test_sequence_law_sums_to_one(self):
        p = np.array([0.1, 0.2, 0.3, 0.4])
        for k in range(1, 5):
            assert sum(pr for _, pr in analysis.ordered_sequence_law(p, k)) == pytest.approx(1.0)

    def test_subset_law_by_hand(self):
        p = np.array([0.5, 0.3, 0.2])
        law = analysis.subset_probabilities(p, 2)
        assert law[frozenset({0, 1})] == pytest.approx(0.5 * 0.3 / 0.5 + 0.3 * 0.5 / 0.7)
        assert sum(law.values()) == pytest.approx(1.0)

    def test_bracketed_between_uniform_and_pi(self, rng):
        for _ in range(200):
            c, s = monotone_instance(rng, 5)
            r = analysis.set_mean_expectation(c, s, 1.0, 2)
            assert r.expected_cfc_uniform - 1e-12 <= r.set_mean <= r.expected_cfc_pi + 1e-12
            assert r.holds == (r.set_mean >= r.expected_cfc_pi)

    def test_large_g_needs_monte_carlo(self, rng):
        c, s = rng.random(9), rng.random(9)
        with pytest.raises(ValueError):
            analysis.set_mean_expectation(c, s, 1.0, 2)
        r = analysis.set_mean_expectation(c, s, 1.0, 2, monte_carlo=True, n_samples=4000, rng=rng)
        assert r.std_error > 0
        assert r.expected_cfc_uniform - 5 * r.std_error <= r.set_mean


class TestSnr:
    def test_noise_arithmetic(self, basis):
        r = analysis.slot_snr(2 * basis.global_dir + 2 * basis.noise_dirs[0], basis)
        assert r.beta[0] == pytest.approx(2.0)
        assert r.noise[0] == pytest.approx(4.0)
        assert r.min_snr == pytest.approx(1.0)

    def test_pure_signal_sentinel(self, basis):
        r = analysis.slot_snr(basis.global_dir, basis)
        assert r.pure_signal[0] and math.isinf(r.min_snr)

    def test_averaging_raises_snr(self, basis):
        a = basis.global_dir + basis.noise_dirs[0]
        b = basis.global_dir + basis.noise_dirs[1]
        assert analysis.slot_snr(a, basis).min_snr == pytest.approx(1.0)
        r = analysis.slot_snr((a + b) / 2, basis)
        assert r.beta[0] == pytest.approx(1.0) and r.noise[0] == pytest.approx(0.5)
        assert r.min_snr == pytest.approx(2.0)

    def test_client_energy_counts_as_noise(self, basis):
        r = analysis.slot_snr(basis.global_dir + basis.client_dirs[1], basis)
        assert r.client_noise[0] == pytest.approx(1.0) and r.min_snr == pytest.approx(1.0)

    def test_zero_slots_excluded(self, basis):
        slots = np.vstack([basis.global_dir + basis.noise_dirs[0], np.zeros(12)])
        r = analysis.slot_snr(slots, basis)
        np.testing.assert_array_equal(r.slots, [0])
        with pytest.raises(ValueError):
            analysis.slot_snr(np.zeros((2, 12)), basis)

    def test_snr_ordering_on_instances(self, rng):
        for _ in range(20):
            b, P, prev = analysis.snr_instance(rng)
            r = analysis.strategy_snrs(b, P, prev, s=2)
            assert r.snr_full <= r.snr_fixed * (1 + 1e-12)
            assert r.snr_fixed <= r.snr_dynamic * (1 + 1e-12)
            assert np.nanmin(r.selection_advantage) > 0


class TestNoiseScaling:
    def test_single_prompt_has_full_power(self, rng):
        assert analysis.aggregated_specific_power(1, 1, 16, 1.0, 1.5, 20, rng) == pytest.approx(2.25)

    def test_doubling_halves(self, rng):
        p2 = analysis.aggregated_specific_power(2, 2, 64, 1.0, 1.0, 3000, rng)
        p4 = analysis.aggregated_specific_power(4, 2, 64, 1.0, 1.0, 3000, rng)
        assert p4 / p2 == pytest.approx(0.5, rel=0.1)

    def test_slope(self, rng):
        res = analysis.noise_scaling_experiment([(2, 1), (2, 2), (4, 2), (8, 2), (16, 2)], 200, rng)
        assert res.slope == pytest.approx(-1.0, abs=0.15)

    def test_degenerate_grid(self, rng):
        with pytest.raises(ValueError):
            analysis.noise_scaling_experiment([(2, 1), (1, 2), (4, 1)], 10, rng)


class TestAlpha:
    def test_monotone_under_top_s(self, rng):
        for _ in range(10):
            alphas = analysis.pure_aggregation_alpha(rng, policy="top_s")
            assert np.all(np.diff(alphas) >= -1e-9)


def fake_record(participants, picks, G):
    sels = {}
    for c in participants:
        sels[c] = {m: SelectionOutcome(m, np.full(G, 1 / G), tuple(picks(c)), "top_s") for m in ("text", "visual")}
    return SimpleNamespace(participants=list(participants), selections=sels)


class TestReportsHelpers:
    def test_frequency_policy_all(self):
        recs = [fake_record(range(4), lambda c: range(5), 5) for _ in range(3)]
        tab = analysis.selection_frequency_table(recs, 5)
        assert np.all(tab["counts"]["text"] == 4)
        np.testing.assert_allclose(tab["fractions"]["visual"], 1.0)
        assert tab["never_selected"] == []

    def test_frequency_arity_and_never_selected(self):
        recs = [fake_record(range(20), lambda c: (c % 3, 3), 5) for _ in range(2)]
        tab = analysis.selection_frequency_table(recs, 5)
        np.testing.assert_array_equal(tab["counts"]["text"].sum(axis=1), [40, 40])
        assert ("text", 4) in tab["never_selected"]

    def test_similarity_matrices(self, rng):
        v = rng.normal(size=4)
        np.testing.assert_allclose(analysis.similarity_matrix([v, 2 * v, 0.5 * v]), np.ones((3, 3)))
        np.testing.assert_allclose(analysis.similarity_matrix(np.eye(3)), np.eye(3), atol=1e-15)
        with pytest.raises(DegenerateError):
            analysis.similarity_matrix([v, np.zeros(4)])
        with pytest.raises(ValueError):
            analysis.similarity_matrix([v])

    def test_similarity_scopes(self, rng):
        sets = [PromptGroupSet(rng.normal(size=(3, 4)), rng.normal(size=(3, 4))) for _ in range(5)]
        intra = analysis.similarity_matrices(sets, "intra_client")
        inter = analysis.similarity_matrices(sets, "inter_client")
        assert len(intra["visual"]) == 5 and intra["visual"][0].shape == (3, 3)
        assert len(inter["text"]) == 3 and inter["text"][0].shape == (5, 5)
        M = intra["text"][2]
        np.testing.assert_allclose(M, M.T)
        np.testing.assert_allclose(np.diag(M), 1.0)
        with pytest.raises(ValueError):
            analysis.similarity_matrices(sets, "global")

    def test_mean_off_diagonal(self):
        assert analysis.mean_off_diagonal(np.array([[1.0, 0.2], [0.2, 1.0]])) == pytest.approx(0.2)

    def test_comm_cost(self):
        assert analysis.comm_cost("dynamic", 5, 2, 16, 16)["uplink"] == 64
        assert analysis.comm_cost("dynamic", 5, 5, 16, 16)["uplink"] == analysis.comm_cost("full", 5, 2, 16, 16)["uplink"]
        for s in range(1, 5):
            assert analysis.comm_cost("dynamic", 5, s, 16, 16)["uplink"] < analysis.comm_cost("full", 5, s, 16, 16)["uplink"]
        slot = analysis.comm_cost("dynamic", 5, 2, 16, 16, "slotwise_literal")
        assert slot["uplink_metadata"] == 4 and slot["downlink"] == 160
        with pytest.raises(ValueError):
            analysis.comm_cost("fedprox", 5, 2, 16, 16)
