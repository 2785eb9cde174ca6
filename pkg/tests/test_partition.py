"""Exact probability core: step rules, joint, marginalization, enumeration."""

import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcrp.partition import (
    SeatingCounts,
    canonical_labels,
    crp_step_probs,
    dfcrp_joint_logprob,
    dfcrp_marginal_logprob_exact,
    dfcrp_marginal_logprob_mc,
    dfcrp_step_probs,
    enumerate_valid_partitions,
    family_sizes,
    is_valid_partition,
    sample_prior_partition,
)

NEG_INF = float("-inf")


def brute_force_marginal(labels, alpha, families):
    """Independent oracle: literal average over all n! allocation orders."""
    n = len(labels)
    terms = []
    for order in itertools.permutations(range(n)):
        lp = dfcrp_joint_logprob(labels, alpha, families, order)
        if lp > NEG_INF:
            terms.append(math.exp(lp))
    if not terms:
        return NEG_INF
    return math.log(math.fsum(terms)) - math.lgamma(n + 1)


class TestStepRules:
    def test_crp_basic(self):
        np.testing.assert_allclose(crp_step_probs([2, 1], 1.0), [0.5, 0.25, 0.25])

    def test_crp_first_customer(self):
        np.testing.assert_allclose(crp_step_probs([], 1.0), [1.0])

    def test_crp_three_tables(self):
        np.testing.assert_allclose(
            crp_step_probs([1, 1, 1], 3.0), [1 / 6, 1 / 6, 1 / 6, 1 / 2]
        )

    def test_crp_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            totals = rng.integers(0, 10, size=rng.integers(1, 8))
            probs = crp_step_probs(totals, float(rng.uniform(0.1, 10)))
            assert abs(probs.sum() - 1.0) < 1e-12

    def test_crp_errors(self):
        with pytest.raises(ValueError):
            crp_step_probs([1, 2], 0.0)
        with pytest.raises(ValueError):
            crp_step_probs([1, -1], 1.0)

    def test_dfcrp_two_blocked_tables(self):
        # two singleton tables of one family, arriving member of another
        counts = SeatingCounts((1, 1), ({1: 1}, {1: 1}))
        np.testing.assert_allclose(
            dfcrp_step_probs(counts, 2, 1.0), [1 / 3, 1 / 3, 1 / 3]
        )

    def test_dfcrp_single_table(self):
        counts = SeatingCounts((1,), ({1: 1},))
        np.testing.assert_allclose(dfcrp_step_probs(counts, 2, 1.0), [1 / 2, 1 / 2])

    def test_dfcrp_family_everywhere(self):
        counts = SeatingCounts((2, 3), ({7: 1, 1: 1}, {7: 1, 2: 1, 3: 1}))
        probs = dfcrp_step_probs(counts, 7, 2.5)
        np.testing.assert_allclose(probs, [0.0, 0.0, 1.0])

    def test_dfcrp_blocked_entries_zero(self):
        counts = SeatingCounts((2, 1), ({1: 1, 2: 1}, {2: 1}))
        probs = dfcrp_step_probs(counts, 1, 1.0)
        assert probs[0] == 0.0
        np.testing.assert_allclose(probs, [0.0, 0.5, 0.5])
        assert abs(probs.sum() - 1.0) < 1e-12

    def test_dfcrp_alpha_error(self):
        with pytest.raises(ValueError):
            dfcrp_step_probs(SeatingCounts((1,), ({1: 1},)), 2, -1.0)

    def test_seating_counts_validation(self):
        with pytest.raises(ValueError):
            SeatingCounts((-1,), ({},))
        with pytest.raises(ValueError):
            SeatingCounts((1,), ({1: 2},))  # family count above table total

    def test_seating_counts_from_labels(self):
        counts = SeatingCounts.from_labels((0, 1, 0), (1, 1, 2))
        assert counts.totals == (2, 1)
        assert counts.n_without_family(1) == 0
        assert counts.n_without_family(2) == 1
        assert counts.n_without_family(99) == 3


class TestJointLogprob:
    def test_worked_example_identity_order(self):
        lp = dfcrp_joint_logprob((0, 1, 2), 1.0, (1, 1, 2), (0, 1, 2))
        assert lp == pytest.approx(math.log(1 / 3), abs=1e-12)

    def test_worked_example_swapped_order(self):
        lp = dfcrp_joint_logprob((0, 1, 2), 1.0, (1, 1, 2), (0, 2, 1))
        assert lp == pytest.approx(math.log(1 / 4), abs=1e-12)

    def test_same_family_cluster_impossible(self):
        assert dfcrp_joint_logprob((0, 0, 1), 1.0, (1, 1, 2), (0, 1, 2)) == NEG_INF

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            dfcrp_joint_logprob((0, 1), 1.0, (1, 1, 2), (0, 1))
        with pytest.raises(ValueError):
            dfcrp_joint_logprob((0, 1, 2), 1.0, (1, 1, 2), (0, 1))

    def test_bad_order(self):
        with pytest.raises(ValueError):
            dfcrp_joint_logprob((0, 1, 2), 1.0, (1, 1, 2), (0, 1, 1))

    def test_crp_reduction_distinct_families(self):
        # all-distinct families restore exchangeability: every order agrees
        labels = (0, 1, 0, 2, 1)
        families = (0, 1, 2, 3, 4)
        values = {
            round(dfcrp_joint_logprob(labels, 1.3, families, order), 12)
            for order in itertools.permutations(range(5))
        }
        assert len(values) == 1

    def test_crp_reduction_matches_crp_steps(self):
        labels = (0, 1, 0, 2)
        families = (0, 1, 2, 3)
        expected = (
            math.log(crp_step_probs([1], 2.0)[1])      # item 1 opens table 2
            + math.log(crp_step_probs([1, 1], 2.0)[0])  # item 2 joins table 1
            + math.log(crp_step_probs([2, 1], 2.0)[2])  # item 3 opens table 3
        )
        lp = dfcrp_joint_logprob(labels, 2.0, families, (0, 1, 2, 3))
        assert lp == pytest.approx(expected, abs=1e-12)


class TestExactMarginal:
    def test_singletons_three_items(self):
        lp = dfcrp_marginal_logprob_exact((0, 1, 2), 1.0, (1, 1, 2))
        assert lp == pytest.approx(math.log(5 / 18), abs=1e-12)

    def test_three_item_normalization(self):
        families = (1, 1, 2)
        total = sum(
            math.exp(dfcrp_marginal_logprob_exact(c, 1.0, families))
            for c in enumerate_valid_partitions(families)
        )
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_validation_instance_21_partitions(self):
        families = (0, 0, 0, 0, 1, 1)
        parts = enumerate_valid_partitions(families)
        assert len(parts) == 21
        probs = [math.exp(dfcrp_marginal_logprob_exact(c, 1.0, families)) for c in parts]
        assert math.fsum(probs) == pytest.approx(1.0, abs=1e-10)
        rounded = Counter(round(p, 3) for p in probs)
        assert rounded == {0.062: 12, 0.030: 8, 0.015: 1}

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(12):
            n = int(rng.integers(2, 6))
            families = tuple(int(v) for v in rng.integers(0, 3, size=n))
            alpha = float(rng.uniform(0.3, 4.0))
            for labels in enumerate_valid_partitions(families):
                got = dfcrp_marginal_logprob_exact(labels, alpha, families)
                want = brute_force_marginal(labels, alpha, families)
                assert got == pytest.approx(want, abs=1e-12)

    def test_invalid_partition(self):
        assert dfcrp_marginal_logprob_exact((0, 0), 1.0, (1, 1)) == NEG_INF

    def test_cap(self):
        families = tuple(range(10))
        with pytest.raises(ValueError, match="enumeration cap"):
            dfcrp_marginal_logprob_exact(tuple(range(10)), 1.0, families)
        # explicit override allows it
        lp = dfcrp_marginal_logprob_exact((0,) * 1 + tuple(range(1, 10)), 1.0,
                                          families, cap=10)
        assert math.isfinite(lp)

    def test_joint_item_relabeling_invariance(self):
        rng = np.random.default_rng(7)
        families = (0, 0, 1, 1, 2)
        for labels in enumerate_valid_partitions(families)[:8]:
            base = dfcrp_marginal_logprob_exact(labels, 1.5, families)
            perm = rng.permutation(len(labels))
            labels2 = tuple(labels[p] for p in perm)
            families2 = tuple(families[p] for p in perm)
            moved = dfcrp_marginal_logprob_exact(labels2, 1.5, families2)
            assert moved == pytest.approx(base, abs=1e-12)


class _OrderStub:
    """Feeds a fixed sequence of allocation orders to the MC estimator."""

    def __init__(self, orders):
        self._orders = iter(orders)

    def permutation(self, n):
        return np.array(next(self._orders))


class TestMonteCarloMarginal:
    def test_within_three_standard_errors(self):
        families = (1, 1, 2)
        labels = (0, 1, 2)
        exact = math.exp(dfcrp_marginal_logprob_exact(labels, 1.0, families))
        num = 100_000
        rng = np.random.default_rng(3)
        est = math.exp(dfcrp_marginal_logprob_mc(labels, 1.0, families, num, rng))
        # order-wise values are 1/3 (x2) and 1/4 (x4): known sampling variance
        var = (2 * (1 / 3) ** 2 + 4 * (1 / 4) ** 2) / 6 - exact**2
        assert abs(est - exact) < 3 * math.sqrt(var / num)

    def test_full_support_average_is_exact(self):
        families = (1, 1, 2)
        labels = (0, 1, 2)
        orders = list(itertools.permutations(range(3)))
        est = dfcrp_marginal_logprob_mc(
            labels, 1.0, families, len(orders), _OrderStub(orders)
        )
        exact = dfcrp_marginal_logprob_exact(labels, 1.0, families)
        assert est == pytest.approx(exact, abs=1e-12)

    def test_invalid_partition(self):
        rng = np.random.default_rng(0)
        assert dfcrp_marginal_logprob_mc((0, 0), 1.0, (1, 1), 10, rng) == NEG_INF

    def test_metropolis_variant_runs(self):
        rng = np.random.default_rng(5)
        lp = dfcrp_marginal_logprob_mc(
            (0, 1, 2, 0), 1.0, (0, 0, 1, 1), 2000, rng, method="metropolis"
        )
        assert math.isfinite(lp)
        with pytest.raises(ValueError):
            dfcrp_marginal_logprob_mc((0, 1), 1.0, (0, 1), 10, rng, method="nope")
        with pytest.raises(ValueError):
            dfcrp_marginal_logprob_mc((0, 1), 1.0, (0, 1), 0, rng)


class TestEnumeration:
    def test_three_items(self):
        parts = enumerate_valid_partitions((1, 1, 2))
        assert parts == [(0, 1, 0), (0, 1, 1), (0, 1, 2)]

    def test_single_family(self):
        assert enumerate_valid_partitions((3, 3, 3, 3)) == [(0, 1, 2, 3)]

    def test_all_valid_unique_canonical(self):
        families = (0, 0, 1, 1, 2)
        parts = enumerate_valid_partitions(families)
        assert len(parts) == len(set(parts))
        for labels in parts:
            assert is_valid_partition(labels, families)
            assert canonical_labels(labels) == labels

    def test_counts_match_filtered_bell(self):
        # filtering all set partitions must give the same collection
        families = (0, 1, 0, 2)
        n = len(families)
        seen = set()
        for labels in itertools.product(range(n), repeat=n):
            canon = canonical_labels(labels)
            if is_valid_partition(canon, families):
                seen.add(canon)
        assert seen == set(enumerate_valid_partitions(families))

    def test_cap(self):
        with pytest.raises(ValueError):
            enumerate_valid_partitions(tuple(range(12)))

    def test_cluster_size_and_count_bounds(self):
        families = (0, 0, 0, 1, 1, 2)
        n = len(families)
        largest_family = max(family_sizes(families).values())
        num_families = len(set(families))
        for labels in enumerate_valid_partitions(families):
            sizes = Counter(labels)
            assert largest_family <= len(sizes) <= n
            assert max(sizes.values()) <= num_families


class TestPriorSampling:
    def test_single_family_always_singletons(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            assert sample_prior_partition(2.0, (5, 5, 5), rng) == (0, 1, 2)

    def test_always_valid(self):
        rng = np.random.default_rng(2)
        families = (0, 0, 1, 1, 2, 2)
        for _ in range(300):
            labels = sample_prior_partition(0.7, families, rng)
            assert is_valid_partition(labels, families)

    def test_frequencies_match_exact_marginals(self):
        families = (1, 1, 2)
        parts = enumerate_valid_partitions(families)
        probs = {
            c: math.exp(dfcrp_marginal_logprob_exact(c, 1.0, families)) for c in parts
        }
        rng = np.random.default_rng(17)
        num = 200_000
        hits = Counter(sample_prior_partition(1.0, families, rng) for _ in range(num))
        assert set(hits) <= set(parts)
        for c in parts:
            p = probs[c]
            se = math.sqrt(p * (1 - p) / num)
            assert abs(hits[c] / num - p) < 3 * se


# ---------------------------------------------------------------------------
# property tests

families_strategy = st.lists(st.integers(0, 3), min_size=1, max_size=6).map(tuple)


@settings(max_examples=40, deadline=None)
@given(families=families_strategy, alpha=st.sampled_from([0.5, 1.0, 5.0]))
def test_property_normalization(families, alpha):
    total = math.fsum(
        math.exp(dfcrp_marginal_logprob_exact(c, alpha, families))
        for c in enumerate_valid_partitions(families)
    )
    assert abs(total - 1.0) < 1e-10


@settings(max_examples=30, deadline=None)
@given(
    families=st.lists(st.integers(0, 2), min_size=2, max_size=5).map(tuple),
    alpha=st.sampled_from([0.5, 1.0, 5.0]),
    data=st.data(),
)
def test_property_order_invariance(families, alpha, data):
    parts = enumerate_valid_partitions(families)
    labels = parts[data.draw(st.integers(0, len(parts) - 1))]
    n = len(families)
    perm = data.draw(st.permutations(range(n)))
    base = dfcrp_marginal_logprob_exact(labels, alpha, families)
    moved = dfcrp_marginal_logprob_exact(
        tuple(labels[p] for p in perm), alpha, tuple(families[p] for p in perm)
    )
    assert abs(base - moved) < 1e-12


@settings(max_examples=50, deadline=None)
@given(
    labels=st.lists(st.integers(0, 3), min_size=2, max_size=5),
    families=st.lists(st.integers(0, 2), min_size=5, max_size=5),
    data=st.data(),
)
def test_property_constraint_soundness(labels, families, data):
    labels = tuple(labels)
    families = tuple(families[: len(labels)])
    order = tuple(data.draw(st.permutations(range(len(labels)))))
    lp = dfcrp_joint_logprob(labels, 1.0, families, order)
    valid = is_valid_partition(labels, families)
    assert (lp == NEG_INF) == (not valid)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=6))
def test_property_step_rule_reduces_to_crp_for_distinct_families(totals):
    # tables all hold distinct families; arriving item from yet another family
    table_fams = tuple({i: 1} for i in range(len(totals)))
    counts = SeatingCounts(tuple(t + 1 for t in totals), table_fams)
    crp = crp_step_probs(counts.totals, 2.0)
    dfc = dfcrp_step_probs(counts, 999, 2.0)
    np.testing.assert_allclose(dfc, crp, atol=1e-15)
