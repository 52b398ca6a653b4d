import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pwcmoe import scheduler as sched
from pwcmoe.rng import RngStream

MASK = [0, 1, 0, 0, 1, 0]  # non-sensitive indices: 0, 2, 3, 5


class TestDecision:
    def test_over_budget_rejected(self):
        with pytest.raises(ValueError, match="exceeds budget"):
            sched.OffloadDecision(selected=[0, 1], dropped=[], budget=1, strategy="x")

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="overlap"):
            sched.OffloadDecision(selected=[0], dropped=[0], budget=2, strategy="x")

    def test_indices_sorted(self):
        d = sched.OffloadDecision(selected=[3, 1], dropped=[2, 0], budget=4, strategy="x")
        assert d.selected == [1, 3]
        assert d.dropped == [0, 2]


class TestSelectAll:
    def test_takes_every_nonsensitive_token(self):
        d = sched.select_all(MASK)
        assert d.selected == [0, 2, 3, 5]
        assert d.dropped == []
        assert d.budget == 4


class TestSelectTopk:
    def test_hand_ranking(self):
        scores = [0.1, 9.0, 0.5, 0.9, 9.0, 0.3]
        d = sched.select_topk(scores, MASK, budget=2)
        assert d.selected == [2, 3]
        assert d.dropped == [0, 5]

    def test_sensitive_never_selected(self):
        scores = [0.0, 100.0, 0.0, 0.0, 100.0, 0.0]
        d = sched.select_topk(scores, MASK, budget=6)
        assert 1 not in d.selected and 4 not in d.selected

    def test_tie_breaks_toward_lower_index(self):
        d = sched.select_topk([1.0] * 6, MASK, budget=2)
        assert d.selected == [0, 2]

    def test_budget_exceeds_candidates(self):
        d = sched.select_topk([0.5] * 6, MASK, budget=10)
        assert d.selected == [0, 2, 3, 5]

    def test_zero_budget(self):
        d = sched.select_topk([0.5] * 6, MASK, budget=0)
        assert d.selected == []
        assert d.dropped == [0, 2, 3, 5]

    def test_negative_budget_rejected(self):
        with pytest.raises(ValueError):
            sched.select_topk([0.5] * 6, MASK, budget=-1)

    @given(st.lists(st.floats(-10, 10), min_size=6, max_size=6),
           st.integers(0, 6))
    @settings(max_examples=100, deadline=None)
    def test_selected_dominate_dropped(self, scores, budget):
        d = sched.select_topk(scores, MASK, budget)
        if d.selected and d.dropped:
            assert min(scores[i] for i in d.selected) >= \
                max(scores[i] for i in d.dropped)


class TestSelectRandom:
    def test_partition_and_budget(self):
        d = sched.select_random(MASK, 2, RngStream(0, "r"))
        assert len(d.selected) == 2
        assert sorted(d.selected + d.dropped) == [0, 2, 3, 5]

    def test_reproducible(self):
        a = sched.select_random(MASK, 2, RngStream(3, "r"))
        b = sched.select_random(MASK, 2, RngStream(3, "r"))
        assert a.selected == b.selected

    def test_covers_all_candidates_over_draws(self):
        seen = set()
        for t in range(200):
            seen.update(sched.select_random(MASK, 1, RngStream(t, "r")).selected)
        assert seen == {0, 2, 3, 5}

    def test_zero_budget(self):
        d = sched.select_random(MASK, 0, RngStream(0, "r"))
        assert d.selected == []


class TestOracle:
    def test_recovers_planted_optimum(self):
        target = (2, 5)

        def conf(subset):
            return 1.0 if subset == target else 0.1 * len(subset)

        decision, best = sched.brute_force_oracle(conf, MASK, budget=2)
        assert tuple(decision.selected) == target
        assert best == 1.0

    def test_additive_confidence_matches_topk(self):
        scores = np.array([0.4, 0.0, 0.9, 0.2, 0.0, 0.7])

        def conf(subset):
            return float(sum(scores[list(subset)]))

        decision, _ = sched.brute_force_oracle(conf, MASK, budget=2)
        assert decision.selected == sched.select_topk(scores, MASK, 2).selected

    def test_tie_keeps_first_enumerated(self):
        decision, best = sched.brute_force_oracle(lambda s: 0.5, MASK, budget=2)
        assert decision.selected == []
        assert best == 0.5

    def test_empty_subset_considered(self):
        decision, best = sched.brute_force_oracle(
            lambda s: 1.0 if not s else 0.0, MASK, budget=3)
        assert decision.selected == []
        assert best == 1.0

    def test_instance_size_bound(self):
        big_mask = [0] * (sched.ORACLE_MAX_TOKENS + 1)
        with pytest.raises(ValueError, match="too large"):
            sched.brute_force_oracle(lambda s: 0.0, big_mask, budget=1)

    def test_oracle_at_least_as_good_as_any_strategy(self):
        rng = np.random.default_rng(11)
        scores = rng.uniform(0, 1, 6)

        def conf(subset):
            return float(sum(scores[list(subset)]) ** 0.5)

        _, best = sched.brute_force_oracle(conf, MASK, budget=2)
        topk = sched.select_topk(scores, MASK, 2)
        assert best >= conf(tuple(topk.selected)) - 1e-12
        for t in range(20):
            rnd = sched.select_random(MASK, 2, RngStream(t, "r"))
            assert best >= conf(tuple(rnd.selected)) - 1e-12
