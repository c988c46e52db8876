import itertools

import numpy as np
import pytest

from mrfsearch.inference import (DiverseSolutionSet, diverse_m_best, hamming,
                                 map_brute_force, map_loopy)
from mrfsearch.mrf import (Assignment, CapacityError, FactorTable,
                           MrfVariable, PairwiseMrf, all_assignments, score)


def single_var(values):
    values = np.asarray(values, dtype=float)
    return PairwiseMrf([MrfVariable(0, len(values))],
                       [FactorTable((0,), values)])


def random_tree(rng, n, max_card):
    cards = [int(rng.integers(2, max_card + 1)) for _ in range(n)]
    vs = [MrfVariable(i, c) for i, c in enumerate(cards)]
    fs = [FactorTable((i,), rng.normal(size=cards[i])) for i in range(n)]
    for v in range(1, n):
        u = int(rng.integers(v))
        fs.append(FactorTable((u, v), rng.normal(size=(cards[u], cards[v]))))
    return PairwiseMrf(vs, fs)


def random_loopy(rng, n=4, max_card=3, unary_scale=3.0, pair_scale=0.1):
    cards = [int(rng.integers(2, max_card + 1)) for _ in range(n)]
    vs = [MrfVariable(i, c) for i, c in enumerate(cards)]
    fs = [FactorTable((i,), unary_scale * rng.normal(size=cards[i]))
          for i in range(n)]
    for u, v in [(i, (i + 1) % n) for i in range(n)]:
        u, v = min(u, v), max(u, v)
        fs.append(FactorTable((u, v),
                              pair_scale * rng.uniform(-1, 1,
                                                       size=(cards[u], cards[v]))))
    return PairwiseMrf(vs, fs)


class TestMapBruteForce:
    def test_unary_argmax(self):
        r = map_brute_force(single_var([3.0, 1.0, 2.0]))
        assert r.assignment.labels == [0] and r.score == 3.0

    def test_tie_break_lexicographic(self):
        m = PairwiseMrf([MrfVariable(0, 2), MrfVariable(1, 2)],
                        [FactorTable((0,), np.zeros(2)),
                         FactorTable((1,), np.zeros(2))])
        assert map_brute_force(m).assignment.labels == [0, 0]

    def test_matches_independent_enumeration(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            m = random_tree(rng, 4, 3)
            existing = {tuple(sorted(f.scope)) for f in m.factors}
            if (0, 3) not in existing:
                m.factors.append(FactorTable(
                    (0, 3), rng.normal(size=(m.variables[0].cardinality,
                                             m.variables[3].cardinality))))
                m = PairwiseMrf(m.variables, m.factors)
            best = max((score(m, Assignment(list(lab))), list(lab))
                       for lab in itertools.product(
                           *(range(v.cardinality) for v in m.variables)))
            r = map_brute_force(m)
            assert r.score == pytest.approx(best[0])

    def test_capacity_error(self):
        m = PairwiseMrf([MrfVariable(i, 10) for i in range(7)],
                        [FactorTable((i,), np.zeros(10)) for i in range(7)])
        with pytest.raises(CapacityError):
            map_brute_force(m)


class TestMapLoopy:
    def test_single_variable(self):
        r = map_loopy(single_var([1.0, 5.0, 2.0]))
        assert r.assignment.labels == [1] and r.converged

    def test_exact_on_100_random_trees(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            m = random_tree(rng, int(rng.integers(2, 9)), 4)
            assert map_loopy(m, 200, 0.5).score \
                == pytest.approx(map_brute_force(m).score)

    def test_weakly_coupled_cycles(self):
        rng = np.random.default_rng(2)
        agree = sum(
            map_loopy(m, 200, 0.5).score == pytest.approx(map_brute_force(m).score)
            for m in (random_loopy(rng) for _ in range(100)))
        assert agree >= 95

    def test_score_recomputed(self):
        m = random_tree(np.random.default_rng(3), 5, 3)
        r = map_loopy(m)
        assert r.score == pytest.approx(score(m, r.assignment))

    def test_invalid_params(self):
        m = single_var([0.0, 1.0])
        with pytest.raises(ValueError):
            map_loopy(m, max_iters=0)
        with pytest.raises(ValueError):
            map_loopy(m, damping=1.0)


def augmented_value(m, a, chosen, weight):
    overlap = sum(len(a.labels) - hamming(a, c) for c in chosen)
    return score(m, a) - weight * overlap


class TestDiverseMBest:
    def test_m1_is_map(self):
        m = single_var([3.0, 1.0, 2.0])
        s = diverse_m_best(m, 1)
        assert s.solutions[0].assignment.labels == [0]
        assert s.solutions[0].score == 3.0

    def test_augmented_unary_round_two(self):
        # round 2 optimizes unary (5-10, 4, 0) -> label 1
        s = diverse_m_best(single_var([5.0, 4.0, 0.0]), m=2,
                           diversity_weight=10.0)
        assert s.solutions[0].assignment.labels == [0]
        assert s.solutions[1].assignment.labels == [1]
        assert s.solutions[1].score == 4.0  # original objective, not augmented

    def test_every_round_optimal_by_enumeration(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            m = random_tree(rng, 3, 3)
            s = diverse_m_best(m, m=3, diversity_weight=1.0, exact=True)
            chosen = []
            for r in s.solutions:
                best = max(augmented_value(m, a, chosen, 1.0)
                           for a in all_assignments(m))
                assert augmented_value(m, r.assignment, chosen, 1.0) \
                    == pytest.approx(best)
                chosen.append(r.assignment)

    def test_distinct_when_weighted(self):
        # distinctness is guaranteed when every variable has at least m
        # labels and the weight exceeds the score range: each round can and
        # must avoid every previously used label at every position
        rng = np.random.default_rng(5)
        for _ in range(20):
            cards = [4] * 4
            vs = [MrfVariable(i, c) for i, c in enumerate(cards)]
            fs = [FactorTable((i,), rng.normal(size=c))
                  for i, c in enumerate(cards)]
            fs += [FactorTable((i, i + 1), rng.normal(size=(4, 4)))
                   for i in range(3)]
            m = PairwiseMrf(vs, fs)
            s = diverse_m_best(m, m=4, diversity_weight=1000.0)
            labels = [tuple(r.assignment.labels) for r in s.solutions]
            assert len(set(labels)) == 4
            assert s.min_pairwise_hamming == 4

    def test_monotone_diversity(self):
        # for m=2 the overlap with the first solution is non-increasing in
        # the diversity weight, so the pairwise hamming is non-decreasing
        rng = np.random.default_rng(6)
        for _ in range(20):
            m = random_tree(rng, 5, 3)
            hams = [diverse_m_best(m, m=2, diversity_weight=w).min_pairwise_hamming
                    for w in (0.0, 0.5, 1.0, 2.0, 5.0)]
            assert all(a <= b for a, b in zip(hams, hams[1:]))

    def test_m_exceeds_configurations(self):
        with pytest.raises(CapacityError):
            diverse_m_best(single_var([0.0, 1.0]), m=3)

    def test_loopy_inner_solver(self):
        m = random_tree(np.random.default_rng(7), 5, 3)
        s = diverse_m_best(m, m=3, diversity_weight=1.0, exact=False)
        exact = diverse_m_best(m, m=3, diversity_weight=1.0, exact=True)
        for a, b in zip(s.solutions, exact.solutions):
            assert a.assignment.labels == b.assignment.labels

    def test_json_serialization(self):
        import json
        m = random_tree(np.random.default_rng(8), 4, 3)
        s = diverse_m_best(m, m=3, diversity_weight=1.0)
        doc = json.loads(s.to_json())
        assert len(doc) == 3
        assert doc[0]["hamming_to_previous"] is None
        assert doc[1]["hamming_to_previous"] == hamming(
            s.solutions[0].assignment, s.solutions[1].assignment)
