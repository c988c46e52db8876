"""MAP inference over pairwise MRFs: exact enumeration, damped loopy
max-product message passing, and greedy diverse M-best extraction."""

import json
from dataclasses import dataclass

import numpy as np

from .mrf import (Assignment, CapacityError, FactorTable, PairwiseMrf,
                  _check_capacity, all_assignments, score)

CONVERGENCE_TOL = 1e-9


@dataclass
class InferenceResult:
    assignment: Assignment
    score: float
    converged: bool
    iterations_used: int


@dataclass
class DiverseSolutionSet:
    solutions: list  # of InferenceResult
    min_pairwise_hamming: int

    def to_json(self):
        out = []
        prev = None
        for r in self.solutions:
            ham = (None if prev is None
                   else hamming(prev.assignment, r.assignment))
            out.append({"labels": r.assignment.labels, "score": r.score,
                        "hamming_to_previous": ham})
            prev = r
        return json.dumps(out)


def hamming(a, b):
    return sum(1 for x, y in zip(a.labels, b.labels) if x != y)


def map_brute_force(mrf):
    """Exhaustive MAP; ties broken by lexicographically smallest assignment."""
    _check_capacity(mrf)
    best, best_score = None, -np.inf
    count = 0
    for a in all_assignments(mrf):
        count += 1
        s = score(mrf, a)
        if s > best_score:  # strict: keeps the lexicographically first
            best, best_score = a, s
    return InferenceResult(assignment=best, score=best_score,
                           converged=True, iterations_used=count)


def map_loopy(mrf, max_iters=200, damping=0.5):
    """Damped synchronous max-product in the log domain.

    Messages are normalized (max-shifted) each round; decode takes the
    per-variable max-belief with lowest-label tie-break (argmax is first-max).
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if not 0 <= damping < 1:
        raise ValueError("damping must be in [0, 1)")
    cards = mrf.cardinalities()
    unary = [np.zeros(c) for c in cards]
    edges = []  # (u, v, table) with table indexed [label_u, label_v]
    for f in mrf.factors:
        if len(f.scope) == 1:
            unary[f.scope[0]] = unary[f.scope[0]] + f.values
        else:
            edges.append((f.scope[0], f.scope[1], f.values))
    # directed messages m[(u, v)] over labels of v
    msgs = {}
    for u, v, _ in edges:
        msgs[(u, v)] = np.zeros(cards[v])
        msgs[(v, u)] = np.zeros(cards[u])
    neighbors = {i: [] for i in range(mrf.num_variables)}
    for u, v, tab in edges:
        neighbors[u].append((v, tab, False))   # tab[u_label, v_label]
        neighbors[v].append((u, tab.T, False))

    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        new = {}
        delta = 0.0
        for u, v, tab in edges:
            for src, dst, t in ((u, v, tab), (v, u, tab.T)):
                incoming = unary[src].copy()
                for w, _, _ in neighbors[src]:
                    if w != dst:
                        incoming += msgs[(w, src)]
                m = np.max(t + incoming[:, None], axis=0)
                m -= m.max()
                m = damping * msgs[(src, dst)] + (1 - damping) * m
                delta = max(delta, np.abs(m - msgs[(src, dst)]).max())
                new[(src, dst)] = m
        msgs = new
        if delta < CONVERGENCE_TOL:
            converged = True
            break

    labels = []
    for i in range(mrf.num_variables):
        belief = unary[i].copy()
        for w, _, _ in neighbors[i]:
            belief += msgs[(w, i)]
        labels.append(int(np.argmax(belief)))
    a = Assignment(labels)
    return InferenceResult(assignment=a, score=score(mrf, a),
                           converged=converged, iterations_used=it)


def _augment_unaries(mrf, chosen, weight):
    """Subtract `weight` from unary entries matching any chosen assignment."""
    aug = mrf.copy()
    have_unary = {f.scope[0] for f in aug.factors if len(f.scope) == 1}
    for vid in range(aug.num_variables):
        if vid not in have_unary:
            aug.factors.append(
                FactorTable((vid,), np.zeros(aug.variables[vid].cardinality)))
            aug._incident[vid].append((len(aug.factors) - 1, 0))
    for f in aug.factors:
        if len(f.scope) == 1:
            vid = f.scope[0]
            for prev in chosen:
                f.values[prev.labels[vid]] -= weight
    return aug


def diverse_m_best(mrf, m, diversity_weight=1.0, exact=True,
                   max_iters=200, damping=0.5):
    """Greedy sequential diverse M-best.

    Round 1 is plain MAP; round k maximizes score(a) minus
    diversity_weight times the total label agreement with earlier picks,
    folded into augmented unaries.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if diversity_weight < 0:
        raise ValueError("diversity_weight must be >= 0")
    if m > mrf.num_configurations():
        raise CapacityError(f"m={m} exceeds {mrf.num_configurations()} configurations")
    results = []
    chosen = []
    for _ in range(m):
        aug = _augment_unaries(mrf, chosen, diversity_weight)
        r = map_brute_force(aug) if exact else map_loopy(aug, max_iters, damping)
        a = r.assignment
        results.append(InferenceResult(assignment=a, score=score(mrf, a),
                                       converged=r.converged,
                                       iterations_used=r.iterations_used))
        chosen.append(a)
    min_ham = 0
    if m > 1:
        min_ham = min(hamming(chosen[i], chosen[j])
                      for i in range(m) for j in range(i + 1, m))
    return DiverseSolutionSet(solutions=results, min_pairwise_hamming=min_ham)
