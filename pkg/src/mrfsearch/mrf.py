"""Pairwise Markov random fields with learnable log-scale factor tables.

A PairwiseMrf holds variables with finite label sets plus unary and pairwise
factor tables (natural-log scale). It induces an unnormalized distribution
P(a) proportional to exp(score(a)). Sampling comes in two flavours: exact
Gibbs sweeps (discrete, Gumbel-argmax conditionals) and a relaxed
Gumbel-Softmax sweep whose per-variable simplex output is differentiable
with respect to every factor entry.
"""

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .engine import Tensor

FACTOR_CLAMP = 30.0  # keeps exp(score) finite after updates
BRUTE_FORCE_LIMIT = 10 ** 6


class InvalidAssignmentError(ValueError):
    pass


class CapacityError(RuntimeError):
    pass


@dataclass
class MrfVariable:
    id: int
    cardinality: int
    label_names: list = None

    def __post_init__(self):
        if self.cardinality < 1:
            raise ValueError("cardinality must be >= 1")
        if self.label_names is None:
            self.label_names = [str(i) for i in range(self.cardinality)]
        if len(self.label_names) != self.cardinality:
            raise ValueError("label_names length must equal cardinality")


@dataclass
class FactorTable:
    scope: tuple  # 1 or 2 variable ids
    values: np.ndarray  # shape matches scope cardinalities, log scale

    def __post_init__(self):
        self.scope = tuple(self.scope)
        if len(self.scope) not in (1, 2):
            raise ValueError("factor scope must have 1 or 2 variables")
        if len(set(self.scope)) != len(self.scope):
            raise ValueError("factor scope ids must be distinct")
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("factor values must be finite")


@dataclass
class Assignment:
    labels: list

    def __post_init__(self):
        self.labels = list(int(x) for x in self.labels)


@dataclass
class RelaxedAssignment:
    """Per-variable probability simplexes with gradient links to factors.

    `simplex[i]` is a Tensor of shape (cardinality_i,). `factor_leaves[j]`
    is the Tensor wrapping factor j's table; after backpropagating a scalar
    built from the simplexes, `factor_grads()` returns the per-table
    gradients in the mrf's factor order.
    """
    simplex: list
    factor_leaves: list = field(repr=False)

    def harden(self):
        return Assignment([int(np.argmax(s.data)) for s in self.simplex])

    def factor_grads(self):
        return [np.zeros(l.data.shape) if l.grad is None else l.grad.copy()
                for l in self.factor_leaves]


class PairwiseMrf:
    def __init__(self, variables, factors):
        self.variables = list(variables)
        for i, v in enumerate(self.variables):
            if v.id != i:
                raise ValueError("variable ids must be dense 0..n-1 in order")
        self.factors = list(factors)
        seen = set()
        for f in self.factors:
            key = tuple(sorted(f.scope))
            if key in seen:
                raise ValueError(f"duplicate factor scope {f.scope}")
            seen.add(key)
            for vid in f.scope:
                if not 0 <= vid < len(self.variables):
                    raise ValueError(f"factor scope references unknown variable {vid}")
            expect = tuple(self.variables[vid].cardinality for vid in f.scope)
            if f.values.shape != expect:
                raise ValueError(
                    f"factor table shape {f.values.shape} != {expect} for scope {f.scope}")
        # adjacency: var id -> list of (factor index, position of var in scope)
        self._incident = [[] for _ in self.variables]
        for j, f in enumerate(self.factors):
            for pos, vid in enumerate(f.scope):
                self._incident[vid].append((j, pos))

    @property
    def num_variables(self):
        return len(self.variables)

    def cardinalities(self):
        return [v.cardinality for v in self.variables]

    def num_configurations(self):
        return math.prod(self.cardinalities())

    def unary(self, vid):
        """The unary table for vid, or None."""
        for j, pos in self._incident[vid]:
            if len(self.factors[j].scope) == 1:
                return self.factors[j]
        return None

    def copy(self):
        return PairwiseMrf(
            [MrfVariable(v.id, v.cardinality, list(v.label_names))
             for v in self.variables],
            [FactorTable(f.scope, f.values.copy()) for f in self.factors])

    def validate_assignment(self, a):
        if len(a.labels) != self.num_variables:
            raise InvalidAssignmentError(
                f"assignment length {len(a.labels)} != {self.num_variables}")
        for v, lab in zip(self.variables, a.labels):
            if not 0 <= lab < v.cardinality:
                raise InvalidAssignmentError(
                    f"label {lab} out of range for variable {v.id}")

    # ---- serialization ----------------------------------------------------

    def to_json(self):
        return json.dumps({
            "variables": [{"id": v.id, "cardinality": v.cardinality,
                           "labels": v.label_names} for v in self.variables],
            "factors": [{"scope": list(f.scope),
                         "values": f.values.ravel().tolist()}
                        for f in self.factors],
        })

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        variables = [MrfVariable(d["id"], d["cardinality"], d["labels"])
                     for d in doc["variables"]]
        card = {v.id: v.cardinality for v in variables}
        factors = []
        for d in doc["factors"]:
            shape = tuple(card[vid] for vid in d["scope"])
            factors.append(FactorTable(tuple(d["scope"]),
                                       np.array(d["values"]).reshape(shape)))
        return cls(variables, factors)


def score(mrf, a):
    """Sum of factor entries selected by assignment `a` (log scale)."""
    mrf.validate_assignment(a)
    total = 0.0
    for f in mrf.factors:
        idx = tuple(a.labels[vid] for vid in f.scope)
        total += float(f.values[idx])
    return total


def _check_capacity(mrf, limit=BRUTE_FORCE_LIMIT):
    if mrf.num_configurations() > limit:
        raise CapacityError(
            f"{mrf.num_configurations()} configurations exceed limit {limit}")


def all_assignments(mrf):
    """Lexicographic enumeration of every assignment."""
    for labels in itertools.product(*(range(c) for c in mrf.cardinalities())):
        yield Assignment(list(labels))


def log_partition_brute_force(mrf):
    """log Z by exhaustive enumeration, max-shifted for stability."""
    _check_capacity(mrf)
    scores = np.array([score(mrf, a) for a in all_assignments(mrf)])
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()))


def _conditional_logits(mrf, labels, vid):
    card = mrf.variables[vid].cardinality
    logits = np.zeros(card)
    for j, pos in mrf._incident[vid]:
        f = mrf.factors[j]
        if len(f.scope) == 1:
            logits += f.values
        elif pos == 0:
            logits += f.values[:, labels[f.scope[1]]]
        else:
            logits += f.values[labels[f.scope[0]], :]
    return logits


def gibbs_sample(mrf, init, sweeps, rng_seed):
    """Systematic-scan Gibbs sampling; returns the assignment after `sweeps`.

    Each conditional draw uses the Gumbel-argmax trick so that the noise
    stream lines up with gumbel_relaxed_sample at low temperature.
    """
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    mrf.validate_assignment(init)
    rng = np.random.default_rng(rng_seed)
    labels = list(init.labels)
    for _ in range(sweeps):
        for vid in range(mrf.num_variables):
            logits = _conditional_logits(mrf, labels, vid)
            g = rng.gumbel(size=logits.shape)
            labels[vid] = int(np.argmax(logits + g))
    return Assignment(labels)


def gumbel_relaxed_sample(mrf, temperature, sweeps, rng_seed):
    """Relaxed Gibbs sweep with Gumbel-Softmax conditionals.

    Neighbor contributions are expected pairwise scores under the neighbor's
    current simplex, so the whole sweep stays differentiable end-to-end.
    Simplexes start one-hot at label 0, matching gibbs_sample's init
    convention for the all-zeros assignment.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if sweeps < 1:
        raise ValueError("sweeps must be >= 1")
    rng = np.random.default_rng(rng_seed)
    leaves = [Tensor(f.values, requires_grad=True) for f in mrf.factors]
    simplex = []
    for v in mrf.variables:
        one_hot = np.zeros(v.cardinality)
        one_hot[0] = 1.0
        simplex.append(Tensor(one_hot))
    for _ in range(sweeps):
        for vid in range(mrf.num_variables):
            card = mrf.variables[vid].cardinality
            logits = Tensor(np.zeros(card))
            for j, pos in mrf._incident[vid]:
                leaf = leaves[j]
                scope = mrf.factors[j].scope
                if len(scope) == 1:
                    logits = logits + leaf
                elif pos == 0:
                    logits = logits + engine.matvec(leaf, simplex[scope[1]])
                else:
                    logits = logits + engine.matvec(_transpose2d(leaf),
                                                    simplex[scope[0]])
            g = Tensor(rng.gumbel(size=card))
            simplex[vid] = engine.softmax((logits + g) * (1.0 / temperature))
    return RelaxedAssignment(simplex=simplex, factor_leaves=leaves)


def _transpose2d(t):
    def bw(g):
        t._accum(g.T)
    return Tensor(t.data.T, _parents=(t,), _backward=bw)


def update_factors(mrf, gradients, lr):
    """In-place descent step on every factor table, then clamp."""
    if len(gradients) != len(mrf.factors):
        raise ValueError("gradient count does not match factor count")
    for f, g in zip(mrf.factors, gradients):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != f.values.shape:
            raise ValueError(f"gradient shape {g.shape} != {f.values.shape}")
        f.values -= lr * g
        np.clip(f.values, -FACTOR_CLAMP, FACTOR_CLAMP, out=f.values)
