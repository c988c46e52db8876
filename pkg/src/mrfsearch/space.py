"""U-Net-style slimmable search space, its MRF encoding, and FLOPs/params
accounting for budget-constrained subnet selection.

Per-node choices: normal convs pick kernel in {3,5}, downsampling is a
stride-2 3x3 conv, upsampling a stride-2 2x2 transposed conv; every node
additionally picks a width ratio in {0.5, 0.75, 1.0, 1.25, 1.5} applied to
its base output channel count (rounded up). FLOPs are multiply-accumulate
counts (1 MAC = 1 FLOP) at a stated input resolution.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .mrf import FactorTable, MrfVariable, PairwiseMrf

WIDTH_RATIOS = (0.5, 0.75, 1.0, 1.25, 1.5)
KERNELS = {"normal": (3, 5), "downsample": (3,), "upsample": (2,)}
MAX_WIDTH = WIDTH_RATIOS[-1]


@dataclass(frozen=True)
class OpChoice:
    kind: str
    kernel: int
    width_ratio: float

    def __post_init__(self):
        if self.kernel not in KERNELS[self.kind]:
            raise ValueError(f"kernel {self.kernel} invalid for kind {self.kind}")
        if self.width_ratio not in WIDTH_RATIOS:
            raise ValueError(f"width ratio {self.width_ratio} not in {WIDTH_RATIOS}")


def choice_set(kind):
    """Label order: kernel-major, then width. Label 0 of a normal node is
    (kernel 3, width 0.5)."""
    return [OpChoice(kind, k, w) for k in KERNELS[kind] for w in WIDTH_RATIOS]


@dataclass
class SearchNode:
    name: str
    kind: str
    base_out: int  # output channels before width scaling
    skip_from: str = None  # name of encoder node concatenated at input


@dataclass
class SupernetSpec:
    encoder_depth: int
    base_channels: int
    in_channels: int
    num_classes: int
    nodes: list = field(default_factory=list)  # of SearchNode, processing order
    edges: list = field(default_factory=list)  # (node index, node index) pairs

    @classmethod
    def unet(cls, encoder_depth=2, base_channels=8, in_channels=3,
             num_classes=5):
        """Mirror-symmetric encoder/decoder with one skip per level.

        Processing order: [enc_l, down_l]*depth, mid, then
        [up_l, dec_l] from the deepest level back up.
        """
        if encoder_depth < 1:
            raise ValueError("encoder_depth must be >= 1")
        b = base_channels
        nodes = []
        for l in range(encoder_depth):
            nodes.append(SearchNode(f"enc{l}", "normal", b * 2 ** l))
            nodes.append(SearchNode(f"down{l}", "downsample", b * 2 ** (l + 1)))
        nodes.append(SearchNode("mid", "normal", b * 2 ** encoder_depth))
        for l in reversed(range(encoder_depth)):
            nodes.append(SearchNode(f"up{l}", "upsample", b * 2 ** l))
            nodes.append(SearchNode(f"dec{l}", "normal", b * 2 ** l,
                                    skip_from=f"enc{l}"))
        index = {n.name: i for i, n in enumerate(nodes)}
        edges = [(i, i + 1) for i in range(len(nodes) - 1)]  # processing chain
        for l in range(encoder_depth):  # skip-connected pairs
            edges.append((index[f"enc{l}"], index[f"dec{l}"]))
        return cls(encoder_depth=encoder_depth, base_channels=base_channels,
                   in_channels=in_channels, num_classes=num_classes,
                   nodes=nodes, edges=edges)

    def node_index(self, name):
        for i, n in enumerate(self.nodes):
            if n.name == name:
                return i
        raise KeyError(name)

    def to_json(self):
        return json.dumps({
            "encoder_depth": self.encoder_depth,
            "base_channels": self.base_channels,
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "nodes": [{"name": n.name, "kind": n.kind, "base_out": n.base_out,
                       "skip_from": n.skip_from} for n in self.nodes],
            "edges": [list(e) for e in self.edges],
        })

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(encoder_depth=d["encoder_depth"],
                   base_channels=d["base_channels"],
                   in_channels=d["in_channels"],
                   num_classes=d["num_classes"],
                   nodes=[SearchNode(**n) for n in d["nodes"]],
                   edges=[tuple(e) for e in d["edges"]])


@dataclass
class ArchAssignment:
    choices: list  # one OpChoice per node, processing order

    def to_json(self):
        return json.dumps([{"kind": c.kind, "kernel": c.kernel,
                            "width_ratio": c.width_ratio} for c in self.choices])

    @classmethod
    def from_json(cls, text):
        return cls([OpChoice(**d) for d in json.loads(text)])


@dataclass
class ResourceCost:
    flops: int  # MACs at the stated input resolution
    params: int


def scaled(ratio, base):
    return math.ceil(ratio * base)


def build_search_mrf(spec):
    """One variable per node, zero unaries everywhere, zero pairwise tables
    on the spec's edge list (processing chain + skip pairs)."""
    variables, factors = [], []
    for i, node in enumerate(spec.nodes):
        labels = [f"{node.kind}-k{c.kernel}-w{c.width_ratio}"
                  for c in choice_set(node.kind)]
        variables.append(MrfVariable(i, len(labels), labels))
        factors.append(FactorTable((i,), np.zeros(len(labels))))
    for u, v in spec.edges:
        factors.append(FactorTable(
            (u, v), np.zeros((variables[u].cardinality,
                              variables[v].cardinality))))
    return PairwiseMrf(variables, factors)


def decode(spec, assignment):
    choices = []
    for node, lab in zip(spec.nodes, assignment.labels):
        cs = choice_set(node.kind)
        if not 0 <= lab < len(cs):
            raise ValueError(f"label {lab} out of range for node {node.name}")
        choices.append(cs[lab])
    return ArchAssignment(choices)


def encode(spec, arch):
    from .mrf import Assignment
    labels = []
    for node, choice in zip(spec.nodes, arch.choices):
        labels.append(choice_set(node.kind).index(choice))
    return Assignment(labels)


def layer_plan(spec, arch, max_width=False):
    """Per-node (cin, cout, kernel) walk of the decoded network, head last.

    With max_width=True every node is planned at the widest ratio (the
    supernet's storage layout). Decoder inputs are (skip block, up block),
    each sized per this plan.
    """
    outs = {}
    plan = []
    prev_out = spec.in_channels
    for node, choice in zip(spec.nodes, arch.choices):
        ratio = MAX_WIDTH if max_width else choice.width_ratio
        cout = scaled(ratio, node.base_out)
        if node.skip_from is not None:
            cin = outs[node.skip_from] + prev_out
        else:
            cin = prev_out
        plan.append((cin, cout, choice.kernel))
        outs[node.name] = cout
        prev_out = cout
    plan.append((prev_out, spec.num_classes, 1))  # fixed 1x1 classifier head
    return plan


def resource_cost(spec, arch, input_hw):
    h, w = input_hw
    if h % 2 ** spec.encoder_depth or w % 2 ** spec.encoder_depth:
        raise ValueError(f"resolution {input_hw} not divisible by "
                         f"2^{spec.encoder_depth}")
    plan = layer_plan(spec, arch)
    flops = 0
    params = 0
    kinds = [n.kind for n in spec.nodes] + ["head"]
    for (cin, cout, k), kind in zip(plan, kinds):
        if kind == "downsample":
            h, w = h // 2, w // 2
        elif kind == "upsample":
            h, w = h * 2, w * 2
        flops += conv_macs(k, cin, cout, h, w)
        params += conv_params(k, cin, cout)
    return ResourceCost(flops=flops, params=params)


def conv_macs(k, cin, cout, h_out, w_out):
    return k * k * cin * cout * h_out * w_out


def conv_params(k, cin, cout):
    return k * k * cin * cout + cout


def budget_filter(candidates, spec, budget_flops, input_hw):
    """Keep candidates (in order) whose MAC count fits the budget."""
    kept = []
    for result in candidates.solutions:
        arch = decode(spec, result.assignment)
        if resource_cost(spec, arch, input_hw).flops <= budget_flops:
            kept.append(arch)
    return kept


def count_configurations(spec):
    total = 1
    for node in spec.nodes:
        total *= len(choice_set(node.kind))
    return total


_SI = {"K": 1e3, "M": 1e6, "G": 1e9, "T": 1e12}


def parse_flops(text):
    """'2.5G' -> 2.5e9; bare numbers pass through."""
    text = str(text).strip()
    if text and text[-1].upper() in _SI:
        return float(text[:-1]) * _SI[text[-1].upper()]
    return float(text)


def format_si(value):
    for suffix, scale in (("T", 1e12), ("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if value >= scale:
            return f"{value / scale:.2f}{suffix}"
    return f"{value:.0f}"
