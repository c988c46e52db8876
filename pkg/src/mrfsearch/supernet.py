"""Width/kernel-slimmable U-Net supernet on the minimal tensor engine.

All weights are stored once at the widest ratio and largest kernel; a
subnet choice reads the leading ceil(ratio*base) channels and the centered
k x k window of the stored kernel, so gradients from every sampled subnet
accumulate into the same storage. Decoder inputs are stored as
[skip block | previous block] and sliced per block.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .space import (KERNELS, MAX_WIDTH, WIDTH_RATIOS, OpChoice, choice_set,
                    layer_plan, scaled)


def _max_arch(spec):
    return [OpChoice(n.kind, max(KERNELS[n.kind]), MAX_WIDTH)
            for n in spec.nodes]


def _min_arch(spec):
    return [OpChoice(n.kind, min(KERNELS[n.kind]), WIDTH_RATIOS[0])
            for n in spec.nodes]


def random_arch(spec, rng):
    from .space import ArchAssignment
    return ArchAssignment([choice_set(n.kind)[rng.integers(len(choice_set(n.kind)))]
                           for n in spec.nodes])


def max_arch(spec):
    from .space import ArchAssignment
    return ArchAssignment(_max_arch(spec))


def min_arch(spec):
    from .space import ArchAssignment
    return ArchAssignment(_min_arch(spec))


class SupernetWeights:
    """Named weight storage at maximal width/kernel, plus slicing helpers."""

    def __init__(self, spec, seed=0, init=True):
        self.spec = spec
        self.tensors = {}
        rng = np.random.default_rng(seed)
        plan = layer_plan(spec, max_arch(spec), max_width=True)
        names = [n.name for n in spec.nodes] + ["head"]
        kinds = [n.kind for n in spec.nodes] + ["head"]
        for (cin, cout, k), name, kind in zip(plan, names, kinds):
            if kind == "upsample":
                shape = (cin, cout, k, k)  # transposed conv layout
                fan_in = cin
            else:
                shape = (cout, cin, k, k)
                fan_in = cin * k * k
            if init:
                data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            else:
                data = np.zeros(shape)
            self.tensors[f"{name}.w"] = Tensor(data, requires_grad=True)
            self.tensors[f"{name}.b"] = Tensor(np.zeros(cout),
                                               requires_grad=True)

    def params(self):
        return list(self.tensors.values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        other = SupernetWeights(self.spec, init=False)
        for name, t in self.tensors.items():
            other.tensors[name].data = t.data.copy()
        return other

    # block boundary for decoder input slicing
    def skip_block_size(self, node):
        src = next(n for n in self.spec.nodes if n.name == node.skip_from)
        return scaled(MAX_WIDTH, src.base_out)


@dataclass
class NetworkInstance:
    spec: object
    weights: SupernetWeights
    arch: object = None      # ArchAssignment for discrete evaluation
    relaxed: object = None   # RelaxedAssignment for search-time soft evaluation

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        n, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {c}")
        if h % 2 ** self.spec.encoder_depth or w % 2 ** self.spec.encoder_depth:
            raise ValueError(f"spatial dims {(h, w)} not divisible by "
                             f"2^{self.spec.encoder_depth}")
        if self.relaxed is not None:
            return _forward_relaxed(self.spec, self.weights, self.relaxed, x)
        if self.arch is None:
            raise ValueError("NetworkInstance needs an arch or a relaxed assignment")
        return _forward_discrete(self.spec, self.weights, self.arch, x)


def _sliced_conv_weight(w, choice, cout, cin_slices):
    """Leading-channel and center-crop slice of a stored conv weight."""
    k = choice.kernel
    off = (w.shape[2] - k) // 2
    parts = [w[:cout, lo:hi, off:off + k, off:off + k] for lo, hi in cin_slices]
    return parts[0] if len(parts) == 1 else engine.concat(parts, axis=1)


def _forward_discrete(spec, weights, arch, x):
    outs = {}
    cur = x
    cur_c = spec.in_channels
    for node, choice in zip(spec.nodes, arch.choices):
        w = weights.tensors[f"{node.name}.w"]
        b = weights.tensors[f"{node.name}.b"]
        cout = scaled(choice.width_ratio, node.base_out)
        if node.kind == "upsample":
            wsl = w[:cur_c, :cout]
            cur = engine.conv_transpose2d(cur, wsl, b[:cout], stride=2)
        else:
            if node.skip_from is not None:
                block = weights.skip_block_size(node)
                skip, skip_c = outs[node.skip_from]
                cin_slices = [(0, skip_c), (block, block + cur_c)]
                cur = engine.concat([skip, cur], axis=1)
            else:
                cin_slices = [(0, cur_c)]
            wsl = _sliced_conv_weight(w, choice, cout, cin_slices)
            stride = 2 if node.kind == "downsample" else 1
            cur = engine.conv2d(cur, wsl, b[:cout], stride=stride,
                                padding=choice.kernel // 2)
        cur = cur.relu()
        outs[node.name] = (cur, cout)
        cur_c = cout
    wh = weights.tensors["head.w"]
    bh = weights.tensors["head.b"]
    return engine.conv2d(cur, wh[:, :cur_c], bh, stride=1, padding=0)


def _width_mix_matrix(node, kernel):
    """Constant (max_out, n_labels) matrix M with M[c, l] = 1 when label l
    uses `kernel` and its width covers channel c; matvec with the node's
    simplex gives per-channel mixture weights for that kernel's branch."""
    cs = choice_set(node.kind)
    cmax = scaled(MAX_WIDTH, node.base_out)
    m = np.zeros((cmax, len(cs)))
    for l, choice in enumerate(cs):
        if choice.kernel == kernel:
            m[:scaled(choice.width_ratio, node.base_out), l] = 1.0
    return Tensor(m)


def _forward_relaxed(spec, weights, relaxed, x):
    # every intermediate runs at maximal width; a width-w branch is the
    # full conv masked down to its leading channels, so the mixture over
    # branches collapses to per-channel weights (exact, not approximate)
    outs = {}
    cur = x
    for i, node in enumerate(spec.nodes):
        w = weights.tensors[f"{node.name}.w"]
        b = weights.tensors[f"{node.name}.b"]
        p = relaxed.simplex[i]
        if node.skip_from is not None:
            cur = engine.concat([outs[node.skip_from], cur], axis=1)
        mixed = None
        for kernel in KERNELS[node.kind]:
            if node.kind == "upsample":
                branch = engine.conv_transpose2d(cur, w, b, stride=2)
            else:
                off = (w.shape[2] - kernel) // 2
                wk = w[:, :, off:off + kernel, off:off + kernel]
                stride = 2 if node.kind == "downsample" else 1
                branch = engine.conv2d(cur, wk, b, stride=stride,
                                       padding=kernel // 2)
            cw = engine.matvec(_width_mix_matrix(node, kernel), p)
            term = branch * cw.reshape(1, -1, 1, 1)
            mixed = term if mixed is None else mixed + term
        cur = mixed.relu()
        outs[node.name] = cur
    return engine.conv2d(cur, weights.tensors["head.w"],
                         weights.tensors["head.b"], stride=1, padding=0)


def sandwich_step(weights, spec, loss_fn, k_random, optimizer, rng):
    """One sandwich-rule update: largest width, smallest width, and
    k_random sampled subnets share the batch; gradients accumulate into
    the shared storage before a single optimizer step.

    loss_fn(arch) must build the forward pass and return a scalar Tensor.
    Returns the per-pass loss values (max first, min second).
    """
    if k_random < 0:
        raise ValueError("k_random must be >= 0")
    archs = [max_arch(spec), min_arch(spec)]
    archs += [random_arch(spec, rng) for _ in range(k_random)]
    optimizer.zero_grad()
    losses = []
    for arch in archs:
        loss = loss_fn(arch)
        loss.backward()
        losses.append(loss.item())
    optimizer.step()
    return losses


def save_weights(weights, out_dir):
    """Flat binary container plus JSON index; round-trip is exact."""
    os.makedirs(out_dir, exist_ok=True)
    index = {}
    offset = 0
    blobs = []
    for name in sorted(weights.tensors):
        t = weights.tensors[name]
        raw = np.ascontiguousarray(t.data).tobytes()
        index[name] = {"shape": list(t.data.shape),
                       "dtype": str(t.data.dtype),
                       "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    with open(os.path.join(out_dir, "weights.bin"), "wb") as f:
        for raw in blobs:
            f.write(raw)
    with open(os.path.join(out_dir, "weights.json"), "w") as f:
        json.dump(index, f, indent=1)


def load_weights(spec, out_dir):
    with open(os.path.join(out_dir, "weights.json")) as f:
        index = json.load(f)
    with open(os.path.join(out_dir, "weights.bin"), "rb") as f:
        blob = f.read()
    weights = SupernetWeights(spec, init=False)
    if set(index) != set(weights.tensors):
        raise ValueError("checkpoint does not match the supernet spec")
    for name, meta in index.items():
        arr = np.frombuffer(blob[meta["offset"]:meta["offset"] + meta["nbytes"]],
                            dtype=meta["dtype"]).reshape(meta["shape"])
        expect = weights.tensors[name].data.shape
        if tuple(meta["shape"]) != expect:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        weights.tensors[name].data = arr.astype(engine.get_default_dtype()).copy()
    return weights
