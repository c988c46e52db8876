"""End-to-end acceptance suite. Each test exercises one headline claim at
desk scale and records a pass/fail line (printed in the terminal summary).

These are slower than the unit suites: the two behavioral claims
(self-training benefit, search signal) run full training loops over 5 seeds.
"""

import itertools
import json
import os
import time

import numpy as np
import pytest

from conftest import record_criterion
from mrfsearch import cli, data, engine, inference, selftrain, space, supernet
from mrfsearch.engine import Tensor
from mrfsearch.inference import diverse_m_best, hamming, map_brute_force, \
    map_loopy
from mrfsearch.mrf import (Assignment, FactorTable, MrfVariable, PairwiseMrf,
                           all_assignments, gumbel_relaxed_sample, score)
from mrfsearch.selftrain import SelfTrainConfig, retrain, search_loop
from mrfsearch.space import SupernetSpec, build_search_mrf, decode


def check(name, ok, detail=""):
    record_criterion(name, ok, detail)
    assert ok, f"{name}: {detail}"


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
        fs.append(FactorTable(
            (u, v), pair_scale * rng.uniform(-1, 1, size=(cards[u], cards[v]))))
    return PairwiseMrf(vs, fs)


def test_map_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    tree_hits = sum(
        map_loopy(m, 200, 0.5).score == pytest.approx(map_brute_force(m).score)
        for m in (random_tree(rng, int(rng.integers(2, 9)), 4)
                  for _ in range(100)))
    loopy_hits = sum(
        map_loopy(m, 200, 0.5).score == pytest.approx(map_brute_force(m).score)
        for m in (random_loopy(rng) for _ in range(100)))
    elapsed = time.perf_counter() - t0
    detail = f"trees {tree_hits}/100, cycles {loopy_hits}/100, {elapsed:.1f}s"
    check("MAP oracle equivalence",
          tree_hits == 100 and loopy_hits >= 95 and elapsed < 30, detail)


def test_diverse_m_best_exactness():
    rng = np.random.default_rng(11)
    rounds_checked, rounds_optimal = 0, 0
    for _ in range(20):
        m = random_tree(rng, int(rng.integers(3, 6)), 3)
        assert m.num_configurations() <= 10 ** 4
        weight = float(rng.uniform(0.2, 2.0))
        sols = diverse_m_best(m, m=3, diversity_weight=weight, exact=True)
        chosen = []
        for r in sols.solutions:
            def augmented(a):
                overlap = sum(len(a.labels) - hamming(a, c) for c in chosen)
                return score(m, a) - weight * overlap
            best = max(augmented(a) for a in all_assignments(m))
            rounds_checked += 1
            rounds_optimal += augmented(r.assignment) == pytest.approx(best)
            chosen.append(r.assignment)
    check("Diverse M-best exactness", rounds_optimal == rounds_checked,
          f"{rounds_optimal}/{rounds_checked} rounds optimal by enumeration")


def _three_var_mrf(values=None):
    cards = (2, 3, 2)
    vs = [MrfVariable(i, c) for i, c in enumerate(cards)]
    rng = np.random.default_rng(12)
    if values is None:
        values = [rng.normal(size=cards[0]), rng.normal(size=cards[1]),
                  rng.normal(size=cards[2]),
                  rng.normal(size=(cards[0], cards[1])),
                  rng.normal(size=(cards[1], cards[2]))]
    fs = [FactorTable((0,), values[0]), FactorTable((1,), values[1]),
          FactorTable((2,), values[2]), FactorTable((0, 1), values[3]),
          FactorTable((1, 2), values[4])]
    return PairwiseMrf(vs, fs)


def test_gumbel_gradient_fidelity():
    m = _three_var_mrf()
    probe_rng = np.random.default_rng(13)
    probes = [probe_rng.normal(size=v.cardinality) for v in m.variables]

    def loss_of(mrf, seed=99):
        relaxed = gumbel_relaxed_sample(mrf, temperature=1.0, sweeps=2,
                                        rng_seed=seed)
        loss = None
        for s, p in zip(relaxed.simplex, probes):
            term = (s * Tensor(p)).sum()
            loss = term if loss is None else loss + term
        return loss, relaxed

    loss, relaxed = loss_of(m)
    loss.backward()
    analytic = relaxed.factor_grads()

    h = 1e-5
    worst = 0.0
    base_values = [f.values.copy() for f in m.factors]
    for fi, vals in enumerate(base_values):
        it = np.nditer(vals, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            fd_vals = []
            for sign in (+1, -1):
                bumped = [v.copy() for v in base_values]
                bumped[fi][idx] += sign * h
                bm = _three_var_mrf([bumped[0], bumped[1], bumped[2],
                                     bumped[3], bumped[4]])
                fd_vals.append(loss_of(bm)[0].item())
            fd = (fd_vals[0] - fd_vals[1]) / (2 * h)
            an = analytic[fi][idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    check("Gumbel-Softmax gradient fidelity", worst < 1e-3,
          f"max relative error vs finite differences {worst:.2e}")


def test_autodiff_fidelity():
    rng = np.random.default_rng(14)

    def fd_worst(fn, inputs, h=1e-4):
        tensors = [Tensor(x, requires_grad=True) for x in inputs]
        out = fn(*tensors)
        (out.sum() if out.data.size > 1 else out).backward()
        worst = 0.0
        for ti, t in enumerate(tensors):
            it = np.nditer(t.data, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                vals = []
                for sign in (+1, -1):
                    bumped = [x.copy() for x in inputs]
                    bumped[ti][idx] += sign * h
                    o = fn(*[Tensor(b) for b in bumped])
                    vals.append((o.sum() if o.data.size > 1 else o).item())
                fd = (vals[0] - vals[1]) / (2 * h)
                an = t.grad[idx]
                worst = max(worst,
                            abs(fd - an) / max(abs(fd), abs(an), 1e-6))
        return worst

    probe = Tensor(rng.normal(size=(2, 3)))
    cases = [
        (lambda a, b: a * b + a - b / (b * b + 1.0),
         [rng.normal(size=(2, 3)), rng.normal(size=(3,))]),
        (lambda a: ((a.exp() + 1.0).log() ** 2.0).mean(axis=0).sum(),
         [rng.normal(size=(2, 3))]),
        (lambda a: (engine.softmax(a, axis=-1) * probe).sum(),
         [rng.normal(size=(2, 3))]),
        (lambda a: (engine.log_softmax(a, axis=-1) * probe).sum(),
         [rng.normal(size=(2, 3))]),
        (lambda a, b: engine.matvec(a, b).relu(),
         [rng.normal(size=(3, 4)), rng.normal(size=(4,))]),
        (lambda a, b: engine.concat([a[1:], b], axis=0).reshape(9),
         [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        (lambda x, w, b: engine.conv2d(x, w, b, stride=2, padding=1),
         [rng.normal(size=(1, 2, 6, 6)), rng.normal(size=(2, 2, 3, 3)),
          rng.normal(size=(2,))]),
        (lambda x, w, b: engine.conv_transpose2d(x, w, b, stride=2),
         [rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(2, 2, 2, 2)),
          rng.normal(size=(2,))]),
    ]
    worst_op = max(fd_worst(fn, inputs) for fn, inputs in cases)

    # width/kernel slicing: zeroing storage outside a subnet's slices must
    # not change that subnet's output
    from test_supernet import _sliced_only_copy
    spec = SupernetSpec.unet(1, 4, 3, 5)
    weights = supernet.SupernetWeights(spec, seed=1)
    x = rng.normal(size=(1, 3, 8, 8))
    worst_slice = 0.0
    arch_rng = np.random.default_rng(15)
    for arch in [supernet.min_arch(spec), supernet.max_arch(spec)] + \
            [supernet.random_arch(spec, arch_rng) for _ in range(4)]:
        a = supernet.NetworkInstance(spec, weights, arch=arch).forward(x)
        b = supernet.NetworkInstance(
            spec, _sliced_only_copy(spec, weights, arch), arch=arch).forward(x)
        worst_slice = max(worst_slice, np.abs(a.data - b.data).max())
    check("Autodiff fidelity",
          worst_op < 1e-4 and worst_slice < 1e-7,
          f"op FD rel err {worst_op:.2e}, slicing diff {worst_slice:.2e}")


def test_pseudo_label_formulas():
    rng = np.random.default_rng(16)
    quality_exact = True
    mask_exact = True
    energy_worst = 0.0
    for _ in range(1000):
        logits = (5 * rng.normal(size=(2, 4, 5, 5))).astype(np.float64)
        tau = float(rng.uniform(0.3, 0.99))
        tau_e = float(rng.uniform(-6.0, 0.0))
        hp = logits.astype(np.longdouble)

        # confidence scheme, recomputed in extended precision
        e = np.exp(hp - hp.max(axis=1, keepdims=True))
        maxp = (e / e.sum(axis=1, keepdims=True)).max(axis=1)
        ref_quality = (maxp >= tau).mean(axis=(1, 2)).astype(np.float64)
        pl = selftrain.pseudo_confidence(logits, tau)
        quality_exact &= np.array_equal(pl.quality, ref_quality)
        quality_exact &= np.array_equal(pl.labels, logits.argmax(axis=1))

        # energy scheme
        mx = hp.max(axis=1)
        ref_energy = (-(mx + np.log(np.exp(hp - mx[:, None]).sum(axis=1)))
                      ).astype(np.float64)
        got_energy = selftrain.energy_score(logits, T=1.0)
        energy_worst = max(energy_worst,
                           float(np.abs(got_energy - ref_energy).max()))
        ple = selftrain.pseudo_energy(logits, tau_e, T=1.0)
        mask_exact &= np.array_equal(ple.valid_mask, ref_energy < tau_e)

    cfg = SelfTrainConfig()
    cfg_from_file = cli.build_train_config({"train": {}})
    defaults_ok = (cfg.tau, cfg.tau_e, cfg.temperature) == (0.968, -8.0, 1.0) \
        and (cfg_from_file.tau, cfg_from_file.tau_e,
             cfg_from_file.temperature) == (0.968, -8.0, 1.0)
    check("Pseudo-label formulas",
          quality_exact and mask_exact and energy_worst < 1e-9 and defaults_ok,
          f"1000 tensors, energy max abs err {energy_worst:.1e}, "
          f"defaults tau=0.968 tau_e=-8.0 T=1 load")


def _searched_map_arch(spec, pair, seed):
    g = build_search_mrf(spec)
    cfg = SelfTrainConfig(iterations=250, warmup_iterations=50, seed=seed,
                          batch_size=2, ema_decay=0.99, factor_lr=0.3)
    g, _ = search_loop(spec, g, pair, cfg)
    return decode(spec, diverse_m_best(g, 1).solutions[0].assignment), g


def test_self_training_benefit():
    t0 = time.time()
    wins, gaps = 0, []
    spec = SupernetSpec.unet(1, 8, 3, 5)
    for seed in range(5):
        pair = data.generate(seed, 60, 60, classes=5, hw=(32, 32),
                             shift=data.ShiftParams.default())
        arch, _ = _searched_map_arch(spec, pair, seed)
        base = dict(iterations=600, warmup_iterations=0, seed=seed,
                    batch_size=2, ema_decay=0.99, scheme="confidence")
        _, src = retrain(spec, arch, pair,
                         SelfTrainConfig(lambda_t=0.0, **base))
        _, uda = retrain(spec, arch, pair,
                         SelfTrainConfig(lambda_t=1.0, **base))
        gap = uda["target_miou"] - src["target_miou"]
        gaps.append(gap)
        wins += gap >= 0.05
    elapsed = time.time() - t0
    check("Self-training benefit at toy scale",
          wins >= 4 and elapsed <= 1800,
          f"{wins}/5 seeds with mIoU gap >= 0.05 "
          f"(gaps {[f'{g:+.3f}' for g in gaps]}), {elapsed:.0f}s")


def test_search_signal():
    wins = 0
    spec = SupernetSpec.unet(1, 8, 3, 5)
    details = []
    for seed in range(5):
        pair = data.generate(seed, 60, 60, classes=5, hw=(32, 32),
                             shift=data.ShiftParams.default())
        val = data.generate(1000 + seed, 24, 2, classes=5, hw=(32, 32),
                            shift=data.ShiftParams()).source
        arch, _ = _searched_map_arch(spec, pair, seed)
        cfg = SelfTrainConfig(iterations=150, warmup_iterations=0, seed=seed,
                              batch_size=2, lambda_t=0.0, ema_decay=0.0)

        def retrained_val_loss(a):
            weights, _ = retrain(spec, a, pair, cfg)
            return selftrain.source_val_loss(spec, weights, a, val)

        map_loss = retrained_val_loss(arch)
        arch_rng = np.random.default_rng(seed + 500)
        rand_losses = [retrained_val_loss(supernet.random_arch(spec, arch_rng))
                       for _ in range(8)]
        win = map_loss < np.mean(rand_losses)
        wins += win
        details.append(f"{map_loss:.3f}<{np.mean(rand_losses):.3f}"
                       if win else f"{map_loss:.3f}>={np.mean(rand_losses):.3f}")
    check("Search signal", wins >= 4,
          f"{wins}/5 seeds with searched arch below random mean ({details})")


ACCEPT_CONFIG = """
[spec]
encoder_depth = 1
base_channels = 4
num_classes = 5

[data]
seed = 0
n_source = 6
n_target = 6
hw = [16, 16]

[train]
iterations = 3
warmup_iterations = 1
batch_size = 1
ema_decay = 0.9
seed = 0
"""


def _run_pipeline(cfg_path, out):
    assert cli.main(["search", "--config", cfg_path, "--out-dir", out]) == 0
    assert cli.main(["infer", "--mrf", f"{out}/mrf.json",
                     "--spec", f"{out}/spec.json", "--m", "4",
                     "--budget-flops", "2.5G", "--budget-hw", "256", "256",
                     "--out-dir", out]) == 0
    assert cli.main(["retrain", "--subnets", f"{out}/subnets.json",
                     "--config", cfg_path, "--top", "2",
                     "--out-dir", out]) == 0
    with open(f"{out}/run_report.json") as f:
        return json.load(f)


def test_budget_compliance(tmp_path):
    cfg_path = str(tmp_path / "c.toml")
    with open(cfg_path, "w") as f:
        f.write(ACCEPT_CONFIG)
    out = str(tmp_path / "run")
    _run_pipeline(cfg_path, out)
    with open(f"{out}/spec.json") as f:
        spec = SupernetSpec.from_json(f.read())
    with open(f"{out}/subnets.json") as f:
        doc = json.load(f)
    ok = len(doc["subnets"]) > 0
    worst = 0
    for e in doc["subnets"]:
        arch = space.ArchAssignment.from_json(json.dumps(e["choices"]))
        cost = space.resource_cost(spec, arch, (256, 256))
        ok &= cost.flops <= 2.5e9
        ok &= e["flops"] == cost.flops and e["params"] == cost.params
        worst = max(worst, cost.flops)
    check("Budget compliance", ok,
          f"{len(doc['subnets'])} subnets, max {space.format_si(worst)} FLOPs "
          f"<= 2.50G; params match independent recomputation")


def test_reproducibility(tmp_path):
    cfg_path = str(tmp_path / "c.toml")
    with open(cfg_path, "w") as f:
        f.write(ACCEPT_CONFIG)
    reports = []
    for tag in ("a", "b"):
        r = _run_pipeline(cfg_path, str(tmp_path / tag))
        r.pop("wall_clock_s")
        reports.append(r)
    check("Reproducibility", reports[0] == reports[1],
          "two same-seed pipeline runs give identical reports "
          "modulo wall clock")
