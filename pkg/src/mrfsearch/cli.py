"""Command-line pipeline: search -> infer -> retrain -> eval -> report.

Configs are TOML (JSON accepted); every training hyperparameter has a
named key. All artifacts land under --out-dir with a manifest. Exit codes:
0 success, 2 usage/config error, 3 numerical failure.
"""

import argparse
import copy
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import data as data_mod
from . import inference, selftrain, space, supernet
from .mrf import PairwiseMrf
from .selftrain import SelfTrainConfig
from .space import SupernetSpec

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class ConfigError(Exception):
    pass


def load_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if path.endswith(".json"):
        cfg = json.loads(raw)
    else:
        import tomli
        try:
            cfg = tomli.loads(raw.decode())
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"bad TOML in {path}: {e}")
    cfg["_digest"] = hashlib.sha256(raw).hexdigest()
    cfg["_path"] = path
    return cfg


def build_spec(cfg):
    s = cfg.get("spec", {})
    return SupernetSpec.unet(
        encoder_depth=s.get("encoder_depth", 1),
        base_channels=s.get("base_channels", 8),
        in_channels=s.get("in_channels", 3),
        num_classes=s.get("num_classes", 5))


def build_data(cfg):
    d = cfg.get("data", {})
    shift_cfg = d.get("shift")
    if shift_cfg is None:
        shift = data_mod.ShiftParams.default()
    else:
        shift = data_mod.ShiftParams(
            intensity=shift_cfg.get("intensity", 0.0),
            hue=tuple(shift_cfg.get("hue", (0.0, 0.0, 0.0))),
            texture_freq=shift_cfg.get("texture_freq", 1.0),
            size_scale=shift_cfg.get("size_scale", 1.0),
            noise=shift_cfg.get("noise", 0.0))
    return data_mod.generate(
        seed=d.get("seed", 0),
        n_source=d.get("n_source", 200),
        n_target=d.get("n_target", 200),
        classes=d.get("classes", 5),
        hw=tuple(d.get("hw", (64, 64))),
        shift=shift)


def build_train_config(cfg, overrides=None):
    t = dict(cfg.get("train", {}))
    t.update(overrides or {})
    allowed = set(SelfTrainConfig.__dataclass_fields__)
    unknown = set(t) - allowed
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    try:
        return SelfTrainConfig(**t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad train config: {e}")


def _write(out_dir, name, text):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        f.write(text)
    return path


def _manifest_add(out_dir, entries):
    path = os.path.join(out_dir, "manifest.json")
    manifest = {}
    if os.path.exists(path):
        with open(path) as f:
            manifest = json.load(f)
    manifest.update(entries)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)


def cmd_search(args):
    cfg = load_config(args.config)
    spec = build_spec(cfg)
    pair = build_data(cfg)
    train_cfg = build_train_config(
        cfg, {"seed": args.seed} if args.seed is not None else None)
    train_cfg.log_path = os.path.join(args.out_dir, "search_log.jsonl")
    os.makedirs(args.out_dir, exist_ok=True)
    if os.path.exists(train_cfg.log_path):
        os.remove(train_cfg.log_path)
    search_mrf = space.build_search_mrf(spec)
    t0 = time.time()
    search_mrf, _ = selftrain.search_loop(spec, search_mrf, pair, train_cfg)
    elapsed = time.time() - t0
    mrf_json = search_mrf.to_json()
    _write(args.out_dir, "mrf.json", mrf_json)
    _write(args.out_dir, "spec.json", spec.to_json())
    _manifest_add(args.out_dir, {
        "config_digest": cfg["_digest"],
        "search": {"mrf": "mrf.json", "spec": "spec.json",
                   "log": "search_log.jsonl",
                   "factor_digest": hashlib.sha256(
                       mrf_json.encode()).hexdigest(),
                   "wall_clock_s": elapsed}})
    print(f"search done in {elapsed:.1f}s; learned MRF -> "
          f"{os.path.join(args.out_dir, 'mrf.json')}")
    return 0


def cmd_infer(args):
    with open(args.mrf) as f:
        learned = PairwiseMrf.from_json(f.read())
    with open(args.spec) as f:
        spec = SupernetSpec.from_json(f.read())
    budget = space.parse_flops(args.budget_flops) if args.budget_flops else None
    exact = learned.num_configurations() <= 10 ** 6
    solutions = inference.diverse_m_best(
        learned, m=args.m, diversity_weight=args.diversity_weight, exact=exact)
    hw = tuple(args.budget_hw)
    entries = []
    for result in solutions.solutions:
        arch = space.decode(spec, result.assignment)
        cost = space.resource_cost(spec, arch, hw)
        if budget is not None and cost.flops > budget:
            continue
        entries.append({
            "labels": result.assignment.labels,
            "score": result.score,
            "choices": json.loads(arch.to_json()),
            "flops": cost.flops,
            "params": cost.params,
            "flops_hw": list(hw),
        })
    out = {"m": args.m, "diversity_weight": args.diversity_weight,
           "budget_flops": budget, "exact": exact, "subnets": entries}
    path = _write(args.out_dir, "subnets.json", json.dumps(out, indent=1))
    _manifest_add(args.out_dir, {"infer": {"subnets": "subnets.json"}})
    if not entries:
        print("warning: no subnets satisfy the budget", file=sys.stderr)
    for e in entries:
        print(f"labels={e['labels']} score={e['score']:.4f} "
              f"flops={space.format_si(e['flops'])} "
              f"params={space.format_si(e['params'])}")
    print(f"wrote {path}")
    return 0


def cmd_retrain(args):
    cfg = load_config(args.config)
    spec = build_spec(cfg)
    pair = build_data(cfg)
    with open(args.subnets) as f:
        subnets = json.load(f)["subnets"]
    if not subnets:
        print("no subnets to retrain", file=sys.stderr)
        return 0
    hw = pair.image_hw
    rows = []
    t0 = time.time()
    for i, entry in enumerate(subnets):
        arch = space.ArchAssignment.from_json(json.dumps(entry["choices"]))
        train_cfg = build_train_config(
            cfg, {"seed": args.seed} if args.seed is not None else None)
        train_cfg.log_path = None
        weights, metrics = selftrain.retrain(spec, arch, pair, train_cfg)
        cost = space.resource_cost(spec, arch, hw)
        wdir = os.path.join(args.out_dir, f"subnet_{i}")
        supernet.save_weights(weights, wdir)
        with open(os.path.join(wdir, "arch.json"), "w") as f:
            f.write(arch.to_json())
        rows.append({"index": i, "labels": entry["labels"],
                     "target_miou": metrics["target_miou"],
                     "per_class_iou": metrics["per_class_iou"],
                     "flops": cost.flops, "params": cost.params,
                     "weights_dir": f"subnet_{i}"})
    rows.sort(key=lambda r: -r["target_miou"])
    if args.top is not None:
        selected = rows[:args.top]
    else:
        selected = rows
    train_cfg = build_train_config(
        cfg, {"seed": args.seed} if args.seed is not None else None)
    report = {
        "config_digest": cfg["_digest"],
        "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
        "seed": train_cfg.seed,
        "flops_convention": "1 MAC = 1 FLOP",
        "eval_hw": list(hw),
        "ranking": rows,
        "selected": [r["index"] for r in selected],
        "wall_clock_s": time.time() - t0,
    }
    _write(args.out_dir, "run_report.json", json.dumps(report, indent=1))
    csv = ["rank,index,target_miou,flops,params"]
    for rank, r in enumerate(rows):
        csv.append(f"{rank},{r['index']},{r['target_miou']:.6f},"
                   f"{r['flops']},{r['params']}")
    _write(args.out_dir, "run_report.csv", "\n".join(csv) + "\n")
    _manifest_add(args.out_dir, {"retrain": {"report": "run_report.json",
                                             "csv": "run_report.csv"}})
    for rank, r in enumerate(rows):
        mark = "*" if r["index"] in report["selected"] else " "
        print(f"{mark} rank {rank}: subnet {r['index']} "
              f"mIoU={r['target_miou']:.4f} "
              f"flops={space.format_si(r['flops'])} "
              f"params={space.format_si(r['params'])}")
    return 0


def cmd_eval(args):
    cfg = load_config(args.config)
    spec = build_spec(cfg)
    pair = build_data(cfg)
    arch_path = os.path.join(args.weights, "arch.json")
    if not os.path.exists(arch_path):
        raise ConfigError(f"no arch.json next to weights in {args.weights}")
    with open(arch_path) as f:
        arch = space.ArchAssignment.from_json(f.read())
    try:
        weights = supernet.load_weights(spec, args.weights)
    except ValueError as e:
        raise ConfigError(str(e))
    mean, per_class = selftrain.evaluate_miou(spec, weights, arch,
                                              pair.target_eval,
                                              pair.num_classes)
    csv = data_mod.miou_csv(per_class, mean)
    path = _write(args.out_dir, "eval.csv", csv)
    if args.svg:
        _write(args.out_dir, "eval.svg", _iou_svg(per_class, mean))
    _manifest_add(args.out_dir, {"eval": {"csv": "eval.csv"}})
    print(csv, end="")
    print(f"wrote {path}")
    return 0


def _iou_svg(per_class, mean):
    bars = []
    width, bh = 320, 22
    for c, iou in enumerate(per_class):
        v = 0.0 if iou is None else iou
        y = 10 + c * (bh + 6)
        bars.append(f'<rect x="60" y="{y}" width="{v * 240:.1f}" '
                    f'height="{bh}" fill="#4878b0"/>')
        bars.append(f'<text x="4" y="{y + 15}" font-size="12">c{c}</text>')
        bars.append(f'<text x="{64 + v * 240:.1f}" y="{y + 15}" '
                    f'font-size="11">{v:.3f}</text>')
    h = 10 + len(per_class) * (bh + 6) + 24
    bars.append(f'<text x="4" y="{h - 6}" font-size="12">'
                f'mean IoU = {mean:.4f}</text>')
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
            f'height="{h}">' + "".join(bars) + "</svg>")


def cmd_report(args):
    with open(args.report) as f:
        report = json.load(f)
    print(f"config digest: {report['config_digest']}")
    print(f"seed: {report['seed']}  flops: {report['flops_convention']} "
          f"@ {report['eval_hw']}")
    for rank, r in enumerate(report["ranking"]):
        print(f"rank {rank}: subnet {r['index']} "
              f"mIoU={r['target_miou']:.4f} "
              f"flops={space.format_si(r['flops'])} "
              f"params={space.format_si(r['params'])}")
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="mrfsearch",
                                description="MRF architecture search with "
                                            "self-training domain adaptation")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("search", help="learn MRF factors over a supernet")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_search)

    ip = sub.add_parser("infer", help="diverse M-best subnets from a learned MRF")
    ip.add_argument("--mrf", required=True)
    ip.add_argument("--spec", required=True)
    ip.add_argument("--m", type=int, default=4)
    ip.add_argument("--diversity-weight", type=float, default=1.0)
    ip.add_argument("--budget-flops", default=None,
                    help="e.g. 2.5G; omit for no budget")
    ip.add_argument("--budget-hw", type=int, nargs=2, default=(256, 256))
    ip.add_argument("--out-dir", required=True)
    ip.set_defaults(fn=cmd_infer)

    rp = sub.add_parser("retrain", help="retrain discovered subnets")
    rp.add_argument("--subnets", required=True)
    rp.add_argument("--config", required=True)
    rp.add_argument("--seed", type=int, default=None)
    rp.add_argument("--top", type=int, default=None,
                    help="select the top-K subnets by target mIoU")
    rp.add_argument("--out-dir", required=True)
    rp.set_defaults(fn=cmd_retrain)

    ep = sub.add_parser("eval", help="evaluate a checkpoint on target eval data")
    ep.add_argument("--weights", required=True, help="checkpoint directory")
    ep.add_argument("--config", required=True)
    ep.add_argument("--svg", action="store_true")
    ep.add_argument("--out-dir", required=True)
    ep.set_defaults(fn=cmd_eval)

    tp = sub.add_parser("report", help="print a run report")
    tp.add_argument("--report", required=True)
    tp.set_defaults(fn=cmd_report)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
