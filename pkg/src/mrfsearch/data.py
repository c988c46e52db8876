"""Deterministic synthetic segmentation pairs with controllable domain
shift, plus the mIoU metric.

Images are 3-channel float arrays of colored shapes (class = shape type)
on a textured background (class 0). The target domain applies channel
offsets (intensity + hue analog), a texture frequency change, a shape-size
change, and extra noise. Values are not clipped, so a pure intensity shift
moves the channel means by exactly that offset in expectation.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

SHAPES = ("square", "disk", "triangle", "cross")

# base colors for background + 4 shape classes, mid-range to avoid clipping
CLASS_COLORS = np.array([
    [0.35, 0.35, 0.35],   # background
    [0.75, 0.25, 0.25],   # square
    [0.25, 0.70, 0.30],   # disk
    [0.25, 0.35, 0.80],   # triangle
    [0.75, 0.70, 0.25],   # cross
])


@dataclass
class ShiftParams:
    intensity: float = 0.0      # added to every channel
    hue: tuple = (0.0, 0.0, 0.0)  # per-channel offsets, zero-sum for pure hue
    texture_freq: float = 1.0
    size_scale: float = 1.0
    noise: float = 0.0

    @classmethod
    def default(cls):
        """The default synthetic shift: intensity plus hue offset."""
        return cls(intensity=0.25, hue=(0.15, -0.12, 0.08), noise=0.02)


@dataclass
class DomainPair:
    source: list            # (image, label) pairs
    target_train: list      # images only
    target_eval: list       # (image, label) pairs, labels for evaluation only
    num_classes: int
    image_hw: tuple


def _draw_shape(label, img, cls, cx, cy, r, color, rng):
    h, w = label.shape
    yy, xx = np.mgrid[0:h, 0:w]
    kind = SHAPES[(cls - 1) % len(SHAPES)]
    if kind == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    elif kind == "disk":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif kind == "triangle":
        mask = (yy >= cy - r) & (yy <= cy + r) \
            & (np.abs(xx - cx) <= (yy - (cy - r)) / 2)
    else:  # cross
        t = max(1, r // 3)
        mask = ((np.abs(yy - cy) <= t) & (np.abs(xx - cx) <= r)) \
            | ((np.abs(xx - cx) <= t) & (np.abs(yy - cy) <= r))
    label[mask] = cls
    img[:, mask] = color[:, None] + 0.05 * rng.normal(size=(3, mask.sum()))


def _texture(hw, freq, rng):
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w]
    phase = rng.uniform(0, 2 * np.pi, size=2)
    wave = 0.04 * np.sin(2 * np.pi * freq * xx / w + phase[0]) \
        + 0.04 * np.sin(2 * np.pi * freq * yy / h + phase[1])
    return wave[None]


def _make_image(rng, classes, hw, shift):
    h, w = hw
    label = np.zeros((h, w), dtype=np.int64)
    img = np.empty((3, h, w))
    img[:] = CLASS_COLORS[0][:, None, None]
    img += _texture(hw, 4.0 * shift.texture_freq, rng)
    img += 0.02 * rng.normal(size=(3, h, w))
    n_shapes = rng.integers(2, 6)
    for _ in range(n_shapes):
        cls = int(rng.integers(1, classes))
        r = int(round(rng.integers(max(3, h // 12), max(5, h // 5))
                      * shift.size_scale))
        cx = int(rng.integers(r, w - r)) if w > 2 * r else w // 2
        cy = int(rng.integers(r, h - r)) if h > 2 * r else h // 2
        _draw_shape(label, img, cls, cx, cy, r, CLASS_COLORS[cls], rng)
    img += shift.intensity
    img += np.asarray(shift.hue)[:, None, None]
    if shift.noise:
        img += shift.noise * rng.normal(size=img.shape)
    return img, label


def generate(seed, n_source, n_target, classes=5, hw=(64, 64),
             shift=None):
    """Build a DomainPair: n_source labelled source images, n_target
    unlabelled target-train images, and n_target // 2 labelled target-eval
    images, all deterministic per seed."""
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if classes > len(CLASS_COLORS):
        raise ValueError(f"at most {len(CLASS_COLORS)} classes supported")
    shift = shift or ShiftParams()
    identity = ShiftParams()
    ss = np.random.SeedSequence(seed)
    src_ss, tgt_ss, ev_ss = ss.spawn(3)
    source = [_make_image(np.random.default_rng(s), classes, hw, identity)
              for s in src_ss.spawn(n_source)]
    target_train = [_make_image(np.random.default_rng(s), classes, hw, shift)[0]
                    for s in tgt_ss.spawn(n_target)]
    target_eval = [_make_image(np.random.default_rng(s), classes, hw, shift)
                   for s in ev_ss.spawn(max(1, n_target // 2))]
    return DomainPair(source=source, target_train=target_train,
                      target_eval=target_eval, num_classes=classes,
                      image_hw=tuple(hw))


def miou(pred_labels, true_labels, num_classes):
    """Mean IoU over classes present in prediction or truth.

    Returns (mean, per-class list); absent classes carry None.
    """
    pred = np.asarray(pred_labels).ravel()
    true = np.asarray(true_labels).ravel()
    if pred.shape != true.shape:
        raise ValueError("prediction and truth shapes differ")
    per_class = []
    ious = []
    for c in range(num_classes):
        p, t = pred == c, true == c
        union = (p | t).sum()
        if union == 0:
            per_class.append(None)
            continue
        iou = (p & t).sum() / union
        per_class.append(float(iou))
        ious.append(iou)
    return float(np.mean(ious)) if ious else 0.0, per_class


def digest(pair):
    """Seed-stable content digest of a DomainPair."""
    h = hashlib.sha256()
    for im, lb in pair.source:
        h.update(im.tobytes())
        h.update(lb.tobytes())
    for im in pair.target_train:
        h.update(im.tobytes())
    for im, lb in pair.target_eval:
        h.update(im.tobytes())
        h.update(lb.tobytes())
    return h.hexdigest()


def export(pair, out_dir, seed=None, shift=None):
    """Directory of binary arrays plus a JSON manifest."""
    os.makedirs(out_dir, exist_ok=True)
    for i, (im, lb) in enumerate(pair.source):
        np.save(os.path.join(out_dir, f"source_{i:04d}_img.npy"), im)
        np.save(os.path.join(out_dir, f"source_{i:04d}_lbl.npy"), lb)
    for i, im in enumerate(pair.target_train):
        np.save(os.path.join(out_dir, f"target_{i:04d}_img.npy"), im)
    for i, (im, lb) in enumerate(pair.target_eval):
        np.save(os.path.join(out_dir, f"eval_{i:04d}_img.npy"), im)
        np.save(os.path.join(out_dir, f"eval_{i:04d}_lbl.npy"), lb)
    shift_doc = None
    if shift:
        shift_doc = asdict(shift)
        shift_doc["hue"] = list(shift_doc["hue"])
    manifest = {"seed": seed, "shift": shift_doc,
                "counts": {"source": len(pair.source),
                           "target_train": len(pair.target_train),
                           "target_eval": len(pair.target_eval)},
                "num_classes": pair.num_classes,
                "image_hw": list(pair.image_hw),
                "digest": digest(pair)}
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def miou_csv(per_class, mean, class_names=None):
    lines = ["class,iou"]
    for c, iou in enumerate(per_class):
        name = class_names[c] if class_names else f"class_{c}"
        lines.append(f"{name},{'' if iou is None else f'{iou:.6f}'}")
    lines.append(f"mean,{mean:.6f}")
    return "\n".join(lines) + "\n"
