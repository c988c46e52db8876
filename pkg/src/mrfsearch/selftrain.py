"""Teacher-student self-training: pseudo-labelling (confidence and energy
schemes), ClassMix domain mixing, combined source+target loss, EMA teacher
updates, and the search/retrain loops that wrap them."""

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import engine, mrf as mrf_mod, supernet
from .engine import Tensor
from .mrf import gumbel_relaxed_sample, update_factors
from .supernet import NetworkInstance, SupernetWeights, max_arch, sandwich_step


@dataclass
class PseudoLabelBatch:
    labels: np.ndarray       # (N, H, W) int
    valid_mask: np.ndarray   # (N, H, W) bool
    quality: np.ndarray      # (N,) in [0, 1]
    pixel_weight: np.ndarray = None  # (N, H, W); set after mixing

    def loss_weight(self):
        """Per-pixel loss weight: quality on valid pixels, or the explicit
        per-pixel weights for mixed batches."""
        if self.pixel_weight is not None:
            return self.pixel_weight * self.valid_mask
        return self.quality[:, None, None] * self.valid_mask


@dataclass
class TeacherState:
    weights: SupernetWeights
    ema_decay: float


@dataclass
class SelfTrainConfig:
    tau: float = 0.968
    tau_e: float = -8.0
    temperature: float = 1.0
    lambda_t: float = 1.0
    ema_decay: float = 0.999
    scheme: str = "confidence"  # or "energy"
    iterations: int = 2000
    warmup_iterations: int = 1500
    seed: int = 0
    batch_size: int = 2
    k_random: int = 1
    lr: float = 0.003
    weight_decay: float = 0.05
    factor_lr: float = 0.3
    gumbel_temperature: float = 1.0
    gibbs_sweeps: int = 1
    loss: str = "ce"  # or "recall"
    jitter: float = 0.1
    blur_prob: float = 0.2
    log_path: str = None

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must be in (0, 1)")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must be in [0, 1]")
        if self.scheme not in ("confidence", "energy"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


def _as_array(logits):
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits)


def softmax_np(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def pseudo_confidence(teacher_logits, tau):
    """Argmax labels with an image-level quality weight: the fraction of
    pixels whose max softmax probability clears the threshold."""
    h = _as_array(teacher_logits)
    probs = softmax_np(h, axis=1)
    labels = probs.argmax(axis=1)
    maxp = probs.max(axis=1)
    quality = (maxp >= tau).mean(axis=(1, 2))
    return PseudoLabelBatch(labels=labels,
                            valid_mask=np.ones_like(labels, dtype=bool),
                            quality=quality)


def energy_score(teacher_logits, T):
    """Free energy -T log sum_c exp(logit_c / T) per pixel, max-shifted."""
    if T <= 0:
        raise ValueError("temperature must be > 0")
    h = _as_array(teacher_logits) / T
    m = h.max(axis=1)
    return -T * (m + np.log(np.exp(h - m[:, None]).sum(axis=1)))


def pseudo_energy(teacher_logits, tau_e, T):
    """Argmax labels masked per pixel where the energy falls below tau_e."""
    h = _as_array(teacher_logits)
    labels = h.argmax(axis=1)
    valid = energy_score(h, T) < tau_e
    return PseudoLabelBatch(labels=labels, valid_mask=valid,
                            quality=np.ones(h.shape[0]))


def classmix(src_img, src_lbl, tgt_img, tgt_pseudo, rng):
    """Paste a random half of the classes present in each source label map
    onto the paired target image and its pseudo-labels.

    Pasted pixels carry ground-truth labels at weight 1; the rest keep the
    target pseudo-labels at the target image's quality weight.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    n = src_img.shape[0]
    mixed_img = tgt_img.copy()
    mixed_lbl = tgt_pseudo.labels.copy()
    mixed_valid = tgt_pseudo.valid_mask.copy()
    weight = (tgt_pseudo.quality[:, None, None]
              * np.ones_like(tgt_pseudo.labels, dtype=float))
    for i in range(n):
        present = np.unique(src_lbl[i])
        chosen = rng.choice(present, size=math.ceil(len(present) / 2),
                            replace=False)
        mask = np.isin(src_lbl[i], chosen)
        mixed_img[i, :, mask] = src_img[i, :, mask]
        mixed_lbl[i][mask] = src_lbl[i][mask]
        mixed_valid[i][mask] = True
        weight[i][mask] = 1.0
    return mixed_img, PseudoLabelBatch(labels=mixed_lbl,
                                       valid_mask=mixed_valid,
                                       quality=tgt_pseudo.quality,
                                       pixel_weight=weight)


def _one_hot(labels, num_classes):
    n, h, w = labels.shape
    oh = np.zeros((n, num_classes, h, w))
    np.put_along_axis(oh, labels[:, None], 1.0, axis=1)
    return oh


def pixel_ce(logits, labels, weight=None):
    """Cross-entropy averaged over all pixels; optional per-pixel weights."""
    num_classes = logits.shape[1]
    lsm = engine.log_softmax(logits, axis=1)
    nll = -(lsm * Tensor(_one_hot(labels, num_classes))).sum(axis=1)
    if weight is not None:
        nll = nll * Tensor(weight)
    return nll.sum() * (1.0 / nll.data.size)


def combined_loss(student_logits_s, y_s, student_logits_t, pl, lambda_t,
                  loss="ce"):
    """Source cross-entropy plus lambda-weighted target pseudo-label term."""
    ce_fn = recall_ce if loss == "recall" else pixel_ce
    total = ce_fn(student_logits_s, y_s)
    if lambda_t != 0 and student_logits_t is not None:
        total = total + lambda_t * pixel_ce(student_logits_t, pl.labels,
                                            weight=pl.loss_weight())
    return total


def recall_ce(logits, labels, weight=None):
    """Cross-entropy with per-class weights 1 - recall_c from this batch's
    confusion counts; classes absent from the batch get weight 1."""
    num_classes = logits.shape[1]
    preds = logits.data.argmax(axis=1)
    class_weight = np.ones(num_classes)
    for c in range(num_classes):
        truth = labels == c
        if truth.any():
            class_weight[c] = 1.0 - (preds[truth] == c).mean()
    pixel_w = class_weight[labels]
    if weight is not None:
        pixel_w = pixel_w * weight
    return pixel_ce(logits, labels, weight=pixel_w)


def ema_update(teacher, student_weights, decay=None):
    """teacher <- decay * teacher + (1 - decay) * student, elementwise."""
    if decay is None:
        decay = teacher.ema_decay
    if not 0 <= decay <= 1:
        raise ValueError("decay must be in [0, 1]")
    for name, t in teacher.weights.tensors.items():
        s = student_weights.tensors[name]
        if t.data.shape != s.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        t.data *= decay
        t.data += (1 - decay) * s.data


def make_pseudo(teacher_logits, cfg):
    if cfg.scheme == "energy":
        return pseudo_energy(teacher_logits, cfg.tau_e, cfg.temperature)
    return pseudo_confidence(teacher_logits, cfg.tau)


def augment(img, rng, jitter, blur_prob):
    """Channel-wise affine jitter plus occasional gaussian blur."""
    out = img.copy()
    n, c = img.shape[:2]
    if jitter > 0:
        scale = rng.uniform(1 - jitter, 1 + jitter, size=(n, c, 1, 1))
        shift = rng.uniform(-jitter, jitter, size=(n, c, 1, 1))
        out = out * scale + shift
    for i in range(n):
        if rng.random() < blur_prob:
            out[i] = ndimage.gaussian_filter(out[i],
                                             sigma=(0, 0.8, 0.8))
    return out


def _batch(items, idx):
    return np.stack([items[i] for i in idx])


class _Streams:
    """Named substreams derived from one root seed."""

    def __init__(self, seed):
        ss = np.random.SeedSequence(seed)
        data, mix, gum, init, arch, aug = ss.spawn(6)
        self.data = np.random.default_rng(data)
        self.mix = np.random.default_rng(mix)
        self.gumbel = np.random.default_rng(gum)
        self.init_seed = int(init.generate_state(1)[0])
        self.arch = np.random.default_rng(arch)
        self.aug = np.random.default_rng(aug)


def _log_write(path, record):
    if path:
        with open(path, "a") as f:
            f.write(json.dumps(record) + "\n")


def factor_l2(m):
    return float(np.sqrt(sum((f.values ** 2).sum() for f in m.factors)))


def search_loop(spec, search_mrf, pair, cfg):
    """Joint supernet + factor learning under the self-training scheme.

    Each iteration: the teacher pseudo-labels a target batch, ClassMix
    builds the mixed batch, a sandwich step trains the shared weights on
    source + mixed data, and (after warmup) the expected loss of a relaxed
    Gumbel sample backpropagates into the factor tables. The teacher tracks
    the student by EMA. Returns the learned MRF and the iteration log.
    """
    streams = _Streams(cfg.seed)
    student = SupernetWeights(spec, seed=streams.init_seed)
    teacher = TeacherState(student.copy(), cfg.ema_decay)
    opt = engine.AdamW(student.params(), lr=cfg.lr,
                       weight_decay=cfg.weight_decay)
    ref_arch = max_arch(spec)
    src_imgs = [im for im, _ in pair.source]
    src_lbls = [lb for _, lb in pair.source]
    log = []
    for it in range(1, cfg.iterations + 1):
        si = streams.data.integers(len(src_imgs), size=cfg.batch_size)
        ti = streams.data.integers(len(pair.target_train), size=cfg.batch_size)
        xs, ys = _batch(src_imgs, si), _batch(src_lbls, si)
        xt = _batch(pair.target_train, ti)

        teach_logits = NetworkInstance(spec, teacher.weights,
                                       arch=ref_arch).forward(xt)
        pl = make_pseudo(teach_logits, cfg)
        xm, plm = classmix(xs, ys, xt, pl, streams.mix)

        xs_a = augment(xs, streams.aug, cfg.jitter, cfg.blur_prob)
        xm_a = augment(xm, streams.aug, cfg.jitter, cfg.blur_prob)

        def pass_loss(arch):
            ls = NetworkInstance(spec, student, arch=arch).forward(xs_a)
            lt = NetworkInstance(spec, student, arch=arch).forward(xm_a)
            return combined_loss(ls, ys, lt, plm, cfg.lambda_t, loss=cfg.loss)

        losses = sandwich_step(student, spec, pass_loss, cfg.k_random, opt,
                               streams.arch)
        if not all(np.isfinite(losses)):
            raise FloatingPointError(f"NaN loss at iteration {it}: {losses}")

        if it > cfg.warmup_iterations:
            relaxed = gumbel_relaxed_sample(
                search_mrf, cfg.gumbel_temperature, cfg.gibbs_sweeps,
                rng_seed=int(streams.gumbel.integers(2 ** 31)))
            logits = NetworkInstance(spec, student,
                                     relaxed=relaxed).forward(xs_a)
            loss = pixel_ce(logits, ys)
            loss.backward()
            update_factors(search_mrf, relaxed.factor_grads(), cfg.factor_lr)
            student.zero_grad()

        ema_update(teacher, student)
        record = {"iteration": it, "loss_max": losses[0], "loss_min": losses[1],
                  "quality_mean": float(pl.quality.mean()),
                  "valid_frac": float(pl.valid_mask.mean()),
                  "factor_l2": factor_l2(search_mrf),
                  "ema_decay": cfg.ema_decay}
        log.append(record)
        _log_write(cfg.log_path, record)
    return search_mrf, log


def retrain(spec, arch, pair, cfg):
    """Self-training on a fixed subnet (no factor learning, no sandwich).

    With lambda_t == 0 the loop degenerates to supervised source-only
    training and never touches target data. Returns the trained weights and
    final metrics including target mIoU from the held-out eval labels.
    """
    from .data import miou
    streams = _Streams(cfg.seed)
    student = SupernetWeights(spec, seed=streams.init_seed)
    teacher = TeacherState(student.copy(), cfg.ema_decay)
    opt = engine.AdamW(student.params(), lr=cfg.lr,
                       weight_decay=cfg.weight_decay)
    src_imgs = [im for im, _ in pair.source]
    src_lbls = [lb for _, lb in pair.source]
    log = []
    for it in range(1, cfg.iterations + 1):
        si = streams.data.integers(len(src_imgs), size=cfg.batch_size)
        xs, ys = _batch(src_imgs, si), _batch(src_lbls, si)
        xs_a = augment(xs, streams.aug, cfg.jitter, cfg.blur_prob)
        if cfg.lambda_t != 0:
            ti = streams.data.integers(len(pair.target_train),
                                       size=cfg.batch_size)
            xt = _batch(pair.target_train, ti)
            teach_logits = NetworkInstance(spec, teacher.weights,
                                           arch=arch).forward(xt)
            pl = make_pseudo(teach_logits, cfg)
            xm, plm = classmix(xs, ys, xt, pl, streams.mix)
            xm_a = augment(xm, streams.aug, cfg.jitter, cfg.blur_prob)
        opt.zero_grad()
        ls = NetworkInstance(spec, student, arch=arch).forward(xs_a)
        if cfg.lambda_t != 0:
            lt = NetworkInstance(spec, student, arch=arch).forward(xm_a)
            loss = combined_loss(ls, ys, lt, plm, cfg.lambda_t, loss=cfg.loss)
        else:
            loss = combined_loss(ls, ys, None, None, 0.0, loss=cfg.loss)
        loss.backward()
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"NaN loss at iteration {it}")
        opt.step()
        ema_update(teacher, student)
        log.append({"iteration": it, "loss": loss.item()})
        _log_write(cfg.log_path, log[-1])

    mean_iou, per_class = evaluate_miou(spec, student, arch, pair.target_eval,
                                        pair.num_classes)
    metrics = {"target_miou": mean_iou, "per_class_iou": per_class,
               "final_loss": log[-1]["loss"] if log else None}
    return student, metrics


def evaluate_miou(spec, weights, arch, labelled, num_classes, batch_size=8):
    from .data import miou
    net = NetworkInstance(spec, weights, arch=arch)
    preds, truths = [], []
    for i in range(0, len(labelled), batch_size):
        chunk = labelled[i:i + batch_size]
        x = np.stack([im for im, _ in chunk])
        logits = net.forward(x)
        preds.append(logits.data.argmax(axis=1))
        truths.append(np.stack([lb for _, lb in chunk]))
    return miou(np.concatenate(preds), np.concatenate(truths), num_classes)


def source_val_loss(spec, weights, arch, labelled, batch_size=8):
    """Mean pixel cross-entropy over a labelled split."""
    net = NetworkInstance(spec, weights, arch=arch)
    total, count = 0.0, 0
    for i in range(0, len(labelled), batch_size):
        chunk = labelled[i:i + batch_size]
        x = np.stack([im for im, _ in chunk])
        y = np.stack([lb for _, lb in chunk])
        loss = pixel_ce(net.forward(x), y)
        total += loss.item() * len(chunk)
        count += len(chunk)
    return total / count
