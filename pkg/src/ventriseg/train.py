"""Masked-loss training with Adam, checkpoints, and mask inference."""

from __future__ import annotations

import csv
import io
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgio
from .data import PHASES, STRUCTURES, AugmentParams, augment, normalize_percentile, stack_slices
from .graph import ModelGraph
from .layers import BatchNorm, SpatialDropout, sigmoid
from .metrics import mask_volume, rave
from .models import ARCHS, arch_name, build
from .tensor import Rng, load_tensor, save_tensor

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 20
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_p: float = 0.1
    binarize_threshold: float = 0.5
    seed: int = 0
    slices_per_phase: int = 0       # slices drawn per study phase each epoch; 0 means all
    dtype: str = "float64"
    augment: bool = True
    bn_calibration_phases: int = 8  # clean phase stacks used to refresh batchnorm stats; 0 = off

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise cfgio.ConfigError("learning_rate", "must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise cfgio.ConfigError("dropout_p", "must lie in [0, 1)")
        if self.batch_size < 1:
            raise cfgio.ConfigError("batch_size", "must be >= 1")
        if self.epochs < 0:
            raise cfgio.ConfigError("epochs", "must be >= 0")
        if not 0.0 < self.binarize_threshold < 1.0:
            raise cfgio.ConfigError("binarize_threshold", "must lie in (0, 1)")
        if self.dtype not in ("float64", "float32"):
            raise cfgio.ConfigError("dtype", "must be float64 or float32")
        if self.slices_per_phase < 0:
            raise cfgio.ConfigError("slices_per_phase", "must be >= 0")
        if self.bn_calibration_phases < 0:
            raise cfgio.ConfigError("bn_calibration_phases", "must be >= 0")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    val_rave: list = field(default_factory=list)
    initial_loss: float = float("nan")
    best_epoch: int = -1

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_accuracy", "val_mean_rave"])
        for e, row in enumerate(zip(self.train_loss, self.val_loss, self.val_accuracy,
                                    self.val_rave)):
            w.writerow([e] + [repr(float(v)) for v in row])
        return buf.getvalue()


# --------------------------------------------------------------------------
# loss and optimiser


def masked_bce_loss(logits, targets, presence):
    """Sigmoid cross-entropy averaged over the cells whose structure is annotated.

    ``presence`` is a ``(B, C)`` boolean array. Cells of absent structures
    are never read: they add nothing to the loss and get an exact zero
    gradient. With nothing annotated the loss is 0.
    """
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} vs targets {targets.shape}")
    presence = np.asarray(presence, dtype=bool)
    if presence.shape != logits.shape[:2]:
        raise ValueError(f"presence {presence.shape} does not match logits {logits.shape[:2]}")
    sel = np.broadcast_to(presence[:, :, None, None], logits.shape)
    z = logits[sel].astype(np.float64)
    t = targets[sel].astype(np.float64)
    grad = np.zeros(logits.shape, dtype=logits.dtype)
    n = z.size
    if n == 0:
        return 0.0, grad
    cells = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    grad[sel] = (sigmoid(z) - t) / n
    return float(cells.sum() / n), grad


def adam_step(params, grads, moments, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update.

    ``moments`` maps each key to ``(m, v)``; missing keys start at zero.
    Returns ``(new_params, new_moments)`` without touching the inputs.
    """
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    new_params, new_moments = {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads[k]
        m, v = moments.get(k, (np.zeros_like(p), np.zeros_like(p)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_params[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        new_moments[k] = (m, v)
    return new_params, new_moments


class Adam:
    """Stateful wrapper around :func:`adam_step` that updates arrays in place."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.moments = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        new, self.moments = adam_step(params, grads, self.moments, self.t, self.lr,
                                      self.beta1, self.beta2, self.eps)
        for k, p in params.items():
            p[...] = new[k]


# --------------------------------------------------------------------------
# inference and evaluation


def predict_proba(graph: ModelGraph, images):
    """Per-structure probabilities for a batch of already normalised images."""
    return sigmoid(graph.forward(images, train=False).astype(np.float64))


def infer_masks(graph: ModelGraph, study, threshold=0.5):
    """Binary ``(n_slices, 3, H, W)`` masks per phase; each phase is one batch."""
    out = {}
    for phase in PHASES:
        images, _, _ = stack_slices(study.phases[phase])
        prob = predict_proba(graph, normalize_percentile(images))
        out[phase] = (prob > threshold).astype(np.uint8)
    return out


def evaluate(graph, studies, threshold=0.5):
    """(loss, pixel accuracy, mean RAVE) over annotated structures of ``studies``."""
    losses, weights, accs, raves = [], [], [], []
    for study in studies:
        present = study.presence
        for phase in PHASES:
            images, masks, presence = stack_slices(study.phases[phase])
            logits = graph.forward(normalize_percentile(images), train=False)
            loss, _ = masked_bce_loss(logits, masks, presence)
            n = int(presence.sum())
            if n:
                losses.append(loss)
                weights.append(n)
            pred = (sigmoid(logits.astype(np.float64)) > threshold).astype(np.uint8)
            for k in np.flatnonzero(present):
                accs.append(float(np.mean(pred[:, k] == masks[:, k])))
                vt = mask_volume(study.truth_masks[phase][:, k], study.pixel_spacing_mm,
                                 study.slice_spacing_mm)
                vp = mask_volume(pred[:, k], study.pixel_spacing_mm, study.slice_spacing_mm)
                if vt > 0:
                    raves.append(rave(vp, vt))
    loss = float(np.average(losses, weights=weights)) if losses else float("nan")
    acc = float(np.mean(accs)) if accs else float("nan")
    mean_rave = float(np.mean(raves)) if raves else float("nan")
    return loss, acc, mean_rave


# --------------------------------------------------------------------------
# training loop


def _epoch_items(studies, config, rng):
    items = []
    for si, study in enumerate(studies):
        for phase in PHASES:
            n = len(study.phases[phase])
            if config.slices_per_phase and config.slices_per_phase < n:
                ks = np.sort(rng.child(f"{study.study_id}/{phase}")
                             .permutation(n)[:config.slices_per_phase])
            else:
                ks = range(n)
            items.extend((si, phase, int(k)) for k in ks)
    order = rng.child("shuffle").permutation(len(items))
    return [items[i] for i in order]


def recalibrate_batchnorm(graph: ModelGraph, batches):
    """Replace batchnorm running statistics by exact averages over ``batches``.

    Each batch is forwarded in training mode with dropout switched off; the
    running mean and (biased) variance become the equal-weight average of
    the per-batch statistics. Parameters are untouched. Running averages
    collected on augmented training batches drift away from what clean
    inference stacks look like, which this removes.
    """
    norms = [layer for _, layer in graph.layers() if isinstance(layer, BatchNorm)]
    drops = [layer for _, layer in graph.layers() if isinstance(layer, SpatialDropout)]
    if not norms or not batches:
        return
    saved_m = [bn.momentum for bn in norms]
    saved_p = [d.p for d in drops]
    try:
        for d in drops:
            d.p = 0.0
        for k, x in enumerate(batches, start=1):
            for bn in norms:
                bn.momentum = (k - 1) / k
            graph.forward(x, train=True)
    finally:
        for bn, m in zip(norms, saved_m):
            bn.momentum = m
        for d, p in zip(drops, saved_p):
            d.p = p
        graph.clear_cache()


def _calibration_stacks(studies, n_phases, rng, dtype):
    """Normalised clean phase stacks, picked once per run, as inference sees them."""
    pairs = [(si, ph) for si in range(len(studies)) for ph in PHASES]
    order = rng.permutation(len(pairs))[:n_phases]
    stacks = []
    for i in sorted(order):
        si, ph = pairs[i]
        images, _, _ = stack_slices(studies[si].phases[ph])
        stacks.append(normalize_percentile(images).astype(dtype))
    return stacks


def _set_dropout(graph, p):
    for _, layer in graph.layers():
        if isinstance(layer, SpatialDropout):
            layer.p = p


def train(graph: ModelGraph, studies, config: TrainConfig, val_studies=(),
          augment_params: AugmentParams | None = None, callback=None):
    """Train ``graph`` in place; returns ``(graph, history)``.

    Each epoch visits every study phase of ``studies`` (all slices, or
    ``slices_per_phase`` random ones) in a shuffled order. Training batches
    are augmented, then percentile-normalised as a batch. When validation
    studies are given, the parameters with the lowest validation loss are
    restored at the end. Before each validation pass the batchnorm running
    statistics are recomputed on a fixed set of clean training phase stacks
    (see :func:`recalibrate_batchnorm`).
    """
    if not studies:
        raise ValueError("training set is empty")
    out_ch = graph.shapes((1, graph.in_channels, 8 * 16, 8 * 16))[graph.output][1]
    if out_ch != len(STRUCTURES):
        raise ValueError(f"graph must emit {len(STRUCTURES)} channels, got {out_ch}")
    dtype = np.dtype(config.dtype)
    graph.astype(dtype)
    _set_dropout(graph, config.dropout_p)
    aug = augment_params if augment_params is not None else AugmentParams()
    rng = Rng(config.seed, ("train",))
    opt = Adam(config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)
    params = graph.parameters()
    history = TrainHistory()
    best_loss, best_state = np.inf, None
    calib = []
    if config.bn_calibration_phases:
        calib = _calibration_stacks(studies, config.bn_calibration_phases,
                                    rng.child("bn_calibration"), dtype)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        erng = rng.child(f"epoch{epoch}")
        items = _epoch_items(studies, config, erng)
        total, count = 0.0, 0
        for bi in range(0, len(items), config.batch_size):
            batch = items[bi:bi + config.batch_size]
            slices = [studies[si].phases[ph][k] for si, ph, k in batch]
            if config.augment:
                cval = min(float(s.image.min()) for s in slices)
                slices = [augment(s, aug, erng.child(f"aug{bi + j}"), cval=cval)
                          for j, s in enumerate(slices)]
            images, masks, presence = stack_slices(slices)
            x = normalize_percentile(images).astype(dtype)
            logits = graph.forward(x, train=True, rng=erng.child(f"fwd{bi}"))
            loss, grad = masked_bce_loss(logits, masks, presence)
            if not np.isfinite(loss):
                raise TrainingDivergence(f"divergence at epoch {epoch} batch {bi // config.batch_size}")
            if epoch == 0 and bi == 0:
                history.initial_loss = loss
            graph.backward(grad)
            opt.step(params, graph.gradients())
            total += loss * len(batch)
            count += len(batch)
        history.train_loss.append(total / count)
        recalibrate_batchnorm(graph, calib)
        if val_studies:
            vl, va, vr = evaluate(graph, val_studies, config.binarize_threshold)
        else:
            vl = va = vr = float("nan")
        history.val_loss.append(vl)
        history.val_accuracy.append(va)
        history.val_rave.append(vr)
        if val_studies and vl < best_loss:
            best_loss, best_state = vl, graph.state()
            history.best_epoch = epoch
        log.info("epoch %d train %.4f val %.4f acc %.4f rave %.4f (%.1fs)", epoch,
                 history.train_loss[-1], vl, va, vr, time.perf_counter() - t0)
        if callback is not None:
            callback(epoch, history)
    if best_state is not None:
        graph.load_state(best_state)
    graph.clear_cache()
    return graph, history


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(graph: ModelGraph, directory):
    """Write ``config.cfg``, ``manifest.txt`` and one ``.vt4`` blob per tensor."""
    os.makedirs(directory, exist_ok=True)
    cfgio.dump(graph.config, os.path.join(directory, "config.cfg"))
    lines = [f"arch={arch_name(graph.config)}\n"]
    for i, (key, value) in enumerate(sorted(graph.state().items())):
        fname = f"t{i:04d}.vt4"
        save_tensor(os.path.join(directory, fname), value.astype(np.float64).reshape(1, 1, 1, -1))
        shape = ",".join(str(d) for d in value.shape)
        lines.append(f"{key} {shape} {fname}\n")
    with open(os.path.join(directory, "manifest.txt"), "w", encoding="ascii") as fh:
        fh.writelines(lines)


def load_checkpoint(directory) -> ModelGraph:
    with open(os.path.join(directory, "manifest.txt"), encoding="ascii") as fh:
        lines = fh.read().splitlines()
    arch = lines[0].split("=", 1)[1]
    config = cfgio.load(ARCHS[arch], os.path.join(directory, "config.cfg"))
    graph = build(config)
    state = {}
    for line in lines[1:]:
        key, shape, fname = line.split()
        dims = tuple(int(d) for d in shape.split(","))
        state[key] = load_tensor(os.path.join(directory, fname)).reshape(dims)
    graph.load_state(state)
    return graph
