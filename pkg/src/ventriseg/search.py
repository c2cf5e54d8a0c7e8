"""Random hyperparameter search, inference benchmarking and input optimisation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import config as cfgio
from .data import AugmentParams
from .graph import count_flops, count_parameters, peak_activation_bytes
from .models import ARCHS, build
from .phantom import resample_study
from .tensor import Rng, rng_normal
from .train import TrainConfig, TrainHistory, TrainingDivergence, masked_bce_loss, train

MAX_RESAMPLES = 100


@dataclass(frozen=True)
class Choice:
    values: tuple

    def sample(self, rng):
        return self.values[int(rng.integers(0, len(self.values)))]


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low <= self.high:
            raise ValueError(f"log-uniform needs 0 < low <= high, got {self.low}, {self.high}")

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))


# Shared across both architectures; aug_* are augmentation strengths.
SHARED_RULES = {
    "batch_size": Choice((4, 8, 16)),
    "learning_rate": LogUniform(3e-4, 3e-3),
    "dropout_p": Choice((0.0, 0.1, 0.2)),
    "crop_fraction": Choice((0.75, 0.875, 1.0)),
    "image_size": Choice((48, 64)),
    "aug_rotation": Choice((0.0, 0.1, 0.2)),
    "aug_shift": Choice((0.0, 0.05)),
    "aug_zoom": Choice((0.0, 0.1)),
    "aug_shear": Choice((0.0, 0.1)),
}

ARCH_RULES = {
    "deepventricle": {
        "num_pool_layers": Choice((2, 3, 4)),
        "convs_per_block": Choice((1, 2)),
        "initial_filters": Choice((8, 16, 32)),
        "use_batchnorm": Choice((True, False)),
    },
    "fastventricle": {
        "asym_kernel": Choice((3, 5, 7)),
        "section2_repeats": Choice((0, 1, 2)),
        "initial_bottlenecks": Choice((2, 3, 4)),
        "initial_filters": Choice((8, 16)),
        "projection_ratio": Choice((2, 4)),
        "use_skip_connections": Choice((True, False)),
    },
}


@dataclass
class SearchSpace:
    arch: str
    rules: dict

    @classmethod
    def default(cls, arch):
        if arch not in ARCH_RULES:
            raise cfgio.ConfigError("arch", f"unknown architecture {arch!r}")
        return cls(arch, {**SHARED_RULES, **ARCH_RULES[arch]})

    def sample(self, rng: Rng) -> dict:
        """Draw one valid configuration, resampling on invariant violations."""
        for attempt in range(MAX_RESAMPLES):
            r = rng.child(f"draw{attempt}")
            params = {k: rule.sample(r.child(k)) for k, rule in sorted(self.rules.items())}
            try:
                split_params(self.arch, params)
            except (cfgio.ConfigError, ValueError):
                continue
            return params
        raise RuntimeError(f"no valid configuration after {MAX_RESAMPLES} draws")


def split_params(arch, params):
    """Split a flat trial dict into (model config, train config, augment params, crop, size)."""
    cls = ARCHS[arch]
    model_keys = {f.name for f in fields(cls)}
    train_keys = {f.name for f in fields(TrainConfig)}
    size = int(params.get("image_size", 64))
    model = cls(**{k: v for k, v in params.items() if k in model_keys and k != "input_size"},
                input_size=size)
    tcfg = TrainConfig(**{k: v for k, v in params.items() if k in train_keys})
    aug = AugmentParams(**{k[4:]: v for k, v in params.items() if k.startswith("aug_")})
    return model, tcfg, aug, float(params.get("crop_fraction", 1.0)), size


def config_hash(params) -> str:
    text = "".join(f"{k}={cfgio._format(v)}\n" for k, v in sorted(params.items()))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


@dataclass
class TrialRecord:
    trial_id: int
    arch: str
    params: dict
    history: TrainHistory = field(default_factory=TrainHistory)
    val_accuracy: float = float("nan")
    mean_val_rave: float = float("nan")
    wall_seconds: float = 0.0
    diverged: bool = False

    @property
    def valid(self):
        return (not self.diverged and math.isfinite(self.val_accuracy)
                and math.isfinite(self.mean_val_rave))


def run_trial(trial_id, arch, params, epochs, seed, dataset, base=None) -> TrialRecord:
    """Train one sampled configuration and score it on the validation studies."""
    train_studies, val_studies = dataset
    model_cfg, tcfg, aug, crop, size = split_params(arch, params)
    base = base or {}
    tcfg = TrainConfig(**{**tcfg.__dict__, **base, "epochs": epochs, "seed": seed})
    tr = [resample_study(s, crop, size) for s in train_studies]
    va = [resample_study(s, crop, size) for s in val_studies]
    t0 = time.perf_counter()
    record = TrialRecord(trial_id, arch, dict(params))
    try:
        graph = build(model_cfg, seed=seed)
        _, history = train(graph, tr, tcfg, va, augment_params=aug)
    except TrainingDivergence:
        record.diverged = True
    else:
        record.history = history
        best = history.best_epoch if history.best_epoch >= 0 else len(history.val_loss) - 1
        if best >= 0:
            record.val_accuracy = history.val_accuracy[best]
            record.mean_val_rave = history.val_rave[best]
    record.wall_seconds = time.perf_counter() - t0
    return record


def select_winner(trials, top_k=3):
    """Top ``top_k`` by validation accuracy, then the lowest mean RAVE among them.

    Ties break towards the lower ``trial_id`` in both stages; diverged or
    non-finite trials are excluded.
    """
    valid = [t for t in trials if t.valid]
    if len(valid) < top_k:
        raise ValueError(f"need at least {top_k} non-diverged trials, got {len(valid)}")
    top = sorted(valid, key=lambda t: (-t.val_accuracy, t.trial_id))[:top_k]
    winner = min(top, key=lambda t: (t.mean_val_rave, t.trial_id))
    return top, winner


def random_search(space: SearchSpace, n_trials, epochs=20, seed=0, dataset=None, runner=None,
                  base=None):
    """Run ``n_trials`` independent random trials and pick the winner.

    ``runner(trial_id, arch, params, epochs, seed, dataset)`` returns a
    :class:`TrialRecord`; the default trains on ``dataset = (train, val)``.
    ``base`` holds fixed TrainConfig overrides (for example ``dtype``).
    """
    if n_trials < 3:
        raise ValueError(f"random search needs at least 3 trials, got {n_trials}")
    rng = Rng(seed, ("search", space.arch))
    trials = []
    for i in range(n_trials):
        params = space.sample(rng.child(f"trial{i}"))
        trial_seed = int(rng.child(f"seed{i}").integers(0, 2**62))
        if runner is None:
            rec = run_trial(i, space.arch, params, epochs, trial_seed, dataset, base=base)
        else:
            rec = runner(i, space.arch, params, epochs, trial_seed, dataset)
        trials.append(rec)
    _, winner = select_winner(trials)
    return trials, winner


TRIAL_COLUMNS = ("trial_id", "arch", "config_hash", "val_accuracy", "mean_val_rave",
                 "wall_seconds", "diverged", "epochs", "config")


def trials_to_csv(trials) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRIAL_COLUMNS)
    for t in trials:
        conf = ";".join(f"{k}={cfgio._format(v)}" for k, v in sorted(t.params.items()))
        w.writerow([t.trial_id, t.arch, config_hash(t.params), repr(float(t.val_accuracy)),
                    repr(float(t.mean_val_rave)), f"{t.wall_seconds:.3f}", int(t.diverged),
                    len(t.history.train_loss), conf])
    return buf.getvalue()


# --------------------------------------------------------------------------
# benchmark


@dataclass
class BenchResult:
    median_ms_per_sample: float
    flops: int
    params: int
    peak_activation_bytes: int
    batch: int
    input_shape: tuple
    repetitions: int


def benchmark_inference(graph, input_shape, batch=16, repetitions=10, warmup=2, seed=0):
    """Median inference wall time per sample plus the static cost model.

    ``input_shape`` is ``(channels, height, width)``.
    """
    if repetitions < 5:
        raise ValueError("benchmark needs at least 5 repetitions")
    if warmup < 2:
        raise ValueError("benchmark needs at least 2 warm-up runs")
    shape = (batch,) + tuple(input_shape)
    x = rng_normal(Rng(seed, ("bench",)), shape).astype(graph.dtype)
    times = []
    for i in range(warmup + repetitions):
        t0 = time.perf_counter()
        graph.forward(x, train=False)
        dt = time.perf_counter() - t0
        if i >= warmup:
            times.append(dt)
    graph.clear_cache()
    return BenchResult(float(np.median(times)) * 1000.0 / batch, count_flops(graph, shape),
                       count_parameters(graph),
                       peak_activation_bytes(graph, shape, itemsize=graph.dtype.itemsize),
                       batch, tuple(input_shape), repetitions)


def bench_to_json(results: dict) -> str:
    """``results`` maps a model label to its :class:`BenchResult`."""
    out = {}
    for name, r in results.items():
        out[name] = {"inference_ms_per_sample": r.median_ms_per_sample, "flops": r.flops,
                     "parameters": r.params, "peak_activation_bytes": r.peak_activation_bytes,
                     "peak_activation_mb": r.peak_activation_bytes / 2**20, "batch": r.batch,
                     "input_shape": list(r.input_shape), "repetitions": r.repetitions}
    return json.dumps(out, indent=2, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# input optimisation


def _input_loss(graph, x, target, presence):
    logits = graph.forward(x, train=False)
    loss, grad = masked_bce_loss(logits, target, presence)
    return loss, grad


def optimize_input(graph, target_masks, steps=500, step_size=1.0, seed=0, backtracking=True,
                   max_halvings=40):
    """Gradient descent on the input pixels towards ``target_masks``.

    Starts from standard-normal noise; parameters stay frozen (only the
    input gradient is formed). With backtracking a step that raises the loss
    is retried at half the step size, so the loss curve never increases;
    accepted steps grow the step size by 1.5x.
    Returns ``(image, losses)`` with ``losses[0]`` the loss of the noise.
    """
    target = np.asarray(target_masks, dtype=np.float64)
    if target.ndim != 4:
        raise ValueError(f"target must be (B, C, H, W), got {target.shape}")
    B, C, H, W = target.shape
    presence = np.ones((B, C), dtype=bool)
    x = rng_normal(Rng(seed, ("dream",)), (B, graph.in_channels, H, W)).astype(graph.dtype)
    loss, grad = _input_loss(graph, x, target, presence)
    losses = [loss]
    step = float(step_size)
    for i in range(steps):
        gx = graph.backward(grad, param_grads=False)
        for _ in range(max_halvings if backtracking else 1):
            cand = (x - step * gx).astype(graph.dtype)
            c_loss, c_grad = _input_loss(graph, cand, target, presence)
            if not math.isfinite(c_loss):
                if not backtracking:
                    raise TrainingDivergence(f"divergence at input step {i}")
            elif not backtracking or c_loss <= loss:
                x, loss, grad = cand, c_loss, c_grad
                if backtracking:
                    step *= 1.5
                break
            step *= 0.5
        else:
            if backtracking:
                # no acceptable step: the cache holds the rejected candidate
                loss, grad = _input_loss(graph, x, target, presence)
        if not math.isfinite(loss):
            raise TrainingDivergence(f"divergence at input step {i}")
        losses.append(loss)
    graph.clear_cache()
    return x, np.asarray(losses)
