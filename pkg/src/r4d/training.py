"""Losses, distance augmentation, learning-rate schedules and the training loop."""

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .diffcore import Optimizer, OptimizerConfig, smooth_l1
from .evaluation.metrics import MetricsReport, compute_metrics
from .features import PackedPairs, Toggles
from .model import INFERENCE_FLOOR_M, ModelConfig, R4DModel
from .records import ConfigError, InputError

log = logging.getLogger(__name__)

MIN_AUGMENTED_DISTANCE_M = 1.0
MAX_AUGMENT_TRIES = 16


class DivergenceError(RuntimeError):
    def __init__(self, iteration, message):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    base_lr: float = 0.003
    warmup_iters: int = 100
    decay_epochs: tuple = (20, 26)
    decay_factor: float = 0.1
    schedule: str = "cosine"
    sigma_aug_m: float = 50.0
    lambda_rel: float = 1.0
    huber_delta: float = 1.0
    max_refs: int = 50
    seed: int = 42
    toggles: str = "all"
    mode: str = "full"
    optimizer: str = "momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    embed_dim: int = 64
    attn_hidden: int = 64
    head_hidden: int = 64
    head_layers: int = 2
    output_scale_m: float = 50.0
    max_distance_m: float = 300.0
    relative_choice: str = "nearest"

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.epochs < 1 or self.batch_size < 1 or self.base_lr <= 0:
            raise ConfigError("epochs, batch_size and base_lr must be positive")
        if self.sigma_aug_m < 0 or self.lambda_rel < 0:
            raise ConfigError("sigma_aug_m and lambda_rel must be non-negative")
        if self.schedule not in ("step", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.warmup_iters < 0 or self.max_refs < 0:
            raise ConfigError("warmup_iters and max_refs must be non-negative")
        self.model_config()  # validates mode and toggles

    def model_config(self):
        try:
            return ModelConfig(
                embed_dim=self.embed_dim,
                attn_hidden=self.attn_hidden,
                head_hidden=self.head_hidden,
                head_layers=self.head_layers,
                output_scale_m=self.output_scale_m,
                max_distance_m=self.max_distance_m,
                toggles=Toggles.from_string(self.toggles),
                mode=self.mode,
                relative_choice=self.relative_choice,
                relative_choice_seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def optimizer_config(self):
        rule = {"sgd": "sgd", "momentum": "momentum", "adam": "adam"}.get(self.optimizer)
        if rule is None:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        return OptimizerConfig(rule=rule, momentum=self.momentum, weight_decay=self.weight_decay,
                               grad_clip=self.grad_clip)

    def with_(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        d = asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        return d


# Long step-decay schedule (24 epochs, decay at 16 and 22) for fidelity runs.
LONG_SCHEDULE = dict(epochs=24, base_lr=0.0005, warmup_iters=1800, decay_epochs=(16, 22),
                      decay_factor=0.1, schedule="step", sigma_aug_m=200.0, max_refs=50)


def baseline_config(config):
    """Appearance-only direct regression: target embedding only, no references."""
    return config.with_(toggles="tgt", max_refs=0, lambda_rel=0.0, sigma_aug_m=0.0, mode="full")


# -- augmentation -------------------------------------------------------------------


@dataclass
class AugmentedSample:
    delta_m: float
    reference_distances_m: np.ndarray
    label_m: float
    relative_labels_m: np.ndarray


def distance_augment(label_m, reference_distances_m, sigma_m, rng):
    """Shift the label and every reference distance by one shared Gaussian draw.

    Relative distances ``label - d_r`` are unchanged. A draw that would push any
    distance to 1 m or below is redrawn, up to 16 times, after which no shift
    is applied.
    """
    if sigma_m < 0:
        raise InputError("sigma_m must be non-negative")
    dr = np.asarray(reference_distances_m, dtype=np.float64)
    delta = 0.0
    if sigma_m > 0:
        lowest = min(label_m, dr.min()) if dr.size else label_m
        for _ in range(MAX_AUGMENT_TRIES):
            draw = float(rng.normal(0.0, sigma_m))
            if lowest + draw > MIN_AUGMENTED_DISTANCE_M:
                delta = draw
                break
    return AugmentedSample(delta, dr + delta, label_m + delta, (label_m + delta) - (dr + delta))


def batch_shifts(labels, dr, pair_local, sigma_m, rng):
    """One shift per target for a batch, with the same redraw rule as
    :func:`distance_augment` (vectorized over targets)."""
    n = labels.size
    if sigma_m == 0 or n == 0:
        return np.zeros(n)
    lowest = labels.copy()
    if dr.size:
        np.minimum.at(lowest, pair_local, dr)
    delta = np.zeros(n)
    pending = np.ones(n, dtype=bool)
    for _ in range(MAX_AUGMENT_TRIES):
        draw = rng.normal(0.0, sigma_m, n)
        ok = pending & (lowest + draw > MIN_AUGMENTED_DISTANCE_M)
        delta[ok] = draw[ok]
        pending &= ~ok
        if not pending.any():
            break
    return delta


# -- loss and schedule ------------------------------------------------------------------


def compute_loss(absolute, labels, relative, relative_labels, pair_local, lambda_rel, delta_huber=1.0):
    """Mean over targets of ``huber(abs) + lambda_rel * mean_pairs huber(rel)``.

    Targets without pairs contribute only the absolute term.
    """
    labels = np.asarray(labels, dtype=np.float64)
    n_t = labels.size
    if absolute.shape != (n_t,):
        raise InputError("absolute predictions and labels are misaligned")
    if relative.shape != np.shape(relative_labels) or relative.shape[0] != len(pair_local):
        raise InputError("relative predictions and labels are misaligned")
    loss = smooth_l1(absolute, labels, delta_huber)
    if lambda_rel > 0 and relative.size:
        counts = np.bincount(pair_local, minlength=n_t).astype(np.float64)
        w = lambda_rel / (n_t * counts[pair_local])
        loss = loss + smooth_l1(relative, np.asarray(relative_labels, dtype=np.float64), delta_huber, w)
    return loss


def lr_at(iteration, epoch, config):
    """Learning rate at a global ``iteration`` during (possibly fractional) ``epoch``."""
    if iteration < 0:
        raise InputError("iteration must be non-negative")
    if config.schedule == "step":
        lr = config.base_lr * config.decay_factor ** sum(1 for e in config.decay_epochs if epoch >= e)
    else:
        progress = min(max(epoch / config.epochs, 0.0), 1.0)
        lr = config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
    if config.warmup_iters and iteration < config.warmup_iters:
        lr *= iteration / config.warmup_iters
    return lr


# -- training loop -----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: R4DModel
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: MetricsReport = None


def evaluate_packed(model, packed, iteration=None):
    preds, _, _ = model.predict_packed(packed)
    if not np.all(np.isfinite(preds)):
        raise DivergenceError(-1 if iteration is None else iteration, "validation predictions are non-finite")
    return compute_metrics(preds, packed.target_label)


def _check_finite(loss, params, iteration):
    if not math.isfinite(loss):
        raise DivergenceError(iteration, f"loss became {loss}")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise DivergenceError(iteration, f"non-finite gradient in {name}")


def train(train_set, val_set, config, packed_train=None, packed_val=None, progress=None):
    """Train a model; returns the best-by-validation-abs_rel parameters and history.

    Everything random (initialization, scene order, augmentation shifts) comes
    from ``config.seed``.
    """
    if packed_train is None:
        if len(train_set) == 0:
            raise InputError("training set is empty")
        packed_train = PackedPairs(train_set, config.max_refs, config.max_distance_m)
    if packed_val is None and val_set is not None:
        packed_val = PackedPairs(val_set, config.max_refs, config.max_distance_m)
    if packed_train.n_targets == 0:
        raise InputError("training set has no targets")

    rng = np.random.default_rng(config.seed)
    model = R4DModel(config.model_config(), seed=int(rng.integers(2**31)))
    rel_labels_all = packed_train.target_label[packed_train.pair_target] - packed_train.pair_dr
    model.set_output_offsets(
        float(packed_train.target_label.mean()),
        float(rel_labels_all.mean()) if rel_labels_all.size else 0.0,
    )
    opt = Optimizer(model.params, config.optimizer_config())

    n_scenes = packed_train.n_scenes
    iters_per_epoch = math.ceil(n_scenes / config.batch_size)
    history = []
    best = (math.inf, -1, None, None)
    iteration = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_scenes)
        total, count = 0.0, 0
        for b in range(iters_per_epoch):
            scenes = order[b * config.batch_size:(b + 1) * config.batch_size]
            targets, pairs = packed_train.batch(scenes)
            if targets.size == 0:
                continue
            counts = packed_train.target_pstart[targets + 1] - packed_train.target_pstart[targets]
            local = np.repeat(np.arange(targets.size), counts)
            labels = packed_train.target_label[targets]
            dr = packed_train.pair_dr[pairs]
            shift = batch_shifts(labels, dr, local, config.sigma_aug_m, rng)
            labels = labels + shift
            dr = dr + shift[local]

            lr = lr_at(iteration, epoch + b / iters_per_epoch, config)
            opt.zero_grad()
            out = model.forward_batch(packed_train, targets, pairs, dr=dr)
            loss = compute_loss(out.absolute, labels, out.relative, labels[local] - dr, local,
                                config.lambda_rel, config.huber_delta)
            loss.backward()
            value = loss.item()
            _check_finite(value, model.params, iteration)
            # parameters outside this batch's graph have an exact zero gradient
            opt.step(lr, {k: p.grad if p.grad is not None else np.zeros_like(p.data)
                          for k, p in model.params.items()})
            bad = next((k for k, p in model.params.items() if not np.all(np.isfinite(p.data))), None)
            if bad is not None:
                raise DivergenceError(iteration, f"parameter {bad} became non-finite after the update")
            total += value * targets.size
            count += targets.size
            iteration += 1

        row = {"epoch": epoch + 1, "lr": lr, "train_loss": total / max(count, 1)}
        if packed_val is not None:
            rep = evaluate_packed(model, packed_val, iteration)
            row.update({f"val_{k}": v for k, v in rep.as_dict().items()})
            if rep.abs_rel < best[0]:
                best = (rep.abs_rel, epoch + 1, model.copy_params(), rep)
        history.append(row)
        if progress:
            progress(row)
        log.debug("epoch %d: %s", epoch + 1, row)

    if best[2] is not None:
        model.load_arrays(best[2])
    return TrainResult(model, history, best[1], best[3])


def predictions_clamped(values):
    return np.maximum(values, INFERENCE_FLOOR_M)
