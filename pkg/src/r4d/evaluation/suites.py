"""Baselines, ablation grids, parameter sweeps and domain-shift evaluation.

Every suite trains its configurations one after another from the same seed,
so rows differ only in the configuration knob under study. A failing row is
recorded with its error message instead of aborting the suite.
"""

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..diffcore import MLPSpec, Optimizer, Tensor, init_mlp, mlp_forward, smooth_l1
from ..features import PackedPairs
from ..records import InputError
from ..scenesim import REGIMES, SceneSpec, generate_dataset
from ..training import DivergenceError, TrainConfig, baseline_config, lr_at, train
from .metrics import METRIC_FIELDS, MetricsReport, compute_metrics

log = logging.getLogger(__name__)

RESULT_COLUMNS = ("config", "n", "pct5", "pct10", "pct15", "abs_rel", "sq_rel", "rmse", "rmse_log", "latency_us")

EMBEDDING_GRID = (
    ("tgt", {"toggles": "tgt"}),
    ("tgt+ref", {"toggles": "tgt+ref"}),
    ("tgt+ref+uni", {"toggles": "tgt+ref+uni"}),
    ("tgt+ref+geo", {"toggles": "tgt+ref+geo"}),
    ("tgt+ref+uni+geo", {"toggles": "all"}),
)
ATTENTION_GRID = (
    ("baseline", "baseline"),
    ("r4d", {}),
    ("r4d-na", {"mode": "no_attention"}),
)
HEADS_GRID = (
    ("baseline", "baseline"),
    ("relative-only", {"mode": "relative_only", "max_refs": 1, "sigma_aug_m": 0.0}),
    ("abs-1ref", {"max_refs": 1, "lambda_rel": 0.0, "sigma_aug_m": 0.0}),
    ("abs+rel-1ref", {"max_refs": 1, "sigma_aug_m": 0.0}),
    ("abs+rel-multi", {"sigma_aug_m": 0.0}),
    ("abs+rel-multi-da", {}),
)
SUITES = {"embeddings": EMBEDDING_GRID, "attention": ATTENTION_GRID, "heads": HEADS_GRID}
SIGMA_GRID = (0.0, 1.0, 10.0, 50.0, 100.0, 200.0)
REFS_GRID = (0, 1, 2, 5, 10)


def benchmark_datasets(spec=None, n_train=5000, n_val=500):
    """Train and validation sets from one scene stream (validation continues it)."""
    spec = spec or SceneSpec()
    train_set = generate_dataset(spec, n_train, 0, "train")
    val_set = generate_dataset(spec, n_val, n_train, "val")
    return train_set, val_set


# -- results table ---------------------------------------------------------------------


@dataclass
class ResultRow:
    config: str
    report: MetricsReport
    latency_us: Optional[float] = None
    error: Optional[str] = None
    best_epoch: int = -1
    history: list = field(default_factory=list)

    @property
    def ok(self):
        return self.error is None


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def results_table(rows, delimiter=","):
    """Delimited text with a header row and one line per result row."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for row in rows:
        r = row.report
        values = [r.n, r.pct_under_5, r.pct_under_10, r.pct_under_15, r.abs_rel, r.sq_rel, r.rmse, r.rmse_log]
        w.writerow([row.config] + [_fmt(v) for v in values] + [_fmt(row.latency_us)])
    return buf.getvalue()


def parse_results_table(text, delimiter=","):
    rows = list(csv.reader(io.StringIO(text), delimiter=delimiter))
    if not rows or tuple(rows[0]) != RESULT_COLUMNS:
        raise InputError("results table header does not match the expected columns")
    out = []
    for line in rows[1:]:
        vals = [None if v == "" else float(v) for v in line[1:]]
        n = 0 if vals[0] is None else int(vals[0])
        out.append(ResultRow(line[0], MetricsReport(n, *vals[1:8]), vals[8]))
    return out


# -- latency ------------------------------------------------------------------------------


def measure_latency(model, dataset, max_refs, repeats=3, mode=None):
    """Best-of-``repeats`` wall-clock inference time per target, in microseconds.

    Covers pair construction and the batched forward pass.
    """
    n = dataset.n_targets
    if n == 0:
        raise InputError("dataset has no targets to time")
    best = math.inf
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        packed = PackedPairs(dataset, max_refs, model.config.max_distance_m)
        model.predict_packed(packed, mode=mode)
        best = min(best, time.perf_counter() - t0)
    return 1e6 * best / n


# -- baselines --------------------------------------------------------------------------------


class DisNetModel:
    """Box-size regressor: MLP on ``(1/w, 1/h, w, h, w/h)`` of the pixel box."""

    spec = MLPSpec((100, 100, 1), activate_last=False)
    output_scale_m = 50.0

    def __init__(self, params, mean, std):
        self.params = params
        self.mean = mean
        self.std = std

    @staticmethod
    def box_inputs(boxes):
        boxes = np.atleast_2d(np.asarray(boxes, dtype=np.float64))
        w, h = boxes[:, 2], boxes[:, 3]
        if np.any(w <= 0) or np.any(h <= 0):
            raise InputError("boxes need positive width and height")
        return np.stack([1.0 / w, 1.0 / h, w, h, w / h], axis=1)

    def _forward(self, x):
        z = Tensor((x - self.mean) / self.std)
        return mlp_forward(self.spec, self.params, z, "disnet").reshape(-1) * self.output_scale_m

    def predict(self, boxes):
        return np.maximum(self._forward(self.box_inputs(boxes)).data, 1.0)

    def predict_dataset(self, dataset):
        boxes = [t.bbox for s in dataset for t in s.targets]
        return self.predict(boxes)


def disnet_baseline(train_set, config=None, val_set=None):
    """Train a :class:`DisNetModel` on the targets of ``train_set``.

    Uses the optimizer, schedule, batch size and seed of ``config``; one batch
    holds ``batch_size`` targets.
    """
    config = config or TrainConfig()
    boxes = [t.bbox for s in train_set for t in s.targets]
    labels = np.array([t.label_distance_m for s in train_set for t in s.targets])
    if labels.size == 0:
        raise InputError("training set has no targets")
    x = DisNetModel.box_inputs(boxes)
    mean, std = x.mean(axis=0), x.std(axis=0)
    std[std == 0] = 1.0
    rng = np.random.default_rng(config.seed)
    params = init_mlp(DisNetModel.spec, 5, rng, "disnet")
    last = len(DisNetModel.spec.layer_widths) - 1
    params[f"disnet.{last}.b"].data[:] = labels.mean() / DisNetModel.output_scale_m
    model = DisNetModel(params, mean, std)
    opt = Optimizer(params, config.optimizer_config())
    n = labels.size
    per_epoch = math.ceil(n / config.batch_size)
    best = (math.inf, None)
    it = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in range(per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            opt.zero_grad()
            loss = smooth_l1(model._forward(x[idx]), labels[idx], config.huber_delta)
            loss.backward()
            if not math.isfinite(loss.item()):
                raise DivergenceError(it, "disnet loss is not finite")
            opt.step(lr_at(it, epoch + b / per_epoch, config))
            it += 1
        if val_set is not None:
            rep = evaluate_model(model, val_set)
            if rep.abs_rel < best[0]:
                best = (rep.abs_rel, {k: p.data.copy() for k, p in params.items()})
    if best[1] is not None:
        for k, v in best[1].items():
            params[k].data[...] = v
    return model


def direct_regression_baseline(train_set, config=None, val_set=None, **kwargs):
    """The R4D pipeline with only the target embedding and no relative loss."""
    return train(train_set, val_set, baseline_config(config or TrainConfig()), **kwargs)


def evaluate_model(model, dataset, max_refs=None, mode=None):
    """Metrics of an R4D model or a :class:`DisNetModel` on ``dataset``."""
    if isinstance(model, DisNetModel):
        preds = model.predict_dataset(dataset)
        gt = np.array([t.label_distance_m for s in dataset for t in s.targets])
        return compute_metrics(preds, gt)
    max_refs = TrainConfig.max_refs if max_refs is None else max_refs
    packed, (preds, _, _) = model.predict_dataset(dataset, max_refs, mode=mode)
    return compute_metrics(preds, packed.target_label)


# -- suites ---------------------------------------------------------------------------------


def _resolve(base, overrides):
    return baseline_config(base) if overrides == "baseline" else base.with_(**overrides)


def run_configurations(train_set, val_set, base_config, named, timing=False, progress=None):
    """Train each ``(name, overrides)`` configuration and evaluate it on ``val_set``.

    ``overrides`` is a dict of :class:`TrainConfig` changes or the string
    ``"baseline"`` for the direct-regression baseline.
    """
    rows = []
    for name, overrides in named:
        try:
            cfg = _resolve(base_config, overrides)
            result = train(train_set, val_set, cfg)
            report = evaluate_model(result.model, val_set, cfg.max_refs)
            latency = measure_latency(result.model, val_set, cfg.max_refs) if timing else None
            rows.append(ResultRow(name, report, latency, best_epoch=result.best_epoch, history=result.history))
        except Exception as exc:  # recorded per row so the rest of the suite still runs
            log.warning("configuration %s failed: %s", name, exc)
            rows.append(ResultRow(name, MetricsReport.empty(), error=f"{type(exc).__name__}: {exc}"))
        if progress:
            progress(rows[-1])
    return rows


def ablation_suite(train_set, val_set, base_config, suite="embeddings", progress=None):
    if suite not in SUITES:
        raise InputError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    return run_configurations(train_set, val_set, base_config, SUITES[suite], progress=progress)


def sigma_sweep(train_set, val_set, base_config, sigmas=SIGMA_GRID, progress=None):
    named = [(f"sigma={s:g}", {"sigma_aug_m": float(s)}) for s in sigmas]
    return run_configurations(train_set, val_set, base_config, named, progress=progress)


def refs_sweep(train_set, val_set, base_config, refs=REFS_GRID, progress=None):
    """Train with each reference cap and time inference per target.

    A cap of 0 leaves every target on the no-reference path, which makes it
    equivalent to the direct-regression baseline.
    """
    named = [(f"refs={k}", {"max_refs": int(k)}) for k in refs]
    return run_configurations(train_set, val_set, base_config, named, timing=True, progress=progress)


# -- domain shift -------------------------------------------------------------------------------


@dataclass
class DomainShiftReport:
    reports: dict  # regime -> MetricsReport
    reference_regime: str = "day"

    def degradation(self, regime):
        """Relative abs_rel change versus the reference regime."""
        base = self.reports[self.reference_regime].abs_rel
        return self.reports[regime].abs_rel / base - 1.0

    def rows(self, prefix=""):
        return [ResultRow(f"{prefix}{r}", rep) for r, rep in self.reports.items()]


def regime_validation_sets(spec, n_val, start_index, regimes=REGIMES):
    """Validation sets that share scene geometry and differ only in lighting."""
    return {r: generate_dataset(spec.with_(regime=r), n_val, start_index, "val") for r in regimes}


def domain_shift_eval(model, regime_sets, max_refs=None, reference_regime="day"):
    """Per-regime metrics for a model trained on ``reference_regime`` only."""
    if reference_regime not in regime_sets:
        raise InputError(f"regime sets must include {reference_regime!r}")
    reports = {r: evaluate_model(model, ds, max_refs) for r, ds in regime_sets.items()}
    return DomainShiftReport(reports, reference_regime)


__all__ = [
    "ATTENTION_GRID", "HEADS_GRID", "METRIC_FIELDS", "REFS_GRID", "RESULT_COLUMNS", "SIGMA_GRID", "SUITES",
    "EMBEDDING_GRID", "DisNetModel", "DomainShiftReport", "ResultRow", "ablation_suite", "benchmark_datasets",
    "direct_regression_baseline", "disnet_baseline", "domain_shift_eval", "evaluate_model",
    "measure_latency", "parse_results_table", "refs_sweep", "regime_validation_sets", "results_table",
    "run_configurations", "sigma_sweep",
]
